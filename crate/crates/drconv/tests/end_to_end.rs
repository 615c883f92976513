//! Consumer-level flow through the public API: synthesize data, build a
//! model, train it briefly, round-trip it through a checkpoint, and score
//! its masks against the ground-truth partition.

use drconv::agreement::{agreement_with_null, mask_agreement};
use drconv::conv::Padding;
use drconv::train::checkpoint;
use drconv::train::data::{synth_regions, SynthSpec};
use drconv::train::model::{BlockKind, BlockSpec, InputSpec, Model, ModelConfig};
use drconv::train::{evaluate, train, TrainConfig};

fn tiny_synth() -> SynthSpec {
    SynthSpec {
        count: 96,
        height: 12,
        width: 12,
        classes: 2,
        ..SynthSpec::default()
    }
}

fn block(kind: BlockKind, out_channels: usize, regions: usize, pool_after: bool) -> BlockSpec {
    BlockSpec {
        kind,
        out_channels,
        k: 3,
        stride: 1,
        padding: Padding::SameZero,
        regions,
        hidden: 0,
        pool_after,
    }
}

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        input: InputSpec { height: 12, width: 12, channels: 1 },
        classes: 2,
        blocks: vec![
            block(BlockKind::Standard, 4, 0, true),
            block(BlockKind::Dynamic, 6, 3, false),
        ],
        head_width: 0,
    }
}

#[test]
fn train_checkpoint_and_score_round_trip() {
    let (data, truth) = synth_regions(&tiny_synth(), 11).unwrap();
    let (train_set, test_set) = data.split(72).unwrap();

    let mut model = Model::init(&tiny_model_config(), 3).unwrap();
    let (loss_before, _) = evaluate(&model, &test_set, 1).unwrap();

    let cfg = TrainConfig { epochs: 3, batch_size: 16, lr: 0.02, ..TrainConfig::default() };
    let metrics = train(&mut model, &train_set, Some(&test_set), &cfg).unwrap();
    assert_eq!(metrics.len(), 3);
    let last = metrics.last().unwrap();
    assert!(last.train_loss.is_finite());
    assert!(
        last.train_loss < loss_before + 0.05,
        "training made things notably worse: {} -> {}",
        loss_before,
        last.train_loss
    );
    assert!(last.guide_grad_norm.is_some(), "a routed block reports guide gradients");

    // Reported test metrics must equal a fresh evaluation of the final model.
    let (l, a) = evaluate(&model, &test_set, 1).unwrap();
    assert!((last.test_loss.unwrap() - l).abs() < 1e-12);
    assert!((last.test_accuracy.unwrap() - a).abs() < 1e-12);

    // Checkpoint round trip preserves every parameter and the config.
    let bytes = checkpoint::to_bytes(&model).unwrap();
    let restored = checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(restored, model);
    assert_eq!(checkpoint::to_bytes(&restored).unwrap(), bytes, "re-save is byte-identical");

    // The mask pipeline runs end to end on the trained model: grab the
    // routed block's mask for one image and score it against the truth.
    let x = train_set.item(0);
    let (_, masks) = model.forward_masks(&x).unwrap();
    assert_eq!(masks.len(), 1, "one routed block");
    let (block_index, mask) = &masks[0];
    assert_eq!(*block_index, 1);

    let truth_one = {
        // Slice image 0's truth out of the dataset-wide mask.
        let ids: Vec<usize> = (0..12 * 12).map(|p| truth.get(0, p / 12, p % 12)).collect();
        drconv::conv::GuidedMask::new(1, 12, 12, ids).unwrap()
    };
    let score = mask_agreement(mask, &truth_one).unwrap();
    assert!((0.0..=1.0).contains(&score), "agreement is a fraction, got {score}");

    let report = agreement_with_null(mask, &truth_one, 50, 123).unwrap();
    assert!(report.mean >= 0.0 && report.mean <= 1.0);
    assert!(report.null_p95 >= 0.0 && report.null_p95 <= 1.0);
}

#[test]
fn self_agreement_is_perfect_and_beats_its_null() {
    // Scoring the truth against itself is the degenerate upper bound: mean
    // 1.0, and no spatial shuffle of a non-constant partition can match it.
    let (_, truth) = synth_regions(&tiny_synth(), 29).unwrap();
    let report = agreement_with_null(&truth, &truth, 100, 7).unwrap();
    assert!((report.mean - 1.0).abs() < 1e-12);
    assert!(report.beats_chance(), "identity must beat its own permutation null");
}

#[test]
fn seeds_reproduce_training_exactly() {
    let (data, _) = synth_regions(&tiny_synth(), 17).unwrap();
    let cfg = TrainConfig { epochs: 2, batch_size: 12, lr: 0.02, ..TrainConfig::default() };

    let run = || {
        let mut m = Model::init(&tiny_model_config(), 5).unwrap();
        let metrics = train(&mut m, &data, None, &cfg).unwrap();
        (checkpoint::to_bytes(&m).unwrap(), metrics)
    };
    let (b1, m1) = run();
    let (b2, m2) = run();
    assert_eq!(b1, b2, "same seed, same bytes");
    assert_eq!(m1, m2, "same seed, same metrics");
}
