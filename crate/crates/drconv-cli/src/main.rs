//! Command-line front end for region-routed convolutions: finite-difference
//! gradient audits, small training runs, parameter/multiply-add accounting,
//! and rendering of learned region maps.
//!
//! Exit codes: `0` success, `1` a verification failed or training diverged,
//! `2` bad usage, configuration, or data.

mod viz;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use drconv::conv::{ConvSpec, GuidedMask, Padding};
use drconv::cost;
use drconv::layer::DrConvLayer;
use drconv::tensor::{Shape4, Tensor4};
use drconv::train::checkpoint;
use drconv::train::data::{load_idx_images, load_idx_labels, synth_regions, Dataset, SynthSpec};
use drconv::train::model::{BlockKind, BlockSpec, InputSpec, Model, ModelConfig};
use drconv::train::{format_metrics, train, TrainConfig};
use drconv::verify::{check_layer_gradients, CheckConfig};
use drconv::{Error, Result};

#[derive(Parser)]
#[command(
    name = "drconv",
    version,
    about = "Region-routed convolutions: gradient audits, training, cost accounting, visualization"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Audit every analytic gradient path of one layer against finite
    /// differences
    Gradcheck(GradcheckArgs),
    /// Train a small classifier and report per-epoch metrics
    Train(TrainArgs),
    /// Tabulate parameter and multiply-add counts
    Cost(CostArgs),
    /// Render inputs, reference regions, and learned routing masks as
    /// PGM/PPM files
    Visualize(VizArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    /// Filters generated per sample
    Dynamic,
    /// One shared trainable filter bank
    Fixed,
}

#[derive(Clone, Copy, ValueEnum)]
enum PadArg {
    /// No padding, output shrinks
    Valid,
    /// Zero padding keeping the stride-1 output size
    SameZero,
    /// Wrap-around padding
    Circular,
}

impl From<PadArg> for Padding {
    fn from(p: PadArg) -> Padding {
        match p {
            PadArg::Valid => Padding::Valid,
            PadArg::SameZero => Padding::SameZero,
            PadArg::Circular => Padding::Circular,
        }
    }
}

#[derive(Args)]
struct GradcheckArgs {
    /// Where the layer's filters come from
    #[arg(long, value_enum, default_value_t = ModeArg::Dynamic)]
    mode: ModeArg,
    #[arg(long, default_value_t = 2)]
    in_channels: usize,
    #[arg(long, default_value_t = 3)]
    out_channels: usize,
    /// Kernel size (odd)
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value_t = 3)]
    regions: usize,
    /// Generator hidden width (default: regions * in-channels)
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long, default_value_t = 6)]
    height: usize,
    #[arg(long, default_value_t = 7)]
    width: usize,
    #[arg(long, default_value_t = 2)]
    batch: usize,
    #[arg(long, default_value_t = 1)]
    stride: usize,
    #[arg(long, value_enum, default_value_t = PadArg::SameZero)]
    padding: PadArg,
    /// Seed for the layer parameters, the input, and the loss weighting
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Central-difference step
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Relative tolerance
    #[arg(long, default_value_t = 1e-4)]
    rtol: f64,
    /// Absolute tolerance floor
    #[arg(long, default_value_t = 1e-8)]
    atol: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// Data source: `synth` or `idx:IMAGES,LABELS`
    #[arg(long, default_value = "synth")]
    data: String,
    /// Held-out data source (same syntax); default: split off a fraction
    /// of --data
    #[arg(long)]
    test_data: Option<String>,
    /// Fraction of --data held out when --test-data is absent (0 disables
    /// evaluation)
    #[arg(long, default_value_t = 0.2)]
    holdout: f64,
    /// JSON file overriding the synthetic data parameters
    #[arg(long)]
    synth_config: Option<PathBuf>,
    /// Seed for synthetic data generation
    #[arg(long, default_value_t = 7)]
    data_seed: u64,
    /// JSON model description (default: a small two-block network sized to
    /// the data)
    #[arg(long, conflicts_with = "resume")]
    model_config: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Initial learning rate (decays linearly to zero)
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 4e-5)]
    weight_decay: f64,
    /// Worker threads for gradient computation (any value gives identical
    /// results)
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Seed for model initialization and batch shuffling
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the trained model here
    #[arg(long)]
    save: Option<PathBuf>,
    /// Continue from this checkpoint instead of a fresh model
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct CostArgs {
    /// JSON model description to tabulate component by component (default:
    /// compare single-layer variants)
    #[arg(long)]
    model_config: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    in_channels: usize,
    #[arg(long, default_value_t = 4)]
    out_channels: usize,
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long, default_value_t = 32)]
    width: usize,
    #[arg(long, default_value_t = 4)]
    regions: usize,
    /// Generator hidden width (default: regions * in-channels)
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long, default_value_t = 1)]
    stride: usize,
}

#[derive(Args)]
struct VizArgs {
    /// Directory the images are written into (created if missing)
    #[arg(long)]
    out: PathBuf,
    /// Data source: `synth` or `idx:IMAGES,LABELS`
    #[arg(long, default_value = "synth")]
    data: String,
    /// JSON file overriding the synthetic data parameters
    #[arg(long)]
    synth_config: Option<PathBuf>,
    /// Seed for synthetic data generation
    #[arg(long, default_value_t = 7)]
    data_seed: u64,
    /// Trained model whose routing masks are rendered next to the data
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// How many images to render
    #[arg(long, default_value_t = 4)]
    count: usize,
    /// Nearest-neighbor upscale factor
    #[arg(long, default_value_t = 8)]
    scale: usize,
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(match e {
                Error::Diverged { .. } => 1,
                _ => 2,
            });
        }
    }
}

fn run(cli: Cli) -> Result<i32> {
    match cli.cmd {
        Cmd::Gradcheck(a) => run_gradcheck(a),
        Cmd::Train(a) => run_train(a),
        Cmd::Cost(a) => run_cost(a),
        Cmd::Visualize(a) => run_visualize(a),
    }
}

fn run_gradcheck(a: GradcheckArgs) -> Result<i32> {
    let spec = ConvSpec::new(a.in_channels, a.out_channels, a.k, a.stride, a.padding.into());
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let layer = match a.mode {
        ModeArg::Dynamic => DrConvLayer::init(spec, a.regions, a.hidden, &mut rng)?,
        ModeArg::Fixed => DrConvLayer::init_fixed(spec, a.regions, &mut rng)?,
    };
    let x = Tensor4::from_fn(Shape4::new(a.batch, a.height, a.width, a.in_channels), |_, _, _, _| {
        rng.gen_range(-1.0..1.0)
    })?;
    let cfg = CheckConfig { step: a.step, rtol: a.rtol, atol: a.atol };
    let report = check_layer_gradients(&layer, &x, &cfg, a.seed.wrapping_add(1))?;
    print!("{report}");
    if report.pass() {
        println!("all gradient paths verified");
        Ok(0)
    } else {
        println!("GRADIENT CHECK FAILED");
        Ok(1)
    }
}

/// Load a dataset plus, for synthetic data, the ground-truth region map.
fn load_data(src: &str, synth_config: &Option<PathBuf>, data_seed: u64) -> Result<(Dataset, Option<GuidedMask>)> {
    if src == "synth" {
        let spec: SynthSpec = match synth_config {
            Some(p) => serde_json::from_str(&fs::read_to_string(p)?)
                .map_err(|e| Error::Config(format!("bad synthetic data config {}: {e}", p.display())))?,
            None => SynthSpec::default(),
        };
        let (ds, truth) = synth_regions(&spec, data_seed)?;
        Ok((ds, Some(truth)))
    } else if let Some(rest) = src.strip_prefix("idx:") {
        let (im, lb) = rest.split_once(',').ok_or_else(|| {
            Error::Config("an idx source names both files: idx:IMAGES,LABELS".into())
        })?;
        let images = load_idx_images(Path::new(im))?;
        let labels = load_idx_labels(Path::new(lb))?;
        let ds = Dataset::new(images, labels)?;
        Ok((ds, None))
    } else {
        Err(Error::Config(format!(
            "unknown data source `{src}`; use `synth` or `idx:IMAGES,LABELS`"
        )))
    }
}

fn dataset_input_spec(ds: &Dataset) -> InputSpec {
    let s = ds.images.shape();
    InputSpec { height: s.h, width: s.w, channels: s.c }
}

fn dataset_classes(ds: &Dataset) -> usize {
    (ds.labels.iter().copied().max().unwrap_or(0) + 1).max(2)
}

/// The out-of-the-box model: one plain block to lift channels, a 2x2 pool,
/// then a region-routed block with per-sample filters.
fn default_model_config(input: InputSpec, classes: usize) -> ModelConfig {
    ModelConfig {
        input,
        classes,
        blocks: vec![
            BlockSpec {
                kind: BlockKind::Standard,
                out_channels: 8,
                k: 3,
                stride: 1,
                padding: Padding::SameZero,
                regions: 0,
                hidden: 0,
                pool_after: true,
            },
            BlockSpec {
                kind: BlockKind::Dynamic,
                out_channels: 16,
                k: 3,
                stride: 1,
                padding: Padding::SameZero,
                regions: 4,
                hidden: 0,
                pool_after: false,
            },
        ],
        head_width: 0,
    }
}

fn check_model_fits(model: &Model, ds: &Dataset, what: &str) -> Result<()> {
    let want = dataset_input_spec(ds);
    if model.config.input != want {
        return Err(Error::Config(format!(
            "model expects {}x{}x{} input but the {what} data is {}x{}x{}",
            model.config.input.height,
            model.config.input.width,
            model.config.input.channels,
            want.height,
            want.width,
            want.channels
        )));
    }
    if let Some(&bad) = ds.labels.iter().find(|&&l| l >= model.config.classes) {
        return Err(Error::Config(format!(
            "{what} data has label {bad} but the model only has {} classes",
            model.config.classes
        )));
    }
    Ok(())
}

fn run_train(a: TrainArgs) -> Result<i32> {
    let (full, _) = load_data(&a.data, &a.synth_config, a.data_seed)?;
    let (train_set, test_set) = match &a.test_data {
        Some(src) => {
            let (t, _) = load_data(src, &a.synth_config, a.data_seed.wrapping_add(1))?;
            (full, Some(t))
        }
        None => {
            if !(0.0..1.0).contains(&a.holdout) {
                return Err(Error::Config(format!("--holdout must lie in [0, 1), got {}", a.holdout)));
            }
            let test_len = (full.len() as f64 * a.holdout).round() as usize;
            if test_len == 0 {
                (full, None)
            } else {
                let (tr, te) = full.split(full.len() - test_len)?;
                (tr, Some(te))
            }
        }
    };

    let mut model = match &a.resume {
        Some(p) => checkpoint::load(p)?,
        None => {
            let config = match &a.model_config {
                Some(p) => serde_json::from_str(&fs::read_to_string(p)?)
                    .map_err(|e| Error::Config(format!("bad model config {}: {e}", p.display())))?,
                None => default_model_config(dataset_input_spec(&train_set), dataset_classes(&train_set)),
            };
            Model::init(&config, a.seed)?
        }
    };
    check_model_fits(&model, &train_set, "training")?;
    if let Some(ts) = &test_set {
        check_model_fits(&model, ts, "test")?;
    }

    let s = train_set.images.shape();
    println!(
        "data: train {} items{}, {}x{}x{}, {} classes",
        train_set.len(),
        match &test_set {
            Some(t) => format!(", test {} items", t.len()),
            None => String::new(),
        },
        s.h,
        s.w,
        s.c,
        model.config.classes
    );
    println!(
        "model: {} blocks, {} parameters{}",
        model.blocks.len(),
        model.param_count(),
        match &a.resume {
            Some(p) => format!(" (resumed from {})", p.display()),
            None => String::new(),
        }
    );

    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        momentum: a.momentum,
        weight_decay: a.weight_decay,
        threads: a.threads,
        seed: a.seed,
    };
    let history = train(&mut model, &train_set, test_set.as_ref(), &cfg)?;
    for m in &history {
        println!("{}", format_metrics(m));
    }
    if let Some(p) = &a.save {
        checkpoint::save(&model, p)?;
        println!("saved: {}", p.display());
    }
    Ok(0)
}

fn run_cost(a: CostArgs) -> Result<i32> {
    if let Some(p) = &a.model_config {
        let config: ModelConfig = serde_json::from_str(&fs::read_to_string(p)?)
            .map_err(|e| Error::Config(format!("bad model config {}: {e}", p.display())))?;
        let model = Model::init(&config, 0)?;
        let rows = model.cost_table()?;
        println!("{:<34} {:>12} {:>14}", "component", "params", "madds/item");
        let mut total = cost::Cost { params: 0, madds: 0 };
        for (name, c) in &rows {
            println!("{:<34} {:>12} {:>14}", name, c.params, c.madds);
            total.params += c.params;
            total.madds += c.madds;
        }
        println!("{:<34} {:>12} {:>14}", "total", total.params, total.madds);
        return Ok(0);
    }

    let spec = ConvSpec::new(a.in_channels, a.out_channels, a.k, a.stride, Padding::SameZero);
    let hidden = a.hidden.unwrap_or(a.regions * a.in_channels);
    println!(
        "one layer on a {}x{} grid: {} -> {} channels, k={}, stride {}, {} regions, hidden {}",
        a.height, a.width, a.in_channels, a.out_channels, a.k, a.stride, a.regions, hidden
    );
    println!("{:<10} {:>12} {:>14}", "variant", "params", "madds/item");
    let rows = [
        ("standard", cost::standard_conv(&spec, a.height, a.width)?),
        ("local", cost::local_conv(&spec, a.height, a.width)?),
        ("fixed", cost::fixed_region_conv(&spec, a.height, a.width, a.regions)?),
        ("dynamic", cost::dynamic_region_conv(&spec, a.height, a.width, a.regions, hidden)?),
    ];
    for (name, c) in rows {
        println!("{:<10} {:>12} {:>14}", name, c.params, c.madds);
    }
    Ok(0)
}

fn run_visualize(a: VizArgs) -> Result<i32> {
    let (ds, truth) = load_data(&a.data, &a.synth_config, a.data_seed)?;
    let model = match &a.checkpoint {
        Some(p) => {
            let m = checkpoint::load(p)?;
            check_model_fits(&m, &ds, "visualized")?;
            Some(m)
        }
        None => None,
    };
    fs::create_dir_all(&a.out)?;
    let count = a.count.min(ds.len());
    if count == 0 {
        return Err(Error::Config("nothing to render: --count is 0 or the dataset is empty".into()));
    }
    let truth_regions = truth
        .as_ref()
        .map(|t| t.indices().iter().copied().max().unwrap_or(0) + 1);

    // Learned masks per block, accumulated so agreement can be scored over
    // all rendered images at once.
    let mut learned: BTreeMap<usize, (usize, usize, Vec<usize>)> = BTreeMap::new();

    for i in 0..count {
        let item = ds.item(i);
        let s = item.shape();

        // Input image: channel-mean grayscale.
        let mut gray = vec![0.0f64; s.h * s.w];
        for u in 0..s.h {
            for v in 0..s.w {
                let mut acc = 0.0;
                for c in 0..s.c {
                    acc += item.get(0, u, v, c);
                }
                gray[u * s.w + v] = acc / s.c as f64;
            }
        }
        let g8 = viz::upscale(&viz::unit_to_gray(&gray), s.w, s.h, 1, a.scale);
        let path = a.out.join(format!("img{i:03}_input.pgm"));
        viz::write_pgm(&path, s.w * a.scale, s.h * a.scale, &g8)?;
        println!("wrote {}", path.display());

        if let (Some(t), Some(m)) = (&truth, truth_regions) {
            let ids = &t.indices()[i * t.h * t.w..(i + 1) * t.h * t.w];
            let rgb = viz::upscale(&viz::ids_to_rgb(ids, m), t.w, t.h, 3, a.scale);
            let path = a.out.join(format!("img{i:03}_regions.ppm"));
            viz::write_ppm(&path, t.w * a.scale, t.h * a.scale, &rgb)?;
            println!("wrote {}", path.display());
        }

        if let Some(model) = &model {
            let (_, masks) = model.forward_masks(&item)?;
            for (bi, mask) in masks {
                let m = model.config.blocks[bi].regions.max(1);
                let rgb = viz::upscale(&viz::ids_to_rgb(mask.indices(), m), mask.w, mask.h, 3, a.scale);
                let path = a.out.join(format!("img{i:03}_block{bi}_mask.ppm"));
                viz::write_ppm(&path, mask.w * a.scale, mask.h * a.scale, &rgb)?;
                println!("wrote {}", path.display());
                let slot = learned.entry(bi).or_insert_with(|| (mask.h, mask.w, Vec::new()));
                slot.2.extend_from_slice(mask.indices());
            }
        }
    }

    // When both a learned mask and the ground truth exist, report how well
    // they line up, calibrated against spatially shuffled copies.
    if let Some(t) = &truth {
        let truth_subset = GuidedMask::new(count, t.h, t.w, t.indices()[..count * t.h * t.w].to_vec())?;
        for (bi, (h, w, ids)) in &learned {
            let mask = GuidedMask::new(count, *h, *w, ids.clone())?;
            let report = drconv::agreement::agreement_with_null(&mask, &truth_subset, 200, a.data_seed)?;
            println!(
                "block {bi} region agreement: {:.3} (chance 95th percentile {:.3}, {} shuffles)",
                report.mean, report.null_p95, report.permutations
            );
        }
    }
    Ok(0)
}
