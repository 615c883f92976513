//! Diagnostic: load a checkpoint, push a small batch through it, and print
//! per-block health statistics — pre-activation sign balance, generated
//! bank magnitudes, hidden-unit saturation, and guide score gaps. Useful
//! when a training run flatlines and the question is *which* stage died.
//!
//! Usage: cargo run -p drconv --example probe -- CKPT [SYNTH_JSON] [SEED]

use drconv::generator::{adaptive_avg_pool, generate_filters};
use drconv::layer::GeneratorMode;
use drconv::tensor::sigmoid;
use drconv::train::checkpoint;
use drconv::train::data::{synth_regions, SynthSpec};
use drconv::train::model::Block;

fn stats(name: &str, v: &[f64]) {
    let n = v.len().max(1) as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let pos = v.iter().filter(|&&x| x > 0.0).count() as f64 / n;
    let amax = v.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
    println!("  {name:<26} mean {mean:>10.4e}  std {:>9.3e}  max|.| {amax:>9.3e}  frac>0 {pos:.3}", var.sqrt());
}

fn main() {
    let mut args = std::env::args().skip(1);
    let ckpt = args.next().expect("usage: probe CKPT [SYNTH_JSON] [SEED]");
    let synth: SynthSpec = match args.next() {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap(),
        None => SynthSpec::default(),
    };
    let seed: u64 = args.next().map(|s| s.parse().unwrap()).unwrap_or(7);

    let model = checkpoint::load(std::path::Path::new(&ckpt)).unwrap();
    let spec = SynthSpec { count: 16, ..synth };
    let (data, _) = synth_regions(&spec, seed).unwrap();

    for idx in 0..4.min(data.len()) {
        let x = data.item(idx);
        println!("--- item {idx} (label {}) ---", data.labels[idx]);
        let mut cur = x;
        for (bi, block) in model.blocks.iter().enumerate() {
            match block {
                Block::Standard { filter, spec } => {
                    let (y, _) = drconv::conv::conv2d_forward(&cur, filter, spec).unwrap();
                    stats(&format!("block{bi} standard pre-relu"), y.data());
                    cur = relu_and_pool(&model, bi, y);
                }
                Block::Routed { layer } => {
                    if let GeneratorMode::Dynamic(p) = layer.generator() {
                        let pooled = adaptive_avg_pool(&cur, p.k, p.k).unwrap();
                        stats(&format!("block{bi} pooled summary"), pooled.data());
                        // Recompute hidden activations to see saturation.
                        let (k, hidden) = (p.k, p.hidden);
                        let mut h1 = Vec::new();
                        for i in 0..k {
                            for j in 0..k {
                                for e in 0..hidden {
                                    let mut acc = p.b1[e];
                                    for c in 0..p.in_c {
                                        acc += p.w1[e * p.in_c + c] * pooled.get(0, i, j, c);
                                    }
                                    h1.push(sigmoid(acc));
                                }
                            }
                        }
                        stats(&format!("block{bi} hidden sigmoid"), &h1);
                        let sat0 = h1.iter().filter(|&&v| v < 0.01).count() as f64 / h1.len() as f64;
                        let sat1 = h1.iter().filter(|&&v| v > 0.99).count() as f64 / h1.len() as f64;
                        println!("  {:<26} at-zero {sat0:.3}  at-one {sat1:.3}", format!("block{bi} sigmoid saturation"));
                        let (bank, _) = generate_filters(&cur, p).unwrap();
                        stats(&format!("block{bi} generated bank"), bank.data());
                    }
                    let (f, _) = drconv::conv::conv2d_forward(
                        &cur,
                        layer.guide(),
                        &drconv::conv::ConvSpec::new(
                            layer.spec().in_channels,
                            layer.regions(),
                            layer.spec().k,
                            layer.spec().stride,
                            layer.spec().padding,
                        ),
                    )
                    .unwrap();
                    stats(&format!("block{bi} guide feature"), f.data());
                    let mask = drconv::conv::GuidedMask::from_argmax(&f);
                    let mut counts = vec![0usize; layer.regions()];
                    for &r in mask.indices() {
                        counts[r] += 1;
                    }
                    println!("  {:<26} {counts:?}", format!("block{bi} mask region counts"));
                    let (y, _) = layer.forward(&cur).unwrap();
                    stats(&format!("block{bi} routed pre-relu"), y.data());
                    cur = relu_and_pool(&model, bi, y);
                }
            }
        }
    }
}

fn relu_and_pool(model: &drconv::train::model::Model, bi: usize, mut y: drconv::tensor::Tensor4) -> drconv::tensor::Tensor4 {
    for v in y.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    if model.config.blocks[bi].pool_after {
        let s = y.shape();
        adaptive_avg_pool(&y, (s.h / 2).max(1), (s.w / 2).max(1)).unwrap()
    } else {
        y
    }
}
