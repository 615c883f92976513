//! Independent oracles and finite-difference checks for every gradient path.
//!
//! Two kinds of witness live here:
//!
//! * **naive forwards** — second implementations of each convolution (and
//!   the pooling) written with their own loop order and their own index
//!   arithmetic, for agreement tests against the production kernels;
//! * **finite-difference checks** — central differences through carefully
//!   chosen *smooth* loss functions, one per gradient path.
//!
//! The layer's backward is exact for two different functions at once, and
//! the checks honor that split:
//!
//! * the input, bank, and generator gradients are gradients of the
//!   **frozen-routing** map (the mask pinned at its forward-pass value), so
//!   those groups differentiate closures that reuse the recorded mask;
//! * the guide-feature and guide-weight gradients are gradients of the
//!   **relaxed** map (softmax-weighted mixture of every region's output),
//!   so those groups differentiate that mixture.
//!
//! Every closure is smooth — no check ever differences across the argmax
//! discontinuity, which is why no tie-avoidance redraw logic is needed.
//!
//! A coordinate passes when `|analytic - fd| <= rtol*max(|analytic|,|fd|)
//! + atol`. The absolute floor matters: central differences carry ~1e-10 of
//! roundoff noise at these loss magnitudes, so a near-zero gradient
//! coordinate cannot be held to a relative bound alone.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conv::{ConvSpec, FilterBank, GuidedMask, LocalFilterField, Padding, StandardFilter};
use crate::error::{Error, Result};
use crate::layer::{DrConvLayer, GeneratorMode};
use crate::mask::softmax_channels;
use crate::tensor::{Shape4, Tensor4};

/// Symmetric relative error with a tiny floor, for diagnostics and oracle
/// agreement tests.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

fn signed_tap(padding: Padding, size: usize, stride: usize, delta: usize, u: usize, i: usize) -> Option<usize> {
    let raw = (u * stride + i) as isize - delta as isize;
    match padding {
        Padding::Valid => Some((u * stride + i) as usize),
        Padding::SameZero => {
            if raw < 0 || raw >= size as isize {
                None
            } else {
                Some(raw as usize)
            }
        }
        Padding::Circular => Some(raw.rem_euclid(size as isize) as usize),
    }
}

fn naive_delta(spec: &ConvSpec) -> usize {
    if spec.padding == Padding::Valid {
        0
    } else {
        (spec.k - 1) / 2
    }
}

/// Independent standard convolution: output-channel-major loops, signed
/// index arithmetic, element-wise accessors.
pub fn naive_conv2d(x: &Tensor4, filter: &StandardFilter, spec: &ConvSpec) -> Result<Tensor4> {
    if filter.out_c != spec.out_channels || filter.in_c != spec.in_channels || filter.k != spec.k {
        return Err(Error::Shape(format!(
            "filter ({}, {}, k={}) does not match spec ({}, {}, k={})",
            filter.out_c, filter.in_c, filter.k, spec.out_channels, spec.in_channels, spec.k
        )));
    }
    let os = spec.out_shape(&x.shape())?;
    let delta = naive_delta(spec);
    let mut y = Tensor4::zeros(os)?;
    for n in 0..os.n {
        for o in 0..os.c {
            for u in 0..os.h {
                for v in 0..os.w {
                    let mut acc = filter.bias().map_or(0.0, |b| b[o]);
                    for c in 0..spec.in_channels {
                        for i in 0..spec.k {
                            for j in 0..spec.k {
                                let (Some(ty), Some(tx)) = (
                                    signed_tap(spec.padding, x.shape().h, spec.stride, delta, u, i),
                                    signed_tap(spec.padding, x.shape().w, spec.stride, delta, v, j),
                                ) else {
                                    continue;
                                };
                                acc += x.get(n, ty, tx, c) * filter.w(o, c, i, j);
                            }
                        }
                    }
                    y.set(n, u, v, o, acc);
                }
            }
        }
    }
    Ok(y)
}

/// Independent per-pixel-filter convolution.
pub fn naive_local_conv(x: &Tensor4, field: &LocalFilterField, spec: &ConvSpec) -> Result<Tensor4> {
    let os = spec.out_shape(&x.shape())?;
    if field.h != os.h || field.w != os.w || field.out_c != spec.out_channels || field.in_c != spec.in_channels || field.k != spec.k {
        return Err(Error::Shape("filter field does not match the output grid".into()));
    }
    let delta = naive_delta(spec);
    let (in_c, k) = (spec.in_channels, spec.k);
    let mut y = Tensor4::zeros(os)?;
    for n in 0..os.n {
        for u in 0..os.h {
            for v in 0..os.w {
                let f = field.filter_at(u, v);
                for o in 0..os.c {
                    let mut acc = 0.0;
                    for c in 0..in_c {
                        for i in 0..k {
                            for j in 0..k {
                                let (Some(ty), Some(tx)) = (
                                    signed_tap(spec.padding, x.shape().h, spec.stride, delta, u, i),
                                    signed_tap(spec.padding, x.shape().w, spec.stride, delta, v, j),
                                ) else {
                                    continue;
                                };
                                acc += x.get(n, ty, tx, c) * f[(o * in_c + c) * k * k + i * k + j];
                            }
                        }
                    }
                    y.set(n, u, v, o, acc);
                }
            }
        }
    }
    Ok(y)
}

/// Independent region-routed convolution.
pub fn naive_region_conv(x: &Tensor4, bank: &FilterBank, mask: &GuidedMask, spec: &ConvSpec) -> Result<Tensor4> {
    let os = spec.out_shape(&x.shape())?;
    if bank.n != os.n || mask.n != os.n || mask.h != os.h || mask.w != os.w {
        return Err(Error::Shape("bank/mask do not match the output grid".into()));
    }
    mask.check_regions(bank.m)?;
    let delta = naive_delta(spec);
    let (in_c, k) = (spec.in_channels, spec.k);
    let mut y = Tensor4::zeros(os)?;
    for n in 0..os.n {
        for u in 0..os.h {
            for v in 0..os.w {
                let f = bank.filter(n, mask.get(n, u, v));
                for o in 0..os.c {
                    let mut acc = 0.0;
                    for c in 0..in_c {
                        for i in 0..k {
                            for j in 0..k {
                                let (Some(ty), Some(tx)) = (
                                    signed_tap(spec.padding, x.shape().h, spec.stride, delta, u, i),
                                    signed_tap(spec.padding, x.shape().w, spec.stride, delta, v, j),
                                ) else {
                                    continue;
                                };
                                acc += x.get(n, ty, tx, c) * f[(o * in_c + c) * k * k + i * k + j];
                            }
                        }
                    }
                    y.set(n, u, v, o, acc);
                }
            }
        }
    }
    Ok(y)
}

/// Independent adaptive average pooling (window bounds derived in floating
/// point instead of integer arithmetic).
pub fn naive_adaptive_avg_pool(x: &Tensor4, oh: usize, ow: usize) -> Result<Tensor4> {
    if oh == 0 || ow == 0 {
        return Err(Error::Size("pool output dimensions must be >= 1".into()));
    }
    let s = x.shape();
    let bounds = |size: usize, count: usize, i: usize| -> (usize, usize) {
        let a = ((i * size) as f64 / count as f64).floor() as usize;
        let b = (((i + 1) * size) as f64 / count as f64).ceil() as usize;
        (a, b.max(a + 1))
    };
    let mut out = Tensor4::zeros(Shape4::new(s.n, oh, ow, s.c))?;
    for n in 0..s.n {
        for c in 0..s.c {
            for i in 0..oh {
                for j in 0..ow {
                    let (r0, r1) = bounds(s.h, oh, i);
                    let (c0, c1) = bounds(s.w, ow, j);
                    let mut acc = 0.0;
                    for y in r0..r1 {
                        for xx in c0..c1 {
                            acc += x.get(n, y, xx, c);
                        }
                    }
                    out.set(n, i, j, c, acc / ((r1 - r0) * (c1 - c0)) as f64);
                }
            }
        }
    }
    Ok(out)
}

/// Per-region outputs `Z_j = routed_conv(x, bank, mask ≡ j)`: what the layer
/// would emit if every position belonged to region `j`. Built on the naive
/// kernel; these are the components of the relaxed mixture.
pub fn region_outputs(x: &Tensor4, bank: &FilterBank, spec: &ConvSpec) -> Result<Vec<Tensor4>> {
    let os = spec.out_shape(&x.shape())?;
    let mut zs = Vec::with_capacity(bank.m);
    for j in 0..bank.m {
        let mask = GuidedMask::new(os.n, os.h, os.w, vec![j; os.n * os.h * os.w])?;
        zs.push(naive_region_conv(x, bank, &mask, spec)?);
    }
    Ok(zs)
}

/// The relaxed operator: softmax-weighted mixture of the per-region
/// outputs, `Y[n,u,v,o] = sum_j softmax(t*F)[n,u,v,j] * Z_j[n,u,v,o]`.
/// As `t` grows this approaches the hard routed output wherever the guide
/// feature has a unique winner.
pub fn relaxed_combine(zs: &[Tensor4], feature: &Tensor4, temperature: f64) -> Result<Tensor4> {
    let fs = feature.shape();
    if zs.len() != fs.c {
        return Err(Error::Shape(format!(
            "{} region outputs but the feature scores {} regions",
            zs.len(),
            fs.c
        )));
    }
    let soft = softmax_channels(&feature.scale(temperature));
    let os = zs[0].shape();
    if os.n != fs.n || os.h != fs.h || os.w != fs.w {
        return Err(Error::Shape("region outputs do not live on the feature grid".into()));
    }
    let mut y = Tensor4::zeros(os)?;
    for n in 0..os.n {
        for u in 0..os.h {
            for v in 0..os.w {
                let srow = soft.row(n, u, v);
                for o in 0..os.c {
                    let mut acc = 0.0;
                    for (j, z) in zs.iter().enumerate() {
                        acc += srow[j] * z.get(n, u, v, o);
                    }
                    y.set(n, u, v, o, acc);
                }
            }
        }
    }
    Ok(y)
}

/// How finely a check probes and how much disagreement it tolerates.
#[derive(Clone, Copy, Debug)]
pub struct CheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Relative tolerance.
    pub rtol: f64,
    /// Absolute floor (covers FD roundoff on near-zero coordinates).
    pub atol: f64,
}

impl Default for CheckConfig {
    fn default() -> CheckConfig {
        CheckConfig { step: 1e-5, rtol: 1e-4, atol: 1e-8 }
    }
}

/// One gradient path's verdict.
#[derive(Clone, Debug)]
pub struct GroupReport {
    pub group: String,
    /// Coordinates checked.
    pub count: usize,
    /// Largest relative error (floored denominator) over the group.
    pub max_rel: f64,
    /// Largest absolute gap over the group.
    pub max_abs: f64,
    pub pass: bool,
}

/// Everything one gradient check produced.
#[derive(Clone, Debug)]
pub struct CheckReport {
    pub config: CheckConfig,
    pub groups: Vec<GroupReport>,
}

impl CheckReport {
    pub fn pass(&self) -> bool {
        self.groups.iter().all(|g| g.pass)
    }
}

impl std::fmt::Display for CheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "gradient check: step {:.1e}, rtol {:.1e}, atol {:.1e}",
            self.config.step, self.config.rtol, self.config.atol
        )?;
        for g in &self.groups {
            writeln!(
                f,
                "  {:<28} {:>5} coords  max rel {:>9.2e}  max abs {:>9.2e}  {}",
                g.group,
                g.count,
                g.max_rel,
                g.max_abs,
                if g.pass { "ok" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

/// Compare one analytic gradient vector against central differences of
/// `loss` taken at `theta` (which is restored before returning).
fn fd_group(
    name: &str,
    theta: &mut [f64],
    analytic: &[f64],
    loss: &mut dyn FnMut(&[f64]) -> f64,
    cfg: &CheckConfig,
) -> GroupReport {
    assert_eq!(
        theta.len(),
        analytic.len(),
        "group {name}: {} parameters but {} gradient entries",
        theta.len(),
        analytic.len()
    );
    let mut max_rel = 0.0f64;
    let mut max_abs = 0.0f64;
    let mut pass = true;
    for i in 0..theta.len() {
        let keep = theta[i];
        theta[i] = keep + cfg.step;
        let up = loss(theta);
        theta[i] = keep - cfg.step;
        let down = loss(theta);
        theta[i] = keep;
        let fd = (up - down) / (2.0 * cfg.step);
        let a = analytic[i];
        let gap = (a - fd).abs();
        max_abs = max_abs.max(gap);
        max_rel = max_rel.max(gap / a.abs().max(fd.abs()).max(cfg.atol));
        if gap > cfg.rtol * a.abs().max(fd.abs()) + cfg.atol {
            pass = false;
        }
    }
    GroupReport { group: name.to_string(), count: theta.len(), max_rel, max_abs, pass }
}

/// Check every gradient path of a layer on input `x` against finite
/// differences. The loss is `<R, Y>` with `R` drawn from `seed`, so the
/// output gradient handed to the backward pass is exactly `R`.
pub fn check_layer_gradients(layer: &DrConvLayer, x: &Tensor4, cfg: &CheckConfig, seed: u64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (y, ctx) = layer.forward(x)?;
    let r = Tensor4::from_fn(y.shape(), |_, _, _, _| rng.gen_range(-1.0..1.0))?;

    let mask0 = ctx.mask().clone();
    let bank0 = ctx.bank().clone();
    let feature0 = ctx.mask_ctx.outputs.feature.clone();
    let grads = layer.backward(ctx, &r)?;

    let spec = *layer.spec();
    let guide_spec = ConvSpec::new(spec.in_channels, layer.regions(), spec.k, spec.stride, spec.padding);
    let dot = |y: &Tensor4| -> f64 { y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum() };
    let zs = region_outputs(x, &bank0, &spec)?;

    let mut groups = Vec::new();

    // Input through the routed convolution, mask and bank frozen.
    {
        let mut theta = x.data().to_vec();
        let xs = x.shape();
        let mut loss = |t: &[f64]| {
            let xt = Tensor4::from_vec(xs, t.to_vec()).unwrap();
            dot(&naive_region_conv(&xt, &bank0, &mask0, &spec).unwrap())
        };
        groups.push(fd_group(
            "input: routed conv",
            &mut theta,
            grads.d_input_main.data(),
            &mut loss,
            cfg,
        ));
    }

    // Input as the generator sees it: the bank responds, routing and the
    // main convolution's input stay frozen.
    if let (GeneratorMode::Dynamic(params), Some(d_input_gen)) = (layer.generator(), &grads.d_input_gen) {
        let mut theta = x.data().to_vec();
        let xs = x.shape();
        let mut loss = |t: &[f64]| {
            let xt = Tensor4::from_vec(xs, t.to_vec()).unwrap();
            let (bank, _) = crate::generator::generate_filters(&xt, params).unwrap();
            dot(&naive_region_conv(x, &bank, &mask0, &spec).unwrap())
        };
        groups.push(fd_group(
            "input: generator",
            &mut theta,
            d_input_gen.data(),
            &mut loss,
            cfg,
        ));
    }

    // Input as the guide sees it: the feature responds, the mixture
    // components stay frozen. This is a gradient of the relaxed map.
    {
        let mut theta = x.data().to_vec();
        let xs = x.shape();
        let guide = layer.guide().clone();
        let mut loss = |t: &[f64]| {
            let xt = Tensor4::from_vec(xs, t.to_vec()).unwrap();
            let f = naive_conv2d(&xt, &guide, &guide_spec).unwrap();
            dot(&relaxed_combine(&zs, &f, 1.0).unwrap())
        };
        groups.push(fd_group(
            "input: guide",
            &mut theta,
            grads.d_input_guide.data(),
            &mut loss,
            cfg,
        ));
    }

    // The bank itself (per-sample slots in dynamic mode, the shared bank in
    // fixed mode), mask frozen.
    match layer.generator() {
        GeneratorMode::Dynamic(_) => {
            let mut theta = bank0.data().to_vec();
            let mut loss = |t: &[f64]| {
                let bank = FilterBank::new(bank0.n, bank0.m, bank0.out_c, bank0.in_c, bank0.k, t.to_vec()).unwrap();
                dot(&naive_region_conv(x, &bank, &mask0, &spec).unwrap())
            };
            groups.push(fd_group("bank (per sample)", &mut theta, grads.d_bank.data(), &mut loss, cfg));
        }
        GeneratorMode::Fixed(shared) => {
            let mut theta = shared.data().to_vec();
            let n = x.shape().n;
            let mut loss = |t: &[f64]| {
                let bank = FilterBank::new(1, shared.m, shared.out_c, shared.in_c, shared.k, t.to_vec())
                    .unwrap()
                    .broadcast_to(n)
                    .unwrap();
                dot(&naive_region_conv(x, &bank, &mask0, &spec).unwrap())
            };
            let d_fixed = grads
                .d_fixed_bank
                .as_ref()
                .expect("fixed mode always produces a shared-bank gradient");
            groups.push(fd_group("bank (shared)", &mut theta, d_fixed.data(), &mut loss, cfg));
        }
    }

    // Generator parameters, mask frozen, bank regenerated per probe.
    if let (GeneratorMode::Dynamic(params), Some(d_gen)) = (layer.generator(), &grads.d_generator) {
        let run = |p: &crate::generator::GeneratorParams| {
            let (bank, _) = crate::generator::generate_filters(x, p).unwrap();
            dot(&naive_region_conv(x, &bank, &mask0, &spec).unwrap())
        };
        let p = params.clone();
        {
            let mut theta = p.w1.clone();
            let mut loss = |t: &[f64]| {
                let mut q = p.clone();
                q.w1.copy_from_slice(t);
                run(&q)
            };
            groups.push(fd_group("generator: stage-1 weights", &mut theta, &d_gen.w1, &mut loss, cfg));
        }
        {
            let mut theta = p.b1.clone();
            let mut loss = |t: &[f64]| {
                let mut q = p.clone();
                q.b1.copy_from_slice(t);
                run(&q)
            };
            groups.push(fd_group("generator: stage-1 biases", &mut theta, &d_gen.b1, &mut loss, cfg));
        }
        {
            let mut theta = p.w2.clone();
            let mut loss = |t: &[f64]| {
                let mut q = p.clone();
                q.w2.copy_from_slice(t);
                run(&q)
            };
            groups.push(fd_group("generator: stage-2 weights", &mut theta, &d_gen.w2, &mut loss, cfg));
        }
    }

    // Guide feature: gradient of the relaxed mixture taken directly in F.
    {
        let mut theta = feature0.data().to_vec();
        let fs = feature0.shape();
        let mut loss = |t: &[f64]| {
            let f = Tensor4::from_vec(fs, t.to_vec()).unwrap();
            dot(&relaxed_combine(&zs, &f, 1.0).unwrap())
        };
        groups.push(fd_group("guide feature", &mut theta, grads.d_feature.data(), &mut loss, cfg));
    }

    // Guide weights: the relaxed mixture through the guide convolution.
    {
        let mut theta = layer.guide().weights().to_vec();
        let guide = layer.guide().clone();
        let mut loss = |t: &[f64]| {
            let g = StandardFilter::new(guide.out_c, guide.in_c, guide.k, t.to_vec(), None).unwrap();
            let f = naive_conv2d(x, &g, &guide_spec).unwrap();
            dot(&relaxed_combine(&zs, &f, 1.0).unwrap())
        };
        groups.push(fd_group("guide weights", &mut theta, grads.d_guide.weights(), &mut loss, cfg));
    }

    Ok(CheckReport { config: *cfg, groups })
}
