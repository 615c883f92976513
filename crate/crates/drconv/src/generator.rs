//! Per-sample filter generation: squeeze the input to a `k × k` summary,
//! lift it through a small two-stage 1×1 network, and read the result back
//! out as one `k × k` filter per region.
//!
//! Stage one is shared: every hidden unit sees all input channels of the
//! pooled summary (1×1 convolution, bias, sigmoid). Stage two is grouped by
//! region: the hidden units are split into `m` equal groups and region `t`'s
//! filter entries are linear in group `t` alone, so each region owns private
//! capacity on top of the shared trunk. Stage two has no bias and no
//! activation — filters need both signs, and a bias would give every sample
//! the same additive filter component regardless of content.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conv::FilterBank;
use crate::error::{Error, Result};
use crate::tensor::{sigmoid, Shape4, Tensor4};

/// Average-pool to a fixed `oh × ow` grid. Output cell `(i, j)` averages
/// input rows `[floor(i*h/oh), ceil((i+1)*h/oh))` (columns likewise), so
/// the windows tile the input exactly when sizes divide and overlap by one
/// row/column when they don't. The formula also tolerates `oh > h` (windows
/// repeat), and `oh == 1` is a global average.
pub fn adaptive_avg_pool(x: &Tensor4, oh: usize, ow: usize) -> Result<Tensor4> {
    if oh == 0 || ow == 0 {
        return Err(Error::Size("pool output dimensions must be >= 1".into()));
    }
    let s = x.shape();
    let mut out = Tensor4::zeros(Shape4::new(s.n, oh, ow, s.c))?;
    for n in 0..s.n {
        for i in 0..oh {
            let (r0, r1) = pool_window(s.h, oh, i);
            for j in 0..ow {
                let (c0, c1) = pool_window(s.w, ow, j);
                let inv = 1.0 / ((r1 - r0) * (c1 - c0)) as f64;
                for c in 0..s.c {
                    let mut acc = 0.0;
                    for y in r0..r1 {
                        for xx in c0..c1 {
                            acc += x.get(n, y, xx, c);
                        }
                    }
                    out.set(n, i, j, c, acc * inv);
                }
            }
        }
    }
    Ok(out)
}

/// Half-open input range `[start, end)` feeding pooled cell `i` of `count`.
pub(crate) fn pool_window(size: usize, count: usize, i: usize) -> (usize, usize) {
    let start = i * size / count;
    let end = ((i + 1) * size).div_ceil(count);
    (start, end.max(start + 1))
}

/// Adjoint of [`adaptive_avg_pool`]: each pooled cell's gradient spreads
/// uniformly over the window it averaged, and overlapping windows add.
/// The total gradient mass is conserved exactly.
pub fn adaptive_avg_pool_backward(input_shape: Shape4, d_pooled: &Tensor4) -> Result<Tensor4> {
    let ps = d_pooled.shape();
    if ps.n != input_shape.n || ps.c != input_shape.c {
        return Err(Error::Context(format!(
            "pooled gradient {} does not broadcast back to input {}",
            ps, input_shape
        )));
    }
    let mut dx = Tensor4::zeros(input_shape)?;
    let s = input_shape;
    for n in 0..ps.n {
        for i in 0..ps.h {
            let (r0, r1) = pool_window(s.h, ps.h, i);
            for j in 0..ps.w {
                let (c0, c1) = pool_window(s.w, ps.w, j);
                let inv = 1.0 / ((r1 - r0) * (c1 - c0)) as f64;
                for c in 0..ps.c {
                    let share = d_pooled.get(n, i, j, c) * inv;
                    for y in r0..r1 {
                        for xx in c0..c1 {
                            let cur = dx.get(n, y, xx, c);
                            dx.set(n, y, xx, c, cur + share);
                        }
                    }
                }
            }
        }
    }
    Ok(dx)
}

/// Learnable parameters of the generator.
///
/// Layouts (all row-major, flat):
/// * `w1[e*in_c + c]` — hidden unit `e`'s weight on pooled channel `c`;
/// * `b1[e]` — hidden unit `e`'s bias;
/// * `w2[q*(hidden/m) + r]` — output entry `q`'s weight on unit `r` of its
///   group, where `q = (t*out_c + o)*in_c + c` enumerates (region, output
///   channel, input channel) and entry `q` reads hidden group `t` only.
///
/// The spatial position `(i, j)` of the pooled grid is carried by the
/// convolutional structure (both stages are 1×1), so the same parameters
/// produce all `k*k` taps of every filter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub m: usize,
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub hidden: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
}

impl GeneratorParams {
    /// Zero-initialized parameters with validated dimensions. `hidden` must
    /// be a positive multiple of `m` so the grouped stage splits evenly.
    pub fn zeros(m: usize, in_c: usize, out_c: usize, k: usize, hidden: usize) -> Result<GeneratorParams> {
        if m == 0 || in_c == 0 || out_c == 0 || k == 0 || hidden == 0 {
            return Err(Error::Size("generator dimensions must all be >= 1".into()));
        }
        if hidden % m != 0 {
            return Err(Error::Config(format!(
                "hidden width {hidden} must be divisible by the region count {m}"
            )));
        }
        Ok(GeneratorParams {
            m,
            in_c,
            out_c,
            k,
            hidden,
            w1: vec![0.0; hidden * in_c],
            b1: vec![0.0; hidden],
            w2: vec![0.0; m * out_c * in_c * (hidden / m)],
        })
    }

    /// Random initialization: both stages fan-in uniform, biases zero, and
    /// the output stage additionally shrunk by `1/sqrt(out_c*in_c)` so the
    /// generated filters start small. Small filters matter more here than
    /// for an ordinary convolution: generated-filter gradients reach the
    /// parameters through the sigmoid stage, and large early steps can park
    /// a region's hidden units in a saturated corner it cannot leave.
    pub fn init<R: Rng>(m: usize, in_c: usize, out_c: usize, k: usize, hidden: usize, rng: &mut R) -> Result<GeneratorParams> {
        let mut p = GeneratorParams::zeros(m, in_c, out_c, k, hidden)?;
        let bound1 = 1.0 / (in_c as f64).sqrt();
        for w in p.w1.iter_mut() {
            *w = rng.gen_range(-bound1..bound1);
        }
        let group = hidden / m;
        let bound2 = 1.0 / ((group as f64).sqrt() * ((out_c * in_c) as f64).sqrt());
        for w in p.w2.iter_mut() {
            *w = rng.gen_range(-bound2..bound2);
        }
        Ok(p)
    }

    /// Hidden units per region group.
    pub fn group_width(&self) -> usize {
        self.hidden / self.m
    }
}

/// Intermediate activations kept for [`generator_backward`].
#[derive(Clone, Debug)]
pub struct GeneratorContext {
    /// Pooled summary, `[n, k, k, in_c]`.
    pub pooled: Tensor4,
    /// Post-sigmoid hidden activations, `[n, k, k, hidden]`.
    pub h1: Tensor4,
    /// Shape of the input the pooling consumed.
    pub x_shape: Shape4,
}

/// Parameter gradients mirroring [`GeneratorParams`] layouts.
#[derive(Clone, Debug)]
pub struct GeneratorGrads {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
}

/// Produce one filter bank row per sample from the sample itself.
pub fn generate_filters(x: &Tensor4, p: &GeneratorParams) -> Result<(FilterBank, GeneratorContext)> {
    let s = x.shape();
    if s.c != p.in_c {
        return Err(Error::Shape(format!(
            "generator expects {} input channels, got {}",
            p.in_c, s.c
        )));
    }
    let pooled = adaptive_avg_pool(x, p.k, p.k)?;
    let (k, hidden, in_c, out_c, m) = (p.k, p.hidden, p.in_c, p.out_c, p.m);
    let group = p.group_width();
    let mut h1 = Tensor4::zeros(Shape4::new(s.n, k, k, hidden))?;
    let mut bank = FilterBank::zeros(s.n, m, out_c, in_c, k)?;
    for n in 0..s.n {
        for i in 0..k {
            for j in 0..k {
                let prow = &pooled.data()[pooled.shape().at(n, i, j, 0)..][..in_c];
                let hbase = h1.shape().at(n, i, j, 0);
                for e in 0..hidden {
                    let wrow = &p.w1[e * in_c..(e + 1) * in_c];
                    let mut z = p.b1[e];
                    for (pv, wv) in prow.iter().zip(wrow) {
                        z += pv * wv;
                    }
                    h1.data_mut()[hbase + e] = sigmoid(z);
                }
                let hrow = &h1.data()[hbase..hbase + hidden];
                for t in 0..m {
                    let hg = &hrow[t * group..(t + 1) * group];
                    let filter = bank.filter_mut(n, t);
                    for o in 0..out_c {
                        for c in 0..in_c {
                            let q = (t * out_c + o) * in_c + c;
                            let wrow = &p.w2[q * group..(q + 1) * group];
                            let mut acc = 0.0;
                            for (hv, wv) in hg.iter().zip(wrow) {
                                acc += hv * wv;
                            }
                            filter[(o * in_c + c) * k * k + i * k + j] = acc;
                        }
                    }
                }
            }
        }
    }
    let ctx = GeneratorContext { pooled, h1, x_shape: s };
    Ok((bank, ctx))
}

/// Backward pass of [`generate_filters`]: gradients for both stages and for
/// the input (via the pooling adjoint).
pub fn generator_backward(
    p: &GeneratorParams,
    ctx: &GeneratorContext,
    d_bank: &FilterBank,
) -> Result<(GeneratorGrads, Tensor4)> {
    let n_samples = ctx.x_shape.n;
    if d_bank.n != n_samples
        || d_bank.m != p.m
        || d_bank.out_c != p.out_c
        || d_bank.in_c != p.in_c
        || d_bank.k != p.k
    {
        return Err(Error::Context(
            "bank gradient dimensions do not match the generator that produced it".into(),
        ));
    }
    let (k, hidden, in_c, out_c, m) = (p.k, p.hidden, p.in_c, p.out_c, p.m);
    let group = p.group_width();
    let mut grads = GeneratorGrads {
        w1: vec![0.0; p.w1.len()],
        b1: vec![0.0; p.b1.len()],
        w2: vec![0.0; p.w2.len()],
    };
    let mut d_pooled = Tensor4::zeros(ctx.pooled.shape())?;
    let mut d_h1 = vec![0.0; hidden];
    for n in 0..n_samples {
        for i in 0..k {
            for j in 0..k {
                d_h1.fill(0.0);
                let hbase = ctx.h1.shape().at(n, i, j, 0);
                let hrow = &ctx.h1.data()[hbase..hbase + hidden];
                for t in 0..m {
                    let hg = &hrow[t * group..(t + 1) * group];
                    let dg = &mut d_h1[t * group..(t + 1) * group];
                    let dfil = d_bank.filter(n, t);
                    for o in 0..out_c {
                        for c in 0..in_c {
                            let q = (t * out_c + o) * in_c + c;
                            let d = dfil[(o * in_c + c) * k * k + i * k + j];
                            if d == 0.0 {
                                continue;
                            }
                            let wrow = &p.w2[q * group..(q + 1) * group];
                            let grow = &mut grads.w2[q * group..(q + 1) * group];
                            for r in 0..group {
                                grow[r] += d * hg[r];
                                dg[r] += d * wrow[r];
                            }
                        }
                    }
                }
                let prow = &ctx.pooled.data()[ctx.pooled.shape().at(n, i, j, 0)..][..in_c];
                let pbase = d_pooled.shape().at(n, i, j, 0);
                for e in 0..hidden {
                    let a = hrow[e];
                    let d_pre = d_h1[e] * a * (1.0 - a);
                    grads.b1[e] += d_pre;
                    let wrow = &p.w1[e * in_c..(e + 1) * in_c];
                    let grow = &mut grads.w1[e * in_c..(e + 1) * in_c];
                    let dprow = &mut d_pooled.data_mut()[pbase..pbase + in_c];
                    for c in 0..in_c {
                        grow[c] += d_pre * prow[c];
                        dprow[c] += d_pre * wrow[c];
                    }
                }
            }
        }
    }
    let d_input = adaptive_avg_pool_backward(ctx.x_shape, &d_pooled)?;
    Ok((grads, d_input))
}
