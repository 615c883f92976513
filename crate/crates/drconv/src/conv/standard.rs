//! The shared convolution core and the plain (one filter) variant.
//!
//! Every convolution flavor in this crate funnels through [`conv_core`] /
//! [`conv_core_backward`]; the only thing a variant supplies is a function
//! from output position to filter block. Keeping one core is not just DRY —
//! the degeneracy tests demand *bit-exact* agreement between variants, which
//! only holds if every flavor accumulates the same terms in the same order.

use crate::conv::{untranspose_block, ConvSpec, Padding, StandardFilter};
use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// Input row index touched by kernel row `i` at output row `u`, or `None`
/// for a zero tap. Columns use the same function. The window is centered for
/// the padded modes (`delta = (k-1)/2`) and anchored at the corner for
/// `Valid`, whose taps are always in range by construction.
#[inline]
pub(crate) fn tap(padding: Padding, size: usize, stride: usize, delta: usize, u: usize, i: usize) -> Option<usize> {
    match padding {
        Padding::Valid => Some(u * stride + i),
        Padding::SameZero => {
            let t = (u * stride + i) as isize - delta as isize;
            if t < 0 || t >= size as isize {
                None
            } else {
                Some(t as usize)
            }
        }
        Padding::Circular => {
            let t = ((u * stride + i) as isize - delta as isize).rem_euclid(size as isize);
            Some(t as usize)
        }
    }
}

/// Shared forward loop. `wt` is a concatenation of `[i][j][c][o]`-ordered
/// filter blocks; `block_of(n, u, v)` says which block multiplies the window
/// at output `(u, v)` of sample `n`. `out` must already have the right shape.
pub(crate) fn conv_core(
    x: &Tensor4,
    spec: &ConvSpec,
    wt: &[f64],
    block_of: impl Fn(usize, usize, usize) -> usize,
    bias: Option<&[f64]>,
    out: &mut Tensor4,
) {
    let xs = x.shape();
    let os = out.shape();
    let (k, stride) = (spec.k, spec.stride);
    let delta = if spec.padding == Padding::Valid { 0 } else { (k - 1) / 2 };
    let (in_c, out_c) = (spec.in_channels, spec.out_channels);
    let block = k * k * in_c * out_c;
    let xdata = x.data();
    let mut acc = vec![0.0f64; out_c];

    for n in 0..xs.n {
        for u in 0..os.h {
            for v in 0..os.w {
                match bias {
                    Some(b) => acc.copy_from_slice(b),
                    None => acc.fill(0.0),
                }
                let wtb = &wt[block_of(n, u, v) * block..][..block];
                for i in 0..k {
                    let Some(ty) = tap(spec.padding, xs.h, stride, delta, u, i) else {
                        continue;
                    };
                    for j in 0..k {
                        let Some(tx) = tap(spec.padding, xs.w, stride, delta, v, j) else {
                            continue;
                        };
                        let xrow = &xdata[xs.at(n, ty, tx, 0)..][..in_c];
                        let wrow = &wtb[(i * k + j) * in_c * out_c..][..in_c * out_c];
                        for (c, &xv) in xrow.iter().enumerate() {
                            let wcol = &wrow[c * out_c..][..out_c];
                            for (a, &wv) in acc.iter_mut().zip(wcol) {
                                *a += xv * wv;
                            }
                        }
                    }
                }
                let dst = os.at(n, u, v, 0);
                out.data_mut()[dst..dst + out_c].copy_from_slice(&acc);
            }
        }
    }
}

/// Shared backward loop: accumulates filter-block gradients into `dwt`
/// (same layout/order as the forward's `wt`) and the input gradient into
/// `dx`. Both buffers must be zeroed (or deliberately pre-seeded) by the
/// caller.
pub(crate) fn conv_core_backward(
    x: &Tensor4,
    spec: &ConvSpec,
    wt: &[f64],
    block_of: impl Fn(usize, usize, usize) -> usize,
    dy: &Tensor4,
    dwt: &mut [f64],
    dx: &mut Tensor4,
) {
    let xs = x.shape();
    let os = dy.shape();
    let (k, stride) = (spec.k, spec.stride);
    let delta = if spec.padding == Padding::Valid { 0 } else { (k - 1) / 2 };
    let (in_c, out_c) = (spec.in_channels, spec.out_channels);
    let block = k * k * in_c * out_c;
    let xdata = x.data();
    let dydata = dy.data();

    for n in 0..xs.n {
        for u in 0..os.h {
            for v in 0..os.w {
                let dyrow = &dydata[os.at(n, u, v, 0)..][..out_c];
                let boff = block_of(n, u, v) * block;
                for i in 0..k {
                    let Some(ty) = tap(spec.padding, xs.h, stride, delta, u, i) else {
                        continue;
                    };
                    for j in 0..k {
                        let Some(tx) = tap(spec.padding, xs.w, stride, delta, v, j) else {
                            continue;
                        };
                        let xoff = xs.at(n, ty, tx, 0);
                        let woff = boff + (i * k + j) * in_c * out_c;
                        for c in 0..in_c {
                            let xv = xdata[xoff + c];
                            let wcol = &wt[woff + c * out_c..][..out_c];
                            let dwcol = &mut dwt[woff + c * out_c..][..out_c];
                            let mut s = 0.0;
                            for o in 0..out_c {
                                s += dyrow[o] * wcol[o];
                                dwcol[o] += dyrow[o] * xv;
                            }
                            dx.data_mut()[xoff + c] += s;
                        }
                    }
                }
            }
        }
    }
}

/// Everything the backward pass needs, captured at forward time. Consumed
/// by value — a context cannot back two backward passes.
#[derive(Debug)]
pub struct ConvContext {
    pub(crate) x: Tensor4,
    pub(crate) filter: StandardFilter,
    pub(crate) spec: ConvSpec,
}

impl ConvContext {
    pub fn input(&self) -> &Tensor4 {
        &self.x
    }
}

/// Gradients of a plain convolution: with respect to the input and to the
/// filter (bias gradient present exactly when the filter has a bias).
#[derive(Debug)]
pub struct ConvGrads {
    pub d_input: Tensor4,
    pub d_filter: StandardFilter,
}

/// Plain convolution: `y[n,u,v,o] = bias[o] + sum over (c,i,j) of
/// x[n, tap(u,i), tap(v,j), c] * w[o,c,i,j]`.
pub fn conv2d_forward(x: &Tensor4, filter: &StandardFilter, spec: &ConvSpec) -> Result<(Tensor4, ConvContext)> {
    spec.validate()?;
    if filter.out_c != spec.out_channels || filter.in_c != spec.in_channels || filter.k != spec.k {
        return Err(Error::Shape(format!(
            "filter [{}x{}x{}x{}] does not match spec (out={}, in={}, k={})",
            filter.out_c, filter.in_c, filter.k, filter.k, spec.out_channels, spec.in_channels, spec.k
        )));
    }
    let mut y = Tensor4::zeros(spec.out_shape(&x.shape())?)?;
    conv_core(x, spec, &filter.transposed(), |_, _, _| 0, filter.bias(), &mut y);
    Ok((
        y,
        ConvContext {
            x: x.clone(),
            filter: filter.clone(),
            spec: *spec,
        },
    ))
}

/// Backward of [`conv2d_forward`]: given the loss gradient at the output,
/// produce gradients for the input, the weights, and (if present) the bias.
pub fn conv2d_backward(ctx: ConvContext, dy: &Tensor4) -> Result<ConvGrads> {
    let expect = ctx.spec.out_shape(&ctx.x.shape())?;
    if dy.shape() != expect {
        return Err(Error::Context(format!(
            "output gradient has shape {}, context expects {}",
            dy.shape(),
            expect
        )));
    }
    let mut dwt = vec![0.0; ctx.filter.weights().len()];
    let mut dx = Tensor4::zeros(ctx.x.shape())?;
    conv_core_backward(&ctx.x, &ctx.spec, &ctx.filter.transposed(), |_, _, _| 0, dy, &mut dwt, &mut dx);

    let dbias = ctx.filter.bias().map(|_| {
        let os = dy.shape();
        let mut db = vec![0.0; ctx.spec.out_channels];
        for (i, &g) in dy.data().iter().enumerate() {
            db[i % os.c] += g;
        }
        db
    });
    let d_filter = StandardFilter::new(
        ctx.filter.out_c,
        ctx.filter.in_c,
        ctx.filter.k,
        untranspose_block(&dwt, ctx.filter.out_c, ctx.filter.in_c, ctx.filter.k),
        dbias,
    )?;
    Ok(ConvGrads { d_input: dx, d_filter })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_tensor(shape: Shape4, rng: &mut ChaCha8Rng) -> Tensor4 {
        Tensor4::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0)).unwrap()
    }

    fn rand_filter(o: usize, c: usize, k: usize, bias: bool, rng: &mut ChaCha8Rng) -> StandardFilter {
        let w = (0..o * c * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b = bias.then(|| (0..o).map(|_| rng.gen_range(-1.0..1.0)).collect());
        StandardFilter::new(o, c, k, w, b).unwrap()
    }

    #[test]
    fn ones_filter_sums_channels() {
        // 2x2 input, 2 channels, all ones; 1x1 kernel with weights [1, 2]
        // produces 1*1 + 1*2 = 3 everywhere.
        let x = Tensor4::filled(Shape4::new(1, 2, 2, 2), 1.0).unwrap();
        let f = StandardFilter::new(1, 2, 1, vec![1.0, 2.0], None).unwrap();
        let spec = ConvSpec::same(2, 1, 1);
        let (y, _) = conv2d_forward(&x, &f, &spec).unwrap();
        assert_eq!(y.data(), &[3.0, 3.0, 3.0, 3.0]);
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let mut r = rng(1);
        let x = rand_tensor(Shape4::new(2, 3, 4, 1), &mut r);
        let f = StandardFilter::new(1, 1, 1, vec![1.0], None).unwrap();
        let (y, _) = conv2d_forward(&x, &f, &ConvSpec::same(1, 1, 1)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn scalar_backward_matches_product_rule() {
        // y = w * x with k=1 and single elements: dL/dx = w, dL/dw = x.
        let x = Tensor4::filled(Shape4::new(1, 1, 1, 1), 3.0).unwrap();
        let f = StandardFilter::new(1, 1, 1, vec![5.0], None).unwrap();
        let spec = ConvSpec::same(1, 1, 1);
        let (_, ctx) = conv2d_forward(&x, &f, &spec).unwrap();
        let dy = Tensor4::filled(Shape4::new(1, 1, 1, 1), 1.0).unwrap();
        let g = conv2d_backward(ctx, &dy).unwrap();
        assert_eq!(g.d_input.data(), &[5.0]);
        assert_eq!(g.d_filter.weights(), &[3.0]);
    }

    #[test]
    fn zero_upstream_gradient_zeroes_everything() {
        let mut r = rng(2);
        let x = rand_tensor(Shape4::new(1, 4, 4, 2), &mut r);
        let f = rand_filter(3, 2, 3, true, &mut r);
        let spec = ConvSpec::same(2, 3, 3);
        let (y, ctx) = conv2d_forward(&x, &f, &spec).unwrap();
        let dy = Tensor4::zeros(y.shape()).unwrap();
        let g = conv2d_backward(ctx, &dy).unwrap();
        assert!(g.d_input.data().iter().all(|&v| v == 0.0));
        assert!(g.d_filter.weights().iter().all(|&v| v == 0.0));
        assert!(g.d_filter.bias().unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn circular_padding_commutes_with_circular_shift() {
        let mut r = rng(3);
        let x = rand_tensor(Shape4::new(1, 6, 5, 2), &mut r);
        let f = rand_filter(3, 2, 3, false, &mut r);
        let spec = ConvSpec::new(2, 3, 3, 1, Padding::Circular);
        let (y, _) = conv2d_forward(&x, &f, &spec).unwrap();
        for &(dy_, dx_) in &[(1isize, 0isize), (0, 2), (4, 3), (-2, -1)] {
            let (ys, _) = conv2d_forward(&x.circular_shift(dy_, dx_), &f, &spec).unwrap();
            let want = y.circular_shift(dy_, dx_);
            let worst = ys
                .data()
                .iter()
                .zip(want.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(worst < 1e-10, "equivariance broke by {worst} at shift ({dy_},{dx_})");
        }
    }

    #[test]
    fn mismatched_channels_error_out() {
        let x = Tensor4::zeros(Shape4::new(1, 3, 3, 2)).unwrap();
        let f = StandardFilter::zeros(1, 3, 1, false).unwrap();
        let spec = ConvSpec::same(3, 1, 1);
        assert!(matches!(conv2d_forward(&x, &f, &spec), Err(Error::Shape(_))));
    }

    #[test]
    fn context_rejects_wrong_gradient_shape() {
        let x = Tensor4::zeros(Shape4::new(1, 3, 3, 1)).unwrap();
        let f = StandardFilter::zeros(1, 1, 1, false).unwrap();
        let (_, ctx) = conv2d_forward(&x, &f, &ConvSpec::same(1, 1, 1)).unwrap();
        let bad = Tensor4::zeros(Shape4::new(1, 2, 2, 1)).unwrap();
        assert!(matches!(conv2d_backward(ctx, &bad), Err(Error::Context(_))));
    }

    #[test]
    fn linearity_in_the_input() {
        let mut r = rng(4);
        let spec = ConvSpec::same(2, 3, 3);
        let f = rand_filter(3, 2, 3, false, &mut r);
        let x1 = rand_tensor(Shape4::new(1, 5, 5, 2), &mut r);
        let x2 = rand_tensor(Shape4::new(1, 5, 5, 2), &mut r);
        let (a, b) = (0.7, -1.3);
        let lhs = conv2d_forward(&x1.scale(a).add(&x2.scale(b)).unwrap(), &f, &spec)
            .unwrap()
            .0;
        let rhs = conv2d_forward(&x1, &f, &spec).unwrap().0.scale(a)
            .add(&conv2d_forward(&x2, &f, &spec).unwrap().0.scale(b))
            .unwrap();
        let worst = lhs
            .data()
            .iter()
            .zip(rhs.data())
            .map(|(p, q)| (p - q).abs())
            .fold(0.0f64, f64::max);
        assert!(worst < 1e-10, "linearity violated by {worst}");
    }

    #[test]
    fn strided_output_takes_every_other_window() {
        let x = Tensor4::from_fn(Shape4::new(1, 4, 4, 1), |_, h, w, _| (h * 4 + w) as f64).unwrap();
        let f = StandardFilter::new(1, 1, 1, vec![1.0], None).unwrap();
        let spec = ConvSpec::new(1, 1, 1, 2, Padding::SameZero);
        let (y, _) = conv2d_forward(&x, &f, &spec).unwrap();
        assert_eq!(y.shape(), Shape4::new(1, 2, 2, 1));
        assert_eq!(y.data(), &[0.0, 2.0, 8.0, 10.0]);
    }
}
