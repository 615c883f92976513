//! Region-routed convolution: a small bank of filters, one picked per pixel.
//!
//! The forward pass is an ordinary convolution except that output position
//! `(u, v)` of sample `n` multiplies its window with `bank[n][mask[n,u,v]]`
//! — the filter of whatever region the window's center pixel belongs to.
//! The backward pass treats the routing as fixed: each position's filter
//! gradient accumulates into the bank slot that was actually selected, and
//! the input gradient flows through the selected filters only. How the
//! *assignment itself* receives gradient is the mask module's business.

use crate::conv::standard::{conv_core, conv_core_backward, tap};
use crate::conv::{untranspose_block, ConvSpec, FilterBank, GuidedMask, Padding};
use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// Captured inputs for the backward pass. Single-use (consumed by value).
#[derive(Debug)]
pub struct RegionConvContext {
    pub(crate) x: Tensor4,
    pub(crate) bank: FilterBank,
    pub(crate) mask: GuidedMask,
    pub(crate) spec: ConvSpec,
}

impl RegionConvContext {
    pub fn input(&self) -> &Tensor4 {
        &self.x
    }
    pub fn bank(&self) -> &FilterBank {
        &self.bank
    }
    pub fn mask(&self) -> &GuidedMask {
        &self.mask
    }
}

#[derive(Debug)]
pub struct RegionConvGrads {
    pub d_input: Tensor4,
    /// Gradient for every bank slot; slots never selected stay exactly zero.
    pub d_bank: FilterBank,
}

fn check_shapes(x: &Tensor4, bank: &FilterBank, mask: &GuidedMask, spec: &ConvSpec) -> Result<crate::tensor::Shape4> {
    spec.validate()?;
    if bank.out_c != spec.out_channels || bank.in_c != spec.in_channels || bank.k != spec.k {
        return Err(Error::Shape(format!(
            "bank filters ({}, {}, k={}) do not match spec ({}, {}, k={})",
            bank.out_c, bank.in_c, bank.k, spec.out_channels, spec.in_channels, spec.k
        )));
    }
    let out_shape = spec.out_shape(&x.shape())?;
    if bank.n != x.shape().n {
        return Err(Error::Shape(format!(
            "bank holds {} samples, input has {} (broadcast explicitly if shared)",
            bank.n,
            x.shape().n
        )));
    }
    if mask.n != out_shape.n || mask.h != out_shape.h || mask.w != out_shape.w {
        return Err(Error::Shape(format!(
            "mask is {}x{}x{}, output wants {}x{}x{}",
            mask.n, mask.h, mask.w, out_shape.n, out_shape.h, out_shape.w
        )));
    }
    mask.check_regions(bank.m)?;
    Ok(out_shape)
}

/// Forward pass. The mask must already live on the output grid (one region
/// id per output position), and every id must address a bank slot.
pub fn region_conv_forward(
    x: &Tensor4,
    bank: &FilterBank,
    mask: &GuidedMask,
    spec: &ConvSpec,
) -> Result<(Tensor4, RegionConvContext)> {
    let out_shape = check_shapes(x, bank, mask, spec)?;
    let mut y = Tensor4::zeros(out_shape)?;
    let wt = bank.transposed_blocks();
    let m = bank.m;
    conv_core(x, spec, &wt, |n, u, v| n * m + mask.get(n, u, v), None, &mut y);
    Ok((
        y,
        RegionConvContext {
            x: x.clone(),
            bank: bank.clone(),
            mask: mask.clone(),
            spec: *spec,
        },
    ))
}

/// Backward pass under fixed routing (see module docs).
pub fn region_conv_backward(ctx: RegionConvContext, dy: &Tensor4) -> Result<RegionConvGrads> {
    let expect = ctx.spec.out_shape(&ctx.x.shape())?;
    if dy.shape() != expect {
        return Err(Error::Context(format!(
            "output gradient has shape {}, context expects {}",
            dy.shape(),
            expect
        )));
    }
    let wt = ctx.bank.transposed_blocks();
    let mut dwt = vec![0.0; wt.len()];
    let mut dx = Tensor4::zeros(ctx.x.shape())?;
    let m = ctx.bank.m;
    let mask = &ctx.mask;
    conv_core_backward(&ctx.x, &ctx.spec, &wt, |n, u, v| n * m + mask.get(n, u, v), dy, &mut dwt, &mut dx);

    // Un-transpose each accumulated block back to [o][c][i][j].
    let block = ctx.bank.block_len();
    let mut d_bank = FilterBank::zeros(ctx.bank.n, ctx.bank.m, ctx.bank.out_c, ctx.bank.in_c, ctx.bank.k)?;
    for (dst, src) in d_bank
        .data_mut()
        .chunks_exact_mut(block)
        .zip(dwt.chunks_exact(block))
    {
        dst.copy_from_slice(&untranspose_block(src, ctx.bank.out_c, ctx.bank.in_c, ctx.bank.k));
    }
    Ok(RegionConvGrads { d_input: dx, d_bank })
}

/// Per-pixel filter gradients: the gradient of the loss with respect to
/// *whatever filter is applied at that position*, regardless of routing —
/// `g[n,u,v][o,c,i,j] = dy[n,u,v,o] * x[n, tap(u,i), tap(v,j), c]`.
///
/// Summing these into their selected bank slots reproduces
/// [`region_conv_backward`]'s `d_bank`; feeding them to the mask module's
/// backward produces the assignment gradient. Dense per-pixel storage — use
/// at analysis scale.
#[derive(Clone, Debug)]
pub struct PixelFilterGrads {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub out_c: usize,
    pub in_c: usize,
    pub k: usize,
    data: Vec<f64>,
}

impl PixelFilterGrads {
    pub fn block_len(&self) -> usize {
        self.out_c * self.in_c * self.k * self.k
    }

    /// Gradient block (`[o][c][i][j]`) at output position `(u, v)` of sample `n`.
    pub fn at(&self, n: usize, u: usize, v: usize) -> &[f64] {
        let b = self.block_len();
        let start = ((n * self.h + u) * self.w + v) * b;
        &self.data[start..start + b]
    }

    pub fn at_mut(&mut self, n: usize, u: usize, v: usize) -> &mut [f64] {
        let b = self.block_len();
        let start = ((n * self.h + u) * self.w + v) * b;
        &mut self.data[start..start + b]
    }
}

/// Compute [`PixelFilterGrads`] for a convolution described by `spec`.
pub fn pixel_filter_grads(x: &Tensor4, dy: &Tensor4, spec: &ConvSpec) -> Result<PixelFilterGrads> {
    let expect = spec.out_shape(&x.shape())?;
    if dy.shape() != expect {
        return Err(Error::Shape(format!(
            "output gradient has shape {}, spec expects {}",
            dy.shape(),
            expect
        )));
    }
    let xs = x.shape();
    let os = dy.shape();
    let (k, stride) = (spec.k, spec.stride);
    let delta = if spec.padding == Padding::Valid { 0 } else { (k - 1) / 2 };
    let (in_c, out_c) = (spec.in_channels, spec.out_channels);
    let mut g = PixelFilterGrads {
        n: os.n,
        h: os.h,
        w: os.w,
        out_c,
        in_c,
        k,
        data: vec![0.0; os.n * os.h * os.w * out_c * in_c * k * k],
    };
    for n in 0..os.n {
        for u in 0..os.h {
            for v in 0..os.w {
                let dyrow = &dy.data()[os.at(n, u, v, 0)..][..out_c];
                let blk = g.at_mut(n, u, v);
                for i in 0..k {
                    let Some(ty) = tap(spec.padding, xs.h, stride, delta, u, i) else {
                        continue;
                    };
                    for j in 0..k {
                        let Some(tx) = tap(spec.padding, xs.w, stride, delta, v, j) else {
                            continue;
                        };
                        let xrow = &x.data()[xs.at(n, ty, tx, 0)..][..in_c];
                        for o in 0..out_c {
                            let d = dyrow[o];
                            for c in 0..in_c {
                                blk[((o * in_c + c) * k + i) * k + j] = d * xrow[c];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::{conv2d_backward, conv2d_forward, local_conv_forward, LocalFilterField, StandardFilter};
    use crate::tensor::Shape4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: Shape4, rng: &mut ChaCha8Rng) -> Tensor4 {
        Tensor4::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0)).unwrap()
    }

    fn rand_bank(n: usize, m: usize, o: usize, c: usize, k: usize, rng: &mut ChaCha8Rng) -> FilterBank {
        let data = (0..n * m * o * c * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        FilterBank::new(n, m, o, c, k, data).unwrap()
    }

    #[test]
    fn two_constant_filters_split_by_rows() {
        // 1x1 kernel, single channel. Filter 0 multiplies by 1, filter 1 by 2;
        // the mask routes the top row to filter 0 and the bottom row to
        // filter 1 on an all-ones input.
        let x = Tensor4::filled(Shape4::new(1, 2, 2, 1), 1.0).unwrap();
        let bank = FilterBank::new(1, 2, 1, 1, 1, vec![1.0, 2.0]).unwrap();
        let mask = GuidedMask::new(1, 2, 2, vec![0, 0, 1, 1]).unwrap();
        let spec = ConvSpec::same(1, 1, 1);
        let (y, _) = region_conv_forward(&x, &bank, &mask, &spec).unwrap();
        assert_eq!(y.data(), &[1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn one_region_is_bitwise_a_standard_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_tensor(Shape4::new(2, 5, 4, 3), &mut rng);
        let bank = rand_bank(2, 1, 2, 3, 3, &mut rng);
        // Both samples share the filter for a fair comparison against the
        // sample-independent standard convolution.
        let shared = bank.filter(0, 0).to_vec();
        let mut bank = bank;
        bank.filter_mut(1, 0).copy_from_slice(&shared);

        let mask = GuidedMask::new(2, 5, 4, vec![0; 2 * 5 * 4]).unwrap();
        let spec = ConvSpec::same(3, 2, 3);
        let (y_region, _) = region_conv_forward(&x, &bank, &mask, &spec).unwrap();

        let filter = StandardFilter::new(2, 3, 3, shared, None).unwrap();
        let (y_std, _) = conv2d_forward(&x, &filter, &spec).unwrap();
        assert_eq!(y_region, y_std);
    }

    #[test]
    fn one_region_per_pixel_is_bitwise_a_local_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (h, w) = (3, 4);
        let x = rand_tensor(Shape4::new(1, h, w, 2), &mut rng);
        let bank = rand_bank(1, h * w, 2, 2, 3, &mut rng);
        let ids: Vec<usize> = (0..h * w).collect();
        let mask = GuidedMask::new(1, h, w, ids).unwrap();
        let spec = ConvSpec::same(2, 2, 3);
        let (y_region, _) = region_conv_forward(&x, &bank, &mask, &spec).unwrap();

        let mut field = LocalFilterField::zeros(h, w, 2, 2, 3).unwrap();
        for u in 0..h {
            for v in 0..w {
                field.filter_at_mut(u, v).copy_from_slice(bank.filter(0, u * w + v));
            }
        }
        let y_local = local_conv_forward(&x, &field, &spec).unwrap();
        assert_eq!(y_region, y_local);
    }

    #[test]
    fn backward_with_one_region_matches_standard_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = rand_tensor(Shape4::new(1, 4, 4, 2), &mut rng);
        let bank = rand_bank(1, 1, 3, 2, 3, &mut rng);
        let mask = GuidedMask::new(1, 4, 4, vec![0; 16]).unwrap();
        let spec = ConvSpec::same(2, 3, 3);
        let (y, ctx) = region_conv_forward(&x, &bank, &mask, &spec).unwrap();
        let dy = rand_tensor(y.shape(), &mut rng);
        let g_region = region_conv_backward(ctx, &dy).unwrap();

        let filter = StandardFilter::new(3, 2, 3, bank.filter(0, 0).to_vec(), None).unwrap();
        let (_, ctx_std) = conv2d_forward(&x, &filter, &spec).unwrap();
        let g_std = conv2d_backward(ctx_std, &dy).unwrap();
        assert_eq!(g_region.d_input, g_std.d_input);
        assert_eq!(g_region.d_bank.filter(0, 0), g_std.d_filter.weights());
    }

    #[test]
    fn unselected_bank_slots_get_exactly_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = rand_tensor(Shape4::new(1, 3, 3, 1), &mut rng);
        let bank = rand_bank(1, 3, 1, 1, 1, &mut rng);
        // Region 2 never appears in the mask.
        let mask = GuidedMask::new(1, 3, 3, vec![0, 1, 0, 1, 0, 1, 0, 1, 0]).unwrap();
        let spec = ConvSpec::same(1, 1, 1);
        let (y, ctx) = region_conv_forward(&x, &bank, &mask, &spec).unwrap();
        let dy = rand_tensor(y.shape(), &mut rng);
        let g = region_conv_backward(ctx, &dy).unwrap();
        assert!(g.d_bank.filter(0, 2).iter().all(|&v| v == 0.0));
        assert!(g.d_bank.filter(0, 0).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn pixel_grads_summed_by_region_reproduce_bank_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x = rand_tensor(Shape4::new(2, 4, 3, 2), &mut rng);
        let bank = rand_bank(2, 3, 2, 2, 3, &mut rng);
        let ids: Vec<usize> = (0..2 * 4 * 3).map(|i| i % 3).collect();
        let mask = GuidedMask::new(2, 4, 3, ids).unwrap();
        let spec = ConvSpec::same(2, 2, 3);
        let (y, ctx) = region_conv_forward(&x, &bank, &mask, &spec).unwrap();
        let dy = rand_tensor(y.shape(), &mut rng);

        let g = pixel_filter_grads(&x, &dy, &spec).unwrap();
        let mut summed = FilterBank::zeros(2, 3, 2, 2, 3).unwrap();
        for n in 0..2 {
            for u in 0..4 {
                for v in 0..3 {
                    let t = mask.get(n, u, v);
                    let dst = summed.filter_mut(n, t);
                    for (d, s) in dst.iter_mut().zip(g.at(n, u, v)) {
                        *d += s;
                    }
                }
            }
        }
        let g_bank = region_conv_backward(ctx, &dy).unwrap().d_bank;
        for (a, b) in summed.data().iter().zip(g_bank.data()) {
            assert!((a - b).abs() < 1e-12, "pixel-sum {a} vs bank grad {b}");
        }
    }

    #[test]
    fn mask_referencing_missing_region_is_an_index_error() {
        let x = Tensor4::zeros(Shape4::new(1, 2, 2, 1)).unwrap();
        let bank = FilterBank::zeros(1, 2, 1, 1, 1).unwrap();
        let mask = GuidedMask::new(1, 2, 2, vec![0, 1, 2, 0]).unwrap();
        let spec = ConvSpec::same(1, 1, 1);
        let err = region_conv_forward(&x, &bank, &mask, &spec).unwrap_err();
        assert!(matches!(err, crate::error::Error::Index(_)), "got {err:?}");
    }

    #[test]
    fn equivariance_when_mask_shifts_with_the_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let x = rand_tensor(Shape4::new(1, 6, 6, 2), &mut rng);
        let bank = rand_bank(1, 3, 2, 2, 3, &mut rng);
        let ids: Vec<usize> = (0..36).map(|i| (i * 7) % 3).collect();
        let mask = GuidedMask::new(1, 6, 6, ids).unwrap();
        let spec = ConvSpec::new(2, 2, 3, 1, Padding::Circular);
        let (y, _) = region_conv_forward(&x, &bank, &mask, &spec).unwrap();
        for &(dy_, dx_) in &[(2isize, 1isize), (-1, 4)] {
            let (ys, _) = region_conv_forward(
                &x.circular_shift(dy_, dx_),
                &bank,
                &mask.circular_shift(dy_, dx_),
                &spec,
            )
            .unwrap();
            let want = y.circular_shift(dy_, dx_);
            let worst = ys
                .data()
                .iter()
                .zip(want.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(worst < 1e-10, "equivariance broke by {worst}");
        }
    }
}
