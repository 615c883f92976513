//! The learnable routing: a guide feature, its argmax mask, and the softmax
//! substitute that lets gradient reach the guide anyway.
//!
//! Forward, each output position gets a guide feature vector `F[n,u,v,·]`
//! (one channel per region, produced by a small convolution with no bias)
//! and is assigned to the region with the largest entry — a hard, winner-
//! takes-all argmax. Argmax has gradient zero almost everywhere, so the
//! backward pass substitutes the softmax of the same feature:
//!
//! * the gradient that arrives *for the selected filter* at each position is
//!   dotted against **every** region's filter to score what each region
//!   would have contributed there ([`mask_backward`], producing `dF̂`);
//! * that score is pulled back through the softmax Jacobian,
//!   `dF = F̂ ⊙ (dF̂ − ⟨F̂, dF̂⟩·1)`, giving a dense gradient on the guide
//!   feature even though the forward pass used only one filter per pixel.
//!
//! The result equals the exact gradient of the *relaxed* operator (softmax-
//! weighted mixture of all regions' outputs) — the verification module
//! checks precisely that.

use crate::conv::{conv2d_backward, conv2d_forward, ConvSpec, FilterBank, GuidedMask, LocalFilterField, PixelFilterGrads, StandardFilter};
use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// Softmax of the guide feature over its channel axis: one probability
/// vector per position, rows summing to 1. Construction is the only way in,
/// so the invariant holds by fiat.
#[derive(Clone, PartialEq, Debug)]
pub struct SoftAssignment(Tensor4);

impl SoftAssignment {
    pub fn tensor(&self) -> &Tensor4 {
        &self.0
    }

    /// Probability row at `(n, u, v)`.
    pub fn row(&self, n: usize, u: usize, v: usize) -> &[f64] {
        let s = self.0.shape();
        &self.0.data()[s.at(n, u, v, 0)..][..s.c]
    }
}

/// Channel softmax with the usual max subtraction, so features of any
/// magnitude (the tests go to ±1e5) stay finite.
pub fn softmax_channels(feature: &Tensor4) -> SoftAssignment {
    let s = feature.shape();
    let mut out = feature.clone();
    let c = s.c;
    for row in out.data_mut().chunks_exact_mut(c) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    SoftAssignment(out)
}

/// Softmax Jacobian applied to a cotangent row:
/// `out[j] = soft[j] * (dsoft[j] - sum_t soft[t]*dsoft[t])`.
///
/// A useful identity: a cotangent that is constant across the row maps to
/// exactly zero, because the softmax output always sums to one.
pub fn softmax_vjp_row(soft: &[f64], dsoft: &[f64], out: &mut [f64]) {
    let mut inner = 0.0;
    for (s, d) in soft.iter().zip(dsoft) {
        inner += s * d;
    }
    for ((o, s), d) in out.iter_mut().zip(soft).zip(dsoft) {
        *o = s * (d - inner);
    }
}

/// Everything the guide path produces in one forward pass.
#[derive(Clone, Debug)]
pub struct GuideOutputs {
    /// Raw guide feature `F`, one channel per region.
    pub feature: Tensor4,
    /// Hard assignment `M = argmax_c F` (ties to the smallest index).
    pub mask: GuidedMask,
    /// Softmax relaxation `F̂` of the same feature.
    pub soft: SoftAssignment,
}

/// Run the guide convolution and derive both assignments from its feature.
/// `spec` mirrors the main convolution's kernel/stride/padding so the mask
/// lands exactly on the output grid; its `out_channels` is the region count.
/// The guide carries no bias (a constant offset per region channel would be
/// invisible to the argmax and merely drift under training).
///
/// A single region (`out_channels == 1`) is allowed but degenerate: the mask
/// is constant zero and no gradient ever reaches the guide.
pub fn guide_forward(x: &Tensor4, guide: &StandardFilter, spec: &ConvSpec) -> Result<GuideOutputs> {
    if guide.bias().is_some() {
        return Err(Error::Config("guide filter must not carry a bias".into()));
    }
    let (feature, _) = conv2d_forward(x, guide, spec)?;
    let mask = GuidedMask::from_argmax(&feature);
    let soft = softmax_channels(&feature);
    Ok(GuideOutputs { feature, mask, soft })
}

/// Materialize the per-pixel selected filters `Ŵ[u,v] = bank[mask[u,v]]` as
/// one filter field per sample. Analysis-scale convenience; the region
/// convolution itself never materializes this.
pub fn select_filters(bank: &FilterBank, mask: &GuidedMask) -> Result<Vec<LocalFilterField>> {
    if bank.n != mask.n {
        return Err(Error::Shape(format!(
            "bank holds {} samples, mask has {}",
            bank.n, mask.n
        )));
    }
    mask.check_regions(bank.m)?;
    let mut fields = Vec::with_capacity(bank.n);
    for n in 0..bank.n {
        let mut field = LocalFilterField::zeros(mask.h, mask.w, bank.out_c, bank.in_c, bank.k)?;
        for u in 0..mask.h {
            for v in 0..mask.w {
                field
                    .filter_at_mut(u, v)
                    .copy_from_slice(bank.filter(n, mask.get(n, u, v)));
            }
        }
        fields.push(field);
    }
    Ok(fields)
}

/// Captured state for the guide path's backward: the input and guide filter
/// (to backpropagate through the guide convolution), the forward outputs,
/// and the filter bank that was routed over (the dot-product targets).
#[derive(Debug)]
pub struct MaskContext {
    pub(crate) x: Tensor4,
    pub(crate) guide: StandardFilter,
    pub(crate) spec: ConvSpec,
    pub outputs: GuideOutputs,
    pub(crate) bank: FilterBank,
}

impl MaskContext {
    pub fn new(
        x: Tensor4,
        guide: StandardFilter,
        spec: ConvSpec,
        outputs: GuideOutputs,
        bank: FilterBank,
    ) -> Result<MaskContext> {
        let fs = outputs.feature.shape();
        if fs != spec.out_shape(&x.shape())? {
            return Err(Error::Context(format!(
                "guide feature {} does not match the spec's output grid",
                fs
            )));
        }
        if bank.n != x.shape().n || bank.m != fs.c {
            return Err(Error::Context(format!(
                "bank ({} samples, {} regions) does not match guide feature {}",
                bank.n, bank.m, fs
            )));
        }
        Ok(MaskContext { x, guide, spec, outputs, bank })
    }

    pub fn bank(&self) -> &FilterBank {
        &self.bank
    }
}

/// Gradient for the guide *feature* from per-pixel filter gradients.
///
/// At every position: score each region by how its filter lines up with the
/// local filter gradient, `dF̂[j] = <dŴ[u,v], W_j>`, then pull the scores
/// back through the softmax Jacobian. Constant score rows are annihilated
/// (softmax is shift-invariant), and with one region the output is exactly
/// zero.
pub fn mask_backward(ctx: &MaskContext, d_selected: &PixelFilterGrads) -> Result<Tensor4> {
    let fs = ctx.outputs.feature.shape();
    let bank = &ctx.bank;
    if d_selected.n != fs.n
        || d_selected.h != fs.h
        || d_selected.w != fs.w
        || d_selected.out_c != bank.out_c
        || d_selected.in_c != bank.in_c
        || d_selected.k != bank.k
    {
        return Err(Error::Context(
            "per-pixel filter gradients do not match this context's grid/bank".into(),
        ));
    }
    let m = bank.m;
    let mut df = Tensor4::zeros(fs)?;
    let mut dsoft = vec![0.0; m];
    for n in 0..fs.n {
        for u in 0..fs.h {
            for v in 0..fs.w {
                let g = d_selected.at(n, u, v);
                for (j, d) in dsoft.iter_mut().enumerate() {
                    let wj = bank.filter(n, j);
                    let mut acc = 0.0;
                    for (a, b) in g.iter().zip(wj) {
                        acc += a * b;
                    }
                    *d = acc;
                }
                let soft = ctx.outputs.soft.row(n, u, v);
                let base = fs.at(n, u, v, 0);
                softmax_vjp_row(soft, &dsoft, &mut df.data_mut()[base..base + m]);
            }
        }
    }
    Ok(df)
}

/// Push the guide-feature gradient through the guide convolution, yielding
/// the guide-weight gradient and the input gradient of this path.
pub fn guide_param_backward(ctx: &MaskContext, d_feature: &Tensor4) -> Result<(StandardFilter, Tensor4)> {
    if d_feature.shape() != ctx.outputs.feature.shape() {
        return Err(Error::Context(format!(
            "feature gradient has shape {}, context expects {}",
            d_feature.shape(),
            ctx.outputs.feature.shape()
        )));
    }
    // Re-run the (cheap) forward to rebuild the conv context; the guide
    // convolution is deterministic so this is the same computation graph.
    let (_, conv_ctx) = conv2d_forward(&ctx.x, &ctx.guide, &ctx.spec)?;
    let grads = conv2d_backward(conv_ctx, d_feature)?;
    Ok((grads.d_filter, grads.d_input))
}

/// Largest guide-feature winner margin that could flip under an `h`-sized
/// nudge: returns the smallest gap between the top two channels across all
/// positions (`None` when there is a single region). Finite-difference
/// checks redraw instances whose gap is within `10h` of a tie, because the
/// hard forward is discontinuous there.
pub fn min_top2_gap(feature: &Tensor4) -> Option<f64> {
    let c = feature.shape().c;
    if c < 2 {
        return None;
    }
    let mut min_gap = f64::INFINITY;
    for row in feature.data().chunks_exact(c) {
        let mut top = f64::NEG_INFINITY;
        let mut second = f64::NEG_INFINITY;
        for &v in row {
            if v > top {
                second = top;
                top = v;
            } else if v > second {
                second = v;
            }
        }
        min_gap = min_gap.min(top - second);
    }
    Some(min_gap)
}
