//! Convolution flavors over [`Tensor4`] feature maps.
//!
//! Three variants live here, distinguished only by *which filter multiplies
//! the window at each output position*:
//!
//! * [`standard::conv2d_forward`] — one filter everywhere (the classic op);
//! * [`local::local_conv_forward`] — a distinct filter at every position;
//! * [`region::region_conv_forward`] — one filter per *region*, chosen per
//!   pixel by an index map ([`GuidedMask`]), so parameter count is tied to
//!   the number of regions instead of the spatial size.
//!
//! All variants run the same inner loop over the same tap order (kernel row,
//! kernel column, input channel), so the degenerate cases — one region,
//! or one region per pixel — reproduce each other *bit for bit*, not just
//! approximately. Tests rely on that.

use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor4};

pub mod local;
pub mod region;
pub mod standard;

pub use local::local_conv_forward;
pub use region::{pixel_filter_grads, region_conv_forward, region_conv_backward, PixelFilterGrads, RegionConvContext, RegionConvGrads};
pub use standard::{conv2d_backward, conv2d_forward, ConvContext, ConvGrads};

/// How window taps that fall off the input are treated.
#[derive(Clone, Copy, PartialEq, Eq, Debug, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// No padding; output shrinks by k-1.
    Valid,
    /// Zero-pad so stride-1 output keeps the input's spatial size.
    SameZero,
    /// Taps wrap around both spatial axes (used by the equivariance tests).
    Circular,
}

/// Static description of a convolution: channel counts, kernel size, stride,
/// padding. Kernel sizes are odd so every window has a center pixel — the
/// region-routed variant selects its filter by that center.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: Padding,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, k: usize, stride: usize, padding: Padding) -> ConvSpec {
        ConvSpec { in_channels, out_channels, k, stride, padding }
    }

    /// Stride-1, size-preserving spec — the common case in this crate.
    pub fn same(in_channels: usize, out_channels: usize, k: usize) -> ConvSpec {
        ConvSpec::new(in_channels, out_channels, k, 1, Padding::SameZero)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config(format!(
                "channel counts must be >= 1 (in={}, out={})",
                self.in_channels, self.out_channels
            )));
        }
        if self.k == 0 || self.k % 2 == 0 {
            return Err(Error::Config(format!(
                "kernel size must be odd and >= 1, got k={}",
                self.k
            )));
        }
        if self.stride == 0 {
            return Err(Error::Config("stride must be >= 1".into()));
        }
        Ok(())
    }

    /// Output spatial size for an `(h, w)` input.
    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        match self.padding {
            Padding::Valid => {
                if h < self.k || w < self.k {
                    return Err(Error::Size(format!(
                        "valid padding needs input >= kernel, got {h}x{w} with k={}",
                        self.k
                    )));
                }
                Ok(((h - self.k) / self.stride + 1, (w - self.k) / self.stride + 1))
            }
            // Size-preserving at stride 1; ceil(size/stride) otherwise.
            Padding::SameZero | Padding::Circular => {
                Ok((h.div_ceil(self.stride), w.div_ceil(self.stride)))
            }
        }
    }

    /// Shape of the output for input `x`, checking channel agreement.
    pub fn out_shape(&self, x: &Shape4) -> Result<Shape4> {
        if x.c != self.in_channels {
            return Err(Error::Shape(format!(
                "input has {} channels, spec expects {}",
                x.c, self.in_channels
            )));
        }
        let (oh, ow) = self.out_hw(x.h, x.w)?;
        Ok(Shape4::new(x.n, oh, ow, self.out_channels))
    }
}

/// An ordinary convolution filter: weights `[out][in][k][k]`, optional
/// per-output-channel bias. This is also the container for weight
/// *gradients*, which share the layout.
#[derive(Clone, PartialEq, Debug)]
pub struct StandardFilter {
    pub out_c: usize,
    pub in_c: usize,
    pub k: usize,
    weights: Vec<f64>,
    bias: Option<Vec<f64>>,
}

impl StandardFilter {
    pub fn new(out_c: usize, in_c: usize, k: usize, weights: Vec<f64>, bias: Option<Vec<f64>>) -> Result<StandardFilter> {
        if out_c == 0 || in_c == 0 || k == 0 {
            return Err(Error::Size("filter dimensions must all be >= 1".into()));
        }
        if weights.len() != out_c * in_c * k * k {
            return Err(Error::Shape(format!(
                "filter wants {} weights, got {}",
                out_c * in_c * k * k,
                weights.len()
            )));
        }
        if let Some(b) = &bias {
            if b.len() != out_c {
                return Err(Error::Shape(format!(
                    "bias wants {} entries, got {}",
                    out_c,
                    b.len()
                )));
            }
        }
        Ok(StandardFilter { out_c, in_c, k, weights, bias })
    }

    pub fn zeros(out_c: usize, in_c: usize, k: usize, with_bias: bool) -> Result<StandardFilter> {
        StandardFilter::new(
            out_c,
            in_c,
            k,
            vec![0.0; out_c * in_c * k * k],
            if with_bias { Some(vec![0.0; out_c]) } else { None },
        )
    }

    #[inline]
    pub fn widx(&self, o: usize, c: usize, i: usize, j: usize) -> usize {
        debug_assert!(o < self.out_c && c < self.in_c && i < self.k && j < self.k);
        ((o * self.in_c + c) * self.k + i) * self.k + j
    }

    #[inline]
    pub fn w(&self, o: usize, c: usize, i: usize, j: usize) -> f64 {
        self.weights[self.widx(o, c, i, j)]
    }

    pub fn set_w(&mut self, o: usize, c: usize, i: usize, j: usize, v: f64) {
        let idx = self.widx(o, c, i, j);
        self.weights[idx] = v;
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn bias(&self) -> Option<&[f64]> {
        self.bias.as_deref()
    }

    pub fn bias_mut(&mut self) -> Option<&mut [f64]> {
        self.bias.as_deref_mut()
    }

    /// Flat `[o][c][i][j]` weights reordered to `[i][j][c][o]` — the order
    /// the shared convolution core reads them in.
    pub(crate) fn transposed(&self) -> Vec<f64> {
        transpose_block(&self.weights, self.out_c, self.in_c, self.k)
    }
}

/// Reorder one `[o][c][i][j]` filter block to `[i][j][c][o]`.
pub(crate) fn transpose_block(w: &[f64], out_c: usize, in_c: usize, k: usize) -> Vec<f64> {
    let mut t = vec![0.0; w.len()];
    for o in 0..out_c {
        for c in 0..in_c {
            for i in 0..k {
                for j in 0..k {
                    t[((i * k + j) * in_c + c) * out_c + o] = w[((o * in_c + c) * k + i) * k + j];
                }
            }
        }
    }
    t
}

/// Inverse of [`transpose_block`]: `[i][j][c][o]` back to `[o][c][i][j]`.
pub(crate) fn untranspose_block(t: &[f64], out_c: usize, in_c: usize, k: usize) -> Vec<f64> {
    let mut w = vec![0.0; t.len()];
    for o in 0..out_c {
        for c in 0..in_c {
            for i in 0..k {
                for j in 0..k {
                    w[((o * in_c + c) * k + i) * k + j] = t[((i * k + j) * in_c + c) * out_c + o];
                }
            }
        }
    }
    w
}

/// One filter per spatial position: weights `[h][w][out][in][k][k]`, no bias.
/// The parameter count scales with h·w — that is the whole point of this
/// baseline, and the cost model makes the scaling visible.
#[derive(Clone, PartialEq, Debug)]
pub struct LocalFilterField {
    pub h: usize,
    pub w: usize,
    pub out_c: usize,
    pub in_c: usize,
    pub k: usize,
    weights: Vec<f64>,
}

impl LocalFilterField {
    pub fn new(h: usize, w: usize, out_c: usize, in_c: usize, k: usize, weights: Vec<f64>) -> Result<LocalFilterField> {
        if h == 0 || w == 0 || out_c == 0 || in_c == 0 || k == 0 {
            return Err(Error::Size("local filter field dimensions must all be >= 1".into()));
        }
        if weights.len() != h * w * out_c * in_c * k * k {
            return Err(Error::Shape(format!(
                "local field wants {} weights, got {}",
                h * w * out_c * in_c * k * k,
                weights.len()
            )));
        }
        Ok(LocalFilterField { h, w, out_c, in_c, k, weights })
    }

    pub fn zeros(h: usize, w: usize, out_c: usize, in_c: usize, k: usize) -> Result<LocalFilterField> {
        LocalFilterField::new(h, w, out_c, in_c, k, vec![0.0; h * w * out_c * in_c * k * k])
    }

    pub fn block_len(&self) -> usize {
        self.out_c * self.in_c * self.k * self.k
    }

    /// The `[o][c][i][j]` filter used at output position `(u, v)`.
    pub fn filter_at(&self, u: usize, v: usize) -> &[f64] {
        let b = self.block_len();
        let start = (u * self.w + v) * b;
        &self.weights[start..start + b]
    }

    pub fn filter_at_mut(&mut self, u: usize, v: usize) -> &mut [f64] {
        let b = self.block_len();
        let start = (u * self.w + v) * b;
        &mut self.weights[start..start + b]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }
}

/// A bank of per-region filters, one set per sample:
/// `[n][m][out][in][k][k]`. Produced by the filter generator (so it is
/// sample-dependent), or broadcast from a single shared set for frozen
/// configurations.
#[derive(Clone, PartialEq, Debug)]
pub struct FilterBank {
    pub n: usize,
    pub m: usize,
    pub out_c: usize,
    pub in_c: usize,
    pub k: usize,
    data: Vec<f64>,
}

impl FilterBank {
    pub fn new(n: usize, m: usize, out_c: usize, in_c: usize, k: usize, data: Vec<f64>) -> Result<FilterBank> {
        if n == 0 || m == 0 || out_c == 0 || in_c == 0 || k == 0 {
            return Err(Error::Size("filter bank dimensions must all be >= 1".into()));
        }
        if data.len() != n * m * out_c * in_c * k * k {
            return Err(Error::Shape(format!(
                "filter bank wants {} weights, got {}",
                n * m * out_c * in_c * k * k,
                data.len()
            )));
        }
        Ok(FilterBank { n, m, out_c, in_c, k, data })
    }

    pub fn zeros(n: usize, m: usize, out_c: usize, in_c: usize, k: usize) -> Result<FilterBank> {
        FilterBank::new(n, m, out_c, in_c, k, vec![0.0; n * m * out_c * in_c * k * k])
    }

    pub fn block_len(&self) -> usize {
        self.out_c * self.in_c * self.k * self.k
    }

    /// Filter `t` of sample `i`, flat `[o][c][i][j]`.
    pub fn filter(&self, i: usize, t: usize) -> &[f64] {
        assert!(i < self.n && t < self.m, "bank index ({i},{t}) out of range");
        let b = self.block_len();
        let start = (i * self.m + t) * b;
        &self.data[start..start + b]
    }

    pub fn filter_mut(&mut self, i: usize, t: usize) -> &mut [f64] {
        assert!(i < self.n && t < self.m, "bank index ({i},{t}) out of range");
        let b = self.block_len();
        let start = (i * self.m + t) * b;
        &mut self.data[start..start + b]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Replicate a single-sample bank (`n == 1`) across a batch. Broadcasting
    /// is always this explicit — nothing in the crate broadcasts silently.
    pub fn broadcast_to(&self, n: usize) -> Result<FilterBank> {
        if self.n != 1 {
            return Err(Error::Shape(format!(
                "can only broadcast a single-sample bank, this one has n={}",
                self.n
            )));
        }
        let mut data = Vec::with_capacity(n * self.data.len());
        for _ in 0..n {
            data.extend_from_slice(&self.data);
        }
        FilterBank::new(n, self.m, self.out_c, self.in_c, self.k, data)
    }

    /// All blocks reordered to the core's `[i][j][c][o]` layout, preserving
    /// the `[n][m]` block order.
    pub(crate) fn transposed_blocks(&self) -> Vec<f64> {
        let b = self.block_len();
        let mut out = Vec::with_capacity(self.data.len());
        for blk in self.data.chunks_exact(b) {
            out.extend_from_slice(&transpose_block(blk, self.out_c, self.in_c, self.k));
        }
        out
    }
}

/// Per-pixel region assignment: an index in `[0, m)` for every output
/// position of every sample. Ties in the underlying feature resolve to the
/// smallest index, so the map is reproducible.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct GuidedMask {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    indices: Vec<usize>,
}

impl GuidedMask {
    pub fn new(n: usize, h: usize, w: usize, indices: Vec<usize>) -> Result<GuidedMask> {
        if n == 0 || h == 0 || w == 0 {
            return Err(Error::Size("mask dimensions must all be >= 1".into()));
        }
        if indices.len() != n * h * w {
            return Err(Error::Shape(format!(
                "mask wants {} indices, got {}",
                n * h * w,
                indices.len()
            )));
        }
        Ok(GuidedMask { n, h, w, indices })
    }

    /// Channel-argmax of a feature map (ties to the smallest channel).
    pub fn from_argmax(feature: &Tensor4) -> GuidedMask {
        let s = feature.shape();
        GuidedMask {
            n: s.n,
            h: s.h,
            w: s.w,
            indices: feature.argmax_c(),
        }
    }

    #[inline]
    pub fn get(&self, n: usize, u: usize, v: usize) -> usize {
        debug_assert!(n < self.n && u < self.h && v < self.w);
        self.indices[(n * self.h + u) * self.w + v]
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    /// Error unless every index is a valid region id below `m`.
    pub fn check_regions(&self, m: usize) -> Result<()> {
        if let Some(&bad) = self.indices.iter().find(|&&t| t >= m) {
            return Err(Error::Index(format!(
                "mask references region {bad}, but the bank has only {m}"
            )));
        }
        Ok(())
    }

    /// Shift the assignment map in lockstep with a circularly shifted input.
    pub fn circular_shift(&self, dy: isize, dx: isize) -> GuidedMask {
        let mut out = vec![0usize; self.indices.len()];
        for n in 0..self.n {
            for u in 0..self.h {
                let su = (u as isize - dy).rem_euclid(self.h as isize) as usize;
                for v in 0..self.w {
                    let sv = (v as isize - dx).rem_euclid(self.w as isize) as usize;
                    out[(n * self.h + u) * self.w + v] = self.indices[(n * self.h + su) * self.w + sv];
                }
            }
        }
        GuidedMask { n: self.n, h: self.h, w: self.w, indices: out }
    }
}
