//! Parameter counts and multiply-add budgets for the convolution variants.
//!
//! The point these numbers make: a per-pixel filter field pays `h*w` times
//! the parameters of a standard convolution, while the region-routed layer
//! keeps the compute profile of a standard convolution (plus a small guide
//! and generator overhead) and its parameter count does **not** scale with
//! the spatial grid at all.
//!
//! Conventions, applied uniformly:
//! * multiply-adds (MADDs) count filter-tap multiplies per *sample*;
//!   zero-padded taps count (padding multiplies zeros, it does not shrink
//!   the loop), biases and pooling normalizations do not;
//! * parameter counts include biases where the variant has them.
//!
//! Every closed form here has a `counted_*` twin that walks the same loop
//! nest as the real kernel and counts taps one by one; tests hold the pairs
//! equal so an off-by-a-factor in either direction cannot survive.

use crate::conv::ConvSpec;
use crate::error::{Error, Result};

/// A cost estimate: trainable parameters and per-sample multiply-adds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Cost {
    pub params: u64,
    pub madds: u64,
}

impl Cost {
    pub fn sum(self, other: Cost) -> Cost {
        Cost {
            params: self.params + other.params,
            madds: self.madds + other.madds,
        }
    }
}

fn out_hw(spec: &ConvSpec, h: usize, w: usize) -> Result<(u64, u64)> {
    spec.validate()?;
    let (oh, ow) = spec.out_hw(h, w)?;
    Ok((oh as u64, ow as u64))
}

/// Standard convolution with bias: one filter everywhere.
pub fn standard_conv(spec: &ConvSpec, h: usize, w: usize) -> Result<Cost> {
    let (oh, ow) = out_hw(spec, h, w)?;
    let (c, o, k) = (spec.in_channels as u64, spec.out_channels as u64, spec.k as u64);
    Ok(Cost {
        params: o * c * k * k + o,
        madds: oh * ow * o * c * k * k,
    })
}

/// Per-pixel filter field (no bias): same compute as standard, parameters
/// multiplied by the whole output grid.
pub fn local_conv(spec: &ConvSpec, h: usize, w: usize) -> Result<Cost> {
    let (oh, ow) = out_hw(spec, h, w)?;
    let (c, o, k) = (spec.in_channels as u64, spec.out_channels as u64, spec.k as u64);
    Ok(Cost {
        params: oh * ow * o * c * k * k,
        madds: oh * ow * o * c * k * k,
    })
}

/// Region-routed convolution with a per-sample generator: main conv (no
/// parameters of its own — it reads the generated bank) + guide conv +
/// two-stage generator.
pub fn dynamic_region_conv(spec: &ConvSpec, h: usize, w: usize, regions: usize, hidden: usize) -> Result<Cost> {
    if regions == 0 || hidden == 0 || hidden % regions != 0 {
        return Err(Error::Config(format!(
            "regions={regions} and hidden={hidden} must be positive with hidden divisible by regions"
        )));
    }
    let (oh, ow) = out_hw(spec, h, w)?;
    let (c, o, k) = (spec.in_channels as u64, spec.out_channels as u64, spec.k as u64);
    let (m, hid) = (regions as u64, hidden as u64);
    let guide_params = m * c * k * k;
    let gen_params = hid * c + hid + o * c * hid;
    let main_madds = oh * ow * o * c * k * k;
    let guide_madds = oh * ow * m * c * k * k;
    // Both generator stages run once per cell of the k x k pooled grid;
    // the grouped stage reads hidden/m units for each of m*o*c outputs.
    let gen_madds = k * k * (hid * c + o * c * hid);
    Ok(Cost {
        params: guide_params + gen_params,
        madds: main_madds + guide_madds + gen_madds,
    })
}

/// Region-routed convolution over one shared, directly-trained bank.
pub fn fixed_region_conv(spec: &ConvSpec, h: usize, w: usize, regions: usize) -> Result<Cost> {
    if regions == 0 {
        return Err(Error::Config("regions must be >= 1".into()));
    }
    let (oh, ow) = out_hw(spec, h, w)?;
    let (c, o, k) = (spec.in_channels as u64, spec.out_channels as u64, spec.k as u64);
    let m = regions as u64;
    Ok(Cost {
        params: m * c * k * k + m * o * c * k * k,
        madds: oh * ow * o * c * k * k + oh * ow * m * c * k * k,
    })
}

/// Tap-by-tap count of a standard convolution's multiplies, walking the
/// same `(u, v, i, j, c, o)` nest as the kernel but never skipping a tap.
pub fn counted_standard_madds(spec: &ConvSpec, h: usize, w: usize) -> Result<u64> {
    let (oh, ow) = out_hw(spec, h, w)?;
    let mut count = 0u64;
    for _u in 0..oh {
        for _v in 0..ow {
            for _i in 0..spec.k {
                for _j in 0..spec.k {
                    for _c in 0..spec.in_channels {
                        for _o in 0..spec.out_channels {
                            count += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(count)
}

/// Tap-by-tap count for the dynamic region-routed layer: main conv + guide
/// conv + the generator's two stages over the pooled grid.
pub fn counted_dynamic_region_madds(spec: &ConvSpec, h: usize, w: usize, regions: usize, hidden: usize) -> Result<u64> {
    if regions == 0 || hidden == 0 || hidden % regions != 0 {
        return Err(Error::Config(format!(
            "regions={regions} and hidden={hidden} must be positive with hidden divisible by regions"
        )));
    }
    let mut count = counted_standard_madds(spec, h, w)?;
    let guide_spec = ConvSpec::new(spec.in_channels, regions, spec.k, spec.stride, spec.padding);
    count += counted_standard_madds(&guide_spec, h, w)?;
    let group = hidden / regions;
    for _i in 0..spec.k {
        for _j in 0..spec.k {
            for _e in 0..hidden {
                for _c in 0..spec.in_channels {
                    count += 1;
                }
            }
            for _t in 0..regions {
                for _o in 0..spec.out_channels {
                    for _c in 0..spec.in_channels {
                        for _r in 0..group {
                            count += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(count)
}
