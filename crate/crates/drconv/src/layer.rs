//! The full operator: guide → mask → per-sample filters → routed convolution.
//!
//! One layer owns three parameter sets:
//!
//! * a **guide** convolution (no bias) that scores each output position per
//!   region; its argmax is the routing mask;
//! * a **filter source** — either a generator network that emits a fresh
//!   filter bank per sample, or one fixed bank shared by every sample;
//! * nothing else: the routed convolution itself has no parameters beyond
//!   the bank and carries no bias.
//!
//! Backward combines the pieces' exact adjoints with the softmax substitute
//! for the non-differentiable argmax. The input gradient therefore has up
//! to three components (through the routed convolution, through the guide,
//! and through the generator's pooling), exposed separately in
//! [`DrConvGrads`] so each can be verified against its own oracle.

use rand::Rng;

use crate::conv::{
    pixel_filter_grads, region_conv_backward, region_conv_forward, ConvSpec, FilterBank,
    RegionConvContext, StandardFilter,
};
use crate::error::{Error, Result};
use crate::generator::{generate_filters, generator_backward, GeneratorContext, GeneratorGrads, GeneratorParams};
use crate::mask::{guide_forward, guide_param_backward, mask_backward, MaskContext};
use crate::tensor::Tensor4;

/// Where a layer's filters come from.
#[derive(Clone, Debug, PartialEq)]
pub enum GeneratorMode {
    /// Filters are a function of the input: each sample gets its own bank.
    Dynamic(GeneratorParams),
    /// One shared bank (`n == 1`), broadcast across the batch and trained
    /// directly. The routing is still per sample.
    Fixed(FilterBank),
}

/// A region-routed convolution layer.
///
/// `regions == 1` is allowed and degenerates to an ordinary convolution
/// (single bank slot, constant mask, guide gradient identically zero) —
/// useful as an equivalence check, pointless as a model component.
#[derive(Clone, Debug, PartialEq)]
pub struct DrConvLayer {
    spec: ConvSpec,
    regions: usize,
    guide: StandardFilter,
    generator: GeneratorMode,
}

impl DrConvLayer {
    /// Assemble a layer from parts, checking that every piece agrees on the
    /// geometry. The guide must share the main spec's kernel, stride and
    /// padding (that is what puts the mask on the output grid), map the same
    /// input channels to `regions` scores, and carry no bias.
    pub fn new(spec: ConvSpec, regions: usize, guide: StandardFilter, generator: GeneratorMode) -> Result<DrConvLayer> {
        spec.validate()?;
        if regions == 0 {
            return Err(Error::Config("a layer needs at least one region".into()));
        }
        if guide.out_c != regions || guide.in_c != spec.in_channels || guide.k != spec.k {
            return Err(Error::Config(format!(
                "guide ({} -> {}, k={}) must map {} channels to {} regions with k={}",
                guide.in_c, guide.out_c, guide.k, spec.in_channels, regions, spec.k
            )));
        }
        if guide.bias().is_some() {
            return Err(Error::Config("guide filter must not carry a bias".into()));
        }
        match &generator {
            GeneratorMode::Dynamic(p) => {
                if p.m != regions || p.in_c != spec.in_channels || p.out_c != spec.out_channels || p.k != spec.k {
                    return Err(Error::Config(format!(
                        "generator emits {}x({}x{}) k={} banks, spec wants {}x({}x{}) k={}",
                        p.m, p.out_c, p.in_c, p.k, regions, spec.out_channels, spec.in_channels, spec.k
                    )));
                }
            }
            GeneratorMode::Fixed(b) => {
                if b.n != 1 {
                    return Err(Error::Config(format!(
                        "a fixed bank is shared by all samples and must have n=1, got n={}",
                        b.n
                    )));
                }
                if b.m != regions || b.out_c != spec.out_channels || b.in_c != spec.in_channels || b.k != spec.k {
                    return Err(Error::Config(format!(
                        "fixed bank {}x({}x{}) k={} does not match spec {}x({}x{}) k={}",
                        b.m, b.out_c, b.in_c, b.k, regions, spec.out_channels, spec.in_channels, spec.k
                    )));
                }
            }
        }
        Ok(DrConvLayer { spec, regions, guide, generator })
    }

    /// Random dynamic layer: guide fan-in uniform, generator as documented
    /// on [`GeneratorParams::init`]. `hidden` defaults to
    /// `regions * in_channels`, which keeps every region group as wide as
    /// the input. Draws the guide first, then the generator, so seeds
    /// reproduce exactly.
    pub fn init<R: Rng>(spec: ConvSpec, regions: usize, hidden: Option<usize>, rng: &mut R) -> Result<DrConvLayer> {
        let guide = init_guide(&spec, regions, rng)?;
        let hidden = hidden.unwrap_or(regions * spec.in_channels);
        let params = GeneratorParams::init(regions, spec.in_channels, spec.out_channels, spec.k, hidden, rng)?;
        DrConvLayer::new(spec, regions, guide, GeneratorMode::Dynamic(params))
    }

    /// Random fixed-bank layer: guide as in [`DrConvLayer::init`], bank
    /// entries fan-in uniform like an ordinary convolution's.
    pub fn init_fixed<R: Rng>(spec: ConvSpec, regions: usize, rng: &mut R) -> Result<DrConvLayer> {
        let guide = init_guide(&spec, regions, rng)?;
        let mut bank = FilterBank::zeros(1, regions, spec.out_channels, spec.in_channels, spec.k)?;
        let bound = 1.0 / ((spec.in_channels * spec.k * spec.k) as f64).sqrt();
        for w in bank.data_mut() {
            *w = rng.gen_range(-bound..bound);
        }
        DrConvLayer::new(spec, regions, guide, GeneratorMode::Fixed(bank))
    }

    pub fn spec(&self) -> &ConvSpec {
        &self.spec
    }

    pub fn regions(&self) -> usize {
        self.regions
    }

    pub fn guide(&self) -> &StandardFilter {
        &self.guide
    }

    pub fn guide_mut(&mut self) -> &mut StandardFilter {
        &mut self.guide
    }

    pub fn generator(&self) -> &GeneratorMode {
        &self.generator
    }

    pub fn generator_mut(&mut self) -> &mut GeneratorMode {
        &mut self.generator
    }

    /// Full forward pass; the context carries everything backward needs.
    pub fn forward(&self, x: &Tensor4) -> Result<(Tensor4, LayerContext)> {
        if x.shape().c != self.spec.in_channels {
            return Err(Error::Shape(format!(
                "layer expects {} input channels, got {}",
                self.spec.in_channels,
                x.shape().c
            )));
        }
        let (bank, gen_ctx) = match &self.generator {
            GeneratorMode::Dynamic(p) => {
                let (bank, ctx) = generate_filters(x, p)?;
                (bank, Some(ctx))
            }
            GeneratorMode::Fixed(b) => (b.broadcast_to(x.shape().n)?, None),
        };
        let guide_spec = ConvSpec::new(
            self.spec.in_channels,
            self.regions,
            self.spec.k,
            self.spec.stride,
            self.spec.padding,
        );
        let outputs = guide_forward(x, &self.guide, &guide_spec)?;
        let (y, region_ctx) = region_conv_forward(x, &bank, &outputs.mask, &self.spec)?;
        let mask_ctx = MaskContext::new(x.clone(), self.guide.clone(), guide_spec, outputs, bank)?;
        Ok((y, LayerContext { mask_ctx, region_ctx, gen_ctx }))
    }

    /// Full backward pass; consumes the forward context.
    pub fn backward(&self, ctx: LayerContext, dy: &Tensor4) -> Result<DrConvGrads> {
        // Per-pixel filter gradients feed the routing gradient; compute them
        // before the region context is consumed.
        let g = pixel_filter_grads(ctx.region_ctx.input(), dy, &self.spec)?;
        let d_feature = mask_backward(&ctx.mask_ctx, &g)?;
        let (d_guide, d_input_guide) = guide_param_backward(&ctx.mask_ctx, &d_feature)?;
        let region = region_conv_backward(ctx.region_ctx, dy)?;
        let (d_generator, d_input_gen, d_fixed_bank) = match &self.generator {
            GeneratorMode::Dynamic(p) => {
                let gen_ctx = ctx.gen_ctx.ok_or_else(|| {
                    Error::Context("dynamic layer given a context without generator state".into())
                })?;
                let (grads, dx) = generator_backward(p, &gen_ctx, &region.d_bank)?;
                (Some(grads), Some(dx), None)
            }
            GeneratorMode::Fixed(b) => {
                // The bank was broadcast, so its gradient is the sum of the
                // per-sample rows.
                let mut summed = FilterBank::zeros(1, b.m, b.out_c, b.in_c, b.k)?;
                let row = summed.data().len();
                for chunk in region.d_bank.data().chunks_exact(row) {
                    for (acc, g) in summed.data_mut().iter_mut().zip(chunk) {
                        *acc += g;
                    }
                }
                (None, None, Some(summed))
            }
        };
        Ok(DrConvGrads {
            d_input_main: region.d_input,
            d_input_guide,
            d_input_gen,
            d_bank: region.d_bank,
            d_feature,
            d_guide,
            d_generator,
            d_fixed_bank,
        })
    }
}

fn init_guide<R: Rng>(spec: &ConvSpec, regions: usize, rng: &mut R) -> Result<StandardFilter> {
    spec.validate()?;
    let bound = 1.0 / ((spec.in_channels * spec.k * spec.k) as f64).sqrt();
    let weights = (0..regions * spec.in_channels * spec.k * spec.k)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    StandardFilter::new(regions, spec.in_channels, spec.k, weights, None)
}

/// Forward state captured for [`DrConvLayer::backward`].
#[derive(Debug)]
pub struct LayerContext {
    pub mask_ctx: MaskContext,
    pub region_ctx: RegionConvContext,
    pub gen_ctx: Option<GeneratorContext>,
}

impl LayerContext {
    /// The routing the forward pass actually used.
    pub fn mask(&self) -> &crate::conv::GuidedMask {
        &self.mask_ctx.outputs.mask
    }

    /// The bank the forward pass routed over (per sample).
    pub fn bank(&self) -> &FilterBank {
        self.mask_ctx.bank()
    }
}

/// Every gradient a layer produces, kept separate by path.
#[derive(Debug)]
pub struct DrConvGrads {
    /// Input gradient through the routed convolution (fixed routing).
    pub d_input_main: Tensor4,
    /// Input gradient through the guide convolution.
    pub d_input_guide: Tensor4,
    /// Input gradient through the generator's pooling (dynamic mode only).
    pub d_input_gen: Option<Tensor4>,
    /// Per-sample bank gradient under fixed routing.
    pub d_bank: FilterBank,
    /// Guide-feature gradient (after the softmax pullback).
    pub d_feature: Tensor4,
    /// Guide-weight gradient.
    pub d_guide: StandardFilter,
    /// Generator parameter gradients (dynamic mode only).
    pub d_generator: Option<GeneratorGrads>,
    /// Summed bank gradient (fixed mode only): the trainable bank is shared,
    /// so the per-sample rows collapse into one.
    pub d_fixed_bank: Option<FilterBank>,
}

impl DrConvGrads {
    /// Total input gradient: the sum of every path that touches the input.
    pub fn d_input(&self) -> Tensor4 {
        let mut total = self
            .d_input_main
            .add(&self.d_input_guide)
            .expect("input-gradient paths share the input shape");
        if let Some(g) = &self.d_input_gen {
            total = total.add(g).expect("input-gradient paths share the input shape");
        }
        total
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::{conv2d_forward, local_conv_forward, Padding};
    use crate::mask::select_filters;
    use crate::tensor::Shape4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: Shape4, rng: &mut ChaCha8Rng) -> Tensor4 {
        Tensor4::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn single_region_fixed_bank_is_a_standard_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let spec = ConvSpec::same(3, 4, 3);
        let layer = DrConvLayer::init_fixed(spec, 1, &mut rng).unwrap();
        let x = rand_tensor(Shape4::new(2, 6, 6, 3), &mut rng);
        let (y, _) = layer.forward(&x).unwrap();

        let GeneratorMode::Fixed(bank) = layer.generator() else {
            panic!("constructed fixed, got dynamic");
        };
        let filter = StandardFilter::new(4, 3, 3, bank.filter(0, 0).to_vec(), None).unwrap();
        let (y_std, _) = conv2d_forward(&x, &filter, &spec).unwrap();
        assert_eq!(y, y_std, "m=1 routed conv must be bit-identical to standard conv");
    }

    #[test]
    fn output_equals_selected_filter_field_applied_locally() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let spec = ConvSpec::same(2, 3, 3);
        let layer = DrConvLayer::init(spec, 4, None, &mut rng).unwrap();
        let x = rand_tensor(Shape4::new(2, 5, 5, 2), &mut rng);
        let (y, ctx) = layer.forward(&x).unwrap();

        let fields = select_filters(ctx.bank(), ctx.mask()).unwrap();
        for (n, field) in fields.iter().enumerate() {
            let xi = Tensor4::from_fn(Shape4::new(1, 5, 5, 2), |_, u, v, c| x.get(n, u, v, c)).unwrap();
            let yi = local_conv_forward(&xi, field, &spec).unwrap();
            for u in 0..5 {
                for v in 0..5 {
                    for o in 0..3 {
                        assert_eq!(
                            y.get(n, u, v, o),
                            yi.get(0, u, v, o),
                            "sample {n} position ({u},{v},{o})"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn single_region_guide_gradient_is_exactly_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let spec = ConvSpec::same(2, 2, 3);
        let layer = DrConvLayer::init(spec, 1, None, &mut rng).unwrap();
        let x = rand_tensor(Shape4::new(1, 4, 4, 2), &mut rng);
        let (y, ctx) = layer.forward(&x).unwrap();
        let dy = Tensor4::filled(y.shape(), 1.0).unwrap();
        let grads = layer.backward(ctx, &dy).unwrap();
        assert!(
            grads.d_feature.data().iter().all(|&v| v == 0.0),
            "softmax over one region is constant, its pullback must vanish identically"
        );
        assert!(grads.d_guide.weights().iter().all(|&v| v == 0.0));
        assert!(
            grads.d_input_guide.data().iter().all(|&v| v == 0.0),
            "no feature gradient means no guide input gradient"
        );
    }

    #[test]
    fn every_parameter_path_receives_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let spec = ConvSpec::same(2, 3, 3);
        let layer = DrConvLayer::init(spec, 4, None, &mut rng).unwrap();
        let x = rand_tensor(Shape4::new(2, 6, 6, 2), &mut rng);
        let (y, ctx) = layer.forward(&x).unwrap();
        let dy = rand_tensor(y.shape(), &mut rng);
        let grads = layer.backward(ctx, &dy).unwrap();

        let nonzero = |s: &[f64]| s.iter().any(|&v| v != 0.0);
        assert!(nonzero(grads.d_input_main.data()), "main input path is dead");
        assert!(nonzero(grads.d_input_guide.data()), "guide input path is dead");
        assert!(nonzero(grads.d_input_gen.as_ref().unwrap().data()), "generator input path is dead");
        assert!(nonzero(grads.d_bank.data()), "bank gradient is dead");
        assert!(nonzero(grads.d_feature.data()), "routing gradient is dead");
        assert!(nonzero(grads.d_guide.weights()), "guide weights get no gradient");
        let gg = grads.d_generator.as_ref().unwrap();
        assert!(nonzero(&gg.w1) && nonzero(&gg.w2), "generator stages get no gradient");
        assert!(grads.d_fixed_bank.is_none());

        let total = grads.d_input();
        let summed = grads
            .d_input_main
            .add(&grads.d_input_guide)
            .unwrap()
            .add(grads.d_input_gen.as_ref().unwrap())
            .unwrap();
        assert_eq!(total, summed);
    }

    #[test]
    fn fixed_bank_gradient_sums_the_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let spec = ConvSpec::same(1, 2, 1);
        let layer = DrConvLayer::init_fixed(spec, 2, &mut rng).unwrap();
        let x = rand_tensor(Shape4::new(3, 4, 4, 1), &mut rng);
        let (y, ctx) = layer.forward(&x).unwrap();
        let dy = rand_tensor(y.shape(), &mut rng);
        let grads = layer.backward(ctx, &dy).unwrap();

        let fixed = grads.d_fixed_bank.as_ref().unwrap();
        assert_eq!(fixed.n, 1);
        let row = fixed.data().len();
        let mut manual = vec![0.0; row];
        for chunk in grads.d_bank.data().chunks_exact(row) {
            for (a, g) in manual.iter_mut().zip(chunk) {
                *a += g;
            }
        }
        assert_eq!(fixed.data(), &manual[..]);
        assert!(grads.d_generator.is_none());
        assert!(grads.d_input_gen.is_none());
    }

    #[test]
    fn strided_layer_shrinks_the_grid_and_the_mask_with_it() {
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let spec = ConvSpec::new(2, 3, 3, 2, Padding::SameZero);
        let layer = DrConvLayer::init(spec, 3, None, &mut rng).unwrap();
        let x = rand_tensor(Shape4::new(1, 7, 7, 2), &mut rng);
        let (y, ctx) = layer.forward(&x).unwrap();
        assert_eq!(y.shape(), Shape4::new(1, 4, 4, 3));
        assert_eq!((ctx.mask().h, ctx.mask().w), (4, 4));
        assert_eq!(ctx.mask_ctx.outputs.feature.shape(), Shape4::new(1, 4, 4, 3));
    }

    #[test]
    fn mismatched_parts_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let spec = ConvSpec::same(2, 3, 3);

        // Guide with the wrong kernel size.
        let bad_guide = StandardFilter::zeros(4, 2, 1, false).unwrap();
        let params = GeneratorParams::init(4, 2, 3, 3, 8, &mut rng).unwrap();
        let err = DrConvLayer::new(spec, 4, bad_guide, GeneratorMode::Dynamic(params.clone())).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "got {err:?}");

        // Generator built for a different region count.
        let guide = StandardFilter::zeros(4, 2, 3, false).unwrap();
        let wrong = GeneratorParams::init(2, 2, 3, 3, 8, &mut rng).unwrap();
        let err = DrConvLayer::new(spec, 4, guide.clone(), GeneratorMode::Dynamic(wrong)).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "got {err:?}");

        // Fixed bank with a batch dimension.
        let fat_bank = FilterBank::zeros(2, 4, 3, 2, 3).unwrap();
        let err = DrConvLayer::new(spec, 4, guide.clone(), GeneratorMode::Fixed(fat_bank)).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "got {err:?}");

        // Input with the wrong channel count.
        let layer = DrConvLayer::new(spec, 4, guide, GeneratorMode::Dynamic(params)).unwrap();
        let x = Tensor4::zeros(Shape4::new(1, 5, 5, 3)).unwrap();
        let err = layer.forward(&x).unwrap_err();
        assert!(matches!(err, Error::Shape(_)), "got {err:?}");
    }
}
