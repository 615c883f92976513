//! A small image classifier assembled from convolution blocks: each block
//! is a standard convolution or a region-routed one, followed by a ReLU and
//! an optional 2x2 average pool; a global average pool and a 1x1-conv head
//! turn the final feature map into class logits.
//!
//! Everything runs per item (`n == 1`): the trainer parallelizes across
//! items and reduces gradients in item order, so results are bit-identical
//! for any thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conv::{conv2d_backward, conv2d_forward, ConvContext, ConvSpec, GuidedMask, Padding, StandardFilter};
use crate::cost::{self, Cost};
use crate::error::{Error, Result};
use crate::generator::{adaptive_avg_pool, adaptive_avg_pool_backward};
use crate::layer::{DrConvLayer, GeneratorMode, LayerContext};
use crate::tensor::{Shape4, Tensor4};

/// Input geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

/// What kind of convolution a block runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// One filter everywhere, with bias.
    Standard,
    /// Region-routed, filters generated per sample.
    Dynamic,
    /// Region-routed, one shared trainable bank.
    Fixed,
}

fn default_stride() -> usize {
    1
}

fn default_padding() -> Padding {
    Padding::SameZero
}

/// One block of the stack. `regions`/`hidden` matter only for the routed
/// kinds; `hidden = 0` means `regions * in_channels`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub out_channels: usize,
    pub k: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default = "default_padding")]
    pub padding: Padding,
    #[serde(default)]
    pub regions: usize,
    #[serde(default)]
    pub hidden: usize,
    /// Append a 2x2 average pool after this block's ReLU.
    #[serde(default)]
    pub pool_after: bool,
}

/// Full model description; serializable, and sufficient to rebuild the
/// parameter layout exactly (checkpoints rely on that).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input: InputSpec,
    pub classes: usize,
    pub blocks: Vec<BlockSpec>,
    /// Hidden width of the classifier head; `0` = a single linear map.
    #[serde(default)]
    pub head_width: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Block {
    Standard { filter: StandardFilter, spec: ConvSpec },
    Routed { layer: DrConvLayer },
}

impl Block {
    fn spec(&self) -> &ConvSpec {
        match self {
            Block::Standard { spec, .. } => spec,
            Block::Routed { layer } => layer.spec(),
        }
    }
}

/// The assembled classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub blocks: Vec<Block>,
    /// 1x1 convolutions applied to the globally pooled feature vector.
    pub head: Vec<StandardFilter>,
}

fn pooled_dim(d: usize) -> usize {
    (d / 2).max(1)
}

impl Model {
    /// Build and randomly initialize a model. All randomness comes from the
    /// seed; blocks draw first (in order), then the head.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Model> {
        if config.classes < 2 {
            return Err(Error::Config(format!(
                "a classifier needs at least 2 classes, got {}",
                config.classes
            )));
        }
        if config.input.height == 0 || config.input.width == 0 || config.input.channels == 0 {
            return Err(Error::Config("input dimensions must all be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks = Vec::with_capacity(config.blocks.len());
        let mut channels = config.input.channels;
        for (i, b) in config.blocks.iter().enumerate() {
            let spec = ConvSpec::new(channels, b.out_channels, b.k, b.stride, b.padding);
            spec.validate()
                .map_err(|e| Error::Config(format!("block {i}: {e}")))?;
            let block = match b.kind {
                BlockKind::Standard => {
                    let filter = init_standard_filter(&spec, &mut rng);
                    Block::Standard { filter, spec }
                }
                BlockKind::Dynamic => {
                    let hidden = if b.hidden == 0 { None } else { Some(b.hidden) };
                    let layer = DrConvLayer::init(spec, b.regions, hidden, &mut rng)
                        .map_err(|e| Error::Config(format!("block {i}: {e}")))?;
                    Block::Routed { layer }
                }
                BlockKind::Fixed => {
                    let layer = DrConvLayer::init_fixed(spec, b.regions, &mut rng)
                        .map_err(|e| Error::Config(format!("block {i}: {e}")))?;
                    Block::Routed { layer }
                }
            };
            blocks.push(block);
            channels = b.out_channels;
        }

        let mut head = Vec::new();
        if config.head_width > 0 {
            head.push(init_standard_filter(&ConvSpec::same(channels, config.head_width, 1), &mut rng));
            head.push(init_standard_filter(&ConvSpec::same(config.head_width, config.classes, 1), &mut rng));
        } else {
            head.push(init_standard_filter(&ConvSpec::same(channels, config.classes, 1), &mut rng));
        }
        Ok(Model { config: config.clone(), blocks, head })
    }

    /// Visit every parameter vector in canonical order with its name and
    /// whether weight decay applies to it. Biases and guide convolutions are
    /// exempt from decay; all other weights get it.
    pub fn for_each_param(&self, mut f: impl FnMut(&str, bool, &[f64])) {
        for (i, block) in self.blocks.iter().enumerate() {
            match block {
                Block::Standard { filter, .. } => {
                    f(&format!("block{i}.weights"), true, filter.weights());
                    if let Some(b) = filter.bias() {
                        f(&format!("block{i}.bias"), false, b);
                    }
                }
                Block::Routed { layer } => {
                    f(&format!("block{i}.guide"), false, layer.guide().weights());
                    match layer.generator() {
                        GeneratorMode::Dynamic(p) => {
                            f(&format!("block{i}.gen_w1"), true, &p.w1);
                            f(&format!("block{i}.gen_b1"), false, &p.b1);
                            f(&format!("block{i}.gen_w2"), true, &p.w2);
                        }
                        GeneratorMode::Fixed(bank) => {
                            f(&format!("block{i}.bank"), true, bank.data());
                        }
                    }
                }
            }
        }
        for (j, conv) in self.head.iter().enumerate() {
            f(&format!("head{j}.weights"), true, conv.weights());
            if let Some(b) = conv.bias() {
                f(&format!("head{j}.bias"), false, b);
            }
        }
    }

    /// Mutable twin of [`Model::for_each_param`], same order.
    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&str, bool, &mut [f64])) {
        for (i, block) in self.blocks.iter_mut().enumerate() {
            match block {
                Block::Standard { filter, .. } => {
                    f(&format!("block{i}.weights"), true, filter.weights_mut());
                    if let Some(b) = filter.bias_mut() {
                        f(&format!("block{i}.bias"), false, b);
                    }
                }
                Block::Routed { layer } => {
                    f(&format!("block{i}.guide"), false, layer.guide_mut().weights_mut());
                    match layer.generator_mut() {
                        GeneratorMode::Dynamic(p) => {
                            f(&format!("block{i}.gen_w1"), true, &mut p.w1);
                            f(&format!("block{i}.gen_b1"), false, &mut p.b1);
                            f(&format!("block{i}.gen_w2"), true, &mut p.w2);
                        }
                        GeneratorMode::Fixed(bank) => {
                            f(&format!("block{i}.bank"), true, bank.data_mut());
                        }
                    }
                }
            }
        }
        for (j, conv) in self.head.iter_mut().enumerate() {
            f(&format!("head{j}.weights"), true, conv.weights_mut());
            if let Some(b) = conv.bias_mut() {
                f(&format!("head{j}.bias"), false, b);
            }
        }
    }

    /// `(name, decay, len)` for every parameter group, canonical order.
    pub fn param_layout(&self) -> Vec<(String, bool, usize)> {
        let mut out = Vec::new();
        self.for_each_param(|name, decay, v| out.push((name.to_string(), decay, v.len())));
        out
    }

    /// Total number of trainable scalars.
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_param(|_, _, v| n += v.len());
        n
    }

    /// True if every parameter is finite.
    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.for_each_param(|_, _, v| ok &= v.iter().all(|x| x.is_finite()));
        ok
    }

    /// Forward one item (`n == 1`), returning the class logits and the
    /// trace needed for [`Model::grad_item`].
    pub fn forward_trace(&self, x: &Tensor4) -> Result<(Vec<f64>, Trace)> {
        if x.shape().n != 1 {
            return Err(Error::Shape(format!(
                "the model runs per item, got a batch of {}",
                x.shape().n
            )));
        }
        let mut cur = x.clone();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (block, bspec) in self.blocks.iter().zip(&self.config.blocks) {
            let (pre_relu, ctx) = match block {
                Block::Standard { filter, spec } => {
                    let (y, c) = conv2d_forward(&cur, filter, spec)?;
                    (y, BlockCtx::Std(c))
                }
                Block::Routed { layer } => {
                    let (y, c) = layer.forward(&cur)?;
                    (y, BlockCtx::Routed(Box::new(c)))
                }
            };
            cur = pre_relu.relu();
            let mut pooled_from = None;
            if bspec.pool_after {
                let s = cur.shape();
                pooled_from = Some(s);
                cur = adaptive_avg_pool(&cur, pooled_dim(s.h), pooled_dim(s.w))?;
            }
            blocks.push(BlockTrace { ctx, pre_relu, pooled_from });
        }

        let feat_shape = cur.shape();
        let mut h = adaptive_avg_pool(&cur, 1, 1)?;
        let mut head = Vec::with_capacity(self.head.len());
        let mut logits = Vec::new();
        for (j, conv) in self.head.iter().enumerate() {
            let spec = ConvSpec::same(conv.in_c, conv.out_c, 1);
            let (z, c) = conv2d_forward(&h, conv, &spec)?;
            let last = j + 1 == self.head.len();
            if last {
                logits = z.data().to_vec();
            } else {
                h = z.relu();
            }
            head.push(HeadTrace { ctx: c, pre_relu: z });
        }
        Ok((logits, Trace { blocks, feat_shape, head }))
    }

    /// Loss, correctness, and all parameter gradients (canonical order) for
    /// one labeled item.
    pub fn grad_item(&self, x: &Tensor4, label: usize) -> Result<(f64, bool, Vec<Vec<f64>>)> {
        if label >= self.config.classes {
            return Err(Error::Index(format!(
                "label {label} out of range for {} classes",
                self.config.classes
            )));
        }
        let (logits, trace) = self.forward_trace(x)?;
        let (loss, dlogits) = cross_entropy(&logits, label);
        let correct = argmax(&logits) == label;

        // Head, reversed.
        let mut head_grads: Vec<StandardFilter> = Vec::with_capacity(self.head.len());
        let mut dz = Tensor4::from_vec(Shape4::new(1, 1, 1, dlogits.len()), dlogits)?;
        let mut head_traces = trace.head;
        while let Some(ht) = head_traces.pop() {
            let g = conv2d_backward(ht.ctx, &dz)?;
            dz = g.d_input;
            head_grads.push(g.d_filter);
            if let Some(prev) = head_traces.last() {
                dz = relu_backward(&dz, &prev.pre_relu);
            }
        }
        head_grads.reverse();

        // Global pool, then blocks, reversed.
        let mut d = adaptive_avg_pool_backward(trace.feat_shape, &dz)?;
        let mut block_grads: Vec<BlockGrads> = Vec::with_capacity(self.blocks.len());
        let mut block_traces = trace.blocks;
        for block in self.blocks.iter().rev() {
            let bt = block_traces.pop().expect("one trace per block");
            if let Some(shape) = bt.pooled_from {
                d = adaptive_avg_pool_backward(shape, &d)?;
            }
            d = relu_backward(&d, &bt.pre_relu);
            match (block, bt.ctx) {
                (Block::Standard { .. }, BlockCtx::Std(ctx)) => {
                    let g = conv2d_backward(ctx, &d)?;
                    d = g.d_input;
                    block_grads.push(BlockGrads::Std(g.d_filter));
                }
                (Block::Routed { layer }, BlockCtx::Routed(ctx)) => {
                    let g = layer.backward(*ctx, &d)?;
                    d = g.d_input();
                    block_grads.push(BlockGrads::Routed { guide: g.d_guide, gen: g.d_generator, bank: g.d_fixed_bank });
                }
                _ => return Err(Error::Context("trace does not match the model's blocks".into())),
            }
        }
        block_grads.reverse();

        // Assemble in canonical order.
        let mut grads: Vec<Vec<f64>> = Vec::new();
        for (block, g) in self.blocks.iter().zip(block_grads) {
            match (block, g) {
                (Block::Standard { .. }, BlockGrads::Std(f)) => {
                    let bias = f.bias().map(<[f64]>::to_vec);
                    grads.push(f.weights().to_vec());
                    if let Some(b) = bias {
                        grads.push(b);
                    }
                }
                (Block::Routed { layer }, BlockGrads::Routed { guide, gen, bank }) => {
                    grads.push(guide.weights().to_vec());
                    match layer.generator() {
                        GeneratorMode::Dynamic(_) => {
                            let gen = gen.expect("dynamic layers produce generator gradients");
                            grads.push(gen.w1);
                            grads.push(gen.b1);
                            grads.push(gen.w2);
                        }
                        GeneratorMode::Fixed(_) => {
                            let bank = bank.expect("fixed layers produce a shared-bank gradient");
                            grads.push(bank.data().to_vec());
                        }
                    }
                }
                _ => unreachable!("bundles were built from the same block list"),
            }
        }
        for f in head_grads {
            let bias = f.bias().map(<[f64]>::to_vec);
            grads.push(f.weights().to_vec());
            if let Some(b) = bias {
                grads.push(b);
            }
        }
        Ok((loss, correct, grads))
    }

    /// Forward one item and collect the routing mask of every routed block
    /// (paired with its block index), plus the logits.
    pub fn forward_masks(&self, x: &Tensor4) -> Result<(Vec<f64>, Vec<(usize, GuidedMask)>)> {
        let (logits, trace) = self.forward_trace(x)?;
        let mut masks = Vec::new();
        for (i, bt) in trace.blocks.iter().enumerate() {
            if let BlockCtx::Routed(ctx) = &bt.ctx {
                masks.push((i, ctx.mask().clone()));
            }
        }
        Ok((logits, masks))
    }

    /// Per-component cost sheet: one row per block plus the head, with the
    /// spatial grid tracked through strides and pools.
    pub fn cost_table(&self) -> Result<Vec<(String, Cost)>> {
        let mut rows = Vec::new();
        let (mut h, mut w) = (self.config.input.height, self.config.input.width);
        for (i, (block, spec)) in self.blocks.iter().zip(&self.config.blocks).enumerate() {
            let cs = block.spec();
            let cost = match block {
                Block::Standard { .. } => cost::standard_conv(cs, h, w)?,
                Block::Routed { layer } => match layer.generator() {
                    GeneratorMode::Dynamic(p) => cost::dynamic_region_conv(cs, h, w, layer.regions(), p.hidden)?,
                    GeneratorMode::Fixed(_) => cost::fixed_region_conv(cs, h, w, layer.regions())?,
                },
            };
            let kind = match block {
                Block::Standard { .. } => "standard",
                Block::Routed { layer } => match layer.generator() {
                    GeneratorMode::Dynamic(_) => "dynamic",
                    GeneratorMode::Fixed(_) => "fixed",
                },
            };
            rows.push((format!("block{i} ({kind} {}x{}, k={})", cs.in_channels, cs.out_channels, cs.k), cost));
            let (oh, ow) = cs.out_hw(h, w)?;
            h = oh;
            w = ow;
            if spec.pool_after {
                h = pooled_dim(h);
                w = pooled_dim(w);
            }
        }
        for (j, conv) in self.head.iter().enumerate() {
            let spec = ConvSpec::same(conv.in_c, conv.out_c, 1);
            rows.push((format!("head{j} ({}x{})", conv.in_c, conv.out_c), cost::standard_conv(&spec, 1, 1)?));
        }
        Ok(rows)
    }
}

fn init_standard_filter(spec: &ConvSpec, rng: &mut ChaCha8Rng) -> StandardFilter {
    let bound = 1.0 / ((spec.in_channels * spec.k * spec.k) as f64).sqrt();
    let weights: Vec<f64> = (0..spec.out_channels * spec.in_channels * spec.k * spec.k)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    StandardFilter::new(spec.out_channels, spec.in_channels, spec.k, weights, Some(vec![0.0; spec.out_channels]))
        .expect("validated spec produces a valid filter")
}

/// Softmax cross-entropy: loss and gradient with respect to the logits.
pub fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() - (logits[label] - m);
    let mut d: Vec<f64> = exps.iter().map(|&e| e / sum).collect();
    d[label] -= 1.0;
    (loss, d)
}

/// Index of the largest logit (ties to the smallest index).
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn relu_backward(d: &Tensor4, pre_relu: &Tensor4) -> Tensor4 {
    let mut out = d.clone();
    for (dv, &z) in out.data_mut().iter_mut().zip(pre_relu.data()) {
        if z <= 0.0 {
            *dv = 0.0;
        }
    }
    out
}

enum BlockCtx {
    Std(ConvContext),
    Routed(Box<LayerContext>),
}

struct BlockTrace {
    ctx: BlockCtx,
    pre_relu: Tensor4,
    pooled_from: Option<Shape4>,
}

struct HeadTrace {
    ctx: ConvContext,
    pre_relu: Tensor4,
}

/// Everything [`Model::forward_trace`] captures for the backward pass.
pub struct Trace {
    blocks: Vec<BlockTrace>,
    feat_shape: Shape4,
    head: Vec<HeadTrace>,
}

enum BlockGrads {
    Std(StandardFilter),
    Routed {
        guide: StandardFilter,
        gen: Option<crate::generator::GeneratorGrads>,
        bank: Option<crate::conv::FilterBank>,
    },
}
