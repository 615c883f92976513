//! Stochastic gradient descent with classical momentum and coupled weight
//! decay. Decay is added to the gradient before the momentum update
//! (`v <- mu*v + (g + wd*theta)`, `theta <- theta - lr*v`) and is skipped for
//! every parameter group the model flags as exempt (biases, guide filters).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::train::model::Model;

/// Optimizer hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> SgdConfig {
        SgdConfig { lr: 0.05, momentum: 0.9, weight_decay: 4e-5 }
    }
}

/// The optimizer state: one velocity buffer per parameter group, in the
/// model's canonical parameter order.
#[derive(Clone, Debug)]
pub struct SgdMomentum {
    pub cfg: SgdConfig,
    velocities: Vec<Vec<f64>>,
}

impl SgdMomentum {
    /// Zero-initialized velocities matching `model`'s layout.
    pub fn new(cfg: SgdConfig, model: &Model) -> SgdMomentum {
        let mut velocities = Vec::new();
        model.for_each_param(|_, _, v| velocities.push(vec![0.0; v.len()]));
        SgdMomentum { cfg, velocities }
    }

    /// One update step at learning rate `lr` (the caller owns any schedule).
    /// `grads` must be in the model's canonical parameter order.
    pub fn step(&mut self, model: &mut Model, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if grads.len() != self.velocities.len() {
            return Err(Error::Shape(format!(
                "got {} gradient groups, optimizer tracks {}",
                grads.len(),
                self.velocities.len()
            )));
        }
        let mut bad: Option<Error> = None;
        let mut cursor = 0;
        let (mu, wd) = (self.cfg.momentum, self.cfg.weight_decay);
        let velocities = &mut self.velocities;
        model.for_each_param_mut(|name, decay, theta| {
            if bad.is_some() {
                return;
            }
            let g = &grads[cursor];
            let v = &mut velocities[cursor];
            cursor += 1;
            if g.len() != theta.len() {
                bad = Some(Error::Shape(format!(
                    "gradient group {name} has {} entries, parameter has {}",
                    g.len(),
                    theta.len()
                )));
                return;
            }
            let wd = if decay { wd } else { 0.0 };
            for i in 0..theta.len() {
                v[i] = mu * v[i] + (g[i] + wd * theta[i]);
                theta[i] -= lr * v[i];
            }
        });
        match bad {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::Padding;
    use crate::train::model::{BlockKind, BlockSpec, InputSpec, ModelConfig};

    fn one_block_config() -> ModelConfig {
        ModelConfig {
            input: InputSpec { height: 4, width: 4, channels: 1 },
            classes: 2,
            blocks: vec![BlockSpec {
                kind: BlockKind::Standard,
                out_channels: 2,
                k: 3,
                stride: 1,
                padding: Padding::SameZero,
                regions: 0,
                hidden: 0,
                pool_after: false,
            }],
            head_width: 0,
        }
    }

    fn zero_grads(model: &Model) -> Vec<Vec<f64>> {
        let mut g = Vec::new();
        model.for_each_param(|_, _, v| g.push(vec![0.0; v.len()]));
        g
    }

    #[test]
    fn plain_sgd_takes_the_textbook_step() {
        let cfg = one_block_config();
        let mut model = Model::init(&cfg, 0).unwrap();
        let before: Vec<Vec<f64>> = {
            let mut p = Vec::new();
            model.for_each_param(|_, _, v| p.push(v.to_vec()));
            p
        };
        let mut grads = zero_grads(&model);
        for g in &mut grads {
            for (i, gi) in g.iter_mut().enumerate() {
                *gi = (i as f64 + 1.0) * 0.01;
            }
        }
        let mut opt = SgdMomentum::new(SgdConfig { lr: 0.1, momentum: 0.0, weight_decay: 0.0 }, &model);
        opt.step(&mut model, &grads, 0.1).unwrap();
        let mut gi = 0;
        model.for_each_param(|_, _, v| {
            for (i, &x) in v.iter().enumerate() {
                let want = before[gi][i] - 0.1 * grads[gi][i];
                assert!((x - want).abs() < 1e-15);
            }
            gi += 1;
        });
    }

    #[test]
    fn momentum_accumulates_across_steps() {
        // With a constant gradient g and zero decay, two steps move theta by
        // lr*g + lr*(mu*g + g) = lr*g*(2 + mu).
        let cfg = one_block_config();
        let mut model = Model::init(&cfg, 1).unwrap();
        let mut start = Vec::new();
        model.for_each_param(|_, _, v| start.push(v.to_vec()));
        let mut grads = zero_grads(&model);
        for g in &mut grads {
            g.fill(1.0);
        }
        let mut opt = SgdMomentum::new(SgdConfig { lr: 0.01, momentum: 0.5, weight_decay: 0.0 }, &model);
        opt.step(&mut model, &grads, 0.01).unwrap();
        opt.step(&mut model, &grads, 0.01).unwrap();
        let mut gi = 0;
        model.for_each_param(|_, _, v| {
            for (i, &x) in v.iter().enumerate() {
                let want = start[gi][i] - 0.01 * (2.0 + 0.5);
                assert!((x - want).abs() < 1e-15);
            }
            gi += 1;
        });
    }

    #[test]
    fn decay_shrinks_weights_but_leaves_biases_alone() {
        let cfg = one_block_config();
        let mut model = Model::init(&cfg, 2).unwrap();
        // Make biases distinctly nonzero so a decay bug would show.
        model.for_each_param_mut(|_, decay, v| {
            if !decay {
                v.fill(0.7);
            }
        });
        let mut before = Vec::new();
        model.for_each_param(|_, _, v| before.push(v.to_vec()));
        let grads = zero_grads(&model);
        let mut opt = SgdMomentum::new(SgdConfig { lr: 0.1, momentum: 0.0, weight_decay: 0.5 }, &model);
        opt.step(&mut model, &grads, 0.1).unwrap();
        let mut gi = 0;
        model.for_each_param(|_, decay, v| {
            for (i, &x) in v.iter().enumerate() {
                let want = if decay {
                    before[gi][i] * (1.0 - 0.1 * 0.5)
                } else {
                    before[gi][i]
                };
                assert!((x - want).abs() < 1e-15, "decay={decay}: {x} vs {want}");
            }
            gi += 1;
        });
    }

    #[test]
    fn mismatched_gradients_are_rejected() {
        let cfg = one_block_config();
        let mut model = Model::init(&cfg, 3).unwrap();
        let mut opt = SgdMomentum::new(SgdConfig::default(), &model);
        let too_few = vec![vec![0.0; 4]];
        assert!(matches!(opt.step(&mut model, &too_few, 0.1), Err(Error::Shape(_))));

        let mut wrong_len = zero_grads(&model);
        wrong_len[0].pop();
        assert!(matches!(opt.step(&mut model, &wrong_len, 0.1), Err(Error::Shape(_))));
    }
}
