//! SGD with momentum and weight decay, plus learning-rate schedules.

use crate::model::{BasModel, ModelParams, ParamGroup};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum LrSchedule {
    Constant,
    /// Multiply by `gamma` every `every` epochs.
    Step { every: usize, gamma: f64 },
    /// Cosine decay to zero over `epochs`.
    Cosine { epochs: usize },
}

impl LrSchedule {
    pub fn factor(&self, epoch: usize) -> f64 {
        match *self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Step { every, gamma } => libm::pow(gamma, (epoch / every.max(1)) as f64),
            LrSchedule::Cosine { epochs } => {
                let t = (epoch as f64 / epochs.max(1) as f64).min(1.0);
                0.5 * (1.0 + libm::cos(core::f64::consts::PI * t))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Learning-rate multiplier for the generator.
    pub generator_lr_mult: f64,
    pub schedule: LrSchedule,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            generator_lr_mult: 10.0,
            schedule: LrSchedule::Constant,
        }
    }
}

/// Momentum buffers for one model.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<T> {
    pub config: SgdConfig,
    pub velocity: ModelParams<T>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(config: SgdConfig, model: &BasModel<T>) -> Self {
        Self {
            config,
            velocity: model.params().zeros_like(),
        }
    }

    /// `v = mu * v + (g + wd * p)`, `p -= lr * v`, per parameter group.
    pub fn step(&mut self, model: &mut BasModel<T>, grads: &ModelParams<T>, epoch: usize) {
        let base = self.config.lr * self.config.schedule.factor(epoch);
        let mu = T::from_f64_lossy(self.config.momentum);
        let wd = T::from_f64_lossy(self.config.weight_decay);
        let groups: alloc::vec::Vec<ParamGroup> =
            (0..grads.convs.len()).map(|i| model.param_group(i)).collect();
        let params = model.params_mut();
        for (i, group) in groups.into_iter().enumerate() {
            let lr = match group {
                ParamGroup::Generator => base * self.config.generator_lr_mult,
                _ => base,
            };
            let lr = T::from_f64_lossy(lr);
            let p = &mut params.convs[i];
            let v = &mut self.velocity.convs[i];
            let g = &grads.convs[i];
            for ((pw, vw), &gw) in p.iter_mut().zip(v.iter_mut()).zip(g.iter()) {
                *vw = mu * *vw + gw + wd * *pw;
                *pw -= lr * *vw;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BackboneSpec;

    #[test]
    fn schedules() {
        assert_eq!(LrSchedule::Constant.factor(7), 1.0);
        assert!((LrSchedule::Step { every: 10, gamma: 0.1 }.factor(25) - 0.01).abs() < 1e-15);
        assert_eq!(LrSchedule::Cosine { epochs: 10 }.factor(0), 1.0);
        assert!(LrSchedule::Cosine { epochs: 10 }.factor(10).abs() < 1e-15);
    }

    #[test]
    fn generator_gets_larger_step() {
        let spec = BackboneSpec::with_widths(8, &[2, 2], "stage1", 2);
        let mut model = BasModel::<f64>::build(spec, 0).unwrap();
        let before = model.params().clone();
        let mut grads = before.zeros_like();
        grads.iter_mut().for_each(|g| *g = 1.0);
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
            generator_lr_mult: 10.0,
            schedule: LrSchedule::Constant,
        };
        let mut opt = Sgd::new(cfg, &model);
        opt.step(&mut model, &grads, 0);
        let last = before.convs.len() - 1;
        assert!((model.params().convs[0].bias[0] - (before.convs[0].bias[0] - 0.1)).abs() < 1e-12);
        assert!((model.params().convs[last].bias[0] - (before.convs[last].bias[0] - 1.0)).abs() < 1e-12);
    }
}
