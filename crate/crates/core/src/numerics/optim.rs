use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use super::tensor::Tensor;
use super::NumericsError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    /// Weight decay, when set, is added to the gradient.
    Adam,
    /// Weight decay is applied directly to the parameters.
    AdamW,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    CosineAnnealing { t_max: u64, lr_min: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub clip_norm: Option<f64>,
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            schedule: Schedule::Constant,
            clip_norm: None,
        }
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::AdamW,
            weight_decay,
            ..Self::adam(lr)
        }
    }

    pub fn with_schedule(mut self, schedule: Schedule) -> Self {
        self.schedule = schedule;
        self
    }

    pub fn with_clip_norm(mut self, clip: f64) -> Self {
        self.clip_norm = Some(clip);
        self
    }
}

/// Adam / AdamW moments plus the schedule position.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, params: &ParamSet) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros_like(&p.value)).collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Learning rate used by the next call to [`OptimizerState::step`].
    pub fn current_lr(&self) -> f64 {
        lr_at(&self.config, self.step)
    }

    pub fn step(&mut self, params: &mut ParamSet) -> Result<(), NumericsError> {
        if !params.has_grad() {
            return Err(NumericsError::NoGradient);
        }
        if params.len() != self.first.len() {
            return Err(NumericsError::Shape(format!(
                "optimizer tracks {} parameters, got {}",
                self.first.len(),
                params.len()
            )));
        }
        let cfg = self.config;
        let clip_scale = match cfg.clip_norm {
            Some(max) => {
                let norm = params.grad_norm();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let lr = self.current_lr();
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - cfg.beta1.powf(t);
        let bc2 = 1.0 - cfg.beta2.powf(t);
        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            if m.shape() != p.value.shape() {
                return Err(NumericsError::Shape(format!("moment shape for {}", p.name)));
            }
            let value = p.value.data_mut();
            let grad = p.grad.data();
            for k in 0..value.len() {
                let mut g = grad[k] * clip_scale;
                if cfg.kind == OptimizerKind::Adam && cfg.weight_decay != 0.0 {
                    g += cfg.weight_decay * value[k];
                }
                let mk = &mut m.data_mut()[k];
                *mk = cfg.beta1 * *mk + (1.0 - cfg.beta1) * g;
                let vk = &mut v.data_mut()[k];
                *vk = cfg.beta2 * *vk + (1.0 - cfg.beta2) * g * g;
                let update = (*mk / bc1) / ((*vk / bc2).sqrt() + cfg.eps);
                if cfg.kind == OptimizerKind::AdamW {
                    value[k] -= lr * cfg.weight_decay * value[k];
                }
                value[k] -= lr * update;
            }
            if !p.value.is_finite() {
                return Err(NumericsError::NonFinite {
                    op: "optimizer_step",
                    phase: "update",
                });
            }
        }
        Ok(())
    }
}

pub fn lr_at(cfg: &OptimizerConfig, step: u64) -> f64 {
    match cfg.schedule {
        Schedule::Constant => cfg.lr,
        Schedule::CosineAnnealing { t_max, lr_min } => {
            if t_max == 0 {
                return lr_min;
            }
            let frac = step.min(t_max) as f64 / t_max as f64;
            lr_min + 0.5 * (cfg.lr - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64, grad: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        let id = ps.add("w", Tensor::scalar(value)).unwrap();
        ps.get_mut(id).grad = Tensor::scalar(grad);
        ps
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let cfg = OptimizerConfig::adam(0.1).with_schedule(Schedule::CosineAnnealing {
            t_max: 50,
            lr_min: 0.001,
        });
        assert_eq!(lr_at(&cfg, 0), 0.1);
        assert!((lr_at(&cfg, 50) - 0.001).abs() < 1e-15);
        assert!((lr_at(&cfg, 25) - 0.0505).abs() < 1e-12);
    }

    #[test]
    fn step_before_backward_fails() {
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::scalar(1.0)).unwrap();
        let mut st = OptimizerState::new(OptimizerConfig::adam(0.1), &ps);
        assert!(matches!(st.step(&mut ps), Err(NumericsError::NoGradient)));
    }

    #[test]
    fn clipping_halves_gradients() {
        // Global norm 10, clip at 5. Zero betas and a huge eps make the step
        // g / (|g| + eps), which exposes the clipped gradient directly.
        let mut ps = ParamSet::new();
        let id = ps.add("w", Tensor::row(&[0.0, 0.0])).unwrap();
        ps.get_mut(id).grad = Tensor::row(&[6.0, 8.0]);
        ps.mark_grads_ready();
        let cfg = OptimizerConfig {
            beta1: 0.0,
            beta2: 0.0,
            eps: 1e6,
            ..OptimizerConfig::adam(1.0)
        }
        .with_clip_norm(5.0);
        let mut st = OptimizerState::new(cfg, &ps);
        st.step(&mut ps).unwrap();
        let v = ps.get(id).value.data().to_vec();
        let expected = [-3.0 / (3.0 + 1e6), -4.0 / (4.0 + 1e6)];
        assert!((v[0] - expected[0]).abs() < 1e-15);
        assert!((v[1] - expected[1]).abs() < 1e-15);
    }

    #[test]
    fn adamw_decays_zero_grad_param() {
        let mut ps = single(2.0, 0.0);
        ps.mark_grads_ready();
        let mut st = OptimizerState::new(OptimizerConfig::adamw(0.01, 0.005), &ps);
        st.step(&mut ps).unwrap();
        let v = ps.by_name("w").unwrap().value.item();
        assert!((v - (2.0 - 0.01 * 0.005 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut ps = single(3.0, 0.0);
        let mut st = OptimizerState::new(OptimizerConfig::adam(0.1), &ps);
        for _ in 0..500 {
            let w = ps.by_name("w").unwrap().value.item();
            let id = ps.id("w").unwrap();
            ps.get_mut(id).grad = Tensor::scalar(2.0 * w);
            ps.mark_grads_ready();
            st.step(&mut ps).unwrap();
        }
        assert!(ps.by_name("w").unwrap().value.item().abs() < 1e-2);
        assert_eq!(st.steps(), 500);
    }
}
