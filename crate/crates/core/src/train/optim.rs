//! AdamW with decoupled weight decay, warmup-cosine schedule and global
//! gradient-norm clipping.

use crate::error::{bail, Result};
use crate::model::ParamStore;
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

/// Per-parameter gradient buffers keyed like the parameter store.
pub type Grads = IndexMap<String, Vec<f64>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub peak_lr: f64,
    pub floor_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub adam_eps: f64,
    pub clip_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.1,
            peak_lr: 6e-5,
            floor_lr: 6e-6,
            warmup_steps: 2000,
            total_steps: 100_000,
            adam_eps: 1e-8,
            clip_norm: 1.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            bail!(Config, "betas must lie in (0, 1)");
        }
        if !(self.floor_lr > 0.0 && self.peak_lr >= self.floor_lr) {
            bail!(Config, "need peak_lr >= floor_lr > 0");
        }
        if self.warmup_steps >= self.total_steps {
            bail!(Config, "warmup_steps {} must be below total_steps {}", self.warmup_steps, self.total_steps);
        }
        if !(self.adam_eps > 0.0 && self.clip_norm > 0.0 && self.weight_decay >= 0.0) {
            bail!(Config, "adam_eps and clip_norm must be positive, weight_decay non-negative");
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `peak_lr`, then cosine decay to `floor_lr` at
/// `total_steps`. Steps outside `[0, total_steps]` are clamped.
pub fn lr_schedule(step: usize, cfg: &OptimizerConfig) -> f64 {
    let step = step.min(cfg.total_steps);
    if step < cfg.warmup_steps {
        return cfg.peak_lr * step as f64 / cfg.warmup_steps as f64;
    }
    let frac = (step - cfg.warmup_steps) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64;
    let cos = 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
    cfg.peak_lr * cos + cfg.floor_lr * (1.0 - cos)
}

pub fn global_norm(grads: &Grads) -> f64 {
    grads.values().flat_map(|g| g.iter()).map(|x| x * x).sum::<f64>().sqrt()
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut Grads, max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        bail!(Contract, "max_norm must be positive");
    }
    let norm = global_norm(grads);
    if norm > max_norm {
        let c = max_norm / norm;
        grads.values_mut().flat_map(|g| g.iter_mut()).for_each(|x| *x *= c);
    }
    Ok(norm)
}

/// First and second moment estimates.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: IndexMap<String, Vec<f64>>,
    pub v: IndexMap<String, Vec<f64>>,
}

/// Weight decay applies to matrices only; gains, biases and scalar
/// parameters are exempt.
pub fn decays(shape: &[usize]) -> bool {
    shape.len() == 2 && shape[0] > 1 && shape[1] > 1
}

/// One AdamW update at an explicit learning rate. `step` counts from 1.
pub fn adamw_update(
    params: &mut ParamStore,
    grads: &Grads,
    state: &mut AdamState,
    cfg: &OptimizerConfig,
    lr: f64,
    step: usize,
) -> Result<()> {
    if step == 0 {
        bail!(Contract, "optimizer steps count from 1");
    }
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for (name, p) in params.iter_mut() {
        let Some(g) = grads.get(name) else { continue };
        if g.len() != p.len() {
            bail!(Dimension, "gradient for '{name}' has {} entries, parameter has {}", g.len(), p.len());
        }
        let decay = cfg.weight_decay > 0.0 && decays(p.shape());
        let m = state.m.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.v.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
        for (i, x) in p.data_mut().iter_mut().enumerate() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            if decay {
                *x -= lr * cfg.weight_decay * *x;
            }
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            *x -= lr * mhat / (vhat.sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}

/// AdamW update with the scheduled learning rate for `step`.
pub fn optimizer_step(
    params: &mut ParamStore,
    grads: &Grads,
    state: &mut AdamState,
    cfg: &OptimizerConfig,
    step: usize,
) -> Result<f64> {
    let lr = lr_schedule(step, cfg);
    adamw_update(params, grads, state, cfg, lr, step)?;
    Ok(lr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store() -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap());
        p.insert("b", Tensor::vector(vec![0.25, -0.75]));
        p
    }

    fn zero_grads(p: &ParamStore) -> Grads {
        p.iter().map(|(n, t)| (n.to_string(), vec![0.0; t.len()])).collect()
    }

    #[test]
    fn schedule_anchor_points() {
        let cfg = OptimizerConfig { total_steps: 10_000, ..OptimizerConfig::default() };
        assert_eq!(lr_schedule(0, &cfg), 0.0);
        assert_eq!(lr_schedule(2000, &cfg), 6e-5);
        assert_eq!(lr_schedule(10_000, &cfg), 6e-6);
        assert_eq!(lr_schedule(6000, &cfg), 3.3e-5);
        assert_eq!(lr_schedule(50_000, &cfg), 6e-6);
        let mut prev = f64::INFINITY;
        for s in 2000..=10_000 {
            let lr = lr_schedule(s, &cfg);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn clipping_cases() {
        let mut g: Grads = [("a".to_string(), vec![0.3, 0.4])].into_iter().collect();
        assert_eq!(clip_grad_norm(&mut g, 1.0).unwrap(), 0.5);
        assert_eq!(g["a"], vec![0.3, 0.4]);
        let mut g: Grads = [("a".to_string(), vec![1.2, 0.0]), ("b".to_string(), vec![1.6])].into_iter().collect();
        assert_eq!(clip_grad_norm(&mut g, 1.0).unwrap(), 2.0);
        assert_eq!(global_norm(&g), 1.0);
        assert_eq!(g["a"], vec![0.6, 0.0]);
    }

    #[test]
    fn zero_grads_no_decay_is_identity() {
        let mut p = store();
        let before = p.clone();
        let cfg = OptimizerConfig { weight_decay: 0.0, ..OptimizerConfig::default() };
        adamw_update(&mut p, &zero_grads(&before), &mut AdamState::default(), &cfg, 1e-3, 1).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn decay_only_shrinks_matrices() {
        let mut p = store();
        let before = p.clone();
        let lr = 1e-2;
        adamw_update(&mut p, &zero_grads(&before), &mut AdamState::default(), &OptimizerConfig::default(), lr, 1).unwrap();
        for (a, b) in p.get("w").unwrap().data().iter().zip(before.get("w").unwrap().data()) {
            assert_eq!(*a, b - lr * 0.1 * b);
        }
        assert_eq!(p.get("b").unwrap(), before.get("b").unwrap());
    }

    #[test]
    fn first_step_is_sign_like() {
        let mut p = store();
        let before = p.clone();
        let g: Grads = p.iter().map(|(n, t)| (n.to_string(), (0..t.len()).map(|i| 0.1 * (i as f64 + 1.0) - 0.25).collect())).collect();
        let cfg = OptimizerConfig { weight_decay: 0.0, ..OptimizerConfig::default() };
        let lr = 1e-3;
        adamw_update(&mut p, &g, &mut AdamState::default(), &cfg, lr, 1).unwrap();
        for (name, t) in p.iter() {
            for (i, x) in t.data().iter().enumerate() {
                let gi = g[name][i];
                let expect = before.get(name).unwrap().data()[i] - lr * gi / (gi.abs() + cfg.adam_eps);
                assert!((x - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let mut p = store();
        let g: Grads = [("w".to_string(), vec![0.0; 3])].into_iter().collect();
        let r = adamw_update(&mut p, &g, &mut AdamState::default(), &OptimizerConfig::default(), 1e-3, 1);
        assert!(matches!(r, Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn config_validation() {
        assert!(OptimizerConfig { warmup_steps: 10, total_steps: 10, ..OptimizerConfig::default() }.validate().is_err());
        assert!(OptimizerConfig { beta2: 1.0, ..OptimizerConfig::default() }.validate().is_err());
        OptimizerConfig::default().validate().unwrap();
    }
}
