//! Decoupled-weight-decay Adam and the cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::checkpoint::StoredTensor;
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

/// AdamW with first/second moments held in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

const M_PREFIX: &str = "adamw.m.";
const V_PREFIX: &str = "adamw.v.";
pub const STEP_KEY: &str = "adamw.step";

impl AdamW {
    pub fn new<T: Scalar>(config: AdamWConfig, params: &ParamStore<T>) -> Self {
        let zeros = || params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        AdamW { config, step: 0, m: zeros(), v: zeros() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update using the gradients accumulated on `params` and
    /// returns fresh trainable leaves. Parameters without a gradient are
    /// treated as having a zero gradient (they still decay).
    pub fn step<T: Scalar>(&mut self, params: &ParamStore<T>, lr: f64) -> Result<ParamStore<T>> {
        if self.m.len() != params.len() {
            return Err(TensorError::Argument {
                op: "adamw",
                detail: format!("state for {} tensors, store has {}", self.m.len(), params.len()),
            });
        }
        self.step += 1;
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let mut out = Vec::with_capacity(params.len());
        for (i, t) in params.tensors().iter().enumerate() {
            let grad = t.grad();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let mut data = Vec::with_capacity(t.numel());
            for (j, &p) in t.data().iter().enumerate() {
                let g = grad.as_ref().map_or(0.0, |g| g[j].as_f64());
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let decayed = p.as_f64() * (1.0 - lr * weight_decay);
                let update = lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + eps);
                data.push(T::lit(decayed - update));
            }
            out.push(Tensor::from_vec(t.shape(), data)?.requires_grad_(true));
        }
        params.with_tensors(out)
    }

    /// Moment tensors named after the parameters, for checkpointing.
    pub fn export<T: Scalar>(&self, params: &ParamStore<T>) -> Vec<StoredTensor> {
        let mut out = Vec::with_capacity(2 * params.len());
        for (prefix, moments) in [(M_PREFIX, &self.m), (V_PREFIX, &self.v)] {
            for ((name, t), vals) in params.iter().zip(moments) {
                out.push(StoredTensor {
                    name: format!("{prefix}{name}"),
                    shape: t.shape().to_vec(),
                    data: vals.iter().map(|&x| x as f32).collect(),
                });
            }
        }
        out
    }

    /// Rebuilds state saved by [`AdamW::export`].
    pub fn import<T: Scalar>(
        config: AdamWConfig,
        params: &ParamStore<T>,
        stored: &[StoredTensor],
        step: u64,
    ) -> std::result::Result<Self, String> {
        let find = |name: String, n: usize| -> std::result::Result<Vec<f64>, String> {
            let s = stored.iter().find(|s| s.name == name).ok_or_else(|| format!("missing optimizer state {name}"))?;
            if s.data.len() != n {
                return Err(format!("{name}: {} values, expected {n}", s.data.len()));
            }
            Ok(s.data.iter().map(|&x| x as f64).collect())
        };
        let mut state = AdamW::new(config, params);
        for (i, (name, t)) in params.iter().enumerate() {
            state.m[i] = find(format!("{M_PREFIX}{name}"), t.numel())?;
            state.v[i] = find(format!("{V_PREFIX}{name}"), t.numel())?;
        }
        state.step = step;
        Ok(state)
    }
}

/// Cosine annealing from `init` to `floor` over `total` iterations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CosineSchedule {
    pub init: f64,
    #[serde(default = "default_floor")]
    pub floor: f64,
}

fn default_floor() -> f64 {
    1e-6
}

impl CosineSchedule {
    pub fn new(init: f64) -> Self {
        CosineSchedule { init, floor: default_floor() }
    }

    /// Learning rate at iteration `it` (0-based) of `total`.
    pub fn lr(&self, it: u64, total: u64) -> f64 {
        let frac = if total == 0 { 1.0 } else { it.min(total) as f64 / total as f64 };
        self.floor + (self.init - self.floor) * (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamBuilder;

    #[test]
    fn schedule_endpoints() {
        let s = CosineSchedule::new(2e-4);
        assert_eq!(s.lr(0, 100), 2e-4);
        assert!((s.lr(100, 100) - 1e-6).abs() < 1e-18);
        assert!((s.lr(50, 100) - (1e-6 + (2e-4 - 1e-6) * 0.5)).abs() < 1e-12);
        assert!(s.lr(30, 100) > s.lr(31, 100));
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut b = ParamBuilder::<f64>::new(0);
        let id = b.constant("w", &[3], 0.0);
        let ps = b.finish().trainable();
        let w = ps.get(id);
        w.mul(&Tensor::from_vec(&[3], vec![2.0, -0.5, 0.0]).unwrap()).unwrap().sum().unwrap().backward().unwrap();
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() }, &ps);
        let next = opt.step(&ps, 0.1).unwrap();
        let v = next.get(id).to_vec();
        // bias-corrected first step: m̂/√v̂ = sign(g)
        assert!((v[0] + 0.1).abs() < 1e-8 && (v[1] - 0.1).abs() < 1e-8 && v[2] == 0.0, "{v:?}");
        assert!(next.get(id).requires_grad());
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let mut b = ParamBuilder::<f64>::new(0);
        let id = b.constant("w", &[2], 1.0);
        let ps = b.finish().trainable();
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.5, ..Default::default() }, &ps);
        let next = opt.step(&ps, 0.1).unwrap();
        // no gradient: only the decay term acts
        assert!(next.get(id).data().iter().all(|&v| (v - 0.95).abs() < 1e-15));
    }

    #[test]
    fn state_roundtrip() {
        let mut b = ParamBuilder::<f32>::new(1);
        b.uniform("a", &[4], 1.0);
        b.uniform("b", &[2, 2], 1.0);
        let ps = b.finish().trainable();
        ps.tensors()[0].sum().unwrap().backward().unwrap();
        let mut opt = AdamW::new(AdamWConfig::default(), &ps);
        opt.step(&ps, 1e-3).unwrap();
        let back = AdamW::import(opt.config, &ps, &opt.export(&ps), opt.steps_taken()).unwrap();
        assert_eq!(back.steps_taken(), 1);
        assert_eq!(back.m[0].iter().map(|&x| x as f32).collect::<Vec<_>>(), opt.m[0].iter().map(|&x| x as f32).collect::<Vec<_>>());
        assert!(AdamW::import(opt.config, &ps, &[], 1).is_err());
    }
}
