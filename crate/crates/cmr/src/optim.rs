//! Adam with global-norm gradient clipping and decoupled weight decay.

use std::collections::BTreeMap;

use crate::config::OptimizerConfig;
use crate::error::{CmrError, Result};
use crate::params::ParamStore;

pub type GradMap = BTreeMap<String, Vec<f64>>;

/// Scales the gradient map so its global norm does not exceed `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut GradMap, max_norm: f64) -> f64 {
    let sq: f64 = grads.values().flat_map(|g| g.iter()).map(|x| x * x).sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }
    norm
}

/// Per-parameter first and second moment estimates plus the step counter.
/// Frozen parameters receive no state and are never touched.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub cfg: OptimizerConfig,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Self { cfg, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    fn decays(&self, name: &str) -> bool {
        if self.cfg.weight_decay == 0.0 {
            return false;
        }
        if self.cfg.decay_norm_params {
            return true;
        }
        !(name.contains(".ln1.") || name.contains(".ln2."))
    }

    /// One update: clip the loss gradients to the configured global norm,
    /// then apply the bias-corrected Adam rule with decoupled weight decay
    /// `p <- p - lr * wd * p` (or classic L2 folded into the gradient when
    /// configured).
    pub fn step(&mut self, params: &mut ParamStore, grads: &GradMap) -> Result<f64> {
        let mut grads = grads.clone();
        let pre_clip = clip_global_norm(&mut grads, self.cfg.max_grad_norm);
        self.step += 1;
        let t = self.step;
        let c = self.cfg.clone();
        let bc1 = 1.0 - c.beta1.powi(t as i32);
        let bc2 = 1.0 - c.beta2.powi(t as i32);

        let names: Vec<String> = params.trainable().map(|(n, _)| n.clone()).collect();
        for name in names {
            let g = grads.get(&name).ok_or_else(|| CmrError::InvalidInput {
                op: "adam_step",
                reason: format!("missing gradient for '{name}'"),
            })?;
            let p = params.get_mut(&name)?;
            if g.len() != p.values.len() {
                return Err(CmrError::DimensionMismatch {
                    op: "adam_step",
                    lhs: vec![g.len()],
                    rhs: vec![p.values.len()],
                });
            }
            let decay = self.decays(&name);
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for i in 0..g.len() {
                let mut gi = g[i];
                if c.l2_in_gradient && decay {
                    gi += c.weight_decay * p.values[i];
                }
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p.values[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
                if !c.l2_in_gradient && decay {
                    p.values[i] -= c.lr * c.weight_decay * p.values[i];
                }
            }
        }
        Ok(pre_clip)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, values: Vec<f64>, frozen: bool) -> ParamStore {
        let mut s = ParamStore::new();
        let n = values.len();
        s.insert(name, vec![n], values, frozen);
        s
    }

    #[test]
    fn zero_gradient_without_decay_leaves_parameters_unchanged() {
        let mut store = store_with("w", vec![0.5, -1.5], false);
        let cfg = OptimizerConfig { weight_decay: 0.0, ..OptimizerConfig::default() };
        let mut adam = AdamState::new(cfg);
        let mut grads = GradMap::new();
        grads.insert("w".into(), vec![0.0, 0.0]);
        for _ in 0..5 {
            adam.step(&mut store, &grads).unwrap();
        }
        assert_eq!(store.get("w").unwrap().values, vec![0.5, -1.5]);
    }

    #[test]
    fn zero_gradient_with_decoupled_decay_shrinks_by_lr_times_wd() {
        // p <- p * (1 - lr*wd) each step, exactly
        let mut store = store_with("w", vec![1.0], false);
        let cfg = OptimizerConfig::default(); // lr 1e-4, wd 0.01
        let mut adam = AdamState::new(cfg);
        let mut grads = GradMap::new();
        grads.insert("w".into(), vec![0.0]);
        let mut expected = 1.0f64;
        for _ in 0..10 {
            adam.step(&mut store, &grads).unwrap();
            expected *= 1.0 - 1e-4 * 0.01;
        }
        let got = store.get("w").unwrap().values[0];
        assert!((got - expected).abs() < 1e-15, "{got} vs {expected}");
    }

    #[test]
    fn first_step_matches_the_closed_form() {
        // with bias correction the first update is -lr * g / (|g| + eps)
        let g0 = 0.37;
        let mut store = store_with("w", vec![2.0], false);
        let cfg = OptimizerConfig { weight_decay: 0.0, ..OptimizerConfig::default() };
        let mut adam = AdamState::new(cfg.clone());
        let mut grads = GradMap::new();
        grads.insert("w".into(), vec![g0]);
        adam.step(&mut store, &grads).unwrap();
        let expected = 2.0 - cfg.lr * g0 / (g0.abs() + cfg.eps);
        let got = store.get("w").unwrap().values[0];
        assert!((got - expected).abs() < 1e-10, "{got} vs {expected}");
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut grads = GradMap::new();
        grads.insert("a".into(), vec![3.0, 4.0]); // norm 5
        let pre = clip_global_norm(&mut grads, 1.0);
        assert!((pre - 5.0).abs() < 1e-12);
        let post: f64 = grads["a"].iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(post <= 1.0 + 1e-9);
        assert!((grads["a"][0] - 0.6).abs() < 1e-12);

        // already-small gradients pass through untouched
        let mut grads = GradMap::new();
        grads.insert("a".into(), vec![0.1, 0.2]);
        clip_global_norm(&mut grads, 1.0);
        assert_eq!(grads["a"], vec![0.1, 0.2]);
    }

    #[test]
    fn frozen_parameters_receive_no_state_or_updates() {
        let mut store = ParamStore::new();
        store.insert("w", vec![1], vec![1.0], false);
        store.insert("frozen.t", vec![2], vec![5.0, 6.0], true);
        let mut adam = AdamState::new(OptimizerConfig::default());
        let mut grads = GradMap::new();
        grads.insert("w".into(), vec![0.3]);
        adam.step(&mut store, &grads).unwrap();
        assert_eq!(store.get("frozen.t").unwrap().values, vec![5.0, 6.0]);
        assert!(!adam.m.contains_key("frozen.t"));
    }

    #[test]
    fn l2_in_gradient_mode_differs_from_decoupled() {
        let run = |l2: bool| {
            let mut store = store_with("w", vec![1.0], false);
            let cfg = OptimizerConfig { l2_in_gradient: l2, lr: 0.01, ..OptimizerConfig::default() };
            let mut adam = AdamState::new(cfg);
            let mut grads = GradMap::new();
            grads.insert("w".into(), vec![0.2]);
            for _ in 0..3 {
                adam.step(&mut store, &grads).unwrap();
            }
            store.get("w").unwrap().values[0]
        };
        assert!((run(true) - run(false)).abs() > 1e-9);
    }

    #[test]
    fn norm_parameters_are_excluded_from_decay_by_default() {
        let mut store = ParamStore::new();
        store.insert("enc.text.layer0.ln1.gain", vec![1], vec![1.0], false);
        let mut adam = AdamState::new(OptimizerConfig::default());
        let mut grads = GradMap::new();
        grads.insert("enc.text.layer0.ln1.gain".into(), vec![0.0]);
        adam.step(&mut store, &grads).unwrap();
        assert_eq!(store.get("enc.text.layer0.ln1.gain").unwrap().values[0], 1.0);

        let mut adam = AdamState::new(OptimizerConfig { decay_norm_params: true, ..OptimizerConfig::default() });
        adam.step(&mut store, &grads).unwrap();
        assert!(store.get("enc.text.layer0.ln1.gain").unwrap().values[0] < 1.0);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut store = store_with("w", vec![1.0], false);
        let mut adam = AdamState::new(OptimizerConfig::default());
        assert!(adam.step(&mut store, &GradMap::new()).is_err());
    }
}
