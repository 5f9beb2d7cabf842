//! AdamW with per-group learning rates.
//!
//! ```text
//! p ← p − lr·wd·p                      decoupled decay
//! m ← β₁m + (1 − β₁)g
//! v ← β₂v + (1 − β₂)g²
//! p ← p − lr·m̂ / (√v̂ + ε)              m̂ = m/(1 − β₁ᵗ), v̂ = v/(1 − β₂ᵗ)
//! ```

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Learning rate for every parameter whose name starts with `prefix`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub prefix: String,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub groups: Vec<ParamGroup>,
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, groups: Vec<ParamGroup>) -> Result<Self> {
        if let Some(g) = groups.iter().find(|g| !(g.lr >= 0.0 && g.lr.is_finite())) {
            return Err(Error::Range {
                name: "learning rate",
                detail: format!("group `{}` has lr = {}", g.prefix, g.lr),
            });
        }
        Ok(AdamW {
            config,
            groups,
            step: 0,
            moments: BTreeMap::new(),
        })
    }

    pub fn lr_for(&self, name: &str) -> Option<f64> {
        self.groups.iter().find(|g| name.starts_with(&g.prefix)).map(|g| g.lr)
    }

    /// Applies one update to every parameter in `grads`. Parameters outside
    /// all groups are an error, so nothing is updated silently.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, g) in grads {
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of `{name}`")));
            }
            let p = params.get(name)?;
            if p.shape() != g.shape() {
                return Err(Error::shape("optimizer step", p.shape(), g.shape()));
            }
            if self.lr_for(name).is_none() {
                return Err(Error::Invalid(format!("parameter `{name}` belongs to no optimizer group")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, g) in grads {
            let lr = self.lr_for(name).expect("checked above");
            let p = params.get_mut(name)?;
            let state = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; g.numel()],
                v: vec![0.0; g.numel()],
            });
            for (((pi, gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(state.m.iter_mut())
                .zip(state.v.iter_mut())
            {
                *pi -= lr * c.weight_decay * *pi;
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(p: f64, wd: f64, lr: f64) -> (ParamStore, AdamW) {
        let mut ps = ParamStore::new();
        ps.insert("peft/x", Tensor::scalar(p));
        let opt = AdamW::new(
            AdamWConfig {
                weight_decay: wd,
                ..AdamWConfig::default()
            },
            vec![ParamGroup {
                prefix: "peft/".into(),
                lr,
            }],
        )
        .unwrap();
        (ps, opt)
    }

    fn grads(g: f64) -> BTreeMap<String, Tensor> {
        BTreeMap::from([("peft/x".to_string(), Tensor::scalar(g))])
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let (mut ps, mut opt) = setup(0.7, 0.0, 0.1);
        opt.step(&mut ps, &grads(0.0)).unwrap();
        assert_eq!(ps.get("peft/x").unwrap().data()[0], 0.7);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let (mut ps, mut opt) = setup(0.0, 0.0, 0.1);
        opt.step(&mut ps, &grads(1.0)).unwrap();
        let p = ps.get("peft/x").unwrap().data()[0];
        assert!((p + 0.1 / (1.0 + 1e-8)).abs() < 1e-15, "{p}");
    }

    #[test]
    fn decay_only_step() {
        let (mut ps, mut opt) = setup(1.0, 0.01, 0.1);
        opt.step(&mut ps, &grads(0.0)).unwrap();
        assert!((ps.get("peft/x").unwrap().data()[0] - 0.999).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let (mut ps, mut opt) = setup(1.0, 0.0, 0.1);
        let err = opt.step(&mut ps, &grads(f64::NAN)).unwrap_err();
        assert!(err.to_string().contains("peft/x"));
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn ungrouped_parameter_is_rejected() {
        let (mut ps, mut opt) = setup(1.0, 0.0, 0.1);
        ps.insert("backbone/w", Tensor::scalar(1.0));
        let g = BTreeMap::from([("backbone/w".to_string(), Tensor::scalar(1.0))]);
        assert!(opt.step(&mut ps, &g).is_err());
        assert_eq!(ps.get("backbone/w").unwrap().data()[0], 1.0);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let (mut ps, mut opt) = setup(0.3, 0.01, 0.0);
        for _ in 0..5 {
            opt.step(&mut ps, &grads(2.0)).unwrap();
        }
        assert_eq!(ps.get("peft/x").unwrap().data()[0], 0.3);
    }
}
