//! SGD with classical momentum and decoupled-free weight decay folded
//! into the gradient.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Network;
use crate::error::{Error, Result};
use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Config("learning_rate must be finite and >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Velocity buffers are keyed by parameter name so they survive
/// checkpointing; `v = mu v + g + wd p`, `p -= lr v`.
#[derive(Debug, Clone)]
pub struct Sgd<T: Real> {
    pub cfg: OptimConfig,
    pub velocity: BTreeMap<String, Vec<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(cfg: OptimConfig) -> Self {
        Sgd {
            cfg,
            velocity: BTreeMap::new(),
        }
    }

    pub fn with_velocity(cfg: OptimConfig, velocity: BTreeMap<String, Vec<T>>) -> Self {
        Sgd { cfg, velocity }
    }

    /// Applies one update. No parameter is touched if any gradient is
    /// non-finite.
    pub fn step(&mut self, net: &mut Network<T>) -> Result<()> {
        let mut bad: Option<String> = None;
        net.visit_params_ref(&mut |p| {
            if bad.is_none() && p.grad.iter().any(|g| !g.is_finite()) {
                bad = Some(p.name.clone());
            }
        });
        if let Some(name) = bad {
            return Err(Error::Train(format!(
                "non-finite gradient in parameter {name}"
            )));
        }
        let lr = T::cast(self.cfg.learning_rate);
        let mu = T::cast(self.cfg.momentum);
        let wd = T::cast(self.cfg.weight_decay);
        let velocity = &mut self.velocity;
        net.visit_params(&mut |p| {
            let v = velocity
                .entry(p.name.clone())
                .or_insert_with(|| vec![T::zero(); p.data.len()]);
            for ((vi, pi), gi) in v.iter_mut().zip(p.data.iter_mut()).zip(p.grad.iter()) {
                *vi = mu * *vi + *gi + wd * *pi;
                *pi -= lr * *vi;
            }
        });
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_network, NetworkConfig, Tensor5};

    fn tiny() -> NetworkConfig {
        NetworkConfig {
            base_channels: 2,
            blocks_per_stage: 1,
            growth: 2,
            head_channels: 2,
            k_per_point: 1,
        }
    }

    fn snapshot(net: &crate::network::Network<f64>) -> Vec<f64> {
        let mut v = Vec::new();
        net.visit_params_ref(&mut |p| v.extend_from_slice(&p.data));
        v
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let mut net = build_network::<f64>(&tiny(), 5).unwrap();
        net.visit_params(&mut |p| p.grad.iter_mut().for_each(|g| *g = 0.3));
        let before = snapshot(&net);
        let mut opt = Sgd::new(OptimConfig {
            learning_rate: 0.0,
            ..OptimConfig::default()
        });
        opt.step(&mut net).unwrap();
        assert_eq!(before, snapshot(&net));
    }

    #[test]
    fn two_steps_match_hand_recurrence() {
        let cfg = OptimConfig {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 0.01,
        };
        let mut net = build_network::<f64>(&tiny(), 5).unwrap();
        let p0 = snapshot(&net);
        let g = 0.25;
        net.visit_params(&mut |p| p.grad.iter_mut().for_each(|x| *x = g));
        let mut opt = Sgd::new(cfg);
        opt.step(&mut net).unwrap();
        let p1 = snapshot(&net);
        net.visit_params(&mut |p| p.grad.iter_mut().for_each(|x| *x = g));
        opt.step(&mut net).unwrap();
        let p2 = snapshot(&net);
        for i in 0..p0.len() {
            let v1 = g + 0.01 * p0[i];
            let e1 = p0[i] - 0.1 * v1;
            assert!((p1[i] - e1).abs() < 1e-12);
            let v2 = 0.9 * v1 + g + 0.01 * p1[i];
            let e2 = p1[i] - 0.1 * v2;
            assert!((p2[i] - e2).abs() < 1e-12);
        }
    }

    #[test]
    fn nan_gradient_rejected_with_param_name() {
        let mut net = build_network::<f64>(&tiny(), 5).unwrap();
        let x = Tensor5::zeros([1, 1, 16, 16, 16]);
        let heads = net.forward(&x).unwrap();
        let grads: Vec<_> = heads.iter().map(|h| Tensor5::zeros(h.shape)).collect();
        net.backward(&grads).unwrap();
        net.visit_params(&mut |p| {
            if p.name == "enc2.down.conv.b" {
                p.grad[0] = f64::NAN;
            }
        });
        let before = snapshot(&net);
        let mut opt = Sgd::new(OptimConfig::default());
        let err = opt.step(&mut net).unwrap_err().to_string();
        assert!(err.contains("enc2.down.conv.b"), "{err}");
        assert_eq!(before, snapshot(&net));
        assert!(opt.velocity.is_empty());
    }
}
