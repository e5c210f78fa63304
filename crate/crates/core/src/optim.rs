//! Adam with global gradient-norm clipping.

use std::collections::BTreeMap;

use mathgen_tensor::{ParamStore, Snapshot, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global L2 norm limit applied before the update; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(5.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Applies one update from the gradients accumulated in `store`, then
    /// clears them. Returns the pre-clipping gradient norm.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<f64> {
        let mut sq = 0.0;
        for (name, t) in store.iter() {
            if let Some(g) = t.grad() {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFiniteGradient(name.to_string()));
                }
                sq += g.iter().map(|x| x * x).sum::<f64>();
            }
        }
        let norm = sq.sqrt();
        let scale = match self.config.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, t) in store.iter_mut() {
            if !t.requires_grad() {
                continue;
            }
            let Some(g) = t.take_grad() else { continue };
            let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
            let data = t.data_mut();
            for i in 0..g.len() {
                let gi = g[i] * scale;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                data[i] -= c.lr * mh / (vh.sqrt() + c.eps);
            }
        }
        store.zero_grads();
        Ok(norm)
    }

    /// Stores moments under `adam.m.<name>` / `adam.v.<name>`.
    pub fn write_state(&self, snap: &mut Snapshot) {
        for (k, m) in &self.m {
            snap.insert(format!("adam.m.{k}"), Tensor::vector(m.clone()));
        }
        for (k, v) in &self.v {
            snap.insert(format!("adam.v.{k}"), Tensor::vector(v.clone()));
        }
    }

    pub fn read_state(config: AdamConfig, step: u64, snap: &Snapshot) -> Self {
        let take = |prefix: &str| -> BTreeMap<String, Vec<f64>> {
            snap.tensors
                .iter()
                .filter_map(|(k, t)| k.strip_prefix(prefix).map(|n| (n.to_string(), t.data().to_vec())))
                .collect()
        };
        Adam {
            config,
            step,
            m: take("adam.m."),
            v: take("adam.v."),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(x: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::vector(x).with_grad());
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = one_param(vec![1.0, -2.0]);
        s.accumulate_grad("x", &[0.0, 0.0]).unwrap();
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut s).unwrap();
        assert_eq!(s.get("x").unwrap().data(), &[1.0, -2.0]);
    }

    #[test]
    fn zero_lr_leaves_params() {
        let mut s = one_param(vec![1.0, -2.0]);
        let mut opt = Adam::new(AdamConfig { lr: 0.0, ..Default::default() });
        for _ in 0..5 {
            s.accumulate_grad("x", &[0.3, -7.0]).unwrap();
            opt.step(&mut s).unwrap();
        }
        assert_eq!(s.get("x").unwrap().data(), &[1.0, -2.0]);
    }

    #[test]
    fn constant_gradient_moves_by_lr() {
        // with a constant gradient m̂ = g and v̂ = g², so every step is lr·g/(|g|+eps)
        let mut s = one_param(vec![0.0]);
        let cfg = AdamConfig {
            lr: 0.01,
            clip_norm: None,
            ..Default::default()
        };
        let mut opt = Adam::new(cfg);
        let mut prev = 0.0;
        for _ in 0..200 {
            s.accumulate_grad("x", &[0.25]).unwrap();
            opt.step(&mut s).unwrap();
            let now = s.get("x").unwrap().data()[0];
            let delta = prev - now;
            assert!((delta - 0.01 * 0.25 / (0.25 + 1e-8)).abs() < 1e-12);
            prev = now;
        }
    }

    #[test]
    fn nan_gradient_names_param() {
        let mut s = one_param(vec![0.0]);
        s.get_mut("x").unwrap().accumulate_grad(&[f64::NAN]).ok();
        let mut opt = Adam::new(AdamConfig::default());
        match opt.step(&mut s) {
            Err(Error::NonFiniteGradient(n)) => assert_eq!(n, "x"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn quadratic_bowl_descends() {
        let mut s = one_param(vec![3.0, -4.0, 1.5]);
        let mut opt = Adam::new(AdamConfig { lr: 0.01, ..Default::default() });
        let loss = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let mut prev = loss(s.get("x").unwrap().data());
        for _ in 0..100 {
            let g: Vec<f64> = s.get("x").unwrap().data().iter().map(|v| 2.0 * v).collect();
            s.accumulate_grad("x", &g).unwrap();
            opt.step(&mut s).unwrap();
            let now = loss(s.get("x").unwrap().data());
            assert!(now < prev, "{now} >= {prev}");
            prev = now;
        }
    }

    #[test]
    fn clipping_bounds_update() {
        let mut s = one_param(vec![0.0, 0.0]);
        let mut opt = Adam::new(AdamConfig::default());
        s.accumulate_grad("x", &[300.0, 400.0]).unwrap();
        let norm = opt.step(&mut s).unwrap();
        assert!((norm - 500.0).abs() < 1e-9);
    }
}
