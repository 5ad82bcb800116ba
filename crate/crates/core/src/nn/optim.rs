//! Adam with per-group learning rates and checkpointable moment state.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Parameters whose name starts with `prefix` use `lr`; the first matching
/// group wins, the empty prefix matches everything.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrGroup {
    pub prefix: String,
    pub lr: f64,
}

pub struct Adam {
    config: AdamConfig,
    groups: Vec<LrGroup>,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(config: AdamConfig, groups: Vec<LrGroup>) -> Result<Self> {
        if groups.is_empty() || groups.iter().any(|g| !(g.lr > 0.0)) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(Adam {
            config,
            groups,
            step: 0,
            moments: BTreeMap::new(),
        })
    }

    pub fn lr_for(&self, name: &str) -> Option<f64> {
        self.groups.iter().find(|g| name.starts_with(&g.prefix)).map(|g| g.lr)
    }

    pub fn groups(&self) -> &[LrGroup] {
        &self.groups
    }

    /// Multiplies every group's learning rate by `factor`.
    pub fn scale_lr(&mut self, factor: f64) {
        for g in &mut self.groups {
            g.lr *= factor;
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every parameter in `store` that has a gradient.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, var) in store.iter() {
            let Some(lr) = self.lr_for(name) else { continue };
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let g = g.detach();
            let (m, v) = match self.moments.get(name) {
                Some((m, v)) => (m.clone(), v.clone()),
                None => (g.zeros_like()?, g.zeros_like()?),
            };
            let m = ((m * beta1)? + (&g * (1.0 - beta1))?)?;
            let v = ((v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + eps)?)?;
            var.set(&(var.as_detached_tensor() - (update * lr)?)?)?;
            self.moments.insert(name.clone(), (m, v));
        }
        Ok(())
    }

    pub fn state_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (k, (m, v)) in &self.moments {
            out.insert(format!("adam.m.{k}"), m.clone());
            out.insert(format!("adam.v.{k}"), v.clone());
        }
        out
    }

    pub fn load_state(&mut self, tensors: &BTreeMap<String, Tensor>, step: u64) {
        self.step = step;
        self.moments.clear();
        for (k, m) in tensors {
            if let Some(name) = k.strip_prefix("adam.m.") {
                if let Some(v) = tensors.get(&format!("adam.v.{name}")) {
                    self.moments.insert(name.to_string(), (m.clone(), v.clone()));
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::Init;
    use candle_core::DType;

    #[test]
    fn scaling_applies_to_every_group() {
        let groups = vec![LrGroup { prefix: "a".into(), lr: 0.1 }, LrGroup { prefix: String::new(), lr: 0.4 }];
        let mut adam = Adam::new(AdamConfig::default(), groups).unwrap();
        adam.scale_lr(0.5);
        assert_eq!(adam.lr_for("a.w"), Some(0.05));
        assert_eq!(adam.lr_for("b.w"), Some(0.2));
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new(0, DType::F64);
        let w = store.param("w", &[2], 1, Init::Constant(3.0)).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), vec![LrGroup { prefix: String::new(), lr: 0.1 }]).unwrap();
        for _ in 0..300 {
            let loss = w.sqr().unwrap().sum_all().unwrap();
            let grads = loss.backward().unwrap();
            adam.step(&store, &grads).unwrap();
        }
        let v: Vec<f64> = w.to_vec1().unwrap();
        assert!(v.iter().all(|x| x.abs() < 0.05), "{v:?}");
    }

    #[test]
    fn first_step_moves_by_lr() {
        // bias-corrected first step is lr * sign(g)
        let mut store = ParamStore::new(0, DType::F64);
        let a = store.param("fusion.a", &[1], 1, Init::Constant(1.0)).unwrap();
        let b = store.param("other.b", &[1], 1, Init::Constant(1.0)).unwrap();
        let groups = vec![
            LrGroup { prefix: "fusion.".into(), lr: 1e-5 },
            LrGroup { prefix: String::new(), lr: 1e-6 },
        ];
        let mut adam = Adam::new(AdamConfig::default(), groups).unwrap();
        let loss = (a.sum_all().unwrap() + b.sum_all().unwrap()).unwrap();
        adam.step(&store, &loss.backward().unwrap()).unwrap();
        assert!((a.to_vec1::<f64>().unwrap()[0] - (1.0 - 1e-5)).abs() < 1e-10);
        assert!((b.to_vec1::<f64>().unwrap()[0] - (1.0 - 1e-6)).abs() < 1e-10);
    }
}
