use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::layers::Conv2d;

/// Parameter initialization scheme.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// He-uniform for a leaky ReLU with negative slope 0.1.
    Kaiming,
    /// He-uniform times a factor, for the last layer of a residual branch.
    Scaled(f64),
    /// Zero, used for output heads so a fresh network starts at identity.
    /// Becomes a small random init when the store has zero heads disabled.
    ZeroHead,
    Zeros,
    Constant(f64),
}

/// Named learnable tensors with deterministic, seeded initialization.
///
/// Names are dotted paths (`align.offset.l2.conv1.weight`); iteration order
/// is lexicographic so checkpoints and checksums are stable.
pub struct ParamStore {
    params: BTreeMap<String, Var>,
    device: Device,
    dtype: DType,
    rng: ChaCha8Rng,
    frozen: bool,
    zero_heads: bool,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        ParamStore {
            params: BTreeMap::new(),
            device: Device::Cpu,
            dtype,
            rng: ChaCha8Rng::seed_from_u64(seed),
            frozen: false,
            zero_heads: true,
        }
    }

    /// Random instead of zero output heads, so every parameter receives
    /// gradient from the first step (used by gradient checks).
    pub fn with_random_heads(mut self) -> Self {
        self.zero_heads = false;
        self
    }

    /// Layers built from a frozen store hold detached tensors and receive no
    /// gradients.
    pub fn frozen(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Creates (or returns the existing) parameter `name`.
    pub fn param(&mut self, name: &str, shape: &[usize], fan_in: usize, init: Init) -> Result<Tensor> {
        if let Some(v) = self.params.get(name) {
            if v.dims() != shape {
                return Err(Error::Config(format!(
                    "parameter {name} already exists with shape {:?}, requested {shape:?}",
                    v.dims()
                )));
            }
            return Ok(self.handle(v));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Kaiming => {
                let bound = (2.0f64 / 1.01).sqrt() * (3.0 / fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| self.rng.random_range(-bound..bound)).collect()
            }
            Init::Scaled(f) => {
                let bound = f * (2.0f64 / 1.01).sqrt() * (3.0 / fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| self.rng.random_range(-bound..bound)).collect()
            }
            Init::ZeroHead if self.zero_heads => vec![0.0; n],
            Init::ZeroHead => {
                let bound = 0.1 * (3.0 / fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| self.rng.random_range(-bound..bound)).collect()
            }
            Init::Zeros => vec![0.0; n],
            Init::Constant(c) => vec![c; n],
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let handle = self.handle(&var);
        self.params.insert(name.to_string(), var);
        Ok(handle)
    }

    fn handle(&self, v: &Var) -> Tensor {
        if self.frozen {
            v.as_detached_tensor()
        } else {
            v.as_tensor().clone()
        }
    }

    pub fn conv2d(&mut self, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize, init: Init) -> Result<Conv2d> {
        let fan_in = cin * kernel * kernel;
        let weight = self.param(&format!("{name}.weight"), &[cout, cin, kernel, kernel], fan_in, init)?;
        let bias_init = if init == Init::ZeroHead { Init::ZeroHead } else { Init::Zeros };
        let bias = self.param(&format!("{name}.bias"), &[cout], fan_in, bias_init)?;
        Ok(Conv2d::new(name, weight, Some(bias), stride, kernel / 2))
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.params.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    /// Parameters whose name starts with `prefix`.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a String, &'a Var)> + 'a {
        self.params.iter().filter(move |(k, _)| k.starts_with(prefix))
    }

    /// SHA-256 over names, shapes and f64 values, in name order.
    pub fn checksum(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        for (name, var) in &self.params {
            hasher.update(name.as_bytes());
            for d in var.dims() {
                hasher.update((*d as u64).to_le_bytes());
            }
            for v in var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()? {
                hasher.update(v.to_le_bytes());
            }
        }
        Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }

    /// Overwrites values from `tensors`; every stored parameter must be present.
    pub fn load_tensors(&self, tensors: &BTreeMap<String, Tensor>, prefix: &str) -> Result<()> {
        for (name, var) in &self.params {
            let key = format!("{prefix}{name}");
            let t = tensors
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks parameter {key}")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter {key} has shape {:?} in checkpoint, model expects {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    pub fn tensors(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(k, v)| (format!("{prefix}{k}"), v.as_tensor().clone()))
            .collect()
    }

    /// Sets one scalar element of a parameter, for finite-difference probes.
    pub fn perturb(&self, name: &str, index: usize, delta: f64) -> Result<()> {
        let var = self
            .params
            .get(name)
            .ok_or_else(|| Error::Config(format!("no parameter {name}")))?;
        let mut values = var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        values[index] += delta;
        let t = Tensor::from_vec(values, var.dims(), &self.device)?.to_dtype(self.dtype)?;
        var.set(&t)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_values() {
        let mut a = ParamStore::new(9, DType::F32);
        let mut b = ParamStore::new(9, DType::F32);
        a.conv2d("c", 3, 4, 3, 1, Init::Kaiming).unwrap();
        b.conv2d("c", 3, 4, 3, 1, Init::Kaiming).unwrap();
        assert_eq!(a.checksum().unwrap(), b.checksum().unwrap());
        assert_eq!(a.len(), 2);
        assert_eq!(a.num_elements(), 4 * 3 * 9 + 4);
    }

    #[test]
    fn zero_heads_can_be_randomized() {
        let mut a = ParamStore::new(1, DType::F64);
        let w = a.param("h", &[8], 4, Init::ZeroHead).unwrap();
        assert!(w.to_vec1::<f64>().unwrap().iter().all(|&v| v == 0.0));
        let mut b = ParamStore::new(1, DType::F64).with_random_heads();
        let w = b.param("h", &[8], 4, Init::ZeroHead).unwrap();
        assert!(w.to_vec1::<f64>().unwrap().iter().all(|&v| v != 0.0));
    }

    #[test]
    fn shape_conflict_is_an_error() {
        let mut a = ParamStore::new(1, DType::F32);
        a.param("p", &[2, 2], 2, Init::Zeros).unwrap();
        assert!(a.param("p", &[4], 2, Init::Zeros).is_err());
        assert!(a.param("p", &[2, 2], 2, Init::Zeros).is_ok());
    }

    #[test]
    fn frozen_handles_carry_no_gradient() {
        let mut s = ParamStore::new(1, DType::F32).frozen();
        let w = s.param("w", &[3], 1, Init::Constant(2.0)).unwrap();
        let x = Var::new(&[1.0f32, 2.0, 3.0], &Device::Cpu).unwrap();
        let loss = (x.as_tensor() * &w).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        assert!(grads.get(s.get("w").unwrap().as_tensor()).is_none());
        assert!(grads.get(x.as_tensor()).is_some());
    }
}
