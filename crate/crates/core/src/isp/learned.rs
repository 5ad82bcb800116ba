use std::path::Path;

use candle_core::{DType, Tensor};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::bayer::{pack, BayerFrame, BayerPattern, SrgbFrame};
use crate::error::{Error, Result};
use crate::nn::layers::{depth_to_space2, pack_tensor};
use crate::nn::{Checkpoint, ParamStore};
use crate::predenoise::{packed_to_tensor, UNet, UNetSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LearnedIspSpec {
    pub depth: usize,
    pub base_channels: usize,
}

impl Default for LearnedIspSpec {
    fn default() -> Self {
        LearnedIspSpec {
            depth: 4,
            base_channels: 32,
        }
    }
}

pub const ISP_PREFIX: &str = "isp";

/// Packed raw (4 planes) → U-Net → 12 channels → depth-to-space → sRGB.
pub struct LearnedIsp {
    spec: LearnedIspSpec,
    store: ParamStore,
    net: UNet,
}

impl LearnedIsp {
    pub fn new(spec: LearnedIspSpec, seed: u64, dtype: DType) -> Result<Self> {
        Self::with_store(ParamStore::new(seed, dtype), spec)
    }

    pub fn with_store(mut store: ParamStore, spec: LearnedIspSpec) -> Result<Self> {
        let unet = UNetSpec {
            depth: spec.depth,
            base_channels: spec.base_channels,
            in_channels: 4,
            out_channels: 12,
        };
        let net = UNet::new(&mut store, ISP_PREFIX, unet)?;
        Ok(LearnedIsp { spec, store, net })
    }

    pub fn spec(&self) -> LearnedIspSpec {
        self.spec
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn is_frozen(&self) -> bool {
        self.store.is_frozen()
    }

    /// `B×4×H×W` packed planes → unclamped `B×3×2H×2W`.
    pub fn forward_packed(&self, packed: &Tensor) -> Result<Tensor> {
        depth_to_space2(&self.net.forward(packed)?)
    }

    /// `B×1×2H×2W` mosaic → sRGB clamped to `[0, 1]`.
    pub fn forward_mosaic(&self, mosaic: &Tensor, pattern: BayerPattern) -> Result<Tensor> {
        Ok(self.forward_packed(&pack_tensor(mosaic, pattern)?)?.clamp(0.0, 1.0)?)
    }

    pub fn learned_isp_apply(&self, raw: &BayerFrame) -> Result<SrgbFrame> {
        raw.require_normalized()?;
        let input = packed_to_tensor(&pack(raw)?, self.store.dtype(), self.store.device())?;
        let out = self.forward_packed(&input)?.clamp(0.0, 1.0)?.detach();
        let (_, _, h, w) = out.dims4()?;
        let data: Vec<f32> = out.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        SrgbFrame::new(Array3::from_shape_vec((3, h, w), data).map_err(|e| Error::Dimension(e.to_string()))?)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(serde_json::json!({"kind": "learned_isp", "spec": self.spec}));
        ck.tensors = self.store.tensors("");
        ck
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint().save(path)
    }

    pub fn from_checkpoint(ck: &Checkpoint, frozen: bool, dtype: DType) -> Result<Self> {
        if ck.header.get("kind").and_then(|k| k.as_str()) != Some("learned_isp") {
            return Err(Error::Checkpoint("checkpoint does not hold a learned ISP".into()));
        }
        let spec: LearnedIspSpec = serde_json::from_value(ck.header["spec"].clone()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let store = if frozen { ParamStore::new(0, dtype).frozen() } else { ParamStore::new(0, dtype) };
        let isp = Self::with_store(store, spec)?;
        isp.store.load_tensors(&ck.tensors, "")?;
        Ok(isp)
    }

    pub fn load(path: &Path, frozen: bool) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, frozen, DType::F32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bayer::RawMeta;
    use ndarray::Array2;

    #[test]
    fn output_shape_range_and_determinism() {
        let store = ParamStore::new(3, DType::F32).with_random_heads();
        let isp = LearnedIsp::with_store(store, LearnedIspSpec { depth: 2, base_channels: 4 }).unwrap();
        let raw = BayerFrame::from_normalized(
            Array2::from_shape_fn((12, 20), |(y, x)| ((y * 20 + x) % 17) as f32 / 16.0),
            RawMeta::full_range(BayerPattern::Bggr, 12),
        )
        .unwrap();
        let a = isp.learned_isp_apply(&raw).unwrap();
        assert_eq!(a.data.dim(), (3, 12, 20));
        assert!(a.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(a, isp.learned_isp_apply(&raw).unwrap());
    }
}
