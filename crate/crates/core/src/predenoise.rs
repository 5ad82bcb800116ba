//! Single-frame U-Net pre-denoiser on packed RGBG planes.
//!
//! Its output only guides offset estimation during alignment; the network is
//! trained on synthetic pairs and frozen afterwards.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::bayer::{pack, unpack, BayerFrame, PackedFrame};
use crate::error::{Error, Result};
use crate::nn::layers::{crop_hw, leaky_relu, pad_to_multiple, upsample2x};
use crate::nn::{Checkpoint, Conv2d, Init, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetSpec {
    pub depth: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl UNetSpec {
    pub fn predenoiser(depth: usize, base_channels: usize) -> Self {
        UNetSpec {
            depth,
            base_channels,
            in_channels: 4,
            out_channels: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_channels == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config(format!("invalid U-Net spec {self:?}")));
        }
        Ok(())
    }
}

impl Default for UNetSpec {
    fn default() -> Self {
        UNetSpec::predenoiser(4, 32)
    }
}

struct DoubleConv(Conv2d, Conv2d);

impl DoubleConv {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize) -> Result<Self> {
        Ok(DoubleConv(
            store.conv2d(&format!("{name}.conv1"), cin, cout, 3, 1, Init::Kaiming)?,
            store.conv2d(&format!("{name}.conv2"), cout, cout, 3, 1, Init::Kaiming)?,
        ))
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        leaky_relu(&self.1.forward(&leaky_relu(&self.0.forward(x)?)?)?)
    }
}

/// Encoder/decoder with skip concatenations, max-pool downsampling and
/// bilinear upsampling. The output layer is zero-initialized.
pub struct UNet {
    spec: UNetSpec,
    encoders: Vec<DoubleConv>,
    bottom: DoubleConv,
    decoders: Vec<DoubleConv>,
    head: Conv2d,
}

impl UNet {
    pub fn new(store: &mut ParamStore, prefix: &str, spec: UNetSpec) -> Result<Self> {
        spec.validate()?;
        let ch = |level: usize| spec.base_channels << level;
        let mut encoders = Vec::with_capacity(spec.depth);
        for level in 0..spec.depth {
            let cin = if level == 0 { spec.in_channels } else { ch(level - 1) };
            encoders.push(DoubleConv::new(store, &format!("{prefix}.enc{level}"), cin, ch(level))?);
        }
        let bottom = DoubleConv::new(store, &format!("{prefix}.bottom"), ch(spec.depth - 1), ch(spec.depth))?;
        let mut decoders = Vec::with_capacity(spec.depth);
        for level in (0..spec.depth).rev() {
            decoders.push(DoubleConv::new(store, &format!("{prefix}.dec{level}"), ch(level + 1) + ch(level), ch(level))?);
        }
        let head = store.conv2d(&format!("{prefix}.head"), ch(0), spec.out_channels, 3, 1, Init::ZeroHead)?;
        Ok(UNet {
            spec,
            encoders,
            bottom,
            decoders,
            head,
        })
    }

    pub fn spec(&self) -> UNetSpec {
        self.spec
    }

    /// `N×in×H×W` → `N×out×H×W`; any spatial size is accepted via replicate
    /// padding to a multiple of `2^depth`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.dim(1)? != self.spec.in_channels {
            return Err(Error::Dimension(format!(
                "U-Net expects {} input channels, got {}",
                self.spec.in_channels,
                x.dim(1)?
            )));
        }
        let (x, orig) = pad_to_multiple(x, 1 << self.spec.depth)?;
        let mut skips = Vec::with_capacity(self.spec.depth);
        let mut h = x;
        for enc in &self.encoders {
            let f = enc.forward(&h)?;
            h = f.max_pool2d(2)?;
            skips.push(f);
        }
        h = self.bottom.forward(&h)?;
        for dec in &self.decoders {
            let skip = skips.pop().expect("one skip per level");
            h = dec.forward(&Tensor::cat(&[&upsample2x(&h)?, &skip], 1)?)?;
        }
        crop_hw(&self.head.forward(&h)?, orig)
    }
}

/// Residual U-Net: `x + g(x)` on `N×4×H×W` packed planes.
pub struct Predenoiser {
    store: ParamStore,
    net: UNet,
}

pub const PREDENOISER_PREFIX: &str = "predenoiser";

impl Predenoiser {
    pub fn new(spec: UNetSpec, seed: u64, dtype: DType) -> Result<Self> {
        Self::with_store(ParamStore::new(seed, dtype), spec)
    }

    pub fn with_store(mut store: ParamStore, spec: UNetSpec) -> Result<Self> {
        if spec.in_channels != 4 || spec.out_channels != 4 {
            return Err(Error::Config("the pre-denoiser maps 4 packed planes to 4 planes".into()));
        }
        let net = UNet::new(&mut store, PREDENOISER_PREFIX, spec)?;
        Ok(Predenoiser { store, net })
    }

    pub fn spec(&self) -> UNetSpec {
        self.net.spec()
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn is_frozen(&self) -> bool {
        self.store.is_frozen()
    }

    pub fn forward_packed(&self, x: &Tensor) -> Result<Tensor> {
        Ok((x + self.net.forward(x)?)?)
    }

    pub fn predenoise_frame(&self, noisy: &BayerFrame) -> Result<BayerFrame> {
        noisy.require_normalized()?;
        let packed = pack(noisy)?;
        let input = packed_to_tensor(&packed, self.store.dtype(), self.store.device())?;
        let out = self.forward_packed(&input)?.detach();
        unpack(&tensor_to_packed(&out, &packed)?)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(serde_json::json!({"kind": "predenoiser", "spec": self.spec()}));
        ck.tensors = self.store.tensors("");
        ck
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint().save(path)
    }

    /// Loads a checkpoint; `frozen` networks hold detached parameters.
    pub fn from_checkpoint(ck: &Checkpoint, frozen: bool, dtype: DType) -> Result<Self> {
        if ck.header.get("kind").and_then(|k| k.as_str()) != Some("predenoiser") {
            return Err(Error::Checkpoint("checkpoint does not hold a pre-denoiser".into()));
        }
        let spec: UNetSpec = serde_json::from_value(ck.header["spec"].clone()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let store = if frozen { ParamStore::new(0, dtype).frozen() } else { ParamStore::new(0, dtype) };
        let p = Self::with_store(store, spec)?;
        p.store.load_tensors(&ck.tensors, "")?;
        Ok(p)
    }

    pub fn load(path: &Path, frozen: bool) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, frozen, DType::F32)
    }
}

pub(crate) fn packed_to_tensor(p: &PackedFrame, dtype: DType, device: &Device) -> Result<Tensor> {
    let arr = p.to_array();
    let (_, h, w) = arr.dim();
    Ok(Tensor::from_vec(arr.into_raw_vec_and_offset().0, (1, 4, h, w), device)?.to_dtype(dtype)?)
}

pub(crate) fn tensor_to_packed(t: &Tensor, like: &PackedFrame) -> Result<PackedFrame> {
    let (_, c, h, w) = t.dims4()?;
    let flat: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    let planes = (0..c)
        .map(|i| Array2::from_shape_vec((h, w), flat[i * h * w..(i + 1) * h * w].to_vec()).expect("plane size"))
        .collect();
    PackedFrame::from_planes(planes, like.meta, like.normalized)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bayer::{BayerPattern, RawMeta};
    use rand::{Rng, SeedableRng};

    fn noisy_frame(h: usize, w: usize, seed: u64) -> BayerFrame {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        BayerFrame::from_normalized(Array2::from_shape_fn((h, w), |_| rng.random::<f32>()), RawMeta::full_range(BayerPattern::Rggb, 12)).unwrap()
    }

    #[test]
    fn fresh_network_is_identity() {
        let p = Predenoiser::new(UNetSpec::predenoiser(2, 4), 1, DType::F32).unwrap();
        let f = noisy_frame(16, 24, 2);
        assert_eq!(p.predenoise_frame(&f).unwrap(), f);
    }

    #[test]
    fn shape_is_preserved_for_unpadded_sizes() {
        let p = Predenoiser::new(UNetSpec::predenoiser(3, 4), 1, DType::F32).unwrap();
        for (h, w) in [(128, 128), (10, 14), (2, 2)] {
            let out = p.predenoise_frame(&noisy_frame(h, w, 3)).unwrap();
            assert_eq!(out.data.dim(), (h, w));
        }
    }

    #[test]
    fn inference_is_deterministic() {
        let store = ParamStore::new(4, DType::F32).with_random_heads();
        let p = Predenoiser::with_store(store, UNetSpec::predenoiser(2, 4)).unwrap();
        let f = noisy_frame(12, 12, 5);
        let a = p.predenoise_frame(&f).unwrap();
        assert_ne!(a, f);
        assert_eq!(a, p.predenoise_frame(&f).unwrap());
    }

    #[test]
    fn unnormalized_input_rejected() {
        let p = Predenoiser::new(UNetSpec::predenoiser(1, 2), 1, DType::F32).unwrap();
        let f = BayerFrame::new(Array2::zeros((4, 4)), RawMeta::full_range(BayerPattern::Rggb, 12)).unwrap();
        assert!(matches!(p.predenoise_frame(&f), Err(Error::State(_))));
    }

    #[test]
    fn checkpoint_roundtrip_and_freeze() {
        let store = ParamStore::new(8, DType::F32).with_random_heads();
        let p = Predenoiser::with_store(store, UNetSpec::predenoiser(2, 4)).unwrap();
        let ck = Checkpoint::from_bytes(&p.checkpoint().to_bytes().unwrap()).unwrap();
        let q = Predenoiser::from_checkpoint(&ck, true, DType::F32).unwrap();
        assert!(q.is_frozen());
        assert_eq!(q.store().checksum().unwrap(), p.store().checksum().unwrap());
        let f = noisy_frame(8, 8, 1);
        assert_eq!(q.predenoise_frame(&f).unwrap(), p.predenoise_frame(&f).unwrap());
    }
}
