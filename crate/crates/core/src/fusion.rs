//! Temporal fusion of an aligned stack into one feature map per stream, and
//! spatial fusion of the stream features into a residual noise estimate.

use candle_core::{Tensor, D};

use crate::bayer::BayerPattern;
use crate::error::{Error, Result};
use crate::nn::layers::{crop_hw, leaky_relu, pad_to_multiple, sigmoid, unpack_tensor, upsample2x};
use crate::nn::{Conv2d, Init, ParamStore};

/// `sigmoid(<a(p), b(p)>)` over the channel axis: `N×C×H×W` pair → `N×1×H×W`.
pub fn similarity(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::Dimension(format!("similarity of {:?} and {:?}", a.dims(), b.dims())));
    }
    sigmoid(&(a * b)?.sum_keepdim(1)?)
}

pub struct TemporalFusion {
    embed_center: Conv2d,
    embed_slice: Conv2d,
    aggregate: Conv2d,
    att1: Conv2d,
    att2: Conv2d,
    att_out: Conv2d,
    frames: usize,
    center: usize,
}

impl TemporalFusion {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, frames: usize) -> Result<Self> {
        if frames == 0 || frames % 2 == 0 {
            return Err(Error::Config(format!("temporal window must be odd, got {frames}")));
        }
        let c = channels;
        Ok(TemporalFusion {
            embed_center: store.conv2d(&format!("{prefix}.embed_center"), c, c, 3, 1, Init::Kaiming)?,
            embed_slice: store.conv2d(&format!("{prefix}.embed_slice"), c, c, 3, 1, Init::Kaiming)?,
            aggregate: store.conv2d(&format!("{prefix}.aggregate"), frames * c, c, 1, 1, Init::Kaiming)?,
            att1: store.conv2d(&format!("{prefix}.att1"), frames * c, c, 1, 1, Init::Kaiming)?,
            att2: store.conv2d(&format!("{prefix}.att2"), c, c, 3, 1, Init::Kaiming)?,
            att_out: store.conv2d(&format!("{prefix}.att_out"), c, c, 3, 1, Init::Kaiming)?,
            frames,
            center: frames / 2,
        })
    }

    /// Per-slice similarity maps `S×T×1×H×W` against the center slice.
    pub fn similarities(&self, stack: &Tensor) -> Result<Tensor> {
        let (s, t, c, h, w) = stack.dims5()?;
        if t != self.frames {
            return Err(Error::Dimension(format!("stack has {t} frames, fusion expects {}", self.frames)));
        }
        let center = self.embed_center.forward(&stack.narrow(1, self.center, 1)?.squeeze(1)?)?;
        let slices = self.embed_slice.forward(&stack.reshape((s * t, c, h, w))?)?;
        let center = center
            .unsqueeze(1)?
            .broadcast_as((s, t, c, h, w))?
            .reshape((s * t, c, h, w))?;
        Ok(similarity(&slices, &center)?.reshape((s, t, 1, h, w))?)
    }

    /// `S×T×C×H×W` → `S×C×H×W`.
    pub fn forward(&self, stack: &Tensor) -> Result<Tensor> {
        let (s, t, c, h, w) = stack.dims5()?;
        let weighted = stack.broadcast_mul(&self.similarities(stack)?)?.reshape((s, t * c, h, w))?;
        let (weighted, orig) = pad_to_multiple(&weighted, 2)?;
        let fea = leaky_relu(&self.aggregate.forward(&weighted)?)?;
        let a1 = leaky_relu(&self.att1.forward(&weighted)?)?;
        let a2 = leaky_relu(&self.att2.forward(&a1.avg_pool2d(2)?)?)?;
        let mask = sigmoid(&self.att_out.forward(&(a1 + upsample2x(&a2)?)?)?)?;
        crop_hw(&(fea * (mask * 2.0)?)?, orig)
    }
}

struct ResBlock(Conv2d, Conv2d);

impl ResBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok((x + self.1.forward(&self.0.forward(x)?.relu()?)?)?)
    }
}

/// Channel gating by a pooled two-layer MLP, then spatial gating by a 7×7
/// convolution over channel-pooled maps.
pub struct Cbam {
    fc1: Conv2d,
    fc2: Conv2d,
    spatial: Conv2d,
}

impl Cbam {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, reduction: usize) -> Result<Self> {
        let hidden = (channels / reduction).max(1);
        Ok(Cbam {
            fc1: store.conv2d(&format!("{prefix}.fc1"), channels, hidden, 1, 1, Init::Kaiming)?,
            fc2: store.conv2d(&format!("{prefix}.fc2"), hidden, channels, 1, 1, Init::Kaiming)?,
            spatial: store.conv2d(&format!("{prefix}.spatial"), 2, 1, 7, 1, Init::Kaiming)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mlp = |p: &Tensor| -> Result<Tensor> { self.fc2.forward(&self.fc1.forward(p)?.relu()?) };
        let avg = x.mean_keepdim(D::Minus1)?.mean_keepdim(D::Minus2)?;
        let max = x.max_keepdim(D::Minus1)?.max_keepdim(D::Minus2)?;
        let x = x.broadcast_mul(&sigmoid(&(mlp(&avg)? + mlp(&max)?)?)?)?;
        let pooled = Tensor::cat(&[&x.mean_keepdim(1)?, &x.max_keepdim(1)?], 1)?;
        Ok(x.broadcast_mul(&sigmoid(&self.spatial.forward(&pooled)?)?)?)
    }
}

/// How the fused stream features map back to an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputLayout {
    /// Four packed planes, reassembled into the mosaic.
    Packed(BayerPattern),
    /// One full-resolution mosaic channel.
    Mosaic,
    /// Three sRGB channels.
    Rgb,
}

impl OutputLayout {
    pub fn channels(&self) -> usize {
        match self {
            OutputLayout::Packed(_) => 4,
            OutputLayout::Mosaic => 1,
            OutputLayout::Rgb => 3,
        }
    }
}

pub struct SpatialFusion {
    blocks: Vec<ResBlock>,
    cbam: Cbam,
    out: Conv2d,
    width: usize,
}

impl SpatialFusion {
    /// `width` is 4C; `out_channels` follows the stream layout.
    pub fn new(store: &mut ParamStore, prefix: &str, width: usize, res_blocks: usize, out_channels: usize) -> Result<Self> {
        let blocks = (0..res_blocks)
            .map(|i| {
                Ok(ResBlock(
                    store.conv2d(&format!("{prefix}.res{i}.conv1"), width, width, 3, 1, Init::Kaiming)?,
                    store.conv2d(&format!("{prefix}.res{i}.conv2"), width, width, 3, 1, Init::Scaled(0.1))?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SpatialFusion {
            blocks,
            cbam: Cbam::new(store, &format!("{prefix}.cbam"), width, 4)?,
            out: store.conv2d(&format!("{prefix}.out"), width, out_channels, 3, 1, Init::ZeroHead)?,
            width,
        })
    }

    /// Output channels of every residual-block convolution.
    pub fn block_widths(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .flat_map(|b| [b.0.out_channels(), b.1.out_channels()])
            .collect()
    }

    pub fn output_channels(&self) -> usize {
        self.out.out_channels()
    }

    /// Noise estimate from `B×4C×h×w` features, in stream layout.
    pub fn noise(&self, features: &Tensor) -> Result<Tensor> {
        if features.dim(1)? != self.width {
            return Err(Error::Dimension(format!(
                "spatial fusion expects {} channels, got {}",
                self.width,
                features.dim(1)?
            )));
        }
        let mut x = features.clone();
        for b in &self.blocks {
            x = b.forward(&x)?;
        }
        self.out.forward(&self.cbam.forward(&x)?)
    }

    /// `center_noisy` (`B×c×2H×2W` for packed/mosaic, `B×3×H×W` for sRGB)
    /// plus the estimated noise, and the noise itself in image layout.
    pub fn forward(&self, features: &Tensor, center_noisy: &Tensor, layout: OutputLayout) -> Result<(Tensor, Tensor)> {
        let noise = self.noise(features)?;
        let noise = match layout {
            OutputLayout::Packed(pattern) => unpack_tensor(&noise, pattern)?,
            _ => noise,
        };
        if noise.dims() != center_noisy.dims() {
            return Err(Error::Dimension(format!(
                "noise estimate {:?} does not match the center frame {:?}",
                noise.dims(),
                center_noisy.dims()
            )));
        }
        Ok(((center_noisy + &noise)?, noise))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn zero_features_weight_to_half() {
        let z = Tensor::zeros((2, 4, 3, 3), DType::F64, &Device::Cpu).unwrap();
        let s = similarity(&z, &z).unwrap();
        assert!(s.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn dot_product_two_gives_sigmoid_two() {
        let a = Tensor::new(&[1.0f64, 1.0], &Device::Cpu).unwrap().reshape((1, 2, 1, 1)).unwrap();
        let s = similarity(&a, &a).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()[0];
        assert!((s - 0.880797).abs() < 1e-6);
    }

    #[test]
    fn temporal_fusion_squeezes_to_one_slice() {
        let mut st = ParamStore::new(1, DType::F32);
        let tf = TemporalFusion::new(&mut st, "tf", 4, 3).unwrap();
        let x = Tensor::randn(0f32, 1.0, (2, 3, 4, 5, 7), &Device::Cpu).unwrap();
        assert_eq!(tf.forward(&x).unwrap().dims(), &[2, 4, 5, 7]);
        let sims = tf.similarities(&x).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(sims.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn fresh_spatial_fusion_returns_center() {
        let mut st = ParamStore::new(1, DType::F32);
        let sf = SpatialFusion::new(&mut st, "sf", 8, 2, 4).unwrap();
        let feats = Tensor::randn(0f32, 1.0, (1, 8, 3, 4), &Device::Cpu).unwrap();
        let center = Tensor::randn(0f32, 1.0, (1, 1, 6, 8), &Device::Cpu).unwrap();
        let (out, noise) = sf.forward(&feats, &center, OutputLayout::Packed(BayerPattern::Grbg)).unwrap();
        assert_eq!(out.flatten_all().unwrap().to_vec1::<f32>().unwrap(), center.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        assert_eq!(noise.abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap(), 0.0);
        assert_eq!(sf.block_widths(), vec![8; 4]);
    }
}
