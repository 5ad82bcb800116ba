//! Separated non-local attention over an aligned stack `S×T×C×H×W`
//! (S independent streams, T frames): criss-cross spatial attention and
//! channel attention per frame slice, temporal attention across slices.
//! Branch outputs are scaled by learnable scalars that start at zero, then
//! summed onto the input.

use candle_core::{DType, Tensor};

use crate::error::{Error, Result};
use crate::nn::layers::softmax_last;
use crate::nn::{Conv2d, Init, ParamStore};

/// Masks the self position out of the column branch so each pixel sees
/// `H + W − 1` distinct candidates.
const MASKED: f64 = -1e30;

/// Query/key projections for criss-cross attention.
pub struct CrissCross {
    query: Conv2d,
    key: Conv2d,
    value: Conv2d,
}

impl CrissCross {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize) -> Result<Self> {
        let reduced = (channels / 2).max(1);
        Ok(CrissCross {
            query: store.conv2d(&format!("{prefix}.query"), channels, reduced, 1, 1, Init::Kaiming)?,
            key: store.conv2d(&format!("{prefix}.key"), channels, reduced, 1, 1, Init::Kaiming)?,
            value: store.conv2d(&format!("{prefix}.value"), channels, channels, 1, 1, Init::Kaiming)?,
        })
    }

    /// Affinities `N×H×W×(H+W)`; the first `H` entries index the column
    /// (source row `h'`), the last `W` the row (source column `w'`).
    pub fn affinity(&self, x: &Tensor) -> Result<Tensor> {
        criss_cross_affinity(&self.query.forward(x)?, &self.key.forward(x)?)
    }

    /// One criss-cross pass on `N×C×H×W`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        criss_cross_aggregate(&self.affinity(x)?, &self.value.forward(x)?)
    }
}

pub fn criss_cross_affinity(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    let (_, _, h, _) = q.dims4()?;
    // energy_h[n, y, x, y'] = <q(y, x), k(y', x)>
    let e_h = q
        .permute((0, 3, 2, 1))?
        .contiguous()?
        .matmul(&k.permute((0, 3, 1, 2))?.contiguous()?)?
        .permute((0, 2, 1, 3))?;
    let diag: Vec<f64> = (0..h * h).map(|i| if i / h == i % h { MASKED } else { 0.0 }).collect();
    let mask = Tensor::from_vec(diag, (h, 1, h), q.device())?.to_dtype(q.dtype())?;
    let e_h = e_h.broadcast_add(&mask)?;
    // energy_w[n, y, x, x'] = <q(y, x), k(y, x')>
    let e_w = q
        .permute((0, 2, 3, 1))?
        .contiguous()?
        .matmul(&k.permute((0, 2, 1, 3))?.contiguous()?)?;
    softmax_last(&Tensor::cat(&[&e_h, &e_w], 3)?)
}

pub fn criss_cross_aggregate(att: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (_, _, h, _) = v.dims4()?;
    let w = att.dim(3)? - h;
    let att_h = att.narrow(3, 0, h)?;
    let att_w = att.narrow(3, h, w)?;
    // out_h[n, c, y, x] = Σ_y' att_h[n, y, x, y'] v[n, c, y', x]
    let out_h = v
        .permute((0, 3, 1, 2))?
        .contiguous()?
        .matmul(&att_h.permute((0, 2, 3, 1))?.contiguous()?)?
        .permute((0, 2, 3, 1))?;
    // out_w[n, c, y, x] = Σ_x' att_w[n, y, x, x'] v[n, c, y, x']
    let out_w = v
        .permute((0, 2, 1, 3))?
        .contiguous()?
        .matmul(&att_w.permute((0, 1, 3, 2))?.contiguous()?)?
        .permute((0, 2, 1, 3))?;
    Ok((out_h + out_w)?.contiguous()?)
}

/// `N×C×C` softmax over source channels of the channel Gram matrix.
pub fn channel_affinity(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let flat = x.reshape((n, c, h * w))?;
    softmax_last(&flat.matmul(&flat.t()?)?)
}

pub fn channel_attention(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let att = channel_affinity(x)?;
    Ok(att.matmul(&x.reshape((n, c, h * w))?)?.reshape((n, c, h, w))?)
}

/// `S×T×T` softmax over source frames of per-frame feature dot products.
pub fn temporal_affinity(stack: &Tensor) -> Result<Tensor> {
    let (s, t, _, _, _) = stack.dims5()?;
    let flat = stack.reshape((s, t, ()))?;
    softmax_last(&flat.matmul(&flat.t()?)?)
}

pub fn temporal_attention(stack: &Tensor) -> Result<Tensor> {
    let (s, t, c, h, w) = stack.dims5()?;
    let att = temporal_affinity(stack)?;
    Ok(att.matmul(&stack.reshape((s, t, c * h * w))?)?.reshape((s, t, c, h, w))?)
}

/// The three scaled branch outputs for one stack.
pub struct Branches {
    pub spatial: Tensor,
    pub channel: Tensor,
    pub temporal: Tensor,
}

pub fn nonlocal_fuse(stack: &Tensor, b: &Branches) -> Result<Tensor> {
    for t in [&b.spatial, &b.channel, &b.temporal] {
        if t.dims() != stack.dims() {
            return Err(Error::Dimension(format!(
                "branch shape {:?} differs from stack {:?}",
                t.dims(),
                stack.dims()
            )));
        }
    }
    Ok((((stack + &b.spatial)? + &b.channel)? + &b.temporal)?)
}

pub struct NonlocalAttention {
    cc: CrissCross,
    cc_passes: usize,
    gamma_spatial: Tensor,
    gamma_channel: Tensor,
    gamma_temporal: Tensor,
}

impl NonlocalAttention {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, cc_passes: usize) -> Result<Self> {
        if cc_passes == 0 {
            return Err(Error::Config("criss-cross needs at least one pass".into()));
        }
        Ok(NonlocalAttention {
            cc: CrissCross::new(store, &format!("{prefix}.spatial"), channels)?,
            cc_passes,
            gamma_spatial: store.param(&format!("{prefix}.gamma_spatial"), &[1], 1, Init::ZeroHead)?,
            gamma_channel: store.param(&format!("{prefix}.gamma_channel"), &[1], 1, Init::ZeroHead)?,
            gamma_temporal: store.param(&format!("{prefix}.gamma_temporal"), &[1], 1, Init::ZeroHead)?,
        })
    }

    pub fn criss_cross(&self) -> &CrissCross {
        &self.cc
    }

    pub fn branches(&self, stack: &Tensor) -> Result<Branches> {
        let (s, t, c, h, w) = stack.dims5()?;
        let slices = stack.reshape((s * t, c, h, w))?;
        let mut cur = slices.clone();
        for _ in 0..self.cc_passes {
            cur = (&cur + self.cc.forward(&cur)?.broadcast_mul(&self.gamma_spatial)?)?;
        }
        let spatial = (cur - &slices)?.reshape((s, t, c, h, w))?;
        let channel = channel_attention(&slices)?
            .broadcast_mul(&self.gamma_channel)?
            .reshape((s, t, c, h, w))?;
        let temporal = temporal_attention(stack)?.broadcast_mul(&self.gamma_temporal)?;
        Ok(Branches {
            spatial,
            channel,
            temporal,
        })
    }

    pub fn forward(&self, stack: &Tensor) -> Result<Tensor> {
        nonlocal_fuse(stack, &self.branches(stack)?)
    }
}

/// Max deviation of any softmax row sum from one.
pub fn max_row_sum_error(att: &Tensor) -> Result<f64> {
    let sums = att.sum(att.rank() - 1)?.to_dtype(DType::F64)?;
    Ok((sums - 1.0)?.abs()?.max_all()?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn single_pixel_map_returns_value_projection() {
        let mut s = ParamStore::new(1, DType::F64);
        let cc = CrissCross::new(&mut s, "cc", 4).unwrap();
        let x = Tensor::new(&[1.0f64, -2.0, 0.5, 3.0], &Device::Cpu).unwrap().reshape((1, 4, 1, 1)).unwrap();
        let att = cc.affinity(&x).unwrap();
        let a: Vec<f64> = att.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, vec![0.0, 1.0]);
        let out = cc.forward(&x).unwrap();
        let v = cc.value.forward(&x).unwrap();
        assert_eq!(out.flatten_all().unwrap().to_vec1::<f64>().unwrap(), v.flatten_all().unwrap().to_vec1::<f64>().unwrap());
    }

    #[test]
    fn channel_softmax_example() {
        // two channels with dot products (0, 2) against channel 1
        let x = Tensor::new(&[[[[1.0f64, 1.0]], [[1.0, -1.0]]]], &Device::Cpu).unwrap();
        let att: Vec<Vec<f64>> = channel_affinity(&x).unwrap().squeeze(0).unwrap().to_vec2().unwrap();
        assert!((att[1][0] - 0.1192).abs() < 1e-4 && (att[1][1] - 0.8808).abs() < 1e-4);
    }

    #[test]
    fn fresh_module_is_identity() {
        let mut s = ParamStore::new(2, DType::F32);
        let m = NonlocalAttention::new(&mut s, "nl", 4, 2).unwrap();
        let x = Tensor::randn(0f32, 1.0, (2, 3, 4, 5, 6), &Device::Cpu).unwrap();
        let y = m.forward(&x).unwrap();
        assert_eq!(y.flatten_all().unwrap().to_vec1::<f32>().unwrap(), x.flatten_all().unwrap().to_vec1::<f32>().unwrap());
    }
}
