use candle_core::{DType, Device, Tensor, D};

use crate::bayer::BayerPattern;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Conv2d {
    name: String,
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(name: &str, weight: Tensor, bias: Option<Tensor>, stride: usize, padding: usize) -> Self {
        Conv2d {
            name: name.to_string(),
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        super::conv::conv2d(x, &self.weight, self.bias.as_ref(), self.stride, self.padding)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.dims()[2]
    }
}

pub const LEAKY_SLOPE: f64 = 0.1;

pub fn leaky_relu(x: &Tensor) -> Result<Tensor> {
    Ok(((x.relu()? * (1.0 - LEAKY_SLOPE))? + (x * LEAKY_SLOPE)?)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::softmax(x, D::Minus1)?)
}

pub fn l1(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.abs()?.mean_all()?)
}

/// `2n × n` linear-interpolation matrix for ×2 upsampling with half-pixel
/// centers and edge clamping.
pub fn upsample_matrix(n: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut m = vec![0.0f64; 2 * n * n];
    for i in 0..2 * n {
        let src = ((i as f64 + 0.5) / 2.0 - 0.5).max(0.0);
        let lo = (src.floor() as usize).min(n - 1);
        let hi = (lo + 1).min(n - 1);
        let frac = src - lo as f64;
        m[i * n + lo] += 1.0 - frac;
        m[i * n + hi] += frac;
    }
    Ok(Tensor::from_vec(m, (2 * n, n), device)?.to_dtype(dtype)?)
}

/// Bilinear ×2 upsampling of an `N×C×H×W` tensor.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let uh = upsample_matrix(h, x.dtype(), x.device())?;
    let uw_t = upsample_matrix(w, x.dtype(), x.device())?.t()?;
    let rows = x.reshape((n * c * h, w))?.matmul(&uw_t)?.reshape((n * c, h, 2 * w))?;
    let out = uh.unsqueeze(0)?.broadcast_as((n * c, 2 * h, h))?.contiguous()?.matmul(&rows)?;
    Ok(out.reshape((n, c, 2 * h, 2 * w))?)
}

/// Mosaic `B×1×2H×2W` → canonical planes `B×4×H×W`.
pub fn pack_tensor(x: &Tensor, pattern: BayerPattern) -> Result<Tensor> {
    let (b, c, h2, w2) = x.dims4()?;
    if c != 1 || h2 % 2 != 0 || w2 % 2 != 0 {
        return Err(Error::Dimension(format!("cannot pack tensor of shape {:?}", x.dims())));
    }
    let (h, w) = (h2 / 2, w2 / 2);
    let phases = x
        .reshape((b, h, 2, w, 2))?
        .permute((0, 2, 4, 1, 3))?
        .reshape((b, 4, h, w))?;
    let planes = pattern
        .plane_offsets()
        .iter()
        .map(|&(r, c)| phases.narrow(1, r * 2 + c, 1))
        .collect::<candle_core::Result<Vec<_>>>()?;
    Ok(Tensor::cat(&planes, 1)?)
}

/// Canonical planes `B×4×H×W` → mosaic `B×1×2H×2W`.
pub fn unpack_tensor(x: &Tensor, pattern: BayerPattern) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if c != 4 {
        return Err(Error::Dimension(format!("cannot unpack tensor of shape {:?}", x.dims())));
    }
    let by_phase = (0..4)
        .map(|pos| x.narrow(1, pattern.plane_at(pos / 2, pos % 2), 1))
        .collect::<candle_core::Result<Vec<_>>>()?;
    Ok(Tensor::cat(&by_phase, 1)?
        .reshape((b, 2, 2, h, w))?
        .permute((0, 3, 1, 4, 2))?
        .reshape((b, 1, 2 * h, 2 * w))?)
}

/// `B×(4C)×H×W` → `B×C×2H×2W`; channel `4c + 2dy + dx` lands at
/// `(2y + dy, 2x + dx)`.
pub fn depth_to_space2(x: &Tensor) -> Result<Tensor> {
    let (b, c4, h, w) = x.dims4()?;
    if c4 % 4 != 0 {
        return Err(Error::Dimension(format!("depth-to-space needs a multiple of 4 channels, got {c4}")));
    }
    let c = c4 / 4;
    Ok(x.reshape((b * c, 2, 2, h, w))?
        .permute((0, 3, 1, 4, 2))?
        .reshape((b, c, 2 * h, 2 * w))?)
}

/// Replicate-pads the last two dims up to multiples of `multiple`.
/// Returns the padded tensor and the original `(h, w)`.
pub fn pad_to_multiple(x: &Tensor, multiple: usize) -> Result<(Tensor, (usize, usize))> {
    let dims = x.dims();
    let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
    let ph = h.div_ceil(multiple) * multiple - h;
    let pw = w.div_ceil(multiple) * multiple - w;
    let mut y = x.clone();
    if ph > 0 {
        y = y.pad_with_same(dims.len() - 2, 0, ph)?;
    }
    if pw > 0 {
        y = y.pad_with_same(dims.len() - 1, 0, pw)?;
    }
    Ok((y, (h, w)))
}

pub fn crop_hw(x: &Tensor, (h, w): (usize, usize)) -> Result<Tensor> {
    let n = x.rank();
    Ok(x.narrow(n - 2, 0, h)?.narrow(n - 1, 0, w)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bayer::{pack, unpack, BayerFrame, PackedFrame, RawMeta};
    use ndarray::Array2;

    fn dev() -> Device {
        Device::Cpu
    }

    #[test]
    fn tensor_packing_matches_array_packing() {
        for pattern in BayerPattern::ALL {
            let data = Array2::from_shape_fn((6, 8), |(y, x)| (y * 8 + x) as f32);
            let frame = BayerFrame::new(data.clone(), RawMeta::full_range(pattern, 16)).unwrap();
            let packed = pack(&frame).unwrap();
            let t = Tensor::from_slice(data.as_slice().unwrap(), (1, 1, 6, 8), &dev()).unwrap();
            let pt = pack_tensor(&t, pattern).unwrap();
            let flat: Vec<f32> = pt.flatten_all().unwrap().to_vec1().unwrap();
            assert_eq!(flat, packed.to_array().into_raw_vec_and_offset().0);
            let back = unpack_tensor(&pt, pattern).unwrap();
            assert_eq!(back.flatten_all().unwrap().to_vec1::<f32>().unwrap(), data.as_slice().unwrap());
            // and against the array unpack on arbitrary planes
            let planes: Vec<Array2<f32>> = (0..4).map(|i| Array2::from_shape_fn((3, 4), |(y, x)| (i * 100 + y * 4 + x) as f32)).collect();
            let pf = PackedFrame::from_planes(planes, frame.meta, false).unwrap();
            let arr = pf.to_array();
            let pt = Tensor::from_slice(arr.as_slice().unwrap(), (1, 4, 3, 4), &dev()).unwrap();
            let via_tensor: Vec<f32> = unpack_tensor(&pt, pattern).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            assert_eq!(via_tensor, unpack(&pf).unwrap().data.into_raw_vec_and_offset().0);
        }
    }

    #[test]
    fn upsample_preserves_constants_and_interpolates() {
        let x = Tensor::from_vec(vec![1.0f64, 3.0], (1, 1, 1, 2), &dev()).unwrap();
        let y = upsample2x(&x).unwrap();
        assert_eq!(y.dims(), &[1, 1, 2, 4]);
        let row: Vec<f64> = y.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(&row[..4], &[1.0, 1.5, 2.5, 3.0]);
        let c = Tensor::full(0.7f64, (2, 3, 4, 5), &dev()).unwrap();
        let u = upsample2x(&c).unwrap();
        assert!(u.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().all(|v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn depth_to_space_layout() {
        let x = Tensor::arange(0f32, 8.0, &dev()).unwrap().reshape((1, 8, 1, 1)).unwrap();
        let y = depth_to_space2(&x).unwrap();
        assert_eq!(y.dims(), &[1, 2, 2, 2]);
        assert_eq!(y.flatten_all().unwrap().to_vec1::<f32>().unwrap(), vec![0., 1., 2., 3., 4., 5., 6., 7.]);
    }

    #[test]
    fn pad_and_crop() {
        let x = Tensor::arange(0f32, 6.0, &dev()).unwrap().reshape((1, 1, 2, 3)).unwrap();
        let (p, orig) = pad_to_multiple(&x, 4).unwrap();
        assert_eq!(p.dims(), &[1, 1, 4, 4]);
        assert_eq!(orig, (2, 3));
        let back = crop_hw(&p, orig).unwrap();
        assert_eq!(back.flatten_all().unwrap().to_vec1::<f32>().unwrap(), vec![0., 1., 2., 3., 4., 5.]);
    }

    #[test]
    fn leaky_relu_slopes() {
        let x = Tensor::new(&[-2.0f64, 0.0, 3.0], &dev()).unwrap();
        assert_eq!(leaky_relu(&x).unwrap().to_vec1::<f64>().unwrap(), vec![-0.2, 0.0, 3.0]);
    }
}
