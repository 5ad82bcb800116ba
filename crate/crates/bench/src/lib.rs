//! Inputs shared by the benchmarks.

use candle_core::{DType, Device, Tensor};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rawvid_core::{BayerFrame, BayerPattern, RawMeta};

/// Uniform random normalized RGGB frame.
pub fn random_frame(height: usize, width: usize, seed: u64) -> BayerFrame {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = Array2::from_shape_fn((height, width), |_| rng.random::<f32>());
    BayerFrame::from_normalized(data, RawMeta::full_range(BayerPattern::Rggb, 12)).expect("valid frame")
}

/// Uniform random tensor in `[0, 1)`.
pub fn random_tensor(shape: &[usize], dtype: DType, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f32> = (0..n).map(|_| rng.random()).collect();
    Tensor::from_vec(v, shape, &Device::Cpu)
        .and_then(|t| t.to_dtype(dtype))
        .expect("valid shape")
}
