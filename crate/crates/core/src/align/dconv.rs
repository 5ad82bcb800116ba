//! Modulated deformable convolution.
//!
//! ```text
//! out(p0) = Σ_k w_k · in(p0 + p_k + Δp_k) · Δm_k
//! ```
//!
//! Sampling is bilinear with zero padding outside the input. The sampled,
//! modulated values are gathered into an im2col buffer by a custom op with an
//! analytic backward pass (input, offsets and modulation); the weight product
//! is an ordinary matmul so candle differentiates it.

use candle_core::{CpuStorage, CustomOp3, DType, Layout, Shape, Tensor, WithDType};

use crate::error::{Error, Result};

/// Geometry of a square, stride-1, "same"-padded kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KernelGeometry {
    pub size: usize,
}

impl KernelGeometry {
    pub const K3: KernelGeometry = KernelGeometry { size: 3 };

    pub fn locations(&self) -> usize {
        self.size * self.size
    }

    fn pad(&self) -> isize {
        (self.size / 2) as isize
    }

    /// Fixed grid offset `p_k` as `(dy, dx)`.
    pub fn grid(&self, k: usize) -> (isize, isize) {
        ((k / self.size) as isize - self.pad(), (k % self.size) as isize - self.pad())
    }
}

#[derive(Debug, Clone, Copy)]
struct Dims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
}

/// One bilinear tap: four clamped corner indices with their weights (zeroed
/// for corners outside the input) and the fractional parts.
#[derive(Debug, Clone, Copy, Default)]
struct Tap {
    idx: [usize; 4],
    wgt: [f64; 4],
    ly: f64,
    lx: f64,
}

impl Tap {
    fn at(py: f64, px: f64, h: usize, w: usize) -> Tap {
        let (y0, x0) = (py.floor(), px.floor());
        let (ly, lx) = (py - y0, px - x0);
        let (y0, x0) = (y0 as isize, x0 as isize);
        let mut t = Tap { ly, lx, ..Tap::default() };
        let corners = [
            (y0, x0, (1.0 - ly) * (1.0 - lx)),
            (y0, x0 + 1, (1.0 - ly) * lx),
            (y0 + 1, x0, ly * (1.0 - lx)),
            (y0 + 1, x0 + 1, ly * lx),
        ];
        for (i, (y, x, wt)) in corners.into_iter().enumerate() {
            if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                t.idx[i] = y as usize * w + x as usize;
                t.wgt[i] = wt;
            }
        }
        t
    }

    /// Corner values, zero outside the input.
    fn values<T: WithDType>(&self, plane: &[T]) -> [f64; 4] {
        std::array::from_fn(|i| if self.wgt[i] == 0.0 { 0.0 } else { plane[self.idx[i]].to_f64() })
    }

    fn value(&self, v: &[f64; 4]) -> f64 {
        self.wgt[0] * v[0] + self.wgt[1] * v[1] + self.wgt[2] * v[2] + self.wgt[3] * v[3]
    }

    fn grad_yx(&self, v: &[f64; 4]) -> (f64, f64) {
        let dy = (1.0 - self.lx) * (v[2] - v[0]) + self.lx * (v[3] - v[1]);
        let dx = (1.0 - self.ly) * (v[1] - v[0]) + self.ly * (v[3] - v[2]);
        (dy, dx)
    }
}

/// Taps of kernel location `k` for every pixel of batch item `n`.
fn taps<T: WithDType>(geom: KernelGeometry, offsets: &[T], d: Dims, n: usize, k: usize, out: &mut Vec<Tap>) {
    let hw = d.h * d.w;
    let (gy, gx) = geom.grid(k);
    let ox = &offsets[(n * 2 * d.k + 2 * k) * hw..][..hw];
    let oy = &offsets[(n * 2 * d.k + 2 * k + 1) * hw..][..hw];
    out.clear();
    for y in 0..d.h {
        for x in 0..d.w {
            let p = y * d.w + x;
            let py = (y as isize + gy) as f64 + oy[p].to_f64();
            let px = (x as isize + gx) as f64 + ox[p].to_f64();
            out.push(Tap::at(py, px, d.h, d.w));
        }
    }
}

fn im2col<T: WithDType>(geom: KernelGeometry, input: &[T], offsets: &[T], mask: &[T], d: Dims) -> Vec<T> {
    let hw = d.h * d.w;
    let mut cols = vec![T::zero(); d.n * d.c * d.k * hw];
    let mut tp = Vec::with_capacity(hw);
    for n in 0..d.n {
        for k in 0..d.k {
            taps(geom, offsets, d, n, k, &mut tp);
            let m = &mask[(n * d.k + k) * hw..][..hw];
            for c in 0..d.c {
                let plane = &input[(n * d.c + c) * hw..][..hw];
                let row = &mut cols[((n * d.c + c) * d.k + k) * hw..][..hw];
                for (p, t) in tp.iter().enumerate() {
                    let v = t.value(&t.values(plane)) * m[p].to_f64();
                    row[p] = T::from_f64(v);
                }
            }
        }
    }
    cols
}

struct Grads<T> {
    input: Vec<T>,
    offsets: Vec<T>,
    mask: Vec<T>,
}

fn im2col_backward<T: WithDType>(
    geom: KernelGeometry,
    input: &[T],
    offsets: &[T],
    mask: &[T],
    grad_cols: &[T],
    d: Dims,
) -> Grads<T> {
    let hw = d.h * d.w;
    let mut gin = vec![0.0f64; input.len()];
    let mut goff = vec![0.0f64; offsets.len()];
    let mut gmask = vec![0.0f64; mask.len()];
    let mut tp = Vec::with_capacity(hw);
    for n in 0..d.n {
        for k in 0..d.k {
            taps(geom, offsets, d, n, k, &mut tp);
            let mi = (n * d.k + k) * hw;
            let ob = n * 2 * d.k * hw;
            for c in 0..d.c {
                let off = (n * d.c + c) * hw;
                let plane = &input[off..off + hw];
                let gplane = &mut gin[off..off + hw];
                let grow = &grad_cols[((n * d.c + c) * d.k + k) * hw..][..hw];
                for (p, t) in tp.iter().enumerate() {
                    let gc = grow[p].to_f64();
                    if gc == 0.0 {
                        continue;
                    }
                    let m = mask[mi + p].to_f64();
                    let v = t.values(plane);
                    gmask[mi + p] += gc * t.value(&v);
                    let (dy, dx) = t.grad_yx(&v);
                    goff[ob + 2 * k * hw + p] += gc * m * dx;
                    goff[ob + (2 * k + 1) * hw + p] += gc * m * dy;
                    for i in 0..4 {
                        gplane[t.idx[i]] += gc * m * t.wgt[i];
                    }
                }
            }
        }
    }
    let cast = |v: Vec<f64>| v.into_iter().map(T::from_f64).collect();
    Grads {
        input: cast(gin),
        offsets: cast(goff),
        mask: cast(gmask),
    }
}

fn slice<'a, T: WithDType>(v: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&v[a..b]),
        None => candle_core::bail!("deformable im2col needs contiguous inputs"),
    }
}

struct DeformIm2col {
    geom: KernelGeometry,
}

impl DeformIm2col {
    fn dims(&self, input: &Layout) -> candle_core::Result<Dims> {
        let (n, c, h, w) = input.shape().dims4()?;
        Ok(Dims {
            n,
            c,
            h,
            w,
            k: self.geom.locations(),
        })
    }
}

impl CustomOp3 for DeformIm2col {
    fn name(&self) -> &'static str {
        "deform-im2col"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = self.dims(l1)?;
        let storage = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(o), CpuStorage::F32(m)) => {
                CpuStorage::F32(im2col(self.geom, slice(x, l1)?, slice(o, l2)?, slice(m, l3)?, d))
            }
            (CpuStorage::F64(x), CpuStorage::F64(o), CpuStorage::F64(m)) => {
                CpuStorage::F64(im2col(self.geom, slice(x, l1)?, slice(o, l2)?, slice(m, l3)?, d))
            }
            _ => candle_core::bail!("deformable im2col supports f32/f64 inputs of one dtype"),
        };
        Ok((storage, Shape::from((d.n, d.c * d.k, d.h * d.w))))
    }

    fn bwd(
        &self,
        input: &Tensor,
        offsets: &Tensor,
        mask: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let d = self.dims(input.layout())?;
        let dev = input.device();
        let grad_res = grad_res.contiguous()?;
        macro_rules! run {
            ($t:ty) => {{
                let flat = |t: &Tensor| t.flatten_all()?.to_vec1::<$t>();
                let g = im2col_backward(self.geom, &flat(input)?, &flat(offsets)?, &flat(mask)?, &flat(&grad_res)?, d);
                Ok((
                    Some(Tensor::from_vec(g.input, input.shape(), dev)?),
                    Some(Tensor::from_vec(g.offsets, offsets.shape(), dev)?),
                    Some(Tensor::from_vec(g.mask, mask.shape(), dev)?),
                ))
            }};
        }
        match input.dtype() {
            DType::F32 => run!(f32),
            DType::F64 => run!(f64),
            dt => candle_core::bail!("deformable im2col does not support {dt:?}"),
        }
    }
}

/// Samples `input` (`N×C×H×W`) at the displaced kernel grid and returns the
/// modulated columns `N×(C·K)×(H·W)`, row index `c·K + k`.
///
/// `offsets` is `N×2K×H×W` with channel `2k` holding Δx and `2k+1` holding
/// Δy; `modulation` is `N×K×H×W`.
pub fn deform_im2col(input: &Tensor, offsets: &Tensor, modulation: &Tensor, geom: KernelGeometry) -> Result<Tensor> {
    let (n, _, h, w) = input.dims4()?;
    let k = geom.locations();
    if offsets.dims() != [n, 2 * k, h, w] {
        return Err(Error::Config(format!(
            "offsets of shape {:?} do not match {k} kernel locations over {n}x?x{h}x{w}",
            offsets.dims()
        )));
    }
    if modulation.dims() != [n, k, h, w] {
        return Err(Error::Config(format!(
            "modulation of shape {:?} does not match {k} kernel locations over {n}x?x{h}x{w}",
            modulation.dims()
        )));
    }
    let offsets = offsets.to_dtype(input.dtype())?.contiguous()?;
    let modulation = modulation.to_dtype(input.dtype())?.contiguous()?;
    Ok(input.contiguous()?.apply_op3(&offsets, &modulation, DeformIm2col { geom })?)
}

/// Deformable convolution given an im2col-compatible weight `Cout×C×k×k`.
pub fn deform_conv2d(input: &Tensor, offsets: &Tensor, modulation: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (cout, cin, kh, kw) = weight.dims4()?;
    if kh != kw || kh % 2 == 0 {
        return Err(Error::Config(format!("deformable kernel must be square and odd, got {kh}x{kw}")));
    }
    let (n, c, h, w) = input.dims4()?;
    if c != cin {
        return Err(Error::Dimension(format!("deformable conv expects {cin} channels, got {c}")));
    }
    let cols = deform_im2col(input, offsets, modulation, KernelGeometry { size: kh })?;
    let wmat = weight.reshape((cout, cin * kh * kw))?;
    let out = wmat.broadcast_matmul(&cols)?.reshape((n, cout, h, w))?;
    Ok(match bias {
        Some(b) => out.broadcast_add(&b.reshape((1, cout, 1, 1))?)?,
        None => out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn zero_offsets_unit_mask_is_plain_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, &[2, 3, 7, 9], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[4, 3, 3, 3], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[4], -1.0, 1.0);
        let off = Tensor::zeros((2, 18, 7, 9), DType::F64, &Device::Cpu).unwrap();
        let m = Tensor::ones((2, 9, 7, 9), DType::F64, &Device::Cpu).unwrap();
        let d = deform_conv2d(&x, &off, &m, &w, Some(&b)).unwrap();
        let c = x.conv2d(&w, 1, 1, 1, 1).unwrap().broadcast_add(&b.reshape((1, 4, 1, 1)).unwrap()).unwrap();
        let diff = (d - c).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn constant_input_gives_weight_sum_in_interior() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::full(0.8f64, (1, 2, 12, 12), &Device::Cpu).unwrap();
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
        let off = rand_tensor(&mut rng, &[1, 18, 12, 12], -0.9, 0.9);
        let m = Tensor::ones((1, 9, 12, 12), DType::F64, &Device::Cpu).unwrap();
        let sums: Vec<f64> = w.sum((1, 2, 3)).unwrap().to_vec1().unwrap();
        let o = deform_conv2d(&x, &off, &m, &w, None).unwrap().squeeze(0).unwrap().to_vec3::<f64>().unwrap();
        // positions at least 2 pixels from the border never sample outside
        for (co, s) in sums.iter().enumerate() {
            for y in 2..10 {
                for xx in 2..10 {
                    assert!((o[co][y][xx] - 0.8 * s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn samples_outside_are_zero() {
        let x = Tensor::ones((1, 1, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let off = Tensor::full(10.0f64, (1, 18, 4, 4), &Device::Cpu).unwrap();
        let m = Tensor::ones((1, 9, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let cols = deform_im2col(&x, &off, &m, KernelGeometry::K3).unwrap();
        assert_eq!(cols.abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap(), 0.0);
    }

    #[test]
    fn half_pixel_shift_averages_neighbours() {
        // a 1×1 kernel sampling half a pixel to the right
        let x = Tensor::new(&[[[[1.0f64, 3.0, 7.0]]]], &Device::Cpu).unwrap();
        let geom = KernelGeometry { size: 1 };
        let off = Tensor::new(&[[[[0.5f64, 0.5, 0.5]]], [[[0.0f64, 0.0, 0.0]]]], &Device::Cpu)
            .unwrap()
            .reshape((1, 2, 1, 3))
            .unwrap();
        let m = Tensor::ones((1, 1, 1, 3), DType::F64, &Device::Cpu).unwrap();
        let cols = deform_im2col(&x, &off, &m, geom).unwrap();
        assert_eq!(cols.flatten_all().unwrap().to_vec1::<f64>().unwrap(), vec![2.0, 5.0, 3.5]);
    }

    #[test]
    fn kernel_mismatch_is_a_configuration_error() {
        let x = Tensor::zeros((1, 1, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let off = Tensor::zeros((1, 8, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let m = Tensor::zeros((1, 4, 4, 4), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(deform_im2col(&x, &off, &m, KernelGeometry::K3), Err(Error::Config(_))));
    }

    #[test]
    fn backward_runs_through_candle_graph() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Var::from_tensor(&rand_tensor(&mut rng, &[1, 2, 5, 5], -1.0, 1.0)).unwrap();
        let off = Var::from_tensor(&rand_tensor(&mut rng, &[1, 18, 5, 5], -1.3, 1.3)).unwrap();
        let m = Var::from_tensor(&rand_tensor(&mut rng, &[1, 9, 5, 5], 0.1, 0.9)).unwrap();
        let w = Var::from_tensor(&rand_tensor(&mut rng, &[2, 2, 3, 3], -1.0, 1.0)).unwrap();
        let y = deform_conv2d(&x, &off, &m, &w, None).unwrap();
        let grads = y.sqr().unwrap().sum_all().unwrap().backward().unwrap();
        for v in [&x, &off, &m, &w] {
            let g = grads.get(v.as_tensor()).expect("gradient present");
            assert_eq!(g.dims(), v.dims());
        }
    }
}
