//! 2-D convolution as im2col + matrix product, so both passes run on gemm.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor, WithDType};

use crate::error::Result;

#[derive(Debug, Clone, Copy)]
struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn cols_shape(&self) -> (usize, usize, usize) {
        let (ho, wo) = self.out_hw();
        (self.c * self.k * self.k, self.n, ho * wo)
    }

    /// Visits `(input start, column start, run length)` for every contiguous
    /// run of in-bounds taps along a row.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (ho, wo) = self.out_hw();
        let l = ho * wo;
        let kk = self.k * self.k;
        let (s, pad) = (self.stride as isize, self.pad as isize);
        for n in 0..self.n {
            for c in 0..self.c {
                let in_base = (n * self.c + c) * self.h * self.w;
                for ky in 0..self.k {
                    for kx in 0..self.k {
                        let row = ((c * kk + ky * self.k + kx) * self.n + n) * l;
                        // ox range with 0 <= ox*s + kx - pad < w
                        let lo = ((pad - kx as isize).max(0) + s - 1) / s;
                        let hi = ((self.w as isize + pad - kx as isize + s - 1) / s).clamp(0, wo as isize);
                        if lo >= hi {
                            continue;
                        }
                        let (lo, hi) = (lo as usize, hi as usize);
                        for oy in 0..ho {
                            let iy = (oy * self.stride + ky) as isize - pad;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            let ix = (lo * self.stride + kx) as isize - pad;
                            f(in_base + iy as usize * self.w + ix as usize, row + oy * wo + lo, hi - lo);
                        }
                    }
                }
            }
        }
    }
}

fn slice<'a, T: WithDType>(v: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&v[a..b]),
        None => candle_core::bail!("im2col expects a contiguous tensor"),
    }
}

fn gather<T: WithDType>(g: &Geometry, x: &[T]) -> Vec<T> {
    let (n, r, l) = g.cols_shape();
    let mut out = vec![T::zero(); n * r * l];
    let s = g.stride;
    g.for_each_run(|i, o, len| {
        if s == 1 {
            out[o..o + len].copy_from_slice(&x[i..i + len]);
        } else {
            for (j, v) in out[o..o + len].iter_mut().enumerate() {
                *v = x[i + j * s];
            }
        }
    });
    out
}

fn scatter<T: WithDType>(g: &Geometry, cols: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); g.n * g.c * g.h * g.w];
    let s = g.stride;
    g.for_each_run(|i, o, len| {
        for (j, v) in cols[o..o + len].iter().enumerate() {
            out[i + j * s] += *v;
        }
    });
    out
}

struct Im2col(Geometry);
struct Col2im(Geometry);

macro_rules! dispatch {
    ($s:expr, $l:expr, $f:expr) => {
        match $s {
            CpuStorage::F32(v) => CpuStorage::F32($f(slice(v, $l)?)),
            CpuStorage::F64(v) => CpuStorage::F64($f(slice(v, $l)?)),
            _ => candle_core::bail!("im2col supports f32 and f64"),
        }
    };
}

impl CustomOp1 for Im2col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let out = dispatch!(s, l, |v| gather(&g, v));
        Ok((out, g.cols_shape().into()))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Col2im(self.0))?))
    }
}

impl CustomOp1 for Col2im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let out = dispatch!(s, l, |v| scatter(&g, v));
        Ok((out, (g.n, g.c, g.h, g.w).into()))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Im2col(self.0))?))
    }
}

/// `N×C×H×W` → `(C·k·k)×N×(H'·W')`, rows ordered `c·k² + ky·k + kx`.
pub fn im2col(x: &Tensor, k: usize, stride: usize, pad: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let g = Geometry { n, c, h, w, k, stride, pad };
    Ok(x.contiguous()?.apply_op1(Im2col(g))?)
}

/// Square-kernel convolution; `weight` is `Cout×C×k×k`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (cout, cin, k, _) = weight.dims4()?;
    if cin != c {
        return Err(crate::Error::Dimension(format!("convolution expects {cin} input channels, got {c}")));
    }
    let g = Geometry { n, c, h, w, k, stride, pad };
    let (ho, wo) = g.out_hw();
    let cols = if k == 1 && stride == 1 && pad == 0 {
        x.reshape((n, c, h * w))?.transpose(0, 1)?.contiguous()?
    } else {
        im2col(x, k, stride, pad)?
    };
    let y = weight.reshape((cout, c * k * k))?.matmul(&cols.reshape((c * k * k, n * ho * wo))?)?;
    let y = match bias {
        Some(b) => y.broadcast_add(&b.reshape((cout, 1))?)?,
        None => y,
    };
    Ok(y.reshape((cout, n, ho, wo))?.transpose(0, 1)?.contiguous()?)
}
