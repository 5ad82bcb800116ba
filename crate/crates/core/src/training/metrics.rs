//! PSNR and SSIM on `[0, 1]` data.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::bayer::{BayerFrame, SrgbFrame};
use crate::error::{Error, Result};

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub psnr: f64,
    pub ssim: f64,
}

impl Metrics {
    pub fn mean(items: &[Metrics]) -> Option<Metrics> {
        if items.is_empty() {
            return None;
        }
        let n = items.len() as f64;
        Some(Metrics {
            psnr: items.iter().map(|m| m.psnr).sum::<f64>() / n,
            ssim: items.iter().map(|m| m.ssim).sum::<f64>() / n,
        })
    }
}

fn clamp01(v: f32) -> f64 {
    (v as f64).clamp(0.0, 1.0)
}

fn check_shapes(a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::Dimension(format!("cannot compare shapes {a:?} and {b:?}")));
    }
    Ok(())
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

pub fn psnr(pred: ArrayView2<f32>, gt: ArrayView2<f32>) -> Result<f64> {
    check_shapes(pred.shape(), gt.shape())?;
    let n = pred.len() as f64;
    let mse = pred.iter().zip(gt.iter()).map(|(&a, &b)| (clamp01(a) - clamp01(b)).powi(2)).sum::<f64>() / n;
    Ok(psnr_from_mse(mse))
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let t: Vec<f64> = (0..size).map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = t.iter().sum();
    t.into_iter().map(|v| v / s).collect()
}

fn filter_valid(x: &Array2<f64>, taps: &[f64]) -> Array2<f64> {
    let k = taps.len();
    let (h, w) = x.dim();
    let rows = Array2::from_shape_fn((h, w - k + 1), |(y, c)| (0..k).map(|i| taps[i] * x[[y, c + i]]).sum::<f64>());
    Array2::from_shape_fn((h - k + 1, w - k + 1), |(y, c)| (0..k).map(|i| taps[i] * rows[[y + i, c]]).sum::<f64>())
}

/// Mean SSIM over all fully-covered 11×11 Gaussian windows.
pub fn ssim(pred: ArrayView2<f32>, gt: ArrayView2<f32>) -> Result<f64> {
    check_shapes(pred.shape(), gt.shape())?;
    let (h, w) = pred.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Dimension(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    let x = pred.mapv(clamp01);
    let y = gt.mapv(clamp01);
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let mx = filter_valid(&x, &taps);
    let my = filter_valid(&y, &taps);
    let sxx = filter_valid(&(&x * &x), &taps) - &mx * &mx;
    let syy = filter_valid(&(&y * &y), &taps) - &my * &my;
    let sxy = filter_valid(&(&x * &y), &taps) - &mx * &my;
    let (c1, c2) = (K1 * K1, K2 * K2);
    let num = (2.0 * &mx * &my + c1) * (2.0 * &sxy + c2);
    let den = (&mx * &mx + &my * &my + c1) * (sxx + syy + c2);
    Ok((num / den).mean().expect("non-empty"))
}

pub fn raw_metrics(pred: &BayerFrame, gt: &BayerFrame) -> Result<Metrics> {
    Ok(Metrics {
        psnr: psnr(pred.data.view(), gt.data.view())?,
        ssim: ssim(pred.data.view(), gt.data.view())?,
    })
}

/// PSNR over all channels; SSIM averaged per channel.
pub fn srgb_metrics(pred: &SrgbFrame, gt: &SrgbFrame) -> Result<Metrics> {
    check_shapes(pred.data.shape(), gt.data.shape())?;
    let n = pred.data.len() as f64;
    let mse = pred
        .data
        .iter()
        .zip(gt.data.iter())
        .map(|(&a, &b)| (clamp01(a) - clamp01(b)).powi(2))
        .sum::<f64>()
        / n;
    let mut s = 0.0;
    for c in 0..3 {
        s += ssim(pred.data.index_axis(Axis(0), c), gt.data.index_axis(Axis(0), c))?;
    }
    Ok(Metrics {
        psnr: psnr_from_mse(mse),
        ssim: s / 3.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_frames_hit_the_cap() {
        let a = Array2::from_shape_fn((16, 16), |(y, x)| ((y * 16 + x) % 7) as f32 / 7.0);
        assert_eq!(psnr(a.view(), a.view()).unwrap(), PSNR_CAP);
        assert!((ssim(a.view(), a.view()).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mse_one_percent_is_twenty_db() {
        let a = Array2::from_elem((12, 12), 0.3f32);
        let b = Array2::from_elem((12, 12), 0.4f32);
        assert!((psnr(a.view(), b.view()).unwrap() - 20.0).abs() < 1e-4);
    }

    #[test]
    fn constant_offset_ssim_is_luminance_term() {
        // constant images: variances vanish, SSIM reduces to the luminance term
        let a = Array2::from_elem((12, 12), 0.3f32);
        let b = Array2::from_elem((12, 12), 0.4f32);
        let (mx, my) = (0.3f32 as f64, 0.4f32 as f64);
        let c1 = K1 * K1;
        let expected = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
        assert!((ssim(a.view(), b.view()).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn small_or_mismatched_inputs_rejected() {
        let a = Array2::<f32>::zeros((8, 8));
        assert!(ssim(a.view(), a.view()).is_err());
        let b = Array2::<f32>::zeros((12, 12));
        assert!(psnr(a.view(), b.view()).is_err());
    }
}
