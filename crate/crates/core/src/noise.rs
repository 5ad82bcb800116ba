//! Poisson-Gaussian sensor noise: sampling, calibration from flat-field and
//! bias stacks, and synthesis of noisy/clean training pairs.
//!
//! All parameters are expressed in normalized intensity units (fractions of
//! the black-to-white range). A reading `x` of true intensity `y` is
//!
//! ```text
//! x = s · Poisson(y / s) + Normal(0, r²)      s = sigma_s_sq, r = sigma_r
//! ```
//!
//! so `E[x] = y` and `Var[x] = s·y + r²`. To convert from digital numbers,
//! divide `sigma_r` by `white - black` and `sigma_s_sq` likewise.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::bayer::{BayerFrame, RawMeta, Sequence, SequenceRole, SrgbFrame, SynthesisRecord};
use crate::error::{Error, Result};
use crate::isp::{reference_isp_inverse, ReferenceIspConfig};

/// Above this Poisson rate the shot term is drawn from `Normal(λ, λ)`.
pub const POISSON_GAUSSIAN_SWITCH: f64 = 1e5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    pub iso: u32,
    pub sigma_s_sq: f64,
    pub sigma_r: f64,
}

impl NoiseParams {
    pub fn new(iso: u32, sigma_s_sq: f64, sigma_r: f64) -> Result<Self> {
        let p = NoiseParams { iso, sigma_s_sq, sigma_r };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_s_sq >= 0.0 && self.sigma_s_sq.is_finite() && self.sigma_r >= 0.0 && self.sigma_r.is_finite()) {
            return Err(Error::Parameter(format!(
                "noise parameters must be finite and non-negative, got sigma_s_sq={} sigma_r={}",
                self.sigma_s_sq, self.sigma_r
            )));
        }
        Ok(())
    }

    /// Model variance at intensity `y`.
    pub fn variance_at(&self, y: f64) -> f64 {
        self.sigma_s_sq * y + self.sigma_r * self.sigma_r
    }
}

/// Per-ISO parameter table as stored on disk.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NoiseTable {
    pub entries: BTreeMap<u32, NoiseParams>,
}

#[derive(Serialize, Deserialize)]
struct NoiseTableFile {
    units: String,
    #[serde(default)]
    params: Vec<NoiseParams>,
}

impl NoiseTable {
    pub fn insert(&mut self, params: NoiseParams) {
        self.entries.insert(params.iso, params);
    }

    pub fn get(&self, iso: u32) -> Result<NoiseParams> {
        self.entries
            .get(&iso)
            .copied()
            .ok_or_else(|| Error::Config(format!("no noise parameters for ISO {iso}")))
    }

    pub fn to_toml(&self) -> String {
        let file = NoiseTableFile {
            units: "normalized".into(),
            params: self.entries.values().copied().collect(),
        };
        toml::to_string(&file).expect("table serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let file: NoiseTableFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if file.units != "normalized" {
            return Err(Error::Config(format!("unsupported noise units `{}`", file.units)));
        }
        let mut table = NoiseTable::default();
        for p in file.params {
            p.validate()?;
            table.insert(p);
        }
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }
}

/// Draws one noisy reading of true intensity `y`.
pub fn sample_reading<R: Rng>(y: f64, params: &NoiseParams, normal_read: Option<&Normal<f64>>, rng: &mut R) -> f64 {
    let shot = if params.sigma_s_sq == 0.0 {
        y
    } else {
        let rate = y / params.sigma_s_sq;
        let count = if rate <= 0.0 {
            0.0
        } else if rate > POISSON_GAUSSIAN_SWITCH {
            Normal::new(rate, rate.sqrt()).expect("finite rate").sample(rng)
        } else {
            Poisson::new(rate).expect("positive finite rate").sample(rng)
        };
        params.sigma_s_sq * count
    };
    match normal_read {
        Some(n) => shot + n.sample(rng),
        None => shot,
    }
}

/// Corrupts a normalized clean frame. The result is deliberately not
/// clamped; readings may leave `[0, 1]`.
pub fn sample_noise(clean: &BayerFrame, params: &NoiseParams, seed: u64) -> Result<BayerFrame> {
    clean.require_normalized()?;
    params.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let read = (params.sigma_r > 0.0).then(|| Normal::new(0.0, params.sigma_r).expect("valid sigma"));
    let data = clean
        .data
        .mapv(|y| sample_reading(y as f64, params, read.as_ref(), &mut rng) as f32);
    clean.with_data(data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StackKind {
    FlatField,
    Bias,
}

/// Frames captured under identical conditions.
#[derive(Debug, Clone)]
pub struct CalibrationStack {
    pub frames: Vec<BayerFrame>,
    pub kind: StackKind,
    pub exposure_index: u32,
}

/// Temporal mean and variance of one stack, averaged over pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StackStatistics {
    pub exposure_index: u32,
    pub mean: f64,
    pub variance: f64,
}

impl CalibrationStack {
    pub fn new(frames: Vec<BayerFrame>, kind: StackKind, exposure_index: u32) -> Result<Self> {
        let dim = frames
            .first()
            .map(|f| f.data.dim())
            .ok_or_else(|| Error::InsufficientData("calibration stack has no frames".into()))?;
        if frames.iter().any(|f| f.data.dim() != dim) {
            return Err(Error::Consistency("calibration frames differ in size".into()));
        }
        Ok(CalibrationStack { frames, kind, exposure_index })
    }

    /// Frame values in normalized units without clamping, so read noise
    /// below the black level is kept.
    fn normalized_values(frame: &BayerFrame) -> Array2<f64> {
        if frame.normalized {
            frame.data.mapv(|v| v as f64)
        } else {
            let RawMeta { black_level, white_level, .. } = frame.meta;
            let range = (white_level - black_level) as f64;
            frame.data.mapv(|v| (v as f64 - black_level as f64) / range)
        }
    }

    /// Per-pixel temporal mean and unbiased variance, each averaged over
    /// the frame area.
    pub fn statistics(&self) -> Result<StackStatistics> {
        let n = self.frames.len();
        if n < 2 {
            return Err(Error::InsufficientData(format!(
                "stack at exposure {} has {n} frame(s), need at least 2",
                self.exposure_index
            )));
        }
        let values: Vec<Array2<f64>> = self.frames.iter().map(Self::normalized_values).collect();
        let mut sum = Array2::<f64>::zeros(values[0].dim());
        for v in &values {
            sum += v;
        }
        let mean = sum / n as f64;
        let mut sq = Array2::<f64>::zeros(mean.dim());
        for v in &values {
            let d = v - &mean;
            sq += &(&d * &d);
        }
        let var = sq / (n - 1) as f64;
        Ok(StackStatistics {
            exposure_index: self.exposure_index,
            mean: mean.mean().unwrap_or(0.0),
            variance: var.mean().unwrap_or(0.0),
        })
    }
}

/// Result of a photon-transfer fit.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub params: NoiseParams,
    pub read_variance: f64,
    pub points: Vec<StackStatistics>,
    pub intercept: f64,
}

/// Estimates `sigma_r` from the bias stack and `sigma_s_sq` as the slope of
/// the least-squares line through `(mean, variance - sigma_r²)` of the
/// flat-field stacks.
pub fn estimate_noise_params(flat_stacks: &[CalibrationStack], bias_stack: &CalibrationStack, iso: u32) -> Result<Calibration> {
    if bias_stack.kind != StackKind::Bias {
        return Err(Error::Parameter("bias stack is not of kind bias".into()));
    }
    if let Some(s) = flat_stacks.iter().find(|s| s.kind != StackKind::FlatField) {
        return Err(Error::Parameter(format!("stack at exposure {} is not a flat field", s.exposure_index)));
    }
    let mut exposures: Vec<u32> = flat_stacks.iter().map(|s| s.exposure_index).collect();
    exposures.sort_unstable();
    exposures.dedup();
    if exposures.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "need flat fields at 3 or more exposure levels, got {}",
            exposures.len()
        )));
    }
    let read_variance = bias_stack.statistics()?.variance;
    let points = flat_stacks.iter().map(|s| s.statistics()).collect::<Result<Vec<_>>>()?;

    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.mean).sum::<f64>() / n;
    let my = points.iter().map(|p| p.variance - read_variance).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.mean - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.mean - mx) * (p.variance - read_variance - my)).sum();
    if sxx <= f64::EPSILON * n {
        return Err(Error::InsufficientData("flat-field means do not span a range of intensities".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    // Exactly noiseless stacks can produce a slope of -0.0 or a few ulps below zero.
    let slope = if slope.abs() < 1e-15 { 0.0 } else { slope };
    if slope < 0.0 {
        return Err(Error::CalibrationQuality(format!(
            "fitted shot-noise slope {slope:.3e} is negative"
        )));
    }
    Ok(Calibration {
        params: NoiseParams::new(iso, slope, read_variance.max(0.0).sqrt())?,
        read_variance,
        points,
        intercept,
    })
}

/// sRGB → raw through the reference ISP's inverse.
pub fn unprocess_srgb(srgb: &SrgbFrame, isp: &ReferenceIspConfig, meta: RawMeta) -> Result<BayerFrame> {
    reference_isp_inverse(srgb, isp, meta)
}

/// Deterministic per-frame sub-seed (SplitMix64 finalizer over the pair).
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independently corrupts every frame of a normalized clean sequence.
pub fn synthesize_pairs(clean: &Sequence, params: &NoiseParams, seed: u64) -> Result<(Sequence, Sequence)> {
    let frames = clean
        .frames
        .iter()
        .enumerate()
        .map(|(i, f)| sample_noise(f, params, derive_seed(seed, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let noisy = Sequence {
        frames,
        iso: params.iso,
        frame_rate: clean.frame_rate,
        role: SequenceRole::Noisy,
        synthesis: Some(SynthesisRecord {
            sigma_s_sq: params.sigma_s_sq,
            sigma_r: params.sigma_r,
            seed,
        }),
    };
    let clean = Sequence {
        role: SequenceRole::Clean,
        iso: params.iso,
        ..clean.clone()
    };
    Ok((noisy, clean))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bayer::BayerPattern;

    fn flat(value: f32, h: usize, w: usize) -> BayerFrame {
        BayerFrame::from_normalized(Array2::from_elem((h, w), value), RawMeta::full_range(BayerPattern::Rggb, 12)).unwrap()
    }

    fn moments(f: &BayerFrame) -> (f64, f64) {
        let n = f.data.len() as f64;
        let mean = f.data.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = f.data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, var)
    }

    #[test]
    fn noiseless_params_return_input() {
        let clean = flat(0.37, 4, 6);
        let out = sample_noise(&clean, &NoiseParams::new(0, 0.0, 0.0).unwrap(), 1).unwrap();
        assert_eq!(out, clean);
    }

    #[test]
    fn zero_signal_is_gaussian_only() {
        let p = NoiseParams::new(0, 0.01, 0.02).unwrap();
        let out = sample_noise(&flat(0.0, 1000, 1000), &p, 7).unwrap();
        let (mean, var) = moments(&out);
        assert!(mean.abs() < 1e-4, "mean {mean}");
        assert!((var / 4.0e-4 - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn mid_gray_moments_follow_model() {
        let p = NoiseParams::new(0, 0.01, 0.02).unwrap();
        let out = sample_noise(&flat(0.5, 1000, 1000), &p, 11).unwrap();
        let (mean, var) = moments(&out);
        assert!((mean / 0.5 - 1.0).abs() < 0.02);
        assert!((var / 5.4e-3 - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn unnormalized_input_is_a_state_error() {
        let f = BayerFrame::new(Array2::zeros((2, 2)), RawMeta::full_range(BayerPattern::Rggb, 12)).unwrap();
        assert!(matches!(sample_noise(&f, &NoiseParams::new(0, 0.01, 0.0).unwrap(), 0), Err(Error::State(_))));
    }

    #[test]
    fn large_rate_uses_gaussian_branch() {
        let p = NoiseParams::new(0, 1e-7, 0.0).unwrap();
        // rate 5e6 is far above the switch
        let out = sample_noise(&flat(0.5, 200, 200), &p, 3).unwrap();
        let (mean, var) = moments(&out);
        assert!((mean - 0.5).abs() < 1e-5);
        assert!((var / 5e-8 - 1.0).abs() < 0.05);
    }

    fn stacks(params: &NoiseParams, means: &[f32], frames: usize, seed: u64) -> (Vec<CalibrationStack>, CalibrationStack) {
        let mut k = 0;
        let mut next = || {
            k += 1;
            derive_seed(seed, k)
        };
        let flats = means
            .iter()
            .enumerate()
            .map(|(i, &m)| {
                let fs = (0..frames).map(|_| sample_noise(&flat(m, 32, 32), params, next()).unwrap()).collect();
                CalibrationStack::new(fs, StackKind::FlatField, i as u32).unwrap()
            })
            .collect();
        let bias = (0..frames).map(|_| sample_noise(&flat(0.0, 32, 32), params, next()).unwrap()).collect();
        (flats, CalibrationStack::new(bias, StackKind::Bias, 0).unwrap())
    }

    #[test]
    fn calibration_recovers_synthetic_parameters() {
        let truth = NoiseParams::new(3200, 0.004, 0.02).unwrap();
        let (flats, bias) = stacks(&truth, &[0.2, 0.4, 0.6, 0.8], 100, 5);
        let cal = estimate_noise_params(&flats, &bias, 3200).unwrap();
        assert!((cal.params.sigma_s_sq / 0.004 - 1.0).abs() < 0.05, "{:?}", cal.params);
        assert!((cal.params.sigma_r / 0.02 - 1.0).abs() < 0.05, "{:?}", cal.params);
    }

    #[test]
    fn noiseless_stacks_calibrate_to_zero() {
        let truth = NoiseParams::new(100, 0.0, 0.0).unwrap();
        let (flats, bias) = stacks(&truth, &[0.2, 0.5, 0.8], 3, 1);
        let cal = estimate_noise_params(&flats, &bias, 100).unwrap();
        assert_eq!((cal.params.sigma_s_sq, cal.params.sigma_r), (0.0, 0.0));
    }

    #[test]
    fn two_exposures_are_insufficient() {
        let truth = NoiseParams::new(100, 0.001, 0.01).unwrap();
        let (flats, bias) = stacks(&truth, &[0.2, 0.5], 4, 1);
        assert!(matches!(estimate_noise_params(&flats, &bias, 100), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn single_frame_stack_is_insufficient() {
        let truth = NoiseParams::new(100, 0.001, 0.01).unwrap();
        let (flats, _) = stacks(&truth, &[0.2, 0.5, 0.7], 4, 1);
        let bias = CalibrationStack::new(vec![flat(0.0, 4, 4)], StackKind::Bias, 0).unwrap();
        assert!(matches!(estimate_noise_params(&flats, &bias, 100), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn decreasing_variance_is_a_quality_error() {
        // variance shrinking with intensity cannot come from shot noise
        let meta = RawMeta::full_range(BayerPattern::Rggb, 12);
        let stack = |m: f32, spread: f32, idx: u32| {
            let fs = (0..4)
                .map(|i| BayerFrame::from_normalized(Array2::from_elem((2, 2), m + if i % 2 == 0 { spread } else { -spread }), meta).unwrap())
                .collect();
            CalibrationStack::new(fs, StackKind::FlatField, idx).unwrap()
        };
        let flats = vec![stack(0.2, 0.3, 0), stack(0.5, 0.2, 1), stack(0.8, 0.1, 2)];
        let bias = CalibrationStack::new(vec![flat(0.0, 2, 2), flat(0.0, 2, 2)], StackKind::Bias, 0).unwrap();
        assert!(matches!(estimate_noise_params(&flats, &bias, 1), Err(Error::CalibrationQuality(_))));
    }

    #[test]
    fn bias_estimate_ignores_flat_fields() {
        let truth = NoiseParams::new(100, 0.002, 0.015).unwrap();
        let (flats_a, bias) = stacks(&truth, &[0.2, 0.4, 0.6], 20, 2);
        let other = NoiseParams::new(100, 0.008, 0.015).unwrap();
        let (flats_b, _) = stacks(&other, &[0.3, 0.5, 0.9], 20, 9);
        let a = estimate_noise_params(&flats_a, &bias, 100).unwrap();
        let b = estimate_noise_params(&flats_b, &bias, 100).unwrap();
        assert_eq!(a.params.sigma_r, b.params.sigma_r);
    }

    #[test]
    fn dn_frames_calibrate_in_normalized_units() {
        // Raw codes with black 64 / white 1023: sub-black readings must survive.
        let meta = RawMeta::new(BayerPattern::Rggb, 10, 64.0, 1023.0).unwrap();
        let frames = [60.0f32, 68.0, 60.0, 68.0]
            .iter()
            .map(|&v| BayerFrame::new(Array2::from_elem((2, 2), v), meta).unwrap())
            .collect();
        let bias = CalibrationStack::new(frames, StackKind::Bias, 0).unwrap();
        let s = bias.statistics().unwrap();
        assert!(s.mean.abs() < 1e-12);
        let expected = (4.0f64 / 959.0).powi(2) * 4.0 / 3.0;
        assert!((s.variance - expected).abs() < 1e-15);
    }

    #[test]
    fn synthesis_is_deterministic_and_records_provenance() {
        let clean = Sequence::new(
            (0..7).map(|i| flat(0.1 * i as f32 + 0.1, 8, 8)).collect(),
            1600,
            20.0,
            SequenceRole::Clean,
        )
        .unwrap();
        let p = NoiseParams::new(1600, 0.01, 0.02).unwrap();
        let (a, c) = synthesize_pairs(&clean, &p, 42).unwrap();
        let (b, _) = synthesize_pairs(&clean, &p, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 7);
        assert_eq!(c.frames, clean.frames);
        assert_eq!(a.synthesis.unwrap().seed, 42);
        assert_ne!(a.frames[0].data, a.frames[1].data.mapv(|v| v - 0.1));
        let (z, _) = synthesize_pairs(&clean, &NoiseParams::new(1600, 0.0, 0.0).unwrap(), 42).unwrap();
        assert_eq!(z.frames, clean.frames);
    }

    #[test]
    fn noise_table_roundtrip() {
        let mut t = NoiseTable::default();
        t.insert(NoiseParams::new(1600, 1e-3, 2e-3).unwrap());
        t.insert(NoiseParams::new(25600, 1e-2, 2e-2).unwrap());
        let back = NoiseTable::from_toml(&t.to_toml()).unwrap();
        assert_eq!(back, t);
        assert!(t.to_toml().contains("units = \"normalized\""));
        assert!(back.get(3200).is_err());
    }
}
