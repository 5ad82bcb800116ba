//! Training scenes, procedural clean video, and window/patch sampling.

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bayer::{BayerFrame, BayerPattern, RawMeta, Sequence, SequenceRole, SrgbFrame};
use crate::error::{Error, Result};
use crate::noise::{derive_seed, sample_noise, NoiseParams};

/// A clean sequence with zero or more captured noisy realizations of it.
/// Without captured realizations, noise is synthesized per step.
#[derive(Debug, Clone)]
pub struct Scene {
    pub clean: Sequence,
    pub noisy: Vec<Sequence>,
}

impl Scene {
    pub fn synthetic(clean: Sequence) -> Self {
        Scene { clean, noisy: Vec::new() }
    }

    pub fn validate(&self) -> Result<()> {
        self.clean.validate()?;
        for n in &self.noisy {
            n.validate()?;
            if n.len() != self.clean.len() || n.dim() != self.clean.dim() {
                return Err(Error::Consistency("noisy realization does not match its clean sequence".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub scenes: Vec<Scene>,
    /// Needed when a scene has no captured noisy realizations.
    pub noise: Option<NoiseParams>,
}

impl TrainingSet {
    pub fn validate(&self, frames: usize) -> Result<()> {
        if self.scenes.is_empty() {
            return Err(Error::InsufficientData("training set has no scenes".into()));
        }
        for s in &self.scenes {
            s.validate()?;
            s.clean.require_window(frames / 2)?;
            s.clean.frames[0].require_normalized()?;
        }
        Ok(())
    }
}

/// Procedural clean-video parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub pattern: BayerPattern,
    pub bit_depth: u32,
    /// Per-frame global translation in full-resolution pixels `(dy, dx)`.
    pub motion: (i32, i32),
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            height: 64,
            width: 64,
            frames: 7,
            pattern: BayerPattern::Rggb,
            bit_depth: 12,
            motion: (1, 2),
            seed: 0,
        }
    }
}

/// Smooth color canvas: gradients, soft blobs, gratings and a few flat
/// rectangles, values within `[0.03, 0.92]`.
pub fn render_canvas(height: usize, width: usize, seed: u64) -> Array3<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut canvas = Array3::<f64>::zeros((3, height, width));
    let (hf, wf) = (height as f64, width as f64);
    for c in 0..3 {
        let (gy, gx, g0) = (rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(0.2..0.5));
        for y in 0..height {
            for x in 0..width {
                canvas[[c, y, x]] = g0 + gy * y as f64 / hf + gx * x as f64 / wf;
            }
        }
    }
    for _ in 0..6 {
        let (cy, cx) = (rng.random_range(0.0..hf), rng.random_range(0.0..wf));
        let r = rng.random_range(3.0..hf.min(wf) / 4.0 + 4.0);
        let amp: [f64; 3] = [rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)];
        for y in 0..height {
            for x in 0..width {
                let d2 = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)) / (2.0 * r * r);
                for c in 0..3 {
                    canvas[[c, y, x]] += amp[c] * (-d2).exp();
                }
            }
        }
    }
    for _ in 0..2 {
        let (fy, fx) = (rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6));
        let amp = rng.random_range(0.03..0.1);
        for y in 0..height {
            for x in 0..width {
                let v = amp * (fy * y as f64 + fx * x as f64).sin();
                for c in 0..3 {
                    canvas[[c, y, x]] += v;
                }
            }
        }
    }
    for _ in 0..3 {
        let (y0, x0) = (rng.random_range(0..height), rng.random_range(0..width));
        let (h, w) = (rng.random_range(4..height / 3 + 5), rng.random_range(4..width / 3 + 5));
        let level: [f64; 3] = [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)];
        for y in y0..(y0 + h).min(height) {
            for x in x0..(x0 + w).min(width) {
                for c in 0..3 {
                    canvas[[c, y, x]] = level[c];
                }
            }
        }
    }
    canvas.mapv(|v| v.clamp(0.03, 0.92) as f32)
}

/// Samples the channel each Bayer site measures.
pub fn mosaic(rgb: &Array3<f32>, meta: RawMeta) -> Result<BayerFrame> {
    let (_, h, w) = rgb.dim();
    let data = Array2::from_shape_fn((h, w), |(y, x)| rgb[[meta.pattern.color_at(y, x).rgb_index(), y, x]]);
    BayerFrame::from_normalized(data, meta)
}

/// Clean, normalized raw video of a canvas translating by `motion` per frame.
pub fn synthetic_clean_sequence(spec: &SceneSpec) -> Result<Sequence> {
    if spec.height % 2 != 0 || spec.width % 2 != 0 || spec.frames == 0 {
        return Err(Error::Config(format!("invalid scene spec {spec:?}")));
    }
    let (my, mx) = (spec.motion.0.unsigned_abs() as usize, spec.motion.1.unsigned_abs() as usize);
    let span = spec.frames - 1;
    let canvas = render_canvas(spec.height + my * span, spec.width + mx * span, spec.seed);
    let meta = RawMeta::full_range(spec.pattern, spec.bit_depth);
    let frames = (0..spec.frames)
        .map(|t| {
            let oy = if spec.motion.0 >= 0 { t * my } else { (span - t) * my };
            let ox = if spec.motion.1 >= 0 { t * mx } else { (span - t) * mx };
            let view = canvas.slice(ndarray::s![.., oy..oy + spec.height, ox..ox + spec.width]).to_owned();
            mosaic(&view, meta)
        })
        .collect::<Result<Vec<_>>>()?;
    Sequence::new(frames, 100, 30.0, SequenceRole::Clean)
}

/// Frame indices of the two windows supervised by the same clean frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalPairs {
    /// Two independent noise realizations of the window around `t`.
    #[default]
    Realizations,
    /// Consecutive frames `t−N..t+N+1`: the first and the last `2N+1`.
    ConsecutiveWindows,
}

/// One sampled training example: window frames cropped to a patch.
#[derive(Debug, Clone)]
pub struct Sample {
    pub noisy_a: Vec<BayerFrame>,
    pub noisy_b: Option<Vec<BayerFrame>>,
    pub clean: BayerFrame,
    pub center: usize,
}

pub struct Sampler<'a> {
    set: &'a TrainingSet,
    frames: usize,
    patch: usize,
    rng: ChaCha8Rng,
    noise_seed: u64,
    draws: u64,
}

impl<'a> Sampler<'a> {
    pub fn new(set: &'a TrainingSet, frames: usize, patch: usize, seed: u64) -> Result<Self> {
        set.validate(frames)?;
        if patch == 0 || patch % 2 != 0 {
            return Err(Error::Config(format!("patch size must be even and positive, got {patch}")));
        }
        for s in &set.scenes {
            let (h, w) = s.clean.dim();
            if h < patch || w < patch {
                return Err(Error::Config(format!("patch {patch} exceeds scene size {h}x{w}")));
            }
        }
        Ok(Sampler {
            set,
            frames,
            patch,
            rng: ChaCha8Rng::seed_from_u64(seed),
            noise_seed: derive_seed(seed, u64::MAX),
            draws: 0,
        })
    }

    fn crop_origin(&mut self, h: usize, w: usize) -> (usize, usize) {
        let top = 2 * self.rng.random_range(0..=(h - self.patch) / 2);
        let left = 2 * self.rng.random_range(0..=(w - self.patch) / 2);
        (top, left)
    }

    fn noisy(&mut self, clean: &BayerFrame) -> Result<BayerFrame> {
        let params = self
            .set
            .noise
            .as_ref()
            .ok_or_else(|| Error::Config("scene has no captured noisy sequences and no noise parameters were given".into()))?;
        self.draws += 1;
        sample_noise(clean, params, derive_seed(self.noise_seed, self.draws))
    }

    /// Single frame pair for the pre-denoiser.
    pub fn frame_pair(&mut self) -> Result<(BayerFrame, BayerFrame)> {
        let si = self.rng.random_range(0..self.set.scenes.len());
        let scene = &self.set.scenes[si];
        let t = self.rng.random_range(0..scene.clean.len());
        let (h, w) = scene.clean.dim();
        let (top, left) = self.crop_origin(h, w);
        let clean = scene.clean.frames[t].crop(top, left, self.patch, self.patch)?;
        let noisy = if scene.noisy.is_empty() {
            self.noisy(&clean)?
        } else {
            let r = self.rng.random_range(0..scene.noisy.len());
            scene.noisy[r].frames[t].crop(top, left, self.patch, self.patch)?
        };
        Ok((noisy, clean))
    }

    /// Clean patch only (learned-ISP targets are computed from it).
    pub fn clean_patch(&mut self) -> Result<BayerFrame> {
        let si = self.rng.random_range(0..self.set.scenes.len());
        let scene = &self.set.scenes[si];
        let t = self.rng.random_range(0..scene.clean.len());
        let (h, w) = scene.clean.dim();
        let (top, left) = self.crop_origin(h, w);
        scene.clean.frames[t].crop(top, left, self.patch, self.patch)
    }

    /// A window around a random center, optionally with a second window for
    /// the temporal loss.
    pub fn window(&mut self, pairs: Option<TemporalPairs>) -> Result<Sample> {
        let n = self.frames / 2;
        let si = self.rng.random_range(0..self.set.scenes.len());
        let scene = &self.set.scenes[si];
        let len = scene.clean.len();
        let extra = usize::from(pairs == Some(TemporalPairs::ConsecutiveWindows));
        if len < self.frames + extra {
            return Err(Error::InsufficientData(format!(
                "scene of {len} frames cannot supply a {}-frame window",
                self.frames + extra
            )));
        }
        let t = self.rng.random_range(n..len - n - extra);
        let (h, w) = scene.clean.dim();
        let (top, left) = self.crop_origin(h, w);
        let patch = self.patch;
        let crop = |f: &BayerFrame| f.crop(top, left, patch, patch);
        let clean: Vec<BayerFrame> = (t - n..=t + n + extra)
            .map(|i| crop(&scene.clean.frames[i]))
            .collect::<Result<_>>()?;
        let realization = |s: &mut Self, r: Option<usize>, range: std::ops::RangeInclusive<usize>| -> Result<Vec<BayerFrame>> {
            range
                .map(|i| match r {
                    Some(r) => crop(&scene.noisy[r].frames[i]),
                    None => s.noisy(&clean[i - (t - n)]),
                })
                .collect()
        };
        let captured = !scene.noisy.is_empty();
        let (ra, rb) = if captured {
            let ra = self.rng.random_range(0..scene.noisy.len());
            let rb = if scene.noisy.len() > 1 {
                (ra + 1 + self.rng.random_range(0..scene.noisy.len() - 1)) % scene.noisy.len()
            } else {
                ra
            };
            (Some(ra), Some(rb))
        } else {
            (None, None)
        };
        let (noisy_a, noisy_b) = match pairs {
            None => (realization(self, ra, t - n..=t + n)?, None),
            Some(TemporalPairs::Realizations) => {
                if captured && scene.noisy.len() < 2 {
                    return Err(Error::InsufficientData("realization pairs need two captured noisy sequences".into()));
                }
                let a = realization(self, ra, t - n..=t + n)?;
                let b = realization(self, rb, t - n..=t + n)?;
                (a, Some(b))
            }
            Some(TemporalPairs::ConsecutiveWindows) => {
                let all = realization(self, ra, t - n..=t + n + 1)?;
                (all[..self.frames].to_vec(), Some(all[1..].to_vec()))
            }
        };
        Ok(Sample {
            noisy_a,
            noisy_b,
            clean: clean[n].clone(),
            center: t,
        })
    }
}

/// Frames → `1×T×1×H×W`.
pub fn window_tensor(frames: &[BayerFrame], dtype: DType) -> Result<Tensor> {
    let (h, w) = frames[0].data.dim();
    let mut v = Vec::with_capacity(frames.len() * h * w);
    for f in frames {
        v.extend(f.data.iter().copied());
    }
    Ok(Tensor::from_vec(v, (1, frames.len(), 1, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

/// sRGB frames → `1×T×3×H×W`.
pub fn srgb_window_tensor(frames: &[SrgbFrame], dtype: DType) -> Result<Tensor> {
    let (_, h, w) = frames[0].data.dim();
    let mut v = Vec::with_capacity(frames.len() * 3 * h * w);
    for f in frames {
        v.extend(f.data.iter().copied());
    }
    Ok(Tensor::from_vec(v, (1, frames.len(), 3, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn frame_tensor(frame: &BayerFrame, dtype: DType) -> Result<Tensor> {
    let (h, w) = frame.data.dim();
    Ok(Tensor::from_vec(frame.data.iter().copied().collect::<Vec<_>>(), (1, 1, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn srgb_tensor(frame: &SrgbFrame, dtype: DType) -> Result<Tensor> {
    let (_, h, w) = frame.data.dim();
    Ok(Tensor::from_vec(frame.data.iter().copied().collect::<Vec<_>>(), (1, 3, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

/// `1×1×H×W` (or `H×W`) tensor back into a frame with `like`'s metadata.
pub fn tensor_to_frame(t: &Tensor, like: &BayerFrame) -> Result<BayerFrame> {
    let dims = t.dims();
    let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
    let v: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    let data = Array2::from_shape_vec((h, w), v).map_err(|e| Error::Dimension(e.to_string()))?;
    Ok(BayerFrame {
        data,
        meta: like.meta,
        normalized: true,
    })
}

pub fn tensor_to_srgb(t: &Tensor) -> Result<SrgbFrame> {
    let dims = t.dims();
    let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
    let v: Vec<f32> = t.to_dtype(DType::F32)?.clamp(0.0, 1.0)?.flatten_all()?.to_vec1()?;
    SrgbFrame::new(Array3::from_shape_vec((3, h, w), v).map_err(|e| Error::Dimension(e.to_string()))?)
}
