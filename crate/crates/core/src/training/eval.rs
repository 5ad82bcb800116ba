//! Whole-sequence inference and scoring in the raw and sRGB domains.

use candle_core::Tensor;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::bayer::{pack, unpack, BayerFrame, PackedFrame, Sequence, SrgbFrame};
use crate::error::{Error, Result};
use crate::isp::{reference_isp_forward, reference_isp_inverse, LearnedIsp, ReferenceIspConfig};
use crate::model::{Domain, RawVideoDenoiser};

use super::data::{srgb_window_tensor, tensor_to_frame, tensor_to_srgb, window_tensor};
use super::metrics::{raw_metrics, srgb_metrics, Metrics};

/// Border margin in packed-plane pixels (twice that at full resolution).
pub const DEFAULT_MARGIN: usize = 8;

/// Raw → sRGB rendering used for display and sRGB scoring.
#[derive(Clone, Copy)]
pub enum Renderer<'a> {
    Learned(&'a LearnedIsp),
    Reference(&'a ReferenceIspConfig),
}

impl Renderer<'_> {
    pub fn render(&self, raw: &BayerFrame) -> Result<SrgbFrame> {
        match self {
            Renderer::Learned(isp) => isp.learned_isp_apply(raw),
            Renderer::Reference(cfg) => reference_isp_forward(raw, cfg),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Renderer::Learned(_) => "learned",
            Renderer::Reference(_) => "reference",
        }
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * (n - 1).max(1);
    let m = i.rem_euclid(period);
    (if m >= n { period - m } else { m }) as usize
}

/// Mirrors each packed plane by `margin` pixels so the mosaic keeps its
/// phase across the border.
pub fn reflect_pad_planes(frame: &BayerFrame, margin: usize) -> Result<BayerFrame> {
    let packed = pack(frame)?;
    let (h, w) = packed.plane_dim();
    let planes = packed
        .planes
        .iter()
        .map(|p| {
            Array2::from_shape_fn((h + 2 * margin, w + 2 * margin), |(y, x)| {
                p[[reflect(y as isize - margin as isize, h), reflect(x as isize - margin as isize, w)]]
            })
        })
        .collect();
    let padded = unpack(&PackedFrame::from_planes(planes, packed.meta, packed.normalized)?)?;
    Ok(BayerFrame {
        normalized: frame.normalized,
        ..padded
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameReport {
    pub index: usize,
    pub raw: Option<Metrics>,
    pub srgb: Option<Metrics>,
    pub noisy_raw: Option<Metrics>,
    pub noisy_srgb: Option<Metrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub frames: Vec<FrameReport>,
    pub mean_raw: Option<Metrics>,
    pub mean_srgb: Option<Metrics>,
    pub noisy_mean_raw: Option<Metrics>,
    pub noisy_mean_srgb: Option<Metrics>,
    /// Reflect margin applied at the borders, in full-resolution pixels.
    pub border_margin: usize,
    pub renderer: String,
}

pub struct Evaluation {
    pub report: EvalReport,
    /// Denoised raw center frames, clamped to `[0, 1]`.
    pub raw: Vec<BayerFrame>,
    pub srgb: Vec<SrgbFrame>,
}

/// Evaluates a model over whole frames, one window per center position.
pub struct Evaluator<'a> {
    pub model: &'a RawVideoDenoiser,
    /// Renders raw-domain outputs; the reference ISP also produces sRGB-domain
    /// inputs and targets.
    pub renderer: Renderer<'a>,
    pub reference: &'a ReferenceIspConfig,
    pub margin: usize,
}

impl<'a> Evaluator<'a> {
    pub fn new(model: &'a RawVideoDenoiser, isp: Option<&'a LearnedIsp>, reference: &'a ReferenceIspConfig) -> Self {
        let renderer = match (model.config().domain, isp) {
            (Domain::Raw, Some(isp)) => Renderer::Learned(isp),
            _ => Renderer::Reference(reference),
        };
        Evaluator {
            model,
            renderer,
            reference,
            margin: DEFAULT_MARGIN,
        }
    }

    fn margin_for(&self, frame: &BayerFrame) -> usize {
        let plane = frame.height().min(frame.width()) / 2;
        self.margin.min(plane.saturating_sub(1))
    }

    /// Denoised center of `window` as a raw frame and its sRGB rendering.
    pub fn denoise_window(&self, window: &[BayerFrame]) -> Result<(BayerFrame, SrgbFrame)> {
        let center = &window[window.len() / 2];
        let m = self.margin_for(center);
        let padded = window.iter().map(|f| reflect_pad_planes(f, m)).collect::<Result<Vec<_>>>()?;
        let dtype = self.model.store().dtype();
        let (h, w) = (center.height(), center.width());
        let crop = |t: &Tensor| -> Result<Tensor> { Ok(t.narrow(2, 2 * m, h)?.narrow(3, 2 * m, w)?) };
        match self.model.config().domain {
            Domain::Raw => {
                let out = self.model.forward(&window_tensor(&padded, dtype)?, center.pattern())?.output;
                let raw = tensor_to_frame(&crop(&out)?.clamp(0.0, 1.0)?, center)?;
                let srgb = self.renderer.render(&raw)?;
                Ok((raw, srgb))
            }
            Domain::Srgb => {
                let rendered = padded
                    .iter()
                    .map(|f| reference_isp_forward(f, self.reference))
                    .collect::<Result<Vec<_>>>()?;
                let out = self.model.forward(&srgb_window_tensor(&rendered, dtype)?, center.pattern())?.output;
                let srgb = tensor_to_srgb(&crop(&out)?)?;
                let raw = reference_isp_inverse(&srgb, self.reference, center.meta)?;
                let raw = raw.with_data(raw.data.mapv(|v| v.clamp(0.0, 1.0)))?;
                Ok((raw, srgb))
            }
        }
    }

    /// Runs every center position with full temporal context and scores it
    /// against `clean` when given.
    pub fn evaluate(&self, noisy: &Sequence, clean: Option<&Sequence>) -> Result<Evaluation> {
        let frames = self.model.config().frames;
        let n = frames / 2;
        noisy.validate()?;
        noisy.require_window(n)?;
        noisy.frames[0].require_normalized()?;
        if let Some(c) = clean {
            c.validate()?;
            if c.len() != noisy.len() || c.dim() != noisy.dim() {
                return Err(Error::Consistency("clean and noisy sequences differ in length or size".into()));
            }
        }
        let mut reports = Vec::new();
        let mut raw_out = Vec::new();
        let mut srgb_out = Vec::new();
        for t in n..noisy.len() - n {
            let (raw, srgb) = self.denoise_window(&noisy.frames[t - n..=t + n])?;
            let mut r = FrameReport {
                index: t,
                raw: None,
                srgb: None,
                noisy_raw: None,
                noisy_srgb: None,
            };
            if let Some(c) = clean {
                let gt = &c.frames[t];
                let gt_srgb = self.renderer.render(gt)?;
                let noisy_t = &noisy.frames[t];
                r.raw = Some(raw_metrics(&raw, gt)?);
                r.srgb = Some(srgb_metrics(&srgb, &gt_srgb)?);
                r.noisy_raw = Some(raw_metrics(noisy_t, gt)?);
                let clamped = noisy_t.with_data(noisy_t.data.mapv(|v| v.clamp(0.0, 1.0)))?;
                r.noisy_srgb = Some(srgb_metrics(&self.renderer.render(&clamped)?, &gt_srgb)?);
            }
            reports.push(r);
            raw_out.push(raw);
            srgb_out.push(srgb);
        }
        let mean = |f: fn(&FrameReport) -> Option<Metrics>| -> Option<Metrics> {
            let v: Vec<Metrics> = reports.iter().filter_map(f).collect();
            Metrics::mean(&v)
        };
        let report = EvalReport {
            mean_raw: mean(|r| r.raw),
            mean_srgb: mean(|r| r.srgb),
            noisy_mean_raw: mean(|r| r.noisy_raw),
            noisy_mean_srgb: mean(|r| r.noisy_srgb),
            frames: reports,
            border_margin: 2 * self.margin_for(&noisy.frames[0]),
            renderer: self.renderer.name().to_string(),
        };
        Ok(Evaluation {
            report,
            raw: raw_out,
            srgb: srgb_out,
        })
    }

    /// Mean `|Ô1 − Ô2|` over center positions, where the two outputs come
    /// from independent noisy realizations `a` and `b` of one clip.
    pub fn temporal_discrepancy(&self, a: &Sequence, b: &Sequence) -> Result<f64> {
        if a.len() != b.len() || a.dim() != b.dim() {
            return Err(Error::Consistency("realizations differ in length or size".into()));
        }
        let n = self.model.config().frames / 2;
        a.require_window(n)?;
        let mut total = 0.0;
        let mut count = 0usize;
        for t in n..a.len() - n {
            let (oa, _) = self.denoise_window(&a.frames[t - n..=t + n])?;
            let (ob, _) = self.denoise_window(&b.frames[t - n..=t + n])?;
            total += oa.data.iter().zip(ob.data.iter()).map(|(&x, &y)| (x as f64 - y as f64).abs()).sum::<f64>()
                / oa.data.len() as f64;
            count += 1;
        }
        Ok(total / count as f64)
    }
}

pub fn evaluate_sequence(
    model: &RawVideoDenoiser,
    isp: Option<&LearnedIsp>,
    reference: &ReferenceIspConfig,
    noisy: &Sequence,
    clean: Option<&Sequence>,
) -> Result<Evaluation> {
    Evaluator::new(model, isp, reference).evaluate(noisy, clean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bayer::{BayerPattern, RawMeta, SequenceRole};
    use crate::model::ModelConfig;
    use candle_core::DType;

    #[test]
    fn reflect_indices() {
        let v: Vec<usize> = (-3..6).map(|i| reflect(i, 4)).collect();
        assert_eq!(v, vec![3, 2, 1, 0, 1, 2, 3, 2, 1]);
    }

    #[test]
    fn padding_keeps_phase_and_interior() {
        let meta = RawMeta::full_range(BayerPattern::Gbrg, 12);
        let data = Array2::from_shape_fn((6, 8), |(y, x)| (y * 8 + x) as f32 / 48.0);
        let f = BayerFrame::from_normalized(data, meta).unwrap();
        let p = reflect_pad_planes(&f, 2).unwrap();
        assert_eq!(p.data.dim(), (14, 16));
        assert_eq!(p.crop(4, 4, 6, 8).unwrap(), f);
        // the padded pixel above (0, 0) mirrors plane row 1, i.e. mosaic row 2
        assert_eq!(p.data[[2, 4]], f.data[[2, 0]]);
    }

    #[test]
    fn identity_model_on_clean_input_hits_the_cap() {
        let cfg = ModelConfig {
            channels: 2,
            levels: 2,
            res_blocks: 1,
            predenoise_guided: false,
            nonlocal: false,
            ..ModelConfig::default()
        };
        let model = RawVideoDenoiser::new(cfg, 0, DType::F32, None).unwrap();
        let meta = RawMeta::full_range(BayerPattern::Rggb, 12);
        let frames = (0..4)
            .map(|i| BayerFrame::from_normalized(Array2::from_shape_fn((24, 24), |(y, x)| ((y + x + i) % 7) as f32 / 7.0), meta).unwrap())
            .collect();
        let seq = Sequence::new(frames, 100, 30.0, SequenceRole::Clean).unwrap();
        let reference = ReferenceIspConfig::default();
        let ev = evaluate_sequence(&model, None, &reference, &seq, Some(&seq)).unwrap();
        assert_eq!(ev.raw.len(), 2);
        let m = ev.report.mean_raw.unwrap();
        assert_eq!((m.psnr, m.ssim), (99.0, 1.0));
        let ev = evaluate_sequence(&model, None, &reference, &seq, None).unwrap();
        assert!(ev.report.mean_raw.is_none() && ev.srgb.len() == 2);
    }
}
