//! The cumulative ablation ladder: sRGB input, raw input, packing,
//! pre-denoised guidance, non-local attention.

use serde::{Deserialize, Serialize};

use crate::bayer::Sequence;
use crate::error::{Error, Result};
use crate::isp::LearnedIsp;
use crate::model::{Domain, ModelConfig};
use crate::predenoise::Predenoiser;

use super::eval::{Evaluator, Renderer, DEFAULT_MARGIN};
use super::{freeze_isp, freeze_predenoiser, train, Dependencies, TrainConfig, TrainingSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub raw_domain: bool,
    pub packing: bool,
    pub predenoise: bool,
    pub nonlocal: bool,
}

impl AblationFlags {
    pub fn name(&self) -> String {
        let mut parts = vec![if self.raw_domain { "raw" } else { "srgb" }];
        if self.packing {
            parts.push("packing");
        }
        if self.predenoise {
            parts.push("predenoise");
        }
        if self.nonlocal {
            parts.push("nonlocal");
        }
        parts.join("+")
    }

    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            domain: if self.raw_domain { Domain::Raw } else { Domain::Srgb },
            packing: self.packing,
            predenoise_guided: self.predenoise,
            nonlocal: self.nonlocal,
            ..*base
        }
    }
}

/// Each row switches on one more component than the previous.
pub fn ladder() -> [AblationFlags; 5] {
    let f = |raw_domain, packing, predenoise, nonlocal| AblationFlags {
        raw_domain,
        packing,
        predenoise,
        nonlocal,
    };
    [
        f(false, false, false, false),
        f(true, false, false, false),
        f(true, true, false, false),
        f(true, true, true, false),
        f(true, true, true, true),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub config: String,
    pub raw_domain: bool,
    pub packing: bool,
    pub predenoise: bool,
    pub nonlocal: bool,
    /// Feature width of one stream.
    pub stream_channels: usize,
    pub raw_psnr: f64,
    pub raw_ssim: f64,
    pub srgb_psnr: f64,
    pub srgb_ssim: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::Config(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let rows = r
            .deserialize()
            .collect::<std::result::Result<Vec<AblationRow>, _>>()
            .map_err(|e| Error::Format {
                path: "ablation report".into(),
                msg: e.to_string(),
            })?;
        Ok(AblationReport { rows })
    }

    /// Fixed-width text table.
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<34} {:>4} {:>9} {:>8} {:>9} {:>8}\n",
            "config", "C", "raw PSNR", "raw SSIM", "sRGB PSNR", "sRGB SSIM"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:<34} {:>4} {:>9.3} {:>8.4} {:>9.3} {:>8.4}\n",
                r.config, r.stream_channels, r.raw_psnr, r.raw_ssim, r.srgb_psnr, r.srgb_ssim
            ));
        }
        s
    }
}

/// Parses a CSV report and renders it as a table.
pub fn print_table(csv_text: &str) -> Result<String> {
    Ok(AblationReport::from_csv(csv_text)?.to_table())
}

/// Frozen components shared by the ablation rows.
pub struct AblationInputs<'a> {
    pub predenoiser: &'a Predenoiser,
    pub isp: &'a LearnedIsp,
    /// Held-out evaluation clip.
    pub noisy: &'a Sequence,
    pub clean: &'a Sequence,
}

/// Trains and evaluates every ladder row with `base`'s schedule.
pub fn run_ablation(base: &TrainConfig, set: &TrainingSet, inputs: &AblationInputs) -> Result<AblationReport> {
    let mut report = AblationReport::default();
    for flags in ladder() {
        let mut config = base.clone();
        config.model = flags.apply(&base.model);
        log::info!("ablation row {}", flags.name());
        let deps = Dependencies {
            predenoiser: if flags.predenoise { Some(freeze_predenoiser(inputs.predenoiser)?) } else { None },
            isp: if flags.raw_domain { Some(freeze_isp(inputs.isp)?) } else { None },
            init: None,
        };
        let outcome = train(&config, set, deps, None)?;
        let final_loss = outcome.final_loss;
        let state = outcome.into_state()?;
        // sRGB scores of every row use the same learned ISP rendering.
        let ev = Evaluator {
            model: &state.denoiser,
            renderer: Renderer::Learned(inputs.isp),
            reference: &config.reference_isp,
            margin: DEFAULT_MARGIN,
        }
        .evaluate(inputs.noisy, Some(inputs.clean))?;
        let (raw, srgb) = (
            ev.report.mean_raw.expect("clean sequence given"),
            ev.report.mean_srgb.expect("clean sequence given"),
        );
        report.rows.push(AblationRow {
            config: flags.name(),
            raw_domain: flags.raw_domain,
            packing: flags.packing,
            predenoise: flags.predenoise,
            nonlocal: flags.nonlocal,
            stream_channels: config.model.stream_width(),
            raw_psnr: raw.psnr,
            raw_ssim: raw.ssim,
            srgb_psnr: srgb.psnr,
            srgb_ssim: srgb.ssim,
            final_loss,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ladder_is_cumulative() {
        let rows = ladder();
        assert_eq!(rows.len(), 5);
        assert_eq!(rows[4].name(), "raw+packing+predenoise+nonlocal");
        let unpacked = rows[1].apply(&ModelConfig::default());
        assert_eq!(unpacked.stream_width(), 64);
        for r in rows {
            r.apply(&ModelConfig::default()).validate().unwrap();
        }
    }

    #[test]
    fn csv_roundtrip_and_table() {
        let report = AblationReport {
            rows: ladder()
                .iter()
                .map(|f| AblationRow {
                    config: f.name(),
                    raw_domain: f.raw_domain,
                    packing: f.packing,
                    predenoise: f.predenoise,
                    nonlocal: f.nonlocal,
                    stream_channels: 16,
                    raw_psnr: 30.5,
                    raw_ssim: 0.9,
                    srgb_psnr: 28.25,
                    srgb_ssim: 0.85,
                    final_loss: 0.01,
                })
                .collect(),
        };
        let csv = report.to_csv().unwrap();
        assert_eq!(AblationReport::from_csv(&csv).unwrap(), report);
        let table = print_table(&csv).unwrap();
        assert_eq!(table.lines().count(), 6);
        assert!(print_table("config,raw_psnr\nx,notanumber\n").is_err());
    }
}
