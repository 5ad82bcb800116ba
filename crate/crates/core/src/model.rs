//! The full video denoiser: feature extraction, guided alignment, non-local
//! attention, temporal fusion per stream, spatial fusion across streams.
//!
//! In packed mode every color plane is its own stream and the four streams
//! share all per-stream weights; they are batched along the leading axis.

use std::path::Path;

use candle_core::{DType, Tensor, TensorId};
use serde::{Deserialize, Serialize};

use crate::align::{AlignTrace, FeatureExtractor, FeaturePyramid, PyramidAligner};
use crate::attention::NonlocalAttention;
use crate::bayer::BayerPattern;
use crate::error::{Error, Result};
use crate::fusion::{OutputLayout, SpatialFusion, TemporalFusion};
use crate::nn::layers::{crop_hw, pack_tensor, pad_to_multiple, unpack_tensor};
use crate::nn::{Checkpoint, ParamStore};
use crate::predenoise::{Predenoiser, UNetSpec};

pub const MODEL_PREFIX: &str = "model.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Raw,
    Srgb,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Feature width C per packed plane.
    pub channels: usize,
    pub levels: usize,
    pub res_blocks: usize,
    /// Window length T = 2N + 1.
    pub frames: usize,
    pub domain: Domain,
    pub packing: bool,
    pub predenoise_guided: bool,
    pub nonlocal: bool,
    pub cc_passes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 16,
            levels: 3,
            res_blocks: 10,
            frames: 3,
            domain: Domain::Raw,
            packing: true,
            predenoise_guided: true,
            nonlocal: true,
            cc_passes: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.levels == 0 || self.cc_passes == 0 {
            return Err(Error::Config(format!("invalid model sizes {self:?}")));
        }
        if self.frames % 2 == 0 {
            return Err(Error::Config(format!("frames must be odd, got {}", self.frames)));
        }
        if self.domain == Domain::Srgb && self.packing {
            return Err(Error::Config("packing applies to raw-domain input only".into()));
        }
        if self.predenoise_guided && !(self.packing && self.domain == Domain::Raw) {
            return Err(Error::Config("pre-denoised guidance needs packed raw input".into()));
        }
        Ok(())
    }

    pub fn input_channels(&self) -> usize {
        match self.domain {
            Domain::Raw => 1,
            Domain::Srgb => 3,
        }
    }

    /// Streams per frame: four planes when packed, else one.
    pub fn planes(&self) -> usize {
        if self.packing {
            4
        } else {
            1
        }
    }

    /// Feature width of one stream; the fused width is always `4C`.
    pub fn stream_width(&self) -> usize {
        4 * self.channels / self.planes()
    }

    pub fn center(&self) -> usize {
        self.frames / 2
    }

    fn plane_multiple(&self) -> usize {
        (1usize << (self.levels - 1)).max(2)
    }
}

/// Tensor ids captured during one forward pass.
#[derive(Debug, Clone, Default)]
pub struct ForwardTrace {
    pub align: AlignTrace,
    pub noisy_features: Vec<TensorId>,
    pub guide_features: Vec<TensorId>,
    pub center_guide_features: Vec<TensorId>,
}

pub struct ModelOutput {
    /// Denoised center frame, same layout as one input frame.
    pub output: Tensor,
    pub noise: Tensor,
}

pub struct RawVideoDenoiser {
    config: ModelConfig,
    store: ParamStore,
    extractor: FeatureExtractor,
    aligner: PyramidAligner,
    attention: Option<NonlocalAttention>,
    temporal: TemporalFusion,
    spatial: SpatialFusion,
    predenoiser: Option<Predenoiser>,
}

impl RawVideoDenoiser {
    pub fn new(config: ModelConfig, seed: u64, dtype: DType, predenoiser: Option<Predenoiser>) -> Result<Self> {
        Self::with_store(ParamStore::new(seed, dtype), config, predenoiser)
    }

    pub fn with_store(mut store: ParamStore, config: ModelConfig, predenoiser: Option<Predenoiser>) -> Result<Self> {
        config.validate()?;
        let predenoiser = match (config.predenoise_guided, predenoiser) {
            (true, None) => return Err(Error::Dependency("guided alignment needs a trained pre-denoiser".into())),
            (true, Some(p)) if !p.is_frozen() => return Err(Error::State("the pre-denoiser must be frozen".into())),
            (true, p) => p,
            (false, _) => None,
        };
        let cs = config.stream_width();
        let out_channels = if config.packing { 4 } else { config.input_channels() };
        let s = &mut store;
        Ok(RawVideoDenoiser {
            extractor: FeatureExtractor::new(s, "extract", config.input_channels(), cs, config.levels)?,
            aligner: PyramidAligner::new(s, "align", cs, config.levels)?,
            attention: if config.nonlocal {
                Some(NonlocalAttention::new(s, "attention", cs, config.cc_passes)?)
            } else {
                None
            },
            temporal: TemporalFusion::new(s, "temporal", cs, config.frames)?,
            spatial: SpatialFusion::new(s, "spatial", 4 * config.channels, config.res_blocks, out_channels)?,
            config,
            store,
            predenoiser,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn predenoiser(&self) -> Option<&Predenoiser> {
        self.predenoiser.as_ref()
    }

    pub fn spatial_fusion(&self) -> &SpatialFusion {
        &self.spatial
    }

    pub fn extractor(&self) -> &FeatureExtractor {
        &self.extractor
    }

    pub fn aligner(&self) -> &PyramidAligner {
        &self.aligner
    }

    pub fn attention(&self) -> Option<&NonlocalAttention> {
        self.attention.as_ref()
    }

    pub fn temporal_fusion(&self) -> &TemporalFusion {
        &self.temporal
    }

    fn layout(&self, pattern: BayerPattern) -> OutputLayout {
        match (self.config.packing, self.config.domain) {
            (true, _) => OutputLayout::Packed(pattern),
            (false, Domain::Raw) => OutputLayout::Mosaic,
            (false, Domain::Srgb) => OutputLayout::Rgb,
        }
    }

    /// `noisy` is `B×T×c×2H×2W` (c = 1 for raw, 3 for sRGB).
    pub fn forward(&self, noisy: &Tensor, pattern: BayerPattern) -> Result<ModelOutput> {
        self.forward_impl(noisy, pattern, None)
    }

    pub fn forward_traced(&self, noisy: &Tensor, pattern: BayerPattern, trace: &mut ForwardTrace) -> Result<ModelOutput> {
        self.forward_impl(noisy, pattern, Some(trace))
    }

    fn forward_impl(&self, noisy: &Tensor, pattern: BayerPattern, mut trace: Option<&mut ForwardTrace>) -> Result<ModelOutput> {
        let cfg = &self.config;
        let (b, t, c, hh, ww) = noisy.dims5()?;
        if t != cfg.frames || c != cfg.input_channels() {
            return Err(Error::Dimension(format!(
                "model expects B×{}×{}×H×W input, got {:?}",
                cfg.frames,
                cfg.input_channels(),
                noisy.dims()
            )));
        }
        if hh % 2 != 0 || ww % 2 != 0 {
            return Err(Error::Dimension(format!("frame size {hh}x{ww} is not even")));
        }
        let flat = noisy.reshape((b * t, c, hh, ww))?;
        let m = cfg.plane_multiple();
        // Padding happens on packed planes so the mosaic keeps its phase.
        let (packed, frames) = match cfg.domain {
            Domain::Raw => {
                let (planes, _) = pad_to_multiple(&pack_tensor(&flat, pattern)?, m)?;
                let mosaic = unpack_tensor(&planes, pattern)?;
                (Some(planes), mosaic)
            }
            Domain::Srgb => (None, pad_to_multiple(&flat, 2 * m)?.0),
        };
        let (hp, wp) = (frames.dim(2)?, frames.dim(3)?);
        let center = frames
            .reshape((b, t, c, hp, wp))?
            .narrow(1, cfg.center(), 1)?
            .squeeze(1)?;

        let p = cfg.planes();
        let s = b * p;
        let to_streams = |x: &Tensor| -> Result<Tensor> {
            if cfg.packing {
                let (_, _, h, w) = x.dims4()?;
                Ok(x.reshape((b, t, 4, h, w))?
                    .permute((0, 2, 1, 3, 4))?
                    .reshape((b * 4 * t, 1, h, w))?)
            } else {
                Ok(x.clone())
            }
        };
        let streams = to_streams(if cfg.packing { packed.as_ref().expect("raw domain") } else { &frames })?;
        let noisy_pyr = self.extractor.forward(&streams)?;
        let guide_pyr = match &self.predenoiser {
            Some(pd) => {
                let denoised = pd.forward_packed(packed.as_ref().expect("guided implies raw"))?.detach();
                self.extractor.forward(&to_streams(&denoised)?)?
            }
            None => noisy_pyr.clone(),
        };
        let center_noisy = center_pyramid(&noisy_pyr, s, t, cfg.center())?;
        let center_guide = center_pyramid(&guide_pyr, s, t, cfg.center())?;
        if let Some(tr) = trace.as_deref_mut() {
            tr.noisy_features = noisy_pyr.levels.iter().map(|l| l.id()).collect();
            tr.guide_features = guide_pyr.levels.iter().map(|l| l.id()).collect();
            tr.center_guide_features = center_guide.levels.iter().map(|l| l.id()).collect();
        }
        let aligned = self.aligner.align(
            &noisy_pyr,
            &guide_pyr,
            &center_noisy,
            &center_guide,
            trace.map(|tr| &mut tr.align),
        )?;
        let (_, cs, h, w) = aligned.dims4()?;
        let mut stack = aligned.reshape((s, t, cs, h, w))?;
        if let Some(att) = &self.attention {
            stack = att.forward(&stack)?;
        }
        let fused = self.temporal.forward(&stack)?.reshape((b, p * cs, h, w))?;
        let (out, noise) = self.spatial.forward(&fused, &center, self.layout(pattern))?;
        Ok(ModelOutput {
            output: crop_hw(&out, (hh, ww))?,
            noise: crop_hw(&noise, (hh, ww))?,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(serde_json::json!({
            "kind": "rawvid",
            "config": self.config,
            "predenoiser": self.predenoiser.as_ref().map(|p| p.spec()),
        }));
        ck.tensors = self.store.tensors(MODEL_PREFIX);
        if let Some(p) = &self.predenoiser {
            ck.tensors.extend(p.store().tensors(""));
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint, dtype: DType) -> Result<Self> {
        if ck.header.get("kind").and_then(|k| k.as_str()) != Some("rawvid") {
            return Err(Error::Checkpoint("checkpoint does not hold a video denoiser".into()));
        }
        let config: ModelConfig = serde_json::from_value(ck.header["config"].clone()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let pd_spec: Option<UNetSpec> =
            serde_json::from_value(ck.header["predenoiser"].clone()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let predenoiser = match pd_spec {
            Some(spec) => {
                let p = Predenoiser::with_store(ParamStore::new(0, dtype).frozen(), spec)?;
                p.store().load_tensors(&ck.tensors, "")?;
                Some(p)
            }
            None => None,
        };
        let model = Self::with_store(ParamStore::new(0, dtype), config, predenoiser)?;
        model.store.load_tensors(&ck.tensors, MODEL_PREFIX)?;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, DType::F32)
    }
}

/// Center-frame pyramid tiled over the window so it lines up with `pyr`
/// (batch order stream-major, frame-minor).
fn center_pyramid(pyr: &FeaturePyramid, streams: usize, frames: usize, center: usize) -> Result<FeaturePyramid> {
    let levels = pyr
        .levels
        .iter()
        .map(|l| {
            let (_, c, h, w) = l.dims4()?;
            Ok(l.reshape((streams, frames, c, h, w))?
                .narrow(1, center, 1)?
                .broadcast_as((streams, frames, c, h, w))?
                .reshape((streams * frames, c, h, w))?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FeaturePyramid { levels, orig: pyr.orig })
}
