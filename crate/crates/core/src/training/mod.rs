//! Two-stage denoiser training, pre-denoiser and learned-ISP training,
//! evaluation and the ablation ladder.

pub mod ablation;
pub mod data;
pub mod eval;
pub mod loss;
pub mod metrics;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::bayer::BayerPattern;
use crate::error::{Error, Result};
use crate::isp::{reference_isp_forward, LearnedIsp, LearnedIspSpec, ReferenceIspConfig};
use crate::model::{Domain, ModelConfig, RawVideoDenoiser};
use crate::nn::layers::{l1, pack_tensor};
use crate::nn::{Adam, AdamConfig, Checkpoint, LrGroup, ParamStore};
use crate::predenoise::{Predenoiser, UNetSpec};

use data::{frame_tensor, srgb_tensor, srgb_window_tensor, window_tensor, Sample, Sampler, TemporalPairs, TrainingSet};
use loss::{compute_loss, Loss, LossOutputs, LossTargets, LossTerms, LossWeights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    PretrainSynthetic,
    FinetuneReal,
    Predenoise,
    Isp,
}

impl Stage {
    pub fn trains_denoiser(self) -> bool {
        matches!(self, Stage::PretrainSynthetic | Stage::FinetuneReal)
    }

    pub fn default_weights(self) -> LossWeights {
        match self {
            Stage::FinetuneReal => LossWeights::FINETUNE,
            _ => LossWeights::PRETRAIN,
        }
    }

    /// `(global, spatial fusion)` learning rates.
    pub fn default_lr(self) -> (f64, f64) {
        match self {
            Stage::FinetuneReal => (1e-6, 1e-5),
            _ => (1e-4, 1e-4),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::PretrainSynthetic => "pretrain_synthetic",
            Stage::FinetuneReal => "finetune_real",
            Stage::Predenoise => "predenoise",
            Stage::Isp => "isp",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain_synthetic" | "pretrain" => Ok(Stage::PretrainSynthetic),
            "finetune_real" | "finetune" => Ok(Stage::FinetuneReal),
            "predenoise" => Ok(Stage::Predenoise),
            "isp" => Ok(Stage::Isp),
            other => Err(Error::Config(format!("unknown training stage `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    /// Full-resolution patch side; even so crops keep the Bayer phase.
    pub patch_size: usize,
    pub batch_size: usize,
    /// Falls back to the stage default when unset.
    pub lr: Option<f64>,
    pub lr_spatial: Option<f64>,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub seed: u64,
    /// Architecture and ablation flags.
    pub model: ModelConfig,
    pub temporal_pairs: TemporalPairs,
    /// Falls back to the stage default when unset.
    pub weights: Option<LossWeights>,
    pub predenoiser: UNetSpec,
    pub isp: LearnedIspSpec,
    /// Renders sRGB inputs and targets for sRGB-domain models and targets
    /// for the learned ISP.
    pub reference_isp: ReferenceIspConfig,
    /// Steps between progress log lines (0 disables).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: Stage::PretrainSynthetic,
            patch_size: 64,
            batch_size: 1,
            lr: None,
            lr_spatial: None,
            epochs: 4,
            steps_per_epoch: 250,
            seed: 0,
            model: ModelConfig::default(),
            temporal_pairs: TemporalPairs::default(),
            weights: None,
            predenoiser: UNetSpec::default(),
            isp: LearnedIspSpec::default(),
            reference_isp: ReferenceIspConfig::default(),
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn weights(&self) -> LossWeights {
        self.weights.unwrap_or_else(|| self.stage.default_weights())
    }

    pub fn learning_rates(&self) -> (f64, f64) {
        let (g, s) = self.stage.default_lr();
        (self.lr.unwrap_or(g), self.lr_spatial.or(self.lr).unwrap_or(s))
    }

    pub fn total_steps(&self) -> u64 {
        (self.epochs * self.steps_per_epoch) as u64
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.patch_size % 2 != 0 {
            return Err(Error::Config(format!("patch_size must be even and positive, got {}", self.patch_size)));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.steps_per_epoch == 0 {
            return Err(Error::Config("batch_size, epochs and steps_per_epoch must be positive".into()));
        }
        let (lr, lr_s) = self.learning_rates();
        if !(lr > 0.0 && lr_s > 0.0) {
            return Err(Error::Config(format!("learning rates must be positive, got {lr} and {lr_s}")));
        }
        self.model.validate()?;
        self.predenoiser.validate()?;
        self.reference_isp.validate()?;
        let w = self.weights();
        w.validate()?;
        if self.stage.trains_denoiser() && self.model.domain == Domain::Srgb && (w.lambda > 0.0 || w.beta > 0.0) {
            return Err(Error::Config(
                "sRGB-domain models train on the sRGB reconstruction term only (set lambda = beta = 0)".into(),
            ));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("train config serializes")
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub epoch: usize,
    pub stage: Stage,
    pub lr: f64,
    pub lr_spatial: f64,
    pub lambda: f64,
    pub beta: f64,
    pub gamma: f64,
    pub loss: LossTerms,
}

/// A trained denoiser with its frozen ISP, optimizer state and schedule
/// position.
pub struct ModelState {
    pub denoiser: RawVideoDenoiser,
    pub isp: Option<LearnedIsp>,
    pub optimizer: Option<Adam>,
    pub epoch: usize,
    pub step: u64,
}

const STATE_KIND: &str = "rawvid_state";

impl ModelState {
    pub fn checkpoint(&self) -> Checkpoint {
        let inner = self.denoiser.checkpoint();
        let mut ck = Checkpoint::new(serde_json::json!({
            "kind": STATE_KIND,
            "model": inner.header,
            "isp": self.isp.as_ref().map(|i| i.spec()),
            "optimizer": self.optimizer.as_ref().map(|o| serde_json::json!({
                "algorithm": "adam",
                "config": AdamConfig::default(),
                "groups": o.groups(),
                "steps": o.steps_taken(),
            })),
            "epoch": self.epoch,
            "step": self.step,
        }));
        ck.tensors = inner.tensors;
        if let Some(isp) = &self.isp {
            ck.tensors.extend(isp.store().tensors(""));
        }
        if let Some(o) = &self.optimizer {
            ck.tensors.extend(o.state_tensors());
        }
        ck
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint().save(path)
    }

    /// Accepts both full training states and bare denoiser checkpoints.
    pub fn from_checkpoint(ck: &Checkpoint, dtype: DType) -> Result<Self> {
        match ck.header.get("kind").and_then(|k| k.as_str()) {
            Some(STATE_KIND) => {}
            Some("rawvid") => {
                return Ok(ModelState {
                    denoiser: RawVideoDenoiser::from_checkpoint(ck, dtype)?,
                    isp: None,
                    optimizer: None,
                    epoch: 0,
                    step: 0,
                })
            }
            _ => return Err(Error::Checkpoint("checkpoint does not hold a training state".into())),
        }
        let mut inner = Checkpoint::new(ck.header["model"].clone());
        inner.tensors = ck.tensors.clone();
        let denoiser = RawVideoDenoiser::from_checkpoint(&inner, dtype)?;
        let isp = match serde_json::from_value::<Option<LearnedIspSpec>>(ck.header["isp"].clone())
            .map_err(|e| Error::Checkpoint(e.to_string()))?
        {
            Some(spec) => {
                let isp = LearnedIsp::with_store(ParamStore::new(0, dtype).frozen(), spec)?;
                isp.store().load_tensors(&ck.tensors, "")?;
                Some(isp)
            }
            None => None,
        };
        let optimizer = match ck.header.get("optimizer").filter(|o| !o.is_null()) {
            Some(o) => {
                let groups: Vec<LrGroup> =
                    serde_json::from_value(o["groups"].clone()).map_err(|e| Error::Checkpoint(e.to_string()))?;
                let mut adam = Adam::new(AdamConfig::default(), groups)?;
                adam.load_state(&ck.section("adam."), o["steps"].as_u64().unwrap_or(0));
                Some(adam)
            }
            None => None,
        };
        Ok(ModelState {
            denoiser,
            isp,
            optimizer,
            epoch: ck.header["epoch"].as_u64().unwrap_or(0) as usize,
            step: ck.header["step"].as_u64().unwrap_or(0),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, DType::F32)
    }
}

/// Pretrained components a stage builds on.
#[derive(Default)]
pub struct Dependencies {
    /// Frozen pre-denoiser, required by guided configurations.
    pub predenoiser: Option<Predenoiser>,
    /// Frozen learned ISP, required by raw-domain denoiser stages.
    pub isp: Option<LearnedIsp>,
    /// Starting point; finetuning resumes from the pretrained state.
    pub init: Option<ModelState>,
}

pub enum Trained {
    Denoiser(ModelState),
    Predenoiser(Predenoiser),
    Isp(LearnedIsp),
}

pub struct TrainOutcome {
    pub trained: Trained,
    pub log: Vec<LogRecord>,
    pub final_loss: f64,
}

impl TrainOutcome {
    pub fn into_state(self) -> Result<ModelState> {
        match self.trained {
            Trained::Denoiser(s) => Ok(s),
            _ => Err(Error::State("training did not produce a denoiser".into())),
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        match &self.trained {
            Trained::Denoiser(s) => s.checkpoint(),
            Trained::Predenoiser(p) => p.checkpoint(),
            Trained::Isp(i) => i.checkpoint(),
        }
    }
}

pub const LOG_FILE: &str = "train_log.jsonl";
pub const LATEST_CHECKPOINT: &str = "latest.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// One batch of denoiser inputs as tensors.
pub struct Batch {
    pub pattern: BayerPattern,
    /// `B×T×c×H×W` first window.
    pub window_a: Tensor,
    pub window_b: Option<Tensor>,
    /// `B×1×H×W` clean center mosaic.
    pub clean_raw: Tensor,
    /// `B×3×H×W` reference-rendered clean center; sRGB-domain models only.
    pub clean_srgb: Option<Tensor>,
}

pub fn make_batch(samples: &[Sample], config: &ModelConfig, reference: &ReferenceIspConfig, dtype: DType) -> Result<Batch> {
    let pattern = samples[0].clean.pattern();
    if samples.iter().any(|s| s.clean.pattern() != pattern) {
        return Err(Error::Consistency("a batch mixes Bayer patterns".into()));
    }
    let window = |frames: &[crate::bayer::BayerFrame]| -> Result<Tensor> {
        match config.domain {
            Domain::Raw => window_tensor(frames, dtype),
            Domain::Srgb => {
                let rendered = frames.iter().map(|f| reference_isp_forward(f, reference)).collect::<Result<Vec<_>>>()?;
                srgb_window_tensor(&rendered, dtype)
            }
        }
    };
    let cat = |ts: Vec<Tensor>| -> Result<Tensor> { Ok(Tensor::cat(&ts, 0)?) };
    let window_a = cat(samples.iter().map(|s| window(&s.noisy_a)).collect::<Result<_>>()?)?;
    let window_b = match samples[0].noisy_b {
        Some(_) => Some(cat(samples
            .iter()
            .map(|s| window(s.noisy_b.as_ref().expect("all samples carry pairs")))
            .collect::<Result<_>>()?)?),
        None => None,
    };
    let clean_raw = cat(samples.iter().map(|s| frame_tensor(&s.clean, dtype)).collect::<Result<_>>()?)?;
    let clean_srgb = match config.domain {
        Domain::Srgb => Some(cat(samples
            .iter()
            .map(|s| srgb_tensor(&reference_isp_forward(&s.clean, reference)?, dtype))
            .collect::<Result<_>>()?)?),
        Domain::Raw => None,
    };
    Ok(Batch {
        pattern,
        window_a,
        window_b,
        clean_raw,
        clean_srgb,
    })
}

/// Training objective of the denoiser on one batch.
///
/// Raw-domain models score `O_raw` against the clean mosaic, the frozen ISP's
/// rendering of `O_raw` against its rendering of the clean mosaic, and, with
/// `lambda > 0`, the two window outputs against each other. sRGB-domain
/// models score their sRGB output only.
pub fn denoiser_loss(model: &RawVideoDenoiser, isp: Option<&LearnedIsp>, batch: &Batch, w: &LossWeights) -> Result<Loss> {
    if model.config().domain == Domain::Srgb {
        let target = batch
            .clean_srgb
            .as_ref()
            .ok_or_else(|| Error::Config("sRGB-domain batch lacks sRGB targets".into()))?;
        let value = l1(&model.forward(&batch.window_a, batch.pattern)?.output, target)?;
        let v = value.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        return Ok(Loss {
            value,
            terms: LossTerms {
                total: v,
                rec: v,
                srgb: v,
                ..LossTerms::default()
            },
        });
    }
    let o1 = model.forward(&batch.window_a, batch.pattern)?.output;
    let o2 = if w.lambda > 0.0 {
        let b = batch
            .window_b
            .as_ref()
            .ok_or_else(|| Error::Config("lambda > 0 needs a second temporal window".into()))?;
        Some(model.forward(b, batch.pattern)?.output)
    } else {
        None
    };
    let srgb = if w.beta > 0.0 {
        let isp = isp.ok_or_else(|| Error::Dependency("beta > 0 needs a frozen learned ISP".into()))?;
        Some((
            isp.forward_mosaic(&o1, batch.pattern)?,
            isp.forward_mosaic(&batch.clean_raw, batch.pattern)?.detach(),
        ))
    } else {
        None
    };
    compute_loss(
        &LossOutputs {
            raw: &o1,
            srgb: srgb.as_ref().map(|s| &s.0),
            temporal: o2.as_ref().map(|o2| (&o1, o2)),
        },
        &LossTargets {
            raw: &batch.clean_raw,
            srgb: srgb.as_ref().map(|s| &s.1),
        },
        w,
    )
}

struct LogSink {
    file: Option<BufWriter<File>>,
    records: Vec<LogRecord>,
    every: usize,
}

impl LogSink {
    fn new(out_dir: Option<&Path>, every: usize) -> Result<Self> {
        let file = match out_dir {
            Some(d) => {
                std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
                let p = d.join(LOG_FILE);
                Some(BufWriter::new(File::create(&p).map_err(|e| Error::io(&p, e))?))
            }
            None => None,
        };
        Ok(LogSink {
            file,
            records: Vec::new(),
            every,
        })
    }

    fn push(&mut self, r: LogRecord, total: u64) -> Result<()> {
        if let Some(f) = &mut self.file {
            let line = serde_json::to_string(&r).expect("log records serialize");
            writeln!(f, "{line}").map_err(|e| Error::io(Path::new(LOG_FILE), e))?;
        }
        if self.every > 0 && (r.step % self.every as u64 == 0 || r.step == total) {
            log::info!("{} step {}/{} loss {:.6}", r.stage.as_str(), r.step, total, r.loss.total);
        }
        self.records.push(r);
        Ok(())
    }

    fn finish(mut self) -> Result<Vec<LogRecord>> {
        if let Some(f) = &mut self.file {
            f.flush().map_err(|e| Error::io(Path::new(LOG_FILE), e))?;
        }
        Ok(self.records)
    }
}

fn save_in(out_dir: Option<&Path>, name: &str, ck: &Checkpoint) -> Result<()> {
    match out_dir {
        Some(d) => ck.save(&d.join(name)),
        None => Ok(()),
    }
}

/// Trains the stage named in `config` on `set`.
///
/// Fully determined by `config.seed`; writes the log and per-epoch
/// checkpoints to `out_dir` when given.
pub fn train(config: &TrainConfig, set: &TrainingSet, deps: Dependencies, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    match config.stage {
        Stage::PretrainSynthetic | Stage::FinetuneReal => train_denoiser(config, set, deps, out_dir),
        Stage::Predenoise => train_predenoiser(config, set, out_dir),
        Stage::Isp => train_isp(config, set, out_dir),
    }
}

fn require_frozen_isp(config: &TrainConfig, isp: Option<LearnedIsp>) -> Result<Option<LearnedIsp>> {
    match (config.model.domain, isp) {
        (Domain::Raw, None) => Err(Error::Dependency("raw-domain denoiser training needs a trained learned ISP".into())),
        (_, Some(i)) if !i.is_frozen() => Err(Error::State("the learned ISP must be frozen".into())),
        (Domain::Raw, i) => Ok(i),
        (Domain::Srgb, _) => Ok(None),
    }
}

fn train_denoiser(config: &TrainConfig, set: &TrainingSet, deps: Dependencies, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let isp = require_frozen_isp(config, deps.isp)?;
    let weights = config.weights();
    let (lr, lr_spatial) = config.learning_rates();
    let (denoiser, epoch0, step0) = match deps.init {
        Some(s) => {
            if *s.denoiser.config() != config.model {
                return Err(Error::Config("initial state was built for a different model config".into()));
            }
            (s.denoiser, s.epoch, s.step)
        }
        None => (RawVideoDenoiser::new(config.model, config.seed, DType::F32, deps.predenoiser)?, 0, 0),
    };
    // Each stage starts fresh moments with its own learning-rate groups.
    let mut adam = Adam::new(
        AdamConfig::default(),
        vec![
            LrGroup {
                prefix: "spatial.".into(),
                lr: lr_spatial,
            },
            LrGroup {
                prefix: String::new(),
                lr,
            },
        ],
    )?;
    let pairs = (weights.lambda > 0.0).then_some(config.temporal_pairs);
    let mut sampler = Sampler::new(set, config.model.frames, config.patch_size, config.seed)?;
    let mut sink = LogSink::new(out_dir, config.log_every)?;
    let total = config.total_steps();
    let mut state = ModelState {
        denoiser,
        isp,
        optimizer: None,
        epoch: epoch0,
        step: step0,
    };
    let mut last = f64::NAN;
    for epoch in 1..=config.epochs {
        for i in 0..config.steps_per_epoch {
            let samples = (0..config.batch_size)
                .map(|_| sampler.window(pairs))
                .collect::<Result<Vec<_>>>()?;
            let batch = make_batch(&samples, &config.model, &config.reference_isp, DType::F32)?;
            let loss = denoiser_loss(&state.denoiser, state.isp.as_ref(), &batch, &weights)?;
            let grads = loss.value.backward()?;
            adam.step(state.denoiser.store(), &grads)?;
            last = loss.terms.total;
            sink.push(
                LogRecord {
                    step: ((epoch - 1) * config.steps_per_epoch + i + 1) as u64,
                    epoch,
                    stage: config.stage,
                    lr,
                    lr_spatial,
                    lambda: weights.lambda,
                    beta: weights.beta,
                    gamma: weights.gamma,
                    loss: loss.terms,
                },
                total,
            )?;
        }
        state.epoch = epoch0 + epoch;
        state.step = step0 + (epoch * config.steps_per_epoch) as u64;
        if out_dir.is_some() {
            state.optimizer = Some(adam);
            save_in(out_dir, LATEST_CHECKPOINT, &state.checkpoint())?;
            adam = state.optimizer.take().expect("just stored");
        }
    }
    state.optimizer = Some(adam);
    save_in(out_dir, FINAL_CHECKPOINT, &state.checkpoint())?;
    Ok(TrainOutcome {
        trained: Trained::Denoiser(state),
        log: sink.finish()?,
        final_loss: last,
    })
}

/// Shared loop for the single-network stages: `loss_fn` draws a batch and
/// returns the loss for `store`'s parameters.
fn train_single<F>(config: &TrainConfig, store: &ParamStore, mut loss_fn: F, out_dir: Option<&Path>, save: &dyn Fn() -> Checkpoint) -> Result<(Vec<LogRecord>, f64)>
where
    F: FnMut() -> Result<Tensor>,
{
    let (lr, _) = config.learning_rates();
    let mut adam = Adam::new(
        AdamConfig::default(),
        vec![LrGroup {
            prefix: String::new(),
            lr,
        }],
    )?;
    let mut sink = LogSink::new(out_dir, config.log_every)?;
    let total = config.total_steps();
    let mut last = f64::NAN;
    for epoch in 1..=config.epochs {
        for i in 0..config.steps_per_epoch {
            let loss = loss_fn()?;
            let v = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            adam.step(store, &loss.backward()?)?;
            last = v;
            sink.push(
                LogRecord {
                    step: ((epoch - 1) * config.steps_per_epoch + i + 1) as u64,
                    epoch,
                    stage: config.stage,
                    lr,
                    lr_spatial: lr,
                    lambda: 0.0,
                    beta: 0.0,
                    gamma: 0.0,
                    loss: LossTerms {
                        total: v,
                        rec: v,
                        raw: v,
                        ..LossTerms::default()
                    },
                },
                total,
            )?;
        }
        save_in(out_dir, LATEST_CHECKPOINT, &save())?;
    }
    save_in(out_dir, FINAL_CHECKPOINT, &save())?;
    Ok((sink.finish()?, last))
}

fn train_predenoiser(config: &TrainConfig, set: &TrainingSet, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let pd = Predenoiser::new(config.predenoiser, config.seed, DType::F32)?;
    let mut sampler = Sampler::new(set, 1, config.patch_size, config.seed)?;
    let loss_fn = || -> Result<Tensor> {
        let mut noisy = Vec::with_capacity(config.batch_size);
        let mut clean = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            let (n, c) = sampler.frame_pair()?;
            noisy.push(pack_tensor(&frame_tensor(&n, DType::F32)?, n.pattern())?);
            clean.push(pack_tensor(&frame_tensor(&c, DType::F32)?, c.pattern())?);
        }
        l1(&pd.forward_packed(&Tensor::cat(&noisy, 0)?)?, &Tensor::cat(&clean, 0)?)
    };
    let (log, last) = train_single(config, pd.store(), loss_fn, out_dir, &|| pd.checkpoint())?;
    Ok(TrainOutcome {
        trained: Trained::Predenoiser(pd),
        log,
        final_loss: last,
    })
}

fn train_isp(config: &TrainConfig, set: &TrainingSet, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let isp = LearnedIsp::new(config.isp, config.seed, DType::F32)?;
    let mut sampler = Sampler::new(set, 1, config.patch_size, config.seed)?;
    let loss_fn = || -> Result<Tensor> {
        let mut input = Vec::with_capacity(config.batch_size);
        let mut target = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            let c = sampler.clean_patch()?;
            input.push(pack_tensor(&frame_tensor(&c, DType::F32)?, c.pattern())?);
            target.push(srgb_tensor(&reference_isp_forward(&c, &config.reference_isp)?, DType::F32)?);
        }
        l1(&isp.forward_packed(&Tensor::cat(&input, 0)?)?, &Tensor::cat(&target, 0)?)
    };
    let (log, last) = train_single(config, isp.store(), loss_fn, out_dir, &|| isp.checkpoint())?;
    Ok(TrainOutcome {
        trained: Trained::Isp(isp),
        log,
        final_loss: last,
    })
}

/// Reloads a trained network as a frozen dependency.
pub fn freeze_predenoiser(p: &Predenoiser) -> Result<Predenoiser> {
    Predenoiser::from_checkpoint(&p.checkpoint(), true, p.store().dtype())
}

pub fn freeze_isp(i: &LearnedIsp) -> Result<LearnedIsp> {
    LearnedIsp::from_checkpoint(&i.checkpoint(), true, i.store().dtype())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::NoiseParams;
    use data::{synthetic_clean_sequence, Scene, SceneSpec};

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            channels: 2,
            levels: 2,
            res_blocks: 1,
            predenoise_guided: false,
            nonlocal: false,
            ..ModelConfig::default()
        }
    }

    fn tiny_set() -> TrainingSet {
        let clean = synthetic_clean_sequence(&SceneSpec {
            height: 16,
            width: 16,
            frames: 5,
            ..SceneSpec::default()
        })
        .unwrap();
        TrainingSet {
            scenes: vec![Scene::synthetic(clean)],
            noise: Some(NoiseParams::new(100, 1e-3, 1e-2).unwrap()),
        }
    }

    fn tiny_isp() -> LearnedIsp {
        freeze_isp(&LearnedIsp::new(LearnedIspSpec { depth: 1, base_channels: 2 }, 0, DType::F32).unwrap()).unwrap()
    }

    fn tiny_config(stage: Stage) -> TrainConfig {
        TrainConfig {
            stage,
            patch_size: 8,
            epochs: 1,
            steps_per_epoch: 2,
            model: tiny_model(),
            predenoiser: UNetSpec::predenoiser(1, 2),
            isp: LearnedIspSpec { depth: 1, base_channels: 2 },
            log_every: 0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn stage_defaults() {
        assert_eq!(Stage::PretrainSynthetic.default_weights().lambda, 0.0);
        assert_eq!(Stage::FinetuneReal.default_lr(), (1e-6, 1e-5));
        let c = TrainConfig {
            lr: Some(3e-4),
            ..TrainConfig::default()
        };
        assert_eq!(c.learning_rates(), (3e-4, 3e-4));
        assert!(TrainConfig { patch_size: 63, ..TrainConfig::default() }.validate().is_err());
    }

    #[test]
    fn config_toml_roundtrip() {
        let c = tiny_config(Stage::FinetuneReal);
        assert_eq!(TrainConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert!(TrainConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn raw_stage_without_isp_is_a_dependency_error() {
        let r = train(&tiny_config(Stage::PretrainSynthetic), &tiny_set(), Dependencies::default(), None);
        assert!(matches!(r, Err(Error::Dependency(_))));
        let unfrozen = LearnedIsp::new(LearnedIspSpec { depth: 1, base_channels: 2 }, 0, DType::F32).unwrap();
        let r = train(
            &tiny_config(Stage::PretrainSynthetic),
            &tiny_set(),
            Dependencies {
                isp: Some(unfrozen),
                ..Dependencies::default()
            },
            None,
        );
        assert!(matches!(r, Err(Error::State(_))));
    }

    #[test]
    fn finetune_state_checkpoint_roundtrip() {
        let out = train(
            &tiny_config(Stage::FinetuneReal),
            &tiny_set(),
            Dependencies {
                isp: Some(tiny_isp()),
                ..Dependencies::default()
            },
            None,
        )
        .unwrap();
        assert_eq!(out.log.len(), 2);
        assert_eq!((out.log[0].lambda, out.log[0].beta, out.log[0].gamma), (1.0, 0.5, 0.1));
        assert!(out.log[0].loss.tmp > 0.0);
        let state = out.into_state().unwrap();
        let ck = Checkpoint::from_bytes(&state.checkpoint().to_bytes().unwrap()).unwrap();
        let back = ModelState::from_checkpoint(&ck, DType::F32).unwrap();
        assert_eq!(back.step, 2);
        assert!(back.isp.is_some());
        assert_eq!(back.optimizer.unwrap().steps_taken(), 2);
        assert_eq!(back.denoiser.store().checksum().unwrap(), state.denoiser.store().checksum().unwrap());
    }

    #[test]
    fn single_network_stages_reduce_to_l1() {
        for stage in [Stage::Predenoise, Stage::Isp] {
            let out = train(&tiny_config(stage), &tiny_set(), Dependencies::default(), None).unwrap();
            assert!(out.final_loss.is_finite());
            assert_eq!(out.log[1].loss.total, out.final_loss);
        }
    }
}
