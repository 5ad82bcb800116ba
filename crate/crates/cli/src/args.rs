use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "rawvid", version, about = "Raw video denoising lab")]
pub struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    /// Errors only.
    #[arg(short, long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit shot/read noise parameters from flat-field and bias stacks.
    Calibrate(CalibrateArgs),
    /// Corrupt a clean raw sequence with calibrated noise.
    Synthesize(SynthesizeArgs),
    /// Invert the reference ISP on a directory of sRGB frames.
    Unprocess(UnprocessArgs),
    /// Render a procedural clean scene into a data-root scene directory.
    Scene(SceneArgs),
    /// Train the denoiser, the pre-denoiser or the learned ISP.
    Train(TrainArgs),
    /// Denoise a raw sequence with a trained model.
    Denoise(DenoiseArgs),
    /// Denoise and score against a clean sequence.
    Evaluate(EvaluateArgs),
    /// Train and score the cumulative ablation ladder, or print a saved report.
    Ablate(AblateArgs),
    /// Finite-difference gradient verification of a differentiable op.
    Gradcheck(GradcheckArgs),
    /// Render a raw sequence to sRGB.
    Isp(IspArgs),
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Directory of flat-field stacks, one sequence directory per exposure level.
    #[arg(long)]
    pub flat_dir: PathBuf,
    /// Bias-frame sequence directory.
    #[arg(long)]
    pub bias_dir: PathBuf,
    /// Noise parameter table to write.
    #[arg(long)]
    pub out: PathBuf,
    /// ISO to file the result under; defaults to the bias stack's.
    #[arg(long)]
    pub iso: Option<u32>,
}

#[derive(Debug, Args)]
pub struct SynthesizeArgs {
    #[arg(long)]
    pub clean: PathBuf,
    /// Noise parameter table.
    #[arg(long)]
    pub params: PathBuf,
    /// Table entry to use; defaults to the clean sequence's ISO.
    #[arg(long)]
    pub iso: Option<u32>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct UnprocessArgs {
    /// Directory of indexed `.ppm` frames.
    #[arg(long)]
    pub srgb: PathBuf,
    /// Reference ISP parameters; built-in defaults otherwise.
    #[arg(long)]
    pub isp_config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "rggb")]
    pub pattern: String,
    #[arg(long, default_value_t = 12)]
    pub bit_depth: u32,
    #[arg(long, default_value_t = 100)]
    pub iso: u32,
    #[arg(long, default_value_t = 24.0)]
    pub frame_rate: f32,
}

#[derive(Debug, Args)]
pub struct SceneArgs {
    /// Scene directory; the sequence goes to `<out>/clean`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    #[arg(long, default_value_t = 7)]
    pub frames: usize,
    #[arg(long, default_value = "rggb")]
    pub pattern: String,
    #[arg(long, default_value_t = 12)]
    pub bit_depth: u32,
    /// Per-frame shift in pixels, `dy,dx`.
    #[arg(long, default_value = "1,2", value_parser = parse_motion)]
    pub motion: (i32, i32),
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn parse_motion(s: &str) -> Result<(i32, i32), String> {
    let (a, b) = s.split_once(',').ok_or("expected dy,dx")?;
    Ok((
        a.trim().parse().map_err(|e| format!("{e}"))?,
        b.trim().parse().map_err(|e| format!("{e}"))?,
    ))
}

/// Flags shared by commands that read a run config.
#[derive(Debug, Args)]
pub struct RunArgs {
    /// TOML run configuration; flags override its keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Scene root; falls back to the config file, then RAWVID_DATA_ROOT.
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum StageArg {
    Pretrain,
    Finetune,
    Predenoise,
    Isp,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, value_enum)]
    pub stage: Option<StageArg>,
    /// Noise table for scenes without captured noisy sequences.
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long)]
    pub iso: Option<u32>,
    /// Frozen pre-denoiser checkpoint.
    #[arg(long)]
    pub predenoiser: Option<PathBuf>,
    /// Frozen learned-ISP checkpoint.
    #[arg(long)]
    pub isp: Option<PathBuf>,
    /// State to start from.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub steps_per_epoch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub patch_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Trained denoiser state.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Learned ISP for sRGB output; the state's own ISP otherwise.
    #[arg(long)]
    pub isp: Option<PathBuf>,
    /// Reference ISP parameters for models without a learned ISP.
    #[arg(long)]
    pub reference_isp: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DenoiseArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub noisy: PathBuf,
    #[arg(long)]
    pub clean: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Print a saved CSV report as a table and exit.
    #[arg(long, conflicts_with_all = ["data_root", "predenoiser", "isp"])]
    pub print: Option<PathBuf>,
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long)]
    pub iso: Option<u32>,
    #[arg(long)]
    pub predenoiser: Option<PathBuf>,
    #[arg(long)]
    pub isp: Option<PathBuf>,
    #[arg(long)]
    pub eval_noisy: Option<PathBuf>,
    #[arg(long)]
    pub eval_clean: Option<PathBuf>,
    #[arg(long)]
    pub steps_per_epoch: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// dconv, similarity, alignment or predenoiser.
    #[arg(long)]
    pub op: String,
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report directory; `gradcheck_<op>` by default.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum IspMode {
    Reference,
    Learned,
}

#[derive(Debug, Args)]
pub struct IspArgs {
    #[arg(long, value_enum)]
    pub mode: IspMode,
    /// Raw sequence directory.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub isp_config: Option<PathBuf>,
    /// Learned-ISP checkpoint (learned mode).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Bits per output sample.
    #[arg(long, default_value_t = 8)]
    pub bits: u32,
}
