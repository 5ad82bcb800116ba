use std::fs;
use std::path::{Path, PathBuf};

use rawvid_core::bayer::{BayerPattern, RawMeta, Sequence, SequenceRole};
use rawvid_core::gradcheck::{run_gradcheck, GradOp};
use rawvid_core::io::{load_sequence, load_srgb_dir, save_sequence, save_srgb_dir};
use rawvid_core::isp::{reference_isp_forward, LearnedIsp, ReferenceIspConfig};
use rawvid_core::noise::{estimate_noise_params, synthesize_pairs, unprocess_srgb, CalibrationStack, NoiseParams, NoiseTable, StackKind};
use rawvid_core::predenoise::Predenoiser;
use rawvid_core::training::ablation::{print_table, run_ablation, AblationInputs};
use rawvid_core::training::data::{synthetic_clean_sequence, SceneSpec, TrainingSet};
use rawvid_core::training::eval::Evaluator;
use rawvid_core::training::{train, Dependencies, ModelState, Stage};
use serde_json::json;

use crate::args::*;
use crate::config::{pick, require, require_input, RunConfig};
use crate::dataset::load_root;
use crate::failure::{io_failure, CliResult, Failure};
use crate::manifest::Manifest;

/// Loads the run config and applies its verbosity unless a flag set one.
fn run_config(path: Option<&Path>) -> CliResult<RunConfig> {
    let cfg = RunConfig::load_or_default(path)?;
    if let Some(v) = &cfg.verbosity {
        crate::config_verbosity(v)?;
    }
    Ok(cfg)
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| Failure::Config(format!("cannot create output directory {}: {e}", dir.display())))
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| io_failure("read", path, e))
}

fn reference_config(path: Option<&Path>) -> CliResult<ReferenceIspConfig> {
    match path {
        Some(p) => {
            require_input("reference ISP config", p)?;
            Ok(ReferenceIspConfig::from_toml(&read_text(p)?)?)
        }
        None => Ok(ReferenceIspConfig::default()),
    }
}

fn noise_from_table(path: &Path, iso: u32) -> CliResult<NoiseParams> {
    require_input("noise parameter file", path)?;
    Ok(NoiseTable::load(path)?.get(iso)?)
}

pub fn calibrate(a: &CalibrateArgs) -> CliResult<()> {
    require_input("flat-field directory", &a.flat_dir)?;
    require_input("bias directory", &a.bias_dir)?;
    let mut flats = Vec::new();
    for (i, dir) in scene_subdirs(&a.flat_dir)?.iter().enumerate() {
        flats.push(CalibrationStack::new(load_sequence(dir)?.frames, StackKind::FlatField, i as u32)?);
    }
    let bias_seq = load_sequence(&a.bias_dir)?;
    let iso = a.iso.unwrap_or(bias_seq.iso);
    let bias = CalibrationStack::new(bias_seq.frames, StackKind::Bias, 0)?;
    let cal = estimate_noise_params(&flats, &bias, iso)?;
    let mut table = NoiseTable::default();
    table.insert(cal.params);
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    table.save(&a.out)?;
    println!(
        "iso={} sigma_s_sq={:.6e} sigma_r={:.6e} levels={}",
        cal.params.iso,
        cal.params.sigma_s_sq,
        cal.params.sigma_r,
        cal.points.len()
    );
    let mut m = Manifest::new("calibrate", None, json!({ "iso": iso, "flat_dir": a.flat_dir, "bias_dir": a.bias_dir }));
    m.inputs([a.flat_dir.as_path(), a.bias_dir.as_path()])?;
    let base = a.out.parent().unwrap_or(Path::new("."));
    m.output(base, &a.out)?;
    m.write(&sidecar_manifest(&a.out))
}

fn scene_subdirs(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| io_failure("list", dir, e))? {
        let p = entry.map_err(|e| io_failure("list", dir, e))?.path();
        if p.is_dir() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// `params.toml` → `params.toml.manifest.json`.
fn sidecar_manifest(file: &Path) -> PathBuf {
    let mut name = file.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    file.with_file_name(name)
}

pub fn synthesize(a: &SynthesizeArgs) -> CliResult<()> {
    require_input("clean sequence", &a.clean)?;
    let clean = load_sequence(&a.clean)?.normalized()?;
    let iso = a.iso.unwrap_or(clean.iso);
    let params = noise_from_table(&a.params, iso)?;
    let (noisy, _) = synthesize_pairs(&clean, &params, a.seed)?;
    create_dir(&a.out)?;
    save_sequence(&noisy, &a.out)?;
    let mut m = Manifest::new("synthesize", Some(a.seed), json!({ "iso": iso, "params": params }));
    m.inputs([a.clean.as_path(), a.params.as_path()])?;
    m.finish_dir(&a.out)
}

pub fn unprocess(a: &UnprocessArgs) -> CliResult<()> {
    require_input("sRGB directory", &a.srgb)?;
    let isp = reference_config(a.isp_config.as_deref())?;
    let pattern: BayerPattern = a.pattern.parse()?;
    let meta = RawMeta::full_range(pattern, a.bit_depth);
    meta.validate()?;
    let frames = load_srgb_dir(&a.srgb)?
        .iter()
        .map(|f| unprocess_srgb(f, &isp, meta))
        .collect::<rawvid_core::Result<Vec<_>>>()?;
    let seq = Sequence::new(frames, a.iso, a.frame_rate, SequenceRole::Clean)?;
    create_dir(&a.out)?;
    save_sequence(&seq, &a.out)?;
    let mut m = Manifest::new(
        "unprocess",
        None,
        json!({ "isp": isp, "pattern": pattern.as_str(), "bit_depth": a.bit_depth, "iso": a.iso, "frame_rate": a.frame_rate }),
    );
    m.input(&a.srgb)?;
    if let Some(p) = &a.isp_config {
        m.input(p)?;
    }
    m.finish_dir(&a.out)
}

pub fn scene(a: &SceneArgs) -> CliResult<()> {
    let spec = SceneSpec {
        height: a.height,
        width: a.width,
        frames: a.frames,
        pattern: a.pattern.parse()?,
        bit_depth: a.bit_depth,
        motion: a.motion,
        seed: a.seed,
    };
    let seq = synthetic_clean_sequence(&spec)?;
    create_dir(&a.out)?;
    save_sequence(&seq, &a.out.join("clean"))?;
    Manifest::new("scene", Some(a.seed), json!({ "spec": spec })).finish_dir(&a.out)
}

/// Scenes under the data root plus the noise used for scenes without
/// captured realizations.
fn training_set(cfg: &RunConfig, data_root: Option<&Path>, params: Option<PathBuf>, iso: Option<u32>) -> CliResult<(PathBuf, TrainingSet)> {
    let root = require("data root", cfg.data_root(data_root))?;
    require_input("data root", &root)?;
    let scenes = load_root(&root)?;
    let iso = pick(iso, &cfg.paths.iso).unwrap_or(scenes[0].clean.iso);
    let noise = match pick(params, &cfg.paths.params) {
        Some(p) => Some(noise_from_table(&p, iso)?),
        None => None,
    };
    Ok((root, TrainingSet { scenes, noise }))
}

fn load_predenoiser(path: &Path) -> CliResult<Predenoiser> {
    require_input("pre-denoiser checkpoint", path)?;
    Ok(Predenoiser::load(path, true)?)
}

fn load_isp(path: &Path) -> CliResult<LearnedIsp> {
    require_input("learned ISP checkpoint", path)?;
    Ok(LearnedIsp::load(path, true)?)
}

pub fn train_cmd(a: &TrainArgs) -> CliResult<()> {
    let mut cfg = run_config(a.run.config.as_deref())?;
    if let Some(s) = a.stage {
        cfg.train.stage = match s {
            StageArg::Pretrain => Stage::PretrainSynthetic,
            StageArg::Finetune => Stage::FinetuneReal,
            StageArg::Predenoise => Stage::Predenoise,
            StageArg::Isp => Stage::Isp,
        };
    }
    if let Some(seed) = a.run.seed {
        cfg.train.seed = seed;
    }
    cfg.seed = Some(cfg.train.seed);
    let t = &mut cfg.train;
    t.epochs = a.epochs.unwrap_or(t.epochs);
    t.steps_per_epoch = a.steps_per_epoch.unwrap_or(t.steps_per_epoch);
    t.patch_size = a.patch_size.unwrap_or(t.patch_size);
    t.lr = a.lr.or(t.lr);
    let p = &mut cfg.paths;
    p.predenoiser = pick(a.predenoiser.clone(), &p.predenoiser);
    p.isp = pick(a.isp.clone(), &p.isp);
    p.init = pick(a.init.clone(), &p.init);
    p.out = pick(a.run.out.clone(), &p.out);
    if let Some(r) = &p.reference_isp {
        cfg.train.reference_isp = reference_config(Some(r))?;
    }
    cfg.train.validate()?;
    let out = require("output directory", cfg.paths.out.clone())?;
    let (root, set) = training_set(&cfg, a.run.data_root.as_deref(), a.params.clone(), a.iso)?;
    cfg.paths.data_root = Some(root.clone());
    cfg.paths.params = pick(a.params.clone(), &cfg.paths.params);

    let mut inputs = vec![root];
    let mut deps = Dependencies::default();
    if cfg.train.stage.trains_denoiser() {
        if let Some(path) = &cfg.paths.predenoiser {
            deps.predenoiser = Some(load_predenoiser(path)?);
            inputs.push(path.clone());
        }
        if let Some(path) = &cfg.paths.isp {
            deps.isp = Some(load_isp(path)?);
            inputs.push(path.clone());
        }
        if let Some(path) = &cfg.paths.init {
            require_input("initial state", path)?;
            deps.init = Some(ModelState::load(path)?);
            inputs.push(path.clone());
        }
    }
    inputs.extend(cfg.paths.params.clone());

    create_dir(&out)?;
    let snapshot = toml::to_string(&cfg).map_err(|e| Failure::Config(e.to_string()))?;
    fs::write(out.join("config.toml"), snapshot).map_err(|e| io_failure("write", &out, e))?;
    log::info!("training stage {} for {} steps", cfg.train.stage.as_str(), cfg.train.total_steps());
    let outcome = train(&cfg.train, &set, deps, Some(&out))?;
    println!("stage={} steps={} final_loss={:.9e}", cfg.train.stage.as_str(), cfg.train.total_steps(), outcome.final_loss);
    let mut m = Manifest::new("train", Some(cfg.train.seed), serde_json::to_value(&cfg).expect("config serializes"));
    m.inputs(inputs.iter().map(PathBuf::as_path))?;
    m.finish_dir(&out)
}

struct LoadedModel {
    state: ModelState,
    isp: Option<LearnedIsp>,
    reference: ReferenceIspConfig,
    inputs: Vec<PathBuf>,
}

fn load_model(a: &ModelArgs) -> CliResult<LoadedModel> {
    require_input("checkpoint", &a.checkpoint)?;
    let mut state = ModelState::load(&a.checkpoint)?;
    let mut inputs = vec![a.checkpoint.clone()];
    let isp = match &a.isp {
        Some(p) => {
            inputs.push(p.clone());
            Some(load_isp(p)?)
        }
        None => state.isp.take(),
    };
    if let Some(p) = &a.reference_isp {
        inputs.push(p.clone());
    }
    Ok(LoadedModel {
        state,
        isp,
        reference: reference_config(a.reference_isp.as_deref())?,
        inputs,
    })
}

/// Runs the model over every full window and writes `raw/` and `srgb/`.
fn run_model(model: &LoadedModel, noisy: &Sequence, clean: Option<&Sequence>, out: &Path) -> CliResult<serde_json::Value> {
    let ev = Evaluator::new(&model.state.denoiser, model.isp.as_ref(), &model.reference).evaluate(noisy, clean)?;
    let raw = Sequence::new(ev.raw, noisy.iso, noisy.frame_rate, SequenceRole::Clean)?;
    create_dir(out)?;
    save_sequence(&raw, &out.join("raw"))?;
    save_srgb_dir(&ev.srgb, &out.join("srgb"), 8)?;
    Ok(serde_json::to_value(&ev.report).expect("report serializes"))
}

pub fn denoise(a: &DenoiseArgs) -> CliResult<()> {
    let model = load_model(&a.model)?;
    require_input("input sequence", &a.input)?;
    let noisy = load_sequence(&a.input)?.normalized()?;
    let first = model.state.denoiser.config().frames / 2;
    run_model(&model, &noisy, None, &a.out)?;
    let mut m = Manifest::new("denoise", None, json!({ "first_frame": first, "model": model.state.denoiser.config() }));
    m.inputs(model.inputs.iter().map(PathBuf::as_path))?;
    m.input(&a.input)?;
    m.finish_dir(&a.out)
}

pub fn evaluate(a: &EvaluateArgs) -> CliResult<()> {
    let model = load_model(&a.model)?;
    require_input("noisy sequence", &a.noisy)?;
    let noisy = load_sequence(&a.noisy)?.normalized()?;
    let clean = match &a.clean {
        Some(p) => {
            require_input("clean sequence", p)?;
            Some(load_sequence(p)?.normalized()?)
        }
        None => None,
    };
    let report = run_model(&model, &noisy, clean.as_ref(), &a.out)?;
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(a.out.join("report.json"), text + "\n").map_err(|e| io_failure("write", &a.out, e))?;
    for key in ["mean_raw", "mean_srgb", "noisy_mean_raw", "noisy_mean_srgb"] {
        if let Some(v) = report.get(key).filter(|v| !v.is_null()) {
            println!("{key} psnr={:.4} ssim={:.5}", v["psnr"].as_f64().unwrap_or(f64::NAN), v["ssim"].as_f64().unwrap_or(f64::NAN));
        }
    }
    let first = model.state.denoiser.config().frames / 2;
    let mut m = Manifest::new("evaluate", None, json!({ "first_frame": first, "model": model.state.denoiser.config() }));
    m.inputs(model.inputs.iter().map(PathBuf::as_path))?;
    m.input(&a.noisy)?;
    if let Some(c) = &a.clean {
        m.input(c)?;
    }
    m.finish_dir(&a.out)
}

pub fn ablate(a: &AblateArgs) -> CliResult<()> {
    if let Some(csv) = &a.print {
        require_input("ablation report", csv)?;
        print!("{}", print_table(&read_text(csv)?)?);
        return Ok(());
    }
    let mut cfg = run_config(a.run.config.as_deref())?;
    if let Some(seed) = a.run.seed {
        cfg.train.seed = seed;
    }
    cfg.seed = Some(cfg.train.seed);
    cfg.train.epochs = a.epochs.unwrap_or(cfg.train.epochs);
    cfg.train.steps_per_epoch = a.steps_per_epoch.unwrap_or(cfg.train.steps_per_epoch);
    let p = &mut cfg.paths;
    p.predenoiser = pick(a.predenoiser.clone(), &p.predenoiser);
    p.isp = pick(a.isp.clone(), &p.isp);
    p.eval_noisy = pick(a.eval_noisy.clone(), &p.eval_noisy);
    p.eval_clean = pick(a.eval_clean.clone(), &p.eval_clean);
    p.out = pick(a.run.out.clone(), &p.out);
    cfg.train.validate()?;
    let out = require("output directory", cfg.paths.out.clone())?;
    let pd_path = require("pre-denoiser checkpoint", cfg.paths.predenoiser.clone())?;
    let isp_path = require("learned ISP checkpoint", cfg.paths.isp.clone())?;
    let clean_path = require("held-out clean sequence", cfg.paths.eval_clean.clone())?;
    let (root, set) = training_set(&cfg, a.run.data_root.as_deref(), a.params.clone(), a.iso)?;
    cfg.paths.data_root = Some(root.clone());
    cfg.paths.params = pick(a.params.clone(), &cfg.paths.params);
    let predenoiser = load_predenoiser(&pd_path)?;
    let isp = load_isp(&isp_path)?;
    require_input("held-out clean sequence", &clean_path)?;
    let clean = load_sequence(&clean_path)?.normalized()?;
    let mut inputs = vec![root, pd_path, isp_path, clean_path];
    let noisy = match &cfg.paths.eval_noisy {
        Some(p) => {
            require_input("held-out noisy sequence", p)?;
            inputs.push(p.clone());
            load_sequence(p)?.normalized()?
        }
        None => {
            let params = set
                .noise
                .ok_or_else(|| Failure::Config("no held-out noisy sequence and no noise parameters to synthesize one".into()))?;
            synthesize_pairs(&clean, &params, cfg.train.seed.wrapping_add(1))?.0
        }
    };
    inputs.extend(cfg.paths.params.clone());
    let report = run_ablation(
        &cfg.train,
        &set,
        &AblationInputs {
            predenoiser: &predenoiser,
            isp: &isp,
            noisy: &noisy,
            clean: &clean,
        },
    )?;
    create_dir(&out)?;
    let csv = report.to_csv()?;
    fs::write(out.join("ablation.csv"), &csv).map_err(|e| io_failure("write", &out, e))?;
    let table = report.to_table();
    fs::write(out.join("ablation.txt"), &table).map_err(|e| io_failure("write", &out, e))?;
    print!("{table}");
    let mut m = Manifest::new("ablate", Some(cfg.train.seed), serde_json::to_value(&cfg).expect("config serializes"));
    m.inputs(inputs.iter().map(PathBuf::as_path))?;
    m.finish_dir(&out)
}

pub fn gradcheck(a: &GradcheckArgs) -> CliResult<()> {
    let op: GradOp = a.op.parse()?;
    let report = run_gradcheck(op, a.trials, a.seed)?;
    for t in &report.trials {
        println!("trial={} max_rel_err={:.3e}", t.trial, t.max_error());
    }
    let out = a.out.clone().unwrap_or_else(|| PathBuf::from(format!("gradcheck_{}", a.op)));
    create_dir(&out)?;
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(out.join("report.json"), text + "\n").map_err(|e| io_failure("write", &out, e))?;
    Manifest::new("gradcheck", Some(a.seed), json!({ "op": op, "trials": a.trials })).finish_dir(&out)?;
    if report.passed() {
        println!("op={} trials={} max_rel_err={:.3e} tolerance={:.0e} PASS", a.op, a.trials, report.max_error(), report.tolerance);
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "{} gradient check failed: max relative error {:.3e} >= {:.0e}",
            a.op,
            report.max_error(),
            report.tolerance
        )))
    }
}

pub fn isp(a: &IspArgs) -> CliResult<()> {
    require_input("raw sequence", &a.input)?;
    let seq = load_sequence(&a.input)?.normalized()?;
    let mut m;
    let frames = match a.mode {
        IspMode::Reference => {
            let cfg = reference_config(a.isp_config.as_deref())?;
            m = Manifest::new("isp", None, json!({ "mode": "reference", "isp": cfg, "bits": a.bits }));
            seq.frames.iter().map(|f| reference_isp_forward(f, &cfg)).collect::<rawvid_core::Result<Vec<_>>>()?
        }
        IspMode::Learned => {
            let path = require("learned ISP checkpoint (--checkpoint)", a.checkpoint.clone())?;
            let model = load_isp(&path)?;
            m = Manifest::new("isp", None, json!({ "mode": "learned", "bits": a.bits }));
            m.input(&path)?;
            seq.frames.iter().map(|f| model.learned_isp_apply(f)).collect::<rawvid_core::Result<Vec<_>>>()?
        }
    };
    if let Some(p) = &a.isp_config {
        m.input(p)?;
    }
    m.input(&a.input)?;
    create_dir(&a.out)?;
    save_srgb_dir(&frames, &a.out, a.bits)?;
    m.finish_dir(&a.out)
}
