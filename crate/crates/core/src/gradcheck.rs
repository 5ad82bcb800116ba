//! Central finite-difference checks of analytic gradients.

use std::collections::BTreeMap;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::align::{deform_conv2d, FeatureExtractor, PyramidAligner};
use crate::error::{Error, Result};
use crate::fusion::{similarity, TemporalFusion};
use crate::noise::derive_seed;
use crate::nn::layers::l1;
use crate::nn::ParamStore;
use crate::predenoise::{Predenoiser, UNetSpec};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-3;
/// Gradients smaller than this are compared in absolute terms.
const ABS_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

fn values(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Max relative error per input of `f` (a scalar-valued function).
pub fn check_inputs<F>(f: F, inputs: &[Tensor], step: f64) -> Result<Vec<f64>>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let vars = inputs.iter().map(Var::from_tensor).collect::<candle_core::Result<Vec<_>>>()?;
    let tensors: Vec<Tensor> = vars.iter().map(|v| v.as_tensor().clone()).collect();
    let grads = f(&tensors)?.backward()?;
    let mut worst = Vec::with_capacity(inputs.len());
    for (i, input) in inputs.iter().enumerate() {
        let analytic = match grads.get(&tensors[i]) {
            Some(g) => values(g)?,
            None => vec![0.0; input.elem_count()],
        };
        let base = values(input)?;
        let mut max_err = 0.0f64;
        for (j, &a) in analytic.iter().enumerate() {
            let eval = |delta: f64| -> Result<f64> {
                let mut v = base.clone();
                v[j] += delta;
                let mut args = inputs.to_vec();
                args[i] = Tensor::from_vec(v, input.dims(), input.device())?.to_dtype(input.dtype())?;
                scalar(&f(&args)?)
            };
            let numeric = (eval(step)? - eval(-step)?) / (2.0 * step);
            max_err = max_err.max(relative_error(a, numeric));
        }
        worst.push(max_err);
    }
    Ok(worst)
}

/// Max relative error per parameter over `samples` random elements of each.
pub fn check_store<F>(store: &ParamStore, loss: F, samples: usize, step: f64, seed: u64) -> Result<BTreeMap<String, f64>>
where
    F: Fn() -> Result<Tensor>,
{
    let grads = loss()?.backward()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = BTreeMap::new();
    for (name, var) in store.iter() {
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => values(g)?,
            None => vec![0.0; var.elem_count()],
        };
        let n = analytic.len();
        let picks: Vec<usize> = if n <= samples {
            (0..n).collect()
        } else {
            (0..samples).map(|_| rng.random_range(0..n)).collect()
        };
        let mut max_err = 0.0f64;
        for j in picks {
            store.perturb(name, j, step)?;
            let up = scalar(&loss()?)?;
            store.perturb(name, j, -2.0 * step)?;
            let down = scalar(&loss()?)?;
            store.perturb(name, j, step)?;
            max_err = max_err.max(relative_error(analytic[j], (up - down) / (2.0 * step)));
        }
        out.insert(name.clone(), max_err);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GradOp {
    Dconv,
    Similarity,
    Alignment,
    Predenoiser,
}

impl FromStr for GradOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dconv" => Ok(GradOp::Dconv),
            "similarity" => Ok(GradOp::Similarity),
            "alignment" => Ok(GradOp::Alignment),
            "predenoiser" => Ok(GradOp::Predenoiser),
            _ => Err(Error::Config(format!(
                "unknown gradcheck op {s:?}; expected dconv, similarity, alignment or predenoiser"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrialResult {
    pub trial: usize,
    /// Max relative error per checked quantity.
    pub errors: BTreeMap<String, f64>,
}

impl TrialResult {
    pub fn max_error(&self) -> f64 {
        self.errors.values().copied().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub op: GradOp,
    pub tolerance: f64,
    pub trials: Vec<TrialResult>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.trials.iter().map(TrialResult::max_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.trials.iter().all(|t| t.max_error() < self.tolerance)
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?)
}

/// Deformable convolution on a random 1×1×8×8 input with two output
/// channels; checks input, weight, offsets and modulation.
pub fn dconv_trial(seed: u64) -> Result<BTreeMap<String, f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform(&mut rng, &[1, 1, 8, 8], -1.0, 1.0)?;
    let w = uniform(&mut rng, &[2, 1, 3, 3], -1.0, 1.0)?;
    // fractional offsets keep every sample away from the bilinear kinks
    let off_v: Vec<f64> = (0..18 * 64)
        .map(|_| rng.random_range(-2i32..2) as f64 + rng.random_range(0.1..0.9))
        .collect();
    let off = Tensor::from_vec(off_v, (1, 18, 8, 8), &Device::Cpu)?;
    let m = uniform(&mut rng, &[1, 9, 8, 8], 0.05, 0.95)?;
    let proj = uniform(&mut rng, &[1, 2, 8, 8], -1.0, 1.0)?;
    let errs = check_inputs(
        |a| Ok((deform_conv2d(&a[0], &a[2], &a[3], &a[1], None)? * &proj)?.sum_all()?),
        &[x, w, off, m],
        DEFAULT_STEP,
    )?;
    Ok(["input", "weight", "offsets", "modulation"]
        .into_iter()
        .map(String::from)
        .zip(errs)
        .collect())
}

/// Similarity weighting `x ⊙ sigmoid(<a, b>)` on a random 1×4×5×5 instance.
pub fn similarity_trial(seed: u64) -> Result<BTreeMap<String, f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = uniform(&mut rng, &[1, 4, 5, 5], -1.0, 1.0)?;
    let b = uniform(&mut rng, &[1, 4, 5, 5], -1.0, 1.0)?;
    let x = uniform(&mut rng, &[1, 4, 5, 5], -1.0, 1.0)?;
    let proj = uniform(&mut rng, &[1, 4, 5, 5], -1.0, 1.0)?;
    let errs = check_inputs(
        |t| Ok((t[2].broadcast_mul(&similarity(&t[0], &t[1])?)? * &proj)?.sum_all()?),
        &[a, b, x],
        DEFAULT_STEP,
    )?;
    let mut out: BTreeMap<String, f64> = ["neighbor", "center", "features"].into_iter().map(String::from).zip(errs).collect();
    // plus the learnable embeddings of the temporal fusion block
    let mut store = ParamStore::new(seed, DType::F64).with_random_heads();
    let tf = TemporalFusion::new(&mut store, "temporal", 2, 3)?;
    let stack = uniform(&mut rng, &[1, 3, 2, 4, 4], -1.0, 1.0)?;
    let proj = uniform(&mut rng, &[1, 2, 4, 4], -1.0, 1.0)?;
    out.extend(check_store(&store, || Ok((tf.forward(&stack)? * &proj)?.sum_all()?), 4, DEFAULT_STEP, seed)?);
    Ok(out)
}

/// Every parameter of a small extractor + aligner, sampled elements.
pub fn alignment_trial(seed: u64) -> Result<BTreeMap<String, f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new(seed, DType::F64).with_random_heads();
    let fx = FeatureExtractor::new(&mut store, "extract", 1, 2, 2)?;
    let al = PyramidAligner::new(&mut store, "align", 2, 2)?;
    let noisy = uniform(&mut rng, &[1, 1, 8, 8], 0.0, 1.0)?;
    let denoised = uniform(&mut rng, &[1, 1, 8, 8], 0.0, 1.0)?;
    let center = uniform(&mut rng, &[1, 1, 8, 8], 0.0, 1.0)?;
    let proj = uniform(&mut rng, &[1, 2, 8, 8], -1.0, 1.0)?;
    check_store(
        &store,
        || {
            let (n, d, c) = (fx.forward(&noisy)?, fx.forward(&denoised)?, fx.forward(&center)?);
            Ok((al.align(&n, &d, &c, &c, None)? * &proj)?.sum_all()?)
        },
        3,
        DEFAULT_STEP,
        seed,
    )
}

/// L1 training loss of a small pre-denoiser against sampled parameters.
pub fn predenoiser_trial(seed: u64) -> Result<BTreeMap<String, f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let store = ParamStore::new(seed, DType::F64).with_random_heads();
    let p = Predenoiser::with_store(store, UNetSpec::predenoiser(2, 2))?;
    let noisy = uniform(&mut rng, &[1, 4, 8, 8], 0.0, 1.0)?;
    let clean = uniform(&mut rng, &[1, 4, 8, 8], 0.0, 1.0)?;
    check_store(
        p.store(),
        || l1(&p.forward_packed(&noisy)?, &clean),
        3,
        DEFAULT_STEP,
        seed,
    )
}

pub fn run_gradcheck(op: GradOp, trials: usize, seed: u64) -> Result<GradCheckReport> {
    let trial = match op {
        GradOp::Dconv => dconv_trial,
        GradOp::Similarity => similarity_trial,
        GradOp::Alignment => alignment_trial,
        GradOp::Predenoiser => predenoiser_trial,
    };
    let trials = (0..trials)
        .map(|i| {
            Ok(TrialResult {
                trial: i,
                errors: trial(derive_seed(seed, i as u64))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GradCheckReport {
        op,
        tolerance: TOLERANCE,
        trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert!(relative_error(1.0, 0.0) > TOLERANCE);
        assert_eq!(relative_error(0.0, 0.0), 0.0);
    }

    #[test]
    fn quadratic_passes() {
        let x = Tensor::new(&[0.3f64, -1.2, 2.0], &Device::Cpu).unwrap();
        let e = check_inputs(|a| Ok(a[0].sqr()?.sum_all()?), &[x], DEFAULT_STEP).unwrap();
        assert!(e[0] < 1e-8);
    }

    #[test]
    fn similarity_gradients_match() {
        let e = similarity_trial(3).unwrap();
        assert!(e.values().all(|&v| v < TOLERANCE), "{e:?}");
    }
}
