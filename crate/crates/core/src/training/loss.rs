//! Reconstruction plus temporal-consistency loss; L1 terms are element means.
//!
//! ```text
//! L_rec = |I_raw − O_raw| + β |I_srgb − O_srgb|
//! L_tmp = |Ô1 − Ô2| + γ (|I_raw − Ô1| + |I_raw − Ô2|)
//! L     = L_rec + λ L_tmp
//! ```

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::l1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl LossWeights {
    /// Synthetic pre-training: temporal and sRGB terms disabled.
    pub const PRETRAIN: LossWeights = LossWeights {
        lambda: 0.0,
        beta: 0.0,
        gamma: 0.1,
    };
    pub const FINETUNE: LossWeights = LossWeights {
        lambda: 1.0,
        beta: 0.5,
        gamma: 0.1,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.beta >= 0.0 && self.gamma >= 0.0) {
            return Err(Error::Config(format!("loss weights must be non-negative, got {self:?}")));
        }
        Ok(())
    }
}

pub struct LossOutputs<'a> {
    pub raw: &'a Tensor,
    pub srgb: Option<&'a Tensor>,
    /// Raw outputs of the two temporal windows.
    pub temporal: Option<(&'a Tensor, &'a Tensor)>,
}

pub struct LossTargets<'a> {
    pub raw: &'a Tensor,
    pub srgb: Option<&'a Tensor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub rec: f64,
    pub raw: f64,
    pub srgb: f64,
    pub tmp: f64,
    pub tmp_pair: f64,
    pub tmp_anchor: f64,
}

pub struct Loss {
    pub value: Tensor,
    pub terms: LossTerms,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub fn compute_loss(out: &LossOutputs, target: &LossTargets, w: &LossWeights) -> Result<Loss> {
    w.validate()?;
    let raw = l1(out.raw, target.raw)?;
    let mut terms = LossTerms {
        raw: scalar(&raw)?,
        ..LossTerms::default()
    };
    let mut rec = raw;
    if w.beta > 0.0 {
        let (o, i) = match (out.srgb, target.srgb) {
            (Some(o), Some(i)) => (o, i),
            _ => return Err(Error::Config("beta > 0 needs sRGB outputs and targets".into())),
        };
        let srgb = l1(o, i)?;
        terms.srgb = scalar(&srgb)?;
        rec = (rec + (srgb * w.beta)?)?;
    }
    terms.rec = scalar(&rec)?;
    let mut total = rec;
    if w.lambda > 0.0 {
        let (o1, o2) = out
            .temporal
            .ok_or_else(|| Error::Config("lambda > 0 needs both temporal-window outputs".into()))?;
        let pair = l1(o1, o2)?;
        let anchor = (l1(target.raw, o1)? + l1(target.raw, o2)?)?;
        terms.tmp_pair = scalar(&pair)?;
        terms.tmp_anchor = scalar(&anchor)?;
        let tmp = (pair + (anchor * w.gamma)?)?;
        terms.tmp = scalar(&tmp)?;
        total = (total + (tmp * w.lambda)?)?;
    }
    terms.total = scalar(&total)?;
    Ok(Loss { value: total, terms })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn full(v: f64) -> Tensor {
        Tensor::full(v, (1, 1, 4, 4), &Device::Cpu).unwrap()
    }

    #[test]
    fn perfect_outputs_give_zero() {
        let t = full(0.3);
        let out = LossOutputs {
            raw: &t,
            srgb: Some(&t),
            temporal: Some((&t, &t)),
        };
        let tg = LossTargets { raw: &t, srgb: Some(&t) };
        assert_eq!(compute_loss(&out, &tg, &LossWeights::FINETUNE).unwrap().terms.total, 0.0);
    }

    #[test]
    fn weighted_reconstruction() {
        let (o, i, os, is) = (full(0.5), full(0.4), full(0.7), full(0.5));
        let out = LossOutputs {
            raw: &o,
            srgb: Some(&os),
            temporal: None,
        };
        let tg = LossTargets { raw: &i, srgb: Some(&is) };
        let w = LossWeights {
            lambda: 0.0,
            beta: 0.5,
            gamma: 0.1,
        };
        assert!((compute_loss(&out, &tg, &w).unwrap().terms.total - 0.2).abs() < 1e-12);
    }

    #[test]
    fn missing_temporal_outputs_rejected() {
        let t = full(0.1);
        let out = LossOutputs {
            raw: &t,
            srgb: None,
            temporal: None,
        };
        let tg = LossTargets { raw: &t, srgb: None };
        let w = LossWeights {
            lambda: 1.0,
            beta: 0.0,
            gamma: 0.1,
        };
        assert!(matches!(compute_loss(&out, &tg, &w), Err(Error::Config(_))));
    }
}
