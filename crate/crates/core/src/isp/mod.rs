//! Image signal processing: an invertible reference pipeline and a learned
//! raw-to-sRGB network.

mod learned;

pub use learned::{LearnedIsp, LearnedIspSpec};

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bayer::{BayerFrame, CfaColor, RawMeta, SrgbFrame};
use crate::error::{Error, Result};

/// Demosaic → white balance → color matrix → clamp → gamma.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceIspConfig {
    pub wb_gains: [f64; 3],
    pub ccm: [[f64; 3]; 3],
    /// Encoding exponent applied last: `out = linear^gamma`.
    pub gamma: f64,
}

impl Default for ReferenceIspConfig {
    fn default() -> Self {
        ReferenceIspConfig {
            wb_gains: [2.0, 1.0, 1.6],
            ccm: IDENTITY,
            gamma: 1.0 / 2.2,
        }
    }
}

const IDENTITY: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

impl ReferenceIspConfig {
    pub fn identity() -> Self {
        ReferenceIspConfig {
            wb_gains: [1.0; 3],
            ccm: IDENTITY,
            gamma: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.wb_gains.iter().any(|g| !(*g > 0.0 && g.is_finite())) {
            return Err(Error::Config(format!("white-balance gains must be positive, got {:?}", self.wb_gains)));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be positive, got {}", self.gamma)));
        }
        self.inverse_ccm().map(|_| ())
    }

    pub fn inverse_ccm(&self) -> Result<[[f64; 3]; 3]> {
        invert3(&self.ccm).ok_or_else(|| Error::Config(format!("color matrix {:?} is singular", self.ccm)))
    }

    /// Copy with each white-balance gain scaled by an independent factor in
    /// `[1 - amount, 1 + amount]`.
    pub fn jittered<R: Rng>(&self, rng: &mut R, amount: f64) -> Self {
        let mut out = self.clone();
        for g in &mut out.wb_gains {
            *g *= rng.random_range(1.0 - amount..=1.0 + amount);
        }
        out
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn invert3(m: &[[f64; 3]; 3]) -> Option<[[f64; 3]; 3]> {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    if !det.is_finite() || det.abs() < 1e-12 {
        return None;
    }
    let mut inv = [[0.0; 3]; 3];
    for (r, row) in inv.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            // adjugate: transpose of the cofactor matrix
            let (r1, r2) = ((c + 1) % 3, (c + 2) % 3);
            let (c1, c2) = ((r + 1) % 3, (r + 2) % 3);
            *v = (m[r1][c1] * m[r2][c2] - m[r1][c2] * m[r2][c1]) / det;
        }
    }
    Some(inv)
}

fn mat_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|r| m[r][0] * v[0] + m[r][1] * v[1] + m[r][2] * v[2])
}

/// Bilinear demosaic by normalized convolution. Measured samples are copied
/// through unchanged; missing samples average the nearest same-color
/// neighbours.
pub fn demosaic_bilinear(raw: &BayerFrame) -> Array3<f64> {
    const GREEN: [[f64; 3]; 3] = [[0.0, 1.0, 0.0], [1.0, 4.0, 1.0], [0.0, 1.0, 0.0]];
    const RED_BLUE: [[f64; 3]; 3] = [[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]];
    let (h, w) = raw.data.dim();
    let pattern = raw.pattern();
    let mut out = Array3::zeros((3, h, w));
    for color in [CfaColor::Red, CfaColor::Green, CfaColor::Blue] {
        let kernel = if color == CfaColor::Green { &GREEN } else { &RED_BLUE };
        let ch = color.rgb_index();
        for y in 0..h {
            for x in 0..w {
                if pattern.color_at(y, x) == color {
                    out[[ch, y, x]] = raw.data[[y, x]] as f64;
                    continue;
                }
                let (mut num, mut den) = (0.0, 0.0);
                for (ky, krow) in kernel.iter().enumerate() {
                    for (kx, &k) in krow.iter().enumerate() {
                        let (yy, xx) = (y as isize + ky as isize - 1, x as isize + kx as isize - 1);
                        if k == 0.0 || yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                            continue;
                        }
                        let (yy, xx) = (yy as usize, xx as usize);
                        if pattern.color_at(yy, xx) == color {
                            num += k * raw.data[[yy, xx]] as f64;
                            den += k;
                        }
                    }
                }
                out[[ch, y, x]] = if den > 0.0 { num / den } else { 0.0 };
            }
        }
    }
    out
}

pub fn reference_isp_forward(raw: &BayerFrame, config: &ReferenceIspConfig) -> Result<SrgbFrame> {
    raw.require_normalized()?;
    config.validate()?;
    let rgb = demosaic_bilinear(raw);
    let (_, h, w) = rgb.dim();
    let mut out = Array3::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let balanced = [0, 1, 2].map(|c| rgb[[c, y, x]] * config.wb_gains[c]);
            let corrected = mat_vec(&config.ccm, balanced);
            for c in 0..3 {
                out[[c, y, x]] = corrected[c].clamp(0.0, 1.0).powf(config.gamma) as f32;
            }
        }
    }
    SrgbFrame::new(out)
}

/// Inverse gamma → inverse color matrix → inverse gains → mosaic. Exact
/// inverse of [`reference_isp_forward`] at measured sample positions
/// wherever the forward pass did not clip.
pub fn reference_isp_inverse(srgb: &SrgbFrame, config: &ReferenceIspConfig, meta: RawMeta) -> Result<BayerFrame> {
    config.validate()?;
    let inv = config.inverse_ccm()?;
    let (_, h, w) = srgb.data.dim();
    let mut data = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let linear = [0, 1, 2].map(|c| (srgb.data[[c, y, x]] as f64).powf(1.0 / config.gamma));
            let balanced = mat_vec(&inv, linear);
            let c = meta.pattern.color_at(y, x).rgb_index();
            data[[y, x]] = (balanced[c] / config.wb_gains[c]) as f32;
        }
    }
    BayerFrame::from_normalized(data, meta)
}
