//! Pre-denoised-feature-guided pyramidal deformable alignment.
//!
//! Offsets are predicted from denoised features only; the same offset field
//! then warps both the noisy and the denoised features at every level.

pub mod dconv;

use std::path::Path;

use candle_core::{Tensor, TensorId};
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::io::write_pfm;
use crate::nn::layers::{crop_hw, leaky_relu, pad_to_multiple, sigmoid, upsample2x};
use crate::nn::{Conv2d, Init, ParamStore};

pub use dconv::{deform_conv2d, deform_im2col, KernelGeometry};

/// Per-level features for a batch of planes, level 1 first. Each level is
/// `N×C×h×w` with `h, w` halving from one level to the next.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
    /// Level-1 size before padding to a multiple of `2^(L-1)`.
    pub orig: (usize, usize),
}

impl FeaturePyramid {
    pub fn level(&self, l: usize) -> &Tensor {
        &self.levels[l - 1]
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    /// Repeats every batch entry `times` times along the batch axis, block-wise
    /// (`[a, b] → [a, b, a, b]` for `times = 2`).
    pub fn tile_batch(&self, times: usize) -> Result<FeaturePyramid> {
        let levels = self
            .levels
            .iter()
            .map(|t| Tensor::cat(&vec![t; times], 0))
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(FeaturePyramid { levels, orig: self.orig })
    }

    fn check_against(&self, other: &FeaturePyramid) -> Result<()> {
        if self.levels.len() != other.levels.len() {
            return Err(Error::Pyramid(format!(
                "pyramids have {} and {} levels",
                self.levels.len(),
                other.levels.len()
            )));
        }
        for (l, (a, b)) in self.levels.iter().zip(&other.levels).enumerate() {
            if a.dims() != b.dims() {
                return Err(Error::Pyramid(format!(
                    "level {} shapes differ: {:?} vs {:?}",
                    l + 1,
                    a.dims(),
                    b.dims()
                )));
            }
        }
        Ok(())
    }
}

/// Δp (`N×2K×H×W`, channel `2k` = Δx, `2k+1` = Δy) and Δm (`N×K×H×W`).
#[derive(Debug, Clone)]
pub struct OffsetField {
    pub offsets: Tensor,
    pub modulation: Tensor,
    pub level: usize,
}

impl OffsetField {
    pub fn kernel_locations(&self) -> Result<usize> {
        Ok(self.modulation.dim(1)?)
    }

    /// Mean `(Δx, Δy)` over batch, kernel locations and positions.
    pub fn mean_displacement(&self) -> Result<(f64, f64)> {
        let (n, k2, h, w) = self.offsets.dims4()?;
        let pairs = self.offsets.reshape((n, k2 / 2, 2, h, w))?;
        let mean = |i: usize| -> Result<f64> {
            Ok(pairs
                .narrow(2, i, 1)?
                .mean_all()?
                .to_dtype(candle_core::DType::F64)?
                .to_scalar::<f64>()?)
        };
        Ok((mean(0)?, mean(1)?))
    }

    /// Writes every Δx/Δy/Δm channel of batch entry 0 as a PFM image.
    pub fn dump_pfm(&self, dir: &Path, tag: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |t: &Tensor, name: String| -> Result<()> {
            let (h, w) = t.dims2()?;
            let v: Vec<f32> = t.to_dtype(candle_core::DType::F32)?.flatten_all()?.to_vec1()?;
            let arr = Array2::from_shape_vec((h, w), v).map_err(|e| Error::Dimension(e.to_string()))?;
            write_pfm(&dir.join(name), &arr)
        };
        let off = self.offsets.get(0)?;
        let m = self.modulation.get(0)?;
        for k in 0..m.dim(0)? {
            write(&off.get(2 * k)?, format!("{tag}_l{}_k{k}_dx.pfm", self.level))?;
            write(&off.get(2 * k + 1)?, format!("{tag}_l{}_k{k}_dy.pfm", self.level))?;
            write(&m.get(k)?, format!("{tag}_l{}_k{k}_m.pfm", self.level))?;
        }
        Ok(())
    }
}

/// Strided-convolution feature pyramid. Shared between noisy and denoised
/// inputs.
pub struct FeatureExtractor {
    first: Conv2d,
    down: Vec<(Conv2d, Conv2d)>,
}

impl FeatureExtractor {
    pub fn new(store: &mut ParamStore, prefix: &str, in_channels: usize, channels: usize, levels: usize) -> Result<Self> {
        if levels == 0 {
            return Err(Error::Config("feature pyramid needs at least one level".into()));
        }
        let first = store.conv2d(&format!("{prefix}.l1"), in_channels, channels, 3, 1, Init::Kaiming)?;
        let down = (2..=levels)
            .map(|l| {
                Ok((
                    store.conv2d(&format!("{prefix}.l{l}.down"), channels, channels, 3, 2, Init::Kaiming)?,
                    store.conv2d(&format!("{prefix}.l{l}.conv"), channels, channels, 3, 1, Init::Kaiming)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FeatureExtractor { first, down })
    }

    pub fn levels(&self) -> usize {
        self.down.len() + 1
    }

    /// `N×in×H×W` → pyramid; replicate-pads to a multiple of `2^(L-1)`.
    pub fn forward(&self, x: &Tensor) -> Result<FeaturePyramid> {
        if x.dim(1)? != self.first.in_channels() {
            return Err(Error::Dimension(format!(
                "feature extractor expects {} channels, got {}",
                self.first.in_channels(),
                x.dim(1)?
            )));
        }
        let (x, orig) = pad_to_multiple(x, 1 << self.down.len())?;
        let mut levels = vec![leaky_relu(&self.first.forward(&x)?)?];
        for (down, conv) in &self.down {
            let prev = levels.last().expect("level 1 present");
            let f = leaky_relu(&conv.forward(&leaky_relu(&down.forward(prev)?)?)?)?;
            levels.push(f);
        }
        Ok(FeaturePyramid { levels, orig })
    }
}

/// Offset/modulation predictor `f` for one level.
pub struct OffsetPredictor {
    conv1: Conv2d,
    conv2: Conv2d,
    head: Conv2d,
    k: usize,
    level: usize,
    takes_coarser: bool,
}

impl OffsetPredictor {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, level: usize, takes_coarser: bool, geom: KernelGeometry) -> Result<Self> {
        let k = geom.locations();
        let cin = 2 * channels + if takes_coarser { 2 * k } else { 0 };
        Ok(OffsetPredictor {
            conv1: store.conv2d(&format!("{prefix}.conv1"), cin, channels, 3, 1, Init::Kaiming)?,
            conv2: store.conv2d(&format!("{prefix}.conv2"), channels, channels, 3, 1, Init::Kaiming)?,
            head: store.conv2d(&format!("{prefix}.head"), channels, 3 * k, 3, 1, Init::ZeroHead)?,
            k,
            level,
            takes_coarser,
        })
    }

    /// Offsets from `[neighbor, center]` denoised features, plus twice the
    /// bilinearly upsampled coarser offsets when present.
    pub fn forward(&self, neighbor: &Tensor, center: &Tensor, coarser: Option<&OffsetField>) -> Result<OffsetField> {
        if neighbor.dims() != center.dims() {
            return Err(Error::Pyramid(format!(
                "neighbor {:?} and center {:?} features differ in shape",
                neighbor.dims(),
                center.dims()
            )));
        }
        let (_, _, h, w) = neighbor.dims4()?;
        let base = match (coarser, self.takes_coarser) {
            (Some(c), true) => {
                if c.level != self.level + 1 {
                    return Err(Error::Pyramid(format!(
                        "level {} predictor given a level {} field",
                        self.level, c.level
                    )));
                }
                let up = (upsample2x(&c.offsets)? * 2.0)?;
                if up.dims()[2..] != [h, w] {
                    return Err(Error::Pyramid(format!(
                        "coarser field {:?} does not upsample to {h}x{w}",
                        c.offsets.dims()
                    )));
                }
                Some(up)
            }
            (None, false) => None,
            (Some(_), false) => return Err(Error::Pyramid(format!("level {} takes no coarser field", self.level))),
            (None, true) => return Err(Error::Pyramid(format!("level {} needs the level {} field", self.level, self.level + 1))),
        };
        let mut inputs = vec![neighbor.clone(), center.clone()];
        if let Some(b) = &base {
            inputs.push(b.clone());
        }
        let x = Tensor::cat(&inputs, 1)?;
        let feat = leaky_relu(&self.conv2.forward(&leaky_relu(&self.conv1.forward(&x)?)?)?)?;
        let out = self.head.forward(&feat)?;
        let mut offsets = out.narrow(1, 0, 2 * self.k)?;
        if let Some(b) = base {
            offsets = (offsets + b)?;
        }
        let limit = h.max(w) as f64 / 4.0;
        Ok(OffsetField {
            offsets: offsets.clamp(-limit, limit)?,
            modulation: sigmoid(&out.narrow(1, 2 * self.k, self.k)?)?,
            level: self.level,
        })
    }
}

/// Modulated deformable convolution layer.
pub struct DeformConv2d {
    weight: Tensor,
    bias: Tensor,
}

impl DeformConv2d {
    pub fn new(store: &mut ParamStore, prefix: &str, cin: usize, cout: usize, geom: KernelGeometry) -> Result<Self> {
        let s = geom.size;
        Ok(DeformConv2d {
            weight: store.param(&format!("{prefix}.weight"), &[cout, cin, s, s], cin * s * s, Init::Kaiming)?,
            bias: store.param(&format!("{prefix}.bias"), &[cout], cin * s * s, Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor, field: &OffsetField) -> Result<Tensor> {
        deform_conv2d(x, &field.offsets, &field.modulation, &self.weight, Some(&self.bias))
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }
}

struct AlignLevel {
    predictor: OffsetPredictor,
    dconv: DeformConv2d,
    blend: Option<(Conv2d, Conv2d)>,
}

/// Tensor ids recorded for one warp, used to assert the dataflow.
#[derive(Debug, Clone)]
pub struct LevelTrace {
    pub level: usize,
    pub predictor_inputs: Vec<TensorId>,
    pub noisy_offsets: TensorId,
    pub denoised_offsets: Option<TensorId>,
    pub field: OffsetField,
}

#[derive(Debug, Clone, Default)]
pub struct AlignTrace {
    pub levels: Vec<LevelTrace>,
    pub refinement: Option<LevelTrace>,
}

/// Coarse-to-fine alignment with a final refinement warp.
pub struct PyramidAligner {
    levels: Vec<AlignLevel>,
    refine_predictor: OffsetPredictor,
    refine_dconv: DeformConv2d,
}

impl PyramidAligner {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, levels: usize) -> Result<Self> {
        let geom = KernelGeometry::K3;
        let levels = (1..=levels)
            .map(|l| {
                let p = format!("{prefix}.l{l}");
                Ok(AlignLevel {
                    predictor: OffsetPredictor::new(store, &format!("{p}.offset"), channels, l, l < levels, geom)?,
                    dconv: DeformConv2d::new(store, &format!("{p}.dconv"), channels, channels, geom)?,
                    blend: if l < levels {
                        Some((
                            store.conv2d(&format!("{p}.blend1"), 2 * channels, channels, 3, 1, Init::Kaiming)?,
                            store.conv2d(&format!("{p}.blend2"), channels, channels, 3, 1, Init::Kaiming)?,
                        ))
                    } else {
                        None
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PyramidAligner {
            levels,
            refine_predictor: OffsetPredictor::new(store, &format!("{prefix}.refine.offset"), channels, 1, false, geom)?,
            refine_dconv: DeformConv2d::new(store, &format!("{prefix}.refine.dconv"), channels, channels, geom)?,
        })
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    /// Aligns `noisy` (guided by `denoised`) to the center frame and returns
    /// the level-1 aligned noisy features, cropped to the unpadded size.
    pub fn align(
        &self,
        noisy: &FeaturePyramid,
        denoised: &FeaturePyramid,
        center_noisy: &FeaturePyramid,
        center_denoised: &FeaturePyramid,
        mut trace: Option<&mut AlignTrace>,
    ) -> Result<Tensor> {
        for p in [denoised, center_noisy, center_denoised] {
            noisy.check_against(p)?;
        }
        if noisy.num_levels() != self.levels.len() {
            return Err(Error::Pyramid(format!(
                "aligner has {} levels, pyramid has {}",
                self.levels.len(),
                noisy.num_levels()
            )));
        }
        let blend = |b: &(Conv2d, Conv2d), warped: &Tensor, coarse: &Tensor| -> Result<Tensor> {
            let x = Tensor::cat(&[warped, &upsample2x(coarse)?], 1)?;
            b.1.forward(&leaky_relu(&b.0.forward(&x)?)?)
        };

        let mut field: Option<OffsetField> = None;
        let mut aligned_n: Option<Tensor> = None;
        let mut aligned_d: Option<Tensor> = None;
        for (idx, lv) in self.levels.iter().enumerate().rev() {
            let l = idx + 1;
            let nd = denoised.level(l);
            let cd = center_denoised.level(l);
            let f = lv.predictor.forward(nd, cd, field.as_ref())?;
            let wn = lv.dconv.forward(noisy.level(l), &f)?;
            let wd = lv.dconv.forward(nd, &f)?;
            let (an, ad) = match (&lv.blend, &aligned_n, &aligned_d) {
                (Some(b), Some(pn), Some(pd)) => {
                    let (an, ad) = (blend(b, &wn, pn)?, blend(b, &wd, pd)?);
                    if l > 1 {
                        (leaky_relu(&an)?, leaky_relu(&ad)?)
                    } else {
                        (an, ad)
                    }
                }
                _ => (leaky_relu(&wn)?, leaky_relu(&wd)?),
            };
            if let Some(t) = trace.as_deref_mut() {
                t.levels.push(LevelTrace {
                    level: l,
                    predictor_inputs: vec![nd.id(), cd.id()],
                    noisy_offsets: f.offsets.id(),
                    denoised_offsets: Some(f.offsets.id()),
                    field: f.clone(),
                });
            }
            aligned_n = Some(an);
            aligned_d = Some(ad);
            field = Some(f);
        }
        let (aligned_n, aligned_d) = (aligned_n.expect("at least one level"), aligned_d.expect("at least one level"));
        let rf = self.refine_predictor.forward(&aligned_d, center_denoised.level(1), None)?;
        let out = leaky_relu(&self.refine_dconv.forward(&aligned_n, &rf)?)?;
        if let Some(t) = trace {
            t.refinement = Some(LevelTrace {
                level: 1,
                predictor_inputs: vec![aligned_d.id(), center_denoised.level(1).id()],
                noisy_offsets: rf.offsets.id(),
                denoised_offsets: None,
                field: rf,
            });
        }
        crop_hw(&out, noisy.orig)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use rand::{Rng, SeedableRng};

    fn rand_tensor(seed: u64, shape: &[usize]) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f32> = (0..n).map(|_| rng.random::<f32>()).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn pyramid_shapes() {
        let mut s = ParamStore::new(1, DType::F32);
        let fx = FeatureExtractor::new(&mut s, "fx", 1, 16, 3).unwrap();
        let p = fx.forward(&rand_tensor(2, &[1, 1, 128, 128])).unwrap();
        let dims: Vec<_> = p.levels.iter().map(|t| t.dims().to_vec()).collect();
        assert_eq!(dims, vec![vec![1, 16, 128, 128], vec![1, 16, 64, 64], vec![1, 16, 32, 32]]);
    }

    #[test]
    fn zero_input_gives_zero_features() {
        let mut s = ParamStore::new(1, DType::F32);
        let fx = FeatureExtractor::new(&mut s, "fx", 1, 4, 3).unwrap();
        let p = fx.forward(&Tensor::zeros((1, 1, 12, 12), DType::F32, &Device::Cpu).unwrap()).unwrap();
        for t in &p.levels {
            assert_eq!(t.abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap(), 0.0);
        }
    }

    #[test]
    fn fresh_predictor_gives_zero_offsets_and_half_modulation() {
        let mut s = ParamStore::new(1, DType::F32);
        let p = OffsetPredictor::new(&mut s, "p", 4, 3, false, KernelGeometry::K3).unwrap();
        let f = p.forward(&rand_tensor(1, &[1, 4, 6, 6]), &rand_tensor(2, &[1, 4, 6, 6]), None).unwrap();
        assert_eq!(f.offsets.dims(), &[1, 18, 6, 6]);
        assert!(f.offsets.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().all(|&v| v == 0.0));
        assert!(f.modulation.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn coarser_offsets_are_doubled() {
        let mut s = ParamStore::new(1, DType::F32);
        let p = OffsetPredictor::new(&mut s, "p", 4, 1, true, KernelGeometry::K3).unwrap();
        let mut dx_dy = vec![0f32; 18 * 16];
        for k in 0..9 {
            for i in 0..16 {
                dx_dy[2 * k * 16 + i] = 1.0;
            }
        }
        let coarse = OffsetField {
            offsets: Tensor::from_vec(dx_dy, (1, 18, 4, 4), &Device::Cpu).unwrap(),
            modulation: Tensor::ones((1, 9, 4, 4), DType::F32, &Device::Cpu).unwrap(),
            level: 2,
        };
        let f = p
            .forward(&rand_tensor(1, &[1, 4, 8, 8]), &rand_tensor(2, &[1, 4, 8, 8]), Some(&coarse))
            .unwrap();
        let (dx, dy) = f.mean_displacement().unwrap();
        assert_eq!((dx, dy), (2.0, 0.0));
        let wrong = OffsetField { level: 3, ..coarse };
        assert!(matches!(
            p.forward(&rand_tensor(1, &[1, 4, 8, 8]), &rand_tensor(2, &[1, 4, 8, 8]), Some(&wrong)),
            Err(Error::Pyramid(_))
        ));
    }

    #[test]
    fn aligned_output_matches_center_shape() {
        let mut s = ParamStore::new(3, DType::F32);
        let fx = FeatureExtractor::new(&mut s, "fx", 1, 8, 3).unwrap();
        let al = PyramidAligner::new(&mut s, "al", 8, 3).unwrap();
        let n = fx.forward(&rand_tensor(1, &[2, 1, 10, 14])).unwrap();
        let c = fx.forward(&rand_tensor(2, &[2, 1, 10, 14])).unwrap();
        let mut trace = AlignTrace::default();
        let out = al.align(&n, &n, &c, &c, Some(&mut trace)).unwrap();
        assert_eq!(out.dims(), &[2, 8, 10, 14]);
        assert_eq!(trace.levels.len(), 3);
        for lt in &trace.levels {
            assert_eq!(Some(lt.noisy_offsets), lt.denoised_offsets);
        }
    }
}
