//! Bayer mosaic frames, RGBG packing and level normalization.
//!
//! Packed planes are always ordered `[R, G1, B, G2]`, where `G1` is the green
//! sample sharing a row with red. Everything downstream of [`pack`] is
//! therefore independent of the sensor's color-filter phase.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index of each canonical plane inside a [`PackedFrame`].
pub const PLANE_R: usize = 0;
pub const PLANE_G1: usize = 1;
pub const PLANE_B: usize = 2;
pub const PLANE_G2: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum BayerPattern {
    Rggb,
    Bggr,
    Grbg,
    Gbrg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CfaColor {
    Red,
    Green,
    Blue,
}

impl CfaColor {
    /// Channel index in an RGB triple.
    pub fn rgb_index(self) -> usize {
        match self {
            CfaColor::Red => 0,
            CfaColor::Green => 1,
            CfaColor::Blue => 2,
        }
    }
}

impl BayerPattern {
    pub const ALL: [BayerPattern; 4] = [
        BayerPattern::Rggb,
        BayerPattern::Bggr,
        BayerPattern::Grbg,
        BayerPattern::Gbrg,
    ];

    /// `(row, col)` of each canonical plane `[R, G1, B, G2]` inside the 2×2 tile.
    pub fn plane_offsets(self) -> [(usize, usize); 4] {
        match self {
            BayerPattern::Rggb => [(0, 0), (0, 1), (1, 1), (1, 0)],
            BayerPattern::Bggr => [(1, 1), (1, 0), (0, 0), (0, 1)],
            BayerPattern::Grbg => [(0, 1), (0, 0), (1, 0), (1, 1)],
            BayerPattern::Gbrg => [(1, 0), (1, 1), (0, 1), (0, 0)],
        }
    }

    /// Canonical plane index of the tile position `(row % 2, col % 2)`.
    pub fn plane_at(self, row: usize, col: usize) -> usize {
        let pos = (row % 2, col % 2);
        self.plane_offsets()
            .iter()
            .position(|&p| p == pos)
            .expect("every tile position maps to a plane")
    }

    pub fn color_at(self, row: usize, col: usize) -> CfaColor {
        match self.plane_at(row, col) {
            PLANE_R => CfaColor::Red,
            PLANE_B => CfaColor::Blue,
            _ => CfaColor::Green,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BayerPattern::Rggb => "RGGB",
            BayerPattern::Bggr => "BGGR",
            BayerPattern::Grbg => "GRBG",
            BayerPattern::Gbrg => "GBRG",
        }
    }
}

impl fmt::Display for BayerPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BayerPattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "RGGB" => Ok(BayerPattern::Rggb),
            "BGGR" => Ok(BayerPattern::Bggr),
            "GRBG" => Ok(BayerPattern::Grbg),
            "GBRG" => Ok(BayerPattern::Gbrg),
            _ => Err(Error::Pattern(s.to_string())),
        }
    }
}

/// Sensor description shared by every frame of a sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawMeta {
    pub pattern: BayerPattern,
    pub bit_depth: u32,
    pub black_level: f32,
    pub white_level: f32,
}

impl RawMeta {
    pub fn new(pattern: BayerPattern, bit_depth: u32, black_level: f32, white_level: f32) -> Result<Self> {
        let meta = RawMeta {
            pattern,
            bit_depth,
            black_level,
            white_level,
        };
        meta.validate()?;
        Ok(meta)
    }

    /// Full-range levels for the given bit depth.
    pub fn full_range(pattern: BayerPattern, bit_depth: u32) -> Self {
        RawMeta {
            pattern,
            bit_depth,
            black_level: 0.0,
            white_level: max_code(bit_depth),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bit_depth == 0 || self.bit_depth > 16 {
            return Err(Error::Parameter(format!(
                "bit depth {} outside 1..=16",
                self.bit_depth
            )));
        }
        if !(self.black_level < self.white_level) {
            return Err(Error::Parameter(format!(
                "black level {} must be below white level {}",
                self.black_level, self.white_level
            )));
        }
        if self.black_level < 0.0 || self.white_level > max_code(self.bit_depth) {
            return Err(Error::Parameter(format!(
                "levels [{}, {}] outside the {}-bit code range",
                self.black_level, self.white_level, self.bit_depth
            )));
        }
        Ok(())
    }
}

fn max_code(bit_depth: u32) -> f32 {
    ((1u64 << bit_depth) - 1) as f32
}

/// One raw mosaic frame.
///
/// Unnormalized frames hold digital numbers in `[0, 2^bit_depth)`. Normalized
/// frames hold fractions of the black-to-white range; clean data lies in
/// `[0, 1]` while synthesized noisy readings may fall slightly outside it.
#[derive(Debug, Clone, PartialEq)]
pub struct BayerFrame {
    pub data: Array2<f32>,
    pub meta: RawMeta,
    pub normalized: bool,
}

impl BayerFrame {
    /// Wraps digital numbers, checking dimensions and code range.
    pub fn new(data: Array2<f32>, meta: RawMeta) -> Result<Self> {
        meta.validate()?;
        check_even(data.dim())?;
        let limit = (1u64 << meta.bit_depth) as f32;
        if let Some(v) = data.iter().find(|v| !(**v >= 0.0 && **v < limit)) {
            return Err(Error::Parameter(format!(
                "value {v} outside [0, 2^{})",
                meta.bit_depth
            )));
        }
        Ok(BayerFrame {
            data,
            meta,
            normalized: false,
        })
    }

    /// Wraps data already expressed in normalized units.
    pub fn from_normalized(data: Array2<f32>, meta: RawMeta) -> Result<Self> {
        meta.validate()?;
        check_even(data.dim())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("non-finite sample".into()));
        }
        Ok(BayerFrame {
            data,
            meta,
            normalized: true,
        })
    }

    pub fn height(&self) -> usize {
        self.data.nrows()
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }

    pub fn pattern(&self) -> BayerPattern {
        self.meta.pattern
    }

    pub fn require_normalized(&self) -> Result<()> {
        if self.normalized {
            Ok(())
        } else {
            Err(Error::State("frame must be normalized".into()))
        }
    }

    /// Same frame with its values replaced, keeping metadata and state.
    pub fn with_data(&self, data: Array2<f32>) -> Result<Self> {
        check_even(data.dim())?;
        Ok(BayerFrame {
            data,
            meta: self.meta,
            normalized: self.normalized,
        })
    }

    /// Crop at an even offset so the Bayer phase is preserved.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top % 2 != 0 || left % 2 != 0 {
            return Err(Error::Dimension(format!(
                "crop origin ({top}, {left}) would shift the bayer phase"
            )));
        }
        if top + height > self.height() || left + width > self.width() {
            return Err(Error::Dimension(format!(
                "crop {height}x{width}+{top}+{left} exceeds {}x{}",
                self.height(),
                self.width()
            )));
        }
        self.with_data(
            self.data
                .slice(s![top..top + height, left..left + width])
                .to_owned(),
        )
    }
}

fn check_even((h, w): (usize, usize)) -> Result<()> {
    if h == 0 || w == 0 || h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Dimension(format!(
            "bayer frame must have positive even dimensions, got {h}x{w}"
        )));
    }
    Ok(())
}

/// Four half-resolution color planes `[R, G1, B, G2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedFrame {
    pub planes: [Array2<f32>; 4],
    pub meta: RawMeta,
    pub normalized: bool,
}

impl PackedFrame {
    pub fn from_planes(planes: Vec<Array2<f32>>, meta: RawMeta, normalized: bool) -> Result<Self> {
        let planes: [Array2<f32>; 4] = planes
            .try_into()
            .map_err(|v: Vec<_>| Error::Dimension(format!("expected 4 planes, got {}", v.len())))?;
        let dim = planes[0].dim();
        if dim.0 == 0 || dim.1 == 0 || planes.iter().any(|p| p.dim() != dim) {
            return Err(Error::Dimension(format!(
                "packed planes must share one non-empty size, got {:?}",
                planes.iter().map(|p| p.dim()).collect::<Vec<_>>()
            )));
        }
        Ok(PackedFrame {
            planes,
            meta,
            normalized,
        })
    }

    pub fn plane_dim(&self) -> (usize, usize) {
        self.planes[0].dim()
    }

    /// Planes stacked as a `4×H×W` array.
    pub fn to_array(&self) -> Array3<f32> {
        let (h, w) = self.plane_dim();
        let mut out = Array3::zeros((4, h, w));
        for (i, p) in self.planes.iter().enumerate() {
            out.slice_mut(s![i, .., ..]).assign(p);
        }
        out
    }
}

pub fn pack(frame: &BayerFrame) -> Result<PackedFrame> {
    check_even(frame.data.dim())?;
    let planes = frame
        .pattern()
        .plane_offsets()
        .map(|(r, c)| frame.data.slice(s![r..;2, c..;2]).to_owned());
    Ok(PackedFrame {
        planes,
        meta: frame.meta,
        normalized: frame.normalized,
    })
}

pub fn unpack(packed: &PackedFrame) -> Result<BayerFrame> {
    let (h, w) = packed.plane_dim();
    if packed.planes.iter().any(|p| p.dim() != (h, w)) {
        return Err(Error::Dimension("packed planes differ in size".into()));
    }
    let mut data = Array2::zeros((2 * h, 2 * w));
    for (plane, (r, c)) in packed.planes.iter().zip(packed.meta.pattern.plane_offsets()) {
        data.slice_mut(s![r..;2, c..;2]).assign(plane);
    }
    Ok(BayerFrame {
        data,
        meta: packed.meta,
        normalized: packed.normalized,
    })
}

/// Black-level subtraction and white-level scaling, clamped to `[0, 1]`.
pub fn normalize(frame: &BayerFrame) -> Result<BayerFrame> {
    if frame.normalized {
        return Err(Error::State("frame is already normalized".into()));
    }
    let RawMeta {
        black_level: black,
        white_level: white,
        ..
    } = frame.meta;
    if !(black < white) {
        return Err(Error::Parameter(format!(
            "black level {black} must be below white level {white}"
        )));
    }
    let range = white as f64 - black as f64;
    let data = frame
        .data
        .mapv(|v| ((v as f64 - black as f64) / range).clamp(0.0, 1.0) as f32);
    Ok(BayerFrame {
        data,
        meta: frame.meta,
        normalized: true,
    })
}

/// Inverse of [`normalize`], rounding to the nearest code and clipping to the
/// sensor range.
pub fn denormalize(frame: &BayerFrame) -> Result<BayerFrame> {
    frame.require_normalized()?;
    let black = frame.meta.black_level as f64;
    let range = frame.meta.white_level as f64 - black;
    let max = max_code(frame.meta.bit_depth) as f64;
    let data = frame
        .data
        .mapv(|v| (v as f64 * range + black).round().clamp(0.0, max) as f32);
    Ok(BayerFrame {
        data,
        meta: frame.meta,
        normalized: false,
    })
}

/// Three-channel display frame, `3×H×W`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SrgbFrame {
    pub data: Array3<f32>,
}

impl SrgbFrame {
    pub fn new(data: Array3<f32>) -> Result<Self> {
        if data.dim().0 != 3 {
            return Err(Error::Dimension(format!(
                "sRGB frame needs 3 channels, got {}",
                data.dim().0
            )));
        }
        if let Some(v) = data.iter().find(|v| !(**v >= 0.0 && **v <= 1.0)) {
            return Err(Error::Parameter(format!("sRGB value {v} outside [0, 1]")));
        }
        Ok(SrgbFrame { data })
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SequenceRole {
    Noisy,
    Clean,
}

/// Record of how a noisy sequence was synthesized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthesisRecord {
    pub sigma_s_sq: f64,
    pub sigma_r: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub frames: Vec<BayerFrame>,
    pub iso: u32,
    pub frame_rate: f32,
    pub role: SequenceRole,
    pub synthesis: Option<SynthesisRecord>,
}

impl Sequence {
    pub fn new(frames: Vec<BayerFrame>, iso: u32, frame_rate: f32, role: SequenceRole) -> Result<Self> {
        let seq = Sequence {
            frames,
            iso,
            frame_rate,
            role,
            synthesis: None,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .frames
            .first()
            .ok_or_else(|| Error::Consistency("sequence has no frames".into()))?;
        for (i, f) in self.frames.iter().enumerate().skip(1) {
            if f.data.dim() != first.data.dim() {
                return Err(Error::Consistency(format!(
                    "frame {i} is {:?}, frame 0 is {:?}",
                    f.data.dim(),
                    first.data.dim()
                )));
            }
            if f.meta != first.meta || f.normalized != first.normalized {
                return Err(Error::Consistency(format!(
                    "frame {i} metadata differs from frame 0"
                )));
            }
        }
        Ok(())
    }

    /// Checks there is enough temporal context for a window of radius `radius`.
    pub fn require_window(&self, radius: usize) -> Result<()> {
        if self.frames.len() < 2 * radius + 1 {
            return Err(Error::Consistency(format!(
                "sequence of {} frames is shorter than a {}-frame window",
                self.frames.len(),
                2 * radius + 1
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn meta(&self) -> RawMeta {
        self.frames[0].meta
    }

    pub fn dim(&self) -> (usize, usize) {
        self.frames[0].data.dim()
    }

    pub fn normalized(&self) -> Result<Sequence> {
        let frames = self
            .frames
            .iter()
            .map(|f| if f.normalized { Ok(f.clone()) } else { normalize(f) })
            .collect::<Result<Vec<_>>>()?;
        Ok(Sequence { frames, ..self.clone() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn meta(pattern: BayerPattern) -> RawMeta {
        RawMeta::full_range(pattern, 16)
    }

    #[test]
    fn rggb_tile_packs_in_canonical_order() {
        let f = BayerFrame::new(array![[100., 50.], [60., 30.]], meta(BayerPattern::Rggb)).unwrap();
        let p = pack(&f).unwrap();
        assert_eq!(p.planes[PLANE_R], array![[100.]]);
        assert_eq!(p.planes[PLANE_G1], array![[50.]]);
        assert_eq!(p.planes[PLANE_G2], array![[60.]]);
        assert_eq!(p.planes[PLANE_B], array![[30.]]);
    }

    #[test]
    fn bggr_tile_packs_to_same_planes_as_rggb() {
        let a = BayerFrame::new(array![[100., 50.], [60., 30.]], meta(BayerPattern::Rggb)).unwrap();
        let b = BayerFrame::new(array![[30., 60.], [50., 100.]], meta(BayerPattern::Bggr)).unwrap();
        assert_eq!(pack(&a).unwrap().planes, pack(&b).unwrap().planes);
    }

    #[test]
    fn constant_frame_packs_to_constant_planes() {
        for pattern in BayerPattern::ALL {
            let f = BayerFrame::new(Array2::from_elem((6, 8), 17.0), meta(pattern)).unwrap();
            let p = pack(&f).unwrap();
            for plane in &p.planes {
                assert_eq!(plane.dim(), (3, 4));
                assert!(plane.iter().all(|&v| v == 17.0));
            }
            let back = unpack(&PackedFrame::from_planes(
                vec![Array2::from_elem((3, 4), 5.0); 4],
                f.meta,
                false,
            ).unwrap()).unwrap();
            assert!(back.data.iter().all(|&v| v == 5.0));
        }
    }

    #[test]
    fn odd_dimensions_are_rejected() {
        let err = BayerFrame::new(Array2::zeros((3, 4)), meta(BayerPattern::Rggb)).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn unknown_pattern_is_rejected() {
        assert!(matches!("RGBW".parse::<BayerPattern>(), Err(Error::Pattern(_))));
        assert_eq!("gbrg".parse::<BayerPattern>().unwrap(), BayerPattern::Gbrg);
    }

    #[test]
    fn mismatched_planes_are_rejected() {
        let planes = vec![
            Array2::zeros((2, 2)),
            Array2::zeros((2, 2)),
            Array2::zeros((2, 3)),
            Array2::zeros((2, 2)),
        ];
        let err = PackedFrame::from_planes(planes, meta(BayerPattern::Rggb), false).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn normalize_anchors_and_midpoint() {
        let m = RawMeta::new(BayerPattern::Rggb, 12, 240.0, 4095.0).unwrap();
        let f = BayerFrame {
            data: array![[240.0, 4095.0], [2167.5, 100.0]],
            meta: m,
            normalized: false,
        };
        let n = normalize(&f).unwrap();
        assert_eq!(n.data[[0, 0]], 0.0);
        assert_eq!(n.data[[0, 1]], 1.0);
        assert!((n.data[[1, 0]] - 0.5).abs() < 1e-7);
        // sub-black readings clamp to zero
        assert_eq!(n.data[[1, 1]], 0.0);
        assert!(matches!(normalize(&n), Err(Error::State(_))));
    }

    #[test]
    fn inverted_levels_are_a_parameter_error() {
        let bad = RawMeta {
            pattern: BayerPattern::Rggb,
            bit_depth: 12,
            black_level: 500.0,
            white_level: 400.0,
        };
        let f = BayerFrame {
            data: Array2::zeros((2, 2)),
            meta: bad,
            normalized: false,
        };
        assert!(matches!(normalize(&f), Err(Error::Parameter(_))));
    }

    #[test]
    fn packed_planes_hold_a_single_color() {
        // 4-neighbours inside a plane come from the same filter color.
        for pattern in BayerPattern::ALL {
            for (plane, (r, c)) in pattern.plane_offsets().into_iter().enumerate() {
                let color = pattern.color_at(r, c);
                for (dr, dc) in [(0, 2), (2, 0), (2, 2)] {
                    assert_eq!(pattern.color_at(r + dr, c + dc), color);
                    assert_eq!(pattern.plane_at(r + dr, c + dc), plane);
                }
            }
            assert_eq!(pattern.color_at(pattern.plane_offsets()[PLANE_R].0, pattern.plane_offsets()[PLANE_R].1), CfaColor::Red);
            assert_eq!(pattern.color_at(pattern.plane_offsets()[PLANE_B].0, pattern.plane_offsets()[PLANE_B].1), CfaColor::Blue);
            // G1 shares a row with R
            assert_eq!(pattern.plane_offsets()[PLANE_G1].0, pattern.plane_offsets()[PLANE_R].0);
        }
    }

    fn arb_frame() -> impl Strategy<Value = BayerFrame> {
        (1usize..6, 1usize..6, 0usize..4).prop_flat_map(|(h, w, p)| {
            proptest::collection::vec(0u16..=u16::MAX, 4 * h * w).prop_map(move |v| {
                let data = Array2::from_shape_vec((2 * h, 2 * w), v.into_iter().map(f32::from).collect()).unwrap();
                BayerFrame::new(data, RawMeta::full_range(BayerPattern::ALL[p], 16)).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn pack_unpack_roundtrip(f in arb_frame()) {
            prop_assert_eq!(unpack(&pack(&f).unwrap()).unwrap(), f);
        }

        #[test]
        fn red_plane_holds_red_samples(f in arb_frame()) {
            let p = pack(&f).unwrap();
            let pattern = f.pattern();
            for ((r, c), v) in f.data.indexed_iter() {
                if pattern.color_at(r, c) == CfaColor::Red {
                    prop_assert_eq!(p.planes[PLANE_R][[r / 2, c / 2]], *v);
                }
            }
        }

        #[test]
        fn normalize_denormalize_within_one_code(bits in 8u32..=16, black_frac in 0.0f32..0.2, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let max = ((1u64 << bits) - 1) as f32;
            let black = (black_frac * max).floor();
            let m = RawMeta::new(BayerPattern::Grbg, bits, black, max).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data = Array2::from_shape_fn((4, 6), |_| rng.random_range(black as u32..=max as u32) as f32);
            let f = BayerFrame::new(data, m).unwrap();
            let back = denormalize(&normalize(&f).unwrap()).unwrap();
            for (a, b) in f.data.iter().zip(back.data.iter()) {
                prop_assert!((a - b).abs() <= 1.0);
            }
        }
    }
}
