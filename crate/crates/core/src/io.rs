//! Frame and sequence files.
//!
//! A sequence directory holds zero-padded, consecutively indexed 16-bit
//! binary graymaps (`0000000.pgm`, `0000001.pgm`, ...) plus a `meta.toml`
//! sidecar. sRGB frames are binary pixmaps (`.ppm`, 8 or 16 bit).

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::bayer::{denormalize, BayerFrame, BayerPattern, RawMeta, Sequence, SequenceRole, SrgbFrame, SynthesisRecord};
use crate::error::{Error, Result};

pub const SIDECAR_NAME: &str = "meta.toml";

/// Contents of a sequence's `meta.toml`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub pattern: String,
    pub bit_depth: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub black_level: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub white_level: Option<f32>,
    pub iso: u32,
    pub frame_rate: f32,
    pub role: SequenceRole,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthesis: Option<SynthesisRecord>,
}

impl Sidecar {
    pub fn from_sequence(seq: &Sequence) -> Self {
        let meta = seq.meta();
        Sidecar {
            pattern: meta.pattern.to_string(),
            bit_depth: meta.bit_depth,
            black_level: Some(meta.black_level),
            white_level: Some(meta.white_level),
            iso: seq.iso,
            frame_rate: seq.frame_rate,
            role: seq.role,
            synthesis: seq.synthesis,
        }
    }

    /// Resolves the sensor description, defaulting missing levels to the
    /// full code range.
    pub fn raw_meta(&self) -> Result<RawMeta> {
        let pattern: BayerPattern = self.pattern.parse()?;
        if self.bit_depth == 0 || self.bit_depth > 16 {
            return Err(Error::Metadata(format!("bit_depth {} outside 1..=16", self.bit_depth)));
        }
        let full = RawMeta::full_range(pattern, self.bit_depth);
        if self.black_level.is_none() || self.white_level.is_none() {
            log::warn!(
                "sidecar omits black/white level, assuming {}..{}",
                self.black_level.unwrap_or(full.black_level),
                self.white_level.unwrap_or(full.white_level)
            );
        }
        RawMeta::new(
            pattern,
            self.bit_depth,
            self.black_level.unwrap_or(full.black_level),
            self.white_level.unwrap_or(full.white_level),
        )
        .map_err(|e| Error::Metadata(e.to_string()))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(SIDECAR_NAME);
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::Metadata(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Metadata(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Metadata(e.to_string()))?;
        let path = dir.join(SIDECAR_NAME);
        fs::write(&path, text).map_err(|e| Error::io(path, e))
    }
}

pub fn frame_file_name(index: u64, ext: &str) -> String {
    format!("{index:07}.{ext}")
}

/// Indexed files with the given extension, sorted by index, with the
/// requirement that indices form one gap-free run.
pub fn indexed_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut found = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some(ext) {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        if let Ok(index) = stem.parse::<u64>() {
            found.insert(index, path);
        }
    }
    let mut expected = match found.keys().next() {
        Some(&first) => first,
        None => {
            return Err(Error::Consistency(format!(
                "no indexed .{ext} frames in {}",
                dir.display()
            )))
        }
    };
    for &index in found.keys() {
        if index != expected {
            return Err(Error::Gap {
                dir: dir.to_path_buf(),
                expected,
                found: index,
            });
        }
        expected += 1;
    }
    Ok(found.into_values().collect())
}

pub fn load_sequence(dir: &Path) -> Result<Sequence> {
    let sidecar = Sidecar::read(dir)?;
    let meta = sidecar.raw_meta()?;
    let files = indexed_files(dir, "pgm")?;
    let mut frames = Vec::with_capacity(files.len());
    for path in &files {
        let data = read_pgm(path)?;
        let (h, w) = data.dim();
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Consistency(format!(
                "{} has odd dimensions {h}x{w}",
                path.display()
            )));
        }
        if let Some(first) = frames.first().map(|f: &BayerFrame| f.data.dim()) {
            if first != (h, w) {
                return Err(Error::Consistency(format!(
                    "{} is {h}x{w}, expected {}x{}",
                    path.display(),
                    first.0,
                    first.1
                )));
            }
        }
        frames.push(BayerFrame::new(data, meta).map_err(|e| Error::Consistency(format!("{}: {e}", path.display())))?);
    }
    let mut seq = Sequence::new(frames, sidecar.iso, sidecar.frame_rate, sidecar.role)?;
    seq.synthesis = sidecar.synthesis;
    Ok(seq)
}

/// Writes frames as digital numbers; normalized frames are denormalized
/// (rounded and clipped to the code range) first.
pub fn save_sequence(seq: &Sequence, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, frame) in seq.frames.iter().enumerate() {
        let dn = if frame.normalized { denormalize(frame)? } else { frame.clone() };
        write_pgm(&dir.join(frame_file_name(i as u64, "pgm")), &dn.data, dn.meta.bit_depth)?;
    }
    Sidecar::from_sequence(seq).write(dir)
}

struct Header<'a> {
    magic: &'a [u8],
    width: usize,
    height: usize,
    maxval: u32,
    body: &'a [u8],
}

fn parse_header<'a>(bytes: &'a [u8], path: &Path) -> Result<Header<'a>> {
    let mut pos = 0;
    let mut fields: Vec<&[u8]> = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, "truncated header"));
        }
        fields.push(&bytes[start..pos]);
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let num = |b: &[u8]| -> Result<usize> {
        std::str::from_utf8(b)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(path, "bad header number"))
    };
    let maxval = num(fields[3])? as u32;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::format(path, format!("maxval {maxval} out of range")));
    }
    Ok(Header {
        magic: fields[0],
        width: num(fields[1])?,
        height: num(fields[2])?,
        maxval,
        body: bytes.get(pos..).unwrap_or(&[]),
    })
}

fn decode_samples(header: &Header<'_>, count: usize, path: &Path) -> Result<Vec<f32>> {
    let wide = header.maxval > 255;
    let need = count * if wide { 2 } else { 1 };
    if header.body.len() < need {
        return Err(Error::format(path, "raster shorter than header declares"));
    }
    Ok(if wide {
        header.body[..need]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f32)
            .collect()
    } else {
        header.body[..need].iter().map(|&b| b as f32).collect()
    })
}

/// Reads a binary graymap as raw digital numbers.
pub fn read_pgm(path: &Path) -> Result<Array2<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let header = parse_header(&bytes, path)?;
    if header.magic != b"P5" {
        return Err(Error::format(path, "not a binary graymap (P5)"));
    }
    let samples = decode_samples(&header, header.width * header.height, path)?;
    Array2::from_shape_vec((header.height, header.width), samples).map_err(|e| Error::format(path, e.to_string()))
}

/// Writes digital numbers as a big-endian binary graymap with
/// `maxval = 2^bit_depth - 1`.
pub fn write_pgm(path: &Path, data: &Array2<f32>, bit_depth: u32) -> Result<()> {
    let maxval = ((1u32 << bit_depth) - 1).min(65535);
    let (h, w) = data.dim();
    let mut buf = format!("P5\n{w} {h}\n{maxval}\n").into_bytes();
    for &v in data.iter() {
        let code = v.round().clamp(0.0, maxval as f32) as u16;
        if maxval > 255 {
            buf.extend_from_slice(&code.to_be_bytes());
        } else {
            buf.push(code as u8);
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<SrgbFrame> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let header = parse_header(&bytes, path)?;
    if header.magic != b"P6" {
        return Err(Error::format(path, "not a binary pixmap (P6)"));
    }
    let (h, w) = (header.height, header.width);
    let samples = decode_samples(&header, 3 * h * w, path)?;
    let scale = header.maxval as f32;
    let data = Array3::from_shape_fn((3, h, w), |(c, y, x)| samples[(y * w + x) * 3 + c] / scale);
    SrgbFrame::new(data)
}

pub fn write_ppm(path: &Path, frame: &SrgbFrame, bits: u32) -> Result<()> {
    if bits != 8 && bits != 16 {
        return Err(Error::Parameter(format!("pixmap depth must be 8 or 16, got {bits}")));
    }
    let maxval = if bits == 8 { 255u32 } else { 65535 };
    let (_, h, w) = frame.data.dim();
    let mut buf = format!("P6\n{w} {h}\n{maxval}\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let code = (frame.data[[c, y, x]].clamp(0.0, 1.0) * maxval as f32).round() as u16;
                if bits == 16 {
                    buf.extend_from_slice(&code.to_be_bytes());
                } else {
                    buf.push(code as u8);
                }
            }
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_srgb_dir(dir: &Path) -> Result<Vec<SrgbFrame>> {
    indexed_files(dir, "ppm")?.iter().map(|p| read_ppm(p)).collect()
}

pub fn save_srgb_dir(frames: &[SrgbFrame], dir: &Path, bits: u32) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, f) in frames.iter().enumerate() {
        write_ppm(&dir.join(frame_file_name(i as u64, "ppm")), f, bits)?;
    }
    Ok(())
}

/// Single-channel portable float map, used for debug dumps of offset fields.
pub fn write_pfm(path: &Path, data: &Array2<f32>) -> Result<()> {
    let (h, w) = data.dim();
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut buf = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    // rows run bottom to top
    for y in (0..h).rev() {
        for x in 0..w {
            buf.extend_from_slice(&data[[y, x]].to_le_bytes());
        }
    }
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bayer::{normalize, SequenceRole};

    fn write_seq(dir: &Path, indices: &[u64], dims: &[(usize, usize)]) {
        let meta = RawMeta::new(BayerPattern::Rggb, 12, 240.0, 4095.0).unwrap();
        for (&i, &(h, w)) in indices.iter().zip(dims) {
            let data = Array2::from_shape_fn((h, w), |(y, x)| (240 + y * 7 + x * 3 + i as usize) as f32);
            write_pgm(&dir.join(frame_file_name(i, "pgm")), &data, meta.bit_depth).unwrap();
        }
        Sidecar {
            pattern: "RGGB".into(),
            bit_depth: 12,
            black_level: Some(240.0),
            white_level: Some(4095.0),
            iso: 25600,
            frame_rate: 20.0,
            role: SequenceRole::Noisy,
            synthesis: None,
        }
        .write(dir)
        .unwrap();
    }

    #[test]
    fn loads_seven_frame_sequence() {
        let dir = tempfile::tempdir().unwrap();
        write_seq(dir.path(), &[0, 1, 2, 3, 4, 5, 6], &[(8, 10); 7]);
        let seq = load_sequence(dir.path()).unwrap();
        assert_eq!(seq.len(), 7);
        assert_eq!(seq.iso, 25600);
        assert_eq!(seq.frames[3].data[[1, 2]], (240 + 7 + 6 + 3) as f32);
    }

    #[test]
    fn index_gap_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        write_seq(dir.path(), &[0, 1, 3], &[(4, 4); 3]);
        let err = load_sequence(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Gap { expected: 2, found: 3, .. }), "{err}");
    }

    #[test]
    fn odd_width_is_a_consistency_error() {
        let dir = tempfile::tempdir().unwrap();
        write_seq(dir.path(), &[0, 1, 2], &[(4, 4), (4, 5), (4, 4)]);
        assert!(matches!(load_sequence(dir.path()), Err(Error::Consistency(_))));
    }

    #[test]
    fn missing_sidecar_is_a_metadata_error() {
        let dir = tempfile::tempdir().unwrap();
        write_pgm(&dir.path().join("0000000.pgm"), &Array2::zeros((2, 2)), 12).unwrap();
        assert!(matches!(load_sequence(dir.path()), Err(Error::Metadata(_))));
    }

    #[test]
    fn missing_levels_default_to_full_range() {
        let side = Sidecar {
            pattern: "bggr".into(),
            bit_depth: 10,
            black_level: None,
            white_level: None,
            iso: 100,
            frame_rate: 20.0,
            role: SequenceRole::Clean,
            synthesis: None,
        };
        let meta = side.raw_meta().unwrap();
        assert_eq!((meta.black_level, meta.white_level), (0.0, 1023.0));
    }

    #[test]
    fn save_then_load_preserves_codes() {
        let dir = tempfile::tempdir().unwrap();
        write_seq(dir.path(), &[0, 1, 2], &[(6, 6); 3]);
        let seq = load_sequence(dir.path()).unwrap();
        let out = dir.path().join("copy");
        save_sequence(&seq.normalized().unwrap(), &out).unwrap();
        let back = load_sequence(&out).unwrap();
        assert_eq!(back.frames, seq.frames);
        assert_eq!(normalize(&back.frames[0]).unwrap(), normalize(&seq.frames[0]).unwrap());
    }

    #[test]
    fn ppm_roundtrip_16_bit() {
        let dir = tempfile::tempdir().unwrap();
        let data = Array3::from_shape_fn((3, 4, 6), |(c, y, x)| ((c * 31 + y * 7 + x) % 64) as f32 / 63.0);
        let f = SrgbFrame::new(data).unwrap();
        let path = dir.path().join("a.ppm");
        write_ppm(&path, &f, 16).unwrap();
        let back = read_ppm(&path).unwrap();
        for (a, b) in f.data.iter().zip(back.data.iter()) {
            assert!((a - b).abs() < 1.0 / 65535.0);
        }
    }

    #[test]
    fn pgm_header_with_comment() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pgm");
        fs::write(&path, b"P5\n# made by hand\n2 1\n255\n\x07\x09").unwrap();
        assert_eq!(read_pgm(&path).unwrap(), ndarray::array![[7.0, 9.0]]);
    }
}
