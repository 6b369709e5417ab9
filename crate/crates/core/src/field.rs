//! Gridded scalar fields, physical/model-space normalization, and the RGF
//! on-disk format.
//!
//! An RGF file is a single UTF-8 JSON header line terminated by `'\n'`,
//! followed by the raw little-endian `f32` values in row-major order, and,
//! when a mask is present, the mask packed 8 pixels per byte (row-major,
//! MSB first, last byte zero-padded).

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

/// Physical units of a [`Field`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Units {
    #[serde(rename = "dBZ")]
    Dbz,
    #[serde(rename = "brightness-temperature-K")]
    BrightnessTempK,
    #[serde(rename = "flash-density")]
    FlashDensity,
    #[serde(rename = "normalized")]
    Normalized,
}

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("field must have at least one row and one column, got {rows}x{cols}")]
    EmptyShape { rows: usize, cols: usize },
    #[error("mask shape {mask_rows}x{mask_cols} does not match values {rows}x{cols}")]
    MaskShape { rows: usize, cols: usize, mask_rows: usize, mask_cols: usize },
    #[error("non-finite value at ({row}, {col}) under a valid mask")]
    NonFinite { row: usize, col: usize },
    #[error("expected units {expected:?}, got {got:?}")]
    UnitsMismatch { expected: Units, got: Units },
    #[error("shape mismatch: {a_rows}x{a_cols} vs {b_rows}x{b_cols}")]
    ShapeMismatch { a_rows: usize, a_cols: usize, b_rows: usize, b_cols: usize },
    #[error("scene requires exactly 4 satellite channels, got {0}")]
    ChannelCount(usize),
    #[error("invalid normalization spec: {0}")]
    BadNormSpec(String),
    #[error("malformed RGF header: {0}")]
    MalformedHeader(String),
    #[error("RGF dtype mismatch: expected \"f32\", got {0:?}")]
    DtypeMismatch(String),
    #[error("RGF endianness mismatch: expected \"LE\", got {0:?}")]
    EndianMismatch(String),
    #[error("truncated RGF payload: wanted {wanted} bytes, got {got}")]
    TruncatedPayload { wanted: usize, got: usize },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// A single-variable 2-D gridded scalar field with physical units and a
/// validity mask. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    values: Array2<f32>,
    units: Units,
    mask: Array2<bool>,
}

impl Field {
    /// Build a field, validating the type invariants. dBZ values are
    /// clipped to [0, 60] on creation.
    pub fn new(mut values: Array2<f32>, units: Units, mask: Array2<bool>) -> Result<Field, FieldError> {
        let (rows, cols) = values.dim();
        if rows == 0 || cols == 0 {
            return Err(FieldError::EmptyShape { rows, cols });
        }
        if mask.dim() != values.dim() {
            let (mr, mc) = mask.dim();
            return Err(FieldError::MaskShape { rows, cols, mask_rows: mr, mask_cols: mc });
        }
        if units == Units::Dbz {
            values.mapv_inplace(|v| v.clamp(0.0, 60.0));
        }
        for ((r, c), &m) in mask.indexed_iter() {
            if m && !values[[r, c]].is_finite() {
                return Err(FieldError::NonFinite { row: r, col: c });
            }
        }
        Ok(Field { values, units, mask })
    }

    /// Field with an all-valid mask.
    pub fn from_values(values: Array2<f32>, units: Units) -> Result<Field, FieldError> {
        let mask = Array2::from_elem(values.dim(), true);
        Field::new(values, units, mask)
    }

    pub fn values(&self) -> &Array2<f32> {
        &self.values
    }

    pub fn units(&self) -> Units {
        self.units
    }

    pub fn mask(&self) -> &Array2<bool> {
        &self.mask
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn cols(&self) -> usize {
        self.values.ncols()
    }

    pub fn all_valid(&self) -> bool {
        self.mask.iter().all(|&m| m)
    }
}

/// Physical <-> model-space mapping for reflectivity plus per-channel affine
/// maps for the satellite stack.
///
/// A satellite raw value `v` of channel `k` maps to `(v - offset[k]) / scale[k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormSpec {
    pub dbz_min: f64,
    pub dbz_max: f64,
    pub model_lo: f64,
    pub model_hi: f64,
    /// One (offset, scale) pair per satellite channel, in channel order.
    pub channel_offsets: Vec<f64>,
    pub channel_scales: Vec<f64>,
}

impl Default for NormSpec {
    fn default() -> Self {
        // Channel defaults cover the generator's brightness-temperature span
        // [180, 320] K for the three infrared channels and {0, 1} for the
        // lightning indicator, each mapped onto [-1, 1].
        NormSpec {
            dbz_min: 0.0,
            dbz_max: 60.0,
            model_lo: -1.0,
            model_hi: 1.0,
            channel_offsets: vec![250.0, 250.0, 250.0, 0.5],
            channel_scales: vec![70.0, 70.0, 70.0, 0.5],
        }
    }
}

impl NormSpec {
    pub fn validate(&self) -> Result<(), FieldError> {
        if !(self.dbz_max > self.dbz_min) {
            return Err(FieldError::BadNormSpec(format!(
                "dbz_max ({}) must exceed dbz_min ({})",
                self.dbz_max, self.dbz_min
            )));
        }
        if !(self.model_hi > self.model_lo) {
            return Err(FieldError::BadNormSpec(format!(
                "model_hi ({}) must exceed model_lo ({})",
                self.model_hi, self.model_lo
            )));
        }
        if self.channel_offsets.len() != self.channel_scales.len() {
            return Err(FieldError::BadNormSpec(
                "channel offsets and scales must pair up".into(),
            ));
        }
        if self.channel_scales.iter().any(|&s| s == 0.0 || !s.is_finite()) {
            return Err(FieldError::BadNormSpec("channel scales must be finite and nonzero".into()));
        }
        Ok(())
    }

    /// Fit the per-channel affine maps from a set of scenes so each
    /// channel's observed [min, max] lands on [-1, 1].
    pub fn fit_channels(&mut self, scenes: &[Scene]) {
        if scenes.is_empty() {
            return;
        }
        let n_ch = scenes[0].satellite.len();
        let mut lo = vec![f64::INFINITY; n_ch];
        let mut hi = vec![f64::NEG_INFINITY; n_ch];
        for scene in scenes {
            for (k, ch) in scene.satellite.iter().enumerate() {
                for (&v, &m) in ch.values().iter().zip(ch.mask().iter()) {
                    if m {
                        lo[k] = lo[k].min(v as f64);
                        hi[k] = hi[k].max(v as f64);
                    }
                }
            }
        }
        self.channel_offsets = (0..n_ch).map(|k| (lo[k] + hi[k]) / 2.0).collect();
        self.channel_scales = (0..n_ch)
            .map(|k| {
                let half = (hi[k] - lo[k]) / 2.0;
                if half > 0.0 { half } else { 1.0 }
            })
            .collect();
    }
}

/// Aligned satellite channel stack plus radar truth for one timestamp.
///
/// Channel order is fixed: ABI-C07, ABI-C09, ABI-C13, GLM.
#[derive(Debug, Clone)]
pub struct Scene {
    pub satellite: Vec<Field>,
    pub radar: Field,
    pub timestamp: String,
}

pub const SATELLITE_CHANNELS: [&str; 4] = ["abi-c07", "abi-c09", "abi-c13", "glm"];

impl Scene {
    pub fn new(satellite: Vec<Field>, radar: Field, timestamp: String) -> Result<Scene, FieldError> {
        if satellite.len() != 4 {
            return Err(FieldError::ChannelCount(satellite.len()));
        }
        let dim = radar.values().dim();
        for ch in &satellite {
            if ch.values().dim() != dim {
                let (ar, ac) = dim;
                let (br, bc) = ch.values().dim();
                return Err(FieldError::ShapeMismatch { a_rows: ar, a_cols: ac, b_rows: br, b_cols: bc });
            }
            if ch.mask() != radar.mask() {
                return Err(FieldError::BadNormSpec("all scene fields must share one mask".into()));
            }
        }
        Ok(Scene { satellite, radar, timestamp })
    }

    pub fn rows(&self) -> usize {
        self.radar.rows()
    }

    pub fn cols(&self) -> usize {
        self.radar.cols()
    }
}

/// Map reflectivity into model space:
/// `v -> model_lo + (clip(v, dbz_min, dbz_max) - dbz_min) / (dbz_max - dbz_min) * (model_hi - model_lo)`.
pub fn normalize_refl(f: &Field, spec: &NormSpec) -> Result<Field, FieldError> {
    spec.validate()?;
    if f.units() != Units::Dbz {
        return Err(FieldError::UnitsMismatch { expected: Units::Dbz, got: f.units() });
    }
    let span = spec.dbz_max - spec.dbz_min;
    let model_span = spec.model_hi - spec.model_lo;
    let values = f.values().mapv(|v| {
        let clipped = (v as f64).clamp(spec.dbz_min, spec.dbz_max);
        (spec.model_lo + (clipped - spec.dbz_min) / span * model_span) as f32
    });
    Field::new(values, Units::Normalized, f.mask().clone())
}

/// Exact inverse of [`normalize_refl`] on [model_lo, model_hi]; output is
/// clipped to [dbz_min, dbz_max].
pub fn denormalize_refl(f: &Field, spec: &NormSpec) -> Result<Field, FieldError> {
    spec.validate()?;
    if f.units() != Units::Normalized {
        return Err(FieldError::UnitsMismatch { expected: Units::Normalized, got: f.units() });
    }
    let span = spec.dbz_max - spec.dbz_min;
    let model_span = spec.model_hi - spec.model_lo;
    let values = f.values().mapv(|v| {
        let db = spec.dbz_min + ((v as f64) - spec.model_lo) / model_span * span;
        db.clamp(spec.dbz_min, spec.dbz_max) as f32
    });
    Field::new(values, Units::Dbz, f.mask().clone())
}

/// Normalize one satellite channel with its affine map; result is tagged
/// [`Units::Normalized`].
pub fn normalize_channel(f: &Field, channel: usize, spec: &NormSpec) -> Result<Field, FieldError> {
    spec.validate()?;
    if channel >= spec.channel_offsets.len() {
        return Err(FieldError::BadNormSpec(format!(
            "channel {channel} out of range ({} configured)",
            spec.channel_offsets.len()
        )));
    }
    let off = spec.channel_offsets[channel];
    let sc = spec.channel_scales[channel];
    let values = f.values().mapv(|v| (((v as f64) - off) / sc) as f32);
    Field::new(values, Units::Normalized, f.mask().clone())
}

#[derive(Debug, Serialize, Deserialize)]
struct RgfHeader {
    rows: usize,
    cols: usize,
    units: Units,
    mask: bool,
    endian: String,
    dtype: String,
}

/// Write a field in the RGF format. Bit-exact round-trip with [`read_field`].
pub fn write_field(f: &Field, path: &Path) -> Result<(), FieldError> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    write_field_to(f, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_field_to<W: Write>(f: &Field, w: &mut W) -> Result<(), FieldError> {
    let has_mask = !f.all_valid();
    let header = RgfHeader {
        rows: f.rows(),
        cols: f.cols(),
        units: f.units(),
        mask: has_mask,
        endian: "LE".into(),
        dtype: "f32".into(),
    };
    let header_line = serde_json::to_string(&header)
        .map_err(|e| FieldError::MalformedHeader(e.to_string()))?;
    w.write_all(header_line.as_bytes())?;
    w.write_all(b"\n")?;
    for &v in f.values().iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    if has_mask {
        let mut byte = 0u8;
        let mut nbits = 0;
        for &m in f.mask().iter() {
            byte = (byte << 1) | m as u8;
            nbits += 1;
            if nbits == 8 {
                w.write_all(&[byte])?;
                byte = 0;
                nbits = 0;
            }
        }
        if nbits > 0 {
            byte <<= 8 - nbits;
            w.write_all(&[byte])?;
        }
    }
    Ok(())
}

pub fn read_field(path: &Path) -> Result<Field, FieldError> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    read_field_from(&mut r)
}

pub fn read_field_from<R: Read>(r: &mut R) -> Result<Field, FieldError> {
    let mut header_bytes = Vec::new();
    let mut one = [0u8; 1];
    loop {
        let n = r.read(&mut one)?;
        if n == 0 {
            return Err(FieldError::MalformedHeader("missing newline after header".into()));
        }
        if one[0] == b'\n' {
            break;
        }
        header_bytes.push(one[0]);
        if header_bytes.len() > 64 * 1024 {
            return Err(FieldError::MalformedHeader("header exceeds 64 KiB".into()));
        }
    }
    let header_str = std::str::from_utf8(&header_bytes)
        .map_err(|e| FieldError::MalformedHeader(e.to_string()))?;
    let header: RgfHeader =
        serde_json::from_str(header_str).map_err(|e| FieldError::MalformedHeader(e.to_string()))?;
    if header.dtype != "f32" {
        return Err(FieldError::DtypeMismatch(header.dtype));
    }
    if header.endian != "LE" {
        return Err(FieldError::EndianMismatch(header.endian));
    }
    if header.rows == 0 || header.cols == 0 {
        return Err(FieldError::EmptyShape { rows: header.rows, cols: header.cols });
    }
    let count = header.rows * header.cols;
    let mut payload = vec![0u8; count * 4];
    read_exact_or_truncated(r, &mut payload)?;
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let values = Array2::from_shape_vec((header.rows, header.cols), values)
        .expect("shape matches element count");
    let mask = if header.mask {
        let mut mask_bytes = vec![0u8; count.div_ceil(8)];
        read_exact_or_truncated(r, &mut mask_bytes)?;
        let mut flags = Vec::with_capacity(count);
        for i in 0..count {
            let byte = mask_bytes[i / 8];
            flags.push(byte >> (7 - i % 8) & 1 == 1);
        }
        Array2::from_shape_vec((header.rows, header.cols), flags).expect("shape matches")
    } else {
        Array2::from_elem((header.rows, header.cols), true)
    };
    // Construct without re-clipping: files are trusted to hold post-clip
    // values, and a bit-exact round-trip is part of the format contract.
    let mut field = Field { values, units: header.units, mask };
    for ((r0, c0), &m) in field.mask.clone().indexed_iter() {
        if m && !field.values[[r0, c0]].is_finite() {
            return Err(FieldError::NonFinite { row: r0, col: c0 });
        }
    }
    // Normalize -0.0 is not needed; untouched bytes round-trip as-is.
    field.units = header.units;
    Ok(field)
}

fn read_exact_or_truncated<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), FieldError> {
    let mut filled = 0;
    while filled < buf.len() {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            return Err(FieldError::TruncatedPayload { wanted: buf.len(), got: filled });
        }
        filled += n;
    }
    Ok(())
}
