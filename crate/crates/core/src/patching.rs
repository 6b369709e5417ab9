//! Sliding-window patch extraction, skew-avoiding filtering, and lossless
//! reassembly.

use crate::field::{Field, Scene, Units};
use ndarray::{s, Array2};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PatchError {
    #[error("patch size {size} exceeds image extent {rows}x{cols}")]
    SizeTooLarge { size: usize, rows: usize, cols: usize },
    #[error("stride must be at least 1")]
    ZeroStride,
    #[error("patch size must be at least 1")]
    ZeroSize,
    #[error("pixel ({row}, {col}) not covered by any patch")]
    Uncovered { row: usize, col: usize },
    #[error("patch at ({row0}, {col0}) extends outside the {rows}x{cols} target")]
    OutOfBounds { row0: usize, col0: usize, rows: usize, cols: usize },
    #[error(transparent)]
    Field(#[from] crate::field::FieldError),
}

/// A fixed-size square crop of a scene, with its source coordinates.
#[derive(Debug, Clone)]
pub struct Patch {
    pub scene_id: String,
    pub row0: usize,
    pub col0: usize,
    pub size: usize,
    /// Channel crops in the scene's fixed channel order.
    pub satellite: Vec<Array2<f32>>,
    pub radar: Array2<f32>,
    pub radar_units: Units,
    pub mask: Array2<bool>,
}

/// Keep a patch only when enough valid pixels exceed a reflectivity level.
#[derive(Debug, Clone, Copy)]
pub struct FilterPolicy {
    pub gamma: usize,
    pub value_threshold: f32,
}

impl Default for FilterPolicy {
    fn default() -> Self {
        FilterPolicy { gamma: 1000, value_threshold: 6.0 }
    }
}

/// Offsets {0, stride, 2*stride, ...} that keep a window of `size` inside
/// `extent`.
fn window_offsets(extent: usize, size: usize, stride: usize) -> Vec<usize> {
    (0..=(extent - size)).step_by(stride).collect()
}

/// Enumerate patches row-major over the sliding-window grid.
///
/// The count is `floor((rows-size)/stride + 1) * floor((cols-size)/stride + 1)`.
pub fn patchify(scene: &Scene, size: usize, stride: usize) -> Result<Vec<Patch>, PatchError> {
    if size == 0 {
        return Err(PatchError::ZeroSize);
    }
    if stride == 0 {
        return Err(PatchError::ZeroStride);
    }
    let (rows, cols) = (scene.rows(), scene.cols());
    if size > rows || size > cols {
        return Err(PatchError::SizeTooLarge { size, rows, cols });
    }
    let mut patches = Vec::new();
    for &r0 in &window_offsets(rows, size, stride) {
        for &c0 in &window_offsets(cols, size, stride) {
            let window = s![r0..r0 + size, c0..c0 + size];
            patches.push(Patch {
                scene_id: scene.timestamp.clone(),
                row0: r0,
                col0: c0,
                size,
                satellite: scene
                    .satellite
                    .iter()
                    .map(|ch| ch.values().slice(window).to_owned())
                    .collect(),
                radar: scene.radar.values().slice(window).to_owned(),
                radar_units: scene.radar.units(),
                mask: scene.radar.mask().slice(window).to_owned(),
            });
        }
    }
    Ok(patches)
}

/// Keep a patch iff at least `gamma` mask-valid radar pixels exceed the
/// threshold. Order-preserving.
pub fn filter_patches(patches: Vec<Patch>, policy: &FilterPolicy) -> Vec<Patch> {
    patches
        .into_iter()
        .filter(|p| {
            let exceed = p
                .radar
                .iter()
                .zip(p.mask.iter())
                .filter(|(&v, &m)| m && v > policy.value_threshold)
                .count();
            exceed >= policy.gamma
        })
        .collect()
}

/// A positioned value block, the minimal input for reassembly.
#[derive(Debug, Clone)]
pub struct PatchValues {
    pub row0: usize,
    pub col0: usize,
    pub values: Array2<f32>,
}

impl From<&Patch> for PatchValues {
    fn from(p: &Patch) -> PatchValues {
        PatchValues { row0: p.row0, col0: p.col0, values: p.radar.clone() }
    }
}

/// Reassemble positioned blocks into a `rows x cols` field, averaging
/// overlapping pixels with uniform weights. Every pixel must be covered.
pub fn depatchify_values(
    patches: &[PatchValues],
    rows: usize,
    cols: usize,
    units: Units,
) -> Result<Field, PatchError> {
    let mut sum = Array2::<f64>::zeros((rows, cols));
    let mut count = Array2::<u32>::zeros((rows, cols));
    for p in patches {
        let (pr, pc) = p.values.dim();
        if p.row0 + pr > rows || p.col0 + pc > cols {
            return Err(PatchError::OutOfBounds { row0: p.row0, col0: p.col0, rows, cols });
        }
        for r in 0..pr {
            for c in 0..pc {
                sum[[p.row0 + r, p.col0 + c]] += p.values[[r, c]] as f64;
                count[[p.row0 + r, p.col0 + c]] += 1;
            }
        }
    }
    for ((r, c), &n) in count.indexed_iter() {
        if n == 0 {
            return Err(PatchError::Uncovered { row: r, col: c });
        }
    }
    let values = Array2::from_shape_fn((rows, cols), |(r, c)| {
        (sum[[r, c]] / count[[r, c]] as f64) as f32
    });
    Ok(Field::from_values(values, units)?)
}

/// Reassemble from the radar crops of full patches.
pub fn depatchify(patches: &[Patch], rows: usize, cols: usize) -> Result<Field, PatchError> {
    let units = patches.first().map(|p| p.radar_units).unwrap_or(Units::Dbz);
    let values: Vec<PatchValues> = patches.iter().map(PatchValues::from).collect();
    depatchify_values(&values, rows, cols, units)
}
