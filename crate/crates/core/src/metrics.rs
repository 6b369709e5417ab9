//! Forecast-verification metrics: contingency scores (POD, FAR, CSI) with
//! neighborhood max-pooling, RMSE, and SSIM.
//!
//! Pooled scores binarize first (`value > threshold`, restricted to the
//! valid mask), then max-pool the binary grid with kernel = stride = n,
//! truncating ragged edges. This neighborhood reading rewards near-miss
//! spatial placement, so pooled scores can exceed pointwise ones.

use crate::field::{Field, FieldError};
use ndarray::Array2;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("shape mismatch: {a_rows}x{a_cols} vs {b_rows}x{b_cols}")]
    ShapeMismatch { a_rows: usize, a_cols: usize, b_rows: usize, b_cols: usize },
    #[error("masks differ between prediction and truth")]
    MaskMismatch,
    #[error("pool size {pool} exceeds field extent {rows}x{cols}")]
    PoolTooLarge { pool: usize, rows: usize, cols: usize },
    #[error("pool size must be at least 1")]
    ZeroPool,
    #[error("no valid pixels to evaluate")]
    EmptyMask,
    #[error("SSIM window must be odd, positive, and no larger than the field; got {window} for {rows}x{cols}")]
    BadWindow { window: usize, rows: usize, cols: usize },
    #[error("data_range must be positive, got {0}")]
    BadDataRange(f64),
    #[error(transparent)]
    Field(#[from] FieldError),
}

/// Standard 2x2 contingency counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Contingency {
    pub hits: u64,
    pub misses: u64,
    pub false_alarms: u64,
    pub correct_negatives: u64,
}

impl Contingency {
    pub fn total(&self) -> u64 {
        self.hits + self.misses + self.false_alarms + self.correct_negatives
    }
}

/// POD/FAR/CSI for one contingency table. Degenerate 0/0 cells score 0 and
/// set the matching flag instead of producing NaN.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub pod: f64,
    pub far: f64,
    pub csi: f64,
    pub pod_degenerate: bool,
    pub far_degenerate: bool,
    pub csi_degenerate: bool,
}

/// Binarize `value > threshold` on mask-valid pixels, then max-pool with
/// kernel = stride = `pool`, truncating ragged edges. `pool == 1` is the
/// identity on the binary grid.
pub fn pooled_binarize(f: &Field, threshold: f64, pool: usize) -> Result<Array2<bool>, MetricsError> {
    if pool == 0 {
        return Err(MetricsError::ZeroPool);
    }
    let (rows, cols) = f.values().dim();
    if pool > rows || pool > cols {
        return Err(MetricsError::PoolTooLarge { pool, rows, cols });
    }
    let binary = Array2::from_shape_fn((rows, cols), |(r, c)| {
        f.mask()[[r, c]] && f.values()[[r, c]] as f64 > threshold
    });
    if pool == 1 {
        return Ok(binary);
    }
    let (prows, pcols) = (rows / pool, cols / pool);
    let pooled = Array2::from_shape_fn((prows, pcols), |(pr, pc)| {
        let mut any = false;
        'outer: for r in pr * pool..(pr + 1) * pool {
            for c in pc * pool..(pc + 1) * pool {
                if binary[[r, c]] {
                    any = true;
                    break 'outer;
                }
            }
        }
        any
    });
    Ok(pooled)
}

fn check_pair(pred: &Field, truth: &Field) -> Result<(), MetricsError> {
    if pred.values().dim() != truth.values().dim() {
        let (ar, ac) = pred.values().dim();
        let (br, bc) = truth.values().dim();
        return Err(MetricsError::ShapeMismatch { a_rows: ar, a_cols: ac, b_rows: br, b_cols: bc });
    }
    if pred.mask() != truth.mask() {
        return Err(MetricsError::MaskMismatch);
    }
    Ok(())
}

/// Contingency counts over the pooled binary grids of prediction and truth.
pub fn contingency(
    pred: &Field,
    truth: &Field,
    threshold: f64,
    pool: usize,
) -> Result<Contingency, MetricsError> {
    check_pair(pred, truth)?;
    let p = pooled_binarize(pred, threshold, pool)?;
    let t = pooled_binarize(truth, threshold, pool)?;
    let mut c = Contingency::default();
    for (&pv, &tv) in p.iter().zip(t.iter()) {
        match (pv, tv) {
            (true, true) => c.hits += 1,
            (false, true) => c.misses += 1,
            (true, false) => c.false_alarms += 1,
            (false, false) => c.correct_negatives += 1,
        }
    }
    Ok(c)
}

/// POD = H/(H+M), FAR = F/(H+F), CSI = H/(H+M+F).
pub fn scores(c: &Contingency) -> Scores {
    let ratio = |num: u64, den: u64| {
        if den == 0 { (0.0, true) } else { (num as f64 / den as f64, false) }
    };
    let (pod, pod_degenerate) = ratio(c.hits, c.hits + c.misses);
    let (far, far_degenerate) = ratio(c.false_alarms, c.hits + c.false_alarms);
    let (csi, csi_degenerate) = ratio(c.hits, c.hits + c.misses + c.false_alarms);
    Scores { pod, far, csi, pod_degenerate, far_degenerate, csi_degenerate }
}

/// Root-mean-squared error over mask-valid pixels.
pub fn rmse(pred: &Field, truth: &Field) -> Result<f64, MetricsError> {
    check_pair(pred, truth)?;
    let mut sum = 0.0f64;
    let mut n = 0u64;
    for ((&p, &t), &m) in pred
        .values()
        .iter()
        .zip(truth.values().iter())
        .zip(pred.mask().iter())
    {
        if m {
            sum += (p as f64 - t as f64).powi(2);
            n += 1;
        }
    }
    if n == 0 {
        return Err(MetricsError::EmptyMask);
    }
    Ok((sum / n as f64).sqrt())
}

fn gaussian_window(window: usize, sigma: f64) -> Vec<f64> {
    let half = (window / 2) as isize;
    let mut k: Vec<f64> = (-half..=half)
        .map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp())
        .collect();
    let norm: f64 = k.iter().sum();
    for v in &mut k {
        *v /= norm;
    }
    k
}

/// Valid-region separable Gaussian filter: output is
/// `(rows - window + 1) x (cols - window + 1)`.
fn filter_valid(values: &Array2<f64>, kernel: &[f64]) -> Array2<f64> {
    let (rows, cols) = values.dim();
    let w = kernel.len();
    let mut horiz = Array2::<f64>::zeros((rows, cols - w + 1));
    for r in 0..rows {
        for c in 0..cols - w + 1 {
            let mut acc = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                acc += k * values[[r, c + i]];
            }
            horiz[[r, c]] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((rows - w + 1, cols - w + 1));
    for r in 0..rows - w + 1 {
        for c in 0..cols - w + 1 {
            let mut acc = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                acc += k * horiz[[r + i, c]];
            }
            out[[r, c]] = acc;
        }
    }
    out
}

/// Mean local SSIM with a Gaussian window (sigma 1.5), constants
/// C1 = (k1 L)^2 and C2 = (k2 L)^2, averaged over the valid region only.
pub fn ssim(
    pred: &Field,
    truth: &Field,
    window: usize,
    k1: f64,
    k2: f64,
    data_range: f64,
) -> Result<f64, MetricsError> {
    if pred.values().dim() != truth.values().dim() {
        let (ar, ac) = pred.values().dim();
        let (br, bc) = truth.values().dim();
        return Err(MetricsError::ShapeMismatch { a_rows: ar, a_cols: ac, b_rows: br, b_cols: bc });
    }
    let (rows, cols) = pred.values().dim();
    if window == 0 || window % 2 == 0 || window > rows || window > cols {
        return Err(MetricsError::BadWindow { window, rows, cols });
    }
    if !(data_range > 0.0) {
        return Err(MetricsError::BadDataRange(data_range));
    }
    let c1 = (k1 * data_range).powi(2);
    let c2 = (k2 * data_range).powi(2);
    let kernel = gaussian_window(window, 1.5);

    let x = pred.values().mapv(|v| v as f64);
    let y = truth.values().mapv(|v| v as f64);
    let mu_x = filter_valid(&x, &kernel);
    let mu_y = filter_valid(&y, &kernel);
    let xx = filter_valid(&(&x * &x), &kernel);
    let yy = filter_valid(&(&y * &y), &kernel);
    let xy = filter_valid(&(&x * &y), &kernel);

    let mut total = 0.0;
    let mut count = 0usize;
    for ((r, c), &mx) in mu_x.indexed_iter() {
        let my = mu_y[[r, c]];
        let var_x = xx[[r, c]] - mx * mx;
        let var_y = yy[[r, c]] - my * my;
        let cov = xy[[r, c]] - mx * my;
        let s = ((2.0 * mx * my + c1) * (2.0 * cov + c2))
            / ((mx * mx + my * my + c1) * (var_x + var_y + c2));
        total += s;
        count += 1;
    }
    Ok(total / count as f64)
}

/// Evaluation grid configuration.
#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub thresholds: Vec<f64>,
    pub pools: Vec<usize>,
    pub ssim_window: usize,
    pub data_range: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            thresholds: vec![15.0, 35.0, 50.0],
            pools: vec![1, 4, 8],
            ssim_window: 11,
            data_range: 60.0,
        }
    }
}

/// One (threshold, pool) cell of the score grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CellScores {
    pub threshold: f64,
    pub pool: usize,
    pub scores: Scores,
}

/// Scores for one (prediction, truth) pair over the whole grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub scene_id: String,
    pub model_id: String,
    pub rmse: f64,
    pub ssim: f64,
    pub cells: Vec<CellScores>,
}

/// Assemble RMSE, SSIM, and the full (threshold x pool) contingency grid.
pub fn evaluate(
    pred: &Field,
    truth: &Field,
    config: &EvalConfig,
    scene_id: &str,
    model_id: &str,
) -> Result<MetricReport, MetricsError> {
    let rmse_v = rmse(pred, truth)?;
    let ssim_v = ssim(pred, truth, config.ssim_window, 0.01, 0.03, config.data_range)?;
    let mut cells = Vec::with_capacity(config.thresholds.len() * config.pools.len());
    for &threshold in &config.thresholds {
        for &pool in &config.pools {
            let c = contingency(pred, truth, threshold, pool)?;
            cells.push(CellScores { threshold, pool, scores: scores(&c) });
        }
    }
    Ok(MetricReport {
        scene_id: scene_id.to_string(),
        model_id: model_id.to_string(),
        rmse: rmse_v,
        ssim: ssim_v,
        cells,
    })
}

impl MetricReport {
    /// CSV header matching [`MetricReport::csv_row`]. LPIPS is reported as
    /// a literal `n/a` column: it needs a pretrained perceptual network
    /// this pipeline does not ship.
    pub fn csv_header(config: &EvalConfig) -> String {
        let mut cols = vec!["scene_id".to_string(), "model_id".to_string(), "rmse".to_string(), "ssim".to_string(), "lpips".to_string()];
        for &threshold in &config.thresholds {
            for &pool in &config.pools {
                for metric in ["pod", "far", "csi"] {
                    cols.push(format!("{metric}_t{}_p{pool}", fmt_threshold(threshold)));
                }
            }
        }
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols = vec![
            self.scene_id.clone(),
            self.model_id.clone(),
            fmt_f64(self.rmse),
            fmt_f64(self.ssim),
            "n/a".to_string(),
        ];
        for cell in &self.cells {
            cols.push(fmt_f64(cell.scores.pod));
            cols.push(fmt_f64(cell.scores.far));
            cols.push(fmt_f64(cell.scores.csi));
        }
        cols.join(",")
    }

    /// Arithmetic mean of per-scene reports, cell by cell. Degeneracy flags
    /// are ORed: an aggregate cell is flagged if any contributor was.
    pub fn aggregate(reports: &[MetricReport], model_id: &str) -> Option<MetricReport> {
        let first = reports.first()?;
        let n = reports.len() as f64;
        let mut agg = MetricReport {
            scene_id: "aggregate".to_string(),
            model_id: model_id.to_string(),
            rmse: 0.0,
            ssim: 0.0,
            cells: first
                .cells
                .iter()
                .map(|c| CellScores {
                    threshold: c.threshold,
                    pool: c.pool,
                    scores: Scores {
                        pod: 0.0,
                        far: 0.0,
                        csi: 0.0,
                        pod_degenerate: false,
                        far_degenerate: false,
                        csi_degenerate: false,
                    },
                })
                .collect(),
        };
        for r in reports {
            agg.rmse += r.rmse / n;
            agg.ssim += r.ssim / n;
            for (a, c) in agg.cells.iter_mut().zip(r.cells.iter()) {
                a.scores.pod += c.scores.pod / n;
                a.scores.far += c.scores.far / n;
                a.scores.csi += c.scores.csi / n;
                a.scores.pod_degenerate |= c.scores.pod_degenerate;
                a.scores.far_degenerate |= c.scores.far_degenerate;
                a.scores.csi_degenerate |= c.scores.csi_degenerate;
            }
        }
        Some(agg)
    }

    pub fn cell(&self, threshold: f64, pool: usize) -> Option<&CellScores> {
        self.cells
            .iter()
            .find(|c| c.threshold == threshold && c.pool == pool)
    }
}

fn fmt_threshold(t: f64) -> String {
    if t.fract() == 0.0 {
        format!("{}", t as i64)
    } else {
        format!("{t}")
    }
}

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Units;
    use crate::rng::Rng64;
    use ndarray::Array2;

    fn dbz(values: Vec<f32>, rows: usize, cols: usize) -> Field {
        Field::from_values(Array2::from_shape_vec((rows, cols), values).unwrap(), Units::Dbz)
            .unwrap()
    }

    #[test]
    fn pool1_is_identity() {
        let f = dbz(vec![20.0, 0.0, 40.0, 10.0], 2, 2);
        let g = pooled_binarize(&f, 15.0, 1).unwrap();
        assert_eq!(g, Array2::from_shape_vec((2, 2), vec![true, false, true, false]).unwrap());
    }

    #[test]
    fn pool4_single_hot_pixel() {
        let mut values = vec![0.0f32; 16];
        values[5] = 40.0;
        let f = dbz(values, 4, 4);
        let g = pooled_binarize(&f, 35.0, 4).unwrap();
        assert_eq!(g.dim(), (1, 1));
        assert!(g[[0, 0]]);
    }

    #[test]
    fn all_below_threshold_is_all_false() {
        let f = dbz(vec![1.0; 36], 6, 6);
        for pool in [1usize, 2, 3] {
            let g = pooled_binarize(&f, 15.0, pool).unwrap();
            assert!(g.iter().all(|&b| !b));
        }
    }

    #[test]
    fn pool_too_large_rejected() {
        let f = dbz(vec![0.0; 4], 2, 2);
        assert!(matches!(pooled_binarize(&f, 15.0, 3), Err(MetricsError::PoolTooLarge { .. })));
    }

    #[test]
    fn hand_counted_contingency() {
        let pred = dbz(vec![20.0, 0.0, 40.0, 10.0], 2, 2);
        let truth = dbz(vec![20.0, 40.0, 0.0, 10.0], 2, 2);
        let c = contingency(&pred, &truth, 15.0, 1).unwrap();
        assert_eq!(
            c,
            Contingency { hits: 1, misses: 1, false_alarms: 1, correct_negatives: 1 }
        );
        let s = scores(&c);
        assert!((s.pod - 0.5).abs() < 1e-12);
        assert!((s.far - 0.5).abs() < 1e-12);
        assert!((s.csi - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn pooling_flips_near_miss_to_hit() {
        let mut pv = vec![0.0f32; 16];
        pv[0] = 40.0; // pred exceedance at (0,0)
        let mut tv = vec![0.0f32; 16];
        tv[15] = 40.0; // truth exceedance at (3,3)
        let pred = dbz(pv, 4, 4);
        let truth = dbz(tv, 4, 4);

        let pooled = contingency(&pred, &truth, 35.0, 4).unwrap();
        assert_eq!(pooled.hits, 1);
        assert_eq!(pooled.misses, 0);
        assert_eq!(pooled.false_alarms, 0);

        let pointwise = contingency(&pred, &truth, 35.0, 1).unwrap();
        assert_eq!(pointwise.hits, 0);
        assert_eq!(pointwise.misses, 1);
        assert_eq!(pointwise.false_alarms, 1);
    }

    #[test]
    fn perfect_forecast_scores() {
        let f = dbz(vec![20.0, 0.0, 40.0, 10.0], 2, 2);
        let c = contingency(&f, &f, 15.0, 1).unwrap();
        assert_eq!(c.misses, 0);
        assert_eq!(c.false_alarms, 0);
        let s = scores(&c);
        assert_eq!(s.pod, 1.0);
        assert_eq!(s.far, 0.0);
        assert_eq!(s.csi, 1.0);
    }

    #[test]
    fn degenerate_cells_flagged_zero() {
        let c = Contingency { hits: 0, misses: 0, false_alarms: 0, correct_negatives: 4 };
        let s = scores(&c);
        assert_eq!(s.pod, 0.0);
        assert_eq!(s.csi, 0.0);
        assert_eq!(s.far, 0.0);
        assert!(s.pod_degenerate && s.far_degenerate && s.csi_degenerate);

        let c2 = Contingency { hits: 0, misses: 2, false_alarms: 3, correct_negatives: 0 };
        let s2 = scores(&c2);
        assert_eq!(s2.csi, 0.0);
        assert!(!s2.csi_degenerate);
    }

    #[test]
    fn counts_match_brute_force() {
        let mut rng = Rng64::new(21);
        for _ in 0..50 {
            let pv = Array2::from_shape_fn((16, 16), |_| rng.uniform_in(0.0, 30.0) as f32);
            let tv = Array2::from_shape_fn((16, 16), |_| rng.uniform_in(0.0, 30.0) as f32);
            let pred = Field::from_values(pv.clone(), Units::Dbz).unwrap();
            let truth = Field::from_values(tv.clone(), Units::Dbz).unwrap();
            let c = contingency(&pred, &truth, 15.0, 1).unwrap();
            let mut brute = Contingency::default();
            for r in 0..16 {
                for c2 in 0..16 {
                    let p = pv[[r, c2]] > 15.0;
                    let t = tv[[r, c2]] > 15.0;
                    match (p, t) {
                        (true, true) => brute.hits += 1,
                        (false, true) => brute.misses += 1,
                        (true, false) => brute.false_alarms += 1,
                        (false, false) => brute.correct_negatives += 1,
                    }
                }
            }
            assert_eq!(c, brute);
            let s = scores(&c);
            if !s.csi_degenerate && !s.pod_degenerate {
                assert!(s.csi <= s.pod + 1e-12);
            }
            if !s.csi_degenerate && !s.far_degenerate {
                assert!(s.csi <= 1.0 - s.far + 1e-12);
            }
        }
    }

    #[test]
    fn rmse_examples() {
        let a = dbz(vec![0.0, 0.0], 1, 2);
        let b = dbz(vec![3.0, 4.0], 1, 2);
        assert!((rmse(&a, &b).unwrap() - 12.5f64.sqrt()).abs() < 1e-7);
        assert_eq!(rmse(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn rmse_shift_lower_bound() {
        let mut rng = Rng64::new(31);
        let av = Array2::from_shape_fn((8, 8), |_| rng.uniform_in(0.0, 40.0) as f32);
        let bv = Array2::from_shape_fn((8, 8), |_| rng.uniform_in(0.0, 40.0) as f32);
        let a = Field::from_values(av.clone(), Units::Dbz).unwrap();
        let b = Field::from_values(bv, Units::Dbz).unwrap();
        let base = rmse(&a, &b).unwrap();
        let shift = 10.0f32;
        let shifted = Field::from_values(av.mapv(|v| (v + shift).min(60.0)), Units::Dbz).unwrap();
        // Keep values in the linear region so the shift is exact.
        if av.iter().all(|&v| v + shift <= 60.0) {
            let moved = rmse(&shifted, &b).unwrap();
            assert!(moved >= (shift as f64 - base) - 1e-9);
        }
    }

    #[test]
    fn rmse_empty_mask_rejected() {
        let values = Array2::zeros((2, 2));
        let mask = Array2::from_elem((2, 2), false);
        let f = Field::new(values, Units::Dbz, mask).unwrap();
        assert!(matches!(rmse(&f, &f), Err(MetricsError::EmptyMask)));
    }

    #[test]
    fn ssim_identical_is_one() {
        let mut rng = Rng64::new(41);
        let v = Array2::from_shape_fn((32, 32), |_| rng.uniform_in(0.0, 60.0) as f32);
        let f = Field::from_values(v, Units::Dbz).unwrap();
        let s = ssim(&f, &f, 11, 0.01, 0.03, 60.0).unwrap();
        assert!((s - 1.0).abs() < 1e-9, "ssim {s}");
    }

    #[test]
    fn ssim_constant_fields_closed_form() {
        let a = Field::from_values(Array2::from_elem((16, 16), 0.5), Units::Normalized).unwrap();
        let b = Field::from_values(Array2::from_elem((16, 16), 0.25), Units::Normalized).unwrap();
        let s = ssim(&a, &b, 11, 0.01, 0.03, 1.0).unwrap();
        let c1 = 0.01f64.powi(2);
        let expect = (2.0 * 0.5 * 0.25 + c1) / (0.5f64.powi(2) + 0.25f64.powi(2) + c1);
        assert!((s - expect).abs() < 1e-9, "ssim {s} vs {expect}");
        assert!((s - 0.800064).abs() < 1e-6);
    }

    #[test]
    fn ssim_symmetric() {
        let mut rng = Rng64::new(51);
        let a = Field::from_values(
            Array2::from_shape_fn((24, 24), |_| rng.uniform_in(0.0, 60.0) as f32),
            Units::Dbz,
        )
        .unwrap();
        let b = Field::from_values(
            Array2::from_shape_fn((24, 24), |_| rng.uniform_in(0.0, 60.0) as f32),
            Units::Dbz,
        )
        .unwrap();
        let s1 = ssim(&a, &b, 11, 0.01, 0.03, 60.0).unwrap();
        let s2 = ssim(&b, &a, 11, 0.01, 0.03, 60.0).unwrap();
        assert!((s1 - s2).abs() < 1e-12);
        assert!((-1.0..=1.0).contains(&s1));
    }

    #[test]
    fn ssim_bad_window_rejected() {
        let f = dbz(vec![0.0; 16], 4, 4);
        assert!(matches!(ssim(&f, &f, 4, 0.01, 0.03, 60.0), Err(MetricsError::BadWindow { .. })));
        assert!(matches!(ssim(&f, &f, 11, 0.01, 0.03, 60.0), Err(MetricsError::BadWindow { .. })));
    }

    #[test]
    fn evaluate_composes_single_calls() {
        let mut rng = Rng64::new(61);
        let pv = Array2::from_shape_fn((32, 32), |_| rng.uniform_in(0.0, 55.0) as f32);
        let tv = Array2::from_shape_fn((32, 32), |_| rng.uniform_in(0.0, 55.0) as f32);
        let pred = Field::from_values(pv, Units::Dbz).unwrap();
        let truth = Field::from_values(tv, Units::Dbz).unwrap();
        let config = EvalConfig::default();
        let report = evaluate(&pred, &truth, &config, "s0", "m0").unwrap();
        assert_eq!(report.cells.len(), 9);
        assert!((report.rmse - rmse(&pred, &truth).unwrap()).abs() < 1e-12);
        assert!(
            (report.ssim - ssim(&pred, &truth, 11, 0.01, 0.03, 60.0).unwrap()).abs() < 1e-12
        );
        for cell in &report.cells {
            let c = contingency(&pred, &truth, cell.threshold, cell.pool).unwrap();
            assert_eq!(cell.scores, scores(&c));
        }
    }

    #[test]
    fn evaluate_perfect_pair() {
        let mut rng = Rng64::new(71);
        let v = Array2::from_shape_fn((32, 32), |_| rng.uniform_in(0.0, 55.0) as f32);
        let f = Field::from_values(v, Units::Dbz).unwrap();
        let report = evaluate(&f, &f, &EvalConfig::default(), "s", "m").unwrap();
        assert_eq!(report.rmse, 0.0);
        assert!((report.ssim - 1.0).abs() < 1e-9);
        for cell in &report.cells {
            assert!(cell.scores.csi == 1.0 || cell.scores.csi_degenerate);
        }
    }

    #[test]
    fn csv_schema() {
        let config = EvalConfig::default();
        let header = MetricReport::csv_header(&config);
        let cols: Vec<&str> = header.split(',').collect();
        // scene_id, model_id + rmse, ssim, lpips + 27 score cells.
        assert_eq!(cols.len(), 2 + 3 + 27);
        assert_eq!(cols[0], "scene_id");
        assert_eq!(cols[4], "lpips");
        assert_eq!(cols[5], "pod_t15_p1");
        assert_eq!(cols[31], "csi_t50_p8");

        let mut rng = Rng64::new(81);
        let f = Field::from_values(
            Array2::from_shape_fn((16, 16), |_| rng.uniform_in(0.0, 55.0) as f32),
            Units::Dbz,
        )
        .unwrap();
        let small = EvalConfig { pools: vec![1], ..EvalConfig::default() };
        let report = evaluate(&f, &f, &small, "s", "m").unwrap();
        let row = report.csv_row();
        assert_eq!(row.split(',').count(), 2 + 3 + 9);
        assert!(row.contains("n/a"));
    }

    #[test]
    fn aggregate_is_mean() {
        let mut rng = Rng64::new(91);
        let a = Field::from_values(
            Array2::from_shape_fn((16, 16), |_| rng.uniform_in(0.0, 55.0) as f32),
            Units::Dbz,
        )
        .unwrap();
        let b = Field::from_values(
            Array2::from_shape_fn((16, 16), |_| rng.uniform_in(0.0, 55.0) as f32),
            Units::Dbz,
        )
        .unwrap();
        let config = EvalConfig { pools: vec![1, 2], ..EvalConfig::default() };
        let r1 = evaluate(&a, &b, &config, "s1", "m").unwrap();
        let r2 = evaluate(&a, &a, &config, "s2", "m").unwrap();
        let agg = MetricReport::aggregate(&[r1.clone(), r2.clone()], "m").unwrap();
        assert!((agg.rmse - (r1.rmse + r2.rmse) / 2.0).abs() < 1e-12);
        for ((ac, c1), c2) in agg.cells.iter().zip(r1.cells.iter()).zip(r2.cells.iter()) {
            assert!((ac.scores.csi - (c1.scores.csi + c2.scores.csi) / 2.0).abs() < 1e-12);
        }
    }
}
