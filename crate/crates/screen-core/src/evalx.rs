//! Classification metrics, attention-map explainability and localization
//! scoring against planted lesions.

use std::path::Path;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::corpus::Label;
use crate::error::{Error, Result};
use crate::grid::{BitGrid, Grid};
use crate::model::{Capture, RunMode, Screener};

/// Counts with tuberculosis as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub fn_: usize,
    pub fp: usize,
    pub tn: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.tp + self.fn_ + self.fp + self.tn
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    /// Percent, rounded half-up to 2 decimals.
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when a denominator was zero and the value was pinned to 0.
    pub division_by_zero: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tb: ClassMetrics,
    pub normal: ClassMetrics,
    /// Percent, rounded half-up to 2 decimals.
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
}

/// Round half-up to 2 decimals, in percent.
pub fn round_percent(fraction: f64) -> f64 {
    (fraction * 10_000.0 + 0.5).floor() / 100.0
}

fn ratio(num: usize, den: usize, flag: &mut bool) -> f64 {
    if den == 0 {
        *flag = true;
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn compute_metrics(confusion: &ConfusionMatrix) -> Result<MetricsReport> {
    if confusion.total() == 0 {
        return Err(Error::invalid("empty confusion matrix"));
    }
    let ConfusionMatrix { tp, fn_, fp, tn } = *confusion;
    let mut tb_flag = false;
    let p_tb = ratio(tp, tp + fp, &mut tb_flag);
    let r_tb = ratio(tp, tp + fn_, &mut tb_flag);
    let f1_tb = if p_tb + r_tb == 0.0 { 0.0 } else { 2.0 * p_tb * r_tb / (p_tb + r_tb) };
    let mut n_flag = false;
    let p_n = ratio(tn, tn + fn_, &mut n_flag);
    let r_n = ratio(tn, tn + fp, &mut n_flag);
    let f1_n = if p_n + r_n == 0.0 { 0.0 } else { 2.0 * p_n * r_n / (p_n + r_n) };
    Ok(MetricsReport {
        tb: ClassMetrics {
            precision: round_percent(p_tb),
            recall: round_percent(r_tb),
            f1: round_percent(f1_tb),
            division_by_zero: tb_flag,
        },
        normal: ClassMetrics {
            precision: round_percent(p_n),
            recall: round_percent(r_n),
            f1: round_percent(f1_n),
            division_by_zero: n_flag,
        },
        accuracy: round_percent((tp + tn) as f64 / confusion.total() as f64),
        confusion: *confusion,
    })
}

/// Write the report as `metric,value` rows: the seven headline numbers
/// followed by the raw confusion counts and the degeneracy flags.
pub fn write_report(path: &std::path::Path, report: &MetricsReport) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(["metric", "value"])?;
    let rows: Vec<(&str, String)> = vec![
        ("precision_tb", format!("{:.2}", report.tb.precision)),
        ("recall_tb", format!("{:.2}", report.tb.recall)),
        ("f1_tb", format!("{:.2}", report.tb.f1)),
        ("precision_normal", format!("{:.2}", report.normal.precision)),
        ("recall_normal", format!("{:.2}", report.normal.recall)),
        ("f1_normal", format!("{:.2}", report.normal.f1)),
        ("accuracy", format!("{:.2}", report.accuracy)),
        ("tp", report.confusion.tp.to_string()),
        ("fn", report.confusion.fn_.to_string()),
        ("fp", report.confusion.fp.to_string()),
        ("tn", report.confusion.tn.to_string()),
        ("division_by_zero_tb", report.tb.division_by_zero.to_string()),
        ("division_by_zero_normal", report.normal.division_by_zero.to_string()),
    ];
    for (k, v) in rows {
        wtr.write_record([k, v.as_str()])?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Parse a report written by [`write_report`] back into a `MetricsReport`.
pub fn read_report(path: &std::path::Path) -> Result<MetricsReport> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut fields = std::collections::BTreeMap::new();
    for record in rdr.records() {
        let record = record?;
        let k = record.get(0).unwrap_or("").to_string();
        let v = record.get(1).unwrap_or("").to_string();
        fields.insert(k, v);
    }
    let get = |k: &str| -> Result<String> {
        fields.get(k).cloned().ok_or_else(|| Error::invalid(format!("report misses {k}")))
    };
    let num = |k: &str| -> Result<f64> {
        get(k)?.parse().map_err(|_| Error::invalid(format!("bad number for {k}")))
    };
    let count = |k: &str| -> Result<usize> {
        get(k)?.parse().map_err(|_| Error::invalid(format!("bad count for {k}")))
    };
    let flag = |k: &str| -> Result<bool> {
        get(k)?.parse().map_err(|_| Error::invalid(format!("bad flag for {k}")))
    };
    Ok(MetricsReport {
        tb: ClassMetrics {
            precision: num("precision_tb")?,
            recall: num("recall_tb")?,
            f1: num("f1_tb")?,
            division_by_zero: flag("division_by_zero_tb")?,
        },
        normal: ClassMetrics {
            precision: num("precision_normal")?,
            recall: num("recall_normal")?,
            f1: num("f1_normal")?,
            division_by_zero: flag("division_by_zero_normal")?,
        },
        accuracy: num("accuracy")?,
        confusion: ConfusionMatrix {
            tp: count("tp")?,
            fn_: count("fn")?,
            fp: count("fp")?,
            tn: count("tn")?,
        },
    })
}

/// Predict each sample with sigmoid(logit) >= threshold and aggregate.
pub fn evaluate<'a>(
    model: &Screener,
    test: impl IntoIterator<Item = (&'a Grid, Label)>,
    threshold: f64,
) -> Result<MetricsReport> {
    let mut confusion = ConfusionMatrix { tp: 0, fn_: 0, fp: 0, tn: 0 };
    let mut seen = 0usize;
    for (image, label) in test {
        let logit = model.predict_logit(image)?;
        let p = 1.0 / (1.0 + (-logit).exp());
        let predicted_tb = p >= threshold;
        match (label, predicted_tb) {
            (Label::Tb, true) => confusion.tp += 1,
            (Label::Tb, false) => confusion.fn_ += 1,
            (Label::Normal, true) => confusion.fp += 1,
            (Label::Normal, false) => confusion.tn += 1,
        }
        seen += 1;
    }
    if seen == 0 {
        return Err(Error::invalid("empty test split"));
    }
    compute_metrics(&confusion)
}

/// Per-head CLS-token attention over the patch grid.
#[derive(Debug, Clone)]
pub struct AttentionMap {
    pub head_index: usize,
    /// Raw non-negative weights, patch-grid layout.
    pub grid: Grid,
    /// Min-max scaled to [0,1]; all zeros when the raw grid is constant.
    pub normalized: Grid,
    /// Set when the raw grid was constant and normalization degenerated.
    pub constant: bool,
}

/// Min-max normalize; constant grids flag and return all zeros.
fn normalize_map(grid: &Grid) -> (Grid, bool) {
    let (lo, hi) = grid.min_max();
    if hi - lo < 1e-12 {
        return (Grid::zeros(grid.height(), grid.width()), true);
    }
    let (h, w) = grid.dims();
    (Grid::from_fn(h, w, |r, c| (grid.get(r, c) - lo) / (hi - lo)), false)
}

/// Class-token attention of every head at `layer` (default: last),
/// reshaped to the patch grid and min-max normalized.
pub fn extract_attention(
    model: &Screener,
    image: &Grid,
    layer: Option<usize>,
) -> Result<Vec<AttentionMap>> {
    let x = model.grid_to_tensor(image)?;
    let (_, record) = model.encoder_forward(&x, &mut RunMode::Infer, Capture::default())?;
    let layer = layer.unwrap_or(record.layers() - 1);
    let rows = record.cls_over_patches(layer)?; // (1, heads, n)
    let heads = rows.dim(1)?;
    let n = rows.dim(2)?;
    let side = (n as f64).sqrt() as usize;
    if side * side != n {
        return Err(Error::invalid("non-square patch grid"));
    }
    let values = rows.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let mut maps = Vec::with_capacity(heads);
    for h in 0..heads {
        let grid = Grid::from_fn(side, side, |r, c| values[h * n + r * side + c] as f32);
        let (normalized, constant) = normalize_map(&grid);
        maps.push(AttentionMap { head_index: h, grid, normalized, constant });
    }
    Ok(maps)
}

/// pixel = 1 iff normalized value >= theta.
pub fn threshold_map(map: &AttentionMap, theta: f64) -> Result<BitGrid> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::invalid("theta must be in [0,1]"));
    }
    let (h, w) = map.normalized.dims();
    Ok(BitGrid::from_fn(h, w, |r, c| map.normalized.get(r, c) as f64 >= theta))
}

/// Max-pool a full-resolution mask onto a patch grid: a patch is set when
/// any of its pixels is set.
pub fn pool_mask_to_patches(mask: &BitGrid, grid_side: usize) -> BitGrid {
    let (h, w) = mask.dims();
    BitGrid::from_fn(grid_side, grid_side, |gr, gc| {
        let r0 = gr * h / grid_side;
        let r1 = ((gr + 1) * h).div_ceil(grid_side).min(h);
        let c0 = gc * w / grid_side;
        let c1 = ((gc + 1) * w).div_ceil(grid_side).min(w);
        (r0..r1).any(|r| (c0..c1).any(|c| mask.get(r, c)))
    })
}

/// Intersection over union between a predicted patch mask and a
/// full-resolution lesion mask (max-pooled to the same grid).
pub fn localization_score(prediction: &BitGrid, lesion_mask: &BitGrid) -> f64 {
    let truth = pool_mask_to_patches(lesion_mask, prediction.height());
    iou(prediction, &truth)
}

pub fn iou(a: &BitGrid, b: &BitGrid) -> f64 {
    debug_assert_eq!(a.dims(), b.dims());
    let mut inter = 0usize;
    let mut union = 0usize;
    for r in 0..a.height() {
        for c in 0..a.width() {
            let (x, y) = (a.get(r, c), b.get(r, c));
            if x && y {
                inter += 1;
            }
            if x || y {
                union += 1;
            }
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Head maximizing mean IoU over a validation batch; ties go to the
/// lowest index. Returns (head index, per-head mean scores).
pub fn select_best_head(
    model: &Screener,
    validation: &[(&Grid, &BitGrid)],
    theta: f64,
) -> Result<(usize, Vec<f64>)> {
    if validation.is_empty() {
        return Err(Error::GroundTruthRequired);
    }
    let mut sums: Vec<f64> = Vec::new();
    for (image, lesion_mask) in validation {
        let maps = extract_attention(model, image, None)?;
        if sums.is_empty() {
            sums = vec![0.0; maps.len()];
        }
        for map in &maps {
            let mask = threshold_map(map, theta)?;
            sums[map.head_index] += localization_score(&mask, lesion_mask);
        }
    }
    let n = validation.len() as f64;
    let means: Vec<f64> = sums.iter().map(|s| s / n).collect();
    let best = means
        .iter()
        .enumerate()
        .max_by(|(ia, a), (ib, b)| a.partial_cmp(b).unwrap().then(ib.cmp(ia)))
        .map(|(i, _)| i)
        .expect("non-empty");
    Ok((best, means))
}

/// Upsample the normalized map, color-map it and alpha-blend (0.5) over
/// the grayscale image; written as RGB PNG.
pub fn render_overlay(image: &Grid, map: &AttentionMap, path: &Path) -> Result<()> {
    let (h, w) = image.dims();
    let up = map.normalized.resize_bilinear(h, w)?;
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for r in 0..h {
        for c in 0..w {
            let gray = image.get(r, c).clamp(0.0, 1.0);
            let (hr, hg, hb) = heat_color(up.get(r, c).clamp(0.0, 1.0));
            let blend = |g: f32, x: f32| (((g * 0.5 + x * 0.5) * 255.0).round()) as u8;
            img.put_pixel(
                c as u32,
                r as u32,
                image::Rgb([blend(gray, hr), blend(gray, hg), blend(gray, hb)]),
            );
        }
    }
    img.save(path)?;
    Ok(())
}

/// Blue -> cyan -> green -> yellow -> red ramp.
fn heat_color(v: f32) -> (f32, f32, f32) {
    let r = (4.0 * v - 2.0).clamp(0.0, 1.0);
    let g = if v < 0.5 { (4.0 * v - 0.5).clamp(0.0, 1.0) } else { (-4.0 * v + 3.5).clamp(0.0, 1.0) };
    let b = (-4.0 * v + 2.0).clamp(0.0, 1.0);
    (r, g, b)
}
