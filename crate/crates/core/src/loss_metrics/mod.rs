//! Training loss and evaluation metrics.

pub mod edges;
pub mod retrieval;
pub mod segments;

pub use edges::{boundary_chamfer, canny_edges, CANNY_HIGH, CANNY_LOW, squared_distance_transform, ChamferMode, EdgeMask};
pub use retrieval::{retrieval_topk, ItemId, Positives, RetrievalReport};
pub use segments::{boundary_fscore, label_boundaries, region_miou};

use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::ndcore::{Array, Real, Tape, Var};
use crate::raster::{DepthMap, LabelMap};

pub const DEFAULT_LAMBDA: f64 = 0.85;
/// Floor applied before taking logs in the loss.
pub const LOG_EPS: f64 = 1e-6;

fn shared_mask(pred: &DepthMap, gt: &DepthMap) -> Result<Vec<bool>> {
    if !pred.same_size(gt) {
        return Err(Error::Shape(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    let m: Vec<bool> = pred.valid.iter().zip(&gt.valid).map(|(&a, &b)| a && b).collect();
    if !m.iter().any(|&v| v) {
        return Err(Error::Undefined("no pixel is valid in both maps".into()));
    }
    Ok(m)
}

/// Scale-invariant log loss `mean(g²) − λ·mean(g)²`, `g = log p − log t`.
pub fn silog(pred: &DepthMap, gt: &DepthMap, lambda: f64) -> Result<f64> {
    let mask = shared_mask(pred, gt)?;
    let (mut s1, mut s2, mut n) = (0.0, 0.0, 0.0);
    for ((&p, &g), _) in pred.values.iter().zip(&gt.values).zip(&mask).filter(|(_, &m)| m) {
        let d = (p as f64).max(LOG_EPS).ln() - (g as f64).max(LOG_EPS).ln();
        s1 += d;
        s2 += d * d;
        n += 1.0;
    }
    Ok(s2 / n - lambda * (s1 / n).powi(2))
}

/// [`silog`] on a tape; `pred` is an `(h*w) x 1` depth column.
pub fn silog_loss<T: Real>(t: &mut Tape<T>, pred: Var, gt: &DepthMap, lambda: f64) -> Result<Var> {
    let pv = t.value(pred);
    if pv.len() != gt.values.len() {
        return Err(Error::Shape(format!("{} predictions for {} targets", pv.len(), gt.values.len())));
    }
    let n = gt.valid_count();
    if n == 0 {
        return Err(Error::Undefined("ground truth has no valid pixel".into()));
    }
    let shape = pv.shape().to_vec();
    let mask = Array::from_vec(&shape, gt.valid.iter().map(|&v| if v { T::one() } else { T::zero() }).collect())?;
    let log_gt = Array::from_vec(
        &shape,
        gt.values
            .iter()
            .zip(&gt.valid)
            .map(|(&g, &v)| if v { T::lit((g as f64).max(LOG_EPS).ln()) } else { T::zero() })
            .collect(),
    )?;
    let p = t.clamp(pred, T::lit(LOG_EPS), T::infinity());
    let lp = t.log(p);
    let lg = t.constant(log_gt);
    let g = t.sub(lp, lg);
    let g = t.mul_const(g, mask);
    let inv_n = T::lit(1.0 / n as f64);
    let g2 = t.square(g);
    let s2 = t.sum_all(g2);
    let msq = t.scale(s2, inv_n);
    let s1 = t.sum_all(g);
    let mean = t.scale(s1, inv_n);
    let mean2 = t.square(mean);
    let pen = t.scale(mean2, T::lit(lambda));
    Ok(t.sub(msq, pen))
}

/// Per-pixel depth accuracy and error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub abs_rel: f64,
    pub rmse: f64,
    pub log10: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

pub const METRIC_COLUMNS: [&str; 6] = ["abs_rel", "rmse", "log10", "delta1", "delta2", "delta3"];

impl MetricReport {
    pub fn values(&self) -> [f64; 6] {
        [self.abs_rel, self.rmse, self.log10, self.delta1, self.delta2, self.delta3]
    }

    pub fn from_values(v: [f64; 6]) -> Self {
        Self {
            abs_rel: v[0],
            rmse: v[1],
            log10: v[2],
            delta1: v[3],
            delta2: v[4],
            delta3: v[5],
        }
    }

    /// Unweighted mean of several reports.
    pub fn mean<'a>(reports: impl IntoIterator<Item = &'a MetricReport>) -> Option<Self> {
        let mut acc = [0.0; 6];
        let mut n = 0.0;
        for r in reports {
            for (a, v) in acc.iter_mut().zip(r.values()) {
                *a += v;
            }
            n += 1.0;
        }
        (n > 0.0).then(|| Self::from_values(acc.map(|a| a / n)))
    }

    pub fn to_kv(&self, prefix: &str) -> KvMap {
        METRIC_COLUMNS
            .iter()
            .zip(self.values())
            .map(|(k, v)| (format!("{prefix}{k}"), fmt6(v)))
            .collect()
    }

    pub fn csv_fields(&self) -> Vec<String> {
        self.values().iter().map(|&v| fmt6(v)).collect()
    }
}

/// Fixed six-decimal rendering used by every report.
pub fn fmt6(v: f64) -> String {
    format!("{v:.6}")
}

/// Clamping and ratio conventions for [`pixel_metrics`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricOptions {
    pub min_depth: f64,
    pub max_depth: f64,
    /// Threshold on `pred / gt` only instead of `max(pred/gt, gt/pred)`.
    pub one_sided: bool,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self {
            min_depth: 1e-3,
            max_depth: 10.0,
            one_sided: false,
        }
    }
}

pub fn pixel_metrics(pred: &DepthMap, gt: &DepthMap) -> Result<MetricReport> {
    pixel_metrics_with(pred, gt, None, &MetricOptions::default())
}

/// Metrics over pixels valid in both maps and, if given, inside `region`.
pub fn pixel_metrics_with(
    pred: &DepthMap,
    gt: &DepthMap,
    region: Option<&[bool]>,
    opts: &MetricOptions,
) -> Result<MetricReport> {
    let mask = shared_mask(pred, gt)?;
    let mut acc = [0.0f64; 6];
    let mut n = 0.0;
    for i in 0..mask.len() {
        if !mask[i] || region.is_some_and(|r| !r[i]) {
            continue;
        }
        let p = (pred.values[i] as f64).clamp(opts.min_depth, opts.max_depth);
        let g = (gt.values[i] as f64).clamp(opts.min_depth, opts.max_depth);
        acc[0] += (p - g).abs() / g;
        acc[1] += (p - g).powi(2);
        acc[2] += (p.log10() - g.log10()).abs();
        let ratio = if opts.one_sided { p / g } else { (p / g).max(g / p) };
        for (k, a) in acc[3..].iter_mut().enumerate() {
            if ratio < 1.25f64.powi(k as i32 + 1) {
                *a += 1.0;
            }
        }
        n += 1.0;
    }
    if n == 0.0 {
        return Err(Error::Undefined("no valid pixel in region".into()));
    }
    let mut v = acc.map(|a| a / n);
    v[1] = v[1].sqrt();
    Ok(MetricReport::from_values(v))
}

/// Per-region metrics plus their macro average.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentReport {
    /// `None` for regions without a valid pixel.
    pub per_segment: Vec<Option<MetricReport>>,
    pub macro_avg: Option<MetricReport>,
}

pub fn segment_metrics(pred: &DepthMap, gt: &DepthMap, masks: &[Vec<bool>]) -> Result<SegmentReport> {
    let opts = MetricOptions::default();
    let mut per_segment = Vec::with_capacity(masks.len());
    for m in masks {
        if m.len() != gt.values.len() {
            return Err(Error::Shape("segment mask size differs from depth size".into()));
        }
        per_segment.push(match pixel_metrics_with(pred, gt, Some(m), &opts) {
            Ok(r) => Some(r),
            Err(Error::Undefined(_)) => None,
            Err(e) => return Err(e),
        });
    }
    let macro_avg = MetricReport::mean(per_segment.iter().flatten());
    Ok(SegmentReport { per_segment, macro_avg })
}

/// One mask per label value, ordered by label.
pub fn masks_from_labels(labels: &LabelMap) -> Vec<Vec<bool>> {
    (0..labels.label_bound())
        .map(|k| labels.labels.iter().map(|&l| l as usize == k).collect())
        .collect()
}
