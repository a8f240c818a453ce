//! Partition quality against ground-truth region labels.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::hierarchy::SegmentationMap;
use crate::raster::LabelMap;

use super::edges::{squared_distance_transform, EdgeMask};

fn check_size(pred: &SegmentationMap, gt: &LabelMap) -> Result<()> {
    if pred.labels.len() != gt.labels.len() {
        return Err(Error::Shape(format!(
            "segmentation has {} pixels, labels have {}",
            pred.labels.len(),
            gt.labels.len()
        )));
    }
    Ok(())
}

/// Mean over ground-truth regions of the best IoU any predicted segment
/// reaches with that region.
pub fn region_miou(pred: &SegmentationMap, gt: &LabelMap) -> Result<f64> {
    check_size(pred, gt)?;
    let mut inter: BTreeMap<(u32, usize), usize> = BTreeMap::new();
    let mut gt_area: BTreeMap<u32, usize> = BTreeMap::new();
    let mut pred_area: BTreeMap<usize, usize> = BTreeMap::new();
    for (&g, &p) in gt.labels.iter().zip(&pred.labels) {
        *inter.entry((g, p)).or_default() += 1;
        *gt_area.entry(g).or_default() += 1;
        *pred_area.entry(p).or_default() += 1;
    }
    let mut best: BTreeMap<u32, f64> = BTreeMap::new();
    for (&(g, p), &i) in &inter {
        let iou = i as f64 / (gt_area[&g] + pred_area[&p] - i) as f64;
        let b = best.entry(g).or_default();
        *b = b.max(iou);
    }
    if best.is_empty() {
        return Err(Error::Undefined("empty raster".into()));
    }
    Ok(best.values().sum::<f64>() / best.len() as f64)
}

/// Pixels with a 4-neighbor carrying a different label.
pub fn label_boundaries<L: PartialEq>(labels: &[L], height: usize, width: usize) -> EdgeMask {
    let mut m = EdgeMask::empty(height, width);
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            let differs = (x + 1 < width && labels[i + 1] != labels[i])
                || (x > 0 && labels[i - 1] != labels[i])
                || (y + 1 < height && labels[i + width] != labels[i])
                || (y > 0 && labels[i - width] != labels[i]);
            m.data[i] = differs;
        }
    }
    m
}

/// Boundary F-score: a boundary pixel counts as matched when the other
/// side has a boundary pixel within `tol_px`.
pub fn boundary_fscore(pred: &SegmentationMap, gt: &LabelMap, tol_px: f64) -> Result<f64> {
    check_size(pred, gt)?;
    let (h, w) = (gt.height, gt.width);
    let pb = label_boundaries(&pred.labels, h, w);
    let gb = label_boundaries(&gt.labels, h, w);
    let (np, ng) = (pb.count(), gb.count());
    if np == 0 && ng == 0 {
        return Ok(1.0);
    }
    if np == 0 || ng == 0 {
        return Ok(0.0);
    }
    let tol2 = tol_px * tol_px;
    let matched = |from: &EdgeMask, to: &EdgeMask| {
        let dt = squared_distance_transform(to);
        from.data.iter().zip(&dt).filter(|(&e, &d)| e && d <= tol2).count() as f64
    };
    let precision = matched(&pb, &gb) / np as f64;
    let recall = matched(&gb, &pb) / ng as f64;
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}
