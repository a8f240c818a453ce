//! Evaluation battery over a dataset: per-sample rows, a macro row and
//! dataset-level retrieval.

use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::geometry::{backproject, chamfer_3d, Intrinsics};
use crate::hierarchy::SegmentationMap;
use crate::kv::KvMap;
use crate::loss_metrics::{
    boundary_chamfer, boundary_fscore, canny_edges, fmt6, masks_from_labels, pixel_metrics, region_miou, retrieval_topk,
    segment_metrics, silog, ChamferMode, ItemId, Positives, RetrievalReport, CANNY_HIGH, CANNY_LOW, DEFAULT_LAMBDA,
};
use crate::model::Model;
use crate::ndcore::Real;
use crate::raster::DepthMap;

/// What a method produced for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Predicted {
    pub depth: DepthMap,
    pub segmentation: Option<SegmentationMap>,
    pub embedding: Option<Vec<f32>>,
}

impl Predicted {
    /// Ground truth standing in for a prediction.
    pub fn oracle(s: &Sample) -> Self {
        let labels = s.instances.labels.iter().map(|&l| l as usize).collect();
        Self {
            depth: s.depth.clone(),
            segmentation: SegmentationMap::new(labels, s.instances.label_bound()).ok(),
            embedding: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalProtocols {
    /// Hierarchy level compared against instances; `None` picks the coarsest.
    pub segment_level: Option<usize>,
    pub boundary_tol: f64,
    pub chamfer: ChamferMode,
    pub lambda: f64,
    pub retrieval_k: usize,
    pub positives: Positives,
}

impl Default for EvalProtocols {
    fn default() -> Self {
        Self {
            segment_level: None,
            boundary_tol: 1.0,
            chamfer: ChamferMode::Squared,
            lambda: DEFAULT_LAMBDA,
            retrieval_k: 1,
            positives: Positives::SameGroup,
        }
    }
}

pub const COLUMNS: [&str; 15] = [
    "abs_rel",
    "rmse",
    "log10",
    "delta1",
    "delta2",
    "delta3",
    "silog",
    "seg_abs_rel",
    "seg_delta1",
    "eps_a",
    "eps_c",
    "miou",
    "fscore",
    "chamfer_pred_gt",
    "chamfer_gt_pred",
];

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub scene_id: u32,
    pub frame_id: u32,
    /// Aligned with [`COLUMNS`]; `None` where the protocol could not run.
    pub values: Vec<Option<f64>>,
    pub notes: Vec<String>,
}

impl EvalRow {
    pub fn get(&self, column: &str) -> Option<f64> {
        COLUMNS.iter().position(|&c| c == column).and_then(|i| self.values[i])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// Column means over the rows where each column is defined.
    pub mean: Vec<Option<f64>>,
    pub retrieval: Option<RetrievalReport>,
}

fn cell(v: Option<f64>) -> String {
    v.map_or("na".into(), fmt6)
}

impl EvalReport {
    pub fn mean_of(&self, column: &str) -> Option<f64> {
        COLUMNS.iter().position(|&c| c == column).and_then(|i| self.mean[i])
    }

    /// One line per sample and a final `mean` line.
    pub fn to_csv(&self) -> String {
        let mut s = format!("sample,scene,frame,{},notes\n", COLUMNS.join(","));
        for (i, r) in self.rows.iter().enumerate() {
            let vals: Vec<String> = r.values.iter().map(|&v| cell(v)).collect();
            s.push_str(&format!("{i},{},{},{},{}\n", r.scene_id, r.frame_id, vals.join(","), r.notes.join(";")));
        }
        let vals: Vec<String> = self.mean.iter().map(|&v| cell(v)).collect();
        s.push_str(&format!("mean,,,{},\n", vals.join(",")));
        s
    }

    pub fn to_kv(&self) -> KvMap {
        let mut m: KvMap = COLUMNS.iter().zip(&self.mean).map(|(c, &v)| (format!("mean.{c}"), cell(v))).collect();
        m.insert("samples".into(), self.rows.len().to_string());
        match &self.retrieval {
            Some(r) => {
                m.insert("retrieval.accuracy".into(), fmt6(r.accuracy));
                m.insert("retrieval.queries".into(), r.queries.to_string());
            }
            None => {
                m.insert("retrieval.accuracy".into(), "na".into());
            }
        }
        m
    }
}

fn undefined_ok<T>(r: Result<T>, what: &str, notes: &mut Vec<String>) -> Result<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::Undefined(msg)) => {
            notes.push(format!("{what}: {msg}"));
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

fn row(s: &Sample, p: &Predicted, proto: &EvalProtocols) -> Result<EvalRow> {
    let mut notes = Vec::new();
    let mut v: Vec<Option<f64>> = vec![None; COLUMNS.len()];
    if let Some(r) = undefined_ok(pixel_metrics(&p.depth, &s.depth), "pixel", &mut notes)? {
        for (k, x) in r.values().into_iter().enumerate() {
            v[k] = Some(x);
        }
    }
    v[6] = undefined_ok(silog(&p.depth, &s.depth, proto.lambda), "silog", &mut notes)?;
    let seg = segment_metrics(&p.depth, &s.depth, &masks_from_labels(&s.instances))?;
    match seg.macro_avg {
        Some(m) => {
            v[7] = Some(m.abs_rel);
            v[8] = Some(m.delta1);
        }
        None => notes.push("segments: no valid instance".into()),
    }
    let pe = canny_edges(&p.depth, CANNY_LOW, CANNY_HIGH);
    let ge = canny_edges(&s.depth, CANNY_LOW, CANNY_HIGH);
    if let Some((a, c)) = undefined_ok(boundary_chamfer(&pe, &ge, proto.chamfer), "boundary", &mut notes)? {
        v[9] = Some(a);
        v[10] = Some(c);
    }
    match &p.segmentation {
        Some(sm) => {
            v[11] = Some(region_miou(sm, &s.instances)?);
            v[12] = Some(boundary_fscore(sm, &s.instances, proto.boundary_tol)?);
        }
        None => notes.push("segmentation: not provided".into()),
    }
    let k = Intrinsics::for_size(s.depth.height, s.depth.width);
    let pc = backproject(&p.depth, &k, 1.0);
    let gc = backproject(&s.depth, &k, 1.0);
    if let Some((a, b)) = undefined_ok(chamfer_3d(&pc, &gc, proto.chamfer), "chamfer_3d", &mut notes)? {
        v[13] = Some(a);
        v[14] = Some(b);
    }
    Ok(EvalRow {
        scene_id: s.scene_id,
        frame_id: s.frame_id,
        values: v,
        notes,
    })
}

/// Scores `preds[i]` against `data.samples[i]`.
pub fn evaluate(data: &Dataset, preds: &[Predicted], proto: &EvalProtocols) -> Result<EvalReport> {
    if preds.len() != data.len() {
        return Err(Error::Shape(format!("{} predictions for {} samples", preds.len(), data.len())));
    }
    let rows = data
        .samples
        .iter()
        .zip(preds)
        .map(|(s, p)| row(s, p, proto))
        .collect::<Result<Vec<_>>>()?;
    let mean = (0..COLUMNS.len())
        .map(|c| {
            let vals: Vec<f64> = rows.iter().filter_map(|r| r.values[c]).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        })
        .collect();
    let retrieval = if preds.iter().all(|p| p.embedding.is_some()) && preds.len() >= 2 {
        let emb: Vec<Vec<f32>> = preds.iter().map(|p| p.embedding.clone().expect("checked")).collect();
        let ids: Vec<ItemId> = data
            .samples
            .iter()
            .map(|s| ItemId {
                scene: s.scene_id,
                frame: s.frame_id,
            })
            .collect();
        match retrieval_topk(&emb, &ids, proto.retrieval_k, proto.positives) {
            Ok(r) => Some(r),
            Err(Error::Undefined(_)) => None,
            Err(e) => return Err(e),
        }
    } else {
        None
    };
    Ok(EvalReport { rows, mean, retrieval })
}

/// Model predictions for every sample.
pub fn predict_all<T: Real>(model: &Model<T>, data: &Dataset, proto: &EvalProtocols) -> Result<Vec<Predicted>> {
    let level = proto.segment_level.unwrap_or(model.config.levels());
    if level > model.config.levels() {
        return Err(Error::Config(format!("segment level {level} beyond {}", model.config.levels())));
    }
    data.samples
        .iter()
        .map(|s| {
            let sp = model.superpixels(&s.image)?;
            let mut p = model.predict(&s.image, &sp)?;
            Ok(Predicted {
                depth: p.depth,
                segmentation: Some(p.segmentations.swap_remove(level)),
                embedding: Some(p.embedding),
            })
        })
        .collect()
}

pub fn evaluate_model<T: Real>(model: &Model<T>, data: &Dataset, proto: &EvalProtocols) -> Result<EvalReport> {
    evaluate(data, &predict_all(model, data, proto)?, proto)
}
