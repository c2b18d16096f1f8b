//! Turning head outputs into ranked detections: offset decoding, score
//! thresholding, greedy non-maximum suppression, and prediction CSV IO.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::annotations::BoxXyzd;
use crate::assignment::{
    decode_offsets, decode_offsets_anchor, iou_cube, AnchorConfig, CenterPoint, FeatureGridSpec,
};
use crate::error::{Error, Result};
use crate::network::Tensor5;
use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PostprocessConfig {
    pub score_thresh: f64,
    pub nms_iou: f64,
    pub max_per_crop: usize,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        PostprocessConfig {
            score_thresh: 0.05,
            nms_iou: 0.1,
            max_per_crop: 200,
        }
    }
}

impl PostprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.score_thresh) {
            return Err(Error::Config("score_thresh must be in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(Error::Config("nms_iou must be in [0, 1]".into()));
        }
        if self.max_per_crop == 0 {
            return Err(Error::Config("max_per_crop must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub score: f64,
    pub bbox: BoxXyzd,
    pub level: usize,
    pub cell: [usize; 3],
    pub anchor: usize,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Decodes every slot above the score threshold across all levels.
/// Centroids are clamped to the crop extent implied by each grid;
/// results are sorted by descending score (ties keep scan order).
pub fn decode_detections<T: Real>(
    preds: &[Tensor5<T>],
    specs: &[FeatureGridSpec],
    anchors: Option<&AnchorConfig>,
    score_thresh: f64,
) -> Result<Vec<Detection>> {
    if preds.len() != specs.len() {
        return Err(Error::Shape(format!(
            "{} prediction tensors for {} grid specs",
            preds.len(),
            specs.len()
        )));
    }
    let k = anchors.map_or(1, |a| a.diameters_mm[0].len());
    let mut out = Vec::new();
    for (pred, spec) in preds.iter().zip(specs) {
        let want = [1, 5 * k, spec.dims[0], spec.dims[1], spec.dims[2]];
        if pred.shape != want {
            return Err(Error::Shape(format!(
                "level {} prediction shape {:?} does not match expected {:?}",
                spec.level, pred.shape, want
            )));
        }
        let extent = [
            (spec.dims[0] * spec.stride) as f64,
            (spec.dims[1] * spec.stride) as f64,
            (spec.dims[2] * spec.stride) as f64,
        ];
        let plane = pred.plane_len();
        let n_cells = spec.n_cells();
        for a in 0..k {
            let anchor_d = anchors.map(|cfg| cfg.diameters_mm[spec.level][a]);
            for flat in 0..n_cells {
                let logit = pred.data[5 * a * plane + flat].as_f64();
                let score = sigmoid(logit);
                if score < score_thresh {
                    continue;
                }
                let cell = spec.cell_of(flat);
                let point = CenterPoint {
                    cell,
                    pos: spec.position(cell),
                };
                let mut off = [0.0f64; 4];
                for (i, o) in off.iter_mut().enumerate() {
                    *o = pred.data[(5 * a + 1 + i) * plane + flat].as_f64();
                }
                let mut bbox = match anchor_d {
                    Some(d) => decode_offsets_anchor(off, &point, d),
                    None => decode_offsets(off, &point, spec.stride),
                };
                bbox.x_mm = bbox.x_mm.clamp(0.0, extent[2]);
                bbox.y_mm = bbox.y_mm.clamp(0.0, extent[1]);
                bbox.z_mm = bbox.z_mm.clamp(0.0, extent[0]);
                out.push(Detection {
                    score,
                    bbox,
                    level: spec.level,
                    cell,
                    anchor: a,
                });
            }
        }
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(out)
}

/// Greedy NMS: walk detections in descending score order, drop any whose
/// IoU with an already kept detection exceeds `iou_thresh`. Score ties
/// keep the earlier element first.
pub fn nms_3d(detections: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].score.total_cmp(&detections[a].score));
    let mut kept: Vec<Detection> = Vec::new();
    for idx in order {
        let cand = &detections[idx];
        if kept
            .iter()
            .all(|k| iou_cube(&k.bbox, &cand.bbox) <= iou_thresh)
        {
            kept.push(cand.clone());
        }
    }
    kept
}

pub fn top_k(mut detections: Vec<Detection>, max: usize) -> Vec<Detection> {
    detections.sort_by(|a, b| b.score.total_cmp(&a.score));
    detections.truncate(max);
    detections
}

pub const PREDICTION_HEADER: [&str; 6] =
    ["scan_id", "x_mm", "y_mm", "z_mm", "diameter_mm", "score"];

#[derive(Debug, Clone, PartialEq)]
pub struct ScanPrediction {
    pub scan_id: String,
    pub bbox: BoxXyzd,
    pub score: f64,
}

/// Writes predictions sorted by scan id, then descending score.
pub fn write_predictions(path: &Path, preds: &[ScanPrediction]) -> Result<()> {
    let mut rows: Vec<&ScanPrediction> = preds.iter().collect();
    rows.sort_by(|a, b| {
        a.scan_id
            .cmp(&b.scan_id)
            .then_with(|| b.score.total_cmp(&a.score))
    });
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(PREDICTION_HEADER)
        .map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::Other, e.to_string()),
        })?;
    for p in rows {
        w.write_record([
            p.scan_id.clone(),
            format!("{}", p.bbox.x_mm),
            format!("{}", p.bbox.y_mm),
            format!("{}", p.bbox.z_mm),
            format!("{}", p.bbox.diameter_mm),
            format!("{}", p.score),
        ])
        .map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::Other, e.to_string()),
        })?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<ScanPrediction>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Malformed {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let header = rdr.headers().map_err(|e| Error::Malformed {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    if header != PREDICTION_HEADER.as_slice() {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            detail: format!("expected header {:?}, found {:?}", PREDICTION_HEADER, header),
        });
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| Error::CsvRow {
            path: path.to_path_buf(),
            row,
            detail: e.to_string(),
        })?;
        let field = |j: usize| -> Result<f64> {
            rec.get(j)
                .ok_or(())
                .and_then(|s| s.trim().parse::<f64>().map_err(|_| ()))
                .map_err(|_| Error::CsvRow {
                    path: path.to_path_buf(),
                    row,
                    detail: format!("column {:?} is not a number", PREDICTION_HEADER[j]),
                })
        };
        let scan_id = rec
            .get(0)
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .ok_or_else(|| Error::CsvRow {
                path: path.to_path_buf(),
                row,
                detail: "empty scan_id".into(),
            })?;
        let bbox = BoxXyzd {
            x_mm: field(1)?,
            y_mm: field(2)?,
            z_mm: field(3)?,
            diameter_mm: field(4)?,
        };
        let score = field(5)?;
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::CsvRow {
                path: path.to_path_buf(),
                row,
                detail: format!("score {score} outside [0, 1]"),
            });
        }
        if !(bbox.diameter_mm > 0.0) {
            return Err(Error::CsvRow {
                path: path.to_path_buf(),
                row,
                detail: format!("diameter {} must be positive", bbox.diameter_mm),
            });
        }
        out.push(ScanPrediction {
            scan_id,
            bbox,
            score,
        });
    }
    Ok(out)
}
