//! FROC evaluation with centroid-in-mass matching.
//!
//! A detection counts as a true positive when its centroid lies strictly
//! inside the radius of a not-yet-hit ground-truth lesion; duplicates on
//! an already-hit lesion are ignored rather than penalized. Curves sweep
//! every detection score as a threshold and report step-interpolated
//! sensitivity at configurable false-positive rates. Detections with
//! score <= 0 are never considered operating candidates.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::annotations::{Annotation, BoxXyzd};
use crate::error::{Error, Result};

pub const LUNA16_FP_RATES: [f64; 7] = [0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0];
pub const TABLE1_FP_RATES: [f64; 6] = [0.5, 1.0, 2.0, 4.0, 8.0, 16.0];

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredBox {
    pub score: f64,
    pub bbox: BoxXyzd,
}

#[derive(Debug, Clone)]
pub struct EvalScan {
    pub scan_id: String,
    pub dets: Vec<ScoredBox>,
    pub gts: Vec<Annotation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetStatus {
    /// Matched the ground-truth lesion at this index.
    Tp(usize),
    Fp,
    /// Landed on a lesion that an earlier detection already claimed.
    Ignored,
}

#[derive(Debug, Clone)]
pub struct MatchResult {
    pub det_status: Vec<DetStatus>,
    pub gt_hit: Vec<bool>,
}

fn centroid_distance(a: &BoxXyzd, b: &BoxXyzd) -> f64 {
    let ca = a.center_zyx();
    let cb = b.center_zyx();
    ((ca[0] - cb[0]).powi(2) + (ca[1] - cb[1]).powi(2) + (ca[2] - cb[2]).powi(2)).sqrt()
}

/// Greedy matching in the given order (callers pass detections sorted by
/// descending score). Each detection claims the nearest unhit lesion
/// whose radius strictly contains its centroid.
pub fn match_detections(dets: &[ScoredBox], gts: &[BoxXyzd]) -> MatchResult {
    debug_assert!(dets.windows(2).all(|w| w[0].score >= w[1].score));
    let mut gt_hit = vec![false; gts.len()];
    let mut det_status = Vec::with_capacity(dets.len());
    for det in dets {
        let mut best: Option<(f64, usize)> = None;
        let mut touches_hit = false;
        for (gi, gt) in gts.iter().enumerate() {
            let dist = centroid_distance(&det.bbox, gt);
            if dist < gt.diameter_mm / 2.0 {
                if gt_hit[gi] {
                    touches_hit = true;
                } else if best.map_or(true, |(bd, _)| dist < bd) {
                    best = Some((dist, gi));
                }
            }
        }
        det_status.push(match best {
            Some((_, gi)) => {
                gt_hit[gi] = true;
                DetStatus::Tp(gi)
            }
            None if touches_hit => DetStatus::Ignored,
            None => DetStatus::Fp,
        });
    }
    MatchResult { det_status, gt_hit }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrocCurve {
    pub fp_rates: Vec<f64>,
    pub sensitivities: Vec<f64>,
    pub froc_score: f64,
    pub n_scans: usize,
    pub n_lesions: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub fp_per_scan: f64,
    pub sensitivity: f64,
}

fn sorted_dets(scan: &EvalScan) -> Vec<ScoredBox> {
    let mut dets: Vec<ScoredBox> = scan.dets.iter().filter(|d| d.score > 0.0).cloned().collect();
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    dets
}

/// All operating points, one per distinct detection score, in
/// descending-threshold order.
pub fn operating_points(per_scan: &[EvalScan]) -> Result<Vec<OperatingPoint>> {
    if per_scan.is_empty() {
        return Err(Error::Eval("need at least one scan".into()));
    }
    let n_scans = per_scan.len() as f64;
    let n_lesions: usize = per_scan.iter().map(|s| s.gts.len()).sum();
    if n_lesions == 0 {
        return Err(Error::Eval("ground truth contains no lesions".into()));
    }
    let mut events: Vec<(f64, bool)> = Vec::new();
    for scan in per_scan {
        let dets = sorted_dets(scan);
        let gts: Vec<BoxXyzd> = scan.gts.iter().map(|a| a.bbox).collect();
        let m = match_detections(&dets, &gts);
        for (det, status) in dets.iter().zip(&m.det_status) {
            match status {
                DetStatus::Tp(_) => events.push((det.score, true)),
                DetStatus::Fp => events.push((det.score, false)),
                DetStatus::Ignored => {}
            }
        }
    }
    events.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = Vec::new();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < events.len() {
        let score = events[i].0;
        while i < events.len() && events[i].0 == score {
            if events[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(OperatingPoint {
            threshold: score,
            fp_per_scan: fp as f64 / n_scans,
            sensitivity: tp as f64 / n_lesions as f64,
        });
    }
    Ok(points)
}

fn sensitivity_at(points: &[OperatingPoint], rate: f64) -> f64 {
    points
        .iter()
        .filter(|p| p.fp_per_scan <= rate)
        .map(|p| p.sensitivity)
        .fold(0.0, f64::max)
}

pub fn froc(per_scan: &[EvalScan], fp_rates: &[f64]) -> Result<FrocCurve> {
    if fp_rates.is_empty() {
        return Err(Error::Eval("need at least one FP rate".into()));
    }
    let points = operating_points(per_scan)?;
    let sensitivities: Vec<f64> = fp_rates.iter().map(|&r| sensitivity_at(&points, r)).collect();
    let froc_score = sensitivities.iter().sum::<f64>() / sensitivities.len() as f64;
    Ok(FrocCurve {
        fp_rates: fp_rates.to_vec(),
        sensitivities,
        froc_score,
        n_scans: per_scan.len(),
        n_lesions: per_scan.iter().map(|s| s.gts.len()).sum(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupKey {
    LesionType,
    SizeBucket,
}

pub fn size_bucket(diameter_mm: f64) -> &'static str {
    if diameter_mm < 10.0 {
        "<10"
    } else if diameter_mm <= 30.0 {
        "10-30"
    } else {
        ">30"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupSensitivity {
    pub label: String,
    pub n_lesions: usize,
    pub n_hit: usize,
    pub sensitivity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StratifiedReport {
    /// Operating threshold realizing sensitivity at the target rate.
    pub threshold: f64,
    pub fp_rate_target: f64,
    pub groups: Vec<GroupSensitivity>,
}

fn group_label(key: GroupKey, ann: &Annotation) -> String {
    match key {
        GroupKey::SizeBucket => size_bucket(ann.bbox.diameter_mm).to_string(),
        GroupKey::LesionType => {
            let t = ann.lesion_type.trim();
            if t.is_empty() {
                "other".to_string()
            } else {
                t.to_string()
            }
        }
    }
}

/// Per-group sensitivity at 4 FPs/scan using one global operating
/// threshold: the point with the highest sensitivity among those with
/// FP rate <= 4 (ties broken toward fewer FPs, then higher threshold).
pub fn stratified_report(per_scan: &[EvalScan], key: GroupKey) -> Result<StratifiedReport> {
    const TARGET: f64 = 4.0;
    let points = operating_points(per_scan)?;
    let chosen = points
        .iter()
        .filter(|p| p.fp_per_scan <= TARGET)
        .max_by(|a, b| {
            a.sensitivity
                .total_cmp(&b.sensitivity)
                .then(b.fp_per_scan.total_cmp(&a.fp_per_scan))
                .then(a.threshold.total_cmp(&b.threshold))
        });
    let threshold = chosen.map_or(f64::INFINITY, |p| p.threshold);
    let mut groups: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for scan in per_scan {
        let dets: Vec<ScoredBox> = sorted_dets(scan)
            .into_iter()
            .filter(|d| d.score >= threshold)
            .collect();
        let gts: Vec<BoxXyzd> = scan.gts.iter().map(|a| a.bbox).collect();
        let m = match_detections(&dets, &gts);
        for (ann, hit) in scan.gts.iter().zip(&m.gt_hit) {
            let entry = groups.entry(group_label(key, ann)).or_insert((0, 0));
            entry.0 += 1;
            if *hit {
                entry.1 += 1;
            }
        }
    }
    Ok(StratifiedReport {
        threshold,
        fp_rate_target: TARGET,
        groups: groups
            .into_iter()
            .map(|(label, (n, hit))| GroupSensitivity {
                label,
                n_lesions: n,
                n_hit: hit,
                sensitivity: hit as f64 / n as f64,
            })
            .collect(),
    })
}
