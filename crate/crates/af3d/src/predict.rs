//! Whole-volume inference: sliding windows, per-window decode, and a
//! global merge.
//!
//! The checkpoint decides the network architecture and head layout; the
//! run config supplies everything around it (spacing, intensity window,
//! tiling geometry, score threshold). A failure on one volume is reported
//! and the run moves on, so a single corrupt file cannot sink a batch job.

use std::path::{Path, PathBuf};

use crate::assignment::FeatureGridSpec;
use crate::config::{Mode, RunConfig};
use crate::error::{Error, Result};
use crate::network::checkpoint::{load_checkpoint, CheckpointMeta};
use crate::network::{Network, Tensor5};
use crate::postprocess::{decode_detections, top_k, write_predictions, Detection, ScanPrediction};
use crate::synth::{read_manifest, MANIFEST_FILE};
use crate::tiling::{assemble, extract_region, sliding_windows, to_global};
use crate::volume::{clip_and_normalize, read_volume, resample_isotropic, Volume};
use crate::Real;

#[derive(Debug, Clone)]
pub struct PredictReport {
    pub output: PathBuf,
    pub n_scans: usize,
    pub n_failed: usize,
    pub n_detections: usize,
}

fn window_input<T: Real>(v: &Volume) -> Tensor5<T> {
    let [z, y, x] = v.dims;
    let mut t = Tensor5::zeros([1, 1, z, y, x]);
    for (dst, &src) in t.data.iter_mut().zip(&v.voxels) {
        *dst = T::cast(src as f64);
    }
    t
}

fn voxels_to_mm(dets: Vec<Detection>, spacing_mm: f64) -> Vec<Detection> {
    dets.into_iter()
        .map(|mut d| {
            d.bbox.x_mm *= spacing_mm;
            d.bbox.y_mm *= spacing_mm;
            d.bbox.z_mm *= spacing_mm;
            d.bbox.diameter_mm *= spacing_mm;
            d
        })
        .collect()
}

/// Runs the full window-forward-decode-merge pipeline on one raw volume.
/// Returned detections are in global mm, NMS applied, descending score.
pub fn predict_volume<T: Real>(
    net: &mut Network<T>,
    cfg: &RunConfig,
    mode: Mode,
    vol: &Volume,
) -> Result<Vec<Detection>> {
    let iso = resample_isotropic(vol, cfg.spacing_mm as f32)?;
    let windowed = clip_and_normalize(&iso, cfg.window.hu_min, cfg.window.hu_max)?;
    let regions = sliding_windows(
        windowed.dims,
        cfg.tiling.window_shape,
        cfg.tiling.overlap,
    )?;
    let specs = FeatureGridSpec::pyramid(cfg.tiling.window_shape)?;
    let anchors = match mode {
        Mode::AnchorFree => None,
        Mode::AnchorBased => Some(cfg.anchors.clone().in_voxel_units(cfg.spacing_mm)),
    };
    let mut per_crop = Vec::with_capacity(regions.len());
    for region in regions {
        let crop = extract_region(&windowed, &region)?;
        let preds = net.forward(&window_input::<T>(&crop))?;
        let dets = decode_detections(
            &preds,
            &specs,
            anchors.as_ref(),
            cfg.postprocess.score_thresh,
        )?;
        let dets = top_k(dets, cfg.postprocess.max_per_crop);
        if let Some(bad) = dets.iter().find(|d| !d.score.is_finite()) {
            return Err(Error::NonFinite(format!(
                "detection score at level {} cell {:?}",
                bad.level, bad.cell
            )));
        }
        let dets = voxels_to_mm(dets, cfg.spacing_mm);
        let dets = to_global(&dets, &region, cfg.spacing_mm);
        per_crop.push((region, dets));
    }
    Ok(assemble(&per_crop, cfg.postprocess.nms_iou))
}

/// Resolves `(scan_id, volume_path)` pairs from a dataset manifest.
/// `split` is `train`, `val`, or `all`.
pub fn volumes_from_manifest(data_dir: &Path, split: &str) -> Result<Vec<(String, PathBuf)>> {
    let manifest = read_manifest(&data_dir.join(MANIFEST_FILE))?;
    let ids: Vec<String> = match split {
        "train" => manifest.splits.train.clone(),
        "val" => manifest.splits.val.clone(),
        "all" => {
            let mut v = manifest.splits.train.clone();
            v.extend(manifest.splits.val.iter().cloned());
            v
        }
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown split {other:?}, expected train, val, or all"
            )))
        }
    };
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let rel = manifest
            .files
            .get(&id)
            .ok_or_else(|| Error::Malformed {
                path: data_dir.join(MANIFEST_FILE),
                detail: format!("split references unknown scan {id:?}"),
            })?;
        out.push((id, data_dir.join(rel)));
    }
    Ok(out)
}

/// Scan id for a standalone volume path: the file stem.
pub fn scan_id_for_path(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.to_string_lossy().into_owned())
}

/// Loads a checkpoint and predicts every listed volume, writing one CSV.
/// Per-volume failures go through `warn` and the run continues.
pub fn predict_run<T: Real>(
    cfg: &RunConfig,
    checkpoint: &Path,
    volumes: &[(String, PathBuf)],
    out_path: &Path,
    mut warn: impl FnMut(&str),
) -> Result<(PredictReport, CheckpointMeta)> {
    let (mut net, meta, _velocity) = load_checkpoint::<T>(checkpoint)?;
    let mode: Mode = meta.mode.parse()?;
    let mut rows: Vec<ScanPrediction> = Vec::new();
    let mut n_failed = 0usize;
    for (scan_id, path) in volumes {
        let outcome = read_volume(path).and_then(|vol| predict_volume(&mut net, cfg, mode, &vol));
        match outcome {
            Ok(dets) => {
                rows.extend(dets.into_iter().map(|d| ScanPrediction {
                    scan_id: scan_id.clone(),
                    bbox: d.bbox,
                    score: d.score,
                }));
            }
            Err(e) => {
                n_failed += 1;
                warn(&format!("scan {scan_id}: {e}"));
            }
        }
    }
    write_predictions(out_path, &rows)?;
    Ok((
        PredictReport {
            output: out_path.to_path_buf(),
            n_scans: volumes.len() - n_failed,
            n_failed,
            n_detections: rows.len(),
        },
        meta,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::checkpoint::save_checkpoint;
    use crate::network::{build_network, NetworkConfig, Sgd};
    use crate::postprocess::read_predictions;
    use crate::volume::write_volume;
    use std::fs;

    fn tiny_net_config() -> NetworkConfig {
        NetworkConfig {
            base_channels: 4,
            blocks_per_stage: 1,
            growth: 2,
            head_channels: 4,
            k_per_point: 1,
        }
    }

    fn tiny_run_config(tag: &str) -> (RunConfig, PathBuf) {
        let base = std::env::temp_dir().join(format!("af3d-predict-{tag}-{}", std::process::id()));
        let _ = fs::remove_dir_all(&base);
        fs::create_dir_all(&base).unwrap();
        let mut cfg = RunConfig::default();
        cfg.network = tiny_net_config();
        cfg.tiling.window_shape = [32, 32, 32];
        cfg.tiling.overlap = [8, 8, 8];
        cfg.window.hu_min = 0.0;
        cfg.window.hu_max = 1.0;
        (cfg, base)
    }

    fn untrained_checkpoint(cfg: &RunConfig, dir: &Path) -> PathBuf {
        let net = build_network::<f32>(&cfg.network, 1).unwrap();
        let opt = Sgd::<f32>::new(cfg.optim.clone());
        let path = dir.join("net.af3d");
        save_checkpoint(&net, &opt, 0, cfg.mode.as_str(), &path).unwrap();
        path
    }

    #[test]
    fn untrained_net_high_threshold_is_silent() {
        let (mut cfg, dir) = tiny_run_config("silent");
        cfg.postprocess.score_thresh = 0.9;
        let ckpt = untrained_checkpoint(&cfg, &dir);
        let vol = Volume::zeros([24, 24, 24], [1.0; 3]).unwrap();
        let vol_path = dir.join("flat.vol3");
        write_volume(&vol, &vol_path).unwrap();
        let out = dir.join("pred.csv");
        let (report, meta) = predict_run::<f32>(
            &cfg,
            &ckpt,
            &[("flat".into(), vol_path)],
            &out,
            |_| panic!("no warnings expected"),
        )
        .unwrap();
        assert_eq!(meta.step, 0);
        assert_eq!(report.n_scans, 1);
        assert_eq!(report.n_detections, 0);
        assert!(read_predictions(&out).unwrap().is_empty());
    }

    #[test]
    fn small_volume_takes_single_padded_window() {
        let (cfg, _dir) = tiny_run_config("padded");
        let windows = sliding_windows([24, 24, 24], cfg.tiling.window_shape, cfg.tiling.overlap)
            .unwrap();
        assert_eq!(windows.len(), 1);
        assert!(windows[0].pad_high.iter().any(|&p| p > 0));
        // An untrained net scores every cell at exactly 0.5, so the padded
        // single-window path yields detections at the default threshold.
        let mut net = build_network::<f32>(&cfg.network, 1).unwrap();
        let vol = Volume::zeros([24, 24, 24], [1.0; 3]).unwrap();
        let dets = predict_volume(&mut net, &cfg, Mode::AnchorFree, &vol).unwrap();
        assert!(!dets.is_empty());
        for d in &dets {
            assert!((d.score - 0.5).abs() < 1e-9);
        }
    }

    #[test]
    fn failed_volume_warns_and_run_continues() {
        let (mut cfg, dir) = tiny_run_config("failures");
        cfg.postprocess.score_thresh = 0.9;
        let ckpt = untrained_checkpoint(&cfg, &dir);
        let good = dir.join("good.vol3");
        write_volume(&Volume::zeros([24, 24, 24], [1.0; 3]).unwrap(), &good).unwrap();
        let missing = dir.join("missing.vol3");
        let out = dir.join("pred.csv");
        let mut warnings = Vec::new();
        let (report, _) = predict_run::<f32>(
            &cfg,
            &ckpt,
            &[("good".into(), good), ("missing".into(), missing)],
            &out,
            |w| warnings.push(w.to_string()),
        )
        .unwrap();
        assert_eq!(report.n_scans, 1);
        assert_eq!(report.n_failed, 1);
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].contains("missing"), "{}", warnings[0]);
        assert!(out.exists());
    }

    #[test]
    fn rows_sorted_by_scan_then_score() {
        let (mut cfg, dir) = tiny_run_config("sorted");
        cfg.postprocess.score_thresh = 0.4;
        cfg.postprocess.max_per_crop = 5;
        let ckpt = untrained_checkpoint(&cfg, &dir);
        let mut vols = Vec::new();
        for name in ["b-scan", "a-scan"] {
            let p = dir.join(format!("{name}.vol3"));
            write_volume(&Volume::zeros([24, 24, 24], [1.0; 3]).unwrap(), &p).unwrap();
            vols.push((name.to_string(), p));
        }
        let out = dir.join("pred.csv");
        let (report, _) = predict_run::<f32>(&cfg, &ckpt, &vols, &out, |_| {}).unwrap();
        assert!(report.n_detections > 0);
        let rows = read_predictions(&out).unwrap();
        for pair in rows.windows(2) {
            let ord = pair[0]
                .scan_id
                .cmp(&pair[1].scan_id)
                .then(pair[1].score.total_cmp(&pair[0].score));
            assert!(ord != std::cmp::Ordering::Greater);
        }
        assert_eq!(rows.first().unwrap().scan_id, "a-scan");
    }

    #[test]
    fn scan_id_is_file_stem() {
        assert_eq!(scan_id_for_path(Path::new("/data/x/case-7.vol3")), "case-7");
        assert_eq!(scan_id_for_path(Path::new("plain")), "plain");
    }

    #[test]
    fn manifest_split_resolution() {
        let (mut cfg, dir) = tiny_run_config("manifest");
        cfg.synth.volume_dims = [32, 32, 32];
        cfg.synth.seed = 5;
        crate::synth::generate_dataset(&cfg.synth, 2, 1, &dir.join("data")).unwrap();
        let train = volumes_from_manifest(&dir.join("data"), "train").unwrap();
        let val = volumes_from_manifest(&dir.join("data"), "val").unwrap();
        let all = volumes_from_manifest(&dir.join("data"), "all").unwrap();
        assert_eq!(train.len(), 2);
        assert_eq!(val.len(), 1);
        assert_eq!(all.len(), 3);
        assert!(train[0].1.exists());
        assert!(volumes_from_manifest(&dir.join("data"), "test").is_err());
    }
}
