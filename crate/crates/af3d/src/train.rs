//! Training loop: random lesion-biased crops, target assignment, loss,
//! and SGD with momentum.
//!
//! Determinism contract: every random decision at step `s` comes from a
//! ChaCha8 stream keyed `(run seed, s)`, so a run resumed from a step-`s`
//! checkpoint replays steps `s+1..` bit-for-bit, and twin runs with the
//! same seed produce identical checkpoints.

use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::annotations::{filter_oversize, read_annotations, BoxXyzd};
use crate::assignment::{assign_anchor_based, assign_anchor_free, FeatureGridSpec, LabelGrid};
use crate::config::{Mode, RunConfig};
use crate::error::{Error, Result};
use crate::losses::detection_loss;
use crate::network::checkpoint::{load_checkpoint, save_checkpoint};
use crate::network::{build_network, Sgd, Tensor5};
use crate::Real;
use crate::synth::{read_manifest, MANIFEST_FILE};
use crate::tiling::{random_crop_with, Crop};
use crate::volume::{clip_and_normalize, read_volume, resample_isotropic, Volume};

/// One preprocessed scan held in memory for the whole run: resampled,
/// intensity-windowed, with its training boxes in mm.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub scan_id: String,
    pub volume: Volume,
    pub boxes: Vec<BoxXyzd>,
}

/// Batch-averaged numbers behind one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub l_cls: f64,
    pub l_loc: f64,
    pub l_total: f64,
    /// Positive cells summed over the batch.
    pub n_pos: usize,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub final_checkpoint: PathBuf,
    pub log_path: PathBuf,
    /// Steps executed by this invocation (0 when the resume checkpoint
    /// was already past the configured step count).
    pub steps_run: u64,
    pub final_stats: Option<StepStats>,
}

pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const TRAIN_LOG_HEADER: &str = "step,l_cls,l_loc,l_total,n_pos";

fn checkpoint_name(step: u64) -> String {
    format!("ckpt-{step:06}.af3d")
}

/// Loads the split named in the manifest, resamples each volume to the
/// configured spacing, applies the intensity window, and attaches the
/// (oversize-filtered) boxes.
pub fn load_samples(cfg: &RunConfig, split: &[String]) -> Result<Vec<TrainSample>> {
    let dir = &cfg.data.dir;
    let manifest = read_manifest(&dir.join(MANIFEST_FILE))?;
    let anns = read_annotations(dir.join(&manifest.annotations))?;
    let anns = filter_oversize(&anns, cfg.train.max_diameter_mm);
    let mut by_scan: HashMap<&str, Vec<BoxXyzd>> = HashMap::new();
    for a in &anns {
        by_scan.entry(a.scan_id.as_str()).or_default().push(a.bbox);
    }
    let mut samples = Vec::with_capacity(split.len());
    for id in split {
        let rel = manifest.files.get(id).ok_or_else(|| {
            Error::Train(format!("manifest lists no file for scan {id:?}"))
        })?;
        let raw = read_volume(dir.join(rel))?;
        let iso = resample_isotropic(&raw, cfg.spacing_mm as f32)?;
        let vol = clip_and_normalize(&iso, cfg.window.hu_min, cfg.window.hu_max)?;
        samples.push(TrainSample {
            scan_id: id.clone(),
            volume: vol,
            boxes: by_scan.get(id.as_str()).cloned().unwrap_or_default(),
        });
    }
    Ok(samples)
}

pub fn load_training_set(cfg: &RunConfig) -> Result<Vec<TrainSample>> {
    let manifest = read_manifest(&cfg.data.dir.join(MANIFEST_FILE))?;
    load_samples(cfg, &manifest.splits.train)
}

fn crop_input<T: Real>(crop: &Crop) -> Tensor5<T> {
    let [z, y, x] = crop.volume.dims;
    let mut t = Tensor5::zeros([1, 1, z, y, x]);
    for (dst, &src) in t.data.iter_mut().zip(&crop.volume.voxels) {
        *dst = T::cast(src as f64);
    }
    t
}

fn boxes_to_voxels(boxes: &[BoxXyzd], spacing_mm: f64) -> Vec<BoxXyzd> {
    boxes
        .iter()
        .map(|b| BoxXyzd {
            x_mm: b.x_mm / spacing_mm,
            y_mm: b.y_mm / spacing_mm,
            z_mm: b.z_mm / spacing_mm,
            diameter_mm: b.diameter_mm / spacing_mm,
        })
        .collect()
}

/// Ground-truth grids for crop-local mm boxes under the configured mode.
pub fn assign_boxes(
    cfg: &RunConfig,
    boxes_mm: &[BoxXyzd],
    specs: &[FeatureGridSpec],
) -> Result<LabelGrid> {
    let boxes = boxes_to_voxels(boxes_mm, cfg.spacing_mm);
    match cfg.mode {
        Mode::AnchorFree => {
            let assign = cfg.assign.clone().in_voxel_units(cfg.spacing_mm);
            assign_anchor_free(&boxes, specs, &assign)
        }
        Mode::AnchorBased => {
            let anchors = cfg.anchors.clone().in_voxel_units(cfg.spacing_mm);
            assign_anchor_based(&boxes, specs, &anchors)
        }
    }
}

/// Ground-truth grids for one crop under the configured mode.
pub fn assign_crop(cfg: &RunConfig, crop: &Crop, specs: &[FeatureGridSpec]) -> Result<LabelGrid> {
    assign_boxes(cfg, &crop.boxes, specs)
}

struct LogWriter {
    file: fs::File,
    path: PathBuf,
}

impl LogWriter {
    fn open(path: PathBuf, resume: bool) -> Result<Self> {
        let exists = path.exists();
        let file = fs::OpenOptions::new()
            .create(true)
            .append(resume)
            .write(true)
            .truncate(!resume)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let mut w = LogWriter { file, path };
        if !resume || !exists {
            w.line(TRAIN_LOG_HEADER)?;
        }
        Ok(w)
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.file, "{s}").map_err(|e| Error::io(&self.path, e))
    }

    fn stats(&mut self, st: &StepStats) -> Result<()> {
        self.line(&format!(
            "{},{},{},{},{}",
            st.step, st.l_cls, st.l_loc, st.l_total, st.n_pos
        ))
    }
}

/// Runs the loop over preloaded samples. `resume` restores parameters,
/// momentum, and the step counter from a checkpoint; training continues
/// at the next step. Checkpoints are written only after a fully
/// successful optimizer step, so the newest file on disk is always good.
pub fn train_loop<T: Real>(
    cfg: &RunConfig,
    samples: &[TrainSample],
    resume: Option<&Path>,
    mut on_log: impl FnMut(&StepStats),
) -> Result<TrainReport> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Train("training set is empty".into()));
    }
    let out_dir = &cfg.train.out_dir;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let (mut net, mut opt, start_step) = match resume {
        None => (
            build_network::<T>(&cfg.network, cfg.seed)?,
            Sgd::new(cfg.optim.clone()),
            0u64,
        ),
        Some(path) => {
            let (net, meta, velocity) = load_checkpoint::<T>(path)?;
            if meta.mode != cfg.mode.as_str() {
                return Err(Error::Train(format!(
                    "checkpoint mode {} does not match configured mode {}",
                    meta.mode,
                    cfg.mode.as_str()
                )));
            }
            if meta.network != cfg.network {
                return Err(Error::Train(
                    "checkpoint network architecture does not match the config".into(),
                ));
            }
            (net, Sgd::with_velocity(cfg.optim.clone(), velocity), meta.step)
        }
    };

    let specs = FeatureGridSpec::pyramid(cfg.train.crop_shape)?;
    let mode = cfg.mode.as_str();
    let mut log = LogWriter::open(out_dir.join(TRAIN_LOG_FILE), resume.is_some())?;
    let mut final_stats = None;
    let mut last_ckpt = resume.map(Path::to_path_buf);
    let mut steps_run = 0u64;

    for step in (start_step + 1)..=cfg.train.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(step);
        net.zero_grad();
        let mut sum_cls = 0.0;
        let mut sum_loc = 0.0;
        let mut sum_total = 0.0;
        let mut n_pos = 0usize;
        for _ in 0..cfg.train.batch_size {
            let sample = &samples[rng.gen_range(0..samples.len())];
            let crop = random_crop_with(
                &sample.volume,
                &sample.boxes,
                cfg.train.crop_shape,
                cfg.train.p_lesion,
                &mut rng,
            )?;
            let labels = assign_crop(cfg, &crop, &specs)?;
            let input = crop_input::<T>(&crop);
            let preds = net.forward(&input)?;
            let (breakdown, grads) = detection_loss(&preds, &labels, &cfg.loss)?;
            if !breakdown.l_total.is_finite() {
                return Err(Error::Train(format!(
                    "non-finite loss at step {step} on scan {}",
                    sample.scan_id
                )));
            }
            net.backward(&grads)?;
            sum_cls += breakdown.l_cls;
            sum_loc += breakdown.l_loc;
            sum_total += breakdown.l_total;
            n_pos += breakdown.n_pos;
        }
        let inv = 1.0 / cfg.train.batch_size as f64;
        net.scale_grads(T::cast(inv));
        opt.step(&mut net)
            .map_err(|e| Error::Train(format!("step {step}: {e}")))?;
        steps_run += 1;

        let stats = StepStats {
            step,
            l_cls: sum_cls * inv,
            l_loc: sum_loc * inv,
            l_total: sum_total * inv,
            n_pos,
        };
        if step % cfg.train.log_every == 0 || step == cfg.train.steps {
            log.stats(&stats)?;
            on_log(&stats);
        }
        if step % cfg.train.checkpoint_every == 0 || step == cfg.train.steps {
            let path = out_dir.join(checkpoint_name(step));
            save_checkpoint(&net, &opt, step, mode, &path)?;
            last_ckpt = Some(path);
        }
        final_stats = Some(stats);
    }

    let final_checkpoint = match last_ckpt {
        Some(p) => p,
        None => {
            // Nothing ran and nothing was resumed: the config asked for a
            // step count at or below zero progress. Write an initial
            // checkpoint so downstream commands have something to load.
            let path = out_dir.join(checkpoint_name(start_step));
            save_checkpoint(&net, &opt, start_step, mode, &path)?;
            path
        }
    };
    Ok(TrainReport {
        final_checkpoint,
        log_path: out_dir.join(TRAIN_LOG_FILE),
        steps_run,
        final_stats,
    })
}

/// Loads the training split from the configured data directory and runs
/// the loop.
pub fn train_run<T: Real>(
    cfg: &RunConfig,
    resume: Option<&Path>,
    on_log: impl FnMut(&StepStats),
) -> Result<TrainReport> {
    let samples = load_training_set(cfg)?;
    train_loop::<T>(cfg, &samples, resume, on_log)
}
