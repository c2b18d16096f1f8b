//! `af3d`: synthesize data, train, predict, and evaluate from one binary.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use af3d::annotations::read_annotations;
use af3d::assignment::{FeatureGridSpec, Label, LabelGrid};
use af3d::config::{load_config, RunConfig};
use af3d::error::{Error, Result};
use af3d::evaluation::{
    froc, operating_points, stratified_report, EvalScan, GroupKey, ScoredBox, StratifiedReport,
    LUNA16_FP_RATES, TABLE1_FP_RATES,
};
use af3d::postprocess::read_predictions;
use af3d::predict::{predict_run, scan_id_for_path, volumes_from_manifest};
use af3d::synth::generate_dataset;
use af3d::train::{assign_boxes, train_run};

#[derive(Parser)]
#[command(
    name = "af3d",
    version,
    about = "Anchor-free 3D lesion detection toolkit"
)]
struct Cli {
    /// JSON run config; required by every command except eval.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for volume kernels; 1 is fully deterministic
    /// (so is any other count: parallel chunks are merged in fixed order).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Override the config's mode: anchor_free or anchor_based.
    #[arg(long, global = true)]
    mode: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from the config's synth section.
    Synth {
        /// Output directory; defaults to the config's data.dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a detector on the configured dataset.
    Train {
        /// Resume from this checkpoint, replaying the seeded schedule.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run sliding-window inference and write a prediction CSV.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Prediction CSV path.
        #[arg(long, default_value = "predictions.csv")]
        out: PathBuf,
        /// Resolve volumes from this dataset directory's manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Manifest split to predict: train, val, or all.
        #[arg(long, default_value = "val")]
        split: String,
        /// Volume files; each scan id is the file stem.
        volumes: Vec<PathBuf>,
    },
    /// Score a prediction CSV against annotations with an FROC curve.
    Eval {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        /// Rate set averaged into the score: luna16 (0.125..8) or
        /// table1 (0.5..16).
        #[arg(long, default_value = "luna16")]
        rates: String,
        /// Count lesion-free scans by pulling the scan universe from
        /// this dataset directory's manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Manifest split defining the scan universe.
        #[arg(long, default_value = "val")]
        split: String,
        /// Write the per-rate FROC table CSV here.
        #[arg(long)]
        table: Option<PathBuf>,
        /// Write the summary JSON here as well as to stdout.
        #[arg(long)]
        summary: Option<PathBuf>,
        /// Write every operating point (threshold, fp rate, sensitivity)
        /// for external plotting.
        #[arg(long)]
        plot_data: Option<PathBuf>,
    },
    /// Dump the ground-truth assignment for one crop as CSV.
    ///
    /// Columns are level,i,j,k,label,psi,dx,dy,dz,dd where i,j,k is the
    /// z,y,x cell index. In anchor_based mode each level lists all cells
    /// for anchor slot 0, then slot 1, then slot 2.
    AssignDump {
        /// Annotation CSV; coordinates are crop-local mm.
        #[arg(long)]
        annotations: PathBuf,
        /// Crop shape as Z,Y,X voxels; defaults to train.crop_shape.
        #[arg(long)]
        crop: Option<String>,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn require_config(cli: &Cli) -> Result<RunConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required for this command".into()))?;
    let mut cfg = load_config(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(mode) = &cli.mode {
        cfg.mode = mode.parse()?;
        cfg.network.k_per_point = cfg.mode.k();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn init_threads(n: Option<usize>) -> Result<()> {
    let Some(n) = n else { return Ok(()) };
    if n == 0 {
        return Err(Error::Config("--threads must be >= 1".into()));
    }
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    #[cfg(not(feature = "parallel"))]
    {
        if n > 1 {
            eprintln!("warning: built without the parallel feature; --threads has no effect");
        }
    }
    Ok(())
}

fn cmd_synth(cfg: &RunConfig, out: Option<PathBuf>) -> Result<()> {
    let out_dir = out.unwrap_or_else(|| cfg.data.dir.clone());
    generate_dataset(&cfg.synth, cfg.data.n_train, cfg.data.n_val, &out_dir)?;
    println!("manifest {}", out_dir.join(af3d::synth::MANIFEST_FILE).display());
    println!("volumes {} train, {} val", cfg.data.n_train, cfg.data.n_val);
    Ok(())
}

fn cmd_train(cfg: &RunConfig, resume: Option<&Path>) -> Result<()> {
    let report = train_run::<f32>(cfg, resume, |st| {
        println!(
            "step {} l_cls {:.4} l_loc {:.4} l_total {:.4} n_pos {}",
            st.step, st.l_cls, st.l_loc, st.l_total, st.n_pos
        );
    })?;
    println!("checkpoint {}", report.final_checkpoint.display());
    println!("log {}", report.log_path.display());
    Ok(())
}

fn cmd_predict(
    cfg: &RunConfig,
    checkpoint: &Path,
    out: &Path,
    manifest: Option<&Path>,
    split: &str,
    volumes: &[PathBuf],
) -> Result<()> {
    let mut pairs: Vec<(String, PathBuf)> = Vec::new();
    if let Some(dir) = manifest {
        pairs.extend(volumes_from_manifest(dir, split)?);
    }
    pairs.extend(
        volumes
            .iter()
            .map(|p| (scan_id_for_path(p), p.clone())),
    );
    if pairs.is_empty() {
        return Err(Error::InvalidArgument(
            "no volumes: pass files or --manifest DIR".into(),
        ));
    }
    let (report, meta) = predict_run::<f32>(cfg, checkpoint, &pairs, out, |w| {
        eprintln!("warning: {w}");
    })?;
    println!(
        "predictions {} ({} scans, {} failed, {} detections, {} mode, step {})",
        report.output.display(),
        report.n_scans,
        report.n_failed,
        report.n_detections,
        meta.mode,
        meta.step
    );
    Ok(())
}

#[derive(Serialize)]
struct FrocPointOut {
    fp_rate: f64,
    sensitivity: f64,
}

#[derive(Serialize)]
struct EvalSummary {
    froc_score: f64,
    n_scans: usize,
    n_lesions: usize,
    rate_set: String,
    points: Vec<FrocPointOut>,
    by_size: StratifiedReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    by_type: Option<StratifiedReport>,
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    predictions: &Path,
    annotations: &Path,
    rates: &str,
    manifest: Option<&Path>,
    split: &str,
    table: Option<&Path>,
    summary_out: Option<&Path>,
    plot_data: Option<&Path>,
) -> Result<()> {
    let rate_values: &[f64] = match rates {
        "luna16" => &LUNA16_FP_RATES,
        "table1" => &TABLE1_FP_RATES,
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown rate set {other:?}, expected luna16 or table1"
            )))
        }
    };
    let preds = read_predictions(predictions)?;
    let anns = read_annotations(annotations)?;

    let universe: Vec<String> = match manifest {
        Some(dir) => volumes_from_manifest(dir, split)?
            .into_iter()
            .map(|(id, _)| id)
            .collect(),
        None => {
            let ids: BTreeSet<&str> = anns.iter().map(|a| a.scan_id.as_str()).collect();
            ids.into_iter().map(String::from).collect()
        }
    };
    let known: BTreeSet<&str> = universe.iter().map(String::as_str).collect();
    let orphans: BTreeSet<&str> = preds
        .iter()
        .map(|p| p.scan_id.as_str())
        .filter(|id| !known.contains(id))
        .collect();
    if !orphans.is_empty() {
        let list: Vec<&str> = orphans.iter().copied().collect();
        eprintln!(
            "warning: dropping predictions for {} scans outside the evaluation set: {}",
            list.len(),
            list.join(", ")
        );
    }

    let mut dets_by_scan: BTreeMap<&str, Vec<ScoredBox>> = BTreeMap::new();
    for p in &preds {
        if known.contains(p.scan_id.as_str()) {
            dets_by_scan.entry(&p.scan_id).or_default().push(ScoredBox {
                score: p.score,
                bbox: p.bbox,
            });
        }
    }
    let scans: Vec<EvalScan> = universe
        .iter()
        .map(|id| EvalScan {
            scan_id: id.clone(),
            dets: dets_by_scan.remove(id.as_str()).unwrap_or_default(),
            gts: anns.iter().filter(|a| &a.scan_id == id).cloned().collect(),
        })
        .collect();

    let curve = froc(&scans, rate_values)?;
    let has_types = anns.iter().any(|a| !a.lesion_type.trim().is_empty());
    let summary = EvalSummary {
        froc_score: curve.froc_score,
        n_scans: curve.n_scans,
        n_lesions: curve.n_lesions,
        rate_set: rates.to_string(),
        points: curve
            .fp_rates
            .iter()
            .zip(&curve.sensitivities)
            .map(|(&fp_rate, &sensitivity)| FrocPointOut {
                fp_rate,
                sensitivity,
            })
            .collect(),
        by_size: stratified_report(&scans, GroupKey::SizeBucket)?,
        by_type: if has_types {
            Some(stratified_report(&scans, GroupKey::LesionType)?)
        } else {
            None
        },
    };
    let json = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::Eval(format!("summary encoding failed: {e}")))?;
    println!("{json}");
    if let Some(path) = summary_out {
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))?;
    }
    if let Some(path) = table {
        let mut text = String::from("fp_rate,sensitivity\n");
        for p in &summary.points {
            text.push_str(&format!("{},{}\n", p.fp_rate, p.sensitivity));
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))?;
    }
    if let Some(path) = plot_data {
        let mut text = String::from("threshold,fp_per_scan,sensitivity\n");
        for p in operating_points(&scans)? {
            text.push_str(&format!(
                "{},{},{}\n",
                p.threshold, p.fp_per_scan, p.sensitivity
            ));
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn parse_crop(spec: &str) -> Result<[usize; 3]> {
    let parts: Vec<&str> = spec.split(',').collect();
    if parts.len() != 3 {
        return Err(Error::InvalidArgument(format!(
            "crop must be Z,Y,X, got {spec:?}"
        )));
    }
    let mut out = [0usize; 3];
    for (i, p) in parts.iter().enumerate() {
        out[i] = p.trim().parse().map_err(|_| {
            Error::InvalidArgument(format!("bad crop component {p:?} in {spec:?}"))
        })?;
    }
    Ok(out)
}

fn label_grid_csv(grid: &LabelGrid) -> String {
    let mut out = String::from("level,i,j,k,label,psi,dx,dy,dz,dd\n");
    for level in &grid.levels {
        let [_, dy, dx] = level.spec.dims;
        let n_cells = level.spec.n_cells();
        for slot in 0..grid.k {
            for flat in 0..n_cells {
                let idx = slot * n_cells + flat;
                let i = flat / (dy * dx);
                let j = (flat / dx) % dy;
                let k = flat % dx;
                let label = match level.labels[idx] {
                    Label::Negative => "negative",
                    Label::Positive => "positive",
                    Label::Ignored => "ignored",
                };
                let o = level.offsets[idx];
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},{}\n",
                    level.spec.level, i, j, k, label, level.psi[idx], o[0], o[1], o[2], o[3]
                ));
            }
        }
    }
    out
}

fn cmd_assign_dump(
    cfg: &RunConfig,
    annotations: &Path,
    crop: Option<&str>,
    out: Option<&Path>,
) -> Result<()> {
    let crop_shape = match crop {
        Some(s) => parse_crop(s)?,
        None => cfg.train.crop_shape,
    };
    let boxes: Vec<_> = read_annotations(annotations)?
        .into_iter()
        .map(|a| a.bbox)
        .collect();
    let specs = FeatureGridSpec::pyramid(crop_shape)?;
    let grid = assign_boxes(cfg, &boxes, &specs)?;
    let csv = label_grid_csv(&grid);
    match out {
        Some(path) => fs::write(path, csv).map_err(|e| Error::io(path, e))?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    init_threads(cli.threads)?;
    match &cli.command {
        Command::Synth { out } => {
            let cfg = require_config(&cli)?;
            cmd_synth(&cfg, out.clone())
        }
        Command::Train { resume } => {
            let cfg = require_config(&cli)?;
            cmd_train(&cfg, resume.as_deref())
        }
        Command::Predict {
            checkpoint,
            out,
            manifest,
            split,
            volumes,
        } => {
            let cfg = require_config(&cli)?;
            cmd_predict(&cfg, checkpoint, out, manifest.as_deref(), split, volumes)
        }
        Command::Eval {
            predictions,
            annotations,
            rates,
            manifest,
            split,
            table,
            summary,
            plot_data,
        } => cmd_eval(
            predictions,
            annotations,
            rates,
            manifest.as_deref(),
            split,
            table.as_deref(),
            summary.as_deref(),
            plot_data.as_deref(),
        ),
        Command::AssignDump {
            annotations,
            crop,
            out,
        } => {
            let cfg = require_config(&cli)?;
            cmd_assign_dump(&cfg, annotations, crop.as_deref(), out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
