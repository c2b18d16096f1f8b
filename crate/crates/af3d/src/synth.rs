//! Synthetic CT-like volumes with soft-edged spherical lesions.
//!
//! Generation is bit-reproducible: one ChaCha8 stream per (seed, index)
//! pair, with a fixed draw order (coarse background grid, then per-voxel
//! noise, then lesion count, then per-lesion placement attempts). Noise
//! is an Irwin-Hall sum of twelve uniforms, which sidesteps any
//! platform-dependent transcendental rounding in normal samplers.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotations::{write_annotations, Annotation, BoxXyzd};
use crate::error::{Error, Result};
use crate::parallel::for_each_chunk_mut;
use crate::volume::{write_volume, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub volume_dims: [usize; 3],
    /// Inclusive `[min, max]` lesions per volume.
    pub n_lesions: [usize; 2],
    pub diameter_range_mm: [f64; 2],
    pub lesion_contrast: f64,
    pub noise_sigma: f64,
    /// Voxels per coarse background cell.
    pub background_texture_scale: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            volume_dims: [64, 64, 64],
            n_lesions: [1, 3],
            diameter_range_mm: [3.0, 24.0],
            lesion_contrast: 0.35,
            noise_sigma: 0.05,
            background_texture_scale: 16.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.volume_dims.iter().any(|&d| d == 0) {
            return Err(Error::Config("volume_dims must all be >= 1".into()));
        }
        if self.n_lesions[0] > self.n_lesions[1] {
            return Err(Error::Config(format!(
                "n_lesions range {:?} is inverted",
                self.n_lesions
            )));
        }
        let [dlo, dhi] = self.diameter_range_mm;
        let min_extent = *self
            .volume_dims
            .iter()
            .min()
            .expect("dims checked nonempty") as f64;
        if !(dlo > 0.0 && dhi >= dlo && dhi < min_extent) {
            return Err(Error::Config(format!(
                "diameter_range_mm {:?} must be positive, ordered, and below the min volume extent {min_extent}",
                self.diameter_range_mm
            )));
        }
        if self.noise_sigma < 0.0 || !self.noise_sigma.is_finite() {
            return Err(Error::Config("noise_sigma must be finite and >= 0".into()));
        }
        if self.lesion_contrast <= 2.0 * self.noise_sigma {
            return Err(Error::Config(format!(
                "lesion_contrast {} must exceed 2 * noise_sigma {}",
                self.lesion_contrast, self.noise_sigma
            )));
        }
        if !(self.background_texture_scale >= 2.0) {
            return Err(Error::Config(
                "background_texture_scale must be >= 2".into(),
            ));
        }
        Ok(())
    }
}

pub fn scan_id_for(index: u64) -> String {
    format!("synth-{index:04}")
}

fn smoothstep01(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

struct Placed {
    center_zyx: [f64; 3],
    diameter: f64,
    type_tag: usize,
}

const PLACEMENT_RETRIES: usize = 1000;

fn place_lesions(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Placed>> {
    let n = if cfg.n_lesions[0] == cfg.n_lesions[1] {
        cfg.n_lesions[0]
    } else {
        rng.gen_range(cfg.n_lesions[0]..=cfg.n_lesions[1])
    };
    let mut placed: Vec<Placed> = Vec::with_capacity(n);
    for li in 0..n {
        let mut attempt = 0;
        loop {
            attempt += 1;
            if attempt > PLACEMENT_RETRIES {
                return Err(Error::Synth(format!(
                    "could not place lesion {} of {} without overlap after {} attempts",
                    li + 1,
                    n,
                    PLACEMENT_RETRIES
                )));
            }
            let d = if cfg.diameter_range_mm[0] == cfg.diameter_range_mm[1] {
                cfg.diameter_range_mm[0]
            } else {
                rng.gen_range(cfg.diameter_range_mm[0]..cfg.diameter_range_mm[1])
            };
            let mut c = [0.0f64; 3];
            let mut fits = true;
            for a in 0..3 {
                let lo = d / 2.0 + 1.0;
                let hi = cfg.volume_dims[a] as f64 - d / 2.0 - 1.0;
                if lo >= hi {
                    fits = false;
                    break;
                }
                c[a] = rng.gen_range(lo..hi);
            }
            if !fits {
                continue;
            }
            let clear = placed.iter().all(|p| {
                let dist = (0..3)
                    .map(|a| (p.center_zyx[a] - c[a]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                dist > (p.diameter + d) / 2.0 + 1.0
            });
            if clear {
                let type_tag = rng.gen_range(0..2usize);
                placed.push(Placed {
                    center_zyx: c,
                    diameter: d,
                    type_tag,
                });
                break;
            }
        }
    }
    Ok(placed)
}

/// One deterministic volume with its ground-truth annotations.
pub fn generate_volume(cfg: &SynthConfig, index: u64) -> Result<(Volume, Vec<Annotation>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let [nz, ny, nx] = cfg.volume_dims;
    let scale = cfg.background_texture_scale;
    let coarse = [
        (nz as f64 / scale).ceil() as usize + 2,
        (ny as f64 / scale).ceil() as usize + 2,
        (nx as f64 / scale).ceil() as usize + 2,
    ];
    let mut grid = vec![0.0f64; coarse[0] * coarse[1] * coarse[2]];
    for g in grid.iter_mut() {
        *g = rng.gen_range(0.15..0.45);
    }
    let n_vox = nz * ny * nx;
    let mut noise = vec![0.0f64; n_vox];
    for v in noise.iter_mut() {
        let mut s = 0.0;
        for _ in 0..12 {
            s += rng.gen::<f64>();
        }
        *v = (s - 6.0) * cfg.noise_sigma;
    }
    let lesions = place_lesions(cfg, &mut rng)?;

    let mut vol = Volume::zeros(cfg.volume_dims, [1.0; 3])?;
    let grid_at = move |gz: usize, gy: usize, gx: usize, grid: &[f64]| -> f64 {
        grid[(gz * coarse[1] + gy) * coarse[2] + gx]
    };
    let plane = ny * nx;
    for_each_chunk_mut(&mut vol.voxels, plane, |z, chunk| {
        let fz = z as f64 / scale;
        let gz = fz.floor() as usize;
        let tz = fz - gz as f64;
        for y in 0..ny {
            let fy = y as f64 / scale;
            let gy = fy.floor() as usize;
            let ty = fy - gy as f64;
            for x in 0..nx {
                let fx = x as f64 / scale;
                let gx = fx.floor() as usize;
                let tx = fx - gx as f64;
                let mut acc = 0.0;
                for (dz, wz) in [(0, 1.0 - tz), (1, tz)] {
                    for (dy, wy) in [(0, 1.0 - ty), (1, ty)] {
                        for (dx, wx) in [(0, 1.0 - tx), (1, tx)] {
                            acc += wz * wy * wx * grid_at(gz + dz, gy + dy, gx + dx, &grid);
                        }
                    }
                }
                chunk[y * nx + x] = (acc + noise[(z * ny + y) * nx + x]) as f32;
            }
        }
    });

    for p in &lesions {
        let r = p.diameter / 2.0;
        let lo = |a: usize| ((p.center_zyx[a] - r - 2.0).floor().max(0.0)) as usize;
        let hi = |a: usize, n: usize| ((p.center_zyx[a] + r + 2.0).ceil() as usize).min(n - 1);
        for z in lo(0)..=hi(0, nz) {
            for y in lo(1)..=hi(1, ny) {
                for x in lo(2)..=hi(2, nx) {
                    let dist = ((z as f64 - p.center_zyx[0]).powi(2)
                        + (y as f64 - p.center_zyx[1]).powi(2)
                        + (x as f64 - p.center_zyx[2]).powi(2))
                    .sqrt();
                    let t = smoothstep01(r - dist + 0.5);
                    if t > 0.0 {
                        let i = vol.index(z, y, x);
                        vol.voxels[i] += (cfg.lesion_contrast * t) as f32;
                    }
                }
            }
        }
    }

    let scan_id = scan_id_for(index);
    let anns = lesions
        .iter()
        .map(|p| Annotation {
            scan_id: scan_id.clone(),
            bbox: BoxXyzd {
                x_mm: p.center_zyx[2],
                y_mm: p.center_zyx[1],
                z_mm: p.center_zyx[0],
                diameter_mm: p.diameter,
            },
            lesion_type: if p.type_tag == 0 { "alpha" } else { "beta" }.to_string(),
            key_slice_z: Some(p.center_zyx[0]),
        })
        .collect();
    Ok((vol, anns))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestSplits {
    pub train: Vec<String>,
    pub val: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: SynthConfig,
    pub splits: ManifestSplits,
    /// scan id to volume path, relative to the manifest directory.
    pub files: BTreeMap<String, String>,
    pub annotations: String,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ANNOTATIONS_FILE: &str = "annotations.csv";

/// Writes `n_train + n_val` volumes, one annotation CSV, and a manifest
/// into `out_dir`. Regeneration with the same config is byte-identical.
pub fn generate_dataset(
    cfg: &SynthConfig,
    n_train: usize,
    n_val: usize,
    out_dir: &Path,
) -> Result<Manifest> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut files = BTreeMap::new();
    let mut all_anns = Vec::new();
    let mut splits = ManifestSplits {
        train: Vec::new(),
        val: Vec::new(),
    };
    for index in 0..(n_train + n_val) as u64 {
        let (vol, anns) = generate_volume(cfg, index)?;
        let id = scan_id_for(index);
        let file = format!("{id}.vol3");
        write_volume(&vol, out_dir.join(&file))?;
        files.insert(id.clone(), file);
        all_anns.extend(anns);
        if (index as usize) < n_train {
            splits.train.push(id);
        } else {
            splits.val.push(id);
        }
    }
    write_annotations(&out_dir.join(ANNOTATIONS_FILE), &all_anns)?;
    let manifest = Manifest {
        config: cfg.clone(),
        splits,
        files,
        annotations: ANNOTATIONS_FILE.to_string(),
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Config(format!("manifest encoding failed: {e}")))?;
    fs::write(out_dir.join(MANIFEST_FILE), json + "\n")
        .map_err(|e| Error::io(&out_dir.join(MANIFEST_FILE), e))?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Malformed {
        path: path.to_path_buf(),
        detail: format!("manifest JSON: {e}"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            volume_dims: [32, 32, 32],
            n_lesions: [1, 3],
            diameter_range_mm: [4.0, 10.0],
            lesion_contrast: 0.35,
            noise_sigma: 0.02,
            background_texture_scale: 8.0,
            seed: 7,
        }
    }

    #[test]
    fn same_seed_index_is_bit_identical() {
        let cfg = small_cfg();
        let (va, aa) = generate_volume(&cfg, 3).unwrap();
        let (vb, ab) = generate_volume(&cfg, 3).unwrap();
        assert_eq!(va.voxels, vb.voxels);
        assert_eq!(aa, ab);
        let (vc, _) = generate_volume(&cfg, 4).unwrap();
        assert_ne!(va.voxels, vc.voxels);
    }

    #[test]
    fn zero_lesions_gives_empty_annotations() {
        let mut cfg = small_cfg();
        cfg.n_lesions = [0, 0];
        let (_, anns) = generate_volume(&cfg, 0).unwrap();
        assert!(anns.is_empty());
    }

    #[test]
    fn lesions_fully_inside_and_disjoint() {
        let cfg = small_cfg();
        for index in 0..10 {
            let (_, anns) = generate_volume(&cfg, index).unwrap();
            for a in &anns {
                let r = a.bbox.diameter_mm / 2.0;
                let c = a.bbox.center_zyx();
                for (axis, &dim) in cfg.volume_dims.iter().enumerate() {
                    assert!(c[axis] - r >= 0.0 && c[axis] + r <= dim as f64);
                }
            }
            for i in 0..anns.len() {
                for j in (i + 1)..anns.len() {
                    let ci = anns[i].bbox.center_zyx();
                    let cj = anns[j].bbox.center_zyx();
                    let dist = (0..3).map(|a| (ci[a] - cj[a]).powi(2)).sum::<f64>().sqrt();
                    assert!(dist > (anns[i].bbox.diameter_mm + anns[j].bbox.diameter_mm) / 2.0);
                }
            }
        }
    }

    #[test]
    fn lesion_interior_brighter_than_shell() {
        let mut cfg = small_cfg();
        cfg.n_lesions = [1, 1];
        cfg.diameter_range_mm = [8.0, 10.0];
        for index in 0..5 {
            let (vol, anns) = generate_volume(&cfg, index).unwrap();
            let a = &anns[0];
            let c = a.bbox.center_zyx();
            let r = a.bbox.diameter_mm / 2.0;
            let mut inner = (0.0, 0usize);
            let mut shell = (0.0, 0usize);
            for z in 0..32 {
                for y in 0..32 {
                    for x in 0..32 {
                        let dist = ((z as f64 - c[0]).powi(2)
                            + (y as f64 - c[1]).powi(2)
                            + (x as f64 - c[2]).powi(2))
                        .sqrt();
                        if dist < r - 1.0 {
                            inner.0 += vol.at(z, y, x) as f64;
                            inner.1 += 1;
                        } else if dist > r + 1.0 && dist < r + 3.0 {
                            shell.0 += vol.at(z, y, x) as f64;
                            shell.1 += 1;
                        }
                    }
                }
            }
            let delta = inner.0 / inner.1 as f64 - shell.0 / shell.1 as f64;
            assert!(
                delta >= cfg.lesion_contrast / 2.0,
                "index {index}: contrast delta {delta}"
            );
        }
    }

    #[test]
    fn impossible_placement_errors() {
        let cfg = SynthConfig {
            volume_dims: [16, 16, 16],
            n_lesions: [4, 4],
            diameter_range_mm: [10.0, 12.0],
            lesion_contrast: 0.35,
            noise_sigma: 0.02,
            background_texture_scale: 8.0,
            seed: 1,
        };
        match generate_volume(&cfg, 0) {
            Err(Error::Synth(_)) => {}
            other => panic!("expected Synth error, got {other:?}"),
        }
    }

    #[test]
    fn contrast_floor_enforced() {
        let mut cfg = small_cfg();
        cfg.noise_sigma = 0.2;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn dataset_layout_and_determinism() {
        let cfg = small_cfg();
        let dir = tempfile::tempdir().unwrap();
        let out_a = dir.path().join("a");
        let out_b = dir.path().join("b");
        let m = generate_dataset(&cfg, 2, 1, &out_a).unwrap();
        assert_eq!(m.splits.train.len(), 2);
        assert_eq!(m.splits.val.len(), 1);
        assert_eq!(m.files.len(), 3);
        let anns = crate::annotations::read_annotations(&out_a.join(&m.annotations)).unwrap();
        let per_volume: usize = (0..3)
            .map(|i| generate_volume(&cfg, i).unwrap().1.len())
            .sum();
        assert_eq!(anns.len(), per_volume);
        generate_dataset(&cfg, 2, 1, &out_b).unwrap();
        for file in m.files.values().chain([&m.annotations, &MANIFEST_FILE.to_string()]) {
            let ba = std::fs::read(out_a.join(file)).unwrap();
            let bb = std::fs::read(out_b.join(file)).unwrap();
            assert_eq!(ba, bb, "file {file} differs between runs");
        }
        let loaded = read_manifest(&out_a.join(MANIFEST_FILE)).unwrap();
        assert_eq!(loaded, m);
    }
}
