//! Crop plumbing: lesion-biased random crops for training, sliding
//! windows that cover a whole volume for inference, and the mapping from
//! crop-local detections back to global coordinates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::annotations::BoxXyzd;
use crate::error::{Error, Result};
use crate::parallel::for_each_chunk_mut;
use crate::postprocess::{nms_3d, Detection};
use crate::volume::Volume;

pub const DEFAULT_P_LESION: f64 = 0.7;
pub const DEFAULT_WINDOW_OVERLAP: [usize; 3] = [32, 32, 32];

/// A crop placement in voxel index space (z, y, x). The origin may lie
/// outside the volume; `pad_low`/`pad_high` record how many zero voxels
/// were filled in on each face.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropRegion {
    pub origin: [i64; 3],
    pub shape: [usize; 3],
    pub pad_low: [usize; 3],
    pub pad_high: [usize; 3],
}

impl CropRegion {
    pub fn unpadded(origin: [i64; 3], shape: [usize; 3]) -> Self {
        CropRegion {
            origin,
            shape,
            pad_low: [0; 3],
            pad_high: [0; 3],
        }
    }
}

/// A materialized crop: zero-padded voxels plus annotations rebased to
/// crop-local mm coordinates.
#[derive(Debug, Clone)]
pub struct Crop {
    pub region: CropRegion,
    pub volume: Volume,
    pub boxes: Vec<BoxXyzd>,
}

/// Copies a region out of `v`, zero-filling where the region leaves the
/// volume.
pub fn extract_region(v: &Volume, region: &CropRegion) -> Result<Volume> {
    let [_, sy, sx] = region.shape;
    let mut out = Volume::zeros(region.shape, v.spacing)?;
    let plane = sy * sx;
    let dims = v.dims;
    for_each_chunk_mut(&mut out.voxels, plane, |zi, chunk| {
        let gz = region.origin[0] + zi as i64;
        if gz < 0 || gz >= dims[0] as i64 {
            return;
        }
        for yi in 0..sy {
            let gy = region.origin[1] + yi as i64;
            if gy < 0 || gy >= dims[1] as i64 {
                continue;
            }
            let x0 = region.origin[2];
            let src_lo = x0.clamp(0, dims[2] as i64) as usize;
            let src_hi = (x0 + sx as i64).clamp(0, dims[2] as i64) as usize;
            if src_lo >= src_hi {
                continue;
            }
            let src_base = (gz as usize * dims[1] + gy as usize) * dims[2];
            let dst_off = (src_lo as i64 - x0) as usize;
            chunk[yi * sx + dst_off..yi * sx + dst_off + (src_hi - src_lo)]
                .copy_from_slice(&v.voxels[src_base + src_lo..src_base + src_hi]);
        }
    });
    Ok(out)
}

fn rebase_boxes(boxes: &[BoxXyzd], region: &CropRegion, spacing: [f32; 3]) -> Vec<BoxXyzd> {
    let off = [
        region.origin[0] as f64 * spacing[0] as f64,
        region.origin[1] as f64 * spacing[1] as f64,
        region.origin[2] as f64 * spacing[2] as f64,
    ];
    let extent = [
        region.shape[0] as f64 * spacing[0] as f64,
        region.shape[1] as f64 * spacing[1] as f64,
        region.shape[2] as f64 * spacing[2] as f64,
    ];
    boxes
        .iter()
        .filter_map(|b| {
            let local = BoxXyzd {
                x_mm: b.x_mm - off[2],
                y_mm: b.y_mm - off[1],
                z_mm: b.z_mm - off[0],
                diameter_mm: b.diameter_mm,
            };
            let inside = local.z_mm >= 0.0
                && local.z_mm < extent[0]
                && local.y_mm >= 0.0
                && local.y_mm < extent[1]
                && local.x_mm >= 0.0
                && local.x_mm < extent[2];
            inside.then_some(local)
        })
        .collect()
}

fn pad_of(origin: [i64; 3], shape: [usize; 3], dims: [usize; 3]) -> ([usize; 3], [usize; 3]) {
    let mut lo = [0; 3];
    let mut hi = [0; 3];
    for a in 0..3 {
        lo[a] = (-origin[a]).max(0) as usize;
        hi[a] = (origin[a] + shape[a] as i64 - dims[a] as i64).max(0) as usize;
    }
    (lo, hi)
}

/// Deterministic random crop. With probability `p_lesion` (when any box
/// exists) the crop is centered near a uniformly chosen lesion, jittered
/// so the lesion centroid stays inside; otherwise the origin is uniform
/// over placements that keep padding minimal.
pub fn random_crop_with(
    v: &Volume,
    boxes: &[BoxXyzd],
    shape: [usize; 3],
    p_lesion: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Crop> {
    if shape.iter().any(|&s| s == 0) {
        return Err(Error::InvalidArgument("crop shape must be >= 1".into()));
    }
    for a in 0..3 {
        if shape[a] > 4 * v.dims[a] {
            return Err(Error::InvalidArgument(format!(
                "crop shape {:?} exceeds 4x volume dims {:?}",
                shape, v.dims
            )));
        }
    }
    let envelope = |a: usize| -> (i64, i64) {
        let span = v.dims[a] as i64 - shape[a] as i64;
        (span.min(0), span.max(0))
    };
    let lesion_centered = !boxes.is_empty() && rng.gen::<f64>() < p_lesion;
    let mut origin = [0i64; 3];
    if lesion_centered {
        let b = &boxes[rng.gen_range(0..boxes.len())];
        let c_zyx = b.center_zyx();
        for a in 0..3 {
            let cv = (c_zyx[a] / v.spacing[a] as f64).floor() as i64;
            let (env_lo, env_hi) = envelope(a);
            let lo = (cv - shape[a] as i64 + 1).max(env_lo);
            let hi = cv.min(env_hi);
            origin[a] = if lo >= hi { lo } else { rng.gen_range(lo..=hi) };
        }
    } else {
        for a in 0..3 {
            let (lo, hi) = envelope(a);
            origin[a] = if lo >= hi { lo } else { rng.gen_range(lo..=hi) };
        }
    }
    let (pad_low, pad_high) = pad_of(origin, shape, v.dims);
    let region = CropRegion {
        origin,
        shape,
        pad_low,
        pad_high,
    };
    let volume = extract_region(v, &region)?;
    let boxes = rebase_boxes(boxes, &region, v.spacing);
    Ok(Crop {
        region,
        volume,
        boxes,
    })
}

pub fn random_crop(
    v: &Volume,
    boxes: &[BoxXyzd],
    shape: [usize; 3],
    rng_seed: u64,
) -> Result<Crop> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    random_crop_with(v, boxes, shape, DEFAULT_P_LESION, &mut rng)
}

fn axis_origins(dim: usize, shape: usize, overlap: usize) -> Vec<i64> {
    if dim <= shape {
        return vec![0];
    }
    let stride = shape - overlap;
    let mut out = Vec::new();
    let mut o = 0usize;
    while o + shape < dim {
        out.push(o as i64);
        o += stride;
    }
    out.push((dim - shape) as i64);
    out
}

/// Overlapping windows that jointly cover the volume, sorted
/// lexicographically by origin. The last window per axis is shifted
/// inward to end flush with the volume; padding only appears when the
/// volume is smaller than the window.
pub fn sliding_windows(
    volume_dims: [usize; 3],
    shape: [usize; 3],
    overlap: [usize; 3],
) -> Result<Vec<CropRegion>> {
    for a in 0..3 {
        if shape[a] == 0 || volume_dims[a] == 0 {
            return Err(Error::InvalidArgument(
                "window shape and volume dims must be >= 1".into(),
            ));
        }
        if overlap[a] >= shape[a] {
            return Err(Error::InvalidArgument(format!(
                "overlap {:?} must be smaller than window shape {:?}",
                overlap, shape
            )));
        }
    }
    let zs = axis_origins(volume_dims[0], shape[0], overlap[0]);
    let ys = axis_origins(volume_dims[1], shape[1], overlap[1]);
    let xs = axis_origins(volume_dims[2], shape[2], overlap[2]);
    let mut out = Vec::with_capacity(zs.len() * ys.len() * xs.len());
    for &z in &zs {
        for &y in &ys {
            for &x in &xs {
                let origin = [z, y, x];
                let (pad_low, pad_high) = pad_of(origin, shape, volume_dims);
                out.push(CropRegion {
                    origin,
                    shape,
                    pad_low,
                    pad_high,
                });
            }
        }
    }
    Ok(out)
}

/// Translates crop-local detections into global mm coordinates.
pub fn to_global(dets: &[Detection], region: &CropRegion, spacing_mm: f64) -> Vec<Detection> {
    dets.iter()
        .map(|d| {
            let mut g = d.clone();
            g.bbox.z_mm += region.origin[0] as f64 * spacing_mm;
            g.bbox.y_mm += region.origin[1] as f64 * spacing_mm;
            g.bbox.x_mm += region.origin[2] as f64 * spacing_mm;
            g
        })
        .collect()
}

/// Merges already-global per-window detections with one global NMS pass.
pub fn assemble(per_crop: &[(CropRegion, Vec<Detection>)], nms_iou: f64) -> Vec<Detection> {
    let mut all = Vec::new();
    for (_, dets) in per_crop {
        all.extend(dets.iter().cloned());
    }
    nms_3d(&all, nms_iou)
}
