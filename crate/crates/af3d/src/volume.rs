//! Volumes, the VOL3 file format, isotropic resampling and intensity
//! windowing.
//!
//! Voxels are stored dense and row-major with z slowest and x fastest. All
//! physical coordinates are millimetres; the position of voxel `(z, y, x)` is
//! `(z·sz, y·sy, x·sx)` plus the world origin.

use crate::error::{Error, Result};
use crate::parallel;
use std::fs;
use std::io::Write as _;
use std::path::Path;

pub const VOL3_MAGIC: &[u8; 4] = b"VOL3";
pub const VOL3_VERSION: u32 = 1;
const VOL3_HEADER_LEN: usize = 40;

/// A 3D scalar field with physical spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    /// Voxel counts `(nz, ny, nx)`.
    pub dims: [usize; 3],
    /// mm per voxel `(z, y, x)`.
    pub spacing: [f32; 3],
    /// World offset in mm, default zero. Not stored in VOL3 files.
    pub origin: [f32; 3],
    /// Dense values, z slowest, x fastest; length `nz·ny·nx`.
    pub voxels: Vec<f32>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], voxels: Vec<f32>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!(
                "volume dims must all be >= 1, got {dims:?}"
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "volume spacing must all be > 0, got {spacing:?}"
            )));
        }
        let n = dims[0] * dims[1] * dims[2];
        if voxels.len() != n {
            return Err(Error::Shape(format!(
                "voxel count {} does not match dims {:?} ({} expected)",
                voxels.len(),
                dims,
                n
            )));
        }
        Ok(Volume {
            dims,
            spacing,
            origin: [0.0; 3],
            voxels,
        })
    }

    pub fn zeros(dims: [usize; 3], spacing: [f32; 3]) -> Result<Self> {
        let n = dims[0] * dims[1] * dims[2];
        Volume::new(dims, spacing, vec![0.0; n])
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    #[inline]
    pub fn at(&self, z: usize, y: usize, x: usize) -> f32 {
        self.voxels[self.index(z, y, x)]
    }

    /// Physical extent in mm per axis `(z, y, x)`.
    pub fn extent_mm(&self) -> [f64; 3] {
        [
            self.dims[0] as f64 * self.spacing[0] as f64,
            self.dims[1] as f64 * self.spacing[1] as f64,
            self.dims[2] as f64 * self.spacing[2] as f64,
        ]
    }
}

/// Read a VOL3 file.
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < VOL3_HEADER_LEN {
        return Err(Error::Malformed {
            path: path.into(),
            detail: format!("file too short for VOL3 header ({} bytes)", bytes.len()),
        });
    }
    if &bytes[0..4] != VOL3_MAGIC {
        return Err(Error::BadMagic {
            path: path.into(),
            expected: String::from_utf8_lossy(VOL3_MAGIC).into_owned(),
            found: String::from_utf8_lossy(&bytes[0..4]).into_owned(),
        });
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != VOL3_VERSION {
        return Err(Error::BadVersion {
            path: path.into(),
            found: version,
        });
    }
    let dims = [u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize];
    let spacing = [f32_at(20), f32_at(24), f32_at(28)];
    if dims.iter().any(|&d| d == 0) || spacing.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Malformed {
            path: path.into(),
            detail: format!("invalid dims {dims:?} or spacing {spacing:?}"),
        });
    }
    let n = dims[0] * dims[1] * dims[2];
    let expected = VOL3_HEADER_LEN + 4 * n;
    if bytes.len() != expected {
        return Err(Error::Malformed {
            path: path.into(),
            detail: format!(
                "payload size mismatch: dims {:?} need {} bytes, file has {}",
                dims,
                expected,
                bytes.len()
            ),
        });
    }
    let mut voxels = Vec::with_capacity(n);
    for i in 0..n {
        let o = VOL3_HEADER_LEN + 4 * i;
        voxels.push(f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()));
    }
    Volume::new(dims, spacing, voxels)
}

/// Write a VOL3 file; overwrites any existing file.
pub fn write_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(VOL3_HEADER_LEN + 4 * v.len());
    buf.extend_from_slice(VOL3_MAGIC);
    buf.extend_from_slice(&VOL3_VERSION.to_le_bytes());
    for &d in &v.dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &s in &v.spacing {
        buf.extend_from_slice(&s.to_le_bytes());
    }
    buf.extend_from_slice(&[0u8; 8]);
    for &vx in &v.voxels {
        buf.extend_from_slice(&vx.to_le_bytes());
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Resample to isotropic `target_spacing_mm` with trilinear interpolation.
///
/// Output dims are `round(dim · spacing / target)` per axis (min 1); voxel
/// `(z, y, x)` samples the input at the physical position `(z·t, y·t, x·t)`
/// with edge clamping, so a volume already at the target spacing passes
/// through unchanged.
pub fn resample_isotropic(v: &Volume, target_spacing_mm: f32) -> Result<Volume> {
    if !(target_spacing_mm > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "target spacing must be > 0, got {target_spacing_mm}"
        )));
    }
    if v.dims.iter().any(|&d| d == 0) {
        return Err(Error::InvalidArgument("degenerate input volume".into()));
    }
    let t = target_spacing_mm as f64;
    let mut out_dims = [0usize; 3];
    for a in 0..3 {
        out_dims[a] = ((v.dims[a] as f64 * v.spacing[a] as f64 / t).round() as usize).max(1);
    }
    let (nz, ny, nx) = (v.dims[0], v.dims[1], v.dims[2]);
    let (oy, ox) = (out_dims[1], out_dims[2]);
    let inv = [
        t / v.spacing[0] as f64,
        t / v.spacing[1] as f64,
        t / v.spacing[2] as f64,
    ];
    let mut voxels = vec![0.0f32; out_dims[0] * oy * ox];
    let src = &v.voxels;
    parallel::for_each_chunk_mut(&mut voxels, oy * ox, |z, slab| {
        let (z0, z1, fz) = clamp_lerp(z as f64 * inv[0], nz);
        for y in 0..oy {
            let (y0, y1, fy) = clamp_lerp(y as f64 * inv[1], ny);
            let row = &mut slab[y * ox..(y + 1) * ox];
            for (x, out) in row.iter_mut().enumerate() {
                let (x0, x1, fx) = clamp_lerp(x as f64 * inv[2], nx);
                let s = |zz: usize, yy: usize, xx: usize| -> f64 {
                    src[(zz * ny + yy) * nx + xx] as f64
                };
                let c00 = s(z0, y0, x0) * (1.0 - fx) + s(z0, y0, x1) * fx;
                let c01 = s(z0, y1, x0) * (1.0 - fx) + s(z0, y1, x1) * fx;
                let c10 = s(z1, y0, x0) * (1.0 - fx) + s(z1, y0, x1) * fx;
                let c11 = s(z1, y1, x0) * (1.0 - fx) + s(z1, y1, x1) * fx;
                let c0 = c00 * (1.0 - fy) + c01 * fy;
                let c1 = c10 * (1.0 - fy) + c11 * fy;
                *out = (c0 * (1.0 - fz) + c1 * fz) as f32;
            }
        }
    });
    let mut out = Volume::new(out_dims, [target_spacing_mm; 3], voxels)?;
    out.origin = v.origin;
    Ok(out)
}

#[inline]
fn clamp_lerp(pos: f64, n: usize) -> (usize, usize, f64) {
    let max = (n - 1) as f64;
    let p = pos.clamp(0.0, max);
    let i0 = p.floor() as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, p - i0 as f64)
}

/// Clamp voxels to `[hu_min, hu_max]` and map the window affinely to `[0, 1]`.
pub fn clip_and_normalize(v: &Volume, hu_min: f32, hu_max: f32) -> Result<Volume> {
    if !(hu_min < hu_max) {
        return Err(Error::InvalidArgument(format!(
            "window requires hu_min < hu_max, got ({hu_min}, {hu_max})"
        )));
    }
    let scale = 1.0 / (hu_max - hu_min);
    let mut out = v.clone();
    for vx in &mut out.voxels {
        *vx = (vx.clamp(hu_min, hu_max) - hu_min) * scale;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn read_valid_zero_volume() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("z.vol3");
        let v = Volume::zeros([4, 4, 4], [1.0; 3]).unwrap();
        write_volume(&v, &p).unwrap();
        let r = read_volume(&p).unwrap();
        assert_eq!(r.len(), 64);
        assert!(r.voxels.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn bad_magic_is_distinct() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("bad.vol3");
        let v = Volume::zeros([2, 2, 2], [1.0; 3]).unwrap();
        write_volume(&v, &p).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes[0..4].copy_from_slice(b"XXXX");
        fs::write(&p, bytes).unwrap();
        match read_volume(&p) {
            Err(Error::BadMagic { found, .. }) => assert_eq!(found, "XXXX"),
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn missing_file_is_io_error() {
        match read_volume("/nonexistent/path/v.vol3") {
            Err(Error::Io { .. }) => {}
            other => panic!("expected Io, got {other:?}"),
        }
    }

    #[test]
    fn payload_mismatch_is_distinct() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("short.vol3");
        let v = Volume::zeros([2, 2, 2], [1.0; 3]).unwrap();
        write_volume(&v, &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
        match read_volume(&p) {
            Err(Error::Malformed { detail, .. }) => assert!(detail.contains("payload")),
            other => panic!("expected Malformed, got {other:?}"),
        }
    }

    #[test]
    fn single_voxel_payload_after_header() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("one.vol3");
        let v = Volume::new([1, 1, 1], [1.0; 3], vec![3.5]).unwrap();
        write_volume(&v, &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(bytes.len(), 44);
        assert_eq!(f32::from_le_bytes(bytes[40..44].try_into().unwrap()), 3.5);
    }

    #[test]
    fn overwrite_wins() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("v.vol3");
        let a = Volume::new([1, 1, 1], [1.0; 3], vec![1.0]).unwrap();
        let b = Volume::new([1, 1, 1], [1.0; 3], vec![2.0]).unwrap();
        write_volume(&a, &p).unwrap();
        write_volume(&b, &p).unwrap();
        assert_eq!(read_volume(&p).unwrap().voxels, vec![2.0]);
    }

    #[test]
    fn resample_identity() {
        let mut v = Volume::zeros([5, 6, 7], [1.0; 3]).unwrap();
        for (i, vx) in v.voxels.iter_mut().enumerate() {
            *vx = (i as f32).sin();
        }
        let r = resample_isotropic(&v, 1.0).unwrap();
        assert_eq!(r.dims, v.dims);
        for (a, b) in r.voxels.iter().zip(&v.voxels) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn resample_dims_formula() {
        let v = Volume::zeros([10, 10, 10], [2.0, 1.0, 1.0]).unwrap();
        let r = resample_isotropic(&v, 1.0).unwrap();
        assert_eq!(r.dims, [20, 10, 10]);
        assert_eq!(r.spacing, [1.0; 3]);
    }

    #[test]
    fn resample_constant_stays_constant() {
        let v = Volume::new([4, 5, 6], [1.3, 0.8, 2.1], vec![7.25; 120]).unwrap();
        let r = resample_isotropic(&v, 1.0).unwrap();
        assert!(r.voxels.iter().all(|&x| (x - 7.25).abs() < 1e-6));
    }

    #[test]
    fn clip_endpoints_and_midpoint() {
        let v = Volume::new(
            [1, 1, 4],
            [1.0; 3],
            vec![-1024.0, 2048.0, -2000.0, 512.0],
        )
        .unwrap();
        let r = clip_and_normalize(&v, -1024.0, 2048.0).unwrap();
        assert_eq!(r.voxels, vec![0.0, 1.0, 0.0, 0.5]);
    }

    #[test]
    fn clip_rejects_bad_window() {
        let v = Volume::zeros([1, 1, 1], [1.0; 3]).unwrap();
        assert!(clip_and_normalize(&v, 5.0, 5.0).is_err());
    }
}
