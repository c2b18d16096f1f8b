//! Ground-truth assignment of feature-grid cells.
//!
//! The anchor-free scheme labels each cell of each feature level as
//! positive, negative, or ignored from cube neighborhoods around lesion
//! centroids, and attaches a Gaussian weight plus stride-normalized offset
//! regression targets to positives. The anchor-based scheme labels (cell,
//! anchor) slots by cube IoU instead.
//!
//! Conventions used throughout:
//! * cell indices and grid dims are `(z, y, x)`, matching volume layout;
//! * cell positions are `stride * index` in isotropic voxel units, which
//!   equal millimetres once a volume is resampled to 1 mm spacing;
//! * boxes handed in are crop-local, in those same units;
//! * offset vectors are `[dx, dy, dz, dd]`, x first, like the CSV formats.

use crate::annotations::BoxXyzd;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

pub const DEFAULT_STRIDES: [usize; 3] = [4, 8, 16];

/// One feature level: its stride and grid extent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureGridSpec {
    pub level: usize,
    /// Input voxels per grid cell.
    pub stride: usize,
    /// Grid cells per axis `(z, y, x)`.
    pub dims: [usize; 3],
}

impl FeatureGridSpec {
    /// Grid covering a crop of `crop_shape` voxels; the crop must tile
    /// evenly into cells.
    pub fn for_crop(crop_shape: [usize; 3], stride: usize, level: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::InvalidArgument("stride must be >= 1".into()));
        }
        let mut dims = [0usize; 3];
        for a in 0..3 {
            if crop_shape[a] == 0 || crop_shape[a] % stride != 0 {
                return Err(Error::Shape(format!(
                    "crop shape {crop_shape:?} not divisible by stride {stride}"
                )));
            }
            dims[a] = crop_shape[a] / stride;
        }
        Ok(FeatureGridSpec {
            level,
            stride,
            dims,
        })
    }

    /// Specs for all three levels of a crop.
    pub fn pyramid(crop_shape: [usize; 3]) -> Result<Vec<FeatureGridSpec>> {
        DEFAULT_STRIDES
            .iter()
            .enumerate()
            .map(|(l, &s)| FeatureGridSpec::for_crop(crop_shape, s, l))
            .collect()
    }

    #[inline]
    pub fn n_cells(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn flat(&self, cell: [usize; 3]) -> usize {
        (cell[0] * self.dims[1] + cell[1]) * self.dims[2] + cell[2]
    }

    #[inline]
    pub fn cell_of(&self, flat: usize) -> [usize; 3] {
        let x = flat % self.dims[2];
        let y = (flat / self.dims[2]) % self.dims[1];
        let z = flat / (self.dims[1] * self.dims[2]);
        [z, y, x]
    }

    /// Position of a cell in voxel units, `(z, y, x)`.
    #[inline]
    pub fn position(&self, cell: [usize; 3]) -> [f64; 3] {
        [
            (self.stride * cell[0]) as f64,
            (self.stride * cell[1]) as f64,
            (self.stride * cell[2]) as f64,
        ]
    }
}

/// A grid cell with its spatial position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CenterPoint {
    /// Cell index `(z, y, x)`.
    pub cell: [usize; 3],
    /// `stride * cell` in voxel units, `(z, y, x)`.
    pub pos: [f64; 3],
}

/// All center points of a grid in cell-storage order (z slowest, x fastest).
pub fn grid_points(spec: &FeatureGridSpec) -> Vec<CenterPoint> {
    let mut out = Vec::with_capacity(spec.n_cells());
    for z in 0..spec.dims[0] {
        for y in 0..spec.dims[1] {
            for x in 0..spec.dims[2] {
                let cell = [z, y, x];
                out.push(CenterPoint {
                    cell,
                    pos: spec.position(cell),
                });
            }
        }
    }
    out
}

/// Anchor-free assignment parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AssignConfig {
    /// Positive cube edge as a fraction of lesion diameter.
    pub eps_p: f64,
    /// Non-negative cube edge as a fraction of lesion diameter.
    pub eps_n: f64,
    /// Gaussian weight bandwidth multiplier.
    pub alpha_gauss: f64,
    /// Diameter cutoffs `(c1, c2)` routing boxes to levels 0/1/2.
    pub scale_cutoffs_mm: (f64, f64),
}

impl Default for AssignConfig {
    fn default() -> Self {
        AssignConfig {
            eps_p: 0.8,
            eps_n: 1.2,
            alpha_gauss: 1.0,
            scale_cutoffs_mm: (8.5, 19.5),
        }
    }
}

impl AssignConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_p > 0.0 && self.eps_p <= self.eps_n) {
            return Err(Error::Config(format!(
                "require 0 < eps_p <= eps_n, got ({}, {})",
                self.eps_p, self.eps_n
            )));
        }
        if !(self.alpha_gauss > 0.0) {
            return Err(Error::Config(format!(
                "alpha_gauss must be > 0, got {}",
                self.alpha_gauss
            )));
        }
        let (c1, c2) = self.scale_cutoffs_mm;
        if !(c1 > 0.0 && c1 < c2) {
            return Err(Error::Config(format!(
                "scale cutoffs must satisfy 0 < c1 < c2, got ({c1}, {c2})"
            )));
        }
        Ok(())
    }

    /// Cutoffs converted from mm to voxel units for a given spacing.
    pub fn in_voxel_units(mut self, spacing_mm: f64) -> Self {
        self.scale_cutoffs_mm.0 /= spacing_mm;
        self.scale_cutoffs_mm.1 /= spacing_mm;
        self
    }
}

/// Anchor-based baseline parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnchorConfig {
    /// Anchor diameters per level, ascending within a level.
    pub diameters_mm: [[f64; 3]; 3],
    pub iou_pos: f64,
    pub iou_neg: f64,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            diameters_mm: [[3.0, 5.0, 7.0], [10.0, 13.0, 17.0], [22.0, 30.0, 40.0]],
            iou_pos: 0.5,
            iou_neg: 0.1,
        }
    }
}

impl AnchorConfig {
    pub const K: usize = 3;

    pub fn validate(&self) -> Result<()> {
        for level in &self.diameters_mm {
            if level.iter().any(|&d| !(d > 0.0)) || level[0] > level[1] || level[1] > level[2] {
                return Err(Error::Config(format!(
                    "anchor diameters must be positive and ascending, got {level:?}"
                )));
            }
        }
        if !(0.0 <= self.iou_neg && self.iou_neg < self.iou_pos && self.iou_pos <= 1.0) {
            return Err(Error::Config(format!(
                "require 0 <= iou_neg < iou_pos <= 1, got ({}, {})",
                self.iou_neg, self.iou_pos
            )));
        }
        Ok(())
    }

    /// Diameters converted from mm to voxel units for a given spacing.
    pub fn in_voxel_units(mut self, spacing_mm: f64) -> Self {
        for level in &mut self.diameters_mm {
            for d in level.iter_mut() {
                *d /= spacing_mm;
            }
        }
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Negative,
    Positive,
    Ignored,
}

/// Labels, weights, and regression targets for one level.
///
/// Arrays hold `k * n_cells` entries, slot-major: entry `a * n_cells + flat`
/// is anchor slot `a` of cell `flat`, aligning with head channel blocks.
#[derive(Debug, Clone)]
pub struct LevelGrid {
    pub spec: FeatureGridSpec,
    pub labels: Vec<Label>,
    /// Gaussian weight; meaningful only at positives.
    pub psi: Vec<f64>,
    /// `[dx, dy, dz, dd]` targets; meaningful only at positives.
    pub offsets: Vec<[f64; 4]>,
    /// Index into the input box list; set at positives.
    pub matched: Vec<Option<u32>>,
}

impl LevelGrid {
    pub fn empty(spec: FeatureGridSpec, k: usize) -> Self {
        let n = spec.n_cells() * k;
        LevelGrid {
            spec,
            labels: vec![Label::Negative; n],
            psi: vec![0.0; n],
            offsets: vec![[0.0; 4]; n],
            matched: vec![None; n],
        }
    }

    pub fn n_positive(&self) -> usize {
        self.labels.iter().filter(|&&l| l == Label::Positive).count()
    }

    pub fn n_negative(&self) -> usize {
        self.labels.iter().filter(|&&l| l == Label::Negative).count()
    }
}

/// Assignment result across all levels.
#[derive(Debug, Clone)]
pub struct LabelGrid {
    /// Anchor slots per cell: 1 anchor-free, 3 anchor-based.
    pub k: usize,
    pub levels: Vec<LevelGrid>,
}

impl LabelGrid {
    pub fn n_positive(&self) -> usize {
        self.levels.iter().map(|l| l.n_positive()).sum()
    }

    pub fn n_negative(&self) -> usize {
        self.levels.iter().map(|l| l.n_negative()).sum()
    }
}

/// Level a box trains on: 0 if `d <= c1`, 1 if `d <= c2`, else 2.
pub fn select_scale(b: &BoxXyzd, cfg: &AssignConfig) -> usize {
    let (c1, c2) = cfg.scale_cutoffs_mm;
    if b.diameter_mm <= c1 {
        0
    } else if b.diameter_mm <= c2 {
        1
    } else {
        2
    }
}

#[inline]
fn dist2(pos_zyx: [f64; 3], b: &BoxXyzd) -> f64 {
    let dz = pos_zyx[0] - b.z_mm;
    let dy = pos_zyx[1] - b.y_mm;
    let dx = pos_zyx[2] - b.x_mm;
    dx * dx + dy * dy + dz * dz
}

/// Gaussian center weight `exp(-|p - c|^2 / (2 alpha d^2))`.
pub fn gaussian_weight(p: &CenterPoint, g: &BoxXyzd, alpha: f64) -> f64 {
    (-dist2(p.pos, g) / (2.0 * alpha * g.diameter_mm * g.diameter_mm)).exp()
}

/// Stride-normalized regression target `[dx, dy, dz, dd]`.
pub fn encode_offsets(g: &BoxXyzd, p: &CenterPoint, stride: usize) -> [f64; 4] {
    let s = stride as f64;
    [
        (g.x_mm - p.pos[2]) / s,
        (g.y_mm - p.pos[1]) / s,
        (g.z_mm - p.pos[0]) / s,
        (g.diameter_mm / s).ln(),
    ]
}

/// Inverse of [`encode_offsets`].
pub fn decode_offsets(v: [f64; 4], p: &CenterPoint, stride: usize) -> BoxXyzd {
    let s = stride as f64;
    BoxXyzd {
        x_mm: p.pos[2] + v[0] * s,
        y_mm: p.pos[1] + v[1] * s,
        z_mm: p.pos[0] + v[2] * s,
        diameter_mm: s * v[3].exp(),
    }
}

/// Anchor-relative regression target; `dc` in units of the anchor diameter.
pub fn encode_offsets_anchor(g: &BoxXyzd, p: &CenterPoint, anchor_d: f64) -> [f64; 4] {
    [
        (g.x_mm - p.pos[2]) / anchor_d,
        (g.y_mm - p.pos[1]) / anchor_d,
        (g.z_mm - p.pos[0]) / anchor_d,
        (g.diameter_mm / anchor_d).ln(),
    ]
}

/// Inverse of [`encode_offsets_anchor`].
pub fn decode_offsets_anchor(v: [f64; 4], p: &CenterPoint, anchor_d: f64) -> BoxXyzd {
    BoxXyzd {
        x_mm: p.pos[2] + v[0] * anchor_d,
        y_mm: p.pos[1] + v[1] * anchor_d,
        z_mm: p.pos[0] + v[2] * anchor_d,
        diameter_mm: anchor_d * v[3].exp(),
    }
}

/// IoU of two axis-aligned cubes with edge length equal to their diameters.
pub fn iou_cube(a: &BoxXyzd, b: &BoxXyzd) -> f64 {
    let ra = a.diameter_mm / 2.0;
    let rb = b.diameter_mm / 2.0;
    let ov = |ca: f64, cb: f64| -> f64 {
        ((ca + ra).min(cb + rb) - (ca - ra).max(cb - rb)).max(0.0)
    };
    let inter = ov(a.x_mm, b.x_mm) * ov(a.y_mm, b.y_mm) * ov(a.z_mm, b.z_mm);
    let va = a.diameter_mm.powi(3);
    let vb = b.diameter_mm.powi(3);
    inter / (va + vb - inter)
}

/// Cells of `spec` whose position lies within Chebyshev radius `r` of the
/// box centroid, as flat indices in storage order.
fn cells_within(spec: &FeatureGridSpec, b: &BoxXyzd, r: f64) -> Vec<usize> {
    let s = spec.stride as f64;
    let c = b.center_zyx();
    let mut ranges = [(0usize, 0usize); 3];
    for a in 0..3 {
        let lo = ((c[a] - r) / s).ceil().max(0.0) as usize;
        let hi = ((c[a] + r) / s).floor();
        if hi < 0.0 || lo as f64 > hi {
            return Vec::new();
        }
        let hi = (hi as usize).min(spec.dims[a] - 1);
        if lo > hi {
            return Vec::new();
        }
        ranges[a] = (lo, hi);
    }
    let mut out = Vec::new();
    for z in ranges[0].0..=ranges[0].1 {
        for y in ranges[1].0..=ranges[1].1 {
            for x in ranges[2].0..=ranges[2].1 {
                out.push(spec.flat([z, y, x]));
            }
        }
    }
    out
}

/// Anchor-free assignment over all levels.
///
/// Deterministic resolution rules: a cell inside two positive cubes takes
/// the box with the nearer centroid, ties to the lower box index. A box
/// whose positive cube captures no cell claims its nearest grid point on
/// its level (ties to the lower flat index), skipping cells already
/// positive; if every cell is taken it goes unassigned. Ignored labels come
/// last and never displace positives.
pub fn assign_anchor_free(
    boxes: &[BoxXyzd],
    specs: &[FeatureGridSpec],
    cfg: &AssignConfig,
) -> Result<LabelGrid> {
    cfg.validate()?;
    if specs.is_empty() {
        return Err(Error::InvalidArgument("no feature levels".into()));
    }
    for b in boxes {
        if !(b.diameter_mm > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "box diameter must be > 0, got {}",
                b.diameter_mm
            )));
        }
    }
    let mut levels: Vec<LevelGrid> = specs
        .iter()
        .map(|&spec| LevelGrid::empty(spec, 1))
        .collect();
    let box_level: Vec<usize> = boxes
        .iter()
        .map(|b| select_scale(b, cfg).min(specs.len() - 1))
        .collect();

    for (bi, b) in boxes.iter().enumerate() {
        let lv = box_level[bi];
        let grid = &mut levels[lv];
        let r_p = cfg.eps_p * b.diameter_mm / 2.0;
        for flat in cells_within(&grid.spec, b, r_p) {
            let pos = grid.spec.position(grid.spec.cell_of(flat));
            let take = match grid.matched[flat] {
                None => true,
                Some(prev) => {
                    let prev_b = &boxes[prev as usize];
                    let (dn, dp) = (dist2(pos, b), dist2(pos, prev_b));
                    dn < dp || (dn == dp && bi < prev as usize)
                }
            };
            if take {
                grid.labels[flat] = Label::Positive;
                grid.matched[flat] = Some(bi as u32);
            }
        }
    }

    for (bi, b) in boxes.iter().enumerate() {
        let lv = box_level[bi];
        let grid = &mut levels[lv];
        let has_positive = grid
            .matched
            .iter()
            .any(|m| *m == Some(bi as u32));
        if has_positive {
            continue;
        }
        let mut best: Option<(f64, usize)> = None;
        for flat in 0..grid.spec.n_cells() {
            if grid.labels[flat] == Label::Positive {
                continue;
            }
            let d = dist2(grid.spec.position(grid.spec.cell_of(flat)), b);
            if best.map_or(true, |(bd, _)| d < bd) {
                best = Some((d, flat));
            }
        }
        if let Some((_, flat)) = best {
            grid.labels[flat] = Label::Positive;
            grid.matched[flat] = Some(bi as u32);
        }
    }

    for (bi, b) in boxes.iter().enumerate() {
        let lv = box_level[bi];
        let grid = &mut levels[lv];
        let r_n = cfg.eps_n * b.diameter_mm / 2.0;
        for flat in cells_within(&grid.spec, b, r_n) {
            if grid.labels[flat] == Label::Negative {
                grid.labels[flat] = Label::Ignored;
            }
        }
    }

    for grid in &mut levels {
        for flat in 0..grid.spec.n_cells() {
            if grid.labels[flat] != Label::Positive {
                continue;
            }
            let bi = grid.matched[flat].unwrap() as usize;
            let b = &boxes[bi];
            let p = CenterPoint {
                cell: grid.spec.cell_of(flat),
                pos: grid.spec.position(grid.spec.cell_of(flat)),
            };
            grid.psi[flat] = gaussian_weight(&p, b, cfg.alpha_gauss);
            grid.offsets[flat] = encode_offsets(b, &p, grid.spec.stride);
        }
    }

    Ok(LabelGrid { k: 1, levels })
}

/// Anchor-based baseline assignment: K = 3 anchor slots per cell labeled by
/// cube IoU against all boxes.
///
/// A slot is positive when its best IoU reaches `iou_pos` (matched to the
/// argmax box, ties to the lower box index), negative below `iou_neg`,
/// ignored between. Each box then claims its best-IoU slot if it holds no
/// positive yet, walking down its slot ranking past slots other boxes hold.
/// Positive slots carry anchor-relative offsets and unit weight.
pub fn assign_anchor_based(
    boxes: &[BoxXyzd],
    specs: &[FeatureGridSpec],
    cfg: &AnchorConfig,
) -> Result<LabelGrid> {
    cfg.validate()?;
    if specs.len() != 3 {
        return Err(Error::InvalidArgument(format!(
            "anchor assignment expects 3 levels, got {}",
            specs.len()
        )));
    }
    for b in boxes {
        if !(b.diameter_mm > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "box diameter must be > 0, got {}",
                b.diameter_mm
            )));
        }
    }
    let k = AnchorConfig::K;
    let mut levels: Vec<LevelGrid> = specs
        .iter()
        .map(|&spec| LevelGrid::empty(spec, k))
        .collect();

    let anchor_box = |spec: &FeatureGridSpec, flat: usize, d: f64| -> (CenterPoint, BoxXyzd) {
        let cell = spec.cell_of(flat);
        let pos = spec.position(cell);
        let p = CenterPoint { cell, pos };
        (p, BoxXyzd::new(pos[2], pos[1], pos[0], d))
    };

    for (lv, grid) in levels.iter_mut().enumerate() {
        let cells = grid.spec.n_cells();
        for a in 0..k {
            let d_anchor = cfg.diameters_mm[lv][a];
            for flat in 0..cells {
                let (p, abox) = anchor_box(&grid.spec, flat, d_anchor);
                let mut best_iou = 0.0;
                let mut best_bi = None;
                for (bi, b) in boxes.iter().enumerate() {
                    let i = iou_cube(&abox, b);
                    if i > best_iou {
                        best_iou = i;
                        best_bi = Some(bi);
                    }
                }
                let slot = a * cells + flat;
                if best_iou >= cfg.iou_pos {
                    let bi = best_bi.unwrap();
                    grid.labels[slot] = Label::Positive;
                    grid.matched[slot] = Some(bi as u32);
                    grid.psi[slot] = 1.0;
                    grid.offsets[slot] = encode_offsets_anchor(&boxes[bi], &p, d_anchor);
                } else if best_iou >= cfg.iou_neg {
                    grid.labels[slot] = Label::Ignored;
                }
            }
        }
    }

    for (bi, b) in boxes.iter().enumerate() {
        let already = levels
            .iter()
            .any(|g| g.matched.iter().zip(&g.labels).any(|(m, &l)| {
                l == Label::Positive && *m == Some(bi as u32)
            }));
        if already {
            continue;
        }
        let mut ranked: Vec<(f64, usize, usize)> = Vec::new();
        for (lv, grid) in levels.iter().enumerate() {
            let cells = grid.spec.n_cells();
            for a in 0..k {
                let d_anchor = cfg.diameters_mm[lv][a];
                for flat in 0..cells {
                    let (_, abox) = anchor_box(&grid.spec, flat, d_anchor);
                    ranked.push((iou_cube(&abox, b), lv, a * cells + flat));
                }
            }
        }
        ranked.sort_by(|l, r| r.0.partial_cmp(&l.0).unwrap());
        for (_, lv, slot) in ranked {
            let grid = &mut levels[lv];
            if grid.labels[slot] == Label::Positive {
                continue;
            }
            let cells = grid.spec.n_cells();
            let (a, flat) = (slot / cells, slot % cells);
            let d_anchor = cfg.diameters_mm[lv][a];
            let (p, _) = anchor_box(&grid.spec, flat, d_anchor);
            grid.labels[slot] = Label::Positive;
            grid.matched[slot] = Some(bi as u32);
            grid.psi[slot] = 1.0;
            grid.offsets[slot] = encode_offsets_anchor(b, &p, d_anchor);
            break;
        }
    }

    Ok(LabelGrid { k, levels })
}
