//! The anchor scaffold: a voxelised union of every period's sparse points.
//! Each anchor carries learnable features, offsets and scales, stored
//! structure-of-arrays so the optimizer can treat each field as one tensor.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::geom::{default_frustum_margin, Camera, Vec3};

pub type Cell = [i64; 3];

/// Sizes shared by every anchor in a scaffold.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AnchorDims {
    /// Gaussians (offset slots) per anchor.
    pub k: usize,
    pub base: usize,
    pub var: usize,
    pub periods: usize,
}

/// Borrowed view of one anchor.
#[derive(Clone, Copy, Debug)]
pub struct Anchor<'a> {
    pub position: &'a Vec3,
    pub f_base: &'a [f64],
    /// `T × d_v`, row-major.
    pub f_var: &'a [f64],
    /// `K × 3`, unitless; scaled by `offset_scale`.
    pub offsets: &'a [f64],
    pub offset_scale: Vec3,
    pub shape_scale: Vec3,
}

/// Per-slot and per-anchor statistics gathered between densification events.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AccumStats {
    /// `n × K`.
    pub grad_norm_sum: Vec<f64>,
    /// `n × K`.
    pub visible_count: Vec<u32>,
    pub opacity_sum: Vec<f64>,
    pub sample_count: Vec<u32>,
    pub feature_grad_sum: Vec<f64>,
}

impl AccumStats {
    fn zeros(n: usize, k: usize) -> Self {
        AccumStats {
            grad_norm_sum: vec![0.0; n * k],
            visible_count: vec![0; n * k],
            opacity_sum: vec![0.0; n],
            sample_count: vec![0; n],
            feature_grad_sum: vec![0.0; n],
        }
    }
}

/// What one rendered view contributes to the statistics of one anchor.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorViewStats {
    pub anchor: usize,
    /// `‖∂L/∂mean2d‖` for every slot that was active and rasterised, `None` otherwise.
    pub slot_grad_norm: Vec<Option<f64>>,
    /// Largest decoded opacity over the cluster, clamped below at zero.
    pub max_opacity: f64,
    pub base_grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorScaffold {
    pub dims: AnchorDims,
    pub voxel_size: f64,
    /// Grid origin (minimum corner of the initial point bounding box).
    pub origin: Vec3,
    pub positions: Vec<Vec3>,
    pub cells: Vec<Cell>,
    occupied: HashMap<Cell, usize>,
    pub f_base: Vec<f64>,
    pub f_var: Vec<f64>,
    pub offsets: Vec<f64>,
    /// Per-axis log of the offset scale (`n × 3`).
    pub log_offset_scale: Vec<f64>,
    /// Per-axis log of the base Gaussian extent (`n × 3`).
    pub log_shape_scale: Vec<f64>,
    pub stats: AccumStats,
}

fn cell_of(p: &Vec3, origin: &Vec3, voxel: f64) -> Cell {
    let r = (p - origin) / voxel;
    [r.x.floor() as i64, r.y.floor() as i64, r.z.floor() as i64]
}

fn cell_center(cell: &Cell, origin: &Vec3, voxel: f64) -> Vec3 {
    origin + Vec3::new(cell[0] as f64 + 0.5, cell[1] as f64 + 0.5, cell[2] as f64 + 0.5) * voxel
}

fn bbox(points: &[Vec3]) -> (Vec3, Vec3) {
    points.iter().fold(
        (Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY)),
        |(lo, hi), p| (lo.inf(p), hi.sup(p)),
    )
}

/// Rectilinear grid covering a point bounding box with cubic cells.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VoxelGrid {
    pub origin: Vec3,
    pub voxel_size: f64,
    /// Cells per axis; points on the far face fall into the last cell.
    pub counts: [i64; 3],
}

impl VoxelGrid {
    pub fn covering(points: &[Vec3], voxel_size: f64) -> Self {
        let (lo, hi) = bbox(points);
        let ext = (hi - lo) / voxel_size;
        let n = |e: f64| (e.ceil() as i64).max(1);
        VoxelGrid {
            origin: lo,
            voxel_size,
            counts: [n(ext.x), n(ext.y), n(ext.z)],
        }
    }

    /// Cell of a point inside the covered box.
    pub fn cell(&self, p: &Vec3) -> Cell {
        let c = cell_of(p, &self.origin, self.voxel_size);
        [
            c[0].min(self.counts[0] - 1),
            c[1].min(self.counts[1] - 1),
            c[2].min(self.counts[2] - 1),
        ]
    }

    pub fn center(&self, cell: &Cell) -> Vec3 {
        cell_center(cell, &self.origin, self.voxel_size)
    }
}

/// Occupied cells of `grid`, deduplicated, in lexicographic order.
pub fn occupied_cells(points: &[Vec3], grid: &VoxelGrid) -> Vec<Cell> {
    let mut cells: Vec<Cell> = points.iter().map(|p| grid.cell(p)).collect();
    cells.sort_unstable();
    cells.dedup();
    cells
}

/// Centers of the grid cells covering the point bounding box that hold at least one point.
pub fn voxelize(points: &[Vec3], voxel_size: f64) -> Result<Vec<Vec3>> {
    if points.is_empty() {
        return Err(Error::EmptyPointCloud);
    }
    if !(voxel_size > 0.0) {
        return Err(Error::ConfigInvalid(format!("voxel size must be positive, got {voxel_size}")));
    }
    let grid = VoxelGrid::covering(points, voxel_size);
    Ok(occupied_cells(points, &grid).iter().map(|c| grid.center(c)).collect())
}

/// `fraction × bounding-box diagonal` of all points (or `fraction` for a degenerate box).
pub fn voxel_size_from_fraction<'a>(points: impl IntoIterator<Item = &'a Vec3>, fraction: f64) -> f64 {
    let (mut lo, mut hi) = (Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY));
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let diag = (hi - lo).norm();
    if diag.is_finite() && diag > 0.0 {
        fraction * diag
    } else {
        fraction
    }
}

pub(crate) fn retain_rows<T: Copy>(v: &mut Vec<T>, stride: usize, keep: &[bool]) {
    let mut out = Vec::with_capacity(v.len());
    for (i, &k) in keep.iter().enumerate() {
        if k {
            out.extend_from_slice(&v[i * stride..(i + 1) * stride]);
        }
    }
    *v = out;
}

impl AnchorScaffold {
    /// Builds one zero-featured anchor per occupied cell of the union of all periods' points.
    pub fn init(per_period_points: &[Vec<Vec3>], voxel_size: f64, dims: AnchorDims) -> Result<Self> {
        let all: Vec<Vec3> = per_period_points.iter().flatten().copied().collect();
        if all.is_empty() {
            return Err(Error::EmptyPointCloud);
        }
        if !(voxel_size > 0.0) {
            return Err(Error::ConfigInvalid(format!("voxel size must be positive, got {voxel_size}")));
        }
        let grid = VoxelGrid::covering(&all, voxel_size);
        let origin = grid.origin;
        let mut scaffold = AnchorScaffold {
            dims,
            voxel_size,
            origin,
            positions: Vec::new(),
            cells: Vec::new(),
            occupied: HashMap::new(),
            f_base: Vec::new(),
            f_var: Vec::new(),
            offsets: Vec::new(),
            log_offset_scale: Vec::new(),
            log_shape_scale: Vec::new(),
            stats: AccumStats::default(),
        };
        for cell in occupied_cells(&all, &grid) {
            scaffold.push_anchor(cell);
        }
        Ok(scaffold)
    }

    /// Rebuilds a scaffold from stored tensors (checkpoint loading).
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn from_parts(
        dims: AnchorDims,
        voxel_size: f64,
        origin: Vec3,
        cells: Vec<Cell>,
        f_base: Vec<f64>,
        f_var: Vec<f64>,
        offsets: Vec<f64>,
        log_offset_scale: Vec<f64>,
        log_shape_scale: Vec<f64>,
        stats: AccumStats,
    ) -> Result<Self> {
        let n = cells.len();
        let ok = f_base.len() == n * dims.base
            && f_var.len() == n * dims.periods * dims.var
            && offsets.len() == n * dims.k * 3
            && log_offset_scale.len() == n * 3
            && log_shape_scale.len() == n * 3
            && stats.grad_norm_sum.len() == n * dims.k
            && stats.visible_count.len() == n * dims.k
            && stats.opacity_sum.len() == n
            && stats.sample_count.len() == n
            && stats.feature_grad_sum.len() == n;
        if !ok {
            return Err(Error::shape(format!("{n} anchors"), "inconsistent scaffold tensors"));
        }
        let mut occupied = HashMap::with_capacity(n);
        for (i, c) in cells.iter().enumerate() {
            if occupied.insert(*c, i).is_some() {
                return Err(Error::Invariant(format!("two anchors share cell {c:?}")));
            }
        }
        let positions = cells.iter().map(|c| cell_center(c, &origin, voxel_size)).collect();
        Ok(AnchorScaffold {
            dims,
            voxel_size,
            origin,
            positions,
            cells,
            occupied,
            f_base,
            f_var,
            offsets,
            log_offset_scale,
            log_shape_scale,
            stats,
        })
    }

    fn push_anchor(&mut self, cell: Cell) -> usize {
        let d = self.dims;
        let idx = self.positions.len();
        self.positions.push(cell_center(&cell, &self.origin, self.voxel_size));
        self.cells.push(cell);
        self.occupied.insert(cell, idx);
        self.f_base.extend(std::iter::repeat_n(0.0, d.base));
        self.f_var.extend(std::iter::repeat_n(0.0, d.periods * d.var));
        self.offsets.extend(std::iter::repeat_n(0.0, d.k * 3));
        let ls = self.voxel_size.ln();
        self.log_offset_scale.extend([ls; 3]);
        self.log_shape_scale.extend([ls; 3]);
        self.stats.grad_norm_sum.extend(std::iter::repeat_n(0.0, d.k));
        self.stats.visible_count.extend(std::iter::repeat_n(0, d.k));
        self.stats.opacity_sum.push(0.0);
        self.stats.sample_count.push(0);
        self.stats.feature_grad_sum.push(0.0);
        idx
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn anchor(&self, i: usize) -> Anchor<'_> {
        let d = self.dims;
        let s3 = |v: &[f64]| Vec3::new(v[3 * i].exp(), v[3 * i + 1].exp(), v[3 * i + 2].exp());
        Anchor {
            position: &self.positions[i],
            f_base: &self.f_base[i * d.base..(i + 1) * d.base],
            f_var: &self.f_var[i * d.periods * d.var..(i + 1) * d.periods * d.var],
            offsets: &self.offsets[i * d.k * 3..(i + 1) * d.k * 3],
            offset_scale: s3(&self.log_offset_scale),
            shape_scale: s3(&self.log_shape_scale),
        }
    }

    pub fn cell_of(&self, p: &Vec3) -> Cell {
        cell_of(p, &self.origin, self.voxel_size)
    }

    pub fn is_occupied(&self, cell: &Cell) -> bool {
        self.occupied.contains_key(cell)
    }

    /// World position of Gaussian `slot` of anchor `i` (independent of time and view).
    pub fn slot_position(&self, i: usize, slot: usize) -> Vec3 {
        let a = self.anchor(i);
        let o = &a.offsets[3 * slot..3 * slot + 3];
        a.position + a.offset_scale.component_mul(&Vec3::new(o[0], o[1], o[2]))
    }

    /// Indices of anchors inside the camera frustum (default margin), in order.
    pub fn visible_anchors(&self, camera: &Camera) -> Vec<usize> {
        let view = camera.view();
        let margin = default_frustum_margin(camera);
        (0..self.len())
            .filter(|&i| view.in_frustum(&self.positions[i], margin))
            .collect()
    }

    pub fn accumulate_stats(&mut self, views: &[AnchorViewStats]) {
        let k = self.dims.k;
        for v in views {
            let i = v.anchor;
            for (slot, g) in v.slot_grad_norm.iter().enumerate() {
                if let Some(g) = g {
                    self.stats.grad_norm_sum[i * k + slot] += g;
                    self.stats.visible_count[i * k + slot] += 1;
                }
            }
            self.stats.opacity_sum[i] += v.max_opacity.max(0.0);
            self.stats.sample_count[i] += 1;
            self.stats.feature_grad_sum[i] += v.base_grad_norm;
        }
    }

    pub fn reset_stats(&mut self) {
        self.stats = AccumStats::zeros(self.len(), self.dims.k);
    }

    /// Spawns zero-featured anchors in the empty cells hit by Gaussians whose
    /// mean view-space gradient exceeds `tau_g`. Existing anchors are untouched;
    /// new anchors are appended. Returns the number created.
    pub fn grow_anchors(&mut self, tau_g: f64, min_visibility: u32) -> usize {
        let k = self.dims.k;
        let n = self.len();
        let mut created = 0;
        for i in 0..n {
            for slot in 0..k {
                let s = i * k + slot;
                let count = self.stats.visible_count[s];
                if count == 0 || count < min_visibility {
                    continue;
                }
                if self.stats.grad_norm_sum[s] / count as f64 <= tau_g {
                    continue;
                }
                let cell = self.cell_of(&self.slot_position(i, slot));
                self.stats.grad_norm_sum[s] = 0.0;
                self.stats.visible_count[s] = 0;
                if !self.occupied.contains_key(&cell) {
                    self.push_anchor(cell);
                    created += 1;
                }
            }
        }
        created
    }

    /// Removes anchors seen at least `min_samples` times whose mean max-opacity
    /// is below `min_opacity`. Returns the removed indices (ascending, pre-removal numbering).
    pub fn prune_anchors(&mut self, min_opacity: f64, min_samples: u32) -> Vec<usize> {
        let keep: Vec<bool> = (0..self.len())
            .map(|i| {
                let n = self.stats.sample_count[i];
                !(n >= min_samples && n > 0 && self.stats.opacity_sum[i] / (n as f64) < min_opacity)
            })
            .collect();
        let removed: Vec<usize> = keep.iter().enumerate().filter(|(_, &k)| !k).map(|(i, _)| i).collect();
        if !removed.is_empty() {
            self.retain(&keep);
        }
        removed
    }

    fn retain(&mut self, keep: &[bool]) {
        let d = self.dims;
        retain_rows(&mut self.positions, 1, keep);
        retain_rows(&mut self.cells, 1, keep);
        retain_rows(&mut self.f_base, d.base, keep);
        retain_rows(&mut self.f_var, d.periods * d.var, keep);
        retain_rows(&mut self.offsets, d.k * 3, keep);
        retain_rows(&mut self.log_offset_scale, 3, keep);
        retain_rows(&mut self.log_shape_scale, 3, keep);
        retain_rows(&mut self.stats.grad_norm_sum, d.k, keep);
        retain_rows(&mut self.stats.visible_count, d.k, keep);
        retain_rows(&mut self.stats.opacity_sum, 1, keep);
        retain_rows(&mut self.stats.sample_count, 1, keep);
        retain_rows(&mut self.stats.feature_grad_sum, 1, keep);
        self.occupied = self.cells.iter().enumerate().map(|(i, c)| (*c, i)).collect();
    }

    /// Checks the one-anchor-per-cell invariant and tensor shapes.
    pub fn check_invariants(&self) -> Result<()> {
        let n = self.len();
        let d = self.dims;
        if self.occupied.len() != n || self.cells.len() != n {
            return Err(Error::Invariant("occupied map out of sync with anchors".into()));
        }
        for (i, c) in self.cells.iter().enumerate() {
            if self.occupied.get(c) != Some(&i) {
                return Err(Error::Invariant(format!("cell {c:?} not mapped to anchor {i}")));
            }
        }
        if self.f_base.len() != n * d.base
            || self.f_var.len() != n * d.periods * d.var
            || self.offsets.len() != n * d.k * 3
        {
            return Err(Error::Invariant("anchor tensor shapes inconsistent".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Quat;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    const DIMS: AnchorDims = AnchorDims { k: 4, base: 2, var: 2, periods: 2 };

    fn lcg_points(n: usize, seed: u64, scale: f64) -> Vec<Vec3> {
        let mut s = seed;
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64
        };
        (0..n).map(|_| Vec3::new(next(), next(), next()) * scale).collect()
    }

    #[test]
    fn voxelize_examples() {
        let c = voxelize(&[Vec3::new(0.3, 0.2, 0.1)], 0.5).unwrap();
        assert_eq!(c.len(), 1);
        assert!((c[0] - Vec3::new(0.55, 0.45, 0.35)).norm() < 1e-12);
        let c = voxelize(&[Vec3::new(0.1, 0.1, 0.1), Vec3::new(0.2, 0.3, 0.15)], 0.5).unwrap();
        assert_eq!(c.len(), 1);
        assert!(matches!(voxelize(&[], 1.0), Err(Error::EmptyPointCloud)));
    }

    #[test]
    fn voxelize_brute_force_membership() {
        let pts = lcg_points(1000, 3, 2.0);
        let (lo, hi) = bbox(&pts);
        let voxel = (hi - lo).max() / 4.0;
        let centers = voxelize(&pts, voxel).unwrap();
        assert!(centers.len() <= 64);
        let h = voxel / 2.0;
        for c in &centers {
            // Closed cell test, so far-face points count for the last cell.
            let hit = pts.iter().any(|p| (p - c).iter().all(|d| d.abs() <= h * (1.0 + 1e-12)));
            assert!(hit, "center {c} has no point");
        }
        for p in &pts {
            let inside = centers.iter().any(|c| (p - c).iter().all(|d| d.abs() <= h * (1.0 + 1e-12)));
            assert!(inside, "point {p} not covered");
        }
    }

    #[test]
    fn init_union_semantics() {
        let p = lcg_points(50, 1, 1.0);
        let one = AnchorScaffold::init(std::slice::from_ref(&p), 0.1, DIMS).unwrap();
        let two = AnchorScaffold::init(&[p.clone(), p.clone()], 0.1, DIMS).unwrap();
        assert_eq!(one.len(), two.len());

        let a = vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(0.05, 0.0, 0.0)];
        let b = vec![Vec3::new(1.0, 1.0, 1.0)];
        let s = AnchorScaffold::init(&[a, b], 0.1, DIMS).unwrap();
        assert_eq!(s.len(), 2);

        let p1 = lcg_points(200, 5, 1.0);
        let p2: Vec<Vec3> = lcg_points(200, 6, 1.0).into_iter().map(|p| p + Vec3::repeat(0.5)).collect();
        let s = AnchorScaffold::init(&[p1.clone(), p2.clone()], 0.2, DIMS).unwrap();
        let all: Vec<Vec3> = p1.iter().chain(&p2).copied().collect();
        let grid = VoxelGrid::covering(&all, 0.2);
        let union: BTreeSet<Cell> = occupied_cells(&p1, &grid).into_iter().chain(occupied_cells(&p2, &grid)).collect();
        assert_eq!(s.len(), union.len());
        assert_eq!(s.cells.iter().copied().collect::<BTreeSet<_>>(), union);
        s.check_invariants().unwrap();

        let a = s.anchor(0);
        assert!(a.f_base.iter().chain(a.f_var).chain(a.offsets).all(|&x| x == 0.0));
        assert!((a.offset_scale - Vec3::repeat(0.2)).norm() < 1e-12);
        assert!((a.shape_scale - Vec3::repeat(0.2)).norm() < 1e-12);
        assert!(matches!(AnchorScaffold::init(&[vec![], vec![]], 0.1, DIMS), Err(Error::EmptyPointCloud)));
    }

    fn cam_looking_down_z() -> Camera {
        Camera {
            id: 0,
            width: 32,
            height: 32,
            fx: 30.0,
            fy: 30.0,
            cx: 16.0,
            cy: 16.0,
            rotation: Quat::identity(),
            translation: Vec3::new(0.0, 0.0, 3.0),
            period: 0,
            image_name: String::new(),
        }
    }

    #[test]
    fn visibility_matches_exhaustive_frustum_test() {
        let cam = cam_looking_down_z();
        let pts: Vec<Vec3> = lcg_points(300, 9, 8.0).into_iter().map(|p| p - Vec3::repeat(4.0)).collect();
        let s = AnchorScaffold::init(&[pts], 0.3, DIMS).unwrap();
        let got = s.visible_anchors(&cam);
        let margin = default_frustum_margin(&cam);
        let want: Vec<usize> = (0..s.len())
            .filter(|&i| crate::geom::frustum_test(&cam, &s.positions[i], margin))
            .collect();
        assert_eq!(got, want);
        assert!(!got.is_empty() && got.len() < s.len());

        let s = AnchorScaffold::init(&[vec![Vec3::zeros(), Vec3::new(0.0, 0.0, -5.0)]], 0.1, DIMS).unwrap();
        let vis = s.visible_anchors(&cam);
        assert_eq!(vis.len(), 1);
        assert!(s.positions[vis[0]].z > -1.0);
    }

    fn view(anchor: usize, grads: &[Option<f64>], opacity: f64) -> AnchorViewStats {
        AnchorViewStats { anchor, slot_grad_norm: grads.to_vec(), max_opacity: opacity, base_grad_norm: 0.0 }
    }

    #[test]
    fn stats_accumulation() {
        let mut s = AnchorScaffold::init(&[vec![Vec3::zeros()]], 0.1, DIMS).unwrap();
        s.accumulate_stats(&[view(0, &[Some(0.0), None, None, None], 0.5)]);
        assert_eq!(s.stats.grad_norm_sum[0], 0.0);
        assert_eq!(s.stats.visible_count[..], [1, 0, 0, 0]);
        let g = (3.0f64).hypot(4.0);
        s.accumulate_stats(&[view(0, &[Some(g), None, None, None], 0.5)]);
        assert_eq!(s.stats.grad_norm_sum[0], 5.0);

        // Additivity: two views at once equal two single-view accumulations.
        let mut a = AnchorScaffold::init(&[vec![Vec3::zeros()]], 0.1, DIMS).unwrap();
        let mut b = a.clone();
        let v1 = view(0, &[Some(0.25), Some(1.0), None, None], 0.2);
        let v2 = view(0, &[None, Some(0.5), Some(2.0), None], -0.1);
        a.accumulate_stats(&[v1.clone(), v2.clone()]);
        b.accumulate_stats(&[v1]);
        b.accumulate_stats(&[v2]);
        assert_eq!(a.stats, b.stats);
        assert_eq!(a.stats.opacity_sum[0], 0.2);
    }

    #[test]
    fn grow_examples() {
        let mut s = AnchorScaffold::init(&[vec![Vec3::zeros()]], 0.1, DIMS).unwrap();
        s.accumulate_stats(&[view(0, &[Some(1e-5); 4], 0.5)]);
        assert_eq!(s.grow_anchors(2e-4, 1), 0);

        // Single hot slot pointing one full cell along +x lands in an empty cell.
        let mut s = AnchorScaffold::init(&[vec![Vec3::zeros()]], 0.1, DIMS).unwrap();
        s.offsets[0] = 1.0;
        s.accumulate_stats(&[view(0, &[Some(1.0), Some(1e-6), None, None], 0.5)]);
        let before = s.positions[0];
        assert_eq!(s.grow_anchors(2e-4, 1), 1);
        assert_eq!(s.len(), 2);
        assert_eq!(s.positions[0], before);
        assert!((s.positions[1] - Vec3::new(0.15, 0.05, 0.05)).norm() < 1e-12);
        assert!(s.anchor(1).f_base.iter().all(|&x| x == 0.0));
        assert_eq!(s.stats.visible_count[0], 0);
        s.check_invariants().unwrap();

        // Hot slot whose target cell is already occupied (its own anchor).
        let mut s = AnchorScaffold::init(&[vec![Vec3::zeros()]], 0.1, DIMS).unwrap();
        s.accumulate_stats(&[view(0, &[Some(1.0), None, None, None], 0.5)]);
        assert_eq!(s.grow_anchors(2e-4, 1), 0);

        // Below minimum visibility.
        let mut s = AnchorScaffold::init(&[vec![Vec3::zeros()]], 0.1, DIMS).unwrap();
        s.offsets[0] = 1.0;
        s.accumulate_stats(&[view(0, &[Some(1.0), None, None, None], 0.5)]);
        assert_eq!(s.grow_anchors(2e-4, 2), 0);
    }

    #[test]
    fn prune_examples() {
        let pts = vec![Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0), Vec3::new(2.0, 0.0, 0.0)];
        let mut s = AnchorScaffold::init(&[pts], 0.1, DIMS).unwrap();
        for _ in 0..10 {
            s.accumulate_stats(&[view(0, &[None; 4], 0.5), view(1, &[None; 4], 0.001), view(2, &[None; 4], 0.3)]);
        }
        let mut all_ok = s.clone();
        assert!(all_ok.prune_anchors(0.0005, 5).is_empty());
        let mut few = s.clone();
        assert!(few.prune_anchors(0.005, 11).is_empty());
        let removed = s.prune_anchors(0.005, 5);
        assert_eq!(removed, vec![1]);
        assert_eq!(s.len(), 2);
        // The far-face point is clamped into the last cell of the grid.
        assert!((s.positions[1].x - 1.95).abs() < 1e-12);
        s.check_invariants().unwrap();
    }

    proptest! {
        #[test]
        fn grow_prune_keep_cells_unique(seed in 0u64..500, rounds in 1usize..4) {
            let pts = lcg_points(40, seed, 1.0);
            let mut s = AnchorScaffold::init(&[pts], 0.15, DIMS).unwrap();
            let mut rng = seed;
            let mut next = move || { rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1); (rng >> 33) as f64 / (1u64 << 31) as f64 };
            for _ in 0..rounds {
                for x in s.offsets.iter_mut() { *x = next() * 6.0 - 3.0; }
                let views: Vec<AnchorViewStats> = (0..s.len())
                    .map(|i| view(i, &(0..4).map(|_| Some(next() * 1e-3)).collect::<Vec<_>>(), next() * 0.01))
                    .collect();
                s.accumulate_stats(&views);
                let before: Vec<Vec3> = s.positions.clone();
                let grown = s.grow_anchors(2e-4, 1);
                prop_assert_eq!(&s.positions[..before.len()], &before[..]);
                prop_assert_eq!(s.len(), before.len() + grown);
                s.prune_anchors(0.005, 1);
                s.reset_stats();
                s.check_invariants().unwrap();
                let cells: BTreeSet<Cell> = s.cells.iter().copied().collect();
                prop_assert_eq!(cells.len(), s.len());
            }
        }
    }
}
