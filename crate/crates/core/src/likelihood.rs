//! Scan likelihood under the map for one pose hypothesis.
//!
//! The exact score sums every component for every pixel. The fast path first
//! projects the components into the image, inflates their 3σ ellipses by half
//! a patch diagonal and records, per patch, the components whose ellipse
//! contains the patch center. Pixels are then scored against their patch's
//! members only.

use nalgebra::{Matrix3, Vector2, Vector3};
use thiserror::Error;

use crate::gmm_map::GmmMap;
use crate::projection::{self, CameraIntrinsics, Gaussian2D, Pose, NEAR_PLANE};

pub const DEFAULT_PATCH_SIZE: usize = 32;
pub const DEFAULT_STRIDE: usize = 4;
/// ln(1e-9): lower bound on any pixel's log density.
pub const OUTLIER_LOG_DENSITY: f64 = -20.723_265_836_946_41;

#[derive(Debug, Error, PartialEq)]
pub enum LikelihoodError {
    #[error("membership table was built for different intrinsics than the scan")]
    IntrinsicsMismatch,
    #[error("stride must be at least 1")]
    InvalidStride,
    #[error("patch size must be at least 1")]
    InvalidPatchSize,
    #[error("depth grid has {found} samples, intrinsics need {expected}")]
    SizeMismatch { expected: usize, found: usize },
}

/// Row-major metric depth grid. Zero and NaN mark invalid pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    intrinsics: CameraIntrinsics,
    depths: Vec<f64>,
}

impl DepthImage {
    pub fn new(intrinsics: CameraIntrinsics, depths: Vec<f64>) -> Result<Self, LikelihoodError> {
        let expected = intrinsics.width * intrinsics.height;
        if depths.len() != expected {
            return Err(LikelihoodError::SizeMismatch { expected, found: depths.len() });
        }
        Ok(Self { intrinsics, depths })
    }

    /// An image with every pixel invalid.
    pub fn empty(intrinsics: CameraIntrinsics) -> Self {
        Self { depths: vec![0.0; intrinsics.width * intrinsics.height], intrinsics }
    }

    pub fn intrinsics(&self) -> &CameraIntrinsics {
        &self.intrinsics
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    pub fn depths(&self) -> &[f64] {
        &self.depths
    }

    pub fn depths_mut(&mut self) -> &mut [f64] {
        &mut self.depths
    }

    pub fn depth(&self, u: usize, v: usize) -> f64 {
        self.depths[v * self.intrinsics.width + u]
    }

    pub fn is_valid_depth(d: f64) -> bool {
        d.is_finite() && d > 0.0
    }

    pub fn valid_count(&self) -> usize {
        self.depths.iter().filter(|d| Self::is_valid_depth(**d)).count()
    }
}

/// A projected 3σ ellipse grown by a fixed margin on both axes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InflatedEllipse {
    pub center: Vector2<f64>,
    pub semi_major: f64,
    pub semi_minor: f64,
    /// Angle of the major axis from the +u axis (radians).
    pub orientation: f64,
}

impl InflatedEllipse {
    /// Point-in-ellipse test in the ellipse's principal frame; the boundary counts.
    #[inline]
    pub fn contains(&self, p: &Vector2<f64>) -> bool {
        let d = p - self.center;
        let (s, c) = self.orientation.sin_cos();
        let x = (c * d.x + s * d.y) / self.semi_major;
        let y = (-s * d.x + c * d.y) / self.semi_minor;
        x * x + y * y <= 1.0 + 1e-12
    }

    /// Coefficients `(a, b, c)` with `contains(p) ⇔ a dx² + 2b dx dy + c dy² ≤ 1 + 1e-12`.
    pub fn conic(&self) -> [f64; 3] {
        let (s, c) = self.orientation.sin_cos();
        let (ia, ib) = (1.0 / (self.semi_major * self.semi_major), 1.0 / (self.semi_minor * self.semi_minor));
        [c * c * ia + s * s * ib, c * s * (ia - ib), s * s * ia + c * c * ib]
    }

    /// Half extents of the axis-aligned bounding box.
    pub fn half_extents(&self) -> (f64, f64) {
        let (s, c) = self.orientation.sin_cos();
        let (a, b) = (self.semi_major, self.semi_minor);
        ((a * a * c * c + b * b * s * s).sqrt(), (a * a * s * s + b * b * c * c).sqrt())
    }
}

/// Half the diagonal of a square patch.
pub fn patch_inflation(patch_size: usize) -> f64 {
    patch_size as f64 * std::f64::consts::FRAC_1_SQRT_2
}

/// Eigen-decomposes the projected covariance and grows the 3σ semi-axes by `inflation`.
pub fn ellipse_from_gaussian(g: &Gaussian2D, inflation: f64) -> InflatedEllipse {
    let (a, b, d) = (g.covariance[(0, 0)], g.covariance[(0, 1)], g.covariance[(1, 1)]);
    let mid = 0.5 * (a + d);
    let rad = (0.25 * (a - d) * (a - d) + b * b).sqrt();
    let major = (mid + rad).max(0.0);
    let minor = (mid - rad).max(0.0);
    let tiny = 1e-12;
    InflatedEllipse {
        center: g.mean,
        semi_major: (3.0 * major.sqrt() + inflation).max(tiny),
        semi_minor: (3.0 * minor.sqrt() + inflation).max(tiny),
        orientation: 0.5 * (2.0 * b).atan2(a - d),
    }
}

/// Bounding-box half extents and conic coefficients of the inflated ellipse,
/// computed without trigonometry (same geometry as [`ellipse_from_gaussian`]).
fn inflated_bounds(g: &Gaussian2D, inflation: f64) -> (f64, f64, [f64; 3]) {
    let (a, b, d) = (g.covariance[(0, 0)], g.covariance[(0, 1)], g.covariance[(1, 1)]);
    let mid = 0.5 * (a + d);
    let rad = (0.25 * (a - d) * (a - d) + b * b).sqrt();
    let tiny = 1e-12;
    let major = (3.0 * (mid + rad).max(0.0).sqrt() + inflation).max(tiny);
    let minor = (3.0 * (mid - rad).max(0.0).sqrt() + inflation).max(tiny);
    // Major-axis angle θ: cos 2θ = (a − d) / 2rad, sin 2θ = b / rad.
    let (cos2, sin2) = if rad > 0.0 { (0.5 * (a - d) / rad, b / rad) } else { (1.0, 0.0) };
    let (cc, ss, cs) = (0.5 * (1.0 + cos2), 0.5 * (1.0 - cos2), 0.5 * sin2);
    let (ia, ib) = (1.0 / (major * major), 1.0 / (minor * minor));
    let (ma, mb) = (major * major, minor * minor);
    ((ma * cc + mb * ss).sqrt(), (ma * ss + mb * cc).sqrt(), [cc * ia + ss * ib, cs * (ia - ib), ss * ia + cc * ib])
}

/// Per-patch component lists in compressed-row form.
#[derive(Debug, Clone, PartialEq)]
pub struct MembershipTable {
    patch_size: usize,
    cols: usize,
    rows: usize,
    intrinsics: CameraIntrinsics,
    offsets: Vec<u32>,
    indices: Vec<u32>,
}

impl MembershipTable {
    fn empty(intrinsics: CameraIntrinsics, patch_size: usize) -> Self {
        let cols = intrinsics.width.div_ceil(patch_size);
        let rows = intrinsics.height.div_ceil(patch_size);
        Self { patch_size, cols, rows, intrinsics, offsets: vec![0; cols * rows + 1], indices: Vec::new() }
    }

    /// A table listing every component in every patch.
    pub fn saturated(intrinsics: CameraIntrinsics, patch_size: usize, components: usize) -> Self {
        let mut t = Self::empty(intrinsics, patch_size);
        let n = t.cols * t.rows;
        t.indices = (0..n).flat_map(|_| 0..components as u32).collect();
        t.offsets = (0..=n).map(|p| (p * components) as u32).collect();
        t
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    /// Patch grid as (columns, rows).
    pub fn grid(&self) -> (usize, usize) {
        (self.cols, self.rows)
    }

    pub fn intrinsics(&self) -> &CameraIntrinsics {
        &self.intrinsics
    }

    pub fn patch_count(&self) -> usize {
        self.cols * self.rows
    }

    pub fn members(&self, patch: usize) -> &[u32] {
        &self.indices[self.offsets[patch] as usize..self.offsets[patch + 1] as usize]
    }

    pub fn total_memberships(&self) -> usize {
        self.indices.len()
    }

    #[inline]
    pub fn patch_of_pixel(&self, u: usize, v: usize) -> usize {
        (v / self.patch_size) * self.cols + u / self.patch_size
    }

    /// Center of the patch from its actual (possibly clipped) pixel extent.
    pub fn patch_center(&self, col: usize, row: usize) -> Vector2<f64> {
        let ps = self.patch_size;
        let center = |i: usize, limit: usize| {
            let start = i * ps;
            let end = ((i + 1) * ps).min(limit);
            0.5 * (start + end - 1) as f64
        };
        Vector2::new(center(col, self.intrinsics.width), center(row, self.intrinsics.height))
    }
}

/// Builds the membership table of `map` seen from `pose`.
///
/// Component `i` belongs to patch `p` iff the patch center lies inside or on
/// the inflated ellipse of its projection. Components behind the near plane
/// belong nowhere.
pub fn compute_memberships(
    map: &GmmMap,
    pose: &Pose,
    intrinsics: &CameraIntrinsics,
    patch_size: usize,
) -> MembershipTable {
    let mut scratch = Vec::new();
    let mut table = MembershipTable::empty(*intrinsics, patch_size.max(1));
    fill_memberships(&mut table, &mut scratch, map, pose);
    table
}

fn fill_memberships(table: &mut MembershipTable, pairs: &mut Vec<(u32, u32)>, map: &GmmMap, pose: &Pose) {
    let intr = table.intrinsics;
    let ps = table.patch_size;
    let (cols, rows) = (table.cols, table.rows);
    let inflation = patch_inflation(ps);
    let r = pose.world_to_camera_rotation();
    let first = table.patch_center(0, 0);
    let last = table.patch_center(cols - 1, rows - 1);
    let nominal = 0.5 * (ps as f64 - 1.0);

    pairs.clear();
    for (i, (comp, eval)) in map.components().iter().zip(map.evals()).enumerate() {
        let pc = r * (comp.mean() - pose.position);
        if pc.z < NEAR_PLANE {
            continue;
        }
        // Cheap conservative cull before the covariance projection:
        // λmax(J C Jᵀ) ≤ (f/z)² (1 + (x/z)² + (y/z)²) σmax².
        let iz = 1.0 / pc.z;
        let (a, b) = (pc.x * iz, pc.y * iz);
        let u = intr.cx + intr.f * a;
        let v = intr.cy + intr.f * b;
        let reach = 3.0 * intr.f * iz * (1.0 + a * a + b * b).sqrt() * eval.sigma_max + inflation + 1.0;
        if u + reach < first.x || u - reach > last.x || v + reach < first.y || v - reach > last.y {
            continue;
        }
        let Ok(g) = projection::project_rotated(&intr, &r, &pose.position, comp.mean(), comp.covariance()) else {
            continue;
        };
        let (hx, hy, [qa, qb, qc]) = inflated_bounds(&g, inflation);
        let range = |c: f64, h: f64, n: usize| -> Option<(usize, usize)> {
            let lo = ((c - h - nominal) / ps as f64).ceil().max(0.0);
            let hi = ((c + h - nominal) / ps as f64).floor() + 1.0;
            if hi < 0.0 || lo > (n - 1) as f64 {
                return None;
            }
            Some((lo as usize, (hi as usize).min(n - 1)))
        };
        let (Some((c0, c1)), Some((r0, r1))) = (range(g.mean.x, hx, cols), range(g.mean.y, hy, rows)) else {
            continue;
        };
        for row in r0..=r1 {
            for col in c0..=c1 {
                let d = table.patch_center(col, row) - g.mean;
                if qa * d.x * d.x + 2.0 * qb * d.x * d.y + qc * d.y * d.y <= 1.0 + 1e-12 {
                    pairs.push(((row * cols + col) as u32, i as u32));
                }
            }
        }
    }

    let n = cols * rows;
    table.offsets.clear();
    table.offsets.resize(n + 1, 0);
    for &(p, _) in pairs.iter() {
        table.offsets[p as usize + 1] += 1;
    }
    for p in 0..n {
        table.offsets[p + 1] += table.offsets[p];
    }
    table.indices.clear();
    table.indices.resize(pairs.len(), 0);
    let mut cursor: Vec<u32> = table.offsets[..n].to_vec();
    for &(p, i) in pairs.iter() {
        let slot = &mut cursor[p as usize];
        table.indices[*slot as usize] = i;
        *slot += 1;
    }
}

/// Valid, stride-subsampled scan pixels back-projected into the camera frame,
/// tagged with their patch. Shared by every hypothesis scored against one scan.
#[derive(Debug, Clone)]
pub struct ScanPoints {
    intrinsics: CameraIntrinsics,
    patch_size: usize,
    points: Vec<(u32, Vector3<f64>)>,
}

impl ScanPoints {
    pub fn new(scan: &DepthImage, stride: usize, patch_size: usize) -> Result<Self, LikelihoodError> {
        if stride == 0 {
            return Err(LikelihoodError::InvalidStride);
        }
        if patch_size == 0 {
            return Err(LikelihoodError::InvalidPatchSize);
        }
        let intr = scan.intrinsics;
        let cols = intr.width.div_ceil(patch_size);
        let mut points = Vec::new();
        for v in (0..intr.height).step_by(stride) {
            for u in (0..intr.width).step_by(stride) {
                let d = scan.depth(u, v);
                if DepthImage::is_valid_depth(d) {
                    let p = Vector3::new((u as f64 - intr.cx) * d / intr.f, (v as f64 - intr.cy) * d / intr.f, d);
                    let patch = (v / patch_size) * cols + u / patch_size;
                    points.push((patch as u32, p));
                }
            }
        }
        Ok(Self { intrinsics: intr, patch_size, points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn intrinsics(&self) -> &CameraIntrinsics {
        &self.intrinsics
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    fn world_points<'a>(&'a self, pose: &Pose) -> impl Iterator<Item = (usize, Vector3<f64>)> + 'a {
        let r: Matrix3<f64> = *pose.orientation().matrix();
        let t = pose.position;
        self.points.iter().map(move |(patch, p)| (*patch as usize, r * p + t))
    }

    /// NLL using only each patch's member components.
    pub fn nll_approx(&self, map: &GmmMap, pose: &Pose, table: &MembershipTable) -> Result<f64, LikelihoodError> {
        if table.intrinsics != self.intrinsics || table.patch_size != self.patch_size {
            return Err(LikelihoodError::IntrinsicsMismatch);
        }
        let evals = map.evals();
        let mut terms = Vec::new();
        let mut total = 0.0;
        for (patch, p) in self.world_points(pose) {
            terms.clear();
            terms.extend(table.members(patch).iter().map(|&j| evals[j as usize].log_term(&p)));
            total += log_sum_exp(&terms).max(OUTLIER_LOG_DENSITY);
        }
        Ok(-total)
    }

    /// NLL summing every component for every pixel.
    pub fn nll_full(&self, map: &GmmMap, pose: &Pose) -> f64 {
        let evals = map.evals();
        let mut terms = Vec::with_capacity(evals.len());
        let mut total = 0.0;
        for (_, p) in self.world_points(pose) {
            terms.clear();
            terms.extend(evals.iter().map(|e| e.log_term(&p)));
            total += log_sum_exp(&terms).max(OUTLIER_LOG_DENSITY);
        }
        -total
    }
}

/// Terms this far below the maximum (relative size < 5e-18) are dropped.
const NEGLIGIBLE_LOG_RATIO: f64 = 40.0;

/// ln Σ exp(t); −∞ when empty.
#[inline]
fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    let cut = max - NEGLIGIBLE_LOG_RATIO;
    let sum: f64 = terms.iter().filter(|t| **t > cut).map(|t| (t - max).exp()).sum();
    max + sum.ln()
}

/// Reusable buffers for scoring many poses against one scan.
#[derive(Debug, Clone)]
pub struct Scorer {
    table: MembershipTable,
    pairs: Vec<(u32, u32)>,
}

impl Scorer {
    pub fn new(intrinsics: CameraIntrinsics, patch_size: usize) -> Self {
        Self { table: MembershipTable::empty(intrinsics, patch_size.max(1)), pairs: Vec::new() }
    }

    /// Rebuilds the membership table for `pose` in place.
    pub fn memberships(&mut self, map: &GmmMap, pose: &Pose) -> &MembershipTable {
        fill_memberships(&mut self.table, &mut self.pairs, map, pose);
        &self.table
    }

    /// Approximate NLL of `points` at `pose`.
    pub fn nll(&mut self, points: &ScanPoints, map: &GmmMap, pose: &Pose) -> Result<f64, LikelihoodError> {
        fill_memberships(&mut self.table, &mut self.pairs, map, pose);
        points.nll_approx(map, pose, &self.table)
    }

    pub fn table(&self) -> &MembershipTable {
        &self.table
    }
}

/// Negative log-likelihood (nats) of the scan using the patch memberships.
///
/// Every valid pixel on the stride grid contributes the log of the summed
/// weighted densities of its patch's members, floored at
/// [`OUTLIER_LOG_DENSITY`]; pixels in member-less patches get the floor.
pub fn scan_nll_approx(
    scan: &DepthImage,
    map: &GmmMap,
    pose: &Pose,
    table: &MembershipTable,
    stride: usize,
) -> Result<f64, LikelihoodError> {
    if table.intrinsics != scan.intrinsics {
        return Err(LikelihoodError::IntrinsicsMismatch);
    }
    ScanPoints::new(scan, stride, table.patch_size)?.nll_approx(map, pose, table)
}

/// Exhaustive negative log-likelihood: every component is a member of every patch.
pub fn scan_nll_full(scan: &DepthImage, map: &GmmMap, pose: &Pose, stride: usize) -> Result<f64, LikelihoodError> {
    Ok(ScanPoints::new(scan, stride, DEFAULT_PATCH_SIZE)?.nll_full(map, pose))
}
