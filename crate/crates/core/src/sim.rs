//! Synthetic worlds for closed-loop experiments with known ground truth.
//!
//! Scenes are unions of axis-aligned boxes and finite axis-aligned planes.
//! Depth images are ray cast through pixel centers and store z-depth, the
//! same convention [`crate::projection::back_project`] inverts.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};
use rand::Rng as _;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use thiserror::Error;

use crate::gmm_map::PointCloud;
use crate::likelihood::DepthImage;
use crate::particle_filter::{Bounds, OdometryDelta};
use crate::projection::{wrap_angle, CameraIntrinsics, Pose};
use crate::rng;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("primitive extents must be positive")]
    NonPositiveExtent,
    #[error("trajectory timestamps must be strictly increasing (sample {0})")]
    NonIncreasingTimestamps(usize),
    #[error("invalid trajectory parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }

    /// The two in-plane axes, in increasing order.
    pub fn others(self) -> (usize, usize) {
        match self {
            Axis::X => (1, 2),
            Axis::Y => (0, 2),
            Axis::Z => (0, 1),
        }
    }
}

impl FromStr for Axis {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "x" | "X" => Ok(Axis::X),
            "y" | "Y" => Ok(Axis::Y),
            "z" | "Z" => Ok(Axis::Z),
            _ => Err(format!("unknown axis '{s}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Primitive {
    /// Axis-aligned box: center and full side lengths.
    Box { center: Vector3<f64>, size: Vector3<f64> },
    /// Axis-aligned rectangle with normal `axis`; `size` spans the other two axes in order.
    Plane { axis: Axis, center: Vector3<f64>, size: [f64; 2] },
}

impl Primitive {
    fn validate(&self) -> Result<(), SimError> {
        let ok = match self {
            Primitive::Box { size, .. } => size.iter().all(|s| *s > 0.0),
            Primitive::Plane { size, .. } => size.iter().all(|s| *s > 0.0),
        };
        if ok {
            Ok(())
        } else {
            Err(SimError::NonPositiveExtent)
        }
    }

    /// Nearest positive ray parameter, if any.
    fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        const EPS: f64 = 1e-12;
        match self {
            Primitive::Box { center, size } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                for i in 0..3 {
                    let lo = center[i] - 0.5 * size[i];
                    let hi = center[i] + 0.5 * size[i];
                    if dir[i].abs() < 1e-300 {
                        if origin[i] < lo || origin[i] > hi {
                            return None;
                        }
                        continue;
                    }
                    let inv = 1.0 / dir[i];
                    let (a, b) = ((lo - origin[i]) * inv, (hi - origin[i]) * inv);
                    t0 = t0.max(a.min(b));
                    t1 = t1.min(a.max(b));
                }
                if t0 > t1 {
                    None
                } else if t0 > EPS {
                    Some(t0)
                } else if t1 > EPS {
                    Some(t1)
                } else {
                    None
                }
            }
            Primitive::Plane { axis, center, size } => {
                let a = axis.index();
                if dir[a].abs() < 1e-300 {
                    return None;
                }
                let t = (center[a] - origin[a]) / dir[a];
                if t <= EPS {
                    return None;
                }
                let hit = origin + dir * t;
                let (i, j) = axis.others();
                let inside = (hit[i] - center[i]).abs() <= 0.5 * size[0] && (hit[j] - center[j]).abs() <= 0.5 * size[1];
                inside.then_some(t)
            }
        }
    }

    /// Surface rectangles as (normal axis, center, in-plane sizes).
    fn faces(&self) -> Vec<(Axis, Vector3<f64>, [f64; 2])> {
        match *self {
            Primitive::Plane { axis, center, size } => vec![(axis, center, size)],
            Primitive::Box { center, size } => {
                let mut out = Vec::with_capacity(6);
                for axis in [Axis::X, Axis::Y, Axis::Z] {
                    let a = axis.index();
                    let (i, j) = axis.others();
                    for sign in [-1.0, 1.0] {
                        let mut c = center;
                        c[a] += sign * 0.5 * size[a];
                        out.push((axis, c, [size[i], size[j]]));
                    }
                }
                out
            }
        }
    }

    /// Distance from `p` to the primitive's surface.
    pub fn surface_distance(&self, p: &Vector3<f64>) -> f64 {
        self.faces()
            .iter()
            .map(|(axis, c, s)| {
                let a = axis.index();
                let (i, j) = axis.others();
                let di = ((p[i] - c[i]).abs() - 0.5 * s[0]).max(0.0);
                let dj = ((p[j] - c[j]).abs() - 0.5 * s[1]).max(0.0);
                (di * di + dj * dj + (p[a] - c[a]).powi(2)).sqrt()
            })
            .fold(f64::INFINITY, f64::min)
    }

    fn bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        match *self {
            Primitive::Box { center, size } => (center - size * 0.5, center + size * 0.5),
            Primitive::Plane { axis, center, size } => {
                let (i, j) = axis.others();
                let mut half = Vector3::zeros();
                half[i] = 0.5 * size[0];
                half[j] = 0.5 * size[1];
                (center - half, center + half)
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Scene {
    primitives: Vec<Primitive>,
}

impl Scene {
    pub fn new(primitives: Vec<Primitive>) -> Result<Self, SimError> {
        for p in &primitives {
            p.validate()?;
        }
        Ok(Self { primitives })
    }

    pub fn primitives(&self) -> &[Primitive] {
        &self.primitives
    }

    pub fn bounds(&self) -> Option<Bounds> {
        let mut it = self.primitives.iter().map(Primitive::bounds);
        let (mut lo, mut hi) = it.next()?;
        for (a, b) in it {
            lo = lo.inf(&a);
            hi = hi.sup(&b);
        }
        Some(Bounds::new(lo, hi))
    }

    /// Distance from `p` to the nearest primitive surface.
    pub fn surface_distance(&self, p: &Vector3<f64>) -> f64 {
        self.primitives.iter().map(|q| q.surface_distance(p)).fold(f64::INFINITY, f64::min)
    }

    /// Parses the plain-text scene format:
    ///
    /// ```text
    /// # comment
    /// box   cx cy cz  sx sy sz
    /// plane z  cx cy cz  s1 s2
    /// ```
    pub fn parse(text: &str) -> Result<Self, SimError> {
        let mut primitives = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let toks: Vec<&str> = body.split_whitespace().collect();
            let err = |message: String| SimError::Parse { line, message };
            let nums = |from: usize, count: usize| -> Result<Vec<f64>, SimError> {
                if toks.len() != from + count {
                    return Err(err(format!("expected {} fields, found {}", from + count, toks.len())));
                }
                toks[from..]
                    .iter()
                    .map(|t| {
                        t.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| err(format!("bad number '{t}'")))
                    })
                    .collect()
            };
            let prim = match toks[0] {
                "box" => {
                    let v = nums(1, 6)?;
                    Primitive::Box { center: Vector3::new(v[0], v[1], v[2]), size: Vector3::new(v[3], v[4], v[5]) }
                }
                "plane" => {
                    let axis: Axis = toks.get(1).ok_or_else(|| err("missing axis".into()))?.parse().map_err(err)?;
                    let v = nums(2, 5)?;
                    Primitive::Plane { axis, center: Vector3::new(v[0], v[1], v[2]), size: [v[3], v[4]] }
                }
                other => return Err(err(format!("unknown primitive '{other}'"))),
            };
            prim.validate().map_err(|e| err(e.to_string()))?;
            primitives.push(prim);
        }
        Self::new(primitives)
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self, SimError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

impl fmt::Display for Scene {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.primitives {
            match p {
                Primitive::Box { center: c, size: s } => {
                    writeln!(f, "box {} {} {} {} {} {}", c.x, c.y, c.z, s.x, s.y, s.z)?
                }
                Primitive::Plane { axis, center: c, size } => {
                    let a = ["x", "y", "z"][axis.index()];
                    writeln!(f, "plane {a} {} {} {} {} {}", c.x, c.y, c.z, size[0], size[1])?
                }
            }
        }
        Ok(())
    }
}

/// Ray casts one z-depth per pixel; misses and hits beyond `max_range` are invalid (0).
pub fn render_depth(scene: &Scene, pose: &Pose, intrinsics: &CameraIntrinsics, max_range: f64) -> DepthImage {
    let r: Matrix3<f64> = *pose.orientation().matrix();
    let (w, h) = (intrinsics.width, intrinsics.height);
    let mut depths = vec![0.0; w * h];
    depths.par_chunks_mut(w).enumerate().for_each(|(v, row)| {
        for (u, out) in row.iter_mut().enumerate() {
            // Camera-frame direction with unit z: the ray parameter is the z-depth.
            let dc =
                Vector3::new((u as f64 - intrinsics.cx) / intrinsics.f, (v as f64 - intrinsics.cy) / intrinsics.f, 1.0);
            let dir = r * dc;
            let best =
                scene.primitives.iter().filter_map(|p| p.intersect(&pose.position, &dir)).fold(f64::INFINITY, f64::min);
            if best <= max_range {
                *out = best;
            }
        }
    });
    DepthImage::new(*intrinsics, depths).expect("grid matches intrinsics")
}

/// Adds zero-mean Gaussian noise to every valid depth; results that turn
/// non-positive become invalid.
pub fn add_depth_noise(image: &mut DepthImage, sigma: f64, seed: u64) {
    if !(sigma > 0.0) {
        return;
    }
    let mut rng = rng::seeded(seed);
    let noise = Normal::new(0.0, sigma).unwrap();
    for d in image.depths_mut() {
        if DepthImage::is_valid_depth(*d) {
            let n = *d + noise.sample(&mut rng);
            *d = if n > 0.0 { n } else { 0.0 };
        }
    }
}

/// Samples primitive surfaces uniformly; each face receives a Poisson count
/// with mean `density × area`.
pub fn scene_to_cloud(scene: &Scene, samples_per_m2: f64, seed: u64) -> PointCloud {
    let mut rng = rng::seeded(seed);
    let mut points = Vec::new();
    for prim in &scene.primitives {
        for (axis, center, size) in prim.faces() {
            let mean = samples_per_m2 * size[0] * size[1];
            let count = if mean > 0.0 { Poisson::new(mean).unwrap().sample(&mut rng) as usize } else { 0 };
            let (i, j) = axis.others();
            for _ in 0..count {
                let mut p = center;
                p[i] += size[0] * (rng.random::<f64>() - 0.5);
                p[j] += size[1] * (rng.random::<f64>() - 0.5);
                points.push(p);
            }
        }
    }
    PointCloud { points }
}

/// Adds isotropic Gaussian jitter to every point (surface thickness, sensor noise).
pub fn jitter_cloud(cloud: &PointCloud, sigma: f64, seed: u64) -> PointCloud {
    if !(sigma > 0.0) {
        return cloud.clone();
    }
    let mut rng = rng::seeded(seed);
    let n = Normal::new(0.0, sigma).unwrap();
    let points = cloud
        .points
        .iter()
        .map(|p| p + Vector3::new(n.sample(&mut rng), n.sample(&mut rng), n.sample(&mut rng)))
        .collect();
    PointCloud { points }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimedPose {
    pub timestamp: f64,
    pub pose: Pose,
}

/// Timestamped ground-truth or estimated poses.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    samples: Vec<TimedPose>,
}

impl Trajectory {
    pub fn new(samples: Vec<TimedPose>) -> Result<Self, SimError> {
        for (i, w) in samples.windows(2).enumerate() {
            if !(w[1].timestamp > w[0].timestamp) {
                return Err(SimError::NonIncreasingTimestamps(i + 1));
            }
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[TimedPose] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn poses(&self) -> impl Iterator<Item = &Pose> {
        self.samples.iter().map(|s| &s.pose)
    }

    /// Applies `f` to every pose, keeping timestamps.
    pub fn map_poses(&self, mut f: impl FnMut(usize, &Pose) -> Pose) -> Self {
        let samples = self
            .samples
            .iter()
            .enumerate()
            .map(|(i, s)| TimedPose { timestamp: s.timestamp, pose: f(i, &s.pose) })
            .collect();
        Self { samples }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrajectoryKind {
    /// Circle of `radius` around `center` (constant altitude), counter-clockwise.
    Orbit { center: Vector3<f64>, radius: f64 },
    /// Straight line from `start` to `end`.
    Corridor { start: Vector3<f64>, end: Vector3<f64> },
    /// Lemniscate of Gerono with half-width `half_width` along x.
    FigureEight { center: Vector3<f64>, half_width: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryParams {
    /// Upper bound on translational speed (m/s).
    pub speed: f64,
    /// Number of poses (orbit and figure-eight; corridor derives it from length).
    pub steps: usize,
    pub pitch: f64,
    pub roll: f64,
    /// Amplitude (rad) of a slow sinusoidal pitch/roll sway around the base values.
    pub attitude_sway: f64,
}

impl Default for TrajectoryParams {
    fn default() -> Self {
        Self { speed: 0.3, steps: 200, pitch: 0.0, roll: 0.0, attitude_sway: 0.0 }
    }
}

/// Smooth pose sequence sampled at `rate` Hz with yaw along the velocity.
pub fn generate_trajectory(kind: TrajectoryKind, params: &TrajectoryParams, rate: f64) -> Result<Trajectory, SimError> {
    if !(rate > 0.0 && params.speed > 0.0) {
        return Err(SimError::InvalidParams("rate and speed must be positive".into()));
    }
    let dt = 1.0 / rate;
    let attitude = |t: f64| {
        let s = params.attitude_sway;
        (params.pitch + s * (2.0 * PI * t / 7.0).sin(), params.roll + s * (2.0 * PI * t / 5.0).cos())
    };
    let make = |k: usize, p: Vector3<f64>, yaw: f64| {
        let t = k as f64 * dt;
        let (pitch, roll) = attitude(t);
        TimedPose { timestamp: t, pose: Pose::new(p, yaw, pitch, roll) }
    };
    let samples = match kind {
        TrajectoryKind::Orbit { center, radius } => {
            if !(radius > 0.0) {
                return Err(SimError::InvalidParams("orbit radius must be positive".into()));
            }
            let omega = params.speed / radius;
            (0..params.steps)
                .map(|k| {
                    let phi = omega * k as f64 * dt;
                    make(k, center + Vector3::new(radius * phi.cos(), radius * phi.sin(), 0.0), phi + PI / 2.0)
                })
                .collect()
        }
        TrajectoryKind::Corridor { start, end } => {
            let length = (end - start).norm();
            if !(length > 0.0) {
                return Err(SimError::InvalidParams("corridor endpoints coincide".into()));
            }
            let segments = (length * rate / params.speed).ceil().max(1.0) as usize;
            let dir = end - start;
            let yaw = dir.y.atan2(dir.x);
            (0..=segments)
                .map(|k| {
                    let p = if k == segments { end } else { start + dir * (k as f64 / segments as f64) };
                    make(k, p, yaw)
                })
                .collect()
        }
        TrajectoryKind::FigureEight { center, half_width } => {
            if !(half_width > 0.0) {
                return Err(SimError::InvalidParams("figure-eight half width must be positive".into()));
            }
            // |v| = a ω sqrt(cos²θ + cos²2θ) ≤ a ω √2.
            let omega = params.speed / (half_width * 2f64.sqrt());
            (0..params.steps)
                .map(|k| {
                    let th = omega * k as f64 * dt;
                    let p = center + Vector3::new(half_width * th.sin(), half_width * th.sin() * th.cos(), 0.0);
                    let (vx, vy) = (th.cos(), (2.0 * th).cos());
                    make(k, p, vy.atan2(vx))
                })
                .collect()
        }
    };
    Trajectory::new(samples)
}

/// Consecutive-pose deltas in the earlier heading frame plus additive Gaussian
/// noise (per translation axis and on yaw). Pitch and roll are copied exactly.
pub fn odometry_from_trajectory(
    traj: &Trajectory,
    sigma_translation: f64,
    sigma_yaw: f64,
    seed: u64,
) -> Vec<OdometryDelta> {
    let mut rng = rng::seeded(seed);
    let t = (sigma_translation > 0.0).then(|| Normal::new(0.0, sigma_translation).unwrap());
    let y = (sigma_yaw > 0.0).then(|| Normal::new(0.0, sigma_yaw).unwrap());
    let mut draw = |d: &Option<Normal<f64>>| d.map_or(0.0, |d| d.sample(&mut rng));
    traj.samples
        .windows(2)
        .map(|w| {
            let mut d = OdometryDelta::between(&w[0].pose, &w[1].pose);
            d.delta_translation += Vector3::new(draw(&t), draw(&t), draw(&t));
            d.delta_yaw = wrap_angle(d.delta_yaw + draw(&y));
            d
        })
        .collect()
}

/// Chains deltas from a starting pose.
pub fn integrate_odometry(start: &Pose, deltas: &[OdometryDelta]) -> Vec<Pose> {
    let mut out = Vec::with_capacity(deltas.len() + 1);
    out.push(*start);
    for d in deltas {
        let next = d.apply(out.last().unwrap());
        out.push(next);
    }
    out
}

/// Ready-made scenes. World +z points toward the floor (the camera looks
/// down at zero attitude).
pub mod presets {
    use super::*;

    /// Floor at `z = floor_z`, a corridor of `length` along x and `width`
    /// along y between two walls of height `wall_height`, cluttered with
    /// boxes of varied footprint and height.
    pub fn corridor(length: f64, width: f64, floor_z: f64, wall_height: f64, seed: u64) -> Scene {
        let mut rng = rng::seeded(seed);
        let mut prims = vec![Primitive::Plane {
            axis: Axis::Z,
            center: Vector3::new(0.5 * length, 0.0, floor_z),
            size: [length, width],
        }];
        for side in [-1.0, 1.0] {
            prims.push(Primitive::Plane {
                axis: Axis::Y,
                center: Vector3::new(0.5 * length, side * 0.5 * width, floor_z - 0.5 * wall_height),
                size: [length, wall_height],
            });
        }
        // Clutter scales with the corridor width so wide corridors stay cluttered.
        let u = width / 3.0;
        let max_h = 0.6 * wall_height;
        let mut x = 0.2 * u;
        while x < length - 0.3 * u {
            let sx = rng.random_range(0.2..0.6) * u;
            let sy = (rng.random_range(0.2f64..0.6) * u).min(0.45 * width);
            let h = rng.random_range(0.1 * max_h..max_h);
            let y = rng.random_range(-0.5 * width + 0.5 * sy..0.5 * width - 0.5 * sy);
            prims.push(Primitive::Box {
                center: Vector3::new(x + 0.5 * sx, y, floor_z - 0.5 * h),
                size: Vector3::new(sx, sy, h),
            });
            x += sx + rng.random_range(0.05..0.4) * u;
        }
        Scene::new(prims).expect("preset extents are positive")
    }

    /// A square room of side `side` with a floor at `floor_z` and boxes of
    /// varied size scattered on a jittered grid.
    pub fn room(side: f64, floor_z: f64, seed: u64) -> Scene {
        let mut rng = rng::seeded(seed);
        let mut prims = vec![Primitive::Plane {
            axis: Axis::Z,
            center: Vector3::new(0.0, 0.0, floor_z),
            size: [side + 2.0, side + 2.0],
        }];
        let cells = (side / 1.0).floor().max(1.0) as usize;
        let cell = side / cells as f64;
        for i in 0..cells {
            for j in 0..cells {
                if rng.random::<f64>() < 0.25 {
                    continue;
                }
                let sx = rng.random_range(0.2..0.6) * cell;
                let sy = rng.random_range(0.2..0.6) * cell;
                let h = rng.random_range(0.15..1.3);
                let cx = -0.5 * side + (i as f64 + 0.5) * cell + rng.random_range(-0.15..0.15) * cell;
                let cy = -0.5 * side + (j as f64 + 0.5) * cell + rng.random_range(-0.15..0.15) * cell;
                prims.push(Primitive::Box {
                    center: Vector3::new(cx, cy, floor_z - 0.5 * h),
                    size: Vector3::new(sx, sy, h),
                });
            }
        }
        Scene::new(prims).expect("preset extents are positive")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projection::back_project;
    use approx::assert_relative_eq;

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics::from_fov(64, 48, PI / 2.0).unwrap()
    }

    #[test]
    fn frontoparallel_plane_has_constant_depth() {
        let scene =
            Scene::new(vec![Primitive::Plane { axis: Axis::Z, center: Vector3::new(0.0, 0.0, 2.0), size: [1e6, 1e6] }])
                .unwrap();
        let img = render_depth(&scene, &Pose::identity(), &intr(), 50.0);
        assert!(img.depths().iter().all(|d| (d - 2.0).abs() < 1e-12));
        // Out of range → invalid.
        let img = render_depth(&scene, &Pose::identity(), &intr(), 1.5);
        assert_eq!(img.valid_count(), 0);
    }

    #[test]
    fn empty_scene_is_all_invalid() {
        let img = render_depth(&Scene::default(), &Pose::identity(), &intr(), 10.0);
        assert_eq!(img.valid_count(), 0);
    }

    /// Independent slab-method oracle per pixel, with ray length converted to z-depth.
    fn slab_depth(lo: Vector3<f64>, hi: Vector3<f64>, o: Vector3<f64>, d: Vector3<f64>) -> Option<f64> {
        let n = d.normalize();
        let mut tmin = 0.0f64;
        let mut tmax = f64::INFINITY;
        for i in 0..3 {
            let t1 = (lo[i] - o[i]) / n[i];
            let t2 = (hi[i] - o[i]) / n[i];
            tmin = tmin.max(t1.min(t2));
            tmax = tmax.min(t1.max(t2));
        }
        (tmin <= tmax && tmin > 0.0).then(|| tmin / d.norm())
    }

    #[test]
    fn box_corner_matches_slab_oracle() {
        let lo = Vector3::new(-0.4, -0.3, 1.5);
        let hi = Vector3::new(0.9, 0.6, 2.2);
        let scene = Scene::new(vec![Primitive::Box { center: (lo + hi) * 0.5, size: hi - lo }]).unwrap();
        let pose = Pose::new(Vector3::new(-0.3, 0.2, 0.0), 0.3, 0.2, -0.1);
        let k = intr();
        let img = render_depth(&scene, &pose, &k, 100.0);
        let r = *pose.orientation().matrix();
        let mut hits = 0;
        for v in 0..k.height {
            for u in 0..k.width {
                let dc = Vector3::new((u as f64 - k.cx) / k.f, (v as f64 - k.cy) / k.f, 1.0);
                let expect = slab_depth(lo, hi, pose.position, r * dc);
                let got = img.depth(u, v);
                match expect {
                    Some(e) => {
                        hits += 1;
                        assert!((got - e).abs() < 1e-9, "({u},{v}) {got} vs {e}");
                    }
                    None => assert_eq!(got, 0.0),
                }
            }
        }
        assert!(hits > 100);
    }

    #[test]
    fn back_projected_pixels_land_on_surfaces() {
        let scene = presets::room(4.0, 2.5, 3);
        let pose = Pose::new(Vector3::new(0.2, -0.1, 0.0), 0.7, 0.05, -0.04);
        let k = intr();
        let img = render_depth(&scene, &pose, &k, 20.0);
        assert!(img.valid_count() > 1000);
        for v in 0..k.height {
            for u in 0..k.width {
                let d = img.depth(u, v);
                if d > 0.0 {
                    let p = pose.to_world(&back_project(&k, u as f64, v as f64, d).unwrap());
                    assert!(scene.surface_distance(&p) < 1e-6);
                }
            }
        }
    }

    #[test]
    fn cloud_counts_follow_area() {
        let plane =
            Scene::new(vec![Primitive::Plane { axis: Axis::Z, center: Vector3::zeros(), size: [1.0, 1.0] }]).unwrap();
        for seed in 0..10 {
            let n = scene_to_cloud(&plane, 100.0, seed).len() as f64;
            assert!((n - 100.0).abs() <= 30.0, "{n}");
        }
        let two = Scene::new(vec![
            Primitive::Plane { axis: Axis::Z, center: Vector3::zeros(), size: [2.0, 1.0] },
            Primitive::Plane { axis: Axis::X, center: Vector3::new(5.0, 0.0, 0.0), size: [1.0, 2.0] },
        ])
        .unwrap();
        let cloud = scene_to_cloud(&two, 5000.0, 1);
        let n = cloud.len() as f64;
        let first = cloud.points.iter().filter(|p| p.x < 2.0).count() as f64;
        // Binomial(n, 1/2) plus Poisson count noise: 3σ bound on the fraction.
        assert!((first / n - 0.5).abs() <= 3.0 * 0.5 / n.sqrt(), "{}", first / n);
        for p in &cloud.points {
            assert!(two.surface_distance(p) < 1e-9);
        }
    }

    #[test]
    fn scene_text_round_trip() {
        let scene = presets::corridor(6.0, 3.0, 2.5, 1.5, 1);
        let parsed = Scene::parse(&scene.to_string()).unwrap();
        assert_eq!(parsed.primitives().len(), scene.primitives().len());
        let txt = "# a\nbox 0 0 1  1 2 3\nplane y 0 1 0 2 2 # wall\n";
        let s = Scene::parse(txt).unwrap();
        assert_eq!(s.primitives().len(), 2);
        assert!(matches!(Scene::parse("box 0 0 0 1 1"), Err(SimError::Parse { line: 1, .. })));
        assert!(matches!(Scene::parse("\nbox 0 0 0 1 -1 1"), Err(SimError::Parse { line: 2, .. })));
        assert!(Scene::parse("sphere 0 0 0 1").is_err());
    }

    #[test]
    fn orbit_stays_on_circle() {
        let center = Vector3::new(1.0, -1.0, 0.5);
        let params = TrajectoryParams { speed: 0.5, steps: 300, ..Default::default() };
        let t = generate_trajectory(TrajectoryKind::Orbit { center, radius: 2.0 }, &params, 10.0).unwrap();
        assert_eq!(t.len(), 300);
        for p in t.poses() {
            assert_relative_eq!((p.position - center).norm(), 2.0, epsilon = 1e-12);
        }
        for w in t.samples().windows(2) {
            assert!((w[1].pose.position - w[0].pose.position).norm() <= 0.05 + 1e-12);
        }
    }

    #[test]
    fn corridor_endpoints_and_step_bound() {
        let (a, b) = (Vector3::new(0.0, 0.0, 1.0), Vector3::new(6.0, 0.5, 1.0));
        let params = TrajectoryParams { speed: 0.3, ..Default::default() };
        let t = generate_trajectory(TrajectoryKind::Corridor { start: a, end: b }, &params, 10.0).unwrap();
        assert_eq!(t.samples()[0].pose.position, a);
        assert_eq!(t.samples().last().unwrap().pose.position, b);
        for w in t.samples().windows(2) {
            assert!((w[1].pose.position - w[0].pose.position).norm() <= 0.03 + 1e-12);
        }
        assert_relative_eq!(t.samples()[3].pose.yaw, 0.5f64.atan2(6.0));
    }

    #[test]
    fn figure_eight_step_bound_and_yaw() {
        let params = TrajectoryParams { speed: 0.4, steps: 500, attitude_sway: 0.05, ..Default::default() };
        let t = generate_trajectory(
            TrajectoryKind::FigureEight { center: Vector3::zeros(), half_width: 1.5 },
            &params,
            20.0,
        )
        .unwrap();
        for w in t.samples().windows(2) {
            let d = w[1].pose.position - w[0].pose.position;
            assert!(d.norm() <= 0.02 + 1e-12);
            assert!(wrap_angle(d.y.atan2(d.x) - w[0].pose.yaw).abs() < 0.2);
        }
    }

    #[test]
    fn noiseless_odometry_recomposes_truth() {
        let params = TrajectoryParams { speed: 0.4, steps: 400, attitude_sway: 0.1, pitch: 0.05, ..Default::default() };
        let truth = generate_trajectory(
            TrajectoryKind::FigureEight { center: Vector3::new(0.0, 0.0, 1.0), half_width: 2.0 },
            &params,
            10.0,
        )
        .unwrap();
        let deltas = odometry_from_trajectory(&truth, 0.0, 0.0, 0);
        let poses = integrate_odometry(&truth.samples()[0].pose, &deltas);
        for (k, (p, t)) in poses.iter().zip(truth.poses()).enumerate() {
            assert!((p.position - t.position).amax() < 1e-9, "step {k}");
            assert!(wrap_angle(p.yaw - t.yaw).abs() < 1e-9);
            assert_eq!((p.pitch, p.roll), (t.pitch, t.roll));
        }
        for (d, t) in deltas.iter().zip(truth.samples().iter().skip(1)) {
            assert_eq!((d.pitch, d.roll), (t.pose.pitch, t.pose.roll));
        }
    }

    #[test]
    fn odometry_drift_grows_like_random_walk() {
        let params = TrajectoryParams { speed: 0.3, steps: 1001, ..Default::default() };
        let truth = generate_trajectory(TrajectoryKind::Orbit { center: Vector3::zeros(), radius: 3.0 }, &params, 10.0)
            .unwrap();
        let sigma = 0.01;
        let runs = 200;
        let mut sq = 0.0;
        for seed in 0..runs {
            let deltas = odometry_from_trajectory(&truth, sigma, 0.0, seed);
            let end = *integrate_odometry(&truth.samples()[0].pose, &deltas).last().unwrap();
            let err = end.position - truth.samples().last().unwrap().pose.position;
            sq += err.x * err.x;
        }
        // Per-axis terminal error variance of a 1000-step walk is 1000 σ²
        // (heading is exact, so the noise stays isotropic).
        let var = sq / runs as f64;
        let expect = 1000.0 * sigma * sigma;
        assert!((var / expect - 1.0).abs() < 0.3, "{var} vs {expect}");
    }

    #[test]
    fn timestamps_must_increase() {
        let p = TimedPose { timestamp: 1.0, pose: Pose::identity() };
        assert!(matches!(Trajectory::new(vec![p, p]), Err(SimError::NonIncreasingTimestamps(1))));
    }
}
