//! Multi-hypothesis tracking of position and yaw.
//!
//! One filter step is propagate → weight → deprivation recovery → resample.
//! Weights are the normalized inverse of each particle's scan NLL; pitch and
//! roll are overwritten from the attitude reference on every propagation.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use thiserror::Error;

use crate::gmm_map::GmmMap;
use crate::likelihood::{self, DepthImage, LikelihoodError, ScanPoints, Scorer};
use crate::projection::{wrap_angle, Pose};
use crate::rng;

/// NLL values are clamped to at least this before inversion (nats).
pub const NLL_FLOOR: f64 = 1e-3;

#[derive(Debug, Error, PartialEq)]
pub enum FilterError {
    #[error("invalid filter configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Likelihood(#[from] LikelihoodError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterConfig {
    pub n_particles: usize,
    /// Process noise per translation axis (m).
    pub sigma_translation: f64,
    /// Process noise on yaw (rad).
    pub sigma_yaw: f64,
    pub alpha_slow: f64,
    pub alpha_fast: f64,
    /// Number of equal-weight strata used by the resampler.
    pub n_groups: usize,
    pub patch_size: usize,
    pub stride: usize,
    /// Resample only when ESS / N drops below this. `None` resamples every step.
    pub ess_threshold: Option<f64>,
}

impl Default for FilterConfig {
    /// Desktop settings: N = 1068, σ = 0.02 m / 0.01 rad.
    fn default() -> Self {
        Self {
            n_particles: 1068,
            sigma_translation: 0.02,
            sigma_yaw: 0.01,
            alpha_slow: 0.001,
            alpha_fast: 0.01,
            n_groups: 32,
            patch_size: likelihood::DEFAULT_PATCH_SIZE,
            stride: likelihood::DEFAULT_STRIDE,
            ess_threshold: None,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), FilterError> {
        let bad = |m: String| Err(FilterError::InvalidConfig(m));
        if !(0.0 < self.alpha_slow && self.alpha_slow < self.alpha_fast && self.alpha_fast < 1.0) {
            return bad(format!("need 0 < alpha_slow ({}) < alpha_fast ({}) < 1", self.alpha_slow, self.alpha_fast));
        }
        if self.n_groups == 0 || self.n_particles < self.n_groups {
            return bad(format!("need n_particles ({}) >= n_groups ({}) >= 1", self.n_particles, self.n_groups));
        }
        if !(self.sigma_translation >= 0.0 && self.sigma_yaw >= 0.0) {
            return bad("process noise must be non-negative".into());
        }
        if self.patch_size == 0 || self.stride == 0 {
            return bad("patch_size and stride must be at least 1".into());
        }
        if let Some(t) = self.ess_threshold {
            if !(0.0..=1.0).contains(&t) {
                return bad(format!("ess_threshold {t} outside [0, 1]"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Particle {
    pub pose: Pose,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    pub particles: Vec<Particle>,
    /// Long-horizon average of the mean inverse NLL. Zero until the first
    /// informative weighting.
    pub w_slow: f64,
    /// Short-horizon average of the mean inverse NLL.
    pub w_fast: f64,
    pub step: u64,
}

impl FilterState {
    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    /// Effective sample size 1 / Σ w².
    pub fn ess(&self) -> f64 {
        1.0 / self.particles.iter().map(|p| p.weight * p.weight).sum::<f64>()
    }
}

/// Frame-to-frame motion from odometry plus the absolute attitude.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdometryDelta {
    /// Translation expressed in the heading frame of the earlier pose (m).
    pub delta_translation: Vector3<f64>,
    pub delta_yaw: f64,
    /// Absolute pitch and roll at the later pose (rad).
    pub pitch: f64,
    pub roll: f64,
}

impl OdometryDelta {
    pub fn zero(pitch: f64, roll: f64) -> Self {
        Self { delta_translation: Vector3::zeros(), delta_yaw: 0.0, pitch, roll }
    }

    /// Relative motion from `from` to `to`.
    pub fn between(from: &Pose, to: &Pose) -> Self {
        Self {
            delta_translation: heading_rotation(from.yaw).transpose() * (to.position - from.position),
            delta_yaw: wrap_angle(to.yaw - from.yaw),
            pitch: to.pitch,
            roll: to.roll,
        }
    }

    /// Composes the delta onto `pose` without noise.
    pub fn apply(&self, pose: &Pose) -> Pose {
        Pose::new(
            pose.position + heading_rotation(pose.yaw) * self.delta_translation,
            pose.yaw + self.delta_yaw,
            self.pitch,
            self.roll,
        )
    }
}

fn heading_rotation(yaw: f64) -> Matrix3<f64> {
    *Rotation3::from_axis_angle(&Vector3::z_axis(), yaw).matrix()
}

/// Axis-aligned position bounds used for (re)initialization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Bounds {
    pub fn new(min: Vector3<f64>, max: Vector3<f64>) -> Self {
        Self { min: min.inf(&max), max: min.sup(&max) }
    }

    pub fn centered(center: Vector3<f64>, extent: Vector3<f64>) -> Self {
        Self::new(center - extent * 0.5, center + extent * 0.5)
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| self.min[i] <= p[i] && p[i] <= self.max[i])
    }

    pub fn sample(&self, rng: &mut rng::Rng) -> Vector3<f64> {
        Vector3::from_fn(|i, _| uniform(rng, self.min[i], self.max[i]))
    }
}

fn uniform(rng: &mut rng::Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Yaw uniform in (−π, π].
fn uniform_yaw(rng: &mut rng::Rng) -> f64 {
    PI - 2.0 * PI * rng.random::<f64>()
}

/// N particles uniform over `center ± extent/2` and `center.yaw ± yaw_range/2`,
/// with equal weights and the center's pitch and roll.
pub fn init_uniform(
    config: &FilterConfig,
    center: &Pose,
    extent: Vector3<f64>,
    yaw_range: f64,
    seed: u64,
) -> Result<FilterState, FilterError> {
    config.validate()?;
    if extent.iter().any(|e| !(*e >= 0.0)) || !(yaw_range >= 0.0) {
        return Err(FilterError::InvalidConfig("initialization extents must be non-negative".into()));
    }
    let mut rng = rng::seeded(seed);
    let box_ = Bounds::centered(center.position, extent);
    let n = config.n_particles;
    let particles = (0..n)
        .map(|_| {
            let position = box_.sample(&mut rng);
            let yaw = center.yaw + yaw_range * (rng.random::<f64>() - 0.5);
            Particle { pose: Pose::new(position, yaw, center.pitch, center.roll), weight: 1.0 / n as f64 }
        })
        .collect();
    Ok(FilterState { particles, w_slow: 0.0, w_fast: 0.0, step: 0 })
}

/// Moves every particle by the odometry delta (rotated by its own yaw) and adds
/// zero-mean Gaussian noise on each translation axis and on yaw.
pub fn propagate(state: &FilterState, delta: &OdometryDelta, config: &FilterConfig, seed: u64) -> FilterState {
    let mut rng = rng::seeded(seed);
    let trans = (config.sigma_translation > 0.0).then(|| Normal::new(0.0, config.sigma_translation).unwrap());
    let yaw = (config.sigma_yaw > 0.0).then(|| Normal::new(0.0, config.sigma_yaw).unwrap());
    let mut draw = |d: &Option<Normal<f64>>| d.map_or(0.0, |d| d.sample(&mut rng));
    let particles = state
        .particles
        .iter()
        .map(|p| {
            let moved = delta.apply(&p.pose);
            let noise = Vector3::new(draw(&trans), draw(&trans), draw(&trans));
            let pose = Pose::new(moved.position + noise, moved.yaw + draw(&yaw), delta.pitch, delta.roll);
            Particle { pose, weight: p.weight }
        })
        .collect();
    FilterState { particles, ..state.clone() }
}

/// Result of weighting a particle set.
#[derive(Debug, Clone, PartialEq)]
pub struct Weighting {
    pub state: FilterState,
    /// Raw (unclamped) NLL per particle.
    pub nll: Vec<f64>,
    /// True when the scan carried no information (no valid pixels or no
    /// particle saw any component); weights were reset to uniform.
    pub degenerate: bool,
}

/// Per-particle approximate NLL of the scan.
pub fn particle_nlls(
    particles: &[Particle],
    points: &ScanPoints,
    map: &GmmMap,
) -> Result<(Vec<f64>, bool), FilterError> {
    let results: Vec<Result<(f64, bool), LikelihoodError>> = particles
        .par_iter()
        .map_init(
            || Scorer::new(*points.intrinsics(), points.patch_size()),
            |scorer, p| {
                let seen = scorer.memberships(map, &p.pose).total_memberships() > 0;
                let nll = points.nll_approx(map, &p.pose, scorer.table())?;
                Ok((nll, seen))
            },
        )
        .collect();
    let mut nll = Vec::with_capacity(particles.len());
    let mut any_seen = false;
    for r in results {
        let (v, seen) = r?;
        nll.push(v);
        any_seen |= seen;
    }
    Ok((nll, any_seen))
}

/// Turns NLLs into normalized inverse-NLL weights and updates the averages.
pub fn weights_from_nll(state: &FilterState, nll: &[f64], config: &FilterConfig, informative: bool) -> Weighting {
    let n = state.particles.len();
    let mut next = state.clone();
    let inverse: Vec<f64> = nll.iter().map(|v| if v.is_finite() { 1.0 / v.max(NLL_FLOOR) } else { 0.0 }).collect();
    let total: f64 = inverse.iter().sum();
    let degenerate = !informative || !(total > 0.0);
    if degenerate {
        for p in &mut next.particles {
            p.weight = 1.0 / n as f64;
        }
    } else {
        for (p, w) in next.particles.iter_mut().zip(&inverse) {
            p.weight = w / total;
        }
        let w_avg = total / n as f64;
        if next.w_slow == 0.0 && next.w_fast == 0.0 {
            next.w_slow = w_avg;
            next.w_fast = w_avg;
        } else {
            next.w_slow += config.alpha_slow * (w_avg - next.w_slow);
            next.w_fast += config.alpha_fast * (w_avg - next.w_fast);
        }
    }
    Weighting { state: next, nll: nll.to_vec(), degenerate }
}

/// Scores every particle against the scan and normalizes inverse NLLs into weights.
pub fn compute_weights(
    state: &FilterState,
    scan: &DepthImage,
    map: &GmmMap,
    config: &FilterConfig,
) -> Result<Weighting, FilterError> {
    let points = ScanPoints::new(scan, config.stride, config.patch_size)?;
    let (nll, seen) = particle_nlls(&state.particles, &points, map)?;
    Ok(weights_from_nll(state, &nll, config, seen && !points.is_empty()))
}

/// Per-group output counts: `round(N/G)` each, the last group takes the remainder.
pub fn group_budgets(n: usize, groups: usize) -> Vec<usize> {
    let groups = groups.clamp(1, n.max(1));
    let per = ((n as f64) / groups as f64).round() as usize;
    let mut left = n;
    let mut out = Vec::with_capacity(groups);
    for g in 0..groups {
        let b = if g + 1 == groups { left } else { per.min(left) };
        out.push(b);
        left -= b;
    }
    out
}

/// Stratified low-variance resampling.
///
/// Particles are shuffled and their weights laid end to end on [0, 1). Group
/// `g` owns the next `budget_g / N` of that line (so groups carry equal weight
/// up to the budget rounding) and draws `budget_g` equally spaced pointers
/// behind a single uniform offset. Every particle's expected copy count is
/// exactly `N · w`.
pub fn resample(state: &FilterState, config: &FilterConfig, seed: u64) -> FilterState {
    let n = state.particles.len();
    if n == 0 {
        return state.clone();
    }
    let mut rng = rng::seeded(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let total: f64 = state.particles.iter().map(|p| p.weight).sum();

    let mut out = Vec::with_capacity(n);
    let mut cumulative = state.particles[order[0]].weight / total;
    let mut cursor = 0;
    let mut start = 0usize;
    for budget in group_budgets(n, config.n_groups) {
        let offset: f64 = rng.random();
        for k in 0..budget {
            let pointer = (start + k) as f64 + offset;
            let target = pointer / n as f64;
            while cumulative <= target && cursor + 1 < n {
                cursor += 1;
                cumulative += state.particles[order[cursor]].weight / total;
            }
            out.push(Particle { pose: state.particles[order[cursor]].pose, weight: 1.0 / n as f64 });
        }
        start += budget;
    }
    FilterState { particles: out, ..state.clone() }
}

/// Re-draws `round(p · N)` uniformly chosen particles over `bounds` and a full
/// yaw circle, with `p = max(0, 1 − w_fast / w_slow)`. Returns the new state and
/// the number of particles replaced. Replaced particles keep their slot's weight.
pub fn recover_deprivation(
    state: &FilterState,
    _config: &FilterConfig,
    bounds: &Bounds,
    seed: u64,
) -> (FilterState, usize) {
    if !(state.w_slow > 0.0) {
        return (state.clone(), 0);
    }
    let p_reset = (1.0 - state.w_fast / state.w_slow).max(0.0);
    let n = state.particles.len();
    let n_modify = ((p_reset * n as f64).round() as usize).min(n);
    if n_modify == 0 {
        return (state.clone(), 0);
    }
    let mut rng = rng::seeded(seed);
    let mut next = state.clone();
    for i in index::sample(&mut rng, n, n_modify) {
        let p = &mut next.particles[i];
        p.pose = Pose::new(bounds.sample(&mut rng), uniform_yaw(&mut rng), p.pose.pitch, p.pose.roll);
    }
    (next, n_modify)
}

/// Weighted summary of the particle set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub pose: Pose,
    pub position_covariance: Matrix3<f64>,
    /// 1 − |Σ w e^{iψ}|, in [0, 1].
    pub yaw_circular_variance: f64,
}

fn circular_mean(state: &FilterState, angle: impl Fn(&Pose) -> f64) -> (f64, f64) {
    let (mut s, mut c) = (0.0, 0.0);
    for p in &state.particles {
        let a = angle(&p.pose);
        s += p.weight * a.sin();
        c += p.weight * a.cos();
    }
    (s.atan2(c), (s * s + c * c).sqrt())
}

pub fn estimate(state: &FilterState) -> Estimate {
    let total: f64 = state.particles.iter().map(|p| p.weight).sum();
    let mean = state.particles.iter().map(|p| p.pose.position * p.weight).sum::<Vector3<f64>>() / total;
    let cov = state
        .particles
        .iter()
        .map(|p| {
            let d = p.pose.position - mean;
            d * d.transpose() * p.weight
        })
        .sum::<Matrix3<f64>>()
        / total;
    let (yaw, resultant) = circular_mean(state, |p| p.yaw);
    let (pitch, _) = circular_mean(state, |p| p.pitch);
    let (roll, _) = circular_mean(state, |p| p.roll);
    Estimate {
        pose: Pose::new(mean, yaw, pitch, roll),
        position_covariance: cov,
        yaw_circular_variance: (1.0 - resultant / total).clamp(0.0, 1.0),
    }
}

/// Everything a caller may want to log about one step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub state: FilterState,
    /// Estimate of the weighted set, before recovery and resampling.
    pub estimate: Estimate,
    pub nll: Vec<f64>,
    pub ess: f64,
    pub n_modify: usize,
    pub degenerate: bool,
    pub resampled: bool,
}

impl StepOutput {
    pub fn mean_nll(&self) -> f64 {
        self.nll.iter().sum::<f64>() / self.nll.len().max(1) as f64
    }

    pub fn min_nll(&self) -> f64 {
        self.nll.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// One full filter iteration: propagate, weight, recover, resample.
#[allow(clippy::too_many_arguments)]
pub fn step(
    state: &FilterState,
    delta: &OdometryDelta,
    scan: &DepthImage,
    map: &GmmMap,
    config: &FilterConfig,
    bounds: &Bounds,
    seed: u64,
) -> Result<StepOutput, FilterError> {
    let points = ScanPoints::new(scan, config.stride, config.patch_size)?;
    step_with_points(state, delta, &points, map, config, bounds, seed)
}

/// [`step`] with the scan already back-projected.
pub fn step_with_points(
    state: &FilterState,
    delta: &OdometryDelta,
    points: &ScanPoints,
    map: &GmmMap,
    config: &FilterConfig,
    bounds: &Bounds,
    seed: u64,
) -> Result<StepOutput, FilterError> {
    let propagated = propagate(state, delta, config, rng::derive_seed(seed, 1));
    let (nll, seen) = particle_nlls(&propagated.particles, points, map)?;
    let weighted = weights_from_nll(&propagated, &nll, config, seen && !points.is_empty());
    let estimate = estimate(&weighted.state);
    let ess = weighted.state.ess();
    let (recovered, n_modify) = recover_deprivation(&weighted.state, config, bounds, rng::derive_seed(seed, 2));
    let do_resample = config.ess_threshold.is_none_or(|t| ess < t * recovered.len() as f64);
    let mut next = if do_resample { resample(&recovered, config, rng::derive_seed(seed, 3)) } else { recovered };
    next.step = state.step + 1;
    Ok(StepOutput {
        state: next,
        estimate,
        nll: weighted.nll,
        ess,
        n_modify,
        degenerate: weighted.degenerate,
        resampled: do_resample,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn config(n: usize) -> FilterConfig {
        FilterConfig { n_particles: n, n_groups: 1.max(n.min(32)), ..FilterConfig::default() }
    }

    fn state_from(poses: &[Pose], weights: &[f64]) -> FilterState {
        FilterState {
            particles: poses.iter().zip(weights).map(|(p, w)| Particle { pose: *p, weight: *w }).collect(),
            w_slow: 0.0,
            w_fast: 0.0,
            step: 0,
        }
    }

    fn at(x: f64, y: f64, z: f64, yaw: f64) -> Pose {
        Pose::new(Vector3::new(x, y, z), yaw, 0.0, 0.0)
    }

    #[test]
    fn default_config_values() {
        let c = FilterConfig::default();
        assert_eq!(c.n_particles, 1068);
        assert_eq!((c.sigma_translation, c.sigma_yaw), (0.02, 0.01));
        assert_eq!((c.alpha_slow, c.alpha_fast), (0.001, 0.01));
        assert_eq!((c.n_groups, c.patch_size, c.stride), (32, 32, 4));
        c.validate().unwrap();
        assert!(FilterConfig { alpha_slow: 0.01, alpha_fast: 0.001, ..c }.validate().is_err());
        assert!(FilterConfig { n_particles: 8, n_groups: 9, ..c }.validate().is_err());
        assert!(FilterConfig { n_groups: 0, ..c }.validate().is_err());
    }

    #[test]
    fn init_with_zero_extent_collapses_to_center() {
        let center = Pose::new(Vector3::new(1.0, 2.0, 3.0), 0.4, 0.05, -0.03);
        let s = init_uniform(&config(50), &center, Vector3::zeros(), 0.0, 1).unwrap();
        assert_eq!(s.len(), 50);
        for p in &s.particles {
            assert_eq!(p.pose, center);
            assert_relative_eq!(p.weight, 1.0 / 50.0);
        }
    }

    #[test]
    fn init_uniform_statistics() {
        let center = Pose::new(Vector3::new(1.0, -2.0, 0.5), 0.3, 0.1, 0.2);
        let extent = Vector3::new(4.0, 4.0, 4.0);
        let n = 100_000;
        let s = init_uniform(&config(n), &center, extent, PI, 2).unwrap();
        let mean = s.particles.iter().map(|p| p.pose.position).sum::<Vector3<f64>>() / n as f64;
        let sd = 4.0 / 12f64.sqrt();
        for i in 0..3 {
            assert!((mean[i] - center.position[i]).abs() <= 3.0 * sd / (n as f64).sqrt());
        }
        for p in &s.particles {
            assert!((p.pose.position - center.position).amax() <= 2.0);
            assert!(wrap_angle(p.pose.yaw - center.yaw).abs() <= PI / 2.0 + 1e-12);
            assert_eq!((p.pose.pitch, p.pose.roll), (0.1, 0.2));
        }
    }

    #[test]
    fn propagate_zero_delta_zero_noise_is_identity() {
        let cfg = FilterConfig { sigma_translation: 0.0, sigma_yaw: 0.0, ..config(10) };
        let s = init_uniform(&cfg, &Pose::identity(), Vector3::repeat(1.0), 1.0, 3).unwrap();
        let out = propagate(&s, &OdometryDelta::zero(0.0, 0.0), &cfg, 4);
        assert_eq!(out, s);
    }

    #[test]
    fn propagate_noise_has_configured_spread() {
        let cfg = config(100_000);
        let s = init_uniform(&cfg, &Pose::identity(), Vector3::zeros(), 0.0, 5).unwrap();
        let out = propagate(&s, &OdometryDelta::zero(0.0, 0.0), &cfg, 6);
        for axis in 0..3 {
            let xs: Vec<f64> = out.particles.iter().map(|p| p.pose.position[axis]).collect();
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            let sd = (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt();
            assert!((sd - 0.02).abs() < 0.02 * 0.02, "axis {axis}: {sd}");
        }
    }

    #[test]
    fn propagate_rotates_delta_by_yaw_and_sets_attitude() {
        let cfg = FilterConfig { sigma_translation: 0.0, sigma_yaw: 0.0, ..config(1) };
        let s = state_from(&[at(0.0, 0.0, 0.0, PI / 2.0)], &[1.0]);
        let delta =
            OdometryDelta { delta_translation: Vector3::new(1.0, 0.0, 0.0), delta_yaw: 0.0, pitch: 0.1, roll: -0.2 };
        let out = propagate(&s, &delta, &cfg, 7);
        let p = out.particles[0].pose;
        assert!((p.position - Vector3::new(0.0, 1.0, 0.0)).amax() < 1e-12);
        assert_eq!((p.pitch, p.roll), (0.1, -0.2));
    }

    #[test]
    fn delta_between_and_apply_are_inverse() {
        let a = Pose::new(Vector3::new(1.0, 2.0, 3.0), 2.9, 0.1, 0.05);
        let b = Pose::new(Vector3::new(-0.5, 2.5, 3.2), -3.0, -0.02, 0.0);
        let d = OdometryDelta::between(&a, &b);
        let c = d.apply(&a);
        assert!((c.position - b.position).amax() < 1e-12);
        assert_relative_eq!(c.yaw, b.yaw, epsilon = 1e-12);
        assert_eq!((c.pitch, c.roll), (b.pitch, b.roll));
    }

    #[test]
    fn inverse_nll_weights() {
        let cfg = config(2);
        let s = state_from(&[at(0.0, 0.0, 0.0, 0.0), at(1.0, 0.0, 0.0, 0.0)], &[0.5, 0.5]);
        let w = weights_from_nll(&s, &[10.0, 20.0], &cfg, true);
        assert_relative_eq!(w.state.particles[0].weight, 2.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(w.state.particles[1].weight, 1.0 / 3.0, epsilon = 1e-15);
        assert!(!w.degenerate);
        // First informative weighting seeds both averages.
        assert_relative_eq!(w.state.w_slow, 0.075);
        assert_relative_eq!(w.state.w_fast, 0.075);
        let w2 = weights_from_nll(&w.state, &[20.0, 20.0], &cfg, true);
        assert_relative_eq!(w2.state.w_slow, 0.075 + 0.001 * (0.05 - 0.075));
        assert_relative_eq!(w2.state.w_fast, 0.075 + 0.01 * (0.05 - 0.075));

        let same = weights_from_nll(&s, &[5.0, 5.0], &cfg, true);
        assert_eq!(same.state.particles[0].weight, 0.5);

        // Negative and tiny NLLs are clamped, keeping weights positive.
        let clamped = weights_from_nll(&s, &[-3.0, 1e-9], &cfg, true);
        assert_relative_eq!(clamped.state.particles[0].weight, 0.5);

        let flat = weights_from_nll(&state_from(&[at(0.0, 0.0, 0.0, 0.0); 2], &[0.9, 0.1]), &[1.0, 2.0], &cfg, false);
        assert!(flat.degenerate);
        assert_eq!(flat.state.particles[0].weight, 0.5);
        assert_eq!(flat.state.w_slow, 0.0);
    }

    #[test]
    fn budgets_sum_to_n() {
        assert_eq!(group_budgets(1068, 32).iter().sum::<usize>(), 1068);
        assert_eq!(*group_budgets(1068, 32).last().unwrap(), 1068 - 31 * 33);
        assert_eq!(group_budgets(1, 1), vec![1]);
        for n in 1..200 {
            for g in 1..=n.min(40) {
                let b = group_budgets(n, g);
                assert_eq!(b.len(), g);
                assert_eq!(b.iter().sum::<usize>(), n);
            }
        }
    }

    #[test]
    fn uniform_single_group_resample_is_permutation() {
        let n = 97;
        let cfg = FilterConfig { n_groups: 1, ..config(n) };
        let poses: Vec<Pose> = (0..n).map(|i| at(i as f64, 0.0, 0.0, 0.0)).collect();
        let s = state_from(&poses, &vec![1.0 / n as f64; n]);
        for seed in 0..20 {
            let out = resample(&s, &cfg, seed);
            let mut xs: Vec<i64> = out.particles.iter().map(|p| p.pose.position.x as i64).collect();
            xs.sort();
            assert_eq!(xs, (0..n as i64).collect::<Vec<_>>());
        }
    }

    #[test]
    fn point_mass_resamples_to_copies() {
        let n = 64;
        let poses: Vec<Pose> = (0..n).map(|i| at(i as f64, 0.0, 0.0, 0.0)).collect();
        let mut w = vec![0.0; n];
        w[0] = 1.0;
        let out = resample(&state_from(&poses, &w), &config(n), 8);
        assert_eq!(out.len(), n);
        assert!(out.particles.iter().all(|p| p.pose.position.x == 0.0));
        assert!(out.particles.iter().all(|p| p.weight == 1.0 / n as f64));
    }

    #[test]
    fn recovery_counts() {
        let cfg = config(1000);
        let s = init_uniform(&cfg, &Pose::identity(), Vector3::zeros(), 0.0, 9).unwrap();
        let bounds = Bounds::new(Vector3::repeat(10.0), Vector3::repeat(20.0));

        let healthy = FilterState { w_slow: 1.0, w_fast: 1.2, ..s.clone() };
        let (same, k) = recover_deprivation(&healthy, &cfg, &bounds, 1);
        assert_eq!((k, &same), (0, &healthy));
        let equal = FilterState { w_slow: 1.0, w_fast: 1.0, ..s.clone() };
        assert_eq!(recover_deprivation(&equal, &cfg, &bounds, 1).1, 0);

        let starved = FilterState { w_slow: 1.0, w_fast: 0.5, ..s.clone() };
        let (out, k) = recover_deprivation(&starved, &cfg, &bounds, 2);
        assert_eq!(k, 500);
        assert_eq!(out.len(), 1000);
        // Label tracking: the original cluster sits at the origin, outside the bounds.
        let moved = out.particles.iter().filter(|p| p.pose.position != Vector3::zeros()).count();
        assert_eq!(moved, 500);
        assert!(out
            .particles
            .iter()
            .filter(|p| p.pose.position != Vector3::zeros())
            .all(|p| bounds.contains(&p.pose.position)));
        let total: f64 = out.particles.iter().map(|p| p.weight).sum();
        assert_relative_eq!(total, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn estimate_cases() {
        let p = Pose::new(Vector3::new(1.0, 2.0, 3.0), 0.5, 0.0, 0.0);
        let e = estimate(&state_from(&[p; 5], &[0.2; 5]));
        assert!((e.pose.position - p.position).amax() < 1e-12);
        assert_relative_eq!(e.pose.yaw, 0.5, epsilon = 1e-12);
        assert!(e.position_covariance.amax() < 1e-24);
        assert!(e.yaw_circular_variance < 1e-12);

        let e = estimate(&state_from(&[at(0.0, 0.0, 0.0, PI / 2.0), at(0.0, 0.0, 0.0, -PI / 2.0)], &[0.5, 0.5]));
        assert_eq!(e.pose.yaw, 0.0);
        assert_relative_eq!(e.yaw_circular_variance, 1.0, epsilon = 1e-12);

        // Mean wraps correctly across ±π.
        let e = estimate(&state_from(&[at(0.0, 0.0, 0.0, PI - 0.1), at(0.0, 0.0, 0.0, -PI + 0.1)], &[0.5, 0.5]));
        assert_relative_eq!(e.pose.yaw.abs(), PI, epsilon = 1e-12);
    }

    #[test]
    fn estimate_of_uniform_box() {
        let n = 50_000;
        let center = Pose::new(Vector3::new(-1.0, 4.0, 2.0), 0.0, 0.0, 0.0);
        let s = init_uniform(&config(n), &center, Vector3::new(2.0, 3.0, 1.0), 0.0, 10).unwrap();
        let e = estimate(&s);
        for (i, ext) in [2.0, 3.0, 1.0].iter().enumerate() {
            let sd = ext / 12f64.sqrt();
            assert!((e.pose.position[i] - center.position[i]).abs() <= 3.0 * sd / (n as f64).sqrt());
            assert_relative_eq!(e.position_covariance[(i, i)], ext * ext / 12.0, max_relative = 0.03);
        }
    }
}
