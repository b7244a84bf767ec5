//! Accuracy, consistency and timing metrics.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::gmm_map::GmmMap;
use crate::likelihood::{DepthImage, LikelihoodError, ScanPoints, Scorer};
use crate::particle_filter::{self, Bounds, Estimate, FilterConfig, FilterError, FilterState};
use crate::projection::Pose;
use crate::rng;
use crate::sim::Trajectory;

/// Eigenvalue floor for fitted covariances (m²).
pub const COVARIANCE_EPSILON: f64 = 1e-9;
/// Largest timestamp gap accepted when pairing estimate and truth samples (s).
pub const ALIGN_TOLERANCE: f64 = 0.02;
/// Position covariance trace below which a filter counts as converged (m²).
pub const CONVERGENCE_TRACE: f64 = 0.05;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need at least 4 particles, found {0}")]
    TooFewParticles(usize),
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("covariance is not positive definite")]
    SingularCovariance,
    #[error("no estimate lies within {ALIGN_TOLERANCE} s of a ground-truth sample")]
    NoOverlap,
    #[error("reference run never converged")]
    ReferenceDiverged,
    #[error("reference run failed: {0}")]
    ReferenceFailed(String),
    #[error(transparent)]
    Filter(#[from] FilterError),
}

/// Gaussian summary of a particle set.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianFit {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    /// Set when the covariance had to be replaced by `εI` (all samples identical).
    pub degenerate: bool,
}

impl GaussianFit {
    /// Symmetrizes `covariance` and clamps its eigenvalues to at least
    /// [`COVARIANCE_EPSILON`].
    pub fn from_moments(mean: DVector<f64>, covariance: DMatrix<f64>) -> Self {
        let k = mean.len();
        let sym = (&covariance + covariance.transpose()) * 0.5;
        let eig = sym.clone().symmetric_eigen();
        let max = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
        if !(max > COVARIANCE_EPSILON) {
            return Self { mean, covariance: DMatrix::identity(k, k) * COVARIANCE_EPSILON, degenerate: true };
        }
        let covariance = if eig.eigenvalues.iter().all(|l| *l >= COVARIANCE_EPSILON) {
            sym
        } else {
            let clamped = eig.eigenvalues.map(|l| l.max(COVARIANCE_EPSILON));
            &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose()
        };
        Self { mean, covariance, degenerate: false }
    }

    /// Position marginal of a filter estimate.
    pub fn from_estimate(estimate: &Estimate) -> Self {
        let mean = DVector::from_column_slice(estimate.pose.position.as_slice());
        let cov = DMatrix::from_column_slice(3, 3, estimate.position_covariance.as_slice());
        Self::from_moments(mean, cov)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Weighted mean and covariance of particle positions.
pub fn fit_gaussian(state: &FilterState) -> Result<GaussianFit, EvalError> {
    let n = state.particles.len();
    if n < 4 {
        return Err(EvalError::TooFewParticles(n));
    }
    let total: f64 = state.particles.iter().map(|p| p.weight).sum();
    let mean: Vector3<f64> = state.particles.iter().map(|p| p.pose.position * p.weight).sum::<Vector3<f64>>() / total;
    let mut cov = nalgebra::Matrix3::zeros();
    for p in &state.particles {
        let d = p.pose.position - mean;
        cov += d * d.transpose() * (p.weight / total);
    }
    Ok(GaussianFit::from_moments(
        DVector::from_column_slice(mean.as_slice()),
        DMatrix::from_column_slice(3, 3, cov.as_slice()),
    ))
}

/// KL(p ‖ q) in nats for two Gaussians of equal dimension.
pub fn kl_gaussian(p: &GaussianFit, q: &GaussianFit) -> Result<f64, EvalError> {
    let k = p.dim();
    if q.dim() != k {
        return Err(EvalError::DimensionMismatch(k, q.dim()));
    }
    let lq = q.covariance.clone().cholesky().ok_or(EvalError::SingularCovariance)?;
    let lp = p.covariance.clone().cholesky().ok_or(EvalError::SingularCovariance)?;
    let log_det =
        |l: &nalgebra::Cholesky<f64, nalgebra::Dyn>| 2.0 * l.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let trace = lq.solve(&p.covariance).trace();
    let diff = &q.mean - &p.mean;
    let maha = diff.dot(&lq.solve(&diff));
    let kl = 0.5 * (trace + maha - k as f64 + log_det(&lq) - log_det(&lp));
    Ok(kl.max(0.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RmseReport {
    pub rmse: f64,
    /// (estimate timestamp, position error) for every aligned sample.
    pub per_step: Vec<(f64, f64)>,
}

/// Position RMSE after pairing each estimate with the nearest truth sample
/// within [`ALIGN_TOLERANCE`]; unpaired estimates are skipped.
pub fn rmse(estimates: &Trajectory, truth: &Trajectory) -> Result<RmseReport, EvalError> {
    let ts: Vec<f64> = truth.samples().iter().map(|s| s.timestamp).collect();
    let mut per_step = Vec::new();
    for s in estimates.samples() {
        let i = ts.partition_point(|t| *t < s.timestamp);
        let nearest = [i.checked_sub(1), (i < ts.len()).then_some(i)]
            .into_iter()
            .flatten()
            .min_by(|a, b| (ts[*a] - s.timestamp).abs().total_cmp(&(ts[*b] - s.timestamp).abs()));
        if let Some(j) = nearest.filter(|j| (ts[*j] - s.timestamp).abs() <= ALIGN_TOLERANCE) {
            per_step.push((s.timestamp, (s.pose.position - truth.samples()[j].pose.position).norm()));
        }
    }
    if per_step.is_empty() {
        return Err(EvalError::NoOverlap);
    }
    let rmse = (per_step.iter().map(|(_, e)| e * e).sum::<f64>() / per_step.len() as f64).sqrt();
    Ok(RmseReport { rmse, per_step })
}

/// Grid and reference of a KL sensitivity sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSettings {
    pub particle_counts: Vec<usize>,
    /// Map sizes to sweep; empty means "reference size only".
    pub component_counts: Vec<usize>,
    pub reference_particles: usize,
    pub reference_components: usize,
    pub trials: usize,
    pub seed: u64,
    pub convergence_trace: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub n_particles: usize,
    pub n_components: usize,
    pub trials: usize,
    /// Post-convergence steps compared per trial.
    pub matched_steps: usize,
    pub mean_kl: f64,
    /// Sample variance across trials of each trial's mean KL.
    pub var_kl: f64,
    pub log_var_kl: f64,
    /// Reason the setting was skipped, if any.
    pub skipped: Option<String>,
}

impl SweepRow {
    pub const CSV_HEADER: [&'static str; 8] =
        ["n_particles", "n_components", "trials", "matched_steps", "mean_kl", "var_kl", "log_var_kl", "skipped"];
}

/// Seed of trial `t`; trial 0 shares the reference run's seed.
pub fn trial_seed(seed: u64, trial: usize) -> u64 {
    rng::derive_seed(seed, trial as u64)
}

/// First step whose position-covariance trace is below `gate`.
pub fn convergence_step(fits: &[GaussianFit], gate: f64) -> Option<usize> {
    fits.iter().position(|f| f.covariance.trace() < gate)
}

/// KL variance of reduced filters against a reference filter.
///
/// `run(n_particles, n_components, seed)` executes one filter over a fixed
/// sequence and returns a per-step position fit. The reference runs once with
/// `trial_seed(seed, 0)`; each setting runs `trials` times with
/// `trial_seed(seed, t)`. Each trial is scored by its mean KL(reference ‖ trial)
/// over the steps from the reference's convergence onward.
pub fn sensitivity_sweep<F, E>(settings: &SweepSettings, run: F) -> Result<Vec<SweepRow>, EvalError>
where
    F: Fn(usize, usize, u64) -> Result<Vec<GaussianFit>, E> + Sync,
    E: std::fmt::Display,
{
    let reference = run(settings.reference_particles, settings.reference_components, trial_seed(settings.seed, 0))
        .map_err(|e| EvalError::ReferenceFailed(e.to_string()))?;
    let start = convergence_step(&reference, settings.convergence_trace).ok_or(EvalError::ReferenceDiverged)?;
    let components = if settings.component_counts.is_empty() {
        vec![settings.reference_components]
    } else {
        settings.component_counts.clone()
    };
    let mut rows = Vec::new();
    for &m in &components {
        for &n in &settings.particle_counts {
            let scores: Vec<Result<f64, String>> = (0..settings.trials)
                .into_par_iter()
                .map(|t| {
                    let fits = run(n, m, trial_seed(settings.seed, t)).map_err(|e| e.to_string())?;
                    if fits.len() != reference.len() {
                        return Err(format!("trial produced {} steps, reference {}", fits.len(), reference.len()));
                    }
                    let mut sum = 0.0;
                    for k in start..fits.len() {
                        sum += kl_gaussian(&reference[k], &fits[k]).map_err(|e| e.to_string())?;
                    }
                    Ok(sum / (fits.len() - start).max(1) as f64)
                })
                .collect();
            let mut row = SweepRow {
                n_particles: n,
                n_components: m,
                trials: settings.trials,
                matched_steps: reference.len() - start,
                mean_kl: f64::NAN,
                var_kl: f64::NAN,
                log_var_kl: f64::NAN,
                skipped: None,
            };
            match scores.into_iter().collect::<Result<Vec<f64>, String>>() {
                Ok(kls) if !kls.is_empty() => {
                    let mean = kls.iter().sum::<f64>() / kls.len() as f64;
                    let var = if kls.len() > 1 {
                        kls.iter().map(|k| (k - mean).powi(2)).sum::<f64>() / (kls.len() - 1) as f64
                    } else {
                        0.0
                    };
                    row.mean_kl = mean;
                    row.var_kl = var;
                    row.log_var_kl = var.ln();
                }
                Ok(_) => row.skipped = Some("no trials".into()),
                Err(e) => row.skipped = Some(e),
            }
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Mean per-step wall time of each filter stage (milliseconds).
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub n_particles: usize,
    pub steps: usize,
    pub propagate_ms: f64,
    pub membership_ms: f64,
    pub likelihood_ms: f64,
    /// Weight normalization, deprivation recovery and resampling.
    pub resample_ms: f64,
    pub total_ms: f64,
    pub steps_per_sec: f64,
}

impl BenchRow {
    pub const CSV_HEADER: [&'static str; 8] = [
        "n_particles",
        "steps",
        "propagate_ms",
        "membership_ms",
        "likelihood_ms",
        "resample_ms",
        "total_ms",
        "steps_per_sec",
    ];
}

/// Times `steps` filter iterations on a fixed scan for each particle count.
///
/// Stages run on the calling thread so their times are separable; particles
/// start in a 0.2 m box around `pose`.
pub fn bench(
    map: &GmmMap,
    scan: &DepthImage,
    pose: &Pose,
    config: &FilterConfig,
    particle_counts: &[usize],
    steps: usize,
    seed: u64,
) -> Result<Vec<BenchRow>, FilterError> {
    let points = ScanPoints::new(scan, config.stride, config.patch_size)?;
    let bounds = Bounds::centered(pose.position, Vector3::repeat(2.0));
    let delta = particle_filter::OdometryDelta::zero(pose.pitch, pose.roll);
    let mut rows = Vec::new();
    for &n in particle_counts {
        let config = FilterConfig { n_particles: n, n_groups: config.n_groups.min(n), ..*config };
        let mut state = particle_filter::init_uniform(&config, pose, Vector3::repeat(0.2), 0.1, seed)?;
        let mut scorer = Scorer::new(*scan.intrinsics(), config.patch_size);
        let (mut prop, mut memb, mut like, mut res, mut total) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for k in 0..steps {
            let step_seed = rng::derive_seed(seed, k as u64 + 1);
            let t0 = Instant::now();
            let propagated = particle_filter::propagate(&state, &delta, &config, rng::derive_seed(step_seed, 1));
            let t1 = Instant::now();
            let mut nll = Vec::with_capacity(n);
            let mut seen = false;
            for p in &propagated.particles {
                let a = Instant::now();
                seen |= scorer.memberships(map, &p.pose).total_memberships() > 0;
                let b = Instant::now();
                nll.push(points.nll_approx(map, &p.pose, scorer.table())?);
                let c = Instant::now();
                memb += (b - a).as_secs_f64();
                like += (c - b).as_secs_f64();
            }
            let t2 = Instant::now();
            let weighted = particle_filter::weights_from_nll(&propagated, &nll, &config, seen && !points.is_empty());
            let (recovered, _) =
                particle_filter::recover_deprivation(&weighted.state, &config, &bounds, rng::derive_seed(step_seed, 2));
            state = particle_filter::resample(&recovered, &config, rng::derive_seed(step_seed, 3));
            let t3 = Instant::now();
            prop += (t1 - t0).as_secs_f64();
            res += (t3 - t2).as_secs_f64();
            total += (t3 - t0).as_secs_f64();
        }
        let per = |s: f64| 1e3 * s / steps.max(1) as f64;
        rows.push(BenchRow {
            n_particles: n,
            steps,
            propagate_ms: per(prop),
            membership_ms: per(memb),
            likelihood_ms: per(like),
            resample_ms: per(res),
            total_ms: per(total),
            steps_per_sec: if total > 0.0 { steps as f64 / total } else { f64::INFINITY },
        });
    }
    Ok(rows)
}

/// Paired wall-time comparison of approximate (memberships included) and full
/// scan likelihood evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LikelihoodTiming {
    pub evaluations: usize,
    pub approx_ms: f64,
    pub full_ms: f64,
    /// Pairs in which the approximate evaluation was faster.
    pub approx_wins: usize,
}

/// Alternates approximate and full evaluation at each pose, `repeats` times.
pub fn time_likelihoods(
    map: &GmmMap,
    scan: &DepthImage,
    poses: &[Pose],
    stride: usize,
    patch_size: usize,
    repeats: usize,
) -> Result<LikelihoodTiming, LikelihoodError> {
    let points = ScanPoints::new(scan, stride, patch_size)?;
    let mut scorer = Scorer::new(*scan.intrinsics(), patch_size);
    let (mut approx, mut full, mut wins, mut count) = (0.0, 0.0, 0, 0);
    let mut sink = 0.0;
    for r in 0..repeats {
        for pose in poses {
            // Alternate order so cache warm-up does not favor either side.
            let (a, f) = if (r + count) % 2 == 0 {
                let t0 = Instant::now();
                sink += scorer.nll(&points, map, pose)?;
                let t1 = Instant::now();
                sink += points.nll_full(map, pose);
                (t1 - t0, t1.elapsed())
            } else {
                let t0 = Instant::now();
                sink += points.nll_full(map, pose);
                let t1 = Instant::now();
                sink += scorer.nll(&points, map, pose)?;
                (t1.elapsed(), t1 - t0)
            };
            approx += a.as_secs_f64();
            full += f.as_secs_f64();
            wins += usize::from(a < f);
            count += 1;
        }
    }
    std::hint::black_box(sink);
    Ok(LikelihoodTiming { evaluations: count, approx_ms: 1e3 * approx, full_ms: 1e3 * full, approx_wins: wins })
}
