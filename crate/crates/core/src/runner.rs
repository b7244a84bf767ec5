//! Drives the filter over a sequence of (odometry, scan) frames, either
//! replayed from disk or rendered from a synthetic scene.

use nalgebra::Vector3;
use rayon::prelude::*;
use thiserror::Error;

use crate::gmm_map::{fit_em, EmOptions, GmmMap, MapError};
use crate::likelihood::{DepthImage, ScanPoints};
use crate::particle_filter::{
    self, Bounds, Estimate, FilterConfig, FilterError, FilterState, OdometryDelta, StepOutput,
};
use crate::projection::{CameraIntrinsics, Pose};
use crate::rng;
use crate::sim::{self, Scene, Trajectory};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error("frame {index}: {message}")]
    Frame { index: usize, message: String },
}

/// One filter input. `delta` moves the previous frame's pose to this one; the
/// first frame's delta only carries attitude.
#[derive(Debug, Clone)]
pub struct Frame {
    pub timestamp: f64,
    pub delta: OdometryDelta,
    pub scan: DepthImage,
}

/// Initialization and recovery settings for one run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSetup {
    pub config: FilterConfig,
    pub init_center: Pose,
    /// Full side lengths of the initial position box.
    pub init_extent: Vector3<f64>,
    /// Full width of the initial yaw interval.
    pub init_yaw_range: f64,
    /// Region used for deprivation reinitialization.
    pub bounds: Bounds,
    pub seed: u64,
}

/// Per-step log line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub index: usize,
    pub timestamp: f64,
    pub estimate: Estimate,
    pub mean_nll: f64,
    pub min_nll: f64,
    pub ess: f64,
    pub n_modify: usize,
    pub degenerate: bool,
    pub resampled: bool,
}

const INIT_STREAM: u64 = 0;
const STEP_STREAM: u64 = 1;

/// Runs the filter over `frames`, calling `observe` after every step.
/// Stops at the first frame error; records up to that point are returned
/// through `observe`.
pub fn run_filter<I, E>(
    frames: I,
    map: &GmmMap,
    setup: &RunSetup,
    mut observe: impl FnMut(&StepRecord, &StepOutput),
) -> Result<Vec<StepRecord>, RunError>
where
    I: IntoIterator<Item = Result<Frame, E>>,
    E: std::fmt::Display,
{
    let config = &setup.config;
    let mut state = particle_filter::init_uniform(
        config,
        &setup.init_center,
        setup.init_extent,
        setup.init_yaw_range,
        rng::derive_seed(setup.seed, INIT_STREAM),
    )?;
    let step_seed = rng::derive_seed(setup.seed, STEP_STREAM);
    let mut records = Vec::new();
    for (index, frame) in frames.into_iter().enumerate() {
        let frame = frame.map_err(|e| RunError::Frame { index, message: e.to_string() })?;
        let points = ScanPoints::new(&frame.scan, config.stride, config.patch_size).map_err(FilterError::from)?;
        let out = particle_filter::step_with_points(
            &state,
            &frame.delta,
            &points,
            map,
            config,
            &setup.bounds,
            rng::derive_seed(step_seed, index as u64),
        )?;
        let record = StepRecord {
            index,
            timestamp: frame.timestamp,
            estimate: out.estimate,
            mean_nll: out.mean_nll(),
            min_nll: out.min_nll(),
            ess: out.ess,
            n_modify: out.n_modify,
            degenerate: out.degenerate,
            resampled: out.resampled,
        };
        observe(&record, &out);
        records.push(record);
        state = out.state;
    }
    Ok(records)
}

/// Final particle set is not needed by most callers; this variant keeps it.
pub fn run_filter_with_state<I, E>(
    frames: I,
    map: &GmmMap,
    setup: &RunSetup,
) -> Result<(Vec<StepRecord>, Option<FilterState>), RunError>
where
    I: IntoIterator<Item = Result<Frame, E>>,
    E: std::fmt::Display,
{
    let mut last = None;
    let records = run_filter(frames, map, setup, |_, out| last = Some(out.state.clone()))?;
    Ok((records, last))
}

/// Estimated trajectory from step records.
pub fn estimated_trajectory(records: &[StepRecord]) -> Trajectory {
    let samples = records.iter().map(|r| sim::TimedPose { timestamp: r.timestamp, pose: r.estimate.pose }).collect();
    Trajectory::new(samples).expect("frame timestamps increase")
}

/// Zips scans with odometry: frame 0 gets a zero delta carrying `first`'s attitude.
pub fn frames_from_parts<'a>(
    timestamps: impl IntoIterator<Item = f64> + 'a,
    scans: impl IntoIterator<Item = DepthImage> + 'a,
    first: &Pose,
    deltas: &'a [OdometryDelta],
) -> impl Iterator<Item = Frame> + 'a {
    let zero = OdometryDelta::zero(first.pitch, first.roll);
    timestamps.into_iter().zip(scans).enumerate().map(move |(k, (timestamp, scan))| Frame {
        timestamp,
        delta: if k == 0 { zero } else { deltas[k - 1] },
        scan,
    })
}

/// A synthetic world with a fitted map and pre-rendered ground-truth scans.
#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub scene: Scene,
    pub map: GmmMap,
    pub intrinsics: CameraIntrinsics,
    pub max_range: f64,
}

/// Map-building settings for a synthetic scene.
#[derive(Debug, Clone, Copy)]
pub struct MapSpec {
    pub components: usize,
    pub samples_per_m2: f64,
    /// Surface thickness added to sampled points (m).
    pub jitter: f64,
    pub em: EmOptions,
}

/// Samples the scene surface and fits an `components`-mixture to it.
pub fn fit_scene_map(scene: &Scene, spec: &MapSpec) -> Result<GmmMap, MapError> {
    let cloud = sim::scene_to_cloud(scene, spec.samples_per_m2, rng::derive_seed(spec.em.seed, 11));
    let cloud = sim::jitter_cloud(&cloud, spec.jitter, rng::derive_seed(spec.em.seed, 12));
    Ok(fit_em(&cloud, spec.components, spec.em)?.map)
}

impl SyntheticWorld {
    pub fn render(&self, pose: &Pose) -> DepthImage {
        sim::render_depth(&self.scene, pose, &self.intrinsics, self.max_range)
    }

    /// Renders one scan per pose (in parallel), optionally with depth noise.
    pub fn render_all(&self, truth: &Trajectory, depth_noise: f64, seed: u64) -> Vec<DepthImage> {
        truth
            .samples()
            .par_iter()
            .enumerate()
            .map(|(k, s)| {
                let mut img = self.render(&s.pose);
                sim::add_depth_noise(&mut img, depth_noise, rng::derive_seed(seed, k as u64));
                img
            })
            .collect()
    }
}

/// Root-mean-square position error between per-step estimates and truth poses
/// over `range` (indices into both).
pub fn window_rmse(records: &[StepRecord], truth: &Trajectory, range: std::ops::Range<usize>) -> f64 {
    let n = range.len().max(1) as f64;
    let sq: f64 =
        range.map(|k| (records[k].estimate.pose.position - truth.samples()[k].pose.position).norm_squared()).sum();
    (sq / n).sqrt()
}
