//! Config readers shared by several commands.

use std::f64::consts::PI;
use std::path::PathBuf;

use anyhow::Context;
use gmm_mcl::datasets::{self, SequenceManifest};
use gmm_mcl::evaluation::ALIGN_TOLERANCE;
use gmm_mcl::likelihood::DepthImage;
use gmm_mcl::particle_filter::{Bounds, FilterConfig, OdometryDelta};
use gmm_mcl::projection::{CameraIntrinsics, Pose};
use gmm_mcl::rng;
use gmm_mcl::runner::{Frame, RunSetup};
use gmm_mcl::sim::{self, Scene, TimedPose, Trajectory};
use nalgebra::Vector3;

use crate::config::{Config, ConfigError};
use crate::{CliError, WORKERS_ENV};

/// Seed streams derived from a command's `seed`.
pub const FILTER_STREAM: u64 = 0;
pub const ODOMETRY_STREAM: u64 = 1;
pub const DEPTH_NOISE_STREAM: u64 = 2;

/// Worker count: `GMM_MCL_WORKERS` beats the `workers` key; `None` means the
/// rayon default (hardware parallelism).
pub fn workers(cfg: Option<&Config>) -> Result<Option<usize>, ConfigError> {
    let from_key = match cfg {
        Some(c) => c.get::<usize>("workers")?,
        None => None,
    };
    let n = match std::env::var(WORKERS_ENV) {
        Ok(v) => Some(v.trim().parse::<usize>().map_err(|e| ConfigError::Invalid {
            key: WORKERS_ENV.into(),
            value: v.clone(),
            message: e.to_string(),
        })?),
        Err(_) => from_key,
    };
    if n == Some(0) {
        return Err(ConfigError::Other("worker count must be at least 1".into()));
    }
    Ok(n)
}

/// Configures the global thread pool. Called once, after validation.
pub fn init_pool(workers: Option<usize>) -> Result<(), CliError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers {
        builder = builder.num_threads(n);
    }
    builder.build_global().context("cannot start worker pool")?;
    Ok(())
}

pub fn filter_config(cfg: &Config) -> Result<FilterConfig, ConfigError> {
    let d = FilterConfig::default();
    let c = FilterConfig {
        n_particles: cfg.or("filter.particles", d.n_particles)?,
        sigma_translation: cfg.or("filter.sigma_translation", d.sigma_translation)?,
        sigma_yaw: cfg.or("filter.sigma_yaw", d.sigma_yaw)?,
        alpha_slow: cfg.or("filter.alpha_slow", d.alpha_slow)?,
        alpha_fast: cfg.or("filter.alpha_fast", d.alpha_fast)?,
        n_groups: cfg.or("filter.groups", d.n_groups)?,
        patch_size: cfg.or("filter.patch_size", d.patch_size)?,
        stride: cfg.or("filter.stride", d.stride)?,
        ess_threshold: cfg.get("filter.ess_threshold")?,
    };
    c.validate().map_err(|e| ConfigError::Other(e.to_string()))?;
    Ok(c)
}

pub fn camera(cfg: &Config) -> Result<CameraIntrinsics, ConfigError> {
    let w: usize = cfg.or("camera.width", 160)?;
    let h: usize = cfg.or("camera.height", 120)?;
    let hfov: f64 = cfg.or("camera.hfov", PI / 2.0)?;
    CameraIntrinsics::from_fov(w, h, hfov).map_err(|e| ConfigError::Other(format!("camera: {e}")))
}

/// Where frames come from.
pub enum Sequence {
    /// Depth images on disk; `reference` holds the odometry-source poses at
    /// each frame timestamp and `truth` the ground truth, when present.
    Manifest { manifest: SequenceManifest, reference: Trajectory, truth: Option<Trajectory> },
    /// Scans rendered from a primitive scene along a ground-truth trajectory.
    Scene { scene: Scene, truth: Trajectory, intrinsics: CameraIntrinsics, max_range: f64, depth_noise: f64 },
}

impl Sequence {
    /// Reads `manifest` (optionally with `odometry`) or `scene` + `trajectory`.
    pub fn from_config(cfg: &Config) -> Result<Self, ConfigError> {
        let manifest = cfg.existing_path("manifest")?;
        let scene = cfg.existing_path("scene")?;
        match (manifest, scene) {
            (Some(_), Some(_)) => Err(ConfigError::Other("set either `manifest` or `scene`, not both".into())),
            (None, None) => Err(ConfigError::Other("one of `manifest` or `scene` is required".into())),
            (Some(path), None) => {
                let manifest = SequenceManifest::read(&path).map_err(|e| ConfigError::Other(e.to_string()))?;
                let truth_path = manifest.groundtruth.clone();
                let odometry_path = cfg.existing_path("odometry")?.or_else(|| truth_path.clone()).ok_or_else(|| {
                    ConfigError::Other("manifest has no `# groundtruth:` header and no `odometry` key is set".into())
                })?;
                let stamps: Vec<f64> = manifest.frames.iter().map(|(t, _)| *t).collect();
                let reference = associate(&read_traj(&odometry_path)?, &stamps)
                    .map_err(|m| ConfigError::Other(format!("{}: {m}", odometry_path.display())))?;
                let truth = match truth_path {
                    Some(p) => Some(read_traj(&p)?),
                    None => None,
                };
                Ok(Sequence::Manifest { manifest, reference, truth })
            }
            (None, Some(path)) => {
                let scene =
                    Scene::read_file(&path).map_err(|e| ConfigError::Other(format!("{}: {e}", path.display())))?;
                let truth = read_traj(&cfg.require_existing_path("trajectory")?)?;
                let max_range: f64 = cfg.or("max_range", 10.0)?;
                let depth_noise: f64 = cfg.or("depth_noise", 0.0)?;
                if !(max_range > 0.0) || !(depth_noise >= 0.0) {
                    return Err(ConfigError::Other("need max_range > 0 and depth_noise >= 0".into()));
                }
                Ok(Sequence::Scene { scene, truth, intrinsics: camera(cfg)?, max_range, depth_noise })
            }
        }
    }

    pub fn len(&self) -> usize {
        self.reference().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Poses the odometry is derived from, one per frame.
    pub fn reference(&self) -> &Trajectory {
        match self {
            Sequence::Manifest { reference, .. } => reference,
            Sequence::Scene { truth, .. } => truth,
        }
    }

    pub fn truth(&self) -> Option<&Trajectory> {
        match self {
            Sequence::Manifest { truth, .. } => truth.as_ref(),
            Sequence::Scene { truth, .. } => Some(truth),
        }
    }

    /// Scan of frame `k`; rendered scans get seeded depth noise.
    pub fn scan(&self, k: usize, noise_seed: u64) -> Result<DepthImage, String> {
        match self {
            Sequence::Manifest { manifest, .. } => manifest.load_frame(k).map_err(|e| e.to_string()),
            Sequence::Scene { scene, truth, intrinsics, max_range, depth_noise } => {
                let mut img = sim::render_depth(scene, &truth.samples()[k].pose, intrinsics, *max_range);
                sim::add_depth_noise(&mut img, *depth_noise, rng::derive_seed(noise_seed, k as u64));
                Ok(img)
            }
        }
    }

    /// Filter inputs: noisy odometry between reference poses plus the scans.
    /// Recorded frames are decoded one ahead on a helper thread.
    pub fn frames<'a>(
        &'a self,
        deltas: &'a [OdometryDelta],
        noise_seed: u64,
    ) -> Box<dyn Iterator<Item = Result<Frame, String>> + 'a> {
        let samples = self.reference().samples();
        let delta = move |k: usize| {
            if k == 0 {
                OdometryDelta::zero(samples[0].pose.pitch, samples[0].pose.roll)
            } else {
                deltas[k - 1]
            }
        };
        match self {
            Sequence::Manifest { manifest, .. } => {
                Box::new(manifest.prefetch().enumerate().map(move |(k, (timestamp, scan))| {
                    Ok(Frame { timestamp, delta: delta(k), scan: scan.map_err(|e| e.to_string())? })
                }))
            }
            Sequence::Scene { .. } => Box::new((0..samples.len()).map(move |k| {
                Ok(Frame { timestamp: samples[k].timestamp, delta: delta(k), scan: self.scan(k, noise_seed)? })
            })),
        }
    }
}

fn read_traj(path: &PathBuf) -> Result<Trajectory, ConfigError> {
    datasets::read_trajectory(path).map_err(|e| ConfigError::Other(e.to_string()))
}

/// Nearest-timestamp association of `traj` to `stamps` within the alignment tolerance.
pub fn associate(traj: &Trajectory, stamps: &[f64]) -> Result<Trajectory, String> {
    let s = traj.samples();
    let mut out = Vec::with_capacity(stamps.len());
    for &t in stamps {
        let i = s.partition_point(|p| p.timestamp < t);
        let best = [i.checked_sub(1), (i < s.len()).then_some(i)]
            .into_iter()
            .flatten()
            .min_by(|&a, &b| (s[a].timestamp - t).abs().total_cmp(&(s[b].timestamp - t).abs()))
            .filter(|&j| (s[j].timestamp - t).abs() <= ALIGN_TOLERANCE)
            .ok_or_else(|| format!("no pose within {ALIGN_TOLERANCE} s of frame time {t}"))?;
        out.push(TimedPose { timestamp: t, pose: s[best].pose });
    }
    Trajectory::new(out).map_err(|e| e.to_string())
}

/// Noise settings applied to reference deltas.
pub fn odometry_noise(cfg: &Config) -> Result<(f64, f64), ConfigError> {
    let d = FilterConfig::default();
    let t: f64 = cfg.or("odometry.sigma_translation", d.sigma_translation)?;
    let y: f64 = cfg.or("odometry.sigma_yaw", d.sigma_yaw)?;
    if !(t >= 0.0 && y >= 0.0) {
        return Err(ConfigError::Other("odometry noise must be non-negative".into()));
    }
    Ok((t, y))
}

/// Initial box and recovery bounds. The box is centered on `init.center`
/// (`x y z yaw`) or, by default, on the first reference pose.
pub fn run_setup(cfg: &Config, config: FilterConfig, first: Option<&Pose>, seed: u64) -> Result<RunSetup, ConfigError> {
    let center = match cfg.list::<f64>("init.center")? {
        Some(v) if v.len() == 4 => {
            let (pitch, roll) = first.map(|p| (p.pitch, p.roll)).unwrap_or((0.0, 0.0));
            Pose::new(Vector3::new(v[0], v[1], v[2]), v[3], pitch, roll)
        }
        Some(_) => return Err(cfg.invalid("init.center", "expected `x y z yaw`")),
        None => *first.unwrap_or(&Pose::identity()),
    };
    let extent = cfg.vec3("init.extent")?.unwrap_or(Vector3::repeat(4.0));
    let yaw_range: f64 = cfg.or("init.yaw_range", PI)?;
    if extent.iter().any(|e| !(*e >= 0.0)) || !(0.0..=2.0 * PI).contains(&yaw_range) {
        return Err(ConfigError::Other("init.extent must be non-negative and init.yaw_range within [0, 2π]".into()));
    }
    let bounds = match (cfg.vec3("bounds.min")?, cfg.vec3("bounds.max")?) {
        (Some(lo), Some(hi)) => Bounds::new(lo, hi),
        (None, None) => Bounds::centered(center.position, extent),
        _ => return Err(ConfigError::Other("set both bounds.min and bounds.max, or neither".into())),
    };
    Ok(RunSetup { config, init_center: center, init_extent: extent, init_yaw_range: yaw_range, bounds, seed })
}
