use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;

use anyhow::Context;
use gmm_mcl::datasets::{self, SequenceManifest, DEFAULT_DEPTH_SCALE};
use gmm_mcl::projection::CameraIntrinsics;
use gmm_mcl::rng;
use gmm_mcl::sim::{self, presets, Scene, Trajectory, TrajectoryKind, TrajectoryParams};
use rayon::prelude::*;

use super::common::{self, DEPTH_NOISE_STREAM};
use crate::config::{Config, ConfigError};
use crate::CliError;

const CLOUD_STREAM: u64 = 3;
const JITTER_STREAM: u64 = 4;

pub struct Plan {
    workers: Option<usize>,
    verbosity: u8,
    seed: u64,
    scene: Scene,
    truth: Trajectory,
    intrinsics: CameraIntrinsics,
    max_range: f64,
    depth_noise: f64,
    depth_scale: f64,
    cloud_density: f64,
    cloud_jitter: f64,
    out_dir: PathBuf,
}

pub fn plan(cfg: &Config) -> Result<Plan, CliError> {
    let seed: u64 = cfg.require("seed")?;
    let workers = common::workers(Some(cfg))?;
    let verbosity: u8 = cfg.or("verbosity", 1)?;
    let scene = scene(cfg, seed)?;
    let truth = trajectory(cfg)?;
    let intrinsics = common::camera(cfg)?;
    let max_range: f64 = cfg.or("max_range", 10.0)?;
    let depth_noise: f64 = cfg.or("depth_noise", 0.0)?;
    let depth_scale: f64 = cfg.or("depth_scale", DEFAULT_DEPTH_SCALE)?;
    let cloud_density: f64 = cfg.or("cloud.density", 200.0)?;
    let cloud_jitter: f64 = cfg.or("cloud.jitter", 0.0)?;
    if !(max_range > 0.0 && depth_scale > 0.0 && cloud_density > 0.0) || !(depth_noise >= 0.0 && cloud_jitter >= 0.0) {
        return Err(crate::usage("need positive max_range, depth_scale, cloud.density and non-negative noise levels"));
    }
    if max_range * depth_scale > f64::from(u16::MAX) {
        return Err(crate::usage(format!("max_range {max_range} m does not fit 16-bit depth at scale {depth_scale}")));
    }
    let out_dir = cfg.path("out.dir").ok_or_else(|| ConfigError::Missing("out.dir".into()))?;
    if out_dir.exists() && !out_dir.is_dir() {
        return Err(crate::usage(format!("out.dir {} is not a directory", out_dir.display())));
    }
    cfg.finish()?;
    Ok(Plan {
        workers,
        verbosity,
        seed,
        scene,
        truth,
        intrinsics,
        max_range,
        depth_noise,
        depth_scale,
        cloud_density,
        cloud_jitter,
        out_dir,
    })
}

fn scene(cfg: &Config, seed: u64) -> Result<Scene, ConfigError> {
    if let Some(path) = cfg.existing_path("scene")? {
        return Scene::read_file(&path).map_err(|e| ConfigError::Other(format!("{}: {e}", path.display())));
    }
    let scene_seed: u64 = cfg.or("scene.seed", seed)?;
    let floor: f64 = cfg.or("scene.floor_z", 2.5)?;
    let preset: String = cfg.or("scene.preset", "corridor".to_string())?;
    let positive = |key: &str, v: f64| if v > 0.0 { Ok(v) } else { Err(cfg.invalid(key, "must be positive")) };
    match preset.as_str() {
        "corridor" => {
            let length = positive("scene.length", cfg.or("scene.length", 8.0)?)?;
            let width = positive("scene.width", cfg.or("scene.width", 3.0)?)?;
            let wall = positive("scene.wall_height", cfg.or("scene.wall_height", 1.7)?)?;
            Ok(presets::corridor(length, width, floor, wall, scene_seed))
        }
        "room" => {
            let side = positive("scene.side", cfg.or("scene.side", 6.0)?)?;
            Ok(presets::room(side, floor, scene_seed))
        }
        _ => Err(cfg.invalid("scene.preset", "expected `corridor` or `room`")),
    }
}

fn trajectory(cfg: &Config) -> Result<Trajectory, ConfigError> {
    let d = TrajectoryParams::default();
    let params = TrajectoryParams {
        speed: cfg.or("trajectory.speed", d.speed)?,
        steps: cfg.or("trajectory.steps", d.steps)?,
        pitch: cfg.or("trajectory.pitch", d.pitch)?,
        roll: cfg.or("trajectory.roll", d.roll)?,
        attitude_sway: cfg.or("trajectory.sway", d.attitude_sway)?,
    };
    let rate: f64 = cfg.or("trajectory.rate", 10.0)?;
    let need = |key: &str| cfg.vec3(key)?.ok_or_else(|| ConfigError::Missing(key.into()));
    let kind: String = cfg.or("trajectory.kind", "corridor".to_string())?;
    let kind = match kind.as_str() {
        "orbit" => {
            TrajectoryKind::Orbit { center: need("trajectory.center")?, radius: cfg.require("trajectory.radius")? }
        }
        "corridor" => TrajectoryKind::Corridor { start: need("trajectory.start")?, end: need("trajectory.end")? },
        "figure8" => TrajectoryKind::FigureEight {
            center: need("trajectory.center")?,
            half_width: cfg.require("trajectory.half_width")?,
        },
        _ => return Err(cfg.invalid("trajectory.kind", "expected `orbit`, `corridor` or `figure8`")),
    };
    sim::generate_trajectory(kind, &params, rate).map_err(|e| ConfigError::Other(format!("trajectory: {e}")))
}

pub fn execute(plan: Plan) -> Result<(), CliError> {
    common::init_pool(plan.workers)?;
    let dir = &plan.out_dir;
    let depth_dir = dir.join("depth");
    std::fs::create_dir_all(&depth_dir).with_context(|| format!("cannot create {}", depth_dir.display()))?;

    std::fs::write(dir.join("scene.txt"), plan.scene.to_string()).context("writing scene")?;
    let gt_path = dir.join("groundtruth.txt");
    datasets::write_trajectory(&plan.truth, &gt_path).context("writing ground truth")?;

    let noise_seed = rng::derive_seed(plan.seed, DEPTH_NOISE_STREAM);
    let frames: Vec<(f64, PathBuf)> = plan
        .truth
        .samples()
        .par_iter()
        .enumerate()
        .map(|(k, s)| {
            let mut img = sim::render_depth(&plan.scene, &s.pose, &plan.intrinsics, plan.max_range);
            sim::add_depth_noise(&mut img, plan.depth_noise, rng::derive_seed(noise_seed, k as u64));
            let path = depth_dir.join(format!("{k:06}.png"));
            datasets::write_depth_image(&img, &path, plan.depth_scale)?;
            Ok((s.timestamp, path))
        })
        .collect::<Result<_, datasets::DatasetError>>()
        .context("writing depth images")?;
    let manifest =
        SequenceManifest::new(frames, Some(gt_path), plan.depth_scale, plan.intrinsics).context("building manifest")?;
    manifest.write(dir.join("manifest.txt")).context("writing manifest")?;

    let cloud = sim::scene_to_cloud(&plan.scene, plan.cloud_density, rng::derive_seed(plan.seed, CLOUD_STREAM));
    let cloud = sim::jitter_cloud(&cloud, plan.cloud_jitter, rng::derive_seed(plan.seed, JITTER_STREAM));
    let cloud_path = dir.join("cloud.xyz");
    let file = File::create(&cloud_path).with_context(|| format!("cannot create {}", cloud_path.display()))?;
    cloud.write_xyz(BufWriter::new(file)).context("writing cloud")?;

    if plan.verbosity >= 1 {
        println!("frames {}", plan.truth.len());
        println!("cloud points {}", cloud.len());
        println!("output {}", dir.display());
    }
    Ok(())
}
