use std::path::PathBuf;

use anyhow::{anyhow, Context};
use gmm_mcl::evaluation::{self, BenchRow};
use gmm_mcl::gmm_map::GmmMap;
use gmm_mcl::particle_filter::FilterConfig;
use gmm_mcl::projection::Pose;
use gmm_mcl::rng;
use nalgebra::Vector3;
use rand::Rng as _;

use super::common::{self, Sequence, DEPTH_NOISE_STREAM};
use crate::config::Config;
use crate::CliError;

const POSE_STREAM: u64 = 6;

pub struct Plan {
    workers: Option<usize>,
    seed: u64,
    map: PathBuf,
    sequence: Sequence,
    frame: usize,
    config: FilterConfig,
    particle_counts: Vec<usize>,
    steps: usize,
    poses: usize,
    dispersion: f64,
    repeats: usize,
    out: PathBuf,
}

pub fn plan(cfg: &Config) -> Result<Plan, CliError> {
    let seed: u64 = cfg.require("seed")?;
    let workers = common::workers(Some(cfg))?;
    let map = cfg.require_existing_path("map")?;
    let sequence = Sequence::from_config(cfg)?;
    let frame: usize = cfg.or("bench.frame", 0)?;
    if frame >= sequence.len() {
        return Err(crate::usage(format!("bench.frame {frame} out of range for {} frames", sequence.len())));
    }
    let config = common::filter_config(cfg)?;
    let particle_counts: Vec<usize> = cfg.list("bench.particles")?.unwrap_or_else(|| vec![128, 512, 1068, 4096]);
    let steps: usize = cfg.or("bench.steps", 100)?;
    let poses: usize = cfg.or("bench.poses", 20)?;
    let dispersion: f64 = cfg.or("bench.dispersion", 0.5)?;
    let repeats: usize = cfg.or("bench.repeats", 5)?;
    if particle_counts.is_empty()
        || particle_counts.contains(&0)
        || steps == 0
        || poses == 0
        || repeats == 0
        || !(dispersion >= 0.0)
    {
        return Err(crate::usage("bench counts must be positive and bench.dispersion non-negative"));
    }
    let out = cfg.output_path("out.csv")?;
    cfg.finish()?;
    Ok(Plan { workers, seed, map, sequence, frame, config, particle_counts, steps, poses, dispersion, repeats, out })
}

pub fn execute(plan: Plan) -> Result<(), CliError> {
    common::init_pool(plan.workers)?;
    let map = GmmMap::read_file(&plan.map).with_context(|| format!("cannot load {}", plan.map.display()))?;
    let scan = plan
        .sequence
        .scan(plan.frame, rng::derive_seed(plan.seed, DEPTH_NOISE_STREAM))
        .map_err(|e| anyhow!("frame {}: {e}", plan.frame))?;
    let pose = plan.sequence.reference().samples()[plan.frame].pose;

    let rows = evaluation::bench(&map, &scan, &pose, &plan.config, &plan.particle_counts, plan.steps, plan.seed)
        .context("benchmark failed")?;
    let mut w = csv::Writer::from_path(&plan.out).with_context(|| format!("cannot create {}", plan.out.display()))?;
    w.write_record(BenchRow::CSV_HEADER).context("writing bench")?;
    println!(
        "{:>8} {:>12} {:>12} {:>12} {:>12} {:>12} {:>10}",
        "N", "propagate", "membership", "likelihood", "resample", "total", "steps/s"
    );
    for r in &rows {
        w.write_record([
            r.n_particles.to_string(),
            r.steps.to_string(),
            r.propagate_ms.to_string(),
            r.membership_ms.to_string(),
            r.likelihood_ms.to_string(),
            r.resample_ms.to_string(),
            r.total_ms.to_string(),
            r.steps_per_sec.to_string(),
        ])
        .context("writing bench")?;
        println!(
            "{:>8} {:>12.3} {:>12.3} {:>12.3} {:>12.3} {:>12.3} {:>10.2}",
            r.n_particles, r.propagate_ms, r.membership_ms, r.likelihood_ms, r.resample_ms, r.total_ms, r.steps_per_sec
        );
    }
    w.flush().context("writing bench")?;

    let mut rng = rng::seeded(rng::derive_seed(plan.seed, POSE_STREAM));
    let d = plan.dispersion;
    let poses: Vec<Pose> = (0..plan.poses)
        .map(|_| {
            let offset = Vector3::from_fn(|_, _| rng.random_range(-d..=d));
            Pose::new(pose.position + offset, pose.yaw + rng.random_range(-d..=d), pose.pitch, pose.roll)
        })
        .collect();
    let t = evaluation::time_likelihoods(&map, &scan, &poses, plan.config.stride, plan.config.patch_size, plan.repeats)
        .context("likelihood timing failed")?;
    println!(
        "likelihood evaluations {} approx_ms {:.3} full_ms {:.3} approx_faster {}/{}",
        t.evaluations, t.approx_ms, t.full_ms, t.approx_wins, t.evaluations
    );
    Ok(())
}
