use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use anyhow::{anyhow, Context};
use gmm_mcl::datasets;
use gmm_mcl::evaluation;
use gmm_mcl::gmm_map::GmmMap;
use gmm_mcl::rng;
use gmm_mcl::runner::{self, RunSetup, StepRecord};
use gmm_mcl::sim::{self, TimedPose};

use super::common::{self, Sequence, DEPTH_NOISE_STREAM, FILTER_STREAM, ODOMETRY_STREAM};
use crate::config::Config;
use crate::CliError;

pub const METRICS_HEADER: [&str; 15] = [
    "index",
    "timestamp",
    "x",
    "y",
    "z",
    "yaw",
    "position_trace",
    "yaw_circular_variance",
    "mean_nll",
    "min_nll",
    "ess",
    "n_modify",
    "deprivation",
    "degenerate",
    "resampled",
];

pub struct Plan {
    workers: Option<usize>,
    verbosity: u8,
    seed: u64,
    map: PathBuf,
    sequence: Sequence,
    odometry_noise: (f64, f64),
    setup: RunSetup,
    trajectory_out: PathBuf,
    metrics_out: PathBuf,
}

pub fn plan(cfg: &Config) -> Result<Plan, CliError> {
    let seed: u64 = cfg.require("seed")?;
    let workers = common::workers(Some(cfg))?;
    let verbosity: u8 = cfg.or("verbosity", 1)?;
    let map = cfg.require_existing_path("map")?;
    let sequence = Sequence::from_config(cfg)?;
    let odometry_noise = common::odometry_noise(cfg)?;
    let filter = common::filter_config(cfg)?;
    let first = sequence.reference().samples().first().map(|s| s.pose);
    let setup = common::run_setup(cfg, filter, first.as_ref(), rng::derive_seed(seed, FILTER_STREAM))?;
    let trajectory_out = cfg.output_path("out.trajectory")?;
    let metrics_out = cfg.output_path("out.metrics")?;
    cfg.finish()?;
    Ok(Plan { workers, verbosity, seed, map, sequence, odometry_noise, setup, trajectory_out, metrics_out })
}

pub fn execute(plan: Plan) -> Result<(), CliError> {
    common::init_pool(plan.workers)?;
    let map = GmmMap::read_file(&plan.map).with_context(|| format!("cannot load map {}", plan.map.display()))?;
    let (st, sy) = plan.odometry_noise;
    let deltas =
        sim::odometry_from_trajectory(plan.sequence.reference(), st, sy, rng::derive_seed(plan.seed, ODOMETRY_STREAM));
    let frames = plan.sequence.frames(&deltas, rng::derive_seed(plan.seed, DEPTH_NOISE_STREAM));

    let create = |p: &PathBuf| File::create(p).with_context(|| format!("cannot create {}", p.display()));
    let mut traj_out = BufWriter::new(create(&plan.trajectory_out)?);
    writeln!(traj_out, "{}", datasets::TUM_HEADER).context("writing trajectory")?;
    let mut metrics = csv::Writer::from_writer(create(&plan.metrics_out)?);
    metrics.write_record(METRICS_HEADER).context("writing metrics")?;

    let mut write_error: Option<anyhow::Error> = None;
    let mut estimates = Vec::with_capacity(plan.sequence.len());
    let verbosity = plan.verbosity;
    let result = runner::run_filter(frames, &map, &plan.setup, |r, _| {
        estimates.push(TimedPose { timestamp: r.timestamp, pose: r.estimate.pose });
        if write_error.is_none() {
            let res = writeln!(traj_out, "{}", datasets::format_tum_line(&estimates[estimates.len() - 1]))
                .map_err(anyhow::Error::from)
                .and_then(|_| metrics.write_record(metrics_row(r)).map_err(anyhow::Error::from));
            if let Err(e) = res {
                write_error = Some(e.context("writing outputs"));
            }
        }
        if verbosity >= 2 {
            eprintln!(
                "step {} t={:.3} trace={:.4} ess={:.0} n_modify={}",
                r.index,
                r.timestamp,
                r.estimate.position_covariance.trace(),
                r.ess,
                r.n_modify
            );
        }
    });
    // Partial outputs are flushed whatever happened.
    let flushed =
        traj_out.flush().map_err(anyhow::Error::from).and_then(|_| metrics.flush().map_err(anyhow::Error::from));
    if let Some(e) = write_error {
        return Err(e.into());
    }
    let records = result.map_err(|e| anyhow!(e))?;
    flushed.context("flushing outputs")?;

    if verbosity >= 1 {
        println!("steps {}", records.len());
        if let (Some(truth), false) = (plan.sequence.truth(), estimates.is_empty()) {
            let est = sim::Trajectory::new(estimates).map_err(|e| anyhow!(e))?;
            match evaluation::rmse(&est, truth) {
                Ok(r) => println!("rmse {:.6}", r.rmse),
                Err(e) => println!("rmse unavailable: {e}"),
            }
        }
        let resets: usize = records.iter().map(|r| r.n_modify).sum();
        println!("reinitialized particles {resets}");
    }
    Ok(())
}

fn metrics_row(r: &StepRecord) -> Vec<String> {
    let p = &r.estimate.pose;
    vec![
        r.index.to_string(),
        format!("{:.9}", r.timestamp),
        p.position.x.to_string(),
        p.position.y.to_string(),
        p.position.z.to_string(),
        p.yaw.to_string(),
        r.estimate.position_covariance.trace().to_string(),
        r.estimate.yaw_circular_variance.to_string(),
        r.mean_nll.to_string(),
        r.min_nll.to_string(),
        r.ess.to_string(),
        r.n_modify.to_string(),
        u8::from(r.n_modify > 0).to_string(),
        u8::from(r.degenerate).to_string(),
        u8::from(r.resampled).to_string(),
    ]
}
