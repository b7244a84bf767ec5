use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{anyhow, Context};
use gmm_mcl::evaluation::{self, GaussianFit, SweepRow, SweepSettings, CONVERGENCE_TRACE};
use gmm_mcl::gmm_map::{fit_em, EmOptions, GmmMap, PointCloud};
use gmm_mcl::likelihood::DepthImage;
use gmm_mcl::particle_filter::{FilterConfig, OdometryDelta};
use gmm_mcl::rng;
use gmm_mcl::runner::{self, Frame, RunSetup};
use gmm_mcl::sim;

use super::common::{self, Sequence, DEPTH_NOISE_STREAM, ODOMETRY_STREAM};
use crate::config::{Config, ConfigError};
use crate::CliError;

const MAP_STREAM: u64 = 5;

enum Maps {
    /// One map used for every setting.
    Single(PathBuf),
    /// Maps fitted from `cloud` for each listed size.
    Fitted { cloud: PathBuf, sizes: Vec<usize>, em_iters: usize },
}

pub struct Plan {
    workers: Option<usize>,
    seed: u64,
    sequence: Sequence,
    odometry_noise: (f64, f64),
    setup: RunSetup,
    maps: Maps,
    settings: SweepSettings,
    out: PathBuf,
}

pub fn plan(cfg: &Config) -> Result<Plan, CliError> {
    let seed: u64 = cfg.require("seed")?;
    let workers = common::workers(Some(cfg))?;
    let sequence = Sequence::from_config(cfg)?;
    if sequence.is_empty() {
        return Err(crate::usage("sweep needs a non-empty sequence"));
    }
    let odometry_noise = common::odometry_noise(cfg)?;
    let filter = common::filter_config(cfg)?;
    let first = sequence.reference().samples()[0].pose;
    let setup = common::run_setup(cfg, filter, Some(&first), seed)?;

    let particle_counts: Vec<usize> =
        cfg.list("sweep.particles")?.ok_or_else(|| ConfigError::Missing("sweep.particles".into()))?;
    let reference_particles: usize = cfg.require("sweep.reference_particles")?;
    let trials: usize = cfg.or("sweep.trials", 5)?;
    let convergence_trace: f64 = cfg.or("sweep.convergence_trace", CONVERGENCE_TRACE)?;
    let component_counts: Vec<usize> = cfg.list("sweep.components")?.unwrap_or_default();
    if particle_counts.is_empty() || particle_counts.contains(&0) || reference_particles == 0 || trials == 0 {
        return Err(crate::usage("particle counts and trials must be positive"));
    }
    let (maps, reference_components) = if component_counts.is_empty() {
        let path = cfg.require_existing_path("map")?;
        let map = GmmMap::read_file(&path).map_err(|e| crate::usage(format!("{}: {e}", path.display())))?;
        (Maps::Single(path), map.len())
    } else {
        let reference: usize = cfg.require("sweep.reference_components")?;
        let cloud = cfg.require_existing_path("cloud")?;
        let em_iters: usize = cfg.or("map.em_iters", 50)?;
        let mut sizes = component_counts.clone();
        sizes.push(reference);
        sizes.sort_unstable();
        sizes.dedup();
        if sizes[0] == 0 {
            return Err(crate::usage("component counts must be positive"));
        }
        (Maps::Fitted { cloud, sizes, em_iters }, reference)
    };
    let out = cfg.output_path("out.csv")?;
    cfg.finish()?;
    let settings = SweepSettings {
        particle_counts,
        component_counts,
        reference_particles,
        reference_components,
        trials,
        seed,
        convergence_trace,
    };
    Ok(Plan { workers, seed, sequence, odometry_noise, setup, maps, settings, out })
}

pub fn execute(plan: Plan) -> Result<(), CliError> {
    common::init_pool(plan.workers)?;
    let maps: BTreeMap<usize, GmmMap> = match &plan.maps {
        Maps::Single(path) => {
            let map = GmmMap::read_file(path).with_context(|| format!("cannot load {}", path.display()))?;
            BTreeMap::from([(map.len(), map)])
        }
        Maps::Fitted { cloud, sizes, em_iters } => {
            let cloud = PointCloud::read_file(cloud).with_context(|| format!("cannot load {}", cloud.display()))?;
            let options = EmOptions { seed: rng::derive_seed(plan.seed, MAP_STREAM), max_iters: *em_iters, tol: 1e-3 };
            sizes
                .iter()
                .map(|&m| Ok((m, fit_em(&cloud, m, options).with_context(|| format!("fitting {m} components"))?.map)))
                .collect::<anyhow::Result<_>>()?
        }
    };
    let (st, sy) = plan.odometry_noise;
    let deltas: Vec<OdometryDelta> =
        sim::odometry_from_trajectory(plan.sequence.reference(), st, sy, rng::derive_seed(plan.seed, ODOMETRY_STREAM));
    let noise_seed = rng::derive_seed(plan.seed, DEPTH_NOISE_STREAM);
    let scans: Vec<DepthImage> = (0..plan.sequence.len())
        .map(|k| plan.sequence.scan(k, noise_seed).map_err(|e| anyhow!("frame {k}: {e}")))
        .collect::<anyhow::Result<_>>()?;
    let samples = plan.sequence.reference().samples();

    let run = |n: usize, m: usize, seed: u64| -> Result<Vec<GaussianFit>, String> {
        let map = maps.get(&m).ok_or_else(|| format!("no map with {m} components"))?;
        let config = FilterConfig { n_particles: n, n_groups: plan.setup.config.n_groups.min(n), ..plan.setup.config };
        let setup = RunSetup { config, seed, ..plan.setup };
        let frames = scans.iter().enumerate().map(|(k, scan)| {
            let delta =
                if k == 0 { OdometryDelta::zero(samples[0].pose.pitch, samples[0].pose.roll) } else { deltas[k - 1] };
            Ok::<_, String>(Frame { timestamp: samples[k].timestamp, delta, scan: scan.clone() })
        });
        let records = runner::run_filter(frames, map, &setup, |_, _| {}).map_err(|e| e.to_string())?;
        Ok(records.iter().map(|r| GaussianFit::from_estimate(&r.estimate)).collect())
    };
    let rows = evaluation::sensitivity_sweep(&plan.settings, run).context("sweep failed")?;

    let mut w = csv::Writer::from_path(&plan.out).with_context(|| format!("cannot create {}", plan.out.display()))?;
    w.write_record(SweepRow::CSV_HEADER).context("writing sweep")?;
    for r in &rows {
        w.write_record(row_fields(r)).context("writing sweep")?;
        println!(
            "N={:<6} M={:<6} mean_kl={:.6e} var_kl={:.6e}{}",
            r.n_particles,
            r.n_components,
            r.mean_kl,
            r.var_kl,
            r.skipped.as_deref().map(|s| format!(" skipped: {s}")).unwrap_or_default()
        );
    }
    w.flush().context("writing sweep")?;
    Ok(())
}

fn row_fields(r: &SweepRow) -> Vec<String> {
    vec![
        r.n_particles.to_string(),
        r.n_components.to_string(),
        r.trials.to_string(),
        r.matched_steps.to_string(),
        r.mean_kl.to_string(),
        r.var_kl.to_string(),
        r.log_var_kl.to_string(),
        r.skipped.clone().unwrap_or_default(),
    ]
}
