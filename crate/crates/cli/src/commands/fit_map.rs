use std::path::PathBuf;

use anyhow::Context;
use gmm_mcl::gmm_map::{self, fit_em, EmOptions, PointCloud};

use super::common;
use crate::CliError;

#[derive(Debug, Clone)]
pub struct Args {
    pub cloud: PathBuf,
    pub components: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub max_iters: usize,
    pub tol: f64,
}

pub struct Plan {
    args: Args,
    workers: Option<usize>,
    cloud: PointCloud,
}

pub fn plan(args: Args) -> Result<Plan, CliError> {
    if !args.cloud.is_file() {
        return Err(crate::usage(format!("cloud {} does not exist", args.cloud.display())));
    }
    if args.components == 0 {
        return Err(crate::usage("--components must be at least 1"));
    }
    if !(args.tol >= 0.0) || args.max_iters == 0 {
        return Err(crate::usage("need --max-iters >= 1 and --tol >= 0"));
    }
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        if !dir.is_dir() {
            return Err(crate::usage(format!("output directory {} does not exist", dir.display())));
        }
    }
    let workers = common::workers(None)?;
    let cloud =
        PointCloud::read_file(&args.cloud).map_err(|e| crate::usage(format!("{}: {e}", args.cloud.display())))?;
    if cloud.len() < args.components {
        return Err(crate::usage(format!(
            "cloud has {} points, fewer than {} components",
            cloud.len(),
            args.components
        )));
    }
    Ok(Plan { args, workers, cloud })
}

pub fn execute(plan: Plan) -> Result<(), CliError> {
    common::init_pool(plan.workers)?;
    let a = &plan.args;
    let fit = fit_em(&plan.cloud, a.components, EmOptions { seed: a.seed, max_iters: a.max_iters, tol: a.tol })
        .context("EM failed")?;
    fit.map.write_file(&a.out).with_context(|| format!("cannot write {}", a.out.display()))?;
    let file_bytes = std::fs::metadata(&a.out).map(|m| m.len()).unwrap_or(0);
    println!("components {}", fit.map.len());
    println!("payload bytes {}", fit.map.len() * gmm_map::BYTES_PER_COMPONENT);
    println!("file bytes {file_bytes}");
    println!("iterations {}", fit.log_likelihood.len());
    println!("converged {}", fit.converged);
    println!("final log-likelihood {:.6}", fit.final_log_likelihood());
    Ok(())
}
