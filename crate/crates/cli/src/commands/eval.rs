use std::path::PathBuf;

use anyhow::Context;
use gmm_mcl::datasets;
use gmm_mcl::evaluation;
use gmm_mcl::sim::Trajectory;

use crate::CliError;

#[derive(Debug, Clone)]
pub struct Args {
    pub est: PathBuf,
    pub truth: PathBuf,
    pub out: Option<PathBuf>,
}

pub struct Plan {
    est: Trajectory,
    truth: Trajectory,
    out: Option<PathBuf>,
}

pub fn plan(args: Args) -> Result<Plan, CliError> {
    let read = |p: &PathBuf| -> Result<Trajectory, CliError> {
        if !p.is_file() {
            return Err(crate::usage(format!("{} does not exist", p.display())));
        }
        datasets::read_trajectory(p).map_err(|e| crate::usage(e.to_string()))
    };
    let est = read(&args.est)?;
    let truth = read(&args.truth)?;
    if let Some(dir) = args.out.as_ref().and_then(|o| o.parent()).filter(|d| !d.as_os_str().is_empty()) {
        if !dir.is_dir() {
            return Err(crate::usage(format!("output directory {} does not exist", dir.display())));
        }
    }
    Ok(Plan { est, truth, out: args.out })
}

pub fn execute(plan: Plan) -> Result<(), CliError> {
    let report = evaluation::rmse(&plan.est, &plan.truth).context("cannot align trajectories")?;
    if let Some(out) = &plan.out {
        let mut w = csv::Writer::from_path(out).with_context(|| format!("cannot create {}", out.display()))?;
        w.write_record(["timestamp", "error"]).context("writing errors")?;
        for (t, e) in &report.per_step {
            w.write_record([format!("{t:.9}"), e.to_string()]).context("writing errors")?;
        }
        w.flush().context("writing errors")?;
    }
    println!("matched {}", report.per_step.len());
    println!("rmse {:.6}", report.rmse);
    Ok(())
}
