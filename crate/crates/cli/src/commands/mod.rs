pub mod bench;
pub mod common;
pub mod eval;
pub mod fit_map;
pub mod localize;
pub mod simulate;
pub mod sweep;

use std::path::Path;

use crate::config::Config;
use crate::CliError;

/// Loads a command config and applies `--set` overrides in order.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<Config, CliError> {
    let mut cfg = Config::read(path)?;
    for o in overrides {
        cfg.set(o)?;
    }
    Ok(cfg)
}
