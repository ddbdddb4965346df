//! Config-driven experiment runs, sweeps and artifact writing.

mod config;
mod runner;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::Result;

pub use config::{parse_config, render_config, ExperimentConfig, KNOWN_KEYS, REQUIRED_KEYS};
pub use runner::{
    ablate_baseline_colors, ablate_components, default_lambda_grid, run, run_seed, sweep_lambda,
    write_run_set, write_table, Aggregate, RunSet, SeedOutcome, TableRow,
};

/// Environment variable that, when set, replaces `run.output_dir`.
pub const OUTPUT_ROOT_ENV: &str = "LCGC_OUTPUT_ROOT";

/// Output root after applying the [`OUTPUT_ROOT_ENV`] override.
pub fn output_root(cfg: &ExperimentConfig) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root),
        _ => cfg.output_dir.clone(),
    }
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    let tmp = path.with_file_name(format!(".{file_name}.tmp-{}", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}
