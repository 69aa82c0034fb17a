//! Artifact writers: run manifests, CSV tables, and JSON summaries. Every
//! writer is deterministic given its inputs; the manifest's wall time is the
//! single timing field and lives only there.

use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::CliError;

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
    pub wall_time_seconds: f64,
}

pub fn write_manifest(
    dir: &Path,
    command: &str,
    cfg: &ExperimentConfig,
    started: Instant,
) -> Result<(), CliError> {
    let manifest = Manifest {
        command: command.into(),
        config_sha256: cfg.hash(),
        seed: cfg.seed,
        wall_time_seconds: started.elapsed().as_secs_f64(),
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

/// The effective config is persisted next to its outputs so the run can be
/// reproduced from the output directory alone.
pub fn write_effective_config(dir: &Path, cfg: &ExperimentConfig) -> Result<(), CliError> {
    let text = toml::to_string(cfg)
        .map_err(|e| CliError::Internal(format!("config serialization: {e}")))?;
    std::fs::write(dir.join("config.toml"), text)?;
    Ok(())
}

pub fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<(), CliError> {
    let mut text = String::with_capacity(rows.len() * 64 + header.len() + 1);
    text.push_str(header);
    text.push('\n');
    for row in rows {
        text.push_str(row);
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Internal(format!("JSON serialization: {e}")))?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Fixed-precision float formatting so CSV bytes are stable across platforms.
pub fn num(v: f64) -> String {
    format!("{v:.6}")
}
