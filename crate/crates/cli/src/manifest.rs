//! Run manifest: the provenance record written before any metric output.
//!
//! The manifest carries wall-clock time, so it is the one output file that is
//! not byte-identical across reruns; every metric file is.

use std::path::Path;

use serde::Serialize;

use crate::error::CliResult;

#[derive(Debug, Clone, Default, Serialize)]
pub struct DerivedValues {
    pub kernel_bandwidth: Option<f64>,
    pub mmd_bandwidth: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct DiagnosticsTotals {
    pub clamp_q_total: u64,
    pub clamp_p_total: u64,
    pub clip_total: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub prng_algorithm: String,
    pub library_version: String,
    /// `running`, then `ok` or `failed: <reason>`.
    pub status: String,
    pub derived: DerivedValues,
    pub diagnostics: DiagnosticsTotals,
    pub wall_clock_seconds: f64,
}

impl RunManifest {
    pub fn start(command: &str, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            seed,
            prng_algorithm: latentflow::numerics::PRNG_ALGORITHM.to_string(),
            library_version: latentflow::VERSION.to_string(),
            status: "running".to_string(),
            derived: DerivedValues::default(),
            diagnostics: DiagnosticsTotals::default(),
            wall_clock_seconds: 0.0,
        }
    }

    pub fn write(&self, out_dir: &Path) -> CliResult<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(out_dir.join("manifest.json"), text + "\n")?;
        Ok(())
    }
}
