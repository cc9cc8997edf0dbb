//! Run manifests: every output directory gets a `manifest.json` that pins
//! the subcommand, resolved flags, input digests, seed, solver config, and
//! library version. The manifest is fully deterministic (re-running with the
//! same inputs produces identical bytes); wall time goes to a separate
//! `timing.json` so manifests can be compared bit-for-bit.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;
use sspm_core::solvers::SolverConfig;
use sspm_core::{io, Result};

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub version: String,
    pub flags: BTreeMap<String, serde_json::Value>,
    /// Input path -> SHA-256 digest.
    pub inputs: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub solver_config: Option<SolverConfig>,
    pub threads: usize,
}

impl RunManifest {
    pub fn new(subcommand: &str, threads: usize) -> Self {
        Self {
            subcommand: subcommand.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            flags: BTreeMap::new(),
            inputs: BTreeMap::new(),
            seed: None,
            solver_config: None,
            threads,
        }
    }

    pub fn flag(&mut self, name: &str, value: impl Serialize) {
        self.flags.insert(
            name.to_string(),
            serde_json::to_value(value).expect("serializable flag"),
        );
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs
            .insert(path.display().to_string(), io::sha256_hex(path)?);
        Ok(())
    }

    pub fn write(&self, out_dir: &Path) -> Result<()> {
        io::write_json(&out_dir.join("manifest.json"), self)
    }
}

#[derive(Debug, Serialize)]
struct Timing {
    wall_seconds: f64,
}

pub fn write_timing(out_dir: &Path, wall_seconds: f64) -> Result<()> {
    io::write_json(&out_dir.join("timing.json"), &Timing { wall_seconds })
}
