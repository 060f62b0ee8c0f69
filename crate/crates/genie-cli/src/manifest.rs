//! Run manifests: every command records the hash of its effective config,
//! its seed, and the artifact schema versions it wrote. No timestamps, so
//! identical runs produce identical manifests.

use std::collections::BTreeMap;
use std::path::Path;

use genie::io::write_json_pretty;
use genie::reward_data::REWARD_SAMPLES_SCHEMA_VERSION;
use genie::rounds::ROUND_REPORT_SCHEMA_VERSION;
use genie::trajectory::TRAJECTORY_SCHEMA_VERSION;
use genie::world::WORLD_SCHEMA_VERSION;
use genie::ENGINE_VERSION;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";
pub const RUN_MANIFEST_SCHEMA_VERSION: &str = "run_manifest.v1";

#[derive(Serialize)]
struct RunManifest {
    schema_version: &'static str,
    command: &'static str,
    /// SHA-256 of the effective config's canonical JSON: flags, config file,
    /// and environment overrides already folded in.
    config_sha256: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    versions: BTreeMap<&'static str, &'static str>,
}

/// Hash the effective config by its canonical serde serialization, so
/// formatting of a config file never changes the hash.
pub fn config_sha256<T: Serialize>(config: &T) -> String {
    let bytes = serde_json::to_vec(config).expect("configs serialize");
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Write `run_manifest.json` into `dir`, creating it if needed.
pub fn write<T: Serialize>(
    dir: &Path,
    command: &'static str,
    config: &T,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let manifest = RunManifest {
        schema_version: RUN_MANIFEST_SCHEMA_VERSION,
        command,
        config_sha256: config_sha256(config),
        seed,
        versions: BTreeMap::from([
            ("genie", ENGINE_VERSION),
            ("genie-cli", env!("CARGO_PKG_VERSION")),
            ("world_schema", WORLD_SCHEMA_VERSION),
            ("trajectory_schema", TRAJECTORY_SCHEMA_VERSION),
            ("reward_samples_schema", REWARD_SAMPLES_SCHEMA_VERSION),
            ("round_report_schema", ROUND_REPORT_SCHEMA_VERSION),
        ]),
    };
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))?;
    write_json_pretty(&dir.join(RUN_MANIFEST_FILE), &manifest)?;
    Ok(())
}
