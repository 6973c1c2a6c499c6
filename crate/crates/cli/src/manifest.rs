use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ROUNDS_CSV: &str = "rounds.csv";
pub const CLIENTS_CSV: &str = "clients.csv";

pub fn checkpoint_name(round: usize) -> String {
    format!("round_{round}.fpwt")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Software {
    pub name: String,
    pub version: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub run: u64,
    pub model_init: u64,
    pub partition: u64,
    pub augment: u64,
}

/// Paths relative to the run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifacts {
    pub rounds_csv: String,
    pub clients_csv: String,
    pub checkpoints: Vec<String>,
}

/// Everything needed to replay a run: pass it back with `--config`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub software: Software,
    pub created_at: String,
    pub seeds: Seeds,
    pub config: RunConfig,
    pub artifacts: Artifacts,
}

impl Manifest {
    pub fn new(config: &RunConfig) -> Self {
        Manifest {
            software: Software {
                name: "fedseg".to_string(),
                version: env!("CARGO_PKG_VERSION").to_string(),
            },
            created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            seeds: Seeds {
                run: config.run.seed,
                model_init: config.run.seed,
                partition: config.run.seed,
                augment: config.augment.seed,
            },
            config: config.clone(),
            artifacts: Artifacts {
                rounds_csv: ROUNDS_CSV.to_string(),
                clients_csv: CLIENTS_CSV.to_string(),
                checkpoints: (1..=config.fed.rounds).map(checkpoint_name).collect(),
            },
        }
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
    }
}
