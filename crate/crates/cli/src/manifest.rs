use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use lqae::tensor_io::write_atomic;
use lqae::training::LqaeConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Record of one completed command, written last so its presence marks the
/// outputs as complete.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: BTreeMap<String, String>,
    pub seed: u64,
    pub started: String,
    pub finished: String,
    pub outputs: Vec<PathBuf>,
    /// SHA-256 of the executable that produced the outputs.
    pub code_hash: String,
    pub version: String,
}

pub fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

pub fn executable_hash() -> String {
    let Ok(path) = std::env::current_exe() else {
        return String::from("unknown");
    };
    let Ok(mut f) = std::fs::File::open(path) else {
        return String::from("unknown");
    };
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        match f.read(&mut buf) {
            Ok(0) => break,
            Ok(n) => h.update(&buf[..n]),
            Err(_) => return String::from("unknown"),
        }
    }
    hex::encode(h.finalize())
}

impl RunManifest {
    pub fn new(command: &str, cfg: &LqaeConfig, started: String) -> Self {
        RunManifest {
            command: command.into(),
            argv: std::env::args().collect(),
            config: cfg.entries().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            seed: cfg.seed,
            started,
            finished: String::new(),
            outputs: Vec::new(),
            code_hash: executable_hash(),
            version: env!("CARGO_PKG_VERSION").into(),
        }
    }

    /// Resolved config as a config file body.
    pub fn config_text(&self) -> String {
        self.config.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Stamps the finish time and writes `dir/manifest.json` atomically.
    /// Refuses if a listed output is missing.
    pub fn write(mut self, dir: &Path) -> CliResult<PathBuf> {
        if let Some(missing) = self.outputs.iter().find(|p| !p.exists()) {
            return Err(CliError::Runtime(format!("output {} was not produced", missing.display())));
        }
        self.finished = now();
        let path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(&self).expect("manifest serializes");
        write_atomic(&path, json.as_bytes())?;
        Ok(path)
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: not a run manifest: {e}", path.display())))
    }
}
