use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use mpc_core::corpus::SyntheticSpec;
use mpc_core::model::EncoderConfig;
use mpc_core::sampling::{SamplerConfig, Task};
use mpc_core::trainer::TrainConfig;
use mpc_core::{MpcError, Result};

pub const DEFAULT_SEED: u64 = 7;
pub const SEED_ENV: &str = "MPC_SEED";

/// Everything a run reads besides its data files. Every field is optional
/// in the JSON file; missing ones take their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; copied into every seed field below when the run starts.
    pub seed: Option<u64>,
    pub max_vocab: usize,
    pub synthetic: SyntheticSpec,
    pub encoder: EncoderConfig,
    pub sampler: SamplerConfig,
    pub pretrain: TrainConfig,
    /// Task-dependent defaults when absent.
    pub finetune: Option<TrainConfig>,
    pub drop_tasks: BTreeSet<Task>,
    /// Candidates per response-selection set (2 or 10).
    pub candidates: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            max_vocab: 30_000,
            synthetic: SyntheticSpec::default(),
            encoder: EncoderConfig::default(),
            sampler: SamplerConfig::default(),
            pretrain: TrainConfig::pretrain_default(),
            finetune: None,
            drop_tasks: BTreeSet::new(),
            candidates: 10,
        }
    }
}

impl RunConfig {
    /// Reads a config file, or the config recorded in a run manifest.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| MpcError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        let value = match value.get("config") {
            Some(c) if value.get("subcommand").is_some() => c.clone(),
            _ => value,
        };
        Ok(serde_json::from_value(value)?)
    }

    /// Flag > config file > environment > built-in default.
    pub fn resolve_seed(&mut self, flag: Option<u64>, env: Option<&str>) -> Result<u64> {
        let env = env
            .map(|s| {
                s.trim()
                    .parse::<u64>()
                    .map_err(|_| MpcError::Invalid(format!("{SEED_ENV}={s:?} is not an unsigned integer")))
            })
            .transpose()?;
        let seed = flag.or(self.seed).or(env).unwrap_or(DEFAULT_SEED);
        self.seed = Some(seed);
        self.synthetic.seed = seed;
        self.sampler.seed = seed;
        self.pretrain.seed = seed;
        if let Some(f) = self.finetune.as_mut() {
            f.seed = seed;
        }
        Ok(seed)
    }
}

/// Written beside a run's outputs before any work starts, then rewritten
/// with the finish time.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub version: String,
    pub argv: Vec<String>,
    pub seed: u64,
    pub config: RunConfig,
    pub inputs: BTreeMap<String, PathBuf>,
    pub outputs: BTreeMap<String, PathBuf>,
    pub started_unix: f64,
    pub finished_unix: Option<f64>,
    pub wall_seconds: Option<f64>,
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

pub fn version() -> String {
    format!("{} ({})", env!("CARGO_PKG_VERSION"), env!("MPC_GIT_DESCRIBE"))
}

pub fn manifest_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

impl RunManifest {
    pub fn start(subcommand: &str, seed: u64, config: &RunConfig) -> Self {
        RunManifest {
            subcommand: subcommand.to_string(),
            version: version(),
            argv: std::env::args().collect(),
            seed,
            config: config.clone(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            started_unix: now(),
            finished_unix: None,
            wall_seconds: None,
        }
    }

    pub fn write(&self, out: &Path) -> Result<()> {
        let path = manifest_path(out);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text + "\n").map_err(|e| MpcError::Io { path, source: e })
    }

    pub fn finish(mut self, out: &Path) -> Result<()> {
        let t = now();
        self.finished_unix = Some(t);
        self.wall_seconds = Some(t - self.started_unix);
        self.write(out)
    }
}
