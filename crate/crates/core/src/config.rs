//! Experiment configuration, dotted overrides, presets and run manifests.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::backward::{BackwardFnSpec, CorrelationConfig};
use crate::dataset::{load_split, Dataset, InputScaling, Split};
use crate::error::{Error, Result};
use crate::ga::GaConfig;
use crate::lif::LifParams;
use crate::sweep::{EtaExperiment, SweepSpec};
use crate::topology::{InitStats, NetworkTopology};
use crate::trainer::{Mechanism, TrainConfig};

pub const DATA_DIR_ENV: &str = "ADFA_DATA_DIR";

const DESK: &str = include_str!("../presets/desk.toml");
const PAPER: &str = include_str!("../presets/paper.toml");

pub const PRESETS: [&str; 2] = ["desk", "paper"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Directory holding the IDX files. Usually supplied at run time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    /// Pixels are scaled so the training-set mean equals this value.
    pub input_mean: f64,
    /// Use only the first `n` training samples (0 = all).
    #[serde(default)]
    pub train_limit: usize,
    #[serde(default)]
    pub test_limit: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    pub layers: Vec<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub mechanism: Mechanism,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backward: Option<BackwardFnSpec<f64>>,
    #[serde(default)]
    pub allow_g_override: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub interval_ms: f64,
    pub settle_ms: f64,
    /// Defaults to the calibrated rate of the mechanism.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_base: Option<f64>,
    pub seed: u64,
    #[serde(default = "one")]
    pub threads: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSection,
    pub network: NetworkSection,
    pub init: InitStats<f64>,
    pub lif: LifParams<f64>,
    pub train: TrainSection,
    #[serde(default)]
    pub correlation: CorrelationConfig<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ga: Option<GaConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<EtaExperiment>,
    #[serde(default)]
    pub output: OutputSection,
}

/// Parses the right-hand side of `key=value`. Anything that is not a valid
/// TOML value is taken as a bare string.
pub fn parse_value(text: &str) -> Value {
    let text = text.trim();
    match format!("v = {text}").parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => Value::String(text.to_string()),
    }
}

/// Sets `path` (dot separated) inside `root`, creating tables on the way.
pub fn set_path(root: &mut Table, path: &str, value: Value) -> Result<()> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("malformed key {path:?}")));
    }
    let (last, parents) = keys.split_last().unwrap();
    let mut table = root;
    for key in parents {
        let entry = table
            .entry(key.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        table = match entry {
            Value::Table(t) => t,
            _ => return Err(Error::Config(format!("{path}: {key} is not a section"))),
        };
    }
    table.insert(last.to_string(), value);
    Ok(())
}

/// Splits `section.key=value`.
pub fn parse_override(text: &str) -> Result<(String, Value)> {
    let (key, value) = text
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {text:?} is not key=value")))?;
    Ok((key.trim().to_string(), parse_value(value)))
}

impl ExperimentConfig {
    /// Deserializes and validates an already edited table.
    pub fn from_table(table: Table) -> Result<Self> {
        let cfg: Self = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn preset(name: &str) -> Result<Self> {
        let text = match name {
            "desk" => DESK,
            "paper" => PAPER,
            other => {
                return Err(Error::Config(format!(
                    "unknown preset {other:?} (expected one of {})",
                    PRESETS.join(", ")
                )))
            }
        };
        Self::parse(text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with(text, &[])
    }

    /// Parses `text` and applies `key=value` overrides before validation.
    pub fn parse_with(text: &str, overrides: &[(String, Value)]) -> Result<Self> {
        let mut table: Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for (k, v) in overrides {
            set_path(&mut table, k, v.clone())?;
        }
        Self::from_table(table)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_table(&self) -> Result<Table> {
        match Value::try_from(self).map_err(|e| Error::Config(e.to_string()))? {
            Value::Table(t) => Ok(t),
            _ => unreachable!("config serializes to a table"),
        }
    }

    pub fn with_overrides(&self, overrides: &[(String, Value)]) -> Result<Self> {
        let mut table = self.to_table()?;
        for (k, v) in overrides {
            set_path(&mut table, k, v.clone())?;
        }
        Self::from_table(table)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Stable hash of everything that affects results. Data and output
    /// locations are excluded.
    pub fn fingerprint(&self) -> Result<String> {
        let mut c = self.clone();
        c.data.dir = None;
        c.output.dir = None;
        c.train.threads = 1;
        if let Some(s) = c.sweep.as_mut() {
            s.workers = 1;
        }
        let digest = Sha256::digest(c.to_toml()?.as_bytes());
        Ok(hex::encode(digest)[..16].to_string())
    }

    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, e: Error| Error::Config(format!("{name}: {e}"));
        if !(self.data.input_mean > 0.0 && self.data.input_mean.is_finite()) {
            return Err(Error::Config("data.input_mean: must be > 0".into()));
        }
        self.topology().map_err(|e| field("network.layers", e))?;
        self.init.validate().map_err(|e| field("init", e))?;
        self.lif.validate().map_err(|e| field("lif", e))?;
        if self.train.epochs == 0 {
            return Err(Error::Config("train.epochs: must be >= 1".into()));
        }
        self.train_config().validate().map_err(|e| match e {
            Error::Config(m) => Error::Config(m),
            other => field("train.backward", other),
        })?;
        self.correlation.validate().map_err(|e| field("correlation", e))?;
        if let Some(ga) = &self.ga {
            ga.validate()?;
        }
        if let Some(sweep) = &self.sweep {
            sweep.validate()?;
        }
        if let Some(eta) = &self.eta {
            crate::backward::Bins::new(eta.edges.clone()).map_err(|e| field("eta.edges", e))?;
        }
        Ok(())
    }

    pub fn topology(&self) -> Result<NetworkTopology> {
        NetworkTopology::new(self.network.layers.clone(), self.network.seed)
    }

    pub fn train_config(&self) -> TrainConfig<f64> {
        let t = &self.train;
        TrainConfig {
            mechanism: t.mechanism,
            backward: t.backward.clone(),
            allow_g_override: t.allow_g_override,
            lif: self.lif,
            epochs: t.epochs,
            batch_size: t.batch_size,
            interval_ms: t.interval_ms,
            settle_ms: t.settle_ms,
            lr_base: t.lr_base.unwrap_or_else(|| t.mechanism.default_lr()),
            seed: t.seed,
            threads: t.threads,
        }
    }

    /// Loads and scales both splits from `dir`.
    pub fn load_data(&self, dir: &Path) -> Result<LoadedData> {
        let limit = |ds: Dataset<f64>, n: usize| if n == 0 { ds } else { ds.truncated(n) };
        let train = limit(load_split(dir, Split::Train)?, self.data.train_limit);
        let test = limit(load_split(dir, Split::Test)?, self.data.test_limit);
        let scaling = InputScaling::fit(&train, self.data.input_mean)?;
        log::info!(
            "scaled inputs by {:.6}: train mean {:.4}, second moment {:.4} (init target {})",
            scaling.factor,
            scaling.scaled_mean,
            scaling.scaled_second_moment,
            self.init.v_second
        );
        Ok(LoadedData {
            train: scaling.apply(&train),
            test: scaling.apply(&test),
            scaling,
        })
    }
}

#[derive(Debug, Clone)]
pub struct LoadedData {
    pub train: Dataset<f64>,
    pub test: Dataset<f64>,
    pub scaling: InputScaling<f64>,
}

/// Everything needed to repeat a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    /// Command-line arguments specific to the command, for re-running it.
    #[serde(default)]
    pub args: Vec<String>,
    pub version: String,
    pub fingerprint: String,
    pub master_seed: u64,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub output_dir: PathBuf,
    pub config: ExperimentConfig,
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl RunManifest {
    pub fn new(
        command: &str,
        args: &[String],
        config: &ExperimentConfig,
        output_dir: &Path,
        started_unix: u64,
    ) -> Result<Self> {
        Ok(Self {
            command: command.to_string(),
            args: args.to_vec(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            fingerprint: config.fingerprint()?,
            master_seed: config.network.seed,
            started_unix,
            finished_unix: unix_now(),
            output_dir: output_dir.to_path_buf(),
            config: config.clone(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let m: Self = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        m.config.validate()?;
        Ok(m)
    }
}
