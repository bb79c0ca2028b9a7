//! Effective configuration = built-in defaults, then `FEDL_SEED`, then the
//! `--config` file, then command-line flags. Later layers win.

use std::path::Path;

use clap::Args;
use fedl::data::SynthConfig;
use fedl::network::{Ablation, NetworkConfig};
use fedl::trainer::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

pub const SEED_ENV: &str = "FEDL_SEED";

/// A `--config` file. Every section is optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default)]
    pub label_column: Option<String>,
    #[serde(default)]
    pub network: Map<String, Value>,
    #[serde(default)]
    pub train: Map<String, Value>,
    #[serde(default)]
    pub synth: Map<String, Value>,
}

impl ConfigFile {
    pub fn read(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }

    pub fn label_column<'a>(&'a self, flag: Option<&'a str>) -> &'a str {
        flag.or(self.label_column.as_deref()).unwrap_or("label")
    }
}

pub fn env_seed() -> Result<Option<u64>, CliError> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("{SEED_ENV}='{s}' is not a non-negative integer"))),
        Err(_) => Ok(None),
    }
}

/// Seed used when neither a flag nor a config file names one.
pub fn default_seed() -> Result<u64, CliError> {
    Ok(env_seed()?.unwrap_or(0))
}

/// Overlays each map onto the JSON form of `base`. Keys that `base` does not
/// have are rejected so that typos fail loudly.
pub fn merge<T: Serialize + DeserializeOwned>(base: &T, layers: &[&Map<String, Value>], what: &str) -> Result<T, CliError> {
    let Value::Object(mut merged) = serde_json::to_value(base).expect("config serializes") else {
        unreachable!("configs serialize to objects")
    };
    for layer in layers {
        for (k, v) in layer.iter() {
            if !merged.contains_key(k) {
                return Err(CliError::Usage(format!("unknown {what} setting '{k}'")));
            }
            merged.insert(k.clone(), v.clone());
        }
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| CliError::Usage(format!("invalid {what} setting: {e}")))
}

/// Comma-separated layer widths; an empty string means no hidden layers.
pub fn parse_dims(text: &str) -> Result<Vec<usize>, CliError> {
    let t = text.trim();
    if t.is_empty() || t == "none" {
        return Ok(Vec::new());
    }
    t.split(',')
        .map(|s| s.trim().parse::<usize>().map_err(|_| CliError::Usage(format!("bad layer width '{s}' in '{text}'"))))
        .collect()
}

pub fn parse_reals(text: &str, what: &str) -> Result<Vec<f64>, CliError> {
    text.split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|_| CliError::Usage(format!("bad number '{s}' in --{what}"))))
        .collect()
}

/// Training and architecture flags shared by every command that trains.
#[derive(Debug, Clone, Default, Args)]
pub struct TrainArgs {
    /// JSON config file with optional `network`, `train` and `label_column` entries
    #[arg(long)]
    pub config: Option<std::path::PathBuf>,
    #[arg(long)]
    pub label_column: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_step: Option<usize>,
    #[arg(long)]
    pub lr_gamma: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    /// Feature extractor widths, e.g. 64,64
    #[arg(long)]
    pub hidden: Option<String>,
    /// Hidden widths of the p and tau heads; empty for affine heads
    #[arg(long)]
    pub head_hidden: Option<String>,
    /// none | fix_p_uniform | fix_p_normalized | fix_tau
    #[arg(long)]
    pub ablation: Option<String>,
    #[arg(long)]
    pub power_iterations: Option<usize>,
    /// Suppress per-epoch progress lines
    #[arg(long)]
    pub quiet: bool,
}

impl TrainArgs {
    fn train_flags(&self) -> Map<String, Value> {
        let mut m = Map::new();
        let mut put = |k: &str, v: Option<Value>| {
            if let Some(v) = v {
                m.insert(k.into(), v);
            }
        };
        put("seed", self.seed.map(Value::from));
        put("max_epochs", self.epochs.map(Value::from));
        put("batch_size", self.batch_size.map(Value::from));
        put("learning_rate", self.lr.map(Value::from));
        put("lr_step_size", self.lr_step.map(Value::from));
        put("lr_gamma", self.lr_gamma.map(Value::from));
        put("early_stop_patience", self.patience.map(Value::from));
        put("val_fraction", self.val_fraction.map(Value::from));
        put("progress", self.quiet.then_some(Value::Bool(false)));
        m
    }

    fn network_flags(&self) -> Result<Map<String, Value>, CliError> {
        let mut m = Map::new();
        if let Some(h) = &self.hidden {
            m.insert("hidden_dims".into(), serde_json::to_value(parse_dims(h)?).unwrap());
        }
        if let Some(h) = &self.head_hidden {
            m.insert("head_hidden_dims".into(), serde_json::to_value(parse_dims(h)?).unwrap());
        }
        if let Some(a) = &self.ablation {
            let a: Ablation = a.parse().map_err(|_| CliError::Usage(format!("unknown ablation '{a}'")))?;
            m.insert("ablation".into(), serde_json::to_value(a).unwrap());
        }
        if let Some(n) = self.power_iterations {
            m.insert("power_iterations".into(), Value::from(n));
        }
        Ok(m)
    }

    pub fn resolve_train(&self, file: &ConfigFile) -> Result<TrainConfig, CliError> {
        let base = TrainConfig {
            seed: default_seed()?,
            ..TrainConfig::default()
        };
        let tc: TrainConfig = merge(&base, &[&file.train, &self.train_flags()], "train")?;
        tc.validate()?;
        Ok(tc)
    }

    /// Input width and class count always come from the data.
    pub fn resolve_network(&self, file: &ConfigFile, input_dim: usize, num_classes: usize) -> Result<NetworkConfig, CliError> {
        for key in ["input_dim", "num_classes"] {
            if file.network.contains_key(key) {
                return Err(CliError::Usage(format!("network.{key} is taken from the data and cannot be set")));
            }
        }
        let nc: NetworkConfig = merge(
            &NetworkConfig::new(input_dim, num_classes),
            &[&file.network, &self.network_flags()?],
            "network",
        )?;
        nc.validate()?;
        Ok(nc)
    }
}

/// Flags of `synth`.
#[derive(Debug, Clone, Default, Args)]
pub struct SynthArgs {
    /// JSON config file with an optional `synth` entry
    #[arg(long)]
    pub config: Option<std::path::PathBuf>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub per_class: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    /// Radius of the circle holding the class means
    #[arg(long)]
    pub separation: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub ambiguous: Option<usize>,
    #[arg(long)]
    pub ood: Option<usize>,
    #[arg(long)]
    pub ood_offset: Option<f64>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub label_noise: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl SynthArgs {
    pub fn resolve(&self, file: &ConfigFile) -> Result<SynthConfig, CliError> {
        let mut m = Map::new();
        let mut put = |k: &str, v: Option<Value>| {
            if let Some(v) = v {
                m.insert(k.into(), v);
            }
        };
        put("num_classes", self.classes.map(Value::from));
        put("n_per_class", self.per_class.map(Value::from));
        put("dim", self.dim.map(Value::from));
        put("class_separation", self.separation.map(Value::from));
        put("noise_sigma", self.noise.map(Value::from));
        put("n_ambiguous", self.ambiguous.map(Value::from));
        put("n_ood", self.ood.map(Value::from));
        put("ood_offset", self.ood_offset.map(Value::from));
        put("imbalance_rho", self.rho.map(Value::from));
        put("label_noise", self.label_noise.map(Value::from));
        put("seed", self.seed.map(Value::from));
        let base = SynthConfig {
            seed: default_seed()?,
            ..SynthConfig::default()
        };
        let sc: SynthConfig = merge(&base, &[&file.synth, &m], "synth")?;
        sc.validate()?;
        Ok(sc)
    }
}
