//! Run configuration: defaults < config file < `--set key=value` < named flags.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use labes::model::ModelConfig;
use labes::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::fail::{self, Kind};

pub const DATA_ENV: &str = "LABES_DATA";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory holding schema.json, db.json and the split files.
    pub dir: Option<PathBuf>,
    pub train_split: String,
    pub dev_split: String,
    pub vocab_size: usize,
    /// Optional GloVe text file used to initialize word embeddings.
    pub glove: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: None,
            train_split: "train".into(),
            dev_split: "dev".into(),
            vocab_size: 3000,
            glove: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Named flags that mirror the most used config keys.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// Override any key, e.g. `--set train.lr=0.01` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub label_fraction: Option<f64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub kl_weight: Option<f64>,
    #[arg(long)]
    pub hidden_size: Option<usize>,
    #[arg(long)]
    pub embedding_size: Option<usize>,
    #[arg(long)]
    pub dropout_rate: Option<f64>,
}

impl Overrides {
    fn pairs(&self) -> Vec<(&'static str, toml::Value)> {
        let mut out = Vec::new();
        let int = |v: u64| toml::Value::Integer(v as i64);
        if let Some(v) = self.seed {
            out.push(("train.seed", int(v)));
        }
        if let Some(v) = self.lr {
            out.push(("train.lr", toml::Value::Float(v)));
        }
        if let Some(v) = self.batch_size {
            out.push(("train.batch_size", int(v as u64)));
        }
        if let Some(v) = self.label_fraction {
            out.push(("train.label_fraction", toml::Value::Float(v)));
        }
        if let Some(v) = self.max_epochs {
            out.push(("train.max_epochs", int(v as u64)));
        }
        if let Some(v) = self.kl_weight {
            out.push(("train.kl_weight", toml::Value::Float(v)));
        }
        if let Some(v) = self.hidden_size {
            out.push(("model.hidden_size", int(v as u64)));
        }
        if let Some(v) = self.embedding_size {
            out.push(("model.embedding_size", int(v as u64)));
        }
        if let Some(v) = self.dropout_rate {
            out.push(("model.dropout_rate", toml::Value::Float(v)));
        }
        out
    }
}

fn merge(base: &mut toml::Value, top: toml::Value) {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}

fn set_path(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = root;
    for (i, p) in parts.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| fail::config(format!("`{key}`: `{}` is not a table", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            table.insert(p.to_string(), value);
            return Ok(());
        }
        cur = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    Err(fail::config(format!("empty key in `{key}`")))
}

/// Parse `value` as a TOML literal, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl RunConfig {
    pub fn resolve(file: Option<&Path>, ov: &Overrides) -> Result<RunConfig> {
        let mut root = toml::Value::try_from(RunConfig::default()).context("serializing defaults")?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let table: toml::Table = text
                .parse()
                .map_err(|e| fail::config(format!("{}: {e}", path.display())))?;
            merge(&mut root, toml::Value::Table(table));
        }
        for s in &ov.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| fail::config(format!("--set expects KEY=VALUE, got `{s}`")))?;
            set_path(&mut root, k.trim(), parse_value(v.trim()))?;
        }
        for (k, v) in ov.pairs() {
            set_path(&mut root, k, v)?;
        }
        let cfg: RunConfig = root.try_into().map_err(|e| fail::config(format!("{e}")))?;
        cfg.model.validate().map_err(|e| fail::tag(Kind::Config, e.into()))?;
        cfg.train.validate().map_err(|e| fail::tag(Kind::Config, e.into()))?;
        Ok(cfg)
    }

    /// Data directory: explicit flag, then config, then the environment.
    pub fn data_dir(&self, flag: Option<&Path>) -> Result<PathBuf> {
        flag.map(Path::to_path_buf)
            .or_else(|| self.data.dir.clone())
            .or_else(|| std::env::var_os(DATA_ENV).map(PathBuf::from))
            .ok_or_else(|| fail::config(format!("no data directory: pass --data, set data.dir or {DATA_ENV}")))
    }
}
