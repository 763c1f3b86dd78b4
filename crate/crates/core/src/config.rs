//! Run configuration: a TOML file with one table per stage.
//!
//! ```toml
//! seed = 7
//! output_dir = "runs/us"
//!
//! [data]
//! assets = ["data/a.csv", "data/b.csv", "data/c.csv"]
//! train_start = "2012-01-01"
//! train_end = "2016-12-31"
//! test_start = "2017-01-01"
//! test_end = "2017-12-31"
//!
//! [train]
//! epochs = 200
//! ```
//!
//! Every omitted key takes its default. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::environment::EpisodeConfig;
use crate::marketdata::{CsvSchema, MarketData};
use crate::qnet::{Encoder, NetworkShape, PretrainConfig, QNetwork};
use crate::trainer::{EpsilonSchedule, TrainerConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config syntax: {0}")]
    Syntax(String),
    #[error("bad override '{0}': expected section.key=value")]
    Override(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub data: DataSection,
    #[serde(default)]
    pub trading: TradingSection,
    #[serde(default)]
    pub network: NetworkSection,
    #[serde(default)]
    pub pretrain: PretrainSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub backtest: BacktestSection,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub assets: Vec<PathBuf>,
    pub train_start: NaiveDate,
    pub train_end: NaiveDate,
    pub test_start: NaiveDate,
    pub test_end: NaiveDate,
    #[serde(default)]
    pub schema: CsvSchema,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TradingSection {
    pub initial_value: f64,
    pub delta: f64,
    pub cost_sell: f64,
    pub cost_buy: f64,
    /// Cash first; empty means equal weights over cash and every asset.
    pub initial_weights: Vec<f64>,
}

impl Default for TradingSection {
    fn default() -> Self {
        Self {
            initial_value: 1_000_000.0,
            delta: 10_000.0,
            cost_sell: 0.0025,
            cost_buy: 0.0025,
            initial_weights: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSection {
    pub window: usize,
    pub encoder_hidden: usize,
    pub latent: usize,
    pub regressor_hidden: Vec<usize>,
    /// Keep training the encoder during Q-learning.
    pub fine_tune_encoder: bool,
    /// Start the output layer at zero so every action value begins at 0.
    pub zero_output_init: bool,
}

impl Default for NetworkSection {
    fn default() -> Self {
        Self {
            window: 20,
            encoder_hidden: 128,
            latent: 20,
            regressor_hidden: vec![64, 32],
            fine_tune_encoder: false,
            zero_output_init: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let d = PretrainConfig::default();
        Self {
            epochs: d.epochs,
            learning_rate: d.learning_rate,
            batch_size: d.batch_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub gamma: f64,
    pub beta: f64,
    pub learning_rate: f64,
    pub memory_capacity: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_decay_fraction: f64,
    /// Write a checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainerConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            gamma: t.gamma,
            beta: t.beta,
            learning_rate: t.learning_rate,
            memory_capacity: t.memory_capacity,
            epsilon_start: t.epsilon.start,
            epsilon_end: t.epsilon.end,
            epsilon_decay_fraction: t.epsilon.decay_fraction,
            checkpoint_every: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BacktestSection {
    pub random_samples: usize,
}

impl Default for BacktestSection {
    fn default() -> Self {
        Self { random_samples: 30 }
    }
}

/// Bar indices of the training and test ranges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Periods {
    pub train_first: usize,
    pub train_last: usize,
    pub test_first: usize,
    pub test_last: usize,
}

/// Applies `section.key=value` overrides to a parsed document. Values are
/// read as TOML literals, falling back to plain strings.
pub fn apply_overrides(doc: &mut toml::Table, overrides: &[String]) -> Result<(), ConfigError> {
    for o in overrides {
        let (path, raw) = o
            .split_once('=')
            .ok_or_else(|| ConfigError::Override(o.clone()))?;
        let keys: Vec<&str> = path.trim().split('.').collect();
        if keys.iter().any(|k| k.is_empty()) {
            return Err(ConfigError::Override(o.clone()));
        }
        let value = parse_literal(raw.trim());
        let mut table = &mut *doc;
        for k in &keys[..keys.len() - 1] {
            let entry = table
                .entry(k.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            table = entry
                .as_table_mut()
                .ok_or_else(|| ConfigError::Override(o.clone()))?;
        }
        table.insert(keys[keys.len() - 1].to_string(), value);
    }
    Ok(())
}

fn parse_literal(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut doc: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string()))?;
        apply_overrides(&mut doc, overrides)?;
        let cfg: RunConfig = doc
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative asset paths become absolute paths
    /// under its directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_toml_str(&text, overrides)?;
        let base =
            std::path::absolute(path.parent().unwrap_or(Path::new("."))).map_err(|source| {
                ConfigError::Io {
                    path: path.to_path_buf(),
                    source,
                }
            })?;
        for p in &mut cfg.data.assets {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let d = &self.data;
        if d.assets.is_empty() {
            return bad("data.assets is empty".into());
        }
        if d.train_start > d.train_end || d.test_start > d.test_end {
            return bad("date range start after end".into());
        }
        if d.train_end >= d.test_start {
            return bad(format!(
                "training ends {} on or after test start {}",
                d.train_end, d.test_start
            ));
        }
        let t = &self.trading;
        if t.initial_value.is_nan() || t.initial_value <= 0.0 || t.delta.is_nan() || t.delta <= 0.0
        {
            return bad("trading.initial_value and trading.delta must be > 0".into());
        }
        if !(0.0..1.0).contains(&t.cost_sell) || !(0.0..1.0).contains(&t.cost_buy) {
            return bad("cost rates must lie in [0, 1)".into());
        }
        if !t.initial_weights.is_empty() && t.initial_weights.len() != d.assets.len() + 1 {
            return bad(format!(
                "trading.initial_weights has {} entries, expected {}",
                t.initial_weights.len(),
                d.assets.len() + 1
            ));
        }
        let n = &self.network;
        if n.window == 0
            || n.encoder_hidden == 0
            || n.latent == 0
            || n.regressor_hidden.contains(&0)
        {
            return bad("network sizes must be >= 1".into());
        }
        let p = &self.pretrain;
        if p.batch_size == 0 || p.learning_rate.is_nan() || p.learning_rate < 0.0 {
            return bad("pretrain.batch_size >= 1 and learning_rate >= 0 required".into());
        }
        let tr = &self.train;
        if tr.batch_size == 0 || tr.memory_capacity < tr.batch_size {
            return bad("train.batch_size must be >= 1 and <= memory_capacity".into());
        }
        if !(0.0..=1.0).contains(&tr.gamma)
            || tr.beta.is_nan()
            || tr.beta <= 0.0
            || tr.beta >= 1.0
            || tr.learning_rate.is_nan()
            || tr.learning_rate < 0.0
        {
            return bad("train.gamma in [0,1], beta in (0,1), learning_rate >= 0 required".into());
        }
        for (k, v) in [
            ("epsilon_start", tr.epsilon_start),
            ("epsilon_end", tr.epsilon_end),
            ("epsilon_decay_fraction", tr.epsilon_decay_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("train.{k} = {v} outside [0, 1]"));
            }
        }
        if self.backtest.random_samples == 0 {
            return bad("backtest.random_samples must be >= 1".into());
        }
        Ok(())
    }

    pub fn assets(&self) -> usize {
        self.data.assets.len()
    }

    pub fn episode_config(&self) -> EpisodeConfig {
        let assets = self.assets();
        let t = &self.trading;
        EpisodeConfig {
            assets,
            window: self.network.window,
            delta: t.delta,
            cost_sell: t.cost_sell,
            cost_buy: t.cost_buy,
            initial_value: t.initial_value,
            initial_weights: if t.initial_weights.is_empty() {
                EpisodeConfig::equal_weights(assets)
            } else {
                t.initial_weights.clone()
            },
        }
    }

    pub fn network_shape(&self) -> NetworkShape {
        NetworkShape {
            assets: self.assets(),
            window: self.network.window,
            encoder_hidden: self.network.encoder_hidden,
            latent: self.network.latent,
            regressor_hidden: self.network.regressor_hidden.clone(),
        }
    }

    /// Q-network around a pretrained encoder, honouring the network flags.
    pub fn build_network(&self, encoder: Encoder) -> QNetwork {
        let mut net = QNetwork::with_encoder(&self.network_shape(), encoder, self.seed);
        net.encoder_frozen = !self.network.fine_tune_encoder;
        if self.network.zero_output_init {
            net.zero_output_layer();
        }
        net
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.pretrain.epochs,
            learning_rate: self.pretrain.learning_rate,
            batch_size: self.pretrain.batch_size,
            seed: self.seed,
        }
    }

    pub fn trainer_config(&self) -> TrainerConfig {
        let t = &self.train;
        TrainerConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            gamma: t.gamma,
            beta: t.beta,
            learning_rate: t.learning_rate,
            memory_capacity: t.memory_capacity,
            epsilon: EpsilonSchedule {
                start: t.epsilon_start,
                end: t.epsilon_end,
                decay_fraction: t.epsilon_decay_fraction,
            },
            seed: self.seed,
        }
    }

    /// Maps the configured dates onto bar indices of `market`.
    pub fn periods(&self, market: &MarketData) -> Result<Periods, ConfigError> {
        let d = &self.data;
        let window = self.network.window;
        let missing =
            |what: &str| ConfigError::Invalid(format!("{what} lies outside the aligned data"));
        let train_first = market
            .index_at_or_after(d.train_start)
            .ok_or_else(|| missing("train_start"))?
            .max(window);
        let train_last = market
            .index_at_or_before(d.train_end)
            .ok_or_else(|| missing("train_end"))?;
        let test_first = market
            .index_at_or_after(d.test_start)
            .ok_or_else(|| missing("test_start"))?;
        let test_last = market
            .index_at_or_before(d.test_end)
            .ok_or_else(|| missing("test_end"))?;
        if train_last <= train_first {
            return Err(ConfigError::Invalid(format!(
                "training range has no tradable periods with window {window}"
            )));
        }
        if test_first < window || test_last <= test_first {
            return Err(ConfigError::Invalid(format!(
                "test range needs at least two bars after a full window of {window}"
            )));
        }
        Ok(Periods {
            train_first,
            train_last,
            test_first,
            test_last,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[data]
assets = ["a.csv", "b.csv"]
train_start = "2012-01-01"
train_end = "2016-12-31"
test_start = "2017-01-01"
test_end = "2017-12-31"
"#;

    #[test]
    fn defaults_fill_every_section() {
        let cfg = RunConfig::from_toml_str(MINIMAL, &[]).unwrap();
        assert_eq!(cfg.network.window, 20);
        assert_eq!(cfg.train.learning_rate, 1e-7);
        assert_eq!(cfg.train.beta, 0.3);
        assert_eq!(cfg.train.gamma, 0.9);
        assert_eq!(cfg.train.memory_capacity, 2000);
        assert_eq!(cfg.train.epochs, 500);
        assert_eq!(cfg.train.batch_size, 32);
        assert_eq!((cfg.network.encoder_hidden, cfg.network.latent), (128, 20));
        assert_eq!(cfg.network.regressor_hidden, vec![64, 32]);
        assert_eq!(cfg.trading.initial_value, 1e6);
        assert_eq!(cfg.trading.delta, 1e4);
        assert_eq!(cfg.trading.cost_sell, 0.0025);
        assert_eq!(cfg.episode_config().initial_weights, vec![1.0 / 3.0; 3]);
        assert_eq!(cfg.network_shape().regressor_input(), 43);
    }

    #[test]
    fn overrides_and_unknown_keys() {
        let cfg = RunConfig::from_toml_str(
            MINIMAL,
            &[
                "train.epochs=7".into(),
                "network.regressor_hidden=[8]".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.network.regressor_hidden, vec![8]);
        assert!(matches!(
            RunConfig::from_toml_str(MINIMAL, &["train.epoch=7".into()]),
            Err(ConfigError::Syntax(_))
        ));
        assert!(RunConfig::from_toml_str(
            &format!("{MINIMAL}\n[train]\nlearning_rat = 1.0\n"),
            &[]
        )
        .is_err());
        assert!(matches!(
            RunConfig::from_toml_str(MINIMAL, &["noequals".into()]),
            Err(ConfigError::Override(_))
        ));
        assert!(matches!(
            RunConfig::from_toml_str(MINIMAL, &["train.gamma=1.5".into()]),
            Err(ConfigError::Invalid(_))
        ));
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = RunConfig::from_toml_str(
            MINIMAL,
            &["seed=42".into(), "train.learning_rate=3.3e-9".into()],
        )
        .unwrap();
        let back = RunConfig::from_toml_str(&cfg.to_toml(), &[]).unwrap();
        assert_eq!(back, cfg);
    }
}
