//! Run configuration: TOML with strict key checking and documented defaults.
//!
//! Every key is optional. Missing keys take the defaults below; unknown keys
//! and type mismatches are rejected with the full key path.

use serde::{Deserialize, Serialize};
use toml::Value;

use crate::blend::TrackerMode;
use crate::datagen::{AugmentSpec, DatasetSpec};
use crate::error::{Error, Result};
use crate::learner::LossConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: vec![32],
            feature_dim: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BankConfig {
    #[serde(rename = "L")]
    pub queue_len: usize,
    #[serde(rename = "T_proto")]
    pub t_proto: f64,
    pub balanced_queue: bool,
    pub use_ema_encoder: bool,
}

impl Default for BankConfig {
    fn default() -> Self {
        BankConfig {
            queue_len: 256,
            t_proto: 0.05,
            balanced_queue: true,
            use_ema_encoder: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerConfig {
    pub segment_len: usize,
    #[serde(rename = "T_dist")]
    pub t_dist: f64,
    pub mode: TrackerMode,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            segment_len: 100,
            t_dist: 1.5,
            mode: TrackerMode::Snapshot,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
    /// EMA decay for the momentum encoder.
    pub rho: f64,
    #[serde(rename = "B")]
    pub batch_size: usize,
    /// Unlabeled batch ratio.
    pub mu: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 0.03,
            momentum: 0.9,
            weight_decay: 5e-4,
            nesterov: true,
            rho: 0.999,
            batch_size: 64,
            mu: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub total_steps: u64,
    pub eval_interval: u64,
    /// Evaluations feeding the median summary.
    pub median_k: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<String>,
    pub dataset: DatasetSpec,
    pub augment: AugmentSpec,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub bank: BankConfig,
    pub tracker: TrackerConfig,
    pub optim: OptimConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            total_steps: 10_000,
            eval_interval: 500,
            median_k: 20,
            out_dir: None,
            dataset: DatasetSpec::default(),
            augment: AugmentSpec::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            bank: BankConfig::default(),
            tracker: TrackerConfig::default(),
            optim: OptimConfig::default(),
        }
    }
}

/// Keys that may be absent from the serialized defaults.
const OPTIONAL_KEYS: &[(&str, ValueKind)] = &[("out_dir", ValueKind::Str), ("loss.ramp_up", ValueKind::Float)];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ValueKind {
    Str,
    Int,
    Float,
    Bool,
    Array,
    Table,
    Other,
}

fn kind(v: &Value) -> ValueKind {
    match v {
        Value::String(_) => ValueKind::Str,
        Value::Integer(_) => ValueKind::Int,
        Value::Float(_) => ValueKind::Float,
        Value::Boolean(_) => ValueKind::Bool,
        Value::Array(_) => ValueKind::Array,
        Value::Table(_) => ValueKind::Table,
        _ => ValueKind::Other,
    }
}

fn compatible(expected: ValueKind, got: ValueKind) -> bool {
    expected == got || (expected == ValueKind::Float && got == ValueKind::Int)
}

fn check_schema(user: &toml::Table, schema: &toml::Table, prefix: &str) -> Result<()> {
    for (key, val) in user {
        let path = if prefix.is_empty() {
            key.clone()
        } else {
            format!("{prefix}.{key}")
        };
        let expected = match schema.get(key) {
            Some(s) => kind(s),
            None => match OPTIONAL_KEYS.iter().find(|(k, _)| *k == path) {
                Some((_, k)) => *k,
                None => return Err(Error::config(path, "unknown key")),
            },
        };
        if !compatible(expected, kind(val)) {
            return Err(Error::config(
                path,
                format!("expected {expected:?}, found {:?}", kind(val)).to_lowercase(),
            ));
        }
        if let (Value::Table(u), Some(Value::Table(s))) = (val, schema.get(key)) {
            check_schema(u, s, &path)?;
        }
    }
    Ok(())
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let user: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("<document>", e.message().to_string()))?;
        let schema = toml::Table::try_from(RunConfig::default()).expect("defaults serialize");
        check_schema(&user, &schema, "")?;
        let cfg: RunConfig = Value::Table(user)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config("<document>", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.augment.validate()?;
        self.loss.validate()?;
        if self.model.feature_dim == 0 || self.model.hidden.contains(&0) {
            return Err(Error::config("model", "layer widths must be positive"));
        }
        if self.bank.queue_len == 0 {
            return Err(Error::config("bank.L", "must be positive"));
        }
        if !(self.bank.t_proto > 0.0) || !self.bank.t_proto.is_finite() {
            return Err(Error::config("bank.T_proto", "must be positive"));
        }
        if self.tracker.segment_len == 0 {
            return Err(Error::config("tracker.segment_len", "must be positive"));
        }
        if !(self.tracker.t_dist > 0.0) || !self.tracker.t_dist.is_finite() {
            return Err(Error::config("tracker.T_dist", "must be positive"));
        }
        let o = &self.optim;
        if !(o.lr > 0.0) {
            return Err(Error::config("optim.lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&o.momentum) {
            return Err(Error::config("optim.momentum", "must lie in [0, 1)"));
        }
        if !(o.weight_decay >= 0.0) {
            return Err(Error::config("optim.weight_decay", "must be non-negative"));
        }
        if !(0.0..=1.0).contains(&o.rho) {
            return Err(Error::config("optim.rho", "must lie in [0, 1]"));
        }
        if o.batch_size == 0 {
            return Err(Error::config("optim.B", "must be positive"));
        }
        if o.mu == 0 {
            return Err(Error::config("optim.mu", "must be positive"));
        }
        if self.eval_interval == 0 {
            return Err(Error::config("eval_interval", "must be positive"));
        }
        if !self.total_steps.is_multiple_of(self.eval_interval) {
            return Err(Error::config("eval_interval", "must divide total_steps"));
        }
        if self.median_k == 0 {
            return Err(Error::config("median_k", "must be positive"));
        }
        Ok(())
    }

    /// Applies a dotted-key override, e.g. `("tracker.T_dist", 0.3)`, and
    /// re-validates through the strict parser.
    pub fn with_override(&self, key: &str, value: Value) -> Result<Self> {
        let mut table = toml::Table::try_from(self).expect("config serializes");
        let mut parts: Vec<&str> = key.split('.').collect();
        let last = parts.pop().ok_or_else(|| Error::config(key, "empty key"))?;
        let mut cur = &mut table;
        for p in parts {
            cur = match cur
                .entry(p.to_string())
                .or_insert_with(|| Value::Table(Default::default()))
            {
                Value::Table(t) => t,
                _ => return Err(Error::config(key, "not a table")),
            };
        }
        cur.insert(last.to_string(), value);
        Self::parse(&toml::to_string(&table).expect("table serializes"))
    }
}
