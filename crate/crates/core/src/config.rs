//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::contrastive::LossConfig;
use crate::encoder::{EncoderConfig, PrefixMode, Reparam};
use crate::evaluator::FilterMode;
use crate::trainer::{FreezePolicy, TrainConfig};
use crate::verbalizer::{Budgets, ContextForm, HistoryConfig, HistoryOrder};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, found {text:?}")]
    Malformed { line: usize, text: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("bad value {value:?} for {key}: {reason}")]
    BadValue { key: String, value: String, reason: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    Transductive,
    InductiveZeroShot,
    InductiveKShot,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Transductive => "transductive",
            Protocol::InductiveZeroShot => "inductive_zero_shot",
            Protocol::InductiveKShot => "inductive_k_shot",
        }
    }
}

/// Every tunable of a run. Paths left empty are unset.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: PathBuf,
    pub valid: PathBuf,
    pub test: PathBuf,
    pub entity_descriptions: PathBuf,
    pub relation_descriptions: PathBuf,
    /// File of unseen entity names, one per line.
    pub unseen_entities: PathBuf,
    pub unseen_fraction: f64,
    pub shots: usize,
    pub split_seed: u64,
    pub output_dir: PathBuf,

    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub prefix_len: usize,
    pub max_len: usize,
    pub reparam: String,
    pub reparam_hidden: usize,
    pub prefix_mode: String,
    pub ffn_mult: usize,
    pub init_std: f64,

    pub tau_init: f64,
    pub margin: f64,
    pub pre_batch_depth: usize,
    pub self_negatives: bool,
    pub tau_min: f64,

    pub history_order: String,
    pub context_form: String,
    pub history_max_items: usize,
    pub history_strict_past: bool,
    pub history_exclude_gold: bool,
    pub description_budget: usize,
    pub total_budget: usize,

    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub freeze_policy: String,
    pub grad_clip: f64,
    pub weight_decay: f64,
    /// 0 means no cap.
    pub max_in_batch: usize,
    /// Full-backbone epochs run before the main phase.
    pub pretrain_epochs: usize,
    pub pretrain_learning_rate: f64,
    pub finetune_steps: usize,
    pub few_shot_history: bool,
    pub few_shot_finetune: bool,

    pub protocol: String,
    pub filter: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let enc = EncoderConfig::default();
        let loss = LossConfig::default();
        let hist = HistoryConfig::default();
        let budgets = Budgets::default();
        let train = TrainConfig::default();
        RunConfig {
            train: PathBuf::new(),
            valid: PathBuf::new(),
            test: PathBuf::new(),
            entity_descriptions: PathBuf::new(),
            relation_descriptions: PathBuf::new(),
            unseen_entities: PathBuf::new(),
            unseen_fraction: 0.0,
            shots: 0,
            split_seed: 0,
            output_dir: PathBuf::from("run"),
            layers: enc.layers,
            width: enc.width,
            heads: enc.heads,
            prefix_len: enc.prefix_len,
            max_len: enc.max_len,
            reparam: "embedding".into(),
            reparam_hidden: 128,
            prefix_mode: "hidden".into(),
            ffn_mult: enc.ffn_mult,
            init_std: enc.init_std,
            tau_init: loss.init_tau,
            margin: loss.margin,
            pre_batch_depth: loss.pre_batch_depth,
            self_negatives: loss.use_self_negatives,
            tau_min: loss.tau_min,
            history_order: "descending".into(),
            context_form: "pairs".into(),
            history_max_items: hist.max_items,
            history_strict_past: hist.strict_past,
            history_exclude_gold: hist.exclude_gold,
            description_budget: budgets.description,
            total_budget: budgets.total,
            learning_rate: train.learning_rate,
            epochs: train.epochs,
            batch_size: train.batch_size,
            seed: train.seed,
            freeze_policy: train.freeze_policy.as_str().into(),
            grad_clip: train.grad_clip,
            weight_decay: train.weight_decay,
            max_in_batch: 0,
            pretrain_epochs: 0,
            pretrain_learning_rate: 1e-3,
            finetune_steps: train.finetune_steps,
            few_shot_history: true,
            few_shot_finetune: true,
            protocol: "transductive".into(),
            filter: "time_aware".into(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue { key: key.into(), value: value.into(), reason: e.to_string() })
}

fn bad(key: &str, value: &str, reason: &str) -> ConfigError {
    ConfigError::BadValue { key: key.into(), value: value.into(), reason: reason.into() }
}

/// Declares the key table once: name, field, and how values are read and
/// printed.
macro_rules! keys {
    ($($key:literal => $field:ident : $kind:ident),* $(,)?) => {
        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$($key),*];

            /// Sets one key from its text value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
                match key {
                    $($key => keys!(@set self, $field, $kind, key, value),)*
                    _ => return Err(ConfigError::UnknownKey { line: 0, key: key.into() }),
                }
                Ok(())
            }

            /// Every key with its current value, in declaration order.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$(($key, keys!(@get self, $field, $kind))),*]
            }
        }
    };
    (@set $s:ident, $f:ident, path, $k:ident, $v:ident) => { $s.$f = PathBuf::from($v) };
    (@set $s:ident, $f:ident, text, $k:ident, $v:ident) => { $s.$f = $v.to_string() };
    (@set $s:ident, $f:ident, value, $k:ident, $v:ident) => { $s.$f = parse($k, $v)? };
    (@get $s:ident, $f:ident, path) => { $s.$f.display().to_string() };
    (@get $s:ident, $f:ident, text) => { $s.$f.clone() };
    (@get $s:ident, $f:ident, value) => { $s.$f.to_string() };
}

keys! {
    "train" => train: path,
    "valid" => valid: path,
    "test" => test: path,
    "entity_descriptions" => entity_descriptions: path,
    "relation_descriptions" => relation_descriptions: path,
    "unseen_entities" => unseen_entities: path,
    "unseen_fraction" => unseen_fraction: value,
    "shots" => shots: value,
    "split_seed" => split_seed: value,
    "output_dir" => output_dir: path,
    "layers" => layers: value,
    "width" => width: value,
    "heads" => heads: value,
    "prefix_len" => prefix_len: value,
    "max_len" => max_len: value,
    "reparam" => reparam: text,
    "reparam_hidden" => reparam_hidden: value,
    "prefix_mode" => prefix_mode: text,
    "ffn_mult" => ffn_mult: value,
    "init_std" => init_std: value,
    "tau_init" => tau_init: value,
    "margin" => margin: value,
    "pre_batch_depth" => pre_batch_depth: value,
    "self_negatives" => self_negatives: value,
    "tau_min" => tau_min: value,
    "history_order" => history_order: text,
    "context_form" => context_form: text,
    "history_max_items" => history_max_items: value,
    "history_strict_past" => history_strict_past: value,
    "history_exclude_gold" => history_exclude_gold: value,
    "description_budget" => description_budget: value,
    "total_budget" => total_budget: value,
    "learning_rate" => learning_rate: value,
    "epochs" => epochs: value,
    "batch_size" => batch_size: value,
    "seed" => seed: value,
    "freeze_policy" => freeze_policy: text,
    "grad_clip" => grad_clip: value,
    "weight_decay" => weight_decay: value,
    "max_in_batch" => max_in_batch: value,
    "pretrain_epochs" => pretrain_epochs: value,
    "pretrain_learning_rate" => pretrain_learning_rate: value,
    "finetune_steps" => finetune_steps: value,
    "few_shot_history" => few_shot_history: value,
    "few_shot_finetune" => few_shot_finetune: value,
    "protocol" => protocol: text,
    "filter" => filter: text,
}

impl RunConfig {
    /// Reads `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Malformed { line: i + 1, text: raw.to_string() })?;
            cfg.set(k.trim(), v.trim()).map_err(|e| match e {
                ConfigError::UnknownKey { key, .. } => ConfigError::UnknownKey { line: i + 1, key },
                e => e,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// The effective configuration, loadable by [`RunConfig::parse`].
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Checks every enumerated value.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.reparam_mode()?;
        self.prefix_injection()?;
        self.order()?;
        self.form()?;
        self.policy()?;
        self.protocol_kind()?;
        self.filter_mode()?;
        self.encoder_config(4).validate().map_err(|e| bad("encoder", "", &e.to_string()))?;
        self.loss_config().validate().map_err(|e| bad("loss", "", &e.to_string()))?;
        self.train_config()
            .map_err(|e| bad("train", "", &e.to_string()))?
            .validate()
            .map_err(|e| bad("train", "", &e.to_string()))?;
        if !(0.0..1.0).contains(&self.unseen_fraction) {
            return Err(bad("unseen_fraction", &self.unseen_fraction.to_string(), "must lie in [0, 1)"));
        }
        Ok(())
    }

    fn reparam_mode(&self) -> Result<Reparam, ConfigError> {
        match self.reparam.as_str() {
            "embedding" => Ok(Reparam::Embedding),
            "mlp" => Ok(Reparam::Mlp { hidden: self.reparam_hidden }),
            v => Err(bad("reparam", v, "expected embedding or mlp")),
        }
    }

    fn prefix_injection(&self) -> Result<PrefixMode, ConfigError> {
        match self.prefix_mode.as_str() {
            "hidden" => Ok(PrefixMode::Hidden),
            "key_value" => Ok(PrefixMode::KeyValue),
            v => Err(bad("prefix_mode", v, "expected hidden or key_value")),
        }
    }

    fn order(&self) -> Result<HistoryOrder, ConfigError> {
        match self.history_order.as_str() {
            "descending" => Ok(HistoryOrder::Descending),
            "ascending" => Ok(HistoryOrder::Ascending),
            "random" => Ok(HistoryOrder::Random),
            v => Err(bad("history_order", v, "expected descending, ascending or random")),
        }
    }

    fn form(&self) -> Result<ContextForm, ConfigError> {
        match self.context_form.as_str() {
            "pairs" => Ok(ContextForm::Pairs),
            "entities" => Ok(ContextForm::Entities),
            v => Err(bad("context_form", v, "expected pairs or entities")),
        }
    }

    fn policy(&self) -> Result<FreezePolicy, ConfigError> {
        self.freeze_policy.parse().map_err(|e: crate::trainer::TrainError| bad("freeze_policy", &self.freeze_policy, &e.to_string()))
    }

    pub fn protocol_kind(&self) -> Result<Protocol, ConfigError> {
        match self.protocol.as_str() {
            "transductive" => Ok(Protocol::Transductive),
            "inductive_zero_shot" => Ok(Protocol::InductiveZeroShot),
            "inductive_k_shot" => Ok(Protocol::InductiveKShot),
            v => Err(bad("protocol", v, "expected transductive, inductive_zero_shot or inductive_k_shot")),
        }
    }

    pub fn filter_mode(&self) -> Result<FilterMode, ConfigError> {
        match self.filter.as_str() {
            "time_aware" => Ok(FilterMode::TimeAware),
            "raw" => Ok(FilterMode::Raw),
            v => Err(bad("filter", v, "expected time_aware or raw")),
        }
    }

    pub fn encoder_config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            layers: self.layers,
            width: self.width,
            heads: self.heads,
            prefix_len: self.prefix_len,
            max_len: self.max_len,
            vocab_size,
            reparam: self.reparam_mode().unwrap_or(Reparam::Embedding),
            prefix_mode: self.prefix_injection().unwrap_or(PrefixMode::Hidden),
            ffn_mult: self.ffn_mult,
            init_std: self.init_std,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            init_tau: self.tau_init,
            margin: self.margin,
            pre_batch_depth: self.pre_batch_depth,
            use_self_negatives: self.self_negatives,
            tau_min: self.tau_min,
        }
    }

    pub fn history_config(&self) -> HistoryConfig {
        HistoryConfig {
            order: self.order().unwrap_or(HistoryOrder::Descending),
            form: self.form().unwrap_or(ContextForm::Pairs),
            max_items: self.history_max_items,
            strict_past: self.history_strict_past,
            exclude_gold: self.history_exclude_gold,
            seed: self.seed,
        }
    }

    pub fn budgets(&self) -> Budgets {
        Budgets { description: self.description_budget, total: self.total_budget.min(self.max_len) }
    }

    pub fn train_config(&self) -> Result<TrainConfig, ConfigError> {
        Ok(TrainConfig {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            freeze_policy: self.policy()?,
            grad_clip: self.grad_clip,
            weight_decay: self.weight_decay,
            max_in_batch: (self.max_in_batch > 0).then_some(self.max_in_batch),
            finetune_steps: self.finetune_steps,
        })
    }
}
