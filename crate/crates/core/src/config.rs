//! Flat `key = value` configuration for copy-task training runs.
//!
//! ```text
//! # desk-scale run
//! layers = 2
//! heads = 4
//! model_dim = 32
//! seq_len = 32
//! vocab = 10
//! attention = linear-elu1
//! ```
//!
//! Blank lines and `#` comments are ignored. Unknown keys are errors.

use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{AttentionKind, TransformerConfig};
use crate::optim::{LrSchedule, OptimizerKind};
use crate::train::CopyTaskSpec;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    /// Total length of a copy-task sequence, separator included.
    pub seq_len: usize,
    /// Number of distinct symbols; the separator is one extra token.
    pub vocab: usize,
    pub attention: AttentionKind,
    pub lr: f64,
    /// Updates after which the learning rate drops by 10×.
    pub lr_drop_step: usize,
    pub updates: usize,
    pub batch: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub layer_norm: bool,
    pub eval_sequences: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            model_dim: 32,
            seq_len: 32,
            vocab: 10,
            attention: AttentionKind::LinearElu1,
            lr: 1e-3,
            lr_drop_step: 3000,
            updates: 5000,
            batch: 16,
            seed: 0,
            optimizer: OptimizerKind::RAdam,
            layer_norm: true,
            eval_sequences: 256,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str, line: usize) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Parse(format!("line {line}: bad value for `{key}`: {e}")))
}

impl TrainConfig {
    /// Parses `text`, starting from [`TrainConfig::default`].
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Parse(format!("line {line_no}: expected `key = value`")));
            };
            let (key, value) = (key.trim(), value.trim());
            match key {
                "layers" => cfg.layers = parse_value(key, value, line_no)?,
                "heads" => cfg.heads = parse_value(key, value, line_no)?,
                "model_dim" => cfg.model_dim = parse_value(key, value, line_no)?,
                "seq_len" => cfg.seq_len = parse_value(key, value, line_no)?,
                "vocab" => cfg.vocab = parse_value(key, value, line_no)?,
                "attention" => cfg.attention = parse_value(key, value, line_no)?,
                "lr" => cfg.lr = parse_value(key, value, line_no)?,
                "lr_drop_step" => cfg.lr_drop_step = parse_value(key, value, line_no)?,
                "updates" => cfg.updates = parse_value(key, value, line_no)?,
                "batch" => cfg.batch = parse_value(key, value, line_no)?,
                "seed" => cfg.seed = parse_value(key, value, line_no)?,
                "optimizer" => cfg.optimizer = parse_value(key, value, line_no)?,
                "layer_norm" => cfg.layer_norm = parse_value(key, value, line_no)?,
                "eval_sequences" => cfg.eval_sequences = parse_value(key, value, line_no)?,
                other => {
                    return Err(Error::Parse(format!("line {line_no}: unknown key `{other}`")))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seq_len < 3 {
            return Err(Error::Invalid("seq_len must be at least 3".into()));
        }
        if self.vocab == 0 || self.batch == 0 || self.eval_sequences == 0 {
            return Err(Error::Invalid("vocab, batch and eval_sequences must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Invalid(format!("learning rate {} is not usable", self.lr)));
        }
        self.model_config().validate()
    }

    /// Model shape for this run. The vocabulary gains the separator token.
    pub fn model_config(&self) -> TransformerConfig {
        TransformerConfig {
            max_len: self.seq_len,
            layer_norm: self.layer_norm,
            seed: self.seed,
            ..TransformerConfig::new(
                self.layers,
                self.heads,
                self.model_dim,
                self.vocab + 1,
                self.attention,
            )
        }
    }

    pub fn task_spec(&self) -> CopyTaskSpec {
        CopyTaskSpec {
            seq_len: self.seq_len,
            symbols: self.vocab,
            updates: self.updates,
            batch: self.batch,
            schedule: LrSchedule {
                base: self.lr,
                dropped: self.lr / 10.0,
                drop_step: self.lr_drop_step,
            },
            optimizer: self.optimizer,
            eval_sequences: self.eval_sequences,
            seed: self.seed,
        }
    }

    /// Serializes back into the text format.
    pub fn to_text(&self) -> String {
        format!(
            "layers = {}\nheads = {}\nmodel_dim = {}\nseq_len = {}\nvocab = {}\nattention = {}\n\
             lr = {}\nlr_drop_step = {}\nupdates = {}\nbatch = {}\nseed = {}\noptimizer = {}\n\
             layer_norm = {}\neval_sequences = {}\n",
            self.layers,
            self.heads,
            self.model_dim,
            self.seq_len,
            self.vocab,
            self.attention,
            self.lr,
            self.lr_drop_step,
            self.updates,
            self.batch,
            self.seed,
            self.optimizer,
            self.layer_norm,
            self.eval_sequences
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(TrainConfig::parse("").unwrap(), TrainConfig::default());
    }

    #[test]
    fn parses_keys_and_comments() {
        let cfg = TrainConfig::parse(
            "# comment\nlayers=3\n heads = 2 \nattention = softmax # trailing\n\nlr = 5e-4\nseed=9\n",
        )
        .unwrap();
        assert_eq!(cfg.layers, 3);
        assert_eq!(cfg.heads, 2);
        assert_eq!(cfg.attention, AttentionKind::Softmax);
        assert_eq!(cfg.lr, 5e-4);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.task_spec().schedule.dropped, 5e-5);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(TrainConfig::parse("layers").is_err());
        assert!(TrainConfig::parse("colour = red").is_err());
        assert!(TrainConfig::parse("layers = two").is_err());
        assert!(TrainConfig::parse("heads = 3").is_err());
        assert!(TrainConfig::parse("attention = rbf").is_err());
    }

    #[test]
    fn text_round_trip() {
        let cfg = TrainConfig {
            attention: AttentionKind::LinearPoly2,
            lr: 2.5e-4,
            seed: 123,
            ..TrainConfig::default()
        };
        assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn separator_extends_vocabulary() {
        assert_eq!(TrainConfig::default().model_config().vocab_size, 11);
    }
}
