//! Training configuration and its flat `key = value` file format.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::FusionMode;

/// Initial decoder state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderInit {
    /// Final `(h, c)` of the forward encoder.
    #[default]
    Encoder,
    Zero,
}

impl DecoderInit {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "encoder" => Ok(DecoderInit::Encoder),
            "zero" => Ok(DecoderInit::Zero),
            other => Err(Error::Config(format!("unknown decoder_init {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DecoderInit::Encoder => "encoder",
            DecoderInit::Zero => "zero",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Word embedding size.
    pub d: usize,
    /// Dropout after the embedding lookup.
    pub q1: f64,
    /// Dropout on the classifier input.
    pub q2: f64,
    /// Learning rate of the encoder-decoder group.
    pub lr1: f64,
    /// Learning rate of the classifier group.
    pub lr2: f64,
    /// k-max pooling constant.
    pub k: usize,
    /// Weight of the decoder loss in the joint objective.
    pub w: f64,
    /// L2 coefficient.
    pub lambda: f64,

    pub hidden: usize,
    pub init_range: f64,
    pub forget_bias_one: bool,
    pub fusion: FusionMode,
    pub decoder_init: DecoderInit,
    pub train_embeddings: bool,
    pub l2_embeddings: bool,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,

    pub phase1_max_epochs: usize,
    pub phase1_patience: usize,
    pub phase2_max_epochs: usize,
    /// 0 disables early stopping in phase 2.
    pub phase2_patience: usize,
    /// Stop phase 2 once training accuracy reaches this value; 0 disables.
    pub phase2_target_train_accuracy: f64,
    pub skip_phase1: bool,
    pub teacher_prob_start: f64,
    pub teacher_prob_end: f64,
    pub batch_size: usize,

    pub seed: u64,
    pub min_count: usize,
    pub exclude_self: bool,
    pub track_train_accuracy: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            d: 100,
            q1: 0.5,
            q2: 0.2,
            lr1: 2.5e-3,
            lr2: 5e-3,
            k: 5,
            w: 0.2,
            lambda: 5e-4,
            hidden: 100,
            init_range: 0.1,
            forget_bias_one: true,
            fusion: FusionMode::Sum,
            decoder_init: DecoderInit::Encoder,
            train_embeddings: true,
            l2_embeddings: true,
            grad_clip: 0.0,
            phase1_max_epochs: 30,
            phase1_patience: 5,
            phase2_max_epochs: 30,
            phase2_patience: 5,
            phase2_target_train_accuracy: 0.0,
            skip_phase1: false,
            teacher_prob_start: 1.0,
            teacher_prob_end: 0.5,
            batch_size: 1,
            seed: 1,
            min_count: 1,
            exclude_self: true,
            track_train_accuracy: false,
        }
    }
}

/// Every accepted key, in file order.
pub const KEYS: [&str; 29] = [
    "d",
    "q1",
    "q2",
    "lr1",
    "lr2",
    "k",
    "w",
    "lambda",
    "hidden",
    "init_range",
    "forget_bias_one",
    "fusion",
    "decoder_init",
    "train_embeddings",
    "l2_embeddings",
    "grad_clip",
    "phase1_max_epochs",
    "phase1_patience",
    "phase2_max_epochs",
    "phase2_patience",
    "phase2_target_train_accuracy",
    "skip_phase1",
    "teacher_prob_start",
    "teacher_prob_end",
    "batch_size",
    "seed",
    "min_count",
    "exclude_self",
    "track_train_accuracy",
];

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "d" => self.d = num(key, v)?,
            "q1" => self.q1 = num(key, v)?,
            "q2" => self.q2 = num(key, v)?,
            "lr1" => self.lr1 = num(key, v)?,
            "lr2" => self.lr2 = num(key, v)?,
            "k" => self.k = num(key, v)?,
            "w" => self.w = num(key, v)?,
            "lambda" => self.lambda = num(key, v)?,
            "hidden" => self.hidden = num(key, v)?,
            "init_range" => self.init_range = num(key, v)?,
            "forget_bias_one" => self.forget_bias_one = flag(key, v)?,
            "fusion" => self.fusion = FusionMode::parse(v)?,
            "decoder_init" => self.decoder_init = DecoderInit::parse(v)?,
            "train_embeddings" => self.train_embeddings = flag(key, v)?,
            "l2_embeddings" => self.l2_embeddings = flag(key, v)?,
            "grad_clip" => self.grad_clip = num(key, v)?,
            "phase1_max_epochs" => self.phase1_max_epochs = num(key, v)?,
            "phase1_patience" => self.phase1_patience = num(key, v)?,
            "phase2_max_epochs" => self.phase2_max_epochs = num(key, v)?,
            "phase2_patience" => self.phase2_patience = num(key, v)?,
            "phase2_target_train_accuracy" => self.phase2_target_train_accuracy = num(key, v)?,
            "skip_phase1" => self.skip_phase1 = flag(key, v)?,
            "teacher_prob_start" => self.teacher_prob_start = num(key, v)?,
            "teacher_prob_end" => self.teacher_prob_end = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "min_count" => self.min_count = num(key, v)?,
            "exclude_self" => self.exclude_self = flag(key, v)?,
            "track_train_accuracy" => self.track_train_accuracy = flag(key, v)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Apply a `key = value` text on top of `self`. Missing keys keep
    /// their current values; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value, got {raw:?}", i + 1))
            })?;
            self.set(key.trim(), value)
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, strip_class(&e))))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.hidden == 0 {
            return bad("d and hidden must be positive".into());
        }
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.w) {
            return bad(format!("w = {} outside [0, 1]", self.w));
        }
        for (name, q) in [("q1", self.q1), ("q2", self.q2)] {
            if !(0.0..1.0).contains(&q) {
                return bad(format!("{name} = {q} outside [0, 1)"));
            }
        }
        for (name, p) in [
            ("teacher_prob_start", self.teacher_prob_start),
            ("teacher_prob_end", self.teacher_prob_end),
            ("phase2_target_train_accuracy", self.phase2_target_train_accuracy),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} outside [0, 1]"));
            }
        }
        if self.lr1 <= 0.0 || self.lr2 <= 0.0 || self.lambda < 0.0 || self.grad_clip < 0.0 {
            return bad("learning rates must be positive; lambda and grad_clip non-negative".into());
        }
        if self.init_range <= 0.0 || !self.init_range.is_finite() {
            return bad(format!("init_range = {} must be positive", self.init_range));
        }
        if self.batch_size == 0 || self.min_count == 0 {
            return bad("batch_size and min_count must be at least 1".into());
        }
        if self.phase2_max_epochs == 0 {
            return bad("phase2_max_epochs must be at least 1".into());
        }
        Ok(())
    }

    fn value_of(&self, key: &str) -> String {
        match key {
            "d" => self.d.to_string(),
            "q1" => self.q1.to_string(),
            "q2" => self.q2.to_string(),
            "lr1" => self.lr1.to_string(),
            "lr2" => self.lr2.to_string(),
            "k" => self.k.to_string(),
            "w" => self.w.to_string(),
            "lambda" => self.lambda.to_string(),
            "hidden" => self.hidden.to_string(),
            "init_range" => self.init_range.to_string(),
            "forget_bias_one" => self.forget_bias_one.to_string(),
            "fusion" => self.fusion.name().to_string(),
            "decoder_init" => self.decoder_init.name().to_string(),
            "train_embeddings" => self.train_embeddings.to_string(),
            "l2_embeddings" => self.l2_embeddings.to_string(),
            "grad_clip" => self.grad_clip.to_string(),
            "phase1_max_epochs" => self.phase1_max_epochs.to_string(),
            "phase1_patience" => self.phase1_patience.to_string(),
            "phase2_max_epochs" => self.phase2_max_epochs.to_string(),
            "phase2_patience" => self.phase2_patience.to_string(),
            "phase2_target_train_accuracy" => self.phase2_target_train_accuracy.to_string(),
            "skip_phase1" => self.skip_phase1.to_string(),
            "teacher_prob_start" => self.teacher_prob_start.to_string(),
            "teacher_prob_end" => self.teacher_prob_end.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "seed" => self.seed.to_string(),
            "min_count" => self.min_count.to_string(),
            "exclude_self" => self.exclude_self.to_string(),
            "track_train_accuracy" => self.track_train_accuracy.to_string(),
            _ => unreachable!("unknown key {key}"),
        }
    }

    /// The config as a `key = value` file that [`TrainConfig::parse`] reads back.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in KEYS {
            let _ = writeln!(s, "{key} = {}", self.value_of(key));
        }
        s
    }

    /// Teacher-forcing probability for a phase-1 epoch (1-based), decaying
    /// linearly from start to end over the phase-1 budget.
    pub fn teacher_prob(&self, phase1_epoch: usize) -> f64 {
        let span = self.phase1_max_epochs.saturating_sub(1);
        if span == 0 {
            return self.teacher_prob_start;
        }
        let t = (phase1_epoch.saturating_sub(1)).min(span) as f64 / span as f64;
        self.teacher_prob_start + t * (self.teacher_prob_end - self.teacher_prob_start)
    }
}

fn strip_class(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_settings() {
        let c = TrainConfig::default();
        assert_eq!(c.d, 100);
        assert_eq!(c.q1, 0.5);
        assert_eq!(c.q2, 0.2);
        assert_eq!(c.lr1, 2.5e-3);
        assert_eq!(c.lr2, 5e-3);
        assert_eq!(c.k, 5);
        assert_eq!(c.w, 0.2);
        assert_eq!(c.lambda, 5e-4);
        c.validate().unwrap();
    }

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(TrainConfig::parse("# nothing\n\n").unwrap(), TrainConfig::default());
    }

    #[test]
    fn text_round_trip() {
        let mut c = TrainConfig::default();
        c.set("hidden", "32").unwrap();
        c.set("fusion", "concat").unwrap();
        c.set("w", "0.35").unwrap();
        c.set("decoder_init", "zero").unwrap();
        assert_eq!(TrainConfig::parse(&c.to_text()).unwrap(), c);
        assert_eq!(c.to_text().lines().count(), KEYS.len());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        assert!(matches!(TrainConfig::parse("dropout = 0.1"), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::parse("k = five"), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::parse("w = 1.5"), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::parse("k = 0"), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::parse("just words"), Err(Error::Config(_))));
        let e = TrainConfig::parse("d = 10\nbogus = 1").unwrap_err().to_string();
        assert!(e.contains("line 2"), "{e}");
    }

    #[test]
    fn teacher_prob_decays_linearly() {
        let c = TrainConfig {
            phase1_max_epochs: 11,
            ..TrainConfig::default()
        };
        assert_eq!(c.teacher_prob(1), 1.0);
        assert!((c.teacher_prob(6) - 0.75).abs() < 1e-12);
        assert_eq!(c.teacher_prob(11), 0.5);
        assert_eq!(c.teacher_prob(40), 0.5);
    }
}
