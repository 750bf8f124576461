//! Flat `key = value` run configuration: defaults, then a config file, then
//! command-line overrides.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SplitCounts;
use crate::dataset::Layout;
use crate::descriptors::DEFAULT_DECIMALS;
use crate::error::{Error, Result};
use crate::model::{FusionMode, ModelConfig};
use crate::train::{AdamWConfig, SparsityMode, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub context_len: usize,
    pub base_horizon: usize,
    pub horizons: Vec<usize>,
    pub split_counts: Option<SplitCounts>,
    pub stride: usize,
    pub eval_stride: usize,
    pub segment_len: usize,
    pub prompt_decimals: usize,
    pub hidden_dim: usize,
    pub experts: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub fusion: FusionMode,
    pub text_context: bool,
    pub lr: f64,
    pub lambda: f64,
    pub sparsity_mode: SparsityMode,
    pub epochs: usize,
    pub batch: usize,
    pub max_steps: Option<usize>,
    pub weight_decay: f64,
    pub seed: u64,
    pub text_seed: u64,
    pub embeddings: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        Self {
            context_len: 672,
            base_horizon: 96,
            horizons: crate::eval::HORIZONS.to_vec(),
            split_counts: None,
            stride: 1,
            eval_stride: 1,
            segment_len: m.segment_len,
            prompt_decimals: DEFAULT_DECIMALS,
            hidden_dim: m.hidden_dim,
            experts: m.experts,
            layers: m.layers,
            heads: m.heads,
            ffn_mult: m.ffn_mult,
            fusion: m.fusion,
            text_context: m.text_context,
            lr: t.lr,
            lambda: t.lambda,
            sparsity_mode: t.sparsity_mode,
            epochs: t.epochs,
            batch: t.batch,
            max_steps: t.max_steps,
            weight_decay: t.adamw.weight_decay,
            seed: t.seed,
            text_seed: 0,
            embeddings: None,
        }
    }
}

/// Every accepted key, in the order [`RunConfig::pairs`] emits them.
pub const KEYS: [&str; 25] = [
    "context_len",
    "base_horizon",
    "horizons",
    "split_counts",
    "stride",
    "eval_stride",
    "segment_len",
    "prompt_decimals",
    "hidden_dim",
    "experts",
    "layers",
    "heads",
    "ffn_mult",
    "fusion",
    "text_context",
    "lr",
    "lambda",
    "sparsity_mode",
    "epochs",
    "batch",
    "max_steps",
    "weight_decay",
    "seed",
    "text_seed",
    "embeddings",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|v| parse::<usize>(key, v.trim()))
        .collect()
}

fn parse_optional<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    match value {
        "" | "none" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

fn join(values: &[usize]) -> String {
    values.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "context_len" => self.context_len = parse(key, v)?,
            "base_horizon" => self.base_horizon = parse(key, v)?,
            "horizons" => self.horizons = parse_list(key, v)?,
            "split_counts" => {
                self.split_counts = match v {
                    "" | "none" => None,
                    _ => match parse_list(key, v)?.as_slice() {
                        &[a, b, c] => Some(SplitCounts::new(a, b, c)),
                        _ => {
                            return Err(Error::Config(format!(
                                "split_counts needs three integers, got {v:?}"
                            )))
                        }
                    },
                }
            }
            "stride" => self.stride = parse(key, v)?,
            "eval_stride" => self.eval_stride = parse(key, v)?,
            "segment_len" => self.segment_len = parse(key, v)?,
            "prompt_decimals" => self.prompt_decimals = parse(key, v)?,
            "hidden_dim" => self.hidden_dim = parse(key, v)?,
            "experts" => self.experts = parse(key, v)?,
            "layers" => self.layers = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "ffn_mult" => self.ffn_mult = parse(key, v)?,
            "fusion" => {
                self.fusion = match v {
                    "adaptive" => FusionMode::Adaptive,
                    "series_only" => FusionMode::SeriesOnly,
                    _ => {
                        return Err(Error::Config(format!(
                            "fusion must be adaptive or series_only, got {v:?}"
                        )))
                    }
                }
            }
            "text_context" => self.text_context = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "lambda" => self.lambda = parse(key, v)?,
            "sparsity_mode" => self.sparsity_mode = v.parse()?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch" => self.batch = parse(key, v)?,
            "max_steps" => self.max_steps = parse_optional(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "text_seed" => self.text_seed = parse(key, v)?,
            "embeddings" => self.embeddings = parse_optional(key, v)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` assignments, one per line. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value, got {line:?}", n + 1))
            })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text)
    }

    /// Applies `key=value` overrides such as those given on the command line.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got {o:?}")))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Defaults ← optional file ← overrides, validated.
    pub fn resolve<S: AsRef<str>>(file: Option<&Path>, overrides: &[S]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(f) = file {
            cfg.apply_file(f)?;
        }
        cfg.apply_overrides(overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let opt = |o: Option<String>| o.unwrap_or_else(|| "none".into());
        let values = [
            self.context_len.to_string(),
            self.base_horizon.to_string(),
            join(&self.horizons),
            opt(self.split_counts.map(|c| join(&[c.train, c.val, c.test]))),
            self.stride.to_string(),
            self.eval_stride.to_string(),
            self.segment_len.to_string(),
            self.prompt_decimals.to_string(),
            self.hidden_dim.to_string(),
            self.experts.to_string(),
            self.layers.to_string(),
            self.heads.to_string(),
            self.ffn_mult.to_string(),
            match self.fusion {
                FusionMode::Adaptive => "adaptive".into(),
                FusionMode::SeriesOnly => "series_only".into(),
            },
            self.text_context.to_string(),
            self.lr.to_string(),
            self.lambda.to_string(),
            self.sparsity_mode.to_string(),
            self.epochs.to_string(),
            self.batch.to_string(),
            opt(self.max_steps.map(|m| m.to_string())),
            self.weight_decay.to_string(),
            self.seed.to_string(),
            self.text_seed.to_string(),
            opt(self.embeddings.as_ref().map(|p| p.display().to_string())),
        ];
        KEYS.into_iter().zip(values).collect()
    }

    /// The resolved configuration in the same format it is read from.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.pairs() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Short content hash of the resolved configuration, used to name run
    /// directories.
    pub fn content_hash(&self) -> String {
        hex::encode(&Sha256::digest(self.to_text().as_bytes())[..6])
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            segment_len: self.segment_len,
            hidden_dim: self.hidden_dim,
            experts: self.experts,
            layers: self.layers,
            heads: self.heads,
            ffn_mult: self.ffn_mult,
            fusion: self.fusion,
            text_context: self.text_context,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            lambda: self.lambda,
            epochs: self.epochs,
            batch: self.batch,
            seed: self.seed,
            sparsity_mode: self.sparsity_mode,
            adamw: AdamWConfig {
                weight_decay: self.weight_decay,
                ..AdamWConfig::default()
            },
            max_steps: self.max_steps,
        }
    }

    pub fn layout(&self) -> Result<Layout> {
        Layout::new(self.context_len, self.segment_len)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.model_config().validate()?;
        self.train_config().validate()?;
        self.layout()?;
        if self.base_horizon == 0 {
            return bad("base_horizon must be positive".into());
        }
        if self.horizons.is_empty() || self.horizons.contains(&0) {
            return bad(format!("horizons must be positive, got {:?}", self.horizons));
        }
        if self.stride == 0 || self.eval_stride == 0 {
            return bad("stride and eval_stride must be positive".into());
        }
        if self.prompt_decimals > 12 {
            return bad("prompt_decimals above 12 is not supported".into());
        }
        if let Some(c) = self.split_counts {
            if c.train == 0 || c.val == 0 || c.test == 0 {
                return bad("split_counts must all be positive".into());
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("split_counts = 8545, 2881, 2881\nlr=0.01 # grid\n\nembeddings = e.emb")
            .unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.split_counts, Some(SplitCounts::new(8545, 2881, 2881)));
    }

    #[test]
    fn unknown_key_is_config_error() {
        let err = RunConfig::default().set("hiden_dim", "3").unwrap_err();
        assert_eq!(err.kind(), "ConfigError");
    }

    #[test]
    fn bad_values_rejected() {
        let mut cfg = RunConfig::default();
        assert!(cfg.set("lr", "fast").is_err());
        assert!(cfg.set("split_counts", "1,2").is_err());
        assert!(cfg.set("sparsity_mode", "l2").is_err());
        cfg.set("segment_len", "1000").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn overrides_win_and_hash_changes() {
        let base = RunConfig::default();
        let cfg = RunConfig::resolve(None, &["seed=9", "hidden_dim=64"]).unwrap();
        assert_eq!((cfg.seed, cfg.hidden_dim), (9, 64));
        assert_ne!(cfg.content_hash(), base.content_hash());
        assert_eq!(base.content_hash(), RunConfig::default().content_hash());
        assert_eq!(base.content_hash().len(), 12);
    }

    #[test]
    fn every_key_is_settable() {
        let cfg = RunConfig::default();
        let mut other = RunConfig::default();
        for (k, v) in cfg.pairs() {
            other.set(k, &v).unwrap();
        }
        assert_eq!(other, cfg);
    }
}
