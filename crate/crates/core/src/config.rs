//! Flat `key = value` configuration with section prefixes.
//!
//! Every key has a typed default. A config file overrides defaults, and
//! `DSAE_<KEY>` environment variables (key upper-cased, `.` → `_`) override
//! the file. Unknown keys are rejected. The digest is the SHA-256 of the
//! canonical serialization: every key, sorted, with values re-rendered from
//! their parsed form so `0.0010` and `1e-3` hash alike.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::loss::{LossConfig, SegmentCentroids};
use crate::model::{HeadMerge, ModelConfig};
use crate::segmenter::{WindowMode, WindowPolicy};
use crate::synth::SynthConfig;
use crate::trainer::{AdamConfig, ClipMode, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Int,
    Float,
    Bool,
    Text,
}

const KEYS: &[(&str, Kind, &str)] = &[
    ("seed", Kind::Int, "0"),
    ("features.n_mels", Kind::Int, "40"),
    ("features.win_ms", Kind::Int, "32"),
    ("features.hop_ms", Kind::Int, "16"),
    ("features.f_min", Kind::Float, "0"),
    ("features.f_max", Kind::Float, "8000"),
    ("features.vad", Kind::Bool, "true"),
    ("features.vad_threshold_db", Kind::Float, "40"),
    ("features.vad_min_run", Kind::Int, "5"),
    ("window.train_min", Kind::Int, "80"),
    ("window.train_max", Kind::Int, "120"),
    ("window.test_length", Kind::Int, "100"),
    ("window.tail_segment", Kind::Bool, "true"),
    ("window.repeat_pad", Kind::Bool, "true"),
    ("model.layers", Kind::Int, "1"),
    ("model.hidden", Kind::Int, "32"),
    ("model.d_e", Kind::Int, "16"),
    ("model.d_a", Kind::Int, "16"),
    ("model.d_r", Kind::Int, "2"),
    ("model.head_merge", Kind::Text, "average"),
    ("model.renormalize", Kind::Bool, "false"),
    ("model.init_w", Kind::Float, "10"),
    ("model.init_b", Kind::Float, "5"),
    ("loss.lambda_s", Kind::Float, "0.2"),
    ("loss.lambda_p", Kind::Float, "0.001"),
    ("loss.exclude_self", Kind::Bool, "false"),
    ("loss.segment_centroids", Kind::Text, "speaker"),
    ("train.q", Kind::Int, "8"),
    ("train.p", Kind::Int, "4"),
    ("train.lr", Kind::Float, "0.001"),
    ("train.clip_norm", Kind::Float, "3"),
    ("train.clip_mode", Kind::Text, "global"),
    ("train.max_batches", Kind::Int, "15000"),
    ("train.beta1", Kind::Float, "0.9"),
    ("train.beta2", Kind::Float, "0.999"),
    ("train.adam_eps", Kind::Float, "1e-8"),
    ("train.w_floor", Kind::Float, "0.0001"),
    ("train.validate_every", Kind::Int, "0"),
    ("train.valid_trials", Kind::Int, "200"),
    ("train.decay_patience", Kind::Int, "3"),
    ("train.decay_factor", Kind::Float, "0.5"),
    ("train.lr_floor", Kind::Float, "0.00001"),
    ("train.checkpoint_every", Kind::Int, "500"),
    ("synth.train_speakers", Kind::Int, "10"),
    ("synth.train_utterances", Kind::Int, "20"),
    ("synth.train_min_s", Kind::Float, "2"),
    ("synth.train_max_s", Kind::Float, "4"),
    ("synth.valid_speakers", Kind::Int, "0"),
    ("synth.valid_utterances", Kind::Int, "4"),
    ("synth.test_speakers", Kind::Int, "5"),
    ("synth.test_utterances", Kind::Int, "5"),
    ("synth.test_min_s", Kind::Float, "15"),
    ("synth.test_max_s", Kind::Float, "25"),
    ("synth.target_trials", Kind::Int, "50"),
    ("synth.nontarget_trials", Kind::Int, "150"),
    ("eval.pooling", Kind::Text, "attentive"),
    ("paths.manifest", Kind::Text, "data/manifest.tsv"),
    ("paths.features", Kind::Text, "data/features"),
    ("paths.checkpoints", Kind::Text, "checkpoints"),
    ("paths.trials", Kind::Text, "data/trials.tsv"),
    ("paths.metrics", Kind::Text, "checkpoints/metrics.tsv"),
];

/// Keys that determine what a parameter tensor means. Checkpoints carry the
/// digest of these only, so changing paths or training length does not
/// invalidate them.
const MODEL_SECTIONS: &[&str] = &["features.", "model."];

pub const ENV_PREFIX: &str = "DSAE_";

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    values: BTreeMap<&'static str, String>,
}

impl Default for Config {
    fn default() -> Self {
        let values = KEYS
            .iter()
            .map(|&(k, kind, v)| (k, canonical(k, kind, v).expect("defaults parse")))
            .collect();
        Config { values }
    }
}

fn lookup(key: &str) -> Option<(&'static str, Kind)> {
    KEYS.iter().find(|(k, _, _)| *k == key).map(|&(k, kind, _)| (k, kind))
}

fn canonical(key: &str, kind: Kind, raw: &str) -> Result<String> {
    let bad = |what: &str| Error::Config(format!("`{key}` = {raw:?} is not {what}"));
    Ok(match kind {
        Kind::Int => raw.parse::<u64>().map_err(|_| bad("a non-negative integer"))?.to_string(),
        Kind::Float => {
            let v: f64 = raw.parse().map_err(|_| bad("a number"))?;
            if !v.is_finite() {
                return Err(bad("finite"));
            }
            format!("{v:?}")
        }
        Kind::Bool => match raw {
            "true" | "1" | "yes" => "true".into(),
            "false" | "0" | "no" => "false".into(),
            _ => return Err(bad("a boolean")),
        },
        Kind::Text => raw.to_string(),
    })
}

pub fn env_var_for(key: &str) -> String {
    format!("{ENV_PREFIX}{}", key.to_ascii_uppercase().replace('.', "_"))
}

impl Config {
    /// Parse config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        let mut seen = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            let k = k.trim();
            if let Some(prev) = seen.insert(k.to_string(), lineno + 1) {
                return Err(Error::Config(format!("line {}: `{k}` already set on line {prev}", lineno + 1)));
            }
            cfg.set(k, v.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", lineno + 1, strip(e))))?;
        }
        Ok(cfg)
    }

    /// Defaults, then `path` if given, then environment overrides; fully validated.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Config::parse(&text).map_err(|e| Error::Config(format!("{}: {}", p.display(), strip(e))))?
            }
            None => Config::default(),
        };
        cfg.apply_env(std::env::vars())?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply `DSAE_*` overrides. Variables that match no key are rejected,
    /// except those the command line consumes itself.
    pub fn apply_env(&mut self, vars: impl IntoIterator<Item = (String, String)>) -> Result<()> {
        let by_var: BTreeMap<String, &str> = KEYS.iter().map(|(k, _, _)| (env_var_for(k), *k)).collect();
        for (var, value) in vars {
            if !var.starts_with(ENV_PREFIX) || var == "DSAE_LOG" {
                continue;
            }
            let key = by_var
                .get(&var)
                .ok_or_else(|| Error::Config(format!("environment variable {var} matches no config key")))?;
            self.set(key, &value)
                .map_err(|e| Error::Config(format!("{var}: {}", strip(e))))?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (k, kind) = lookup(key).ok_or_else(|| Error::Config(format!("unknown key `{key}`")))?;
        self.values.insert(k, canonical(k, kind, value)?);
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("key table lists {key}"))
    }

    fn int(&self, key: &str) -> usize {
        self.raw(key).parse().expect("canonical integer")
    }

    fn float(&self, key: &str) -> f64 {
        self.raw(key).parse().expect("canonical float")
    }

    fn flag(&self, key: &str) -> bool {
        self.raw(key) == "true"
    }

    pub fn seed(&self) -> u64 {
        self.raw("seed").parse().expect("canonical integer")
    }

    pub fn path(&self, key: &str) -> PathBuf {
        PathBuf::from(self.raw(key))
    }

    /// Canonical text: every key in sorted order.
    pub fn canonical_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn digest(&self) -> String {
        hex(&Sha256::digest(self.canonical_text().as_bytes()))
    }

    /// Digest over the feature and model sections only.
    pub fn model_digest(&self) -> String {
        let text: String = self
            .values
            .iter()
            .filter(|(k, _)| MODEL_SECTIONS.iter().any(|s| k.starts_with(s)))
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect();
        hex(&Sha256::digest(text.as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| Error::Config(strip(e));
        self.feature_config().map_err(wrap)?;
        self.window_policy().validate().map_err(wrap)?;
        self.model_config().validate().map_err(wrap)?;
        self.loss_config().map_err(wrap)?;
        self.train_config()?.validate().map_err(wrap)?;
        self.synth_config().validate().map_err(wrap)?;
        self.pooling()?;
        Ok(())
    }

    pub fn feature_config(&self) -> Result<FeatureConfig> {
        let cfg = FeatureConfig {
            n_mels: self.int("features.n_mels"),
            win_ms: self.int("features.win_ms") as u32,
            hop_ms: self.int("features.hop_ms") as u32,
            f_min: self.float("features.f_min"),
            f_max: self.float("features.f_max"),
            vad: self.flag("features.vad"),
            vad_threshold_db: self.float("features.vad_threshold_db"),
            vad_min_run: self.int("features.vad_min_run"),
        };
        crate::features::FeatureExtractor::new(cfg.clone())?;
        Ok(cfg)
    }

    /// Training-mode policy; use [`WindowPolicy::with_mode`] for test windows.
    pub fn window_policy(&self) -> WindowPolicy {
        WindowPolicy {
            mode: WindowMode::Train,
            train_range: (self.int("window.train_min"), self.int("window.train_max")),
            test_length: self.int("window.test_length"),
            tail_segment: self.flag("window.tail_segment"),
            repeat_pad: self.flag("window.repeat_pad"),
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            input_dim: self.int("features.n_mels"),
            layers: self.int("model.layers"),
            hidden: self.int("model.hidden"),
            embed_dim: self.int("model.d_e"),
            attn_dim: self.int("model.d_a"),
            heads: self.int("model.d_r"),
            head_merge: HeadMerge::parse(self.raw("model.head_merge")).unwrap_or(HeadMerge::Average),
            renormalize: self.flag("model.renormalize"),
            init_w: self.float("model.init_w"),
            init_b: self.float("model.init_b"),
        }
    }

    pub fn loss_config(&self) -> Result<LossConfig> {
        let raw = self.raw("loss.segment_centroids");
        let segment_centroids = SegmentCentroids::parse(raw).ok_or_else(|| {
            Error::Config(format!("loss.segment_centroids = {raw:?}: expected speaker or utterance"))
        })?;
        if HeadMerge::parse(self.raw("model.head_merge")).is_none() {
            return Err(Error::Config(format!(
                "model.head_merge = {:?}: expected average or concat",
                self.raw("model.head_merge")
            )));
        }
        Ok(LossConfig {
            lambda_s: self.float("loss.lambda_s"),
            lambda_p: self.float("loss.lambda_p"),
            exclude_self: self.flag("loss.exclude_self"),
            segment_centroids,
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let raw = self.raw("train.clip_mode");
        let clip_mode = ClipMode::parse(raw)
            .ok_or_else(|| Error::Config(format!("train.clip_mode = {raw:?}: expected global or per_tensor")))?;
        Ok(TrainConfig {
            speakers: self.int("train.q"),
            per_speaker: self.int("train.p"),
            loss: self.loss_config()?,
            lr: self.float("train.lr"),
            clip_norm: self.float("train.clip_norm"),
            clip_mode,
            max_batches: self.int("train.max_batches") as u64,
            seed: self.seed(),
            window: self.window_policy(),
            adam: AdamConfig {
                beta1: self.float("train.beta1"),
                beta2: self.float("train.beta2"),
                eps: self.float("train.adam_eps"),
            },
            w_floor: self.float("train.w_floor"),
            validate_every: self.int("train.validate_every") as u64,
            valid_trials: self.int("train.valid_trials"),
            decay_patience: self.int("train.decay_patience"),
            decay_factor: self.float("train.decay_factor"),
            lr_floor: self.float("train.lr_floor"),
            checkpoint_every: self.int("train.checkpoint_every") as u64,
        })
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            seed: self.seed(),
            train_speakers: self.int("synth.train_speakers"),
            train_utterances: self.int("synth.train_utterances"),
            train_seconds: (self.float("synth.train_min_s"), self.float("synth.train_max_s")),
            valid_speakers: self.int("synth.valid_speakers"),
            valid_utterances: self.int("synth.valid_utterances"),
            test_speakers: self.int("synth.test_speakers"),
            test_utterances: self.int("synth.test_utterances"),
            test_seconds: (self.float("synth.test_min_s"), self.float("synth.test_max_s")),
            target_trials: self.int("synth.target_trials"),
            nontarget_trials: self.int("synth.nontarget_trials"),
        }
    }

    pub fn pooling(&self) -> Result<crate::evaluator::Pooling> {
        let raw = self.raw("eval.pooling");
        crate::evaluator::Pooling::parse(raw)
            .ok_or_else(|| Error::Config(format!("eval.pooling = {raw:?}: expected attentive or average")))
    }
}

/// Drop the `config: ` prefix when re-wrapping an error.
fn strip(e: Error) -> String {
    match e {
        Error::Config(m) | Error::Contract(m) => m,
        other => other.to_string(),
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
