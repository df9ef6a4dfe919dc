use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::TrainError;
use crate::corpus::DEFAULT_MAX_WORDS;
use crate::models::{ModelDims, ModelKind};

/// Everything that determines a run, given a corpus. Stored as flat
/// `key = value` text whose keys are exactly the field names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelKind,
    /// Code book size `K`.
    pub codes: usize,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    /// Attention width; 0 means `hidden_dim`.
    pub attn_dim: usize,
    pub max_vocab: usize,
    pub max_words: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub beta_start: f64,
    pub beta_max: f64,
    pub lr: f64,
    pub lr_decay_factor: f64,
    pub plateau_patience: usize,
    pub max_decays: usize,
    pub clip_norm: f64,
    /// Epochs over which the vanilla VAE's KL weight ramps from 0 to 1.
    pub vae_anneal_epochs: usize,
    pub ema_decay: f64,
    pub kmeans_iters: usize,
    /// Dead-code threshold as a fraction of uniform usage; 0 disables restarts.
    pub restart_fraction: f64,
    pub prior_channels: usize,
    pub prior_layers: usize,
    pub prior_kernel: usize,
    pub prior_epochs: usize,
    pub prior_lr: f64,
    /// `adam` or `sgd`.
    pub prior_optimizer: String,
    pub prior_batch_size: usize,
    pub seed: u64,
    pub shuffle_seed: u64,
    pub noise_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Davam,
            codes: 32,
            latent_dim: 32,
            hidden_dim: 256,
            embed_dim: 128,
            attn_dim: 0,
            max_vocab: 20_000,
            max_words: DEFAULT_MAX_WORDS,
            batch_size: 32,
            epochs: 40,
            warmup_epochs: 10,
            beta_start: 0.1,
            beta_max: 5.0,
            lr: 1.0,
            lr_decay_factor: 0.5,
            plateau_patience: 2,
            max_decays: 5,
            clip_norm: 5.0,
            vae_anneal_epochs: 10,
            ema_decay: 0.99,
            kmeans_iters: 10,
            restart_fraction: 1e-3,
            prior_channels: 64,
            prior_layers: 16,
            prior_kernel: 3,
            prior_epochs: 20,
            prior_lr: 1e-3,
            prior_optimizer: "adam".into(),
            prior_batch_size: 32,
            seed: 1,
            shuffle_seed: 2,
            noise_seed: 3,
        }
    }
}

impl TrainConfig {
    /// Large-corpus settings: `K = 512`, `β` from 0.1 to 5, SGD at learning
    /// rate 1, ten warm-up epochs.
    pub fn large_scale() -> Self {
        Self {
            codes: 512,
            ..Self::default()
        }
    }

    /// Small settings for the synthetic grammar corpus on one CPU core.
    pub fn desk_scale(model: ModelKind) -> Self {
        Self {
            model,
            codes: 32,
            latent_dim: 16,
            hidden_dim: 64,
            embed_dim: 32,
            max_vocab: 400,
            epochs: 30,
            warmup_epochs: 2,
            // commitment above ~1 starves the small encoder at this scale
            beta_max: 0.5,
            prior_channels: 32,
            prior_layers: 4,
            prior_epochs: 15,
            ..Self::default()
        }
    }

    pub fn dims(&self, vocab: usize) -> ModelDims {
        ModelDims {
            vocab,
            embed: self.embed_dim,
            hidden: self.hidden_dim,
            latent: self.latent_dim,
            attn: if self.attn_dim == 0 { self.hidden_dim } else { self.attn_dim },
            codes: self.codes,
            prior_channels: self.prior_channels,
            prior_layers: self.prior_layers,
            prior_kernel: self.prior_kernel,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let positive = [
            ("codes", self.codes),
            ("latent_dim", self.latent_dim),
            ("hidden_dim", self.hidden_dim),
            ("embed_dim", self.embed_dim),
            ("max_vocab", self.max_vocab),
            ("max_words", self.max_words),
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("prior_channels", self.prior_channels),
            ("prior_layers", self.prior_layers),
            ("prior_kernel", self.prior_kernel),
            ("prior_batch_size", self.prior_batch_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(TrainError::Config(format!("{name} must be positive")));
            }
        }
        let positive_f = [
            ("lr", self.lr),
            ("lr_decay_factor", self.lr_decay_factor),
            ("clip_norm", self.clip_norm),
            ("prior_lr", self.prior_lr),
        ];
        for (name, v) in positive_f {
            if !(v > 0.0 && v.is_finite()) {
                return Err(TrainError::Config(format!("{name} must be positive")));
            }
        }
        if !(0.0..=self.beta_max).contains(&self.beta_start) {
            return Err(TrainError::Config(format!(
                "need 0 <= beta_start ({}) <= beta_max ({})",
                self.beta_start, self.beta_max
            )));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(TrainError::Config("ema_decay must lie in [0, 1)".into()));
        }
        if self.restart_fraction < 0.0 {
            return Err(TrainError::Config("restart_fraction must be non-negative".into()));
        }
        if !matches!(self.prior_optimizer.as_str(), "adam" | "sgd") {
            return Err(TrainError::Config(format!(
                "prior_optimizer must be adam or sgd, got {:?}",
                self.prior_optimizer
            )));
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment. Unknown keys are
    /// errors, missing keys take defaults.
    pub fn from_text(text: &str) -> Result<Self, TrainError> {
        let mut map = Map::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| TrainError::Config(format!("line {}: expected key = value", n + 1)))?;
            let v = v.trim();
            let value = serde_json::from_str::<Value>(v)
                .ok()
                .filter(|x| x.is_number() || x.is_boolean())
                .unwrap_or_else(|| Value::String(v.to_string()));
            map.insert(k.trim().to_string(), value);
        }
        let cfg: TrainConfig =
            serde_json::from_value(Value::Object(map)).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let Value::Object(map) = serde_json::to_value(self).expect("config serializes") else {
            unreachable!("struct serializes to an object")
        };
        let mut out = String::new();
        for (k, v) in map {
            match v {
                Value::String(s) => out.push_str(&format!("{k} = {s}\n")),
                other => out.push_str(&format!("{k} = {other}\n")),
            }
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path).map_err(|e| TrainError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::from_text(&text)
    }

    /// Fields as ordered strings, for manifests.
    pub fn to_map(&self) -> BTreeMap<String, String> {
        self.to_text()
            .lines()
            .filter_map(|l| l.split_once(" = "))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }
}

/// Commitment weight at `epoch`: `beta_start` through the warm-up epochs,
/// a linear ramp to `beta_max` over the next `warmup_epochs`, then flat.
pub fn anneal_beta(epoch: usize, cfg: &TrainConfig) -> f64 {
    let w = cfg.warmup_epochs;
    if epoch < w {
        return cfg.beta_start;
    }
    if w == 0 || epoch >= 2 * w {
        return cfg.beta_max;
    }
    let frac = (epoch - w) as f64 / w as f64;
    cfg.beta_start + frac * (cfg.beta_max - cfg.beta_start)
}

/// KL weight of the vanilla VAE: linear from 0 to 1.
pub fn vae_kl_weight(epoch: usize, cfg: &TrainConfig) -> f64 {
    if cfg.vae_anneal_epochs == 0 {
        1.0
    } else {
        (epoch as f64 / cfg.vae_anneal_epochs as f64).min(1.0)
    }
}
