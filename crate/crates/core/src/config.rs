//! Run configuration: model, training, loss, corpus and downstream sections.
//!
//! Every section is read from JSON with missing fields filled from the toy
//! defaults; unknown fields are rejected. `RunConfig::validate` checks all
//! cross-field constraints and reports the offending field path.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormPlacement {
    /// LayerNorm on each sublayer input.
    Pre,
    /// LayerNorm after each residual sum.
    Post,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_fused: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub frames: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub channels: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub projector_dims: Vec<usize>,
    pub ffn_mult: usize,
    /// Second space-time residual reads from the temporal output instead of
    /// the layer input.
    pub residual_from_xhat: bool,
    pub norm: NormPlacement,
    /// `None`: every gate is a learnable scalar starting at 0.
    /// `Some(v)`: gates are frozen at `v`.
    pub fixed_alpha: Option<f64>,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 4,
            n_fused: 2,
            d_model: 64,
            n_heads: 4,
            frames: 4,
            patch_size: 8,
            image_size: 32,
            channels: 3,
            vocab_size: 64,
            max_text_len: 30,
            projector_dims: vec![64, 64, 64],
            ffn_mult: 4,
            residual_from_xhat: false,
            norm: NormPlacement::Pre,
            fixed_alpha: None,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// Patches per frame.
    pub fn patches_per_frame(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    /// Video tokens including the classification token.
    pub fn video_tokens(&self) -> usize {
        self.frames * self.patches_per_frame() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ffn_dim(&self) -> usize {
        self.d_model * self.ffn_mult
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// First fused layer index (0-based).
    pub fn first_fused(&self) -> usize {
        self.n_layers - self.n_fused
    }

    pub fn embed_dim(&self) -> usize {
        *self.projector_dims.last().unwrap_or(&self.d_model)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("frames", self.frames),
            ("patch_size", self.patch_size),
            ("image_size", self.image_size),
            ("channels", self.channels),
            ("vocab_size", self.vocab_size),
            ("max_text_len", self.max_text_len),
            ("ffn_mult", self.ffn_mult),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("model.{field}"), "must be positive"));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(
                "model.n_heads",
                format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads),
            ));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::config(
                "model.patch_size",
                format!("image_size {} is not divisible by patch_size {}", self.image_size, self.patch_size),
            ));
        }
        if self.n_fused > self.n_layers {
            return Err(Error::config(
                "model.n_fused",
                format!("{} fused layers exceed n_layers {}", self.n_fused, self.n_layers),
            ));
        }
        if self.projector_dims.is_empty() {
            return Err(Error::config("model.projector_dims", "must be non-empty"));
        }
        if let Some(i) = self.projector_dims.iter().position(|&d| d == 0) {
            return Err(Error::config(format!("model.projector_dims[{i}]"), "must be positive"));
        }
        if !(self.ln_eps >= 0.0 && self.ln_eps.is_finite()) {
            return Err(Error::config("model.ln_eps", "must be a finite non-negative number"));
        }
        if let Some(a) = self.fixed_alpha {
            if !a.is_finite() {
                return Err(Error::config("model.fixed_alpha", "must be finite"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr_backbone: f64,
    pub peak_lr_crossattn: f64,
    pub peak_lr_heads: f64,
    pub warmup_epochs: usize,
    pub end_lr: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub weight_decay: f64,
    /// Write a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        // Full scale: 3e-5 / 12e-5 / 12e-5, 2 warmup epochs, end 1e-7.
        TrainConfig {
            epochs: 20,
            batch_size: 16,
            peak_lr_backbone: 1e-3,
            peak_lr_crossattn: 2e-3,
            peak_lr_heads: 2e-3,
            warmup_epochs: 2,
            end_lr: 1e-7,
            betas: [0.9, 0.98],
            eps: 1e-8,
            weight_decay: 1e-2,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be positive"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("train.batch_size", "needs at least 2 pairs for negatives"));
        }
        for (field, v) in [
            ("peak_lr_backbone", self.peak_lr_backbone),
            ("peak_lr_crossattn", self.peak_lr_crossattn),
            ("peak_lr_heads", self.peak_lr_heads),
            ("end_lr", self.end_lr),
            ("eps", self.eps),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("train.{field}"), "must be a positive rate"));
            }
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::config(
                "train.warmup_epochs",
                format!("{} must be below epochs {}", self.warmup_epochs, self.epochs),
            ));
        }
        for (i, b) in self.betas.iter().enumerate() {
            if !(0.0..1.0).contains(b) {
                return Err(Error::config(format!("train.betas[{i}]"), "must lie in [0, 1)"));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("train.weight_decay", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositiveRule {
    /// Shares a noun and a verb.
    And,
    /// Shares a noun or a verb.
    Or,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub tau: f64,
    pub gamma: f64,
    pub delta: f64,
    pub positive_rule: PositiveRule,
    pub mlm_probability: f64,
    /// Noun/verb positives in the contrastive numerator; off gives plain
    /// diagonal positives.
    pub shared_positives: bool,
    /// Same-scenario extra negatives in the contrastive batch.
    pub scene_negatives: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 0.05,
            gamma: 0.25,
            delta: 0.5,
            positive_rule: PositiveRule::And,
            mlm_probability: 0.15,
            shared_positives: true,
            scene_negatives: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config("loss.tau", "must be positive"));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::config("loss.gamma", "must be non-negative"));
        }
        if !(self.delta >= 0.0) {
            return Err(Error::config("loss.delta", "must be non-negative"));
        }
        if !(self.gamma + self.delta < 1.0) {
            return Err(Error::config(
                "loss.delta",
                format!("gamma + delta = {} must be below 1", self.gamma + self.delta),
            ));
        }
        if !(0.0..=1.0).contains(&self.mlm_probability) {
            return Err(Error::config("loss.mlm_probability", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_pairs: usize,
    pub n_scenarios: usize,
    /// Pattern contrast against per-pixel noise, in [0, 1].
    pub signal: f64,
    pub noise_std: f64,
    /// Every (noun, verb) combination appears at most once.
    pub unique_narrations: bool,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_pairs: 200,
            n_scenarios: 8,
            signal: 0.9,
            noise_std: 0.05,
            unique_narrations: false,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_pairs < 2 {
            return Err(Error::config("corpus.n_pairs", "needs at least 2 pairs"));
        }
        if self.n_scenarios == 0 {
            return Err(Error::config("corpus.n_scenarios", "must be positive"));
        }
        if self.n_scenarios > self.n_pairs {
            return Err(Error::config(
                "corpus.n_scenarios",
                format!("{} scenarios exceed {} pairs", self.n_scenarios, self.n_pairs),
            ));
        }
        if 2 * self.n_scenarios > self.n_pairs {
            return Err(Error::config(
                "corpus.n_scenarios",
                format!("{} pairs cannot give each of {} scenarios two clips", self.n_pairs, self.n_scenarios),
            ));
        }
        if !(0.0..=1.0).contains(&self.signal) {
            return Err(Error::config("corpus.signal", "must lie in [0, 1]"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config("corpus.noise_std", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DownstreamConfig {
    /// Rescale both score families to [0, 1] per query before summing.
    pub ensemble_minmax: bool,
    pub mcq_items: usize,
    pub gallery_size: usize,
    pub qfvs_clips: usize,
    pub qfvs_budget_fraction: f64,
    pub kts_max_segments: usize,
    pub kts_penalty: f64,
    pub qfvs_head_epochs: usize,
    pub qfvs_head_lr: f64,
    pub qfvs_train_tasks: usize,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        DownstreamConfig {
            ensemble_minmax: false,
            mcq_items: 100,
            gallery_size: 50,
            qfvs_clips: 24,
            qfvs_budget_fraction: 0.02,
            kts_max_segments: 6,
            kts_penalty: 0.05,
            qfvs_head_epochs: 20,
            qfvs_head_lr: 3e-3,
            qfvs_train_tasks: 8,
        }
    }
}

impl DownstreamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.qfvs_budget_fraction > 0.0 && self.qfvs_budget_fraction <= 1.0) {
            return Err(Error::config("downstream.qfvs_budget_fraction", "must lie in (0, 1]"));
        }
        if self.kts_max_segments == 0 {
            return Err(Error::config("downstream.kts_max_segments", "must be positive"));
        }
        if !(self.kts_penalty >= 0.0) {
            return Err(Error::config("downstream.kts_penalty", "must be non-negative"));
        }
        if self.mcq_items == 0 {
            return Err(Error::config("downstream.mcq_items", "must be positive"));
        }
        if self.gallery_size < 2 {
            return Err(Error::config("downstream.gallery_size", "needs at least 2 pairs"));
        }
        if self.qfvs_clips < 1 {
            return Err(Error::config("downstream.qfvs_clips", "must be positive"));
        }
        if !(self.qfvs_head_lr > 0.0) {
            return Err(Error::config("downstream.qfvs_head_lr", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub corpus: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub corpus: CorpusConfig,
    pub downstream: DownstreamConfig,
    pub paths: PathsConfig,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            corpus: CorpusConfig::default(),
            downstream: DownstreamConfig::default(),
            paths: PathsConfig::default(),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<RunConfig> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(if path == "." { String::new() } else { path }, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        self.corpus.validate()?;
        self.downstream.validate()?;
        Ok(())
    }

    /// SHA-256 over the canonical JSON of the sections that shape training
    /// (everything but `paths` and `downstream`), hex encoded.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("paths");
            obj.remove("downstream");
        }
        let digest = Sha256::digest(v.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
