//! Training configuration, JSON-backed, with ablation switches.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::OptionLoss;

/// Ablation switches; each removes one mechanism.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Teacher routing without the answer's semantic direction.
    pub no_sa: bool,
    /// Option gates without option-specific directions.
    pub no_sj: bool,
    /// Unit option weights in the main loss.
    pub no_unc: bool,
    pub no_contrast: bool,
    pub no_distill: bool,
    /// Cue-free training: student-style routing, text-based option
    /// directions, unit weights, no contrast or distillation.
    pub prompt_only: bool,
    /// Uncertainty is the cue variance alone.
    pub only_variance: bool,
}

impl Ablation {
    pub const NAMES: [&'static str; 7] = [
        "no_sa",
        "no_sj",
        "no_unc",
        "no_contrast",
        "no_distill",
        "prompt_only",
        "only_variance",
    ];

    /// Turns on the flag called `name`.
    pub fn enable(&mut self, name: &str) -> Result<()> {
        let flag = match name.trim() {
            "no_sa" => &mut self.no_sa,
            "no_sj" => &mut self.no_sj,
            "no_unc" => &mut self.no_unc,
            "no_contrast" => &mut self.no_contrast,
            "no_distill" => &mut self.no_distill,
            "prompt_only" => &mut self.prompt_only,
            "only_variance" => &mut self.only_variance,
            other => {
                return Err(Error::config(
                    "ablate",
                    format!("unknown flag `{other}`, expected one of {}", Self::NAMES.join(", ")),
                ))
            }
        };
        *flag = true;
        Ok(())
    }

    /// Parses a comma-separated flag list such as `no_sa,no_sj`.
    pub fn from_list(list: &str) -> Result<Self> {
        let mut ablation = Ablation::default();
        for name in list.split(',').filter(|s| !s.trim().is_empty()) {
            ablation.enable(name)?;
        }
        Ok(ablation)
    }

    /// Every mechanism removed except the uncertainty mode.
    pub fn baseline() -> Self {
        Ablation {
            no_sa: true,
            no_sj: true,
            no_unc: true,
            no_contrast: true,
            no_distill: true,
            ..Ablation::default()
        }
    }
}

/// Cue quality preset: the minimal prompt yields noisier cues.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CuePrompt {
    #[default]
    Full,
    Minimal,
}

impl CuePrompt {
    pub fn noise_multiplier(self) -> f64 {
        match self {
            CuePrompt::Full => 1.0,
            CuePrompt::Minimal => 2.0,
        }
    }
}

/// Synthetic task parameters. Concept centroids have norm
/// `embedding_scale`; noise levels are expected norms of the added gaussian
/// noise relative to that norm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub concepts: usize,
    pub embedding_scale: f64,
    pub train_size: usize,
    pub heldout_size: usize,
    pub input_noise: f64,
    pub text_noise: f64,
    pub cue_noise: f64,
    pub variant_count: usize,
    pub cue_prompt: CuePrompt,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            concepts: 8,
            // Scores are cosines, but input norm sets how peaked the
            // initial gates are and how far the experts' tanh layer bends.
            embedding_scale: 8.0,
            train_size: 2000,
            heldout_size: 2000,
            input_noise: 0.8,
            text_noise: 1.5,
            cue_noise: 0.2,
            variant_count: 4,
            cue_prompt: CuePrompt::Full,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub d: usize,
    #[serde(rename = "E")]
    pub num_experts: usize,
    #[serde(rename = "K")]
    pub top_k: usize,
    pub hidden: usize,
    pub option_count: usize,
    pub lambda_a: f64,
    pub lambda_o: f64,
    pub lambda_c: f64,
    pub temperature: f64,
    pub option_loss: OptionLoss,
    pub lr: f64,
    pub lr_min: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch: usize,
    pub grad_clip_norm: f64,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub unc_threshold: f64,
    pub max_regen_rounds: usize,
    /// Steps between held-out evaluations recorded in the metrics log.
    pub eval_interval: usize,
    pub seed: u64,
    pub data: DataConfig,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            d: 32,
            num_experts: 8,
            top_k: 2,
            hidden: 32,
            option_count: 4,
            lambda_a: 0.5,
            lambda_o: 0.5,
            lambda_c: 0.3,
            temperature: 5.0,
            option_loss: OptionLoss::Binary,
            lr: 1e-4,
            lr_min: 1e-6,
            warmup_steps: 100,
            total_steps: 2000,
            batch: 32,
            grad_clip_norm: 1.0,
            weight_decay: 0.01,
            betas: [0.9, 0.999],
            eps: 1e-8,
            unc_threshold: 0.5,
            max_regen_rounds: 3,
            eval_interval: 200,
            seed: 0,
            data: DataConfig::default(),
            ablation: Ablation::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |field: &str, v: usize| {
            if v == 0 {
                Err(Error::config(field, "must be at least 1"))
            } else {
                Ok(())
            }
        };
        positive("d", self.d)?;
        positive("E", self.num_experts)?;
        positive("hidden", self.hidden)?;
        positive("total_steps", self.total_steps)?;
        positive("batch", self.batch)?;
        positive("max_regen_rounds", self.max_regen_rounds)?;
        positive("eval_interval", self.eval_interval)?;
        positive("data.concepts", self.data.concepts)?;
        positive("data.train_size", self.data.train_size)?;
        positive("data.heldout_size", self.data.heldout_size)?;
        if self.top_k == 0 || self.top_k > self.num_experts {
            return Err(Error::config("K", format!("must be in 1..={}", self.num_experts)));
        }
        if self.option_count < 2 {
            return Err(Error::config("option_count", "need at least 2 options"));
        }
        if self.data.variant_count < 2 {
            return Err(Error::config("data.variant_count", "need at least 2 variants"));
        }
        for (field, v) in [
            ("lambda_a", self.lambda_a),
            ("lambda_o", self.lambda_o),
            ("lambda_c", self.lambda_c),
            ("weight_decay", self.weight_decay),
            ("data.input_noise", self.data.input_noise),
            ("data.text_noise", self.data.text_noise),
            ("data.cue_noise", self.data.cue_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(field, "must be finite and >= 0"));
            }
        }
        for (field, v) in [
            ("data.embedding_scale", self.data.embedding_scale),
            ("temperature", self.temperature),
            ("grad_clip_norm", self.grad_clip_norm),
            ("unc_threshold", self.unc_threshold),
            ("eps", self.eps),
            ("lr_min", self.lr_min),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(field, "must be finite and > 0"));
            }
        }
        if !(self.lr > self.lr_min && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be finite and greater than lr_min"));
        }
        if self.warmup_steps >= self.total_steps {
            return Err(Error::config("warmup_steps", "must be below total_steps"));
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(Error::config("betas", "each beta must be in [0, 1)"));
        }
        Ok(())
    }

    /// Canonical JSON text of this config.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 hex digest of [`TrainConfig::to_json`].
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: TrainConfig = serde_json::from_str(text).map_err(config_parse_error)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

/// Maps a serde failure to a config error naming the offending field when
/// serde reports one.
fn config_parse_error(e: serde_json::Error) -> Error {
    let message = e.to_string();
    let field = message
        .split('`')
        .nth(1)
        .filter(|_| message.contains("field"))
        .unwrap_or("<config>")
        .to_string();
    Error::Config {
        field,
        reason: message,
    }
}
