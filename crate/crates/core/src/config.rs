//! Experiment configuration: one TOML document covering the model, the
//! training run, data generation and cross-validation.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Source of the appended diagnosis tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptSource {
    /// No appended tokens (`diag_tokens` must be 0).
    None,
    /// Learnable tokens shared by every sample.
    Fixed,
    /// Learnable tokens plus a shared input-conditioned offset.
    Conditional,
    /// Per-sample convex combinations of the source tokens.
    Engine,
}

/// Normalization axis of the engine's context map (`d × m`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SoftmaxAxis {
    /// Over source tokens: every column sums to one.
    Column,
    /// Over diagnosis tokens: every row sums to one.
    Row,
}

/// Denominator of the attention logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionScale {
    /// `sqrt(width / heads)`
    HeadDim,
    /// `sqrt(token count)`
    TokenCount,
}

/// Which rows of the stack output feed the classification head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Mean over the diagnosis-token rows.
    Diagnosis,
    /// Mean over the source-token rows.
    Source,
    /// The final row.
    Last,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleGranularity {
    PerEpoch,
    PerStep,
}

macro_rules! parse_by_serde_name {
    ($($t:ty),*) => {$(
        impl std::str::FromStr for $t {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                use serde::de::value::{Error as DeError, StrDeserializer};
                <$t>::deserialize(StrDeserializer::<DeError>::new(s))
                    .map_err(|e| Error::Config(e.to_string()))
            }
        }
    )*};
}

parse_by_serde_name!(PromptSource, SoftmaxAxis, AttentionScale, Pooling, ScheduleGranularity);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StackConfig {
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub adapter_dim: usize,
}

impl Default for StackConfig {
    fn default() -> Self {
        StackConfig {
            layers: 4,
            heads: 4,
            width: 64,
            adapter_dim: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Length of each input feature vector.
    pub input_width: usize,
    /// Width `n` of encoder tokens.
    pub token_width: usize,
    pub encoder_layers: usize,
    /// Pool a source token after every `tap_every`-th encoder layer.
    pub tap_every: usize,
    pub patch_tokens: usize,
    /// Number `m` of appended diagnosis tokens.
    pub diag_tokens: usize,
    pub prompt: PromptSource,
    pub softmax_axis: SoftmaxAxis,
    /// Requested neck hidden width; clamped to `4 * stack.width`.
    pub neck_hidden: usize,
    pub stack: StackConfig,
    pub adapters: bool,
    /// One-way mask between source and diagnosis tokens. Off means plain
    /// self-attention over all tokens.
    pub emitter: bool,
    pub attention_scale: AttentionScale,
    pub pooling: Pooling,
    pub layer_norm_eps: f64,
    pub encoder_seed: u64,
    pub stack_seed: u64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_width: 32,
            token_width: 24,
            encoder_layers: 12,
            tap_every: 2,
            patch_tokens: 4,
            diag_tokens: 4,
            prompt: PromptSource::Engine,
            softmax_axis: SoftmaxAxis::Column,
            neck_hidden: 128,
            stack: StackConfig::default(),
            adapters: true,
            emitter: true,
            attention_scale: AttentionScale::HeadDim,
            pooling: Pooling::Diagnosis,
            layer_norm_eps: 1e-5,
            encoder_seed: 11,
            stack_seed: 13,
            init_seed: 17,
        }
    }
}

impl ModelConfig {
    /// Number `d` of source tokens emitted by the encoder.
    pub fn source_tokens(&self) -> usize {
        self.encoder_layers / self.tap_every.max(1)
    }

    pub fn total_tokens(&self) -> usize {
        self.source_tokens() + self.diag_tokens
    }

    pub fn effective_neck_hidden(&self) -> usize {
        self.neck_hidden.min(4 * self.stack.width)
    }

    /// Small dimensions for gradient checking: d = 3, m = 2, n = 12,
    /// n′ = 16, L = 2, H = 2.
    pub fn toy() -> Self {
        ModelConfig {
            input_width: 8,
            token_width: 12,
            encoder_layers: 3,
            tap_every: 1,
            patch_tokens: 2,
            diag_tokens: 2,
            neck_hidden: 16,
            stack: StackConfig {
                layers: 2,
                heads: 2,
                width: 16,
                adapter_dim: 4,
            },
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.input_width == 0 || self.token_width == 0 || self.patch_tokens == 0 {
            return bad("input_width, token_width and patch_tokens must be positive".into());
        }
        if self.tap_every == 0 || self.encoder_layers == 0 {
            return bad("encoder_layers and tap_every must be positive".into());
        }
        if self.encoder_layers % self.tap_every != 0 {
            return bad(format!(
                "encoder_layers ({}) must be a multiple of tap_every ({})",
                self.encoder_layers, self.tap_every
            ));
        }
        let s = &self.stack;
        if s.layers == 0 {
            return bad("stack.layers must be at least 1".into());
        }
        if s.heads == 0 || s.width == 0 || s.width % s.heads != 0 {
            return bad(format!(
                "stack.width ({}) must be a positive multiple of stack.heads ({})",
                s.width, s.heads
            ));
        }
        if self.adapters && s.adapter_dim == 0 {
            return bad("stack.adapter_dim must be positive when adapters are enabled".into());
        }
        if self.neck_hidden == 0 {
            return bad("neck_hidden must be positive".into());
        }
        if self.layer_norm_eps.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return bad("layer_norm_eps must be positive".into());
        }
        match (self.prompt, self.diag_tokens) {
            (PromptSource::None, m) if m > 0 => {
                return bad(format!("prompt = none requires diag_tokens = 0, got {m}"));
            }
            (p, 0) if p != PromptSource::None => {
                return bad(format!("prompt = {p:?} requires diag_tokens >= 1"));
            }
            _ => {}
        }
        if self.pooling == Pooling::Diagnosis && self.diag_tokens == 0 {
            return bad(
                "diagnosis pooling needs diag_tokens >= 1; select source or last pooling explicitly"
                    .into(),
            );
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: ScheduleGranularity,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            base_lr: 3e-4,
            warmup_epochs: 2,
            weight_decay: 0.02,
            epochs: 100,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule: ScheduleGranularity::PerEpoch,
            seed: 23,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("base_lr", self.base_lr),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("eps", self.eps),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("train.{name} must be positive, got {v}")));
            }
        }
        if self.beta1 >= 1.0 || self.beta2 >= 1.0 {
            return Err(Error::Config("train betas must be below 1".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("train.weight_decay must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "train.warmup_epochs ({}) must be below train.epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub samples: usize,
    pub pos_ratio: f64,
    pub separation: f64,
    pub patients: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            samples: 630,
            pos_ratio: 401.0 / 630.0,
            separation: 4.0,
            patients: 210,
            noise: 0.1,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CvConfig {
    pub folds: usize,
    pub seed: u64,
    pub threshold: f64,
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig {
            folds: 5,
            seed: 29,
            threshold: 0.5,
        }
    }
}

/// Every knob of an experiment. Unknown keys are rejected on parse.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub cv: CvConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.cv.folds < 2 {
            return Err(Error::Config("cv.folds must be at least 2".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

/// Hex SHA-256 of the canonical TOML rendering.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let text = toml::to_string(value).expect("config serializes");
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
