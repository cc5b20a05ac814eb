use serde::{Deserialize, Serialize};

use crate::error::{EchoError, Result};

/// Architecture hyperparameters.
///
/// Serialises with the field names of the usual LLaMA-style JSON config
/// (`hidden_size`, `num_hidden_layers`, ...). `num_self_attn_layers` is the
/// number of leading layers that keep their own KV projections; when it is
/// absent the model is a plain baseline (every layer self-attends).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ConfigJson", into = "ConfigJson")]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_self_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub rope_base: f64,
    pub eps: f64,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::llama_125m()
    }
}

impl ModelConfig {
    /// The 125M reference configuration (12 layers, 768 hidden, 32000 vocab).
    pub fn llama_125m() -> Self {
        Self {
            d_model: 768,
            n_layers: 12,
            n_self_layers: 12,
            n_heads: 12,
            d_ff: 2048,
            vocab_size: 32000,
            max_seq: 2048,
            rope_base: 10_000.0,
            eps: 1e-5,
            init_std: 0.02,
            seed: 0,
        }
    }

    /// Desk-scale baseline used by the benchmarks: 12 layers of width 256
    /// over the byte-level vocabulary.
    pub fn desk() -> Self {
        Self {
            d_model: 256,
            n_layers: 12,
            n_self_layers: 12,
            n_heads: 4,
            d_ff: 688,
            vocab_size: crate::harness::tokenizer::VOCAB_SIZE,
            max_seq: 1024,
            ..Self::llama_125m()
        }
    }

    /// A small model for unit tests and quick experiments.
    pub fn tiny(d_model: usize, n_heads: usize, n_layers: usize, vocab_size: usize) -> Self {
        Self {
            d_model,
            n_layers,
            n_self_layers: n_layers,
            n_heads,
            d_ff: 2 * d_model,
            vocab_size,
            max_seq: 64,
            ..Self::llama_125m()
        }
    }

    pub fn with_self_layers(mut self, n: usize) -> Self {
        self.n_self_layers = n;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn n_cross_layers(&self) -> usize {
        self.n_layers - self.n_self_layers
    }

    pub fn is_baseline(&self) -> bool {
        self.n_self_layers == self.n_layers
    }

    /// Fraction of layers that read the shared KV, `(L - N) / L`.
    pub fn shared_fraction(&self) -> f64 {
        self.n_cross_layers() as f64 / self.n_layers as f64
    }

    /// Smallest admissible number of self-attention layers, `ceil(L / 2)`.
    pub fn min_self_layers(&self) -> usize {
        self.n_layers.div_ceil(2)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(EchoError::Config(msg));
        if self.n_layers == 0 {
            return fail("num_hidden_layers must be >= 1".into());
        }
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "hidden_size {} must be a positive multiple of num_attention_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !self.head_dim().is_multiple_of(2) {
            return fail(format!(
                "head dimension {} must be even for rotary embeddings",
                self.head_dim()
            ));
        }
        if self.n_self_layers > self.n_layers || 2 * self.n_self_layers < self.n_layers {
            return fail(format!(
                "num_self_attn_layers {} must lie in [L/2, L] = [{}, {}]",
                self.n_self_layers,
                self.min_self_layers(),
                self.n_layers
            ));
        }
        if self.vocab_size < 2 {
            return fail(format!("vocab_size {} must be >= 2", self.vocab_size));
        }
        if self.max_seq == 0 {
            return fail("max_position_embeddings must be >= 1".into());
        }
        if self.d_ff == 0 {
            return fail("intermediate_size must be >= 1".into());
        }
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return fail(format!(
                "layer_norm_epsilon {} must be a finite non-negative number",
                self.eps
            ));
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return fail(format!(
                "init_std {} must be a finite non-negative number",
                self.init_std
            ));
        }
        if !(self.rope_base > 0.0 && self.rope_base.is_finite()) {
            return fail(format!(
                "rotary_emb_base {} must be positive",
                self.rope_base
            ));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| EchoError::Config(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }
}

#[derive(Serialize, Deserialize)]
struct ConfigJson {
    hidden_size: usize,
    intermediate_size: usize,
    num_hidden_layers: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    num_self_attn_layers: Option<usize>,
    num_attention_heads: usize,
    vocab_size: usize,
    #[serde(default = "default_max_seq")]
    max_position_embeddings: usize,
    #[serde(default = "default_rope_base")]
    rotary_emb_base: f64,
    #[serde(default = "default_eps")]
    layer_norm_epsilon: f64,
    #[serde(default = "default_init_std")]
    init_std: f64,
    #[serde(default)]
    seed: u64,
}

fn default_max_seq() -> usize {
    2048
}
fn default_rope_base() -> f64 {
    10_000.0
}
fn default_eps() -> f64 {
    1e-5
}
fn default_init_std() -> f64 {
    0.02
}

impl TryFrom<ConfigJson> for ModelConfig {
    type Error = EchoError;

    fn try_from(c: ConfigJson) -> Result<Self> {
        let cfg = ModelConfig {
            d_model: c.hidden_size,
            n_layers: c.num_hidden_layers,
            n_self_layers: c.num_self_attn_layers.unwrap_or(c.num_hidden_layers),
            n_heads: c.num_attention_heads,
            d_ff: c.intermediate_size,
            vocab_size: c.vocab_size,
            max_seq: c.max_position_embeddings,
            rope_base: c.rotary_emb_base,
            eps: c.layer_norm_epsilon,
            init_std: c.init_std,
            seed: c.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl From<ModelConfig> for ConfigJson {
    fn from(c: ModelConfig) -> Self {
        ConfigJson {
            hidden_size: c.d_model,
            intermediate_size: c.d_ff,
            num_hidden_layers: c.n_layers,
            num_self_attn_layers: Some(c.n_self_layers),
            num_attention_heads: c.n_heads,
            vocab_size: c.vocab_size,
            max_position_embeddings: c.max_seq,
            rotary_emb_base: c.rope_base,
            layer_norm_epsilon: c.eps,
            init_std: c.init_std,
            seed: c.seed,
        }
    }
}
