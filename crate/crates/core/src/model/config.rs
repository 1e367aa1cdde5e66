use crate::attention::AttentionKind;
use crate::error::{Error, Result};

/// Architecture and prior configuration of the world model.
///
/// Prior-related field names match the configuration keys used on the
/// command line.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Embedding width `D`.
    pub embed_dim: usize,
    /// Transformer layers `N`.
    pub num_layers: usize,
    /// Heads per layer `h`.
    pub num_heads: usize,
    /// Training context length `H` in timesteps.
    pub context_length: usize,
    pub attention_type: AttentionKind,
    pub init_adaptive_span: f64,
    pub init_adaptive_mu: f64,
    pub init_adaptive_sigma: f64,
    pub max_adaptive_span: f64,
    pub adapt_span_ramp: f64,
    pub adapt_span_loss: f64,
    pub reward_bins: usize,
    pub value_bins: usize,
    /// SimNorm group size `V`.
    pub simnorm_dim: usize,
    pub simnorm_tau: f64,
    pub latent_vocab: usize,
    pub action_vocab: usize,
    pub dropout_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            num_layers: 2,
            num_heads: 8,
            context_length: 10,
            attention_type: AttentionKind::Causal,
            init_adaptive_span: 6.0,
            init_adaptive_mu: 6.0,
            init_adaptive_sigma: 1.0,
            max_adaptive_span: 20.0,
            adapt_span_ramp: 3.0,
            adapt_span_loss: 0.025,
            reward_bins: 3,
            value_bins: 101,
            simnorm_dim: 8,
            simnorm_tau: 1.0,
            latent_vocab: 16,
            action_vocab: 4,
            dropout_rate: 0.1,
        }
    }
}

/// Initial span used when none is given: a hard cutoff of 10 for the
/// combined kind and 6 otherwise.
pub fn default_init_span(kind: AttentionKind) -> f64 {
    match kind {
        AttentionKind::Gaam => 10.0,
        _ => 6.0,
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

impl ModelConfig {
    /// Desk defaults for `kind`, including its initial span.
    pub fn for_kind(kind: AttentionKind) -> Self {
        Self {
            attention_type: kind,
            init_adaptive_span: default_init_span(kind),
            ..Self::default()
        }
    }

    /// Full-size architecture used for overhead accounting.
    pub fn reference(kind: AttentionKind) -> Self {
        Self {
            embed_dim: 768,
            num_layers: 2,
            num_heads: 8,
            context_length: 10,
            reward_bins: 101,
            ..Self::for_kind(kind)
        }
    }

    pub const KEYS: [&'static str; 18] = [
        "embed_dim",
        "num_layers",
        "num_heads",
        "context_length",
        "attention_type",
        "init_adaptive_span",
        "init_adaptive_mu",
        "init_adaptive_sigma",
        "max_adaptive_span",
        "adapt_span_ramp",
        "adapt_span_loss",
        "reward_bins",
        "value_bins",
        "simnorm_dim",
        "simnorm_tau",
        "latent_vocab",
        "action_vocab",
        "dropout_rate",
    ];

    /// Sets one field from its textual form. Returns `Ok(false)` for keys
    /// that are not model settings.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "embed_dim" => self.embed_dim = parse(key, value)?,
            "num_layers" => self.num_layers = parse(key, value)?,
            "num_heads" => self.num_heads = parse(key, value)?,
            "context_length" => self.context_length = parse(key, value)?,
            "attention_type" => self.attention_type = value.trim().parse()?,
            "init_adaptive_span" => self.init_adaptive_span = parse(key, value)?,
            "init_adaptive_mu" => self.init_adaptive_mu = parse(key, value)?,
            "init_adaptive_sigma" => self.init_adaptive_sigma = parse(key, value)?,
            "max_adaptive_span" => self.max_adaptive_span = parse(key, value)?,
            "adapt_span_ramp" => self.adapt_span_ramp = parse(key, value)?,
            "adapt_span_loss" => self.adapt_span_loss = parse(key, value)?,
            "reward_bins" => self.reward_bins = parse(key, value)?,
            "value_bins" => self.value_bins = parse(key, value)?,
            "simnorm_dim" => self.simnorm_dim = parse(key, value)?,
            "simnorm_tau" => self.simnorm_tau = parse(key, value)?,
            "latent_vocab" => self.latent_vocab = parse(key, value)?,
            "action_vocab" => self.action_vocab = parse(key, value)?,
            "dropout_rate" => self.dropout_rate = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Every field as `(key, value)` text; floats use a round-trip format.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("embed_dim", self.embed_dim.to_string()),
            ("num_layers", self.num_layers.to_string()),
            ("num_heads", self.num_heads.to_string()),
            ("context_length", self.context_length.to_string()),
            ("attention_type", self.attention_type.token().to_string()),
            ("init_adaptive_span", format!("{:?}", self.init_adaptive_span)),
            ("init_adaptive_mu", format!("{:?}", self.init_adaptive_mu)),
            ("init_adaptive_sigma", format!("{:?}", self.init_adaptive_sigma)),
            ("max_adaptive_span", format!("{:?}", self.max_adaptive_span)),
            ("adapt_span_ramp", format!("{:?}", self.adapt_span_ramp)),
            ("adapt_span_loss", format!("{:?}", self.adapt_span_loss)),
            ("reward_bins", self.reward_bins.to_string()),
            ("value_bins", self.value_bins.to_string()),
            ("simnorm_dim", self.simnorm_dim.to_string()),
            ("simnorm_tau", format!("{:?}", self.simnorm_tau)),
            ("latent_vocab", self.latent_vocab.to_string()),
            ("action_vocab", self.action_vocab.to_string()),
            ("dropout_rate", format!("{:?}", self.dropout_rate)),
        ]
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("embed_dim", self.embed_dim),
            ("num_heads", self.num_heads),
            ("context_length", self.context_length),
            ("reward_bins", self.reward_bins),
            ("value_bins", self.value_bins),
            ("simnorm_dim", self.simnorm_dim),
            ("latent_vocab", self.latent_vocab),
            ("action_vocab", self.action_vocab),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::config(
                "num_heads",
                format!(
                    "embed_dim {} is not divisible by num_heads {}",
                    self.embed_dim, self.num_heads
                ),
            ));
        }
        if !self.embed_dim.is_multiple_of(self.simnorm_dim) {
            return Err(Error::config(
                "simnorm_dim",
                format!(
                    "embed_dim {} is not divisible by simnorm_dim {}",
                    self.embed_dim, self.simnorm_dim
                ),
            ));
        }
        let checks = [
            ("simnorm_tau", self.simnorm_tau > 0.0),
            ("adapt_span_ramp", self.adapt_span_ramp > 0.0),
            ("max_adaptive_span", self.max_adaptive_span > 0.0),
            ("adapt_span_loss", self.adapt_span_loss >= 0.0),
            ("dropout_rate", (0.0..1.0).contains(&self.dropout_rate)),
            (
                "init_adaptive_sigma",
                self.init_adaptive_sigma > crate::attention::SIGMA_FLOOR,
            ),
            ("init_adaptive_mu", self.init_adaptive_mu.is_finite()),
            (
                "init_adaptive_span",
                self.init_adaptive_span > 0.0 && self.init_adaptive_span <= self.max_adaptive_span,
            ),
        ];
        for (key, ok) in checks {
            if !ok {
                return Err(Error::config(key, "value out of range"));
            }
        }
        Ok(())
    }
}
