//! Parameter and FLOP accounting.
//!
//! FLOP convention: a multiply-accumulate is 2 FLOPs, a bias add 1 per
//! element, layer norm 7 per element, GELU 8 per element, softmax 4 per
//! score and the logit scaling 1 per score. Building a prior costs, per
//! (query, key, head) pair on the causal triangle, 4 FLOPs for the Gaussian
//! bias and 3 for the span ramp. Masks given as constants cost nothing.

use crate::attention::AttentionKind;
use crate::error::{Error, Result};

use super::config::ModelConfig;

pub const LAYER_NORM_FLOPS: u64 = 7;
pub const GELU_FLOPS: u64 = 8;
pub const SOFTMAX_FLOPS: u64 = 4;
pub const GAUSSIAN_PAIR_FLOPS: u64 = 4;
pub const RAMP_PAIR_FLOPS: u64 = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamCount {
    pub total: usize,
    /// Transformer blocks including their prior parameters.
    pub transformer: usize,
    pub priors: usize,
    pub components: Vec<(&'static str, usize)>,
}

pub fn count_params(c: &ModelConfig) -> ParamCount {
    let d = c.embed_dim;
    let n = c.num_layers;
    let attention = n * (4 * d * d + 4 * d);
    let mlp = n * (8 * d * d + 5 * d);
    let norms = n * 4 * d;
    let priors = n * c.num_heads * c.attention_type.params_per_head();
    let transformer = attention + mlp + norms + priors;
    let embeddings = (c.latent_vocab + c.action_vocab + c.context_length) * d;
    let final_norm = 2 * d;
    let head = |out: usize| d * d + d + d * out + out;
    let dynamics = head(d) + head(c.reward_bins);
    let prediction = head(c.action_vocab) + head(c.value_bins);
    let components = vec![
        ("embeddings", embeddings),
        ("attention", attention),
        ("mlp", mlp),
        ("layer_norms", norms),
        ("priors", priors),
        ("final_norm", final_norm),
        ("dynamics_head", dynamics),
        ("prediction_head", prediction),
    ];
    ParamCount {
        total: components.iter().map(|(_, v)| v).sum(),
        transformer,
        priors,
        components,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlopCount {
    pub kind: AttentionKind,
    pub tokens: usize,
    pub total: u64,
    pub components: Vec<(&'static str, u64)>,
}

impl FlopCount {
    pub fn mflops(&self) -> f64 {
        self.total as f64 / 1e6
    }

    pub fn component(&self, name: &str) -> Option<u64> {
        self.components.iter().find(|(n, _)| *n == name).map(|&(_, v)| v)
    }

    /// Relative increase over `baseline` in percent.
    pub fn delta_percent(&self, baseline: &FlopCount) -> f64 {
        (self.total as f64 - baseline.total as f64) / baseline.total as f64 * 100.0
    }
}

/// FLOPs of one transformer forward pass over `tokens` positions at batch 1.
pub fn count_flops(c: &ModelConfig, tokens: usize) -> Result<FlopCount> {
    if tokens == 0 {
        return Err(Error::dim("count_flops", "need at least one token"));
    }
    let t = tokens as u64;
    let d = c.embed_dim as u64;
    let h = c.num_heads as u64;
    let n = c.num_layers as u64;
    let pairs = t * (t + 1) / 2;
    let kind = c.attention_type;
    let per_layer_prior = h
        * pairs
        * (if kind.has_gaussian() { GAUSSIAN_PAIR_FLOPS } else { 0 }
            + if kind.has_span() { RAMP_PAIR_FLOPS } else { 0 });
    let components = vec![
        ("layer_norms", n * 2 * LAYER_NORM_FLOPS * t * d),
        ("attention_projections", n * 4 * (2 * t * d * d + t * d)),
        ("attention_scores", n * (2 * t * t * d + h * t * t)),
        ("prior_bias", n * per_layer_prior),
        ("softmax", n * SOFTMAX_FLOPS * h * t * t),
        ("attention_context", n * 2 * t * t * d),
        (
            "mlp",
            n * (2 * t * d * 4 * d + 4 * t * d + GELU_FLOPS * 4 * t * d + 2 * t * 4 * d * d + t * d),
        ),
        ("residuals", n * 2 * t * d),
    ];
    Ok(FlopCount {
        kind,
        tokens,
        total: components.iter().map(|(_, v)| v).sum(),
        components,
    })
}

/// One row of the overhead table.
#[derive(Debug, Clone, PartialEq)]
pub struct OverheadRow {
    pub kind: AttentionKind,
    pub total_params: usize,
    pub transformer_params: usize,
    pub mflops: f64,
    /// `None` for the causal baseline.
    pub delta_percent: Option<f64>,
}

/// Parameters and FLOPs of every attention kind on `base`'s architecture.
pub fn overhead_table(base: &ModelConfig, tokens: usize) -> Result<Vec<OverheadRow>> {
    let with = |kind| ModelConfig {
        attention_type: kind,
        ..base.clone()
    };
    let baseline = count_flops(&with(AttentionKind::Causal), tokens)?;
    let order = [
        AttentionKind::Causal,
        AttentionKind::Adaptive,
        AttentionKind::Gaussian,
        AttentionKind::Gaam,
    ];
    order
        .into_iter()
        .map(|kind| {
            let cfg = with(kind);
            let p = count_params(&cfg);
            let f = count_flops(&cfg, tokens)?;
            Ok(OverheadRow {
                kind,
                total_params: p.total,
                transformer_params: p.transformer,
                mflops: f.mflops(),
                delta_percent: (kind != AttentionKind::Causal).then(|| f.delta_percent(&baseline)),
            })
        })
        .collect()
}

/// Rounds a percentage to three decimals, the precision of the overhead table.
pub fn round3(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}
