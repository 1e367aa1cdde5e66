//! Temporal attention priors and the multi-head attention that consumes them.
//!
//! Distances are measured in whole timesteps, `d = i - j` for query `i` and
//! key `j`. Three learnable scalars per head shape the attention pattern:
//!
//! * span `L = clamp(softplus(s), 0, max_span)` bounds the look-back window
//!   through a linear ramp `m = clamp((L + R - d) / R, 0, 1)`;
//! * `mu` and `sigma = softplus(rho) + 1e-3` place a Gaussian bias
//!   `-(d - mu)^2 / (2 sigma^2)` on the logits.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{softplus, Tape, Var};
use crate::error::{Error, Result};

/// Floor added to the softplus when deriving `sigma`.
pub const SIGMA_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AttentionKind {
    Causal,
    Adaptive,
    Gaussian,
    Gaam,
}

impl AttentionKind {
    pub const ALL: [AttentionKind; 4] = [
        AttentionKind::Causal,
        AttentionKind::Adaptive,
        AttentionKind::Gaussian,
        AttentionKind::Gaam,
    ];

    pub fn token(self) -> &'static str {
        match self {
            AttentionKind::Causal => "causal",
            AttentionKind::Adaptive => "adaptive",
            AttentionKind::Gaussian => "gaussian",
            AttentionKind::Gaam => "gaam",
        }
    }

    /// Whether the kind learns a span.
    pub fn has_span(self) -> bool {
        matches!(self, AttentionKind::Adaptive | AttentionKind::Gaam)
    }

    /// Whether the kind learns a Gaussian offset and width.
    pub fn has_gaussian(self) -> bool {
        matches!(self, AttentionKind::Gaussian | AttentionKind::Gaam)
    }

    /// Learnable prior scalars per head.
    pub fn params_per_head(self) -> usize {
        usize::from(self.has_span()) + 2 * usize::from(self.has_gaussian())
    }
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttentionKind::ALL.into_iter().find(|k| k.token() == s).ok_or_else(|| {
            Error::config(
                "attention_type",
                format!("unknown attention type `{s}`; expected one of causal, gaussian, adaptive, gaam"),
            )
        })
    }
}

/// Raw (unconstrained) prior parameters of one head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorParams {
    pub raw_span: f64,
    pub mu: f64,
    pub raw_sigma: f64,
}

impl PriorParams {
    /// `clamp(softplus(raw_span), 0, max_span)`.
    pub fn span(&self, max_span: f64) -> f64 {
        span_from_raw(self.raw_span, max_span)
    }

    /// `softplus(raw_sigma) + 1e-3`.
    pub fn sigma(&self) -> f64 {
        sigma_from_raw(self.raw_sigma)
    }

    /// Raw parameters whose derived values reproduce `span`, `mu` and `sigma`
    /// exactly whenever the value is representable through the transform.
    pub fn from_derived(span: f64, mu: f64, sigma: f64) -> Result<Self> {
        Ok(Self {
            raw_span: raw_span_for(span)?,
            mu,
            raw_sigma: raw_sigma_for(sigma)?,
        })
    }
}

pub fn span_from_raw(raw: f64, max_span: f64) -> f64 {
    softplus(raw).clamp(0.0, max_span)
}

pub fn sigma_from_raw(raw: f64) -> f64 {
    softplus(raw) + SIGMA_FLOOR
}

fn inverse_softplus(y: f64) -> f64 {
    // ln(e^y - 1), rearranged to stay finite for large y
    y + (-(-y).exp_m1()).ln()
}

/// Walks `x` by single ulps towards the point where `f(x) == target`.
fn ulp_solve(mut x: f64, target: f64, f: impl Fn(f64) -> f64) -> f64 {
    let mut best = x;
    let mut best_err = (f(x) - target).abs();
    for _ in 0..256 {
        let y = f(x);
        if y == target {
            return x;
        }
        x = if y < target { x.next_up() } else { x.next_down() };
        let err = (f(x) - target).abs();
        if err < best_err {
            best = x;
            best_err = err;
        }
    }
    best
}

/// Raw span with `softplus(raw) == span`; `span` must be positive.
pub fn raw_span_for(span: f64) -> Result<f64> {
    if !(span > 0.0 && span.is_finite()) {
        return Err(Error::config(
            "init_adaptive_span",
            format!("span must be positive, got {span}"),
        ));
    }
    Ok(ulp_solve(inverse_softplus(span), span, softplus))
}

/// Raw width with `softplus(raw) + 1e-3 == sigma`.
pub fn raw_sigma_for(sigma: f64) -> Result<f64> {
    if !(sigma > SIGMA_FLOOR && sigma.is_finite()) {
        return Err(Error::config(
            "init_adaptive_sigma",
            format!("sigma must exceed {SIGMA_FLOOR}, got {sigma}"),
        ));
    }
    Ok(ulp_solve(inverse_softplus(sigma - SIGMA_FLOOR), sigma, sigma_from_raw))
}

/// Dense `T x T` matrix indexed by (query `i`, key `j`).
#[derive(Debug, Clone, PartialEq)]
pub struct PositionMatrix {
    t: usize,
    data: Vec<f64>,
}

/// Additive logit bias; `-inf` forbids attention.
pub type BiasMatrix = PositionMatrix;

/// Post-softmax multipliers in `[0, 1]`.
pub type SpanMask = PositionMatrix;

impl PositionMatrix {
    fn from_fn(t: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        if t == 0 {
            return Err(Error::dim("position matrix", "sequence length must be at least 1"));
        }
        let mut data = Vec::with_capacity(t * t);
        for i in 0..t {
            for j in 0..t {
                data.push(f(i, j));
            }
        }
        Ok(Self { t, data })
    }

    pub fn len(&self) -> usize {
        self.t
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.t + j]
    }

    /// Row-major values.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

pub fn causal_bias(t: usize) -> Result<BiasMatrix> {
    PositionMatrix::from_fn(t, |i, j| if j <= i { 0.0 } else { f64::NEG_INFINITY })
}

/// Ramp multiplier for a single distance.
pub fn ramp(span: f64, ramp_width: f64, d: f64) -> f64 {
    ((span + ramp_width - d) / ramp_width).clamp(0.0, 1.0)
}

pub fn adaptive_soft_mask(span: f64, ramp_width: f64, t: usize) -> Result<SpanMask> {
    if !(ramp_width > 0.0) {
        return Err(Error::Contract(format!(
            "ramp width must be positive, got {ramp_width}"
        )));
    }
    if !(span >= 0.0) {
        return Err(Error::Contract(format!("span must be non-negative, got {span}")));
    }
    PositionMatrix::from_fn(t, |i, j| {
        if j <= i {
            ramp(span, ramp_width, (i - j) as f64)
        } else {
            0.0
        }
    })
}

pub fn gaussian_bias(mu: f64, sigma: f64, t: usize) -> Result<BiasMatrix> {
    if !(sigma > 0.0) {
        return Err(Error::Contract(format!("sigma must be positive, got {sigma}")));
    }
    PositionMatrix::from_fn(t, |i, j| {
        if j <= i {
            let x = (i - j) as f64 - mu;
            -(x * x) / (2.0 * sigma * sigma)
        } else {
            f64::NEG_INFINITY
        }
    })
}

/// `G + ln(m)` with `ln(0) = -inf`.
pub fn combined_bias(g: &BiasMatrix, m: &SpanMask) -> Result<BiasMatrix> {
    if g.t != m.t {
        return Err(Error::dim(
            "combined_bias",
            format!("bias is {}x{} but mask is {}x{}", g.t, g.t, m.t, m.t),
        ));
    }
    PositionMatrix::from_fn(g.t, |i, j| {
        let mask = m.get(i, j);
        let b = g.get(i, j);
        if j > i || mask == 0.0 {
            f64::NEG_INFINITY
        } else {
            b + mask.ln()
        }
    })
}

/// Projection weights of one attention layer; matrices are `[D, D]` and
/// applied as `x · W + b`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// Raw prior parameters of one layer on the tape, each of shape `[h]`.
#[derive(Debug, Clone, Copy, Default)]
pub struct PriorVars {
    pub raw_span: Option<Var>,
    pub mu: Option<Var>,
    pub raw_sigma: Option<Var>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionSettings {
    pub kind: AttentionKind,
    pub heads: usize,
    pub max_span: f64,
    pub ramp: f64,
    pub dropout_p: f64,
}

fn need(v: Option<Var>, what: &str, kind: AttentionKind) -> Result<Var> {
    v.ok_or_else(|| Error::Contract(format!("{kind} attention needs the {what} parameter")))
}

/// Derived spans `[h]` on the tape.
pub fn span_var(tape: &mut Tape, raw_span: Var, max_span: f64) -> Result<Var> {
    let sp = tape.softplus(raw_span)?;
    tape.clamp(sp, 0.0, max_span)
}

/// Derived widths `[h]` on the tape.
pub fn sigma_var(tape: &mut Tape, raw_sigma: Var) -> Result<Var> {
    let sp = tape.softplus(raw_sigma)?;
    tape.offset(sp, SIGMA_FLOOR)
}

fn distance_matrix(tape: &mut Tape, t: usize) -> Result<Var> {
    let data = (0..t * t).map(|k| (k / t) as f64 - (k % t) as f64).collect();
    tape.constant(&[t, t], data)
}

/// Gaussian logit bias `[h, T, T]` including the causal `-inf` entries.
pub fn gaussian_bias_var(tape: &mut Tape, mu: Var, sigma: Var, t: usize) -> Result<Var> {
    let h = tape.shape(mu)[0];
    let d = distance_matrix(tape, t)?;
    let mu = tape.reshape(mu, &[h, 1, 1])?;
    let sigma = tape.reshape(sigma, &[h, 1, 1])?;
    let diff = tape.sub(d, mu)?;
    let num = tape.square(diff)?;
    let var = tape.square(sigma)?;
    let den = tape.scale(var, 2.0)?;
    let q = tape.div(num, den)?;
    let g = tape.neg(q)?;
    let causal = causal_bias(t)?;
    let c = tape.constant(&[t, t], causal.data)?;
    tape.add(g, c)
}

/// Ramp multipliers `[h, T, T]`, zero above the diagonal.
pub fn span_mask_var(tape: &mut Tape, span: Var, ramp_width: f64, t: usize) -> Result<Var> {
    if !(ramp_width > 0.0) {
        return Err(Error::Contract(format!(
            "ramp width must be positive, got {ramp_width}"
        )));
    }
    let h = tape.shape(span)[0];
    let d = distance_matrix(tape, t)?;
    let span = tape.reshape(span, &[h, 1, 1])?;
    let shifted = tape.offset(span, ramp_width)?;
    let gap = tape.sub(shifted, d)?;
    let scaled = tape.scale(gap, 1.0 / ramp_width)?;
    let m = tape.clamp(scaled, 0.0, 1.0)?;
    let tri = (0..t * t).map(|k| if k % t <= k / t { 1.0 } else { 0.0 }).collect();
    let tri = tape.constant(&[t, t], tri)?;
    tape.mul(m, tri)
}

fn project(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

/// Attention probabilities `[B, h, T, T]` for the given scores.
///
/// The span ramp multiplies the softmax output and each row is renormalized.
pub fn prior_attention_weights(
    tape: &mut Tape,
    scores: Var,
    priors: &PriorVars,
    settings: &AttentionSettings,
) -> Result<Var> {
    let t = tape.shape(scores)[2];
    let kind = settings.kind;
    let bias = if kind.has_gaussian() {
        let mu = need(priors.mu, "mu", kind)?;
        let raw_sigma = need(priors.raw_sigma, "raw_sigma", kind)?;
        let sigma = sigma_var(tape, raw_sigma)?;
        gaussian_bias_var(tape, mu, sigma, t)?
    } else {
        let causal = causal_bias(t)?;
        tape.constant(&[t, t], causal.data)?
    };
    let p = tape.softmax_lastdim(scores, Some(bias))?;
    if !kind.has_span() {
        return Ok(p);
    }
    let raw_span = need(priors.raw_span, "raw_span", kind)?;
    let span = span_var(tape, raw_span, settings.max_span)?;
    let m = span_mask_var(tape, span, settings.ramp, t)?;
    let q = tape.mul(p, m)?;
    let rows = tape.sum_axis(q, 3)?;
    tape.div(q, rows)
}

/// Multi-head self-attention over `x: [B, T, D]`.
///
/// Returns the projected context `[B, T, D]` and the attention weights
/// `[B, h, T, T]` before dropout. Dropout on the weights is applied only
/// when `dropout_rng` is given.
pub fn multi_head_attention(
    tape: &mut Tape,
    x: Var,
    w: &AttentionWeights,
    priors: &PriorVars,
    settings: &AttentionSettings,
    dropout_rng: Option<&mut dyn rand::RngCore>,
) -> Result<(Var, Var)> {
    let shape = tape.shape(x).to_vec();
    let [b, t, d] = shape[..] else {
        return Err(Error::dim(
            "attention",
            format!("input must be [B, T, D], got {shape:?}"),
        ));
    };
    let h = settings.heads;
    if h == 0 || d % h != 0 {
        return Err(Error::config("heads", format!("D = {d} is not divisible by h = {h}")));
    }
    let dk = d / h;
    let q = project(tape, x, w.wq, w.bq)?;
    let k = project(tape, x, w.wk, w.bk)?;
    let v = project(tape, x, w.wv, w.bv)?;
    let q = tape.reshape(q, &[b, t, h, dk])?;
    let q = tape.permute(q, &[0, 2, 1, 3])?;
    let k = tape.reshape(k, &[b, t, h, dk])?;
    let kt = tape.permute(k, &[0, 2, 3, 1])?;
    let v = tape.reshape(v, &[b, t, h, dk])?;
    let v = tape.permute(v, &[0, 2, 1, 3])?;

    let logits = tape.matmul(q, kt)?;
    let scores = tape.scale(logits, 1.0 / (dk as f64).sqrt())?;
    let weights = prior_attention_weights(tape, scores, priors, settings)?;

    let used = match dropout_rng {
        Some(rng) if settings.dropout_p > 0.0 => {
            let keep = 1.0 - settings.dropout_p;
            let n = b * h * t * t;
            let mask = (0..n)
                .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect();
            let mask = tape.constant(&[b, h, t, t], mask)?;
            tape.mul(weights, mask)?
        }
        _ => weights,
    };
    let ctx = tape.matmul(used, v)?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[b, t, d])?;
    let out = project(tape, ctx, w.wo, w.bo)?;
    Ok((out, weights))
}
