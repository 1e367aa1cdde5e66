use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::attention::{
    multi_head_attention, raw_sigma_for, raw_span_for, sigma_from_raw, span_from_raw, AttentionSettings,
    AttentionWeights, PriorVars,
};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

use super::config::ModelConfig;
use super::params::{Bound, ParamGroup, ParamId, ParamSet};

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

/// SimNorm on the tape: softmax with temperature `tau` over consecutive
/// groups of `v` entries along the last axis.
pub fn simnorm(tape: &mut Tape, x: Var, v: usize, tau: f64) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let d = *shape.last().ok_or_else(|| Error::dim("simnorm", "scalar input"))?;
    if v == 0 || d % v != 0 {
        return Err(Error::config("simnorm_dim", format!("{d} is not divisible by {v}")));
    }
    if !(tau > 0.0) {
        return Err(Error::config(
            "simnorm_tau",
            format!("temperature must be positive, got {tau}"),
        ));
    }
    let mut grouped = shape.clone();
    grouped.pop();
    grouped.extend([d / v, v]);
    let g = tape.reshape(x, &grouped)?;
    let g = tape.scale(g, 1.0 / tau)?;
    let s = tape.softmax_lastdim(g, None)?;
    tape.reshape(s, &shape)
}

/// SimNorm of a plain vector whose length is a multiple of `v`.
pub fn simnorm_values(x: &[f64], v: usize, tau: f64) -> Result<Vec<f64>> {
    if v == 0 || !x.len().is_multiple_of(v) {
        return Err(Error::config(
            "simnorm_dim",
            format!("{} is not divisible by {v}", x.len()),
        ));
    }
    let mut out = Vec::with_capacity(x.len());
    for group in x.chunks(v) {
        let max = group.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = group.iter().map(|z| ((z - max) / tau).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.iter().map(|z| z / s));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    g: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Mlp {
    l1: Linear,
    l2: Linear,
}

/// Parameter ids of one head's prior family within a layer, each `[h]`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PriorIds {
    pub raw_span: Option<ParamId>,
    pub mu: Option<ParamId>,
    pub raw_sigma: Option<ParamId>,
}

#[derive(Debug, Clone, Copy)]
struct Block {
    ln1: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    priors: PriorIds,
    ln2: Norm,
    fc: Linear,
    proj: Linear,
}

/// Derived prior values of one head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorSnapshot {
    pub layer: usize,
    pub head: usize,
    pub span: Option<f64>,
    pub mu: Option<f64>,
    pub sigma: Option<f64>,
}

/// Next-latent and reward predictions for every position.
#[derive(Debug, Clone, Copy)]
pub struct DynamicsOutput {
    /// Pre-SimNorm latent logits `[B, T, D]`.
    pub latent_logits: Var,
    /// SimNorm simplices `[B, T, D]`.
    pub latent: Var,
    /// `[B, T, reward_bins]`.
    pub reward_logits: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct PredictionOutput {
    /// `[B, T, action_vocab]`.
    pub policy_logits: Var,
    /// `[B, T, value_bins]`.
    pub value_logits: Var,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub dynamics: DynamicsOutput,
    /// Attention weights `[B, h, T, T]` per layer, before dropout.
    pub attention: Vec<Var>,
    /// Final normalized hidden states `[B, T, D]`.
    pub hidden: Var,
}

/// Token-level inputs: `latents` and `actions` are `[B, T]` row-major.
#[derive(Debug, Clone, Copy)]
pub struct StepInputs<'a> {
    pub latents: &'a [usize],
    pub actions: &'a [usize],
    pub batch: usize,
    pub steps: usize,
}

/// Transformer world model with fused per-timestep tokens, a dynamics head
/// and a prediction head.
#[derive(Debug, Clone)]
pub struct WorldModel {
    config: ModelConfig,
    params: ParamSet,
    latent_emb: ParamId,
    action_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<Block>,
    ln_f: Norm,
    dyn_latent: Mlp,
    dyn_reward: Mlp,
    policy: Mlp,
    value: Mlp,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let dist = Normal::new(0.0, std).expect("standard deviation is positive");
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches data")
    }
}

impl WorldModel {
    /// Builds a model with weights drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let d = c.embed_dim;
        let h = c.num_heads;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let mut params = ParamSet::new();
        let out_std = INIT_STD / (2.0 * c.num_layers.max(1) as f64).sqrt();

        let linear = |params: &mut ParamSet, init: &mut Init, name: &str, fan_in, fan_out, std| Linear {
            w: params.add(
                format!("{name}.weight"),
                init.normal(&[fan_in, fan_out], std),
                ParamGroup::Weight,
            ),
            b: params.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]), ParamGroup::NoDecay),
        };
        let norm = |params: &mut ParamSet, name: &str| Norm {
            g: params.add(format!("{name}.gain"), Tensor::full(&[d], 1.0), ParamGroup::NoDecay),
            b: params.add(format!("{name}.bias"), Tensor::zeros(&[d]), ParamGroup::NoDecay),
        };

        // unit-scale latent rows keep the SimNorm targets of distinct tokens apart
        let latent_emb = params.add("latent_emb", init.normal(&[c.latent_vocab, d], 1.0), ParamGroup::Weight);
        let action_emb = params.add(
            "action_emb",
            init.normal(&[c.action_vocab, d], INIT_STD),
            ParamGroup::Weight,
        );
        let pos_emb = params.add(
            "pos_emb",
            init.normal(&[c.context_length, d], INIT_STD),
            ParamGroup::Weight,
        );

        let kind = c.attention_type;
        let raw_span = raw_span_for(c.init_adaptive_span)?;
        let raw_sigma = raw_sigma_for(c.init_adaptive_sigma)?;
        let mut blocks = Vec::with_capacity(c.num_layers);
        for l in 0..c.num_layers {
            let p = format!("layers.{l}");
            let ln1 = norm(&mut params, &format!("{p}.ln1"));
            let q = linear(&mut params, &mut init, &format!("{p}.attn.query"), d, d, INIT_STD);
            let k = linear(&mut params, &mut init, &format!("{p}.attn.key"), d, d, INIT_STD);
            let v = linear(&mut params, &mut init, &format!("{p}.attn.value"), d, d, INIT_STD);
            let o = linear(&mut params, &mut init, &format!("{p}.attn.out"), d, d, out_std);
            let mut priors = PriorIds::default();
            if kind.has_span() {
                priors.raw_span = Some(params.add(
                    format!("{p}.attn.raw_span"),
                    Tensor::full(&[h], raw_span),
                    ParamGroup::Prior,
                ));
            }
            if kind.has_gaussian() {
                priors.mu = Some(params.add(
                    format!("{p}.attn.mu"),
                    Tensor::full(&[h], c.init_adaptive_mu),
                    ParamGroup::Prior,
                ));
                priors.raw_sigma = Some(params.add(
                    format!("{p}.attn.raw_sigma"),
                    Tensor::full(&[h], raw_sigma),
                    ParamGroup::Prior,
                ));
            }
            let ln2 = norm(&mut params, &format!("{p}.ln2"));
            let fc = linear(&mut params, &mut init, &format!("{p}.mlp.fc"), d, 4 * d, INIT_STD);
            let proj = linear(&mut params, &mut init, &format!("{p}.mlp.proj"), 4 * d, d, out_std);
            blocks.push(Block {
                ln1,
                q,
                k,
                v,
                o,
                priors,
                ln2,
                fc,
                proj,
            });
        }
        let ln_f = norm(&mut params, "ln_f");
        let mut mlp = |params: &mut ParamSet, name: &str, out: usize| Mlp {
            l1: linear(params, &mut init, &format!("{name}.0"), d, d, INIT_STD),
            l2: linear(params, &mut init, &format!("{name}.1"), d, out, INIT_STD),
        };
        let dyn_latent = mlp(&mut params, "dynamics.latent", d);
        let dyn_reward = mlp(&mut params, "dynamics.reward", c.reward_bins);
        let policy = mlp(&mut params, "prediction.policy", c.action_vocab);
        let value = mlp(&mut params, "prediction.value", c.value_bins);
        Ok(Self {
            config,
            params,
            latent_emb,
            action_emb,
            pos_emb,
            blocks,
            ln_f,
            dyn_latent,
            dyn_reward,
            policy,
            value,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Replaces the parameter set; names and shapes must match.
    pub fn set_params(&mut self, params: ParamSet) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        for (a, b) in self.params.iter().zip(params.iter()) {
            if a.name != b.name || a.tensor.shape() != b.tensor.shape() {
                return Err(Error::Contract(format!(
                    "parameter mismatch: {} {:?} vs {} {:?}",
                    a.name,
                    a.tensor.shape(),
                    b.name,
                    b.tensor.shape()
                )));
            }
        }
        self.params = params;
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        self.params.bind(tape)
    }

    /// Prior parameter ids per layer.
    pub fn prior_ids(&self) -> Vec<PriorIds> {
        self.blocks.iter().map(|b| b.priors).collect()
    }

    /// Raw span parameters of every layer.
    pub fn span_ids(&self) -> Vec<ParamId> {
        self.blocks.iter().filter_map(|b| b.priors.raw_span).collect()
    }

    /// Freezes or thaws every raw span parameter.
    pub fn set_spans_trainable(&mut self, trainable: bool) {
        for id in self.span_ids() {
            self.params.get_mut(id).trainable = trainable;
        }
    }

    /// Derived priors per (layer, head) from the current raw values.
    pub fn prior_snapshot(&self) -> Vec<PriorSnapshot> {
        let c = &self.config;
        let mut out = Vec::new();
        for (layer, b) in self.blocks.iter().enumerate() {
            let val = |id: Option<ParamId>, head: usize| id.map(|id| self.params.get(id).tensor.data()[head]);
            for head in 0..c.num_heads {
                out.push(PriorSnapshot {
                    layer,
                    head,
                    span: val(b.priors.raw_span, head).map(|s| span_from_raw(s, c.max_adaptive_span)),
                    mu: val(b.priors.mu, head),
                    sigma: val(b.priors.raw_sigma, head).map(sigma_from_raw),
                });
            }
        }
        out
    }

    fn check_ids(&self, latents: &[usize], actions: &[usize]) -> Result<()> {
        let c = &self.config;
        if let Some(z) = latents.iter().find(|&&z| z >= c.latent_vocab) {
            return Err(Error::Index(format!(
                "latent id {z} outside vocabulary of {}",
                c.latent_vocab
            )));
        }
        if let Some(a) = actions.iter().find(|&&a| a >= c.action_vocab) {
            return Err(Error::Index(format!(
                "action id {a} outside vocabulary of {}",
                c.action_vocab
            )));
        }
        Ok(())
    }

    /// One fused token: latent + action + position embeddings, shape `[D]`.
    pub fn embed_step(&self, tape: &mut Tape, bound: &Bound, z: usize, a: usize, pos: usize) -> Result<Var> {
        let tokens = self.embed(
            tape,
            bound,
            StepInputs {
                latents: &[z],
                actions: &[a],
                batch: 1,
                steps: 1,
            },
            pos,
        )?;
        tape.reshape(tokens, &[self.config.embed_dim])
    }

    /// Token sequence `[B, T, D]` for inputs starting at position `start`.
    pub fn embed(&self, tape: &mut Tape, bound: &Bound, inputs: StepInputs<'_>, start: usize) -> Result<Var> {
        let StepInputs {
            latents,
            actions,
            batch,
            steps,
        } = inputs;
        let n = batch * steps;
        if latents.len() != n || actions.len() != n || n == 0 {
            return Err(Error::dim(
                "embed",
                format!(
                    "expected {batch}x{steps} ids, got {} latents and {} actions",
                    latents.len(),
                    actions.len()
                ),
            ));
        }
        if start + steps > self.config.context_length {
            return Err(Error::Index(format!(
                "positions up to {} exceed context length {}",
                start + steps - 1,
                self.config.context_length
            )));
        }
        self.check_ids(latents, actions)?;
        let d = self.config.embed_dim;
        let z = tape.gather_rows(bound.var(self.latent_emb), latents)?;
        let a = tape.gather_rows(bound.var(self.action_emb), actions)?;
        let positions: Vec<usize> = (start..start + steps).collect();
        let p = tape.gather_rows(bound.var(self.pos_emb), &positions)?;
        let za = tape.add(z, a)?;
        let za = tape.reshape(za, &[batch, steps, d])?;
        tape.add(za, p)
    }

    fn layer_norm(&self, tape: &mut Tape, bound: &Bound, x: Var, n: Norm) -> Result<Var> {
        let axis = tape.shape(x).len() - 1;
        let mean = tape.mean_axis(x, axis)?;
        let centered = tape.sub(x, mean)?;
        let sq = tape.square(centered)?;
        let var = tape.mean_axis(sq, axis)?;
        let var = tape.offset(var, LN_EPS)?;
        let std = tape.sqrt(var)?;
        let normed = tape.div(centered, std)?;
        let scaled = tape.mul(normed, bound.var(n.g))?;
        tape.add(scaled, bound.var(n.b))
    }

    fn linear(&self, tape: &mut Tape, bound: &Bound, x: Var, l: Linear) -> Result<Var> {
        let y = tape.matmul(x, bound.var(l.w))?;
        tape.add(y, bound.var(l.b))
    }

    fn mlp(&self, tape: &mut Tape, bound: &Bound, x: Var, m: Mlp) -> Result<Var> {
        let y = self.linear(tape, bound, x, m.l1)?;
        let y = tape.gelu(y)?;
        self.linear(tape, bound, y, m.l2)
    }

    pub fn attention_settings(&self) -> AttentionSettings {
        let c = &self.config;
        AttentionSettings {
            kind: c.attention_type,
            heads: c.num_heads,
            max_span: c.max_adaptive_span,
            ramp: c.adapt_span_ramp,
            dropout_p: c.dropout_rate,
        }
    }

    /// Runs the pre-norm blocks over `tokens: [B, T, D]`.
    ///
    /// Returns the residual stream and each layer's attention weights.
    /// Dropout is active only when `dropout_rng` is given.
    pub fn transformer_forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        tokens: Var,
        mut dropout_rng: Option<&mut dyn rand::RngCore>,
    ) -> Result<(Var, Vec<Var>)> {
        let shape = tape.shape(tokens).to_vec();
        if shape.len() != 3 || shape[2] != self.config.embed_dim {
            return Err(Error::dim(
                "transformer",
                format!("expected [B, T, {}], got {shape:?}", self.config.embed_dim),
            ));
        }
        if shape[1] > self.config.context_length {
            return Err(Error::Contract(format!(
                "sequence of {} steps exceeds context length {}",
                shape[1], self.config.context_length
            )));
        }
        let settings = self.attention_settings();
        let mut x = tokens;
        let mut weights = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let n1 = self.layer_norm(tape, bound, x, b.ln1)?;
            let w = AttentionWeights {
                wq: bound.var(b.q.w),
                bq: bound.var(b.q.b),
                wk: bound.var(b.k.w),
                bk: bound.var(b.k.b),
                wv: bound.var(b.v.w),
                bv: bound.var(b.v.b),
                wo: bound.var(b.o.w),
                bo: bound.var(b.o.b),
            };
            let priors = PriorVars {
                raw_span: b.priors.raw_span.map(|id| bound.var(id)),
                mu: b.priors.mu.map(|id| bound.var(id)),
                raw_sigma: b.priors.raw_sigma.map(|id| bound.var(id)),
            };
            let rng = dropout_rng.as_mut().map(|r| &mut **r as &mut dyn rand::RngCore);
            let (ctx, att) = multi_head_attention(tape, n1, &w, &priors, &settings, rng)?;
            weights.push(att);
            x = tape.add(x, ctx)?;
            let n2 = self.layer_norm(tape, bound, x, b.ln2)?;
            let f = self.linear(tape, bound, n2, b.fc)?;
            let f = tape.gelu(f)?;
            let f = self.linear(tape, bound, f, b.proj)?;
            x = tape.add(x, f)?;
        }
        Ok((x, weights))
    }

    /// Next-latent and reward predictions from hidden states `[B, T, D]`.
    pub fn dynamics_head(&self, tape: &mut Tape, bound: &Bound, hidden: Var) -> Result<DynamicsOutput> {
        let c = &self.config;
        let latent_logits = self.mlp(tape, bound, hidden, self.dyn_latent)?;
        let latent = simnorm(tape, latent_logits, c.simnorm_dim, c.simnorm_tau)?;
        let reward_logits = self.mlp(tape, bound, hidden, self.dyn_reward)?;
        Ok(DynamicsOutput {
            latent_logits,
            latent,
            reward_logits,
        })
    }

    /// Policy and value logits from hidden states `[B, T, D]`.
    pub fn prediction_head(&self, tape: &mut Tape, bound: &Bound, hidden: Var) -> Result<PredictionOutput> {
        Ok(PredictionOutput {
            policy_logits: self.mlp(tape, bound, hidden, self.policy)?,
            value_logits: self.mlp(tape, bound, hidden, self.value)?,
        })
    }

    /// Embedding, transformer, final norm and dynamics head.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        inputs: StepInputs<'_>,
        dropout_rng: Option<&mut dyn rand::RngCore>,
    ) -> Result<ForwardOutput> {
        let tokens = self.embed(tape, bound, inputs, 0)?;
        let (x, attention) = self.transformer_forward(tape, bound, tokens, dropout_rng)?;
        let hidden = self.layer_norm(tape, bound, x, self.ln_f)?;
        let dynamics = self.dynamics_head(tape, bound, hidden)?;
        Ok(ForwardOutput {
            dynamics,
            attention,
            hidden,
        })
    }

    /// SimNorm of the latent embedding rows of `tokens`, concatenated.
    pub fn latent_targets(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        let c = &self.config;
        if let Some(z) = tokens.iter().find(|&&z| z >= c.latent_vocab) {
            return Err(Error::Index(format!(
                "latent id {z} outside vocabulary of {}",
                c.latent_vocab
            )));
        }
        let table = self.params.get(self.latent_emb).tensor.data();
        let d = c.embed_dim;
        let mut out = Vec::with_capacity(tokens.len() * d);
        for &z in tokens {
            out.extend(simnorm_values(
                &table[z * d..(z + 1) * d],
                c.simnorm_dim,
                c.simnorm_tau,
            )?);
        }
        Ok(out)
    }

    /// Parameter id of the latent embedding table.
    pub fn latent_embedding(&self) -> ParamId {
        self.latent_emb
    }

    pub fn action_embedding(&self) -> ParamId {
        self.action_emb
    }

    pub fn position_embedding(&self) -> ParamId {
        self.pos_emb
    }
}
