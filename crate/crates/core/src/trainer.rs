//! Supervised training of the dynamics head on synthetic trajectories.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::AttentionKind;
use crate::autodiff::{Tape, Var};
use crate::envs::{mix_seed, BatchStream, Dataset, TaskSpec, TrajectoryBatch};
use crate::error::{Error, Result};
use crate::model::{Bound, ForwardOutput, ModelConfig, PriorSnapshot, StepInputs, WorldModel};
use crate::optim::{adamw_step, clip_gradients, AdamWSettings, OptimState};
use crate::regularization::{project_model_spans, span_penalty_term, SpanPenalty};

pub const LATENT_LOSS_COEF: f64 = 10.0;
pub const REWARD_LOSS_COEF: f64 = 1.0;

/// Seed streams derived from a run seed.
const STREAM_INIT: u64 = 1;
const STREAM_TRAIN_DATA: u64 = 2;
const STREAM_EVAL_DATA: u64 = 3;
const STREAM_SHUFFLE: u64 = 4;
const STREAM_DROPOUT: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub latent_loss: f64,
    pub reward_loss: f64,
    pub span_penalty: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWSettings,
    pub max_grad_norm: f64,
    pub eval_every: usize,
    pub span_penalty: SpanPenalty,
    pub maxnorm_c: f64,
    /// Keeps raw spans at their initial values.
    pub freeze_spans: bool,
    pub eval_episodes: usize,
    pub eval_batch: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 64,
            optimizer: AdamWSettings::default(),
            max_grad_norm: 5.0,
            eval_every: 200,
            span_penalty: SpanPenalty::L1,
            maxnorm_c: 10.0,
            freeze_spans: false,
            eval_episodes: 512,
            eval_batch: 256,
        }
    }
}

/// Class index of a reward in `{-1, 0, +1}` on a centered support.
pub fn reward_class(reward: i8, bins: usize) -> Result<usize> {
    let center = (bins / 2) as i64;
    let idx = center + i64::from(reward);
    if idx < 0 || idx as usize >= bins {
        return Err(Error::Index(format!("reward {reward} outside {bins} bins")));
    }
    Ok(idx as usize)
}

/// Tape terms of the loss: `(total, latent, reward, penalty)`.
pub struct LossVars {
    pub total: Var,
    pub latent: Var,
    pub reward: Var,
    pub penalty: Option<Var>,
}

/// Builds the weighted loss for `out` on `batch`.
///
/// The latent term is the cross-entropy between the predicted SimNorm groups
/// and the SimNorm of the target tokens' embeddings (held constant), averaged
/// over positions and groups. The reward term is a mean cross-entropy over
/// reward classes.
pub fn loss_vars(
    tape: &mut Tape,
    model: &WorldModel,
    out: &ForwardOutput,
    batch: &TrajectoryBatch,
    penalty: Option<Var>,
) -> Result<LossVars> {
    let targets = model.latent_targets(&batch.targets)?;
    loss_vars_with_targets(tape, model, out, batch, targets, penalty)
}

/// [`loss_vars`] with explicit latent target simplices `[B, T, D]`.
pub fn loss_vars_with_targets(
    tape: &mut Tape,
    model: &WorldModel,
    out: &ForwardOutput,
    batch: &TrajectoryBatch,
    targets: Vec<f64>,
    penalty: Option<Var>,
) -> Result<LossVars> {
    let c = model.config();
    let (b, t, d, v) = (batch.batch, batch.steps, c.embed_dim, c.simnorm_dim);
    let groups = d / v;
    let logits = tape.reshape(out.dynamics.latent_logits, &[b, t, groups, v])?;
    let logits = tape.scale(logits, 1.0 / c.simnorm_tau)?;
    let logp = tape.log_softmax_lastdim(logits)?;
    let targets = tape.constant(&[b, t, groups, v], targets)?;
    let prod = tape.mul(logp, targets)?;
    let s = tape.sum(prod)?;
    let latent = tape.scale(s, -1.0 / (b * t * groups) as f64)?;

    let bins = c.reward_bins;
    let mut onehot = vec![0.0; b * t * bins];
    for (i, &r) in batch.rewards.iter().enumerate() {
        onehot[i * bins + reward_class(r, bins)?] = 1.0;
    }
    let rlogp = tape.log_softmax_lastdim(out.dynamics.reward_logits)?;
    let onehot = tape.constant(&[b, t, bins], onehot)?;
    let rprod = tape.mul(rlogp, onehot)?;
    let rs = tape.sum(rprod)?;
    let reward = tape.scale(rs, -1.0 / (b * t) as f64)?;

    let weighted = tape.scale(latent, LATENT_LOSS_COEF)?;
    let rw = tape.scale(reward, REWARD_LOSS_COEF)?;
    let mut total = tape.add(weighted, rw)?;
    if let Some(p) = penalty {
        total = tape.add(total, p)?;
    }
    Ok(LossVars {
        total,
        latent,
        reward,
        penalty,
    })
}

/// Evaluates the loss of `model` on `batch` without dropout.
pub fn compute_loss(model: &WorldModel, batch: &TrajectoryBatch, penalty: SpanPenalty) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let out = forward_batch(&mut tape, model, &bound, batch, None)?;
    let p = span_penalty_term(&mut tape, model, &bound, penalty, model.config().adapt_span_loss)?;
    let lv = loss_vars(&mut tape, model, &out, batch, p)?;
    Ok(breakdown(&tape, &lv))
}

fn breakdown(tape: &Tape, lv: &LossVars) -> LossBreakdown {
    LossBreakdown {
        latent_loss: tape.item(lv.latent),
        reward_loss: tape.item(lv.reward),
        span_penalty: lv.penalty.map_or(0.0, |p| tape.item(p)),
        total: tape.item(lv.total),
    }
}

/// Worst coordinate of a full-model gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGradCheck {
    pub max_error: f64,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub coordinates: usize,
    /// Relative error of every coordinate in parameter order.
    pub errors: Vec<f64>,
    /// Resolution of a central difference of the loss: 32 ulps of the loss
    /// value over `2 eps`.
    pub noise_floor: f64,
    /// Coordinates with `|a - n| > tol (|a| + |n|) + noise_floor`.
    pub beyond_noise: usize,
}

/// Tolerance used for [`ModelGradCheck::beyond_noise`].
pub const GRAD_CHECK_TOL: f64 = 1e-4;

fn ulp(x: f64) -> f64 {
    let x = x.abs();
    x.next_up() - x
}

fn composite_loss(
    tape: &mut Tape,
    model: &WorldModel,
    batch: &TrajectoryBatch,
    targets: &[f64],
    penalty: SpanPenalty,
) -> Result<(Var, Bound)> {
    let bound = model.bind(tape);
    let out = forward_batch(tape, model, &bound, batch, None)?;
    let p = span_penalty_term(tape, model, &bound, penalty, model.config().adapt_span_loss)?;
    let lv = loss_vars_with_targets(tape, model, &out, batch, targets.to_vec(), p)?;
    // the prediction head has no training loss; a quadratic term on its
    // outputs puts its weights under the check too
    let pred = model.prediction_head(tape, &bound, out.hidden)?;
    let mut total = lv.total;
    for logits in [pred.policy_logits, pred.value_logits] {
        let sq = tape.square(logits)?;
        let m = tape.mean(sq)?;
        total = tape.add(total, m)?;
    }
    Ok((total, bound))
}

/// Compares the backpropagated gradient of the training loss (plus a
/// prediction-head term) against central differences over every parameter
/// coordinate. Latent targets are held at their unperturbed values.
pub fn model_grad_check(
    model: &WorldModel,
    batch: &TrajectoryBatch,
    penalty: SpanPenalty,
    eps: f64,
) -> Result<ModelGradCheck> {
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Contract(format!(
            "grad_check eps must lie in (0, 1e-2], got {eps}"
        )));
    }
    let targets = model.latent_targets(&batch.targets)?;
    let mut tape = Tape::new();
    let (loss, bound) = composite_loss(&mut tape, model, batch, &targets, penalty)?;
    let noise_floor = 32.0 * ulp(tape.item(loss)) / (2.0 * eps);
    tape.backward(loss)?;
    let mut probe = model.clone();
    probe.params_mut().load_grads(&tape, &bound);
    let analytic: Vec<(String, Vec<f64>)> = probe
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.tensor.grad().to_vec()))
        .collect();

    let eval = |m: &WorldModel| -> Result<f64> {
        let mut t = Tape::new();
        let (l, _) = composite_loss(&mut t, m, batch, &targets, penalty)?;
        Ok(t.item(l))
    };
    let mut report = ModelGradCheck {
        max_error: 0.0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        coordinates: 0,
        errors: Vec::new(),
        noise_floor,
        beyond_noise: 0,
    };
    for (name, grads) in &analytic {
        for (k, &a) in grads.iter().enumerate() {
            let id = probe.params().find(name).expect("parameter exists");
            let x0 = probe.params().get(id).tensor.data()[k];
            probe.params_mut().get_mut(id).tensor.data_mut()[k] = x0 + eps;
            let up = eval(&probe)?;
            probe.params_mut().get_mut(id).tensor.data_mut()[k] = x0 - eps;
            let down = eval(&probe)?;
            probe.params_mut().get_mut(id).tensor.data_mut()[k] = x0;
            let n = (up - down) / (2.0 * eps);
            let err = crate::autodiff::relative_error(a, n);
            report.coordinates += 1;
            report.errors.push(err);
            if (a - n).abs() > GRAD_CHECK_TOL * (a.abs() + n.abs()) + noise_floor {
                report.beyond_noise += 1;
            }
            if err > report.max_error {
                report.max_error = err;
                report.worst_param = name.clone();
                report.worst_index = k;
                report.worst_analytic = a;
                report.worst_numeric = n;
            }
        }
    }
    Ok(report)
}

pub fn forward_batch(
    tape: &mut Tape,
    model: &WorldModel,
    bound: &Bound,
    batch: &TrajectoryBatch,
    dropout_rng: Option<&mut dyn rand::RngCore>,
) -> Result<ForwardOutput> {
    model.forward(
        tape,
        bound,
        StepInputs {
            latents: &batch.latents,
            actions: &batch.actions,
            batch: batch.batch,
            steps: batch.steps,
        },
        dropout_rng,
    )
}

/// Mean attention mass per relative offset `d = i - j` for one head.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionProfile {
    pub layer: usize,
    pub head: usize,
    /// Averaged over every query position; entry `d` for `d in 0..T`.
    pub mean: Vec<f64>,
    /// Weights of the last query position.
    pub final_query: Vec<f64>,
}

impl AttentionProfile {
    /// Offset with the largest final-query mass (first on ties).
    pub fn peak_offset(&self) -> usize {
        argmax(&self.final_query)
    }

    pub fn peak_mass(&self) -> f64 {
        self.final_query.iter().copied().fold(0.0, f64::max)
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalMetrics {
    pub step: usize,
    /// Reward-class accuracy over all positions.
    pub reward_accuracy: f64,
    /// Accuracy on positions with a nonzero reward.
    pub cue_accuracy: f64,
    /// Accuracy of always predicting the most frequent reward class.
    pub chance_accuracy: f64,
    /// The same over positions with a nonzero reward, the level reached by a
    /// model that cannot see the cue.
    pub cue_chance_accuracy: f64,
    pub latent_loss: f64,
    pub reward_loss: f64,
    /// Fraction of positions whose target token is the best match to the
    /// predicted simplex.
    pub latent_accuracy: f64,
    pub profiles: Vec<AttentionProfile>,
}

/// Deterministic metrics of `model` on every window of `dataset`.
pub fn evaluate(model: &WorldModel, dataset: &Dataset, step: usize, eval_batch: usize) -> Result<EvalMetrics> {
    let c = model.config();
    let h = c.context_length;
    let windows = dataset.windows(h);
    if windows.is_empty() {
        return Err(Error::config("context_length", "dataset has no full window"));
    }
    let (d, heads, bins) = (c.embed_dim, c.num_heads, c.reward_bins);
    let layers = c.num_layers;
    let mut mean = vec![vec![0.0; h]; layers * heads];
    let mut last = vec![vec![0.0; h]; layers * heads];
    let (mut correct, mut cue_correct, mut cue_total, mut latent_correct) = (0usize, 0usize, 0usize, 0usize);
    let (mut latent_sum, mut reward_sum) = (0.0, 0.0);
    let mut class_counts = vec![0usize; bins];
    let mut cue_counts = vec![0usize; bins];
    let vocab_targets = model.latent_targets(&(0..c.latent_vocab).collect::<Vec<_>>())?;
    let positions = windows.len() * h;

    for chunk in windows.chunks(eval_batch.max(1)) {
        let batch = dataset.batch_of(chunk, h);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let out = forward_batch(&mut tape, model, &bound, &batch, None)?;
        let lv = loss_vars(&mut tape, model, &out, &batch, None)?;
        let n = (batch.batch * h) as f64;
        latent_sum += tape.item(lv.latent) * n;
        reward_sum += tape.item(lv.reward) * n;

        let rl = tape.value(out.dynamics.reward_logits);
        for (i, &r) in batch.rewards.iter().enumerate() {
            let truth = reward_class(r, bins)?;
            class_counts[truth] += 1;
            let hit = argmax(&rl[i * bins..(i + 1) * bins]) == truth;
            correct += usize::from(hit);
            if r != 0 {
                cue_total += 1;
                cue_counts[truth] += 1;
                cue_correct += usize::from(hit);
            }
        }

        // decode the predicted simplex as the vocabulary entry maximizing
        // sum over groups of target * log(pred)
        let pred = tape.value(out.dynamics.latent);
        for (i, &target) in batch.targets.iter().enumerate() {
            let logp: Vec<f64> = pred[i * d..(i + 1) * d].iter().map(|b| b.max(1e-300).ln()).collect();
            let mut best = (0usize, f64::NEG_INFINITY);
            for z in 0..c.latent_vocab {
                let q = &vocab_targets[z * d..(z + 1) * d];
                let score: f64 = q.iter().zip(&logp).map(|(a, b)| a * b).sum();
                if score > best.1 {
                    best = (z, score);
                }
            }
            latent_correct += usize::from(best.0 == target);
        }

        for (layer, &w) in out.attention.iter().enumerate() {
            let wv = tape.value(w);
            for bi in 0..batch.batch {
                for hd in 0..heads {
                    let base = (bi * heads + hd) * h * h;
                    let prof = &mut mean[layer * heads + hd];
                    for i in 0..h {
                        for j in 0..=i {
                            prof[i - j] += wv[base + i * h + j];
                        }
                    }
                    let fin = &mut last[layer * heads + hd];
                    for j in 0..h {
                        fin[h - 1 - j] += wv[base + (h - 1) * h + j];
                    }
                }
            }
        }
    }
    let nb = windows.len() as f64;
    let profiles = (0..layers * heads)
        .map(|k| AttentionProfile {
            layer: k / heads,
            head: k % heads,
            mean: mean[k].iter().map(|x| x / (nb * h as f64)).collect(),
            final_query: last[k].iter().map(|x| x / nb).collect(),
        })
        .collect();
    let p = positions as f64;
    Ok(EvalMetrics {
        step,
        reward_accuracy: correct as f64 / p,
        cue_accuracy: if cue_total == 0 {
            0.0
        } else {
            cue_correct as f64 / cue_total as f64
        },
        chance_accuracy: *class_counts.iter().max().unwrap_or(&0) as f64 / p,
        cue_chance_accuracy: if cue_total == 0 {
            0.0
        } else {
            *cue_counts.iter().max().unwrap_or(&0) as f64 / cue_total as f64
        },
        latent_loss: latent_sum / p,
        reward_loss: reward_sum / p,
        latent_accuracy: latent_correct as f64 / p,
        profiles,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorRecord {
    pub step: usize,
    pub heads: Vec<PriorSnapshot>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub seed: u64,
    pub kind: AttentionKind,
    pub losses: Vec<LossBreakdown>,
    pub evals: Vec<EvalMetrics>,
    pub priors: Vec<PriorRecord>,
    /// Set when the run stopped early on a non-finite loss or gradient.
    pub failure: Option<String>,
    /// Steps at which every active prior parameter had an all-zero gradient.
    pub zero_prior_grad_steps: Vec<usize>,
    pub train_data_hash: String,
    pub eval_data_hash: String,
}

impl TrainReport {
    pub fn final_eval(&self) -> Option<&EvalMetrics> {
        self.evals.last()
    }

    pub fn final_priors(&self) -> Option<&PriorRecord> {
        self.priors.last()
    }
}

/// Datasets for a run: the training set from `task.seed` mixed with the run
/// seed and a held-out evaluation set.
pub fn run_datasets(task: &TaskSpec, settings: &TrainSettings, seed: u64) -> Result<(Dataset, Dataset)> {
    let train = TaskSpec {
        seed: mix_seed(task.seed ^ seed, STREAM_TRAIN_DATA),
        ..task.clone()
    }
    .generate()?;
    let eval = TaskSpec {
        seed: mix_seed(task.seed ^ seed, STREAM_EVAL_DATA),
        episodes: settings.eval_episodes,
        ..task.clone()
    }
    .generate()?;
    Ok((train, eval))
}

fn snapshot(model: &WorldModel, step: usize) -> PriorRecord {
    PriorRecord {
        step,
        heads: model.prior_snapshot(),
    }
}

/// Numeric errors end the run as diverged (`Ok(None)`); others propagate.
fn diverged<T>(r: Result<T>, step: usize, report: &mut TrainReport) -> Result<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(e @ Error::Numeric { .. }) => {
            report.failure = Some(format!("step {step}: {e}"));
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

/// The initial model of a run with `seed`.
pub fn fresh_model(config: &ModelConfig, seed: u64) -> Result<WorldModel> {
    WorldModel::new(config.clone(), mix_seed(seed, STREAM_INIT))
}

/// Trains a fresh model; deterministic in `(config, task, settings, seed)`.
pub fn train_run(config: &ModelConfig, task: &TaskSpec, settings: &TrainSettings, seed: u64) -> Result<TrainReport> {
    let mut model = fresh_model(config, seed)?;
    train_model(&mut model, task, settings, seed)
}

/// Trains `model` in place; see [`train_run`].
pub fn train_model(
    model: &mut WorldModel,
    task: &TaskSpec,
    settings: &TrainSettings,
    seed: u64,
) -> Result<TrainReport> {
    let config = model.config().clone();
    if task.vocab > config.latent_vocab || task.action_vocab > config.action_vocab {
        return Err(Error::config(
            "latent_vocab",
            format!(
                "model vocabularies ({}, {}) smaller than the task's ({}, {})",
                config.latent_vocab, config.action_vocab, task.vocab, task.action_vocab
            ),
        ));
    }
    let (train, eval) = run_datasets(task, settings, seed)?;
    if settings.freeze_spans {
        model.set_spans_trainable(false);
    }
    let mut opt = OptimState::new(model.params(), settings.optimizer);
    let mut stream = BatchStream::new(
        config.context_length,
        settings.batch_size,
        mix_seed(seed, STREAM_SHUFFLE),
    );
    let mut dropout = ChaCha8Rng::seed_from_u64(mix_seed(seed, STREAM_DROPOUT));
    let mut report = TrainReport {
        seed,
        kind: config.attention_type,
        losses: Vec::with_capacity(settings.steps),
        evals: Vec::new(),
        priors: Vec::new(),
        failure: None,
        zero_prior_grad_steps: Vec::new(),
        train_data_hash: train.content_hash(),
        eval_data_hash: eval.content_hash(),
    };
    let prior_params: Vec<_> = model
        .prior_ids()
        .iter()
        .flat_map(|p| [p.raw_span, p.mu, p.raw_sigma])
        .flatten()
        .collect();
    report.evals.push(evaluate(model, &eval, 0, settings.eval_batch)?);
    report.priors.push(snapshot(model, 0));
    let lambda = config.adapt_span_loss;

    for step in 1..=settings.steps {
        let batch = stream.next_batch(&train)?;
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let forward = (|| {
            let out = forward_batch(&mut tape, model, &bound, &batch, Some(&mut dropout))?;
            let penalty = span_penalty_term(&mut tape, model, &bound, settings.span_penalty, lambda)?;
            loss_vars(&mut tape, model, &out, &batch, penalty)
        })();
        let lv = match diverged(forward, step, &mut report)? {
            Some(lv) => lv,
            None => break,
        };
        let losses = breakdown(&tape, &lv);
        report.losses.push(losses);
        if !losses.total.is_finite() {
            report.failure = Some(format!("non-finite loss {} at step {step}", losses.total));
            break;
        }
        if diverged(tape.backward(lv.total), step, &mut report)?.is_none() {
            break;
        }
        model.params_mut().load_grads(&tape, &bound);
        drop(tape);

        let active: Vec<_> = prior_params
            .iter()
            .filter(|&&id| model.params().get(id).trainable)
            .collect();
        if !active.is_empty()
            && active
                .iter()
                .all(|&&id| model.params().get(id).tensor.grad().iter().all(|&g| g == 0.0))
        {
            report.zero_prior_grad_steps.push(step);
        }

        clip_gradients(model.params_mut(), settings.max_grad_norm);
        if let Err(e) = adamw_step(model.params_mut(), &mut opt) {
            report.failure = Some(format!("step {step}: {e}"));
            break;
        }
        if settings.span_penalty == SpanPenalty::MaxNorm && !settings.freeze_spans {
            project_model_spans(model, settings.maxnorm_c)?;
        }
        if step % settings.eval_every.max(1) == 0 || step == settings.steps {
            match diverged(evaluate(model, &eval, step, settings.eval_batch), step, &mut report)? {
                Some(m) => report.evals.push(m),
                None => break,
            }
            report.priors.push(snapshot(model, step));
        }
    }
    Ok(report)
}
