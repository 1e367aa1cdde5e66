//! Plain-text `key = value` run configuration with command-line overrides.
//!
//! Precedence: overrides win over the file, the file wins over defaults.
//! Model keys keep the hyperparameter names of the reference recipe
//! (`attention_type`, `init_adaptive_span`, `adapt_span_loss`, ...).

use std::path::{Path, PathBuf};

use prior_attn_core::attention::AttentionKind;
use prior_attn_core::envs::{TaskKind, TaskSpec};
use prior_attn_core::model::{default_init_span, ModelConfig};
use prior_attn_core::regularization::SpanPenalty;
use prior_attn_core::trainer::{EvalMetrics, TrainSettings};

use crate::error::{CliError, CliResult};

/// Evaluation metric shown in curves and summaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    RewardAccuracy,
    CueAccuracy,
    LatentAccuracy,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::RewardAccuracy, Metric::CueAccuracy, Metric::LatentAccuracy];

    pub fn token(self) -> &'static str {
        match self {
            Metric::RewardAccuracy => "reward_accuracy",
            Metric::CueAccuracy => "cue_accuracy",
            Metric::LatentAccuracy => "latent_accuracy",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Metric::ALL.into_iter().find(|m| m.token() == s)
    }

    pub fn of(self, m: &EvalMetrics) -> f64 {
        match self {
            Metric::RewardAccuracy => m.reward_accuracy,
            Metric::CueAccuracy => m.cue_accuracy,
            Metric::LatentAccuracy => m.latent_accuracy,
        }
    }

    /// The copy task has no rewards, so it is scored on the next latent.
    pub fn default_for(task: TaskKind) -> Self {
        match task {
            TaskKind::Copy => Metric::LatentAccuracy,
            _ => Metric::RewardAccuracy,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub task: TaskSpec,
    pub train: TrainSettings,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// Attention kinds compared by `sweep`; empty means `attention_type` alone.
    pub variants: Vec<AttentionKind>,
    /// `None` picks [`Metric::default_for`] the task.
    pub metric: Option<Metric>,
    /// Sequence length of the overhead report.
    pub overhead_tokens: usize,
    /// Delays of the two horizons compared by `ablate-reg`.
    pub ablate_offsets: Vec<usize>,
    /// Set when a source gave `init_adaptive_span`; otherwise the span
    /// follows the attention kind.
    pub span_pinned: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            task: TaskSpec::default(),
            train: TrainSettings::default(),
            seeds: vec![1, 2, 3, 4, 5],
            out_dir: PathBuf::from("out"),
            variants: Vec::new(),
            metric: None,
            overhead_tokens: 20,
            ablate_offsets: vec![2, 6],
            span_pinned: false,
        }
    }
}

/// `auto` picks the task's default metric.
fn parse_metric(key: &str, value: &str) -> CliResult<Option<Metric>> {
    if value == "auto" {
        return Ok(None);
    }
    let expected = "expected auto, reward_accuracy, cue_accuracy or latent_accuracy";
    Metric::parse(value)
        .map(Some)
        .ok_or_else(|| CliError::config(key, format!("unknown metric `{value}`; {expected}")))
}

/// Keys outside [`ModelConfig::KEYS`].
pub const RUN_KEYS: [&str; 24] = [
    "task",
    "offset",
    "seq_len",
    "corridor_max",
    "vocab",
    "episodes",
    "data_seed",
    "steps",
    "batch_size",
    "learning_rate",
    "weight_decay",
    "max_grad_norm",
    "eval_every",
    "span_penalty",
    "maxnorm_c",
    "freeze_spans",
    "eval_episodes",
    "eval_batch",
    "seeds",
    "out_dir",
    "variants",
    "metric",
    "overhead_tokens",
    "ablate_offsets",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> CliResult<T> {
    value
        .parse()
        .map_err(|_| CliError::config(key, format!("cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> CliResult<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(CliError::config(key, format!("expected true or false, got `{value}`"))),
    }
}

/// Seeds as a comma list of numbers and inclusive ranges, e.g. `1-3,7`.
pub fn parse_seeds(value: &str) -> CliResult<Vec<u64>> {
    let mut seeds = Vec::new();
    for part in value.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (u64, u64) = (parse("seeds", a.trim())?, parse("seeds", b.trim())?);
                if a > b {
                    return Err(CliError::config("seeds", format!("empty range `{part}`")));
                }
                seeds.extend(a..=b);
            }
            None => seeds.push(parse("seeds", part)?),
        }
    }
    if seeds.is_empty() {
        return Err(CliError::config("seeds", "need at least one seed"));
    }
    Ok(seeds)
}

fn join_seeds(seeds: &[u64]) -> String {
    seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Applies one setting. `init_adaptive_span` stays tied to the attention
    /// kind until it is set explicitly; see [`parse_config`].
    pub fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
        let value = value.trim();
        if self.model.set(key, value)? {
            return Ok(());
        }
        let (task, train) = (&mut self.task, &mut self.train);
        match key {
            "task" => task.kind = value.parse()?,
            "offset" => task.offset = parse(key, value)?,
            "seq_len" => task.seq_len = parse(key, value)?,
            "corridor_max" => task.corridor_max = parse(key, value)?,
            "vocab" => task.vocab = parse(key, value)?,
            "episodes" => task.episodes = parse(key, value)?,
            "data_seed" => task.seed = parse(key, value)?,
            "steps" => train.steps = parse(key, value)?,
            "batch_size" => train.batch_size = parse(key, value)?,
            "learning_rate" => train.optimizer.lr = parse(key, value)?,
            "weight_decay" => train.optimizer.weight_decay = parse(key, value)?,
            "max_grad_norm" => train.max_grad_norm = parse(key, value)?,
            "eval_every" => train.eval_every = parse(key, value)?,
            "span_penalty" => train.span_penalty = value.parse::<SpanPenalty>()?,
            "maxnorm_c" => train.maxnorm_c = parse(key, value)?,
            "freeze_spans" => train.freeze_spans = parse_bool(key, value)?,
            "eval_episodes" => train.eval_episodes = parse(key, value)?,
            "eval_batch" => train.eval_batch = parse(key, value)?,
            "seeds" => self.seeds = parse_seeds(value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "variants" => {
                self.variants = value
                    .split(',')
                    .map(str::trim)
                    .filter(|v| !v.is_empty())
                    .map(|v| v.parse::<AttentionKind>())
                    .collect::<Result<_, _>>()?
            }
            "metric" => self.metric = parse_metric(key, value)?,
            "overhead_tokens" => self.overhead_tokens = parse(key, value)?,
            "ablate_offsets" => {
                self.ablate_offsets = value
                    .split(',')
                    .map(str::trim)
                    .filter(|v| !v.is_empty())
                    .map(|v| parse(key, v))
                    .collect::<CliResult<_>>()?
            }
            _ => return Err(CliError::config(key, "unknown key")),
        }
        Ok(())
    }

    pub fn metric(&self) -> Metric {
        self.metric.unwrap_or_else(|| Metric::default_for(self.task.kind))
    }

    /// Kinds run by `sweep`.
    pub fn sweep_kinds(&self) -> Vec<AttentionKind> {
        if self.variants.is_empty() {
            vec![self.model.attention_type]
        } else {
            self.variants.clone()
        }
    }

    /// Every setting as `(key, value)` text, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut pairs: Vec<(String, String)> = self
            .model
            .to_pairs()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        let (t, s) = (&self.task, &self.train);
        let rest = [
            ("task", t.kind.token().to_string()),
            ("offset", t.offset.to_string()),
            ("seq_len", t.seq_len.to_string()),
            ("corridor_max", t.corridor_max.to_string()),
            ("vocab", t.vocab.to_string()),
            ("episodes", t.episodes.to_string()),
            ("data_seed", t.seed.to_string()),
            ("steps", s.steps.to_string()),
            ("batch_size", s.batch_size.to_string()),
            ("learning_rate", format!("{:?}", s.optimizer.lr)),
            ("weight_decay", format!("{:?}", s.optimizer.weight_decay)),
            ("max_grad_norm", format!("{:?}", s.max_grad_norm)),
            ("eval_every", s.eval_every.to_string()),
            ("span_penalty", s.span_penalty.token().to_string()),
            ("maxnorm_c", format!("{:?}", s.maxnorm_c)),
            ("freeze_spans", s.freeze_spans.to_string()),
            ("eval_episodes", s.eval_episodes.to_string()),
            ("eval_batch", s.eval_batch.to_string()),
            ("seeds", join_seeds(&self.seeds)),
            ("out_dir", self.out_dir.display().to_string()),
            (
                "variants",
                self.variants.iter().map(|k| k.token()).collect::<Vec<_>>().join(","),
            ),
            ("metric", self.metric.map_or("auto", Metric::token).to_string()),
            ("overhead_tokens", self.overhead_tokens.to_string()),
            (
                "ablate_offsets",
                self.ablate_offsets
                    .iter()
                    .map(usize::to_string)
                    .collect::<Vec<_>>()
                    .join(","),
            ),
        ];
        pairs.extend(rest.into_iter().map(|(k, v)| (k.to_string(), v)));
        pairs
    }

    /// Text that [`parse_config`] reads back into an equal config.
    pub fn to_text(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn validate(&self) -> CliResult<()> {
        self.model.validate()?;
        let task = self.task_spec();
        task.validate()?;
        if task.vocab > self.model.latent_vocab {
            return Err(CliError::config(
                "vocab",
                format!(
                    "task vocabulary {} exceeds latent_vocab {}",
                    task.vocab, self.model.latent_vocab
                ),
            ));
        }
        if self.model.context_length > task.seq_len {
            return Err(CliError::config(
                "context_length",
                format!(
                    "context {} is longer than seq_len {}",
                    self.model.context_length, task.seq_len
                ),
            ));
        }
        let s = &self.train;
        let checks = [
            ("batch_size", s.batch_size > 0),
            ("learning_rate", s.optimizer.lr.is_finite() && s.optimizer.lr >= 0.0),
            (
                "weight_decay",
                s.optimizer.weight_decay.is_finite() && s.optimizer.weight_decay >= 0.0,
            ),
            ("max_grad_norm", s.max_grad_norm > 0.0),
            ("eval_every", s.eval_every > 0),
            ("maxnorm_c", s.maxnorm_c > 0.0),
            ("eval_episodes", s.eval_episodes > 0),
            ("eval_batch", s.eval_batch > 0),
            ("overhead_tokens", self.overhead_tokens > 0),
            ("ablate_offsets", !self.ablate_offsets.is_empty()),
        ];
        for (key, ok) in checks {
            if !ok {
                return Err(CliError::config(key, "value out of range"));
            }
        }
        Ok(())
    }

    /// The task with the model's action vocabulary.
    pub fn task_spec(&self) -> TaskSpec {
        TaskSpec {
            action_vocab: self.model.action_vocab,
            ..self.task.clone()
        }
    }

    /// Copy with a different attention kind and that kind's default span,
    /// unless the span was pinned explicitly.
    pub fn with_kind(&self, kind: AttentionKind) -> RunConfig {
        let mut c = self.clone();
        c.model.attention_type = kind;
        if !self.span_pinned {
            c.model.init_adaptive_span = default_init_span(kind);
        }
        c
    }
}

/// Splits `key = value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str) -> CliResult<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            let key = line.split_whitespace().next().unwrap_or(line);
            CliError::config(key, format!("line {}: expected `key = value`", n + 1))
        })?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

/// Turns `--key value` and `--key=value` arguments into pairs.
pub fn parse_overrides(args: &[String]) -> CliResult<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let body = arg
            .strip_prefix("--")
            .ok_or_else(|| CliError::config(arg.as_str(), "expected a `--key value` override"))?;
        match body.split_once('=') {
            Some((k, v)) => pairs.push((k.to_string(), v.to_string())),
            None => {
                let v = it.next().ok_or_else(|| CliError::config(body, "missing value"))?;
                pairs.push((body.to_string(), v.clone()));
            }
        }
    }
    Ok(pairs)
}

/// Whether a key set anywhere pins the initial span.
pub fn pins_span(pairs: &[(String, String)]) -> bool {
    pairs.iter().any(|(k, _)| k == "init_adaptive_span")
}

/// Builds a config from `base`, then the file text, then the overrides.
///
/// `init_adaptive_span` follows the attention kind (10 for `gaam`, 6
/// otherwise) unless one of the sources sets it.
pub fn parse_config_with(base: RunConfig, file: Option<&str>, overrides: &[(String, String)]) -> CliResult<RunConfig> {
    let mut pairs = match file {
        Some(text) => parse_pairs(text)?,
        None => Vec::new(),
    };
    pairs.extend(overrides.iter().cloned());
    let mut config = base;
    for (k, v) in &pairs {
        config.set(k, v)?;
    }
    config.span_pinned = config.span_pinned || pins_span(&pairs);
    if !config.span_pinned {
        config.model.init_adaptive_span = default_init_span(config.model.attention_type);
    }
    config.validate()?;
    Ok(config)
}

/// [`parse_config_with`] on the desk defaults.
pub fn parse_config(file: Option<&str>, overrides: &[(String, String)]) -> CliResult<RunConfig> {
    parse_config_with(RunConfig::default(), file, overrides)
}

/// Reads the optional config file and applies overrides.
pub fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> CliResult<RunConfig> {
    let text = match path {
        Some(p) => Some(std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?),
        None => None,
    };
    parse_config(text.as_deref(), overrides)
}
