//! Synthetic partially observable sequence tasks with known memory horizons.
//!
//! * `delayed_cue`: i.i.d. tokens; the reward at step `t >= k` is `+1` when the
//!   token at `t - k` lies in the lower half of the vocabulary and `-1`
//!   otherwise. The next-latent target is the following token.
//! * `copy`: the target at step `t` is the token at `t - k` (the token itself
//!   for `t < k`); rewards are zero.
//! * `tmaze`: a cue token (1 or 2) starts a corridor of filler tokens that
//!   ends in a junction token 3. The final action (1 = left, 2 = right) earns
//!   `+1` when it matches the cue and `-1` otherwise. Episodes are
//!   right-aligned in the window and padded with token 0.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const TMAZE_PAD: usize = 0;
pub const TMAZE_LEFT_CUE: usize = 1;
pub const TMAZE_RIGHT_CUE: usize = 2;
pub const TMAZE_JUNCTION: usize = 3;
pub const TMAZE_FIRST_FILLER: usize = 4;
pub const TMAZE_FORWARD: usize = 0;
pub const TMAZE_LEFT: usize = 1;
pub const TMAZE_RIGHT: usize = 2;

/// SplitMix64 finalizer; used to derive independent seeds per purpose.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskKind {
    DelayedCue,
    Copy,
    Tmaze,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::DelayedCue, TaskKind::Copy, TaskKind::Tmaze];

    pub fn token(self) -> &'static str {
        match self {
            TaskKind::DelayedCue => "delayed_cue",
            TaskKind::Copy => "copy",
            TaskKind::Tmaze => "tmaze",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL.into_iter().find(|k| k.token() == s).ok_or_else(|| {
            Error::config(
                "task",
                format!("unknown task `{s}`; expected delayed_cue, copy or tmaze"),
            )
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Steps per episode.
    pub seq_len: usize,
    /// Delay `k` for `delayed_cue` and `copy`.
    pub offset: usize,
    /// Longest corridor for `tmaze`.
    pub corridor_max: usize,
    pub vocab: usize,
    pub action_vocab: usize,
    pub episodes: usize,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::DelayedCue,
            seq_len: 10,
            offset: 6,
            corridor_max: 8,
            vocab: 16,
            action_vocab: 4,
            episodes: 4096,
            seed: 0,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 {
            return Err(Error::config("seq_len", "must be positive"));
        }
        if self.episodes == 0 {
            return Err(Error::config("episodes", "must be positive"));
        }
        match self.kind {
            TaskKind::DelayedCue => {
                if self.offset == 0 || self.offset >= self.seq_len {
                    return Err(Error::config(
                        "offset",
                        format!(
                            "delay must satisfy 1 <= k < seq_len = {}, got {}",
                            self.seq_len, self.offset
                        ),
                    ));
                }
                if self.vocab < 2 {
                    return Err(Error::config("vocab", "needs at least 2 tokens"));
                }
            }
            TaskKind::Copy => {
                if self.offset >= self.seq_len {
                    return Err(Error::config(
                        "offset",
                        format!("delay must be below seq_len = {}, got {}", self.seq_len, self.offset),
                    ));
                }
                if self.vocab < 1 {
                    return Err(Error::config("vocab", "must be positive"));
                }
            }
            TaskKind::Tmaze => {
                if self.corridor_max == 0 || self.corridor_max >= self.seq_len {
                    return Err(Error::config(
                        "corridor_max",
                        format!("corridor must satisfy 1 <= length < seq_len = {}", self.seq_len),
                    ));
                }
                if self.vocab <= TMAZE_FIRST_FILLER {
                    return Err(Error::config("vocab", "tmaze needs at least 5 tokens"));
                }
                if self.action_vocab <= TMAZE_RIGHT {
                    return Err(Error::config("action_vocab", "tmaze needs at least 3 actions"));
                }
            }
        }
        if self.action_vocab == 0 {
            return Err(Error::config("action_vocab", "must be positive"));
        }
        Ok(())
    }

    /// Bit-exact regeneration of the dataset described by this spec.
    pub fn generate(&self) -> Result<Dataset> {
        match self.kind {
            TaskKind::DelayedCue => gen_delayed_cue(self),
            TaskKind::Copy => gen_copy_task(self),
            TaskKind::Tmaze => gen_tmaze(self),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub tokens: Vec<usize>,
    pub actions: Vec<usize>,
    pub rewards: Vec<i8>,
    /// Next-latent supervision per step.
    pub targets: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub episodes: Vec<Episode>,
}

/// Whether `token` belongs to the rewarded half of the delayed-cue vocabulary.
pub fn is_cue(token: usize, vocab: usize) -> bool {
    token < vocab / 2
}

pub fn gen_delayed_cue(spec: &TaskSpec) -> Result<Dataset> {
    if spec.kind != TaskKind::DelayedCue {
        return Err(Error::Contract(format!("spec is for {}", spec.kind)));
    }
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.seq_len;
    let k = spec.offset;
    let episodes = (0..spec.episodes)
        .map(|_| {
            let stream: Vec<usize> = (0..=n).map(|_| rng.random_range(0..spec.vocab)).collect();
            let actions = (0..n).map(|_| rng.random_range(0..spec.action_vocab)).collect();
            let rewards = (0..n)
                .map(|t| match t.checked_sub(k) {
                    Some(src) if is_cue(stream[src], spec.vocab) => 1,
                    Some(_) => -1,
                    None => 0,
                })
                .collect();
            Episode {
                tokens: stream[..n].to_vec(),
                actions,
                rewards,
                targets: stream[1..].to_vec(),
            }
        })
        .collect();
    Ok(Dataset {
        spec: spec.clone(),
        episodes,
    })
}

pub fn gen_copy_task(spec: &TaskSpec) -> Result<Dataset> {
    if spec.kind != TaskKind::Copy {
        return Err(Error::Contract(format!("spec is for {}", spec.kind)));
    }
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.seq_len;
    let k = spec.offset;
    let episodes = (0..spec.episodes)
        .map(|_| {
            let tokens: Vec<usize> = (0..n).map(|_| rng.random_range(0..spec.vocab)).collect();
            let actions = (0..n).map(|_| rng.random_range(0..spec.action_vocab)).collect();
            let targets = (0..n).map(|t| if t >= k { tokens[t - k] } else { tokens[t] }).collect();
            Episode {
                tokens,
                actions,
                rewards: vec![0; n],
                targets,
            }
        })
        .collect();
    Ok(Dataset {
        spec: spec.clone(),
        episodes,
    })
}

pub fn gen_tmaze(spec: &TaskSpec) -> Result<Dataset> {
    if spec.kind != TaskKind::Tmaze {
        return Err(Error::Contract(format!("spec is for {}", spec.kind)));
    }
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.seq_len;
    let episodes = (0..spec.episodes)
        .map(|_| {
            let corridor = rng.random_range(1..=spec.corridor_max);
            let cue = if rng.random_bool(0.5) {
                TMAZE_LEFT_CUE
            } else {
                TMAZE_RIGHT_CUE
            };
            let turn = if rng.random_bool(0.5) { TMAZE_LEFT } else { TMAZE_RIGHT };
            let start = n - corridor - 1;
            let mut tokens = vec![TMAZE_PAD; n];
            let mut actions = vec![TMAZE_FORWARD; n];
            let mut rewards = vec![0i8; n];
            tokens[start] = cue;
            for tok in tokens.iter_mut().take(n - 1).skip(start + 1) {
                *tok = rng.random_range(TMAZE_FIRST_FILLER..spec.vocab);
            }
            tokens[n - 1] = TMAZE_JUNCTION;
            actions[n - 1] = turn;
            rewards[n - 1] = if (cue == TMAZE_LEFT_CUE) == (turn == TMAZE_LEFT) {
                1
            } else {
                -1
            };
            let mut targets: Vec<usize> = tokens[1..].to_vec();
            targets.push(TMAZE_PAD);
            Episode {
                tokens,
                actions,
                rewards,
                targets,
            }
        })
        .collect();
    Ok(Dataset {
        spec: spec.clone(),
        episodes,
    })
}

pub const DATASET_HEADER: &str = "# prior-attn dataset v1";

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

impl Dataset {
    /// Text dump: a header, a task-settings line, then one episode per line as
    /// `tokens | actions | rewards | targets`, each a space-separated list.
    pub fn to_text(&self) -> String {
        let s = &self.spec;
        let mut out = format!(
            "{DATASET_HEADER}\ntask={} seq_len={} offset={} corridor_max={} vocab={} action_vocab={} episodes={} seed={}\n",
            s.kind, s.seq_len, s.offset, s.corridor_max, s.vocab, s.action_vocab, s.episodes, s.seed
        );
        for e in &self.episodes {
            out.push_str(&format!(
                "{} | {} | {} | {}\n",
                join(&e.tokens),
                join(&e.actions),
                join(&e.rewards),
                join(&e.targets)
            ));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let perr = |line: usize, detail: String| Error::Parse { line, detail };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, DATASET_HEADER)) => {}
            _ => return Err(perr(1, "missing dataset header".into())),
        }
        let (n, spec_line) = lines.next().ok_or_else(|| perr(2, "missing task line".into()))?;
        let mut spec = TaskSpec::default();
        for field in spec_line.split(' ') {
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| perr(n, format!("bad field `{field}`")))?;
            let num = || {
                v.parse::<u64>()
                    .map_err(|_| perr(n, format!("bad value for {k}: `{v}`")))
            };
            match k {
                "task" => spec.kind = v.parse()?,
                "seq_len" => spec.seq_len = num()? as usize,
                "offset" => spec.offset = num()? as usize,
                "corridor_max" => spec.corridor_max = num()? as usize,
                "vocab" => spec.vocab = num()? as usize,
                "action_vocab" => spec.action_vocab = num()? as usize,
                "episodes" => spec.episodes = num()? as usize,
                "seed" => spec.seed = num()?,
                _ => return Err(perr(n, format!("unknown field `{k}`"))),
            }
        }
        let mut episodes = Vec::new();
        for (n, line) in lines {
            let parts: Vec<&str> = line.split(" | ").collect();
            let [tokens, actions, rewards, targets] = parts[..] else {
                return Err(perr(n, "episode needs four fields".into()));
            };
            let ids = |s: &str| -> Result<Vec<usize>> {
                s.split(' ')
                    .map(|x| x.parse().map_err(|_| perr(n, format!("bad id `{x}`"))))
                    .collect()
            };
            let rewards = rewards
                .split(' ')
                .map(|x| x.parse::<i8>().map_err(|_| perr(n, format!("bad reward `{x}`"))))
                .collect::<Result<Vec<_>>>()?;
            let e = Episode {
                tokens: ids(tokens)?,
                actions: ids(actions)?,
                rewards,
                targets: ids(targets)?,
            };
            if [e.actions.len(), e.rewards.len(), e.targets.len()] != [e.tokens.len(); 3] {
                return Err(perr(n, "fields differ in length".into()));
            }
            episodes.push(e);
        }
        if episodes.len() != spec.episodes {
            return Err(perr(
                0,
                format!("expected {} episodes, found {}", spec.episodes, episodes.len()),
            ));
        }
        Ok(Self { spec, episodes })
    }

    /// Hex SHA-256 of the text dump.
    pub fn content_hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// All windows of length `h` as (episode, start) pairs, tiling each
    /// episode from its first step.
    pub fn windows(&self, h: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, e) in self.episodes.iter().enumerate() {
            let mut start = 0;
            while start + h <= e.tokens.len() {
                out.push((i, start));
                start += h;
            }
        }
        out
    }

    /// Gathers the given windows into one batch.
    pub fn batch_of(&self, windows: &[(usize, usize)], h: usize) -> TrajectoryBatch {
        let mut b = TrajectoryBatch {
            batch: windows.len(),
            steps: h,
            latents: Vec::with_capacity(windows.len() * h),
            actions: Vec::with_capacity(windows.len() * h),
            rewards: Vec::with_capacity(windows.len() * h),
            targets: Vec::with_capacity(windows.len() * h),
        };
        for &(i, s) in windows {
            let e = &self.episodes[i];
            b.latents.extend_from_slice(&e.tokens[s..s + h]);
            b.actions.extend_from_slice(&e.actions[s..s + h]);
            b.rewards.extend_from_slice(&e.rewards[s..s + h]);
            b.targets.extend_from_slice(&e.targets[s..s + h]);
        }
        b
    }
}

/// Row-major `[B, H]` fields of a training batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrajectoryBatch {
    pub batch: usize,
    pub steps: usize,
    pub latents: Vec<usize>,
    pub actions: Vec<usize>,
    pub rewards: Vec<i8>,
    pub targets: Vec<usize>,
}

/// One shuffled pass over all length-`h` windows, cut into batches of
/// `batch_size`. A trailing partial batch is dropped unless it is the only
/// one.
pub fn make_batches(dataset: &Dataset, h: usize, batch_size: usize, seed: u64) -> Result<Vec<TrajectoryBatch>> {
    if h == 0 || batch_size == 0 {
        return Err(Error::config(
            "batch_size",
            "window length and batch size must be positive",
        ));
    }
    if h > dataset.spec.seq_len {
        return Err(Error::config(
            "context_length",
            format!("window {h} longer than episodes of {} steps", dataset.spec.seq_len),
        ));
    }
    let mut windows = dataset.windows(h);
    windows.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let full = windows.len() / batch_size;
    if full == 0 {
        return Ok(vec![dataset.batch_of(&windows, h)]);
    }
    Ok(windows
        .chunks_exact(batch_size)
        .map(|w| dataset.batch_of(w, h))
        .collect())
}

/// Endless batch source that reshuffles on every pass.
#[derive(Debug, Clone)]
pub struct BatchStream {
    seed: u64,
    epoch: u64,
    h: usize,
    batch_size: usize,
    pending: std::vec::IntoIter<TrajectoryBatch>,
}

impl BatchStream {
    pub fn new(h: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            seed,
            epoch: 0,
            h,
            batch_size,
            pending: Vec::new().into_iter(),
        }
    }

    pub fn next_batch(&mut self, dataset: &Dataset) -> Result<TrajectoryBatch> {
        if let Some(b) = self.pending.next() {
            return Ok(b);
        }
        let batches = make_batches(dataset, self.h, self.batch_size, mix_seed(self.seed, self.epoch))?;
        self.epoch += 1;
        self.pending = batches.into_iter();
        Ok(self.pending.next().expect("make_batches yields at least one batch"))
    }
}
