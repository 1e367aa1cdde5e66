//! Per-run output files and their loader.
//!
//! A run directory holds `metrics.csv`, `losses.csv`, `priors.csv`,
//! `attention.csv`, `manifest.json` and `checkpoint.txt`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use prior_attn_core::attention::AttentionKind;
use prior_attn_core::model::{checkpoint_to_string, PriorSnapshot, WorldModel};
use prior_attn_core::trainer::{AttentionProfile, EvalMetrics, PriorRecord, TrainReport};
use serde::{Deserialize, Serialize};

use crate::config::{Metric, RunConfig};
use crate::error::{CliError, CliResult};
use crate::table::{fmt_f64, fmt_opt, write_file, Table};

pub const MANIFEST_FORMAT: &str = "prior-attn v1";

/// Machine-readable description of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub command: String,
    /// Label of the compared variant this run belongs to.
    pub variant: String,
    pub variant_index: usize,
    pub attention_type: String,
    pub seed: u64,
    pub metric: String,
    pub config: BTreeMap<String, String>,
    pub train_data_hash: String,
    pub eval_data_hash: String,
    pub failure: Option<String>,
    pub zero_prior_grad_steps: usize,
    pub steps_completed: usize,
}

/// What aggregation needs from a run, in memory or loaded from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub manifest: Manifest,
    /// Evaluation points; `profiles` are left empty.
    pub evals: Vec<EvalMetrics>,
    pub priors: Vec<PriorRecord>,
    /// Attention profiles of the final evaluation.
    pub profiles: Vec<AttentionProfile>,
}

const METRIC_COLUMNS: [&str; 8] = [
    "step",
    "reward_accuracy",
    "cue_accuracy",
    "chance_accuracy",
    "cue_chance_accuracy",
    "latent_loss",
    "reward_loss",
    "latent_accuracy",
];

impl RunRecord {
    pub fn from_report(
        command: &str,
        variant: &str,
        variant_index: usize,
        config: &RunConfig,
        report: &TrainReport,
    ) -> RunRecord {
        let manifest = Manifest {
            format: MANIFEST_FORMAT.to_string(),
            command: command.to_string(),
            variant: variant.to_string(),
            variant_index,
            attention_type: report.kind.token().to_string(),
            seed: report.seed,
            metric: config.metric().token().to_string(),
            config: config.to_pairs().into_iter().filter(|(k, _)| k != "out_dir").collect(),
            train_data_hash: report.train_data_hash.clone(),
            eval_data_hash: report.eval_data_hash.clone(),
            failure: report.failure.clone(),
            zero_prior_grad_steps: report.zero_prior_grad_steps.len(),
            steps_completed: report.losses.len(),
        };
        let evals = report
            .evals
            .iter()
            .map(|e| EvalMetrics {
                profiles: Vec::new(),
                ..e.clone()
            })
            .collect();
        RunRecord {
            manifest,
            evals,
            priors: report.priors.clone(),
            profiles: report.final_eval().map(|e| e.profiles.clone()).unwrap_or_default(),
        }
    }

    pub fn kind(&self) -> CliResult<AttentionKind> {
        Ok(self.manifest.attention_type.parse()?)
    }

    pub fn metric(&self) -> CliResult<Metric> {
        Metric::parse(&self.manifest.metric).ok_or_else(|| {
            CliError::config(
                "metric",
                format!("unknown metric `{}` in manifest", self.manifest.metric),
            )
        })
    }

    pub fn failed(&self) -> bool {
        self.manifest.failure.is_some()
    }

    pub fn metrics_table(&self) -> Table {
        let mut t = Table::new(METRIC_COLUMNS);
        for e in &self.evals {
            t.push(vec![
                e.step.to_string(),
                fmt_f64(e.reward_accuracy),
                fmt_f64(e.cue_accuracy),
                fmt_f64(e.chance_accuracy),
                fmt_f64(e.cue_chance_accuracy),
                fmt_f64(e.latent_loss),
                fmt_f64(e.reward_loss),
                fmt_f64(e.latent_accuracy),
            ]);
        }
        t
    }

    pub fn priors_table(&self) -> Table {
        let mut t = Table::new(["step", "layer", "head", "span", "mu", "sigma"]);
        for rec in &self.priors {
            for h in &rec.heads {
                t.push(vec![
                    rec.step.to_string(),
                    h.layer.to_string(),
                    h.head.to_string(),
                    fmt_opt(h.span),
                    fmt_opt(h.mu),
                    fmt_opt(h.sigma),
                ]);
            }
        }
        t
    }

    pub fn attention_table(&self) -> Table {
        let mut t = Table::new(["layer", "head", "offset", "mean", "final_query"]);
        for p in &self.profiles {
            for (d, (m, f)) in p.mean.iter().zip(&p.final_query).enumerate() {
                t.push(vec![
                    p.layer.to_string(),
                    p.head.to_string(),
                    d.to_string(),
                    fmt_f64(*m),
                    fmt_f64(*f),
                ]);
            }
        }
        t
    }

    /// Writes every file of the run into `dir`, plus the checkpoint and
    /// per-step losses when given.
    pub fn write(&self, dir: &Path, report: Option<&TrainReport>, model: Option<&WorldModel>) -> CliResult<()> {
        self.metrics_table().write(&dir.join("metrics.csv"))?;
        self.priors_table().write(&dir.join("priors.csv"))?;
        self.attention_table().write(&dir.join("attention.csv"))?;
        if let Some(r) = report {
            losses_table(r).write(&dir.join("losses.csv"))?;
        }
        if let Some(m) = model {
            write_file(&dir.join("checkpoint.txt"), &checkpoint_to_string(m))?;
        }
        let json = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        write_file(&dir.join("manifest.json"), &(json + "\n"))
    }

    pub fn load(dir: &Path) -> CliResult<RunRecord> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| CliError::config("manifest", format!("{}: {e}", path.display())))?;

        let t = Table::read(&dir.join("metrics.csv"))?;
        let mut evals = Vec::with_capacity(t.rows.len());
        for row in &t.rows {
            evals.push(EvalMetrics {
                step: t.get_f64(row, "step")? as usize,
                reward_accuracy: t.get_f64(row, "reward_accuracy")?,
                cue_accuracy: t.get_f64(row, "cue_accuracy")?,
                chance_accuracy: t.get_f64(row, "chance_accuracy")?,
                cue_chance_accuracy: t.get_f64(row, "cue_chance_accuracy")?,
                latent_loss: t.get_f64(row, "latent_loss")?,
                reward_loss: t.get_f64(row, "reward_loss")?,
                latent_accuracy: t.get_f64(row, "latent_accuracy")?,
                profiles: Vec::new(),
            });
        }

        let t = Table::read(&dir.join("priors.csv"))?;
        let mut priors: Vec<PriorRecord> = Vec::new();
        for row in &t.rows {
            let step = t.get_f64(row, "step")? as usize;
            let head = PriorSnapshot {
                layer: t.get_f64(row, "layer")? as usize,
                head: t.get_f64(row, "head")? as usize,
                span: t.get_opt(row, "span")?,
                mu: t.get_opt(row, "mu")?,
                sigma: t.get_opt(row, "sigma")?,
            };
            match priors.last_mut() {
                Some(last) if last.step == step => last.heads.push(head),
                _ => priors.push(PriorRecord {
                    step,
                    heads: vec![head],
                }),
            }
        }

        let t = Table::read(&dir.join("attention.csv"))?;
        let mut profiles: Vec<AttentionProfile> = Vec::new();
        for row in &t.rows {
            let (layer, head) = (t.get_f64(row, "layer")? as usize, t.get_f64(row, "head")? as usize);
            let (m, f) = (t.get_f64(row, "mean")?, t.get_f64(row, "final_query")?);
            match profiles.last_mut() {
                Some(p) if p.layer == layer && p.head == head => {
                    p.mean.push(m);
                    p.final_query.push(f);
                }
                _ => profiles.push(AttentionProfile {
                    layer,
                    head,
                    mean: vec![m],
                    final_query: vec![f],
                }),
            }
        }
        Ok(RunRecord {
            manifest,
            evals,
            priors,
            profiles,
        })
    }
}

pub fn losses_table(report: &TrainReport) -> Table {
    let mut t = Table::new(["step", "latent_loss", "reward_loss", "span_penalty", "total"]);
    for (i, l) in report.losses.iter().enumerate() {
        t.push(vec![
            (i + 1).to_string(),
            fmt_f64(l.latent_loss),
            fmt_f64(l.reward_loss),
            fmt_f64(l.span_penalty),
            fmt_f64(l.total),
        ]);
    }
    t
}

/// Directory name of one run.
pub fn run_dir_name(variant: &str, seed: u64) -> String {
    format!("{variant}-seed{seed}")
}

/// Every run under `dir/runs`, ordered by variant index then seed.
pub fn load_runs(dir: &Path) -> CliResult<Vec<RunRecord>> {
    let runs = dir.join("runs");
    let entries = std::fs::read_dir(&runs).map_err(|e| CliError::io(&runs, e))?;
    let mut dirs: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| CliError::io(&runs, e))?;
        if entry.path().join("manifest.json").is_file() {
            dirs.push(entry.path());
        }
    }
    let mut records = dirs.iter().map(|d| RunRecord::load(d)).collect::<CliResult<Vec<_>>>()?;
    records.sort_by_key(|r| (r.manifest.variant_index, r.manifest.seed));
    if records.is_empty() {
        return Err(CliError::io(&runs, "no run directories with a manifest"));
    }
    Ok(records)
}
