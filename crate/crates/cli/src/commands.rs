//! Subcommand drivers. Runs execute in parallel, each writing only to its
//! own directory; aggregate files are written after all runs join.

use std::path::{Path, PathBuf};

use prior_attn_core::attention::AttentionKind;
use prior_attn_core::envs::TaskKind;
use prior_attn_core::model::{overhead_table, round3, ModelConfig, OverheadRow};
use prior_attn_core::regularization::SpanPenalty;
use prior_attn_core::trainer::{fresh_model, train_model};
use rayon::prelude::*;

use crate::config::{parse_config_with, RunConfig};
use crate::error::{CliError, CliResult};
use crate::plot::{curves_svg, priors_svg};
use crate::records::{load_runs, run_dir_name, RunRecord};
use crate::summary::{final_mean_spans, prior_stats, priors_table, Family, Stat, SweepSummary};
use crate::table::{fmt_f64, write_file, Table};

pub const THREADS_ENV: &str = "PRIOR_ATTN_THREADS";

/// One training run of a command.
#[derive(Debug, Clone)]
pub struct Job {
    pub command: &'static str,
    pub label: String,
    pub variant_index: usize,
    pub config: RunConfig,
    pub seed: u64,
    pub dir: PathBuf,
}

/// Trains, writes the run directory and returns the record.
pub fn run_job(job: &Job) -> CliResult<RunRecord> {
    let mut model = fresh_model(&job.config.model, job.seed)?;
    let report = train_model(&mut model, &job.config.task_spec(), &job.config.train, job.seed)?;
    let record = RunRecord::from_report(job.command, &job.label, job.variant_index, &job.config, &report);
    record.write(&job.dir, Some(&report), Some(&model))?;
    Ok(record)
}

/// Thread cap from [`THREADS_ENV`]; `None` leaves rayon's default.
pub fn thread_cap() -> CliResult<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::config(
                THREADS_ENV,
                format!("expected a positive integer, got `{v}`"),
            )),
        },
        Err(_) => Ok(None),
    }
}

/// Runs every job, in parallel up to the thread cap; results keep job order.
pub fn run_jobs(jobs: &[Job]) -> CliResult<Vec<RunRecord>> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_cap()? {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| CliError::config(THREADS_ENV, e.to_string()))?;
    pool.install(|| jobs.par_iter().map(run_job).collect())
}

/// Aggregate files of a directory of runs.
#[derive(Debug, Clone)]
pub struct Aggregate {
    pub summary: SweepSummary,
    /// Families with no learned values, reported as warnings.
    pub missing_families: Vec<Family>,
}

/// Writes `curves.csv`, `final.csv`, `seeds.csv`, `priors.csv`,
/// `curves.svg` and one `priors_<family>.svg` per learned family.
pub fn write_aggregate(dir: &Path, records: &[RunRecord], title: &str) -> CliResult<Aggregate> {
    let metric = records
        .first()
        .ok_or_else(|| CliError::io(dir, "no runs to aggregate"))?
        .metric()?;
    let summary = SweepSummary::from_records(records, metric);
    summary.curves_table().write(&dir.join("curves.csv"))?;
    summary.final_table().write(&dir.join("final.csv"))?;
    summary.seeds_table().write(&dir.join("seeds.csv"))?;
    write_file(&dir.join("curves.svg"), &curves_svg(&[(title.to_string(), &summary)]))?;
    let stats = prior_stats(records);
    priors_table(&stats).write(&dir.join("priors.csv"))?;
    let mut missing = Vec::new();
    for fam in Family::ALL {
        match priors_svg(&stats, fam) {
            Some(svg) => write_file(&dir.join(format!("priors_{}.svg", fam.token())), &svg)?,
            None => missing.push(fam),
        }
    }
    Ok(Aggregate {
        summary,
        missing_families: missing,
    })
}

fn warn_missing(agg: &Aggregate) {
    for fam in &agg.missing_families {
        eprintln!("warning: no run learns `{}`; its prior outputs are empty", fam.token());
    }
}

fn print_finals(summary: &SweepSummary) {
    for v in &summary.variants {
        match v.final_stat {
            Some(s) => println!(
                "{:<24} {} = {:.4} ± {:.4} (n = {}, failed = {})",
                v.label,
                summary.metric.token(),
                s.mean,
                s.stderr,
                s.n,
                v.failed_seeds.len()
            ),
            None => println!("{:<24} all {} runs failed", v.label, v.seeds.len()),
        }
    }
}

fn finish(agg: Aggregate) -> CliResult<Aggregate> {
    warn_missing(&agg);
    print_finals(&agg.summary);
    agg.summary.check_not_all_failed()?;
    Ok(agg)
}

/// Trains the first seed of `config`.
pub fn train(config: &RunConfig) -> CliResult<Aggregate> {
    let kind = config.model.attention_type;
    let seed = config.seeds[0];
    let job = Job {
        command: "train",
        label: kind.token().to_string(),
        variant_index: 0,
        config: config.clone(),
        seed,
        dir: config.out_dir.join("runs").join(run_dir_name(kind.token(), seed)),
    };
    let records = run_jobs(&[job])?;
    finish(write_aggregate(
        &config.out_dir,
        &records,
        &format!("{kind} seed {seed}"),
    )?)
}

/// Every variant kind over every seed.
pub fn sweep(config: &RunConfig) -> CliResult<Aggregate> {
    let mut jobs = Vec::new();
    for (vi, kind) in config.sweep_kinds().into_iter().enumerate() {
        for &seed in &config.seeds {
            jobs.push(Job {
                command: "sweep",
                label: kind.token().to_string(),
                variant_index: vi,
                config: config.with_kind(kind),
                seed,
                dir: config.out_dir.join("runs").join(run_dir_name(kind.token(), seed)),
            });
        }
    }
    let records = run_jobs(&jobs)?;
    let title = format!("{} k={}", config.task.kind, config.task.offset);
    finish(write_aggregate(&config.out_dir, &records, &title)?)
}

/// Penalties compared by `ablate-reg`; `none` is the reference.
pub const ABLATION_PENALTIES: [SpanPenalty; 4] = [
    SpanPenalty::None,
    SpanPenalty::L1,
    SpanPenalty::L2,
    SpanPenalty::MaxNorm,
];

/// Result of one horizon of the regularization ablation.
#[derive(Debug, Clone)]
pub struct AblationPanel {
    pub name: String,
    pub aggregate: Aggregate,
    /// Mean final span per run, keyed by penalty.
    pub spans: std::collections::BTreeMap<String, Vec<f64>>,
}

fn ablation_dir_name(task: TaskKind, offset: usize) -> String {
    format!("{task}-k{offset}")
}

/// Span penalties × horizons for a span-learning kind.
pub fn ablate_reg(config: &RunConfig) -> CliResult<Vec<AblationPanel>> {
    let kind = config.model.attention_type;
    if !kind.has_span() {
        return Err(CliError::config(
            "attention_type",
            format!("ablate-reg needs a kind with a learned span (adaptive or gaam), got {kind}"),
        ));
    }
    if config.task.kind == TaskKind::Tmaze {
        return Err(CliError::config(
            "task",
            "ablate-reg varies the delay, so it needs delayed_cue or copy",
        ));
    }
    let mut jobs = Vec::new();
    for &offset in &config.ablate_offsets {
        let dir = config.out_dir.join(ablation_dir_name(config.task.kind, offset));
        for (pi, penalty) in ABLATION_PENALTIES.into_iter().enumerate() {
            let mut c = config.clone();
            c.task.offset = offset;
            c.train.span_penalty = penalty;
            c.validate()?;
            for &seed in &config.seeds {
                jobs.push(Job {
                    command: "ablate-reg",
                    label: penalty.token().to_string(),
                    variant_index: pi,
                    config: c.clone(),
                    seed,
                    dir: dir.join("runs").join(run_dir_name(penalty.token(), seed)),
                });
            }
        }
    }
    let records = run_jobs(&jobs)?;
    let per_task = records.len() / config.ablate_offsets.len();
    let groups: Vec<(String, Vec<RunRecord>)> = config
        .ablate_offsets
        .iter()
        .zip(records.chunks(per_task))
        .map(|(&offset, chunk)| (ablation_dir_name(config.task.kind, offset), chunk.to_vec()))
        .collect();
    let panels = write_ablation(&config.out_dir, &groups)?;
    for p in &panels {
        println!("[{}]", p.name);
        print_finals(&p.aggregate.summary);
    }
    if panels
        .iter()
        .all(|p| p.aggregate.summary.check_not_all_failed().is_err())
    {
        return Err(CliError::Diverged("every ablation run diverged".into()));
    }
    Ok(panels)
}

/// Per-horizon aggregates plus `spans.csv` and the side-by-side
/// `ablate_reg.svg` at the top of `out`.
pub fn write_ablation(out: &Path, groups: &[(String, Vec<RunRecord>)]) -> CliResult<Vec<AblationPanel>> {
    let mut panels = Vec::new();
    for (name, records) in groups {
        let aggregate = write_aggregate(&out.join(name), records, name)?;
        panels.push(AblationPanel {
            name: name.clone(),
            aggregate,
            spans: final_mean_spans(records),
        });
    }
    let mut t = Table::new(["task", "penalty", "n", "mean_span", "stderr"]);
    t.note("final span averaged over heads, then over seeds");
    for p in &panels {
        for v in &p.aggregate.summary.variants {
            if let Some(s) = p.spans.get(&v.label).and_then(|xs| Stat::of(xs)) {
                t.push(vec![
                    p.name.clone(),
                    v.label.clone(),
                    s.n.to_string(),
                    fmt_f64(s.mean),
                    fmt_f64(s.stderr),
                ]);
            }
        }
    }
    t.write(&out.join("spans.csv"))?;
    let figure: Vec<(String, &SweepSummary)> = panels.iter().map(|p| (p.name.clone(), &p.aggregate.summary)).collect();
    write_file(&out.join("ablate_reg.svg"), &curves_svg(&figure))?;
    Ok(panels)
}

/// Grid of initial priors for `kind`: spans {2, 6, 10}, offsets {2, 6, 10}
/// and widths {1, 3}, restricted to the families the kind learns.
pub fn init_grid(kind: AttentionKind) -> Vec<(Option<f64>, Option<f64>, Option<f64>)> {
    let spans: Vec<Option<f64>> = if kind.has_span() {
        vec![Some(2.0), Some(6.0), Some(10.0)]
    } else {
        vec![None]
    };
    let mus: Vec<Option<f64>> = if kind.has_gaussian() {
        vec![Some(2.0), Some(6.0), Some(10.0)]
    } else {
        vec![None]
    };
    let sigmas: Vec<Option<f64>> = if kind.has_gaussian() {
        vec![Some(1.0), Some(3.0)]
    } else {
        vec![None]
    };
    let mut grid = Vec::new();
    for &l in &spans {
        for &m in &mus {
            for &s in &sigmas {
                grid.push((l, m, s));
            }
        }
    }
    grid
}

fn init_label(l: Option<f64>, m: Option<f64>, s: Option<f64>) -> String {
    let mut parts = Vec::new();
    if let Some(l) = l {
        parts.push(format!("L{l}"));
    }
    if let Some(m) = m {
        parts.push(format!("mu{m}"));
    }
    if let Some(s) = s {
        parts.push(format!("sigma{s}"));
    }
    parts.join("_")
}

/// Every grid cell over every seed.
pub fn ablate_init(config: &RunConfig) -> CliResult<Aggregate> {
    let kind = config.model.attention_type;
    if kind == AttentionKind::Causal {
        return Err(CliError::config(
            "attention_type",
            "ablate-init needs a kind with learned priors",
        ));
    }
    let mut jobs = Vec::new();
    for (vi, (l, m, s)) in init_grid(kind).into_iter().enumerate() {
        let label = init_label(l, m, s);
        let mut c = config.clone();
        if let Some(l) = l {
            c.model.init_adaptive_span = l;
            c.span_pinned = true;
        }
        if let Some(m) = m {
            c.model.init_adaptive_mu = m;
        }
        if let Some(s) = s {
            c.model.init_adaptive_sigma = s;
        }
        c.validate()?;
        for &seed in &config.seeds {
            jobs.push(Job {
                command: "ablate-init",
                label: label.clone(),
                variant_index: vi,
                config: c.clone(),
                seed,
                dir: config.out_dir.join("runs").join(run_dir_name(&label, seed)),
            });
        }
    }
    let records = run_jobs(&jobs)?;
    finish(write_aggregate(
        &config.out_dir,
        &records,
        &format!("{kind} initialization grid"),
    )?)
}

/// Overhead rows for `config.model`'s architecture at `overhead_tokens`.
pub fn overhead(config: &RunConfig) -> CliResult<Vec<OverheadRow>> {
    let rows = overhead_table(&config.model, config.overhead_tokens)?;
    let mut t = Table::new([
        "variant",
        "total_params",
        "transformer_params",
        "mflops",
        "delta_mflops_percent",
    ]);
    t.note(format!(
        "D = {}, N = {}, h = {}, T = {}",
        config.model.embed_dim, config.model.num_layers, config.model.num_heads, config.overhead_tokens
    ));
    println!(
        "{:<10} {:>14} {:>20} {:>12} {:>10}",
        "variant", "total params", "transformer params", "MFLOPs", "ΔMFLOPs %"
    );
    for r in &rows {
        let delta = r
            .delta_percent
            .map(|d| format!("{:.3}", round3(d)))
            .unwrap_or_else(|| "baseline".into());
        println!(
            "{:<10} {:>14} {:>20} {:>12.6} {:>10}",
            r.kind.token(),
            r.total_params,
            r.transformer_params,
            r.mflops,
            delta
        );
        t.push(vec![
            r.kind.token().to_string(),
            r.total_params.to_string(),
            r.transformer_params.to_string(),
            fmt_f64(r.mflops),
            delta,
        ]);
    }
    t.write(&config.out_dir.join("overhead.csv"))?;
    Ok(rows)
}

/// Base config of `overhead`: the full-size architecture.
pub fn overhead_base() -> RunConfig {
    RunConfig {
        model: ModelConfig::reference(AttentionKind::Causal),
        ..RunConfig::default()
    }
}

pub fn overhead_config(file: Option<&str>, overrides: &[(String, String)]) -> CliResult<RunConfig> {
    parse_config_with(overhead_base(), file, overrides)
}

/// Regenerates aggregate files from run directories: `dir/runs` when
/// present, otherwise every subdirectory holding runs (an ablation).
pub fn report(dir: &Path) -> CliResult<()> {
    if dir.join("runs").is_dir() {
        let records = load_runs(dir)?;
        let title = records.first().map(title_of).unwrap_or_default();
        finish(write_aggregate(dir, &records, &title)?)?;
        return Ok(());
    }
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut subdirs: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        if path.join("runs").is_dir() {
            subdirs.push(path);
        }
    }
    if subdirs.is_empty() {
        return Err(CliError::io(dir, "no run directories found"));
    }
    subdirs.sort();
    let mut groups = Vec::new();
    for sub in &subdirs {
        let name = sub
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        groups.push((name, load_runs(sub)?));
    }
    // an ablation keeps its horizons in configured order
    if let Some(order) = groups
        .first()
        .and_then(|g| g.1.first())
        .and_then(|r| r.manifest.config.get("ablate_offsets").cloned())
    {
        let rank = |name: &str| {
            order
                .split(',')
                .position(|k| name.ends_with(&format!("-k{k}")))
                .unwrap_or(usize::MAX)
        };
        groups.sort_by_key(|g| rank(&g.0));
    }
    let panels = write_ablation(dir, &groups)?;
    for p in &panels {
        println!("[{}]", p.name);
        print_finals(&p.aggregate.summary);
    }
    Ok(())
}

/// Figure title recorded by the command that produced `r`.
fn title_of(r: &RunRecord) -> String {
    let m = &r.manifest;
    let get = |k: &str| m.config.get(k).cloned().unwrap_or_default();
    match m.command.as_str() {
        "train" => format!("{} seed {}", m.attention_type, m.seed),
        "ablate-init" => format!("{} initialization grid", m.attention_type),
        _ => format!("{} k={}", get("task"), get("offset")),
    }
}
