//! Seed aggregation: curves, final metrics and learned priors.

use std::collections::BTreeMap;

use crate::config::Metric;
use crate::error::{CliError, CliResult};
use crate::records::RunRecord;
use crate::table::{fmt_f64, Table};

/// Mean with sample spread over seeds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stat {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub sd: f64,
    /// `sd / sqrt(n)`; 0 for a single value.
    pub stderr: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Option<Stat> {
        let n = xs.len();
        if n == 0 {
            return None;
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Stat {
            n,
            mean,
            sd,
            stderr: sd / (n as f64).sqrt(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    pub stat: Stat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantSummary {
    pub label: String,
    pub kind: String,
    pub seeds: Vec<u64>,
    pub failed_seeds: Vec<u64>,
    /// Final metric per successful seed, in seed order.
    pub finals: Vec<(u64, f64)>,
    pub final_stat: Option<Stat>,
    pub curve: Vec<CurvePoint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSummary {
    pub metric: Metric,
    pub variants: Vec<VariantSummary>,
}

impl SweepSummary {
    /// Groups records by variant index; failed runs are listed but left out
    /// of every statistic.
    pub fn from_records(records: &[RunRecord], metric: Metric) -> SweepSummary {
        let mut groups: BTreeMap<usize, Vec<&RunRecord>> = BTreeMap::new();
        for r in records {
            groups.entry(r.manifest.variant_index).or_default().push(r);
        }
        let variants = groups
            .into_values()
            .map(|runs| {
                let ok: Vec<&RunRecord> = runs.iter().copied().filter(|r| !r.failed()).collect();
                let finals: Vec<(u64, f64)> = ok
                    .iter()
                    .filter_map(|r| r.evals.last().map(|e| (r.manifest.seed, metric.of(e))))
                    .collect();
                let steps: Vec<usize> = ok
                    .first()
                    .map(|r| r.evals.iter().map(|e| e.step).collect())
                    .unwrap_or_default();
                let curve = steps
                    .into_iter()
                    .filter_map(|step| {
                        let xs: Vec<f64> = ok
                            .iter()
                            .filter_map(|r| r.evals.iter().find(|e| e.step == step).map(|e| metric.of(e)))
                            .collect();
                        Stat::of(&xs).map(|stat| CurvePoint { step, stat })
                    })
                    .collect();
                VariantSummary {
                    label: runs[0].manifest.variant.clone(),
                    kind: runs[0].manifest.attention_type.clone(),
                    seeds: runs.iter().map(|r| r.manifest.seed).collect(),
                    failed_seeds: runs.iter().filter(|r| r.failed()).map(|r| r.manifest.seed).collect(),
                    final_stat: Stat::of(&finals.iter().map(|f| f.1).collect::<Vec<_>>()),
                    finals,
                    curve,
                }
            })
            .collect();
        SweepSummary { metric, variants }
    }

    pub fn variant(&self, label: &str) -> Option<&VariantSummary> {
        self.variants.iter().find(|v| v.label == label)
    }

    /// Final mean of the reference variant: `causal` when present, else the
    /// unpenalized `none` run of a regularization ablation.
    pub fn baseline(&self) -> Option<(&str, f64)> {
        ["causal", "none"]
            .into_iter()
            .find_map(|label| self.variant(label).and_then(|v| v.final_stat).map(|s| (label, s.mean)))
    }

    /// Errors when no run of any variant finished.
    pub fn check_not_all_failed(&self) -> CliResult<()> {
        if self.variants.iter().all(|v| v.finals.is_empty()) {
            let seeds: Vec<String> = self
                .variants
                .iter()
                .flat_map(|v| v.failed_seeds.iter().map(move |s| format!("{}:{s}", v.label)))
                .collect();
            return Err(CliError::Diverged(seeds.join(", ")));
        }
        Ok(())
    }

    fn stderr_notes(&self, table: &mut Table) {
        table.note(format!("metric = {}", self.metric.token()));
        table.note("stderr = sample sd / sqrt(n); 0 by convention when n = 1");
        let single: Vec<&str> = self
            .variants
            .iter()
            .filter(|v| v.finals.len() == 1)
            .map(|v| v.label.as_str())
            .collect();
        if !single.is_empty() {
            table.note(format!(
                "single-seed variants, stderr 0 by convention: {}",
                single.join(",")
            ));
        }
    }

    /// One row per (variant, evaluation step).
    pub fn curves_table(&self) -> Table {
        let mut t = Table::new(["variant", "step", "n", "mean", "stderr"]);
        self.stderr_notes(&mut t);
        for v in &self.variants {
            for p in &v.curve {
                t.push(vec![
                    v.label.clone(),
                    p.step.to_string(),
                    p.stat.n.to_string(),
                    fmt_f64(p.stat.mean),
                    fmt_f64(p.stat.stderr),
                ]);
            }
        }
        t
    }

    /// One row per variant.
    pub fn final_table(&self) -> Table {
        let mut t = Table::new(["variant", "attention_type", "n", "failed", "mean", "stderr", "sd"]);
        self.stderr_notes(&mut t);
        if let Some((label, value)) = self.baseline() {
            t.note(format!("baseline {label} = {}", fmt_f64(value)));
        }
        for v in &self.variants {
            let s = v.final_stat;
            t.push(vec![
                v.label.clone(),
                v.kind.clone(),
                v.finals.len().to_string(),
                v.failed_seeds.len().to_string(),
                s.map(|s| fmt_f64(s.mean)).unwrap_or_default(),
                s.map(|s| fmt_f64(s.stderr)).unwrap_or_default(),
                s.map(|s| fmt_f64(s.sd)).unwrap_or_default(),
            ]);
        }
        t
    }

    /// One row per run with its final metric.
    pub fn seeds_table(&self) -> Table {
        let mut t = Table::new(["variant", "seed", "final", "failed"]);
        t.note(format!("metric = {}", self.metric.token()));
        for v in &self.variants {
            for &seed in &v.seeds {
                let fin = v
                    .finals
                    .iter()
                    .find(|f| f.0 == seed)
                    .map(|f| fmt_f64(f.1))
                    .unwrap_or_default();
                t.push(vec![
                    v.label.clone(),
                    seed.to_string(),
                    fin,
                    v.failed_seeds.contains(&seed).to_string(),
                ]);
            }
        }
        t
    }
}

/// A learned prior family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Family {
    Span,
    Mu,
    Sigma,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Span, Family::Mu, Family::Sigma];

    pub fn token(self) -> &'static str {
        match self {
            Family::Span => "span",
            Family::Mu => "mu",
            Family::Sigma => "sigma",
        }
    }

    fn pick(self, h: &prior_attn_core::model::PriorSnapshot) -> Option<f64> {
        match self {
            Family::Span => h.span,
            Family::Mu => h.mu,
            Family::Sigma => h.sigma,
        }
    }
}

/// Final value of one prior family for one head, over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorStat {
    pub variant: String,
    pub layer: usize,
    pub head: usize,
    pub family: Family,
    /// Mean initial value over seeds.
    pub init: f64,
    pub stat: Stat,
}

/// Learned priors of every successful run, grouped per head and family.
pub fn prior_stats(records: &[RunRecord]) -> Vec<PriorStat> {
    // (variant index, layer, head, family) -> (variant, initial values, final values)
    type Cells = BTreeMap<(usize, usize, usize, Family), (String, Vec<f64>, Vec<f64>)>;
    let mut cells = Cells::new();
    for r in records.iter().filter(|r| !r.failed()) {
        let (Some(first), Some(last)) = (r.priors.first(), r.priors.last()) else {
            continue;
        };
        for (h0, h1) in first.heads.iter().zip(&last.heads) {
            for fam in Family::ALL {
                if let (Some(a), Some(b)) = (fam.pick(h0), fam.pick(h1)) {
                    let e = cells
                        .entry((r.manifest.variant_index, h1.layer, h1.head, fam))
                        .or_insert_with(|| (r.manifest.variant.clone(), Vec::new(), Vec::new()));
                    e.1.push(a);
                    e.2.push(b);
                }
            }
        }
    }
    let mut out: Vec<PriorStat> = cells
        .into_iter()
        .filter_map(|((_, layer, head, family), (variant, init, fin))| {
            Some(PriorStat {
                variant,
                layer,
                head,
                family,
                init: Stat::of(&init)?.mean,
                stat: Stat::of(&fin)?,
            })
        })
        .collect();
    out.sort_by_key(|p| p.family);
    out
}

pub fn priors_table(stats: &[PriorStat]) -> Table {
    let mut t = Table::new(["variant", "layer", "head", "family", "init", "mean", "sd", "n"]);
    t.note("final values over seeds; sd is the sample standard deviation");
    for p in stats {
        t.push(vec![
            p.variant.clone(),
            p.layer.to_string(),
            p.head.to_string(),
            p.family.token().to_string(),
            fmt_f64(p.init),
            fmt_f64(p.stat.mean),
            fmt_f64(p.stat.sd),
            p.stat.n.to_string(),
        ]);
    }
    t
}

/// Mean learned span per successful run of each variant label.
pub fn final_mean_spans(records: &[RunRecord]) -> BTreeMap<String, Vec<f64>> {
    let mut out: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in records.iter().filter(|r| !r.failed()) {
        let spans: Vec<f64> = r
            .priors
            .last()
            .map(|p| p.heads.iter().filter_map(|h| h.span).collect())
            .unwrap_or_default();
        if let Some(s) = Stat::of(&spans) {
            out.entry(r.manifest.variant.clone()).or_default().push(s.mean);
        }
    }
    out
}
