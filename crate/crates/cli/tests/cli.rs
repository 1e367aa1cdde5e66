use std::path::Path;
use std::process::{Command, Output};

use prior_attn::config::{parse_config, parse_overrides, parse_seeds, Metric, RunConfig};
use prior_attn::records::{load_runs, RunRecord};
use prior_attn::summary::{Stat, SweepSummary};
use prior_attn::table::{Table, CSV_HEADER};
use prior_attn::CliError;
use prior_attn_core::attention::AttentionKind;
use prior_attn_core::model::checkpoint_from_str;
use proptest::prelude::*;

const BIN: &str = env!("CARGO_BIN_EXE_prior-attn");

/// Small and fast settings shared by the binary tests.
const QUICK: [&str; 10] = [
    "--steps",
    "6",
    "--eval_every",
    "3",
    "--episodes",
    "32",
    "--eval_episodes",
    "16",
    "--batch_size",
    "8",
];

fn cli(args: &[&str], out: &Path) -> Output {
    Command::new(BIN)
        .args(args)
        .arg("--out_dir")
        .arg(out)
        .env("PRIOR_ATTN_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn with_quick<'a>(head: &[&'a str]) -> Vec<&'a str> {
    head.iter().copied().chain(QUICK).collect()
}

fn pairs(items: &[(&str, &str)]) -> Vec<(String, String)> {
    items.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

fn config_key(err: CliError) -> String {
    match err {
        CliError::Config { key, .. } => key,
        other => panic!("expected a config error, got {other}"),
    }
}

#[test]
fn empty_config_is_the_defaults() {
    let c = parse_config(Some(""), &[]).unwrap();
    assert_eq!(c.model.attention_type, AttentionKind::Causal);
    assert_eq!(c.model, RunConfig::default().model);
    assert_eq!(c.train, RunConfig::default().train);
    assert_eq!(c.seeds, vec![1, 2, 3, 4, 5]);
    assert_eq!(c.metric(), Metric::RewardAccuracy);
}

#[test]
fn gaam_defaults_to_a_span_of_ten() {
    let c = parse_config(Some("attention_type = gaam\n"), &[]).unwrap();
    assert_eq!(c.model.init_adaptive_span, 10.0);
    let c = parse_config(Some("attention_type = adaptive"), &[]).unwrap();
    assert_eq!(c.model.init_adaptive_span, 6.0);
    let c = parse_config(Some("init_adaptive_span = 4\nattention_type = gaam"), &[]).unwrap();
    assert_eq!(c.model.init_adaptive_span, 4.0);
    // sweep variants follow the kind unless the span was pinned
    let c = parse_config(None, &pairs(&[("variants", "adaptive,gaam")])).unwrap();
    assert_eq!(c.with_kind(AttentionKind::Gaam).model.init_adaptive_span, 10.0);
    assert_eq!(c.with_kind(AttentionKind::Adaptive).model.init_adaptive_span, 6.0);
}

#[test]
fn config_errors_name_the_key() {
    let err = parse_config(Some("attention_type = banana"), &[]).unwrap_err();
    let text = err.to_string();
    for token in ["causal", "gaussian", "adaptive", "gaam"] {
        assert!(text.contains(token), "{text}");
    }
    assert_eq!(config_key(err), "attention_type");
    assert_eq!(
        config_key(parse_config(Some("colour = red"), &[]).unwrap_err()),
        "colour"
    );
    assert_eq!(
        config_key(parse_config(Some("steps = many"), &[]).unwrap_err()),
        "steps"
    );
    assert_eq!(
        config_key(parse_config(Some("num_heads = 7"), &[]).unwrap_err()),
        "num_heads"
    );
    assert_eq!(
        config_key(parse_config(Some("offset = 10"), &[]).unwrap_err()),
        "offset"
    );
    assert_eq!(config_key(parse_config(Some("vocab = 32"), &[]).unwrap_err()), "vocab");
    assert_eq!(config_key(parse_config(Some("seeds = 5-1"), &[]).unwrap_err()), "seeds");
    assert_eq!(config_key(parse_config(Some("just words"), &[]).unwrap_err()), "just");
    assert_eq!(
        config_key(parse_config(Some("span_penalty = l3"), &[]).unwrap_err()),
        "span_penalty"
    );
}

#[test]
fn overrides_beat_the_file_which_beats_defaults() {
    let file = "# desk run\nsteps = 50\nlearning_rate = 0.001  # faster\nattention_type = gaussian\n";
    let c = parse_config(Some(file), &pairs(&[("steps", "70")])).unwrap();
    assert_eq!(c.train.steps, 70);
    assert_eq!(c.train.optimizer.lr, 0.001);
    assert_eq!(c.model.attention_type, AttentionKind::Gaussian);
    assert_eq!(c.train.batch_size, 64);

    let args: Vec<String> = ["--steps", "3", "--task=copy"].iter().map(|s| s.to_string()).collect();
    assert_eq!(
        parse_overrides(&args).unwrap(),
        pairs(&[("steps", "3"), ("task", "copy")])
    );
    let dangling: Vec<String> = vec!["--steps".into()];
    assert!(parse_overrides(&dangling).is_err());
}

#[test]
fn config_text_round_trips() {
    let c = parse_config(
        Some("attention_type = gaam\nseeds = 1-3,9\nvariants = causal,gaam\nmetric = cue_accuracy\nlearning_rate = 0.0003"),
        &[],
    )
    .unwrap();
    let back = parse_config(Some(&c.to_text()), &[]).unwrap();
    assert_eq!(back.to_pairs(), c.to_pairs());
    assert_eq!(parse_seeds("1-3,9").unwrap(), vec![1, 2, 3, 9]);
}

#[test]
fn stat_examples() {
    let one = Stat::of(&[0.7]).unwrap();
    assert_eq!((one.mean, one.sd, one.stderr), (0.7, 0.0, 0.0));
    let same = Stat::of(&[0.25; 5]).unwrap();
    assert_eq!(same.stderr, 0.0);
    let s = Stat::of(&[1.0, 2.0, 3.0, 4.0]).unwrap();
    // sample variance of 1..4 is 5/3
    assert!((s.sd - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    assert!((s.stderr - (5.0f64 / 12.0).sqrt()).abs() < 1e-15);
    assert!(Stat::of(&[]).is_none());
}

#[test]
fn tables_reject_missing_version() {
    assert!(Table::from_text("a,b\n1,2\n").is_err());
    let t = Table::from_text(&format!("{CSV_HEADER}\n# note\na,b\n1,2\n")).unwrap();
    assert_eq!(t.notes, vec!["note".to_string()]);
    assert_eq!(t.rows, vec![vec!["1".to_string(), "2".to_string()]]);
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn sweep_outputs_are_consistent_and_reloadable() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sweep");
    let args = with_quick(&["sweep", "--seeds", "1-2", "--variants", "causal,gaussian"]);
    let o = cli(&args, &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    // causal and gaussian learn no span
    assert!(String::from_utf8_lossy(&o.stderr).contains("`span`"));

    let records = load_runs(&out).unwrap();
    assert_eq!(records.len(), 4);
    let summary = SweepSummary::from_records(&records, Metric::RewardAccuracy);

    let curves = Table::read(&out.join("curves.csv")).unwrap();
    // three evaluation points per variant
    assert_eq!(curves.rows.len(), 6);
    for v in &summary.variants {
        let finals: Vec<f64> = v.finals.iter().map(|f| f.1).collect();
        let mean = finals.iter().sum::<f64>() / finals.len() as f64;
        assert!((v.final_stat.unwrap().mean - mean).abs() < 1e-12);
    }
    let causal = summary.variant("causal").unwrap().final_stat.unwrap().mean;
    assert_eq!(summary.baseline(), Some(("causal", causal)));
    let svg = read(&out.join("curves.svg"));
    assert!(svg.contains(&format!("causal final {causal:.3}")));

    let priors = Table::read(&out.join("priors.csv")).unwrap();
    let families: Vec<&str> = priors.rows.iter().map(|r| r[3].as_str()).collect();
    assert!(families.contains(&"mu") && families.contains(&"sigma"));
    assert!(!families.contains(&"span"));
    assert!(out.join("priors_mu.svg").is_file() && !out.join("priors_span.svg").exists());

    let run = out.join("runs/gaussian-seed2");
    let model = checkpoint_from_str(&read(&run.join("checkpoint.txt"))).unwrap();
    assert_eq!(model.config().attention_type, AttentionKind::Gaussian);
    let manifest: serde_json::Value = serde_json::from_str(&read(&run.join("manifest.json"))).unwrap();
    assert_eq!(manifest["seed"], 2);
    assert_eq!(manifest["config"]["attention_type"], "gaussian");
    assert_eq!(manifest["train_data_hash"].as_str().unwrap().len(), 64);

    // every emitted csv reloads to the same table
    for name in ["curves.csv", "final.csv", "seeds.csv", "priors.csv"] {
        let t = Table::read(&out.join(name)).unwrap();
        assert_eq!(t.to_text(), read(&out.join(name)), "{name}");
    }
    for name in ["metrics.csv", "losses.csv", "priors.csv", "attention.csv"] {
        let t = Table::read(&run.join(name)).unwrap();
        assert_eq!(t.to_text(), read(&run.join(name)), "{name}");
    }
    let reloaded = RunRecord::load(&run).unwrap();
    assert_eq!(reloaded.evals.len(), 3);
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push((
                    p.strip_prefix(dir).unwrap().display().to_string(),
                    std::fs::read(&p).unwrap(),
                ));
            }
        }
    }
    files.sort();
    files
}

fn assert_same(a: &[(String, Vec<u8>)], b: &[(String, Vec<u8>)]) {
    let names = |s: &[(String, Vec<u8>)]| s.iter().map(|f| f.0.clone()).collect::<Vec<_>>();
    assert_eq!(names(a), names(b));
    let differ: Vec<&str> = a
        .iter()
        .zip(b)
        .filter(|(x, y)| x.1 != y.1)
        .map(|(x, _)| x.0.as_str())
        .collect();
    assert!(differ.is_empty(), "files differ: {differ:?}");
}

#[test]
fn repeated_invocations_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let args = with_quick(&["sweep", "--seeds", "3", "--attention_type", "gaam"]);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(cli(&args, &a).status.success());
    assert!(cli(&args, &b).status.success());
    let (sa, sb) = (snapshot(&a), snapshot(&b));
    assert!(sa.len() > 10);
    assert_same(&sa, &sb);

    // regenerating aggregates from the run directories changes nothing
    let o = Command::new(BIN).arg("report").arg(&a).output().unwrap();
    assert!(o.status.success());
    assert_same(&snapshot(&a), &sb);
    let single = Table::read(&a.join("final.csv")).unwrap();
    assert!(single.notes.iter().any(|n| n.starts_with("single-seed variants")));
}

#[test]
fn zero_step_priors_equal_their_initialization() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("zero");
    let o = cli(
        &[
            "sweep",
            "--steps",
            "0",
            "--seeds",
            "1-3",
            "--attention_type",
            "gaam",
            "--eval_episodes",
            "8",
        ],
        &out,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let t = Table::read(&out.join("priors.csv")).unwrap();
    assert_eq!(t.rows.len(), 16 * 3);
    for row in &t.rows {
        let want = match t.get(row, "family").unwrap() {
            "span" => 10.0,
            "mu" => 6.0,
            _ => 1.0,
        };
        assert_eq!(t.get_f64(row, "init").unwrap(), want);
        assert_eq!(t.get_f64(row, "mean").unwrap(), want);
        assert_eq!(t.get_f64(row, "sd").unwrap(), 0.0);
    }
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    assert_eq!(
        cli(&["train", "--attention_type", "banana"], &out).status.code(),
        Some(1)
    );
    assert_eq!(cli(&["train", "--nonsense", "1"], &out).status.code(), Some(1));
    assert_eq!(cli(&["frobnicate"], &out).status.code(), Some(1));

    let blocker = tmp.path().join("file");
    std::fs::write(&blocker, "not a directory").unwrap();
    let o = cli(&with_quick(&["train"]), &blocker.join("inside"));
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    let o = Command::new(BIN)
        .arg("report")
        .arg(tmp.path().join("missing"))
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(3));

    let o = cli(
        &with_quick(&["train", "--learning_rate", "1e300", "--max_grad_norm", "1e300"]),
        &out,
    );
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    let manifest = read(&out.join("runs/causal-seed1/manifest.json"));
    assert!(!manifest.contains("\"failure\": null"), "{manifest}");

    let o = Command::new(BIN)
        .args(["overhead"])
        .arg("--out_dir")
        .arg(tmp.path().join("oh"))
        .env("PRIOR_ATTN_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    let o = Command::new(BIN)
        .args(["train", "--steps", "0"])
        .arg("--out_dir")
        .arg(tmp.path().join("t"))
        .env("PRIOR_ATTN_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn overhead_table_at_the_reference_size() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("oh");
    let o = cli(&["overhead"], &out);
    assert!(o.status.success());
    let t = Table::read(&out.join("overhead.csv")).unwrap();
    let kinds: Vec<&str> = t.rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(kinds, ["causal", "adaptive", "gaussian", "gaam"]);
    assert_eq!(t.get(&t.rows[0], "delta_mflops_percent").unwrap(), "baseline");
    let base = t.get_f64(&t.rows[0], "transformer_params").unwrap();
    assert_eq!(base, 14_175_744.0);
    for row in &t.rows[1..] {
        assert!(t.get_f64(row, "delta_mflops_percent").unwrap() < 0.01);
        assert!(t.get_f64(row, "transformer_params").unwrap() - base <= 48.0);
    }
}

#[test]
fn ablation_commands_cover_their_grids() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("reg");
    let o = cli(
        &with_quick(&["ablate-reg", "--attention_type", "adaptive", "--seeds", "1"]),
        &out,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let spans = Table::read(&out.join("spans.csv")).unwrap();
    assert_eq!(spans.rows.len(), 8);
    assert!(out.join("ablate_reg.svg").is_file());
    assert!(out.join("delayed_cue-k2/curves.svg").is_file());
    let before = snapshot(&out);
    let o = Command::new(BIN).arg("report").arg(&out).output().unwrap();
    assert!(o.status.success());
    assert_same(&snapshot(&out), &before);

    assert_eq!(prior_attn::commands::init_grid(AttentionKind::Gaam).len(), 18);
    assert_eq!(prior_attn::commands::init_grid(AttentionKind::Gaussian).len(), 6);
    assert_eq!(prior_attn::commands::init_grid(AttentionKind::Adaptive).len(), 3);
    let out = tmp.path().join("init");
    let o = cli(
        &[
            "ablate-init",
            "--attention_type",
            "adaptive",
            "--seeds",
            "1",
            "--steps",
            "0",
            "--eval_episodes",
            "8",
        ],
        &out,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let t = Table::read(&out.join("priors.csv")).unwrap();
    let inits: std::collections::BTreeSet<String> = t.rows.iter().map(|r| r[4].clone()).collect();
    assert_eq!(inits.into_iter().collect::<Vec<_>>(), ["10.0", "2.0", "6.0"]);
}

proptest! {
    #[test]
    fn csv_tables_round_trip(
        notes in prop::collection::vec("[a-z0-9 =.,]{0,12}", 0..3),
        cells in prop::collection::vec(prop::collection::vec("[a-z0-9,\" .\\n-]{0,8}", 3), 0..6),
    ) {
        let mut t = Table::new(["a", "b", "c"]);
        for n in notes {
            t.note(n);
        }
        for row in cells {
            t.push(row);
        }
        let back = Table::from_text(&t.to_text()).unwrap();
        prop_assert_eq!(back, t);
    }

    #[test]
    fn identical_seeds_have_zero_stderr(x in 0.0f64..1.0, n in 1usize..6) {
        let s = Stat::of(&vec![x; n]).unwrap();
        prop_assert!(s.stderr.abs() < 1e-15);
        prop_assert!((s.mean - x).abs() < 1e-15);
    }
}
