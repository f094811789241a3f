use std::fs;
use std::path::Path;

use gatta_core::harness::config::ExperimentConfig;
use gatta_core::harness::plot::{accuracy_series, cost_series, line_chart, Series};
use gatta_core::harness::report::{cost_report, format_reduction};
use gatta_core::harness::run::{cmd_run, run_trials};
use gatta_core::harness::sweep::{cmd_sweep, confidence_half_width};
use gatta_core::harness::validate::cmd_validate;
use gatta_core::protocols::Algorithm;
use gatta_core::Error;

const TINY: &str = r#"
algorithm = "gatta"
rounds = 4
seed = 3

[topology]
kind = "ring"
n = 4

[data]
regime = "label_skew"
classes = 4
dim = 5
per_class = 40
labels_per_agent = 2

[model]
hidden = [6]

[train]
lr = 0.01
batch = 8
"#;

fn tiny() -> ExperimentConfig {
    ExperimentConfig::from_toml(TINY).unwrap()
}

fn reference() -> ExperimentConfig {
    ExperimentConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference.toml")).unwrap()
}

fn field_of(e: Error) -> String {
    match e {
        Error::Config { field, .. } => field,
        other => panic!("expected a config error, got {other}"),
    }
}

#[test]
fn tau_is_rejected_without_ce_gatta() {
    let text = TINY.replace("batch = 8", "batch = 8\ntau = \"quarter_deg\"");
    let cfg = ExperimentConfig::from_toml(&text).unwrap();
    assert_eq!(field_of(cfg.validate().unwrap_err()), "train.tau");
    let ok = ExperimentConfig::from_toml(&text.replace("algorithm = \"gatta\"", "algorithm = \"ce_gatta\"")).unwrap();
    ok.validate().unwrap();
    let fixed = ExperimentConfig::from_toml(
        &text
            .replace("\"quarter_deg\"", "0.05")
            .replace("\"gatta\"", "\"ce_gatta\""),
    )
    .unwrap();
    fixed.validate().unwrap();
}

#[test]
fn field_level_diagnostics() {
    let cases = [
        ("lr = 0.01", "lr = -1.0", "train.lr"),
        ("rounds = 4", "rounds = 0", "rounds"),
        ("n = 4", "n = 1", "topology.n"),
        ("labels_per_agent = 2", "labels_per_agent = 9", "data.labels_per_agent"),
        ("batch = 8", "batch = 8\nmu = 1.5", "train.mu"),
    ];
    for (from, to, field) in cases {
        let cfg = ExperimentConfig::from_toml(&TINY.replace(from, to)).unwrap();
        assert_eq!(field_of(cfg.validate().unwrap_err()), field);
    }
    assert!(ExperimentConfig::from_toml(&TINY.replace("lr = 0.01", "lr = 0.01\nbogus = 1")).is_err());
}

#[test]
fn json_and_toml_agree_and_hash_is_stable() {
    let cfg = tiny();
    let json = serde_json::to_string_pretty(&cfg).unwrap();
    let back = ExperimentConfig::from_json(&json).unwrap();
    assert_eq!(cfg, back);
    assert_eq!(cfg.hash(), back.hash());
    assert_eq!(cfg.hash().len(), 64);
    let other = ExperimentConfig::from_toml(&TINY.replace("seed = 3", "seed = 4")).unwrap();
    assert_ne!(cfg.hash(), other.hash());
}

#[test]
fn il_run_has_all_zero_ledger() {
    let cfg = ExperimentConfig::from_toml(&TINY.replace("\"gatta\"", "\"il\"")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    cmd_run(&cfg, dir.path(), 1, 3, false).unwrap();
    let ledger = fs::read_to_string(dir.path().join("ledger.csv")).unwrap();
    assert!(ledger.lines().skip(1).all(|l| l.ends_with(",0")));
    assert_eq!(ledger.lines().count(), 1 + 3 * 4);
    for f in ["metrics.jsonl", "alphas.csv", "meta.json"] {
        assert!(dir.path().join(f).is_file());
    }
}

#[test]
fn reference_run_emits_one_row_per_agent_round() {
    let mut cfg = reference();
    cfg.algorithms.clear();
    cfg.algorithm = Some(Algorithm::Gatta);
    cfg.train.tau = None;
    let dir = tempfile::tempdir().unwrap();
    cmd_run(&cfg, dir.path(), 1, cfg.seed, false).unwrap();
    let rows = fs::read_to_string(dir.path().join("metrics.jsonl"))
        .unwrap()
        .lines()
        .count();
    assert_eq!(rows, cfg.rounds * 16);
    let meta: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("meta.json")).unwrap()).unwrap();
    assert_eq!(meta["config_hash"], cfg.hash());
    assert!(meta["validation_text"].as_str().unwrap().contains("theory validation"));
}

#[test]
fn run_requires_a_single_algorithm() {
    let dir = tempfile::tempdir().unwrap();
    assert!(cmd_run(&reference(), dir.path(), 1, 1, false).is_err());
}

#[test]
fn half_width_cases() {
    assert_eq!(confidence_half_width(&[0.8]), None);
    assert_eq!(confidence_half_width(&[0.7, 0.7]), Some(0.0));
    let hw = confidence_half_width(&[0.6, 0.8]).unwrap();
    assert!((hw - 1.96 * (0.02f64).sqrt() / 2f64.sqrt()).abs() < 1e-12);
}

#[test]
fn sweep_single_trial_reports_na() {
    let cfg = ExperimentConfig::from_toml(&TINY.replace("algorithm = \"gatta\"", "algorithms = [\"gatta\", \"dsgd\"]"))
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let s = cmd_sweep(&cfg, dir.path(), 1, 3, false).unwrap();
    assert!(s.rows.iter().all(|r| r.half_width.is_none()));
    assert!(s.render_table().contains("n/a"));
    assert!(dir.path().join("summary.csv").is_file());
    assert!(dir.path().join("gatta/trial-000/metrics.jsonl").is_file());
}

#[test]
fn identical_trials_have_zero_variance() {
    let cfg = tiny();
    let a = run_trials(&cfg, Algorithm::Gatta, 1, 9, false).unwrap();
    let b = run_trials(&cfg, Algorithm::Gatta, 1, 9, false).unwrap();
    let accs = [a[0].final_accuracy(), b[0].final_accuracy()];
    assert_eq!(confidence_half_width(&accs), Some(0.0));
}

#[test]
fn interval_shrinks_with_more_trials() {
    let mut cfg = reference();
    cfg.algorithms.clear();
    cfg.algorithm = Some(Algorithm::Dsgd);
    cfg.train.tau = None;
    let runs = run_trials(&cfg, Algorithm::Dsgd, 5, cfg.seed, true).unwrap();
    let accs: Vec<f64> = runs.iter().map(|o| o.final_accuracy()).collect();
    let two = confidence_half_width(&accs[..2]).unwrap();
    let five = confidence_half_width(&accs).unwrap();
    assert!(five < two, "5 trials {five} vs 2 trials {two}");
}

#[test]
fn report_reduction_matches_hand_computation() {
    assert_eq!(format_reduction(100.0, 100.0), "0.0%");
    assert_eq!(format_reduction(50.0, 100.0), "50.0%");
    let base = tiny();
    let dir = tempfile::tempdir().unwrap();
    let mut ce = base.clone();
    ce.algorithm = Some(Algorithm::CeGatta);
    let mut d = base.clone();
    d.algorithm = Some(Algorithm::Dsgd);
    cmd_run(&ce, &dir.path().join("ce"), 1, 3, false).unwrap();
    cmd_run(&d, &dir.path().join("d"), 1, 3, false).unwrap();
    let rep = cost_report(&[dir.path().join("ce"), dir.path().join("d")]).unwrap();
    let ce_total = rep
        .rows
        .iter()
        .find(|r| r.algorithm == Algorithm::CeGatta)
        .unwrap()
        .totals
        .scalars() as f64;
    let d_total = rep
        .rows
        .iter()
        .find(|r| r.algorithm == Algorithm::Dsgd)
        .unwrap()
        .totals
        .scalars() as f64;
    assert_eq!(rep.reduction, Some(1.0 - ce_total / d_total));
    assert!(rep.render_table().contains(&format_reduction(ce_total, d_total)));

    let same = cost_report(&[dir.path().join("d"), dir.path().join("d")]).unwrap();
    assert_eq!(same.reduction, None);
}

#[test]
fn empty_plot_has_axes_only() {
    let svg = line_chart("t", "x", "y", &[]);
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    assert!(!svg.contains("<polyline"));
}

#[test]
fn single_series_draws_one_polyline() {
    let s = Series {
        name: "a".into(),
        points: vec![(1.0, 0.5), (2.0, 0.7)],
    };
    assert_eq!(line_chart("t", "x", "y", &[s]).matches("<polyline").count(), 1);
}

#[test]
fn three_point_chart_matches_golden_file() {
    let s = Series {
        name: "gatta".into(),
        points: vec![(1.0, 0.4), (2.0, 0.65), (3.0, 0.8)],
    };
    let svg = line_chart("Mean test accuracy", "round", "accuracy", &[s]);
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/three_point.svg");
    if std::env::var("GATTA_BLESS").is_ok_and(|v| v == "1") {
        fs::write(&golden, &svg).unwrap();
    }
    assert_eq!(svg, fs::read_to_string(golden).unwrap());
}

#[test]
fn series_parsers() {
    let jsonl = concat!(
        r#"{"algorithm":"gatta","trial":0,"round":1,"agent":0,"train_loss":1.0,"test_acc":0.5,"comm_global":1,"comm_head":1}"#,
        "\n",
        r#"{"algorithm":"gatta","trial":0,"round":1,"agent":1,"train_loss":1.0,"test_acc":0.7,"comm_global":1,"comm_head":1}"#,
        "\n"
    );
    assert_eq!(accuracy_series(jsonl).unwrap(), vec![(1.0, 0.6)]);
    let csv = "round,kind,scalars\n0,global,0\n0,head,8\n0,control,0\n1,global,10\n1,head,8\n1,control,3\n";
    assert_eq!(cost_series(csv).unwrap(), vec![(0.0, 8.0), (1.0, 18.0)]);
}

#[test]
fn validate_lazy_ring_passes_and_even_nonlazy_ring_is_hard_failure() {
    let cfg = ExperimentConfig::from_toml(&TINY.replace("lr = 0.01", "lr = 0.0001\nmu = 0.99")).unwrap();
    let check = cmd_validate(&cfg, 3).unwrap();
    assert!(!check.is_hard_failure());
    assert!(check.render_text().contains("PASS"), "{}", check.render_text());

    let bad = ExperimentConfig::from_toml(&TINY.replace("n = 4", "n = 4\nlazy = false")).unwrap();
    let check = cmd_validate(&bad, 3).unwrap();
    assert!(check.is_hard_failure());
    assert!(matches!(
        check,
        gatta_core::harness::validate::ConfigCheck::Hard(Error::NoSpectralGap { .. })
    ));
}

#[test]
fn validate_mu_check_passes_when_bounds_are_zero() {
    // Identical initial heads make every bound 0; mu = 0 then passes.
    let cfg = ExperimentConfig::from_toml(&TINY.replace("batch = 8", "batch = 8\nmu = 0.0")).unwrap();
    let mut sim = cfg.build_simulation(Algorithm::Gatta, 3).unwrap();
    let head = sim.agents()[0].params.head().to_vec();
    for a in sim.agents_mut() {
        for h in a.attention.neighbor_heads.values_mut() {
            *h = head.clone();
        }
    }
    assert!(sim.mu_bounds().unwrap().iter().all(|b| b.bound == 0.0));
    let check = cmd_validate(&cfg, 3).unwrap();
    let gatta_core::harness::validate::ConfigCheck::Reports(reports) = check else {
        panic!("hard failure")
    };
    assert!(reports
        .iter()
        .all(|(_, r)| r.mu_ok == (r.mu_bound_max.unwrap_or(0.0) <= 0.0)));
}

#[test]
fn validate_covers_algorithms_without_attention() {
    let cfg = ExperimentConfig::from_toml(&TINY.replace(
        "algorithm = \"gatta\"",
        "algorithms = [\"dsgd\", \"il\", \"fl\", \"gt_dsgd\"]",
    ))
    .unwrap();
    let gatta_core::harness::validate::ConfigCheck::Reports(reports) = cmd_validate(&cfg, 3).unwrap() else {
        panic!("hard failure")
    };
    assert_eq!(reports.len(), 4);
    assert!(reports.iter().all(|(_, r)| r.mu.is_none()));
}
