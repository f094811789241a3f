//! Algorithm x trial comparison with normal-approximation intervals.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::Result;
use crate::harness::config::ExperimentConfig;
use crate::harness::run::{run_trials, trial_dir, write_outcome, TrialOutcome};
use crate::protocols::Algorithm;

/// `1.96 s / sqrt(n)` with the sample standard deviation; `None` for one
/// observation.
pub fn confidence_half_width(values: &[f64]) -> Option<f64> {
    let n = values.len();
    if n < 2 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Some(1.96 * var.sqrt() / (n as f64).sqrt())
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub algorithm: Algorithm,
    pub trials: usize,
    pub final_accuracies: Vec<f64>,
    pub mean_final_acc: f64,
    pub half_width: Option<f64>,
    pub mean_total_scalars: f64,
    /// Mean over trials of the first round reaching that trial's D-SGD
    /// final accuracy; `None` if D-SGD was not swept or some trial never got
    /// there.
    pub rounds_to_dsgd_final: Option<f64>,
    pub scalars_to_dsgd_final: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepSummary {
    pub rows: Vec<SweepRow>,
}

impl SweepSummary {
    pub fn row(&self, algorithm: Algorithm) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.algorithm == algorithm)
    }

    pub fn render_table(&self) -> String {
        let pct = |v: f64| format!("{:.2}", 100.0 * v);
        let opt = |v: Option<f64>, f: &dyn Fn(f64) -> String| v.map_or_else(|| "n/a".to_string(), f);
        let mut s = String::new();
        s.push_str("| algorithm | trials | mean test acc (%) | 95% half-width | total scalars | rounds to D-SGD final | scalars to D-SGD final |\n");
        s.push_str("|---|---|---|---|---|---|---|\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {:.0} | {} | {} |",
                r.algorithm,
                r.trials,
                pct(r.mean_final_acc),
                opt(r.half_width, &|v| pct(v)),
                r.mean_total_scalars,
                opt(r.rounds_to_dsgd_final, &|v| format!("{v:.1}")),
                opt(r.scalars_to_dsgd_final, &|v| format!("{v:.0}")),
            );
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
        let mut s = String::from(
            "algorithm,trials,mean_final_acc,half_width,mean_total_scalars,rounds_to_dsgd_final,scalars_to_dsgd_final\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.algorithm,
                r.trials,
                r.mean_final_acc,
                opt(r.half_width),
                r.mean_total_scalars,
                opt(r.rounds_to_dsgd_final),
                opt(r.scalars_to_dsgd_final)
            );
        }
        fs::write(path, s)?;
        Ok(())
    }
}

/// Builds the comparison table from per-algorithm trial outcomes.
pub fn summarize(results: &[(Algorithm, Vec<TrialOutcome>)]) -> SweepSummary {
    let dsgd = results.iter().find(|(a, _)| *a == Algorithm::Dsgd).map(|(_, o)| o);
    let rows = results
        .iter()
        .map(|(alg, outcomes)| {
            let accs: Vec<f64> = outcomes.iter().map(TrialOutcome::final_accuracy).collect();
            let totals: Vec<f64> = outcomes.iter().map(|o| o.ledger.totals().scalars() as f64).collect();
            let reach = dsgd.and_then(|d| {
                let mut rounds = Vec::new();
                let mut scalars = Vec::new();
                for (o, base) in outcomes.iter().zip(d) {
                    let target = base.final_accuracy();
                    rounds.push(o.rounds_to_reach(target)? as f64);
                    scalars.push(o.scalars_to_reach(target)? as f64);
                }
                Some((mean(&rounds), mean(&scalars)))
            });
            SweepRow {
                algorithm: *alg,
                trials: outcomes.len(),
                mean_final_acc: mean(&accs),
                half_width: confidence_half_width(&accs),
                final_accuracies: accs,
                mean_total_scalars: mean(&totals),
                rounds_to_dsgd_final: reach.map(|r| r.0),
                scalars_to_dsgd_final: reach.map(|r| r.1),
            }
        })
        .collect();
    SweepSummary { rows }
}

/// Runs every configured algorithm for `trials` trials. Trials share data
/// and topology across algorithms, so rows are paired comparisons.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    trials: usize,
    seed_base: u64,
    parallel: bool,
) -> Result<Vec<(Algorithm, Vec<TrialOutcome>)>> {
    cfg.validate()?;
    cfg.algorithm_list()
        .into_iter()
        .map(|alg| Ok((alg, run_trials(cfg, alg, trials, seed_base, parallel)?)))
        .collect()
}

/// `sweep`: runs, writes `<out>/<algorithm>/trial-XXX/`, `summary.csv` and
/// `summary.md`.
pub fn cmd_sweep(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    trials: usize,
    seed_base: u64,
    parallel: bool,
) -> Result<SweepSummary> {
    let results = run_sweep(cfg, trials, seed_base, parallel)?;
    for (alg, outcomes) in &results {
        for o in outcomes {
            write_outcome(&trial_dir(&out_dir.join(alg.name()), o.trial, 2), cfg, o)?;
        }
    }
    let summary = summarize(&results);
    fs::create_dir_all(out_dir)?;
    summary.write_csv(&out_dir.join("summary.csv"))?;
    fs::write(out_dir.join("summary.md"), summary.render_table())?;
    Ok(summary)
}
