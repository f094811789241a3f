//! Single-algorithm execution and the per-run output files.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::harness::config::ExperimentConfig;
use crate::netsim::{CommLedger, LedgerTotals};
use crate::protocols::{Algorithm, AlphaRecord, Simulation};
use crate::theory::{estimate_constants, validate, ConstantEstimates, TraceSample, ValidationInput, ValidationReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub algorithm: Algorithm,
    pub trial: usize,
    pub round: usize,
    pub agent: usize,
    pub train_loss: f64,
    pub test_acc: f64,
    pub comm_global: u64,
    pub comm_head: u64,
}

/// Everything one trial of one algorithm produced.
#[derive(Debug, Clone)]
pub struct TrialOutcome {
    pub algorithm: Algorithm,
    pub trial: usize,
    pub seed: u64,
    pub n_agents: usize,
    pub layout: Vec<usize>,
    pub metrics: Vec<MetricRecord>,
    pub alphas: Vec<AlphaRecord>,
    pub ledger: CommLedger,
    /// Mean test accuracy over agents after each round `1..=K`.
    pub accuracy_curve: Vec<f64>,
    pub estimates: ConstantEstimates,
    pub validation: ValidationReport,
    pub wall_clock_seconds: f64,
}

impl TrialOutcome {
    pub fn final_accuracy(&self) -> f64 {
        self.accuracy_curve.last().copied().unwrap_or(0.0)
    }

    /// Cumulative transmitted scalars through round `k`, bootstrap included.
    pub fn cumulative_scalars(&self, k: usize) -> u64 {
        self.ledger
            .rounds()
            .iter()
            .filter(|r| r.round <= k)
            .map(|r| r.scalars())
            .sum()
    }

    /// First round whose mean accuracy reaches `target`.
    pub fn rounds_to_reach(&self, target: f64) -> Option<usize> {
        self.accuracy_curve.iter().position(|&a| a >= target).map(|i| i + 1)
    }

    pub fn scalars_to_reach(&self, target: f64) -> Option<u64> {
        self.rounds_to_reach(target).map(|k| self.cumulative_scalars(k))
    }
}

/// Metadata written next to the metric stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMeta {
    pub algorithm: Algorithm,
    pub trial: usize,
    pub seed: u64,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub rounds: usize,
    pub n_agents: usize,
    pub layout: Vec<usize>,
    pub ledger_totals: LedgerTotals,
    pub final_mean_test_acc: f64,
    pub constant_estimates: ConstantEstimates,
    pub validation: serde_json::Value,
    pub validation_text: String,
    pub wall_clock_seconds: f64,
    pub version: String,
}

fn theory_report(
    cfg: &ExperimentConfig,
    sim: &Simulation,
    est: &ConstantEstimates,
    mu_bounds: Vec<f64>,
) -> ValidationReport {
    let th = &cfg.theory;
    let source = if th.fully_specified() {
        "configured".to_string()
    } else {
        format!("estimated lower bounds from {} probes, unset fields", est.samples)
    };
    let local_steps = (0..sim.agents().len())
        .map(|i| sim.steps_per_epoch(i))
        .max()
        .unwrap_or(0);
    validate(&ValidationInput {
        mixing: sim.mixing(),
        rounds: cfg.rounds,
        local_steps,
        lr: sim.train_params().lr,
        n_agents: sim.agents().len(),
        mu: sim.algorithm().uses_attention().then_some(sim.train_params().mu),
        mu_bounds,
        smoothness: th.smoothness.unwrap_or(est.smoothness),
        chi: th.chi.unwrap_or(est.chi),
        kappa: th.kappa.unwrap_or(est.kappa),
        constants_source: source,
    })
}

/// Runs `K` rounds of one algorithm for one trial.
pub fn run_trial(cfg: &ExperimentConfig, algorithm: Algorithm, trial: usize, seed_base: u64) -> Result<TrialOutcome> {
    let start = Instant::now();
    let seed = cfg.trial_seed(seed_base, trial);
    let mut sim = cfg.build_simulation(algorithm, seed)?;
    let mu_bounds: Vec<f64> = sim.mu_bounds()?.iter().map(|b| b.bound).collect();
    let probe = !cfg.theory.fully_specified();
    let mut trace: Vec<TraceSample> = Vec::new();
    if probe {
        trace.push(sim.trace_sample(cfg.theory.probe_minibatches)?);
    }
    let mut metrics = Vec::with_capacity(cfg.rounds * sim.agents().len());
    let mut alphas = Vec::new();
    let mut curve = Vec::with_capacity(cfg.rounds);
    for k in 1..=cfg.rounds {
        let report = sim.step()?;
        curve.push(report.mean_test_accuracy());
        metrics.extend(report.metrics.iter().map(|m| MetricRecord {
            algorithm,
            trial,
            round: m.round,
            agent: m.agent,
            train_loss: m.train_loss,
            test_acc: m.test_acc,
            comm_global: m.comm_global,
            comm_head: m.comm_head,
        }));
        alphas.extend(report.alphas);
        if probe && k <= cfg.theory.probe_rounds {
            trace.push(sim.trace_sample(cfg.theory.probe_minibatches)?);
        }
    }
    let estimates = estimate_constants(&trace);
    let validation = theory_report(cfg, &sim, &estimates, mu_bounds);
    for w in &validation.warnings {
        log::warn!("{algorithm} trial {trial}: {w}");
    }
    Ok(TrialOutcome {
        algorithm,
        trial,
        seed,
        n_agents: sim.agents().len(),
        layout: sim.layout().sizes().to_vec(),
        metrics,
        alphas,
        ledger: sim.ledger(),
        accuracy_curve: curve,
        estimates,
        validation,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Runs trials `0..trials`, in parallel when asked. Output order is by
/// trial regardless of scheduling.
pub fn run_trials(
    cfg: &ExperimentConfig,
    algorithm: Algorithm,
    trials: usize,
    seed_base: u64,
    parallel: bool,
) -> Result<Vec<TrialOutcome>> {
    #[cfg(feature = "parallel")]
    if parallel {
        use rayon::prelude::*;
        return (0..trials)
            .into_par_iter()
            .map(|t| run_trial(cfg, algorithm, t, seed_base))
            .collect();
    }
    #[cfg(not(feature = "parallel"))]
    if parallel {
        log::warn!("built without the `parallel` feature; running trials sequentially");
    }
    (0..trials).map(|t| run_trial(cfg, algorithm, t, seed_base)).collect()
}

/// Writes `metrics.jsonl`, `ledger.csv`, `alphas.csv` and `meta.json`.
pub fn write_outcome(dir: &Path, cfg: &ExperimentConfig, outcome: &TrialOutcome) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut out = BufWriter::new(File::create(dir.join("metrics.jsonl"))?);
    for m in &outcome.metrics {
        serde_json::to_writer(&mut out, m)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    let mut out = BufWriter::new(File::create(dir.join("ledger.csv"))?);
    outcome.ledger.write_csv(&mut out)?;
    out.flush()?;
    let mut out = BufWriter::new(File::create(dir.join("alphas.csv"))?);
    writeln!(out, "round,i,j,alpha")?;
    for a in &outcome.alphas {
        writeln!(out, "{},{},{},{}", a.round, a.i, a.j, a.alpha)?;
    }
    out.flush()?;
    let meta = RunMeta {
        algorithm: outcome.algorithm,
        trial: outcome.trial,
        seed: outcome.seed,
        config_hash: cfg.hash(),
        config: cfg.clone(),
        rounds: cfg.rounds,
        n_agents: outcome.n_agents,
        layout: outcome.layout.clone(),
        ledger_totals: outcome.ledger.totals(),
        final_mean_test_acc: outcome.final_accuracy(),
        constant_estimates: outcome.estimates,
        validation: serde_json::to_value(&outcome.validation)?,
        validation_text: outcome.validation.render_text(),
        wall_clock_seconds: outcome.wall_clock_seconds,
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn trial_dir(out_dir: &Path, trial: usize, trials: usize) -> PathBuf {
    if trials == 1 {
        out_dir.to_path_buf()
    } else {
        out_dir.join(format!("trial-{trial:03}"))
    }
}

/// `run`: the configured single algorithm, one directory per trial
/// (directly in `out_dir` for a single trial).
pub fn cmd_run(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    trials: usize,
    seed_base: u64,
    parallel: bool,
) -> Result<Vec<TrialOutcome>> {
    cfg.validate()?;
    let algs = cfg.algorithm_list();
    if algs.len() != 1 {
        return Err(crate::Error::config(
            "algorithms",
            "`run` takes exactly one algorithm; use `sweep` for a list",
        ));
    }
    let outcomes = run_trials(cfg, algs[0], trials, seed_base, parallel)?;
    for o in &outcomes {
        write_outcome(&trial_dir(out_dir, o.trial, trials), cfg, o)?;
    }
    Ok(outcomes)
}
