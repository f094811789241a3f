//! Pre-flight theory check of a configuration.

use crate::error::Result;
use crate::harness::config::ExperimentConfig;
use crate::protocols::Algorithm;
use crate::theory::{estimate_constants, validate, ValidationInput, ValidationReport};

/// Outcome of `validate`: either a report per algorithm or a hard failure
/// (no spectral gap, unusable topology) that makes the config unrunnable.
#[derive(Debug)]
pub enum ConfigCheck {
    Reports(Vec<(Algorithm, ValidationReport)>),
    Hard(crate::Error),
}

impl ConfigCheck {
    pub fn is_hard_failure(&self) -> bool {
        matches!(self, ConfigCheck::Hard(_))
    }

    pub fn render_text(&self) -> String {
        match self {
            ConfigCheck::Hard(e) => format!("== theory validation ==\nHARD FAILURE: {e}\n"),
            ConfigCheck::Reports(rs) => rs
                .iter()
                .map(|(a, r)| format!("[{a}]\n{}", r.render_text()))
                .collect::<Vec<_>>()
                .join("\n"),
        }
    }
}

fn check_algorithm(cfg: &ExperimentConfig, algorithm: Algorithm, seed_base: u64) -> Result<ValidationReport> {
    let mut sim = cfg.build_simulation(algorithm, cfg.trial_seed(seed_base, 0))?;
    let mu_bounds: Vec<f64> = sim.mu_bounds()?.iter().map(|b| b.bound).collect();
    let th = &cfg.theory;
    let est = if th.fully_specified() {
        Default::default()
    } else {
        let mut trace = vec![sim.trace_sample(th.probe_minibatches)?];
        for _ in 0..th.probe_rounds.min(cfg.rounds) {
            sim.step()?;
            trace.push(sim.trace_sample(th.probe_minibatches)?);
        }
        estimate_constants(&trace)
    };
    let local_steps = (0..sim.agents().len())
        .map(|i| sim.steps_per_epoch(i))
        .max()
        .unwrap_or(0);
    Ok(validate(&ValidationInput {
        mixing: sim.mixing(),
        rounds: cfg.rounds,
        local_steps,
        lr: sim.train_params().lr,
        n_agents: sim.agents().len(),
        mu: algorithm.uses_attention().then_some(cfg.train.mu),
        mu_bounds,
        smoothness: th.smoothness.unwrap_or(est.smoothness),
        chi: th.chi.unwrap_or(est.chi),
        kappa: th.kappa.unwrap_or(est.kappa),
        constants_source: if th.fully_specified() {
            "configured".into()
        } else {
            format!("estimated lower bounds from {} probes, unset fields", est.samples)
        },
    }))
}

/// Learning-rate gate, per-agent fusion bounds at initialization and the
/// mixing-matrix spectral gap. Soft violations are reported; a missing
/// spectral gap or an unbuildable topology is a hard failure.
pub fn cmd_validate(cfg: &ExperimentConfig, seed_base: u64) -> Result<ConfigCheck> {
    cfg.validate()?;
    let graph = match cfg.build_graph() {
        Ok(g) => g,
        Err(e) => return Ok(ConfigCheck::Hard(e)),
    };
    if let Err(e) = cfg.build_mixing(&graph) {
        return Ok(ConfigCheck::Hard(e));
    }
    let mut reports = Vec::new();
    for alg in cfg.algorithm_list() {
        reports.push((alg, check_algorithm(cfg, alg, seed_base)?));
    }
    Ok(ConfigCheck::Reports(reports))
}
