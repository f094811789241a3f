//! Experiment configuration: TOML (or JSON) with nested sections.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::{gaussian_mixture, load_idx, partition_feature_skew, partition_label_skew, FeatureSkew, Shard};
use crate::error::{Error, Result};
use crate::nn::ParamLayout;
use crate::protocols::{Algorithm, Simulation, SimulationSpec, TauRule, TrainParams};
use crate::rng::{derive_seed, Stream};
use crate::topology::{complete, erdos_renyi, ring, star, Graph, MixingMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub algorithm: Option<Algorithm>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub algorithms: Vec<Algorithm>,
    pub rounds: usize,
    /// Base trial seed; trial `t` uses `seed + t`.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_trials")]
    pub trials: usize,
    pub topology: TopologyConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub theory: TheoryConfig,
}

fn default_trials() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyKind {
    ErdosRenyi,
    Ring,
    Complete,
    Star,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyConfig {
    pub kind: TopologyKind,
    #[serde(default)]
    pub n: Option<usize>,
    #[serde(default)]
    pub p: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub lazy: bool,
    #[serde(default)]
    pub hub: usize,
    #[serde(default)]
    pub path: Option<PathBuf>,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    LabelSkew,
    FeatureSkew,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub regime: Regime,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_per_class")]
    pub per_class: usize,
    #[serde(default = "default_separation")]
    pub separation: f64,
    #[serde(default)]
    pub labels_per_agent: Option<usize>,
    #[serde(default)]
    pub writers_per_agent: Option<usize>,
    #[serde(default)]
    pub n_writers: Option<usize>,
    #[serde(default)]
    pub identity_writers: bool,
    #[serde(default = "default_test_frac")]
    pub test_frac: f64,
    /// Fixed data seed; when absent it is derived from the trial seed.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub images: Option<PathBuf>,
    #[serde(default)]
    pub labels: Option<PathBuf>,
}

fn default_classes() -> usize {
    6
}
fn default_dim() -> usize {
    20
}
fn default_per_class() -> usize {
    500
}
fn default_separation() -> f64 {
    2.0
}
fn default_test_frac() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauName {
    QuarterDeg,
    InvDeg,
}

/// `tau = "quarter_deg"`, `tau = "inv_deg"` or `tau = 0.05`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TauConfig {
    Named(TauName),
    Fixed(f64),
}

impl TauConfig {
    pub fn rule(self) -> TauRule {
        match self {
            TauConfig::Named(TauName::QuarterDeg) => TauRule::QuarterDeg,
            TauConfig::Named(TauName::InvDeg) => TauRule::InvDeg,
            TauConfig::Fixed(v) => TauRule::Fixed(v),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub lr_overrides: BTreeMap<Algorithm, f64>,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default)]
    pub steps_per_epoch: Option<usize>,
    #[serde(default = "default_mu")]
    pub mu: f64,
    #[serde(default)]
    pub tau: Option<TauConfig>,
    #[serde(default = "default_ft")]
    pub ft_epochs: usize,
}

fn default_batch() -> usize {
    32
}
fn default_mu() -> f64 {
    0.9
}
fn default_ft() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoryConfig {
    /// Known constants; any left out are estimated by probing.
    #[serde(default)]
    pub smoothness: Option<f64>,
    #[serde(default)]
    pub chi: Option<f64>,
    #[serde(default)]
    pub kappa: Option<f64>,
    /// Rounds after which the run is probed, in addition to round 0.
    #[serde(default = "default_probe_rounds")]
    pub probe_rounds: usize,
    #[serde(default = "default_probe_minibatches")]
    pub probe_minibatches: usize,
}

fn default_probe_rounds() -> usize {
    2
}
fn default_probe_minibatches() -> usize {
    4
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self {
            smoothness: None,
            chi: None,
            kappa: None,
            probe_rounds: default_probe_rounds(),
            probe_minibatches: default_probe_minibatches(),
        }
    }
}

impl TheoryConfig {
    pub fn fully_specified(&self) -> bool {
        self.smoothness.is_some() && self.chi.is_some() && self.kappa.is_some()
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg = if path.extension().is_some_and(|e| e == "json") {
            Self::from_json(&text)?
        } else {
            Self::from_toml(&text)?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Algorithms to run, in configuration order.
    pub fn algorithm_list(&self) -> Vec<Algorithm> {
        let mut list: Vec<Algorithm> = self.algorithm.into_iter().collect();
        for &a in &self.algorithms {
            if !list.contains(&a) {
                list.push(a);
            }
        }
        list
    }

    /// Field-level checks beyond what parsing enforces.
    pub fn validate(&self) -> Result<()> {
        let algs = self.algorithm_list();
        if algs.is_empty() {
            return Err(Error::config("algorithm", "set `algorithm` or `algorithms`"));
        }
        if self.rounds == 0 {
            return Err(Error::config("rounds", "must be positive"));
        }
        if self.trials == 0 {
            return Err(Error::config("trials", "must be positive"));
        }
        let t = &self.topology;
        match t.kind {
            TopologyKind::File => {
                if t.path.is_none() {
                    return Err(Error::config("topology.path", "required for kind = \"file\""));
                }
            }
            kind => {
                let n = t.n.ok_or_else(|| Error::config("topology.n", "required"))?;
                if n < 2 {
                    return Err(Error::config("topology.n", "need at least 2 agents"));
                }
                if kind == TopologyKind::ErdosRenyi {
                    match t.p {
                        Some(p) if p > 0.0 && p <= 1.0 => {}
                        _ => return Err(Error::config("topology.p", "required, in (0, 1]")),
                    }
                }
                if kind == TopologyKind::Star && t.hub >= n {
                    return Err(Error::config("topology.hub", "out of range"));
                }
            }
        }
        let d = &self.data;
        if !(d.test_frac > 0.0 && d.test_frac < 1.0) {
            return Err(Error::config("data.test_frac", "must lie in (0, 1)"));
        }
        match d.regime {
            Regime::LabelSkew | Regime::Idx => {
                let c = d
                    .labels_per_agent
                    .ok_or_else(|| Error::config("data.labels_per_agent", "required"))?;
                if c == 0 || (d.regime == Regime::LabelSkew && c > d.classes) {
                    return Err(Error::config("data.labels_per_agent", "must lie in 1..=classes"));
                }
                if d.regime == Regime::Idx && (d.images.is_none() || d.labels.is_none()) {
                    return Err(Error::config(
                        "data.images",
                        "idx regime needs `images` and `labels` paths",
                    ));
                }
            }
            Regime::FeatureSkew => {
                if d.writers_per_agent.unwrap_or(0) == 0 {
                    return Err(Error::config("data.writers_per_agent", "required, positive"));
                }
                if d.n_writers.unwrap_or(0) == 0 {
                    return Err(Error::config("data.n_writers", "required, positive"));
                }
            }
        }
        if d.regime != Regime::Idx && (d.classes < 2 || d.dim == 0 || d.per_class == 0) {
            return Err(Error::config(
                "data",
                "classes >= 2, dim > 0 and per_class > 0 required",
            ));
        }
        if self.model.hidden.contains(&0) {
            return Err(Error::config("model.hidden", "layer widths must be positive"));
        }
        let tr = &self.train;
        if !(tr.lr > 0.0 && tr.lr.is_finite()) {
            return Err(Error::config("train.lr", "must be positive"));
        }
        if let Some((a, _)) = tr.lr_overrides.iter().find(|(_, &v)| !(v > 0.0 && v.is_finite())) {
            return Err(Error::config(format!("train.lr_overrides.{a}"), "must be positive"));
        }
        if tr.batch == 0 {
            return Err(Error::config("train.batch", "must be positive"));
        }
        if !(0.0..=1.0).contains(&tr.mu) {
            return Err(Error::config("train.mu", "must lie in [0, 1]"));
        }
        if let Some(tau) = tr.tau {
            if !algs.contains(&Algorithm::CeGatta) {
                return Err(Error::config("train.tau", "only ce_gatta uses a pruning threshold"));
            }
            if let TauConfig::Fixed(v) = tau {
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(Error::config("train.tau", "must be non-negative"));
                }
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical (sorted-key) JSON encoding.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_value(self).expect("config serializes").to_string();
        Sha256::digest(canonical.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn trial_seed(&self, seed_base: u64, trial: usize) -> u64 {
        seed_base.wrapping_add(trial as u64)
    }

    pub fn build_graph(&self) -> Result<Graph> {
        let t = &self.topology;
        let n = t.n.unwrap_or(0);
        match t.kind {
            TopologyKind::ErdosRenyi => erdos_renyi(n, t.p.unwrap_or(0.0), t.seed),
            TopologyKind::Ring => ring(n),
            TopologyKind::Complete => complete(n),
            TopologyKind::Star => star(n, t.hub),
            TopologyKind::File => {
                let path = t
                    .path
                    .as_ref()
                    .ok_or_else(|| Error::config("topology.path", "required"))?;
                Graph::from_edge_list(&std::fs::read_to_string(path)?)
            }
        }
    }

    pub fn build_mixing(&self, graph: &Graph) -> Result<MixingMatrix> {
        MixingMatrix::metropolis(graph, self.topology.lazy)
    }

    pub fn data_seed(&self, trial_seed: u64) -> u64 {
        self.data
            .seed
            .unwrap_or_else(|| derive_seed(trial_seed, Stream::Partition, 0))
    }

    pub fn build_shards(&self, n_agents: usize, trial_seed: u64) -> Result<(Vec<Shard>, usize, usize)> {
        let d = &self.data;
        let seed = self.data_seed(trial_seed);
        let assignment = match d.regime {
            Regime::LabelSkew => {
                let base = gaussian_mixture(d.classes, d.dim, d.per_class, d.separation, seed)?;
                partition_label_skew(&base, n_agents, d.labels_per_agent.unwrap_or(1), d.test_frac, seed)?
            }
            Regime::FeatureSkew => {
                let base = gaussian_mixture(d.classes, d.dim, d.per_class, d.separation, seed)?;
                let cfg = FeatureSkew {
                    n_agents,
                    writers_per_agent: d.writers_per_agent.unwrap_or(1),
                    n_writers: d.n_writers.unwrap_or(1),
                    test_frac: d.test_frac,
                    identity_writers: d.identity_writers,
                };
                partition_feature_skew(&base, cfg, seed)?
            }
            Regime::Idx => {
                let images = d
                    .images
                    .as_ref()
                    .ok_or_else(|| Error::config("data.images", "required"))?;
                let labels = d
                    .labels
                    .as_ref()
                    .ok_or_else(|| Error::config("data.labels", "required"))?;
                let base = load_idx(images, labels)?;
                partition_label_skew(&base, n_agents, d.labels_per_agent.unwrap_or(1), d.test_frac, seed)?
            }
        };
        let dim = assignment.shards[0].train.dim();
        let classes = assignment.shards[0].train.n_classes();
        Ok((assignment.shards, dim, classes))
    }

    pub fn train_params(&self, algorithm: Algorithm) -> TrainParams {
        let tr = &self.train;
        TrainParams {
            lr: tr.lr_overrides.get(&algorithm).copied().unwrap_or(tr.lr),
            batch: tr.batch,
            steps_per_epoch: tr.steps_per_epoch,
            mu: tr.mu,
            tau: tr.tau.map_or(TauRule::QuarterDeg, TauConfig::rule),
            ft_epochs: tr.ft_epochs,
            rounds: self.rounds,
        }
    }

    /// A ready-to-step simulation of `algorithm` for one trial.
    pub fn build_simulation(&self, algorithm: Algorithm, trial_seed: u64) -> Result<Simulation> {
        let graph = self.build_graph()?;
        let mixing = self.build_mixing(&graph)?;
        let (shards, dim, classes) = self.build_shards(graph.n(), trial_seed)?;
        let mut sizes = vec![dim];
        sizes.extend(&self.model.hidden);
        sizes.push(classes);
        Simulation::new(SimulationSpec {
            algorithm,
            layout: ParamLayout::new(sizes)?,
            graph,
            mixing,
            shards,
            train: self.train_params(algorithm),
            seed: trial_seed,
        })
    }
}
