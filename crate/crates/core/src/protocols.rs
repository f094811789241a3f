//! Round-level state transitions for GATTA, CE-GATTA and the baselines.
//!
//! Every round is: local epoch on each agent, message exchange through the
//! [`Bus`], then a barrier after which agents combine what they received.
//! Agents are processed in id order and own their RNG streams, so a run is a
//! pure function of its inputs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attention_coeffs, composed_loss_and_grad, fuse_head, mu_lower_bound, AttentionState, MuBound};
use crate::datagen::Shard;
use crate::error::{Error, Result};
use crate::netsim::{Bus, Channel, CommLedger, Mailboxes, Message, PayloadKind, RoundCost};
use crate::nn::{accuracy, init_params, loss, loss_and_grad, ParamLayout, ParamVector, RmsProp};
use crate::rng::{stream_rng, Stream};
use crate::theory::TraceSample;
use crate::topology::{star, Graph, MixingMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Gatta,
    CeGatta,
    Dsgd,
    Fl,
    Il,
    #[serde(rename = "repdl")]
    RepDl,
    DsgdFt,
    GtDsgd,
}

impl Algorithm {
    pub const ALL: [Algorithm; 8] = [
        Algorithm::Gatta,
        Algorithm::CeGatta,
        Algorithm::Dsgd,
        Algorithm::Fl,
        Algorithm::Il,
        Algorithm::RepDl,
        Algorithm::DsgdFt,
        Algorithm::GtDsgd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Gatta => "gatta",
            Algorithm::CeGatta => "ce_gatta",
            Algorithm::Dsgd => "dsgd",
            Algorithm::Fl => "fl",
            Algorithm::Il => "il",
            Algorithm::RepDl => "repdl",
            Algorithm::DsgdFt => "dsgd_ft",
            Algorithm::GtDsgd => "gt_dsgd",
        }
    }

    pub fn uses_attention(self) -> bool {
        matches!(self, Algorithm::Gatta | Algorithm::CeGatta)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown algorithm `{s}`")))
    }
}

/// Per-node CE-GATTA pruning threshold as a function of degree.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", content = "value", rename_all = "snake_case")]
pub enum TauRule {
    /// `1 / (4 d_i)`
    QuarterDeg,
    /// `1 / d_i`
    InvDeg,
    Fixed(f64),
}

impl TauRule {
    pub fn threshold(self, degree: usize) -> f64 {
        match self {
            TauRule::QuarterDeg => 1.0 / (4.0 * degree as f64),
            TauRule::InvDeg => 1.0 / degree as f64,
            TauRule::Fixed(v) => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainParams {
    pub lr: f64,
    pub batch: usize,
    /// Local SGD steps per round; `None` means one pass, `ceil(n_i / batch)`.
    pub steps_per_epoch: Option<usize>,
    pub mu: f64,
    pub tau: TauRule,
    /// Trailing fine-tune rounds for DSGD-FT.
    pub ft_epochs: usize,
    /// Planned round count; DSGD-FT mixes for `rounds - ft_epochs` of them.
    pub rounds: usize,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            lr: 0.01,
            batch: 32,
            steps_per_epoch: None,
            mu: 0.9,
            tau: TauRule::QuarterDeg,
            ft_epochs: 5,
            rounds: 100,
        }
    }
}

/// Running checks over every attention evaluation of an agent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaStats {
    pub calls: u64,
    /// Largest `|sum_j alpha_ij - 1|` seen.
    pub max_sum_error: f64,
    pub min_alpha: f64,
}

impl Default for AlphaStats {
    fn default() -> Self {
        Self {
            calls: 0,
            max_sum_error: 0.0,
            min_alpha: f64::INFINITY,
        }
    }
}

impl AlphaStats {
    fn observe(&mut self, alphas: &[f64]) {
        self.calls += 1;
        let sum: f64 = alphas.iter().sum();
        self.max_sum_error = self.max_sum_error.max((sum - 1.0).abs());
        self.min_alpha = alphas.iter().copied().fold(self.min_alpha, f64::min);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerState {
    pub y: Vec<f64>,
    pub last_grad: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Agent {
    pub id: usize,
    pub neighbors: Vec<usize>,
    /// `w_g` followed by the current head `w_ns`.
    pub params: ParamVector,
    /// `beta`, `w_lu`, cached heads and `mu`.
    pub attention: AttentionState,
    /// `N_{c,i}`: neighbors whose heads this agent still receives.
    pub active_in: BTreeSet<usize>,
    /// Neighbors that still want this agent's head.
    pub active_out: BTreeSet<usize>,
    pub opt_global: RmsProp,
    /// Serves `w_lu` under attention, the plain head otherwise.
    pub opt_head: RmsProp,
    pub opt_beta: RmsProp,
    pub last_alphas: BTreeMap<usize, f64>,
    pub alpha_stats: AlphaStats,
    pub tracker: Option<TrackerState>,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl Agent {
    fn new(id: usize, neighbors: Vec<usize>, layout: &ParamLayout, mu: f64, seed: u64) -> Self {
        let mut init = stream_rng(seed, Stream::Init, id as u64);
        let params = init_params(layout, &mut init);
        let f = layout.head_len();
        let mut att_rng = stream_rng(seed, Stream::Attention, id as u64);
        let beta = (0..2 * f).map(|_| att_rng.random_range(-0.1..0.1)).collect();
        let attention = AttentionState {
            beta,
            w_lu: params.head().to_vec(),
            own_prev_head: params.head().to_vec(),
            neighbor_heads: BTreeMap::new(),
            mu,
        };
        let all: BTreeSet<usize> = neighbors.iter().copied().collect();
        Self {
            id,
            neighbors,
            params,
            attention,
            active_in: all.clone(),
            active_out: all,
            opt_global: RmsProp::new(layout.n_global()),
            opt_head: RmsProp::new(f),
            opt_beta: RmsProp::new(2 * f),
            last_alphas: BTreeMap::new(),
            alpha_stats: AlphaStats::default(),
            tracker: None,
            rng: stream_rng(seed, Stream::Shuffle, id as u64),
            order: Vec::new(),
            cursor: 0,
        }
    }

    fn start_epoch(&mut self, n: usize) {
        self.order = (0..n).collect();
        self.order.shuffle(&mut self.rng);
        self.cursor = 0;
    }

    fn next_batch(&mut self, batch: usize) -> Vec<usize> {
        if self.cursor >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let end = (self.cursor + batch).min(self.order.len());
        let b = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        b
    }

    /// Number of trainable scalars this agent updates per local step.
    pub fn trainable_len(&self, algorithm: Algorithm) -> usize {
        match algorithm {
            Algorithm::Gatta | Algorithm::CeGatta => self.opt_global.len() + self.opt_head.len() + self.opt_beta.len(),
            Algorithm::GtDsgd => 2 * self.params.len(),
            _ => self.opt_global.len() + self.opt_head.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgentMetrics {
    pub round: usize,
    pub agent: usize,
    pub train_loss: f64,
    pub test_acc: f64,
    pub comm_global: u64,
    pub comm_head: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlphaRecord {
    pub round: usize,
    pub i: usize,
    pub j: usize,
    pub alpha: f64,
}

#[derive(Debug, Clone)]
pub struct RoundReport {
    pub round: usize,
    pub metrics: Vec<AgentMetrics>,
    pub cost: RoundCost,
    pub alphas: Vec<AlphaRecord>,
}

impl RoundReport {
    pub fn mean_test_accuracy(&self) -> f64 {
        self.metrics.iter().map(|m| m.test_acc).sum::<f64>() / self.metrics.len() as f64
    }
}

/// Source of full local gradients for gradient tracking. The default
/// evaluates the network on the whole training shard.
pub trait GradientOracle {
    /// Returns `(loss, gradient over the flat parameter vector)`.
    fn evaluate(&mut self, agent: usize, params: &ParamVector) -> Result<(f64, Vec<f64>)>;
}

struct ShardOracle<'a> {
    layout: &'a ParamLayout,
    shards: &'a [Shard],
}

impl GradientOracle for ShardOracle<'_> {
    fn evaluate(&mut self, agent: usize, params: &ParamVector) -> Result<(f64, Vec<f64>)> {
        let data = &self.shards[agent].train;
        let all: Vec<usize> = (0..data.len()).collect();
        let (l, g) = loss_and_grad(self.layout, params.global(), params.head(), data, &all)?;
        let mut flat = g.global;
        flat.extend(g.head);
        Ok((l, flat))
    }
}

pub struct SimulationSpec {
    pub algorithm: Algorithm,
    pub layout: ParamLayout,
    pub graph: Graph,
    pub mixing: MixingMatrix,
    pub shards: Vec<Shard>,
    pub train: TrainParams,
    pub seed: u64,
}

pub struct Simulation {
    algorithm: Algorithm,
    layout: ParamLayout,
    graph: Graph,
    mixing: MixingMatrix,
    shards: Vec<Shard>,
    train: TrainParams,
    agents: Vec<Agent>,
    bus: Bus,
    round: usize,
    seed: u64,
    oracle: Option<Box<dyn GradientOracle>>,
}

impl fmt::Debug for Simulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Simulation")
            .field("algorithm", &self.algorithm)
            .field("agents", &self.agents.len())
            .field("round", &self.round)
            .finish()
    }
}

fn axpy(out: &mut [f64], a: f64, x: &[f64]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

impl Simulation {
    pub fn new(spec: SimulationSpec) -> Result<Self> {
        let SimulationSpec {
            algorithm,
            layout,
            graph,
            mixing,
            shards,
            train,
            seed,
        } = spec;
        let n = graph.n();
        if shards.len() != n {
            return Err(Error::Dimension {
                what: "shards per agent",
                expected: n,
                got: shards.len(),
            });
        }
        if mixing.n() != n {
            return Err(Error::Dimension {
                what: "mixing matrix size",
                expected: n,
                got: mixing.n(),
            });
        }
        for i in 0..n {
            for j in 0..n {
                if i != j && mixing.weight(i, j) != 0.0 && !graph.has_edge(i, j) {
                    return Err(Error::NonEdge { from: j, to: i });
                }
            }
        }
        for (i, s) in shards.iter().enumerate() {
            if s.train.is_empty() {
                return Err(Error::EmptyShard(i));
            }
            if s.train.dim() != layout.input_dim() {
                return Err(Error::Dimension {
                    what: "shard features",
                    expected: layout.input_dim(),
                    got: s.train.dim(),
                });
            }
        }
        if !(0.0..=1.0).contains(&train.mu) {
            return Err(Error::invalid(format!("mu = {} outside [0, 1]", train.mu)));
        }
        if train.batch == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        let bus = if algorithm == Algorithm::Fl {
            Bus::new(star(n + 1, n)?)
        } else {
            Bus::new(graph.clone())
        };
        let agents = (0..n)
            .map(|i| Agent::new(i, graph.neighbors(i), &layout, train.mu, seed))
            .collect();
        let mut sim = Self {
            algorithm,
            layout,
            graph,
            mixing,
            shards,
            train,
            agents,
            bus,
            round: 0,
            seed,
            oracle: None,
        };
        if algorithm.uses_attention() {
            sim.bootstrap_heads()?;
            for (i, b) in sim.mu_bounds()?.into_iter().enumerate() {
                if sim.train.mu < b.bound {
                    log::debug!("agent {i}: mu = {} below its lower bound {:.4}", sim.train.mu, b.bound);
                }
            }
        }
        if algorithm == Algorithm::GtDsgd {
            sim.init_trackers()?;
        }
        Ok(sim)
    }

    /// Replaces the network gradient used by gradient tracking and
    /// re-initializes the trackers with it.
    pub fn set_gradient_oracle(&mut self, oracle: Box<dyn GradientOracle>) -> Result<()> {
        self.oracle = Some(oracle);
        if self.algorithm == Algorithm::GtDsgd {
            self.init_trackers()?;
        }
        Ok(())
    }

    pub fn algorithm(&self) -> Algorithm {
        self.algorithm
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn mixing(&self) -> &MixingMatrix {
        &self.mixing
    }

    pub fn shards(&self) -> &[Shard] {
        &self.shards
    }

    pub fn train_params(&self) -> &TrainParams {
        &self.train
    }

    pub fn agents(&self) -> &[Agent] {
        &self.agents
    }

    pub fn agents_mut(&mut self) -> &mut [Agent] {
        &mut self.agents
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn ledger(&self) -> CommLedger {
        self.bus.ledger()
    }

    pub fn bus(&self) -> &Bus {
        &self.bus
    }

    pub fn steps_per_epoch(&self, agent: usize) -> usize {
        self.train
            .steps_per_epoch
            .unwrap_or_else(|| self.shards[agent].train.len().div_ceil(self.train.batch))
    }

    pub fn mean_test_accuracy(&self) -> f64 {
        let total: f64 = (0..self.agents.len()).map(|i| self.test_accuracy(i)).sum();
        total / self.agents.len() as f64
    }

    pub fn test_accuracy(&self, i: usize) -> f64 {
        let p = &self.agents[i].params;
        accuracy(&self.layout, p.global(), p.head(), &self.shards[i].test)
    }

    /// `max_i |w_{i,g} - mean_g|`.
    pub fn consensus_error(&self) -> f64 {
        let n = self.agents.len() as f64;
        let mut mean = vec![0.0; self.layout.n_global()];
        for a in &self.agents {
            axpy(&mut mean, 1.0 / n, a.params.global());
        }
        self.agents
            .iter()
            .map(|a| {
                a.params
                    .global()
                    .iter()
                    .zip(&mean)
                    .map(|(x, m)| (x - m).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max)
    }

    /// Fusion-parameter lower bound of every agent at its current state.
    /// Empty for algorithms without attention.
    pub fn mu_bounds(&self) -> Result<Vec<MuBound>> {
        if !self.algorithm.uses_attention() {
            return Ok(Vec::new());
        }
        self.agents
            .iter()
            .map(|a| {
                let active: Vec<usize> = a.active_in.iter().copied().collect();
                mu_lower_bound(&a.attention, &active)
            })
            .collect()
    }

    /// Sum of trackers and sum of latest local gradients (equal under exact
    /// gradient tracking).
    pub fn tracker_sums(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        let len = self.layout.total();
        let mut ys = vec![0.0; len];
        let mut gs = vec![0.0; len];
        for a in &self.agents {
            let t = a.tracker.as_ref()?;
            axpy(&mut ys, 1.0, &t.y);
            axpy(&mut gs, 1.0, &t.last_grad);
        }
        Some((ys, gs))
    }

    /// Gradients at the current state for constant estimation. Uses its own
    /// RNG stream so probing never perturbs training.
    pub fn trace_sample(&self, minibatches: usize) -> Result<TraceSample> {
        let mut rng = stream_rng(self.seed, Stream::Probe, self.round as u64);
        let n = self.agents.len() as f64;
        let mut mean_global = vec![0.0; self.layout.n_global()];
        for a in &self.agents {
            axpy(&mut mean_global, 1.0 / n, a.params.global());
        }
        let mut sample = TraceSample::default();
        for (a, shard) in self.agents.iter().zip(&self.shards) {
            let data = &shard.train;
            let all: Vec<usize> = (0..data.len()).collect();
            let (_, full) = loss_and_grad(&self.layout, a.params.global(), a.params.head(), data, &all)?;
            let mut mbs = Vec::with_capacity(minibatches);
            for _ in 0..minibatches {
                let mut idx = all.clone();
                idx.shuffle(&mut rng);
                idx.truncate(self.train.batch.min(data.len()));
                let (_, g) = loss_and_grad(&self.layout, a.params.global(), a.params.head(), data, &idx)?;
                let mut flat = g.global;
                flat.extend(g.head);
                mbs.push(flat);
            }
            let (_, at_mean) = loss_and_grad(&self.layout, &mean_global, a.params.head(), data, &all)?;
            let mut flat = full.global;
            flat.extend(full.head);
            sample.points.push(a.params.as_slice().to_vec());
            sample.full_grads.push(flat);
            sample.minibatch_grads.push(mbs);
            sample.grads_at_mean.push(at_mean.global);
        }
        Ok(sample)
    }

    fn bootstrap_heads(&mut self) -> Result<()> {
        for a in &self.agents {
            for &j in &a.neighbors {
                self.bus.send(a.id, j, PayloadKind::Head, a.params.head().to_vec())?;
            }
        }
        let boxes = self.bus.barrier();
        for (a, inbox) in self.agents.iter_mut().zip(boxes) {
            for m in inbox {
                a.attention.neighbor_heads.insert(m.from, m.payload);
            }
        }
        self.bus.finish_round(0);
        Ok(())
    }

    fn init_trackers(&mut self) -> Result<()> {
        let grads = self.evaluate_all()?;
        for (a, (_, g)) in self.agents.iter_mut().zip(grads) {
            a.tracker = Some(TrackerState {
                y: g.clone(),
                last_grad: g,
            });
        }
        Ok(())
    }

    fn evaluate_all(&mut self) -> Result<Vec<(f64, Vec<f64>)>> {
        let mut out = Vec::with_capacity(self.agents.len());
        match self.oracle.as_mut() {
            Some(oracle) => {
                for a in &self.agents {
                    out.push(oracle.evaluate(a.id, &a.params)?);
                }
            }
            None => {
                let mut oracle = ShardOracle {
                    layout: &self.layout,
                    shards: &self.shards,
                };
                for a in &self.agents {
                    out.push(oracle.evaluate(a.id, &a.params)?);
                }
            }
        }
        Ok(out)
    }

    /// Runs one round of the configured algorithm.
    pub fn step(&mut self) -> Result<RoundReport> {
        match self.algorithm {
            Algorithm::Gatta => self.round_gatta(),
            Algorithm::CeGatta => self.round_ce_gatta(),
            Algorithm::Dsgd => self.round_dsgd(),
            Algorithm::Fl => self.round_fl(),
            Algorithm::Il => self.round_il(),
            Algorithm::RepDl => self.round_repdl(),
            Algorithm::DsgdFt => {
                let mixing_rounds = self.train.rounds.saturating_sub(self.train.ft_epochs);
                if self.round < mixing_rounds {
                    self.round_dsgd()
                } else {
                    self.round_il()
                }
            }
            Algorithm::GtDsgd => self.round_gt_dsgd(),
        }
    }

    /// D-SGD for `rounds`, then `ft_epochs` rounds of purely local training.
    pub fn run_dsgd_ft(&mut self, rounds: usize, ft_epochs: usize) -> Result<Vec<RoundReport>> {
        let mut reports = Vec::with_capacity(rounds + ft_epochs);
        for _ in 0..rounds {
            reports.push(self.round_dsgd()?);
        }
        for _ in 0..ft_epochs {
            reports.push(self.round_il()?);
        }
        Ok(reports)
    }

    /// Local epoch on the full parameter vector; returns the mean batch loss.
    fn plain_epoch(&mut self, i: usize) -> Result<f64> {
        let steps = self.steps_per_epoch(i);
        let (lr, batch) = (self.train.lr, self.train.batch);
        let data = &self.shards[i].train;
        let agent = &mut self.agents[i];
        if steps == 0 {
            let all: Vec<usize> = (0..data.len()).collect();
            return loss(&self.layout, agent.params.global(), agent.params.head(), data, &all);
        }
        agent.start_epoch(data.len());
        let mut total = 0.0;
        for _ in 0..steps {
            let b = agent.next_batch(batch);
            let (l, g) = loss_and_grad(&self.layout, agent.params.global(), agent.params.head(), data, &b)?;
            let (global, head) = agent.params.split_mut();
            agent.opt_global.step(global, &g.global, lr);
            agent.opt_head.step(head, &g.head, lr);
            total += l;
        }
        Ok(total / steps as f64)
    }

    /// Local epoch through the attention-fused head, then finalizes
    /// `w_ns` from the epoch's `beta` and `w_lu`.
    pub fn local_epoch_gatta(&mut self, i: usize) -> Result<f64> {
        let steps = self.steps_per_epoch(i);
        let (lr, batch) = (self.train.lr, self.train.batch);
        let data = &self.shards[i].train;
        let agent = &mut self.agents[i];
        let active: Vec<usize> = agent.active_in.iter().copied().collect();
        let mut total = 0.0;
        if steps > 0 {
            agent.start_epoch(data.len());
        }
        for _ in 0..steps {
            let b = agent.next_batch(batch);
            let cg = composed_loss_and_grad(&self.layout, agent.params.global(), &agent.attention, &active, data, &b)?;
            agent.opt_global.step(agent.params.global_mut(), &cg.grad_global, lr);
            agent.opt_head.step(&mut agent.attention.w_lu, &cg.grad_wlu, lr);
            agent.opt_beta.step(&mut agent.attention.beta, &cg.grad_beta, lr);
            agent.alpha_stats.observe(&cg.cache.alphas);
            total += cg.loss;
        }
        let cache = attention_coeffs(&agent.attention, &active)?;
        let head = fuse_head(&agent.attention, &cache);
        agent.alpha_stats.observe(&cache.alphas);
        agent.params.head_mut().copy_from_slice(&head);
        agent.last_alphas = cache.alpha_map();
        if steps == 0 {
            let all: Vec<usize> = (0..data.len()).collect();
            return loss(&self.layout, agent.params.global(), agent.params.head(), data, &all);
        }
        Ok(total / steps as f64)
    }

    /// `sum_j W(i,j) v_j` over `N_i ∪ {i}` in increasing `j`, reading
    /// neighbor vectors from the mailbox.
    fn mix_received(
        &self,
        i: usize,
        own: &[f64],
        inbox: &[Message],
        kind: PayloadKind,
        channel: Channel,
    ) -> Result<Vec<f64>> {
        let mut out = vec![0.0; own.len()];
        for j in 0..self.agents.len() {
            let w = self.mixing.weight(i, j);
            if w == 0.0 {
                continue;
            }
            let v = if j == i {
                own
            } else {
                inbox
                    .iter()
                    .find(|m| m.from == j && m.kind == kind && m.channel == channel)
                    .map(|m| m.payload.as_slice())
                    .ok_or_else(|| Error::invalid(format!("agent {i} missing {} from {j}", kind.as_str())))?
            };
            axpy(&mut out, w, v);
        }
        Ok(out)
    }

    fn send_to_neighbors(&self, i: usize, kind: PayloadKind, channel: Channel, payload: &[f64]) -> Result<()> {
        for &j in &self.agents[i].neighbors {
            self.bus.send_on(i, j, kind, channel, payload.to_vec())?;
        }
        Ok(())
    }

    fn finish(&mut self, losses: Vec<f64>, alphas: Vec<AlphaRecord>) -> RoundReport {
        let cost = self.bus.finish_round(self.round);
        let metrics = losses
            .into_iter()
            .enumerate()
            .map(|(i, train_loss)| {
                let (comm_global, comm_head) = cost.sent_by(i);
                AgentMetrics {
                    round: self.round,
                    agent: i,
                    train_loss,
                    test_acc: self.test_accuracy(i),
                    comm_global,
                    comm_head,
                }
            })
            .collect();
        RoundReport {
            round: self.round,
            metrics,
            cost,
            alphas,
        }
    }

    pub fn round_gatta(&mut self) -> Result<RoundReport> {
        self.attention_round(None)
    }

    pub fn round_ce_gatta(&mut self) -> Result<RoundReport> {
        let tau = self.train.tau;
        self.attention_round(Some(tau))
    }

    fn attention_round(&mut self, prune: Option<TauRule>) -> Result<RoundReport> {
        self.round += 1;
        let n = self.agents.len();
        let mut losses = Vec::with_capacity(n);
        for i in 0..n {
            losses.push(self.local_epoch_gatta(i)?);
        }
        let round = self.round;
        let alphas: Vec<AlphaRecord> = self
            .agents
            .iter()
            .flat_map(|a| {
                a.last_alphas.iter().map(move |(&j, &alpha)| AlphaRecord {
                    round,
                    i: a.id,
                    j,
                    alpha,
                })
            })
            .collect();

        if let Some(rule) = prune {
            for a in &mut self.agents {
                let tau = rule.threshold(a.neighbors.len());
                let kept: BTreeSet<usize> = a
                    .active_in
                    .iter()
                    .copied()
                    .filter(|j| a.last_alphas.get(j).is_some_and(|&alpha| alpha >= tau))
                    .collect();
                if kept.is_empty() {
                    continue;
                }
                for &j in a.active_in.difference(&kept) {
                    self.bus.send(a.id, j, PayloadKind::Control, Vec::new())?;
                }
                a.active_in = kept;
            }
            let boxes = self.bus.barrier();
            for (a, inbox) in self.agents.iter_mut().zip(boxes) {
                for m in inbox.iter().filter(|m| m.kind == PayloadKind::Control) {
                    a.active_out.remove(&m.from);
                }
            }
        }

        for i in 0..n {
            let a = &self.agents[i];
            for &j in &a.neighbors {
                self.bus.send(i, j, PayloadKind::Global, a.params.global().to_vec())?;
                if a.active_out.contains(&j) {
                    self.bus.send(i, j, PayloadKind::Head, a.params.head().to_vec())?;
                }
            }
        }
        let boxes = self.bus.barrier();
        self.apply_global_mixing(&boxes)?;
        for (a, inbox) in self.agents.iter_mut().zip(boxes) {
            for m in inbox.into_iter().filter(|m| m.kind == PayloadKind::Head) {
                a.attention.neighbor_heads.insert(m.from, m.payload);
            }
            a.attention.own_prev_head = a.params.head().to_vec();
        }
        Ok(self.finish(losses, alphas))
    }

    fn apply_global_mixing(&mut self, boxes: &Mailboxes) -> Result<()> {
        let mixed = (0..self.agents.len())
            .map(|i| {
                self.mix_received(
                    i,
                    self.agents[i].params.global(),
                    &boxes[i],
                    PayloadKind::Global,
                    Channel::Model,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        for (a, g) in self.agents.iter_mut().zip(mixed) {
            a.params.global_mut().copy_from_slice(&g);
        }
        Ok(())
    }

    pub fn round_dsgd(&mut self) -> Result<RoundReport> {
        self.round += 1;
        let n = self.agents.len();
        let mut losses = Vec::with_capacity(n);
        for i in 0..n {
            losses.push(self.plain_epoch(i)?);
        }
        for i in 0..n {
            let p = &self.agents[i].params;
            self.send_to_neighbors(i, PayloadKind::Global, Channel::Model, p.global())?;
            self.send_to_neighbors(i, PayloadKind::Head, Channel::Model, p.head())?;
        }
        let boxes = self.bus.barrier();
        let heads = (0..n)
            .map(|i| {
                self.mix_received(
                    i,
                    self.agents[i].params.head(),
                    &boxes[i],
                    PayloadKind::Head,
                    Channel::Model,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        self.apply_global_mixing(&boxes)?;
        for (a, h) in self.agents.iter_mut().zip(heads) {
            a.params.head_mut().copy_from_slice(&h);
        }
        Ok(self.finish(losses, Vec::new()))
    }

    pub fn round_repdl(&mut self) -> Result<RoundReport> {
        self.round += 1;
        let n = self.agents.len();
        let mut losses = Vec::with_capacity(n);
        for i in 0..n {
            losses.push(self.plain_epoch(i)?);
        }
        for i in 0..n {
            self.send_to_neighbors(i, PayloadKind::Global, Channel::Model, self.agents[i].params.global())?;
        }
        let boxes = self.bus.barrier();
        self.apply_global_mixing(&boxes)?;
        Ok(self.finish(losses, Vec::new()))
    }

    pub fn round_il(&mut self) -> Result<RoundReport> {
        self.round += 1;
        let n = self.agents.len();
        let mut losses = Vec::with_capacity(n);
        for i in 0..n {
            losses.push(self.plain_epoch(i)?);
        }
        Ok(self.finish(losses, Vec::new()))
    }

    /// FedAvg: local epochs, upload to the server node, `n_i`-weighted
    /// average, broadcast.
    pub fn round_fl(&mut self) -> Result<RoundReport> {
        self.round += 1;
        let n = self.agents.len();
        let server = n;
        let mut losses = Vec::with_capacity(n);
        for i in 0..n {
            losses.push(self.plain_epoch(i)?);
        }
        for (i, a) in self.agents.iter().enumerate() {
            self.bus
                .send(i, server, PayloadKind::Global, a.params.global().to_vec())?;
            self.bus.send(i, server, PayloadKind::Head, a.params.head().to_vec())?;
        }
        let boxes = self.bus.barrier();
        let total: usize = self.shards.iter().map(|s| s.train.len()).sum();
        let mut global = vec![0.0; self.layout.n_global()];
        let mut head = vec![0.0; self.layout.head_len()];
        for m in &boxes[server] {
            let w = self.shards[m.from].train.len() as f64 / total as f64;
            match m.kind {
                PayloadKind::Global => axpy(&mut global, w, &m.payload),
                PayloadKind::Head => axpy(&mut head, w, &m.payload),
                PayloadKind::Control => {}
            }
        }
        for i in 0..n {
            self.bus.send(server, i, PayloadKind::Global, global.clone())?;
            self.bus.send(server, i, PayloadKind::Head, head.clone())?;
        }
        let boxes = self.bus.barrier();
        for (a, inbox) in self.agents.iter_mut().zip(boxes) {
            for m in inbox {
                match m.kind {
                    PayloadKind::Global => a.params.global_mut().copy_from_slice(&m.payload),
                    PayloadKind::Head => a.params.head_mut().copy_from_slice(&m.payload),
                    PayloadKind::Control => {}
                }
            }
        }
        Ok(self.finish(losses, Vec::new()))
    }

    /// Step size of gradient tracking at round `k`.
    pub fn gt_step_size(k: usize) -> f64 {
        1.0 / (10.0 + (k as f64).sqrt())
    }

    /// `x_i <- sum_j W(i,j) (x_j - eta_k y_j)`,
    /// `y_i <- sum_j W(i,j) y_j + g_i(x_i^new) - g_i(x_i^old)`.
    pub fn round_gt_dsgd(&mut self) -> Result<RoundReport> {
        self.round += 1;
        let n = self.agents.len();
        let eta = Self::gt_step_size(self.round);
        let ng = self.layout.n_global();
        let mut outgoing = Vec::with_capacity(n);
        for a in &self.agents {
            let t = a.tracker.as_ref().expect("trackers initialized");
            let x: Vec<f64> = a.params.as_slice().iter().zip(&t.y).map(|(x, y)| x - eta * y).collect();
            outgoing.push((x, t.y.clone()));
        }
        for (i, (x, y)) in outgoing.iter().enumerate() {
            self.send_to_neighbors(i, PayloadKind::Global, Channel::Model, &x[..ng])?;
            self.send_to_neighbors(i, PayloadKind::Head, Channel::Model, &x[ng..])?;
            self.send_to_neighbors(i, PayloadKind::Global, Channel::Tracker, &y[..ng])?;
            self.send_to_neighbors(i, PayloadKind::Head, Channel::Tracker, &y[ng..])?;
        }
        let boxes = self.bus.barrier();
        let mut mixed = Vec::with_capacity(n);
        for i in 0..n {
            let (x, y) = &outgoing[i];
            let mut xg = self.mix_received(i, &x[..ng], &boxes[i], PayloadKind::Global, Channel::Model)?;
            xg.extend(self.mix_received(i, &x[ng..], &boxes[i], PayloadKind::Head, Channel::Model)?);
            let mut yg = self.mix_received(i, &y[..ng], &boxes[i], PayloadKind::Global, Channel::Tracker)?;
            yg.extend(self.mix_received(i, &y[ng..], &boxes[i], PayloadKind::Head, Channel::Tracker)?);
            mixed.push((xg, yg));
        }
        for (a, (x, _)) in self.agents.iter_mut().zip(&mixed) {
            a.params.as_mut_slice().copy_from_slice(x);
        }
        let evals = self.evaluate_all()?;
        let mut losses = Vec::with_capacity(n);
        for (a, ((_, y_mix), (l, g))) in self.agents.iter_mut().zip(mixed.into_iter().zip(evals)) {
            let t = a.tracker.as_mut().expect("trackers initialized");
            t.y = y_mix
                .iter()
                .zip(&g)
                .zip(&t.last_grad)
                .map(|((y, gn), go)| y + gn - go)
                .collect();
            t.last_grad = g;
            losses.push(l);
        }
        Ok(self.finish(losses, Vec::new()))
    }
}
