//! Browser bindings. Every operation takes and returns JSON strings so the
//! page needs no generated glue beyond what wasm-bindgen emits. The plain
//! `*_json` functions are the same operations for native callers.

use std::collections::BTreeMap;

use gatta_core::attention::{attention_coeffs, fuse_head, AttentionState};
use gatta_core::harness::config::ExperimentConfig;
use gatta_core::protocols::Algorithm;
use gatta_core::rng::{stream_rng, Stream};
use gatta_core::topology::{erdos_renyi, MixingMatrix};
use rand::Rng;
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

type Out = Result<String, String>;

fn parse<'a, T: Deserialize<'a>>(text: &'a str) -> Result<T, String> {
    serde_json::from_str(text).map_err(|e| format!("bad input: {e}"))
}

fn emit<T: Serialize>(value: &T) -> Out {
    serde_json::to_string(value).map_err(|e| e.to_string())
}

#[derive(Deserialize)]
struct AttentionInput {
    own: Vec<f64>,
    neighbors: Vec<Vec<f64>>,
    beta: Vec<f64>,
    mu: f64,
    /// Defaults to `own`.
    w_lu: Option<Vec<f64>>,
}

#[derive(Serialize)]
struct AttentionOutput {
    alphas: Vec<f64>,
    scores: Vec<f64>,
    fused: Vec<f64>,
}

/// Attention weights and fused head for one agent and explicit neighbor heads.
pub fn attention_json(input: &str) -> Out {
    let inp: AttentionInput = parse(input)?;
    let state = AttentionState {
        beta: inp.beta,
        w_lu: inp.w_lu.unwrap_or_else(|| inp.own.clone()),
        own_prev_head: inp.own,
        neighbor_heads: inp.neighbors.into_iter().enumerate().collect::<BTreeMap<_, _>>(),
        mu: inp.mu,
    };
    let active: Vec<usize> = state.neighbor_heads.keys().copied().collect();
    let cache = attention_coeffs(&state, &active).map_err(|e| e.to_string())?;
    emit(&AttentionOutput {
        fused: fuse_head(&state, &cache),
        alphas: cache.alphas,
        scores: cache.scores,
    })
}

#[derive(Deserialize)]
struct ConsensusInput {
    n: usize,
    p: f64,
    seed: u64,
    rounds: usize,
    #[serde(default = "yes")]
    lazy: bool,
}

fn yes() -> bool {
    true
}

#[derive(Serialize)]
struct ConsensusOutput {
    edges: Vec<(usize, usize)>,
    rho: f64,
    spectral_gap: f64,
    /// Distance to the mean after each round, starting at round 0.
    errors: Vec<f64>,
    /// `rho^k * errors[0]`, the worst-case envelope.
    envelope: Vec<f64>,
}

/// Gossip averaging of random scalars on an Erdos-Renyi graph.
pub fn consensus_json(input: &str) -> Out {
    let inp: ConsensusInput = parse(input)?;
    let graph = erdos_renyi(inp.n, inp.p, inp.seed).map_err(|e| e.to_string())?;
    let mixing = MixingMatrix::metropolis(&graph, inp.lazy).map_err(|e| e.to_string())?;
    let mut rng = stream_rng(inp.seed, Stream::Init, 0);
    let mut x: Vec<Vec<f64>> = (0..inp.n).map(|_| vec![rng.random_range(-1.0..1.0)]).collect();
    let mean = x.iter().map(|v| v[0]).sum::<f64>() / inp.n as f64;
    let dist = |x: &[Vec<f64>]| x.iter().map(|v| (v[0] - mean).powi(2)).sum::<f64>().sqrt();
    let mut errors = vec![dist(&x)];
    for _ in 0..inp.rounds {
        x = mixing.mix_all(&x);
        errors.push(dist(&x));
    }
    let rho = mixing.rho();
    emit(&ConsensusOutput {
        edges: graph.edges(),
        rho,
        spectral_gap: mixing.spectral_gap(),
        envelope: (0..=inp.rounds).map(|k| errors[0] * rho.powi(k as i32)).collect(),
        errors,
    })
}

#[derive(Serialize)]
struct RaceLane {
    algorithm: Algorithm,
    accuracy: Vec<f64>,
    /// Cumulative scalars sent, bootstrap included.
    scalars: Vec<u64>,
}

/// Trains every algorithm listed in an experiment config (JSON form) for its
/// `rounds` and returns mean test accuracy and cumulative cost per round.
pub fn race_json(config: &str) -> Out {
    let cfg = ExperimentConfig::from_json(config).map_err(|e| e.to_string())?;
    cfg.validate().map_err(|e| e.to_string())?;
    let seed = cfg.trial_seed(cfg.seed, 0);
    let mut lanes = Vec::new();
    for algorithm in cfg.algorithm_list() {
        let mut sim = cfg.build_simulation(algorithm, seed).map_err(|e| e.to_string())?;
        let mut lane = RaceLane {
            algorithm,
            accuracy: Vec::with_capacity(cfg.rounds),
            scalars: Vec::with_capacity(cfg.rounds),
        };
        for _ in 0..cfg.rounds {
            let report = sim.step().map_err(|e| e.to_string())?;
            lane.accuracy.push(report.mean_test_accuracy());
            lane.scalars.push(sim.ledger().totals().scalars());
        }
        lanes.push(lane);
    }
    emit(&lanes)
}

fn js(r: Out) -> Result<String, JsError> {
    r.map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn attention(input: &str) -> Result<String, JsError> {
    js(attention_json(input))
}

#[wasm_bindgen]
pub fn consensus(input: &str) -> Result<String, JsError> {
    js(consensus_json(input))
}

#[wasm_bindgen]
pub fn race(config: &str) -> Result<String, JsError> {
    js(race_json(config))
}
