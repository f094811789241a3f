//! In-process synchronous message bus and the scalar-count ledger.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::sync::Mutex;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::ParamLayout;
use crate::protocols::Algorithm;
use crate::topology::Graph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadKind {
    Global,
    Head,
    Control,
}

impl PayloadKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PayloadKind::Global => "global",
            PayloadKind::Head => "head",
            PayloadKind::Control => "control",
        }
    }
}

/// Distinguishes logical streams that share a payload kind (e.g. model vs
/// tracker vectors in gradient tracking).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Channel {
    Model,
    Tracker,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub from: usize,
    pub kind: PayloadKind,
    pub channel: Channel,
    pub payload: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct EdgeCost {
    pub global: u64,
    pub head: u64,
    pub control: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct RoundCost {
    pub round: usize,
    pub global_scalars: u64,
    pub head_scalars: u64,
    pub control_messages: u64,
    /// Directed `(from, to)` breakdown.
    #[serde(skip)]
    pub per_edge: BTreeMap<(usize, usize), EdgeCost>,
}

impl RoundCost {
    /// Transmitted parameters; control notices are not parameters.
    pub fn scalars(&self) -> u64 {
        self.global_scalars + self.head_scalars
    }

    /// `(global, head)` scalars sent by `agent`.
    pub fn sent_by(&self, agent: usize) -> (u64, u64) {
        self.per_edge
            .range((agent, 0)..(agent + 1, 0))
            .fold((0, 0), |(g, h), (_, c)| (g + c.global, h + c.head))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct LedgerTotals {
    pub global_scalars: u64,
    pub head_scalars: u64,
    pub control_messages: u64,
}

impl LedgerTotals {
    pub fn scalars(&self) -> u64 {
        self.global_scalars + self.head_scalars
    }
}

#[derive(Debug, Clone, Default)]
pub struct CommLedger {
    rounds: Vec<RoundCost>,
    current: RoundCost,
}

impl CommLedger {
    fn record(&mut self, from: usize, to: usize, kind: PayloadKind, len: usize) {
        let edge = self.current.per_edge.entry((from, to)).or_default();
        match kind {
            PayloadKind::Global => {
                edge.global += len as u64;
                self.current.global_scalars += len as u64;
            }
            PayloadKind::Head => {
                edge.head += len as u64;
                self.current.head_scalars += len as u64;
            }
            PayloadKind::Control => {
                edge.control += 1;
                self.current.control_messages += 1;
            }
        }
    }

    fn close(&mut self, round: usize) -> RoundCost {
        let mut done = std::mem::take(&mut self.current);
        done.round = round;
        self.rounds.push(done.clone());
        done
    }

    pub fn rounds(&self) -> &[RoundCost] {
        &self.rounds
    }

    pub fn totals(&self) -> LedgerTotals {
        self.rounds.iter().fold(LedgerTotals::default(), |t, r| LedgerTotals {
            global_scalars: t.global_scalars + r.global_scalars,
            head_scalars: t.head_scalars + r.head_scalars,
            control_messages: t.control_messages + r.control_messages,
        })
    }

    /// Cumulative parameter scalars after each closed round.
    pub fn cumulative(&self) -> Vec<u64> {
        self.rounds
            .iter()
            .scan(0u64, |acc, r| {
                *acc += r.scalars();
                Some(*acc)
            })
            .collect()
    }

    /// `round,kind,scalars` rows; control rows count messages.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "round,kind,scalars")?;
        for r in &self.rounds {
            writeln!(out, "{},global,{}", r.round, r.global_scalars)?;
            writeln!(out, "{},head,{}", r.round, r.head_scalars)?;
            writeln!(out, "{},control,{}", r.round, r.control_messages)?;
        }
        Ok(())
    }
}

#[derive(Debug, Default)]
struct Pending {
    queue: Vec<(usize, Message)>,
    sent: usize,
}

/// Messages are queued on `send` and become visible only at `barrier`.
/// Sending is safe from several workers; delivery order is by sender id.
#[derive(Debug)]
pub struct Bus {
    graph: Graph,
    pending: Mutex<Pending>,
    ledger: Mutex<CommLedger>,
    delivered: Mutex<usize>,
}

pub type Mailboxes = Vec<Vec<Message>>;

impl Bus {
    pub fn new(graph: Graph) -> Self {
        Self {
            graph,
            pending: Mutex::new(Pending::default()),
            ledger: Mutex::new(CommLedger::default()),
            delivered: Mutex::new(0),
        }
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn send(&self, from: usize, to: usize, kind: PayloadKind, payload: Vec<f64>) -> Result<()> {
        self.send_on(from, to, kind, Channel::Model, payload)
    }

    pub fn send_on(
        &self,
        from: usize,
        to: usize,
        kind: PayloadKind,
        channel: Channel,
        payload: Vec<f64>,
    ) -> Result<()> {
        if !self.graph.has_edge(from, to) {
            return Err(Error::NonEdge { from, to });
        }
        self.ledger.lock().unwrap().record(from, to, kind, payload.len());
        let mut p = self.pending.lock().unwrap();
        p.sent += 1;
        p.queue.push((
            to,
            Message {
                from,
                kind,
                channel,
                payload,
            },
        ));
        Ok(())
    }

    /// Delivers everything queued so far, atomically.
    pub fn barrier(&self) -> Mailboxes {
        let queue = std::mem::take(&mut self.pending.lock().unwrap().queue);
        *self.delivered.lock().unwrap() += queue.len();
        let mut boxes: Mailboxes = vec![Vec::new(); self.graph.n()];
        for (to, msg) in queue {
            boxes[to].push(msg);
        }
        for b in &mut boxes {
            b.sort_by_key(|m| (m.from, m.channel, m.kind));
        }
        boxes
    }

    /// `(sent, delivered)` message counts since creation.
    pub fn message_counts(&self) -> (usize, usize) {
        (self.pending.lock().unwrap().sent, *self.delivered.lock().unwrap())
    }

    /// Closes the ledger's current round.
    pub fn finish_round(&self, round: usize) -> RoundCost {
        self.ledger.lock().unwrap().close(round)
    }

    pub fn ledger(&self) -> CommLedger {
        self.ledger.lock().unwrap().clone()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CostPrediction {
    pub global_scalars: u64,
    pub head_scalars: u64,
}

impl CostPrediction {
    pub fn scalars(&self) -> u64 {
        self.global_scalars + self.head_scalars
    }
}

/// Closed-form scalars per communication round. `active_out[i]` lists the
/// neighbors still receiving agent `i`'s head (CE-GATTA only). For
/// DSGD-FT this is the cost of a mixing round; fine-tuning rounds are free.
pub fn expected_cost_per_round(
    algorithm: Algorithm,
    graph: &Graph,
    layout: &ParamLayout,
    active_out: Option<&[BTreeSet<usize>]>,
) -> CostPrediction {
    let degree_sum: u64 = graph.degrees().iter().map(|&d| d as u64).sum();
    let n = graph.n() as u64;
    let (ng, f) = (layout.n_global() as u64, layout.head_len() as u64);
    let (global_scalars, head_scalars) = match algorithm {
        Algorithm::Dsgd | Algorithm::DsgdFt | Algorithm::Gatta => (degree_sum * ng, degree_sum * f),
        Algorithm::CeGatta => {
            let heads: u64 = match active_out {
                Some(sets) => sets.iter().map(|s| s.len() as u64).sum(),
                None => degree_sum,
            };
            (degree_sum * ng, heads * f)
        }
        Algorithm::RepDl => (degree_sum * ng, 0),
        Algorithm::GtDsgd => (2 * degree_sum * ng, 2 * degree_sum * f),
        Algorithm::Fl => (2 * n * ng, 2 * n * f),
        Algorithm::Il => (0, 0),
    };
    CostPrediction {
        global_scalars,
        head_scalars,
    }
}

/// Initial head exchange that seeds every agent's neighbor cache.
pub fn expected_bootstrap_cost(algorithm: Algorithm, graph: &Graph, layout: &ParamLayout) -> CostPrediction {
    let degree_sum: u64 = graph.degrees().iter().map(|&d| d as u64).sum();
    CostPrediction {
        global_scalars: 0,
        head_scalars: if algorithm.uses_attention() {
            degree_sum * layout.head_len() as u64
        } else {
            0
        },
    }
}

/// Parameters an agent updates per local step.
pub fn updated_params_per_agent(algorithm: Algorithm, layout: &ParamLayout) -> usize {
    match algorithm {
        Algorithm::Gatta | Algorithm::CeGatta => layout.total() + 2 * layout.head_len(),
        Algorithm::GtDsgd => 2 * layout.total(),
        _ => layout.total(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{complete, ring};

    #[test]
    fn send_counts_scalars_by_kind() {
        let bus = Bus::new(ring(4).unwrap());
        bus.send(0, 1, PayloadKind::Head, vec![0.0; 8]).unwrap();
        bus.send(0, 3, PayloadKind::Global, vec![0.0; 9]).unwrap();
        bus.send(2, 1, PayloadKind::Control, vec![]).unwrap();
        let cost = bus.finish_round(1);
        assert_eq!(cost.head_scalars, 8);
        assert_eq!(cost.global_scalars, 9);
        assert_eq!(cost.control_messages, 1);
        assert_eq!(cost.scalars(), 17);
        assert_eq!(cost.sent_by(0), (9, 8));
        assert_eq!(cost.sent_by(2), (0, 0));
    }

    #[test]
    fn non_edge_send_fails() {
        let bus = Bus::new(ring(4).unwrap());
        assert!(matches!(
            bus.send(0, 2, PayloadKind::Global, vec![1.0]),
            Err(Error::NonEdge { from: 0, to: 2 })
        ));
        assert!(bus.send(1, 1, PayloadKind::Global, vec![1.0]).is_err());
    }

    #[test]
    fn barrier_semantics() {
        let bus = Bus::new(complete(3).unwrap());
        assert!(bus.barrier().iter().all(Vec::is_empty));
        bus.send(2, 0, PayloadKind::Global, vec![2.0]).unwrap();
        bus.send(1, 0, PayloadKind::Global, vec![1.0]).unwrap();
        bus.send(0, 1, PayloadKind::Head, vec![0.5]).unwrap();
        let boxes = bus.barrier();
        assert_eq!(boxes[0].iter().map(|m| m.from).collect::<Vec<_>>(), vec![1, 2]);
        assert_eq!(boxes[1].len(), 1);
        assert!(bus.barrier().iter().all(Vec::is_empty));
        assert!(bus.barrier().iter().all(Vec::is_empty));
        let (sent, delivered) = bus.message_counts();
        assert_eq!(sent, delivered);
        assert_eq!(sent, 3);
    }

    #[test]
    fn ledger_totals_and_csv() {
        let bus = Bus::new(ring(3).unwrap());
        bus.send(0, 1, PayloadKind::Global, vec![0.0; 4]).unwrap();
        bus.finish_round(1);
        bus.send(1, 2, PayloadKind::Head, vec![0.0; 2]).unwrap();
        bus.finish_round(2);
        let ledger = bus.ledger();
        assert_eq!(ledger.cumulative(), vec![4, 6]);
        assert_eq!(ledger.totals().scalars(), 6);
        let mut out = Vec::new();
        ledger.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("round,kind,scalars\n1,global,4\n1,head,0\n1,control,0\n2,global,0"));
    }

    #[test]
    fn closed_forms() {
        let layout = ParamLayout::new(vec![2, 3, 2]).unwrap();
        let edge = complete(2).unwrap();
        assert_eq!(
            expected_cost_per_round(Algorithm::Dsgd, &edge, &layout, None).scalars(),
            2 * 17
        );
        let k3 = complete(3).unwrap();
        assert_eq!(
            expected_cost_per_round(Algorithm::Gatta, &k3, &layout, None).scalars(),
            102
        );
        assert_eq!(expected_cost_per_round(Algorithm::Il, &k3, &layout, None).scalars(), 0);
        let out = vec![BTreeSet::from([1]), BTreeSet::new(), BTreeSet::from([0, 1])];
        let ce = expected_cost_per_round(Algorithm::CeGatta, &k3, &layout, Some(&out));
        assert_eq!(ce.global_scalars, 6 * 9);
        assert_eq!(ce.head_scalars, 3 * 8);
    }

    #[test]
    fn gatta_updates_between_one_and_two_model_sizes() {
        let layout = ParamLayout::new(vec![20, 64, 6]).unwrap();
        let n = updated_params_per_agent(Algorithm::Gatta, &layout);
        assert_eq!(n, layout.total() + 2 * layout.head_len());
        assert!(layout.total() <= n && n <= 2 * layout.total());
    }
}
