//! Generation-by-generation execution of an application over a tree, with
//! per-generation barriers, failure injection and symbol metering.
//!
//! Every generation, sources fire first; their messages enter a pending set
//! that is delivered in a seeded random order. A node fires once the
//! messages of all children that fire in that generation are buffered.
//! Atomic nodes picked by the dropout model neither fire nor forward, so
//! their subtree is silent for that generation.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::afc::{eval_dafc, AfcError, AtomicFunctionSpec, Packet};
use crate::field::{Field, FieldError, FieldSpec};
use crate::graph::{GraphError, NfcGraph, NodeId, NodeRole};
use crate::learning::{
    consensus_step, log_loss, separable_dataset, ConsensusState, EtaSchedule, FailureModel, LearningError,
    NeuralTree,
};
use crate::rlnc::{atomic_recode, destination_decode, random_sources, source_encode, DecodeOutcome, DecoderState, RlncError};
use crate::rng::{Purpose, StreamFactory};

/// Header symbols per forwarded raw packet.
pub const FORWARDING_HEADER: u64 = 0;
/// Header symbols per average message (the count).
pub const AVERAGE_HEADER: u64 = 1;
/// Header symbols per neural message (the example index).
pub const NEURAL_HEADER: u64 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error("scenario requires a rooted tree")]
    NotATree,
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("scenarios cannot be compared: {0}")]
    MismatchedScenarios(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Afc(#[from] AfcError),
    #[error(transparent)]
    Rlnc(#[from] RlncError),
    #[error(transparent)]
    Learning(#[from] LearningError),
    #[error(transparent)]
    Field(#[from] FieldError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregateOp {
    Sum,
    Max,
    Min,
}

impl AggregateOp {
    fn spec(self) -> AtomicFunctionSpec {
        match self {
            AggregateOp::Sum => AtomicFunctionSpec::Sum,
            AggregateOp::Max => AtomicFunctionSpec::Max,
            AggregateOp::Min => AtomicFunctionSpec::Min,
        }
    }
}

/// What the network does with the source data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Application {
    /// Raw packets routed to the destination unchanged.
    Forwarding,
    /// In-network aggregation with one operator at every node.
    Aggregate { op: AggregateOp },
    /// Mean of the sources via the sum/count decomposition.
    Average,
    /// Running-average estimate updated once per generation.
    Consensus { w0: f64 },
    /// Raw-data recovery with random linear network coding.
    Rlnc { field_degree: u32, n_prime: usize },
    /// Tree-embedded neural classifier, one training sample per generation.
    Neural { eta: EtaSchedule, dataset_size: usize },
}

impl Application {
    pub fn name(&self) -> &'static str {
        match self {
            Application::Forwarding => "forwarding",
            Application::Aggregate { op: AggregateOp::Sum } => "sum",
            Application::Aggregate { op: AggregateOp::Max } => "max",
            Application::Aggregate { op: AggregateOp::Min } => "min",
            Application::Average => "average",
            Application::Consensus { .. } => "consensus",
            Application::Rlnc { .. } => "rlnc",
            Application::Neural { .. } => "neural",
        }
    }

    /// Name of the headline statistic reported for a run.
    pub fn headline_name(&self) -> &'static str {
        match self {
            Application::Forwarding => "delivered_fraction",
            Application::Aggregate { .. } | Application::Average => "final_value",
            Application::Consensus { .. } => "final_estimate",
            Application::Rlnc { .. } => "success_probability",
            Application::Neural { .. } => "final_loss",
        }
    }
}

/// Distribution of real-valued source symbols.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SourceModel {
    Normal { mean: f64, std: f64 },
    Uniform { low: f64, high: f64 },
    Constant { value: f64 },
}

impl Default for SourceModel {
    fn default() -> Self {
        SourceModel::Normal { mean: 0.0, std: 1.0 }
    }
}

impl SourceModel {
    fn check(&self) -> Result<(), EngineError> {
        match *self {
            SourceModel::Normal { std, .. } if !(std >= 0.0 && std.is_finite()) => {
                Err(EngineError::Invalid(format!("source std {std} must be finite and non-negative")))
            }
            SourceModel::Uniform { low, high } if low.partial_cmp(&high) != Some(std::cmp::Ordering::Less) => {
                Err(EngineError::Invalid(format!("uniform bounds {low} >= {high}")))
            }
            _ => Ok(()),
        }
    }

    /// `l` symbols for source `s` in generation `t`, from `(SourceData, s, t)`.
    pub fn sample(&self, streams: &StreamFactory, s: usize, t: u64, l: usize) -> Vec<f64> {
        let mut rng = streams.stream(Purpose::SourceData, s as u64, t);
        match *self {
            SourceModel::Normal { mean, std } => {
                let d = Normal::new(mean, std).expect("checked parameters");
                (0..l).map(|_| d.sample(&mut rng)).collect()
            }
            SourceModel::Uniform { low, high } => (0..l).map(|_| rng.random_range(low..high)).collect(),
            SourceModel::Constant { value } => vec![value; l],
        }
    }
}

/// A complete, replayable run description.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub graph: NfcGraph,
    pub application: Application,
    pub generations: u64,
    pub seed: u64,
    /// Failure probabilities; the failure draws use the scenario seed.
    pub failures: FailureModel,
    pub packet_len: usize,
    pub sources: SourceModel,
}

impl Scenario {
    pub fn new(graph: NfcGraph, application: Application, generations: u64, seed: u64, packet_len: usize) -> Self {
        Scenario {
            graph,
            application,
            generations,
            seed,
            failures: FailureModel::none(),
            packet_len,
            sources: SourceModel::default(),
        }
    }

    fn failure_model(&self) -> FailureModel {
        FailureModel { seed: self.seed, ..self.failures }
    }
}

/// Symbols on one arc, split into payload and header.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ArcCount {
    pub payload: u64,
    pub header: u64,
}

impl ArcCount {
    pub fn total(&self) -> u64 {
        self.payload + self.header
    }

    fn add(&mut self, other: ArcCount) {
        self.payload += other.payload;
        self.header += other.header;
    }
}

/// Communication metering. Arcs are directed; downward neural messages are
/// charged to the reversed arc.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Metrics {
    pub per_generation: Vec<BTreeMap<(NodeId, NodeId), ArcCount>>,
    pub totals: BTreeMap<(NodeId, NodeId), ArcCount>,
    pub dropped_nodes: u64,
    pub lost_messages: u64,
    /// Not part of any serialized output.
    pub wall_clock: Duration,
}

impl Metrics {
    pub fn total_symbols(&self) -> u64 {
        self.totals.values().map(ArcCount::total).sum()
    }

    pub fn generation_total(&self, t: usize) -> u64 {
        self.per_generation.get(t).map_or(0, |m| m.values().map(ArcCount::total).sum())
    }

    fn charge(&mut self, t: usize, arc: (NodeId, NodeId), count: ArcCount) {
        self.per_generation[t].entry(arc).or_default().add(count);
        self.totals.entry(arc).or_default().add(count);
    }
}

/// One step of the barrier protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BarrierEvent {
    Fire { node: NodeId, generation: u64, round: u64 },
    Deliver { from: NodeId, to: NodeId, generation: u64, round: u64 },
}

/// Per-node input buffers keyed by `(child, generation)`.
#[derive(Debug)]
pub struct GenerationBarrier<M> {
    buffers: BTreeMap<NodeId, BTreeMap<(NodeId, u64), M>>,
    expected: Vec<usize>,
}

impl<M> GenerationBarrier<M> {
    /// `fires[v]`: whether `v` produces output in this generation.
    fn new(g: &NfcGraph, fires: &[bool]) -> Self {
        let expected = g.nodes().map(|v| g.in_neighbors(v).iter().filter(|c| fires[c.0]).count()).collect();
        GenerationBarrier { buffers: BTreeMap::new(), expected }
    }

    fn buffer(&mut self, to: NodeId, from: NodeId, t: u64, m: M) -> bool {
        let b = self.buffers.entry(to).or_default();
        b.insert((from, t), m);
        b.keys().filter(|k| k.1 == t).count() == self.expected[to.0]
    }

    fn take(&mut self, to: NodeId, t: u64) -> Vec<(NodeId, M)> {
        let b = self.buffers.entry(to).or_default();
        let keys: Vec<(NodeId, u64)> = b.keys().filter(|k| k.1 == t).copied().collect();
        keys.into_iter().map(|k| (k.0, b.remove(&k).expect("buffered"))).collect()
    }
}

/// Which nodes fire in a generation: sources always, atomic nodes unless
/// dropped and only if some child fires, the destination if any child fires.
fn firing_set(g: &NfcGraph, dropped: &[NodeId]) -> Vec<bool> {
    let mut fires = vec![false; g.node_count()];
    for &v in g.topological_order() {
        fires[v.0] = match g.role(v) {
            NodeRole::Source => true,
            _ if dropped.contains(&v) => false,
            _ => g.in_neighbors(v).iter().any(|c| fires[c.0]),
        };
    }
    fires
}

/// Runs one barrier round. `fire(v, inputs)` computes `v`'s output from its
/// buffered inputs (in child-id order); the destination's return value is
/// ignored. Every delivered message is charged with `symbols`.
#[allow(clippy::too_many_arguments)]
fn run_round<M>(
    g: &NfcGraph,
    t: u64,
    round: u64,
    fires: &[bool],
    streams: &StreamFactory,
    events: &mut Vec<BarrierEvent>,
    metrics: &mut Metrics,
    mut fire: impl FnMut(NodeId, Vec<(NodeId, M)>) -> Result<M, EngineError>,
    symbols: impl Fn(&M) -> ArcCount,
) -> Result<(), EngineError> {
    let mut barrier = GenerationBarrier::new(g, fires);
    let mut rng = streams.stream_indexed(Purpose::DeliveryOrder, 0, t, round);
    let mut pending: Vec<(NodeId, NodeId, M)> = Vec::new();
    for &s in g.sources() {
        events.push(BarrierEvent::Fire { node: s, generation: t, round });
        let m = fire(s, Vec::new())?;
        let parent = g.parent(s).ok_or(EngineError::NotATree)?;
        pending.push((s, parent, m));
    }
    while !pending.is_empty() {
        let (u, v, m) = pending.swap_remove(rng.random_range(0..pending.len()));
        events.push(BarrierEvent::Deliver { from: u, to: v, generation: t, round });
        metrics.charge(t as usize, (u, v), symbols(&m));
        if !fires[v.0] || !barrier.buffer(v, u, t, m) {
            continue;
        }
        events.push(BarrierEvent::Fire { node: v, generation: t, round });
        let out = fire(v, barrier.take(v, t))?;
        if let Some(parent) = g.parent(v) {
            pending.push((v, parent, out));
        }
    }
    Ok(())
}

/// Checks that every node fired at most once per round, after all of the
/// messages it received in that round, and that every message was sent by
/// a node that had already fired.
pub fn audit_barrier(events: &[BarrierEvent]) -> Result<(), String> {
    let mut fired: BTreeMap<(NodeId, u64, u64), usize> = BTreeMap::new();
    for (i, e) in events.iter().enumerate() {
        if let BarrierEvent::Fire { node, generation, round } = *e {
            if fired.insert((node, generation, round), i).is_some() {
                return Err(format!("{node} fired twice in generation {generation} round {round}"));
            }
        }
    }
    for (i, e) in events.iter().enumerate() {
        if let BarrierEvent::Deliver { from, to, generation, round } = *e {
            match fired.get(&(from, generation, round)) {
                Some(&j) if j < i => {}
                _ => return Err(format!("{from}→{to} delivered before {from} fired (generation {generation})")),
            }
            if let Some(&j) = fired.get(&(to, generation, round)) {
                if j < i {
                    return Err(format!("{to} fired before input from {from} arrived (generation {generation})"));
                }
            }
        }
    }
    Ok(())
}

/// Everything a run produces.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioResult {
    pub application: Application,
    pub generations: u64,
    pub seed: u64,
    pub metrics: Metrics,
    pub trajectory: Vec<crate::learning::TrajectoryPoint>,
    /// Destination output per generation (`None` if nothing arrived).
    pub outputs: Vec<Option<Vec<f64>>>,
    pub failed_generations: Vec<u64>,
    pub headline: f64,
    pub events: Vec<BarrierEvent>,
}

impl ScenarioResult {
    pub const TRAJECTORY_HEADER: &'static str = "generation,value,dropped_nodes,lost_messages";
    pub const ARC_GENERATION_HEADER: &'static str = "generation,from,to,payload_symbols,header_symbols,total_symbols";
    pub const ARC_TOTALS_HEADER: &'static str = "from,to,payload_symbols,header_symbols,total_symbols";

    pub fn trajectory_csv(&self) -> String {
        let mut out = format!("{}\n", Self::TRAJECTORY_HEADER);
        for p in &self.trajectory {
            out.push_str(&format!("{},{},{},{}\n", p.generation, p.value, p.dropped_nodes, p.lost_messages));
        }
        out
    }

    pub fn arc_generation_csv(&self) -> String {
        let mut out = format!("{}\n", Self::ARC_GENERATION_HEADER);
        for (t, arcs) in self.metrics.per_generation.iter().enumerate() {
            for (&(u, v), c) in arcs {
                out.push_str(&format!("{t},{},{},{},{},{}\n", u.0, v.0, c.payload, c.header, c.total()));
            }
        }
        out
    }

    pub fn arc_totals_csv(&self) -> String {
        let mut out = format!("{}\n", Self::ARC_TOTALS_HEADER);
        for (&(u, v), c) in &self.metrics.totals {
            out.push_str(&format!("{},{},{},{},{}\n", u.0, v.0, c.payload, c.header, c.total()));
        }
        out
    }

    /// One-line human summary.
    pub fn summary(&self) -> String {
        format!(
            "application={} generations={} total_symbols={} failed_generations={} {}={}",
            self.application.name(),
            self.generations,
            self.metrics.total_symbols(),
            self.failed_generations.len(),
            self.application.headline_name(),
            self.headline
        )
    }
}

/// Executes every generation of `s`.
pub fn run_scenario(s: &Scenario) -> Result<ScenarioResult, EngineError> {
    let started = Instant::now();
    let g = &s.graph;
    if !g.is_tree() {
        return Err(EngineError::NotATree);
    }
    g.root()?;
    s.failures.validate()?;
    s.sources.check()?;
    if s.packet_len == 0 {
        return Err(EngineError::Invalid("packet length must be positive".into()));
    }
    let mut run = Run {
        s,
        streams: StreamFactory::new(s.seed),
        failures: s.failure_model(),
        metrics: Metrics { per_generation: vec![BTreeMap::new(); s.generations as usize], ..Metrics::default() },
        events: Vec::new(),
        trajectory: Vec::new(),
        outputs: Vec::new(),
        failed: Vec::new(),
    };
    let headline = match &s.application {
        Application::Forwarding => run.forwarding()?,
        Application::Aggregate { op } => run.aggregate(Some(*op), None)?,
        Application::Average => run.aggregate(None, None)?,
        Application::Consensus { w0 } => run.aggregate(None, Some(*w0))?,
        Application::Rlnc { field_degree, n_prime } => run.rlnc(*field_degree, *n_prime)?,
        Application::Neural { eta, dataset_size } => run.neural(*eta, *dataset_size)?,
    };
    run.metrics.wall_clock = started.elapsed();
    Ok(ScenarioResult {
        application: s.application.clone(),
        generations: s.generations,
        seed: s.seed,
        metrics: run.metrics,
        trajectory: run.trajectory,
        outputs: run.outputs,
        failed_generations: run.failed,
        headline,
        events: run.events,
    })
}

/// Raw packets tagged with their source index.
type Bundle = Vec<(usize, Vec<f64>)>;

struct Run<'a> {
    s: &'a Scenario,
    streams: StreamFactory,
    failures: FailureModel,
    metrics: Metrics,
    events: Vec<BarrierEvent>,
    trajectory: Vec<crate::learning::TrajectoryPoint>,
    outputs: Vec<Option<Vec<f64>>>,
    failed: Vec<u64>,
}

impl Run<'_> {
    fn dropped(&self, t: u64) -> Vec<NodeId> {
        let g = &self.s.graph;
        g.atomics().into_iter().filter(|&v| self.failures.is_dropped(v, t)).collect()
    }

    fn point(&mut self, t: u64, value: f64, dropped: usize, lost: usize) {
        self.metrics.dropped_nodes += dropped as u64;
        self.metrics.lost_messages += lost as u64;
        self.trajectory.push(crate::learning::TrajectoryPoint {
            generation: t,
            value,
            dropped_nodes: dropped,
            lost_messages: lost,
        });
    }

    fn real_sources(&self, t: u64) -> Vec<Vec<f64>> {
        let n = self.s.graph.sources().len();
        (0..n).map(|i| self.s.sources.sample(&self.streams, i, t, self.s.packet_len)).collect()
    }

    fn forwarding(&mut self) -> Result<f64, EngineError> {
        let g = self.s.graph.clone();
        let n = g.sources().len();
        let mut delivered_total = 0usize;
        for t in 0..self.s.generations {
            let dropped = self.dropped(t);
            let fires = firing_set(&g, &dropped);
            let xs = self.real_sources(t);
            let mut delivered: Option<Bundle> = None;
            let fire = |v: NodeId, inputs: Vec<(NodeId, Bundle)>| {
                let bundle: Bundle = match g.source_index(v) {
                    Some(i) => vec![(i, xs[i].clone())],
                    None => {
                        let mut b: Vec<_> = inputs.into_iter().flat_map(|(_, m)| m).collect();
                        b.sort_by_key(|p| p.0);
                        b
                    }
                };
                if g.role(v) == NodeRole::Destination {
                    delivered = Some(bundle.clone());
                }
                Ok(bundle)
            };
            let symbols = |m: &Bundle| ArcCount {
                payload: m.iter().map(|p| p.1.len() as u64).sum(),
                header: FORWARDING_HEADER * m.len() as u64,
            };
            run_round(&g, t, 0, &fires, &self.streams, &mut self.events, &mut self.metrics, fire, symbols)?;
            let count = delivered.as_ref().map_or(0, Vec::len);
            delivered_total += count;
            if delivered.is_none() {
                self.failed.push(t);
            }
            self.outputs.push(delivered.map(|b| b.into_iter().flat_map(|p| p.1).collect()));
            self.point(t, count as f64, dropped.len(), 0);
        }
        Ok(if self.s.generations == 0 { 0.0 } else { delivered_total as f64 / (n as u64 * self.s.generations) as f64 })
    }

    /// Aggregate, average and consensus share one message flow: `op` is the
    /// aggregate, or `None` for the sum/count average; `consensus` holds the
    /// initial estimate when the average feeds a consensus update.
    fn aggregate(&mut self, op: Option<AggregateOp>, consensus: Option<f64>) -> Result<f64, EngineError> {
        let g = self.s.graph.clone();
        let l = self.s.packet_len;
        let header = if op.is_some() { 0 } else { AVERAGE_HEADER };
        let spec = op.map_or(AtomicFunctionSpec::Sum, AggregateOp::spec);
        let mut state = consensus.map(|w0| ConsensusState::new(vec![w0; l]));
        let mut last = f64::NAN;
        for t in 0..self.s.generations {
            let dropped = self.dropped(t);
            let fires = firing_set(&g, &dropped);
            let xs = self.real_sources(t);
            let mut result: Option<Vec<f64>> = None;
            let fire = |v: NodeId, inputs: Vec<(NodeId, Vec<f64>)>| -> Result<Vec<f64>, EngineError> {
                let out = match g.source_index(v) {
                    Some(i) => {
                        let mut x = xs[i].clone();
                        if op.is_none() {
                            x.push(1.0);
                        }
                        x
                    }
                    None => {
                        let packets: Vec<Packet> = inputs.into_iter().map(|(_, m)| Packet::Analog(m)).collect();
                        let combined = eval_dafc(&spec, &packets)?;
                        combined.as_analog().expect("analog in, analog out").to_vec()
                    }
                };
                if g.role(v) == NodeRole::Destination {
                    result = Some(match op {
                        Some(_) => out.clone(),
                        None => {
                            let count = out[l];
                            out[..l].iter().map(|x| x / count).collect()
                        }
                    });
                }
                Ok(out)
            };
            let symbols = |m: &Vec<f64>| ArcCount { payload: l as u64, header: (m.len() - l) as u64 };
            run_round(&g, t, 0, &fires, &self.streams, &mut self.events, &mut self.metrics, fire, symbols)?;
            debug_assert!(header == 0 || self.metrics.per_generation[t as usize].values().all(|c| c.header == header));
            let value = match (&mut state, &result) {
                (Some(st), Some(mean)) => {
                    *st = consensus_step(st, mean);
                    st.w[0]
                }
                (Some(st), None) => st.w[0],
                (None, Some(r)) => r[0],
                (None, None) => f64::NAN,
            };
            if result.is_none() {
                self.failed.push(t);
            }
            last = value;
            self.outputs.push(match &state {
                Some(st) if result.is_some() => Some(st.w.clone()),
                _ => result,
            });
            self.point(t, value, dropped.len(), 0);
        }
        Ok(last)
    }

    fn rlnc(&mut self, degree: u32, n_prime: usize) -> Result<f64, EngineError> {
        let g = self.s.graph.clone();
        let field = Field::new(FieldSpec::standard(degree)?)?;
        let n = g.sources().len();
        let l = self.s.packet_len;
        let mut successes = 0u64;
        for t in 0..self.s.generations {
            let dropped = self.dropped(t);
            let fires = firing_set(&g, &dropped);
            let xs = random_sources(&field, n, l, &self.streams, t);
            let mut decoder = DecoderState::new(field.clone(), n);
            for pass in 0..n_prime as u64 {
                let streams = self.streams;
                let fire = |v: NodeId, inputs: Vec<(NodeId, crate::rlnc::CodedPacket)>| {
                    if let Some(i) = g.source_index(v) {
                        return Ok(source_encode(i, n, &xs[i])?);
                    }
                    let children: Vec<_> = inputs.into_iter().map(|(_, p)| p).collect();
                    if g.role(v) == NodeRole::Destination {
                        for p in &children {
                            decoder.push(p.clone())?;
                        }
                        return Ok(children[0].clone());
                    }
                    let mut rng = streams.stream_indexed(Purpose::LocalCoefficients, v.0 as u64, t, pass);
                    Ok(atomic_recode(&field, &children, &mut rng)?)
                };
                let symbols = |p: &crate::rlnc::CodedPacket| ArcCount {
                    payload: p.payload.len() as u64,
                    header: p.coding_vector.len() as u64,
                };
                run_round(&g, t, pass, &fires, &self.streams, &mut self.events, &mut self.metrics, fire, symbols)?;
            }
            let ok = match (n_prime, destination_decode(&decoder)) {
                (0, _) => false,
                (_, DecodeOutcome::Recovered(out)) => {
                    assert_eq!(out, xs, "decoding must be exact");
                    true
                }
                (_, DecodeOutcome::Insufficient { .. }) => false,
            };
            if ok {
                successes += 1;
            } else {
                self.failed.push(t);
            }
            self.outputs.push(Some(vec![decoder.rank() as f64]));
            self.point(t, if ok { 1.0 } else { 0.0 }, dropped.len(), 0);
        }
        Ok(if self.s.generations == 0 { 0.0 } else { successes as f64 / self.s.generations as f64 })
    }

    fn neural(&mut self, eta: EtaSchedule, dataset_size: usize) -> Result<f64, EngineError> {
        let g = self.s.graph.clone();
        if dataset_size == 0 {
            return Err(EngineError::Invalid("dataset size must be positive".into()));
        }
        let l = self.s.packet_len;
        let data = separable_dataset(g.sources().len(), l, dataset_size, self.s.seed);
        let mut net = NeuralTree::new(&g, l, self.s.seed)?;
        let mut recent = Vec::new();
        for t in 0..self.s.generations {
            let sample = &data[(t % dataset_size as u64) as usize];
            let y = sample.target()?;
            let fwd = net.nn_forward(sample, t, &self.failures)?;
            let report = net.nn_downward_pass(y, t, eta.at(t), &self.failures)?;
            for v in g.nodes() {
                let Some(parent) = g.parent(v) else { continue };
                let payload = match g.role(v) {
                    NodeRole::Source => l as u64,
                    _ if fwd.activities.contains_key(&v) => 1,
                    _ => continue,
                };
                self.metrics.charge(t as usize, (v, parent), ArcCount { payload, header: NEURAL_HEADER });
            }
            for &v in report.gradients.keys() {
                for &c in g.in_neighbors(v) {
                    if g.role(c) != NodeRole::Source && fwd.activities.contains_key(&c) {
                        self.metrics.charge(t as usize, (v, c), ArcCount { payload: 1, header: NEURAL_HEADER });
                    }
                }
            }
            if !report.stale.is_empty() {
                self.failed.push(t);
            }
            let loss = log_loss(y, fwd.prediction);
            recent.push(loss);
            if recent.len() > dataset_size {
                recent.remove(0);
            }
            self.outputs.push(Some(vec![fwd.prediction]));
            self.point(t, loss, fwd.dropped.len(), report.lost_messages);
        }
        Ok(if recent.is_empty() { f64::NAN } else { recent.iter().sum::<f64>() / recent.len() as f64 })
    }
}

/// Symbol counts of an in-network run against raw forwarding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub nfc_total: u64,
    pub forwarding_total: u64,
    /// `forwarding_total / nfc_total`.
    pub ratio: f64,
    pub per_arc: Vec<ArcCost>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArcCost {
    pub from: NodeId,
    pub to: NodeId,
    pub nfc: u64,
    pub forwarding: u64,
}

impl CostReport {
    pub const CSV_HEADER: &'static str = "from,to,nfc_symbols,forwarding_symbols";

    pub fn csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for a in &self.per_arc {
            out.push_str(&format!("{},{},{},{}\n", a.from.0, a.to.0, a.nfc, a.forwarding));
        }
        out
    }
}

/// Runs both scenarios and compares their metered totals. They must share
/// graph, seed, generations, packet length and source model, and the
/// second must be the forwarding baseline.
pub fn compare_costs(nfc: &Scenario, forwarding: &Scenario) -> Result<CostReport, EngineError> {
    let mismatch = |what: &str| Err(EngineError::MismatchedScenarios(what.to_string()));
    if forwarding.application != Application::Forwarding {
        return mismatch("baseline scenario is not forwarding");
    }
    if nfc.graph.config() != forwarding.graph.config() {
        return mismatch("graphs differ");
    }
    if nfc.generations != forwarding.generations {
        return mismatch("generation counts differ");
    }
    if nfc.seed != forwarding.seed || nfc.sources != forwarding.sources {
        return mismatch("source data differ");
    }
    if nfc.packet_len != forwarding.packet_len {
        return mismatch("packet lengths differ");
    }
    let a = run_scenario(nfc)?;
    let b = run_scenario(forwarding)?;
    let mut arcs: BTreeMap<(NodeId, NodeId), (u64, u64)> = BTreeMap::new();
    for (&arc, c) in &a.metrics.totals {
        arcs.entry(arc).or_default().0 = c.total();
    }
    for (&arc, c) in &b.metrics.totals {
        arcs.entry(arc).or_default().1 = c.total();
    }
    let nfc_total = a.metrics.total_symbols();
    let forwarding_total = b.metrics.total_symbols();
    Ok(CostReport {
        nfc_total,
        forwarding_total,
        ratio: forwarding_total as f64 / nfc_total as f64,
        per_arc: arcs.into_iter().map(|((from, to), (nfc, forwarding))| ArcCost { from, to, nfc, forwarding }).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_graph, TopologyConfig};
    use crate::rlnc::deliver_generation;

    fn tree64() -> NfcGraph {
        build_graph(TopologyConfig::binary_tree(6)).unwrap()
    }

    #[test]
    fn forwarding_cost_is_path_length_sum() {
        let g = tree64();
        let r = run_scenario(&Scenario::new(g.clone(), Application::Forwarding, 1, 1, 8)).unwrap();
        let depth_sum: usize = g.sources().iter().map(|&s| g.depth(s).unwrap()).sum();
        assert_eq!(depth_sum, 64 * 6);
        assert_eq!(r.metrics.total_symbols(), (depth_sum * 8) as u64);
        assert_eq!(r.headline, 1.0);
    }

    #[test]
    fn average_cost_is_one_message_per_arc() {
        let r = run_scenario(&Scenario::new(tree64(), Application::Average, 3, 1, 8)).unwrap();
        for t in 0..3 {
            assert_eq!(r.metrics.generation_total(t), 126 * 9);
            assert!(r.metrics.per_generation[t].values().all(|c| c.payload == 8 && c.header == 1));
        }
    }

    #[test]
    fn average_matches_direct_mean() {
        let s = Scenario::new(tree64(), Application::Average, 4, 9, 3);
        let r = run_scenario(&s).unwrap();
        let streams = StreamFactory::new(9);
        for t in 0..4u64 {
            let xs: Vec<Vec<f64>> = (0..64).map(|i| s.sources.sample(&streams, i, t, 3)).collect();
            let out = r.outputs[t as usize].as_ref().unwrap();
            for k in 0..3 {
                let direct = xs.iter().map(|x| x[k]).sum::<f64>() / 64.0;
                assert!((out[k] - direct).abs() <= 1e-12 * direct.abs().max(1.0));
            }
        }
    }

    #[test]
    fn zero_generations_is_empty() {
        let r = run_scenario(&Scenario::new(tree64(), Application::Average, 0, 1, 8)).unwrap();
        assert_eq!(r.metrics.total_symbols(), 0);
        assert!(r.metrics.per_generation.is_empty() && r.trajectory.is_empty());
    }

    #[test]
    fn compare_costs_ratio() {
        let l = 64usize;
        let nfc = Scenario::new(tree64(), Application::Average, 1, 3, l);
        let fwd = Scenario { application: Application::Forwarding, ..nfc.clone() };
        let report = compare_costs(&nfc, &fwd).unwrap();
        assert_eq!(report.forwarding_total, (64 * 6 * l) as u64);
        assert_eq!(report.nfc_total, (126 * (l + 1)) as u64);
        assert_eq!(report.ratio, (64 * 6 * l) as f64 / (126 * (l + 1)) as f64);
        assert!((report.ratio - 3.0).abs() < 0.01);
        assert!(matches!(compare_costs(&nfc, &nfc), Err(EngineError::MismatchedScenarios(_))));
        let other = Scenario { packet_len: 2, ..fwd };
        assert!(matches!(compare_costs(&nfc, &other), Err(EngineError::MismatchedScenarios(_))));
    }

    #[test]
    fn single_source_chain_ratio_is_one() {
        let g = build_graph(TopologyConfig::chain(3)).unwrap();
        let nfc = Scenario::new(g, Application::Aggregate { op: AggregateOp::Sum }, 5, 0, 4);
        let fwd = Scenario { application: Application::Forwarding, ..nfc.clone() };
        assert_eq!(compare_costs(&nfc, &fwd).unwrap().ratio, 1.0);
    }

    #[test]
    fn rlnc_forwarding_costs_more_than_raw() {
        let g = build_graph(TopologyConfig::star(4)).unwrap();
        let nfc = Scenario::new(g, Application::Rlnc { field_degree: 8, n_prime: 4 }, 2, 0, 16);
        let fwd = Scenario { application: Application::Forwarding, ..nfc.clone() };
        let r = compare_costs(&nfc, &fwd).unwrap();
        assert!(r.nfc_total >= r.forwarding_total);
    }

    #[test]
    fn rlnc_matches_module_delivery() {
        let g = build_graph(TopologyConfig::binary_tree(2)).unwrap();
        let s = Scenario::new(g.clone(), Application::Rlnc { field_degree: 1, n_prime: 4 }, 40, 12, 2);
        let r = run_scenario(&s).unwrap();
        let field = Field::gf2();
        let streams = StreamFactory::new(12);
        for t in 0..40u64 {
            let xs = random_sources(&field, 4, 2, &streams, t);
            let d = deliver_generation(&g, &field, &xs, 4, &streams, t).unwrap();
            assert_eq!(r.trajectory[t as usize].value == 1.0, d.outcome.is_recovered(), "t={t}");
            for (arc, &sym) in &d.arc_symbols {
                assert_eq!(r.metrics.per_generation[t as usize][arc].total(), sym);
            }
        }
    }

    #[test]
    fn consensus_tracks_running_average() {
        let g = build_graph(TopologyConfig::binary_tree(3)).unwrap();
        let mut s = Scenario::new(g, Application::Consensus { w0: -50.0 }, 200, 4, 1);
        s.sources = SourceModel::Normal { mean: 5.0, std: 1.0 };
        let r = run_scenario(&s).unwrap();
        let streams = StreamFactory::new(4);
        let mut sum = 0.0;
        for t in 0..200u64 {
            let mean = (0..8).map(|i| s.sources.sample(&streams, i, t, 1)[0]).sum::<f64>() / 8.0;
            sum += mean;
            let avg = sum / (t + 1) as f64;
            assert!((r.trajectory[t as usize].value - avg).abs() <= 1e-12 * avg.abs());
        }
    }

    #[test]
    fn barrier_audit_passes_and_catches_reordering() {
        let g = build_graph(TopologyConfig::binary_tree(3)).unwrap();
        let mut s = Scenario::new(g, Application::Average, 5, 2, 2);
        s.failures.node_dropout_p = 0.3;
        let r = run_scenario(&s).unwrap();
        audit_barrier(&r.events).unwrap();
        let mut bad = r.events.clone();
        let i = bad.iter().position(|e| matches!(e, BarrierEvent::Fire { node, .. } if node.0 == 0)).unwrap();
        let e = bad.remove(i);
        bad.insert(0, e);
        assert!(audit_barrier(&bad).is_err());
    }

    #[test]
    fn dropout_averages_surviving_sources() {
        let g = build_graph(TopologyConfig::binary_tree(3)).unwrap();
        let mut s = Scenario::new(g.clone(), Application::Average, 30, 6, 1);
        s.failures.node_dropout_p = 0.3;
        let r = run_scenario(&s).unwrap();
        let streams = StreamFactory::new(6);
        let fm = s.failure_model();
        for t in 0..30u64 {
            let dropped: Vec<NodeId> = g.atomics().into_iter().filter(|&v| fm.is_dropped(v, t)).collect();
            let alive: Vec<usize> = (0..8)
                .filter(|&i| {
                    let mut v = g.sources()[i];
                    while let Some(p) = g.parent(v) {
                        if dropped.contains(&p) {
                            return false;
                        }
                        v = p;
                    }
                    true
                })
                .collect();
            match &r.outputs[t as usize] {
                None => assert!(alive.is_empty()),
                Some(out) => {
                    let direct = alive.iter().map(|&i| s.sources.sample(&streams, i, t, 1)[0]).sum::<f64>()
                        / alive.len() as f64;
                    assert!((out[0] - direct).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn neural_run_meters_both_directions() {
        let g = build_graph(TopologyConfig::binary_tree(2)).unwrap();
        let app = Application::Neural { eta: EtaSchedule::Constant { eta: 0.5 }, dataset_size: 10 };
        let r = run_scenario(&Scenario::new(g, app, 3, 1, 1)).unwrap();
        // 6 upward arcs plus 2 downward messages to hidden nodes, 2 symbols each
        assert_eq!(r.metrics.generation_total(0), 8 * 2);
    }

    #[test]
    fn runs_are_deterministic() {
        let g = build_graph(TopologyConfig::binary_tree(3)).unwrap();
        for app in [
            Application::Forwarding,
            Application::Average,
            Application::Rlnc { field_degree: 8, n_prime: 9 },
            Application::Neural { eta: EtaSchedule::Constant { eta: 0.3 }, dataset_size: 16 },
        ] {
            let mut s = Scenario::new(g.clone(), app, 20, 77, 2);
            s.failures = FailureModel { node_dropout_p: 0.1, message_loss_p: 0.1, seed: 0 };
            let a = run_scenario(&s).unwrap();
            let b = run_scenario(&s).unwrap();
            assert_eq!(a.trajectory_csv(), b.trajectory_csv());
            assert_eq!(a.arc_generation_csv(), b.arc_generation_csv());
            assert_eq!(a.events, b.events);
        }
    }

    #[test]
    fn dag_is_rejected() {
        let mut c = TopologyConfig::star(2);
        c.mode = crate::graph::GraphMode::Dag;
        let g = build_graph(c).unwrap();
        assert_eq!(run_scenario(&Scenario::new(g, Application::Average, 1, 0, 1)), Err(EngineError::NotATree));
    }
}
