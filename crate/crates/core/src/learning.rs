//! Learning over the tree: consensus averaging by stochastic gradient, and a
//! neural classifier whose neurons live on the tree's nodes and train by
//! upward/downward message passing.
//!
//! Neurons use the standard logistic `σ(z) = 1/(1+e^{-z})`. The gradient
//! contribution sent to child `k` is `∂J/∂x · x(1-x) · w[k]` and the weight
//! step is `-η · ∂J/∂x · x(1-x) · x_in`, which is what the chain rule gives.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::afc::{decompose_average, install_functions, logistic, AfcError, Packet};
use crate::graph::{GraphError, NfcGraph, NodeId, NodeRole};
use crate::rng::{Purpose, StreamFactory};

/// Generations after which an unused gradient tuple is evicted.
pub const STALENESS_WINDOW: u64 = 8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LearningError {
    #[error("sample has {got} source vectors, network has {expected} sources")]
    SampleShape { expected: usize, got: usize },
    #[error("source vector of length {got}, expected {expected}")]
    SourceLength { expected: usize, got: usize },
    #[error("label must be -1 or +1, got {0}")]
    BadLabel(i8),
    #[error("weight vector for {node} has length {got}, expected {expected}")]
    WeightShape { node: NodeId, expected: usize, got: usize },
    #[error("probability {0} outside [0, 1]")]
    BadProbability(f64),
    #[error("network produced no output")]
    NoOutput,
    #[error(transparent)]
    Afc(#[from] AfcError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Step-size rule `η_t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EtaSchedule {
    Constant { eta: f64 },
    /// `η_t = scale / (t + 1)`.
    Inverse { scale: f64 },
}

impl EtaSchedule {
    pub fn at(&self, t: u64) -> f64 {
        match *self {
            EtaSchedule::Constant { eta } => eta,
            EtaSchedule::Inverse { scale } => scale / (t as f64 + 1.0),
        }
    }
}

impl Default for EtaSchedule {
    fn default() -> Self {
        EtaSchedule::Inverse { scale: 1.0 }
    }
}

/// Running estimate of the population mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusState {
    pub w: Vec<f64>,
    pub t: u64,
    pub eta: EtaSchedule,
}

impl ConsensusState {
    pub fn new(w0: Vec<f64>) -> Self {
        ConsensusState { w: w0, t: 0, eta: EtaSchedule::default() }
    }
}

/// One stochastic gradient step on `φ(w) = (1/N) Σ (x_s - w)²`, whose
/// gradient direction is `w - mean`: `w ← w - η_t·(w - mean)`. With
/// `η_t = 1/(t+1)` this equals `t/(t+1)·w + mean/(t+1)`; the first step
/// then returns the mean exactly, whatever the initial `w`.
pub fn consensus_step(state: &ConsensusState, sample_mean: &[f64]) -> ConsensusState {
    let eta = state.eta.at(state.t);
    let w = if eta == 1.0 {
        sample_mean.to_vec()
    } else {
        state.w.iter().zip(sample_mean).map(|(&w, &m)| w + eta * (m - w)).collect()
    };
    ConsensusState { w, t: state.t + 1, eta: state.eta }
}

/// One generation of a consensus run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusRecord {
    pub generation: u64,
    /// Network-computed mean of this generation's samples.
    pub mean: Vec<f64>,
    /// Estimate after the update.
    pub w: Vec<f64>,
}

/// Runs `generations` consensus updates. The mean of each generation is
/// computed in-network by the sum/count decomposition; `samples(t)` gives
/// the per-source vectors for generation `t`.
pub fn consensus_run(
    g: &NfcGraph,
    w0: Vec<f64>,
    generations: u64,
    mut samples: impl FnMut(u64) -> Vec<Vec<f64>>,
) -> Result<Vec<ConsensusRecord>, LearningError> {
    let net = install_functions(g, decompose_average(g)?)?;
    let mut state = ConsensusState::new(w0);
    let mut out = Vec::with_capacity(generations as usize);
    for t in 0..generations {
        let xs: Vec<Packet> = samples(t).into_iter().map(Packet::Analog).collect();
        let result = net.evaluate(&xs)?;
        let mean = result.single().as_analog().ok_or(LearningError::NoOutput)?.to_vec();
        state = consensus_step(&state, &mean);
        out.push(ConsensusRecord { generation: t, mean, w: state.w.clone() });
    }
    Ok(out)
}

/// Per-source input vectors with a ±1 label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub x: Vec<Vec<f64>>,
    pub label: i8,
}

impl TrainingSample {
    /// Label in {0, 1}: -1 maps to 0 and +1 to 1.
    pub fn target(&self) -> Result<f64, LearningError> {
        match self.label {
            -1 => Ok(0.0),
            1 => Ok(1.0),
            other => Err(LearningError::BadLabel(other)),
        }
    }
}

/// Bernoulli failures injected during training.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FailureModel {
    /// Per atomic node, per generation, in the upward pass.
    pub node_dropout_p: f64,
    /// Per gradient-contribution message in the downward pass.
    pub message_loss_p: f64,
    pub seed: u64,
}

impl FailureModel {
    pub fn none() -> Self {
        FailureModel::default()
    }

    pub fn validate(&self) -> Result<(), LearningError> {
        for p in [self.node_dropout_p, self.message_loss_p] {
            if !(0.0..=1.0).contains(&p) {
                return Err(LearningError::BadProbability(p));
            }
        }
        Ok(())
    }

    fn streams(&self) -> StreamFactory {
        StreamFactory::new(self.seed)
    }

    /// Whether atomic node `v` sits out generation `t`.
    pub fn is_dropped(&self, v: NodeId, t: u64) -> bool {
        self.node_dropout_p > 0.0
            && self.streams().stream(Purpose::NodeDropout, v.0 as u64, t).random_bool(self.node_dropout_p)
    }

    /// Whether the downward message `from → to` of generation `t` is lost.
    pub fn is_lost(&self, from: NodeId, to: NodeId, t: u64) -> bool {
        self.message_loss_p > 0.0
            && self
                .streams()
                .stream_indexed(Purpose::MessageLoss, to.0 as u64, t, from.0 as u64)
                .random_bool(self.message_loss_p)
    }
}

/// Local gradients kept by a neuron between its upward and downward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientTuple {
    pub activity: f64,
    /// `∂x/∂w = x(1-x)·x_in`.
    pub dx_dw: Vec<f64>,
    /// `∂x/∂x_in = x(1-x)·w`.
    pub dx_dxin: Vec<f64>,
}

/// Local gradients of `x = σ(w·x_in)` given the computed activity.
pub fn nn_upward_gradients(weights: &[f64], x_in: &[f64], x_out: f64) -> GradientTuple {
    let s = x_out * (1.0 - x_out);
    GradientTuple {
        activity: x_out,
        dx_dw: x_in.iter().map(|&x| s * x).collect(),
        dx_dxin: weights.iter().map(|&w| s * w).collect(),
    }
}

/// One input of a neuron: a child node and its slice of the weight vector.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Slot {
    child: NodeId,
    offset: usize,
    width: usize,
}

/// A neuron at an atomic or destination node.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralNode {
    pub id: NodeId,
    pub level: usize,
    pub weights: Vec<f64>,
    slots: Vec<Slot>,
    store: BTreeMap<u64, Stored>,
}

#[derive(Debug, Clone, PartialEq)]
struct Stored {
    tuple: GradientTuple,
    /// Which children delivered an activity in the upward pass.
    live: Vec<bool>,
}

fn slot_index(slots: &[Slot], child: NodeId) -> usize {
    slots.iter().position(|s| s.child == child).expect("child slot")
}

impl NeuralNode {
    /// Stores the tuple for generation `t` and evicts tuples older than the
    /// staleness window.
    pub fn store(&mut self, t: u64, tuple: GradientTuple) {
        let live = vec![true; self.slots.len()];
        self.store_with(t, Stored { tuple, live });
    }

    fn store_with(&mut self, t: u64, stored: Stored) {
        self.store.retain(|&old, _| t.saturating_sub(old) <= STALENESS_WINDOW);
        self.store.insert(t, stored);
    }

    pub fn stored_generations(&self) -> Vec<u64> {
        self.store.keys().copied().collect()
    }

    pub fn children(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.slots.iter().map(|s| s.child)
    }
}

/// Activities produced by an upward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub generation: u64,
    pub activities: BTreeMap<NodeId, f64>,
    pub dropped: Vec<NodeId>,
    pub prediction: f64,
}

/// What a downward pass did.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DownwardReport {
    /// Applied `∂J/∂w` per updated node.
    pub gradients: BTreeMap<NodeId, Vec<f64>>,
    pub lost_messages: usize,
    /// Nodes whose tuple for this generation had already been evicted.
    pub stale: Vec<NodeId>,
}

/// Neural classifier embedded in a tree: every atomic node and the
/// destination is a logistic neuron over its children's outputs. Sources
/// feed their raw vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralTree {
    graph: NfcGraph,
    input_len: usize,
    neurons: BTreeMap<NodeId, NeuralNode>,
    order: Vec<NodeId>,
    root: NodeId,
}

impl NeuralTree {
    /// Weights uniform on [-0.5, 0.5] from the `(WeightInit, node, 0)` substream.
    pub fn new(g: &NfcGraph, input_len: usize, seed: u64) -> Result<Self, LearningError> {
        let streams = StreamFactory::new(seed);
        let dist = Uniform::new_inclusive(-0.5, 0.5).expect("valid bounds");
        Self::build(g, input_len, |v, n| {
            let mut rng = streams.stream(Purpose::WeightInit, v.0 as u64, 0);
            (0..n).map(|_| dist.sample(&mut rng)).collect()
        })
    }

    pub fn zeros(g: &NfcGraph, input_len: usize) -> Result<Self, LearningError> {
        Self::build(g, input_len, |_, n| vec![0.0; n])
    }

    fn build(g: &NfcGraph, input_len: usize, mut init: impl FnMut(NodeId, usize) -> Vec<f64>) -> Result<Self, LearningError> {
        if !g.is_tree() {
            return Err(GraphError::NotATree.into());
        }
        let root = g.root()?;
        let mut level = vec![0usize; g.node_count()];
        let mut neurons = BTreeMap::new();
        let mut order = Vec::new();
        for &v in g.topological_order() {
            if g.role(v) == NodeRole::Source {
                continue;
            }
            let mut slots = Vec::new();
            let mut offset = 0;
            for &c in g.in_neighbors(v) {
                let width = if g.role(c) == NodeRole::Source { input_len } else { 1 };
                slots.push(Slot { child: c, offset, width });
                offset += width;
                level[v.0] = level[v.0].max(level[c.0] + 1);
            }
            let weights = init(v, offset);
            neurons.insert(v, NeuralNode { id: v, level: level[v.0], weights, slots, store: BTreeMap::new() });
            order.push(v);
        }
        Ok(NeuralTree { graph: g.clone(), input_len, neurons, order, root })
    }

    pub fn graph(&self) -> &NfcGraph {
        &self.graph
    }

    pub fn input_len(&self) -> usize {
        self.input_len
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    /// Neurons in topological order.
    pub fn neuron_ids(&self) -> &[NodeId] {
        &self.order
    }

    pub fn node(&self, v: NodeId) -> Option<&NeuralNode> {
        self.neurons.get(&v)
    }

    pub fn weights(&self, v: NodeId) -> Option<&[f64]> {
        self.neurons.get(&v).map(|n| n.weights.as_slice())
    }

    pub fn set_weights(&mut self, v: NodeId, w: Vec<f64>) -> Result<(), LearningError> {
        let n = self.neurons.get_mut(&v).ok_or(GraphError::UnknownNode(v))?;
        if n.weights.len() != w.len() {
            return Err(LearningError::WeightShape { node: v, expected: n.weights.len(), got: w.len() });
        }
        n.weights = w;
        Ok(())
    }

    /// All weights, concatenated in neuron order.
    pub fn flat_weights(&self) -> Vec<f64> {
        self.order.iter().flat_map(|v| self.neurons[v].weights.iter().copied()).collect()
    }

    pub fn set_flat_weights(&mut self, flat: &[f64]) -> Result<(), LearningError> {
        let total: usize = self.neurons.values().map(|n| n.weights.len()).sum();
        if flat.len() != total {
            return Err(LearningError::WeightShape { node: self.root, expected: total, got: flat.len() });
        }
        let mut i = 0;
        for v in &self.order {
            let n = self.neurons.get_mut(v).expect("neuron");
            let len = n.weights.len();
            n.weights.copy_from_slice(&flat[i..i + len]);
            i += len;
        }
        Ok(())
    }

    fn check_sample(&self, sample: &TrainingSample) -> Result<(), LearningError> {
        let n = self.graph.sources().len();
        if sample.x.len() != n {
            return Err(LearningError::SampleShape { expected: n, got: sample.x.len() });
        }
        if let Some(x) = sample.x.iter().find(|x| x.len() != self.input_len) {
            return Err(LearningError::SourceLength { expected: self.input_len, got: x.len() });
        }
        Ok(())
    }

    /// Inputs seen by neuron `v` given the current activities; a missing
    /// (dropped) child contributes zeros.
    fn inputs_of(&self, v: NodeId, sample: &TrainingSample, act: &BTreeMap<NodeId, f64>) -> Vec<f64> {
        let node = &self.neurons[&v];
        let mut x_in = Vec::with_capacity(node.weights.len());
        for s in &node.slots {
            match self.graph.source_index(s.child) {
                Some(i) => x_in.extend_from_slice(&sample.x[i]),
                None => x_in.push(act.get(&s.child).copied().unwrap_or(0.0)),
            }
        }
        x_in
    }

    fn run_forward(
        &mut self,
        sample: &TrainingSample,
        t: u64,
        failures: &FailureModel,
        store: bool,
    ) -> Result<Forward, LearningError> {
        self.check_sample(sample)?;
        failures.validate()?;
        let mut activities = BTreeMap::new();
        let mut dropped = Vec::new();
        for i in 0..self.order.len() {
            let v = self.order[i];
            if self.graph.role(v) == NodeRole::Atomic && failures.is_dropped(v, t) {
                dropped.push(v);
                continue;
            }
            let x_in = self.inputs_of(v, sample, &activities);
            let node = &self.neurons[&v];
            let z: f64 = node.weights.iter().zip(&x_in).map(|(w, x)| w * x).sum();
            let x = logistic(z);
            activities.insert(v, x);
            if store {
                let tuple = nn_upward_gradients(&node.weights, &x_in, x);
                let live = node
                    .slots
                    .iter()
                    .map(|s| self.graph.role(s.child) == NodeRole::Source || activities.contains_key(&s.child))
                    .collect();
                self.neurons.get_mut(&v).expect("neuron").store_with(t, Stored { tuple, live });
            }
        }
        let prediction = activities[&self.root];
        Ok(Forward { generation: t, activities, dropped, prediction })
    }

    /// Prediction pass; nothing is stored.
    pub fn predict(&self, sample: &TrainingSample, t: u64, failures: &FailureModel) -> Result<Forward, LearningError> {
        self.clone().run_forward(sample, t, failures, false)
    }

    /// Upward pass: every live neuron computes its activity and stores its
    /// local gradient tuple for generation `t`.
    pub fn nn_forward(&mut self, sample: &TrainingSample, t: u64, failures: &FailureModel) -> Result<Forward, LearningError> {
        self.run_forward(sample, t, failures, true)
    }

    /// Downward pass for generation `t`: the root seeds `∂J/∂x`, each
    /// neuron forwards gradient contributions to its neuron children and
    /// steps its weights. Tuples for `t` are purged everywhere afterwards.
    pub fn nn_downward_pass(
        &mut self,
        label: f64,
        t: u64,
        eta: f64,
        failures: &FailureModel,
    ) -> Result<DownwardReport, LearningError> {
        failures.validate()?;
        let mut report = DownwardReport::default();
        let mut dj: BTreeMap<NodeId, f64> = BTreeMap::new();
        match self.neurons[&self.root].store.get(&t) {
            Some(stored) => {
                let x = stored.tuple.activity;
                dj.insert(self.root, -label / x + (1.0 - label) / (1.0 - x));
            }
            None => report.stale.push(self.root),
        }
        for i in (0..self.order.len()).rev() {
            let v = self.order[i];
            let Some(&g) = dj.get(&v) else { continue };
            let node = self.neurons.get_mut(&v).expect("neuron");
            let Some(Stored { tuple, live }) = node.store.remove(&t) else {
                report.stale.push(v);
                continue;
            };
            let slots = node.slots.clone();
            for s in &slots {
                if self.graph.role(s.child) == NodeRole::Source {
                    continue;
                }
                if !live[slot_index(&slots, s.child)] {
                    continue;
                }
                if failures.is_lost(v, s.child, t) {
                    report.lost_messages += 1;
                    continue;
                }
                *dj.entry(s.child).or_insert(0.0) += g * tuple.dx_dxin[s.offset];
            }
            let grad: Vec<f64> = tuple.dx_dw.iter().map(|&d| g * d).collect();
            let node = self.neurons.get_mut(&v).expect("neuron");
            for (w, d) in node.weights.iter_mut().zip(&grad) {
                *w -= eta * d;
            }
            report.gradients.insert(v, grad);
        }
        for n in self.neurons.values_mut() {
            n.store.remove(&t);
        }
        Ok(report)
    }

    /// Gradient of the log-loss with respect to every weight by message
    /// passing, without failures and without changing the weights.
    pub fn message_passing_gradient(&self, sample: &TrainingSample) -> Result<Vec<f64>, LearningError> {
        let mut scratch = self.clone();
        let none = FailureModel::none();
        scratch.nn_forward(sample, 0, &none)?;
        let report = scratch.nn_downward_pass(sample.target()?, 0, 0.0, &none)?;
        Ok(self
            .order
            .iter()
            .flat_map(|v| report.gradients.get(v).cloned().unwrap_or_else(|| vec![0.0; self.neurons[v].weights.len()]))
            .collect())
    }

    /// Failure-free log-loss of one sample.
    pub fn loss(&self, sample: &TrainingSample) -> Result<f64, LearningError> {
        let f = self.predict(sample, 0, &FailureModel::none())?;
        Ok(log_loss(sample.target()?, f.prediction))
    }

    /// Mean failure-free log-loss over a dataset.
    pub fn dataset_loss(&self, data: &[TrainingSample]) -> Result<f64, LearningError> {
        let mut total = 0.0;
        for s in data {
            total += self.loss(s)?;
        }
        Ok(total / data.len().max(1) as f64)
    }
}

/// `J = -[y ln x + (1-y) ln(1-x)]` with `y ∈ {0, 1}`.
pub fn log_loss(y: f64, x: f64) -> f64 {
    -(y * x.ln() + (1.0 - y) * (1.0 - x).ln())
}

/// One row of a training or consensus trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub generation: u64,
    pub value: f64,
    pub dropped_nodes: usize,
    pub lost_messages: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainResult {
    pub trajectory: Vec<TrajectoryPoint>,
    pub final_weights: Vec<f64>,
    pub stale_events: usize,
}

/// Stochastic gradient training: one upward/downward cycle per sample,
/// generation `t` counting samples across epochs. The recorded value is
/// the log-loss of the prediction made in the upward pass.
pub fn nn_train(
    net: &mut NeuralTree,
    dataset: &[TrainingSample],
    epochs: usize,
    eta: EtaSchedule,
    failures: &FailureModel,
) -> Result<TrainResult, LearningError> {
    let mut trajectory = Vec::with_capacity(epochs * dataset.len());
    let mut stale_events = 0;
    let mut t = 0u64;
    for _ in 0..epochs {
        for sample in dataset {
            let y = sample.target()?;
            let fwd = net.nn_forward(sample, t, failures)?;
            let report = net.nn_downward_pass(y, t, eta.at(t), failures)?;
            stale_events += report.stale.len();
            trajectory.push(TrajectoryPoint {
                generation: t,
                value: log_loss(y, fwd.prediction),
                dropped_nodes: fwd.dropped.len(),
                lost_messages: report.lost_messages,
            });
            t += 1;
        }
    }
    Ok(TrainResult { trajectory, final_weights: net.flat_weights(), stale_events })
}

/// Largest relative difference between message-passing gradients and
/// central finite differences of the loss (step `1e-5`).
pub fn gradient_check(net: &NeuralTree, sample: &TrainingSample) -> Result<f64, LearningError> {
    const STEP: f64 = 1e-5;
    let analytic = net.message_passing_gradient(sample)?;
    let base = net.flat_weights();
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let mut w = base.clone();
        w[i] = base[i] + STEP;
        probe.set_flat_weights(&w)?;
        let plus = probe.loss(sample)?;
        w[i] = base[i] - STEP;
        probe.set_flat_weights(&w)?;
        let minus = probe.loss(sample)?;
        let numeric = (plus - minus) / (2.0 * STEP);
        let scale = a.abs().max(numeric.abs());
        if scale > 0.0 {
            worst = worst.max((a - numeric).abs() / scale.max(1e-8));
        }
    }
    Ok(worst)
}

/// Linearly separable samples for `n` sources with `input_len` symbols
/// each: inputs uniform on [-1, 1], label `+1` iff the first half of the
/// sources sums higher than the second half. Samples with margin below 0.1
/// are redrawn.
pub fn separable_dataset(n: usize, input_len: usize, size: usize, seed: u64) -> Vec<TrainingSample> {
    let streams = StreamFactory::new(seed);
    let mut rng = streams.stream(Purpose::Dataset, 0, 0);
    let half = n / 2;
    let mut out = Vec::with_capacity(size);
    while out.len() < size {
        let x: Vec<Vec<f64>> =
            (0..n).map(|_| (0..input_len).map(|_| rng.random_range(-1.0..=1.0)).collect()).collect();
        let total = |xs: &[Vec<f64>]| xs.iter().flatten().sum::<f64>();
        let score = total(&x[..half]) - total(&x[half..]);
        if score.abs() < 0.1 {
            continue;
        }
        out.push(TrainingSample { x, label: if score > 0.0 { 1 } else { -1 } });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_graph, GraphMode, TopologyConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seven_node() -> NfcGraph {
        build_graph(TopologyConfig::binary_tree(2)).unwrap()
    }

    /// Sources wired straight into the output neuron.
    fn flat(n: usize) -> NfcGraph {
        let mut c = TopologyConfig::new(GraphMode::Tree);
        let d = c.add_node(NodeRole::Destination);
        for _ in 0..n {
            let s = c.add_node(NodeRole::Source);
            c.add_arc(s, d);
        }
        build_graph(c).unwrap()
    }

    fn sample(x: &[f64], label: i8) -> TrainingSample {
        TrainingSample { x: x.iter().map(|&v| vec![v]).collect(), label }
    }

    #[test]
    fn consensus_examples() {
        let s = consensus_step(&ConsensusState::new(vec![17.0]), &[3.0]);
        assert_eq!(s.w, vec![3.0]);
        assert_eq!(s.t, 1);
        let mut s = ConsensusState::new(vec![-4.0]);
        for m in [1.0, 2.0, 3.0] {
            s = consensus_step(&s, &[m]);
        }
        assert!((s.w[0] - 2.0).abs() < 1e-15);
        let mut s = ConsensusState::new(vec![0.0]);
        for _ in 0..10 {
            s = consensus_step(&s, &[7.5]);
            assert_eq!(s.w, vec![7.5]);
        }
    }

    #[test]
    fn consensus_general_schedule_matches_gradient_step() {
        let s = ConsensusState { w: vec![1.0], t: 3, eta: EtaSchedule::Constant { eta: 0.5 } };
        assert_eq!(consensus_step(&s, &[3.0]).w, vec![2.0]);
    }

    #[test]
    fn consensus_run_is_running_average() {
        let g = build_graph(TopologyConfig::binary_tree(3)).unwrap();
        let n = g.sources().len();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<Vec<Vec<f64>>> =
            (0..200).map(|_| (0..n).map(|_| vec![rng.random_range(1.0..9.0)]).collect()).collect();
        let recs = consensus_run(&g, vec![99.0], 200, |t| data[t as usize].clone()).unwrap();
        let mut sum = 0.0;
        for (t, r) in recs.iter().enumerate() {
            let direct: f64 = data[t].iter().map(|x| x[0]).sum::<f64>() / n as f64;
            sum += direct;
            let avg = sum / (t + 1) as f64;
            assert!((r.w[0] - avg).abs() <= 1e-12 * avg.abs(), "t={t}");
        }
    }

    #[test]
    fn consensus_single_constant_source() {
        let g = build_graph(TopologyConfig::chain(1)).unwrap();
        let recs = consensus_run(&g, vec![0.0], 5, |_| vec![vec![4.25]]).unwrap();
        assert!(recs.iter().all(|r| r.w == vec![4.25]));
    }

    #[test]
    fn zero_weights_give_half() {
        let mut net = NeuralTree::zeros(&seven_node(), 1).unwrap();
        let f = net.nn_forward(&sample(&[1.0, -2.0, 3.0, 0.5], 1), 0, &FailureModel::none()).unwrap();
        assert!(f.activities.values().all(|&a| a == 0.5));
    }

    #[test]
    fn single_edge_prediction() {
        let g = build_graph(TopologyConfig::chain(0)).unwrap();
        let mut net = NeuralTree::zeros(&g, 1).unwrap();
        net.set_weights(net.root(), vec![0.7]).unwrap();
        let f = net.predict(&sample(&[1.0], 1), 0, &FailureModel::none()).unwrap();
        assert_eq!(f.prediction, logistic(0.7));
    }

    /// Straight-line forward and backward for the 7-node tree.
    struct Reference {
        h1: [f64; 2],
        h2: [f64; 2],
        out: [f64; 2],
    }

    impl Reference {
        fn forward(&self, x: &[f64; 4]) -> (f64, f64, f64) {
            let a = 1.0 / (1.0 + (-(self.h1[0] * x[0] + self.h1[1] * x[1])).exp());
            let b = 1.0 / (1.0 + (-(self.h2[0] * x[2] + self.h2[1] * x[3])).exp());
            let o = 1.0 / (1.0 + (-(self.out[0] * a + self.out[1] * b)).exp());
            (a, b, o)
        }

        fn grad(&self, x: &[f64; 4], y: f64) -> [f64; 6] {
            let (a, b, o) = self.forward(x);
            // dJ/dz at the output collapses to o - y
            let dz = o - y;
            let da = dz * self.out[0] * a * (1.0 - a);
            let db = dz * self.out[1] * b * (1.0 - b);
            [da * x[0], da * x[1], db * x[2], db * x[3], dz * a, dz * b]
        }
    }

    fn tree_weights(net: &NeuralTree) -> Reference {
        // binary_tree(2): root 0, hidden 1 (sources 3, 4), hidden 2 (sources 5, 6)
        let w = |v: usize| net.weights(NodeId(v)).unwrap().to_vec();
        Reference { h1: [w(1)[0], w(1)[1]], h2: [w(2)[0], w(2)[1]], out: [w(0)[0], w(0)[1]] }
    }

    #[test]
    fn distributed_gradient_matches_reference() {
        let g = seven_node();
        let net = NeuralTree::new(&g, 1, 5).unwrap();
        let r = tree_weights(&net);
        let x = [0.3, -0.8, 0.5, 0.1];
        let s = sample(&x, 1);
        let got = net.message_passing_gradient(&s).unwrap();
        // flat order is neuron topological order: 1, 2, 0
        let want = r.grad(&x, 1.0);
        for (a, b) in got.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-15, "{got:?} vs {want:?}");
        }
    }

    #[test]
    fn upward_gradient_examples() {
        let t = nn_upward_gradients(&[1.0, 2.0], &[3.0, -4.0], 0.5);
        assert_eq!(t.dx_dw, vec![0.75, -1.0]);
        assert_eq!(t.dx_dxin, vec![0.25, 0.5]);
        for x in [0.0, 1.0] {
            let t = nn_upward_gradients(&[1.0, 2.0], &[3.0, -4.0], x);
            assert!(t.dx_dw.iter().chain(&t.dx_dxin).all(|&v| v == 0.0));
        }
    }

    #[test]
    fn upward_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let w: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let act = |w: &[f64], x: &[f64]| logistic(w.iter().zip(x).map(|(a, b)| a * b).sum());
            let t = nn_upward_gradients(&w, &x, act(&w, &x));
            let h = 1e-5;
            for i in 0..3 {
                let (mut wp, mut wm) = (w.clone(), w.clone());
                wp[i] += h;
                wm[i] -= h;
                assert!(((act(&wp, &x) - act(&wm, &x)) / (2.0 * h) - t.dx_dw[i]).abs() < 1e-6);
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp[i] += h;
                xm[i] -= h;
                assert!(((act(&w, &xp) - act(&w, &xm)) / (2.0 * h) - t.dx_dxin[i]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn top_seed() {
        let mut net = NeuralTree::zeros(&seven_node(), 1).unwrap();
        let s = sample(&[1.0, 1.0, 1.0, 1.0], 1);
        net.nn_forward(&s, 0, &FailureModel::none()).unwrap();
        let r = net.nn_downward_pass(1.0, 0, 1.0, &FailureModel::none()).unwrap();
        // dJ/dw_root = seed · x(1-x) · x_in = -2 · 0.25 · 0.5
        assert_eq!(r.gradients[&NodeId(0)], vec![-0.25, -0.25]);
    }

    #[test]
    fn tuples_purged_after_downward_pass() {
        let mut net = NeuralTree::new(&seven_node(), 1, 1).unwrap();
        let s = sample(&[0.1, 0.2, 0.3, 0.4], -1);
        net.nn_forward(&s, 4, &FailureModel::none()).unwrap();
        assert!(net.neuron_ids().iter().all(|v| net.node(*v).unwrap().stored_generations() == vec![4]));
        net.nn_downward_pass(0.0, 4, 0.1, &FailureModel::none()).unwrap();
        assert!(net.neuron_ids().iter().all(|v| net.node(*v).unwrap().stored_generations().is_empty()));
    }

    #[test]
    fn stale_tuples_are_evicted() {
        let mut net = NeuralTree::new(&seven_node(), 1, 1).unwrap();
        let s = sample(&[0.1, 0.2, 0.3, 0.4], -1);
        for t in 0..=STALENESS_WINDOW + 1 {
            net.nn_forward(&s, t, &FailureModel::none()).unwrap();
        }
        let kept = net.node(net.root()).unwrap().stored_generations();
        assert_eq!(kept.first(), Some(&1));
        let before = net.flat_weights();
        let r = net.nn_downward_pass(0.0, 0, 0.1, &FailureModel::none()).unwrap();
        assert_eq!(r.stale, vec![net.root()]);
        assert_eq!(net.flat_weights(), before);
    }

    #[test]
    fn full_message_loss_freezes_lower_levels() {
        let mut net = NeuralTree::new(&seven_node(), 1, 2).unwrap();
        let before = net.clone();
        let fm = FailureModel { message_loss_p: 1.0, ..FailureModel::none() };
        let s = sample(&[0.5, -0.5, 0.2, 0.9], 1);
        net.nn_forward(&s, 0, &fm).unwrap();
        let r = net.nn_downward_pass(1.0, 0, 0.5, &fm).unwrap();
        assert_eq!(r.lost_messages, 2);
        for v in [NodeId(1), NodeId(2)] {
            assert_eq!(net.weights(v), before.weights(v));
        }
        assert_ne!(net.weights(net.root()), before.weights(net.root()));
    }

    #[test]
    fn full_dropout_keeps_loss_constant() {
        let g = seven_node();
        let mut net = NeuralTree::new(&g, 1, 3).unwrap();
        let data = separable_dataset(4, 1, 20, 3);
        let fm = FailureModel { node_dropout_p: 1.0, message_loss_p: 0.0, seed: 9 };
        let res = nn_train(&mut net, &data, 3, EtaSchedule::Constant { eta: 0.5 }, &fm).unwrap();
        for p in &res.trajectory {
            assert!((p.value - std::f64::consts::LN_2).abs() < 1e-15);
            assert_eq!(p.dropped_nodes, 2);
        }
    }

    #[test]
    fn dropped_child_equals_removed_summand() {
        let g = seven_node();
        let net = NeuralTree::new(&g, 1, 11).unwrap();
        let s = sample(&[0.4, -0.3, 0.8, 0.2], 1);
        let fwd = net.predict(&s, 0, &FailureModel::none()).unwrap();
        let w = net.weights(net.root()).unwrap();
        // removing hidden node 1's summand from the root's dot product
        let expected = logistic(w[1] * fwd.activities[&NodeId(2)]);
        let mut seeds = 0..;
        let dropped = loop {
            let fm = FailureModel { node_dropout_p: 0.5, message_loss_p: 0.0, seed: seeds.next().unwrap() };
            let f = net.predict(&s, 0, &fm).unwrap();
            if f.dropped == vec![NodeId(1)] {
                break f;
            }
        };
        assert_eq!(dropped.prediction, expected);
    }

    #[test]
    fn gradient_check_examples() {
        let g = seven_node();
        let s = sample(&[0.4, -0.3, 0.8, 0.2], 1);
        for seed in 0..5 {
            let net = NeuralTree::new(&g, 1, seed).unwrap();
            assert!(gradient_check(&net, &s).unwrap() < 1e-4);
        }
        assert!(gradient_check(&NeuralTree::zeros(&g, 1).unwrap(), &s).unwrap() < 1e-4);
    }

    #[test]
    fn single_edge_gradient_closed_form() {
        let g = build_graph(TopologyConfig::chain(0)).unwrap();
        let mut net = NeuralTree::zeros(&g, 1).unwrap();
        let (w, x) = (0.3, 1.7);
        net.set_weights(net.root(), vec![w]).unwrap();
        let s = sample(&[x], -1);
        let got = net.message_passing_gradient(&s).unwrap()[0];
        let p = logistic(w * x);
        let dj_dx = 1.0 / (1.0 - p);
        assert!((got - p * (1.0 - p) * x * dj_dx).abs() < 1e-10);
    }

    #[test]
    fn training_reduces_loss_on_flat_toy_set() {
        let g = flat(2);
        let mut finals = Vec::new();
        let mut initials = Vec::new();
        for seed in 0..10 {
            let data = separable_dataset(2, 1, 40, seed);
            let mut net = NeuralTree::new(&g, 1, seed).unwrap();
            initials.push(net.dataset_loss(&data).unwrap());
            nn_train(&mut net, &data, 200, EtaSchedule::Constant { eta: 0.5 }, &FailureModel::none()).unwrap();
            finals.push(net.dataset_loss(&data).unwrap());
        }
        initials.sort_by(f64::total_cmp);
        finals.sort_by(f64::total_cmp);
        assert!(finals[5] < initials[5]);
    }

    #[test]
    fn training_is_deterministic() {
        let g = seven_node();
        let data = separable_dataset(4, 1, 30, 1);
        let fm = FailureModel { node_dropout_p: 0.2, message_loss_p: 0.1, seed: 5 };
        let run = || {
            let mut net = NeuralTree::new(&g, 1, 8).unwrap();
            nn_train(&mut net, &data, 5, EtaSchedule::Constant { eta: 0.3 }, &fm).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn vector_inputs_widen_weights() {
        let net = NeuralTree::new(&seven_node(), 3, 0).unwrap();
        assert_eq!(net.weights(NodeId(1)).unwrap().len(), 6);
        assert_eq!(net.weights(NodeId(0)).unwrap().len(), 2);
        let s = TrainingSample { x: vec![vec![0.1, 0.2, 0.3]; 4], label: 1 };
        assert!(gradient_check(&net, &s).unwrap() < 1e-4);
    }

    #[test]
    fn bad_inputs_rejected() {
        let net = NeuralTree::new(&seven_node(), 1, 0).unwrap();
        assert!(matches!(net.loss(&sample(&[1.0], 1)), Err(LearningError::SampleShape { .. })));
        assert!(matches!(net.loss(&sample(&[1.0; 4], 0)), Err(LearningError::BadLabel(0))));
        let fm = FailureModel { node_dropout_p: 1.5, ..FailureModel::none() };
        assert!(matches!(net.predict(&sample(&[1.0; 4], 1), 0, &fm), Err(LearningError::BadProbability(_))));
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(30))]
        #[test]
        fn gradient_check_on_random_trees(seed in 0u64..5000, n in 1usize..9, depth in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = build_graph(TopologyConfig::random_tree(&mut rng, n, depth)).unwrap();
            let net = NeuralTree::new(&g, 1, seed).unwrap();
            let x: Vec<f64> = (0..g.sources().len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let s = sample(&x, if seed % 2 == 0 { 1 } else { -1 });
            proptest::prop_assert!(gradient_check(&net, &s).unwrap() < 1e-4);
        }
    }
}
