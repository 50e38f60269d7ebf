//! Atomic function computation.
//!
//! Digital atomic functions run inside a node on received packets. Analog
//! (nomographic) atomic functions are simulated numerically: every input is
//! pre-processed, scaled by its channel coefficient, superimposed with
//! Gaussian noise and post-processed. The function processor
//! ([`install_functions`]) binds atomic functions to the nodes of a graph and
//! produces an executable [`ConfiguredNetwork`].

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::field::{Field, FieldElement};
use crate::graph::{Arc, GraphError, NfcGraph, NodeId, NodeRole};
use crate::rng::{Purpose, StreamFactory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Domain {
    Digital,
    Analog,
}

/// A length-L message. Digital packets carry field symbols, analog packets
/// carry reals.
#[derive(Debug, Clone, PartialEq)]
pub enum Packet {
    Digital(Vec<FieldElement>),
    Analog(Vec<f64>),
}

impl Packet {
    pub fn analog(values: &[f64]) -> Packet {
        Packet::Analog(values.to_vec())
    }

    pub fn digital(values: &[u16]) -> Packet {
        Packet::Digital(values.iter().map(|&v| FieldElement(v)).collect())
    }

    pub fn len(&self) -> usize {
        match self {
            Packet::Digital(v) => v.len(),
            Packet::Analog(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn domain(&self) -> Domain {
        match self {
            Packet::Digital(_) => Domain::Digital,
            Packet::Analog(_) => Domain::Analog,
        }
    }

    pub fn as_analog(&self) -> Option<&[f64]> {
        match self {
            Packet::Analog(v) => Some(v),
            Packet::Digital(_) => None,
        }
    }

    pub fn as_digital(&self) -> Option<&[FieldElement]> {
        match self {
            Packet::Digital(v) => Some(v),
            Packet::Analog(_) => None,
        }
    }

    /// Symbol `i` read as a real number (field symbols by integer value).
    fn real_at(&self, i: usize) -> f64 {
        match self {
            Packet::Digital(v) => v[i].0 as f64,
            Packet::Analog(v) => v[i],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AfcError {
    #[error("expected {expected} input packet(s), got {got}")]
    ArityMismatch { expected: usize, got: usize },
    #[error("domain mismatch: {0}")]
    DomainMismatch(String),
    #[error("packet lengths differ: {0:?}")]
    LengthMismatch(Vec<usize>),
    #[error("{function} is undefined at {value}")]
    DomainError { function: &'static str, value: f64 },
    #[error("channel coefficient {index} is zero")]
    ZeroChannel { index: usize },
    #[error("no atomic function assigned to {0}")]
    MissingAssignment(NodeId),
    #[error("{node}: function expects {expected} input(s) but the node has {in_degree}")]
    NodeArity { node: NodeId, expected: usize, in_degree: usize },
    #[error("expected {expected} source packets, got {got}")]
    SourceCount { expected: usize, got: usize },
    #[error("noise standard deviation must be finite and non-negative, got {0}")]
    BadNoise(f64),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Scalar maps used to build pre- and post-processing functions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScalarMap {
    Identity,
    Square,
    Sqrt,
    Ln,
    Exp,
    Scale(f64),
}

impl ScalarMap {
    pub fn apply(self, x: f64) -> Result<f64, AfcError> {
        match self {
            ScalarMap::Identity => Ok(x),
            ScalarMap::Square => Ok(x * x),
            ScalarMap::Sqrt if x >= 0.0 => Ok(x.sqrt()),
            ScalarMap::Sqrt => Err(AfcError::DomainError { function: "sqrt", value: x }),
            ScalarMap::Ln if x > 0.0 => Ok(x.ln()),
            ScalarMap::Ln => Err(AfcError::DomainError { function: "ln", value: x }),
            ScalarMap::Exp => Ok(x.exp()),
            ScalarMap::Scale(k) => Ok(k * x),
        }
    }
}

fn apply_chain(chain: &[ScalarMap], x: f64) -> Result<f64, AfcError> {
    chain.iter().try_fold(x, |acc, m| m.apply(acc))
}

/// A nomographic function `ψ(Σ_s h_s φ_s(x_s))`.
///
/// The pre-function of input `s` is `pre` followed by division by `h_s`, so
/// that the channel's multiplication by `h_s` cancels and the superposition
/// delivers `Σ_s pre(x_s)` (plus noise) to `post`.
#[derive(Debug, Clone, PartialEq)]
pub struct Nomographic {
    pub pre: Vec<ScalarMap>,
    pub channel: Vec<f64>,
    pub post: Vec<ScalarMap>,
}

impl Nomographic {
    /// ψ(r) = r: the plain superposition sum.
    pub fn sum(channel: Vec<f64>) -> Self {
        Nomographic { pre: vec![ScalarMap::Identity], channel, post: vec![] }
    }

    /// Arithmetic mean.
    pub fn mean(channel: Vec<f64>) -> Self {
        let n = channel.len() as f64;
        Nomographic { pre: vec![ScalarMap::Identity], channel, post: vec![ScalarMap::Scale(1.0 / n)] }
    }

    /// Euclidean norm: φ = x², ψ = √r.
    pub fn euclidean_norm(channel: Vec<f64>) -> Self {
        Nomographic { pre: vec![ScalarMap::Square], channel, post: vec![ScalarMap::Sqrt] }
    }

    /// Geometric mean: φ = ln x, ψ = exp(r/N).
    pub fn geometric_mean(channel: Vec<f64>) -> Self {
        let n = channel.len() as f64;
        Nomographic {
            pre: vec![ScalarMap::Ln],
            channel,
            post: vec![ScalarMap::Scale(1.0 / n), ScalarMap::Exp],
        }
    }

    pub fn arity(&self) -> usize {
        self.channel.len()
    }

    /// φ_s(x): the pre-function actually transmitted by input `s`.
    pub fn pre_function(&self, s: usize, x: f64) -> Result<f64, AfcError> {
        Ok(apply_chain(&self.pre, x)? / self.channel[s])
    }

    /// Noise-free superposition `Σ_s h_s φ_s(x_s)` for one symbol position.
    fn superpose(&self, inputs: &[&[f64]], l: usize) -> Result<f64, AfcError> {
        let mut r = 0.0;
        for (s, x) in inputs.iter().enumerate() {
            r += self.channel[s] * self.pre_function(s, x[l])?;
        }
        Ok(r)
    }

    fn check(&self, inputs: &[Packet]) -> Result<(), AfcError> {
        if inputs.len() != self.arity() {
            return Err(AfcError::ArityMismatch { expected: self.arity(), got: inputs.len() });
        }
        if let Some(index) = self.channel.iter().position(|&h| h == 0.0) {
            return Err(AfcError::ZeroChannel { index });
        }
        Ok(())
    }
}

/// Function installed on a node or arc.
#[derive(Debug, Clone, PartialEq)]
pub enum AtomicFunctionSpec {
    Identity,
    /// Σ_b e[b]·x^(b) over the given field.
    LinearCombination { field: Field, coefficients: Vec<FieldElement> },
    Sum,
    Max,
    Min,
    /// Counts of symbol values in `[0, bins)` over all input symbols;
    /// out-of-range symbols clamp to the edge bins.
    Histogram { bins: usize },
    Average,
    Nomographic(Nomographic),
    /// Logistic unit σ(w·x) over the concatenated input symbols.
    NeuronUnit { weights: Vec<f64> },
}

impl AtomicFunctionSpec {
    /// Required number of input packets, when fixed by the function.
    pub fn arity(&self) -> Option<usize> {
        match self {
            AtomicFunctionSpec::Identity => Some(1),
            AtomicFunctionSpec::LinearCombination { coefficients, .. } => Some(coefficients.len()),
            AtomicFunctionSpec::Nomographic(n) => Some(n.arity()),
            _ => None,
        }
    }
}

/// Output of a digital evaluation with its clamp count.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluated {
    pub packet: Packet,
    /// Histogram symbols that fell outside `[0, bins)`.
    pub clamped: usize,
}

fn check_uniform(inputs: &[Packet]) -> Result<(Domain, usize), AfcError> {
    let Some(first) = inputs.first() else {
        return Err(AfcError::ArityMismatch { expected: 1, got: 0 });
    };
    let domain = first.domain();
    if inputs.iter().any(|p| p.domain() != domain) {
        return Err(AfcError::DomainMismatch("inputs mix digital and analog packets".into()));
    }
    let len = first.len();
    if inputs.iter().any(|p| p.len() != len) {
        return Err(AfcError::LengthMismatch(inputs.iter().map(Packet::len).collect()));
    }
    Ok((domain, len))
}

fn analog_inputs<'a>(inputs: &'a [Packet], what: &str) -> Result<Vec<&'a [f64]>, AfcError> {
    inputs
        .iter()
        .map(|p| p.as_analog().ok_or_else(|| AfcError::DomainMismatch(format!("{what} needs analog packets"))))
        .collect()
}

fn symbolwise(inputs: &[&[f64]], len: usize, f: impl Fn(&mut dyn Iterator<Item = f64>) -> f64) -> Vec<f64> {
    (0..len).map(|l| f(&mut inputs.iter().map(|x| x[l]))).collect()
}

/// Evaluates a digital atomic function symbol by symbol.
pub fn eval_dafc(spec: &AtomicFunctionSpec, inputs: &[Packet]) -> Result<Packet, AfcError> {
    eval_dafc_counted(spec, inputs).map(|e| e.packet)
}

/// [`eval_dafc`] plus the histogram clamp count.
pub fn eval_dafc_counted(spec: &AtomicFunctionSpec, inputs: &[Packet]) -> Result<Evaluated, AfcError> {
    if let Some(expected) = spec.arity() {
        if inputs.len() != expected {
            return Err(AfcError::ArityMismatch { expected, got: inputs.len() });
        }
    }
    let plain = |packet| Ok(Evaluated { packet, clamped: 0 });
    match spec {
        AtomicFunctionSpec::Identity => plain(inputs[0].clone()),
        AtomicFunctionSpec::LinearCombination { field, coefficients } => {
            let (domain, len) = check_uniform(inputs)?;
            if domain != Domain::Digital {
                return Err(AfcError::DomainMismatch("linear combination needs field symbols".into()));
            }
            let mut acc = vec![FieldElement::ZERO; len];
            for (p, &e) in inputs.iter().zip(coefficients) {
                field.axpy(&mut acc, e, p.as_digital().expect("checked domain"));
            }
            plain(Packet::Digital(acc))
        }
        AtomicFunctionSpec::Sum | AtomicFunctionSpec::Average => {
            let (_, len) = check_uniform(inputs)?;
            let xs = analog_inputs(inputs, "sum/average")?;
            let n = xs.len() as f64;
            let out = if matches!(spec, AtomicFunctionSpec::Sum) {
                symbolwise(&xs, len, |it| it.sum())
            } else {
                symbolwise(&xs, len, |it| it.sum::<f64>() / n)
            };
            plain(Packet::Analog(out))
        }
        AtomicFunctionSpec::Max | AtomicFunctionSpec::Min => {
            let (domain, len) = check_uniform(inputs)?;
            let is_max = matches!(spec, AtomicFunctionSpec::Max);
            match domain {
                Domain::Digital => {
                    let xs: Vec<&[FieldElement]> = inputs.iter().filter_map(Packet::as_digital).collect();
                    let out = (0..len)
                        .map(|l| {
                            let it = xs.iter().map(|x| x[l]);
                            if is_max { it.max() } else { it.min() }.expect("non-empty inputs")
                        })
                        .collect();
                    plain(Packet::Digital(out))
                }
                Domain::Analog => {
                    let xs = analog_inputs(inputs, "max/min")?;
                    let out = if is_max {
                        symbolwise(&xs, len, |it| it.fold(f64::NEG_INFINITY, f64::max))
                    } else {
                        symbolwise(&xs, len, |it| it.fold(f64::INFINITY, f64::min))
                    };
                    plain(Packet::Analog(out))
                }
            }
        }
        AtomicFunctionSpec::Histogram { bins } => {
            if *bins == 0 {
                return Err(AfcError::DomainMismatch("histogram needs at least one bin".into()));
            }
            let mut counts = vec![0.0; *bins];
            let mut clamped = 0;
            for p in inputs {
                for i in 0..p.len() {
                    let v = p.real_at(i).floor();
                    let bin = if v < 0.0 {
                        clamped += 1;
                        0
                    } else if v >= *bins as f64 {
                        clamped += 1;
                        bins - 1
                    } else {
                        v as usize
                    };
                    counts[bin] += 1.0;
                }
            }
            Ok(Evaluated { packet: Packet::Analog(counts), clamped })
        }
        AtomicFunctionSpec::Nomographic(n) => {
            let out = eval_nomographic(n, inputs, 0.0, None::<&mut rand_chacha::ChaCha8Rng>)?;
            plain(out)
        }
        AtomicFunctionSpec::NeuronUnit { weights } => {
            let xs = analog_inputs(inputs, "neuron unit")?;
            let total: usize = xs.iter().map(|x| x.len()).sum();
            if total != weights.len() {
                return Err(AfcError::ArityMismatch { expected: weights.len(), got: total });
            }
            let z: f64 = xs.iter().flat_map(|x| x.iter()).zip(weights).map(|(x, w)| x * w).sum();
            plain(Packet::Analog(vec![logistic(z)]))
        }
    }
}

/// σ(z) = 1 / (1 + e^(−z)).
pub fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Simulated analog evaluation of a nomographic function over a superposition
/// channel with additive Normal(0, noise_sigma²) noise per symbol.
pub fn eval_aafc<R: Rng + ?Sized>(
    spec: &Nomographic,
    inputs: &[Packet],
    noise_sigma: f64,
    rng: &mut R,
) -> Result<Packet, AfcError> {
    eval_nomographic(spec, inputs, noise_sigma, Some(rng))
}

fn eval_nomographic<R: Rng + ?Sized>(
    spec: &Nomographic,
    inputs: &[Packet],
    noise_sigma: f64,
    mut rng: Option<&mut R>,
) -> Result<Packet, AfcError> {
    spec.check(inputs)?;
    let (_, len) = check_uniform(inputs)?;
    let xs = analog_inputs(inputs, "nomographic evaluation")?;
    if !(noise_sigma.is_finite() && noise_sigma >= 0.0) {
        return Err(AfcError::BadNoise(noise_sigma));
    }
    let noise = Normal::new(0.0, noise_sigma).expect("validated sigma");
    let mut out = Vec::with_capacity(len);
    for l in 0..len {
        let mut r = spec.superpose(&xs, l)?;
        if noise_sigma > 0.0 {
            if let Some(rng) = rng.as_deref_mut() {
                r += noise.sample(rng);
            }
        }
        out.push(apply_chain(&spec.post, r)?);
    }
    Ok(Packet::Analog(out))
}

/// What a source puts on its outgoing arc.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SourceEncoding {
    #[default]
    Raw,
    /// Appends a count symbol of 1 (for sum/count decompositions).
    AppendUnitCount,
}

/// Final step applied at a destination after its combiner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DestinationDecoder {
    #[default]
    Identity,
    /// Divides the payload by the trailing count symbol and drops it.
    DivideByCount,
}

/// Map from nodes (or individual arcs) to atomic functions.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FunctionAssignment {
    pub node_functions: BTreeMap<NodeId, AtomicFunctionSpec>,
    /// Per-arc overrides; take precedence over `node_functions`.
    pub arc_functions: BTreeMap<Arc, AtomicFunctionSpec>,
    pub source_encoding: SourceEncoding,
    pub decoder: DestinationDecoder,
}

impl FunctionAssignment {
    /// The same function at every atomic node and at every destination with
    /// more than one input.
    pub fn uniform(g: &NfcGraph, spec: AtomicFunctionSpec) -> Self {
        let mut a = FunctionAssignment::default();
        for v in g.nodes() {
            let needs = match g.role(v) {
                NodeRole::Atomic => true,
                NodeRole::Destination => g.in_degree(v) > 1,
                NodeRole::Source => false,
            };
            if needs {
                a.node_functions.insert(v, spec.clone());
            }
        }
        a
    }
}

/// Sum/count decomposition of the average: sources append a count of 1,
/// every atomic node sums (payload and count alike) and the destination
/// divides the summed payload by the summed count.
pub fn decompose_average(g: &NfcGraph) -> Result<FunctionAssignment, AfcError> {
    if !g.is_tree() {
        return Err(GraphError::NotATree.into());
    }
    let mut a = FunctionAssignment::uniform(g, AtomicFunctionSpec::Sum);
    a.source_encoding = SourceEncoding::AppendUnitCount;
    a.decoder = DestinationDecoder::DivideByCount;
    Ok(a)
}

/// A graph with every node's output defined.
#[derive(Debug, Clone)]
pub struct ConfiguredNetwork {
    graph: NfcGraph,
    assignment: FunctionAssignment,
}

/// Everything produced by one evaluation of a configured network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkOutput {
    /// Decoded output at each destination.
    pub destinations: BTreeMap<NodeId, Packet>,
    /// Message carried by each arc.
    pub arc_messages: BTreeMap<Arc, Packet>,
    pub clamped: usize,
}

impl NetworkOutput {
    /// Output at the single destination of a tree.
    pub fn single(&self) -> &Packet {
        self.destinations.values().next().expect("at least one destination")
    }
}

/// Checks the assignment against the graph and binds it.
pub fn install_functions(g: &NfcGraph, assignment: FunctionAssignment) -> Result<ConfiguredNetwork, AfcError> {
    for v in g.nodes() {
        let in_degree = g.in_degree(v);
        let (needs, inputs) = match g.role(v) {
            NodeRole::Atomic => (g.out_degree(v) > 0, in_degree),
            NodeRole::Destination => (in_degree != 1, in_degree),
            // a source's own packet is an extra input when it has incoming arcs
            NodeRole::Source => (in_degree > 0, in_degree + 1),
        };
        let mut specs: Vec<&AtomicFunctionSpec> = Vec::new();
        for &w in g.out_neighbors(v) {
            if let Some(s) = assignment.arc_functions.get(&(v, w)).or(assignment.node_functions.get(&v)) {
                specs.push(s);
            } else if needs {
                return Err(AfcError::MissingAssignment(v));
            }
        }
        if g.role(v) == NodeRole::Destination {
            match assignment.node_functions.get(&v) {
                Some(s) => specs.push(s),
                None if needs => return Err(AfcError::MissingAssignment(v)),
                None => {}
            }
        }
        for s in specs {
            if let Some(expected) = s.arity() {
                if expected != inputs {
                    return Err(AfcError::NodeArity { node: v, expected, in_degree: inputs });
                }
            }
        }
    }
    Ok(ConfiguredNetwork { graph: g.clone(), assignment })
}

impl ConfiguredNetwork {
    pub fn graph(&self) -> &NfcGraph {
        &self.graph
    }

    pub fn assignment(&self) -> &FunctionAssignment {
        &self.assignment
    }

    /// Noise-free evaluation in the default topological order.
    pub fn evaluate(&self, sources: &[Packet]) -> Result<NetworkOutput, AfcError> {
        self.evaluate_in_order(sources, self.graph.topological_order(), None)
    }

    /// Evaluation with channel noise on nomographic nodes. Noise for node
    /// `v` comes from the `(ChannelNoise, v, generation)` substream.
    pub fn evaluate_noisy(
        &self,
        sources: &[Packet],
        noise_sigma: f64,
        streams: &StreamFactory,
        generation: u64,
    ) -> Result<NetworkOutput, AfcError> {
        self.evaluate_in_order(sources, self.graph.topological_order(), Some((noise_sigma, streams, generation)))
    }

    /// Evaluation following an explicit topological order.
    pub fn evaluate_in_order(
        &self,
        sources: &[Packet],
        order: &[NodeId],
        noise: Option<(f64, &StreamFactory, u64)>,
    ) -> Result<NetworkOutput, AfcError> {
        let g = &self.graph;
        if sources.len() != g.sources().len() {
            return Err(AfcError::SourceCount { expected: g.sources().len(), got: sources.len() });
        }
        debug_assert!(g.is_topological(order));
        let mut arc_messages: BTreeMap<Arc, Packet> = BTreeMap::new();
        let mut destinations = BTreeMap::new();
        let mut clamped = 0;
        for &v in order {
            let mut inputs: Vec<Packet> = Vec::with_capacity(g.in_degree(v) + 1);
            if let Some(i) = g.source_index(v) {
                inputs.push(self.encode_source(&sources[i]));
            }
            for &u in g.in_neighbors(v) {
                inputs.push(arc_messages[&(u, v)].clone());
            }
            let is_destination = g.role(v) == NodeRole::Destination;
            if is_destination {
                let combined = match self.assignment.node_functions.get(&v) {
                    Some(spec) => {
                        let e = self.apply(spec, &inputs, v, noise)?;
                        clamped += e.clamped;
                        e.packet
                    }
                    None => inputs.swap_remove(0),
                };
                destinations.insert(v, self.decode(combined));
                continue;
            }
            for &w in g.out_neighbors(v) {
                let spec = self.assignment.arc_functions.get(&(v, w)).or(self.assignment.node_functions.get(&v));
                let msg = match spec {
                    Some(spec) => {
                        let e = self.apply(spec, &inputs, v, noise)?;
                        clamped += e.clamped;
                        e.packet
                    }
                    None => inputs[0].clone(),
                };
                arc_messages.insert((v, w), msg);
            }
        }
        Ok(NetworkOutput { destinations, arc_messages, clamped })
    }

    fn apply(
        &self,
        spec: &AtomicFunctionSpec,
        inputs: &[Packet],
        node: NodeId,
        noise: Option<(f64, &StreamFactory, u64)>,
    ) -> Result<Evaluated, AfcError> {
        match (spec, noise) {
            (AtomicFunctionSpec::Nomographic(n), Some((sigma, streams, generation))) => {
                let mut rng = streams.stream(Purpose::ChannelNoise, node.0 as u64, generation);
                Ok(Evaluated { packet: eval_aafc(n, inputs, sigma, &mut rng)?, clamped: 0 })
            }
            _ => eval_dafc_counted(spec, inputs),
        }
    }

    fn encode_source(&self, p: &Packet) -> Packet {
        match (self.assignment.source_encoding, p) {
            (SourceEncoding::AppendUnitCount, Packet::Analog(v)) => {
                let mut v = v.clone();
                v.push(1.0);
                Packet::Analog(v)
            }
            (SourceEncoding::AppendUnitCount, Packet::Digital(v)) => {
                let mut v = v.clone();
                v.push(FieldElement::ONE);
                Packet::Digital(v)
            }
            (SourceEncoding::Raw, p) => p.clone(),
        }
    }

    fn decode(&self, p: Packet) -> Packet {
        match (self.assignment.decoder, p) {
            (DestinationDecoder::DivideByCount, Packet::Analog(mut v)) => {
                let count = v.pop().unwrap_or(0.0);
                Packet::Analog(v.into_iter().map(|x| x / count).collect())
            }
            (_, p) => p,
        }
    }
}
