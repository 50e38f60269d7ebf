//! Raw-data delivery over a rooted tree with random linear network coding.
//!
//! Every atomic node forwards a random linear combination of what its
//! children sent, together with the global coding vector that expresses the
//! combination in terms of the original source packets. The destination
//! collects coded pairs over repeated passes and solves for the sources once
//! the coding vectors span the whole space.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{gaussian_solve, Field, FieldElement, FieldMatrix, FieldSpec, SolveError};
use crate::graph::{GraphError, NfcGraph, NodeId, NodeRole};
use crate::rng::{Purpose, StreamFactory};

/// A coded payload with its global coding vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodedPacket {
    pub payload: Vec<FieldElement>,
    pub coding_vector: Vec<FieldElement>,
}

impl CodedPacket {
    /// Symbols on the wire: payload plus the in-band coding-vector header.
    pub fn wire_symbols(&self) -> usize {
        self.payload.len() + self.coding_vector.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RlncError {
    #[error("inconsistent dimensions: {0}")]
    InconsistentDimensions(String),
    #[error("recoding needs at least one child packet")]
    NoChildren,
    #[error("source index {index} out of range for N = {n}")]
    SourceIndex { index: usize, n: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Field(#[from] crate::field::FieldError),
}

/// Leaf rule: the payload is the source packet and the coding vector is the
/// unit vector at the source's index.
pub fn source_encode(index: usize, n: usize, x: &[FieldElement]) -> Result<CodedPacket, RlncError> {
    if index >= n {
        return Err(RlncError::SourceIndex { index, n });
    }
    let mut coding_vector = vec![FieldElement::ZERO; n];
    coding_vector[index] = FieldElement::ONE;
    Ok(CodedPacket { payload: x.to_vec(), coding_vector })
}

/// Combines `children` with the given local coefficients; the coding vector
/// is updated with the same coefficients.
pub fn recode_with(
    field: &Field,
    children: &[CodedPacket],
    local: &[FieldElement],
) -> Result<CodedPacket, RlncError> {
    let first = children.first().ok_or(RlncError::NoChildren)?;
    if local.len() != children.len() {
        return Err(RlncError::InconsistentDimensions(format!(
            "{} coefficients for {} children",
            local.len(),
            children.len()
        )));
    }
    let (l, n) = (first.payload.len(), first.coding_vector.len());
    if children.iter().any(|c| c.payload.len() != l || c.coding_vector.len() != n) {
        return Err(RlncError::InconsistentDimensions("children disagree on L or N".into()));
    }
    let mut payload = vec![FieldElement::ZERO; l];
    let mut coding_vector = vec![FieldElement::ZERO; n];
    for (child, &e) in children.iter().zip(local) {
        field.axpy(&mut payload, e, &child.payload);
        field.axpy(&mut coding_vector, e, &child.coding_vector);
    }
    Ok(CodedPacket { payload, coding_vector })
}

/// Draws one local coefficient per child, uniformly over the field (zero
/// included), independently of the payloads, then recodes.
pub fn atomic_recode<R: Rng + ?Sized>(
    field: &Field,
    children: &[CodedPacket],
    rng: &mut R,
) -> Result<CodedPacket, RlncError> {
    let local: Vec<FieldElement> = children.iter().map(|_| field.random(rng)).collect();
    recode_with(field, children, &local)
}

/// True if `payload = Σ_s c[s]·x_s` for the known source packets.
pub fn is_consistent(field: &Field, packet: &CodedPacket, sources: &[Vec<FieldElement>]) -> bool {
    if packet.coding_vector.len() != sources.len() {
        return false;
    }
    let mut expect = vec![FieldElement::ZERO; packet.payload.len()];
    for (x, &c) in sources.iter().zip(&packet.coding_vector) {
        if x.len() != expect.len() {
            return false;
        }
        field.axpy(&mut expect, c, x);
    }
    expect == packet.payload
}

/// Coded pairs collected at a destination, with incrementally tracked rank.
#[derive(Debug, Clone)]
pub struct DecoderState {
    field: Field,
    n: usize,
    pairs: Vec<CodedPacket>,
    // reduced coding vectors, keyed by pivot column
    basis: BTreeMap<usize, Vec<FieldElement>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DecodeOutcome {
    /// All N source packets, in source-index order.
    Recovered(Vec<Vec<FieldElement>>),
    Insufficient { rank: usize },
}

impl DecodeOutcome {
    pub fn is_recovered(&self) -> bool {
        matches!(self, DecodeOutcome::Recovered(_))
    }
}

impl DecoderState {
    pub fn new(field: Field, n: usize) -> Self {
        DecoderState { field, n, pairs: Vec::new(), basis: BTreeMap::new() }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn rank(&self) -> usize {
        self.basis.len()
    }

    pub fn pairs(&self) -> &[CodedPacket] {
        &self.pairs
    }

    /// Stores a pair and returns the updated rank.
    pub fn push(&mut self, packet: CodedPacket) -> Result<usize, RlncError> {
        if packet.coding_vector.len() != self.n {
            return Err(RlncError::InconsistentDimensions(format!(
                "coding vector of length {} for N = {}",
                packet.coding_vector.len(),
                self.n
            )));
        }
        if let Some(first) = self.pairs.first() {
            if first.payload.len() != packet.payload.len() {
                return Err(RlncError::InconsistentDimensions("payload length changed".into()));
            }
        }
        let mut v = packet.coding_vector.clone();
        for (&col, row) in &self.basis {
            let k = v[col];
            if !k.is_zero() {
                self.field.axpy(&mut v, k, row);
            }
        }
        if let Some(col) = v.iter().position(|x| !x.is_zero()) {
            let inv = self.field.inv(v[col]).expect("nonzero pivot");
            self.field.scale(&mut v, inv);
            // keep the basis fully reduced in the new pivot column
            for row in self.basis.values_mut() {
                let k = row[col];
                if !k.is_zero() {
                    self.field.axpy(row, k, &v);
                }
            }
            self.basis.insert(col, v);
        }
        self.pairs.push(packet);
        Ok(self.rank())
    }
}

/// Solves the collected system when the coding vectors have rank N.
pub fn destination_decode(state: &DecoderState) -> DecodeOutcome {
    if state.rank() < state.n || state.pairs.is_empty() {
        return DecodeOutcome::Insufficient { rank: state.rank() };
    }
    let l = state.pairs[0].payload.len();
    let a = FieldMatrix::from_rows(&state.pairs.iter().map(|p| p.coding_vector.clone()).collect::<Vec<_>>())
        .expect("uniform coding-vector length");
    let b = FieldMatrix::from_entries(
        state.pairs.len(),
        l,
        state.pairs.iter().flat_map(|p| p.payload.iter().copied()).collect(),
    )
    .expect("uniform payload length");
    match gaussian_solve(&state.field, &a, &b) {
        Ok(sol) => DecodeOutcome::Recovered(sol.x.to_rows()),
        Err(SolveError::RankDeficient { rank, .. }) => DecodeOutcome::Insufficient { rank },
        Err(SolveError::Field(e)) => unreachable!("dimensions validated on push: {e}"),
    }
}

/// Messages produced in one pass over the tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PassTrace {
    /// Outgoing packet of every non-destination node.
    pub sent: BTreeMap<NodeId, CodedPacket>,
    /// Packets arriving at the destination, in child-id order.
    pub delivered: Vec<CodedPacket>,
}

/// Runs one coding pass: sources encode, atomic nodes recode with fresh
/// coefficients from the `(LocalCoefficients, node, generation, pass)`
/// substream, and the destination's incoming packets are returned.
pub fn propagate_pass(
    g: &NfcGraph,
    field: &Field,
    sources: &[Vec<FieldElement>],
    streams: &StreamFactory,
    generation: u64,
    pass: u64,
) -> Result<PassTrace, RlncError> {
    let root = g.root()?;
    let n = g.sources().len();
    if sources.len() != n {
        return Err(RlncError::InconsistentDimensions(format!("{} source packets for N = {n}", sources.len())));
    }
    let mut sent: BTreeMap<NodeId, CodedPacket> = BTreeMap::new();
    for &v in g.topological_order() {
        match g.role(v) {
            NodeRole::Source => {
                let i = g.source_index(v).expect("source has an index");
                sent.insert(v, source_encode(i, n, &sources[i])?);
            }
            NodeRole::Atomic => {
                let children: Vec<CodedPacket> = g.in_neighbors(v).iter().map(|c| sent[c].clone()).collect();
                let mut rng = streams.stream_indexed(Purpose::LocalCoefficients, v.0 as u64, generation, pass);
                sent.insert(v, atomic_recode(field, &children, &mut rng)?);
            }
            NodeRole::Destination => {}
        }
    }
    let delivered = g.in_neighbors(root).iter().map(|c| sent[c].clone()).collect();
    Ok(PassTrace { sent, delivered })
}

/// Result of delivering one generation with `n_prime` passes.
#[derive(Debug, Clone)]
pub struct GenerationDelivery {
    pub decoder: DecoderState,
    pub outcome: DecodeOutcome,
    /// Symbols sent per arc `(child → parent)` over all passes.
    pub arc_symbols: BTreeMap<(NodeId, NodeId), u64>,
}

/// Delivers one generation of source packets with `n_prime` sequential
/// passes and decodes at the root.
pub fn deliver_generation(
    g: &NfcGraph,
    field: &Field,
    sources: &[Vec<FieldElement>],
    n_prime: usize,
    streams: &StreamFactory,
    generation: u64,
) -> Result<GenerationDelivery, RlncError> {
    let mut decoder = DecoderState::new(field.clone(), g.sources().len());
    let mut arc_symbols = BTreeMap::new();
    for pass in 0..n_prime {
        let trace = propagate_pass(g, field, sources, streams, generation, pass as u64)?;
        for (&v, p) in &trace.sent {
            if let Some(parent) = g.parent(v) {
                *arc_symbols.entry((v, parent)).or_insert(0) += p.wire_symbols() as u64;
            }
        }
        for p in trace.delivered {
            decoder.push(p)?;
        }
    }
    let outcome = if n_prime == 0 {
        DecodeOutcome::Insufficient { rank: 0 }
    } else {
        destination_decode(&decoder)
    };
    Ok(GenerationDelivery { decoder, outcome, arc_symbols })
}

/// Random source packets for one generation, from `(SourceData, s, generation)`.
pub fn random_sources(field: &Field, n: usize, l: usize, streams: &StreamFactory, generation: u64) -> Vec<Vec<FieldElement>> {
    (0..n)
        .map(|s| {
            let mut rng = streams.stream(Purpose::SourceData, s as u64, generation);
            (0..l).map(|_| field.random(&mut rng)).collect()
        })
        .collect()
}

/// Empirical recovery statistics; serialized as one CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuccessStats {
    pub field_order: u32,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "N_prime")]
    pub n_prime: usize,
    pub trials: u64,
    pub successes: u64,
    pub probability: f64,
    pub seed: u64,
}

impl SuccessStats {
    pub const CSV_HEADER: &'static str = "field_order,N,N_prime,trials,successes,probability,seed";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.field_order, self.n, self.n_prime, self.trials, self.successes, self.probability, self.seed
        )
    }

    /// Standard error of the empirical probability.
    pub fn standard_error(&self) -> f64 {
        let p = self.probability;
        (p * (1.0 - p) / self.trials.max(1) as f64).sqrt()
    }
}

/// Probability that `rows` i.i.d. uniform vectors span GF(q)^n.
pub fn full_rank_probability(q: u32, n: usize, rows: usize) -> f64 {
    if rows < n {
        return 0.0;
    }
    let q = q as f64;
    (0..n).map(|i| 1.0 - q.powi(i as i32 - rows as i32)).product()
}

/// Repeats independent deliveries and counts how often the root reaches
/// full rank. Deterministic given `seed`; trial `k` uses generation index
/// `k`, so runs that differ only in `n_prime` share their randomness.
pub fn run_recovery_experiment(
    g: &NfcGraph,
    field: FieldSpec,
    n_prime: usize,
    trials: u64,
    seed: u64,
) -> Result<SuccessStats, RlncError> {
    run_recovery_with_payload(g, field, n_prime, trials, seed, 1)
}

/// [`run_recovery_experiment`] with an explicit payload length.
pub fn run_recovery_with_payload(
    g: &NfcGraph,
    field: FieldSpec,
    n_prime: usize,
    trials: u64,
    seed: u64,
    payload_len: usize,
) -> Result<SuccessStats, RlncError> {
    let field = Field::new(field)?;
    g.root()?;
    let n = g.sources().len();
    let streams = StreamFactory::new(seed);
    let mut successes = 0;
    for trial in 0..trials {
        let sources = random_sources(&field, n, payload_len, &streams, trial);
        let delivery = deliver_generation(g, &field, &sources, n_prime, &streams, trial)?;
        if let DecodeOutcome::Recovered(xs) = delivery.outcome {
            assert_eq!(xs, sources, "decoding must be exact");
            successes += 1;
        }
    }
    Ok(SuccessStats {
        field_order: field.order(),
        n,
        n_prime,
        trials,
        successes,
        probability: if trials == 0 { 0.0 } else { successes as f64 / trials as f64 },
        seed,
    })
}
