//! Whether a target function can be computed over a small network.
//!
//! Each source emits `K` symbols from an alphabet of size `q`, every arc
//! carries `L` symbols, and each destination must output `f` applied to
//! every one of the `K` source-symbol columns. The exhaustive search
//! enumerates arc functions by truth table, restricted to the inputs an arc
//! can actually see, and picks decoders by checking that the destination's
//! view determines the target.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{Field, FieldError, FieldSpec};
use crate::graph::{source_rate_cut, GraphError, NfcGraph, NodeId, NodeRole};

/// Default bound on the number of candidate assignments.
pub const DEFAULT_CAP: u128 = 10_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SolvabilityError {
    #[error("alphabet size {0} must be at least 2")]
    Alphabet(u32),
    #[error("linear search needs a field alphabet (power of two up to 2^16), got {0}")]
    NotAField(u32),
    #[error("block lengths must be positive (K = {k}, L = {l})")]
    BlockLength { k: usize, l: usize },
    #[error("graph has no destination")]
    NoDestination,
    #[error("target table has {got} entries, expected {expected}")]
    TableSize { expected: usize, got: usize },
    #[error("input space too large to enumerate")]
    TooLarge,
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Field(#[from] FieldError),
}

/// A component function `f: A^N → B`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TargetFunction {
    /// Every source symbol; `B = A^N`.
    Identity,
    /// Field sum of the source symbols (bitwise XOR).
    Xor,
    /// Integer sum modulo `q`.
    SumModQ,
    Max,
    Min,
    /// Explicit table over `A^N` in lexicographic order of the inputs.
    Table { outputs: Vec<u64> },
}

impl TargetFunction {
    pub fn name(&self) -> &'static str {
        match self {
            TargetFunction::Identity => "identity",
            TargetFunction::Xor => "xor",
            TargetFunction::SumModQ => "sum_mod_q",
            TargetFunction::Max => "max",
            TargetFunction::Min => "min",
            TargetFunction::Table { .. } => "table",
        }
    }

    /// Value of `f` on one column of source symbols, as an index into `B`.
    pub fn eval(&self, x: &[u16], q: u32) -> u64 {
        match self {
            TargetFunction::Identity | TargetFunction::Table { .. } => {
                let idx = x.iter().fold(0u64, |acc, &s| acc * q as u64 + s as u64);
                match self {
                    TargetFunction::Table { outputs } => outputs[idx as usize],
                    _ => idx,
                }
            }
            TargetFunction::Xor => x.iter().fold(0u64, |acc, &s| acc ^ s as u64),
            TargetFunction::SumModQ => x.iter().map(|&s| s as u64).sum::<u64>() % q as u64,
            TargetFunction::Max => x.iter().copied().max().unwrap_or(0) as u64,
            TargetFunction::Min => x.iter().copied().min().unwrap_or(0) as u64,
        }
    }
}

/// One query: can `target` be computed over `graph` with block lengths
/// `(K, L)` over an alphabet of size `q`?
#[derive(Debug, Clone, PartialEq)]
pub struct SolvabilityInstance {
    pub graph: NfcGraph,
    pub q: u32,
    pub k: usize,
    pub l: usize,
    pub target: TargetFunction,
    pub cap: u128,
}

impl SolvabilityInstance {
    pub fn new(graph: NfcGraph, q: u32, k: usize, l: usize, target: TargetFunction) -> Self {
        SolvabilityInstance { graph, q, k, l, target, cap: DEFAULT_CAP }
    }

    fn check(&self) -> Result<(), SolvabilityError> {
        if self.q < 2 {
            return Err(SolvabilityError::Alphabet(self.q));
        }
        if self.k == 0 || self.l == 0 {
            return Err(SolvabilityError::BlockLength { k: self.k, l: self.l });
        }
        if self.graph.destinations().is_empty() {
            return Err(SolvabilityError::NoDestination);
        }
        if let TargetFunction::Table { outputs } = &self.target {
            let expected = (self.q as usize).pow(self.graph.sources().len() as u32);
            if outputs.len() != expected {
                return Err(SolvabilityError::TableSize { expected, got: outputs.len() });
            }
        }
        Ok(())
    }

    fn input_count(&self) -> Result<usize, SolvabilityError> {
        let exp = (self.graph.sources().len() * self.k) as u32;
        (self.q as usize).checked_pow(exp).filter(|&c| c <= 1 << 24).ok_or(SolvabilityError::TooLarge)
    }
}

/// Which arc functions the search may use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchSpace {
    /// Any function on the reachable inputs.
    #[default]
    General,
    /// Linear maps over GF(q).
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solvable {
    Yes,
    No,
    UnknownCapped,
}

/// One row of a truth table, in symbols.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableRow {
    pub input: Vec<u16>,
    pub output: Vec<u64>,
}

/// An arc's encoding function on the inputs it can see.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArcFunction {
    pub from: NodeId,
    pub to: NodeId,
    /// Row-major `L × inputs` matrix for linear witnesses.
    pub matrix: Option<Vec<Vec<u16>>>,
    pub table: Vec<TableRow>,
}

/// A destination's decoding function; outputs are `K` target values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderTable {
    pub node: NodeId,
    pub table: Vec<TableRow>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Witness {
    pub arcs: Vec<ArcFunction>,
    pub decoders: Vec<DecoderTable>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolvabilityVerdict {
    pub solvable: Solvable,
    pub space: SearchSpace,
    pub k: usize,
    pub l: usize,
    /// Upper bound on candidate assignments, as checked against the cap.
    pub candidate_bound: f64,
    /// Complete assignments examined.
    pub explored: u64,
    pub witness: Option<Witness>,
}

impl SolvabilityVerdict {
    /// `K/L` when solvable.
    pub fn ratio(&self) -> Option<f64> {
        (self.solvable == Solvable::Yes).then(|| self.k as f64 / self.l as f64)
    }
}

/// Min-cut condition for linear delivery of all sources to `dest`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinearIdentityCheck {
    pub cut: usize,
    pub n: usize,
    pub solvable: bool,
}

impl std::fmt::Display for LinearIdentityCheck {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.solvable {
            write!(f, "solvable (cut {} >= N={})", self.cut, self.n)
        } else {
            write!(f, "not solvable (cut {} < N={})", self.cut, self.n)
        }
    }
}

/// All sources can be delivered linearly to `dest` iff every cut between
/// the sources and `dest` has capacity at least N. A source that cannot
/// reach `dest` counts as a cut of its own unit.
pub fn linear_identity_check(g: &NfcGraph, dest: NodeId) -> Result<LinearIdentityCheck, GraphError> {
    let cut = source_rate_cut(g, dest)?;
    let n = g.sources().len();
    Ok(LinearIdentityCheck { cut, n, solvable: cut >= n })
}

/// Exhaustive search over all arc functions.
pub fn brute_force_search(inst: &SolvabilityInstance) -> Result<SolvabilityVerdict, SolvabilityError> {
    search(inst, SearchSpace::General)
}

/// Exhaustive search in the given space; the first witness in lexicographic
/// truth-table (or matrix-entry) order is returned after re-verification.
pub fn search(inst: &SolvabilityInstance, space: SearchSpace) -> Result<SolvabilityVerdict, SolvabilityError> {
    inst.check()?;
    let field = match space {
        SearchSpace::Linear => Some(field_for(inst.q)?),
        SearchSpace::General => None,
    };
    let bound = candidate_bound(inst, space);
    let mut verdict = SolvabilityVerdict {
        solvable: Solvable::UnknownCapped,
        space,
        k: inst.k,
        l: inst.l,
        candidate_bound: bound,
        explored: 0,
        witness: None,
    };
    if bound > inst.cap as f64 {
        return Ok(verdict);
    }
    let mut s = Searcher::new(inst, field)?;
    let found = s.dfs(0);
    verdict.explored = s.explored;
    if found {
        let witness = s.witness();
        assert!(verify_witness(inst, &witness), "search produced a witness that does not verify");
        verdict.solvable = Solvable::Yes;
        verdict.witness = Some(witness);
    } else {
        verdict.solvable = Solvable::No;
    }
    Ok(verdict)
}

fn field_for(q: u32) -> Result<Field, SolvabilityError> {
    if !q.is_power_of_two() || q > 1 << 16 {
        return Err(SolvabilityError::NotAField(q));
    }
    Ok(Field::new(FieldSpec::standard(q.trailing_zeros())?)?)
}

/// Arcs in search order: by topological position of the tail, then head.
fn ordered_arcs(g: &NfcGraph) -> Vec<(NodeId, NodeId)> {
    let mut arcs = g.arcs();
    arcs.sort_by_key(|&(u, v)| (g.topological_index(u), v));
    arcs
}

/// Number of input symbols an arc leaving `u` sees.
fn input_len(inst: &SolvabilityInstance, u: NodeId) -> usize {
    let own = if inst.graph.role(u) == NodeRole::Source { inst.k } else { 0 };
    own + inst.l * inst.graph.in_degree(u)
}

/// Upper bound on the number of complete assignments the search visits.
pub fn candidate_bound(inst: &SolvabilityInstance, space: SearchSpace) -> f64 {
    let g = &inst.graph;
    let (q, l) = (inst.q as f64, inst.l as f64);
    let mut log_total = 0.0;
    for (u, _) in g.arcs() {
        let inputs = input_len(inst, u) as f64;
        log_total += match space {
            SearchSpace::Linear => l * inputs * q.log2(),
            SearchSpace::General => {
                let upstream = upstream_source_count(g, u) as f64;
                let domain = (inputs * q.log2()).min(inst.k as f64 * upstream * q.log2());
                l * q.log2() * domain.exp2()
            }
        };
    }
    log_total.exp2()
}

fn upstream_source_count(g: &NfcGraph, v: NodeId) -> usize {
    let mut seen = vec![false; g.node_count()];
    let mut stack = vec![v];
    let mut count = 0;
    while let Some(u) = stack.pop() {
        if std::mem::replace(&mut seen[u.0], true) {
            continue;
        }
        if g.role(u) == NodeRole::Source {
            count += 1;
        }
        stack.extend_from_slice(g.in_neighbors(u));
    }
    count
}

/// Base-`q` digits of `value`, most significant first.
fn digits(mut value: u64, q: u32, count: usize) -> Vec<u16> {
    let mut out = vec![0u16; count];
    for d in out.iter_mut().rev() {
        *d = (value % q as u64) as u16;
        value /= q as u64;
    }
    out
}

fn undigits(symbols: &[u16], q: u32) -> u64 {
    symbols.iter().fold(0, |acc, &s| acc * q as u64 + s as u64)
}

/// All source symbols under assignment `i`, source-major.
fn source_symbols(i: usize, n: usize, k: usize, q: u32) -> Vec<u16> {
    digits(i as u64, q, n * k)
}

struct Choice {
    domain: Vec<Vec<u16>>,
    values: Vec<u64>,
    matrix: Option<Vec<u16>>,
}

struct Searcher<'a> {
    inst: &'a SolvabilityInstance,
    field: Option<Field>,
    arcs: Vec<(NodeId, NodeId)>,
    arc_index: BTreeMap<(NodeId, NodeId), usize>,
    inputs: usize,
    /// Source symbols per assignment.
    symbols: Vec<Vec<u16>>,
    /// Target outputs per assignment (K values).
    targets: Vec<Vec<u64>>,
    messages: Vec<Vec<u64>>,
    choices: Vec<Option<Choice>>,
    explored: u64,
}

impl<'a> Searcher<'a> {
    fn new(inst: &'a SolvabilityInstance, field: Option<Field>) -> Result<Self, SolvabilityError> {
        let arcs = ordered_arcs(&inst.graph);
        let arc_index = arcs.iter().enumerate().map(|(i, &a)| (a, i)).collect();
        let inputs = inst.input_count()?;
        let n = inst.graph.sources().len();
        let symbols: Vec<Vec<u16>> = (0..inputs).map(|i| source_symbols(i, n, inst.k, inst.q)).collect();
        let targets = symbols
            .iter()
            .map(|x| {
                (0..inst.k)
                    .map(|k| {
                        let column: Vec<u16> = (0..n).map(|s| x[s * inst.k + k]).collect();
                        inst.target.eval(&column, inst.q)
                    })
                    .collect()
            })
            .collect();
        let count = arcs.len();
        Ok(Searcher {
            inst,
            field,
            arcs,
            arc_index,
            inputs,
            symbols,
            targets,
            messages: vec![vec![0; inputs]; count],
            choices: (0..count).map(|_| None).collect(),
            explored: 0,
        })
    }

    /// What node `u` sees under assignment `i`: its own symbols (if a
    /// source) then each incoming message, in in-neighbor order.
    fn view(&self, u: NodeId, i: usize) -> Vec<u16> {
        let g = &self.inst.graph;
        let mut out = Vec::new();
        if let Some(s) = g.source_index(u) {
            out.extend_from_slice(&self.symbols[i][s * self.inst.k..(s + 1) * self.inst.k]);
        }
        for &w in g.in_neighbors(u) {
            out.extend(digits(self.messages[self.arc_index[&(w, u)]][i], self.inst.q, self.inst.l));
        }
        out
    }

    fn dfs(&mut self, j: usize) -> bool {
        if j == self.arcs.len() {
            self.explored += 1;
            return self.decodable();
        }
        let u = self.arcs[j].0;
        let views: Vec<Vec<u16>> = (0..self.inputs).map(|i| self.view(u, i)).collect();
        let mut domain: Vec<Vec<u16>> = views.clone();
        domain.sort();
        domain.dedup();
        let index: Vec<usize> = views.iter().map(|v| domain.binary_search(v).expect("in domain")).collect();
        let q = self.inst.q;
        let l = self.inst.l;
        match self.field.clone() {
            None => {
                let radix = (q as u64).pow(l as u32);
                let mut values = vec![0u64; domain.len()];
                loop {
                    for i in 0..self.inputs {
                        self.messages[j][i] = values[index[i]];
                    }
                    if self.dfs(j + 1) {
                        self.choices[j] = Some(Choice { domain, values, matrix: None });
                        return true;
                    }
                    if !odometer(&mut values, radix) {
                        return false;
                    }
                }
            }
            Some(field) => {
                let width = input_len(self.inst, u);
                let mut entries = vec![0u64; l * width];
                loop {
                    let apply = |v: &[u16]| -> u64 {
                        let out: Vec<u16> = (0..l)
                            .map(|r| {
                                let row = &entries[r * width..(r + 1) * width];
                                let mut acc = crate::field::FieldElement::ZERO;
                                for (&e, &x) in row.iter().zip(v) {
                                    acc = field.add(
                                        acc,
                                        field.mul(crate::field::FieldElement(e as u16), crate::field::FieldElement(x)),
                                    );
                                }
                                acc.0
                            })
                            .collect();
                        undigits(&out, q)
                    };
                    let values: Vec<u64> = domain.iter().map(|v| apply(v)).collect();
                    for i in 0..self.inputs {
                        self.messages[j][i] = values[index[i]];
                    }
                    if self.dfs(j + 1) {
                        let matrix = Some(entries.iter().map(|&e| e as u16).collect());
                        self.choices[j] = Some(Choice { domain, values, matrix });
                        return true;
                    }
                    if !odometer(&mut entries, q as u64) {
                        return false;
                    }
                }
            }
        }
    }

    fn decodable(&self) -> bool {
        let g = &self.inst.graph;
        for d in g.destinations() {
            let mut seen: BTreeMap<Vec<u16>, &Vec<u64>> = BTreeMap::new();
            for i in 0..self.inputs {
                let view = self.view(d, i);
                match seen.get(&view) {
                    Some(&t) if t != &self.targets[i] => return false,
                    Some(_) => {}
                    None => {
                        seen.insert(view, &self.targets[i]);
                    }
                }
            }
        }
        true
    }

    fn witness(&self) -> Witness {
        let l = self.inst.l;
        let arcs = self
            .arcs
            .iter()
            .zip(&self.choices)
            .map(|(&(from, to), c)| {
                let c = c.as_ref().expect("complete assignment");
                let table = c
                    .domain
                    .iter()
                    .zip(&c.values)
                    .map(|(input, &v)| TableRow {
                        input: input.clone(),
                        output: digits(v, self.inst.q, l).into_iter().map(u64::from).collect(),
                    })
                    .collect();
                let matrix = c.matrix.as_ref().map(|m| {
                    let width = m.len().checked_div(l).unwrap_or(0);
                    m.chunks(width.max(1)).map(<[u16]>::to_vec).collect()
                });
                ArcFunction { from, to, matrix, table }
            })
            .collect();
        let decoders = self
            .inst
            .graph
            .destinations()
            .into_iter()
            .map(|d| {
                let mut rows: BTreeMap<Vec<u16>, Vec<u64>> = BTreeMap::new();
                for i in 0..self.inputs {
                    rows.entry(self.view(d, i)).or_insert_with(|| self.targets[i].clone());
                }
                DecoderTable {
                    node: d,
                    table: rows.into_iter().map(|(input, output)| TableRow { input, output }).collect(),
                }
            })
            .collect();
        Witness { arcs, decoders }
    }
}

/// Advances a counter whose last digit is least significant; false on wrap-around.
fn odometer(digits: &mut [u64], radix: u64) -> bool {
    for d in digits.iter_mut().rev() {
        *d += 1;
        if *d < radix {
            return true;
        }
        *d = 0;
    }
    false
}

/// Truth table keyed by input.
type Lookup<'a> = BTreeMap<&'a [u16], &'a [u64]>;

/// Re-evaluates a witness on every input assignment and checks that each
/// destination decodes the target.
pub fn verify_witness(inst: &SolvabilityInstance, witness: &Witness) -> bool {
    let g = &inst.graph;
    let n = g.sources().len();
    let Ok(inputs) = inst.input_count() else { return false };
    let tables: BTreeMap<(NodeId, NodeId), Lookup> = witness
        .arcs
        .iter()
        .map(|a| ((a.from, a.to), a.table.iter().map(|r| (r.input.as_slice(), r.output.as_slice())).collect()))
        .collect();
    let decoders: BTreeMap<NodeId, Lookup> = witness
        .decoders
        .iter()
        .map(|d| (d.node, d.table.iter().map(|r| (r.input.as_slice(), r.output.as_slice())).collect()))
        .collect();
    if tables.len() != g.arc_count() {
        return false;
    }
    for i in 0..inputs {
        let x = source_symbols(i, n, inst.k, inst.q);
        let mut msg: BTreeMap<(NodeId, NodeId), Vec<u16>> = BTreeMap::new();
        let view = |v: NodeId, msg: &BTreeMap<(NodeId, NodeId), Vec<u16>>| -> Option<Vec<u16>> {
            let mut out = Vec::new();
            if let Some(s) = g.source_index(v) {
                out.extend_from_slice(&x[s * inst.k..(s + 1) * inst.k]);
            }
            for &w in g.in_neighbors(v) {
                out.extend_from_slice(msg.get(&(w, v))?);
            }
            Some(out)
        };
        for &v in g.topological_order() {
            if g.role(v) == NodeRole::Destination {
                let Some(seen) = view(v, &msg) else { return false };
                let Some(out) = decoders.get(&v).and_then(|t| t.get(seen.as_slice())) else { return false };
                for k in 0..inst.k {
                    let column: Vec<u16> = (0..n).map(|s| x[s * inst.k + k]).collect();
                    if out.get(k) != Some(&inst.target.eval(&column, inst.q)) {
                        return false;
                    }
                }
                continue;
            }
            for &w in g.out_neighbors(v) {
                let Some(seen) = view(v, &msg) else { return false };
                let Some(out) = tables.get(&(v, w)).and_then(|t| t.get(seen.as_slice())) else { return false };
                if out.len() != inst.l || out.iter().any(|&s| s >= inst.q as u64) {
                    return false;
                }
                msg.insert((v, w), out.iter().map(|&s| s as u16).collect());
            }
        }
    }
    true
}

/// One point of a `(K, L)` sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub k: usize,
    pub l: usize,
    pub solvable: Solvable,
}

/// Best certified `K/L` over a sweep; a lower bound on the computing capacity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityReport {
    pub best: Option<(usize, usize)>,
    pub points: Vec<SweepPoint>,
}

impl CapacityReport {
    pub fn best_ratio(&self) -> Option<f64> {
        self.best.map(|(k, l)| k as f64 / l as f64)
    }

    pub fn capped(&self) -> usize {
        self.points.iter().filter(|p| p.solvable == Solvable::UnknownCapped).count()
    }
}

/// Runs the search at every `(K, L)` in `sweep` and keeps the best ratio.
/// Points over the cap are reported as capped and skipped.
pub fn capacity_lower_bound(
    base: &SolvabilityInstance,
    sweep: &[(usize, usize)],
    space: SearchSpace,
) -> Result<CapacityReport, SolvabilityError> {
    let mut report = CapacityReport { best: None, points: Vec::new() };
    for &(k, l) in sweep {
        let inst = SolvabilityInstance { k, l, ..base.clone() };
        let v = search(&inst, space)?;
        if v.solvable == Solvable::Yes {
            let better = match report.best {
                None => true,
                Some((bk, bl)) => k * bl > bk * l,
            };
            if better {
                report.best = Some((k, l));
            }
        }
        report.points.push(SweepPoint { k, l, solvable: v.solvable });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_graph, min_cut, GraphMode, TopologyConfig};

    fn star2() -> NfcGraph {
        build_graph(TopologyConfig::star(2)).unwrap()
    }

    fn inst(g: NfcGraph, k: usize, l: usize, target: TargetFunction) -> SolvabilityInstance {
        SolvabilityInstance::new(g, 2, k, l, target)
    }

    #[test]
    fn xor_on_star_is_solvable_with_xor_witness() {
        let v = brute_force_search(&inst(star2(), 1, 1, TargetFunction::Xor)).unwrap();
        assert_eq!(v.solvable, Solvable::Yes);
        let w = v.witness.unwrap();
        let relay = w.arcs.iter().find(|a| a.from == NodeId(2)).unwrap();
        let outputs: Vec<u64> = relay.table.iter().map(|r| r.output[0]).collect();
        assert_eq!(outputs, vec![0, 1, 1, 0]);
        let dec: Vec<u64> = w.decoders[0].table.iter().map(|r| r.output[0]).collect();
        assert_eq!(dec, vec![0, 1]);
    }

    #[test]
    fn identity_on_star_needs_two_symbols() {
        let no = brute_force_search(&inst(star2(), 1, 1, TargetFunction::Identity)).unwrap();
        assert_eq!(no.solvable, Solvable::No);
        assert!(no.witness.is_none());
        assert!(no.explored > 0 && no.explored as f64 <= no.candidate_bound);
        let yes = brute_force_search(&inst(star2(), 1, 2, TargetFunction::Identity)).unwrap();
        assert_eq!(yes.solvable, Solvable::Yes);
        assert_eq!(yes.ratio(), Some(0.5));
        let capped = brute_force_search(&inst(star2(), 2, 2, TargetFunction::Identity)).unwrap();
        assert_eq!(capped.solvable, Solvable::UnknownCapped);
    }

    #[test]
    fn linear_check_examples() {
        let g = star2();
        let c = linear_identity_check(&g, NodeId(3)).unwrap();
        assert!(!c.solvable);
        assert_eq!(c.to_string(), "not solvable (cut 1 < N=2)");

        let mut cfg = TopologyConfig::new(GraphMode::Dag);
        let s1 = cfg.add_node(NodeRole::Source);
        let s2 = cfg.add_node(NodeRole::Source);
        let a = cfg.add_node(NodeRole::Atomic);
        let b = cfg.add_node(NodeRole::Atomic);
        let d = cfg.add_node(NodeRole::Destination);
        cfg.add_arc(s1, a).add_arc(s2, b).add_arc(a, d).add_arc(b, d);
        assert!(linear_identity_check(&build_graph(cfg).unwrap(), d).unwrap().solvable);

        let chain = build_graph(TopologyConfig::chain(2)).unwrap();
        let d = chain.root().unwrap();
        assert!(linear_identity_check(&chain, d).unwrap().solvable);
    }

    #[test]
    fn witness_tampering_is_caught() {
        let i = inst(star2(), 1, 1, TargetFunction::Xor);
        let mut w = brute_force_search(&i).unwrap().witness.unwrap();
        assert!(verify_witness(&i, &w));
        let relay = w.arcs.iter_mut().find(|a| a.from == NodeId(2)).unwrap();
        relay.table[1].output[0] = 0;
        assert!(!verify_witness(&i, &w));
    }

    #[test]
    fn linear_search_on_star() {
        let v = search(&inst(star2(), 1, 1, TargetFunction::Xor), SearchSpace::Linear).unwrap();
        assert_eq!(v.solvable, Solvable::Yes);
        assert!(v.witness.unwrap().arcs.iter().all(|a| a.matrix.is_some()));
        let v = search(&inst(star2(), 1, 1, TargetFunction::Identity), SearchSpace::Linear).unwrap();
        assert_eq!(v.solvable, Solvable::No);
        let bad = SolvabilityInstance::new(star2(), 3, 1, 1, TargetFunction::Xor);
        assert_eq!(search(&bad, SearchSpace::Linear), Err(SolvabilityError::NotAField(3)));
    }

    #[test]
    fn ternary_alphabet_general_search() {
        let chain = build_graph(TopologyConfig::chain(1)).unwrap();
        let i = SolvabilityInstance::new(chain, 3, 1, 1, TargetFunction::Identity);
        assert_eq!(brute_force_search(&i).unwrap().solvable, Solvable::Yes);
        // 27 · 27 · 3^9 candidates on the star exceed the default cap
        let i = SolvabilityInstance::new(star2(), 3, 1, 1, TargetFunction::SumModQ);
        assert_eq!(brute_force_search(&i).unwrap().solvable, Solvable::UnknownCapped);
    }

    #[test]
    fn capacity_sweeps() {
        let base = inst(star2(), 1, 1, TargetFunction::Xor);
        let r = capacity_lower_bound(&base, &[(1, 1)], SearchSpace::General).unwrap();
        assert!(r.best_ratio().unwrap() >= 1.0);

        let base = inst(star2(), 1, 1, TargetFunction::Identity);
        let sweep = [(1, 1), (1, 2), (2, 1), (2, 2)];
        let r = capacity_lower_bound(&base, &sweep, SearchSpace::General).unwrap();
        assert_eq!(r.best, Some((1, 2)));
        let cut = min_cut(&base.graph, NodeId(3)).unwrap() as f64;
        assert!(r.best_ratio().unwrap() <= cut / 2.0);
        assert!(r.capped() > 0);

        let r = capacity_lower_bound(&base, &[], SearchSpace::General).unwrap();
        assert_eq!(r.best, None);
        assert!(r.points.is_empty());
    }

    #[test]
    fn candidate_bound_counts() {
        assert_eq!(candidate_bound(&inst(star2(), 1, 1, TargetFunction::Xor), SearchSpace::General), 256.0);
        assert_eq!(candidate_bound(&inst(star2(), 1, 2, TargetFunction::Xor), SearchSpace::General), 65536.0);
        assert_eq!(candidate_bound(&inst(star2(), 1, 1, TargetFunction::Xor), SearchSpace::Linear), 16.0);
    }

    #[test]
    fn target_values() {
        assert_eq!(TargetFunction::Identity.eval(&[1, 0], 2), 2);
        assert_eq!(TargetFunction::Xor.eval(&[3, 5], 8), 6);
        assert_eq!(TargetFunction::SumModQ.eval(&[2, 2], 3), 1);
        assert_eq!(TargetFunction::Max.eval(&[2, 7], 8), 7);
        assert_eq!(TargetFunction::Table { outputs: vec![9, 8, 7, 6] }.eval(&[1, 0], 2), 7);
    }

    #[test]
    fn linear_search_agrees_with_min_cut_single_relay() {
        // s1, s2, relay, destination; every subset of the five possible arcs
        let all = [(0, 2), (1, 2), (2, 3), (0, 3), (1, 3)];
        for mask in 0u32..32 {
            let mut cfg = TopologyConfig::new(GraphMode::Dag);
            for role in [NodeRole::Source, NodeRole::Source, NodeRole::Atomic, NodeRole::Destination] {
                cfg.add_node(role);
            }
            for (i, &(u, v)) in all.iter().enumerate() {
                if mask >> i & 1 == 1 {
                    cfg.add_arc(NodeId(u), NodeId(v));
                }
            }
            let g = build_graph(cfg).unwrap();
            let check = linear_identity_check(&g, NodeId(3)).unwrap();
            let v = search(&inst(g, 1, 1, TargetFunction::Identity), SearchSpace::Linear).unwrap();
            assert_eq!(v.solvable == Solvable::Yes, check.solvable, "mask {mask:05b}");
        }
    }
}
