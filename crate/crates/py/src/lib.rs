//! Python bindings: graphs, finite fields, scenario runs, RLNC experiments
//! and solvability queries.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use sim::engine::{self, AggregateOp, Application, Scenario, SourceModel};
use sim::field::{Field, FieldElement, FieldSpec};
use sim::graph::{self, build_graph, GraphMode, NfcGraph, NodeId, NodeRole, TopologyConfig};
use sim::learning::{EtaSchedule, FailureModel};
use sim::rlnc;
use sim::solvability::{self, SearchSpace, Solvable, SolvabilityInstance, TargetFunction};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// A validated computation graph.
#[pyclass(name = "Graph", frozen)]
struct PyGraph {
    inner: NfcGraph,
}

#[pymethods]
impl PyGraph {
    /// `n` sources feeding one relay that feeds the destination.
    #[staticmethod]
    fn star(n: usize) -> PyResult<Self> {
        Self::build(TopologyConfig::star(n))
    }

    /// Balanced binary tree with `2^depth` sources.
    #[staticmethod]
    fn binary_tree(depth: u32) -> PyResult<Self> {
        Self::build(TopologyConfig::binary_tree(depth))
    }

    #[staticmethod]
    fn chain(relays: usize) -> PyResult<Self> {
        Self::build(TopologyConfig::chain(relays))
    }

    /// Explicit topology; roles are "source", "atomic" or "destination".
    #[staticmethod]
    #[pyo3(signature = (roles, arcs, mode = "tree"))]
    fn from_arcs(roles: Vec<String>, arcs: Vec<(usize, usize)>, mode: &str) -> PyResult<Self> {
        let mode = match mode {
            "tree" => GraphMode::Tree,
            "dag" => GraphMode::Dag,
            other => return Err(value_err(format!("unknown mode {other:?}"))),
        };
        let mut cfg = TopologyConfig::new(mode);
        for r in roles {
            cfg.add_node(match r.as_str() {
                "source" => NodeRole::Source,
                "atomic" => NodeRole::Atomic,
                "destination" => NodeRole::Destination,
                other => return Err(value_err(format!("unknown role {other:?}"))),
            });
        }
        for (u, v) in arcs {
            cfg.add_arc(NodeId(u), NodeId(v));
        }
        Self::build(cfg)
    }

    #[getter]
    fn node_count(&self) -> usize {
        self.inner.node_count()
    }

    #[getter]
    fn is_tree(&self) -> bool {
        self.inner.is_tree()
    }

    fn sources(&self) -> Vec<usize> {
        self.inner.sources().iter().map(|v| v.0).collect()
    }

    fn destinations(&self) -> Vec<usize> {
        self.inner.destinations().iter().map(|v| v.0).collect()
    }

    fn arcs(&self) -> Vec<(usize, usize)> {
        self.inner.arcs().iter().map(|(u, v)| (u.0, v.0)).collect()
    }

    fn topological_order(&self) -> Vec<usize> {
        self.inner.topological_order().iter().map(|v| v.0).collect()
    }

    fn min_cut(&self, dest: usize) -> PyResult<usize> {
        graph::min_cut(&self.inner, NodeId(dest)).map_err(value_err)
    }

    fn __repr__(&self) -> String {
        let (s, a, d) = self.inner.counts();
        format!("Graph(sources={s}, atomic={a}, destinations={d}, arcs={})", self.inner.arc_count())
    }
}

impl PyGraph {
    fn build(cfg: TopologyConfig) -> PyResult<Self> {
        build_graph(cfg).map(|inner| PyGraph { inner }).map_err(value_err)
    }
}

/// GF(2^m) with the standard reduction polynomial.
#[pyclass(name = "Field", frozen)]
struct PyField {
    inner: Field,
}

#[pymethods]
impl PyField {
    #[new]
    fn new(m: u32) -> PyResult<Self> {
        let spec = FieldSpec::standard(m).map_err(value_err)?;
        Ok(PyField { inner: Field::new(spec).map_err(value_err)? })
    }

    #[getter]
    fn order(&self) -> u32 {
        self.inner.order()
    }

    fn add(&self, a: u16, b: u16) -> u16 {
        self.inner.add(FieldElement(a), FieldElement(b)).0
    }

    fn mul(&self, a: u16, b: u16) -> u16 {
        self.inner.mul(FieldElement(a), FieldElement(b)).0
    }

    fn inv(&self, a: u16) -> PyResult<u16> {
        self.inner.inv(FieldElement(a)).map(|x| x.0).map_err(value_err)
    }

    fn rank(&self, rows: Vec<Vec<u16>>) -> PyResult<usize> {
        let rows: Vec<Vec<FieldElement>> =
            rows.into_iter().map(|r| r.into_iter().map(FieldElement).collect()).collect();
        let m = sim::field::FieldMatrix::from_rows(&rows).map_err(value_err)?;
        Ok(m.rank(&self.inner))
    }
}

/// Output of one scenario run.
#[pyclass(name = "ScenarioResult", frozen)]
struct PyScenarioResult {
    inner: engine::ScenarioResult,
}

#[pymethods]
impl PyScenarioResult {
    #[getter]
    fn headline(&self) -> f64 {
        self.inner.headline
    }

    #[getter]
    fn total_symbols(&self) -> u64 {
        self.inner.metrics.total_symbols()
    }

    #[getter]
    fn failed_generations(&self) -> Vec<u64> {
        self.inner.failed_generations.clone()
    }

    /// `(generation, value, dropped_nodes, lost_messages)` per generation.
    fn trajectory(&self) -> Vec<(u64, f64, usize, usize)> {
        self.inner.trajectory.iter().map(|p| (p.generation, p.value, p.dropped_nodes, p.lost_messages)).collect()
    }

    fn generation_symbols(&self, t: usize) -> u64 {
        self.inner.metrics.generation_total(t)
    }

    fn trajectory_csv(&self) -> String {
        self.inner.trajectory_csv()
    }

    fn arc_generation_csv(&self) -> String {
        self.inner.arc_generation_csv()
    }

    fn arc_totals_csv(&self) -> String {
        self.inner.arc_totals_csv()
    }

    fn summary(&self) -> String {
        self.inner.summary()
    }
}

fn application(
    name: &str,
    field_order: u32,
    n_prime: usize,
    w0: f64,
    eta: f64,
    dataset_size: usize,
) -> PyResult<Application> {
    Ok(match name {
        "forwarding" => Application::Forwarding,
        "sum" => Application::Aggregate { op: AggregateOp::Sum },
        "max" => Application::Aggregate { op: AggregateOp::Max },
        "min" => Application::Aggregate { op: AggregateOp::Min },
        "average" => Application::Average,
        "consensus" => Application::Consensus { w0 },
        "rlnc" => {
            if !field_order.is_power_of_two() || field_order < 2 {
                return Err(value_err(format!("field_order {field_order} is not a power of two")));
            }
            Application::Rlnc { field_degree: field_order.trailing_zeros(), n_prime }
        }
        "neural" => Application::Neural { eta: EtaSchedule::Constant { eta }, dataset_size },
        other => return Err(value_err(format!("unknown application {other:?}"))),
    })
}

#[allow(clippy::too_many_arguments)]
fn scenario(
    graph: &PyGraph,
    app: &str,
    generations: u64,
    seed: u64,
    packet_len: usize,
    field_order: u32,
    n_prime: usize,
    w0: f64,
    eta: f64,
    dataset_size: usize,
    node_dropout_p: f64,
    message_loss_p: f64,
    source_mean: f64,
    source_std: f64,
) -> PyResult<Scenario> {
    Ok(Scenario {
        graph: graph.inner.clone(),
        application: application(app, field_order, n_prime, w0, eta, dataset_size)?,
        generations,
        seed,
        failures: FailureModel { node_dropout_p, message_loss_p, seed },
        packet_len,
        sources: SourceModel::Normal { mean: source_mean, std: source_std },
    })
}

/// Runs `application` on a tree for `generations` generations.
#[pyfunction]
#[pyo3(signature = (
    graph, application, generations, seed = 0, packet_len = 1, *, field_order = 256, n_prime = 0,
    w0 = 0.0, eta = 0.5, dataset_size = 32, node_dropout_p = 0.0, message_loss_p = 0.0,
    source_mean = 0.0, source_std = 1.0
))]
#[allow(clippy::too_many_arguments)]
fn run_scenario(
    graph: &PyGraph,
    application: &str,
    generations: u64,
    seed: u64,
    packet_len: usize,
    field_order: u32,
    n_prime: usize,
    w0: f64,
    eta: f64,
    dataset_size: usize,
    node_dropout_p: f64,
    message_loss_p: f64,
    source_mean: f64,
    source_std: f64,
) -> PyResult<PyScenarioResult> {
    let s = scenario(
        graph, application, generations, seed, packet_len, field_order, n_prime, w0, eta, dataset_size,
        node_dropout_p, message_loss_p, source_mean, source_std,
    )?;
    engine::run_scenario(&s).map(|inner| PyScenarioResult { inner }).map_err(value_err)
}

/// `(nfc_total, forwarding_total, ratio)` for `application` against raw
/// forwarding on the same graph, seed and data.
#[pyfunction]
#[pyo3(signature = (graph, application, generations, seed = 0, packet_len = 1))]
fn compare_costs(
    graph: &PyGraph,
    application: &str,
    generations: u64,
    seed: u64,
    packet_len: usize,
) -> PyResult<(u64, u64, f64)> {
    let nfc = scenario(graph, application, generations, seed, packet_len, 256, 0, 0.0, 0.5, 32, 0.0, 0.0, 0.0, 1.0)?;
    let fwd = Scenario { application: Application::Forwarding, ..nfc.clone() };
    let r = engine::compare_costs(&nfc, &fwd).map_err(value_err)?;
    Ok((r.nfc_total, r.forwarding_total, r.ratio))
}

/// `(successes, trials, probability)` of full-rank recovery at the root.
#[pyfunction]
#[pyo3(signature = (graph, field_order, n_prime, trials, seed = 0))]
fn rlnc_recovery(graph: &PyGraph, field_order: u32, n_prime: usize, trials: u64, seed: u64) -> PyResult<(u64, u64, f64)> {
    if !field_order.is_power_of_two() || field_order < 2 {
        return Err(value_err(format!("field_order {field_order} is not a power of two")));
    }
    let spec = FieldSpec::standard(field_order.trailing_zeros()).map_err(value_err)?;
    let s = rlnc::run_recovery_experiment(&graph.inner, spec, n_prime, trials, seed).map_err(value_err)?;
    Ok((s.successes, s.trials, s.probability))
}

/// Probability that `rows` uniform vectors span GF(q)^n.
#[pyfunction]
fn full_rank_probability(q: u32, n: usize, rows: usize) -> f64 {
    rlnc::full_rank_probability(q, n, rows)
}

/// `(cut, n, solvable, description)` of the min-cut condition at `dest`.
#[pyfunction]
fn linear_identity_check(graph: &PyGraph, dest: usize) -> PyResult<(usize, usize, bool, String)> {
    let c = solvability::linear_identity_check(&graph.inner, NodeId(dest)).map_err(value_err)?;
    Ok((c.cut, c.n, c.solvable, c.to_string()))
}

/// Exhaustive solvability search. Returns `(verdict, explored, witness_json)`
/// with verdict "yes", "no" or "unknown_capped".
#[pyfunction]
#[pyo3(signature = (graph, target, q = 2, k = 1, l = 1, space = "general", cap = None, table = None))]
#[allow(clippy::too_many_arguments)]
fn solvability_search(
    graph: &PyGraph,
    target: &str,
    q: u32,
    k: usize,
    l: usize,
    space: &str,
    cap: Option<u64>,
    table: Option<Vec<u64>>,
) -> PyResult<(String, u64, Option<String>)> {
    let target = match (target, table) {
        ("identity", None) => TargetFunction::Identity,
        ("xor", None) => TargetFunction::Xor,
        ("sum_mod_q", None) => TargetFunction::SumModQ,
        ("max", None) => TargetFunction::Max,
        ("min", None) => TargetFunction::Min,
        ("table", Some(outputs)) => TargetFunction::Table { outputs },
        (other, _) => return Err(value_err(format!("unknown target {other:?} (table needs `table=`)"))),
    };
    let space = match space {
        "general" => SearchSpace::General,
        "linear" => SearchSpace::Linear,
        other => return Err(value_err(format!("unknown search space {other:?}"))),
    };
    let mut inst = SolvabilityInstance::new(graph.inner.clone(), q, k, l, target);
    if let Some(cap) = cap {
        inst.cap = cap as u128;
    }
    let v = solvability::search(&inst, space).map_err(value_err)?;
    let verdict = match v.solvable {
        Solvable::Yes => "yes",
        Solvable::No => "no",
        Solvable::UnknownCapped => "unknown_capped",
    };
    let witness = v.witness.map(|w| serde_json::to_string(&w)).transpose().map_err(value_err)?;
    Ok((verdict.to_string(), v.explored, witness))
}

#[pymodule]
fn condense(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGraph>()?;
    m.add_class::<PyField>()?;
    m.add_class::<PyScenarioResult>()?;
    m.add_function(wrap_pyfunction!(run_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(compare_costs, m)?)?;
    m.add_function(wrap_pyfunction!(rlnc_recovery, m)?)?;
    m.add_function(wrap_pyfunction!(full_rank_probability, m)?)?;
    m.add_function(wrap_pyfunction!(linear_identity_check, m)?)?;
    m.add_function(wrap_pyfunction!(solvability_search, m)?)?;
    Ok(())
}
