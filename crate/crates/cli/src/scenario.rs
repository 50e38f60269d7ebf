//! Scenario file schema, validation and conversion into engine inputs.

use std::collections::BTreeMap;
use std::ops::Range;

use condense::engine::{AggregateOp, Application, Scenario, SourceModel};
use condense::graph::{build_graph, validate_graph, GraphMode, NfcGraph, NodeId, NodeRole, TopologyConfig, Violation};
use condense::learning::{EtaSchedule, FailureModel};
use condense::solvability::{SearchSpace, SolvabilityInstance, TargetFunction};
use serde::{Deserialize, Serialize};
use toml::Spanned;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub schema_version: Spanned<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub seed: u64,
    #[serde(default = "one_u64")]
    pub generations: u64,
    #[serde(default = "one_usize")]
    pub packet_len: Spanned<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
    pub topology: Spanned<TopologySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub application: Option<Spanned<ApplicationSpec>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sources: Option<Spanned<SourceSpec>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failures: Option<Spanned<FailureSpec>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capacity: Option<Spanned<CapacitySpec>>,
    /// Present in run manifests only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<ManifestInfo>,
}

fn one_u64() -> u64 {
    1
}

fn one_usize() -> Spanned<usize> {
    Spanned::new(0..0, 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    Star,
    BinaryTree,
    Chain,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<Generator>,
    /// Source count for `star`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sources: Option<usize>,
    /// Depth for `binary_tree`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<u32>,
    /// Relay count for `chain`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relays: Option<usize>,
    #[serde(default)]
    pub mode: GraphMode,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub nodes: Vec<Spanned<NodeSpec>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub arcs: Vec<Spanned<(String, String)>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub name: String,
    pub role: NodeRole,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ApplicationSpec {
    Forwarding {},
    Sum {},
    Max {},
    Min {},
    Average {},
    Consensus {
        #[serde(default)]
        w0: f64,
    },
    Rlnc {
        /// Field size `2^m`.
        field_order: u32,
        n_prime: usize,
    },
    Neural {
        #[serde(default = "default_eta")]
        eta: f64,
        #[serde(default)]
        schedule: Schedule,
        dataset_size: usize,
    },
}

fn default_eta() -> f64 {
    0.5
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Constant,
    /// `eta / (t + 1)`.
    Inverse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceSpec {
    Normal { mean: f64, std: f64 },
    Uniform { low: f64, high: f64 },
    Constant { value: f64 },
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FailureSpec {
    #[serde(default)]
    pub node_dropout_p: f64,
    #[serde(default)]
    pub message_loss_p: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapacitySpec {
    /// identity, xor, sum_mod_q, max, min or table.
    pub target: String,
    /// Target outputs for `table`, indexed by inputs read base `q` with the
    /// first source most significant.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<Vec<u64>>,
    #[serde(default = "two")]
    pub q: u32,
    #[serde(default)]
    pub space: SearchSpace,
    /// `(K, L)` block lengths to try.
    #[serde(default = "unit_sweep")]
    pub sweep: Vec<(usize, usize)>,
    #[serde(default = "default_cap")]
    pub cap: u64,
}

fn two() -> u32 {
    2
}

fn unit_sweep() -> Vec<(usize, usize)> {
    vec![(1, 1)]
}

fn default_cap() -> u64 {
    condense::solvability::DEFAULT_CAP as u64
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestInfo {
    pub tool_version: String,
}

/// A problem tied to a byte range of the scenario text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub span: Option<Range<usize>>,
    pub message: String,
}

impl Diagnostic {
    fn at(span: Range<usize>, message: impl Into<String>) -> Self {
        Diagnostic { span: Some(span), message: message.into() }
    }

    /// `path:line:col: message`, or `path: message` without a location.
    pub fn render(&self, path: &str, text: &str) -> String {
        match &self.span {
            Some(span) if span.end > 0 => {
                let before = &text[..span.start.min(text.len())];
                let line = before.matches('\n').count() + 1;
                let col = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
                format!("{path}:{line}:{col}: {}", self.message)
            }
            _ => format!("{path}: {}", self.message),
        }
    }
}

/// A parsed and validated scenario.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub file: ScenarioFile,
    pub graph: NfcGraph,
    pub names: Vec<String>,
}

pub fn parse(text: &str) -> Result<ScenarioFile, Vec<Diagnostic>> {
    toml::from_str(text).map_err(|e| {
        vec![Diagnostic { span: e.span(), message: e.message().trim().to_string() }]
    })
}

/// Parses and validates every section; all problems are reported together.
pub fn resolve(text: &str) -> Result<Resolved, Vec<Diagnostic>> {
    let file = parse(text)?;
    let mut diags = Vec::new();
    if *file.schema_version.get_ref() != SCHEMA_VERSION {
        diags.push(Diagnostic::at(
            file.schema_version.span(),
            format!("unsupported schema_version {} (expected {SCHEMA_VERSION})", file.schema_version.get_ref()),
        ));
    }
    if *file.packet_len.get_ref() == 0 {
        diags.push(Diagnostic::at(file.packet_len.span(), "packet_len must be at least 1"));
    }
    let topo = build_topology(&file.topology, &mut diags);
    if let Some(app) = &file.application {
        check_application(app, &mut diags);
        if let Some((cfg, _)) = &topo {
            if cfg.mode != GraphMode::Tree {
                diags.push(Diagnostic::at(app.span(), "applications run on tree topologies only"));
            }
        }
    }
    if let Some(src) = &file.sources {
        if let Err(msg) = check_sources(src.get_ref()) {
            diags.push(Diagnostic::at(src.span(), msg));
        }
    }
    if let Some(f) = &file.failures {
        for (name, p) in [("node_dropout_p", f.get_ref().node_dropout_p), ("message_loss_p", f.get_ref().message_loss_p)] {
            if !(0.0..=1.0).contains(&p) {
                diags.push(Diagnostic::at(f.span(), format!("{name} = {p} is not a probability")));
            }
        }
    }
    if let Some(c) = &file.capacity {
        if c.get_ref().sweep.iter().any(|&(k, l)| k == 0 || l == 0) {
            diags.push(Diagnostic::at(c.span(), "sweep block lengths must be positive"));
        }
    }
    let Some((cfg, names)) = topo else {
        return Err(diags);
    };
    if let Some(c) = &file.capacity {
        let n = cfg.roles.iter().filter(|&&r| r == NodeRole::Source).count();
        if let Err(msg) = target_function(c.get_ref(), n) {
            diags.push(Diagnostic::at(c.span(), msg));
        }
    }
    if !diags.is_empty() {
        return Err(diags);
    }
    match build_graph(cfg) {
        Ok(graph) => Ok(Resolved { file, graph, names }),
        Err(e) => Err(vec![Diagnostic::at(file.topology.span(), e.to_string())]),
    }
}

fn build_topology(spec: &Spanned<TopologySpec>, diags: &mut Vec<Diagnostic>) -> Option<(TopologyConfig, Vec<String>)> {
    let t = spec.get_ref();
    let span = spec.span();
    let explicit = !t.nodes.is_empty() || !t.arcs.is_empty();
    let (cfg, names) = match (t.generator, explicit) {
        (Some(_), true) => {
            diags.push(Diagnostic::at(span, "give either a generator or explicit nodes and arcs, not both"));
            return None;
        }
        (None, false) => {
            diags.push(Diagnostic::at(span, "topology needs a generator or explicit nodes and arcs"));
            return None;
        }
        (Some(g), false) => {
            let param = |v: Option<usize>, what: &str| {
                v.filter(|&x| x >= 1).ok_or_else(|| format!("generator needs a positive `{what}`"))
            };
            let cfg = match g {
                Generator::Star => param(t.sources, "sources").map(TopologyConfig::star),
                Generator::BinaryTree => param(t.depth.map(|d| d as usize), "depth")
                    .and_then(|d| if d <= 16 { Ok(d) } else { Err("depth must be at most 16".into()) })
                    .map(|d| TopologyConfig::binary_tree(d as u32)),
                Generator::Chain => param(t.relays, "relays").map(TopologyConfig::chain),
            };
            match cfg {
                Ok(cfg) => {
                    let names = (0..cfg.roles.len()).map(|i| format!("n{i}")).collect();
                    (cfg, names)
                }
                Err(msg) => {
                    diags.push(Diagnostic::at(span, msg));
                    return None;
                }
            }
        }
        (None, true) => explicit_topology(t, diags)?,
    };
    let report = validate_graph(&cfg);
    if report.is_empty() {
        return Some((cfg, names));
    }
    for v in report.violations {
        let at = violation_span(&v, t, &cfg).unwrap_or_else(|| span.clone());
        diags.push(Diagnostic::at(at, describe(&v, &names)));
    }
    None
}

fn explicit_topology(t: &TopologySpec, diags: &mut Vec<Diagnostic>) -> Option<(TopologyConfig, Vec<String>)> {
    let mut cfg = TopologyConfig::new(t.mode);
    let mut ids: BTreeMap<&str, NodeId> = BTreeMap::new();
    let mut names = Vec::new();
    let before = diags.len();
    for node in &t.nodes {
        let n = node.get_ref();
        if ids.contains_key(n.name.as_str()) {
            diags.push(Diagnostic::at(node.span(), format!("node `{}` declared twice", n.name)));
            continue;
        }
        ids.insert(&n.name, cfg.add_node(n.role));
        names.push(n.name.clone());
    }
    for arc in &t.arcs {
        let (u, v) = arc.get_ref();
        match (ids.get(u.as_str()), ids.get(v.as_str())) {
            (Some(&a), Some(&b)) => {
                cfg.add_arc(a, b);
            }
            _ => {
                let missing = if ids.contains_key(u.as_str()) { v } else { u };
                diags.push(Diagnostic::at(arc.span(), format!("arc {u}→{v} references undeclared node `{missing}`")));
            }
        }
    }
    (diags.len() == before).then_some((cfg, names))
}

fn violation_span(v: &Violation, t: &TopologySpec, cfg: &TopologyConfig) -> Option<Range<usize>> {
    if t.generator.is_some() {
        return None;
    }
    match v {
        Violation::DanglingReference { arc } | Violation::CycleDetected { arc } | Violation::DuplicateArc { arc } => {
            let positions: Vec<usize> =
                cfg.arcs.iter().enumerate().filter(|(_, a)| *a == arc).map(|(i, _)| i).collect();
            // a duplicate points at its second occurrence
            let i = if matches!(v, Violation::DuplicateArc { .. }) { *positions.get(1)? } else { positions[0] };
            Some(t.arcs[i].span())
        }
        Violation::RoleConflict { node, .. } | Violation::TreeViolation { node, .. } => Some(t.nodes[node.0].span()),
        _ => None,
    }
}

fn describe(v: &Violation, names: &[String]) -> String {
    let name = |n: &NodeId| names.get(n.0).cloned().unwrap_or_else(|| n.to_string());
    match v {
        Violation::DanglingReference { arc } => format!("arc {}→{} references an undeclared node", arc.0, arc.1),
        Violation::CycleDetected { arc } => format!("arc {}→{} closes a directed cycle", name(&arc.0), name(&arc.1)),
        Violation::DuplicateArc { arc } => format!("arc {}→{} is declared more than once", name(&arc.0), name(&arc.1)),
        Violation::RoleConflict { node, reason } => format!("node {}: {reason}", name(node)),
        Violation::TreeViolation { node, reason } => format!("tree violation at {}: {reason}", name(node)),
        other => other.to_string(),
    }
}

fn check_application(app: &Spanned<ApplicationSpec>, diags: &mut Vec<Diagnostic>) {
    let mut bad = |msg: String| diags.push(Diagnostic::at(app.span(), msg));
    match app.get_ref() {
        ApplicationSpec::Rlnc { field_order, .. } => {
            if let Err(e) = field_degree(*field_order) {
                bad(e);
            }
        }
        ApplicationSpec::Neural { eta, dataset_size, .. } => {
            if !(eta.is_finite() && *eta > 0.0) {
                bad(format!("eta = {eta} must be positive"));
            }
            if *dataset_size == 0 {
                bad("dataset_size must be at least 1".into());
            }
        }
        ApplicationSpec::Consensus { w0 } if !w0.is_finite() => bad("w0 must be finite".into()),
        _ => {}
    }
}

fn check_sources(s: &SourceSpec) -> Result<(), String> {
    match *s {
        SourceSpec::Normal { mean, std } if !(mean.is_finite() && std.is_finite() && std >= 0.0) => {
            Err(format!("normal sources need finite mean and std >= 0 (got {mean}, {std})"))
        }
        SourceSpec::Uniform { low, high } if !(low.is_finite() && high.is_finite() && low < high) => {
            Err(format!("uniform sources need low < high (got {low}, {high})"))
        }
        SourceSpec::Constant { value } if !value.is_finite() => Err("constant source must be finite".into()),
        _ => Ok(()),
    }
}

fn field_degree(order: u32) -> Result<u32, String> {
    if order.is_power_of_two() && (2..=1 << 16).contains(&order) {
        Ok(order.trailing_zeros())
    } else {
        Err(format!("field_order {order} must be a power of two between 2 and 65536"))
    }
}

/// Builds the target for `n` sources.
fn target_function(c: &CapacitySpec, n: usize) -> Result<TargetFunction, String> {
    let f = match c.target.as_str() {
        "identity" => TargetFunction::Identity,
        "xor" => TargetFunction::Xor,
        "sum_mod_q" => TargetFunction::SumModQ,
        "max" => TargetFunction::Max,
        "min" => TargetFunction::Min,
        "table" => {
            let outputs = c.table.clone().ok_or("table target needs a `table` array")?;
            let expected = (c.q as usize).checked_pow(n as u32).unwrap_or(usize::MAX);
            if outputs.len() != expected {
                return Err(format!("table has {} entries, expected q^N = {expected}", outputs.len()));
            }
            TargetFunction::Table { outputs }
        }
        other => return Err(format!("unknown target `{other}`")),
    };
    if c.table.is_some() && c.target != "table" {
        return Err("`table` is only used with target = \"table\"".into());
    }
    if c.q < 2 {
        return Err(format!("alphabet size q = {} must be at least 2", c.q));
    }
    Ok(f)
}

/// Base instance, search space and `(K, L)` sweep.
pub type CapacityQuery = (SolvabilityInstance, SearchSpace, Vec<(usize, usize)>);

impl Resolved {
    /// Engine scenario; `None` when the file declares no application.
    pub fn scenario(&self) -> Option<Scenario> {
        let app = self.file.application.as_ref()?.get_ref();
        let application = match *app {
            ApplicationSpec::Forwarding {} => Application::Forwarding,
            ApplicationSpec::Sum {} => Application::Aggregate { op: AggregateOp::Sum },
            ApplicationSpec::Max {} => Application::Aggregate { op: AggregateOp::Max },
            ApplicationSpec::Min {} => Application::Aggregate { op: AggregateOp::Min },
            ApplicationSpec::Average {} => Application::Average,
            ApplicationSpec::Consensus { w0 } => Application::Consensus { w0 },
            ApplicationSpec::Rlnc { field_order, n_prime } => Application::Rlnc {
                field_degree: field_degree(field_order).expect("validated"),
                n_prime,
            },
            ApplicationSpec::Neural { eta, schedule, dataset_size } => Application::Neural {
                eta: match schedule {
                    Schedule::Constant => EtaSchedule::Constant { eta },
                    Schedule::Inverse => EtaSchedule::Inverse { scale: eta },
                },
                dataset_size,
            },
        };
        let failures = self.file.failures.as_ref().map(|f| f.get_ref().clone()).unwrap_or_default();
        let sources = match self.file.sources.as_ref().map(|s| s.get_ref().clone()) {
            None => SourceModel::default(),
            Some(SourceSpec::Normal { mean, std }) => SourceModel::Normal { mean, std },
            Some(SourceSpec::Uniform { low, high }) => SourceModel::Uniform { low, high },
            Some(SourceSpec::Constant { value }) => SourceModel::Constant { value },
        };
        Some(Scenario {
            graph: self.graph.clone(),
            application,
            generations: self.file.generations,
            seed: self.file.seed,
            failures: FailureModel {
                node_dropout_p: failures.node_dropout_p,
                message_loss_p: failures.message_loss_p,
                seed: self.file.seed,
            },
            packet_len: *self.file.packet_len.get_ref(),
            sources,
        })
    }

    /// Solvability query and sweep; `None` without a `[capacity]` table.
    pub fn capacity(&self) -> Option<CapacityQuery> {
        let c = self.file.capacity.as_ref()?.get_ref();
        let target = target_function(c, self.graph.sources().len()).expect("validated");
        let mut inst = SolvabilityInstance::new(self.graph.clone(), c.q, 1, 1, target);
        inst.cap = c.cap as u128;
        Some((inst, c.space, c.sweep.clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const STAR: &str = r#"
schema_version = 1
seed = 3
generations = 10

[topology]
generator = "star"
sources = 4

[application]
kind = "average"
"#;

    fn lines(text: &str) -> Vec<String> {
        resolve(text).unwrap_err().iter().map(|d| d.render("s.toml", text)).collect()
    }

    #[test]
    fn generator_scenario_resolves() {
        let r = resolve(STAR).unwrap();
        assert_eq!(r.graph.sources().len(), 4);
        let s = r.scenario().unwrap();
        assert_eq!(s.application, Application::Average);
        assert_eq!(s.generations, 10);
    }

    #[test]
    fn unknown_key_is_rejected_with_line() {
        let text = STAR.replace("sources = 4", "sources = 4\nfanout = 2");
        let out = lines(&text);
        assert_eq!(out.len(), 1);
        assert!(out[0].starts_with("s.toml:9:"), "{out:?}");
        assert!(out[0].contains("fanout"));
    }

    #[test]
    fn unknown_application_key_is_rejected() {
        let text = STAR.replace("kind = \"average\"", "kind = \"average\"\nwindow = 3");
        assert!(lines(&text)[0].contains("window"));
    }

    #[test]
    fn cycle_names_the_arc() {
        let text = r#"
schema_version = 1
seed = 1

[topology]
mode = "dag"
nodes = [
  { name = "s", role = "source" },
  { name = "a", role = "atomic" },
  { name = "b", role = "atomic" },
  { name = "d", role = "destination" },
]
arcs = [
  ["s", "a"],
  ["a", "b"],
  ["b", "a"],
  ["b", "d"],
]
"#;
        let out = lines(text);
        assert!(out.iter().any(|l| l.starts_with("s.toml:16:") && l.contains("b→a closes a directed cycle")), "{out:?}");
    }

    #[test]
    fn undeclared_node_is_reported() {
        let text = STAR.replace(
            "generator = \"star\"\nsources = 4",
            "nodes = [{ name = \"s\", role = \"source\" }, { name = \"d\", role = \"destination\" }]\narcs = [[\"s\", \"x\"]]",
        );
        assert!(lines(&text).iter().any(|l| l.contains("undeclared node `x`")));
    }

    #[test]
    fn bad_values_are_collected() {
        let text = format!(
            "{STAR}\n[failures]\nnode_dropout_p = 1.5\n",
        )
        .replace("schema_version = 1", "schema_version = 9");
        let out = lines(&text);
        assert_eq!(out.len(), 2, "{out:?}");
        assert!(out[0].contains("schema_version 9"));
        assert!(out[1].contains("not a probability"));
    }

    #[test]
    fn rlnc_field_order_is_checked() {
        let text = STAR.replace("kind = \"average\"", "kind = \"rlnc\"\nfield_order = 6\nn_prime = 4");
        assert!(lines(&text)[0].contains("power of two"));
        let ok = STAR.replace("kind = \"average\"", "kind = \"rlnc\"\nfield_order = 256\nn_prime = 4");
        let s = resolve(&ok).unwrap().scenario().unwrap();
        assert_eq!(s.application, Application::Rlnc { field_degree: 8, n_prime: 4 });
    }

    #[test]
    fn capacity_table_size_is_checked() {
        let text = format!("{STAR}\n[capacity]\ntarget = \"table\"\ntable = [0, 1]\n");
        assert!(lines(&text)[0].contains("q^N = 16"));
    }

    #[test]
    fn echo_round_trips() {
        let r = resolve(STAR).unwrap();
        let echo = toml::to_string(&r.file).unwrap();
        let again = resolve(&echo).unwrap();
        assert_eq!(again.scenario(), r.scenario());
    }
}
