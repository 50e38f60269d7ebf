//! The computation topology: sources, atomic nodes and destinations joined by
//! directed arcs, plus the topology-processor operations on it.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub usize);

impl NodeId {
    #[inline]
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

pub type Arc = (NodeId, NodeId);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeRole {
    Source,
    Atomic,
    Destination,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphMode {
    /// Directed rooted tree: one destination, every other node has exactly
    /// one outgoing arc, sources are leaves.
    #[default]
    Tree,
    /// General directed acyclic graph.
    Dag,
}

/// Declarative description of a topology. Node ids are positions in `roles`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TopologyConfig {
    pub mode: GraphMode,
    pub roles: Vec<NodeRole>,
    pub arcs: Vec<Arc>,
}

impl TopologyConfig {
    pub fn new(mode: GraphMode) -> Self {
        TopologyConfig { mode, roles: Vec::new(), arcs: Vec::new() }
    }

    pub fn add_node(&mut self, role: NodeRole) -> NodeId {
        self.roles.push(role);
        NodeId(self.roles.len() - 1)
    }

    pub fn add_arc(&mut self, from: NodeId, to: NodeId) -> &mut Self {
        self.arcs.push((from, to));
        self
    }

    /// Declares `children` as the in-neighborhood of `parent`.
    pub fn set_children(&mut self, parent: NodeId, children: &[NodeId]) -> &mut Self {
        self.arcs.retain(|&(_, to)| to != parent);
        self.arcs.extend(children.iter().map(|&c| (c, parent)));
        self
    }

    /// `n` sources feeding one atomic node that feeds the destination.
    pub fn star(n: usize) -> Self {
        let mut c = TopologyConfig::new(GraphMode::Tree);
        let sources: Vec<_> = (0..n).map(|_| c.add_node(NodeRole::Source)).collect();
        let relay = c.add_node(NodeRole::Atomic);
        let dest = c.add_node(NodeRole::Destination);
        for s in sources {
            c.add_arc(s, relay);
        }
        c.add_arc(relay, dest);
        c
    }

    /// Balanced binary tree with `2^depth` source leaves, atomic internal
    /// nodes and the destination at the root. Nodes are numbered level by
    /// level from the root (root = 0, children of `i` are `2i+1`, `2i+2`).
    pub fn binary_tree(depth: u32) -> Self {
        let mut c = TopologyConfig::new(GraphMode::Tree);
        let total = (1usize << (depth + 1)) - 1;
        let first_leaf = (1usize << depth) - 1;
        for i in 0..total {
            let role = if i == 0 {
                NodeRole::Destination
            } else if i >= first_leaf {
                NodeRole::Source
            } else {
                NodeRole::Atomic
            };
            c.add_node(role);
        }
        for i in 1..total {
            c.add_arc(NodeId(i), NodeId((i - 1) / 2));
        }
        c
    }

    /// One source, `relays` atomic nodes in series, one destination.
    pub fn chain(relays: usize) -> Self {
        let mut c = TopologyConfig::new(GraphMode::Tree);
        let mut prev = c.add_node(NodeRole::Source);
        for _ in 0..relays {
            let a = c.add_node(NodeRole::Atomic);
            c.add_arc(prev, a);
            prev = a;
        }
        let d = c.add_node(NodeRole::Destination);
        c.add_arc(prev, d);
        c
    }

    /// Random rooted tree with `sources` leaves and at most `max_depth` arcs
    /// between any source and the root. Every atomic node has at least one child.
    pub fn random_tree<R: Rng + ?Sized>(rng: &mut R, sources: usize, max_depth: usize) -> Self {
        assert!(sources >= 1 && max_depth >= 1);
        let mut c = TopologyConfig::new(GraphMode::Tree);
        let root = c.add_node(NodeRole::Destination);
        // internal nodes with their depth (root at 0)
        let mut internal = vec![(root, 0usize)];
        let atomic_budget = rng.random_range(0..=sources.max(1));
        for _ in 0..atomic_budget {
            let candidates: Vec<_> =
                internal.iter().copied().filter(|&(_, d)| d + 1 < max_depth).collect();
            if candidates.is_empty() {
                break;
            }
            let (parent, d) = candidates[rng.random_range(0..candidates.len())];
            let a = c.add_node(NodeRole::Atomic);
            c.add_arc(a, parent);
            internal.push((a, d + 1));
        }
        // Give every atomic node at least one source child, then scatter the rest.
        let childless: Vec<NodeId> = internal
            .iter()
            .skip(1)
            .map(|&(a, _)| a)
            .filter(|&a| !c.arcs.iter().any(|&(_, to)| to == a))
            .collect();
        let mut placed = 0;
        for a in childless {
            if placed == sources {
                break;
            }
            let s = c.add_node(NodeRole::Source);
            c.add_arc(s, a);
            placed += 1;
        }
        while placed < sources {
            let (parent, _) = internal[rng.random_range(0..internal.len())];
            let s = c.add_node(NodeRole::Source);
            c.add_arc(s, parent);
            placed += 1;
        }
        // Prune atomic nodes left without children (possible when sources run out).
        loop {
            let childless: Vec<NodeId> = (0..c.roles.len())
                .map(NodeId)
                .filter(|&v| c.roles[v.0] == NodeRole::Atomic)
                .filter(|&v| !c.arcs.iter().any(|&(_, to)| to == v))
                .collect();
            if childless.is_empty() {
                break;
            }
            c = c.without_nodes(&childless);
        }
        c
    }

    /// Copy with the given nodes (and their arcs) removed; ids are compacted.
    fn without_nodes(&self, removed: &[NodeId]) -> Self {
        let mut remap = vec![None; self.roles.len()];
        let mut roles = Vec::new();
        for (i, &r) in self.roles.iter().enumerate() {
            if !removed.contains(&NodeId(i)) {
                remap[i] = Some(NodeId(roles.len()));
                roles.push(r);
            }
        }
        let arcs = self
            .arcs
            .iter()
            .filter_map(|&(u, v)| Some((remap[u.0]?, remap[v.0]?)))
            .collect();
        TopologyConfig { mode: self.mode, roles, arcs }
    }
}

/// One broken invariant found by [`validate_graph`].
#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum Violation {
    #[error("arc {}→{} references an undeclared node", .arc.0, .arc.1)]
    DanglingReference { arc: Arc },
    #[error("arc {}→{} closes a directed cycle", .arc.0, .arc.1)]
    CycleDetected { arc: Arc },
    #[error("arc {}→{} is declared more than once", .arc.0, .arc.1)]
    DuplicateArc { arc: Arc },
    #[error("node {node}: {reason}")]
    RoleConflict { node: NodeId, reason: String },
    #[error("tree violation at {node}: {reason}")]
    TreeViolation { node: NodeId, reason: String },
    #[error("tree violation: {0}")]
    TreeShape(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has_cycle(&self) -> bool {
        self.violations.iter().any(|v| matches!(v, Violation::CycleDetected { .. }))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error(transparent)]
    Invalid(#[from] Violation),
    #[error("{0} is not a destination")]
    NotADestination(NodeId),
    #[error("operation requires a rooted tree")]
    NotATree,
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
}

/// Lists every violated invariant of `config`; empty iff it builds.
pub fn validate_graph(config: &TopologyConfig) -> ValidationReport {
    let n = config.roles.len();
    let mut violations = Vec::new();
    let mut seen = BTreeSet::new();
    let mut arcs = Vec::new();
    for &arc in &config.arcs {
        if arc.0 .0 >= n || arc.1 .0 >= n {
            violations.push(Violation::DanglingReference { arc });
        } else if !seen.insert(arc) {
            violations.push(Violation::DuplicateArc { arc });
        } else {
            arcs.push(arc);
        }
    }
    let mut out_deg = vec![0usize; n];
    let mut in_deg = vec![0usize; n];
    for &(u, v) in &arcs {
        out_deg[u.0] += 1;
        in_deg[v.0] += 1;
    }
    for (i, &role) in config.roles.iter().enumerate() {
        if role == NodeRole::Destination && out_deg[i] > 0 {
            violations.push(Violation::RoleConflict {
                node: NodeId(i),
                reason: format!("destination has {} outgoing arc(s)", out_deg[i]),
            });
        }
    }
    if let Some(arc) = find_back_arc(n, &arcs) {
        violations.push(Violation::CycleDetected { arc });
    }
    if config.mode == GraphMode::Tree {
        let dests = config.roles.iter().filter(|&&r| r == NodeRole::Destination).count();
        if dests != 1 {
            violations.push(Violation::TreeShape(format!(
                "expected exactly one destination, found {dests}"
            )));
        }
        for (i, &role) in config.roles.iter().enumerate() {
            let node = NodeId(i);
            if role != NodeRole::Destination && out_deg[i] != 1 {
                violations.push(Violation::TreeViolation {
                    node,
                    reason: format!("out-degree {} (must be 1)", out_deg[i]),
                });
            }
            if role == NodeRole::Source && in_deg[i] > 0 {
                violations.push(Violation::TreeViolation {
                    node,
                    reason: format!("source is not a leaf ({} incoming arc(s))", in_deg[i]),
                });
            }
        }
    }
    ValidationReport { violations }
}

/// Returns an arc on some directed cycle, found by iterative DFS.
fn find_back_arc(n: usize, arcs: &[Arc]) -> Option<Arc> {
    let mut out: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &(u, v) in arcs {
        out[u.0].push(v.0);
    }
    for adj in out.iter_mut() {
        adj.sort_unstable();
    }
    // 0 = unvisited, 1 = on stack, 2 = done
    let mut color = vec![0u8; n];
    for start in 0..n {
        if color[start] != 0 {
            continue;
        }
        let mut stack = vec![(start, 0usize)];
        color[start] = 1;
        while let Some(&mut (u, ref mut next)) = stack.last_mut() {
            if *next < out[u].len() {
                let v = out[u][*next];
                *next += 1;
                match color[v] {
                    0 => {
                        color[v] = 1;
                        stack.push((v, 0));
                    }
                    1 => return Some((NodeId(u), NodeId(v))),
                    _ => {}
                }
            } else {
                color[u] = 2;
                stack.pop();
            }
        }
    }
    None
}

/// A validated, immutable computation graph with derived neighborhoods.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NfcGraph {
    config: TopologyConfig,
    in_nbrs: Vec<Vec<NodeId>>,
    out_nbrs: Vec<Vec<NodeId>>,
    topo: Vec<NodeId>,
    topo_index: Vec<usize>,
    sources: Vec<NodeId>,
    source_index: Vec<Option<usize>>,
}

/// Validates `config` and derives neighborhoods and a topological order.
pub fn build_graph(config: TopologyConfig) -> Result<NfcGraph, GraphError> {
    let report = validate_graph(&config);
    if let Some(v) = report.violations.into_iter().next() {
        return Err(GraphError::Invalid(v));
    }
    let n = config.roles.len();
    let mut in_nbrs = vec![Vec::new(); n];
    let mut out_nbrs = vec![Vec::new(); n];
    for &(u, v) in &config.arcs {
        in_nbrs[v.0].push(u);
        out_nbrs[u.0].push(v);
    }
    for list in in_nbrs.iter_mut().chain(out_nbrs.iter_mut()) {
        list.sort_unstable();
    }
    let topo = kahn_order(&in_nbrs, &out_nbrs);
    let mut topo_index = vec![0; n];
    for (i, v) in topo.iter().enumerate() {
        topo_index[v.0] = i;
    }
    let mut sources = Vec::new();
    let mut source_index = vec![None; n];
    for (i, &r) in config.roles.iter().enumerate() {
        if r == NodeRole::Source {
            source_index[i] = Some(sources.len());
            sources.push(NodeId(i));
        }
    }
    Ok(NfcGraph { config, in_nbrs, out_nbrs, topo, topo_index, sources, source_index })
}

/// Topological order, smallest ready id first.
fn kahn_order(in_nbrs: &[Vec<NodeId>], out_nbrs: &[Vec<NodeId>]) -> Vec<NodeId> {
    let mut indeg: Vec<usize> = in_nbrs.iter().map(Vec::len).collect();
    let mut ready: BTreeSet<usize> = (0..indeg.len()).filter(|&i| indeg[i] == 0).collect();
    let mut order = Vec::with_capacity(indeg.len());
    while let Some(u) = ready.pop_first() {
        order.push(NodeId(u));
        for v in &out_nbrs[u] {
            indeg[v.0] -= 1;
            if indeg[v.0] == 0 {
                ready.insert(v.0);
            }
        }
    }
    order
}

/// Edits applied by [`set_topology`].
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TopologyPatch {
    pub add_nodes: Vec<NodeRole>,
    pub remove_arcs: Vec<Arc>,
    pub add_arcs: Vec<Arc>,
    pub mode: Option<GraphMode>,
}

impl TopologyPatch {
    /// Moves `child` so that its only outgoing arc points at `new_parent`.
    pub fn reparent(g: &NfcGraph, child: NodeId, new_parent: NodeId) -> Self {
        TopologyPatch {
            remove_arcs: g.out_neighbors(child).iter().map(|&p| (child, p)).collect(),
            add_arcs: vec![(child, new_parent)],
            ..Default::default()
        }
    }
}

/// Applies `patch` to a copy of `g`'s configuration and rebuilds. `g` itself
/// is untouched.
pub fn set_topology(g: &NfcGraph, patch: &TopologyPatch) -> Result<NfcGraph, GraphError> {
    let mut config = g.config.clone();
    if let Some(mode) = patch.mode {
        config.mode = mode;
    }
    config.roles.extend(patch.add_nodes.iter().copied());
    config.arcs.retain(|a| !patch.remove_arcs.contains(a));
    config.arcs.extend(patch.add_arcs.iter().copied());
    build_graph(config)
}

impl NfcGraph {
    pub fn config(&self) -> &TopologyConfig {
        &self.config
    }

    pub fn mode(&self) -> GraphMode {
        self.config.mode
    }

    pub fn is_tree(&self) -> bool {
        self.config.mode == GraphMode::Tree
    }

    pub fn node_count(&self) -> usize {
        self.config.roles.len()
    }

    pub fn arc_count(&self) -> usize {
        self.config.arcs.len()
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.node_count()).map(NodeId)
    }

    /// Arcs sorted by (tail, head).
    pub fn arcs(&self) -> Vec<Arc> {
        let mut arcs = self.config.arcs.clone();
        arcs.sort_unstable();
        arcs
    }

    pub fn role(&self, v: NodeId) -> NodeRole {
        self.config.roles[v.0]
    }

    /// In-neighborhood of `v`, sorted by id.
    pub fn in_neighbors(&self, v: NodeId) -> &[NodeId] {
        &self.in_nbrs[v.0]
    }

    pub fn out_neighbors(&self, v: NodeId) -> &[NodeId] {
        &self.out_nbrs[v.0]
    }

    pub fn in_degree(&self, v: NodeId) -> usize {
        self.in_nbrs[v.0].len()
    }

    pub fn out_degree(&self, v: NodeId) -> usize {
        self.out_nbrs[v.0].len()
    }

    /// Sources in id order; a source's position here is its source index.
    pub fn sources(&self) -> &[NodeId] {
        &self.sources
    }

    pub fn source_index(&self, v: NodeId) -> Option<usize> {
        self.source_index[v.0]
    }

    pub fn atomics(&self) -> Vec<NodeId> {
        self.with_role(NodeRole::Atomic)
    }

    pub fn destinations(&self) -> Vec<NodeId> {
        self.with_role(NodeRole::Destination)
    }

    fn with_role(&self, role: NodeRole) -> Vec<NodeId> {
        self.nodes().filter(|&v| self.role(v) == role).collect()
    }

    /// N, M, R.
    pub fn counts(&self) -> (usize, usize, usize) {
        (self.sources.len(), self.atomics().len(), self.destinations().len())
    }

    /// Deterministic topological order (smallest ready id first).
    pub fn topological_order(&self) -> &[NodeId] {
        &self.topo
    }

    pub fn topological_index(&self, v: NodeId) -> usize {
        self.topo_index[v.0]
    }

    /// The root of a tree-mode graph.
    pub fn root(&self) -> Result<NodeId, GraphError> {
        if !self.is_tree() {
            return Err(GraphError::NotATree);
        }
        Ok(self.destinations()[0])
    }

    /// Parent of `v` in a tree (`None` for the root).
    pub fn parent(&self, v: NodeId) -> Option<NodeId> {
        self.out_nbrs[v.0].first().copied()
    }

    /// Number of arcs from `v` to the root along parent links.
    pub fn depth(&self, v: NodeId) -> Result<usize, GraphError> {
        if !self.is_tree() {
            return Err(GraphError::NotATree);
        }
        let mut d = 0;
        let mut cur = v;
        while let Some(p) = self.parent(cur) {
            d += 1;
            cur = p;
        }
        Ok(d)
    }

    /// Height above the sources: 0 for nodes without inputs, otherwise one
    /// more than the highest child.
    pub fn levels(&self) -> Vec<usize> {
        let mut level = vec![0usize; self.node_count()];
        for &v in &self.topo {
            level[v.0] = self.in_nbrs[v.0].iter().map(|c| level[c.0] + 1).max().unwrap_or(0);
        }
        level
    }

    /// Source indices whose data can reach `v` (including `v` itself).
    pub fn upstream_sources(&self, v: NodeId) -> Vec<usize> {
        let mut seen = vec![false; self.node_count()];
        let mut queue = VecDeque::from([v]);
        seen[v.0] = true;
        let mut out = Vec::new();
        while let Some(u) = queue.pop_front() {
            if let Some(i) = self.source_index(u) {
                out.push(i);
            }
            for &w in &self.in_nbrs[u.0] {
                if !seen[w.0] {
                    seen[w.0] = true;
                    queue.push_back(w);
                }
            }
        }
        out.sort_unstable();
        out
    }

    /// True if `order` lists every node once and puts each arc's tail first.
    pub fn is_topological(&self, order: &[NodeId]) -> bool {
        if order.len() != self.node_count() {
            return false;
        }
        let mut pos = vec![usize::MAX; self.node_count()];
        for (i, v) in order.iter().enumerate() {
            if v.0 >= pos.len() || pos[v.0] != usize::MAX {
                return false;
            }
            pos[v.0] = i;
        }
        self.config.arcs.iter().all(|&(u, v)| pos[u.0] < pos[v.0])
    }

    /// A uniformly shuffled topological order (random ready node each step).
    pub fn random_topological_order<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<NodeId> {
        let mut indeg: Vec<usize> = self.in_nbrs.iter().map(Vec::len).collect();
        let mut ready: Vec<usize> = (0..indeg.len()).filter(|&i| indeg[i] == 0).collect();
        let mut order = Vec::with_capacity(indeg.len());
        while !ready.is_empty() {
            let u = ready.swap_remove(rng.random_range(0..ready.len()));
            order.push(NodeId(u));
            for v in &self.out_nbrs[u] {
                indeg[v.0] -= 1;
                if indeg[v.0] == 0 {
                    ready.push(v.0);
                }
            }
        }
        order
    }
}

/// Minimum number of unit-capacity arcs whose removal disconnects every
/// source from `dest`, computed as a max-flow from a super-source. Returns
/// 0 when no source reaches `dest`.
pub fn min_cut(g: &NfcGraph, dest: NodeId) -> Result<usize, GraphError> {
    if dest.0 >= g.node_count() {
        return Err(GraphError::UnknownNode(dest));
    }
    if g.role(dest) != NodeRole::Destination {
        return Err(GraphError::NotADestination(dest));
    }
    let n = g.node_count();
    let s = n;
    let unbounded = g.arc_count() as i64 + 1;
    let mut net = FlowNetwork::new(n + 1);
    for (u, v) in g.arcs() {
        net.add_edge(u.0, v.0, 1);
    }
    for &src in g.sources() {
        net.add_edge(s, src.0, unbounded);
    }
    Ok(net.max_flow(s, dest.0) as usize)
}

/// Like [`min_cut`], but each source may inject only one unit: the largest
/// number of sources that can reach `dest` over arc-disjoint paths. Unlike
/// [`min_cut`], a source with no path to `dest` lowers the value.
pub fn source_rate_cut(g: &NfcGraph, dest: NodeId) -> Result<usize, GraphError> {
    if dest.0 >= g.node_count() {
        return Err(GraphError::UnknownNode(dest));
    }
    if g.role(dest) != NodeRole::Destination {
        return Err(GraphError::NotADestination(dest));
    }
    let n = g.node_count();
    let mut net = FlowNetwork::new(n + 1);
    for (u, v) in g.arcs() {
        net.add_edge(u.0, v.0, 1);
    }
    for &src in g.sources() {
        net.add_edge(n, src.0, 1);
    }
    Ok(net.max_flow(n, dest.0) as usize)
}

/// Edmonds-Karp on an adjacency-list residual network.
struct FlowNetwork {
    adj: Vec<Vec<usize>>,
    to: Vec<usize>,
    cap: Vec<i64>,
}

impl FlowNetwork {
    fn new(n: usize) -> Self {
        FlowNetwork { adj: vec![Vec::new(); n], to: Vec::new(), cap: Vec::new() }
    }

    fn add_edge(&mut self, u: usize, v: usize, c: i64) {
        self.adj[u].push(self.to.len());
        self.to.push(v);
        self.cap.push(c);
        self.adj[v].push(self.to.len());
        self.to.push(u);
        self.cap.push(0);
    }

    fn max_flow(&mut self, s: usize, t: usize) -> i64 {
        let mut flow = 0;
        loop {
            let mut via = vec![usize::MAX; self.adj.len()];
            let mut queue = VecDeque::from([s]);
            let mut reached = false;
            while let Some(u) = queue.pop_front() {
                if u == t {
                    reached = true;
                    break;
                }
                for &e in &self.adj[u] {
                    let v = self.to[e];
                    if self.cap[e] > 0 && v != s && via[v] == usize::MAX {
                        via[v] = e;
                        queue.push_back(v);
                    }
                }
            }
            if !reached {
                return flow;
            }
            let mut push = i64::MAX;
            let mut v = t;
            while v != s {
                let e = via[v];
                push = push.min(self.cap[e]);
                v = self.to[e ^ 1];
            }
            let mut v = t;
            while v != s {
                let e = via[v];
                self.cap[e] -= push;
                self.cap[e ^ 1] += push;
                v = self.to[e ^ 1];
            }
            flow += push;
        }
    }
}
