//! Sim(3) pose graph with several nodes per view.
//!
//! Every forward pass on views `(i, j)` contributes node `v_i^j` (view `i` as
//! seen in that pass) and node `v_j^i`, joined by a *pose edge* carrying the
//! pass's relative pose with unit scale. The first node created for a view is
//! its hub; each later node of the view is tied to the hub by a *scale edge*
//! whose rigid part is the identity and whose scale comes from the weighted
//! least-squares fit between the two pointmaps of that view.
//!
//! Conventions:
//! - node pose: world-from-camera, in the units of the pass that produced it;
//! - edge residual: `log(E · v_from⁻¹ · v_to)`, zero when the edge is met;
//! - pose edge: `from = v_i^j`, `to = v_j^i`, `E = T_ij` (frame `i` into `j`);
//! - scale edge: `from` = hub, `E = (I, 0, 1/s)` with `s = relative_scale(hub, node)`.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frontend::PairMeasurement;
use crate::scale::{fit_relative_scale, ScaleError, ScaleOptions};
use crate::sim3::{Matrix7, Sim3};
use crate::two_view::LocalPointmap;

pub const DUMP_HEADER: &str = "simgraph-graph";
pub const DUMP_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GraphError {
    #[error("pass {0} was already ingested")]
    DuplicatePass(u64),
    #[error("pass {pass} pairs view {view} with itself")]
    SelfPair { pass: u64, view: usize },
    #[error("scale fit for view {view} failed: {source}")]
    Scale { view: usize, source: ScaleError },
    #[error("view {0} has a hub node but its pointmap is unavailable")]
    MissingHubPointmap(usize),
    #[error("no node {0}")]
    MissingNode(NodeKey),
    #[error("invalid graph config: {0}")]
    InvalidConfig(String),
    #[error("graph dump line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Node `v_view^paired_with`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeKey {
    pub view: usize,
    pub paired_with: usize,
}

impl NodeKey {
    pub fn new(view: usize, paired_with: usize) -> Self {
        Self { view, paired_with }
    }
}

impl fmt::Display for NodeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "v{}^{}", self.view, self.paired_with)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub key: NodeKey,
    pub pose: Sim3,
    pub is_first_processed: bool,
    /// Largest pointmap confidence this node was created with.
    pub best_confidence: f64,
    pub pass_id: u64,
    /// False when the node could not be reached from an initialized node.
    pub initialized: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EdgeKind {
    Pose,
    Scale,
}

impl fmt::Display for EdgeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EdgeKind::Pose => "pose",
            EdgeKind::Scale => "scale",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub kind: EdgeKind,
    pub from: NodeKey,
    pub to: NodeKey,
    pub measurement: Sim3,
    pub information: Matrix7,
}

/// Maps confidences to information matrices.
///
/// Pose edges: `max(w, min_weight) · diag(κ_ρ·I₃, κ_φ·I₃, κ_σ)`.
/// Scale edges: `diag(stiffness·I₆, κ_σ · weight_mass)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InformationModel {
    pub kappa_rho: f64,
    pub kappa_phi: f64,
    pub kappa_sigma: f64,
    pub rigid_stiffness: f64,
    pub min_weight: f64,
}

impl Default for InformationModel {
    fn default() -> Self {
        Self {
            kappa_rho: 1.0,
            kappa_phi: 1.0,
            kappa_sigma: 1.0,
            rigid_stiffness: 1e4,
            min_weight: 1e-9,
        }
    }
}

impl InformationModel {
    pub fn pose(&self, confidence: f64) -> Matrix7 {
        let w = confidence.max(self.min_weight);
        let (r, p, s) = (self.kappa_rho, self.kappa_phi, self.kappa_sigma);
        Matrix7::from_diagonal(&[r, r, r, p, p, p, s].into()) * w
    }

    pub fn scale(&self, weight_mass: f64) -> Matrix7 {
        let k = self.rigid_stiffness;
        let s = self.kappa_sigma * weight_mass.max(self.min_weight);
        Matrix7::from_diagonal(&[k, k, k, k, k, k, s].into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    /// Each view is paired with up to this many predecessors.
    pub neighbors: usize,
    /// Loop candidates need confidence strictly above this.
    pub loop_threshold: f64,
    pub information: InformationModel,
    /// Drops low-weight pixels from scale fits.
    pub scale_min_weight: Option<f64>,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            neighbors: 2,
            loop_threshold: 0.75,
            information: InformationModel::default(),
            scale_min_weight: None,
        }
    }
}

impl GraphConfig {
    pub fn validate(&self) -> Result<(), GraphError> {
        let o = &self.information;
        if self.neighbors < 1 {
            return Err(GraphError::InvalidConfig("neighbors must be at least 1".into()));
        }
        if !(self.loop_threshold > 0.0 && self.loop_threshold < 1.0) {
            return Err(GraphError::InvalidConfig(format!("loop_threshold = {} is outside (0, 1)", self.loop_threshold)));
        }
        for (name, v) in [
            ("kappa_rho", o.kappa_rho),
            ("kappa_phi", o.kappa_phi),
            ("kappa_sigma", o.kappa_sigma),
            ("rigid_stiffness", o.rigid_stiffness),
            ("min_weight", o.min_weight),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(GraphError::InvalidConfig(format!("{name} = {v} must be positive")));
            }
        }
        Ok(())
    }
}

/// Passes `(i, j)` with `j − neighbors ≤ i < j`, in ingestion order.
pub fn neighbor_pairs(num_views: usize, neighbors: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for j in 1..num_views {
        for i in j.saturating_sub(neighbors)..j {
            out.push((i, j));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoopDecision {
    Accepted,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PoseGraph {
    pub config: GraphConfig,
    nodes: Vec<Node>,
    index: BTreeMap<NodeKey, usize>,
    edges: Vec<Edge>,
    hubs: BTreeMap<usize, usize>,
    hub_pointmaps: BTreeMap<usize, LocalPointmap>,
    passes: BTreeSet<u64>,
    loop_passes: BTreeSet<u64>,
}

/// One side of a pass, prepared before the graph is touched.
struct Side<'a> {
    key: NodeKey,
    pointmap: &'a LocalPointmap,
    exists: bool,
    scale_edge: Option<Edge>,
}

impl PoseGraph {
    pub fn new(config: GraphConfig) -> Result<Self, GraphError> {
        config.validate()?;
        Ok(Self {
            config,
            ..Self::default()
        })
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn node(&self, key: NodeKey) -> Option<&Node> {
        self.index.get(&key).map(|&i| &self.nodes[i])
    }

    pub fn node_index(&self, key: NodeKey) -> Option<usize> {
        self.index.get(&key).copied()
    }

    /// Hub node of `view`.
    pub fn hub(&self, view: usize) -> Option<&Node> {
        self.hubs.get(&view).map(|&i| &self.nodes[i])
    }

    pub fn views(&self) -> impl Iterator<Item = usize> + '_ {
        self.hubs.keys().copied()
    }

    pub fn nodes_of_view(&self, view: usize) -> impl Iterator<Item = &Node> + '_ {
        self.index
            .range(NodeKey::new(view, 0)..=NodeKey::new(view, usize::MAX))
            .map(|(_, &i)| &self.nodes[i])
    }

    pub fn num_passes(&self) -> usize {
        self.passes.len()
    }

    /// Pose edges that came in through loop closure.
    pub fn num_loop_edges(&self) -> usize {
        self.loop_passes.len()
    }

    pub fn count_edges(&self, kind: EdgeKind) -> usize {
        self.edges.iter().filter(|e| e.kind == kind).count()
    }

    /// Node held fixed during optimization: the hub of the lowest view.
    pub fn anchor(&self) -> Option<usize> {
        self.hubs.values().next().copied()
    }

    pub fn set_pose(&mut self, index: usize, pose: Sim3) {
        self.nodes[index].pose = pose;
    }

    fn prepare_side<'a>(
        &self,
        view: usize,
        partner: usize,
        pointmap: &'a LocalPointmap,
    ) -> Result<Side<'a>, GraphError> {
        let key = NodeKey::new(view, partner);
        let exists = self.index.contains_key(&key);
        let mut scale_edge = None;
        if !exists {
            if let Some(&hub) = self.hubs.get(&view) {
                let hub_pm = self
                    .hub_pointmaps
                    .get(&view)
                    .ok_or(GraphError::MissingHubPointmap(view))?;
                let options = ScaleOptions {
                    min_weight: self.config.scale_min_weight,
                };
                let fit = fit_relative_scale(hub_pm, pointmap, &options)
                    .map_err(|source| GraphError::Scale { view, source })?;
                scale_edge = Some(Edge {
                    kind: EdgeKind::Scale,
                    from: self.nodes[hub].key,
                    to: key,
                    measurement: Sim3::from_scale(1.0 / fit.scale),
                    information: self.config.information.scale(fit.weight_mass),
                });
            }
        }
        Ok(Side {
            key,
            pointmap,
            exists,
            scale_edge,
        })
    }

    fn add_node(&mut self, side: &Side<'_>, pass_id: u64) -> usize {
        let idx = self.nodes.len();
        let view = side.key.view;
        let is_hub = !self.hubs.contains_key(&view);
        if is_hub {
            self.hubs.insert(view, idx);
            self.hub_pointmaps.insert(view, side.pointmap.clone());
        }
        let best_confidence = side
            .pointmap
            .valid_entries()
            .map(|(_, _, c)| c)
            .fold(0.0, f64::max);
        self.nodes.push(Node {
            key: side.key,
            pose: Sim3::identity(),
            is_first_processed: is_hub,
            best_confidence,
            pass_id,
            initialized: false,
        });
        self.index.insert(side.key, idx);
        idx
    }

    /// Adds the nodes and edges of one forward pass.
    pub fn ingest_pair(&mut self, m: &PairMeasurement) -> Result<(), GraphError> {
        if self.passes.contains(&m.pass_id) {
            return Err(GraphError::DuplicatePass(m.pass_id));
        }
        if m.view_i == m.view_j {
            return Err(GraphError::SelfPair {
                pass: m.pass_id,
                view: m.view_i,
            });
        }
        let side_i = self.prepare_side(m.view_i, m.view_j, &m.pointmap_i)?;
        let side_j = self.prepare_side(m.view_j, m.view_i, &m.pointmap_j)?;
        let any_initialized = self.nodes.iter().any(|n| n.initialized);

        let mut idx = [0usize; 2];
        let mut fresh = [false; 2];
        for (k, side) in [&side_i, &side_j].into_iter().enumerate() {
            fresh[k] = !side.exists;
            idx[k] = if side.exists {
                self.index[&side.key]
            } else {
                self.add_node(side, m.pass_id)
            };
            if let Some(edge) = &side.scale_edge {
                let hub = self.hubs[&side.key.view];
                let pose = self.nodes[hub].pose * edge.measurement.inverse();
                let init = self.nodes[hub].initialized;
                let node = &mut self.nodes[idx[k]];
                node.pose = pose;
                node.initialized = init;
                self.edges.push(edge.clone());
            }
        }

        let measured = *m.relative_pose.transform();
        let [a, b] = idx;
        let a_known = !fresh[0] || side_i.scale_edge.is_some();
        let b_known = !fresh[1] || side_j.scale_edge.is_some();
        if !a_known && !b_known {
            self.nodes[a].pose = Sim3::identity();
            self.nodes[a].initialized = !any_initialized;
        }
        if !b_known {
            self.nodes[b].pose = self.nodes[a].pose * measured.inverse();
            self.nodes[b].initialized = self.nodes[a].initialized;
        } else if !a_known {
            self.nodes[a].pose = self.nodes[b].pose * measured;
            self.nodes[a].initialized = self.nodes[b].initialized;
        }

        self.edges.push(Edge {
            kind: EdgeKind::Pose,
            from: side_i.key,
            to: side_j.key,
            measurement: measured,
            information: self.config.information.pose(m.relative_pose.confidence()),
        });
        self.passes.insert(m.pass_id);
        Ok(())
    }

    /// Inserts a loop pass if its confidence is strictly above `loop_threshold`.
    pub fn try_close_loop(&mut self, m: &PairMeasurement, loop_threshold: f64) -> Result<LoopDecision, GraphError> {
        if m.relative_pose.confidence() > loop_threshold {
            self.insert_loop(m)?;
            Ok(LoopDecision::Accepted)
        } else {
            Ok(LoopDecision::Rejected)
        }
    }

    /// Inserts a loop pass regardless of its confidence.
    pub fn insert_loop(&mut self, m: &PairMeasurement) -> Result<(), GraphError> {
        self.ingest_pair(m)?;
        self.loop_passes.insert(m.pass_id);
        Ok(())
    }

    /// Re-initializes every node by breadth-first propagation from the anchor.
    /// Nodes it cannot reach are set to identity and flagged uninitialized.
    /// Returns the number of unreachable nodes.
    pub fn reinitialize(&mut self) -> usize {
        let Some(anchor) = self.anchor() else {
            return 0;
        };
        let adjacency = self.adjacency();
        let mut seen = vec![false; self.nodes.len()];
        let mut queue = VecDeque::from([anchor]);
        seen[anchor] = true;
        self.nodes[anchor].pose = Sim3::identity();
        while let Some(u) = queue.pop_front() {
            for &(e, forward) in &adjacency[u] {
                let edge = &self.edges[e];
                let v = if forward { self.index[&edge.to] } else { self.index[&edge.from] };
                if seen[v] {
                    continue;
                }
                seen[v] = true;
                let pose = if forward {
                    self.nodes[u].pose * edge.measurement.inverse()
                } else {
                    self.nodes[u].pose * edge.measurement
                };
                self.nodes[v].pose = pose;
                queue.push_back(v);
            }
        }
        let mut unreachable = 0;
        for (node, ok) in self.nodes.iter_mut().zip(seen) {
            node.initialized = ok;
            if !ok {
                node.pose = Sim3::identity();
                unreachable += 1;
            }
        }
        unreachable
    }

    /// For each node, `(edge index, node is the edge's from-end)`.
    fn adjacency(&self) -> Vec<Vec<(usize, bool)>> {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for (e, edge) in self.edges.iter().enumerate() {
            if let (Some(&a), Some(&b)) = (self.index.get(&edge.from), self.index.get(&edge.to)) {
                adj[a].push((e, true));
                adj[b].push((e, false));
            }
        }
        adj
    }

    /// Nodes not connected to the anchor through any edges.
    pub fn disconnected_nodes(&self) -> Vec<NodeKey> {
        let Some(anchor) = self.anchor() else {
            return Vec::new();
        };
        let adjacency = self.adjacency();
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![anchor];
        seen[anchor] = true;
        while let Some(u) = stack.pop() {
            for &(e, forward) in &adjacency[u] {
                let edge = &self.edges[e];
                let v = self.index[if forward { &edge.to } else { &edge.from }];
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        self.nodes
            .iter()
            .zip(seen)
            .filter(|(_, s)| !s)
            .map(|(n, _)| n.key)
            .collect()
    }

    /// Checks edge invariants, hub uniqueness, and connectivity.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        for (i, e) in self.edges.iter().enumerate() {
            let from = self.node(e.from);
            let to = self.node(e.to);
            for key in [e.from, e.to] {
                if self.node(key).is_none() {
                    out.push(Violation::MissingEndpoint { edge: i, node: key });
                }
            }
            match e.kind {
                EdgeKind::Pose => {
                    if (e.measurement.scale() - 1.0).abs() > 1e-12 {
                        out.push(Violation::PoseEdgeScale {
                            edge: i,
                            scale: e.measurement.scale(),
                        });
                    }
                    if e.from.view != e.to.paired_with || e.to.view != e.from.paired_with {
                        out.push(Violation::PoseEdgeEndpoints { edge: i });
                    }
                }
                EdgeKind::Scale => {
                    let rigid = e.measurement.rotation_angle().max(e.measurement.translation().norm());
                    if rigid > 1e-12 {
                        out.push(Violation::ScaleEdgeRigidPart { edge: i, magnitude: rigid });
                    }
                    let hub_end = from.is_some_and(|n| n.is_first_processed);
                    if e.from.view != e.to.view || !hub_end || to.is_some_and(|n| n.is_first_processed) {
                        out.push(Violation::ScaleEdgeEndpoints { edge: i });
                    }
                }
            }
            let asym = (e.information - e.information.transpose()).amax();
            if asym > 1e-12 * e.information.amax().max(1.0) {
                out.push(Violation::OmegaNotSymmetric { edge: i });
            } else {
                let min_eig = e.information.symmetric_eigenvalues().min();
                if !(min_eig > 0.0) {
                    out.push(Violation::OmegaNotPositiveDefinite { edge: i, min_eigenvalue: min_eig });
                }
            }
        }
        let mut hubs_per_view: BTreeMap<usize, usize> = BTreeMap::new();
        for n in &self.nodes {
            *hubs_per_view.entry(n.key.view).or_default() += n.is_first_processed as usize;
        }
        for (view, count) in hubs_per_view {
            if count != 1 {
                out.push(Violation::HubCount { view, count });
            }
        }
        for node in self.disconnected_nodes() {
            out.push(Violation::Disconnected { node });
        }
        out
    }

    /// Writes the versioned line format: one config, pass, node, edge, or hub
    /// pointmap per line.
    pub fn dump(&self) -> String {
        use fmt::Write;
        let mut s = String::new();
        let c = &self.config;
        let o = &c.information;
        writeln!(s, "{DUMP_HEADER} {DUMP_VERSION}").unwrap();
        let min_w = c.scale_min_weight.map_or("none".to_string(), |v| format!("{v}"));
        writeln!(
            s,
            "config {} {} {} {} {} {} {} {}",
            c.neighbors, c.loop_threshold, o.kappa_rho, o.kappa_phi, o.kappa_sigma, o.rigid_stiffness, o.min_weight, min_w
        )
        .unwrap();
        for p in &self.passes {
            let tag = if self.loop_passes.contains(p) { "loop" } else { "odometry" };
            writeln!(s, "pass {p} {tag}").unwrap();
        }
        for n in &self.nodes {
            writeln!(
                s,
                "node {} {} {} {} {} {} {}",
                n.key.view,
                n.key.paired_with,
                n.is_first_processed as u8,
                n.initialized as u8,
                n.pass_id,
                n.best_confidence,
                fmt_sim3(&n.pose)
            )
            .unwrap();
        }
        for e in &self.edges {
            let information: Vec<String> = e.information.iter().map(|v| format!("{v}")).collect();
            writeln!(
                s,
                "edge {} {} {} {} {} {} {}",
                e.kind,
                e.from.view,
                e.from.paired_with,
                e.to.view,
                e.to.paired_with,
                fmt_sim3(&e.measurement),
                information.join(" ")
            )
            .unwrap();
        }
        for (view, pm) in &self.hub_pointmaps {
            write!(s, "hubmap {view} {} {}", pm.width(), pm.height()).unwrap();
            for i in 0..pm.len() {
                let p = pm.points()[i];
                write!(s, " {} {} {} {} {}", p.x, p.y, p.z, pm.confidence()[i], pm.valid()[i] as u8).unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn load(text: &str) -> Result<Self, GraphError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let (line, header) = lines.next().ok_or(GraphError::Parse {
            line: 1,
            message: "empty input".into(),
        })?;
        if header != format!("{DUMP_HEADER} {DUMP_VERSION}") {
            return Err(GraphError::Parse {
                line,
                message: format!("expected header '{DUMP_HEADER} {DUMP_VERSION}', got '{header}'"),
            });
        }
        let mut g = PoseGraph::default();
        let mut saw_config = false;
        for (line, text) in lines {
            let err = |message: String| GraphError::Parse { line, message };
            let mut f = Fields::new(text, line);
            match f.word()? {
                "config" => {
                    g.config.neighbors = f.parse()?;
                    g.config.loop_threshold = f.parse()?;
                    g.config.information = InformationModel {
                        kappa_rho: f.parse()?,
                        kappa_phi: f.parse()?,
                        kappa_sigma: f.parse()?,
                        rigid_stiffness: f.parse()?,
                        min_weight: f.parse()?,
                    };
                    g.config.scale_min_weight = match f.word()? {
                        "none" => None,
                        w => Some(w.parse().map_err(|_| err(format!("bad number '{w}'")))?),
                    };
                    g.config.validate().map_err(|e| err(e.to_string()))?;
                    saw_config = true;
                }
                "pass" => {
                    let id: u64 = f.parse()?;
                    match f.word()? {
                        "loop" => {
                            g.loop_passes.insert(id);
                        }
                        "odometry" => {}
                        other => return Err(err(format!("unknown pass tag '{other}'"))),
                    }
                    g.passes.insert(id);
                }
                "node" => {
                    let key = NodeKey::new(f.parse()?, f.parse()?);
                    let is_hub = f.flag()?;
                    let initialized = f.flag()?;
                    let pass_id = f.parse()?;
                    let best_confidence = f.parse()?;
                    let pose = f.sim3()?;
                    if g.index.contains_key(&key) {
                        return Err(err(format!("duplicate node {key}")));
                    }
                    let idx = g.nodes.len();
                    if is_hub && g.hubs.insert(key.view, idx).is_some() {
                        return Err(err(format!("second hub for view {}", key.view)));
                    }
                    g.index.insert(key, idx);
                    g.nodes.push(Node {
                        key,
                        pose,
                        is_first_processed: is_hub,
                        best_confidence,
                        pass_id,
                        initialized,
                    });
                }
                "edge" => {
                    let kind = match f.word()? {
                        "pose" => EdgeKind::Pose,
                        "scale" => EdgeKind::Scale,
                        other => return Err(err(format!("unknown edge kind '{other}'"))),
                    };
                    let from = NodeKey::new(f.parse()?, f.parse()?);
                    let to = NodeKey::new(f.parse()?, f.parse()?);
                    let measurement = f.sim3()?;
                    let mut information = Matrix7::zeros();
                    for v in information.iter_mut() {
                        *v = f.parse()?;
                    }
                    for k in [from, to] {
                        if !g.index.contains_key(&k) {
                            return Err(err(format!("edge references unknown node {k}")));
                        }
                    }
                    g.edges.push(Edge {
                        kind,
                        from,
                        to,
                        measurement,
                        information,
                    });
                }
                "hubmap" => {
                    let view: usize = f.parse()?;
                    let (w, h): (usize, usize) = (f.parse()?, f.parse()?);
                    let n = w * h;
                    let mut points = Vec::with_capacity(n);
                    let mut conf = Vec::with_capacity(n);
                    let mut valid = Vec::with_capacity(n);
                    for _ in 0..n {
                        points.push(Vector3::new(f.parse()?, f.parse()?, f.parse()?));
                        conf.push(f.parse()?);
                        valid.push(f.flag()?);
                    }
                    let pm = LocalPointmap::new(w, h, points, conf, valid).map_err(|e| err(e.to_string()))?;
                    g.hub_pointmaps.insert(view, pm);
                }
                other => return Err(err(format!("unknown record '{other}'"))),
            }
            f.finish()?;
        }
        if !saw_config {
            return Err(GraphError::Parse {
                line: 1,
                message: "missing config record".into(),
            });
        }
        Ok(g)
    }
}

fn fmt_sim3(t: &Sim3) -> String {
    let r = t.rotation().matrix();
    let p = t.translation();
    let mut parts: Vec<String> = Vec::with_capacity(13);
    for i in 0..3 {
        for j in 0..3 {
            parts.push(format!("{}", r[(i, j)]));
        }
    }
    parts.extend(p.iter().map(|v| format!("{v}")));
    parts.push(format!("{}", t.scale()));
    parts.join(" ")
}

struct Fields<'a> {
    it: std::str::SplitWhitespace<'a>,
    line: usize,
}

impl<'a> Fields<'a> {
    fn new(text: &'a str, line: usize) -> Self {
        Self {
            it: text.split_whitespace(),
            line,
        }
    }

    fn err(&self, message: String) -> GraphError {
        GraphError::Parse { line: self.line, message }
    }

    fn word(&mut self) -> Result<&'a str, GraphError> {
        self.it.next().ok_or_else(|| self.err("unexpected end of line".into()))
    }

    fn parse<T: std::str::FromStr>(&mut self) -> Result<T, GraphError> {
        let w = self.word()?;
        w.parse().map_err(|_| self.err(format!("bad number '{w}'")))
    }

    fn flag(&mut self) -> Result<bool, GraphError> {
        match self.word()? {
            "0" => Ok(false),
            "1" => Ok(true),
            w => Err(self.err(format!("expected 0 or 1, got '{w}'"))),
        }
    }

    fn sim3(&mut self) -> Result<Sim3, GraphError> {
        let mut r = Matrix3::zeros();
        for i in 0..3 {
            for j in 0..3 {
                r[(i, j)] = self.parse()?;
            }
        }
        let t = Vector3::new(self.parse()?, self.parse()?, self.parse()?);
        let s = self.parse()?;
        Sim3::try_new(Rotation3::from_matrix_unchecked(r), t, s).map_err(|e| self.err(e.to_string()))
    }

    fn finish(&mut self) -> Result<(), GraphError> {
        match self.it.next() {
            None => Ok(()),
            Some(w) => Err(self.err(format!("trailing field '{w}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    MissingEndpoint { edge: usize, node: NodeKey },
    PoseEdgeScale { edge: usize, scale: f64 },
    PoseEdgeEndpoints { edge: usize },
    ScaleEdgeRigidPart { edge: usize, magnitude: f64 },
    ScaleEdgeEndpoints { edge: usize },
    OmegaNotSymmetric { edge: usize },
    OmegaNotPositiveDefinite { edge: usize, min_eigenvalue: f64 },
    HubCount { view: usize, count: usize },
    Disconnected { node: NodeKey },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::MissingEndpoint { edge, node } => write!(f, "edge {edge}: endpoint {node} does not exist"),
            Violation::PoseEdgeScale { edge, scale } => write!(f, "edge {edge}: pose edge has scale {scale}, expected 1"),
            Violation::PoseEdgeEndpoints { edge } => {
                write!(f, "edge {edge}: pose edge endpoints do not come from one pass")
            }
            Violation::ScaleEdgeRigidPart { edge, magnitude } => {
                write!(f, "edge {edge}: scale edge has non-identity rigid part ({magnitude:e})")
            }
            Violation::ScaleEdgeEndpoints { edge } => {
                write!(f, "edge {edge}: scale edge must run from a view's hub to another node of that view")
            }
            Violation::OmegaNotSymmetric { edge } => write!(f, "edge {edge}: information matrix is not symmetric"),
            Violation::OmegaNotPositiveDefinite { edge, min_eigenvalue } => write!(
                f,
                "edge {edge}: information matrix is not positive definite (min eigenvalue {min_eigenvalue:e})"
            ),
            Violation::HubCount { view, count } => write!(f, "view {view}: {count} hub nodes, expected 1"),
            Violation::Disconnected { node } => write!(f, "node {node} is not connected to the anchor"),
        }
    }
}
