//! Windowed tracking graphs: detection nodes, consecutive-frame edges,
//! virtual source/sink, and the spatial/temporal adjacency matrices.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::detection::Detection;
use crate::error::{Error, Result};

/// How spatial adjacency between two normalized positions is computed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum AdjacencyMode {
    HardThreshold { radius: f64 },
    Sigmoid { k: f64, d0: f64 },
}

impl AdjacencyMode {
    pub const DEFAULT_THRESHOLD: AdjacencyMode = AdjacencyMode::HardThreshold { radius: 0.1 };
    pub const DEFAULT_SIGMOID: AdjacencyMode = AdjacencyMode::Sigmoid { k: 50.0, d0: 0.1 };

    pub fn value(&self, distance: f64) -> f64 {
        match *self {
            AdjacencyMode::HardThreshold { radius } => {
                if distance < radius {
                    1.0
                } else {
                    0.0
                }
            }
            AdjacencyMode::Sigmoid { k, d0 } => 1.0 / (1.0 + (-k * (d0 - distance)).exp()),
        }
    }
}

impl Default for AdjacencyMode {
    fn default() -> Self {
        Self::DEFAULT_THRESHOLD
    }
}

/// Prefactor applied to the velocity-change penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalNorm {
    /// `1 / dt`.
    #[default]
    Linear,
    /// Constant 1.
    None,
    /// `1 / d`, where `d` is the mean nearest-neighbour inter-frame displacement
    /// of the window measured at build time.
    Adaptive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphConfig {
    pub window: usize,
    pub alpha: f64,
    pub tau: f64,
    pub dt: f64,
    pub adjacency_mode: AdjacencyMode,
    pub gating_radius: Option<f64>,
    pub epsilon_sigma: f64,
    /// Appearance/geometry mix in edge weights (1 = appearance only).
    pub embed_weight_mix: f64,
    /// Width of the geometric edge-weight kernel, normalized units.
    pub sigma_w: f64,
    /// Scene size used to normalize positions into the unit square.
    pub scene_extent: [f64; 2],
    pub temporal_norm: TemporalNorm,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            window: 5,
            alpha: 0.9,
            tau: 0.1,
            dt: 1.0 / 30.0,
            adjacency_mode: AdjacencyMode::default(),
            gating_radius: None,
            epsilon_sigma: 1e-6,
            embed_weight_mix: 0.5,
            sigma_w: 0.1,
            scene_extent: [1.0, 1.0],
            temporal_norm: TemporalNorm::Linear,
        }
    }
}

impl GraphConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.window < 2 {
            return bad("window must be >= 2");
        }
        if !(self.tau > 0.0) {
            return bad("tau must be > 0");
        }
        if !(self.dt > 0.0) {
            return Err(Error::InvalidDt(self.dt));
        }
        if !(self.epsilon_sigma > 0.0) {
            return bad("epsilon_sigma must be > 0");
        }
        if !(0.0..=1.0).contains(&self.embed_weight_mix) {
            return bad("embed_weight_mix must lie in [0,1]");
        }
        if !(self.sigma_w > 0.0) {
            return bad("sigma_w must be > 0");
        }
        if !(self.scene_extent[0] > 0.0 && self.scene_extent[1] > 0.0) {
            return bad("scene_extent must be positive");
        }
        Ok(())
    }

    pub fn normalize(&self, p: [f64; 2]) -> [f64; 2] {
        [p[0] / self.scene_extent[0], p[1] / self.scene_extent[1]]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    /// Absolute frame index.
    pub frame: usize,
    /// Frame offset inside the window.
    pub slot: usize,
    /// Index of the detection inside its frame.
    pub index: usize,
    pub position: [f64; 2],
    pub embedding: Vec<f64>,
    pub confidence: f64,
    pub gt_id: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    Real,
    Sink,
    Source,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub kind: EdgeKind,
    pub weight: f64,
}

/// A tracking graph over one window.
///
/// Edge layout is fixed: real edges `0..n_real`, then one sink edge per node
/// (`n_real + i`), then one source edge per node (`n_real + n + i`). The
/// source and sink ids are `n` and `n + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackingGraph {
    pub config: GraphConfig,
    pub nodes: Vec<Node>,
    pub frames: Vec<Vec<usize>>,
    pub edges: Vec<Edge>,
    pub n_real: usize,
    pub flows: Vec<f64>,
    pub balance: Option<Vec<i8>>,
    pub source: usize,
    pub sink: usize,
    /// Per node: outgoing real edge ids followed by its sink edge.
    pub out_edges: Vec<Vec<usize>>,
    /// Per node: incoming real edge ids followed by its source edge.
    pub in_edges: Vec<Vec<usize>>,
    pub spatial_adjacency: DMatrix<f64>,
    pub temporal_adjacency: DMatrix<f64>,
    pub mean_displacement: f64,
    spatial_base: DMatrix<f64>,
}

fn cosine01(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let cos = if na > 0.0 && nb > 0.0 {
        (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
    } else {
        0.0
    };
    0.5 * (cos + 1.0)
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Association weight between a detection and one in the following frame:
/// a mix of appearance cosine similarity (mapped to [0,1]) and a Gaussian
/// kernel on normalized distance.
pub fn edge_weight(a: &Detection, b: &Detection, config: &GraphConfig) -> Result<f64> {
    if a.frame + 1 != b.frame {
        return Err(Error::NonConsecutive {
            from: a.frame,
            to: b.frame,
        });
    }
    weight_between(
        &a.embedding,
        a.position,
        &b.embedding,
        b.position,
        config,
    )
}

pub(crate) fn weight_between(
    ea: &[f64],
    pa: [f64; 2],
    eb: &[f64],
    pb: [f64; 2],
    config: &GraphConfig,
) -> Result<f64> {
    if ea.len() != eb.len() {
        return Err(Error::DimensionMismatch {
            expected: ea.len(),
            got: eb.len(),
        });
    }
    let beta = config.embed_weight_mix;
    let d = dist(config.normalize(pa), config.normalize(pb));
    let geo = (-d * d / (2.0 * config.sigma_w * config.sigma_w)).exp();
    let app = if beta > 0.0 { cosine01(ea, eb) } else { 0.0 };
    Ok((beta * app + (1.0 - beta) * geo).clamp(0.0, 1.0))
}

/// Spatial adjacency over a set of (already normalized) positions.
pub fn spatial_adjacency(positions: &[[f64; 2]], mode: AdjacencyMode) -> DMatrix<f64> {
    let n = positions.len();
    let mut a = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = mode.value(dist(positions[i], positions[j]));
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
    a
}

pub(crate) fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::NotSquare {
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    let n = m.nrows();
    let scale = m.iter().fold(0.0f64, |s, v| s.max(v.abs())).max(1.0);
    for i in 0..n {
        for j in (i + 1)..n {
            let diff = (m[(i, j)] - m[(j, i)]).abs();
            if diff > 1e-12 * scale || diff.is_nan() {
                return Err(Error::AsymmetricInput { i, j, diff });
            }
        }
    }
    Ok(())
}

/// Combinatorial Laplacian `D - A`.
pub fn laplacian(adjacency: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_symmetric(adjacency)?;
    let n = adjacency.nrows();
    let mut l = -adjacency.clone();
    for i in 0..n {
        let mut deg = 0.0;
        for j in 0..n {
            if j != i {
                deg += adjacency[(i, j)];
            }
        }
        l[(i, i)] = deg;
    }
    Ok(l)
}

/// Builds the graph for one window of frames. `frames[k]` holds the
/// detections of the k-th frame of the window.
pub fn build_graph(frames: &[Vec<Detection>], config: &GraphConfig) -> Result<TrackingGraph> {
    config.validate()?;
    if frames.len() < 2 {
        return Err(Error::EmptyWindow(frames.len()));
    }
    if frames.len() > config.window {
        return Err(Error::WindowTooWide {
            frames: frames.len(),
            window: config.window,
        });
    }

    let mut dim = None;
    let mut nodes = Vec::new();
    let mut slots = Vec::with_capacity(frames.len());
    for (slot, frame) in frames.iter().enumerate() {
        let mut ids = Vec::with_capacity(frame.len());
        for (index, d) in frame.iter().enumerate() {
            match dim {
                None => dim = Some(d.embedding.len()),
                Some(k) if k != d.embedding.len() => {
                    return Err(Error::DimensionMismatch {
                        expected: k,
                        got: d.embedding.len(),
                    })
                }
                _ => {}
            }
            ids.push(nodes.len());
            nodes.push(Node {
                frame: d.frame,
                slot,
                index,
                position: d.position,
                embedding: d.embedding.clone(),
                confidence: d.confidence,
                gt_id: d.gt_id,
            });
        }
        slots.push(ids);
    }

    let n = nodes.len();
    let mut edges = Vec::new();
    for slot in 0..frames.len() - 1 {
        for &i in &slots[slot] {
            for &j in &slots[slot + 1] {
                let (a, b) = (&nodes[i], &nodes[j]);
                if a.frame + 1 != b.frame {
                    return Err(Error::NonConsecutive {
                        from: a.frame,
                        to: b.frame,
                    });
                }
                if let Some(r) = config.gating_radius {
                    if dist(config.normalize(a.position), config.normalize(b.position)) > r {
                        continue;
                    }
                }
                let w = weight_between(&a.embedding, a.position, &b.embedding, b.position, config)?;
                edges.push(Edge {
                    from: i,
                    to: j,
                    kind: EdgeKind::Real,
                    weight: w,
                });
            }
        }
    }
    let n_real = edges.len();
    let (source, sink) = (n, n + 1);
    for i in 0..n {
        edges.push(Edge {
            from: i,
            to: sink,
            kind: EdgeKind::Sink,
            weight: 1.0,
        });
    }
    for i in 0..n {
        edges.push(Edge {
            from: source,
            to: i,
            kind: EdgeKind::Source,
            weight: 1.0,
        });
    }

    let mut out_edges = vec![Vec::new(); n];
    let mut in_edges = vec![Vec::new(); n];
    for (e, edge) in edges[..n_real].iter().enumerate() {
        out_edges[edge.from].push(e);
        in_edges[edge.to].push(e);
    }
    for i in 0..n {
        out_edges[i].push(n_real + i);
        in_edges[i].push(n_real + n + i);
    }

    // Spatial couplings between nodes in the same frame or adjacent frames.
    let mut spatial_base = DMatrix::zeros(n + 2, n + 2);
    for slot in 0..frames.len() {
        let mut ids = slots[slot].clone();
        if slot + 1 < frames.len() {
            ids.extend_from_slice(&slots[slot + 1]);
        }
        let pos: Vec<[f64; 2]> = ids
            .iter()
            .map(|&i| config.normalize(nodes[i].position))
            .collect();
        let a = spatial_adjacency(&pos, config.adjacency_mode);
        for (r, &i) in ids.iter().enumerate() {
            for (c, &j) in ids.iter().enumerate() {
                if i != j {
                    spatial_base[(i, j)] = a[(r, c)];
                }
            }
        }
    }

    let mut disp_sum = 0.0;
    let mut disp_count = 0usize;
    for slot in 1..frames.len() {
        for &j in &slots[slot] {
            let pj = config.normalize(nodes[j].position);
            let best = slots[slot - 1]
                .iter()
                .map(|&i| dist(config.normalize(nodes[i].position), pj))
                .fold(f64::INFINITY, f64::min);
            if best.is_finite() {
                disp_sum += best;
                disp_count += 1;
            }
        }
    }
    let mean_displacement = if disp_count > 0 {
        disp_sum / disp_count as f64
    } else {
        0.0
    };

    let mut graph = TrackingGraph {
        config: config.clone(),
        nodes,
        frames: slots,
        flows: vec![0.0; edges.len()],
        edges,
        n_real,
        balance: None,
        source,
        sink,
        out_edges,
        in_edges,
        spatial_adjacency: DMatrix::zeros(n + 2, n + 2),
        temporal_adjacency: DMatrix::zeros(n + 2, n + 2),
        mean_displacement,
        spatial_base,
    };
    if graph.nodes.iter().all(|nd| nd.gt_id.is_some()) {
        graph.balance = crate::flow::balance_for_graph(&graph).ok();
    }
    let state = crate::flow::init_flows(&graph, config.tau);
    graph.set_flows(state.flows);
    Ok(graph)
}

impl TrackingGraph {
    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn real_edges(&self) -> &[Edge] {
        &self.edges[..self.n_real]
    }

    pub fn sink_edge(&self, node: usize) -> usize {
        self.n_real + node
    }

    pub fn source_edge(&self, node: usize) -> usize {
        self.n_real + self.nodes.len() + node
    }

    pub fn n_slots(&self) -> usize {
        self.frames.len()
    }

    /// Replaces the flow vector. Source flows are derived as the unmet
    /// incoming mass `clamp(1 - sum of real inflow, 0, 1)`; both adjacency
    /// matrices are rebuilt.
    pub fn set_flows(&mut self, mut flows: Vec<f64>) {
        assert_eq!(flows.len(), self.edges.len(), "flow vector length");
        let n = self.nodes.len();
        for j in 0..n {
            let mut inflow = 0.0;
            for &e in &self.in_edges[j] {
                if self.edges[e].kind == EdgeKind::Real {
                    inflow += flows[e];
                }
            }
            flows[self.n_real + n + j] = (1.0 - inflow).clamp(0.0, 1.0);
        }
        self.flows = flows;
        let (s, t) = self.adjacencies(&self.flows);
        self.spatial_adjacency = s;
        self.temporal_adjacency = t;
    }

    /// Spatial and temporal adjacency for a given flow vector, over the real
    /// nodes plus source and sink. Virtual edges carry their flow in both.
    pub fn adjacencies(&self, flows: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut spatial = self.spatial_base.clone();
        let size = self.nodes.len() + 2;
        let mut temporal = DMatrix::zeros(size, size);
        for (e, edge) in self.edges.iter().enumerate() {
            let v = match edge.kind {
                EdgeKind::Real => flows[e] * edge.weight,
                EdgeKind::Sink | EdgeKind::Source => flows[e],
            };
            let (i, j) = (edge.from, edge.to);
            temporal[(i, j)] = v;
            temporal[(j, i)] = v;
            if edge.kind != EdgeKind::Real {
                spatial[(i, j)] = v;
                spatial[(j, i)] = v;
            }
        }
        (spatial, temporal)
    }

    pub fn laplacians(&self) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        Ok((
            laplacian(&self.spatial_adjacency)?,
            laplacian(&self.temporal_adjacency)?,
        ))
    }

    /// Approximate heap footprint in bytes: node and edge storage, flows,
    /// adjacency lists and the three dense `(n + 2)^2` matrices.
    pub fn approx_bytes(&self) -> usize {
        let f = std::mem::size_of::<f64>();
        let n = self.nodes.len();
        let dim = self.nodes.first().map_or(0, |nd| nd.embedding.len());
        let nodes = n * (std::mem::size_of::<Node>() + dim * f);
        let edges = self.edges.len() * (std::mem::size_of::<Edge>() + f);
        let lists = 2 * self.edges.len() * std::mem::size_of::<usize>();
        let dense = 3 * (n + 2) * (n + 2) * f;
        nodes + edges + lists + dense
    }

    pub fn dump(&self) -> GraphDump {
        GraphDump {
            nodes: self
                .nodes
                .iter()
                .enumerate()
                .map(|(id, n)| NodeDump {
                    id,
                    frame: n.frame,
                    index: n.index,
                    x: n.position[0],
                    y: n.position[1],
                    gt_id: n.gt_id,
                })
                .collect(),
            source: self.source,
            sink: self.sink,
            edges: self
                .edges
                .iter()
                .zip(&self.flows)
                .map(|(e, &f)| EdgeDump {
                    from: e.from,
                    to: e.to,
                    kind: e.kind,
                    weight: e.weight,
                    flow: f,
                })
                .collect(),
            balance: self.balance.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeDump {
    pub id: usize,
    pub frame: usize,
    pub index: usize,
    pub x: f64,
    pub y: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gt_id: Option<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EdgeDump {
    pub from: usize,
    pub to: usize,
    pub kind: EdgeKind,
    pub weight: f64,
    pub flow: f64,
}

/// Debug serialization of a graph.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphDump {
    pub nodes: Vec<NodeDump>,
    pub source: usize,
    pub sink: usize,
    pub edges: Vec<EdgeDump>,
    pub balance: Option<Vec<i8>>,
}
