//! The three loss terms, their weighted and log-normalized combination, and
//! hand-derived gradients.
//!
//! Sums range over real edges only; virtual source/sink edges carry no
//! geometry and are excluded from every term and from the edge count.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{EdgeKind, TemporalNorm, TrackingGraph};
use crate::spectral::AdaptiveWeights;

/// Distances below this are treated as coincident for the spatial gradient.
pub const COINCIDENT_EPS: f64 = 1e-12;

/// Detection-error counts and the resulting flow-term scale factor. The
/// factor is a constant for differentiation purposes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionQuality {
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub n_pred: usize,
    pub n_gt: usize,
    pub factor: f64,
    /// Set when either set was empty and the corresponding ratio was taken as 0.
    pub degenerate: bool,
}

impl DetectionQuality {
    pub fn perfect() -> Self {
        DetectionQuality {
            fp: 0,
            fn_: 0,
            n_pred: 0,
            n_gt: 0,
            factor: 1.0,
            degenerate: false,
        }
    }

    pub fn from_counts(fp: usize, fn_: usize, n_pred: usize, n_gt: usize, alpha: f64) -> Self {
        let fp_rate = if n_pred == 0 { 0.0 } else { fp as f64 / n_pred as f64 };
        let fn_rate = if n_gt == 0 { 0.0 } else { fn_ as f64 / n_gt as f64 };
        DetectionQuality {
            fp,
            fn_,
            n_pred,
            n_gt,
            factor: (-alpha * fp_rate - alpha * fn_rate).exp(),
            degenerate: n_pred == 0 || n_gt == 0,
        }
    }
}

/// Greedy one-to-one matching by ascending distance (index tie-break) under
/// `match_radius`. Returns matched `(pred, gt)` pairs.
pub fn greedy_match(
    predictions: &[[f64; 2]],
    ground_truth: &[[f64; 2]],
    match_radius: f64,
) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for (i, p) in predictions.iter().enumerate() {
        for (j, g) in ground_truth.iter().enumerate() {
            let d = ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2)).sqrt();
            if d < match_radius {
                pairs.push((d, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_p = vec![false; predictions.len()];
    let mut used_g = vec![false; ground_truth.len()];
    let mut out = Vec::new();
    for (_, i, j) in pairs {
        if !used_p[i] && !used_g[j] {
            used_p[i] = true;
            used_g[j] = true;
            out.push((i, j));
        }
    }
    out
}

pub fn detection_quality(
    predictions: &[[f64; 2]],
    ground_truth: &[[f64; 2]],
    match_radius: f64,
    alpha: f64,
) -> Result<DetectionQuality> {
    if !(match_radius > 0.0) {
        return Err(Error::RadiusNonPositive(match_radius));
    }
    let matched = greedy_match(predictions, ground_truth, match_radius).len();
    Ok(DetectionQuality::from_counts(
        predictions.len() - matched,
        ground_truth.len() - matched,
        predictions.len(),
        ground_truth.len(),
        alpha,
    ))
}

/// Per-frame matching with counts pooled over all frames.
pub fn window_quality(
    predictions: &[Vec<[f64; 2]>],
    ground_truth: &[Vec<[f64; 2]>],
    match_radius: f64,
    alpha: f64,
) -> Result<DetectionQuality> {
    if !(match_radius > 0.0) {
        return Err(Error::RadiusNonPositive(match_radius));
    }
    let (mut fp, mut fn_, mut np, mut ng) = (0, 0, 0, 0);
    for (p, g) in predictions.iter().zip(ground_truth) {
        let m = greedy_match(p, g, match_radius).len();
        fp += p.len() - m;
        fn_ += g.len() - m;
        np += p.len();
        ng += g.len();
    }
    Ok(DetectionQuality::from_counts(fp, fn_, np, ng, alpha))
}

/// Argmax-predecessor chains used to define velocities. `pred[j]` is the
/// source of the incoming real edge with the largest flow, or `None` when the
/// virtual source (unmet inflow) dominates or no real edge enters `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VelocityChains {
    pub pred: Vec<Option<usize>>,
    pub pred_edge: Vec<Option<usize>>,
}

impl VelocityChains {
    pub fn from_flows(graph: &TrackingGraph, flows: &[f64]) -> Self {
        let n = graph.n_nodes();
        let mut pred = vec![None; n];
        let mut pred_edge = vec![None; n];
        for j in 0..n {
            let mut inflow = 0.0;
            let mut best: Option<(usize, f64)> = None;
            for &e in &graph.in_edges[j] {
                if graph.edges[e].kind != EdgeKind::Real {
                    continue;
                }
                inflow += flows[e];
                if best.is_none_or(|(_, f)| flows[e] > f) {
                    best = Some((e, flows[e]));
                }
            }
            let source = (1.0 - inflow).clamp(0.0, 1.0);
            if let Some((e, f)) = best {
                if f > source {
                    pred[j] = Some(graph.edges[e].from);
                    pred_edge[j] = Some(e);
                }
            }
        }
        VelocityChains { pred, pred_edge }
    }

    /// Nodes whose velocity change is defined (two predecessors deep).
    pub fn has_change(&self, i: usize) -> bool {
        matches!(self.pred[i], Some(k) if self.pred[k].is_some())
    }
}

fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

fn norm2(a: [f64; 2]) -> f64 {
    a[0] * a[0] + a[1] * a[1]
}

pub fn velocities(graph: &TrackingGraph, chains: &VelocityChains, dt: f64) -> Vec<Option<[f64; 2]>> {
    (0..graph.n_nodes())
        .map(|j| {
            chains.pred[j].map(|k| {
                let d = sub(graph.nodes[j].position, graph.nodes[k].position);
                [d[0] / dt, d[1] / dt]
            })
        })
        .collect()
}

/// Multiplier in front of the velocity-change sum.
pub fn temporal_prefactor(graph: &TrackingGraph, dt: f64) -> f64 {
    match graph.config.temporal_norm {
        TemporalNorm::Linear => 1.0 / dt,
        TemporalNorm::None => 1.0,
        TemporalNorm::Adaptive => 1.0 / graph.mean_displacement.max(1e-6),
    }
}

/// Real outgoing flow of node `i` (sink excluded).
fn real_out_flow(graph: &TrackingGraph, flows: &[f64], i: usize) -> f64 {
    graph.out_edges[i]
        .iter()
        .filter(|&&e| graph.edges[e].kind == EdgeKind::Real)
        .map(|&e| flows[e])
        .sum()
}

pub fn flow_loss(graph: &TrackingGraph, quality: &DetectionQuality) -> f64 {
    let mut s = 0.0;
    for (e, edge) in graph.real_edges().iter().enumerate() {
        s += edge.weight * graph.flows[e];
    }
    -s * quality.factor
}

pub fn spatial_loss(graph: &TrackingGraph) -> f64 {
    let mut s = 0.0;
    for (e, edge) in graph.real_edges().iter().enumerate() {
        let d = norm2(sub(graph.nodes[edge.from].position, graph.nodes[edge.to].position)).sqrt();
        s += edge.weight * d * graph.flows[e];
    }
    s
}

/// Temporal penalty with velocities supplied as inputs.
pub fn temporal_from_velocities(
    graph: &TrackingGraph,
    chains: &VelocityChains,
    vel: &[Option<[f64; 2]>],
    prefactor: f64,
) -> f64 {
    let mut s = 0.0;
    for i in 0..graph.n_nodes() {
        let Some(k) = chains.pred[i] else { continue };
        let (Some(vi), Some(vk)) = (vel[i], vel[k]) else { continue };
        s += norm2(sub(vi, vk)) * real_out_flow(graph, &graph.flows, i);
    }
    prefactor * s
}

pub fn temporal_loss(graph: &TrackingGraph, dt: f64) -> Result<f64> {
    if !(dt > 0.0) {
        return Err(Error::InvalidDt(dt));
    }
    let chains = VelocityChains::from_flows(graph, &graph.flows);
    let vel = velocities(graph, &chains, dt);
    Ok(temporal_from_velocities(
        graph,
        &chains,
        &vel,
        temporal_prefactor(graph, dt),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub flow: f64,
    pub spatial: f64,
    pub temporal: f64,
    pub lambda_s: f64,
    pub lambda_t: f64,
    pub total: f64,
    pub n_edges: usize,
    #[serde(rename = "final")]
    pub final_loss: f64,
}

impl LossBreakdown {
    pub fn combine(flow: f64, spatial: f64, temporal: f64, weights: &AdaptiveWeights, n_edges: usize) -> Self {
        let total = flow + weights.lambda_s * spatial + weights.lambda_t * temporal;
        LossBreakdown {
            flow,
            spatial,
            temporal,
            lambda_s: weights.lambda_s,
            lambda_t: weights.lambda_t,
            total,
            n_edges,
            final_loss: total * log_scale(n_edges),
        }
    }
}

/// `ln(|E| + 1)`.
pub fn log_scale(n_edges: usize) -> f64 {
    ((n_edges + 1) as f64).ln()
}

pub fn total_loss(
    graph: &TrackingGraph,
    quality: &DetectionQuality,
    weights: &AdaptiveWeights,
) -> Result<LossBreakdown> {
    let flow = flow_loss(graph, quality);
    let spatial = spatial_loss(graph);
    let temporal = temporal_loss(graph, graph.config.dt)?;
    Ok(LossBreakdown::combine(flow, spatial, temporal, weights, graph.n_real))
}

/// Partial derivatives of one unscaled term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermGradient {
    pub d_flow: Vec<f64>,
    pub d_pos: Vec<[f64; 2]>,
    pub d_vel: Vec<[f64; 2]>,
}

impl TermGradient {
    fn zeros(n_edges: usize, n_nodes: usize) -> Self {
        TermGradient {
            d_flow: vec![0.0; n_edges],
            d_pos: vec![[0.0; 2]; n_nodes],
            d_vel: vec![[0.0; 2]; n_nodes],
        }
    }
}

/// Raw gradients of each term before weighting and log scaling.
/// `temporal.d_pos` is the velocity gradient chained into positions.
#[derive(Debug, Clone, PartialEq)]
pub struct TermGradients {
    pub flow: TermGradient,
    pub spatial: TermGradient,
    pub temporal: TermGradient,
    /// Real edges whose endpoints coincide; their spatial position gradient is zero.
    pub coincident: Vec<usize>,
}

pub fn term_gradients(graph: &TrackingGraph, quality: &DetectionQuality) -> Result<TermGradients> {
    let dt = graph.config.dt;
    if !(dt > 0.0) {
        return Err(Error::InvalidDt(dt));
    }
    let (ne, nn) = (graph.edges.len(), graph.n_nodes());
    let flows = &graph.flows;
    let mut flow = TermGradient::zeros(ne, nn);
    let mut spatial = TermGradient::zeros(ne, nn);
    let mut temporal = TermGradient::zeros(ne, nn);
    let mut coincident = Vec::new();

    for (e, edge) in graph.real_edges().iter().enumerate() {
        flow.d_flow[e] = -edge.weight * quality.factor;

        let diff = sub(graph.nodes[edge.from].position, graph.nodes[edge.to].position);
        let d = norm2(diff).sqrt();
        spatial.d_flow[e] = edge.weight * d;
        if d < COINCIDENT_EPS {
            coincident.push(e);
        } else {
            let s = edge.weight * flows[e] / d;
            let (i, j) = (edge.from, edge.to);
            spatial.d_pos[i][0] += s * diff[0];
            spatial.d_pos[i][1] += s * diff[1];
            spatial.d_pos[j][0] -= s * diff[0];
            spatial.d_pos[j][1] -= s * diff[1];
        }
    }

    let chains = VelocityChains::from_flows(graph, flows);
    let vel = velocities(graph, &chains, dt);
    let c = temporal_prefactor(graph, dt);
    for i in 0..nn {
        let Some(k) = chains.pred[i] else { continue };
        let (Some(vi), Some(vk)) = (vel[i], vel[k]) else { continue };
        let dv = sub(vi, vk);
        let out = real_out_flow(graph, flows, i);
        let sq = norm2(dv);
        for &e in &graph.out_edges[i] {
            if graph.edges[e].kind == EdgeKind::Real {
                temporal.d_flow[e] = c * sq;
            }
        }
        let g = [2.0 * c * dv[0] * out, 2.0 * c * dv[1] * out];
        temporal.d_vel[i][0] += g[0];
        temporal.d_vel[i][1] += g[1];
        temporal.d_vel[k][0] -= g[0];
        temporal.d_vel[k][1] -= g[1];
    }
    // v_j = (p_j - p_pred(j)) / dt
    for j in 0..nn {
        let Some(k) = chains.pred[j] else { continue };
        let g = temporal.d_vel[j];
        temporal.d_pos[j][0] += g[0] / dt;
        temporal.d_pos[j][1] += g[1] / dt;
        temporal.d_pos[k][0] -= g[0] / dt;
        temporal.d_pos[k][1] -= g[1] / dt;
    }

    Ok(TermGradients {
        flow,
        spatial,
        temporal,
        coincident,
    })
}

/// Gradient of the final (weighted, log-normalized) loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientSet {
    /// Per edge; zero on virtual edges.
    pub d_flow: Vec<f64>,
    pub d_pos: Vec<[f64; 2]>,
    pub d_vel: Vec<[f64; 2]>,
    /// Whether velocity gradients were propagated into `d_pos`.
    pub chain_pos: bool,
    /// Real edges flagged for a zero spatial subgradient.
    pub coincident: Vec<usize>,
}

impl GradientSet {
    pub fn from_terms(
        terms: &TermGradients,
        weights: &AdaptiveWeights,
        n_edges: usize,
        chain_pos: bool,
    ) -> Self {
        let scale = log_scale(n_edges);
        let (ls, lt) = (weights.lambda_s, weights.lambda_t);
        let d_flow = terms
            .flow
            .d_flow
            .iter()
            .zip(&terms.spatial.d_flow)
            .zip(&terms.temporal.d_flow)
            .map(|((f, s), t)| (f + ls * s + lt * t) * scale)
            .collect();
        let d_pos = terms
            .spatial
            .d_pos
            .iter()
            .zip(&terms.temporal.d_pos)
            .map(|(s, t)| {
                let tc = if chain_pos { lt } else { 0.0 };
                [
                    (ls * s[0] + tc * t[0]) * scale,
                    (ls * s[1] + tc * t[1]) * scale,
                ]
            })
            .collect();
        let d_vel = terms
            .temporal
            .d_vel
            .iter()
            .map(|v| [lt * v[0] * scale, lt * v[1] * scale])
            .collect();
        GradientSet {
            d_flow,
            d_pos,
            d_vel,
            chain_pos,
            coincident: if ls > 0.0 {
                terms.coincident.clone()
            } else {
                Vec::new()
            },
        }
    }
}

pub fn gradients(
    graph: &TrackingGraph,
    quality: &DetectionQuality,
    weights: &AdaptiveWeights,
    chain_pos: bool,
) -> Result<GradientSet> {
    let terms = term_gradients(graph, quality)?;
    Ok(GradientSet::from_terms(&terms, weights, graph.n_real, chain_pos))
}
