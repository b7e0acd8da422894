//! Finite-difference verification of the analytic gradients on seeded random
//! graphs.
//!
//! Loss weights, the detection-quality factor, the temporal prefactor and
//! the argmax predecessor chains are held fixed while differencing; graphs
//! whose chains sit within `MARGIN` of an argmax tie are redrawn so the
//! central differences never straddle a switch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::detection::Detection;
use crate::error::Result;
use crate::flow::flows_from_logits;
use crate::graph::{build_graph, EdgeKind, GraphConfig, TemporalNorm, TrackingGraph};
use crate::loss::{
    flow_loss, log_scale, spatial_loss, temporal_from_velocities, temporal_loss, temporal_prefactor,
    term_gradients, total_loss, velocities, DetectionQuality, GradientSet, TermGradient, VelocityChains,
};
use crate::spectral::AdaptiveWeights;

const MARGIN: f64 = 1e-3;
pub const REL_TOL: f64 = 1e-5;
pub const ABS_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fault {
    #[default]
    None,
    /// Negates the spatial-term gradient (negative control).
    SpatialSign,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub trials: usize,
    pub seed: u64,
    pub h: f64,
    pub fault: Fault,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            trials: 100,
            seed: 0,
            h: 1e-6,
            fault: Fault::None,
        }
    }
}

/// Worst error seen for one gradient component.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ComponentError {
    pub max_rel: f64,
    pub max_abs: f64,
    pub checked: usize,
}

impl ComponentError {
    fn record(&mut self, analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        self.checked += 1;
        self.max_abs = self.max_abs.max(abs);
        if abs >= ABS_TOL {
            let rel = abs / analytic.abs().max(numeric.abs());
            self.max_rel = self.max_rel.max(rel);
        }
    }

    fn merge(&mut self, other: &ComponentError) {
        self.max_rel = self.max_rel.max(other.max_rel);
        self.max_abs = self.max_abs.max(other.max_abs);
        self.checked += other.checked;
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub trials: usize,
    pub flow: ComponentError,
    pub spatial: ComponentError,
    pub temporal: ComponentError,
    pub total: ComponentError,
    /// Edges where `|dL_flow/df| > w` before scaling.
    pub bound_violations: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

/// One random graph with random flows, weights and quality.
#[derive(Debug, Clone)]
pub struct GradcheckCase {
    pub graph: TrackingGraph,
    pub quality: DetectionQuality,
    pub weights: AdaptiveWeights,
}

fn argmax_margin(graph: &TrackingGraph, flows: &[f64]) -> f64 {
    let mut margin = f64::INFINITY;
    for j in 0..graph.n_nodes() {
        let mut vals: Vec<f64> = graph.in_edges[j]
            .iter()
            .filter(|&&e| graph.edges[e].kind == EdgeKind::Real)
            .map(|&e| flows[e])
            .collect();
        if vals.is_empty() {
            continue;
        }
        let inflow: f64 = vals.iter().sum();
        margin = margin.min((1.0 - inflow).abs());
        vals.push((1.0 - inflow).clamp(0.0, 1.0));
        vals.sort_by(|a, b| b.total_cmp(a));
        margin = margin.min(vals[0] - vals[1]);
    }
    margin
}

/// Draws a random graph: 3-5 frames, up to 5 objects with random presence,
/// random motion and appearance, random logits and dt.
pub fn random_case(rng: &mut ChaCha8Rng) -> Result<GradcheckCase> {
    loop {
        let n_frames = rng.random_range(3..=5);
        let n_obj = rng.random_range(1..=5);
        let dim = 4;
        let objs: Vec<([f64; 2], [f64; 2], Vec<f64>)> = (0..n_obj)
            .map(|_| {
                let p = [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)];
                let v = [rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)];
                let e = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                (p, v, e)
            })
            .collect();
        let mut frames: Vec<Vec<Detection>> = Vec::with_capacity(n_frames);
        for t in 0..n_frames {
            let mut frame = Vec::new();
            for (k, (p, v, e)) in objs.iter().enumerate() {
                if rng.random::<f64>() >= 0.85 {
                    continue;
                }
                let jx: f64 = 0.01 * rng.sample::<f64, _>(StandardNormal);
                let jy: f64 = 0.01 * rng.sample::<f64, _>(StandardNormal);
                let pos = [p[0] + v[0] * t as f64 + jx, p[1] + v[1] * t as f64 + jy];
                frame.push(Detection::new(t, pos, e.clone()).with_gt(k as u32));
            }
            frames.push(frame);
        }
        let norm = match rng.random_range(0..3) {
            0 => TemporalNorm::Linear,
            1 => TemporalNorm::None,
            _ => TemporalNorm::Adaptive,
        };
        let cfg = GraphConfig {
            window: 5,
            dt: rng.random_range(0.2..1.0),
            temporal_norm: norm,
            ..GraphConfig::default()
        };
        let mut graph = build_graph(&frames, &cfg)?;
        let logits: Vec<f64> = graph
            .edges
            .iter()
            .map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let flows = flows_from_logits(&graph, &logits, 1.0);
        if argmax_margin(&graph, &flows) < MARGIN {
            continue;
        }
        graph.set_flows(flows);
        let lambda_s = rng.random_range(0.05..0.95);
        let n_pred = rng.random_range(1..10);
        let n_gt = rng.random_range(1..10);
        let quality = DetectionQuality::from_counts(
            rng.random_range(0..=n_pred),
            rng.random_range(0..=n_gt),
            n_pred,
            n_gt,
            0.9,
        );
        return Ok(GradcheckCase {
            graph,
            quality,
            weights: AdaptiveWeights::fixed(lambda_s, 1.0 - lambda_s),
        });
    }
}

/// Central difference of `f` with respect to flow `e`, leaving the derived
/// source flows alone.
fn fd_flow(g: &TrackingGraph, e: usize, h: f64, f: &dyn Fn(&TrackingGraph) -> f64) -> f64 {
    let mut p = g.clone();
    p.flows[e] += h;
    let mut m = g.clone();
    m.flows[e] -= h;
    (f(&p) - f(&m)) / (2.0 * h)
}

fn fd_pos(g: &TrackingGraph, i: usize, c: usize, h: f64, f: &dyn Fn(&TrackingGraph) -> f64) -> f64 {
    let mut p = g.clone();
    p.nodes[i].position[c] += h;
    let mut m = g.clone();
    m.nodes[i].position[c] -= h;
    (f(&p) - f(&m)) / (2.0 * h)
}

fn check_term(
    g: &TrackingGraph,
    grad: &TermGradient,
    h: f64,
    f: &dyn Fn(&TrackingGraph) -> f64,
    err: &mut ComponentError,
) {
    for e in 0..g.n_real {
        err.record(grad.d_flow[e], fd_flow(g, e, h, f));
    }
    for i in 0..g.n_nodes() {
        for c in 0..2 {
            err.record(grad.d_pos[i][c], fd_pos(g, i, c, h, f));
        }
    }
}

/// Checks one case; returns the per-component errors and bound violations.
pub fn check_case(case: &GradcheckCase, h: f64, fault: Fault) -> Result<GradcheckReport> {
    let g = &case.graph;
    let q = case.quality;
    let w = case.weights;
    let mut terms = term_gradients(g, &q)?;
    if fault == Fault::SpatialSign {
        for v in terms.spatial.d_flow.iter_mut() {
            *v = -*v;
        }
        for p in terms.spatial.d_pos.iter_mut() {
            *p = [-p[0], -p[1]];
        }
    }
    let mut report = GradcheckReport::default();

    for (e, edge) in g.real_edges().iter().enumerate() {
        if terms.flow.d_flow[e].abs() > edge.weight {
            report.bound_violations += 1;
        }
    }

    let flow_f = |x: &TrackingGraph| flow_loss(x, &q);
    let spatial_f = |x: &TrackingGraph| spatial_loss(x);
    // chains and prefactor frozen at the base graph
    let chains = VelocityChains::from_flows(g, &g.flows);
    let c = temporal_prefactor(g, g.config.dt);
    let dt = g.config.dt;
    let temporal_f = |x: &TrackingGraph| {
        let vel = velocities(x, &chains, dt);
        temporal_from_velocities(x, &chains, &vel, c)
    };
    let total_f = |x: &TrackingGraph| {
        let vel = velocities(x, &chains, dt);
        let t = temporal_from_velocities(x, &chains, &vel, c);
        (flow_loss(x, &q) + w.lambda_s * spatial_loss(x) + w.lambda_t * t) * log_scale(x.n_real)
    };
    debug_assert!((temporal_f(g) - temporal_loss(g, dt).unwrap_or(f64::NAN)).abs() < 1e-9);
    debug_assert!((total_f(g) - total_loss(g, &q, &w).map(|b| b.final_loss).unwrap_or(f64::NAN)).abs() < 1e-9);

    check_term(g, &terms.flow, h, &flow_f, &mut report.flow);
    check_term(g, &terms.spatial, h, &spatial_f, &mut report.spatial);
    check_term(g, &terms.temporal, h, &temporal_f, &mut report.temporal);

    // velocity inputs of the temporal term
    let vel = velocities(g, &chains, dt);
    for i in 0..g.n_nodes() {
        let Some(v) = vel[i] else { continue };
        for k in 0..2 {
            let mut vp = vel.clone();
            let mut vm = vel.clone();
            vp[i] = Some({ let mut x = v; x[k] += h; x });
            vm[i] = Some({ let mut x = v; x[k] -= h; x });
            let fd = (temporal_from_velocities(g, &chains, &vp, c) - temporal_from_velocities(g, &chains, &vm, c)) / (2.0 * h);
            report.temporal.record(terms.temporal.d_vel[i][k], fd);
        }
    }

    let set = GradientSet::from_terms(&terms, &w, g.n_real, true);
    let combined = TermGradient {
        d_flow: set.d_flow,
        d_pos: set.d_pos,
        d_vel: set.d_vel,
    };
    check_term(g, &combined, h, &total_f, &mut report.total);
    report.trials = 1;
    Ok(report)
}

pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradcheckReport::default();
    for _ in 0..cfg.trials {
        let case = random_case(&mut rng)?;
        let r = check_case(&case, cfg.h, cfg.fault)?;
        report.flow.merge(&r.flow);
        report.spatial.merge(&r.spatial);
        report.temporal.merge(&r.temporal);
        report.total.merge(&r.total);
        report.bound_violations += r.bound_violations;
        report.trials += 1;
    }
    report.max_rel_err = [report.flow, report.spatial, report.temporal, report.total]
        .iter()
        .map(|c| c.max_rel)
        .fold(0.0, f64::max);
    report.passed = report.max_rel_err < REL_TOL && report.bound_violations == 0;
    Ok(report)
}
