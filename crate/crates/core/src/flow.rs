//! Flow parameterization and the gradient-descent loop.
//!
//! Each real node distributes unit outgoing flow over its real edges and its
//! sink edge through a temperature softmax of per-edge logits, so the
//! outgoing side of flow conservation holds by construction. Incoming flow is
//! only monitored: the source edge absorbs any unmet inflow and excess inflow
//! shows up as a residual.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::detection::Detection;
use crate::error::{Error, Result};
use crate::graph::{EdgeKind, TrackingGraph};
use crate::loss::{gradients, total_loss, DetectionQuality, LossBreakdown};
use crate::spectral::{AdaptiveWeights, WeightSchedule, WeightsMode};

/// Default sink logit, `ln 0.05`.
pub fn default_sink_logit() -> f64 {
    0.05f64.ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowState {
    /// One logit per edge; source-edge entries are unused.
    pub logits: Vec<f64>,
    /// One flow per edge; source-edge entries are derived from inflow.
    pub flows: Vec<f64>,
    pub eta: f64,
    pub step: usize,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub steps: usize,
    pub eta: f64,
    pub sink_logit: f64,
    pub weights_mode: WeightsMode,
    /// Per-step learning-rate multiplier (1 = constant rate).
    pub decay: f64,
    /// Divergence is reported when the final loss exceeds the initial loss by
    /// more than this multiple of the initial loss magnitude.
    pub divergence_factor: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            steps: 200,
            eta: 0.01,
            sink_logit: default_sink_logit(),
            weights_mode: WeightsMode::Adaptive,
            decay: 1.0,
            divergence_factor: 10.0,
        }
    }
}

/// Per-node outgoing softmax over `logits / tau`, then derived source flows.
pub fn flows_from_logits(graph: &TrackingGraph, logits: &[f64], tau: f64) -> Vec<f64> {
    let n = graph.n_nodes();
    let mut flows = vec![0.0; graph.edges.len()];
    for i in 0..n {
        let out = &graph.out_edges[i];
        let m = out
            .iter()
            .map(|&e| logits[e] / tau)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for &e in out {
            let v = (logits[e] / tau - m).exp();
            flows[e] = v;
            z += v;
        }
        for &e in out {
            flows[e] /= z;
        }
    }
    for j in 0..n {
        let inflow: f64 = graph.in_edges[j]
            .iter()
            .filter(|&&e| graph.edges[e].kind == EdgeKind::Real)
            .map(|&e| flows[e])
            .sum();
        flows[graph.source_edge(j)] = (1.0 - inflow).clamp(0.0, 1.0);
    }
    flows
}

pub fn init_logits(graph: &TrackingGraph, sink_logit: f64) -> Vec<f64> {
    graph
        .edges
        .iter()
        .map(|e| match e.kind {
            EdgeKind::Real => (e.weight + 1e-9).ln(),
            EdgeKind::Sink => sink_logit,
            EdgeKind::Source => 0.0,
        })
        .collect()
}

pub fn init_flows(graph: &TrackingGraph, tau: f64) -> FlowState {
    init_flows_with(graph, tau, default_sink_logit())
}

pub fn init_flows_with(graph: &TrackingGraph, tau: f64, sink_logit: f64) -> FlowState {
    let logits = init_logits(graph, sink_logit);
    let flows = flows_from_logits(graph, &logits, tau);
    FlowState {
        logits,
        flows,
        eta: 0.01,
        step: 0,
        tau,
    }
}

/// Pulls per-edge flow gradients back through the per-node softmax.
pub fn logit_gradient(graph: &TrackingGraph, flows: &[f64], d_flow: &[f64], tau: f64) -> Vec<f64> {
    let mut g = vec![0.0; graph.edges.len()];
    for out in &graph.out_edges {
        let mean: f64 = out.iter().map(|&e| flows[e] * d_flow[e]).sum();
        for &e in out {
            g[e] = flows[e] * (d_flow[e] - mean) / tau;
        }
    }
    g
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Accounting {
    /// Source inflow and sink outflow count; real nodes use b = 0.
    #[default]
    WithVirtual,
    /// Only real edges count; births and deaths are carried by b = +1 / -1.
    RealOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConservationReport {
    pub residuals: Vec<f64>,
    pub max_abs: f64,
    pub satisfied: bool,
}

pub const CONSERVATION_TOL: f64 = 1e-6;

/// `out - in - b` for every real node.
pub fn conservation_residual(
    graph: &TrackingGraph,
    flows: &[f64],
    balance: &[i8],
    accounting: Accounting,
    tol: f64,
) -> Result<ConservationReport> {
    let n = graph.n_nodes();
    if balance.len() != n {
        return Err(Error::MissingBalance {
            expected: n,
            got: balance.len(),
        });
    }
    let counts = |kind: EdgeKind| match accounting {
        Accounting::WithVirtual => true,
        Accounting::RealOnly => kind == EdgeKind::Real,
    };
    let residuals: Vec<f64> = (0..n)
        .map(|i| {
            let out: f64 = graph.out_edges[i]
                .iter()
                .filter(|&&e| counts(graph.edges[e].kind))
                .map(|&e| flows[e])
                .sum();
            let inn: f64 = graph.in_edges[i]
                .iter()
                .filter(|&&e| counts(graph.edges[e].kind))
                .map(|&e| flows[e])
                .sum();
            out - inn - balance[i] as f64
        })
        .collect();
    let max_abs = residuals.iter().fold(0.0f64, |m, r| m.max(r.abs()));
    Ok(ConservationReport {
        residuals,
        max_abs,
        satisfied: max_abs < tol,
    })
}

/// Soft conservation check with the source/sink convention (b = 0).
pub fn soft_residual(graph: &TrackingGraph, flows: &[f64]) -> ConservationReport {
    let zeros = vec![0i8; graph.n_nodes()];
    conservation_residual(graph, flows, &zeros, Accounting::WithVirtual, CONSERVATION_TOL)
        .expect("balance sized to graph")
}

/// Ground-truth balance labels for the frames in `window`: +1 on each
/// identity's first frame in the window, -1 on its last, 0 in between. An
/// identity seen in a single frame gets +1.
pub fn balance_from_gt(frames: &[Vec<Detection>], window: Range<usize>) -> Result<Vec<Vec<i8>>> {
    let slice = &frames[window];
    let mut first = std::collections::BTreeMap::new();
    let mut last = std::collections::BTreeMap::new();
    for (slot, frame) in slice.iter().enumerate() {
        for d in frame {
            let id = d.gt_id.ok_or(Error::MissingGtId { frame: d.frame })?;
            first.entry(id).or_insert(slot);
            last.insert(id, slot);
        }
    }
    Ok(slice
        .iter()
        .enumerate()
        .map(|(slot, frame)| {
            frame
                .iter()
                .map(|d| {
                    let id = d.gt_id.expect("checked above");
                    if first[&id] == slot {
                        1
                    } else if last[&id] == slot {
                        -1
                    } else {
                        0
                    }
                })
                .collect()
        })
        .collect())
}

/// `balance_from_gt` laid out in graph node order.
pub fn balance_for_graph(graph: &TrackingGraph) -> Result<Vec<i8>> {
    let frames: Vec<Vec<Detection>> = graph
        .frames
        .iter()
        .map(|ids| {
            ids.iter()
                .map(|&i| {
                    let n = &graph.nodes[i];
                    Detection {
                        frame: n.frame,
                        position: n.position,
                        confidence: n.confidence,
                        embedding: Vec::new(),
                        gt_id: n.gt_id,
                    }
                })
                .collect()
        })
        .collect();
    let per_frame = balance_from_gt(&frames, 0..frames.len())?;
    Ok(per_frame.into_iter().flatten().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: LossBreakdown,
    pub weights: AdaptiveWeights,
    /// Largest soft conservation residual (excess inflow) at this step.
    pub residual: f64,
}

#[derive(Debug, Clone)]
pub struct Descent {
    pub state: FlowState,
    pub graph: TrackingGraph,
    /// Entry `k` is evaluated after `k` updates (so `steps + 1` entries).
    pub history: Vec<StepRecord>,
}

impl Descent {
    pub fn initial(&self) -> &StepRecord {
        &self.history[0]
    }

    pub fn last(&self) -> &StepRecord {
        self.history.last().expect("history is never empty")
    }
}

/// Runs gradient descent on the flow logits. Weights follow the solver's
/// weights mode; in adaptive mode they are recomputed from the current
/// Laplacians before every gradient evaluation.
pub fn descend(
    graph: &TrackingGraph,
    quality: &DetectionQuality,
    solver: &SolverConfig,
) -> Result<Descent> {
    if solver.steps == 0 {
        return Err(Error::InvalidConfig("steps must be >= 1".into()));
    }
    let tau = graph.config.tau;
    let mut g = graph.clone();
    let mut state = init_flows_with(&g, tau, solver.sink_logit);
    state.eta = solver.eta;
    g.set_flows(state.flows.clone());

    let mut schedule = WeightSchedule::new(solver.weights_mode);
    let mut history = Vec::with_capacity(solver.steps + 1);
    let mut eta = solver.eta;
    for step in 0..=solver.steps {
        let weights = schedule.weights(&g)?;
        let loss = total_loss(&g, quality, &weights)?;
        history.push(StepRecord {
            step,
            loss,
            weights,
            residual: soft_residual(&g, &g.flows).max_abs,
        });
        if step == solver.steps {
            break;
        }
        let grad = gradients(&g, quality, &weights, false)?;
        let lg = logit_gradient(&g, &g.flows, &grad.d_flow, tau);
        for (theta, d) in state.logits.iter_mut().zip(&lg) {
            *theta -= eta * d;
        }
        state.flows = flows_from_logits(&g, &state.logits, tau);
        state.step += 1;
        g.set_flows(state.flows.clone());
        eta *= solver.decay;
    }

    let initial = history[0].loss.final_loss;
    let final_loss = history.last().expect("non-empty").loss.final_loss;
    if diverged(initial, final_loss, solver.divergence_factor) {
        return Err(Error::DivergenceDetected { initial, final_loss });
    }
    Ok(Descent {
        state,
        graph: g,
        history,
    })
}

/// Logit-space gradient of the final loss at `logits`, with fixed weights.
/// True when the final loss is non-finite or rose by more than `factor`
/// times the initial loss magnitude.
pub fn diverged(initial: f64, final_loss: f64, factor: f64) -> bool {
    !final_loss.is_finite() || final_loss - initial > factor * initial.abs()
}

pub fn logit_space_gradient(
    graph: &TrackingGraph,
    quality: &DetectionQuality,
    weights: &AdaptiveWeights,
    logits: &[f64],
) -> Result<Vec<f64>> {
    let tau = graph.config.tau;
    let mut g = graph.clone();
    g.set_flows(flows_from_logits(graph, logits, tau));
    let grad = gradients(&g, quality, weights, false)?;
    Ok(logit_gradient(&g, &g.flows, &grad.d_flow, tau))
}

/// Empirical Lipschitz constant of the logit-space gradient: the largest
/// ratio `|grad(a) - grad(b)| / |a - b|` over `samples` random nearby pairs.
/// Pair centres are the initial logits plus Gaussian noise of scale `tau`
/// (one unit in softmax-input space).
pub fn estimate_lipschitz(
    graph: &TrackingGraph,
    quality: &DetectionQuality,
    weights: &AdaptiveWeights,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    if samples < 2 {
        return Err(Error::InvalidConfig("lipschitz estimate needs >= 2 samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = init_logits(graph, default_sink_logit());
    let free: Vec<usize> = (0..graph.edges.len())
        .filter(|&e| graph.edges[e].kind != EdgeKind::Source)
        .collect();
    let tau = graph.config.tau;
    let mut best = 0.0f64;
    for _ in 0..samples {
        let mut a = base.clone();
        for &e in &free {
            a[e] += tau * rng.sample::<f64, _>(StandardNormal);
        }
        let mut b = a.clone();
        let mut dist2 = 0.0;
        for &e in &free {
            let d = 1e-3 * tau * rng.sample::<f64, _>(StandardNormal);
            b[e] += d;
            dist2 += d * d;
        }
        if dist2 == 0.0 {
            continue;
        }
        let ga = logit_space_gradient(graph, quality, weights, &a)?;
        let gb = logit_space_gradient(graph, quality, weights, &b)?;
        let diff2: f64 = ga.iter().zip(&gb).map(|(x, y)| (x - y) * (x - y)).sum();
        best = best.max((diff2 / dist2).sqrt());
    }
    Ok(best)
}
