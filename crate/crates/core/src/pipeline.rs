//! Sequence-level tracking: windowing, per-window optimization and decoding,
//! stitching into global links, gap bridging, and the distance baselines.

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assign;
use crate::decode::decode_assignments;
use crate::detection::{validate_sequence, DetRef, Detection};
use crate::error::{Error, Result};
use crate::flow::{descend, soft_residual, SolverConfig, StepRecord};
use crate::graph::{build_graph, weight_between, GraphConfig};
use crate::loss::{window_quality, DetectionQuality};
use crate::metrics::Hypotheses;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Flow,
    GreedyNn,
    HungarianDist,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flow" => Ok(Method::Flow),
            "greedy_nn" => Ok(Method::GreedyNn),
            "hungarian_dist" => Ok(Method::HungarianDist),
            other => Err(Error::InvalidConfig(format!("unknown method '{other}'"))),
        }
    }
}

/// Links a track end to a later track start across missing frames when the
/// appearance/motion score clears `threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BridgeConfig {
    pub enabled: bool,
    pub threshold: f64,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        BridgeConfig {
            enabled: true,
            threshold: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerConfig {
    pub method: Method,
    pub graph: GraphConfig,
    pub solver: SolverConfig,
    pub bridge: BridgeConfig,
    /// Radius for detection-quality matching against ground truth.
    pub match_radius: f64,
    /// Baselines only link pairs closer than this (no limit when unset).
    pub max_link_distance: Option<f64>,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            method: Method::Flow,
            graph: GraphConfig::default(),
            solver: SolverConfig::default(),
            bridge: BridgeConfig::default(),
            match_radius: 0.05,
            max_link_distance: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Link {
    pub from: DetRef,
    pub to: DetRef,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Assignment {
    pub links: Vec<Link>,
    pub births: Vec<DetRef>,
    pub deaths: Vec<DetRef>,
    /// Hypothesis track id per detection, indexed like the input frames.
    pub track_ids: Vec<Vec<u32>>,
}

impl Assignment {
    /// Completes births, deaths and track ids from a set of one-to-one links.
    pub fn from_links(frames: &[Vec<Detection>], mut links: Vec<Link>) -> Self {
        links.sort();
        let mut incoming: Vec<Vec<Option<DetRef>>> = frames.iter().map(|f| vec![None; f.len()]).collect();
        let mut has_out: Vec<Vec<bool>> = frames.iter().map(|f| vec![false; f.len()]).collect();
        for l in &links {
            assert!(incoming[l.to.frame][l.to.index].is_none(), "detection linked twice");
            incoming[l.to.frame][l.to.index] = Some(l.from);
            has_out[l.from.frame][l.from.index] = true;
        }
        let mut track_ids: Vec<Vec<u32>> = frames.iter().map(|f| vec![0; f.len()]).collect();
        let mut births = Vec::new();
        let mut deaths = Vec::new();
        let mut next = 0u32;
        for t in 0..frames.len() {
            for i in 0..frames[t].len() {
                let r = DetRef { frame: t, index: i };
                track_ids[t][i] = match incoming[t][i] {
                    Some(p) => track_ids[p.frame][p.index],
                    None => {
                        births.push(r);
                        next += 1;
                        next - 1
                    }
                };
                if !has_out[t][i] {
                    deaths.push(r);
                }
            }
        }
        Assignment {
            links,
            births,
            deaths,
            track_ids,
        }
    }

    pub fn hypotheses(&self, frames: &[Vec<Detection>]) -> Hypotheses {
        frames
            .iter()
            .zip(&self.track_ids)
            .map(|(f, ids)| f.iter().zip(ids).map(|(d, &id)| (id, d.position)).collect())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowReport {
    pub start: usize,
    pub end: usize,
    pub quality: DetectionQuality,
    pub history: Vec<StepRecord>,
    /// Largest soft conservation residual of the optimized flows.
    pub soft_residual: f64,
    /// Largest conservation residual of the decoded hard flows.
    pub hard_residual: f64,
    pub graph_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackOutput {
    pub assignment: Assignment,
    pub windows: Vec<WindowReport>,
}

/// Windows of at most `window` frames; consecutive windows share one frame so
/// every frame pair belongs to exactly one window.
pub fn windows(n_frames: usize, window: usize) -> Vec<Range<usize>> {
    if n_frames < 2 || window < 2 {
        return vec![0..n_frames];
    }
    let mut out = Vec::new();
    let mut start = 0;
    loop {
        let end = (start + window).min(n_frames);
        out.push(start..end);
        if end == n_frames {
            return out;
        }
        start = end - 1;
    }
}

fn positions(frames: &[Vec<Detection>]) -> Vec<Vec<[f64; 2]>> {
    frames.iter().map(|f| f.iter().map(|d| d.position).collect()).collect()
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Tracks a detection sequence. `gt` (ground-truth positions per frame) sets
/// the per-window detection-quality factor; without it the factor is 1.
pub fn track(
    frames: &[Vec<Detection>],
    gt: Option<&[Vec<[f64; 2]>]>,
    cfg: &TrackerConfig,
) -> Result<TrackOutput> {
    cfg.graph.validate()?;
    validate_sequence(frames)?;
    if frames.len() < 2 {
        return Err(Error::EmptyWindow(frames.len()));
    }
    match cfg.method {
        Method::GreedyNn | Method::HungarianDist => {
            let mut links = Vec::new();
            for t in 0..frames.len() - 1 {
                let pairs = if cfg.method == Method::GreedyNn {
                    greedy_pairs(&frames[t], &frames[t + 1], cfg.max_link_distance)
                } else {
                    hungarian_pairs(&frames[t], &frames[t + 1], cfg.max_link_distance)
                };
                links.extend(pairs.into_iter().map(|(i, j)| Link {
                    from: DetRef { frame: t, index: i },
                    to: DetRef { frame: t + 1, index: j },
                }));
            }
            Ok(TrackOutput {
                assignment: Assignment::from_links(frames, links),
                windows: Vec::new(),
            })
        }
        Method::Flow => {
            let ranges = windows(frames.len(), cfg.graph.window);
            let results: Vec<Result<(Vec<Link>, WindowReport)>> = ranges
                .par_iter()
                .map(|r| run_window(frames, gt, r.clone(), cfg))
                .collect();
            let mut links = Vec::new();
            let mut reports = Vec::new();
            for res in results {
                let (l, rep) = res?;
                links.extend(l);
                reports.push(rep);
            }
            if cfg.bridge.enabled {
                let partial = Assignment::from_links(frames, links.clone());
                links.extend(bridge(frames, &partial, cfg));
            }
            Ok(TrackOutput {
                assignment: Assignment::from_links(frames, links),
                windows: reports,
            })
        }
    }
}

fn run_window(
    frames: &[Vec<Detection>],
    gt: Option<&[Vec<[f64; 2]>]>,
    range: Range<usize>,
    cfg: &TrackerConfig,
) -> Result<(Vec<Link>, WindowReport)> {
    let slice = &frames[range.clone()];
    let graph = build_graph(slice, &cfg.graph)?;
    let quality = match gt {
        Some(g) => window_quality(&positions(slice), &g[range.clone()], cfg.match_radius, cfg.graph.alpha)?,
        None => DetectionQuality::perfect(),
    };
    let run = descend(&graph, &quality, &cfg.solver)?;
    let decoded = decode_assignments(&run.graph, &run.state.flows);
    let mut hard = run.graph.clone();
    hard.set_flows(decoded.to_flows(&run.graph));
    let links = decoded
        .links
        .iter()
        .map(|&(i, j)| {
            let (a, b) = (&graph.nodes[i], &graph.nodes[j]);
            Link {
                from: DetRef { frame: range.start + a.slot, index: a.index },
                to: DetRef { frame: range.start + b.slot, index: b.index },
            }
        })
        .collect();
    let report = WindowReport {
        start: range.start,
        end: range.end,
        quality,
        soft_residual: soft_residual(&run.graph, &run.graph.flows).max_abs,
        hard_residual: soft_residual(&hard, &hard.flows).max_abs,
        graph_bytes: graph.approx_bytes(),
        history: run.history,
    };
    Ok((links, report))
}

/// Nearest-neighbour matching: globally closest pairs first, index tie-break.
pub fn greedy_pairs(a: &[Detection], b: &[Detection], max_dist: Option<f64>) -> Vec<(usize, usize)> {
    let limit = max_dist.unwrap_or(f64::INFINITY);
    let mut cand = Vec::new();
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            let d = dist(x.position, y.position);
            if d <= limit {
                cand.push((d, i, j));
            }
        }
    }
    cand.sort_by(|p, q| p.0.total_cmp(&q.0).then(p.1.cmp(&q.1)).then(p.2.cmp(&q.2)));
    let mut used_a = vec![false; a.len()];
    let mut used_b = vec![false; b.len()];
    let mut out = Vec::new();
    for (_, i, j) in cand {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            out.push((i, j));
        }
    }
    out.sort();
    out
}

/// Minimum total-distance matching; unmatched rows cost `max_dist` each.
pub fn hungarian_pairs(a: &[Detection], b: &[Detection], max_dist: Option<f64>) -> Vec<(usize, usize)> {
    if a.is_empty() {
        return Vec::new();
    }
    let unmatched = max_dist.unwrap_or(1e6);
    let width = b.len() + a.len();
    let cost: Vec<Vec<f64>> = a
        .iter()
        .enumerate()
        .map(|(r, x)| {
            (0..width)
                .map(|c| {
                    if c < b.len() {
                        let d = dist(x.position, b[c].position);
                        if d <= unmatched { d } else { 1e12 }
                    } else if c - b.len() == r {
                        unmatched
                    } else {
                        1e12
                    }
                })
                .collect()
        })
        .collect();
    assign::solve(&cost)
        .into_iter()
        .enumerate()
        .filter(|&(_, c)| c < b.len())
        .collect()
}

/// Score for continuing the track ending at `end` with the detection `start`
/// after `gap` frame steps: appearance similarity mixed with a Gaussian on
/// the constant-velocity prediction error.
fn bridge_score(
    frames: &[Vec<Detection>],
    partial: &Assignment,
    end: DetRef,
    start: DetRef,
    cfg: &GraphConfig,
) -> f64 {
    let e = &frames[end.frame][end.index];
    let s = &frames[start.frame][start.index];
    let gap = (start.frame - end.frame) as f64;
    let prev = partial.links.iter().find(|l| l.to == end).map(|l| &frames[l.from.frame][l.from.index]);
    let v = match prev {
        Some(p) => [e.position[0] - p.position[0], e.position[1] - p.position[1]],
        None => [0.0, 0.0],
    };
    let predicted = [e.position[0] + v[0] * gap, e.position[1] + v[1] * gap];
    weight_between(&e.embedding, predicted, &s.embedding, s.position, cfg).unwrap_or(0.0)
}

fn bridge(frames: &[Vec<Detection>], partial: &Assignment, cfg: &TrackerConfig) -> Vec<Link> {
    let last = frames.len() - 1;
    let ends: Vec<DetRef> = partial.deaths.iter().copied().filter(|d| d.frame < last).collect();
    let starts: Vec<DetRef> = partial.births.iter().copied().filter(|b| b.frame > 0).collect();
    if ends.is_empty() || starts.is_empty() {
        return Vec::new();
    }
    let window = cfg.graph.window;
    let forbidden = 1e12;
    let width = starts.len() + ends.len();
    let cost: Vec<Vec<f64>> = ends
        .iter()
        .enumerate()
        .map(|(r, &e)| {
            (0..width)
                .map(|c| match starts.get(c) {
                    Some(&s) if s.frame >= e.frame + 2 && s.frame - e.frame <= window => {
                        let score = bridge_score(frames, partial, e, s, &cfg.graph);
                        if score >= cfg.bridge.threshold { -score } else { forbidden }
                    }
                    Some(_) => forbidden,
                    None if c - starts.len() == r => -cfg.bridge.threshold,
                    None => forbidden,
                })
                .collect()
        })
        .collect();
    assign::solve(&cost)
        .into_iter()
        .enumerate()
        .filter(|&(r, c)| c < starts.len() && cost[r][c] < forbidden)
        .map(|(r, c)| Link { from: ends[r], to: starts[c] })
        .collect()
}
