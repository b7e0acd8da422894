//! Hard decoding of soft flows into one-to-one links per frame pair.

use serde::{Deserialize, Serialize};

use crate::assign;
use crate::graph::TrackingGraph;

/// Cost used for node pairs without an edge; never chosen because every row
/// has a finite sink fallback.
const FORBIDDEN: f64 = 1e12;
const FLOOR: f64 = 1e-300;

/// Decoded links for one window, as graph node ids.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct WindowAssignment {
    pub links: Vec<(usize, usize)>,
    /// Nodes with no incoming link.
    pub births: Vec<usize>,
    /// Nodes with no outgoing link.
    pub deaths: Vec<usize>,
}

impl WindowAssignment {
    /// Hard flow vector: 1 on linked real edges, 1 on sink edges of deaths,
    /// and 1 on source edges of births.
    pub fn to_flows(&self, graph: &TrackingGraph) -> Vec<f64> {
        let mut flows = vec![0.0; graph.edges.len()];
        for (e, edge) in graph.real_edges().iter().enumerate() {
            if self.links.contains(&(edge.from, edge.to)) {
                flows[e] = 1.0;
            }
        }
        for &i in &self.deaths {
            flows[graph.sink_edge(i)] = 1.0;
        }
        for &i in &self.births {
            flows[graph.source_edge(i)] = 1.0;
        }
        flows
    }

    /// Largest number of incoming links on any node (1 for a valid decode).
    pub fn max_in_degree(&self, n_nodes: usize) -> usize {
        let mut deg = vec![0usize; n_nodes];
        for &(_, j) in &self.links {
            deg[j] += 1;
        }
        deg.into_iter().max().unwrap_or(0)
    }
}

/// Per frame pair, picks the one-to-one matching maximizing the summed log
/// flow. Each source-frame node also has a private sink column, so a node
/// dies whenever its sink flow beats every real option still available.
pub fn decode_assignments(graph: &TrackingGraph, flows: &[f64]) -> WindowAssignment {
    let n = graph.n_nodes();
    let mut links = Vec::new();
    for pair in graph.frames.windows(2) {
        let (rows, cols) = (&pair[0], &pair[1]);
        if rows.is_empty() {
            continue;
        }
        let width = cols.len() + rows.len();
        let mut cost = vec![vec![FORBIDDEN; width]; rows.len()];
        for (r, &i) in rows.iter().enumerate() {
            for &e in &graph.out_edges[i] {
                let edge = &graph.edges[e];
                let c = -flows[e].max(FLOOR).ln();
                if e < graph.n_real {
                    let col = cols.iter().position(|&j| j == edge.to).expect("edge into next frame");
                    cost[r][col] = c;
                } else {
                    cost[r][cols.len() + r] = c;
                }
            }
        }
        for (r, c) in assign::solve(&cost).into_iter().enumerate() {
            if c < cols.len() {
                links.push((rows[r], cols[c]));
            }
        }
    }
    let births = (0..n).filter(|&j| !links.iter().any(|l| l.1 == j)).collect();
    let deaths = (0..n).filter(|&i| !links.iter().any(|l| l.0 == i)).collect();
    let out = WindowAssignment { links, births, deaths };
    assert!(out.max_in_degree(n) <= 1, "decoded merge");
    out
}
