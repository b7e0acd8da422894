//! Algebraic connectivity and the connectivity-derived loss weights.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{check_symmetric, TrackingGraph};

/// Relative off-diagonal tolerance for the Jacobi sweeps.
pub const JACOBI_TOL: f64 = 1e-12;

/// Eigenvalues of a symmetric matrix in ascending order, by cyclic Jacobi
/// rotations. The rotation budget is `100 * n^2`.
pub fn symmetric_eigenvalues(m: &DMatrix<f64>) -> Result<Vec<f64>> {
    check_symmetric(m)?;
    let n = m.nrows();
    let mut a = m.clone();
    let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let cap = 100 * n * n;
    let mut rotations = 0usize;

    loop {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += 2.0 * a[(p, q)] * a[(p, q)];
            }
        }
        if off.sqrt() <= JACOBI_TOL * norm || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                rotations += 1;
                if rotations > cap {
                    return Err(Error::NonConvergence(cap));
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
            }
        }
    }

    let mut eig: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    eig.sort_by(|x, y| x.total_cmp(y));
    Ok(eig)
}

/// Second-smallest Laplacian eigenvalue; 0 for graphs with fewer than two nodes.
pub fn algebraic_connectivity(l: &DMatrix<f64>) -> Result<f64> {
    let eig = symmetric_eigenvalues(l)?;
    Ok(if eig.len() < 2 { 0.0 } else { eig[1] })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveWeights {
    pub lambda_s: f64,
    pub lambda_t: f64,
    pub sigma2_s: f64,
    pub sigma2_t: f64,
}

impl AdaptiveWeights {
    pub fn fixed(lambda_s: f64, lambda_t: f64) -> Self {
        AdaptiveWeights {
            lambda_s,
            lambda_t,
            sigma2_s: f64::NAN,
            sigma2_t: f64::NAN,
        }
    }

    /// Inverse-connectivity weighting from two (already computed) connectivities.
    pub fn from_connectivity(sigma2_s: f64, sigma2_t: f64, epsilon_sigma: f64) -> Self {
        let inv_s = 1.0 / sigma2_s.max(epsilon_sigma);
        let inv_t = 1.0 / sigma2_t.max(epsilon_sigma);
        AdaptiveWeights {
            lambda_s: inv_s / (inv_s + inv_t),
            lambda_t: inv_t / (inv_s + inv_t),
            sigma2_s: sigma2_s.max(0.0),
            sigma2_t: sigma2_t.max(0.0),
        }
    }
}

pub fn adaptive_weights(
    l_s: &DMatrix<f64>,
    l_t: &DMatrix<f64>,
    epsilon_sigma: f64,
) -> Result<AdaptiveWeights> {
    let s = algebraic_connectivity(l_s)?;
    let t = algebraic_connectivity(l_t)?;
    Ok(AdaptiveWeights::from_connectivity(s, t, epsilon_sigma))
}

/// Weights for a graph in its current flow state.
pub fn graph_weights(graph: &TrackingGraph) -> Result<AdaptiveWeights> {
    let (ls, lt) = graph.laplacians()?;
    adaptive_weights(&ls, &lt, graph.config.epsilon_sigma)
}

/// How loss weights evolve over optimization steps.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightsMode {
    /// Recomputed from the current Laplacians at every step.
    #[default]
    Adaptive,
    Fixed { lambda_s: f64, lambda_t: f64 },
    /// Computed once from the initial graph and held.
    FrozenInit,
}

/// Stateful weight provider for one optimization run.
#[derive(Debug, Clone)]
pub struct WeightSchedule {
    mode: WeightsMode,
    frozen: Option<AdaptiveWeights>,
}

impl WeightSchedule {
    pub fn new(mode: WeightsMode) -> Self {
        WeightSchedule { mode, frozen: None }
    }

    pub fn weights(&mut self, graph: &TrackingGraph) -> Result<AdaptiveWeights> {
        match self.mode {
            WeightsMode::Adaptive => graph_weights(graph),
            WeightsMode::Fixed { lambda_s, lambda_t } => Ok(AdaptiveWeights::fixed(lambda_s, lambda_t)),
            WeightsMode::FrozenInit => {
                if let Some(w) = self.frozen {
                    return Ok(w);
                }
                let w = graph_weights(graph)?;
                self.frozen = Some(w);
                Ok(w)
            }
        }
    }
}
