//! Loss values on a 2-D slice of logit space, for contour plots.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::flow::flows_from_logits;
use crate::graph::{EdgeKind, TrackingGraph};
use crate::loss::{total_loss, DetectionQuality};
use crate::spectral::WeightSchedule;
use crate::spectral::WeightsMode;

/// Two seeded random unit directions over the optimizable (non-source) logits.
pub fn random_directions(graph: &TrackingGraph, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || -> Vec<f64> {
        let mut d: Vec<f64> = graph
            .edges
            .iter()
            .map(|e| match e.kind {
                EdgeKind::Source => 0.0,
                _ => rng.sample(StandardNormal),
            })
            .collect();
        let n = d.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            d.iter_mut().for_each(|x| *x /= n);
        }
        d
    };
    let a = draw();
    let b = draw();
    (a, b)
}

/// `grid_n x grid_n` final-loss values at `logits + a*d1 + b*d2` with `a, b`
/// evenly spaced in `[-span, span]`. Row index follows `d1`.
#[allow(clippy::too_many_arguments)]
pub fn loss_surface(
    graph: &TrackingGraph,
    quality: &DetectionQuality,
    mode: WeightsMode,
    logits: &[f64],
    d1: &[f64],
    d2: &[f64],
    grid_n: usize,
    span: f64,
) -> Result<Vec<Vec<f64>>> {
    if grid_n < 3 {
        return Err(Error::InvalidConfig(format!("grid_n must be >= 3, got {grid_n}")));
    }
    for d in [d1, d2] {
        if d.len() != logits.len() {
            return Err(Error::DimensionMismatch {
                expected: logits.len(),
                got: d.len(),
            });
        }
        if d.iter().map(|x| x * x).sum::<f64>() == 0.0 {
            return Err(Error::InvalidConfig("surface direction has zero length".into()));
        }
    }
    let tau = graph.config.tau;
    let step = 2.0 * span / (grid_n - 1) as f64;
    let mut out = Vec::with_capacity(grid_n);
    for r in 0..grid_n {
        let a = -span + step * r as f64;
        let mut row = Vec::with_capacity(grid_n);
        for c in 0..grid_n {
            let b = -span + step * c as f64;
            let theta: Vec<f64> = logits
                .iter()
                .zip(d1.iter().zip(d2))
                .map(|(t, (x, y))| t + a * x + b * y)
                .collect();
            let mut g = graph.clone();
            g.set_flows(flows_from_logits(graph, &theta, tau));
            let w = WeightSchedule::new(mode).weights(&g)?;
            row.push(total_loss(&g, quality, &w)?.final_loss);
        }
        out.push(row);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::Detection;
    use crate::flow::init_logits;
    use crate::graph::{build_graph, GraphConfig};

    fn graph() -> TrackingGraph {
        let frames: Vec<Vec<Detection>> = (0..3)
            .map(|t| vec![Detection::new(t, [0.3 + 0.02 * t as f64, 0.5], vec![1.0, 0.0]), Detection::new(t, [0.35, 0.6], vec![0.0, 1.0])])
            .collect();
        build_graph(&frames, &GraphConfig::default()).unwrap()
    }

    #[test]
    fn dimensions_and_validation() {
        let g = graph();
        let logits = init_logits(&g, -3.0);
        let (d1, d2) = random_directions(&g, 5);
        let s = loss_surface(&g, &DetectionQuality::perfect(), WeightsMode::Adaptive, &logits, &d1, &d2, 4, 0.1).unwrap();
        assert_eq!(s.len(), 4);
        assert!(s.iter().all(|r| r.len() == 4));
        let zero = vec![0.0; logits.len()];
        assert!(loss_surface(&g, &DetectionQuality::perfect(), WeightsMode::Adaptive, &logits, &zero, &d2, 3, 0.1).is_err());
        assert!(loss_surface(&g, &DetectionQuality::perfect(), WeightsMode::Adaptive, &logits, &d1, &d2, 2, 0.1).is_err());
    }

    #[test]
    fn directions_are_unit_and_seeded() {
        let g = graph();
        let (a, b) = random_directions(&g, 9);
        assert!((a.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((b.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(random_directions(&g, 9), (a, b));
    }
}
