//! Deterministic synthetic sequences and detector corruption.
//!
//! Three archetypes: two tracks crossing, a track occluded next to a
//! distractor, and tracks whose appearance drifts while motion stays smooth.
//! Embeddings are unit vectors in `EMBED_DIM` dimensions; identity `k` lives
//! in the plane spanned by basis vectors `2k` and `2k + 1` and drift rotates
//! within that plane.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::detection::Detection;
use crate::error::{Error, Result};

pub const EMBED_DIM: usize = 8;
pub const DEFAULT_FRAMES: usize = 20;
pub const DEFAULT_FPS: f64 = 30.0;
pub const DEFAULT_SPEED: f64 = 0.02;
/// Lateral distance between the occluded track and its distractor.
pub const OCCLUSION_SEPARATION: f64 = 0.08;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseModel {
    pub pos_sigma: f64,
    pub fp_rate: f64,
    pub fn_rate: f64,
    /// Extra embedding rotation per frame, in radians.
    pub embed_drift: f64,
    pub seed: u64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel {
            pos_sigma: 0.0,
            fp_rate: 0.0,
            fn_rate: 0.0,
            embed_drift: 0.0,
            seed: 0,
        }
    }
}

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        let rate_ok = |r: f64| (0.0..=1.0).contains(&r);
        if !rate_ok(self.fp_rate) || !rate_ok(self.fn_rate) {
            return Err(Error::InvalidConfig(format!(
                "noise rates must lie in [0,1] (fp {}, fn {})",
                self.fp_rate, self.fn_rate
            )));
        }
        if !(self.pos_sigma >= 0.0) || !self.embed_drift.is_finite() {
            return Err(Error::InvalidConfig(format!("invalid pos_sigma {}", self.pos_sigma)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackPoint {
    pub frame: usize,
    pub position: [f64; 2],
    pub embedding: Vec<f64>,
    /// False while the object is occluded; it then yields no detection but
    /// still counts as ground truth.
    pub visible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: u32,
    pub points: Vec<TrackPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub trajectories: Vec<Trajectory>,
    pub fps: f64,
    pub duration: usize,
    pub noise: NoiseModel,
}

/// Ground-truth `(id, position)` pairs per frame.
pub type GroundTruth = Vec<Vec<(u32, [f64; 2])>>;

impl Scenario {
    pub fn dt(&self) -> f64 {
        1.0 / self.fps
    }

    pub fn ground_truth(&self) -> GroundTruth {
        let mut gt = vec![Vec::new(); self.duration];
        for tr in &self.trajectories {
            for p in &tr.points {
                gt[p.frame].push((tr.id, p.position));
            }
        }
        gt
    }

    pub fn with_noise(mut self, noise: NoiseModel) -> Self {
        self.noise = noise;
        self
    }

    /// Detections under this scenario's own noise model.
    pub fn detections(&self) -> Result<Vec<Vec<Detection>>> {
        corrupt(self, &self.noise)
    }
}

/// Unit embedding of identity `id` rotated by `angle` within its plane.
pub fn identity_embedding(id: u32, angle: f64) -> Vec<f64> {
    let mut e = vec![0.0; EMBED_DIM];
    let base = (2 * id as usize) % EMBED_DIM;
    e[base] = angle.cos();
    e[base + 1] = angle.sin();
    e
}

fn clamp01(p: [f64; 2]) -> [f64; 2] {
    [p[0].clamp(0.0, 1.0), p[1].clamp(0.0, 1.0)]
}

fn line_track(id: u32, start: [f64; 2], velocity: [f64; 2], n_frames: usize, drift: f64) -> Trajectory {
    Trajectory {
        id,
        points: (0..n_frames)
            .map(|t| TrackPoint {
                frame: t,
                position: clamp01([
                    start[0] + velocity[0] * t as f64,
                    start[1] + velocity[1] * t as f64,
                ]),
                embedding: identity_embedding(id, drift * t as f64),
                visible: true,
            })
            .collect(),
    }
}

/// Two tracks through the centre `(0.5, 0.5)` at time `(n_frames - 1) / 2`.
/// Track 0 moves along +x; track 1 moves at `angle` radians from it. With an
/// even frame count the crossing falls between two frames.
pub fn gen_crossing(angle: f64, speed: f64, n_frames: usize) -> Result<Scenario> {
    if n_frames < 5 {
        return Err(Error::InvalidConfig(format!("crossing needs >= 5 frames, got {n_frames}")));
    }
    let tc = (n_frames as f64 - 1.0) / 2.0;
    let dirs = [[1.0, 0.0], [angle.cos(), angle.sin()]];
    let trajectories = dirs
        .iter()
        .enumerate()
        .map(|(k, u)| {
            let v = [speed * u[0], speed * u[1]];
            line_track(k as u32, [0.5 - v[0] * tc, 0.5 - v[1] * tc], v, n_frames, 0.0)
        })
        .collect();
    Ok(Scenario {
        name: "crossing".into(),
        trajectories,
        fps: DEFAULT_FPS,
        duration: n_frames,
        noise: NoiseModel::default(),
    })
}

/// Track 0 disappears for `gap` frames mid-sequence while track 1 runs in
/// parallel `OCCLUSION_SEPARATION` away.
pub fn gen_occlusion(gap: usize, n_frames: usize) -> Result<Scenario> {
    if n_frames < 5 || gap + 4 > n_frames {
        return Err(Error::GapTooLong { gap, n_frames });
    }
    let speed = DEFAULT_SPEED;
    let x0 = 0.5 - speed * (n_frames as f64 - 1.0) / 2.0;
    let mut occluded = line_track(0, [x0, 0.5], [speed, 0.0], n_frames, 0.0);
    let distractor = line_track(1, [x0, 0.5 + OCCLUSION_SEPARATION], [speed, 0.0], n_frames, 0.0);
    let start = (n_frames - gap) / 2;
    for p in &mut occluded.points[start..start + gap] {
        p.visible = false;
    }
    Ok(Scenario {
        name: "occlusion".into(),
        trajectories: vec![occluded, distractor],
        fps: DEFAULT_FPS,
        duration: n_frames,
        noise: NoiseModel::default(),
    })
}

/// Two parallel constant-velocity tracks whose embeddings rotate by
/// `drift_per_frame` radians each frame.
pub fn gen_posture_change(drift_per_frame: f64, n_frames: usize) -> Result<Scenario> {
    if n_frames < 5 {
        return Err(Error::InvalidConfig(format!("posture change needs >= 5 frames, got {n_frames}")));
    }
    let speed = DEFAULT_SPEED;
    let x0 = 0.5 - speed * (n_frames as f64 - 1.0) / 2.0;
    let trajectories = (0..2)
        .map(|k| {
            line_track(
                k,
                [x0, 0.4 + 0.2 * k as f64],
                [speed, 0.0],
                n_frames,
                drift_per_frame,
            )
        })
        .collect();
    Ok(Scenario {
        name: "posture".into(),
        trajectories,
        fps: DEFAULT_FPS,
        duration: n_frames,
        noise: NoiseModel::default(),
    })
}

/// Rotates every coordinate pair `(2m, 2m + 1)` by `angle`.
fn rotate_pairs(e: &[f64], angle: f64) -> Vec<f64> {
    if angle == 0.0 {
        return e.to_vec();
    }
    let (s, c) = angle.sin_cos();
    let mut out = e.to_vec();
    for m in 0..e.len() / 2 {
        let (a, b) = (e[2 * m], e[2 * m + 1]);
        out[2 * m] = c * a - s * b;
        out[2 * m + 1] = s * a + c * b;
    }
    out
}

/// Noisy detections: Gaussian jitter (clamped to the unit square), Bernoulli
/// drops, at most one uniform false positive per frame, and extra embedding
/// rotation. True detections keep their gt id; false positives have none and
/// follow the true ones within a frame.
pub fn corrupt(scenario: &Scenario, noise: &NoiseModel) -> Result<Vec<Vec<Detection>>> {
    noise.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let jitter = Normal::new(0.0, noise.pos_sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut frames: Vec<Vec<Detection>> = vec![Vec::new(); scenario.duration];
    for (t, frame) in frames.iter_mut().enumerate() {
        for tr in &scenario.trajectories {
            let Some(p) = tr.points.iter().find(|p| p.frame == t) else {
                continue;
            };
            if !p.visible {
                continue;
            }
            let drop = rng.random::<f64>() < noise.fn_rate;
            let dx: f64 = jitter.sample(&mut rng);
            let dy: f64 = jitter.sample(&mut rng);
            if drop {
                continue;
            }
            let mut d = Detection::new(
                t,
                clamp01([p.position[0] + dx, p.position[1] + dy]),
                rotate_pairs(&p.embedding, noise.embed_drift * t as f64),
            );
            d.gt_id = Some(tr.id);
            frame.push(d);
        }
        if rng.random::<f64>() < noise.fp_rate {
            let pos = [rng.random::<f64>(), rng.random::<f64>()];
            let mut emb: Vec<f64> = (0..EMBED_DIM).map(|_| rng.sample(StandardNormal)).collect();
            let norm = emb.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            emb.iter_mut().for_each(|x| *x /= norm);
            let mut d = Detection::new(t, pos, emb);
            d.confidence = 0.5;
            frame.push(d);
        }
    }
    Ok(frames)
}

/// Keeps every `round(fps / target_fps)`-th frame and renumbers frames.
pub fn subsample_fps(scenario: &Scenario, target_fps: f64) -> Result<Scenario> {
    if !(target_fps > 0.0) || target_fps > scenario.fps {
        return Err(Error::InvalidRate(format!(
            "target {target_fps} fps not in (0, {}]",
            scenario.fps
        )));
    }
    let step = (scenario.fps / target_fps).round().max(1.0) as usize;
    let trajectories = scenario
        .trajectories
        .iter()
        .map(|tr| Trajectory {
            id: tr.id,
            points: tr
                .points
                .iter()
                .filter(|p| p.frame % step == 0)
                .map(|p| TrackPoint {
                    frame: p.frame / step,
                    ..p.clone()
                })
                .collect(),
        })
        .collect();
    Ok(Scenario {
        name: scenario.name.clone(),
        trajectories,
        fps: target_fps,
        duration: scenario.duration.div_ceil(step),
        noise: scenario.noise,
    })
}

/// Named scenario with the default geometry.
pub fn by_name(name: &str, n_frames: usize) -> Result<Scenario> {
    match name {
        "crossing" => gen_crossing(PI / 2.0, DEFAULT_SPEED, n_frames),
        "occlusion" => gen_occlusion(2, n_frames),
        "posture" => gen_posture_change(PI / 40.0, n_frames),
        other => Err(Error::InvalidConfig(format!(
            "unknown scenario '{other}' (expected crossing, occlusion or posture)"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GraphConfig;
    use crate::loss::window_quality;

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn head_on_crossing_geometry() {
        let s = gen_crossing(PI, 0.1, 11).unwrap();
        let a = &s.trajectories[0].points;
        let b = &s.trajectories[1].points;
        assert!((a[0].position[0] - 0.0).abs() < 1e-12 && (a[0].position[1] - 0.5).abs() < 1e-12);
        assert!((b[0].position[0] - 1.0).abs() < 1e-12);
        assert!((a[5].position[0] - 0.5).abs() < 1e-12);
        assert!((b[5].position[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn right_angle_crossing_meets_at_centre() {
        let s = gen_crossing(PI / 2.0, 0.02, 9).unwrap();
        let a = s.trajectories[0].points[4].position;
        let b = s.trajectories[1].points[4].position;
        let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
        assert!(d < 1e-12);
        assert!(gen_crossing(PI / 2.0, 0.02, 4).is_err());
    }

    #[test]
    fn occlusion_gap() {
        let s = gen_occlusion(2, 20).unwrap();
        let hidden = s.trajectories[0].points.iter().filter(|p| !p.visible).count();
        assert_eq!(hidden, 2);
        let base = gen_occlusion(0, 20).unwrap();
        assert!(base.trajectories.iter().all(|t| t.points.iter().all(|p| p.visible)));
        assert!(matches!(gen_occlusion(17, 20), Err(Error::GapTooLong { gap: 17, n_frames: 20 })));
        let dets = s.detections().unwrap();
        let total: usize = dets.iter().map(|f| f.len()).sum();
        assert_eq!(total, 38);
    }

    #[test]
    fn drift_geometry() {
        let s = gen_posture_change(PI / 20.0, 11).unwrap();
        let p = &s.trajectories[0].points;
        assert!(cos(&p[0].embedding, &p[10].embedding).abs() < 1e-12);
        let step = cos(&p[3].embedding, &p[4].embedding);
        assert!((step - (PI / 20.0).cos()).abs() < 1e-12);
        assert!((step - 0.988).abs() < 1e-3);
        let still = gen_posture_change(0.0, 6).unwrap();
        assert!(still.trajectories[1].points.windows(2).all(|w| w[0].embedding == w[1].embedding));
    }

    #[test]
    fn zero_noise_is_identity() {
        let s = gen_crossing(PI / 2.0, 0.02, 20).unwrap();
        let dets = corrupt(&s, &NoiseModel::default()).unwrap();
        for tr in &s.trajectories {
            for p in &tr.points {
                let d = dets[p.frame].iter().find(|d| d.gt_id == Some(tr.id)).unwrap();
                assert_eq!(d.position, p.position);
                assert_eq!(d.embedding, p.embedding);
            }
        }
        let preds: Vec<Vec<[f64; 2]>> = dets.iter().map(|f| f.iter().map(|d| d.position).collect()).collect();
        let gts: Vec<Vec<[f64; 2]>> = s.ground_truth().iter().map(|f| f.iter().map(|g| g.1).collect()).collect();
        let q = window_quality(&preds, &gts, 0.05, GraphConfig::default().alpha).unwrap();
        assert_eq!(q.factor, 1.0);
    }

    #[test]
    fn total_miss_quality() {
        let s = gen_crossing(PI / 2.0, 0.02, 20).unwrap();
        let noise = NoiseModel { fn_rate: 1.0, ..Default::default() };
        let dets = corrupt(&s, &noise).unwrap();
        assert!(dets.iter().all(|f| f.is_empty()));
        let preds: Vec<Vec<[f64; 2]>> = vec![Vec::new(); 20];
        let gts: Vec<Vec<[f64; 2]>> = s.ground_truth().iter().map(|f| f.iter().map(|g| g.1).collect()).collect();
        let q = window_quality(&preds, &gts, 0.05, 0.9).unwrap();
        assert!((q.factor - (-0.9f64).exp()).abs() < 1e-12);
        assert!((q.factor - 0.4066).abs() < 1e-4);
    }

    #[test]
    fn seeded_corruption_is_deterministic() {
        let s = gen_occlusion(2, 20).unwrap();
        let noise = NoiseModel { pos_sigma: 0.01, fp_rate: 0.3, fn_rate: 0.1, embed_drift: 0.05, seed: 42 };
        let a = corrupt(&s, &noise).unwrap();
        let b = corrupt(&s, &noise).unwrap();
        assert_eq!(a, b);
        let c = corrupt(&s, &NoiseModel { seed: 43, ..noise }).unwrap();
        assert_ne!(a, c);
        for f in &a {
            for d in f {
                assert!((0.0..=1.0).contains(&d.position[0]) && (0.0..=1.0).contains(&d.position[1]));
            }
        }
    }

    #[test]
    fn subsampling() {
        let s = gen_crossing(PI / 2.0, 0.005, 121).unwrap();
        assert_eq!(subsample_fps(&s, 30.0).unwrap(), s);
        let low = subsample_fps(&s, 1.0).unwrap();
        assert_eq!(low.duration, 5);
        assert_eq!(low.trajectories[0].points.len(), 5);
        assert_eq!(low.trajectories[0].points[1].position, s.trajectories[0].points[30].position);
        assert_eq!(low.dt(), 1.0);
        assert!(matches!(subsample_fps(&s, 60.0), Err(Error::InvalidRate(_))));
    }

    #[test]
    fn positions_stay_in_unit_square() {
        for s in [
            gen_crossing(PI / 3.0, 0.2, 30).unwrap(),
            gen_occlusion(3, 40).unwrap(),
            gen_posture_change(0.1, 60).unwrap(),
        ] {
            for tr in &s.trajectories {
                for p in &tr.points {
                    assert!(p.position.iter().all(|c| (0.0..=1.0).contains(c)));
                }
            }
        }
    }
}
