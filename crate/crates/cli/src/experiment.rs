//! Experiment configuration, execution and the on-disk run layout.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use flowtrack::detection::{read_sequence, Detection};
use flowtrack::flow::descend;
use flowtrack::graph::build_graph;
use flowtrack::loss::{gradients, GradientSet, LossBreakdown};
use flowtrack::metrics::{score, ErrorCounts, MetricsReport};
use flowtrack::pipeline::{track, TrackOutput, TrackerConfig};
use flowtrack::scenario::{by_name, subsample_fps, GroundTruth, NoiseModel, Scenario, DEFAULT_FPS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum Input {
    Generated {
        name: String,
        frames: usize,
        fps: f64,
        noise: NoiseModel,
    },
    File {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub input: Input,
    pub tracker: TrackerConfig,
    pub seed: u64,
}

/// Detections plus the ground truth used for scoring.
pub struct Loaded {
    pub name: String,
    pub frames: Vec<Vec<Detection>>,
    pub gt: GroundTruth,
}

pub fn generate(name: &str, frames: usize, fps: f64, noise: NoiseModel) -> Result<Scenario> {
    let base = by_name(name, frames)?;
    let s = if fps < DEFAULT_FPS { subsample_fps(&base, fps)? } else { base };
    Ok(s.with_noise(noise))
}

/// Ground truth recovered from the `gt_id` tags of a detection file.
pub fn gt_from_detections(frames: &[Vec<Detection>]) -> GroundTruth {
    frames
        .iter()
        .map(|f| f.iter().filter_map(|d| d.gt_id.map(|id| (id, d.position))).collect())
        .collect()
}

pub fn load(input: &Input) -> Result<Loaded> {
    match input {
        Input::Generated { name, frames, fps, noise } => {
            let s = generate(name, *frames, *fps, *noise)?;
            Ok(Loaded {
                name: s.name.clone(),
                frames: s.detections()?,
                gt: s.ground_truth(),
            })
        }
        Input::File { path } => {
            let frames = read_sequence(path).with_context(|| format!("reading {}", path.display()))?;
            Ok(Loaded {
                name: path.file_stem().map_or("input".into(), |s| s.to_string_lossy().into_owned()),
                gt: gt_from_detections(&frames),
                frames,
            })
        }
    }
}

pub struct RunResult {
    pub output: TrackOutput,
    pub metrics: MetricsReport,
}

pub fn execute(cfg: &ExperimentConfig, loaded: &Loaded) -> Result<RunResult> {
    let gt_pos: Vec<Vec<[f64; 2]>> = loaded.gt.iter().map(|f| f.iter().map(|g| g.1).collect()).collect();
    let output = track(&loaded.frames, Some(&gt_pos), &cfg.tracker)?;
    let hyp = output.assignment.hypotheses(&loaded.frames);
    let mut metrics = score(&hyp, &loaded.gt, cfg.tracker.match_radius)?;
    metrics.per_error_type.insert(
        loaded.name.clone(),
        ErrorCounts {
            ids: metrics.ids,
            frag: metrics.frag,
        },
    );
    Ok(RunResult { output, metrics })
}

/// Final loss terms and gradients of one optimized window.
#[derive(Debug, Serialize)]
pub struct WindowLoss {
    pub window: usize,
    pub start: usize,
    pub end: usize,
    pub loss: LossBreakdown,
    pub gradients: GradientSet,
}

/// Replays each window's descent and records the loss and gradients at the
/// final flows. Baseline runs have no windows and give an empty list.
pub fn loss_dump(cfg: &ExperimentConfig, loaded: &Loaded, output: &TrackOutput) -> Result<Vec<WindowLoss>> {
    output
        .windows
        .iter()
        .enumerate()
        .map(|(k, w)| {
            let g = build_graph(&loaded.frames[w.start..w.end], &cfg.tracker.graph)?;
            let run = descend(&g, &w.quality, &cfg.tracker.solver)?;
            let last = run.last();
            Ok(WindowLoss {
                window: k,
                start: w.start,
                end: w.end,
                loss: last.loss,
                gradients: gradients(&run.graph, &w.quality, &last.weights, false)?,
            })
        })
        .collect()
}

const LOSS_HEADER: [&str; 12] = [
    "window", "step", "flow", "spatial", "temporal", "lambda_s", "lambda_t", "sigma2_s", "sigma2_t", "total",
    "final", "residual",
];

pub fn write_losses(path: &Path, output: &TrackOutput) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(LOSS_HEADER)?;
    for (k, win) in output.windows.iter().enumerate() {
        for r in &win.history {
            let l = &r.loss;
            w.write_record([
                k.to_string(),
                r.step.to_string(),
                l.flow.to_string(),
                l.spatial.to_string(),
                l.temporal.to_string(),
                l.lambda_s.to_string(),
                l.lambda_t.to_string(),
                r.weights.sigma2_s.to_string(),
                r.weights.sigma2_t.to_string(),
                l.total.to_string(),
                l.final_loss.to_string(),
                r.residual.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Writes config.json, losses.csv, assignments.json and metrics.json.
pub fn write_run(dir: &Path, cfg: &ExperimentConfig, result: &RunResult) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_json(&dir.join("config.json"), cfg)?;
    write_losses(&dir.join("losses.csv"), &result.output)?;
    write_json(&dir.join("assignments.json"), &result.output.assignment)?;
    write_json(&dir.join("metrics.json"), &result.metrics)?;
    Ok(())
}
