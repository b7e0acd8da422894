mod experiment;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use flowtrack::detection::write_sequence;
use flowtrack::flow::SolverConfig;
use flowtrack::gradcheck::{run_gradcheck, Fault, GradcheckConfig};
use flowtrack::graph::{build_graph, AdjacencyMode, GraphConfig, TemporalNorm};
use flowtrack::pipeline::{windows, Method, TrackerConfig};
use flowtrack::scenario::{NoiseModel, DEFAULT_FPS, DEFAULT_FRAMES};
use flowtrack::spectral::{graph_weights, WeightsMode};
use flowtrack::surface::{loss_surface, random_directions};
use flowtrack::{descend, DetectionQuality};

use experiment::{execute, generate, load, loss_dump, write_json, write_run, ExperimentConfig, Input};

#[derive(Parser)]
#[command(name = "flowtrack", version, about = "Differentiable flow-based multi-object tracking experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic detection sequence.
    Gen(GenArgs),
    /// Track a sequence, score it and write a run directory.
    Run(RunArgs),
    /// Print per-window adaptive loss weights at the initial flows.
    Weights(RunArgs),
    /// Verify analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Run a parameter grid over a seeded scenario batch.
    Sweep(SweepArgs),
    /// Export loss values on a 2-D slice of logit space.
    Surface(SurfaceArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioName {
    Crossing,
    Occlusion,
    Posture,
}

impl ScenarioName {
    fn as_str(self) -> &'static str {
        match self {
            ScenarioName::Crossing => "crossing",
            ScenarioName::Occlusion => "occlusion",
            ScenarioName::Posture => "posture",
        }
    }
}

#[derive(Args, Clone)]
struct ScenarioArgs {
    /// Built-in scenario (ignored when --input is given).
    #[arg(long, value_enum, default_value = "crossing")]
    scenario: ScenarioName,
    /// Detection-sequence JSON to load instead of generating.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_FRAMES)]
    frames: usize,
    /// Target frame rate; below 30 the scenario is subsampled.
    #[arg(long, default_value_t = DEFAULT_FPS)]
    fps: f64,
    #[arg(long, default_value_t = 0.0)]
    pos_sigma: f64,
    #[arg(long, default_value_t = 0.0)]
    fp_rate: f64,
    #[arg(long, default_value_t = 0.0)]
    fn_rate: f64,
    #[arg(long, default_value_t = 0.0)]
    embed_drift: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl ScenarioArgs {
    fn noise(&self) -> NoiseModel {
        NoiseModel {
            pos_sigma: self.pos_sigma,
            fp_rate: self.fp_rate,
            fn_rate: self.fn_rate,
            embed_drift: self.embed_drift,
            seed: self.seed,
        }
    }

    fn input(&self) -> Input {
        match &self.input {
            Some(path) => Input::File { path: path.clone() },
            None => Input::Generated {
                name: self.scenario.as_str().into(),
                frames: self.frames,
                fps: self.fps,
                noise: self.noise(),
            },
        }
    }
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// Output detection-sequence JSON.
    #[arg(long)]
    out: PathBuf,
    /// Also write the full scenario (ground truth) as JSON.
    #[arg(long)]
    scenario_out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Flow,
    GreedyNn,
    HungarianDist,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Flow => Method::Flow,
            MethodArg::GreedyNn => Method::GreedyNn,
            MethodArg::HungarianDist => Method::HungarianDist,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AdjacencyArg {
    Threshold,
    Sigmoid,
}

#[derive(Clone, Copy, ValueEnum)]
enum NormArg {
    Linear,
    None,
    Adaptive,
}

impl From<NormArg> for TemporalNorm {
    fn from(n: NormArg) -> Self {
        match n {
            NormArg::Linear => TemporalNorm::Linear,
            NormArg::None => TemporalNorm::None,
            NormArg::Adaptive => TemporalNorm::Adaptive,
        }
    }
}

#[derive(Args, Clone)]
struct TrackerArgs {
    #[arg(long, value_enum, default_value = "flow")]
    method: MethodArg,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 0.01)]
    eta: f64,
    #[arg(long, default_value_t = 0.1)]
    tau: f64,
    #[arg(long, default_value_t = 5)]
    window: usize,
    #[arg(long, default_value_t = 0.9)]
    alpha: f64,
    /// `adaptive`, `frozen`, or `fixed <lambda_s> <lambda_t>`.
    #[arg(long, num_args = 1..=3, default_values = ["adaptive"])]
    weights_mode: Vec<String>,
    #[arg(long, value_enum, default_value = "threshold")]
    adjacency: AdjacencyArg,
    #[arg(long, value_enum, default_value = "linear")]
    temporal_norm: NormArg,
    /// Disable linking track ends to later starts across missing frames.
    #[arg(long)]
    no_bridge: bool,
}

fn parse_weights_mode(v: &[String]) -> Result<WeightsMode> {
    match v.first().map(String::as_str) {
        Some("adaptive") if v.len() == 1 => Ok(WeightsMode::Adaptive),
        Some("frozen") if v.len() == 1 => Ok(WeightsMode::FrozenInit),
        Some("fixed") if v.len() == 3 => {
            let ls: f64 = v[1].parse().context("lambda_s")?;
            let lt: f64 = v[2].parse().context("lambda_t")?;
            Ok(WeightsMode::Fixed {
                lambda_s: ls,
                lambda_t: lt,
            })
        }
        _ => bail!("--weights-mode expects `adaptive`, `frozen` or `fixed <lambda_s> <lambda_t>`"),
    }
}

impl TrackerArgs {
    fn config(&self, dt: f64) -> Result<TrackerConfig> {
        let graph = GraphConfig {
            window: self.window,
            alpha: self.alpha,
            tau: self.tau,
            dt,
            adjacency_mode: match self.adjacency {
                AdjacencyArg::Threshold => AdjacencyMode::DEFAULT_THRESHOLD,
                AdjacencyArg::Sigmoid => AdjacencyMode::DEFAULT_SIGMOID,
            },
            temporal_norm: self.temporal_norm.into(),
            ..GraphConfig::default()
        };
        graph.validate()?;
        let mut cfg = TrackerConfig {
            method: self.method.into(),
            graph,
            solver: SolverConfig {
                steps: self.steps,
                eta: self.eta,
                weights_mode: parse_weights_mode(&self.weights_mode)?,
                ..SolverConfig::default()
            },
            ..TrackerConfig::default()
        };
        cfg.bridge.enabled = !self.no_bridge;
        Ok(cfg)
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[command(flatten)]
    tracker: TrackerArgs,
    /// Run directory (created if missing).
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
    /// Also write final per-window loss terms and gradients as JSON.
    #[arg(long)]
    dump_loss: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, hide = true, value_parser = parse_fault)]
    inject_fault: Option<Fault>,
}

fn parse_fault(s: &str) -> std::result::Result<Fault, String> {
    match s {
        "spatial-sign" => Ok(Fault::SpatialSign),
        other => Err(format!("unknown fault '{other}'")),
    }
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, value_enum, default_value = "crossing")]
    scenario: ScenarioName,
    #[arg(long, default_value_t = DEFAULT_FRAMES)]
    frames: usize,
    /// Scenario seeds per cell.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.001)]
    pos_sigma: f64,
    #[arg(long, value_delimiter = ',', default_values_t = [0.1])]
    tau: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [5usize])]
    window: Vec<usize>,
    #[arg(long, value_delimiter = ',', value_enum, default_values = ["linear"])]
    temporal_norm: Vec<NormArg>,
    #[arg(long, value_delimiter = ',', value_enum, default_values = ["flow"])]
    method: Vec<MethodArg>,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Aggregated CSV output.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SurfaceArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[command(flatten)]
    tracker: TrackerArgs,
    /// Which window of the sequence to probe.
    #[arg(long, default_value_t = 0)]
    window_index: usize,
    #[arg(long, default_value_t = 11)]
    grid_n: usize,
    /// Half-width of the grid along each direction, in logit units.
    #[arg(long, default_value_t = 0.1)]
    span: f64,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            let check_failure = err
                .downcast_ref::<flowtrack::Error>()
                .is_some_and(|e| matches!(e, flowtrack::Error::DivergenceDetected { .. }));
            ExitCode::from(if check_failure { 1 } else { 2 })
        }
    }
}

fn dispatch(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Gen(a) => cmd_gen(a),
        Command::Run(a) => cmd_run(a),
        Command::Weights(a) => cmd_weights(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Surface(a) => cmd_surface(a),
    }
}

fn cmd_gen(a: GenArgs) -> Result<ExitCode> {
    let s = generate(a.scenario.scenario.as_str(), a.scenario.frames, a.scenario.fps, a.scenario.noise())?;
    write_sequence(&a.out, &s.detections()?)?;
    if let Some(path) = a.scenario_out {
        std::fs::write(&path, serde_json::to_string_pretty(&s)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn experiment(scenario: &ScenarioArgs, tracker: &TrackerArgs) -> Result<ExperimentConfig> {
    let dt = if scenario.input.is_some() { 1.0 / DEFAULT_FPS } else { 1.0 / scenario.fps };
    Ok(ExperimentConfig {
        input: scenario.input(),
        tracker: tracker.config(dt)?,
        seed: scenario.seed,
    })
}

fn cmd_run(a: RunArgs) -> Result<ExitCode> {
    let cfg = experiment(&a.scenario, &a.tracker)?;
    let loaded = load(&cfg.input)?;
    let result = execute(&cfg, &loaded)?;
    write_run(&a.out, &cfg, &result)?;
    if let Some(path) = &a.dump_loss {
        write_json(path, &loss_dump(&cfg, &loaded, &result.output)?)?;
    }
    let m = &result.metrics;
    println!(
        "ids {} frag {} mota_lite {:.4} idf1_lite {:.4} assoc_acc {:.4} -> {}",
        m.ids,
        m.frag,
        m.mota_lite,
        m.idf1_lite,
        m.assoc_acc,
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_weights(a: RunArgs) -> Result<ExitCode> {
    let cfg = experiment(&a.scenario, &a.tracker)?;
    let loaded = load(&cfg.input)?;
    println!("window,start,end,sigma2_s,sigma2_t,lambda_s,lambda_t");
    for (k, r) in windows(loaded.frames.len(), cfg.tracker.graph.window).into_iter().enumerate() {
        let g = build_graph(&loaded.frames[r.clone()], &cfg.tracker.graph)?;
        let w = graph_weights(&g)?;
        println!(
            "{k},{},{},{},{},{},{}",
            r.start, r.end, w.sigma2_s, w.sigma2_t, w.lambda_s, w.lambda_t
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let report = run_gradcheck(&GradcheckConfig {
        trials: a.trials,
        seed: a.seed,
        fault: a.inject_fault.unwrap_or_default(),
        ..GradcheckConfig::default()
    })?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    println!(
        "max relative error {:.3e} over {} graphs: {}",
        report.max_rel_err,
        report.trials,
        if report.passed { "ok" } else { "FAILED" }
    );
    Ok(if report.passed { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

#[derive(Serialize)]
struct SweepRow {
    scenario: String,
    method: String,
    tau: f64,
    window: usize,
    temporal_norm: String,
    seeds: u64,
    ids: usize,
    frag: usize,
    mota_lite: f64,
    idf1_lite: f64,
    assoc_acc: f64,
    graph_bytes: usize,
    wall_ms: f64,
}

fn cmd_sweep(a: SweepArgs) -> Result<ExitCode> {
    if a.tau.is_empty() || a.window.is_empty() || a.temporal_norm.is_empty() || a.method.is_empty() || a.seeds == 0 {
        bail!("sweep grid is empty");
    }
    let mut cells = Vec::new();
    for &m in &a.method {
        for &tau in &a.tau {
            for &w in &a.window {
                for &n in &a.temporal_norm {
                    cells.push((m, tau, w, n));
                }
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(a.jobs.max(1)).build()?;
    let rows: Vec<Result<SweepRow>> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(m, tau, w, n)| {
                let tracker = TrackerArgs {
                    method: m,
                    steps: a.steps,
                    eta: 0.01,
                    tau,
                    window: w,
                    alpha: 0.9,
                    weights_mode: vec!["adaptive".into()],
                    adjacency: AdjacencyArg::Threshold,
                    temporal_norm: n,
                    no_bridge: false,
                };
                let start = Instant::now();
                let (mut ids, mut frag, mut mota, mut idf1, mut acc, mut bytes) = (0, 0, 0.0, 0.0, 0.0, 0);
                for s in 0..a.seeds {
                    let scenario = ScenarioArgs {
                        scenario: a.scenario,
                        input: None,
                        frames: a.frames,
                        fps: DEFAULT_FPS,
                        pos_sigma: a.pos_sigma,
                        fp_rate: 0.0,
                        fn_rate: 0.0,
                        embed_drift: 0.0,
                        seed: a.seed.wrapping_add(s),
                    };
                    let cfg = experiment(&scenario, &tracker)?;
                    let loaded = load(&cfg.input)?;
                    let r = execute(&cfg, &loaded)?;
                    ids += r.metrics.ids;
                    frag += r.metrics.frag;
                    mota += r.metrics.mota_lite;
                    idf1 += r.metrics.idf1_lite;
                    acc += r.metrics.assoc_acc;
                    bytes = bytes.max(r.output.windows.iter().map(|w| w.graph_bytes).max().unwrap_or(0));
                }
                let k = a.seeds as f64;
                Ok(SweepRow {
                    scenario: a.scenario.as_str().into(),
                    method: format!("{:?}", Method::from(m)),
                    tau,
                    window: w,
                    temporal_norm: format!("{:?}", TemporalNorm::from(n)),
                    seeds: a.seeds,
                    ids,
                    frag,
                    mota_lite: mota / k,
                    idf1_lite: idf1 / k,
                    assoc_acc: acc / k,
                    graph_bytes: bytes,
                    wall_ms: start.elapsed().as_secs_f64() * 1e3,
                })
            })
            .collect()
    });
    let mut w = csv::Writer::from_path(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    for row in rows {
        w.serialize(row?)?;
    }
    w.flush()?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_surface(a: SurfaceArgs) -> Result<ExitCode> {
    let cfg = experiment(&a.scenario, &a.tracker)?;
    let loaded = load(&cfg.input)?;
    let ranges = windows(loaded.frames.len(), cfg.tracker.graph.window);
    let Some(range) = ranges.get(a.window_index) else {
        bail!("window index {} out of range ({} windows)", a.window_index, ranges.len());
    };
    let g = build_graph(&loaded.frames[range.clone()], &cfg.tracker.graph)?;
    let q = DetectionQuality::perfect();
    let run = descend(&g, &q, &cfg.tracker.solver)?;
    let (d1, d2) = random_directions(&g, cfg.seed);
    let grid = loss_surface(&g, &q, cfg.tracker.solver.weights_mode, &run.state.logits, &d1, &d2, a.grid_n, a.span)?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(&a.out)?;
    for row in &grid {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(ExitCode::SUCCESS)
}
