//! Command-line front end.

use std::fs;
use std::io::{self, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use log::info;

use crate::detector::{Detector, GroundTruth, OracleConfig, OracleDetector, StochasticOracle};
use crate::distribution::{run_stream, serve, simulate_scaling, ClusterConfig, SimScenario, WorkerPool};
use crate::frameio::{
    frame_detections, load_ground_truth, read_results, write_results, write_timing_csv, ConfigFile, DetectorKind,
    FrameSource, PathsSection, PipelineOverrides, RunConfig, RunMode,
};
use crate::metrics::{ap_report, count_report, write_count_csv, ApMethod};
use crate::pipeline::{run_allcrops_baseline, run_downscale_baseline, CropEvaluator, FrameResult, LocalEvaluator, Pipeline};
use crate::synthetic::{Scene, SceneSpec};

#[derive(Debug, Parser)]
#[command(name = "attnpipe", version, about = "Attention-guided crop selection for object detection on very large frames")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Process a frame directory with the pipeline or a baseline.
    Run(RunArgs),
    /// Run a detector worker.
    Serve(ServeArgs),
    /// Score a results file against ground truth.
    Eval(EvalArgs),
    /// Sweep worker counts in the scaling simulator.
    Simulate(SimulateArgs),
    /// Render a synthetic scene and its ground truth.
    GenSynthetic(GenArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, value_enum)]
    pub mode: Option<RunMode>,
    /// Named crop setting, e.g. "1 att, 3 fin, 50 over".
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub attention_rows: Option<u32>,
    #[arg(long)]
    pub final_rows: Option<u32>,
    #[arg(long)]
    pub overlap_px: Option<u32>,
    #[arg(long)]
    pub attention_overlap_px: Option<u32>,
    #[arg(long)]
    pub attention_margin_px: Option<i64>,
    #[arg(long)]
    pub temporal_window: Option<usize>,
    #[arg(long)]
    pub min_confidence: Option<f64>,
    #[arg(long)]
    pub frames: Option<PathBuf>,
    #[arg(long)]
    pub gt: Option<PathBuf>,
    #[arg(long)]
    pub results: Option<PathBuf>,
    #[arg(long)]
    pub timing: Option<PathBuf>,
    /// Add per-frame timing to the results file.
    #[arg(long)]
    pub embed_timing: bool,
    #[arg(long, value_enum)]
    pub detector: Option<DetectorKind>,
    /// Comma-separated host:port list.
    #[arg(long, value_delimiter = ',')]
    pub final_workers: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    pub attention_workers: Option<Vec<String>>,
}

impl clap::ValueEnum for DetectorKind {
    fn value_variants<'a>() -> &'a [Self] {
        &[DetectorKind::Oracle, DetectorKind::Remote]
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(match self {
            DetectorKind::Oracle => "oracle",
            DetectorKind::Remote => "remote",
        }))
    }
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Address to bind; port 0 picks a free port.
    #[arg(long, default_value = "127.0.0.1:7070")]
    pub listen: String,
    /// Detector to serve: `oracle:<gt.jsonl>`.
    #[arg(long)]
    pub detector: String,
    #[arg(long)]
    pub visibility_threshold: Option<f64>,
    #[arg(long)]
    pub min_size_px: Option<f64>,
    /// Drop this fraction of oracle hits, reproducibly per seed.
    #[arg(long, default_value_t = 0.0)]
    pub miss_rate: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Results JSON-lines file.
    #[arg(long)]
    pub detections: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0.25,0.5,0.75")]
    pub thresholds: Vec<f64>,
    /// 11-point interpolated AP instead of the area under the envelope.
    #[arg(long)]
    pub eleven_point: bool,
    /// Also write the report JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write per-frame detected/ground-truth counts as CSV.
    #[arg(long)]
    pub counts: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Scenario file (TOML, or JSON with a .json extension).
    #[arg(long)]
    pub scenario: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub na: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub nf: Option<Vec<usize>>,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Failure classes, mapped to exit codes 2 and 1.
#[derive(Debug)]
pub enum CliError {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(e) | CliError::Runtime(e) => f.write_str(&error_chain(e.as_ref())),
        }
    }
}

/// Joins an error with its sources, skipping any source whose text the
/// outer messages already include.
pub fn error_chain(e: &(dyn std::error::Error + 'static)) -> String {
    let mut out = e.to_string();
    let mut cur = e.source();
    while let Some(s) = cur {
        let msg = s.to_string();
        if !out.contains(&msg) {
            out.push_str(": ");
            out.push_str(&msg);
        }
        cur = s.source();
    }
    out
}

trait OrExit<T> {
    fn usage(self) -> Result<T, CliError>;
    fn runtime(self) -> Result<T, CliError>;
}

impl<T, E: Into<anyhow::Error>> OrExit<T> for Result<T, E> {
    fn usage(self) -> Result<T, CliError> {
        self.map_err(|e| CliError::Usage(e.into()))
    }

    fn runtime(self) -> Result<T, CliError> {
        self.map_err(|e| CliError::Runtime(e.into()))
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Serve(a) => cmd_serve(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::GenSynthetic(a) => cmd_gen_synthetic(a),
    }
}

// ---------------------------------------------------------------------------
// run

fn resolve_run_config(a: &RunArgs) -> anyhow::Result<RunConfig> {
    let mut file = ConfigFile::load(&a.config)?;
    if let Some(m) = a.mode {
        file.mode = m;
    }
    file.pipeline.merge(&PipelineOverrides {
        preset: a.preset.clone(),
        attention_rows: a.attention_rows,
        final_rows: a.final_rows,
        overlap_px: a.overlap_px,
        attention_overlap_px: a.attention_overlap_px,
        attention_margin_px: a.attention_margin_px,
        temporal_window: a.temporal_window,
        min_confidence: a.min_confidence,
    });
    file.paths.merge(&PathsSection {
        frames: a.frames.clone(),
        gt: a.gt.clone(),
        results: a.results.clone(),
        timing: a.timing.clone(),
    });
    file.embed_timing |= a.embed_timing;
    if let Some(k) = a.detector {
        file.detector.kind = k;
    }
    if a.final_workers.is_some() || a.attention_workers.is_some() {
        let cluster = file.cluster.get_or_insert_with(|| ClusterConfig {
            attention_workers: Vec::new(),
            final_workers: Vec::new(),
            request_timeout_ms: crate::distribution::DEFAULT_TIMEOUT.as_millis() as u64,
        });
        if let Some(f) = &a.final_workers {
            cluster.final_workers.clone_from(f);
        }
        if let Some(w) = &a.attention_workers {
            cluster.attention_workers.clone_from(w);
        }
    }
    Ok(RunConfig::from_file(file)?)
}

fn oracle_detector(gt: GroundTruth, cfg: OracleConfig, miss_rate: f64, seed: u64) -> Arc<dyn Detector> {
    let oracle = OracleDetector::new(gt, cfg);
    if miss_rate > 0.0 {
        Arc::new(StochasticOracle::new(oracle, miss_rate, seed))
    } else {
        Arc::new(oracle)
    }
}

enum Evaluators {
    Local(LocalEvaluator),
    Remote(WorkerPool, Option<WorkerPool>),
}

impl Evaluators {
    fn final_eval(&self) -> &dyn CropEvaluator {
        match self {
            Evaluators::Local(e) => e,
            Evaluators::Remote(f, _) => f,
        }
    }

    fn attention_eval(&self) -> Option<&dyn CropEvaluator> {
        match self {
            Evaluators::Local(_) => None,
            Evaluators::Remote(_, a) => a.as_ref().map(|a| a as &dyn CropEvaluator),
        }
    }
}

fn run_frames(cfg: &RunConfig, source: &FrameSource, evals: &Evaluators) -> anyhow::Result<Vec<FrameResult>> {
    let final_eval = evals.final_eval();
    match cfg.mode {
        RunMode::Pipeline => {
            let mut pipeline = Pipeline::new(cfg.settings, cfg.policy.clone())?;
            run_stream(source, 0, &mut pipeline, final_eval, evals.attention_eval()).map_err(|e| {
                anyhow!(
                    "{}; {} frames completed, resume from index {}",
                    error_chain(&e),
                    e.completed.len(),
                    e.cursor
                )
            })
        }
        RunMode::Downscale | RunMode::Allcrops => {
            let mut out = Vec::with_capacity(source.len());
            for i in 0..source.len() {
                let t = Instant::now();
                let (id, frame) = source.load_frame(i)?;
                let io_ms = t.elapsed().as_secs_f64() * 1e3;
                let mut r = if cfg.mode == RunMode::Downscale {
                    run_downscale_baseline(id, &frame, &cfg.policy, cfg.settings.min_confidence, final_eval)?
                } else {
                    run_allcrops_baseline(id, &frame, cfg.settings.final_grid, &cfg.policy, cfg.settings.min_confidence, final_eval)?
                };
                r.timing.io_ms = io_ms;
                out.push(r);
            }
            Ok(out)
        }
    }
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let i = ((sorted.len() - 1) as f64 * p).round() as usize;
    sorted[i]
}

/// One-paragraph throughput summary.
pub fn fps_summary(results: &[FrameResult], wall: Duration) -> String {
    let n = results.len();
    let secs = wall.as_secs_f64();
    let mut per_frame: Vec<f64> = results.iter().map(|r| r.timing.total_ms()).collect();
    per_frame.sort_by(f64::total_cmp);
    let mean = if n == 0 { 0.0 } else { per_frame.iter().sum::<f64>() / n as f64 };
    let active: usize = results.iter().map(|r| r.active_count).sum();
    let total: usize = results.iter().map(|r| r.total_count).sum();
    format!(
        "{n} frames in {secs:.3} s: {:.2} FPS\nper-frame ms: mean {mean:.2}, p50 {:.2}, p90 {:.2}, max {:.2}\ncrops evaluated: {active} of {total}",
        if secs > 0.0 { n as f64 / secs } else { 0.0 },
        percentile(&per_frame, 0.5),
        percentile(&per_frame, 0.9),
        per_frame.last().copied().unwrap_or(0.0),
    )
}

fn ensure_parent(path: &Path) -> io::Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p),
        _ => Ok(()),
    }
}

fn cmd_run(a: RunArgs) -> Result<(), CliError> {
    let cfg = resolve_run_config(&a).usage()?;
    let source = FrameSource::open(&cfg.frames).usage()?;
    let gt = match &cfg.gt {
        Some(p) => Some(load_ground_truth(p).with_context(|| format!("reading {}", p.display())).usage()?),
        None => None,
    };
    let evals = match cfg.detector.kind {
        DetectorKind::Oracle => {
            let gt = gt.ok_or_else(|| anyhow!("the oracle detector needs ground truth")).usage()?;
            Evaluators::Local(LocalEvaluator::new(oracle_detector(
                gt,
                cfg.detector.oracle,
                cfg.detector.miss_rate,
                cfg.detector.seed,
            )))
        }
        DetectorKind::Remote => {
            let cluster = cfg.cluster.as_ref().expect("validated");
            let (fin, att) = WorkerPool::from_cluster(cluster);
            fin.health().context("final workers").runtime()?;
            if let Some(att) = &att {
                att.health().context("attention workers").runtime()?;
            }
            Evaluators::Remote(fin, att)
        }
    };
    info!(
        "{:?} mode, {} ({} frames of {:?})",
        cfg.mode,
        cfg.settings.preset_name(),
        source.len(),
        source.dimensions()
    );

    let t = Instant::now();
    let results = run_frames(&cfg, &source, &evals).runtime()?;
    let wall = t.elapsed();

    ensure_parent(&cfg.results).runtime()?;
    write_results(&results, &cfg.results, cfg.embed_timing).runtime()?;
    if let Some(timing) = &cfg.timing {
        ensure_parent(timing).runtime()?;
        write_timing_csv(&results, timing).runtime()?;
    }
    println!("{}", fps_summary(&results, wall));
    Ok(())
}

// ---------------------------------------------------------------------------
// serve

fn cmd_serve(a: ServeArgs) -> Result<(), CliError> {
    let Some(gt_path) = a.detector.strip_prefix("oracle:") else {
        return Err(CliError::Usage(anyhow!(
            "unknown detector {:?}; expected oracle:<gt.jsonl>",
            a.detector
        )));
    };
    let gt = load_ground_truth(Path::new(gt_path))
        .with_context(|| format!("reading {gt_path}"))
        .usage()?;
    let mut cfg = OracleConfig::default();
    if let Some(v) = a.visibility_threshold {
        cfg.visibility_threshold = v;
    }
    if let Some(v) = a.min_size_px {
        cfg.min_size_px = v;
    }
    if !(0.0..=1.0).contains(&a.miss_rate) {
        return Err(CliError::Usage(anyhow!("--miss-rate must lie in [0, 1]")));
    }
    let detector = oracle_detector(gt, cfg, a.miss_rate, a.seed);
    let listener = TcpListener::bind(&a.listen)
        .with_context(|| format!("cannot bind {}", a.listen))
        .runtime()?;
    let addr = listener.local_addr().runtime()?;
    println!("listening on {addr}");
    io::stdout().flush().ok();
    serve(listener, detector).runtime()
}

// ---------------------------------------------------------------------------
// eval

fn cmd_eval(a: EvalArgs) -> Result<(), CliError> {
    if a.thresholds.is_empty() || a.thresholds.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
        return Err(CliError::Usage(anyhow!("thresholds must lie in (0, 1]")));
    }
    let results = read_results(&a.detections).usage()?;
    let gt = load_ground_truth(&a.gt)
        .with_context(|| format!("reading {}", a.gt.display()))
        .usage()?;
    let seen: std::collections::BTreeSet<_> = results.iter().map(|r| r.frame_id).collect();
    let missing: Vec<_> = gt.frame_ids().filter(|f| !seen.contains(f)).collect();
    if !missing.is_empty() {
        return Err(CliError::Runtime(anyhow!(
            "mismatched frame ids: ground truth frames {missing:?} have no results"
        )));
    }
    let method = if a.eleven_point { ApMethod::ElevenPoint } else { ApMethod::Continuous };
    let frames = frame_detections(&results);
    let report = ap_report(&frames, &gt, &a.thresholds, method).runtime()?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    println!("{json}");
    if let Some(out) = &a.out {
        ensure_parent(out).runtime()?;
        fs::write(out, format!("{json}\n")).runtime()?;
    }
    if let Some(path) = &a.counts {
        ensure_parent(path).runtime()?;
        let file = fs::File::create(path).runtime()?;
        write_count_csv(&count_report(&frames, &gt), file).runtime()?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// simulate

fn load_scenario(path: &Path) -> anyhow::Result<SimScenario> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let scenario = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text)?
    } else {
        toml::from_str(&text)?
    };
    Ok(scenario)
}

fn cmd_simulate(a: SimulateArgs) -> Result<(), CliError> {
    let mut scenario = load_scenario(&a.scenario).usage()?;
    if let Some(na) = a.na {
        scenario.n_a = na;
    }
    if let Some(nf) = a.nf {
        scenario.n_f = nf;
    }
    scenario.validate().usage()?;
    let table = simulate_scaling(&scenario).runtime()?;
    match &a.out {
        Some(path) => {
            ensure_parent(path).runtime()?;
            table.write_csv(fs::File::create(path).runtime()?).runtime()?;
        }
        None => table.write_csv(io::stdout().lock()).runtime()?,
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// gen-synthetic

fn cmd_gen_synthetic(a: GenArgs) -> Result<(), CliError> {
    let spec = SceneSpec::load(&a.spec).usage()?;
    let scene = Scene::new(spec).usage()?;
    scene.write(&a.out).runtime()?;
    if scene.spec.frames > 0 {
        println!(
            "wrote {} frames and {} annotations to {}",
            scene.spec.frames,
            scene.ground_truth().len(),
            a.out.display()
        );
    }
    Ok(())
}
