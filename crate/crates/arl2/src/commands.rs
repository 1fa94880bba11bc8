//! Subcommand bodies. Each returns the artifacts it wrote, relative to the
//! output directory; [`execute`] adds the manifest or the error record.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use arl2_core::distill::{
    train_stage1, train_stage2, AlignmentSampler, JointSampler, Optimizer, TrainConfig, TrainRun,
};
use arl2_core::gdn::RecurrentState;
use arl2_core::hybrid::HybridLayer;
use arl2_core::streaming::{
    count_attention_flops, generate, memory_footprint, state_update_macs, AttentionBlock, AttnDims, Backend, Clock,
    MetricsRecord, NoClock, StreamConfig, ToyModel,
};
use arl2_core::{Precision, Tensor};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::blob;
use crate::config::{
    self, BenchConfig, CostConfig, DistillConfig, GenerateConfig, OptimizerName, PrecisionName, RunConfig, SelectConfig,
};
use crate::error::{CliError, Result};
use crate::fit::{min_degree_fit, polyfit};
use crate::scores;

/// Relative R² slack when picking the lowest fitting degree; the counters
/// are exact polynomials, so anything looser only hides mistakes.
pub const FIT_TOLERANCE: f64 = 1e-9;

/// Noise seed derived from the run seed so the noise stream never
/// coincides with the weight stream.
pub fn noise_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

/// Monotonic wall clock for timed runs.
pub struct WallClock(Instant);

impl WallClock {
    pub fn new() -> Self {
        Self(Instant::now())
    }
}

impl Default for WallClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for WallClock {
    fn now_ns(&self) -> u64 {
        self.0.elapsed().as_nanos() as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Bench,
    Generate,
    Distill,
    SelectLayers,
    Cost,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Bench => "bench",
            Command::Generate => "generate",
            Command::Distill => "distill",
            Command::SelectLayers => "select-layers",
            Command::Cost => "cost",
        }
    }
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Default)]
pub struct Invocation {
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub precision: Option<PrecisionName>,
    /// `select-layers` only: score file overriding the config.
    pub scores: Option<PathBuf>,
}

#[derive(Serialize)]
struct Versions {
    arl2: &'static str,
    arl2_core: &'static str,
}

#[derive(Serialize)]
struct Manifest<'a> {
    subcommand: &'a str,
    status: &'a str,
    config_sha256: String,
    seed: u64,
    config: serde_json::Value,
    versions: Versions,
    wall_time_ms: f64,
    artifacts: Vec<String>,
}

#[derive(Serialize)]
struct ErrorRecord<'a> {
    subcommand: &'a str,
    status: &'a str,
    kind: &'a str,
    message: String,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| CliError::io(path, e))?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    use std::io::Write;
    w.write_all(b"\n").map_err(|e| CliError::io(path, e))
}

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Runs one subcommand and writes `manifest.json`, or `error.json` when it
/// fails. Returns the process exit code.
pub fn execute(cmd: Command, inv: &Invocation) -> i32 {
    let start = Instant::now();
    let result = std::fs::create_dir_all(&inv.out)
        .map_err(|e| CliError::io(&inv.out, e))
        .and_then(|_| dispatch(cmd, inv));
    let outcome = result.and_then(|(cfg, seed, artifacts)| {
        let canonical = serde_json::to_vec(&cfg)?;
        let manifest = Manifest {
            subcommand: cmd.name(),
            status: "ok",
            config_sha256: hex::encode(Sha256::digest(&canonical)),
            seed,
            config: cfg,
            versions: Versions {
                arl2: env!("CARGO_PKG_VERSION"),
                arl2_core: arl2_core::VERSION,
            },
            wall_time_ms: start.elapsed().as_secs_f64() * 1e3,
            artifacts,
        };
        write_json(&inv.out.join("manifest.json"), &manifest)
    });
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("arl2 {}: {e}", cmd.name());
            let record = ErrorRecord {
                subcommand: cmd.name(),
                status: "error",
                kind: e.kind(),
                message: e.to_string(),
            };
            if std::fs::create_dir_all(&inv.out).is_ok() {
                let _ = write_json(&inv.out.join("error.json"), &record);
            }
            e.exit_code()
        }
    }
}

type Dispatched = (serde_json::Value, u64, Vec<String>);

fn dispatch(cmd: Command, inv: &Invocation) -> Result<Dispatched> {
    fn finish<C: RunConfig>(cfg: &C, artifacts: Vec<String>) -> Result<Dispatched> {
        Ok((serde_json::to_value(cfg)?, cfg.seed(), artifacts))
    }
    let path = inv.config.as_deref();
    match cmd {
        Command::Bench => {
            let cfg: BenchConfig = config::load(path, inv.seed, inv.precision)?;
            let a = bench(&cfg, &inv.out)?;
            finish(&cfg, a)
        }
        Command::Generate => {
            let cfg: GenerateConfig = config::load(path, inv.seed, inv.precision)?;
            let a = run_generate(&cfg, &inv.out)?;
            finish(&cfg, a)
        }
        Command::Distill => {
            let cfg: DistillConfig = config::load(path, inv.seed, inv.precision)?;
            let a = distill(&cfg, &inv.out)?;
            finish(&cfg, a)
        }
        Command::SelectLayers => {
            // the score path may come from the flag, so validate after overrides
            let mut cfg = match path {
                Some(p) => load_without_validation(p)?,
                None => SelectConfig::default(),
            };
            if let Some(s) = &inv.scores {
                cfg.scores = Some(s.clone());
            }
            if let Some(s) = inv.seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            let a = select_layers(&cfg, &inv.out)?;
            finish(&cfg, a)
        }
        Command::Cost => {
            let cfg: CostConfig = config::load(path, inv.seed, inv.precision)?;
            let a = cost(&cfg, &inv.out)?;
            finish(&cfg, a)
        }
    }
}

fn load_without_validation(p: &Path) -> Result<SelectConfig> {
    let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
    let mut c: SelectConfig =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
    c.rebase_paths(p.parent().unwrap_or(Path::new(".")));
    Ok(c)
}

#[derive(Serialize)]
pub struct MetricsRow<'a> {
    pub frame: usize,
    pub layer: usize,
    pub backend: &'a str,
    pub pass_type: &'a str,
    pub flops_macs: u64,
    pub bytes: u64,
    pub state_writes: u64,
    pub wall_ns: u64,
}

fn write_metrics(path: &Path, m: &MetricsRecord) -> Result<()> {
    write_csv(
        path,
        m.passes.iter().map(|p| MetricsRow {
            frame: p.frame,
            layer: p.layer,
            backend: p.backend.name(),
            pass_type: p.pass_type.name(),
            flops_macs: p.flops_macs,
            bytes: p.bytes,
            state_writes: p.state_writes,
            wall_ns: p.wall_ns,
        }),
    )
}

/// One (backend, N) point of a bench sweep.
#[derive(Debug, Clone, Serialize)]
pub struct CurvePoint {
    pub backend: &'static str,
    pub frames: usize,
    pub cumulative_attention_macs: u64,
    /// Bytes one layer keeps after the last frame.
    pub memory_bytes_per_layer: u64,
    pub state_writes_per_layer: u64,
    pub wall_ns: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CurveSummary {
    pub backend: &'static str,
    pub fit_degree: usize,
    pub r_squared: f64,
    pub quadratic_r_squared: f64,
    pub linear_r_squared: f64,
    pub leading_coefficient: f64,
    /// Exact `ΔBytes/ΔN` per layer when the memory curve is a line.
    pub memory_slope_bytes: Option<u64>,
    pub memory_constant: bool,
    pub expected_softmax_slope_bytes: u64,
}

fn run_point(cfg: &BenchConfig, backend: Backend, frames: usize) -> Result<(MetricsRecord, CurvePoint)> {
    let dims = cfg.model.dims();
    let mut model = ToyModel::new(dims, &vec![backend; dims.num_layers], cfg.seed, cfg.precision())?;
    let scfg = StreamConfig {
        num_frames: frames,
        tokens_per_frame: cfg.model.tokens_per_frame,
        denoise_steps: cfg.denoise_steps,
        seed: noise_seed(cfg.seed),
        precision: cfg.precision(),
        policy: Default::default(),
        chunk_size: cfg.chunk_size,
    };
    let wall = WallClock::new();
    let clock: &dyn Clock = if cfg.timing { &wall } else { &NoClock };
    let (_, metrics) = generate(&mut model, &scfg, clock)?;
    let last = *metrics.frames.last().expect("at least one frame");
    let point = CurvePoint {
        backend: backend.name(),
        frames,
        cumulative_attention_macs: last.attention_macs,
        memory_bytes_per_layer: last.memory_bytes / dims.num_layers as u64,
        state_writes_per_layer: metrics.layer_state_writes(0),
        wall_ns: last.wall_ns,
    };
    Ok((metrics, point))
}

/// Fits the curves of one backend.
pub fn summarize(points: &[CurvePoint], cfg: &BenchConfig) -> Option<CurveSummary> {
    let backend = points.first()?.backend;
    let x: Vec<f64> = points.iter().map(|p| p.frames as f64).collect();
    let y: Vec<f64> = points.iter().map(|p| p.cumulative_attention_macs as f64).collect();
    let fit = min_degree_fit(&x, &y, 3.min(x.len().saturating_sub(1)), FIT_TOLERANCE)?;
    let r2 = |d| polyfit(&x, &y, d).map_or(f64::NAN, |f| f.r_squared);
    let (n0, b0) = (points[0].frames as u64, points[0].memory_bytes_per_layer);
    let mut slope = None;
    if let Some(p) = points.iter().find(|p| p.frames as u64 != n0) {
        let (dn, db) = (
            p.frames as u64 as i128 - n0 as i128,
            p.memory_bytes_per_layer as i128 - b0 as i128,
        );
        if db % dn == 0 && db / dn >= 0 {
            let s = db / dn;
            let linear = points
                .iter()
                .all(|q| q.memory_bytes_per_layer as i128 == b0 as i128 + s * (q.frames as i128 - n0 as i128));
            if linear {
                slope = Some(s as u64);
            }
        }
    }
    let m = &cfg.model;
    Some(CurveSummary {
        backend,
        fit_degree: fit.degree,
        r_squared: fit.r_squared,
        quadratic_r_squared: r2(2),
        linear_r_squared: r2(1),
        leading_coefficient: *fit.coeffs.last().unwrap_or(&0.0),
        memory_slope_bytes: slope,
        memory_constant: points.iter().all(|p| p.memory_bytes_per_layer == b0),
        expected_softmax_slope_bytes: (2 * m.tokens_per_frame * m.heads * m.head_dim) as u64
            * cfg.precision().bytes_per_scalar() as u64,
    })
}

/// Sweeps every (backend, N) pair on worker threads.
pub fn bench_points(cfg: &BenchConfig) -> Result<Vec<(Backend, usize, MetricsRecord, CurvePoint)>> {
    let jobs: Vec<(Backend, usize)> = cfg
        .backends
        .iter()
        .flat_map(|&b| cfg.frames.iter().map(move |&n| (Backend::from(b), n)))
        .collect();
    let results: Vec<Result<(MetricsRecord, CurvePoint)>> = std::thread::scope(|s| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|&(b, n)| s.spawn(move || run_point(cfg, b, n)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("bench worker panicked"))
            .collect()
    });
    jobs.into_iter()
        .zip(results)
        .map(|((b, n), r)| r.map(|(m, p)| (b, n, m, p)))
        .collect()
}

pub fn bench(cfg: &BenchConfig, out: &Path) -> Result<Vec<String>> {
    let mut artifacts = Vec::new();
    let results = bench_points(cfg)?;
    for (b, n, m, _) in &results {
        let name = format!("metrics_{}_n{n}.csv", b.name());
        write_metrics(&out.join(&name), m)?;
        artifacts.push(name);
    }
    let points: Vec<CurvePoint> = results.into_iter().map(|r| r.3).collect();
    write_csv(&out.join("curves.csv"), points.iter())?;
    artifacts.push("curves.csv".into());
    let mut summaries = Vec::new();
    for b in &cfg.backends {
        let name = Backend::from(*b).name();
        let mut pts: Vec<CurvePoint> = points.iter().filter(|p| p.backend == name).cloned().collect();
        pts.sort_by_key(|p| p.frames);
        pts.dedup_by_key(|p| p.frames);
        if let Some(s) = summarize(&pts, cfg) {
            summaries.push(s);
        }
    }
    write_csv(&out.join("summary.csv"), summaries.iter())?;
    artifacts.push("summary.csv".into());
    Ok(artifacts)
}

fn build_model(cfg: &GenerateConfig) -> Result<ToyModel> {
    let dims = cfg.model.dims();
    let backends: Vec<Backend> = (0..dims.num_layers)
        .map(|l| {
            if cfg.hybrid_layers.contains(&l) {
                Backend::Hybrid
            } else {
                Backend::Softmax
            }
        })
        .collect();
    let mut model = ToyModel::new(dims, &backends, cfg.seed, cfg.precision())?;
    for (l, path) in &cfg.layer_params {
        let f = File::open(path).map_err(|e| CliError::io(path, e))?;
        let loaded = blob::read_hybrid_layer(std::io::BufReader::new(f))?;
        let AttentionBlock::Hybrid(slot) = &mut model.layers[*l].attn else {
            unreachable!("validated as a hybrid layer");
        };
        if loaded.proj() != slot.proj() {
            return Err(CliError::Input(format!(
                "{}: parameters were distilled from different teacher weights than layer {l}",
                path.display()
            )));
        }
        // only the learned parameters carry over; memory starts empty
        *slot = HybridLayer::from_parts(
            loaded.proj().clone(),
            loaded.fmaps,
            loaded.gates,
            loaded.gp,
            RecurrentState::new(dims.heads, dims.head_dim, cfg.precision()),
        )?;
    }
    Ok(model)
}

#[derive(Serialize)]
struct FrameNorm {
    frame: usize,
    frobenius_norm: f64,
    mean: f64,
    max_abs: f64,
}

pub fn run_generate(cfg: &GenerateConfig, out: &Path) -> Result<Vec<String>> {
    let mut model = build_model(cfg)?;
    let scfg = StreamConfig {
        num_frames: cfg.num_frames,
        tokens_per_frame: cfg.model.tokens_per_frame,
        denoise_steps: cfg.denoise_steps,
        seed: noise_seed(cfg.seed),
        precision: cfg.precision(),
        policy: cfg.policy.into(),
        chunk_size: cfg.chunk_size,
    };
    let wall = WallClock::new();
    let clock: &dyn Clock = if cfg.timing { &wall } else { &NoClock };
    let (frames, metrics) = generate(&mut model, &scfg, clock)?;
    let path = out.join("frames.bin");
    blob::write_frames(create(&path)?, &frames).map_err(|e| CliError::io(&path, e))?;
    write_metrics(&out.join("metrics.csv"), &metrics)?;
    write_csv(
        &out.join("frame_norms.csv"),
        frames.iter().enumerate().map(|(i, f)| FrameNorm {
            frame: i,
            frobenius_norm: f.frobenius_sq().sqrt(),
            mean: f.sum() / f.len() as f64,
            max_abs: f.data().iter().fold(0.0f64, |m, v| m.max(v.abs())),
        }),
    )?;
    Ok(vec![
        "frames.bin".into(),
        "metrics.csv".into(),
        "frame_norms.csv".into(),
    ])
}

#[derive(Serialize)]
struct LossRow {
    step: usize,
    loss: f64,
}

#[derive(Serialize)]
struct TrainSummary {
    stage: u8,
    steps: usize,
    learning_rate: f64,
    initial_loss: f64,
    final_loss: f64,
    improvement: f64,
}

fn write_loss(out: &Path, run: &TrainRun) -> Result<()> {
    let rows = run
        .loss_trace
        .iter()
        .enumerate()
        .map(|(step, &loss)| LossRow { step, loss })
        .chain(std::iter::once(LossRow {
            step: run.steps,
            loss: run.final_loss,
        }));
    write_csv(&out.join("loss.csv"), rows)
}

pub fn distill(cfg: &DistillConfig, out: &Path) -> Result<Vec<String>> {
    let dims = cfg.model.dims();
    let teacher = ToyModel::new(
        dims,
        &vec![Backend::Softmax; dims.num_layers],
        cfg.seed,
        Precision::Double,
    )?;
    let mut tcfg = TrainConfig::new(cfg.steps, cfg.learning_rate, cfg.seed);
    if cfg.optimizer == OptimizerName::Adam {
        tcfg.optimizer = Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
    }
    let mut artifacts = vec!["loss.csv".to_string(), "train_summary.json".to_string()];
    let run = match cfg.stage {
        1 => {
            let proj = teacher.layers[cfg.layer].attn.proj().clone();
            let mut layer = HybridLayer::from_teacher(proj, Precision::Double);
            let sampler = AlignmentSampler {
                batch: cfg.batch,
                tokens: cfg.model.tokens_per_frame,
                history_frames: cfg.history_frames,
                correlation: cfg.correlation,
                scale: 1.0,
            };
            let run = train_stage1(&mut layer, cfg.layer, &sampler, &tcfg)?;
            let name = format!("hybrid_layer{}.bin", cfg.layer);
            let path = out.join(&name);
            blob::write_hybrid_layer(create(&path)?, &layer).map_err(|e| CliError::io(&path, e))?;
            artifacts.push(name);
            run
        }
        _ => {
            let mut student = teacher.clone();
            student.replace_layers(&cfg.hybrid_layers)?;
            let sampler = JointSampler {
                batch: cfg.batch,
                tokens: cfg.model.tokens_per_frame,
                history_frames: cfg.history_frames,
                correlation: cfg.correlation,
            };
            let run = train_stage2(&mut student, &teacher, &sampler, &tcfg)?;
            for (l, layer) in student.layers.iter().enumerate() {
                if let AttentionBlock::Hybrid(h) = &layer.attn {
                    let name = format!("hybrid_layer{l}.bin");
                    let path = out.join(&name);
                    blob::write_hybrid_layer(create(&path)?, h).map_err(|e| CliError::io(&path, e))?;
                    artifacts.push(name);
                }
            }
            let names: Vec<String> = (0..dims.num_layers)
                .flat_map(|l| [format!("ff_in{l}"), format!("ff_out{l}")])
                .collect();
            let tensors: Vec<&Tensor> = student.layers.iter().flat_map(|l| [&l.ff_in, &l.ff_out]).collect();
            let pairs: Vec<(&str, &Tensor)> = names.iter().map(String::as_str).zip(tensors).collect();
            let path = out.join("feedforward.bin");
            blob::write_blob(create(&path)?, blob::BlobKind::Tensors, &pairs).map_err(|e| CliError::io(&path, e))?;
            artifacts.push("feedforward.bin".into());
            run
        }
    };
    write_loss(out, &run)?;
    write_json(
        &out.join("train_summary.json"),
        &TrainSummary {
            stage: cfg.stage,
            steps: run.steps,
            learning_rate: run.learning_rate,
            initial_loss: run.initial_loss(),
            final_loss: run.final_loss,
            improvement: run.initial_loss() / run.final_loss,
        },
    )?;
    Ok(artifacts)
}

pub fn select_layers(cfg: &SelectConfig, out: &Path) -> Result<Vec<String>> {
    let path = cfg.scores.as_ref().expect("validated");
    let table = scores::read_score_file(path)?;
    let budget = cfg.budget_for(table.layers().len());
    let result = arl2_core::selection::analyze(&table, cfg.threshold_hr, cfg.beta, budget)?;
    let report = scores::report(&table, &result);
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    write_json(&out.join("selection.json"), &report)?;
    Ok(vec!["selection.json".into()])
}

#[derive(Serialize)]
pub struct CostRow {
    pub history_frames: usize,
    pub softmax_macs: u64,
    pub hybrid_macs: u64,
    pub hybrid_update_macs: u64,
    pub softmax_bytes: u64,
    pub hybrid_bytes: u64,
}

pub fn cost_rows(cfg: &CostConfig) -> Vec<CostRow> {
    let dims = AttnDims::new(cfg.tokens_per_frame, cfg.heads, cfg.head_dim);
    let p = cfg.precision();
    (0..=cfg.max_history)
        .map(|h| CostRow {
            history_frames: h,
            softmax_macs: count_attention_flops(Backend::Softmax, dims, h),
            hybrid_macs: count_attention_flops(Backend::Hybrid, dims, h),
            hybrid_update_macs: state_update_macs(dims),
            softmax_bytes: memory_footprint(Backend::Softmax, dims, h, p),
            hybrid_bytes: memory_footprint(Backend::Hybrid, dims, h, p),
        })
        .collect()
}

pub fn cost(cfg: &CostConfig, out: &Path) -> Result<Vec<String>> {
    write_csv(&out.join("cost.csv"), cost_rows(cfg))?;
    Ok(vec!["cost.csv".into()])
}
