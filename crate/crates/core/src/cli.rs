//! Command-line entry point: synthetic data generation, training,
//! inference, the KDE baseline, and evaluation, all tied together over
//! TrackBundle files. Exit codes: 0 success, 2 configuration error,
//! 3 data error.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::baseline::KdeConfig;
use crate::bundle::{self, DepthMapStack};
use crate::infer;
use crate::metrics::{self, AlignMode};
use crate::model::{self, ModelConfig};
use crate::seeds::{self, Stream};
use crate::synth::{self, DepthTrack, Role, SceneSpec, TrackSet};
use crate::train::{self, TrainConfig};

// ==== ERRORS ====

/// Error category decides the process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
}

impl CliError {
    fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Config(_) => ExitCode::from(2),
            CliError::Data(_) => ExitCode::from(3),
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn data_err(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

// ==== CONFIG ====

/// File-loadable configuration; every section and field is optional and
/// falls back to module defaults. Command-line flags override file values.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub kde: KdeConfig,
    pub scene: SceneSpec,
    /// Query trajectories sampled per prepared training scene.
    pub queries: usize,
    pub align: AlignMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            kde: KdeConfig::default(),
            scene: SceneSpec::default(),
            queries: 4,
            align: AlignMode::default(),
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("bad config {}: {e}", p.display())))
        }
    }
}

/// Seed precedence: flag, then TRAJDEPTH_SEED, then the config file value.
fn resolve_seed(flag: Option<u64>) -> Result<Option<u64>, CliError> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("TRAJDEPTH_SEED") {
        Ok(v) => v
            .parse::<u64>()
            .map(Some)
            .map_err(|_| CliError::Config(format!("TRAJDEPTH_SEED is not a u64: {v:?}"))),
        Err(_) => Ok(None),
    }
}

// ==== ARGUMENTS ====

#[derive(Parser)]
#[command(name = "trajdepth", version, about = "Trajectory-based temporal depth estimation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic scene bundles and a seed manifest.
    Synth(SynthArgs),
    /// Train the model on a directory of bundles.
    Train(TrainArgs),
    /// Predict depth ratios for the query tracks of a bundle.
    Infer(InferArgs),
    /// Run the handcrafted KDE density-ratio baseline.
    Baseline(BaselineArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (train/ and val/ subdirectories are created).
    #[arg(long)]
    out: PathBuf,
    /// Training scenes; seeds run from the base seed upward.
    #[arg(long, default_value_t = 100)]
    scenes: usize,
    /// Validation scenes; seeds continue after the training block.
    #[arg(long, default_value_t = 0)]
    val_scenes: usize,
    /// Frames per scene.
    #[arg(long)]
    frames: Option<usize>,
    /// Base scene seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Bundle directory holding train/ and optionally val/.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints and the line-JSON log.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 1 guarantees determinism (results are identical
    /// across worker counts anyway).
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Use the full-scale architecture: dim 384, 8 heads, 24x24 grid, W 8.
    #[arg(long)]
    paper_scale: bool,
    /// Resume from a checkpoint; the step counter continues monotonically.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    queries: Option<usize>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Input TrackBundle.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output bundle with a ratio channel (and depth when --mde is given).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    stride: usize,
    /// Window override; defaults to the checkpoint's training window.
    #[arg(long)]
    window: Option<usize>,
    /// Metric depth map stack for scale matching.
    #[arg(long)]
    mde: Option<PathBuf>,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Prediction bundle carrying a ratio or depth channel.
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth bundle; must carry a depth channel.
    #[arg(long)]
    gt: PathBuf,
    /// Report path; a CSV with per-threshold scores lands next to it.
    #[arg(long)]
    out: PathBuf,
    /// Alignment protocol: per_trajectory, affine, or median.
    #[arg(long)]
    align: Option<String>,
}

// ==== ENTRY POINT ====

pub fn run() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Infer(a) => cmd_infer(a),
        Cmd::Baseline(a) => cmd_baseline(a),
        Cmd::Eval(a) => cmd_eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

// ==== SYNTH ====

#[derive(Serialize)]
struct Manifest {
    base_seed: u64,
    frames: usize,
    train_seeds: Vec<u64>,
    val_seeds: Vec<u64>,
}

fn cmd_synth(args: SynthArgs) -> Result<(), CliError> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(f) = args.frames {
        cfg.scene.frames = f;
    }
    if let Some(s) = resolve_seed(args.seed)? {
        cfg.scene.rng_seed = s;
    }
    cfg.scene.validate().map_err(config_err)?;

    let base = cfg.scene.rng_seed;
    let train_seeds: Vec<u64> = (0..args.scenes as u64).map(|i| base + i).collect();
    let val_seeds: Vec<u64> =
        (0..args.val_scenes as u64).map(|i| base + args.scenes as u64 + i).collect();

    for (sub, seeds) in [("train", &train_seeds), ("val", &val_seeds)] {
        let dir = args.out.join(sub);
        std::fs::create_dir_all(&dir).map_err(data_err)?;
        for &s in seeds.iter() {
            let spec = SceneSpec { rng_seed: s, ..cfg.scene.clone() };
            let (tracks, depths) = synth::generate_scene(&spec).map_err(data_err)?;
            let b = bundle::tracks_to_bundle(&tracks, Some(&depths), None);
            bundle::write_bundle(&dir.join(format!("scene_{s:06}.trkb")), &b)
                .map_err(data_err)?;
        }
    }

    let manifest = Manifest {
        base_seed: base,
        frames: cfg.scene.frames,
        train_seeds,
        val_seeds,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(data_err)?;
    std::fs::write(args.out.join("manifest.json"), json + "\n").map_err(data_err)?;
    println!("wrote {} train + {} val bundles to {}", args.scenes, args.val_scenes, args.out.display());
    Ok(())
}

// ==== TRAIN ====

fn bundle_paths(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut out = Vec::new();
    let entries = std::fs::read_dir(dir)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", dir.display())))?;
    for entry in entries {
        let p = entry.map_err(data_err)?.path();
        if p.extension().map(|e| e == "trkb").unwrap_or(false) {
            out.push(p);
        }
    }
    out.sort(); // directory order is not deterministic; path order is
    Ok(out)
}

fn load_scenes(
    dir: &Path,
    grid: (usize, usize),
    queries: usize,
    seed: u64,
) -> Result<Vec<train::TrainScene>, CliError> {
    let paths = bundle_paths(dir)?;
    let mut scenes = Vec::with_capacity(paths.len());
    for (i, p) in paths.iter().enumerate() {
        let b = bundle::read_bundle(p).map_err(data_err)?;
        let (tracks, depths, _) = bundle::tracks_from_bundle(&b).map_err(data_err)?;
        let depths = depths.ok_or_else(|| {
            CliError::Data(format!("missing channel \"depth\" in {}", p.display()))
        })?;
        let split_seed = seeds::child_seed(seed, Stream::QuerySplit, i as u64);
        scenes.push(
            train::prepare_scene(&tracks, &depths, grid, queries, split_seed).map_err(data_err)?,
        );
    }
    Ok(scenes)
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let mut cfg = load_config(args.config.as_deref())?;
    if args.paper_scale {
        cfg.model = ModelConfig::default();
    }
    if let Some(v) = args.steps {
        cfg.train.total_steps = v;
    }
    if let Some(v) = args.batch {
        cfg.train.batch = v;
    }
    if let Some(v) = args.lr {
        cfg.train.lr = v;
    }
    if let Some(v) = args.queries {
        cfg.queries = v;
    }
    if let Some(s) = resolve_seed(args.seed)? {
        cfg.train.seed = s;
    }

    // Resume replaces the architecture with the checkpoint's.
    let resumed = match &args.resume {
        Some(p) => Some(train::load_train_checkpoint(p).map_err(data_err)?),
        None => None,
    };
    if let Some((_, _, ref mc)) = resumed {
        cfg.model = mc.clone();
    }

    // Effective configuration echo, one JSON line.
    let echo = serde_json::json!({
        "model": cfg.model,
        "train": cfg.train,
        "queries": cfg.queries,
    });
    println!("{echo}");

    cfg.model.validate().map_err(config_err)?;
    cfg.train.validate().map_err(config_err)?;

    let scenes = load_scenes(
        &args.data.join("train"),
        cfg.model.support_grid,
        cfg.queries,
        cfg.train.seed,
    )?;
    if scenes.is_empty() {
        return Err(CliError::Data(format!(
            "no .trkb bundles under {}",
            args.data.join("train").display()
        )));
    }
    let val_dir = args.data.join("val");
    let val_scenes = if val_dir.is_dir() {
        load_scenes(&val_dir, cfg.model.support_grid, cfg.queries, cfg.train.seed)?
    } else {
        Vec::new()
    };

    let (params, state) = match resumed {
        Some((p, s, _)) => (p, s),
        None => {
            let p = model::init_params(&cfg.model, cfg.train.seed);
            let s = train::OptimizerState::new(&p);
            (p, s)
        }
    };

    std::fs::create_dir_all(&args.out).map_err(data_err)?;
    let log_path = args.out.join("train_log.jsonl");
    let mut log: Box<dyn Write> = Box::new(std::io::BufWriter::new(
        std::fs::OpenOptions::new()
            .create(true)
            .append(args.resume.is_some())
            .truncate(args.resume.is_none())
            .write(true)
            .open(&log_path)
            .map_err(data_err)?,
    ));

    let outcome = train::train(
        params,
        state,
        &cfg.model,
        &cfg.train,
        &scenes,
        &val_scenes,
        &mut log,
        Some(&args.out),
        args.workers,
    )
    .map_err(data_err)?;
    log.flush().map_err(data_err)?;
    train::save_train_checkpoint(
        &args.out.join("latest.ckpt"),
        &outcome.params,
        &outcome.state,
        &cfg.model,
    )
    .map_err(data_err)?;

    match outcome.final_val_loss {
        Some(v) => println!("finished at step {} (val loss {v:.6})", outcome.state.step),
        None => println!("finished at step {}", outcome.state.step),
    }
    Ok(())
}

// ==== INFER / BASELINE ====

fn read_tracks(path: &Path) -> Result<(TrackSet, Option<DepthTrack>, Option<Vec<f32>>), CliError> {
    let b = bundle::read_bundle(path).map_err(data_err)?;
    bundle::tracks_from_bundle(&b).map_err(data_err)
}

/// Rows evaluated as queries: every `Role::Query` row, or all rows when the
/// bundle does not distinguish roles.
fn effective_query_rows(tracks: &TrackSet) -> Vec<usize> {
    let rows = infer::query_rows(tracks);
    if rows.is_empty() {
        (0..tracks.n).collect()
    } else {
        rows
    }
}

fn subset_tracks(tracks: &TrackSet, rows: &[usize]) -> TrackSet {
    let t = tracks.t_len;
    let mut out = TrackSet {
        n: rows.len(),
        t_len: t,
        positions: Vec::with_capacity(rows.len() * t * 2),
        visibility: Vec::with_capacity(rows.len() * t),
        camera: tracks.camera,
        roles: vec![Role::Query; rows.len()],
    };
    for &i in rows {
        out.positions.extend_from_slice(&tracks.positions[i * t * 2..(i + 1) * t * 2]);
        out.visibility.extend_from_slice(&tracks.visibility[i * t..(i + 1) * t]);
    }
    out
}

fn cmd_infer(args: InferArgs) -> Result<(), CliError> {
    let (params, _, mut model_cfg) =
        train::load_train_checkpoint(&args.checkpoint).map_err(data_err)?;
    if let Some(w) = args.window {
        model_cfg.window = w;
    }
    model_cfg.validate().map_err(config_err)?;

    let (tracks, _, _) = read_tracks(&args.input)?;
    let rows = effective_query_rows(&tracks);
    let out = infer::run_windows(&params, &model_cfg, &tracks, &rows, args.stride)
        .map_err(data_err)?;
    println!("processed {} windows over {} frames", out.starts.len(), tracks.t_len);
    let ratios = infer::accumulate(&out).map_err(data_err)?;

    let sub = subset_tracks(&tracks, &rows);
    let depth = match &args.mde {
        Some(p) => {
            let b = bundle::read_bundle(p).map_err(data_err)?;
            let stack = DepthMapStack::from_bundle(&b).map_err(data_err)?;
            Some(infer::scale_match(&ratios, &stack, &tracks, &rows).map_err(data_err)?)
        }
        None => None,
    };
    let b = bundle::tracks_to_bundle(&sub, depth.as_ref(), Some(&ratios.ratios));
    bundle::write_bundle(&args.out, &b).map_err(data_err)?;
    println!("wrote {} query tracks to {}", rows.len(), args.out.display());
    Ok(())
}

fn cmd_baseline(args: BaselineArgs) -> Result<(), CliError> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(v) = args.k {
        cfg.kde.k = v;
    }
    if let Some(v) = args.window {
        cfg.kde.window = v;
    }
    if let Some(v) = args.stride {
        cfg.kde.stride = v;
    }

    let (tracks, _, _) = read_tracks(&args.input)?;
    let all = crate::baseline::baseline_ratio(&tracks, &cfg.kde).map_err(data_err)?;
    let rows = effective_query_rows(&tracks);
    let sub = subset_tracks(&tracks, &rows);
    let mut ratios = Vec::with_capacity(rows.len() * tracks.t_len);
    for &i in &rows {
        for t in 0..tracks.t_len {
            ratios.push(all.ratio(i, t));
        }
    }
    let b = bundle::tracks_to_bundle(&sub, None, Some(&ratios));
    bundle::write_bundle(&args.out, &b).map_err(data_err)?;
    println!("wrote {} baseline tracks to {}", rows.len(), args.out.display());
    Ok(())
}

// ==== EVAL ====

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(m) = &args.align {
        cfg.align = serde_json::from_value(serde_json::Value::String(m.clone()))
            .map_err(|_| CliError::Config(format!("unknown align mode {m:?}")))?;
    }

    let (gt_tracks, gt_depth, _) = read_tracks(&args.gt)?;
    let gt_depth = gt_depth.ok_or_else(|| {
        CliError::Data(format!("missing channel \"depth\" in {}", args.gt.display()))
    })?;
    let (pred_tracks, pred_depth, pred_ratio) = read_tracks(&args.pred)?;

    // Row pairing: a full bundle evaluates row-for-row; a query-only
    // prediction bundle pairs with the gt bundle's query rows in order.
    let gt_rows: Vec<usize> = if pred_tracks.n == gt_tracks.n {
        (0..gt_tracks.n).collect()
    } else {
        let q = infer::query_rows(&gt_tracks);
        if q.len() != pred_tracks.n {
            return Err(CliError::Data(format!(
                "prediction rows ({}) match neither all gt rows ({}) nor gt query rows ({})",
                pred_tracks.n,
                gt_tracks.n,
                q.len()
            )));
        }
        q
    };
    let t_len = gt_tracks.t_len;
    if pred_tracks.t_len != t_len {
        return Err(CliError::Data(format!(
            "frame count mismatch: pred {} vs gt {t_len}",
            pred_tracks.t_len
        )));
    }

    let pred_depth = match (pred_depth, pred_ratio) {
        (Some(d), _) => d,
        (None, Some(r)) => DepthTrack {
            n: pred_tracks.n,
            t_len,
            depths: r.iter().map(|&v| v as f64).collect(),
        },
        (None, None) => {
            return Err(CliError::Data(format!(
                "missing channel \"ratio\" or \"depth\" in {}",
                args.pred.display()
            )))
        }
    };

    let gt_sub_depth = gt_depth.reindex(&gt_rows);
    let aligned = metrics::align(&pred_depth, &gt_sub_depth, cfg.align).map_err(data_err)?;

    let pred_rows: Vec<usize> = (0..pred_tracks.n).collect();
    let pred3d = infer::unproject(&pred_tracks, &pred_rows, &aligned, &gt_tracks.camera)
        .map_err(data_err)?;
    let gt3d = infer::unproject(&gt_tracks, &gt_rows, &gt_sub_depth, &gt_tracks.camera)
        .map_err(data_err)?;
    let mut gt_vis = Vec::with_capacity(gt_rows.len() * t_len);
    for &i in &gt_rows {
        for t in 0..t_len {
            gt_vis.push(gt_tracks.visible(i, t));
        }
    }

    let report = metrics::evaluate(&metrics::EvalInputs {
        n: pred_tracks.n,
        t_len,
        pred3d: &pred3d,
        gt3d: &gt3d,
        pred_depth: &aligned,
        gt_depth: &gt_sub_depth,
        pred_vis: &pred_tracks.visibility,
        gt_vis: &gt_vis,
        camera: &gt_tracks.camera,
    })
    .map_err(data_err)?;

    let json = serde_json::to_string_pretty(&report).map_err(data_err)?;
    std::fs::write(&args.out, json + "\n").map_err(data_err)?;
    std::fs::write(args.out.with_extension("csv"), report.to_csv()).map_err(data_err)?;
    println!(
        "apd {:.2} aj3d {:.2} tc {:.5} absrel {:.4} delta1 {:.4}",
        report.apd_percent, report.aj3d_percent, report.tc, report.absrel, report.delta1
    );
    Ok(())
}
