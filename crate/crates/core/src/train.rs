//! Window-wise training: log-ratio targets, weighted L1 losses for both
//! branches, auxiliary occluded-position loss, AdamW with warmup plus linear
//! decay, and a deterministic batched training loop with JSONL logging and
//! checkpoint/resume.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tape, TapeError, TensorRef};
use crate::checkpoint::{self, CheckpointError, ParamSet};
use crate::model::{self, ModelConfig, ModelError, RefineOutput, WindowInput};
use crate::seeds::{self, Stream};
use crate::synth::{DepthTrack, Role, SynthError, TrackSet};

/// Down-weight applied to log-ratio supervision on occluded cells.
pub const OCCLUDED_TARGET_WEIGHT: f64 = 0.5;
/// Weight of the auxiliary occluded-position loss relative to the main loss.
pub const AUX_LOSS_WEIGHT: f64 = 0.1;
/// Global gradient-norm clip applied before every optimizer step.
pub const GRAD_CLIP_NORM: f64 = 1.0;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("non-positive depth at point {point} frame {frame}")]
    NonPositiveDepth { point: usize, frame: usize },
    #[error("no valid cells to supervise")]
    EmptyValidity,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad train config: {0}")]
    BadConfig(String),
}

// ==== CONFIG ====

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub window: usize,
    pub stride: usize,
    pub batch: usize,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub val_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-4,
            weight_decay: 1e-5,
            warmup_steps: 1000,
            total_steps: 20_000,
            window: 8,
            stride: 4,
            batch: 4,
            seed: 0,
            checkpoint_every: 1000,
            val_every: 250,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.lr <= 0.0 {
            return Err(TrainError::BadConfig("lr must be > 0".into()));
        }
        // Equality would zero the decay denominator.
        if self.warmup_steps >= self.total_steps {
            return Err(TrainError::BadConfig("warmup_steps must be < total_steps".into()));
        }
        if self.stride == 0 || self.stride > self.window {
            return Err(TrainError::BadConfig("stride must satisfy 1 <= S <= W".into()));
        }
        if self.batch == 0 {
            return Err(TrainError::BadConfig("batch must be >= 1".into()));
        }
        Ok(())
    }
}

// ==== TARGETS ====

/// Log-ratio targets for frames `[start, start+w)`: `ln(d[t]/d[start])`,
/// computed in f64 with the anchor column exactly 0.
pub fn window_targets(
    depths: &DepthTrack,
    start: usize,
    w: usize,
) -> Result<Vec<f32>, TrainError> {
    if start + w > depths.t_len {
        return Err(TrainError::ShapeMismatch(format!(
            "window [{start}, {}) exceeds depth length {}",
            start + w,
            depths.t_len
        )));
    }
    let mut out = Vec::with_capacity(depths.n * w);
    for i in 0..depths.n {
        let d0 = depths.depth(i, start);
        if d0 <= 0.0 {
            return Err(TrainError::NonPositiveDepth { point: i, frame: start });
        }
        out.push(0.0f32);
        for t in 1..w {
            let d = depths.depth(i, start + t);
            if d <= 0.0 {
                return Err(TrainError::NonPositiveDepth { point: i, frame: start + t });
            }
            out.push((d / d0).ln() as f32);
        }
    }
    Ok(out)
}

/// Weighted mean absolute error against `targets`, summed with equal weight
/// over refinement iterations. Visible cells weigh 1, occluded cells
/// [`OCCLUDED_TARGET_WEIGHT`]; the mean is normalized by the weight total so
/// a uniform error of `c` yields exactly `|c|`.
pub fn loss_log_ratio<F: Scalar>(
    tape: &mut Tape<F>,
    preds: &[TensorRef],
    targets: &[f32],
    visibility: &[bool],
    n: usize,
    w: usize,
) -> Result<TensorRef, TrainError> {
    if n * w == 0 || preds.is_empty() {
        return Err(TrainError::EmptyValidity);
    }
    if targets.len() != n * w || visibility.len() != n * w {
        return Err(TrainError::ShapeMismatch(format!(
            "targets {} / visibility {} vs {n}x{w}",
            targets.len(),
            visibility.len()
        )));
    }
    let weights: Vec<f64> =
        visibility.iter().map(|&v| if v { 1.0 } else { OCCLUDED_TARGET_WEIGHT }).collect();
    let wsum: f64 = weights.iter().sum();
    let tgt = tape.constant(&[n, w], targets.iter().map(|&v| F::from_f64(v as f64)).collect())?;
    let wts = tape.constant(&[n, w], weights.iter().map(|&v| F::from_f64(v)).collect())?;
    let mut total: Option<TensorRef> = None;
    for &p in preds {
        if tape.shape(p) != [n, w] {
            return Err(TrainError::ShapeMismatch(format!(
                "prediction shape {:?} vs {n}x{w}",
                tape.shape(p)
            )));
        }
        let diff = tape.sub(p, tgt)?;
        let a = tape.abs(diff)?;
        let wa = tape.mul(a, wts)?;
        let s = tape.sum(wa)?;
        let item = tape.scale(s, 1.0 / wsum)?;
        total = Some(match total {
            None => item,
            Some(t) => tape.add(t, item)?,
        });
    }
    Ok(total.unwrap())
}

/// Mean per-cell `(|dx| + |dy|) / 2` between predicted and target offsets
/// over occluded cells only, summed over iterations; exact 0 when nothing is
/// occluded.
pub fn loss_occluded_position<F: Scalar>(
    tape: &mut Tape<F>,
    preds: &[TensorRef],
    target_offsets: &[f32],
    occluded: &[bool],
    n: usize,
    w: usize,
) -> Result<TensorRef, TrainError> {
    if target_offsets.len() != n * w * 2 || occluded.len() != n * w {
        return Err(TrainError::ShapeMismatch(format!(
            "offsets {} / occluded {} vs {n}x{w}",
            target_offsets.len(),
            occluded.len()
        )));
    }
    let count = occluded.iter().filter(|&&o| o).count();
    if count == 0 || preds.is_empty() {
        return Ok(tape.constant(&[1], vec![F::ZERO])?);
    }
    let norm = 1.0 / (2.0 * count as f64);
    let mut wts = Vec::with_capacity(n * w * 2);
    for &o in occluded {
        let v = if o { F::from_f64(norm) } else { F::ZERO };
        wts.push(v);
        wts.push(v);
    }
    let tgt = tape.constant(&[n, w, 2], target_offsets.iter().map(|&v| F::from_f64(v as f64)).collect())?;
    let wts = tape.constant(&[n, w, 2], wts)?;
    let mut total: Option<TensorRef> = None;
    for &p in preds {
        let diff = tape.sub(p, tgt)?;
        let a = tape.abs(diff)?;
        let wa = tape.mul(a, wts)?;
        let item = tape.sum(wa)?;
        total = Some(match total {
            None => item,
            Some(t) => tape.add(t, item)?,
        });
    }
    Ok(total.unwrap())
}

// ==== OPTIMIZER ====

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ParamSet) -> Self {
        OptimizerState {
            m: params.entries.iter().map(|e| vec![0.0; e.data.len()]).collect(),
            v: params.entries.iter().map(|e| vec![0.0; e.data.len()]).collect(),
            step: 0,
        }
    }
}

/// Warmup then linear decay: `base * min(step/warmup, 1) * max(0, (total-step)/(total-warmup))`.
pub fn lr_at(cfg: &TrainConfig, step: u64) -> f64 {
    let warm = if cfg.warmup_steps == 0 {
        1.0
    } else {
        (step as f64 / cfg.warmup_steps as f64).min(1.0)
    };
    let decay = if cfg.total_steps == cfg.warmup_steps {
        if step >= cfg.total_steps {
            0.0
        } else {
            1.0
        }
    } else {
        ((cfg.total_steps as f64 - step as f64)
            / (cfg.total_steps as f64 - cfg.warmup_steps as f64))
            .max(0.0)
    };
    cfg.lr * warm * decay
}

/// Scales all gradients so the global L2 norm is at most `max_norm`;
/// returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Vec<f32>], max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.iter() {
        for &v in g {
            sq += (v as f64) * (v as f64);
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = (max_norm / norm) as f32;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// One decoupled-weight-decay Adam step at the scheduled learning rate.
pub fn optimizer_step(
    params: &mut ParamSet,
    grads: &[Vec<f32>],
    state: &mut OptimizerState,
    cfg: &TrainConfig,
) {
    assert_eq!(grads.len(), params.entries.len());
    state.step += 1;
    let t = state.step;
    let lr = lr_at(cfg, t);
    let bc1 = 1.0 - BETA1.powi(t as i32);
    let bc2 = 1.0 - BETA2.powi(t as i32);
    for (i, e) in params.entries.iter_mut().enumerate() {
        let g = &grads[i];
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for j in 0..e.data.len() {
            let gj = g[j] as f64;
            let mj = BETA1 * m[j] as f64 + (1.0 - BETA1) * gj;
            let vj = BETA2 * v[j] as f64 + (1.0 - BETA2) * gj * gj;
            m[j] = mj as f32;
            v[j] = vj as f32;
            let mhat = mj / bc1;
            let vhat = vj / bc2;
            let p = e.data[j] as f64;
            e.data[j] = (p - lr * cfg.weight_decay * p - lr * mhat / (vhat.sqrt() + ADAM_EPS)) as f32;
        }
    }
}

// ==== SCENE PREPARATION ====

/// A scene ready for training: role-split tracks (raw and occlusion-masked)
/// with the depth track aligned to the split row order.
#[derive(Debug, Clone)]
pub struct TrainScene {
    pub raw: TrackSet,
    pub masked: TrackSet,
    pub depths: DepthTrack,
}

/// Splits a generated scene into query/support roles, aligns depths, and
/// masks occluded positions.
pub fn prepare_scene(
    tracks: &TrackSet,
    depths: &DepthTrack,
    grid: (usize, usize),
    num_queries: usize,
    seed: u64,
) -> Result<TrainScene, SynthError> {
    let (split, source_index) = crate::synth::split_query_support(tracks, grid, num_queries, seed)?;
    let depths = depths.reindex(&source_index);
    let masked = crate::synth::mask_occluded_positions(&split)?;
    Ok(TrainScene { raw: split, masked, depths })
}

/// Per-role window targets in the same order [`WindowInput`] emits rows.
pub struct WindowTargets {
    pub query_ratio: Vec<f32>,
    pub support_ratio: Vec<f32>,
    pub query_vis: Vec<bool>,
    pub support_vis: Vec<bool>,
    pub query_offsets: Vec<f32>,
    pub support_offsets: Vec<f32>,
    pub query_occluded: Vec<bool>,
    pub support_occluded: Vec<bool>,
}

/// Builds ratio targets plus normalized occluded-position offset targets
/// (true position minus masked position) for one window.
pub fn window_supervision(
    scene: &TrainScene,
    start: usize,
    w: usize,
) -> Result<WindowTargets, TrainError> {
    let all = window_targets(&scene.depths, start, w)?;
    let (iw, ih) = (
        scene.masked.camera.image_size.0 as f64,
        scene.masked.camera.image_size.1 as f64,
    );
    let mut out = WindowTargets {
        query_ratio: Vec::new(),
        support_ratio: Vec::new(),
        query_vis: Vec::new(),
        support_vis: Vec::new(),
        query_offsets: Vec::new(),
        support_offsets: Vec::new(),
        query_occluded: Vec::new(),
        support_occluded: Vec::new(),
    };
    for i in 0..scene.masked.n {
        let (ratio, vis, offsets, occ) = match scene.masked.roles[i] {
            Role::Query => (
                &mut out.query_ratio,
                &mut out.query_vis,
                &mut out.query_offsets,
                &mut out.query_occluded,
            ),
            Role::Support => (
                &mut out.support_ratio,
                &mut out.support_vis,
                &mut out.support_offsets,
                &mut out.support_occluded,
            ),
        };
        ratio.extend_from_slice(&all[i * w..(i + 1) * w]);
        for t in start..start + w {
            let visible = scene.masked.visible(i, t);
            vis.push(visible);
            occ.push(!visible);
            let raw = scene.raw.pos(i, t);
            let masked = scene.masked.pos(i, t);
            offsets.push((2.0 * (raw[0] as f64 - masked[0] as f64) / iw) as f32);
            offsets.push((2.0 * (raw[1] as f64 - masked[1] as f64) / ih) as f32);
        }
    }
    Ok(out)
}

// ==== TRAINING LOOP ====

/// Loss values for one window sample.
struct SampleLoss {
    main: f64,
    aux: f64,
    grads: Option<Vec<Vec<f32>>>,
}

fn run_sample(
    params: &ParamSet,
    model_cfg: &ModelConfig,
    scene: &TrainScene,
    start: usize,
    with_grads: bool,
) -> Result<SampleLoss, TrainError> {
    let w = model_cfg.window;
    let win = WindowInput::from_tracks(&scene.masked, start, w)?;
    let sup = window_supervision(scene, start, w)?;

    let mut tape: Tape<f32> = Tape::new();
    let bound = model::bind_params(&mut tape, params, with_grads)?;
    let out: RefineOutput = model::refine(&mut tape, &bound, model_cfg, &win)?;

    let lq = loss_log_ratio(&mut tape, &out.query_ratios, &sup.query_ratio, &sup.query_vis, win.nq, w)?;
    let ls = loss_log_ratio(&mut tape, &out.support_ratios, &sup.support_ratio, &sup.support_vis, win.ns, w)?;
    let main = tape.add(lq, ls)?;
    let aq = loss_occluded_position(&mut tape, &out.query_pos, &sup.query_offsets, &sup.query_occluded, win.nq, w)?;
    let asup = loss_occluded_position(&mut tape, &out.support_pos, &sup.support_offsets, &sup.support_occluded, win.ns, w)?;
    let aux = tape.add(aq, asup)?;
    let aux_w = tape.scale(aux, AUX_LOSS_WEIGHT)?;
    let loss = tape.add(main, aux_w)?;

    let main_v = tape.value(main)[0] as f64;
    let aux_v = tape.value(aux)[0] as f64;
    let grads = if with_grads {
        tape.backward(loss)?;
        Some(model::collect_grads(&tape, &bound))
    } else {
        None
    };
    Ok(SampleLoss { main: main_v, aux: aux_v, grads })
}

/// Regular window starts `0, S, 2S, ...` while `start + W <= T`.
pub fn regular_starts(t_len: usize, w: usize, s: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut start = 0usize;
    while start + w <= t_len {
        out.push(start);
        start += s;
    }
    out
}

/// Mean validation loss (main term only) over every regular window of every
/// scene.
pub fn evaluate_loss(
    params: &ParamSet,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    scenes: &[TrainScene],
) -> Result<f64, TrainError> {
    let mut total = 0.0f64;
    let mut count = 0usize;
    for scene in scenes {
        for start in regular_starts(scene.masked.t_len, model_cfg.window, cfg.stride) {
            let s = run_sample(params, model_cfg, scene, start, false)?;
            total += s.main;
            count += 1;
        }
    }
    if count == 0 {
        return Err(TrainError::EmptyValidity);
    }
    Ok(total / count as f64)
}

/// Main loss of the constant-zero predictor (all log ratios 0 at every
/// iteration) over the same windows; the calibration bar for training.
pub fn zero_predictor_loss(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    scenes: &[TrainScene],
) -> Result<f64, TrainError> {
    let w = model_cfg.window;
    let mut total = 0.0f64;
    let mut count = 0usize;
    for scene in scenes {
        for start in regular_starts(scene.masked.t_len, w, cfg.stride) {
            let sup = window_supervision(scene, start, w)?;
            let mut window_loss = 0.0f64;
            for (ratio, vis) in
                [(&sup.query_ratio, &sup.query_vis), (&sup.support_ratio, &sup.support_vis)]
            {
                let mut num = 0.0f64;
                let mut den = 0.0f64;
                for (&r, &v) in ratio.iter().zip(vis) {
                    let wt = if v { 1.0 } else { OCCLUDED_TARGET_WEIGHT };
                    num += wt * (r as f64).abs();
                    den += wt;
                }
                window_loss += model_cfg.refine_iters as f64 * num / den;
            }
            total += window_loss;
            count += 1;
        }
    }
    if count == 0 {
        return Err(TrainError::EmptyValidity);
    }
    Ok(total / count as f64)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub lr: f64,
    pub loss_main: f64,
    pub loss_aux: f64,
    pub val_loss: Option<f64>,
}

pub struct TrainOutcome {
    pub params: ParamSet,
    pub state: OptimizerState,
    pub final_val_loss: Option<f64>,
}

/// Serializes params plus optimizer moments and step into one checkpoint.
pub fn save_train_checkpoint(
    path: &Path,
    params: &ParamSet,
    state: &OptimizerState,
    model_cfg: &ModelConfig,
) -> Result<(), TrainError> {
    let mut full = params.clone();
    for (i, e) in params.entries.iter().enumerate() {
        full.push(&format!("opt.m.{}", e.name), &e.shape, state.m[i].clone());
        full.push(&format!("opt.v.{}", e.name), &e.shape, state.v[i].clone());
    }
    let meta = serde_json::json!({
        "model_config": model_cfg,
        "step": state.step,
    });
    checkpoint::save_checkpoint(path, &full, &meta)?;
    Ok(())
}

/// Loads a checkpoint saved by [`save_train_checkpoint`]; optimizer moments
/// are optional (plain model checkpoints resume with fresh state).
pub fn load_train_checkpoint(
    path: &Path,
) -> Result<(ParamSet, OptimizerState, ModelConfig), TrainError> {
    let (full, meta) = checkpoint::load_checkpoint(path)?;
    let model_cfg: ModelConfig = serde_json::from_value(meta["model_config"].clone())
        .map_err(CheckpointError::HeaderJson)?;
    let step = meta["step"].as_u64().unwrap_or(0);
    let mut params = ParamSet::new();
    for e in &full.entries {
        if !e.name.starts_with("opt.") {
            params.entries.push(e.clone());
        }
    }
    let mut state = OptimizerState::new(&params);
    state.step = step;
    for (i, e) in params.entries.iter().enumerate() {
        if let Some(m) = full.get(&format!("opt.m.{}", e.name)) {
            state.m[i] = m.data.clone();
        }
        if let Some(v) = full.get(&format!("opt.v.{}", e.name)) {
            state.v[i] = v.data.clone();
        }
    }
    Ok((params, state, model_cfg))
}

/// Runs the training loop. Per-sample gradients are computed independently
/// (in parallel when `workers > 1`) and reduced in sample order, so results
/// are identical for any worker count.
#[allow(clippy::too_many_arguments)]
pub fn train(
    mut params: ParamSet,
    mut state: OptimizerState,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    scenes: &[TrainScene],
    val_scenes: &[TrainScene],
    log: &mut dyn Write,
    ckpt_dir: Option<&Path>,
    workers: usize,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    model_cfg.validate()?;
    if scenes.is_empty() {
        return Err(TrainError::EmptyValidity);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| TrainError::BadConfig(e.to_string()))?;

    let mut final_val = None;
    while state.step < cfg.total_steps {
        let step = state.step + 1;
        // Batch assignment is a pure function of (seed, step).
        use rand::Rng;
        let mut rng = seeds::rng(cfg.seed, Stream::Batch, step);
        let picks: Vec<(usize, usize)> = (0..cfg.batch)
            .map(|_| {
                let scene_idx = rng.random_range(0..scenes.len());
                let starts = regular_starts(
                    scenes[scene_idx].masked.t_len,
                    model_cfg.window,
                    cfg.stride,
                );
                (scene_idx, starts[rng.random_range(0..starts.len())])
            })
            .collect();

        let results: Vec<Result<SampleLoss, TrainError>> = pool.install(|| {
            use rayon::prelude::*;
            picks
                .par_iter()
                .map(|&(si, start)| run_sample(&params, model_cfg, &scenes[si], start, true))
                .collect()
        });

        // Ordered reduction: summation order is the sample order.
        let mut sum_main = 0.0f64;
        let mut sum_aux = 0.0f64;
        let mut grads: Option<Vec<Vec<f32>>> = None;
        for r in results {
            let s = r?;
            sum_main += s.main;
            sum_aux += s.aux;
            let g = s.grads.expect("training sample must produce gradients");
            match &mut grads {
                None => grads = Some(g),
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        for (x, y) in a.iter_mut().zip(b) {
                            *x += y;
                        }
                    }
                }
            }
        }
        let mut grads = grads.expect("batch is non-empty");
        let inv_b = 1.0 / cfg.batch as f32;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= inv_b;
            }
        }
        clip_global_norm(&mut grads, GRAD_CLIP_NORM);
        optimizer_step(&mut params, &grads, &mut state, cfg);

        let val_loss = if !val_scenes.is_empty()
            && (state.step % cfg.val_every == 0 || state.step == cfg.total_steps)
        {
            let v = evaluate_loss(&params, model_cfg, cfg, val_scenes)?;
            final_val = Some(v);
            Some(v)
        } else {
            None
        };

        let record = LogRecord {
            step: state.step,
            lr: lr_at(cfg, state.step),
            loss_main: sum_main / cfg.batch as f64,
            loss_aux: sum_aux / cfg.batch as f64,
            val_loss,
        };
        serde_json::to_writer(&mut *log, &record).map_err(CheckpointError::HeaderJson)?;
        log.write_all(b"\n")?;

        if let Some(dir) = ckpt_dir {
            if state.step % cfg.checkpoint_every == 0 || state.step == cfg.total_steps {
                let path: PathBuf = dir.join(format!("step_{:06}.ckpt", state.step));
                save_train_checkpoint(&path, &params, &state, model_cfg)?;
                save_train_checkpoint(&dir.join("latest.ckpt"), &params, &state, model_cfg)?;
            }
        }
    }
    Ok(TrainOutcome { params, state, final_val_loss: final_val })
}

// ==== TESTS ====

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::SceneSpec;

    #[test]
    fn targets_examples() {
        // Constant depth: all zeros.
        let d = DepthTrack { n: 1, t_len: 4, depths: vec![3.5; 4] };
        assert_eq!(window_targets(&d, 0, 4).unwrap(), vec![0.0; 4]);

        // Depths [2,4,8] in a W=3 window: [0, ln2, ln4].
        let d = DepthTrack { n: 1, t_len: 3, depths: vec![2.0, 4.0, 8.0] };
        let t = window_targets(&d, 0, 3).unwrap();
        assert_eq!(t[0], 0.0);
        assert!((t[1] - std::f64::consts::LN_2 as f32).abs() < 1e-7);
        assert!((t[2] - (4.0f64).ln() as f32).abs() < 1e-7);

        let d = DepthTrack { n: 1, t_len: 2, depths: vec![1.0, -1.0] };
        assert!(matches!(
            window_targets(&d, 0, 2),
            Err(TrainError::NonPositiveDepth { point: 0, frame: 1 })
        ));
    }

    #[test]
    fn targets_roundtrip_and_scale_invariance() {
        use rand::Rng;
        let mut rng = seeds::rng(5, Stream::Scene, 0);
        let n = 6;
        let t_len = 10;
        let depths: Vec<f64> = (0..n * t_len).map(|_| rng.random_range(0.5..20.0)).collect();
        let d = DepthTrack { n, t_len, depths: depths.clone() };
        let t = window_targets(&d, 2, 8).unwrap();
        // exp(values) * d0 reconstructs depths to 1e-6 relative.
        for i in 0..n {
            for k in 0..8 {
                let rec = (t[i * 8 + k] as f64).exp() * d.depth(i, 2);
                let rel = (rec - d.depth(i, 2 + k)).abs() / d.depth(i, 2 + k);
                assert!(rel < 1e-6, "point {i} frame {k}: rel {rel}");
            }
        }
        // Scaling every depth by c > 0 leaves targets bit-identical.
        for c in [0.125, 3.0, 7.3] {
            let scaled = DepthTrack {
                n,
                t_len,
                depths: depths.iter().map(|&v| v * c).collect(),
            };
            assert_eq!(window_targets(&scaled, 2, 8).unwrap(), t, "scale {c}");
        }
    }

    #[test]
    fn loss_log_ratio_examples() {
        let mut tape: Tape<f32> = Tape::new();
        let tgt = vec![0.0f32, 0.5, -0.25, 1.0];
        let vis = vec![true; 4];
        // pred == target -> 0.
        let p = tape.param(&[2, 2], tgt.clone()).unwrap();
        let l = loss_log_ratio(&mut tape, &[p], &tgt, &vis, 2, 2).unwrap();
        assert_eq!(tape.value(l)[0], 0.0);

        // pred - target = c everywhere -> |c|.
        let shifted: Vec<f32> = tgt.iter().map(|v| v - 0.75).collect();
        let p = tape.param(&[2, 2], shifted).unwrap();
        let l = loss_log_ratio(&mut tape, &[p], &tgt, &vis, 2, 2).unwrap();
        assert!((tape.value(l)[0] - 0.75).abs() < 1e-6);

        // Two-cell case, errors 0.1 and 0.3 -> 0.2.
        let p = tape.param(&[1, 2], vec![0.1, -0.3]).unwrap();
        let l = loss_log_ratio(&mut tape, &[p], &[0.0, 0.0], &[true, true], 1, 2).unwrap();
        assert!((tape.value(l)[0] - 0.2).abs() < 1e-6);

        // Occluded cells weigh 0.5: errors (0.1 vis, 0.3 occ) ->
        // (0.1 + 0.5*0.3) / 1.5 = 0.1666...
        let p = tape.param(&[1, 2], vec![0.1, -0.3]).unwrap();
        let l = loss_log_ratio(&mut tape, &[p], &[0.0, 0.0], &[true, false], 1, 2).unwrap();
        assert!((tape.value(l)[0] - 0.25 / 1.5).abs() < 1e-6);

        assert!(matches!(
            loss_log_ratio(&mut tape, &[p], &[], &[], 0, 0),
            Err(TrainError::EmptyValidity)
        ));
    }

    #[test]
    fn loss_occluded_position_examples() {
        let mut tape: Tape<f32> = Tape::new();
        // No occlusions -> 0.
        let p = tape.param(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let l = loss_occluded_position(&mut tape, &[p], &[0.0; 4], &[false, false], 1, 2).unwrap();
        assert_eq!(tape.value(l)[0], 0.0);

        // Single occluded cell with offset error (0.1, 0.2) -> 0.15.
        let p = tape.param(&[1, 2, 2], vec![0.0, 0.0, 0.1, 0.2]).unwrap();
        let l = loss_occluded_position(&mut tape, &[p], &[0.0; 4], &[false, true], 1, 2).unwrap();
        assert!((tape.value(l)[0] - 0.15).abs() < 1e-6);

        // Perfect prediction -> 0.
        let tgt = vec![0.0, 0.0, 0.1, 0.2];
        let p = tape.param(&[1, 2, 2], tgt.clone()).unwrap();
        let l = loss_occluded_position(&mut tape, &[p], &tgt, &[false, true], 1, 2).unwrap();
        assert_eq!(tape.value(l)[0], 0.0);
    }

    #[test]
    fn lr_schedule_examples() {
        let cfg = TrainConfig { lr: 5e-4, warmup_steps: 1000, total_steps: 20000, ..Default::default() };
        assert!((lr_at(&cfg, 1000) - 5e-4).abs() < 1e-12); // step == warmup -> base
        assert_eq!(lr_at(&cfg, 20000), 0.0); // step == total -> 0
        // Mid-warmup: ramp times the (slightly >1) decay factor.
        let expect = 5e-4 * 0.5 * (19500.0 / 19000.0);
        assert!((lr_at(&cfg, 500) - expect).abs() < 1e-12);
        let mid = lr_at(&cfg, 10500);
        assert!((mid - 5e-4 * 0.5).abs() < 1e-12); // halfway through decay
    }

    #[test]
    fn adamw_single_step_hand_check() {
        let mut params = ParamSet::new();
        params.push("w", &[1], vec![0.0]);
        let mut state = OptimizerState::new(&params);
        let cfg = TrainConfig {
            lr: 1e-2,
            weight_decay: 0.0,
            warmup_steps: 0,
            total_steps: 100,
            ..Default::default()
        };
        optimizer_step(&mut params, &[vec![1.0]], &mut state, &cfg);
        // Hand evaluation: m_hat = v_hat = 1, so the step is lr/(1 + eps)
        // times the schedule factor at step 1.
        let lr1 = lr_at(&cfg, 1);
        let expected = -(lr1 * 1.0 / (1.0 + ADAM_EPS));
        assert!(
            (params.entries[0].data[0] as f64 - expected).abs() < 1e-6,
            "got {}, expected {expected}",
            params.entries[0].data[0]
        );
    }

    #[test]
    fn weight_decay_is_decoupled() {
        // With zero gradient the Adam term vanishes; only decay moves weights.
        let mut params = ParamSet::new();
        params.push("w", &[1], vec![2.0]);
        let mut state = OptimizerState::new(&params);
        let cfg = TrainConfig {
            lr: 0.1,
            weight_decay: 0.01,
            warmup_steps: 0,
            total_steps: 100,
            ..Default::default()
        };
        optimizer_step(&mut params, &[vec![0.0]], &mut state, &cfg);
        let lr1 = lr_at(&cfg, 1);
        let expected = 2.0 * (1.0 - lr1 * 0.01);
        assert!((params.entries[0].data[0] as f64 - expected).abs() < 1e-7);
    }

    #[test]
    fn clip_rescales_large_gradients() {
        let mut g = vec![vec![3.0f32, 4.0]]; // norm 5
        let norm = clip_global_norm(&mut g, 1.0);
        assert!((norm - 5.0).abs() < 1e-6);
        let after: f64 = g[0].iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        assert!((after - 1.0).abs() < 1e-6);

        let mut g = vec![vec![0.3f32, 0.4]];
        clip_global_norm(&mut g, 1.0);
        assert_eq!(g[0], vec![0.3, 0.4]); // under the cap: untouched
    }

    fn tiny_scene(seed: u64) -> TrainScene {
        let spec = SceneSpec {
            num_bodies: 2,
            points_per_body: 12,
            frames: 8,
            rng_seed: seed,
            ..SceneSpec::default()
        };
        let (tracks, depths) = crate::synth::generate_scene(&spec).unwrap();
        prepare_scene(&tracks, &depths, (2, 2), 4, seed).unwrap()
    }

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            layers: 1,
            hidden_dim: 16,
            heads: 2,
            window: 4,
            refine_iters: 1,
            support_grid: (2, 2),
        }
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let model_cfg = tiny_model();
        let cfg = TrainConfig {
            total_steps: 40,
            warmup_steps: 5,
            batch: 2,
            window: 4,
            stride: 2,
            seed: 9,
            val_every: 40,
            checkpoint_every: 1000,
            ..Default::default()
        };
        let scenes: Vec<TrainScene> = (0..3).map(|i| tiny_scene(100 + i)).collect();
        let val: Vec<TrainScene> = vec![tiny_scene(999)];
        let params = model::init_params(&model_cfg, 7);
        let state = OptimizerState::new(&params);

        let before = evaluate_loss(&params, &model_cfg, &cfg, &val).unwrap();
        let mut log1 = Vec::new();
        let out1 = train(
            params.clone(),
            OptimizerState::new(&params),
            &model_cfg,
            &cfg,
            &scenes,
            &val,
            &mut log1,
            None,
            1,
        )
        .unwrap();
        let after = out1.final_val_loss.unwrap();
        assert!(after < before, "val loss should drop: {before} -> {after}");

        // Same seed, 2 workers: bit-identical parameters.
        let mut log2 = Vec::new();
        let out2 = train(params, state, &model_cfg, &cfg, &scenes, &val, &mut log2, None, 2).unwrap();
        assert_eq!(out1.params, out2.params, "training must be worker-count invariant");

        // Log is valid JSONL with the declared fields.
        let text = String::from_utf8(log1).unwrap();
        let first: LogRecord = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first.step, 1);
        assert!(first.lr > 0.0);
    }

    #[test]
    fn checkpoint_resume_roundtrip() {
        let model_cfg = tiny_model();
        let params = model::init_params(&model_cfg, 3);
        let mut state = OptimizerState::new(&params);
        state.step = 17;
        state.m[2][0] = 0.25;
        state.v[3][1] = 0.5;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        save_train_checkpoint(&path, &params, &state, &model_cfg).unwrap();
        let (p2, s2, m2) = load_train_checkpoint(&path).unwrap();
        assert_eq!(p2, params);
        assert_eq!(s2.step, 17);
        assert_eq!(s2.m[2][0], 0.25);
        assert_eq!(s2.v[3][1], 0.5);
        assert_eq!(m2, model_cfg);
    }

    #[test]
    fn zero_predictor_matches_direct_targets() {
        let scene = tiny_scene(42);
        let model_cfg = tiny_model();
        let cfg = TrainConfig { window: 4, stride: 2, ..Default::default() };
        let z = zero_predictor_loss(&model_cfg, &cfg, std::slice::from_ref(&scene)).unwrap();
        assert!(z > 0.0, "moving scenes have nonzero targets");
        // The zero predictor equals evaluating fresh zero-head params.
        let params = model::init_params(&model_cfg, 1);
        let e = evaluate_loss(&params, &model_cfg, &cfg, std::slice::from_ref(&scene)).unwrap();
        assert!((z - e).abs() < 1e-5, "zero-head model {e} vs direct {z}");
    }
}
