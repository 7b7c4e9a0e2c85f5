//! Two-branch trajectory transformer for window log-depth-ratio prediction.
//!
//! The supporting branch runs alternating temporal/spatial self-attention
//! over a dense lattice of supporting trajectories; the query branch runs
//! per-query temporal self-attention plus per-frame cross-attention into the
//! supporting features. Both branches carry ratio heads anchored so the
//! window's first frame is exactly log-ratio 0, and the whole stack is
//! applied K times with shared weights, feeding each pass's estimate back
//! into the next embedding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tape, TapeError, TensorRef};
use crate::checkpoint::ParamSet;
use crate::seeds::{self, Stream};
use crate::synth::{Role, TrackSet};

/// Sinusoidal time-encoding width inside the embedding.
pub const TIME_ENC_DIM: usize = 32;
/// Pre-projection feature width: position (2), displacement from window
/// frame 0 (2), visibility flag (1), time encoding, current estimate (1).
pub const EMBED_FEATS: usize = 2 + 2 + 1 + TIME_ENC_DIM + 1;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error("bad model config: {0}")]
    BadConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("parameter {0} missing from checkpoint")]
    MissingParam(String),
}

// ==== CONFIG ====

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub window: usize,
    pub refine_iters: usize,
    pub support_grid: (usize, usize),
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 2,
            hidden_dim: 384,
            heads: 8,
            window: 8,
            refine_iters: 4,
            support_grid: (24, 24),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.hidden_dim == 0 || self.hidden_dim % self.heads != 0 {
            return Err(ModelError::BadConfig(format!(
                "hidden_dim {} not divisible by heads {}",
                self.hidden_dim, self.heads
            )));
        }
        if self.layers == 0 {
            return Err(ModelError::BadConfig("layers must be >= 1".into()));
        }
        if self.refine_iters == 0 {
            return Err(ModelError::BadConfig("refine_iters must be >= 1".into()));
        }
        if self.window < 2 {
            return Err(ModelError::BadConfig("window must be >= 2".into()));
        }
        Ok(())
    }
}

// ==== PARAMETERS ====

fn attn_names(prefix: &str) -> Vec<String> {
    ["ln.g", "ln.b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"]
        .iter()
        .map(|s| format!("{prefix}.{s}"))
        .collect()
}

fn mlp_names(prefix: &str) -> Vec<String> {
    ["ln.g", "ln.b", "w1", "b1", "w2", "b2"].iter().map(|s| format!("{prefix}.{s}")).collect()
}

fn push_linear(p: &mut ParamSet, rng: &mut impl rand::Rng, name_w: &str, name_b: &str, fan_in: usize, fan_out: usize) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let w: Vec<f32> =
        (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound) as f32).collect();
    p.push(name_w, &[fan_in, fan_out], w);
    p.push(name_b, &[fan_out], vec![0.0; fan_out]);
}

fn push_ln(p: &mut ParamSet, prefix: &str, dim: usize) {
    p.push(&format!("{prefix}.ln.g"), &[dim], vec![1.0; dim]);
    p.push(&format!("{prefix}.ln.b"), &[dim], vec![0.0; dim]);
}

fn push_attn(p: &mut ParamSet, rng: &mut impl rand::Rng, prefix: &str, dim: usize) {
    push_ln(p, prefix, dim);
    for pair in [("wq", "bq"), ("wk", "bk"), ("wv", "bv"), ("wo", "bo")] {
        push_linear(p, rng, &format!("{prefix}.{}", pair.0), &format!("{prefix}.{}", pair.1), dim, dim);
    }
}

fn push_mlp(p: &mut ParamSet, rng: &mut impl rand::Rng, prefix: &str, dim: usize) {
    push_ln(p, prefix, dim);
    push_linear(p, rng, &format!("{prefix}.w1"), &format!("{prefix}.b1"), dim, 4 * dim);
    push_linear(p, rng, &format!("{prefix}.w2"), &format!("{prefix}.b2"), 4 * dim, dim);
}

/// Fresh parameters: uniform(+-1/sqrt(fan_in)) weights, zero biases, unit
/// layer-norm gains, zero-initialized heads so the initial prediction is the
/// identity ratio.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> ParamSet {
    let d = cfg.hidden_dim;
    let mut rng = seeds::rng(seed, Stream::ParamInit, 0);
    let mut p = ParamSet::new();
    push_linear(&mut p, &mut rng, "embed.w", "embed.b", EMBED_FEATS, d);
    push_ln(&mut p, "embed", d);
    for i in 0..cfg.layers {
        push_attn(&mut p, &mut rng, &format!("support.{i}.tattn"), d);
        push_mlp(&mut p, &mut rng, &format!("support.{i}.tmlp"), d);
        push_attn(&mut p, &mut rng, &format!("support.{i}.sattn"), d);
        push_mlp(&mut p, &mut rng, &format!("support.{i}.smlp"), d);
    }
    for i in 0..cfg.layers {
        push_attn(&mut p, &mut rng, &format!("query.{i}.tattn"), d);
        push_attn(&mut p, &mut rng, &format!("query.{i}.cross"), d);
        let bound = 1.0 / (d as f64).sqrt();
        let null: Vec<f32> = (0..d).map(|_| rng.random_range(-bound..bound) as f32).collect();
        p.push(&format!("query.{i}.cross.null"), &[d], null);
        push_mlp(&mut p, &mut rng, &format!("query.{i}.mlp"), d);
    }
    for side in ["support", "query"] {
        p.push(&format!("head.{side}.ratio.w"), &[d, 1], vec![0.0; d]);
        p.push(&format!("head.{side}.ratio.b"), &[1], vec![0.0]);
        p.push(&format!("head.{side}.pos.w"), &[d, 2], vec![0.0; 2 * d]);
        p.push(&format!("head.{side}.pos.b"), &[2], vec![0.0; 2]);
    }
    p
}

/// Parameters loaded onto a tape, addressable by name.
pub struct Bound {
    names: Vec<String>,
    refs: Vec<TensorRef>,
}

impl Bound {
    pub fn get(&self, name: &str) -> TensorRef {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"));
        self.refs[i]
    }

    pub fn refs(&self) -> &[TensorRef] {
        &self.refs
    }
}

/// Copies a parameter set onto a tape, as learnable leaves when `trainable`.
pub fn bind_params<F: Scalar>(
    tape: &mut Tape<F>,
    params: &ParamSet,
    trainable: bool,
) -> Result<Bound, ModelError> {
    let mut names = Vec::with_capacity(params.entries.len());
    let mut refs = Vec::with_capacity(params.entries.len());
    for e in &params.entries {
        let data: Vec<F> = e.data.iter().map(|&v| F::from_f64(v as f64)).collect();
        let r = if trainable {
            tape.param(&e.shape, data)?
        } else {
            tape.constant(&e.shape, data)?
        };
        names.push(e.name.clone());
        refs.push(r);
    }
    Ok(Bound { names, refs })
}

/// Gradients of the bound parameters in parameter-set order (after a
/// backward pass).
pub fn collect_grads<F: Scalar>(tape: &Tape<F>, bound: &Bound) -> Vec<Vec<f32>> {
    bound
        .refs
        .iter()
        .map(|&r| match tape.grad(r) {
            Some(g) => g.iter().map(|v| v.to_f64() as f32).collect(),
            None => vec![0.0; tape.value(r).len()],
        })
        .collect()
}

// ==== WINDOW INPUT ====

/// One window of masked trajectories split by role, ready for embedding.
#[derive(Debug, Clone)]
pub struct WindowInput {
    pub ns: usize,
    pub nq: usize,
    pub w: usize,
    pub image_size: (u32, u32),
    /// Masked support positions `[ns * w * 2]`.
    pub support_pos: Vec<f32>,
    pub support_vis: Vec<bool>,
    pub query_pos: Vec<f32>,
    pub query_vis: Vec<bool>,
}

impl WindowInput {
    /// Slices frames `[start, start+w)` out of an already-masked track set,
    /// separating rows by role.
    pub fn from_tracks(tracks: &TrackSet, start: usize, w: usize) -> Result<Self, ModelError> {
        if start + w > tracks.t_len {
            return Err(ModelError::ShapeMismatch(format!(
                "window [{start}, {}) exceeds track length {}",
                start + w,
                tracks.t_len
            )));
        }
        let mut out = WindowInput {
            ns: 0,
            nq: 0,
            w,
            image_size: tracks.camera.image_size,
            support_pos: Vec::new(),
            support_vis: Vec::new(),
            query_pos: Vec::new(),
            query_vis: Vec::new(),
        };
        for i in 0..tracks.n {
            let (pos, vis, count) = match tracks.roles[i] {
                Role::Support => (&mut out.support_pos, &mut out.support_vis, &mut out.ns),
                Role::Query => (&mut out.query_pos, &mut out.query_vis, &mut out.nq),
            };
            *count += 1;
            for t in start..start + w {
                let p = tracks.pos(i, t);
                pos.extend_from_slice(&p);
                vis.push(tracks.visible(i, t));
            }
        }
        if out.ns == 0 || out.nq == 0 {
            return Err(ModelError::ShapeMismatch(format!(
                "window needs both roles, got {} support / {} query",
                out.ns, out.nq
            )));
        }
        Ok(out)
    }
}

// ==== FORWARD ====

struct AttnRefs {
    ln_g: TensorRef,
    ln_b: TensorRef,
    wq: TensorRef,
    bq: TensorRef,
    wk: TensorRef,
    bk: TensorRef,
    wv: TensorRef,
    bv: TensorRef,
    wo: TensorRef,
    bo: TensorRef,
}

fn attn_refs(bound: &Bound, prefix: &str) -> AttnRefs {
    let n = attn_names(prefix);
    AttnRefs {
        ln_g: bound.get(&n[0]),
        ln_b: bound.get(&n[1]),
        wq: bound.get(&n[2]),
        bq: bound.get(&n[3]),
        wk: bound.get(&n[4]),
        bk: bound.get(&n[5]),
        wv: bound.get(&n[6]),
        bv: bound.get(&n[7]),
        wo: bound.get(&n[8]),
        bo: bound.get(&n[9]),
    }
}

fn linear<F: Scalar>(
    t: &mut Tape<F>,
    x: TensorRef,
    w: TensorRef,
    b: TensorRef,
) -> Result<TensorRef, TapeError> {
    let y = t.matmul(x, w)?;
    t.add_bias(y, b)
}

/// Multi-head attention over batched sequences: queries `[B, Sq, D]`,
/// memory `[B, Sk, D]`, optional per-key mask `[B * Sk]`.
fn attention<F: Scalar>(
    t: &mut Tape<F>,
    p: &AttnRefs,
    xq: TensorRef,
    mem: TensorRef,
    key_mask: Option<&[bool]>,
    heads: usize,
) -> Result<TensorRef, TapeError> {
    let (b, sq, d) = {
        let s = t.shape(xq);
        (s[0], s[1], s[2])
    };
    let sk = t.shape(mem)[1];
    let dh = d / heads;

    let split = |t: &mut Tape<F>, x: TensorRef, seq: usize| -> Result<TensorRef, TapeError> {
        // [B*seq, D] -> [B*heads, seq, dh]
        let x4 = t.reshape(x, &[b, seq, heads, dh])?;
        let xp = t.permute(x4, &[0, 2, 1, 3])?;
        t.reshape(xp, &[b * heads, seq, dh])
    };

    let q2 = t.reshape(xq, &[b * sq, d])?;
    let q = linear(t, q2, p.wq, p.bq)?;
    let qh = split(t, q, sq)?;
    let m2 = t.reshape(mem, &[b * sk, d])?;
    let k = linear(t, m2, p.wk, p.bk)?;
    let kh = split(t, k, sk)?;
    let v = linear(t, m2, p.wv, p.bv)?;
    let vh = split(t, v, sk)?;

    let kt = t.permute(kh, &[0, 2, 1])?;
    let scores = t.bmm(qh, kt)?;
    let scores = t.scale(scores, 1.0 / (dh as f64).sqrt())?;

    let a = match key_mask {
        Some(mask) => {
            debug_assert_eq!(mask.len(), b * sk);
            let mut full = vec![false; b * heads * sq * sk];
            for bi in 0..b {
                for hi in 0..heads {
                    for qi in 0..sq {
                        let row = ((bi * heads + hi) * sq + qi) * sk;
                        full[row..row + sk].copy_from_slice(&mask[bi * sk..(bi + 1) * sk]);
                    }
                }
            }
            t.masked_softmax_lastdim(scores, Some(&full))?
        }
        None => t.softmax_lastdim(scores)?,
    };

    let o = t.bmm(a, vh)?;
    let o4 = t.reshape(o, &[b, heads, sq, dh])?;
    let op = t.permute(o4, &[0, 2, 1, 3])?;
    let oc = t.reshape(op, &[b * sq, d])?;
    let out = linear(t, oc, p.wo, p.bo)?;
    t.reshape(out, &[b, sq, d])
}

/// Pre-norm residual self-attention: `x + Attn(LN(x))`.
fn self_attn_block<F: Scalar>(
    t: &mut Tape<F>,
    p: &AttnRefs,
    x: TensorRef,
    key_mask: Option<&[bool]>,
    heads: usize,
) -> Result<TensorRef, TapeError> {
    let xn = t.layer_norm(x, p.ln_g, p.ln_b)?;
    let h = attention(t, p, xn, xn, key_mask, heads)?;
    t.add(x, h)
}

/// Pre-norm residual MLP: `x + W2 gelu(W1 LN(x))`.
fn mlp_block<F: Scalar>(
    t: &mut Tape<F>,
    bound: &Bound,
    prefix: &str,
    x: TensorRef,
) -> Result<TensorRef, TapeError> {
    let n = mlp_names(prefix);
    let (ln_g, ln_b) = (bound.get(&n[0]), bound.get(&n[1]));
    let (w1, b1) = (bound.get(&n[2]), bound.get(&n[3]));
    let (w2, b2) = (bound.get(&n[4]), bound.get(&n[5]));
    let shape = t.shape(x).to_vec();
    let rows: usize = shape[..shape.len() - 1].iter().product();
    let d = *shape.last().unwrap();
    let xn = t.layer_norm(x, ln_g, ln_b)?;
    let x2 = t.reshape(xn, &[rows, d])?;
    let h = linear(t, x2, w1, b1)?;
    let h = t.gelu(h)?;
    let h = linear(t, h, w2, b2)?;
    let h = t.reshape(h, &shape)?;
    t.add(x, h)
}

/// Spatial key mask `[W * N]` from validity stored as `[N * W]`.
fn transpose_mask(vis: &[bool], n: usize, w: usize) -> Vec<bool> {
    let mut out = vec![false; w * n];
    for i in 0..n {
        for t in 0..w {
            out[t * n + i] = vis[i * w + t];
        }
    }
    out
}

/// Initial token embedding for one branch of one window. `estimate` is a
/// live `[N, W]` tape tensor so refinement feedback stays differentiable.
pub fn embed_window<F: Scalar>(
    tape: &mut Tape<F>,
    bound: &Bound,
    positions: &[f32],
    vis: &[bool],
    estimate: TensorRef,
    image_size: (u32, u32),
    n: usize,
    w: usize,
) -> Result<TensorRef, ModelError> {
    if positions.len() != n * w * 2 || vis.len() != n * w {
        return Err(ModelError::ShapeMismatch(format!(
            "embed: {} positions / {} vis for n={n} w={w}",
            positions.len(),
            vis.len()
        )));
    }
    if tape.shape(estimate) != [n, w] {
        return Err(ModelError::ShapeMismatch(format!(
            "embed: estimate shape {:?} for n={n} w={w}",
            tape.shape(estimate)
        )));
    }
    let (iw, ih) = (image_size.0 as f64, image_size.1 as f64);
    let const_dim = EMBED_FEATS - 1;
    let mut feats = Vec::with_capacity(n * w * const_dim);
    for i in 0..n {
        let x0 = positions[i * w * 2] as f64;
        let y0 = positions[i * w * 2 + 1] as f64;
        for t in 0..w {
            let x = positions[(i * w + t) * 2] as f64;
            let y = positions[(i * w + t) * 2 + 1] as f64;
            feats.push(F::from_f64(2.0 * x / iw - 1.0));
            feats.push(F::from_f64(2.0 * y / ih - 1.0));
            feats.push(F::from_f64(2.0 * (x - x0) / iw));
            feats.push(F::from_f64(2.0 * (y - y0) / ih));
            feats.push(if vis[i * w + t] { F::ONE } else { F::ZERO });
            for j in 0..TIME_ENC_DIM / 2 {
                let freq = (10000f64).powf(-(j as f64) / (TIME_ENC_DIM / 2) as f64);
                let arg = t as f64 * freq;
                feats.push(F::from_f64(arg.sin()));
                feats.push(F::from_f64(arg.cos()));
            }
        }
    }
    let c = tape.constant(&[n * w, const_dim], feats)?;
    let est = tape.reshape(estimate, &[n * w, 1])?;
    let full = tape.concat(&[c, est], 1)?;
    let e = linear(tape, full, bound.get("embed.w"), bound.get("embed.b"))?;
    let e = tape.layer_norm(e, bound.get("embed.ln.g"), bound.get("embed.ln.b"))?;
    Ok(tape.reshape(e, &[n, w, d_of(tape, e)])?)
}

fn d_of<F: Scalar>(tape: &Tape<F>, t: TensorRef) -> usize {
    *tape.shape(t).last().unwrap()
}

/// Supporting branch: per layer, temporal self-attention (across W, per
/// point) then spatial self-attention (across points, per frame), each with
/// a pre-norm residual MLP. Returns each layer's output feature map.
pub fn support_branch<F: Scalar>(
    tape: &mut Tape<F>,
    bound: &Bound,
    cfg: &ModelConfig,
    tokens: TensorRef,
    vis: &[bool],
) -> Result<Vec<TensorRef>, ModelError> {
    let (n, w) = {
        let s = tape.shape(tokens);
        (s[0], s[1])
    };
    let spatial_mask = transpose_mask(vis, n, w);
    let mut x = tokens;
    let mut feats = Vec::with_capacity(cfg.layers);
    for i in 0..cfg.layers {
        let ta = attn_refs(bound, &format!("support.{i}.tattn"));
        x = self_attn_block(tape, &ta, x, Some(vis), cfg.heads)?;
        x = mlp_block(tape, bound, &format!("support.{i}.tmlp"), x)?;
        let xs = tape.permute(x, &[1, 0, 2])?;
        let sa = attn_refs(bound, &format!("support.{i}.sattn"));
        let xs = self_attn_block(tape, &sa, xs, Some(&spatial_mask), cfg.heads)?;
        let xs = mlp_block(tape, bound, &format!("support.{i}.smlp"), xs)?;
        x = tape.permute(xs, &[1, 0, 2])?;
        feats.push(x);
    }
    Ok(feats)
}

/// Query branch: per layer, temporal self-attention within each query's own
/// window, then per-frame cross-attention into the matching support layer's
/// features (with a learned null key/value token so fully-occluded support
/// frames stay well-defined), then a residual MLP. Queries never attend to
/// each other.
pub fn query_branch<F: Scalar>(
    tape: &mut Tape<F>,
    bound: &Bound,
    cfg: &ModelConfig,
    tokens: TensorRef,
    vis: &[bool],
    support_feats: &[TensorRef],
    support_vis: &[bool],
) -> Result<TensorRef, ModelError> {
    let (nq, w, d) = {
        let s = tape.shape(tokens);
        (s[0], s[1], s[2])
    };
    let ns = tape.shape(support_feats[0])[0];
    // Per-frame memory mask with the always-valid null slot appended.
    let mut mem_mask = vec![false; w * (ns + 1)];
    for t in 0..w {
        for j in 0..ns {
            mem_mask[t * (ns + 1) + j] = support_vis[j * w + t];
        }
        mem_mask[t * (ns + 1) + ns] = true;
    }

    let mut x = tokens;
    for i in 0..cfg.layers {
        let ta = attn_refs(bound, &format!("query.{i}.tattn"));
        x = self_attn_block(tape, &ta, x, Some(vis), cfg.heads)?;

        let ca = attn_refs(bound, &format!("query.{i}.cross"));
        let xn = tape.layer_norm(x, ca.ln_g, ca.ln_b)?;
        let xq = tape.permute(xn, &[1, 0, 2])?; // [W, Nq, D]
        let mem = tape.permute(support_feats[i], &[1, 0, 2])?; // [W, Ns, D]
        let null = bound.get(&format!("query.{i}.cross.null"));
        let null1 = tape.reshape(null, &[1, 1, d])?;
        let nullw = tape.repeat(null1, 0, w)?; // [W, 1, D]
        let mem = tape.concat(&[mem, nullw], 1)?; // [W, Ns+1, D]
        let h = attention(tape, &ca, xq, mem, Some(&mem_mask), cfg.heads)?;
        let h = tape.permute(h, &[1, 0, 2])?; // [Nq, W, D]
        x = tape.add(x, h)?;

        x = mlp_block(tape, bound, &format!("query.{i}.mlp"), x)?;
    }
    let _ = nq;
    Ok(x)
}

/// Linear ratio and position heads. The log-ratio output is anchored by
/// subtracting each point's own frame-0 prediction, so column 0 is exactly 0.
pub fn predict_heads<F: Scalar>(
    tape: &mut Tape<F>,
    bound: &Bound,
    side: &str,
    features: TensorRef,
) -> Result<(TensorRef, TensorRef), ModelError> {
    let (n, w, d) = {
        let s = tape.shape(features);
        (s[0], s[1], s[2])
    };
    let f2 = tape.reshape(features, &[n * w, d])?;
    let r = linear(tape, f2, bound.get(&format!("head.{side}.ratio.w")), bound.get(&format!("head.{side}.ratio.b")))?;
    let r = tape.reshape(r, &[n, w])?;
    let r0 = tape.slice(r, 1, 0, 1)?;
    let r0 = tape.repeat(r0, 1, w)?;
    let ratios = tape.sub(r, r0)?;
    let p = linear(tape, f2, bound.get(&format!("head.{side}.pos.w")), bound.get(&format!("head.{side}.pos.b")))?;
    let pos = tape.reshape(p, &[n, w, 2])?;
    Ok((ratios, pos))
}

/// Per-iteration outputs of [`refine`]; index k holds the running estimate
/// after pass k (training supervises every entry, inference uses the last).
pub struct RefineOutput {
    pub query_ratios: Vec<TensorRef>,
    pub support_ratios: Vec<TensorRef>,
    pub query_pos: Vec<TensorRef>,
    pub support_pos: Vec<TensorRef>,
}

/// Runs K weight-shared passes. Each pass embeds both branches with the
/// current estimates, predicts residual log-ratios, and adds them to the
/// running estimates; the feedback stays on the tape (not detached).
pub fn refine<F: Scalar>(
    tape: &mut Tape<F>,
    bound: &Bound,
    cfg: &ModelConfig,
    win: &WindowInput,
) -> Result<RefineOutput, ModelError> {
    cfg.validate()?;
    if win.w != cfg.window {
        return Err(ModelError::ShapeMismatch(format!(
            "window length {} vs config window {}",
            win.w, cfg.window
        )));
    }
    let mut est_s = tape.constant(&[win.ns, win.w], vec![F::ZERO; win.ns * win.w])?;
    let mut est_q = tape.constant(&[win.nq, win.w], vec![F::ZERO; win.nq * win.w])?;
    let mut out = RefineOutput {
        query_ratios: Vec::with_capacity(cfg.refine_iters),
        support_ratios: Vec::with_capacity(cfg.refine_iters),
        query_pos: Vec::with_capacity(cfg.refine_iters),
        support_pos: Vec::with_capacity(cfg.refine_iters),
    };
    for _ in 0..cfg.refine_iters {
        let st = embed_window(tape, bound, &win.support_pos, &win.support_vis, est_s, win.image_size, win.ns, win.w)?;
        let sfeats = support_branch(tape, bound, cfg, st, &win.support_vis)?;
        let qt = embed_window(tape, bound, &win.query_pos, &win.query_vis, est_q, win.image_size, win.nq, win.w)?;
        let qfeat = query_branch(tape, bound, cfg, qt, &win.query_vis, &sfeats, &win.support_vis)?;

        let (dr_s, pos_s) = predict_heads(tape, bound, "support", *sfeats.last().unwrap())?;
        let (dr_q, pos_q) = predict_heads(tape, bound, "query", qfeat)?;
        est_s = tape.add(est_s, dr_s)?;
        est_q = tape.add(est_q, dr_q)?;
        out.support_ratios.push(est_s);
        out.query_ratios.push(est_q);
        out.support_pos.push(pos_s);
        out.query_pos.push(pos_q);
    }
    Ok(out)
}

// ==== TESTS ====
