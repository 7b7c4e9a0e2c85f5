//! TAPVid-3D-style evaluation: depth-adaptive position accuracy (APD),
//! 3D average Jaccard, temporal coherence, supplementary depth errors, the
//! three alignment protocols, and a temporal Gaussian smoothing utility for
//! A/B comparisons.

use serde::{Deserialize, Serialize};

use crate::geometry::CameraModel;
use crate::infer::median;
use crate::synth::DepthTrack;

/// Depth-adaptive pixel thresholds evaluated by APD and 3D-AJ.
pub const DELTAS: [f64; 5] = [1.0, 2.0, 4.0, 8.0, 16.0];

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("temporal coherence needs at least 3 frames, got {0}")]
    TooShortSequence(usize),
    #[error("non-positive depth for point {point} frame {frame}")]
    NonPositiveDepth { point: usize, frame: usize },
    #[error("degenerate affine fit: predicted depths have zero variance")]
    DegenerateFit,
    #[error("alignment overlap is empty")]
    EmptyOverlap,
}

// ==== HELPERS ====

fn err3(pred3d: &[f32], gt3d: &[f32], i: usize, t: usize, t_len: usize) -> f64 {
    let k = (i * t_len + t) * 3;
    let dx = pred3d[k] as f64 - gt3d[k] as f64;
    let dy = pred3d[k + 1] as f64 - gt3d[k + 1] as f64;
    let dz = pred3d[k + 2] as f64 - gt3d[k + 2] as f64;
    (dx * dx + dy * dy + dz * dz).sqrt()
}

// ==== APD ====

/// Per-threshold position accuracy: for each delta, the fraction of
/// gt-visible cells whose 3D error is strictly inside `delta * d_gt / f`
/// (the distance subtended by delta pixels at the point's depth).
pub fn apd_by_delta(
    pred3d: &[f32],
    gt3d: &[f32],
    gt_depth: &DepthTrack,
    camera: &CameraModel,
    gt_vis: &[bool],
    n: usize,
    t_len: usize,
) -> [f32; 5] {
    assert_eq!(pred3d.len(), n * t_len * 3);
    assert_eq!(gt3d.len(), n * t_len * 3);
    assert_eq!(gt_vis.len(), n * t_len);
    let f = camera.focal_px as f64;
    let mut within = [0usize; 5];
    let mut visible = 0usize;
    for i in 0..n {
        for t in 0..t_len {
            if !gt_vis[i * t_len + t] {
                continue;
            }
            visible += 1;
            let e = err3(pred3d, gt3d, i, t, t_len);
            for (d, w) in DELTAS.iter().zip(within.iter_mut()) {
                if e < d * gt_depth.depth(i, t) / f {
                    *w += 1;
                }
            }
        }
    }
    // Vacuously perfect when nothing is visible.
    if visible == 0 {
        return [1.0; 5];
    }
    within.map(|w| (w as f64 / visible as f64) as f32)
}

/// Average position accuracy in percent: mean of [`apd_by_delta`] over the
/// five thresholds, times 100.
pub fn apd(
    pred3d: &[f32],
    gt3d: &[f32],
    gt_depth: &DepthTrack,
    camera: &CameraModel,
    gt_vis: &[bool],
    n: usize,
    t_len: usize,
) -> f32 {
    let by = apd_by_delta(pred3d, gt3d, gt_depth, camera, gt_vis, n, t_len);
    (by.iter().map(|&v| v as f64).sum::<f64>() / by.len() as f64 * 100.0) as f32
}

// ==== 3D AVERAGE JACCARD ====

/// Per-threshold Jaccard TP/(TP+FP+FN): TP = visible in both and within
/// threshold; FP = predicted visible where gt is occluded; FN = gt-visible
/// cells that are predicted occluded or miss the threshold. With gt
/// visibility fed as predictions, FP is structurally zero and the score
/// reduces to APD over gt-visible cells.
pub fn aj3d_by_delta(
    pred3d: &[f32],
    gt3d: &[f32],
    gt_depth: &DepthTrack,
    camera: &CameraModel,
    pred_vis: &[bool],
    gt_vis: &[bool],
    n: usize,
    t_len: usize,
) -> [f32; 5] {
    assert_eq!(pred_vis.len(), n * t_len);
    assert_eq!(gt_vis.len(), n * t_len);
    let f = camera.focal_px as f64;
    let mut tp = [0usize; 5];
    let mut fp = [0usize; 5];
    let mut fneg = [0usize; 5];
    for i in 0..n {
        for t in 0..t_len {
            let pv = pred_vis[i * t_len + t];
            let gv = gt_vis[i * t_len + t];
            if pv && !gv {
                for c in fp.iter_mut() {
                    *c += 1;
                }
                continue;
            }
            if !gv {
                continue;
            }
            let e = err3(pred3d, gt3d, i, t, t_len);
            for (k, d) in DELTAS.iter().enumerate() {
                if pv && e < d * gt_depth.depth(i, t) / f {
                    tp[k] += 1;
                } else {
                    fneg[k] += 1;
                }
            }
        }
    }
    let mut out = [0f32; 5];
    for k in 0..5 {
        let denom = tp[k] + fp[k] + fneg[k];
        // Vacuously perfect when there is nothing to find or claim.
        out[k] = if denom == 0 { 1.0 } else { (tp[k] as f64 / denom as f64) as f32 };
    }
    out
}

/// Average 3D Jaccard in percent: mean of [`aj3d_by_delta`] times 100.
#[allow(clippy::too_many_arguments)]
pub fn aj3d(
    pred3d: &[f32],
    gt3d: &[f32],
    gt_depth: &DepthTrack,
    camera: &CameraModel,
    pred_vis: &[bool],
    gt_vis: &[bool],
    n: usize,
    t_len: usize,
) -> f32 {
    let by = aj3d_by_delta(pred3d, gt3d, gt_depth, camera, pred_vis, gt_vis, n, t_len);
    (by.iter().map(|&v| v as f64).sum::<f64>() / by.len() as f64 * 100.0) as f32
}

// ==== TEMPORAL COHERENCE ====

/// Mean L2 difference between predicted and ground-truth discrete
/// accelerations `x_{t+1} - 2 x_t + x_{t-1}`, over points and interior
/// frames. When a gt visibility mask is given, an interior frame counts
/// only if all three stencil frames are visible. Second differences kill
/// constant and linear-in-time offsets exactly.
pub fn temporal_coherence(
    pred3d: &[f32],
    gt3d: &[f32],
    n: usize,
    t_len: usize,
    gt_vis: Option<&[bool]>,
) -> Result<f32, MetricsError> {
    if t_len < 3 {
        return Err(MetricsError::TooShortSequence(t_len));
    }
    assert_eq!(pred3d.len(), n * t_len * 3);
    assert_eq!(gt3d.len(), n * t_len * 3);
    let accel = |v: &[f32], i: usize, t: usize, c: usize| {
        let at = |tt: usize| v[(i * t_len + tt) * 3 + c] as f64;
        at(t + 1) - 2.0 * at(t) + at(t - 1)
    };
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for i in 0..n {
        for t in 1..t_len - 1 {
            if let Some(vis) = gt_vis {
                let row = &vis[i * t_len..(i + 1) * t_len];
                if !(row[t - 1] && row[t] && row[t + 1]) {
                    continue;
                }
            }
            let mut norm2 = 0.0f64;
            for c in 0..3 {
                let d = accel(pred3d, i, t, c) - accel(gt3d, i, t, c);
                norm2 += d * d;
            }
            sum += norm2.sqrt();
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { (sum / count as f64) as f32 })
}

// ==== DEPTH ERRORS ====

/// AbsRel = mean |d_hat - d| / d and delta_1 = fraction with
/// max(d_hat/d, d/d_hat) strictly below 1.25, over gt-visible cells.
pub fn depth_errors(
    pred: &DepthTrack,
    gt: &DepthTrack,
    gt_vis: &[bool],
) -> Result<(f32, f32), MetricsError> {
    assert_eq!(pred.n, gt.n);
    assert_eq!(pred.t_len, gt.t_len);
    assert_eq!(gt_vis.len(), gt.n * gt.t_len);
    let mut absrel = 0.0f64;
    let mut inside = 0usize;
    let mut count = 0usize;
    for i in 0..gt.n {
        for t in 0..gt.t_len {
            if !gt_vis[i * gt.t_len + t] {
                continue;
            }
            let (dh, d) = (pred.depth(i, t), gt.depth(i, t));
            if d <= 0.0 || dh <= 0.0 {
                return Err(MetricsError::NonPositiveDepth { point: i, frame: t });
            }
            absrel += (dh - d).abs() / d;
            if (dh / d).max(d / dh) < 1.25 {
                inside += 1;
            }
            count += 1;
        }
    }
    if count == 0 {
        return Ok((0.0, 1.0));
    }
    Ok(((absrel / count as f64) as f32, (inside as f64 / count as f64) as f32))
}

// ==== ALIGNMENT ====

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignMode {
    /// Scale each trajectory so its query-frame (frame 0) depth matches gt.
    #[default]
    PerTrajectory,
    /// One least-squares scale and shift for the whole set.
    Affine,
    /// One scale for the whole set: median(gt) / median(pred).
    Median,
}

/// Rescales predicted depths onto the gt scale under the chosen protocol.
pub fn align(
    pred: &DepthTrack,
    gt: &DepthTrack,
    mode: AlignMode,
) -> Result<DepthTrack, MetricsError> {
    assert_eq!(pred.n, gt.n);
    assert_eq!(pred.t_len, gt.t_len);
    if pred.depths.is_empty() {
        return Err(MetricsError::EmptyOverlap);
    }
    let mut out = pred.clone();
    match mode {
        AlignMode::PerTrajectory => {
            for i in 0..pred.n {
                let dh0 = pred.depth(i, 0);
                if dh0 <= 0.0 {
                    return Err(MetricsError::NonPositiveDepth { point: i, frame: 0 });
                }
                let s = gt.depth(i, 0) / dh0;
                for t in 0..pred.t_len {
                    out.depths[i * pred.t_len + t] = s * pred.depth(i, t);
                }
            }
        }
        AlignMode::Affine => {
            let m = pred.depths.len() as f64;
            let mean_p = pred.depths.iter().sum::<f64>() / m;
            let mean_g = gt.depths.iter().sum::<f64>() / m;
            let mut var_p = 0.0f64;
            let mut cov = 0.0f64;
            for (p, g) in pred.depths.iter().zip(&gt.depths) {
                var_p += (p - mean_p) * (p - mean_p);
                cov += (p - mean_p) * (g - mean_g);
            }
            if var_p == 0.0 {
                return Err(MetricsError::DegenerateFit);
            }
            let s = cov / var_p;
            let b = mean_g - s * mean_p;
            for (o, p) in out.depths.iter_mut().zip(&pred.depths) {
                *o = s * p + b;
            }
        }
        AlignMode::Median => {
            let mut ps = pred.depths.clone();
            let mut gs = gt.depths.clone();
            let mp = median(&mut ps);
            if mp <= 0.0 {
                return Err(MetricsError::DegenerateFit);
            }
            let s = median(&mut gs) / mp;
            for o in out.depths.iter_mut() {
                *o *= s;
            }
        }
    }
    Ok(out)
}

// ==== GAUSSIAN SMOOTHING ====

/// Per-trajectory temporal Gaussian filter (sigma = 1 frame, radius 3),
/// truncated and renormalized at sequence boundaries; `passes` repeats the
/// filter. The reference comparison runs 1 or 3 passes.
pub fn gaussian_smooth(depths: &DepthTrack, passes: usize) -> DepthTrack {
    const RADIUS: isize = 3;
    let weights: Vec<f64> =
        (-RADIUS..=RADIUS).map(|k| (-(k * k) as f64 / 2.0).exp()).collect();
    let t_len = depths.t_len as isize;
    let mut cur = depths.clone();
    for _ in 0..passes {
        let mut next = cur.clone();
        for i in 0..depths.n {
            for t in 0..t_len {
                let mut acc = 0.0f64;
                let mut norm = 0.0f64;
                for (k, w) in (-RADIUS..=RADIUS).zip(&weights) {
                    let tt = t + k;
                    if tt >= 0 && tt < t_len {
                        acc += w * cur.depth(i, tt as usize);
                        norm += w;
                    }
                }
                next.depths[i * depths.t_len + t as usize] = acc / norm;
            }
        }
        cur = next;
    }
    cur
}

// ==== REPORT ====

/// All inputs needed for a full evaluation. 3D tracks are `[n * t_len * 3]`
/// camera-frame coordinates; depths come pre-aligned.
pub struct EvalInputs<'a> {
    pub n: usize,
    pub t_len: usize,
    pub pred3d: &'a [f32],
    pub gt3d: &'a [f32],
    pub pred_depth: &'a DepthTrack,
    pub gt_depth: &'a DepthTrack,
    pub pred_vis: &'a [bool],
    pub gt_vis: &'a [bool],
    pub camera: &'a CameraModel,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub apd_percent: f32,
    pub aj3d_percent: f32,
    pub tc: f32,
    pub absrel: f32,
    pub delta1: f32,
    /// Per-threshold fractions in DELTAS order.
    pub apd_by_delta: Vec<f32>,
    pub aj3d_by_delta: Vec<f32>,
}

impl EvalReport {
    /// Flat per-threshold table for plotting.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("delta,apd,aj3d\n");
        for (k, d) in DELTAS.iter().enumerate() {
            s.push_str(&format!("{},{},{}\n", d, self.apd_by_delta[k], self.aj3d_by_delta[k]));
        }
        s
    }
}

pub fn evaluate(inp: &EvalInputs) -> Result<EvalReport, MetricsError> {
    let apd_by =
        apd_by_delta(inp.pred3d, inp.gt3d, inp.gt_depth, inp.camera, inp.gt_vis, inp.n, inp.t_len);
    let aj_by = aj3d_by_delta(
        inp.pred3d, inp.gt3d, inp.gt_depth, inp.camera, inp.pred_vis, inp.gt_vis, inp.n, inp.t_len,
    );
    let tc = temporal_coherence(inp.pred3d, inp.gt3d, inp.n, inp.t_len, Some(inp.gt_vis))?;
    let (absrel, delta1) = depth_errors(inp.pred_depth, inp.gt_depth, inp.gt_vis)?;
    let mean = |v: &[f32; 5]| (v.iter().map(|&x| x as f64).sum::<f64>() / 5.0 * 100.0) as f32;
    Ok(EvalReport {
        apd_percent: mean(&apd_by),
        aj3d_percent: mean(&aj_by),
        tc,
        absrel,
        delta1,
        apd_by_delta: apd_by.to_vec(),
        aj3d_by_delta: aj_by.to_vec(),
    })
}

// ==== TESTS ====
