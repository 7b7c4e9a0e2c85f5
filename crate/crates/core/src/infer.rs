//! Sliding-window inference: per-window log-ratio prediction with the
//! support lattice re-seeded at each window start, cross-window accumulation
//! by anchor chaining, and piecewise median scale matching against an
//! external metric depth source.

use crate::bundle::DepthMapStack;
use crate::checkpoint::ParamSet;
use crate::geometry::CameraModel;
use crate::model::{self, ModelConfig, ModelError, WindowInput};
use crate::synth::{DepthTrack, Role, SynthError, TrackSet};

#[derive(Debug, thiserror::Error)]
pub enum InferError {
    #[error("sequence length {t} shorter than window {w}")]
    TooShortSequence { t: usize, w: usize },
    #[error("windows do not chain over frame {0} (need overlap of at least one frame)")]
    CoverageGap(usize),
    #[error("point {0} has no visible segment")]
    EmptySegment(usize),
    #[error("non-positive median for point {point} segment [{a}, {b}]")]
    NonPositiveMedian { point: usize, a: usize, b: usize },
    #[error("non-positive depth for point {point} frame {frame}")]
    NonPositiveDepth { point: usize, frame: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

// ==== DOMAIN TYPES ====

/// Accumulated depth ratios relative to each point's anchor frame (frame 0),
/// so `ratios[i][0] == 1` exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioTrack {
    pub n: usize,
    pub t_len: usize,
    pub ratios: Vec<f32>,
}

impl RatioTrack {
    pub fn ratio(&self, i: usize, t: usize) -> f32 {
        self.ratios[i * self.t_len + t]
    }
}

/// Maximal run of consecutive visible frames for one point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VisibleSegment {
    pub point: usize,
    pub a: usize,
    pub b: usize,
}

// ==== WINDOWS ====

/// Window starts `0, S, 2S, ...` plus, when the tail is uncovered, a final
/// window shifted left to end exactly at `T-1`.
pub fn window_starts(t_len: usize, w: usize, stride: usize) -> Result<Vec<usize>, InferError> {
    if t_len < w {
        return Err(InferError::TooShortSequence { t: t_len, w });
    }
    let mut starts = regular(t_len, w, stride);
    let last = starts.last().copied().unwrap_or(0);
    if last + w < t_len {
        starts.push(t_len - w);
    }
    Ok(starts)
}

fn regular(t_len: usize, w: usize, stride: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut start = 0usize;
    while start + w <= t_len {
        out.push(start);
        start += stride.max(1);
    }
    out
}

/// Per-window query log ratios (last refinement iteration); support depth
/// outputs are discarded.
pub struct WindowsOutput {
    pub starts: Vec<usize>,
    /// One `[nq * w]` block per window, queries in `query_rows` order.
    pub logs: Vec<Vec<f32>>,
    pub nq: usize,
    pub w: usize,
    pub t_len: usize,
}

/// Runs the model over sliding windows. Query trajectories persist across
/// windows; the support lattice is re-seeded from the nearest trajectories
/// at each window's first frame.
pub fn run_windows(
    params: &ParamSet,
    model_cfg: &ModelConfig,
    tracks: &TrackSet,
    query_rows: &[usize],
    stride: usize,
) -> Result<WindowsOutput, InferError> {
    let w = model_cfg.window;
    let starts = window_starts(tracks.t_len, w, stride)?;
    let masked = crate::synth::mask_occluded_positions(tracks)?;
    let nq = query_rows.len();
    let mut logs = Vec::with_capacity(starts.len());
    for &start in &starts {
        let support_rows =
            crate::synth::support_rows_at(tracks, model_cfg.support_grid.0, model_cfg.support_grid.1, start)?;
        let win = build_window(&masked, query_rows, &support_rows, start, w);
        let mut tape: crate::autodiff::Tape<f32> = crate::autodiff::Tape::new();
        let bound = model::bind_params(&mut tape, params, false)?;
        let out = model::refine(&mut tape, &bound, model_cfg, &win)?;
        let last = *out.query_ratios.last().expect("refine_iters >= 1");
        logs.push(tape.value(last).to_vec());
    }
    Ok(WindowsOutput { starts, logs, nq, w, t_len: tracks.t_len })
}

fn slice_rows(
    masked: &TrackSet,
    rows: &[usize],
    start: usize,
    w: usize,
) -> (Vec<f32>, Vec<bool>) {
    let mut pos = Vec::with_capacity(rows.len() * w * 2);
    let mut vis = Vec::with_capacity(rows.len() * w);
    for &i in rows {
        for t in start..start + w {
            pos.extend_from_slice(&masked.pos(i, t));
            vis.push(masked.visible(i, t));
        }
    }
    (pos, vis)
}

fn build_window(
    masked: &TrackSet,
    query_rows: &[usize],
    support_rows: &[usize],
    start: usize,
    w: usize,
) -> WindowInput {
    let (query_pos, query_vis) = slice_rows(masked, query_rows, start, w);
    let (support_pos, support_vis) = slice_rows(masked, support_rows, start, w);
    WindowInput {
        ns: support_rows.len(),
        nq: query_rows.len(),
        w,
        image_size: masked.camera.image_size,
        support_pos,
        support_vis,
        query_pos,
        query_vis,
    }
}

// ==== ACCUMULATION ====

/// Chains window logs into global ratios: each frame takes the value of its
/// last containing window's anchor chain plus its in-window log. Anchors
/// chain through the log at the offset between consecutive window starts,
/// which telescopes exactly when the logs are exact. All math is f64; only
/// the final ratio is rounded to f32, and frame 0 is exactly 1.
pub fn accumulate(out: &WindowsOutput) -> Result<RatioTrack, InferError> {
    let (w, nq, t_len) = (out.w, out.nq, out.t_len);
    let starts = &out.starts;
    assert_eq!(starts.len(), out.logs.len());
    if starts.is_empty() || starts[0] != 0 {
        return Err(InferError::CoverageGap(0));
    }
    for k in 1..starts.len() {
        let gap = starts[k] - starts[k - 1];
        // Chaining needs the next anchor inside the previous window.
        if gap >= w {
            return Err(InferError::CoverageGap(starts[k - 1] + w));
        }
    }
    let last_covered = starts.last().unwrap() + w;
    if last_covered < t_len {
        return Err(InferError::CoverageGap(last_covered));
    }

    // last_win[t] = index of the last window containing frame t.
    let mut last_win = vec![usize::MAX; t_len];
    for (k, &a) in starts.iter().enumerate() {
        for t in a..(a + w).min(t_len) {
            last_win[t] = k;
        }
    }

    let mut ratios = vec![0f32; nq * t_len];
    for i in 0..nq {
        // base[k] = accumulated log at window k's anchor frame.
        let mut base = vec![0f64; starts.len()];
        for k in 1..starts.len() {
            let offset = starts[k] - starts[k - 1];
            base[k] = base[k - 1] + out.logs[k - 1][i * w + offset] as f64;
        }
        for t in 0..t_len {
            let k = last_win[t];
            let l = out.logs[k][i * w + (t - starts[k])] as f64;
            ratios[i * t_len + t] = (base[k] + l).exp() as f32;
        }
    }
    Ok(RatioTrack { n: nq, t_len, ratios })
}

// ==== SEGMENTS AND SCALE MATCHING ====

/// Maximal runs of consecutive visible frames, per point.
pub fn visible_segments(visibility: &[bool], n: usize, t_len: usize) -> Vec<VisibleSegment> {
    assert_eq!(visibility.len(), n * t_len);
    let mut out = Vec::new();
    for i in 0..n {
        let row = &visibility[i * t_len..(i + 1) * t_len];
        let mut t = 0usize;
        while t < t_len {
            if row[t] {
                let a = t;
                while t + 1 < t_len && row[t + 1] {
                    t += 1;
                }
                out.push(VisibleSegment { point: i, a, b: t });
            }
            t += 1;
        }
    }
    out
}

/// Median with the even-length convention: average of the two central values.
pub(crate) fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Bilinear sample of frame `t` of the stack at continuous pixel
/// coordinates, clamped to the image border.
pub fn sample_bilinear(mde: &DepthMapStack, t: usize, x: f32, y: f32) -> f64 {
    let (h, w) = (mde.h, mde.w);
    let xf = (x as f64).clamp(0.0, (w - 1) as f64);
    let yf = (y as f64).clamp(0.0, (h - 1) as f64);
    let x0 = xf.floor() as usize;
    let y0 = yf.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = xf - x0 as f64;
    let fy = yf - y0 as f64;
    let at = |yy: usize, xx: usize| mde.data[(t * h + yy) * w + xx] as f64;
    (1.0 - fx) * (1.0 - fy) * at(y0, x0)
        + fx * (1.0 - fy) * at(y0, x1)
        + (1.0 - fx) * fy * at(y1, x0)
        + fx * fy * at(y1, x1)
}

/// Piecewise median scale matching: per visible segment, scale = median of
/// bilinear MDE samples over the segment divided by median of ratios over
/// the segment; occluded gaps borrow the nearest segment's scale (ties to
/// the earlier one).
pub fn scale_match(
    ratios: &RatioTrack,
    mde: &DepthMapStack,
    tracks: &TrackSet,
    rows: &[usize],
) -> Result<DepthTrack, InferError> {
    assert_eq!(ratios.n, rows.len());
    let t_len = ratios.t_len;
    let mut depths = vec![0f64; ratios.n * t_len];
    for (qi, &row) in rows.iter().enumerate() {
        let vis: Vec<bool> = (0..t_len).map(|t| tracks.visible(row, t)).collect();
        let segs: Vec<VisibleSegment> = visible_segments(&vis, 1, t_len)
            .into_iter()
            .map(|s| VisibleSegment { point: qi, ..s })
            .collect();
        if segs.is_empty() {
            return Err(InferError::EmptySegment(qi));
        }
        let mut scales = Vec::with_capacity(segs.len());
        for s in &segs {
            let mut mde_samples: Vec<f64> = (s.a..=s.b)
                .map(|t| {
                    let p = tracks.pos(row, t);
                    sample_bilinear(mde, t, p[0], p[1])
                })
                .collect();
            let mut ratio_vals: Vec<f64> =
                (s.a..=s.b).map(|t| ratios.ratio(qi, t) as f64).collect();
            let med_mde = median(&mut mde_samples);
            let med_ratio = median(&mut ratio_vals);
            if med_mde <= 0.0 || med_ratio <= 0.0 {
                return Err(InferError::NonPositiveMedian { point: qi, a: s.a, b: s.b });
            }
            scales.push(med_mde / med_ratio);
        }
        for t in 0..t_len {
            // Distance to each segment (0 inside); nearest wins, earlier on tie.
            let mut best = (usize::MAX, 0usize);
            for (si, s) in segs.iter().enumerate() {
                let dist = if t < s.a {
                    s.a - t
                } else if t > s.b {
                    t - s.b
                } else {
                    0
                };
                if dist < best.0 {
                    best = (dist, si);
                }
            }
            depths[qi * t_len + t] = scales[best.1] * ratios.ratio(qi, t) as f64;
        }
    }
    Ok(DepthTrack { n: ratios.n, t_len, depths })
}

/// Lifts pixel tracks with depths into camera-frame 3D points `[N * T * 3]`.
pub fn unproject(
    tracks: &TrackSet,
    rows: &[usize],
    depths: &DepthTrack,
    camera: &CameraModel,
) -> Result<Vec<f32>, InferError> {
    assert_eq!(rows.len(), depths.n);
    let t_len = depths.t_len;
    let mut out = Vec::with_capacity(rows.len() * t_len * 3);
    for (qi, &row) in rows.iter().enumerate() {
        for t in 0..t_len {
            let d = depths.depth(qi, t);
            if d <= 0.0 {
                return Err(InferError::NonPositiveDepth { point: qi, frame: t });
            }
            let p = tracks.pos(row, t);
            let v = crate::geometry::unproject_pixel64(camera, [p[0] as f64, p[1] as f64], d)
                .expect("depth checked positive");
            out.extend(v.iter().map(|&c| c as f32));
        }
    }
    Ok(out)
}

/// All-query helper: rows of every `Role::Query` track.
pub fn query_rows(tracks: &TrackSet) -> Vec<usize> {
    (0..tracks.n).filter(|&i| tracks.roles[i] == Role::Query).collect()
}

// ==== TESTS ====

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds::{self, Stream};
    use rand::Rng;

    #[test]
    fn window_start_examples() {
        assert_eq!(window_starts(8, 8, 4).unwrap(), vec![0]);
        assert_eq!(window_starts(24, 8, 4).unwrap(), vec![0, 4, 8, 12, 16]);
        // Uncovered tail: shifted final window ending at T-1.
        assert_eq!(window_starts(25, 8, 4).unwrap(), vec![0, 4, 8, 12, 16, 17]);
        assert_eq!(window_starts(26, 8, 4).unwrap(), vec![0, 4, 8, 12, 16, 18]);
        assert!(matches!(
            window_starts(6, 8, 4),
            Err(InferError::TooShortSequence { t: 6, w: 8 })
        ));
    }

    fn gt_logs(depths: &[f64], starts: &[usize], w: usize) -> WindowsOutput {
        let t_len = depths.len();
        let logs = starts
            .iter()
            .map(|&a| (0..w).map(|t| (depths[a + t] / depths[a]).ln() as f32).collect())
            .collect();
        WindowsOutput { starts: starts.to_vec(), logs, nq: 1, w, t_len }
    }

    #[test]
    fn accumulate_examples() {
        // Single window, logs [0, ln2, ln3] -> ratios [1, 2, 3].
        let out = WindowsOutput {
            starts: vec![0],
            logs: vec![vec![0.0, (2f32).ln(), (3f32).ln()]],
            nq: 1,
            w: 3,
            t_len: 3,
        };
        let r = accumulate(&out).unwrap();
        assert_eq!(r.ratio(0, 0), 1.0);
        assert!((r.ratio(0, 1) - 2.0).abs() < 1e-6);
        assert!((r.ratio(0, 2) - 3.0).abs() < 1e-6);

        // All-zero logs -> all ratios exactly 1.
        let out = WindowsOutput {
            starts: vec![0, 2],
            logs: vec![vec![0.0; 4], vec![0.0; 4]],
            nq: 1,
            w: 4,
            t_len: 6,
        };
        let r = accumulate(&out).unwrap();
        assert!(r.ratios.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn accumulate_telescopes_ground_truth() {
        // Random-walk depths, T=256: chained ratios reproduce d_t/d_0.
        let t_len = 256;
        let w = 8;
        let mut rng = seeds::rng(17, Stream::Scene, 3);
        let mut depths = vec![2.0f64];
        for _ in 1..t_len {
            let step: f64 = rng.random_range(0.95..1.05);
            depths.push(depths.last().unwrap() * step);
        }
        for stride in [1usize, 3, 4, 7] {
            let starts = window_starts(t_len, w, stride).unwrap();
            let out = gt_logs(&depths, &starts, w);
            let r = accumulate(&out).unwrap();
            assert_eq!(r.ratio(0, 0), 1.0);
            for t in 0..t_len {
                let want = depths[t] / depths[0];
                let got = r.ratio(0, t) as f64;
                let rel = (got - want).abs() / want;
                assert!(rel < 1e-6, "stride {stride} frame {t}: rel {rel}");
            }
        }
    }

    #[test]
    fn accumulate_rejects_gaps() {
        // Stride == window: chain cannot bridge anchor to the next window.
        let out = WindowsOutput {
            starts: vec![0, 4],
            logs: vec![vec![0.0; 4], vec![0.0; 4]],
            nq: 1,
            w: 4,
            t_len: 8,
        };
        assert!(matches!(accumulate(&out), Err(InferError::CoverageGap(4))));

        // Uncovered tail.
        let out = WindowsOutput {
            starts: vec![0],
            logs: vec![vec![0.0; 4]],
            nq: 1,
            w: 4,
            t_len: 6,
        };
        assert!(matches!(accumulate(&out), Err(InferError::CoverageGap(4))));
    }

    #[test]
    fn visible_segment_examples() {
        let segs = visible_segments(&[true, true, false, true], 1, 4);
        assert_eq!(
            segs,
            vec![
                VisibleSegment { point: 0, a: 0, b: 1 },
                VisibleSegment { point: 0, a: 3, b: 3 }
            ]
        );
        assert!(visible_segments(&[false; 5], 1, 5).is_empty());
        let segs = visible_segments(&[true; 10], 1, 10);
        assert_eq!(segs, vec![VisibleSegment { point: 0, a: 0, b: 9 }]);
    }

    fn flat_mde(t: usize, h: usize, w: usize, value: f32) -> DepthMapStack {
        DepthMapStack {
            t,
            h,
            w,
            camera: CameraModel::new(100.0, (w as f32 / 2.0, h as f32 / 2.0), (w as u32, h as u32))
                .unwrap(),
            data: vec![value; t * h * w],
        }
    }

    fn single_track(t_len: usize, pos: [f32; 2], vis: &[bool]) -> TrackSet {
        TrackSet {
            n: 1,
            t_len,
            positions: (0..t_len).flat_map(|_| pos).collect(),
            visibility: vis.to_vec(),
            camera: CameraModel::new(100.0, (32.0, 32.0), (64, 64)).unwrap(),
            roles: vec![Role::Query],
        }
    }

    #[test]
    fn scale_match_examples() {
        // Constant ratios 1, MDE constant 3 -> depth 3 everywhere.
        let t_len = 4;
        let tracks = single_track(t_len, [10.0, 10.0], &[true; 4]);
        let ratios = RatioTrack { n: 1, t_len, ratios: vec![1.0; 4] };
        let mde = flat_mde(t_len, 64, 64, 3.0);
        let d = scale_match(&ratios, &mde, &tracks, &[0]).unwrap();
        for t in 0..t_len {
            assert!((d.depth(0, t) - 3.0).abs() < 1e-9);
        }

        // Segment MDE samples [4,5,6,7], ratios [1,1,2,2] -> s = 5.5/1.5.
        let tracks = single_track(4, [10.0, 10.0], &[true; 4]);
        let mut mde = flat_mde(4, 64, 64, 0.0);
        for (t, v) in [4.0f32, 5.0, 6.0, 7.0].iter().enumerate() {
            for p in mde.data[t * 64 * 64..(t + 1) * 64 * 64].iter_mut() {
                *p = *v;
            }
        }
        let ratios = RatioTrack { n: 1, t_len: 4, ratios: vec![1.0, 1.0, 2.0, 2.0] };
        let d = scale_match(&ratios, &mde, &tracks, &[0]).unwrap();
        let s = 5.5 / 1.5;
        for t in 0..4 {
            let want = s * ratios.ratio(0, t) as f64;
            assert!((d.depth(0, t) - want).abs() < 1e-9, "frame {t}");
        }
    }

    #[test]
    fn scale_match_occluded_gap_uses_nearest_segment() {
        // Visible [0,1], occluded [2,3,4], visible [5,6]; distinct plateaus.
        let t_len = 7;
        let vis = [true, true, false, false, false, true, true];
        let tracks = single_track(t_len, [10.0, 10.0], &vis);
        let mut mde = flat_mde(t_len, 64, 64, 2.0);
        for t in 5..7 {
            for p in mde.data[t * 64 * 64..(t + 1) * 64 * 64].iter_mut() {
                *p = 8.0;
            }
        }
        let ratios = RatioTrack { n: 1, t_len, ratios: vec![1.0; 7] };
        let d = scale_match(&ratios, &mde, &tracks, &[0]).unwrap();
        assert_eq!(d.depth(0, 2), 2.0); // distance 1 to seg A, 3 to seg B
        assert_eq!(d.depth(0, 3), 2.0); // tie (2 vs 2): earlier segment
        assert_eq!(d.depth(0, 4), 8.0); // distance 3 vs 1: later segment
    }

    #[test]
    fn scale_match_median_alignment_invariant() {
        // After matching, median depth over a segment = median MDE sample.
        let t_len = 5;
        let tracks = single_track(t_len, [20.0, 30.0], &[true; 5]);
        let mut mde = flat_mde(t_len, 64, 64, 1.0);
        for (t, v) in [2.0f32, 4.0, 3.0, 5.0, 6.0].iter().enumerate() {
            for p in mde.data[t * 64 * 64..(t + 1) * 64 * 64].iter_mut() {
                *p = *v;
            }
        }
        let ratios = RatioTrack { n: 1, t_len, ratios: vec![1.0, 1.2, 0.9, 1.4, 1.6] };
        let d = scale_match(&ratios, &mde, &tracks, &[0]).unwrap();
        let mut ds: Vec<f64> = (0..t_len).map(|t| d.depth(0, t)).collect();
        let mut ms: Vec<f64> = vec![2.0, 4.0, 3.0, 5.0, 6.0];
        assert!((median(&mut ds) - median(&mut ms)).abs() < 1e-12);
        // Temporal ratios preserved exactly within the segment.
        for t in 1..t_len {
            let want = ratios.ratio(0, t) as f64 / ratios.ratio(0, 0) as f64;
            assert!((d.depth(0, t) / d.depth(0, 0) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_interpolates_and_clamps() {
        let mut mde = flat_mde(1, 2, 2, 0.0);
        mde.data.copy_from_slice(&[1.0, 2.0, 3.0, 4.0]); // rows: [1,2] / [3,4]
        assert!((sample_bilinear(&mde, 0, 0.5, 0.0) - 1.5).abs() < 1e-12);
        assert!((sample_bilinear(&mde, 0, 0.0, 0.5) - 2.0).abs() < 1e-12);
        assert!((sample_bilinear(&mde, 0, 0.5, 0.5) - 2.5).abs() < 1e-12);
        // Outside the border: clamped.
        assert!((sample_bilinear(&mde, 0, -5.0, -5.0) - 1.0).abs() < 1e-12);
        assert!((sample_bilinear(&mde, 0, 9.0, 9.0) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn unproject_examples() {
        let cam = CameraModel::new(100.0, (0.0, 0.0), (256, 256)).unwrap();
        let tracks = TrackSet {
            n: 2,
            t_len: 1,
            positions: vec![0.0, 0.0, 50.0, 0.0],
            visibility: vec![true, true],
            camera: cam.clone(),
            roles: vec![Role::Query, Role::Query],
        };
        let depths = DepthTrack { n: 2, t_len: 1, depths: vec![5.0, 2.0] };
        let p = unproject(&tracks, &[0, 1], &depths, &cam).unwrap();
        assert_eq!(&p[0..3], &[0.0, 0.0, 5.0]); // principal point, d = 5
        assert_eq!(&p[3..6], &[1.0, 0.0, 2.0]); // f=100, pixel (50,0), d=2

        let bad = DepthTrack { n: 2, t_len: 1, depths: vec![5.0, -1.0] };
        assert!(matches!(
            unproject(&tracks, &[0, 1], &bad, &cam),
            Err(InferError::NonPositiveDepth { point: 1, frame: 0 })
        ));
    }

    #[test]
    fn unproject_roundtrips_projection() {
        let cam = CameraModel::new(256.0, (128.0, 128.0), (256, 256)).unwrap();
        let mut rng = seeds::rng(23, Stream::Scene, 9);
        for _ in 0..50 {
            let px = rng.random_range(1.0f64..255.0);
            let py = rng.random_range(1.0f64..255.0);
            let d = rng.random_range(0.5f64..30.0);
            let p3 = crate::geometry::unproject_pixel64(&cam, [px, py], d).unwrap();
            let [u, v] = crate::geometry::project_point64(&cam, p3).unwrap();
            assert!((u - px).abs() < 1e-5 && (v - py).abs() < 1e-5);
        }
    }

    #[test]
    fn zero_model_gives_unit_ratios_end_to_end() {
        let spec = crate::synth::SceneSpec {
            num_bodies: 2,
            points_per_body: 16,
            frames: 10,
            rng_seed: 77,
            ..crate::synth::SceneSpec::default()
        };
        let (tracks, _depths) = crate::synth::generate_scene(&spec).unwrap();
        let cfg = ModelConfig {
            layers: 1,
            hidden_dim: 16,
            heads: 2,
            window: 4,
            refine_iters: 1,
            support_grid: (2, 2),
        };
        let params = model::init_params(&cfg, 5);
        let rows: Vec<usize> = (0..4).collect();
        let out = run_windows(&params, &cfg, &tracks, &rows, 2).unwrap();
        assert_eq!(out.starts, vec![0, 2, 4, 6]);
        let r = accumulate(&out).unwrap();
        // Zero-initialized heads predict zero logs: every ratio is exactly 1.
        assert!(r.ratios.iter().all(|&v| v == 1.0));
    }
}
