//! Hand-crafted density-ratio baseline: Gaussian kernel density over
//! neighbors fixed in the first frame, converted to a depth ratio under a
//! fronto-parallel assumption (normal terms set to 1). No learning, no
//! randomness; its blindness to surface orientation is the point.

use rayon::prelude::*;

use crate::infer::{self, InferError, RatioTrack, WindowsOutput};
use crate::synth::{SynthError, TrackSet};

#[derive(Debug, thiserror::Error)]
pub enum BaselineError {
    #[error("need at least {needed} points visible in frame 0, found {visible}")]
    TooFewPoints { needed: usize, visible: usize },
    #[error("point {point} has no visible neighbor at frame {frame}")]
    AllNeighborsOccluded { point: usize, frame: usize },
    #[error("zero bandwidth for point {point} at frame {frame} (visible neighbors coincide)")]
    ZeroBandwidth { point: usize, frame: usize },
    #[error("density underflowed to zero for point {point} at frame {frame}")]
    NonPositiveDensity { point: usize, frame: usize },
    #[error("k must be at least 2, got {0}")]
    BadNeighborCount(usize),
    #[error("bandwidth must be positive, got {0}")]
    BadBandwidth(f32),
    #[error(transparent)]
    Infer(#[from] InferError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

// ==== CONFIG ====

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct KdeConfig {
    /// Neighbors fixed per point in frame 0.
    pub k: usize,
    /// Fixed kernel bandwidth in pixels; `None` uses the per-point,
    /// per-frame median visible-neighbor distance, which keeps the density
    /// scale-free (an isotropic rescale of the neighborhood by 1/c changes
    /// the density by exactly c^2).
    pub bandwidth: Option<f32>,
    /// Frames per reported window; matches the inference module.
    pub window: usize,
    /// Window stride; must stay below `window` so windows chain.
    pub stride: usize,
}

impl Default for KdeConfig {
    fn default() -> Self {
        KdeConfig { k: 16, bandwidth: None, window: 8, stride: 4 }
    }
}

impl KdeConfig {
    pub fn validate(&self) -> Result<(), BaselineError> {
        if self.k < 2 {
            return Err(BaselineError::BadNeighborCount(self.k));
        }
        if let Some(bw) = self.bandwidth {
            if !(bw > 0.0) {
                return Err(BaselineError::BadBandwidth(bw));
            }
        }
        Ok(())
    }
}

// ==== NEIGHBORS ====

fn dist2(a: [f32; 2], b: [f32; 2]) -> f64 {
    let dx = a[0] as f64 - b[0] as f64;
    let dy = a[1] as f64 - b[1] as f64;
    dx * dx + dy * dy
}

/// Euclidean kNN table `[n * k]` on frame-0 positions. Candidates are the
/// points visible in frame 0; self is excluded; ties break on index.
pub fn fixed_neighbors(tracks: &TrackSet, k: usize) -> Result<Vec<usize>, BaselineError> {
    if k < 2 {
        return Err(BaselineError::BadNeighborCount(k));
    }
    let candidates: Vec<usize> = (0..tracks.n).filter(|&i| tracks.visible(i, 0)).collect();
    if candidates.len() < k + 1 {
        return Err(BaselineError::TooFewPoints { needed: k + 1, visible: candidates.len() });
    }
    let mut table = vec![0usize; tracks.n * k];
    table
        .par_chunks_mut(k)
        .enumerate()
        .for_each(|(i, row)| {
            let p = tracks.pos(i, 0);
            let mut ranked: Vec<(f64, usize)> = candidates
                .iter()
                .filter(|&&j| j != i)
                .map(|&j| (dist2(p, tracks.pos(j, 0)), j))
                .collect();
            ranked.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
            for (slot, &(_, j)) in row.iter_mut().zip(ranked.iter().take(k)) {
                *slot = j;
            }
        });
    Ok(table)
}

// ==== DENSITY ====

/// Gaussian kernel mean over the point's neighbors at one frame:
/// `(1/m) * sum_j exp(-||p_i - p_j||^2 / (2 bw^2))` where the sum runs over
/// the m neighbors visible at `t` (occluded neighbors are dropped and the
/// mean renormalized, not imputed).
pub fn kde_density(
    tracks: &TrackSet,
    i: usize,
    t: usize,
    neighbors: &[usize],
    bandwidth: f32,
) -> Result<f32, BaselineError> {
    if !(bandwidth > 0.0) {
        return Err(BaselineError::BadBandwidth(bandwidth));
    }
    let p = tracks.pos(i, t);
    let inv = 1.0 / (2.0 * bandwidth as f64 * bandwidth as f64);
    let mut sum = 0.0f64;
    let mut m = 0usize;
    for &j in neighbors {
        if tracks.visible(j, t) {
            sum += (-dist2(p, tracks.pos(j, t)) * inv).exp();
            m += 1;
        }
    }
    if m == 0 {
        return Err(BaselineError::AllNeighborsOccluded { point: i, frame: t });
    }
    Ok((sum / m as f64) as f32)
}

/// Median distance from point `i` to its visible neighbors at frame `t`.
fn median_neighbor_distance(tracks: &TrackSet, i: usize, t: usize, neighbors: &[usize]) -> Option<f64> {
    let p = tracks.pos(i, t);
    let mut dists: Vec<f64> = neighbors
        .iter()
        .filter(|&&j| tracks.visible(j, t))
        .map(|&j| dist2(p, tracks.pos(j, t)).sqrt())
        .collect();
    if dists.is_empty() {
        None
    } else {
        Some(infer::median(&mut dists))
    }
}

/// Scale-aware density: kernel mean divided by bandwidth squared, with the
/// bandwidth either fixed by config or the per-frame median neighbor
/// distance. The 1/bw^2 factor is what makes a 1/c neighborhood rescale
/// read as a c^2 density change.
pub fn point_density(
    tracks: &TrackSet,
    i: usize,
    t: usize,
    neighbors: &[usize],
    cfg: &KdeConfig,
) -> Result<f64, BaselineError> {
    let bw = match cfg.bandwidth {
        Some(b) => b as f64,
        None => median_neighbor_distance(tracks, i, t, neighbors)
            .ok_or(BaselineError::AllNeighborsOccluded { point: i, frame: t })?,
    };
    if !(bw > 0.0) {
        return Err(BaselineError::ZeroBandwidth { point: i, frame: t });
    }
    let mean = kde_density(tracks, i, t, neighbors, bw as f32)? as f64;
    let rho = mean / (bw * bw);
    if !(rho > 0.0) {
        return Err(BaselineError::NonPositiveDensity { point: i, frame: t });
    }
    Ok(rho)
}

// ==== RATIOS ====

/// Depth ratios `r_{i,t} = sqrt(rho_{i,t} / rho_{i,0})` for every point,
/// produced as per-window log ratios and chained through the same
/// accumulation as model inference (the chain telescopes, so the result
/// equals the direct formula up to f32 rounding of the window logs).
/// Frames where every neighbor is occluded hold the last computable
/// density, freezing the ratio the same way masking freezes positions;
/// frame 0 cannot hit this because fixed neighbors are visible there.
pub fn baseline_ratio(tracks: &TrackSet, cfg: &KdeConfig) -> Result<RatioTrack, BaselineError> {
    cfg.validate()?;
    let masked = crate::synth::mask_occluded_positions(tracks)?;
    let neighbors = fixed_neighbors(&masked, cfg.k)?;
    let (n, t_len) = (masked.n, masked.t_len);

    // log_rho rows, parallel over points, sequential over frames so an
    // occlusion gap can carry the previous value forward.
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let nb = &neighbors[i * cfg.k..(i + 1) * cfg.k];
            let mut row = Vec::with_capacity(t_len);
            for t in 0..t_len {
                match point_density(&masked, i, t, nb, cfg) {
                    Ok(rho) => row.push(rho.ln()),
                    Err(BaselineError::AllNeighborsOccluded { .. }) if t > 0 => {
                        row.push(row[t - 1])
                    }
                    Err(e) => return Err(e),
                }
            }
            Ok(row)
        })
        .collect::<Result<_, _>>()?;
    let log_rho: Vec<f64> = rows.into_iter().flatten().collect();

    let starts = infer::window_starts(t_len, cfg.window, cfg.stride)?;
    let logs = starts
        .iter()
        .map(|&a| {
            let mut win = Vec::with_capacity(n * cfg.window);
            for i in 0..n {
                let base = log_rho[i * t_len + a];
                for t in 0..cfg.window {
                    win.push((0.5 * (log_rho[i * t_len + a + t] - base)) as f32);
                }
            }
            win
        })
        .collect();
    let out = WindowsOutput { starts, logs, nq: n, w: cfg.window, t_len };
    Ok(infer::accumulate(&out)?)
}

// ==== TESTS ====

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project_point64, CameraModel};
    use crate::seeds::{self, Stream};
    use crate::synth::Role;
    use rand::Rng;

    fn track_set(t_len: usize, positions: Vec<f32>, visibility: Vec<bool>) -> TrackSet {
        let n = positions.len() / (t_len * 2);
        assert_eq!(visibility.len(), n * t_len);
        TrackSet {
            n,
            t_len,
            positions,
            visibility,
            camera: CameraModel::new(128.0, (64.0, 64.0), (128, 128)).unwrap(),
            roles: vec![Role::Query; n],
        }
    }

    fn static_track_set(points: &[[f32; 2]], t_len: usize) -> TrackSet {
        let mut positions = Vec::new();
        for p in points {
            for _ in 0..t_len {
                positions.extend_from_slice(p);
            }
        }
        track_set(t_len, positions, vec![true; points.len() * t_len])
    }

    #[test]
    fn knn_examples() {
        // Collinear x = 0, 1, 3: middle point's single neighbor is the
        // closer endpoint. k = 2 satisfies the k >= 2 invariant; the first
        // column is the k = 1 answer.
        let pts = [[0.0, 0.0], [1.0, 0.0], [3.0, 0.0]];
        let tracks = static_track_set(&pts, 1);
        let table = fixed_neighbors(&tracks, 2).unwrap();
        assert_eq!(table[2], 0); // middle point, nearest first

        // 5x5 unit grid: the interior point's 4 nearest are its lattice
        // neighbors (the k >= 2 guard keeps k = 4 valid here).
        let mut pts = Vec::new();
        for y in 0..5 {
            for x in 0..5 {
                pts.push([x as f32, y as f32]);
            }
        }
        let tracks = static_track_set(&pts, 1);
        let table = fixed_neighbors(&tracks, 4).unwrap();
        let center = 2 * 5 + 2;
        let mut got: Vec<usize> = table[center * 4..center * 4 + 4].to_vec();
        got.sort_unstable();
        assert_eq!(got, vec![center - 5, center - 1, center + 1, center + 5]);
    }

    #[test]
    fn knn_matches_bruteforce_oracle() {
        let mut rng = seeds::rng(41, Stream::Scene, 0);
        let pts: Vec<[f32; 2]> = (0..50)
            .map(|_| [rng.random_range(0.0..128.0), rng.random_range(0.0..128.0)])
            .collect();
        let tracks = static_track_set(&pts, 1);
        let k = 7;
        let table = fixed_neighbors(&tracks, k).unwrap();
        // Oracle: repeated min extraction over all pairwise distances.
        for i in 0..pts.len() {
            let mut pool: Vec<usize> = (0..pts.len()).filter(|&j| j != i).collect();
            for slot in 0..k {
                let best = *pool
                    .iter()
                    .min_by(|&&a, &&b| {
                        (dist2(pts[i], pts[a]), a)
                            .partial_cmp(&(dist2(pts[i], pts[b]), b))
                            .unwrap()
                    })
                    .unwrap();
                assert_eq!(table[i * k + slot], best, "point {i} slot {slot}");
                pool.retain(|&j| j != best);
            }
        }
    }

    #[test]
    fn knn_rejects_too_few_points() {
        let tracks = static_track_set(&[[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]], 1);
        assert!(matches!(
            fixed_neighbors(&tracks, 3),
            Err(BaselineError::TooFewPoints { needed: 4, visible: 3 })
        ));
        assert!(matches!(fixed_neighbors(&tracks, 1), Err(BaselineError::BadNeighborCount(1))));
    }

    #[test]
    fn kde_density_examples() {
        // All neighbors coincident with the point: density exactly 1.
        let tracks = static_track_set(&[[5.0, 5.0], [5.0, 5.0], [5.0, 5.0]], 1);
        let d = kde_density(&tracks, 0, 0, &[1, 2], 2.0).unwrap();
        assert_eq!(d, 1.0);

        // All neighbors at distance = bandwidth: each contributes exp(-0.5).
        let tracks = static_track_set(&[[0.0, 0.0], [2.0, 0.0], [0.0, 2.0]], 1);
        let d = kde_density(&tracks, 0, 0, &[1, 2], 2.0).unwrap();
        assert!((d as f64 - (-0.5f64).exp()).abs() < 1e-6);

        // Occluded neighbor dropped with renormalization: the far neighbor
        // is invisible, so only the coincident one counts.
        let tracks = track_set(
            1,
            vec![0.0, 0.0, 0.0, 0.0, 50.0, 50.0],
            vec![true, true, false],
        );
        let d = kde_density(&tracks, 0, 0, &[1, 2], 2.0).unwrap();
        assert_eq!(d, 1.0);

        // Every neighbor occluded: error.
        let tracks = track_set(1, vec![0.0, 0.0, 1.0, 0.0], vec![true, false]);
        assert!(matches!(
            kde_density(&tracks, 0, 0, &[1], 2.0),
            Err(BaselineError::AllNeighborsOccluded { point: 0, frame: 0 })
        ));
    }

    #[test]
    fn kde_density_matches_scalar_oracle() {
        let mut rng = seeds::rng(42, Stream::Scene, 1);
        let pts: Vec<[f32; 2]> = (0..30)
            .map(|_| [rng.random_range(0.0..128.0), rng.random_range(0.0..128.0)])
            .collect();
        let tracks = static_track_set(&pts, 1);
        let neighbors: Vec<usize> = (1..11).collect();
        for _ in 0..10 {
            let bw: f32 = rng.random_range(0.5..20.0);
            let got = kde_density(&tracks, 0, 0, &neighbors, bw).unwrap() as f64;
            // Independent scalar form: accumulate per-axis deltas directly.
            let mut acc = 0.0f64;
            for &j in &neighbors {
                let dx = (pts[j][0] - pts[0][0]) as f64;
                let dy = (pts[j][1] - pts[0][1]) as f64;
                let r2 = dx.powi(2) + dy.powi(2);
                acc += (-r2 / (2.0 * (bw as f64).powi(2))).exp();
            }
            let want = acc / neighbors.len() as f64;
            assert!((got - want).abs() < 1e-6, "bw {bw}: {got} vs {want}");
        }
    }

    #[test]
    fn occlusion_gap_freezes_ratio() {
        // Point 0's two neighbors contract toward it but disappear during
        // frames 2-3; its ratio holds the last computed value through the
        // gap and resumes at frame 4.
        let t_len = 5;
        let mut positions = Vec::new();
        let mut visibility = Vec::new();
        let traj = |f: &dyn Fn(usize) -> [f32; 2], vis: [bool; 5],
                    positions: &mut Vec<f32>, visibility: &mut Vec<bool>| {
            for t in 0..t_len {
                positions.extend_from_slice(&f(t));
                visibility.push(vis[t]);
            }
        };
        let shrink = |t: usize| 2.0 * 0.8f32.powi(t as i32);
        traj(&|_| [10.0, 10.0], [true; 5], &mut positions, &mut visibility);
        traj(&|t| [10.0 + shrink(t), 10.0], [true, true, false, false, true], &mut positions, &mut visibility);
        traj(&|t| [10.0, 10.0 + shrink(t)], [true, true, false, false, true], &mut positions, &mut visibility);
        traj(&|_| [100.0, 100.0], [true; 5], &mut positions, &mut visibility);
        let tracks = track_set(t_len, positions, visibility);

        let cfg = KdeConfig { k: 2, window: 4, stride: 2, ..KdeConfig::default() };
        let r = baseline_ratio(&tracks, &cfg).unwrap();
        assert!(r.ratio(0, 1) > 1.0); // neighbors contracted: point receded
        assert_eq!(r.ratio(0, 2), r.ratio(0, 1));
        assert_eq!(r.ratio(0, 3), r.ratio(0, 1));
        assert!(r.ratio(0, 4) > r.ratio(0, 3)); // recession resumes
    }

    #[test]
    fn static_scene_ratio_is_one() {
        let mut rng = seeds::rng(43, Stream::Scene, 2);
        let pts: Vec<[f32; 2]> = (0..20)
            .map(|_| [rng.random_range(10.0..118.0), rng.random_range(10.0..118.0)])
            .collect();
        let tracks = static_track_set(&pts, 12);
        let cfg = KdeConfig { k: 6, ..KdeConfig::default() };
        let r = baseline_ratio(&tracks, &cfg).unwrap();
        for i in 0..r.n {
            assert_eq!(r.ratio(i, 0), 1.0); // exact at the anchor
            for t in 0..r.t_len {
                assert!((r.ratio(i, t) - 1.0).abs() <= 1e-6, "point {i} frame {t}");
            }
        }
    }

    /// Fronto-parallel square patch receding from depth 4 m to 8 m.
    fn receding_patch(t_len: usize) -> TrackSet {
        let cam = CameraModel::new(128.0, (64.0, 64.0), (128, 128)).unwrap();
        let mut points_3d = Vec::new();
        for gy in 0..6 {
            for gx in 0..6 {
                points_3d.push((gx as f64 * 0.3 - 0.75, gy as f64 * 0.3 - 0.75));
            }
        }
        let n = points_3d.len();
        let mut positions = vec![0f32; n * t_len * 2];
        for (i, &(x, y)) in points_3d.iter().enumerate() {
            for t in 0..t_len {
                let d = 4.0 * (1.0 + t as f64 / (t_len - 1) as f64);
                let p = project_point64(&cam, [x, y, d]).unwrap();
                positions[(i * t_len + t) * 2] = p[0] as f32;
                positions[(i * t_len + t) * 2 + 1] = p[1] as f32;
            }
        }
        TrackSet {
            n,
            t_len,
            positions,
            visibility: vec![true; n * t_len],
            camera: cam,
            roles: vec![Role::Query; n],
        }
    }

    #[test]
    fn receding_patch_ratio_ends_near_two() {
        let tracks = receding_patch(12);
        let cfg = KdeConfig { k: 8, ..KdeConfig::default() };
        let r = baseline_ratio(&tracks, &cfg).unwrap();
        for i in 0..r.n {
            let end = r.ratio(i, r.t_len - 1);
            assert!((end - 2.0).abs() <= 0.2, "point {i}: {end}");
        }
    }

    #[test]
    fn isotropic_scaling_changes_density_by_c_squared() {
        // Frame 1 = frame 0 with every neighbor offset from point 0 shrunk
        // by 1/c. Adaptive bandwidth makes the density ratio exactly c^2.
        let mut rng = seeds::rng(44, Stream::Scene, 3);
        let c = 2.0f64;
        let center = [64.0f32, 64.0f32];
        let n = 12;
        let t_len = 8;
        let mut positions = vec![0f32; n * t_len * 2];
        let mut offsets = vec![[0.0f64; 2]];
        for _ in 1..n {
            offsets.push([rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0)]);
        }
        for (i, off) in offsets.iter().enumerate() {
            for t in 0..t_len {
                let s = if t == 0 { 1.0 } else { 1.0 / c };
                positions[(i * t_len + t) * 2] = (center[0] as f64 + off[0] * s) as f32;
                positions[(i * t_len + t) * 2 + 1] = (center[1] as f64 + off[1] * s) as f32;
            }
        }
        let tracks = track_set(t_len, positions, vec![true; n * t_len]);
        let cfg = KdeConfig { k: 6, ..KdeConfig::default() };
        let neighbors = fixed_neighbors(&tracks, cfg.k).unwrap();
        let rho0 = point_density(&tracks, 0, 0, &neighbors[0..cfg.k], &cfg).unwrap();
        let rho1 = point_density(&tracks, 0, 1, &neighbors[0..cfg.k], &cfg).unwrap();
        let ratio = rho1 / rho0;
        assert!((ratio - c * c).abs() / (c * c) < 1e-3, "density ratio {ratio}");

        // Depth ratio through the full pipeline: sqrt(c^2) = c.
        let r = baseline_ratio(&tracks, &cfg).unwrap();
        assert!((r.ratio(0, t_len - 1) as f64 - c).abs() / c < 1e-3);

        // Fixed bandwidth breaks the scale-free property, by design.
        let fixed = KdeConfig { k: 6, bandwidth: Some(10.0), ..KdeConfig::default() };
        let f0 = point_density(&tracks, 0, 0, &neighbors[0..cfg.k], &fixed).unwrap();
        let f1 = point_density(&tracks, 0, 1, &neighbors[0..cfg.k], &fixed).unwrap();
        assert!(((f1 / f0) - c * c).abs() / (c * c) > 1e-2);
    }

    #[test]
    fn baseline_is_deterministic() {
        let spec = crate::synth::SceneSpec { rng_seed: 7, ..crate::synth::SceneSpec::default() };
        let (tracks, _) = crate::synth::generate_scene(&spec).unwrap();
        let cfg = KdeConfig::default();
        let a = baseline_ratio(&tracks, &cfg).unwrap();
        let b = baseline_ratio(&tracks, &cfg).unwrap();
        assert_eq!(a.ratios, b.ratios); // bit-identical
    }
}
