//! Synthetic rigid-body scenes: the analytic stand-in for a rendered training
//! source. Bodies (planar patches and ellipsoidal shells) carry surface point
//! clouds, move with constant-velocity translation and constant-rate rotation
//! (optionally jittered), and project through the pinhole camera. Occlusion
//! comes from camera-facing disks and frustum exits.
//!
//! Ground-truth depth is the camera-frame z coordinate and exists even while
//! a point is occluded. Stored positions may carry additive Gaussian pixel
//! noise; visibility is always decided on the noise-free projection.

use crate::geometry::{project_point64, CameraModel};
use crate::seeds::{self, Stream};
use rand::seq::index::sample as index_sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SynthError {
    #[error("sequence too short: need at least 2 frames, got {0}")]
    TooShortSequence(usize),
    #[error("depth range ({0}, {1}) must satisfy 0.1 < min < max < 100")]
    InvalidDepthRange(f32, f32),
    #[error("bodies and points-per-body counts must be at least 1")]
    ZeroCounts,
    #[error("degenerate scene: body {0} is never visible in any frame")]
    DegenerateScene(usize),
    #[error("point {0} is never visible")]
    NeverVisible(usize),
    #[error("support grid {rows}x{cols} does not fit a {width}x{height} image")]
    GridTooLarge { rows: usize, cols: usize, width: u32, height: u32 },
    #[error("requested {requested} query points but only {available} tracks exist")]
    TooFewPoints { requested: usize, available: usize },
}

/// Per-point role marker: queries are the points whose depth is requested,
/// support points form the uniform context grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Query,
    Support,
}

/// Tracked 2D trajectories with per-frame visibility.
/// Layout: `positions[(i * t_len + t) * 2 + xy]`, `visibility[i * t_len + t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackSet {
    pub n: usize,
    pub t_len: usize,
    pub positions: Vec<f32>,
    pub visibility: Vec<bool>,
    pub camera: CameraModel,
    pub roles: Vec<Role>,
}

impl TrackSet {
    pub fn pos(&self, i: usize, t: usize) -> [f32; 2] {
        let k = (i * self.t_len + t) * 2;
        [self.positions[k], self.positions[k + 1]]
    }

    pub fn set_pos(&mut self, i: usize, t: usize, p: [f32; 2]) {
        let k = (i * self.t_len + t) * 2;
        self.positions[k] = p[0];
        self.positions[k + 1] = p[1];
    }

    pub fn visible(&self, i: usize, t: usize) -> bool {
        self.visibility[i * self.t_len + t]
    }

    /// Checks the structural invariants: every point visible at least once,
    /// positions finite wherever visible.
    pub fn validate(&self) -> Result<(), SynthError> {
        for i in 0..self.n {
            let mut any = false;
            for t in 0..self.t_len {
                if self.visible(i, t) {
                    any = true;
                    let p = self.pos(i, t);
                    if !p[0].is_finite() || !p[1].is_finite() {
                        return Err(SynthError::NeverVisible(i));
                    }
                }
            }
            if !any {
                return Err(SynthError::NeverVisible(i));
            }
        }
        Ok(())
    }
}

/// Ground-truth metric depths aligned with a [`TrackSet`]. Held in f64 so the
/// log-ratio targets downstream are immune to the precision of external
/// scale factors; serialized as f32.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthTrack {
    pub n: usize,
    pub t_len: usize,
    pub depths: Vec<f64>,
}

impl DepthTrack {
    pub fn depth(&self, i: usize, t: usize) -> f64 {
        self.depths[i * self.t_len + t]
    }

    /// Row-gathers depths to follow a track reindexing (see
    /// [`split_query_support`]).
    pub fn reindex(&self, source_index: &[usize]) -> DepthTrack {
        let mut depths = Vec::with_capacity(source_index.len() * self.t_len);
        for &src in source_index {
            depths.extend_from_slice(&self.depths[src * self.t_len..(src + 1) * self.t_len]);
        }
        DepthTrack { n: source_index.len(), t_len: self.t_len, depths }
    }
}

// ==== SCENE SPECIFICATION ====

/// Which body shapes the sampler may draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BodyKindMix {
    Mixed,
    PlanarOnly,
    EllipsoidOnly,
}

/// Sampling ranges for a random scene. All randomness derives from
/// `rng_seed`; identical specs produce bit-identical scenes.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub num_bodies: usize,
    pub points_per_body: usize,
    pub frames: usize,
    pub camera: CameraModel,
    /// Max per-axis translation velocity, m/frame.
    pub translation_range: f32,
    /// Max rotation rate, rad/frame.
    pub rotation_range: f32,
    /// Depth band (min, max) in meters that body centers stay inside.
    pub depth_range: (f32, f32),
    /// Max initial tilt of planar normals away from the optical axis, rad.
    pub tilt_range: f32,
    pub body_kinds: BodyKindMix,
    /// Target fraction of image area covered by occluder disks.
    pub occluder_density: f32,
    /// Additive Gaussian noise on stored positions, pixels.
    pub pixel_noise_sigma: f32,
    pub rng_seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.frames < 2 {
            return Err(SynthError::TooShortSequence(self.frames));
        }
        let (lo, hi) = self.depth_range;
        if !(lo > 0.1 && hi > lo && hi < 100.0) {
            return Err(SynthError::InvalidDepthRange(lo, hi));
        }
        if self.num_bodies < 1 || self.points_per_body < 1 {
            return Err(SynthError::ZeroCounts);
        }
        self.camera.validate().map_err(|_| SynthError::ZeroCounts)?;
        Ok(())
    }

    /// Fronto-parallel planar scenes with no rotation: the regime where the
    /// density law is exact.
    pub fn fronto_parallel(rng_seed: u64) -> Self {
        SceneSpec {
            rotation_range: 0.0,
            tilt_range: 0.0,
            body_kinds: BodyKindMix::PlanarOnly,
            occluder_density: 0.0,
            pixel_noise_sigma: 0.0,
            rng_seed,
            ..SceneSpec::default()
        }
    }
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            num_bodies: 3,
            points_per_body: 64,
            frames: 24,
            camera: CameraModel {
                focal_px: 256.0,
                principal_point: (128.0, 128.0),
                image_size: (256, 256),
            },
            translation_range: 0.06,
            rotation_range: 0.03,
            depth_range: (2.0, 8.0),
            tilt_range: 0.8,
            body_kinds: BodyKindMix::Mixed,
            occluder_density: 0.1,
            pixel_noise_sigma: 0.5,
            rng_seed: 0,
        }
    }
}

// ==== BODIES AND SIMULATION ====

#[derive(Debug, Clone, PartialEq)]
pub enum BodyShape {
    /// Rectangular patch spanning `[-half_u, half_u] x [-half_v, half_v]` in
    /// its tangent plane; the normal starts tilted by `tilt` toward azimuth.
    Planar { half_u: f64, half_v: f64, tilt: f64, azimuth: f64 },
    /// Ellipsoidal shell; points sampled on the unit sphere then scaled
    /// (approximately uniform for mild eccentricity).
    Ellipsoid { semi: [f64; 3] },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BodySpec {
    pub shape: BodyShape,
    /// Center position at frame 0, camera frame, meters.
    pub center: [f64; 3],
    /// Constant translation velocity, m/frame.
    pub velocity: [f64; 3],
    /// Unit rotation axis.
    pub rot_axis: [f64; 3],
    /// Rotation rate, rad/frame.
    pub rot_rate: f64,
    /// Std-dev of per-frame angular-increment jitter, rad.
    pub rot_jitter: f64,
    pub points: usize,
}

/// A camera-facing occluding disk, parameterized in image space plus depth:
/// it hides any point projecting inside the circle whose depth exceeds
/// `depth_m`.
#[derive(Debug, Clone, PartialEq)]
pub struct Occluder {
    pub center_px: [f64; 2],
    pub radius_px: f64,
    pub depth_m: f64,
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = dot(v, v).sqrt();
    if n == 0.0 {
        return [0.0, 0.0, 1.0];
    }
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Rodrigues rotation of `v` around unit `axis` by `angle`.
fn rotate(v: [f64; 3], axis: [f64; 3], angle: f64) -> [f64; 3] {
    let (s, c) = angle.sin_cos();
    let k = axis;
    let kxv = cross(k, v);
    let kdv = dot(k, v);
    [
        v[0] * c + kxv[0] * s + k[0] * kdv * (1.0 - c),
        v[1] * c + kxv[1] * s + k[1] * kdv * (1.0 - c),
        v[2] * c + kxv[2] * s + k[2] * kdv * (1.0 - c),
    ]
}

fn sample_local_points(shape: &BodyShape, count: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let mut pts = Vec::with_capacity(count);
    match shape {
        BodyShape::Planar { half_u, half_v, tilt, azimuth } => {
            // Tangent basis of a plane whose normal is the z axis tilted by
            // `tilt` toward `azimuth`.
            let tilt_axis = [-azimuth.sin(), azimuth.cos(), 0.0];
            let e1 = rotate([1.0, 0.0, 0.0], tilt_axis, *tilt);
            let e2 = rotate([0.0, 1.0, 0.0], tilt_axis, *tilt);
            for _ in 0..count {
                let u = rng.random_range(-half_u..=*half_u);
                let v = rng.random_range(-half_v..=*half_v);
                pts.push([
                    u * e1[0] + v * e2[0],
                    u * e1[1] + v * e2[1],
                    u * e1[2] + v * e2[2],
                ]);
            }
        }
        BodyShape::Ellipsoid { semi } => {
            for _ in 0..count {
                let g: [f64; 3] = [
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                ];
                let u = normalize(g);
                pts.push([u[0] * semi[0], u[1] * semi[1], u[2] * semi[2]]);
            }
        }
    }
    pts
}

/// Deterministic core simulator: rigid motion, projection, occlusion, noise.
/// Points that are never visible are dropped; a body losing all its points
/// (or never visible at all) is a [`SynthError::DegenerateScene`].
pub fn simulate(
    camera: &CameraModel,
    frames: usize,
    bodies: &[BodySpec],
    occluders: &[Occluder],
    pixel_noise_sigma: f32,
    seed: u64,
) -> Result<(TrackSet, DepthTrack), SynthError> {
    if frames < 2 {
        return Err(SynthError::TooShortSequence(frames));
    }
    let mut positions: Vec<f32> = Vec::new();
    let mut visibility: Vec<bool> = Vec::new();
    let mut depths: Vec<f64> = Vec::new();
    let mut kept = 0usize;

    for (bi, body) in bodies.iter().enumerate() {
        let mut pt_rng = seeds::rng(seed, Stream::BodyPoints, bi as u64);
        let mut jitter_rng = seeds::rng(seed, Stream::Jitter, bi as u64);
        let mut noise_rng = seeds::rng(seed, Stream::Noise, bi as u64);

        let locals = sample_local_points(&body.shape, body.points, &mut pt_rng);
        let axis = normalize(body.rot_axis);

        // Cumulative rotation angle per frame; jitter perturbs increments.
        let mut angles = Vec::with_capacity(frames);
        let mut acc = 0.0f64;
        for t in 0..frames {
            if t > 0 {
                let eps: f64 = if body.rot_jitter > 0.0 {
                    body.rot_jitter * rng_normal(&mut jitter_rng)
                } else {
                    0.0
                };
                acc += body.rot_rate + eps;
            }
            angles.push(acc);
        }

        let mut body_visible = false;
        for local in &locals {
            let mut row_pos = Vec::with_capacity(frames * 2);
            let mut row_vis = Vec::with_capacity(frames);
            let mut row_depth = Vec::with_capacity(frames);
            let mut any_visible = false;
            for t in 0..frames {
                let rotated = rotate(*local, axis, angles[t]);
                let world = [
                    body.center[0] + body.velocity[0] * t as f64 + rotated[0],
                    body.center[1] + body.velocity[1] * t as f64 + rotated[1],
                    body.center[2] + body.velocity[2] * t as f64 + rotated[2],
                ];
                let z = world[2];
                assert!(z > 0.0, "body {bi} crossed the camera plane at frame {t}");
                let clean = project_point64(camera, world).expect("z > 0 checked above");
                let mut vis = camera.contains(clean);
                if vis {
                    for occ in occluders {
                        let dx = clean[0] - occ.center_px[0];
                        let dy = clean[1] - occ.center_px[1];
                        if z > occ.depth_m && dx * dx + dy * dy <= occ.radius_px * occ.radius_px {
                            vis = false;
                            break;
                        }
                    }
                }
                let (nx, ny) = if pixel_noise_sigma > 0.0 {
                    (
                        pixel_noise_sigma as f64 * rng_normal(&mut noise_rng),
                        pixel_noise_sigma as f64 * rng_normal(&mut noise_rng),
                    )
                } else {
                    (0.0, 0.0)
                };
                row_pos.push((clean[0] + nx) as f32);
                row_pos.push((clean[1] + ny) as f32);
                row_vis.push(vis);
                row_depth.push(z);
                any_visible |= vis;
            }
            if any_visible {
                positions.extend_from_slice(&row_pos);
                visibility.extend_from_slice(&row_vis);
                depths.extend_from_slice(&row_depth);
                kept += 1;
                body_visible = true;
            }
        }
        if !body_visible {
            return Err(SynthError::DegenerateScene(bi));
        }
    }

    let tracks = TrackSet {
        n: kept,
        t_len: frames,
        positions,
        visibility,
        camera: *camera,
        roles: vec![Role::Query; kept],
    };
    let depth_track = DepthTrack { n: kept, t_len: frames, depths };
    debug_assert!(tracks.validate().is_ok());
    Ok((tracks, depth_track))
}

fn rng_normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Samples bodies and occluders from a [`SceneSpec`] and simulates them.
pub fn generate_scene(spec: &SceneSpec) -> Result<(TrackSet, DepthTrack), SynthError> {
    spec.validate()?;
    let mut rng = seeds::rng(spec.rng_seed, Stream::Scene, 0);
    let cam = &spec.camera;
    let (w, h) = (cam.image_size.0 as f64, cam.image_size.1 as f64);
    let (dlo, dhi) = (spec.depth_range.0 as f64, spec.depth_range.1 as f64);
    let band = dhi - dlo;
    let frames = spec.frames;

    let mut bodies = Vec::with_capacity(spec.num_bodies);
    for bi in 0..spec.num_bodies {
        let planar = match spec.body_kinds {
            BodyKindMix::PlanarOnly => true,
            BodyKindMix::EllipsoidOnly => false,
            BodyKindMix::Mixed => bi % 2 == 0,
        };
        // Center depth in the middle band so motion stays inside the range.
        let z0 = rng.random_range(dlo + 0.2 * band..=dlo + 0.8 * band);
        // Aim the center at a pixel away from the border.
        let px = rng.random_range(0.2 * w..=0.8 * w);
        let py = rng.random_range(0.2 * h..=0.8 * h);
        let f = cam.focal_px as f64;
        let center = [
            (px - cam.principal_point.0 as f64) * z0 / f,
            (py - cam.principal_point.1 as f64) * z0 / f,
            z0,
        ];

        let tr = spec.translation_range as f64;
        let mut velocity = [
            rng.random_range(-tr..=tr),
            rng.random_range(-tr..=tr),
            rng.random_range(-tr..=tr),
        ];
        // Clamp z velocity so the center cannot leave the depth band.
        let span = (frames - 1) as f64;
        if velocity[2] > 0.0 {
            velocity[2] = velocity[2].min((dhi - 0.05 * band - z0) / span);
        } else {
            velocity[2] = velocity[2].max((dlo + 0.05 * band - z0) / span);
        }

        let scale = 0.06 * z0; // keeps projected extent roughly depth-independent
        let shape = if planar {
            BodyShape::Planar {
                half_u: rng.random_range(2.0 * scale..=5.0 * scale),
                half_v: rng.random_range(2.0 * scale..=5.0 * scale),
                tilt: rng.random_range(0.0..=spec.tilt_range.max(1e-9) as f64)
                    * if spec.tilt_range > 0.0 { 1.0 } else { 0.0 },
                azimuth: rng.random_range(0.0..std::f64::consts::TAU),
            }
        } else {
            BodyShape::Ellipsoid {
                semi: [
                    rng.random_range(1.5 * scale..=4.0 * scale),
                    rng.random_range(1.5 * scale..=4.0 * scale),
                    rng.random_range(1.5 * scale..=4.0 * scale),
                ],
            }
        };

        let rr = spec.rotation_range as f64;
        let rot_rate = if rr > 0.0 { rng.random_range(-rr..=rr) } else { 0.0 };
        let g = [rng_normal(&mut rng), rng_normal(&mut rng), rng_normal(&mut rng)];
        bodies.push(BodySpec {
            shape,
            center,
            velocity,
            rot_axis: normalize(g),
            rot_rate,
            rot_jitter: 0.05 * rr,
            points: spec.points_per_body,
        });
    }

    let mut occluders = Vec::new();
    if spec.occluder_density > 0.0 {
        let target = spec.occluder_density as f64 * w * h;
        let mut covered = 0.0;
        while covered < target {
            let radius = rng.random_range(0.04 * w.min(h)..=0.12 * w.min(h));
            occluders.push(Occluder {
                center_px: [rng.random_range(0.0..w), rng.random_range(0.0..h)],
                radius_px: radius,
                depth_m: rng.random_range(dlo * 0.5..=dhi),
            });
            covered += std::f64::consts::PI * radius * radius;
        }
    }

    simulate(
        cam,
        frames,
        &bodies,
        &occluders,
        spec.pixel_noise_sigma,
        seeds::child_seed(spec.rng_seed, Stream::Scene, 1),
    )
}

// ==== QUERY/SUPPORT SPLIT AND MASKING ====

/// Pixel centers of an `rows x cols` lattice over the image.
pub fn grid_seeds(camera: &CameraModel, rows: usize, cols: usize) -> Vec<[f32; 2]> {
    let (w, h) = (camera.image_size.0 as f32, camera.image_size.1 as f32);
    let mut seeds = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            seeds.push([(c as f32 + 0.5) * w / cols as f32, (r as f32 + 0.5) * h / rows as f32]);
        }
    }
    seeds
}

/// Picks, for each lattice seed, the trajectory of the nearest point at
/// `anchor_frame` (preferring points visible there). Duplicates are allowed:
/// a sparse region reuses its nearest trajectory, mirroring how a tracker
/// would track whatever surface sits under the seed pixel.
pub fn support_rows_at(
    tracks: &TrackSet,
    rows: usize,
    cols: usize,
    anchor_frame: usize,
) -> Result<Vec<usize>, SynthError> {
    let (w, h) = tracks.camera.image_size;
    if rows == 0 || cols == 0 || rows > h as usize || cols > w as usize {
        return Err(SynthError::GridTooLarge { rows, cols, width: w, height: h });
    }
    let seeds = grid_seeds(&tracks.camera, rows, cols);
    let mut out = Vec::with_capacity(seeds.len());
    for s in seeds {
        let mut best = (f32::INFINITY, usize::MAX, false);
        for i in 0..tracks.n {
            let p = tracks.pos(i, anchor_frame);
            let d2 = (p[0] - s[0]).powi(2) + (p[1] - s[1]).powi(2);
            let vis = tracks.visible(i, anchor_frame);
            // Visible candidates always beat invisible ones.
            let better = match (vis, best.2) {
                (true, false) => true,
                (false, true) => false,
                _ => d2 < best.0,
            };
            if better {
                best = (d2, i, vis);
            }
        }
        out.push(best.1);
    }
    Ok(out)
}

/// Builds the model input track set: `num_queries` sampled query trajectories
/// followed by a `rows x cols` support grid seeded at frame 0. Returns the
/// new set plus the source row index of every output row, so aligned tensors
/// (depths) can be gathered the same way.
pub fn split_query_support(
    tracks: &TrackSet,
    grid: (usize, usize),
    num_queries: usize,
    seed: u64,
) -> Result<(TrackSet, Vec<usize>), SynthError> {
    if num_queries > tracks.n {
        return Err(SynthError::TooFewPoints { requested: num_queries, available: tracks.n });
    }
    let support = support_rows_at(tracks, grid.0, grid.1, 0)?;
    let mut rng = seeds::rng(seed, Stream::QuerySplit, 0);
    let mut query: Vec<usize> = index_sample(&mut rng, tracks.n, num_queries).into_vec();
    query.sort_unstable();

    let mut source_index = query;
    let n_query = source_index.len();
    source_index.extend_from_slice(&support);

    let t_len = tracks.t_len;
    let mut positions = Vec::with_capacity(source_index.len() * t_len * 2);
    let mut visibility = Vec::with_capacity(source_index.len() * t_len);
    let mut roles = Vec::with_capacity(source_index.len());
    for (k, &src) in source_index.iter().enumerate() {
        positions.extend_from_slice(&tracks.positions[src * t_len * 2..(src + 1) * t_len * 2]);
        visibility.extend_from_slice(&tracks.visibility[src * t_len..(src + 1) * t_len]);
        roles.push(if k < n_query { Role::Query } else { Role::Support });
    }
    Ok((
        TrackSet {
            n: source_index.len(),
            t_len,
            positions,
            visibility,
            camera: tracks.camera,
            roles,
        },
        source_index,
    ))
}

/// Replaces occluded positions with the last visible position (first visible
/// for leading occlusions). Visibility flags are unchanged.
pub fn mask_occluded_positions(tracks: &TrackSet) -> Result<TrackSet, SynthError> {
    let mut out = tracks.clone();
    for i in 0..tracks.n {
        let first_visible = (0..tracks.t_len)
            .find(|&t| tracks.visible(i, t))
            .ok_or(SynthError::NeverVisible(i))?;
        let mut hold = tracks.pos(i, first_visible);
        for t in 0..tracks.t_len {
            if tracks.visible(i, t) {
                hold = tracks.pos(i, t);
            } else {
                out.set_pos(i, t, hold);
            }
        }
    }
    Ok(out)
}

// ==== TESTS ====

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::unproject_pixel64;

    fn test_camera() -> CameraModel {
        CameraModel { focal_px: 256.0, principal_point: (128.0, 128.0), image_size: (256, 256) }
    }

    fn plane_body(z0: f64, vz: f64, points: usize) -> BodySpec {
        BodySpec {
            shape: BodyShape::Planar { half_u: 0.3, half_v: 0.3, tilt: 0.0, azimuth: 0.0 },
            center: [0.0, 0.0, z0],
            velocity: [0.0, 0.0, vz],
            rot_axis: [0.0, 0.0, 1.0],
            rot_rate: 0.0,
            rot_jitter: 0.0,
            points,
        }
    }

    #[test]
    fn static_body_constant_depth() {
        let cam = test_camera();
        let (tracks, depths) =
            simulate(&cam, 8, &[plane_body(3.0, 0.0, 16)], &[], 0.0, 11).unwrap();
        assert_eq!(tracks.t_len, 8);
        for i in 0..tracks.n {
            for t in 0..8 {
                let ratio = depths.depth(i, t) / depths.depth(i, 0);
                assert!((ratio - 1.0).abs() < 1e-12);
                assert_eq!(tracks.pos(i, t), tracks.pos(i, 0));
            }
        }
    }

    #[test]
    fn receding_plane_ratio_two() {
        let cam = test_camera();
        let t = 9usize;
        let vz = 2.0 / (t - 1) as f64;
        let (tracks, depths) = simulate(&cam, t, &[plane_body(2.0, vz, 32)], &[], 0.0, 5).unwrap();
        for i in 0..tracks.n {
            let ratio = depths.depth(i, t - 1) / depths.depth(i, 0);
            assert!((ratio - 2.0).abs() < 1e-5, "ratio {ratio}");
        }
    }

    #[test]
    fn generate_scene_is_deterministic() {
        let spec = SceneSpec { rng_seed: 123, ..SceneSpec::default() };
        let (a_tracks, a_depths) = generate_scene(&spec).unwrap();
        let (b_tracks, b_depths) = generate_scene(&spec).unwrap();
        assert_eq!(a_tracks, b_tracks);
        assert_eq!(a_depths, b_depths);
    }

    #[test]
    fn scene_respects_invariants() {
        for seed in 0..8u64 {
            let spec = SceneSpec { rng_seed: seed, ..SceneSpec::default() };
            let (tracks, depths) = generate_scene(&spec).unwrap();
            tracks.validate().unwrap();
            assert!(depths.depths.iter().all(|&d| d > 0.0));
            assert_eq!(tracks.n, depths.n);
        }
    }

    #[test]
    fn rigidity_recovered_by_unprojection() {
        // Noise-free scene; unprojected pairwise distances must be constant
        // over time to 1e-4 m.
        let spec = SceneSpec {
            pixel_noise_sigma: 0.0,
            occluder_density: 0.0,
            num_bodies: 1,
            points_per_body: 12,
            rng_seed: 3,
            ..SceneSpec::default()
        };
        let (tracks, depths) = generate_scene(&spec).unwrap();
        let lift = |i: usize, t: usize| {
            let p = tracks.pos(i, t);
            unproject_pixel64(&tracks.camera, [p[0] as f64, p[1] as f64], depths.depth(i, t))
                .unwrap()
        };
        for a in 0..tracks.n {
            for b in (a + 1)..tracks.n {
                let d0 = {
                    let (pa, pb) = (lift(a, 0), lift(b, 0));
                    ((pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2) + (pa[2] - pb[2]).powi(2))
                        .sqrt()
                };
                for t in 1..tracks.t_len {
                    let (pa, pb) = (lift(a, t), lift(b, t));
                    let d = ((pa[0] - pb[0]).powi(2)
                        + (pa[1] - pb[1]).powi(2)
                        + (pa[2] - pb[2]).powi(2))
                    .sqrt();
                    assert!((d - d0).abs() < 1e-4, "pair ({a},{b}) frame {t}: {d} vs {d0}");
                }
            }
        }
    }

    #[test]
    fn density_law_on_fronto_parallel_scene() {
        // Adaptive-bandwidth KDE density ratio, square-rooted, matches the
        // true depth ratio within 5% for fronto-parallel planes.
        let mut total_err = 0.0f64;
        let mut count = 0usize;
        for seed in 0..5u64 {
            let spec = SceneSpec {
                num_bodies: 1,
                points_per_body: 48,
                ..SceneSpec::fronto_parallel(seed)
            };
            let (tracks, depths) = generate_scene(&spec).unwrap();
            let last = tracks.t_len - 1;
            let k = 8usize;
            for i in 0..tracks.n {
                let density = |t: usize| {
                    let pi = tracks.pos(i, t);
                    let mut d2: Vec<f64> = (0..tracks.n)
                        .filter(|&j| j != i)
                        .map(|j| {
                            let pj = tracks.pos(j, t);
                            ((pj[0] - pi[0]) as f64).powi(2) + ((pj[1] - pi[1]) as f64).powi(2)
                        })
                        .collect();
                    d2.sort_by(f64::total_cmp);
                    d2.truncate(k);
                    let h2 = d2[k / 2]; // median squared neighbor distance
                    let sum: f64 = d2.iter().map(|&r2| (-r2 / (2.0 * h2)).exp()).sum();
                    sum / (2.0 * std::f64::consts::PI * h2 * k as f64)
                };
                let measured = (density(last) / density(0)).sqrt();
                let truth = depths.depth(i, last) / depths.depth(i, 0);
                total_err += ((measured - truth) / truth).abs();
                count += 1;
            }
        }
        let mean_err = total_err / count as f64;
        assert!(mean_err < 0.05, "mean relative error {mean_err}");
    }

    #[test]
    fn grid_seeds_match_lattice_centers() {
        let cam = CameraModel { focal_px: 50.0, principal_point: (50.0, 50.0), image_size: (100, 100) };
        let seeds = grid_seeds(&cam, 2, 2);
        assert_eq!(seeds, vec![[25.0, 25.0], [75.0, 25.0], [25.0, 75.0], [75.0, 75.0]]);
    }

    #[test]
    fn split_marks_grid_and_queries() {
        let spec = SceneSpec { rng_seed: 9, ..SceneSpec::default() };
        let (tracks, depths) = generate_scene(&spec).unwrap();
        let (split, source) = split_query_support(&tracks, (24, 24), tracks.n, 7).unwrap();
        assert_eq!(split.roles.iter().filter(|r| **r == Role::Support).count(), 576);
        // num_queries = N marks every original track as a query.
        assert_eq!(split.roles.iter().filter(|r| **r == Role::Query).count(), tracks.n);
        let re = depths.reindex(&source);
        assert_eq!(re.n, split.n);
        for (k, &src) in source.iter().enumerate() {
            assert_eq!(re.depth(k, 3), depths.depth(src, 3));
        }
    }

    #[test]
    fn split_rejects_bad_grid_and_counts() {
        let spec = SceneSpec { rng_seed: 2, ..SceneSpec::default() };
        let (tracks, _) = generate_scene(&spec).unwrap();
        assert!(matches!(
            split_query_support(&tracks, (1000, 4), 1, 0),
            Err(SynthError::GridTooLarge { .. })
        ));
        assert!(matches!(
            split_query_support(&tracks, (2, 2), tracks.n + 1, 0),
            Err(SynthError::TooFewPoints { .. })
        ));
    }

    #[test]
    fn masking_examples() {
        let cam = test_camera();
        let mk = |vis: [bool; 3]| TrackSet {
            n: 1,
            t_len: 3,
            positions: vec![0.0, 0.0, 1.0, 1.0, 2.0, 2.0],
            visibility: vis.to_vec(),
            camera: cam,
            roles: vec![Role::Query],
        };
        // Trailing occlusion holds the last visible position.
        let t = mk([true, true, false]);
        let m = mask_occluded_positions(&t).unwrap();
        assert_eq!(m.pos(0, 2), [1.0, 1.0]);
        assert_eq!(m.visibility, t.visibility);
        // Leading occlusion borrows the first visible position.
        let t = mk([false, true, true]);
        let m = mask_occluded_positions(&t).unwrap();
        assert_eq!(m.pos(0, 0), [1.0, 1.0]);
        assert_eq!(m.pos(0, 2), [2.0, 2.0]);
        // Fully visible tracks are untouched.
        let t = mk([true, true, true]);
        assert_eq!(mask_occluded_positions(&t).unwrap(), t);
        // Never-visible is an error.
        let t = mk([false, false, false]);
        assert_eq!(mask_occluded_positions(&t), Err(SynthError::NeverVisible(0)));
    }

    #[test]
    fn four_frame_masking_example() {
        let cam = test_camera();
        let t = TrackSet {
            n: 1,
            t_len: 4,
            positions: vec![0.0, 0.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0],
            visibility: vec![true, true, false, false],
            camera: cam,
            roles: vec![Role::Query],
        };
        let m = mask_occluded_positions(&t).unwrap();
        assert_eq!(
            (0..4).map(|f| m.pos(0, f)).collect::<Vec<_>>(),
            vec![[0.0, 0.0], [1.0, 1.0], [1.0, 1.0], [1.0, 1.0]]
        );
    }

    #[test]
    fn spec_validation() {
        let mut spec = SceneSpec::default();
        spec.frames = 1;
        assert_eq!(spec.validate(), Err(SynthError::TooShortSequence(1)));
        let mut spec = SceneSpec::default();
        spec.depth_range = (0.05, 5.0);
        assert!(matches!(spec.validate(), Err(SynthError::InvalidDepthRange(..))));
        let mut spec = SceneSpec::default();
        spec.num_bodies = 0;
        assert_eq!(spec.validate(), Err(SynthError::ZeroCounts));
    }
}
