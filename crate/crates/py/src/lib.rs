//! Python bindings over the trajdepth core: pinhole geometry, synthetic
//! scene generation, track-bundle IO, checkpoint inference, the KDE
//! baseline, and the evaluation metrics.
//!
//! Flat channels use the same layouts as the core crate: positions are
//! `[n * t_len * 2]` row-major, visibility/depth/ratio are `[n * t_len]`.

use std::path::Path;

use pyo3::exceptions::{PyIndexError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use trajdepth::baseline::{self, KdeConfig};
use trajdepth::bundle;
use trajdepth::geometry::{self, CameraModel, SurfacePatch};
use trajdepth::infer::{self, WindowsOutput};
use trajdepth::metrics::{self, AlignMode};
use trajdepth::synth::{self, DepthTrack, Role, SceneSpec, TrackSet};
use trajdepth::train;

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

// ==== CAMERA ====

/// Pinhole camera intrinsics.
#[pyclass(frozen, skip_from_py_object)]
#[derive(Clone)]
struct Camera {
    inner: CameraModel,
}

#[pymethods]
impl Camera {
    #[new]
    fn new(
        focal_px: f32,
        principal_point: (f32, f32),
        image_size: (u32, u32),
    ) -> PyResult<Self> {
        let inner = CameraModel::new(focal_px, principal_point, image_size).map_err(err)?;
        Ok(Camera { inner })
    }

    #[getter]
    fn focal_px(&self) -> f32 {
        self.inner.focal_px
    }

    #[getter]
    fn principal_point(&self) -> (f32, f32) {
        self.inner.principal_point
    }

    #[getter]
    fn image_size(&self) -> (u32, u32) {
        self.inner.image_size
    }

    /// Projects a camera-frame 3D point to pixel coordinates.
    fn project(&self, point: (f64, f64, f64)) -> PyResult<(f64, f64)> {
        let p = geometry::project_point64(&self.inner, [point.0, point.1, point.2])
            .map_err(err)?;
        Ok((p[0], p[1]))
    }

    /// Lifts a pixel at a known metric depth back to a camera-frame 3D point.
    fn unproject(&self, pixel: (f64, f64), depth_m: f64) -> PyResult<(f64, f64, f64)> {
        let p = geometry::unproject_pixel64(&self.inner, [pixel.0, pixel.1], depth_m)
            .map_err(err)?;
        Ok((p[0], p[1], p[2]))
    }

    fn __repr__(&self) -> String {
        format!(
            "Camera(focal_px={}, principal_point={:?}, image_size={:?})",
            self.inner.focal_px, self.inner.principal_point, self.inner.image_size
        )
    }
}

// ==== TRACKS ====

/// Tracked trajectories with per-frame visibility plus optional depth and
/// ratio channels; the in-memory image of a track bundle file.
#[pyclass]
struct Tracks {
    tracks: TrackSet,
    depths: Option<DepthTrack>,
    ratio: Option<Vec<f32>>,
}

impl Tracks {
    fn check(&self, i: usize, t: usize) -> PyResult<()> {
        if i >= self.tracks.n || t >= self.tracks.t_len {
            return Err(PyIndexError::new_err(format!(
                "index ({i}, {t}) out of range for {} tracks x {} frames",
                self.tracks.n, self.tracks.t_len
            )));
        }
        Ok(())
    }
}

#[pymethods]
impl Tracks {
    #[getter]
    fn n(&self) -> usize {
        self.tracks.n
    }

    #[getter]
    fn t_len(&self) -> usize {
        self.tracks.t_len
    }

    #[getter]
    fn camera(&self) -> Camera {
        Camera { inner: self.tracks.camera }
    }

    fn position(&self, i: usize, t: usize) -> PyResult<(f32, f32)> {
        self.check(i, t)?;
        let p = self.tracks.pos(i, t);
        Ok((p[0], p[1]))
    }

    fn visible(&self, i: usize, t: usize) -> PyResult<bool> {
        self.check(i, t)?;
        Ok(self.tracks.visible(i, t))
    }

    fn depth(&self, i: usize, t: usize) -> PyResult<f64> {
        self.check(i, t)?;
        let d = self.depths.as_ref().ok_or_else(|| err("tracks have no depth channel"))?;
        Ok(d.depth(i, t))
    }

    /// Roles as "query"/"support" strings, one per track.
    fn roles(&self) -> Vec<&'static str> {
        self.tracks
            .roles
            .iter()
            .map(|r| match r {
                Role::Query => "query",
                Role::Support => "support",
            })
            .collect()
    }

    fn query_rows(&self) -> Vec<usize> {
        infer::query_rows(&self.tracks)
    }

    fn positions(&self) -> Vec<f32> {
        self.tracks.positions.clone()
    }

    fn visibility(&self) -> Vec<bool> {
        self.tracks.visibility.clone()
    }

    fn depths(&self) -> Option<Vec<f64>> {
        self.depths.as_ref().map(|d| d.depths.clone())
    }

    fn ratio(&self) -> Option<Vec<f32>> {
        self.ratio.clone()
    }

    /// Writes a track bundle with whatever channels are present.
    fn save(&self, path: &str) -> PyResult<()> {
        let b = bundle::tracks_to_bundle(&self.tracks, self.depths.as_ref(), self.ratio.as_deref());
        bundle::write_bundle(Path::new(path), &b).map_err(err)
    }

    /// Reads a track bundle written by `save` or the CLI.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Tracks> {
        let b = bundle::read_bundle(Path::new(path)).map_err(err)?;
        let (tracks, depths, ratio) = bundle::tracks_from_bundle(&b).map_err(err)?;
        Ok(Tracks { tracks, depths, ratio })
    }

    fn __repr__(&self) -> String {
        format!(
            "Tracks(n={}, t_len={}, depth={}, ratio={})",
            self.tracks.n,
            self.tracks.t_len,
            self.depths.is_some(),
            self.ratio.is_some()
        )
    }
}

// ==== OPERATIONS ====

/// Generates a rigid-body scene with ground-truth depths; `fronto_parallel`
/// restricts to the planar no-rotation regime where the density law is
/// exact.
#[pyfunction]
#[pyo3(signature = (seed, frames = 24, fronto_parallel = false, num_bodies = 3, points_per_body = 64))]
fn generate_scene(
    seed: u64,
    frames: usize,
    fronto_parallel: bool,
    num_bodies: usize,
    points_per_body: usize,
) -> PyResult<Tracks> {
    let base = if fronto_parallel {
        SceneSpec::fronto_parallel(seed)
    } else {
        SceneSpec { rng_seed: seed, ..SceneSpec::default() }
    };
    let spec = SceneSpec { frames, num_bodies, points_per_body, ..base };
    let (tracks, depths) = synth::generate_scene(&spec).map_err(err)?;
    Ok(Tracks { tracks, depths: Some(depths), ratio: None })
}

/// Depth ratio of two surface patches `(area_m2, normal_angle_rad, depth_m)`
/// computed through the track-density route and cross-checked against the
/// direct quotient.
#[pyfunction]
fn theoretical_ratio(
    camera: &Camera,
    patch_t0: (f32, f32, f32),
    patch_t: (f32, f32, f32),
) -> PyResult<f32> {
    let p0 = SurfacePatch::new(patch_t0.0, patch_t0.1, patch_t0.2).map_err(err)?;
    let p1 = SurfacePatch::new(patch_t.0, patch_t.1, patch_t.2).map_err(err)?;
    geometry::theoretical_ratio_oracle(&camera.inner, &p0, &p1).map_err(err)
}

/// Chains per-window log ratios into global depth ratios `d_t/d_0`, flat
/// `[nq * t_len]`.
#[pyfunction]
fn accumulate(
    starts: Vec<usize>,
    logs: Vec<Vec<f32>>,
    nq: usize,
    w: usize,
    t_len: usize,
) -> PyResult<Vec<f32>> {
    let out = WindowsOutput { starts, logs, nq, w, t_len };
    Ok(infer::accumulate(&out).map_err(err)?.ratios)
}

/// KDE-baseline depth ratios for every track, flat `[n * t_len]`.
#[pyfunction]
#[pyo3(signature = (tracks, k = 16, window = 8, stride = 4))]
fn baseline_ratio(tracks: &Tracks, k: usize, window: usize, stride: usize) -> PyResult<Vec<f32>> {
    let cfg = KdeConfig { k, bandwidth: None, window, stride };
    cfg.validate().map_err(err)?;
    Ok(baseline::baseline_ratio(&tracks.tracks, &cfg).map_err(err)?.ratios)
}

/// Runs a trained checkpoint over the query rows (all rows when none are
/// marked); returns `(rows, ratios)` with ratios flat `[len(rows) * t_len]`.
#[pyfunction]
#[pyo3(signature = (checkpoint, tracks, stride = 4))]
fn infer_ratios(
    checkpoint: &str,
    tracks: &Tracks,
    stride: usize,
) -> PyResult<(Vec<usize>, Vec<f32>)> {
    let (params, _, model_cfg) =
        train::load_train_checkpoint(Path::new(checkpoint)).map_err(err)?;
    let mut rows = infer::query_rows(&tracks.tracks);
    if rows.is_empty() {
        rows = (0..tracks.tracks.n).collect();
    }
    let out =
        infer::run_windows(&params, &model_cfg, &tracks.tracks, &rows, stride).map_err(err)?;
    let ratios = infer::accumulate(&out).map_err(err)?;
    Ok((rows, ratios.ratios))
}

/// Temporal Gaussian smoothing of the depth channel; returns new tracks.
#[pyfunction]
#[pyo3(signature = (tracks, passes = 1))]
fn smooth_depths(tracks: &Tracks, passes: usize) -> PyResult<Tracks> {
    let depths = tracks.depths.as_ref().ok_or_else(|| err("tracks have no depth channel"))?;
    Ok(Tracks {
        tracks: tracks.tracks.clone(),
        depths: Some(metrics::gaussian_smooth(depths, passes)),
        ratio: tracks.ratio.clone(),
    })
}

/// Full metric report for a prediction against ground truth. Predictions
/// carry a depth channel or a ratio channel; a prediction with fewer rows
/// pairs with the ground truth's query rows in order.
#[pyfunction]
#[pyo3(signature = (pred, gt, align = "per_trajectory"))]
fn evaluate<'py>(
    py: Python<'py>,
    pred: &Tracks,
    gt: &Tracks,
    align: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let mode = match align {
        "per_trajectory" => AlignMode::PerTrajectory,
        "affine" => AlignMode::Affine,
        "median" => AlignMode::Median,
        other => return Err(err(format!("unknown align mode {other:?}"))),
    };
    let gt_depth = gt.depths.as_ref().ok_or_else(|| err("ground truth has no depth channel"))?;

    let gt_rows: Vec<usize> = if pred.tracks.n == gt.tracks.n {
        (0..gt.tracks.n).collect()
    } else {
        let q = infer::query_rows(&gt.tracks);
        if q.len() != pred.tracks.n {
            return Err(err(format!(
                "prediction rows ({}) match neither all gt rows ({}) nor gt query rows ({})",
                pred.tracks.n,
                gt.tracks.n,
                q.len()
            )));
        }
        q
    };
    let t_len = gt.tracks.t_len;
    if pred.tracks.t_len != t_len {
        return Err(err(format!("frame count mismatch: pred {} vs gt {t_len}", pred.tracks.t_len)));
    }

    let pred_depth = match (&pred.depths, &pred.ratio) {
        (Some(d), _) => d.clone(),
        (None, Some(r)) => DepthTrack {
            n: pred.tracks.n,
            t_len,
            depths: r.iter().map(|&v| v as f64).collect(),
        },
        (None, None) => return Err(err("prediction has no depth or ratio channel")),
    };

    let gt_sub_depth = gt_depth.reindex(&gt_rows);
    let aligned = metrics::align(&pred_depth, &gt_sub_depth, mode).map_err(err)?;

    let pred_rows: Vec<usize> = (0..pred.tracks.n).collect();
    let pred3d =
        infer::unproject(&pred.tracks, &pred_rows, &aligned, &gt.tracks.camera).map_err(err)?;
    let gt3d =
        infer::unproject(&gt.tracks, &gt_rows, &gt_sub_depth, &gt.tracks.camera).map_err(err)?;
    let mut gt_vis = Vec::with_capacity(gt_rows.len() * t_len);
    for &i in &gt_rows {
        for t in 0..t_len {
            gt_vis.push(gt.tracks.visible(i, t));
        }
    }

    let report = metrics::evaluate(&metrics::EvalInputs {
        n: pred.tracks.n,
        t_len,
        pred3d: &pred3d,
        gt3d: &gt3d,
        pred_depth: &aligned,
        gt_depth: &gt_sub_depth,
        pred_vis: &pred.tracks.visibility,
        gt_vis: &gt_vis,
        camera: &gt.tracks.camera,
    })
    .map_err(err)?;

    let out = PyDict::new(py);
    out.set_item("apd_percent", report.apd_percent)?;
    out.set_item("aj3d_percent", report.aj3d_percent)?;
    out.set_item("tc", report.tc)?;
    out.set_item("absrel", report.absrel)?;
    out.set_item("delta1", report.delta1)?;
    out.set_item("apd_by_delta", report.apd_by_delta)?;
    out.set_item("aj3d_by_delta", report.aj3d_by_delta)?;
    Ok(out)
}

// ==== MODULE ====

#[pymodule]
fn trajdepth_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Camera>()?;
    m.add_class::<Tracks>()?;
    m.add_function(wrap_pyfunction!(generate_scene, m)?)?;
    m.add_function(wrap_pyfunction!(theoretical_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(accumulate, m)?)?;
    m.add_function(wrap_pyfunction!(baseline_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(infer_ratios, m)?)?;
    m.add_function(wrap_pyfunction!(smooth_depths, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
