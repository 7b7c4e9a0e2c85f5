//! Pinhole camera math and the closed-form depth-ratio relations used as an
//! analytic oracle throughout the crate.
//!
//! Conventions: right-handed camera frame with +z forward, pixel origin at the
//! top-left corner, y pointing down. All computation runs in f64 internally;
//! the public interfaces speak f32.

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GeometryError {
    #[error("focal length must be positive, got {0}")]
    NonPositiveFocal(f32),
    #[error("image dimensions must be positive, got {0}x{1}")]
    EmptyImage(u32, u32),
    #[error("patch area must be positive, got {0}")]
    NonPositiveArea(f32),
    #[error("surface angle must lie in [0, pi/2), got {0}")]
    AngleOutOfRange(f32),
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f32),
    #[error("density must be positive, got {0}")]
    NonPositiveDensity(f32),
    #[error("patch areas differ: {0} vs {1}")]
    AreaMismatch(f32, f32),
}

/// Intrinsics of an ideal pinhole camera. No distortion, square pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    /// Focal length in pixels.
    pub focal_px: f32,
    /// Principal point (cx, cy) in pixels.
    pub principal_point: (f32, f32),
    /// Image size (width, height) in pixels.
    pub image_size: (u32, u32),
}

impl CameraModel {
    pub fn new(
        focal_px: f32,
        principal_point: (f32, f32),
        image_size: (u32, u32),
    ) -> Result<Self, GeometryError> {
        let cam = Self { focal_px, principal_point, image_size };
        cam.validate()?;
        Ok(cam)
    }

    /// Re-checks invariants; used after deserializing headers and configs.
    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.focal_px > 0.0) {
            return Err(GeometryError::NonPositiveFocal(self.focal_px));
        }
        if self.image_size.0 == 0 || self.image_size.1 == 0 {
            return Err(GeometryError::EmptyImage(self.image_size.0, self.image_size.1));
        }
        Ok(())
    }

    /// True when a pixel lies inside the image rectangle.
    pub fn contains(&self, pixel: [f64; 2]) -> bool {
        pixel[0] >= 0.0
            && pixel[1] >= 0.0
            && pixel[0] < self.image_size.0 as f64
            && pixel[1] < self.image_size.1 as f64
    }
}

/// A small rigid surface element at one instant: its area, the angle between
/// its normal and the optical axis, and its depth along the axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfacePatch {
    pub area_m2: f32,
    pub normal_angle_rad: f32,
    pub depth_m: f32,
}

impl SurfacePatch {
    pub fn new(area_m2: f32, normal_angle_rad: f32, depth_m: f32) -> Result<Self, GeometryError> {
        if !(area_m2 > 0.0) {
            return Err(GeometryError::NonPositiveArea(area_m2));
        }
        if !(0.0..std::f32::consts::FRAC_PI_2).contains(&normal_angle_rad) {
            return Err(GeometryError::AngleOutOfRange(normal_angle_rad));
        }
        if !(depth_m > 0.0) {
            return Err(GeometryError::NonPositiveDepth(depth_m));
        }
        Ok(Self { area_m2, normal_angle_rad, depth_m })
    }
}

// ==== PROJECTION ====

/// Projects a camera-frame point (meters) to pixel coordinates in f64.
/// Callers that need the f32 interface use [`project_point`].
pub fn project_point64(camera: &CameraModel, point_cam: [f64; 3]) -> Result<[f64; 2], GeometryError> {
    let [x, y, z] = point_cam;
    if !(z > 0.0) {
        return Err(GeometryError::NonPositiveDepth(z as f32));
    }
    let f = camera.focal_px as f64;
    let (cx, cy) = (camera.principal_point.0 as f64, camera.principal_point.1 as f64);
    Ok([cx + f * x / z, cy + f * y / z])
}

/// Projects a camera-frame point to pixels: `pp + f * (x/z, y/z)`.
pub fn project_point(camera: &CameraModel, point_cam: [f32; 3]) -> Result<[f32; 2], GeometryError> {
    let p = project_point64(camera, [point_cam[0] as f64, point_cam[1] as f64, point_cam[2] as f64])?;
    Ok([p[0] as f32, p[1] as f32])
}

/// Inverse of [`project_point`]: lifts a pixel at a known depth back to the
/// camera frame. Depth is the z-coordinate, not the ray length.
pub fn unproject_pixel64(camera: &CameraModel, pixel: [f64; 2], depth_m: f64) -> Result<[f64; 3], GeometryError> {
    if !(depth_m > 0.0) {
        return Err(GeometryError::NonPositiveDepth(depth_m as f32));
    }
    let f = camera.focal_px as f64;
    let (cx, cy) = (camera.principal_point.0 as f64, camera.principal_point.1 as f64);
    Ok([depth_m * (pixel[0] - cx) / f, depth_m * (pixel[1] - cy) / f, depth_m])
}

/// f32 interface over [`unproject_pixel64`].
pub fn unproject_pixel(camera: &CameraModel, pixel: [f32; 2], depth_m: f32) -> Result<[f32; 3], GeometryError> {
    let p = unproject_pixel64(camera, [pixel[0] as f64, pixel[1] as f64], depth_m as f64)?;
    Ok([p[0] as f32, p[1] as f32, p[2] as f32])
}

// ==== DEPTH-RATIO THEORY ====

/// Image-plane area covered by a patch: `(f/d)^2 * A_surface * cos(theta)`,
/// in pixels squared.
pub fn projected_area(camera: &CameraModel, patch: &SurfacePatch) -> f32 {
    let f = camera.focal_px as f64;
    let d = patch.depth_m as f64;
    let a = patch.area_m2 as f64;
    let theta = patch.normal_angle_rad as f64;
    ((f / d).powi(2) * a * theta.cos()) as f32
}

/// Converts a track-density ratio into a depth ratio:
/// `sqrt(rho_t / rho_t0) * cos(theta_t) / cos(theta_t0)`.
pub fn density_ratio_to_depth_ratio(
    rho_t: f32,
    rho_t0: f32,
    theta_t: f32,
    theta_t0: f32,
) -> Result<f32, GeometryError> {
    if !(rho_t > 0.0) {
        return Err(GeometryError::NonPositiveDensity(rho_t));
    }
    if !(rho_t0 > 0.0) {
        return Err(GeometryError::NonPositiveDensity(rho_t0));
    }
    if !(0.0..std::f32::consts::FRAC_PI_2).contains(&theta_t) {
        return Err(GeometryError::AngleOutOfRange(theta_t));
    }
    if !(0.0..std::f32::consts::FRAC_PI_2).contains(&theta_t0) {
        return Err(GeometryError::AngleOutOfRange(theta_t0));
    }
    let r = (rho_t as f64 / rho_t0 as f64).sqrt() * (theta_t as f64).cos() / (theta_t0 as f64).cos();
    Ok(r as f32)
}

/// Image-plane track density implied by the depth/angle relation, up to the
/// shared `1/A` factor that cancels in ratios. The cosine enters squared so
/// that the square-root route in [`density_ratio_to_depth_ratio`] inverts it
/// exactly for any pair of angles.
fn patch_track_density(camera: &CameraModel, patch: &SurfacePatch) -> f64 {
    let f = camera.focal_px as f64;
    let d = patch.depth_m as f64;
    let a = patch.area_m2 as f64;
    let cos = (patch.normal_angle_rad as f64).cos();
    (d / (f * cos)).powi(2) / a
}

/// Computes `d_t / d_t0` directly and via the density route, asserting that
/// the two agree to 1e-6 relative. Serves as the self-consistency oracle for
/// everything downstream that reasons in density space.
pub fn theoretical_ratio_oracle(
    camera: &CameraModel,
    patch_t0: &SurfacePatch,
    patch_t: &SurfacePatch,
) -> Result<f32, GeometryError> {
    if patch_t0.area_m2 != patch_t.area_m2 {
        return Err(GeometryError::AreaMismatch(patch_t0.area_m2, patch_t.area_m2));
    }
    let direct = patch_t.depth_m as f64 / patch_t0.depth_m as f64;
    let rho_t = patch_track_density(camera, patch_t);
    let rho_t0 = patch_track_density(camera, patch_t0);
    let via_density = density_ratio_to_depth_ratio(
        rho_t as f32,
        rho_t0 as f32,
        patch_t.normal_angle_rad,
        patch_t0.normal_angle_rad,
    )? as f64;
    let rel = (via_density - direct).abs() / direct;
    assert!(
        rel <= 1e-6,
        "depth-ratio routes disagree: direct {direct} vs density {via_density} (rel {rel})"
    );
    Ok(direct as f32)
}

// ==== TESTS ====

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f32::consts::{FRAC_PI_2, FRAC_PI_3, FRAC_PI_4, FRAC_PI_6};

    fn cam(f: f32, pp: (f32, f32)) -> CameraModel {
        CameraModel::new(f, pp, (256, 256)).unwrap()
    }

    #[test]
    fn project_examples() {
        let p = project_point(&cam(100.0, (0.0, 0.0)), [1.0, 0.0, 2.0]).unwrap();
        assert_eq!(p, [50.0, 0.0]);

        let p = project_point(&cam(100.0, (64.0, 64.0)), [0.0, 0.0, 5.0]).unwrap();
        assert_eq!(p, [64.0, 64.0]);

        let p = project_point(&cam(320.0, (128.0, 128.0)), [0.3, -0.2, 1.5]).unwrap();
        assert!((p[0] - 192.0).abs() < 1e-4, "{p:?}");
        assert!((p[1] - 85.3333).abs() < 1e-3, "{p:?}");
    }

    #[test]
    fn project_rejects_nonpositive_z() {
        assert_eq!(
            project_point(&cam(100.0, (0.0, 0.0)), [1.0, 1.0, 0.0]),
            Err(GeometryError::NonPositiveDepth(0.0))
        );
        assert!(project_point(&cam(100.0, (0.0, 0.0)), [1.0, 1.0, -2.0]).is_err());
    }

    #[test]
    fn unproject_inverts_project() {
        let camera = cam(320.0, (128.0, 120.0));
        let point = [0.7f32, -0.4, 3.2];
        let pixel = project_point(&camera, point).unwrap();
        let lifted = unproject_pixel(&camera, pixel, point[2]).unwrap();
        for k in 0..3 {
            assert!((lifted[k] - point[k]).abs() < 1e-5, "{lifted:?} vs {point:?}");
        }
    }

    #[test]
    fn projected_area_examples() {
        let c = cam(1.0, (0.0, 0.0));
        let a = projected_area(&c, &SurfacePatch::new(1.0, 0.0, 1.0).unwrap());
        assert!((a - 1.0).abs() < 1e-7);

        let a = projected_area(&c, &SurfacePatch::new(1.0, 0.0, 2.0).unwrap());
        assert!((a - 0.25).abs() < 1e-7);

        let c2 = cam(2.0, (0.0, 0.0));
        let a = projected_area(&c2, &SurfacePatch::new(1.0, FRAC_PI_3, 1.0).unwrap());
        assert!((a - 2.0).abs() < 1e-6, "{a}");
    }

    #[test]
    fn density_ratio_examples() {
        let r = density_ratio_to_depth_ratio(4.0, 1.0, 0.0, 0.0).unwrap();
        assert!((r - 2.0).abs() < 1e-6);

        let r = density_ratio_to_depth_ratio(1.0, 1.0, 0.3, 0.3).unwrap();
        assert!((r - 1.0).abs() < 1e-6);

        let r = density_ratio_to_depth_ratio(2.0, 1.0, FRAC_PI_6, FRAC_PI_3).unwrap();
        assert!((r - 2.4495).abs() < 1e-4, "{r}");
    }

    #[test]
    fn density_ratio_rejects_bad_inputs() {
        assert!(density_ratio_to_depth_ratio(0.0, 1.0, 0.0, 0.0).is_err());
        assert!(density_ratio_to_depth_ratio(1.0, -1.0, 0.0, 0.0).is_err());
        assert!(density_ratio_to_depth_ratio(1.0, 1.0, FRAC_PI_2, 0.0).is_err());
    }

    #[test]
    fn oracle_examples() {
        let c = cam(320.0, (128.0, 128.0));
        let pure_recession = theoretical_ratio_oracle(
            &c,
            &SurfacePatch::new(0.5, 0.0, 1.0).unwrap(),
            &SurfacePatch::new(0.5, 0.0, 3.0).unwrap(),
        )
        .unwrap();
        assert!((pure_recession - 3.0).abs() < 1e-6);

        let identical = SurfacePatch::new(0.2, FRAC_PI_6, 2.5).unwrap();
        assert!((theoretical_ratio_oracle(&c, &identical, &identical).unwrap() - 1.0).abs() < 1e-7);

        let tilted = theoretical_ratio_oracle(
            &c,
            &SurfacePatch::new(1.0, 0.0, 2.0).unwrap(),
            &SurfacePatch::new(1.0, FRAC_PI_4, 1.0).unwrap(),
        )
        .unwrap();
        assert!((tilted - 0.5).abs() < 1e-6, "{tilted}");
    }

    #[test]
    fn oracle_rejects_area_mismatch() {
        let c = cam(100.0, (0.0, 0.0));
        let a = SurfacePatch::new(1.0, 0.0, 1.0).unwrap();
        let b = SurfacePatch::new(2.0, 0.0, 1.0).unwrap();
        assert_eq!(
            theoretical_ratio_oracle(&c, &a, &b),
            Err(GeometryError::AreaMismatch(1.0, 2.0))
        );
    }

    #[test]
    fn patch_invariants_enforced() {
        assert!(SurfacePatch::new(0.0, 0.0, 1.0).is_err());
        assert!(SurfacePatch::new(1.0, FRAC_PI_2, 1.0).is_err());
        assert!(SurfacePatch::new(1.0, 1.6, 1.0).is_err());
        assert!(SurfacePatch::new(1.0, 0.0, 0.0).is_err());
        assert!(CameraModel::new(0.0, (0.0, 0.0), (10, 10)).is_err());
        assert!(CameraModel::new(10.0, (0.0, 0.0), (0, 10)).is_err());
    }

    proptest! {
        // Self-consistency of the two depth-ratio routes on random patch pairs.
        #[test]
        fn oracle_self_consistent(
            d0 in 0.2f32..50.0,
            d1 in 0.2f32..50.0,
            th0 in 0.0f32..1.4,
            th1 in 0.0f32..1.4,
            area in 0.01f32..10.0,
        ) {
            let c = cam(320.0, (128.0, 128.0));
            let p0 = SurfacePatch::new(area, th0, d0).unwrap();
            let p1 = SurfacePatch::new(area, th1, d1).unwrap();
            // The oracle asserts 1e-6 agreement internally; reaching the
            // return value at all is the property.
            let r = theoretical_ratio_oracle(&c, &p0, &p1).unwrap();
            prop_assert!((r - d1 / d0).abs() / (d1 / d0) < 1e-5);
        }

        // projected_area strictly decreases in depth and in angle.
        #[test]
        fn projected_area_monotone(
            d in 0.2f32..20.0,
            dd in 0.01f32..5.0,
            th in 0.0f32..1.4,
            dth in 0.001f32..0.15,
        ) {
            let c = cam(320.0, (128.0, 128.0));
            let base = projected_area(&c, &SurfacePatch::new(1.0, th, d).unwrap());
            let deeper = projected_area(&c, &SurfacePatch::new(1.0, th, d + dd).unwrap());
            prop_assert!(deeper < base);
            if th + dth < 1.55 {
                let steeper = projected_area(&c, &SurfacePatch::new(1.0, th + dth, d).unwrap());
                prop_assert!(steeper < base);
            }
        }

        // Pinhole projection is invariant to scaling a point along its ray.
        #[test]
        fn projection_ray_scale_invariant(
            x in -2.0f32..2.0,
            y in -2.0f32..2.0,
            z in 0.2f32..20.0,
            lambda in 0.01f32..100.0,
        ) {
            let c = cam(320.0, (128.0, 128.0));
            let p = project_point(&c, [x, y, z]).unwrap();
            let q = project_point(&c, [lambda * x, lambda * y, lambda * z]).unwrap();
            prop_assert!((p[0] - q[0]).abs() < 1e-3 && (p[1] - q[1]).abs() < 1e-3);
        }
    }
}
