//! Spherical cameras looking at the world origin.
//!
//! World frame is right-handed with +z up. A pose `(elevation, azimuth,
//! distance)` places the camera at
//! `distance * (cos(el) cos(az), cos(el) sin(az), sin(el))`; the camera's
//! -z axis points at the origin and its +y axis is world +z projected
//! orthogonally to the view direction.

use std::f64::consts::{PI, TAU};

use nalgebra::{Matrix3, Matrix4, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Camera distance used for every rendered and sampled view.
pub const CAMERA_DISTANCE: f64 = 1.5;
/// Lower bound of the random-view elevation range, degrees.
pub const RANDOM_ELEVATION_MIN_DEG: f64 = -10.0;
/// Upper bound of the random-view elevation range, degrees.
pub const RANDOM_ELEVATION_MAX_DEG: f64 = 40.0;
/// Elevation of the evenly spaced fixed view set, degrees.
pub const FIXED_ELEVATION_DEG: f64 = 30.0;
/// Default vertical field of view, degrees.
pub const DEFAULT_FOV_Y_DEG: f64 = 49.1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraPose {
    elevation: f64,
    azimuth: f64,
    distance: f64,
}

impl CameraPose {
    /// Angles in radians. Azimuth is wrapped into `[0, 2pi)`.
    pub fn new(elevation: f64, azimuth: f64, distance: f64) -> Result<Self> {
        if !(elevation.is_finite() && azimuth.is_finite() && distance.is_finite()) {
            return Err(Error::InvalidPose("non-finite component".into()));
        }
        if distance <= 0.0 {
            return Err(Error::InvalidPose(format!("distance {distance} must be > 0")));
        }
        if elevation.abs() > PI / 2.0 {
            return Err(Error::InvalidPose(format!(
                "elevation {} deg outside [-90, 90]",
                elevation.to_degrees()
            )));
        }
        Ok(Self {
            elevation,
            azimuth: wrap_to_2pi(azimuth),
            distance,
        })
    }

    pub fn from_degrees(elevation_deg: f64, azimuth_deg: f64, distance: f64) -> Result<Self> {
        Self::new(elevation_deg.to_radians(), azimuth_deg.to_radians(), distance)
    }

    pub fn elevation(&self) -> f64 {
        self.elevation
    }

    pub fn azimuth(&self) -> f64 {
        self.azimuth
    }

    pub fn distance(&self) -> f64 {
        self.distance
    }

    pub fn position(&self) -> Vector3<f64> {
        let (se, ce) = self.elevation.sin_cos();
        let (sa, ca) = self.azimuth.sin_cos();
        self.distance * Vector3::new(ce * ca, ce * sa, se)
    }

    pub fn to_record(&self) -> PoseRecord {
        PoseRecord {
            elevation_deg: self.elevation.to_degrees(),
            azimuth_deg: self.azimuth.to_degrees(),
            distance: self.distance,
        }
    }

    /// The pose as it reads back from its on-disk degree record.
    pub fn canonical(&self) -> Self {
        self.to_record()
            .to_pose()
            .expect("a valid pose stays valid through its record")
    }
}

/// On-disk pose: degrees, not radians.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseRecord {
    pub elevation_deg: f64,
    pub azimuth_deg: f64,
    pub distance: f64,
}

impl PoseRecord {
    pub fn to_pose(&self) -> Result<CameraPose> {
        CameraPose::from_degrees(self.elevation_deg, self.azimuth_deg, self.distance)
    }
}

/// Target pose expressed relative to a reference pose.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelativePose {
    pub d_elevation: f64,
    /// Wrapped to `(-pi, pi]`.
    pub d_azimuth: f64,
    pub distance: f64,
}

impl RelativePose {
    /// The pose of the reference slot: zero elevation and azimuth offsets.
    pub fn zero(distance: f64) -> Self {
        Self {
            d_elevation: 0.0,
            d_azimuth: 0.0,
            distance,
        }
    }

    pub fn from_degrees(d_elevation_deg: f64, d_azimuth_deg: f64, distance: f64) -> Self {
        Self {
            d_elevation: d_elevation_deg.to_radians(),
            d_azimuth: wrap_to_pi(d_azimuth_deg.to_radians()),
            distance,
        }
    }

    pub fn is_zero_angle(&self) -> bool {
        self.d_elevation == 0.0 && self.d_azimuth == 0.0
    }
}

pub fn wrap_to_2pi(angle: f64) -> f64 {
    let a = angle.rem_euclid(TAU);
    // rem_euclid can round up to exactly TAU for tiny negative inputs.
    if a >= TAU {
        0.0
    } else {
        a
    }
}

/// Wraps into `(-pi, pi]`.
pub fn wrap_to_pi(angle: f64) -> f64 {
    let a = wrap_to_2pi(angle);
    if a > PI {
        a - TAU
    } else {
        a
    }
}

/// Camera-to-world matrix; the camera looks at the origin.
pub fn pose_to_c2w(pose: &CameraPose) -> Result<Matrix4<f64>> {
    if pose.elevation.cos().abs() < 1e-9 {
        return Err(Error::DegenerateUp {
            elevation_deg: pose.elevation.to_degrees(),
        });
    }
    let origin = pose.position();
    let z_axis = origin.normalize();
    let up = Vector3::z();
    let x_axis = up.cross(&z_axis).normalize();
    let y_axis = z_axis.cross(&x_axis);
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 1>(0, 0).copy_from(&x_axis);
    m.fixed_view_mut::<3, 1>(0, 1).copy_from(&y_axis);
    m.fixed_view_mut::<3, 1>(0, 2).copy_from(&z_axis);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&origin);
    Ok(m)
}

/// `(theta_n - theta_r, wrap(phi_n - phi_r), d)`; both poses must share a distance.
pub fn relative_pose(reference: &CameraPose, target: &CameraPose) -> Result<RelativePose> {
    ensure!(
        reference.distance == target.distance,
        "relative pose needs equal distances, got {} and {}",
        reference.distance,
        target.distance
    );
    Ok(RelativePose {
        d_elevation: target.elevation - reference.elevation,
        d_azimuth: wrap_to_pi(target.azimuth - reference.azimuth),
        distance: target.distance,
    })
}

/// Elevation uniform in [-10, 40] degrees, azimuth uniform in [0, 360).
pub fn sample_random_pose<R: Rng + ?Sized>(rng: &mut R) -> CameraPose {
    let el = rng.random_range(RANDOM_ELEVATION_MIN_DEG..=RANDOM_ELEVATION_MAX_DEG);
    let az = rng.random_range(0.0..360.0);
    CameraPose::from_degrees(el, az, CAMERA_DISTANCE).expect("sampled pose in range")
}

/// `n` poses at 30 degrees elevation with azimuths `k * 360 / n`.
pub fn fixed_view_set(n_views: usize) -> Result<Vec<CameraPose>> {
    ensure!(n_views >= 1, "fixed_view_set needs at least one view");
    let step = 360.0 / n_views as f64;
    Ok((0..n_views)
        .map(|k| {
            CameraPose::from_degrees(FIXED_ELEVATION_DEG, k as f64 * step, CAMERA_DISTANCE)
                .expect("fixed view in range")
        })
        .collect())
}

#[derive(Clone, Debug)]
pub struct ViewFrame {
    pub pose: CameraPose,
    pub c2w: Matrix4<f64>,
    pub fov_y: f64,
    pub height: usize,
    pub width: usize,
}

impl ViewFrame {
    pub fn new(pose: CameraPose, fov_y: f64, height: usize, width: usize) -> Result<Self> {
        ensure!(height >= 1 && width >= 1, "resolution must be at least 1x1");
        ensure!(fov_y > 0.0 && fov_y < PI, "fov_y must lie in (0, pi)");
        Ok(Self {
            c2w: pose_to_c2w(&pose)?,
            pose,
            fov_y,
            height,
            width,
        })
    }

    pub fn square(pose: CameraPose, resolution: usize) -> Result<Self> {
        Self::new(pose, DEFAULT_FOV_Y_DEG.to_radians(), resolution, resolution)
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.c2w.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn origin(&self) -> Vector3<f64> {
        self.c2w.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Unit vector the camera looks along (camera -z in world space).
    pub fn view_axis(&self) -> Vector3<f64> {
        -self.c2w.fixed_view::<3, 1>(0, 2).into_owned()
    }
}

/// Per-pixel rays in row-major pixel order.
#[derive(Clone, Debug)]
pub struct Rays {
    pub origin: Vector3<f64>,
    pub directions: Vec<Vector3<f64>>,
    pub height: usize,
    pub width: usize,
}

/// Pinhole rays through pixel centers.
pub fn generate_rays(frame: &ViewFrame) -> Rays {
    let (h, w) = (frame.height, frame.width);
    let tan_half = (frame.fov_y / 2.0).tan();
    let aspect = w as f64 / h as f64;
    let rot = frame.rotation();
    let mut directions = Vec::with_capacity(h * w);
    for i in 0..h {
        let v = 1.0 - 2.0 * (i as f64 + 0.5) / h as f64;
        for j in 0..w {
            let u = 2.0 * (j as f64 + 0.5) / w as f64 - 1.0;
            let cam = Vector3::new(u * tan_half * aspect, v * tan_half, -1.0);
            directions.push((rot * cam).normalize());
        }
    }
    Rays {
        origin: frame.origin(),
        directions,
        height: h,
        width: w,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::substream;
    use proptest::prelude::*;

    fn assert_vec_close(a: Vector3<f64>, b: [f64; 3], tol: f64) {
        for k in 0..3 {
            assert!((a[k] - b[k]).abs() < tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn axis_aligned_origins() {
        let f = pose_to_c2w(&CameraPose::new(0.0, 0.0, 1.5).unwrap()).unwrap();
        assert_vec_close(f.fixed_view::<3, 1>(0, 3).into_owned(), [1.5, 0.0, 0.0], 1e-12);
        let view = -f.fixed_view::<3, 1>(0, 2).into_owned();
        assert_vec_close(view, [-1.0, 0.0, 0.0], 1e-12);

        let f = pose_to_c2w(&CameraPose::new(0.0, PI / 2.0, 1.5).unwrap()).unwrap();
        assert_vec_close(f.fixed_view::<3, 1>(0, 3).into_owned(), [0.0, 1.5, 0.0], 1e-12);
    }

    #[test]
    fn oblique_origin_matches_spherical_formula() {
        let (el, az, d) = (30f64.to_radians(), 45f64.to_radians(), 1.5);
        let oracle = [d * el.cos() * az.cos(), d * el.cos() * az.sin(), d * el.sin()];
        let f = pose_to_c2w(&CameraPose::new(el, az, d).unwrap()).unwrap();
        assert_vec_close(f.fixed_view::<3, 1>(0, 3).into_owned(), oracle, 1e-12);
        assert_vec_close(f.fixed_view::<3, 1>(0, 3).into_owned(), [0.9186, 0.9186, 0.75], 1e-4);
    }

    #[test]
    fn pole_is_degenerate() {
        let pose = CameraPose::new(PI / 2.0, 0.0, 1.5).unwrap();
        assert!(matches!(pose_to_c2w(&pose), Err(Error::DegenerateUp { .. })));
    }

    #[test]
    fn pose_validation() {
        assert!(CameraPose::new(0.0, 0.0, 0.0).is_err());
        assert!(CameraPose::new(2.0, 0.0, 1.0).is_err());
        let p = CameraPose::new(0.1, -0.5, 1.0).unwrap();
        assert!((p.azimuth() - (TAU - 0.5)).abs() < 1e-12);
    }

    /// Minimal-magnitude representative of `a` modulo 2pi, preferring +pi.
    fn brute_force_wrap(a: f64) -> f64 {
        let mut best = f64::INFINITY;
        for k in -3..=3 {
            let c = a + k as f64 * TAU;
            if c.abs() < best.abs() - 1e-12 || ((c.abs() - best.abs()).abs() <= 1e-12 && c > best) {
                best = c;
            }
        }
        best
    }

    #[test]
    fn relative_pose_examples() {
        let p = CameraPose::from_degrees(10.0, 50.0, 1.5).unwrap();
        let r = relative_pose(&p, &p).unwrap();
        assert_eq!((r.d_elevation, r.d_azimuth, r.distance), (0.0, 0.0, 1.5));

        let q = CameraPose::from_degrees(30.0, 90.0, 1.5).unwrap();
        let r = relative_pose(&p, &q).unwrap();
        assert!((r.d_elevation.to_degrees() - 20.0).abs() < 1e-9);
        assert!((r.d_azimuth.to_degrees() - 40.0).abs() < 1e-9);

        let a = CameraPose::from_degrees(0.0, 350.0, 1.5).unwrap();
        let b = CameraPose::from_degrees(0.0, 10.0, 1.5).unwrap();
        let r = relative_pose(&a, &b).unwrap();
        let oracle = brute_force_wrap(b.azimuth() - a.azimuth());
        assert!((r.d_azimuth - oracle).abs() < 1e-12);
        assert!((r.d_azimuth.to_degrees() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn relative_pose_rejects_distance_mismatch() {
        let a = CameraPose::from_degrees(0.0, 0.0, 1.5).unwrap();
        let b = CameraPose::from_degrees(0.0, 0.0, 2.0).unwrap();
        assert!(matches!(relative_pose(&a, &b), Err(Error::Contract(_))));
    }

    #[test]
    fn random_pose_distribution() {
        let mut rng = substream(1, "camera-test", 0);
        let n = 100_000;
        let (mut lo, mut hi, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
        for _ in 0..n {
            let p = sample_random_pose(&mut rng);
            let e = p.elevation().to_degrees();
            lo = lo.min(e);
            hi = hi.max(e);
            sum += e;
            assert_eq!(p.distance(), CAMERA_DISTANCE);
            assert!((0.0..TAU).contains(&p.azimuth()));
        }
        assert!(lo >= -10.0 - 1e-9 && hi <= 40.0 + 1e-9, "range [{lo}, {hi}]");
        assert!((sum / n as f64 - 15.0).abs() < 0.5);
    }

    #[test]
    fn random_pose_is_seeded() {
        let a = sample_random_pose(&mut substream(3, "x", 0));
        let b = sample_random_pose(&mut substream(3, "x", 0));
        assert_eq!(a, b);
    }

    #[test]
    fn fixed_views() {
        let four = fixed_view_set(4).unwrap();
        let az: Vec<f64> = four.iter().map(|p| p.azimuth().to_degrees()).collect();
        for (a, e) in az.iter().zip([0.0, 90.0, 180.0, 270.0]) {
            assert!((a - e).abs() < 1e-9);
        }
        assert!(four.iter().all(|p| (p.elevation().to_degrees() - 30.0).abs() < 1e-12));
        assert_eq!(fixed_view_set(1).unwrap()[0].azimuth(), 0.0);
        let sixteen = fixed_view_set(16).unwrap();
        let gap = sixteen[1].azimuth().to_degrees() - sixteen[0].azimuth().to_degrees();
        assert!((gap - 22.5).abs() < 1e-9);
        assert!(fixed_view_set(0).is_err());
        for n in 1..40usize {
            let s: f64 = fixed_view_set(n).unwrap().iter().map(|p| p.azimuth().to_degrees()).sum();
            let expected = (n * (n - 1)) as f64 / 2.0 * (360.0 / n as f64);
            assert!((s - expected).abs() < 1e-6);
        }
    }

    #[test]
    fn single_pixel_ray_is_view_axis() {
        let pose = CameraPose::from_degrees(20.0, 70.0, 1.5).unwrap();
        let frame = ViewFrame::square(pose, 1).unwrap();
        let rays = generate_rays(&frame);
        assert_eq!(rays.directions.len(), 1);
        assert!((rays.directions[0] - frame.view_axis()).norm() < 1e-12);
        assert!((rays.directions[0] + pose.position().normalize()).norm() < 1e-12);
    }

    #[test]
    fn ray_norms_and_corner_angle() {
        let pose = CameraPose::from_degrees(-5.0, 200.0, 1.5).unwrap();
        let frame = ViewFrame::new(pose, 49.1f64.to_radians(), 9, 13).unwrap();
        let rays = generate_rays(&frame);
        assert!(rays.directions.iter().all(|d| (d.norm() - 1.0).abs() < 1e-6));
        // Closed-form pinhole: corner pixel center sits at normalized image
        // coordinates (u, v); its angle to the axis is atan(|(u t a, v t)|).
        let t = (frame.fov_y / 2.0).tan();
        let a = 13.0 / 9.0;
        let u = 2.0 * 0.5 / 13.0 - 1.0;
        let v = 1.0 - 2.0 * 0.5 / 9.0;
        let expected = ((u * t * a).powi(2) + (v * t).powi(2)).sqrt().atan();
        let got = rays.directions[0].dot(&frame.view_axis()).clamp(-1.0, 1.0).acos();
        assert!((got - expected).abs() < 1e-9);
        assert!(generate_rays(&ViewFrame::square(pose, 7).unwrap()).directions[24]
            .dot(&frame.view_axis())
            > 1.0 - 1e-12);
    }

    proptest! {
        #[test]
        fn c2w_rotation_is_proper(el in -1.5f64..1.5, az in -10.0f64..10.0) {
            let pose = CameraPose::new(el, az, 1.5).unwrap();
            let frame = ViewFrame::square(pose, 4).unwrap();
            let r = frame.rotation();
            let rtr = r.transpose() * r;
            prop_assert!((rtr - Matrix3::identity()).abs().max() < 1e-6);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-6);
            prop_assert!((frame.origin().norm() - 1.5).abs() < 1e-9);
            // -z axis points at the origin.
            prop_assert!((frame.view_axis() + frame.origin().normalize()).norm() < 1e-9);
        }

        #[test]
        fn relative_pose_identity_and_antisymmetry(
            e1 in -0.17f64..0.7, a1 in 0.0f64..TAU, e2 in -0.17f64..0.7, a2 in 0.0f64..TAU
        ) {
            let p = CameraPose::new(e1, a1, 1.5).unwrap();
            let q = CameraPose::new(e2, a2, 1.5).unwrap();
            let id = relative_pose(&p, &p).unwrap();
            prop_assert_eq!((id.d_elevation, id.d_azimuth, id.distance), (0.0, 0.0, 1.5));
            let pq = relative_pose(&p, &q).unwrap();
            let qp = relative_pose(&q, &p).unwrap();
            prop_assert_eq!(pq.d_elevation, -qp.d_elevation);
            // Antisymmetric except on the +pi boundary, which both sides keep as +pi.
            if (pq.d_azimuth.abs() - PI).abs() > 1e-9 {
                prop_assert!((pq.d_azimuth + qp.d_azimuth).abs() < 1e-12);
            }
            prop_assert!((pq.d_azimuth - brute_force_wrap(q.azimuth() - p.azimuth())).abs() < 1e-9);
        }
    }
}
