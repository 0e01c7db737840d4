//! Rigid transforms, viewpoint perturbation sampling and the rectified
//! pinhole stereo camera model.
//!
//! Conventions used throughout the crate:
//! - pixel coordinates are `(u, v)` = (row, column), origin at the top-left
//!   pixel center, `u` growing downward;
//! - camera frames are x-right, y-down, z-forward, so `u` maps to y and `v`
//!   maps to x;
//! - the world frame is z-up;
//! - a [`Pose`] maps points of its `from` frame into its `to` frame,
//!   `p_to = R * p_from + t`.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance for the orthonormality check on rotation matrices.
const ROTATION_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("frame mismatch: expected `{expected}`, found `{found}`")]
    FrameMismatch { expected: String, found: String },
    #[error("matrix is not a rotation (max deviation {deviation:.3e})")]
    NotARotation { deviation: f64 },
    #[error("point at or behind the camera plane (depth {depth:.6})")]
    BehindCamera { depth: f64 },
    #[error("point inside the near clip (depth {depth:.6} < {near:.6})")]
    InsideNearClip { depth: f64, near: f64 },
    #[error("search bounds must be non-negative, got ({translation_m}, {rotation_deg})")]
    InvalidBounds {
        translation_m: f64,
        rotation_deg: f64,
    },
    #[error("invalid stereo rig: {0}")]
    InvalidRig(String),
}

/// Left or right camera of a rectified stereo pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CameraSide {
    Left,
    Right,
}

/// Fractional pixel coordinate, `u` = row (vertical), `v` = column (horizontal).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelCoord {
    pub u: f64,
    pub v: f64,
}

impl PixelCoord {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }
}

/// Translation and rotation search bounds for viewpoint randomization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchBounds {
    /// Translation bound in meters (half-range of the sampled magnitude).
    pub translation_m: f64,
    /// Rotation bound in degrees (half-range of the sampled angle).
    pub rotation_deg: f64,
}

impl SearchBounds {
    pub fn new(translation_m: f64, rotation_deg: f64) -> Result<Self, GeometryError> {
        if translation_m < 0.0 || rotation_deg < 0.0 {
            return Err(GeometryError::InvalidBounds {
                translation_m,
                rotation_deg,
            });
        }
        Ok(Self {
            translation_m,
            rotation_deg,
        })
    }

    pub fn zero() -> Self {
        Self {
            translation_m: 0.0,
            rotation_deg: 0.0,
        }
    }

    /// Shrinks both bounds by `gamma`, exactly.
    pub fn scaled(&self, gamma: f64) -> Self {
        Self {
            translation_m: gamma * self.translation_m,
            rotation_deg: gamma * self.rotation_deg,
        }
    }
}

/// Rigid transform between two labeled frames.
///
/// Frame labels are carried and checked at runtime; composing poses whose
/// frames do not chain is an error rather than a silent bug.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PoseJson", into = "PoseJson")]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    from: String,
    to: String,
}

/// Wire format: rotation as 9 row-major numbers.
#[derive(Serialize, Deserialize)]
struct PoseJson {
    rotation: [f64; 9],
    translation: [f64; 3],
    from: String,
    to: String,
}

impl From<Pose> for PoseJson {
    fn from(p: Pose) -> Self {
        let r = p.rotation;
        PoseJson {
            rotation: [
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
            ],
            translation: [p.translation.x, p.translation.y, p.translation.z],
            from: p.from,
            to: p.to,
        }
    }
}

impl TryFrom<PoseJson> for Pose {
    type Error = GeometryError;

    fn try_from(j: PoseJson) -> Result<Self, Self::Error> {
        Pose::new(
            Matrix3::from_row_slice(&j.rotation),
            Vector3::new(j.translation[0], j.translation[1], j.translation[2]),
            &j.from,
            &j.to,
        )
    }
}

fn rotation_deviation(r: &Matrix3<f64>) -> f64 {
    let gram = r.transpose() * r - Matrix3::identity();
    let ortho = gram.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    ortho.max((r.determinant() - 1.0).abs())
}

impl Pose {
    /// Builds a pose, validating that `rotation` is orthonormal with
    /// determinant +1 to within 1e-9.
    pub fn new(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        from: &str,
        to: &str,
    ) -> Result<Self, GeometryError> {
        let deviation = rotation_deviation(&rotation);
        if deviation > ROTATION_TOL {
            return Err(GeometryError::NotARotation { deviation });
        }
        Ok(Self {
            rotation,
            translation,
            from: from.to_owned(),
            to: to.to_owned(),
        })
    }

    /// Internal constructor for products of already-validated rotations.
    pub(crate) fn rigid_unchecked(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        from: String,
        to: String,
    ) -> Self {
        debug_assert!(rotation_deviation(&rotation) < 1e-6);
        Self {
            rotation,
            translation,
            from,
            to,
        }
    }

    pub fn identity(frame: &str) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            from: frame.to_owned(),
            to: frame.to_owned(),
        }
    }

    /// Rotation by `angle_rad` about `axis` (normalized internally) plus a
    /// translation, from Rodrigues' formula.
    pub fn from_axis_angle(
        axis: Vector3<f64>,
        angle_rad: f64,
        translation: Vector3<f64>,
        from: &str,
        to: &str,
    ) -> Self {
        Self::rigid_unchecked(
            rotation_from_axis_angle(axis, angle_rad),
            translation,
            from.to_owned(),
            to.to_owned(),
        )
    }

    /// Camera pose looking from `eye` toward `target` in a z-up world,
    /// mapping world points into the camera frame.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        world: &str,
        camera: &str,
    ) -> Result<Self, GeometryError> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or(GeometryError::InvalidRig("look_at: eye == target".into()))?;
        let up = Vector3::z();
        let mut right = forward.cross(&up);
        if right.norm() < 1e-9 {
            // Looking straight up or down; pick an arbitrary horizontal right.
            right = Vector3::x();
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation =
            Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -rotation * eye;
        Ok(Self::rigid_unchecked(
            rotation,
            translation,
            world.to_owned(),
            camera.to_owned(),
        ))
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn from_frame(&self) -> &str {
        &self.from
    }

    pub fn to_frame(&self) -> &str {
        &self.to
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn rotate_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// Camera center expressed in the `from` frame (for camera poses, the
    /// eye position in the world).
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
            from: self.to.clone(),
            to: self.from.clone(),
        }
    }

    /// Angle of the rotation part, in radians.
    pub fn rotation_angle(&self) -> f64 {
        rotation_angle_of(&self.rotation)
    }
}

/// Composes `a` then `b`; requires `a.to == b.from` and chains the labels.
pub fn compose(a: &Pose, b: &Pose) -> Result<Pose, GeometryError> {
    if a.to != b.from {
        return Err(GeometryError::FrameMismatch {
            expected: a.to.clone(),
            found: b.from.clone(),
        });
    }
    Ok(Pose {
        rotation: b.rotation * a.rotation,
        translation: b.rotation * a.translation + b.translation,
        from: a.from.clone(),
        to: b.to.clone(),
    })
}

/// Rotation angle via atan2 of the skew part's norm against the trace,
/// which stays accurate for angles near zero where acos saturates.
pub fn rotation_angle_of(r: &Matrix3<f64>) -> f64 {
    let sin2 = Vector3::new(
        r[(2, 1)] - r[(1, 2)],
        r[(0, 2)] - r[(2, 0)],
        r[(1, 0)] - r[(0, 1)],
    )
    .norm();
    let cos2 = r.trace() - 1.0;
    (sin2).atan2(cos2)
}

pub fn rotation_from_axis_angle(axis: Vector3<f64>, angle_rad: f64) -> Matrix3<f64> {
    let a = axis.normalize();
    let (s, c) = angle_rad.sin_cos();
    let k = Matrix3::new(0.0, -a.z, a.y, a.z, 0.0, -a.x, -a.y, a.x, 0.0);
    Matrix3::identity() + k * s + k * k * (1.0 - c)
}

/// Relative transform mapping `a`'s target frame onto `b`'s, for two poses
/// sharing the same source frame: the camera-side delta `M_b * M_a^-1`.
///
/// When `b = compose(a, d)` for a frame-preserving perturbation `d`, this
/// recovers `d` exactly, which is what the search-bound audits rely on.
pub fn relative_pose(a: &Pose, b: &Pose) -> Result<Pose, GeometryError> {
    if a.from != b.from {
        return Err(GeometryError::FrameMismatch {
            expected: a.from.clone(),
            found: b.from.clone(),
        });
    }
    compose(&a.inverse(), b)
}

/// Translation (meters) and rotation (degrees) magnitudes of
/// `inverse(truth) * estimate`; both poses must relate the same frame pair.
pub fn pose_error(truth: &Pose, estimate: &Pose) -> Result<(f64, f64), GeometryError> {
    if truth.from != estimate.from || truth.to != estimate.to {
        return Err(GeometryError::FrameMismatch {
            expected: format!("{}->{}", truth.from, truth.to),
            found: format!("{}->{}", estimate.from, estimate.to),
        });
    }
    let rel_rotation = truth.rotation.transpose() * estimate.rotation;
    let translation = (estimate.translation - truth.translation).norm();
    Ok((translation, rotation_angle_of(&rel_rotation).to_degrees()))
}

/// Unit vector uniformly distributed on the sphere (two RNG draws).
pub fn sample_unit_vector<R: Rng>(rng: &mut R) -> Vector3<f64> {
    let z: f64 = rng.gen_range(-1.0..=1.0);
    let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let r = (1.0 - z * z).max(0.0).sqrt();
    Vector3::new(r * phi.cos(), r * phi.sin(), z)
}

fn tangent_basis(normal: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let n = normal.normalize();
    let seed = if n.x.abs() < 0.9 {
        Vector3::x()
    } else {
        Vector3::y()
    };
    let e1 = (seed - n * seed.dot(&n)).normalize();
    let e2 = n.cross(&e1);
    (e1, e2)
}

/// Draws a random rigid perturbation within `bounds`.
///
/// The rotation axis is uniform on the unit sphere with the angle uniform on
/// `[-r, r]`; the translation magnitude is uniform on `[0, t]` with a
/// direction uniform on the sphere, or uniform within the plane orthogonal to
/// `surface_normal` when `planar` is set (`surface_normal` must then be
/// expressed in `frame`). Zero bounds yield the exact identity.
///
/// The returned pose is frame-preserving (`from == to == frame`) so it can be
/// composed onto any pose whose `to` frame matches.
pub fn sample_perturbation<R: Rng>(
    bounds: &SearchBounds,
    surface_normal: &Vector3<f64>,
    planar: bool,
    frame: &str,
    rng: &mut R,
) -> Pose {
    let axis = sample_unit_vector(rng);
    let r = bounds.rotation_deg.to_radians();
    let angle: f64 = rng.gen_range(-r..=r);
    let rotation = rotation_from_axis_angle(axis, angle);

    let direction = if planar {
        let (e1, e2) = tangent_basis(surface_normal);
        let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        e1 * theta.cos() + e2 * theta.sin()
    } else {
        sample_unit_vector(rng)
    };
    let magnitude: f64 = rng.gen_range(0.0..=bounds.translation_m);

    Pose::rigid_unchecked(
        rotation,
        direction * magnitude,
        frame.to_owned(),
        frame.to_owned(),
    )
}

/// Rectified pinhole stereo model; both cameras share intrinsics and are
/// row-aligned, the right camera offset by `baseline_m` along camera +x.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StereoRig {
    /// Focal length in pixels (identical for rows and columns).
    pub focal_px: f64,
    /// Principal point as (row, col).
    pub principal: PixelCoord,
    /// Stereo baseline in meters.
    pub baseline_m: f64,
    /// Image height in pixels.
    pub rows: usize,
    /// Image width in pixels.
    pub cols: usize,
    /// Near clip depth in meters.
    pub near_m: f64,
    /// Far clip depth in meters.
    pub far_m: f64,
}

impl StereoRig {
    pub fn new(
        focal_px: f64,
        principal: PixelCoord,
        baseline_m: f64,
        rows: usize,
        cols: usize,
        near_m: f64,
        far_m: f64,
    ) -> Result<Self, GeometryError> {
        let rig = Self {
            focal_px,
            principal,
            baseline_m,
            rows,
            cols,
            near_m,
            far_m,
        };
        rig.validate()?;
        Ok(rig)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.focal_px <= 0.0 {
            return Err(GeometryError::InvalidRig("focal must be positive".into()));
        }
        if self.baseline_m <= 0.0 {
            return Err(GeometryError::InvalidRig(
                "baseline must be positive".into(),
            ));
        }
        if !(0.0 < self.near_m && self.near_m < self.far_m) {
            return Err(GeometryError::InvalidRig(
                "clip depths must satisfy 0 < near < far".into(),
            ));
        }
        if self.principal.u < 0.0
            || self.principal.u > (self.rows - 1) as f64
            || self.principal.v < 0.0
            || self.principal.v > (self.cols - 1) as f64
        {
            return Err(GeometryError::InvalidRig(
                "principal point outside the image".into(),
            ));
        }
        Ok(())
    }

    /// Horizontal offset applied to the camera-frame x coordinate for `side`.
    pub fn side_offset(&self, side: CameraSide) -> f64 {
        match side {
            CameraSide::Left => 0.0,
            CameraSide::Right => self.baseline_m,
        }
    }

    pub fn contains(&self, px: &PixelCoord) -> bool {
        px.u >= 0.0
            && px.u <= (self.rows - 1) as f64
            && px.v >= 0.0
            && px.v <= (self.cols - 1) as f64
    }
}

/// Projects a camera-frame point into the chosen camera of the rig.
///
/// Returns the pixel coordinate and whether it falls inside the image.
pub fn project(
    point_cam: &Vector3<f64>,
    rig: &StereoRig,
    side: CameraSide,
) -> Result<(PixelCoord, bool), GeometryError> {
    let z = point_cam.z;
    if z <= 0.0 {
        return Err(GeometryError::BehindCamera { depth: z });
    }
    if z < rig.near_m {
        return Err(GeometryError::InsideNearClip {
            depth: z,
            near: rig.near_m,
        });
    }
    let x = point_cam.x - rig.side_offset(side);
    let px = PixelCoord {
        u: rig.principal.u + rig.focal_px * point_cam.y / z,
        v: rig.principal.v + rig.focal_px * x / z,
    };
    let in_frame = rig.contains(&px);
    Ok((px, in_frame))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::Matrix4;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn test_rig() -> StereoRig {
        StereoRig::new(
            1000.0,
            PixelCoord::new(480.0, 640.0),
            0.2,
            960,
            1280,
            0.1,
            50.0,
        )
        .unwrap()
    }

    fn random_pose(rng: &mut ChaCha8Rng, from: &str, to: &str) -> Pose {
        let axis = sample_unit_vector(rng);
        let angle = rng.gen_range(-3.0..3.0);
        let t = Vector3::new(
            rng.gen_range(-5.0..5.0),
            rng.gen_range(-5.0..5.0),
            rng.gen_range(-5.0..5.0),
        );
        Pose::from_axis_angle(axis, angle, t, from, to)
    }

    fn homogeneous(p: &Pose) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(p.rotation());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(p.translation());
        m
    }

    #[test]
    fn compose_with_identity_is_identity_operation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_pose(&mut rng, "a", "b");
        let id = Pose::identity("b");
        let q = compose(&p, &id).unwrap();
        assert_eq!(q.rotation(), p.rotation());
        assert_eq!(q.translation(), p.translation());
    }

    #[test]
    fn compose_with_inverse_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_pose(&mut rng, "a", "b");
        let q = compose(&p, &p.inverse()).unwrap();
        assert!(rotation_deviation(q.rotation()) < 1e-12);
        assert!(q.translation().norm() < 1e-12);
        assert_eq!(q.from_frame(), "a");
        assert_eq!(q.to_frame(), "a");
    }

    #[test]
    fn compose_matches_homogeneous_matrix_product() {
        // Oracle: direct 4x4 homogeneous multiplication.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let a = random_pose(&mut rng, "a", "b");
            let b = random_pose(&mut rng, "b", "c");
            let c = compose(&a, &b).unwrap();
            let m = homogeneous(&b) * homogeneous(&a);
            assert_abs_diff_eq!(homogeneous(&c), m, epsilon = 1e-12);
        }
    }

    #[test]
    fn compose_rejects_frame_mismatch() {
        let a = Pose::identity("a");
        let b = Pose::identity("b");
        assert!(matches!(
            compose(&a, &b),
            Err(GeometryError::FrameMismatch { .. })
        ));
    }

    #[test]
    fn rotation_stays_orthonormal_over_long_chains() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let step = sample_perturbation(
            &SearchBounds::new(0.01, 0.5).unwrap(),
            &Vector3::z(),
            false,
            "f",
            &mut rng,
        );
        let mut acc = Pose::identity("f");
        for _ in 0..1_000_000 {
            acc = compose(&acc, &step).unwrap();
        }
        assert!(rotation_deviation(acc.rotation()) < 1e-6);
    }

    #[test]
    fn project_on_axis_hits_principal_point() {
        let rig = test_rig();
        let (px, in_frame) = project(&Vector3::new(0.0, 0.0, 3.7), &rig, CameraSide::Left).unwrap();
        assert_eq!(px, rig.principal);
        assert!(in_frame);
    }

    #[test]
    fn project_matches_pinhole_equation_by_hand() {
        // (0.1, 0, 2.0) m at focal 1000: v = 640 + 1000*0.1/2 = 690, u = 480.
        let rig = test_rig();
        let (px, _) = project(&Vector3::new(0.1, 0.0, 2.0), &rig, CameraSide::Left).unwrap();
        assert_abs_diff_eq!(px.v, 690.0, epsilon = 1e-12);
        assert_abs_diff_eq!(px.u, 480.0, epsilon = 1e-12);
        // Right camera sees the point shifted by the disparity f*b/z = 100 px.
        let (pxr, _) = project(&Vector3::new(0.1, 0.0, 2.0), &rig, CameraSide::Right).unwrap();
        assert_abs_diff_eq!(px.v - pxr.v, 100.0, epsilon = 1e-12);
        assert_abs_diff_eq!(pxr.u, px.u, epsilon = 1e-12);
    }

    #[test]
    fn project_rejects_points_behind_camera() {
        let rig = test_rig();
        assert!(matches!(
            project(&Vector3::new(0.0, 0.0, 0.0), &rig, CameraSide::Left),
            Err(GeometryError::BehindCamera { .. })
        ));
        assert!(matches!(
            project(&Vector3::new(0.0, 0.0, -2.0), &rig, CameraSide::Left),
            Err(GeometryError::BehindCamera { .. })
        ));
    }

    #[test]
    fn zero_bounds_sample_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = sample_perturbation(&SearchBounds::zero(), &Vector3::z(), false, "f", &mut rng);
        assert_eq!(p.rotation(), &Matrix3::identity());
        assert_eq!(p.translation(), &Vector3::zeros());
    }

    #[test]
    fn perturbation_respects_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let bounds = SearchBounds::new(0.20, 1.5).unwrap();
        for _ in 0..10_000 {
            let p = sample_perturbation(&bounds, &Vector3::z(), false, "f", &mut rng);
            assert!(p.translation().norm() <= 0.20 + 1e-15);
            assert!(p.rotation_angle().to_degrees() <= 1.5 + 1e-12);
        }
    }

    #[test]
    fn planar_perturbation_stays_in_tangent_plane() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let bounds = SearchBounds::new(0.20, 1.5).unwrap();
        let normal = Vector3::z();
        for _ in 0..10_000 {
            let p = sample_perturbation(&bounds, &normal, true, "f", &mut rng);
            assert!(p.translation().dot(&normal).abs() < 1e-12);
        }
    }

    #[test]
    fn pose_error_identical_poses_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = random_pose(&mut rng, "w", "c");
        let (t, r) = pose_error(&p, &p).unwrap();
        assert_eq!(t, 0.0);
        assert!(r < 1e-6);
    }

    #[test]
    fn pose_error_pure_translation_offset() {
        let truth = Pose::identity("w");
        let est = Pose::new(Matrix3::identity(), Vector3::new(0.0, 0.05, 0.0), "w", "w").unwrap();
        let (t, r) = pose_error(&truth, &est).unwrap();
        assert_abs_diff_eq!(t, 0.05, epsilon = 1e-15);
        assert_abs_diff_eq!(r, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn pose_error_recovers_planted_perturbation() {
        // pose_error(P, P*D) must return exactly the magnitudes of D, where
        // D composes on the from-frame side.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let truth = random_pose(&mut rng, "w", "c");
            let bounds = SearchBounds::new(0.5, 10.0).unwrap();
            let d = sample_perturbation(&bounds, &Vector3::z(), false, "w", &mut rng);
            let est = compose(&d, &truth).unwrap();
            let (t, r) = pose_error(&truth, &est).unwrap();
            assert_abs_diff_eq!(t, d.translation().norm(), epsilon = 1e-9);
            assert_abs_diff_eq!(r, d.rotation_angle().to_degrees(), epsilon = 1e-7);
        }
    }

    #[test]
    fn relative_pose_recovers_camera_side_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let est = random_pose(&mut rng, "w", "c");
            let d = sample_perturbation(
                &SearchBounds::new(0.3, 5.0).unwrap(),
                &Vector3::z(),
                false,
                "c",
                &mut rng,
            );
            let v = compose(&est, &d).unwrap();
            let rel = relative_pose(&est, &v).unwrap();
            assert_abs_diff_eq!(
                (rel.translation() - d.translation()).norm(),
                0.0,
                epsilon = 1e-12
            );
            assert_abs_diff_eq!(rel.rotation_angle(), d.rotation_angle(), epsilon = 1e-9);
        }
    }

    #[test]
    fn pose_error_rejects_frame_mismatch() {
        let a = Pose::identity("a");
        let b = Pose::identity("b");
        assert!(pose_error(&a, &b).is_err());
    }

    #[test]
    fn pose_json_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let p = random_pose(&mut rng, "world", "camera");
        let json = serde_json::to_string(&p).unwrap();
        let q: Pose = serde_json::from_str(&json).unwrap();
        assert_eq!(p, q);
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["rotation"].as_array().unwrap().len(), 9);
        assert_eq!(v["from"], "world");
    }

    #[test]
    fn left_right_projections_share_rows() {
        let rig = test_rig();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let p = Vector3::new(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(0.5..20.0),
            );
            let (l, _) = project(&p, &rig, CameraSide::Left).unwrap();
            let (r, _) = project(&p, &rig, CameraSide::Right).unwrap();
            assert!((l.u - r.u).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn prop_pose_error_magnitudes_match_planted(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let truth = random_pose(&mut rng, "w", "c");
            let d = sample_perturbation(
                &SearchBounds::new(1.0, 45.0).unwrap(),
                &Vector3::z(),
                false,
                "w",
                &mut rng,
            );
            let est = compose(&d, &truth).unwrap();
            let (t, r) = pose_error(&truth, &est).unwrap();
            prop_assert!((t - d.translation().norm()).abs() < 1e-9);
            prop_assert!((r - d.rotation_angle().to_degrees()).abs() < 1e-7);
        }

        #[test]
        fn prop_projection_depth_positive_required(z in -5.0f64..5.0) {
            let rig = StereoRig::new(800.0, PixelCoord::new(240.0, 320.0), 0.1, 480, 640, 0.05, 100.0).unwrap();
            let res = project(&Vector3::new(0.3, -0.2, z), &rig, CameraSide::Right);
            if z <= 0.0 {
                prop_assert!(res.is_err());
            } else if z >= 0.05 {
                prop_assert!(res.is_ok());
            }
        }
    }
}
