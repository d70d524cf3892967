//! Rigid transforms, first-order error twists and skew algebra.
//!
//! Everything in the pose chains is expressed as a [`RigidTransform`] with
//! translations in millimetres and rotations stored as 3×3 matrices.

use nalgebra::{Matrix3, Matrix4, Quaternion, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Orthonormality / determinant tolerance enforced at construction.
pub const ROTATION_TOL: f64 = 1e-9;

/// Drift above which `compose` re-projects the product onto SO(3).
const REORTHO_DRIFT: f64 = 1e-12;

/// Quaternions read from files must be unit within this tolerance.
pub const QUATERNION_NORM_TOL: f64 = 1e-6;

/// Rotation magnitudes above this leave the first-order regime.
pub const SMALL_ANGLE_LIMIT_RAD: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("InvalidRotation: matrix is not a proper rotation (orthogonality error {orthogonality:e}, det {det})")]
    InvalidRotation { orthogonality: f64, det: f64 },
    #[error("InvalidQuaternion: norm {0} deviates from 1 by more than {QUATERNION_NORM_TOL}")]
    InvalidQuaternion(f64),
    #[error("NonFinite: transform contains a non-finite value")]
    NonFinite,
}

/// An SE(3) pose: `x ↦ rotation·x + translation` (translation in mm).
///
/// Serializes as a [`TransformRecord`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TransformRecord", into = "TransformRecord")]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

/// File form of a transform: unit quaternion `wxyz` and translation (mm).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformRecord {
    pub q_wxyz: [f64; 4],
    pub t_mm: [f64; 3],
}

impl TryFrom<TransformRecord> for RigidTransform {
    type Error = GeometryError;

    fn try_from(r: TransformRecord) -> Result<Self, GeometryError> {
        RigidTransform::from_quaternion_wxyz(r.q_wxyz, Vector3::from(r.t_mm))
    }
}

impl From<RigidTransform> for TransformRecord {
    fn from(t: RigidTransform) -> Self {
        Self { q_wxyz: t.quaternion_wxyz(), t_mm: t.translation.into() }
    }
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    /// Builds a transform, rejecting non-finite entries and improper rotations.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        if rotation.iter().chain(translation.iter()).any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        let orthogonality = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        let det = rotation.determinant();
        if orthogonality > ROTATION_TOL || (det - 1.0).abs() > ROTATION_TOL {
            return Err(GeometryError::InvalidRotation { orthogonality, det });
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self { rotation: Matrix3::identity(), translation }
    }

    pub fn from_rotation(rotation: Rotation3<f64>) -> Self {
        Self { rotation: *rotation.matrix(), translation: Vector3::zeros() }
    }

    pub fn from_parts(rotation: Rotation3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation: *rotation.matrix(), translation }
    }

    /// Rotation by `angle` radians about `axis` (need not be unit), then translation.
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let n = axis.norm();
        let rotation = if n == 0.0 { Rotation3::identity() } else { Rotation3::from_scaled_axis(axis * (angle / n)) };
        Self::from_parts(rotation, translation)
    }

    /// From a `wxyz` quaternion; the quaternion must be unit within
    /// [`QUATERNION_NORM_TOL`] and is normalized before conversion.
    pub fn from_quaternion_wxyz(q: [f64; 4], translation: Vector3<f64>) -> Result<Self, GeometryError> {
        if q.iter().chain(translation.iter()).any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        let quat = Quaternion::new(q[0], q[1], q[2], q[3]);
        let norm = quat.norm();
        if (norm - 1.0).abs() > QUATERNION_NORM_TOL {
            return Err(GeometryError::InvalidQuaternion(norm));
        }
        let unit = UnitQuaternion::from_quaternion(quat);
        Ok(Self { rotation: *unit.to_rotation_matrix().matrix(), translation })
    }

    /// Unit quaternion `[w, x, y, z]` with non-negative `w`.
    pub fn quaternion_wxyz(&self) -> [f64; 4] {
        let rot = Rotation3::from_matrix_unchecked(self.rotation);
        let q = UnitQuaternion::from_rotation_matrix(&rot);
        let q = if q.w < 0.0 { -q.into_inner() } else { q.into_inner() };
        [q.w, q.i, q.j, q.k]
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn rotation3(&self) -> Rotation3<f64> {
        Rotation3::from_matrix_unchecked(self.rotation)
    }

    /// `self · other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        let mut rotation = self.rotation * other.rotation;
        let drift = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        if drift > REORTHO_DRIFT {
            rotation = orthonormalize(&rotation);
        }
        RigidTransform { rotation, translation: self.rotation * other.translation + self.translation }
    }

    /// `(Rᵀ, −Rᵀ·t)`.
    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform { rotation: rt, translation: -(rt * self.translation) }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// Rotation angle in radians, in `[0, π]`.
    pub fn angle(&self) -> f64 {
        rotation_log(&self.rotation).norm()
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Largest absolute entry-wise difference of the homogeneous matrices.
    pub fn max_abs_diff(&self, other: &RigidTransform) -> f64 {
        (self.to_homogeneous() - other.to_homogeneous()).amax()
    }
}

impl std::ops::Mul for RigidTransform {
    type Output = RigidTransform;
    fn mul(self, rhs: RigidTransform) -> RigidTransform {
        self.compose(&rhs)
    }
}

impl std::ops::Mul<&RigidTransform> for &RigidTransform {
    type Output = RigidTransform;
    fn mul(self, rhs: &RigidTransform) -> RigidTransform {
        self.compose(rhs)
    }
}

/// Free function form of [`RigidTransform::compose`].
pub fn compose(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    a.compose(b)
}

/// Free function form of [`RigidTransform::inverse`].
pub fn invert(t: &RigidTransform) -> RigidTransform {
    t.inverse()
}

/// Nearest rotation matrix in the Frobenius sense (polar factor via SVD).
pub fn orthonormalize(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let d = (u * vt).determinant().signum();
    u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * vt
}

/// `[v]×`, so that `skew(v) * w == v.cross(&w)`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Exact rotation for an axis-angle vector (radians).
pub fn rotation_exp(alpha: &Vector3<f64>) -> Matrix3<f64> {
    *Rotation3::from_scaled_axis(*alpha).matrix()
}

/// Axis-angle vector of a rotation matrix (matrix logarithm).
///
/// Goes through the quaternion so that angles near 0 and near π keep full
/// precision (a trace-based `acos` loses half the digits for small angles).
pub fn rotation_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*r));
    let (w, v) = if q.w < 0.0 { (-q.w, -q.imag()) } else { (q.w, q.imag()) };
    let s = v.norm();
    if s == 0.0 {
        return Vector3::zeros();
    }
    v * (2.0 * s.atan2(w) / s)
}

/// First-order pose error: rotation `alpha` (rad, axis-angle) and translation
/// `epsilon` (mm).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ErrorTwist {
    pub alpha: Vector3<f64>,
    pub epsilon: Vector3<f64>,
}

impl ErrorTwist {
    pub fn new(alpha: Vector3<f64>, epsilon: Vector3<f64>) -> Self {
        Self { alpha, epsilon }
    }

    pub fn alpha_deg(&self) -> Vector3<f64> {
        self.alpha.map(f64::to_degrees)
    }

    /// False once `|alpha|` exceeds [`SMALL_ANGLE_LIMIT_RAD`].
    pub fn small_angle_valid(&self) -> bool {
        self.alpha.norm() <= SMALL_ANGLE_LIMIT_RAD
    }
}

/// Linearized error transform `[[I + [alpha]×, epsilon], [0, 1]]`.
///
/// Deliberately left as written (the rotation block is not orthonormal).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeltaTransform {
    pub matrix: Matrix4<f64>,
    pub small_angle_valid: bool,
}

pub fn delta_transform(e: &ErrorTwist) -> DeltaTransform {
    let mut matrix = Matrix4::identity();
    matrix.fixed_view_mut::<3, 3>(0, 0).copy_from(&(Matrix3::identity() + skew(&e.alpha)));
    matrix.fixed_view_mut::<3, 1>(0, 3).copy_from(&e.epsilon);
    DeltaTransform { matrix, small_angle_valid: e.small_angle_valid() }
}

impl DeltaTransform {
    pub fn rotation_block(&self) -> Matrix3<f64> {
        self.matrix.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.matrix.fixed_view::<3, 1>(0, 3).into_owned()
    }
}

/// Minimal rotation taking unit vector `from` onto unit vector `to`
/// (rotation axis `from × to`).
pub fn minimal_rotation(from: &Vector3<f64>, to: &Vector3<f64>) -> Matrix3<f64> {
    let cross = from.cross(to);
    let sin = cross.norm();
    let cos = from.dot(to).clamp(-1.0, 1.0);
    if sin < 1e-15 {
        if cos > 0.0 {
            return Matrix3::identity();
        }
        // Antiparallel: rotate π about any axis perpendicular to `from`.
        let helper = if from.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        let axis = from.cross(&helper).normalize();
        return rotation_exp(&(axis * std::f64::consts::PI));
    }
    rotation_exp(&(cross / sin * sin.atan2(cos)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn arb_vec(scale: f64) -> impl Strategy<Value = Vector3<f64>> {
        (-scale..scale, -scale..scale, -scale..scale).prop_map(|(x, y, z)| Vector3::new(x, y, z))
    }

    fn arb_transform() -> impl Strategy<Value = RigidTransform> {
        (arb_vec(3.0), arb_vec(500.0)).prop_map(|(w, t)| RigidTransform::from_parts(Rotation3::from_scaled_axis(w), t))
    }

    #[test]
    fn log_is_precise_at_small_angles_and_near_pi() {
        for angle in [1e-12, 1e-9, 1e-6, 1e-3, 0.5, 3.0, std::f64::consts::PI - 1e-9] {
            let a = Vector3::new(0.3, -0.5, 0.8).normalize() * angle;
            let back = rotation_log(&rotation_exp(&a));
            assert!((back - a).norm() <= 1e-15_f64.max(angle * 1e-12), "{angle}: {back:?}");
        }
        // Round-off can push the trace past 3; the angle must stay finite.
        let r = rotation_exp(&Vector3::new(1e-9, 0.0, 0.0)) * rotation_exp(&Vector3::new(-1e-9, 0.0, 0.0));
        assert!(RigidTransform::new(r, Vector3::zeros()).unwrap().angle().is_finite());
        assert_eq!(rotation_log(&Matrix3::identity()), Vector3::zeros());
    }

    #[test]
    fn identity_is_neutral() {
        let t = RigidTransform::from_axis_angle(Vector3::new(1.0, 2.0, 3.0), 0.7, Vector3::new(4.0, 5.0, 6.0));
        assert!(RigidTransform::identity().compose(&t).max_abs_diff(&t) < 1e-15);
        assert!(t.compose(&RigidTransform::identity()).max_abs_diff(&t) < 1e-15);
    }

    #[test]
    fn translations_commute() {
        let a = RigidTransform::from_translation(Vector3::new(1.0, 0.0, 0.0));
        let b = RigidTransform::from_translation(Vector3::new(0.0, 2.0, 0.0));
        assert_eq!(*compose(&a, &b).translation(), Vector3::new(1.0, 2.0, 0.0));
    }

    #[test]
    fn quarter_turn_inverse() {
        let rz = RigidTransform::from_axis_angle(Vector3::z(), std::f64::consts::FRAC_PI_2, Vector3::zeros());
        let expected = RigidTransform::from_axis_angle(Vector3::z(), -std::f64::consts::FRAC_PI_2, Vector3::zeros());
        assert!(invert(&rz).max_abs_diff(&expected) < 1e-15);
        assert_eq!(invert(&RigidTransform::identity()), RigidTransform::identity());
    }

    #[test]
    fn rejects_reflection_and_scale() {
        let reflect = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(matches!(RigidTransform::new(reflect, Vector3::zeros()), Err(GeometryError::InvalidRotation { .. })));
        assert!(RigidTransform::new(Matrix3::identity() * 1.001, Vector3::zeros()).is_err());
        assert_eq!(
            RigidTransform::new(Matrix3::identity(), Vector3::new(f64::NAN, 0.0, 0.0)),
            Err(GeometryError::NonFinite)
        );
    }

    #[test]
    fn quaternion_tolerance() {
        let ok = RigidTransform::from_quaternion_wxyz([1.0 + 5e-7, 0.0, 0.0, 0.0], Vector3::zeros()).unwrap();
        assert!(ok.max_abs_diff(&RigidTransform::identity()) < 1e-15);
        assert!(matches!(
            RigidTransform::from_quaternion_wxyz([1.01, 0.0, 0.0, 0.0], Vector3::zeros()),
            Err(GeometryError::InvalidQuaternion(_))
        ));
    }

    #[test]
    fn skew_cross_identity() {
        assert_eq!(skew(&Vector3::zeros()), Matrix3::zeros());
        assert_eq!(skew(&Vector3::x()) * Vector3::y(), Vector3::z());
    }

    #[test]
    fn delta_transform_cases() {
        let d = delta_transform(&ErrorTwist::default());
        assert_eq!(d.matrix, Matrix4::identity());
        assert!(d.small_angle_valid);

        let d = delta_transform(&ErrorTwist::new(Vector3::zeros(), Vector3::new(0.1, 0.0, 0.0)));
        assert_eq!(d.translation(), Vector3::new(0.1, 0.0, 0.0));

        // Against the exact exponential: entries differ by |alpha|²/2 = 5e-5.
        let alpha = Vector3::new(0.01, 0.0, 0.0);
        let d = delta_transform(&ErrorTwist::new(alpha, Vector3::zeros()));
        let exact = rotation_exp(&alpha);
        assert!((d.rotation_block() - exact).amax() <= 5e-5);

        let big = delta_transform(&ErrorTwist::new(Vector3::new(0.2, 0.0, 0.0), Vector3::zeros()));
        assert!(!big.small_angle_valid);
    }

    #[test]
    fn minimal_rotation_maps_direction() {
        let a = Vector3::new(1.0, 0.2, -0.3).normalize();
        let b = Vector3::new(-0.4, 0.9, 0.1).normalize();
        let r = minimal_rotation(&a, &b);
        assert_relative_eq!(r * a, b, epsilon = 1e-14);
        // The axis is perpendicular to both directions.
        let axis = rotation_log(&r).normalize();
        assert!(axis.dot(&a).abs() < 1e-12 && axis.dot(&b).abs() < 1e-12);
        let flip = minimal_rotation(&a, &(-a));
        assert_relative_eq!(flip * a, -a, epsilon = 1e-14);
    }

    proptest! {
        #[test]
        fn constructed_rotations_are_proper(t in arb_transform()) {
            let r = t.rotation();
            prop_assert!((r.determinant() - 1.0).abs() < 1e-9);
            prop_assert!((r.transpose() * r - Matrix3::identity()).amax() < 1e-9);
            prop_assert!(RigidTransform::new(*r, *t.translation()).is_ok());
        }

        #[test]
        fn inverse_round_trips(t in arb_transform()) {
            prop_assert!(t.compose(&t.inverse()).max_abs_diff(&RigidTransform::identity()) < 1e-9);
            prop_assert!(t.inverse().inverse().max_abs_diff(&t) < 1e-12);
        }

        #[test]
        fn compose_is_associative(a in arb_transform(), b in arb_transform(), c in arb_transform()) {
            let left = a.compose(&b).compose(&c);
            let right = a.compose(&b.compose(&c));
            prop_assert!(left.max_abs_diff(&right) < 1e-9);
        }

        #[test]
        fn skew_is_antisymmetric(v in arb_vec(1e3), w in arb_vec(1e3)) {
            let s = skew(&v);
            prop_assert_eq!(s + s.transpose(), Matrix3::zeros());
            prop_assert!((s * w - v.cross(&w)).amax() <= 1e-9 * (1.0 + v.norm() * w.norm()));
        }

        #[test]
        fn linearization_error_is_quadratic(v in arb_vec(1.0), mag in 0.0..0.02f64) {
            prop_assume!(v.norm() > 1e-6);
            let alpha = v.normalize() * mag;
            let d = delta_transform(&ErrorTwist::new(alpha, Vector3::zeros()));
            let err = (d.rotation_block() - rotation_exp(&alpha)).norm();
            prop_assert!(err <= 2.0 * mag * mag + 1e-15);
        }

        #[test]
        fn quaternion_round_trip(t in arb_transform()) {
            let q = t.quaternion_wxyz();
            let back = RigidTransform::from_quaternion_wxyz(q, *t.translation()).unwrap();
            prop_assert!(back.max_abs_diff(&t) < 1e-12);
        }
    }
}
