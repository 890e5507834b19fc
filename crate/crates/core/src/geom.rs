//! Minimal 3-D geometry kernel: Hamilton quaternions, rigid transforms and
//! the SO(3) tangent-space helpers used by the estimators.
//!
//! Everything is generic over [`Real`] so the same kernel serves `f64`
//! estimation code and `f32` storage/export paths.

use std::ops::Mul;

use nalgebra::{Matrix3, Matrix4, RealField, SVector, Vector3};
use num_traits::{FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

/// Scalar type accepted by the geometry kernel.
pub trait Real: RealField + Copy + FromPrimitive + ToPrimitive {
    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn lit(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).unwrap_or_else(Self::zero)
    }

    #[inline]
    fn to_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Rotation angles below this use Taylor expansions in exp/log/Jacobians.
const SMALL_ANGLE: f64 = 1e-6;

/// Skew-symmetric cross-product matrix `[v]x`.
pub fn skew<T: Real>(v: &Vector3<T>) -> Matrix3<T> {
    let z = T::zero();
    Matrix3::new(z, -v.z, v.y, v.z, z, -v.x, -v.y, v.x, z)
}

/// Right Jacobian of SO(3) at `phi`.
pub fn right_jacobian<T: Real>(phi: &Vector3<T>) -> Matrix3<T> {
    let theta = phi.norm();
    let k = skew(phi);
    if theta.to_f64() < SMALL_ANGLE {
        return Matrix3::identity() - k * T::lit(0.5) + k * k * T::lit(1.0 / 6.0);
    }
    let t2 = theta * theta;
    Matrix3::identity() - k * ((T::one() - theta.cos()) / t2)
        + k * k * ((theta - theta.sin()) / (t2 * theta))
}

/// Inverse of [`right_jacobian`].
pub fn right_jacobian_inv<T: Real>(phi: &Vector3<T>) -> Matrix3<T> {
    let theta = phi.norm();
    let k = skew(phi);
    if theta.to_f64() < SMALL_ANGLE {
        return Matrix3::identity() + k * T::lit(0.5) + k * k * T::lit(1.0 / 12.0);
    }
    let coef =
        T::one() / (theta * theta) - (T::one() + theta.cos()) / (T::lit(2.0) * theta * theta.sin());
    Matrix3::identity() + k * T::lit(0.5) + k * k * coef
}

/// Unit quaternion, Hamilton convention, scalar first.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Quaternion<T: Real> {
    pub w: T,
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T: Real> Quaternion<T> {
    /// Builds a quaternion and normalizes it.
    pub fn new(w: T, x: T, y: T, z: T) -> Self {
        Self { w, x, y, z }.normalized()
    }

    pub fn identity() -> Self {
        Self { w: T::one(), x: T::zero(), y: T::zero(), z: T::zero() }
    }

    pub fn norm(&self) -> T {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalized(self) -> Self {
        let n = self.norm();
        Self { w: self.w / n, x: self.x / n, y: self.y / n, z: self.z / n }
    }

    pub fn vec(&self) -> Vector3<T> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn conjugate(&self) -> Self {
        Self { w: self.w, x: -self.x, y: -self.y, z: -self.z }
    }

    /// Inverse rotation (conjugate of a unit quaternion).
    pub fn inverse(&self) -> Self {
        self.conjugate()
    }

    pub fn from_axis_angle(axis: &Vector3<T>, angle: T) -> Self {
        let n = axis.norm();
        if n == T::zero() {
            return Self::identity();
        }
        Self::exp(&(axis * (angle / n)))
    }

    /// Rotation about z by `angle` radians.
    pub fn from_yaw(angle: T) -> Self {
        Self::from_axis_angle(&Vector3::z(), angle)
    }

    /// Exponential map from a rotation vector.
    pub fn exp(phi: &Vector3<T>) -> Self {
        let theta = phi.norm();
        if theta.to_f64() < SMALL_ANGLE {
            let t2 = theta * theta;
            let s = T::lit(0.5) * (T::one() - t2 / T::lit(24.0));
            return Self {
                w: T::one() - t2 / T::lit(8.0),
                x: phi.x * s,
                y: phi.y * s,
                z: phi.z * s,
            }
            .normalized();
        }
        let half = theta * T::lit(0.5);
        let s = half.sin() / theta;
        Self { w: half.cos(), x: phi.x * s, y: phi.y * s, z: phi.z * s }.normalized()
    }

    /// Logarithm map to the rotation vector with angle in `[0, pi]`.
    ///
    /// At exactly `pi` the axis sign is fixed so that the largest-index
    /// nonzero component is positive.
    pub fn log(&self) -> Vector3<T> {
        let q = if self.w < T::zero() { -*self } else { *self };
        let v = q.vec();
        let s = v.norm();
        if s.to_f64() < SMALL_ANGLE {
            // theta ~ 2 s / w, with second-order correction
            let w = q.w;
            let k = T::lit(2.0) / w * (T::one() - s * s / (T::lit(3.0) * w * w));
            return v * k;
        }
        let angle = T::lit(2.0) * s.atan2(q.w);
        let mut axis = v / s;
        if q.w.abs().to_f64() <= 1e-15 {
            let lead = if axis.z != T::zero() {
                axis.z
            } else if axis.y != T::zero() {
                axis.y
            } else {
                axis.x
            };
            if lead < T::zero() {
                axis = -axis;
            }
        }
        axis * angle
    }

    /// `q ⊗ Exp(delta)` (perturbation on the right).
    pub fn boxplus(&self, delta: &Vector3<T>) -> Self {
        (*self * Self::exp(delta)).normalized()
    }

    /// Tangent difference such that `other.boxplus(self.boxminus(other)) == self`.
    pub fn boxminus(&self, other: &Self) -> Vector3<T> {
        (other.inverse() * *self).log()
    }

    /// Geodesic angle between two rotations.
    pub fn angle_to(&self, other: &Self) -> T {
        self.boxminus(other).norm()
    }

    pub fn rotate(&self, v: &Vector3<T>) -> Vector3<T> {
        let u = self.vec();
        let t = u.cross(v) * T::lit(2.0);
        v + t * self.w + u.cross(&t)
    }

    pub fn to_matrix(&self) -> Matrix3<T> {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        let two = T::lit(2.0);
        Matrix3::new(
            T::one() - two * (y * y + z * z),
            two * (x * y - w * z),
            two * (x * z + w * y),
            two * (x * y + w * z),
            T::one() - two * (x * x + z * z),
            two * (y * z - w * x),
            two * (x * z - w * y),
            two * (y * z + w * x),
            T::one() - two * (x * x + y * y),
        )
    }

    /// Rotation matrix to quaternion (Shepperd's method).
    pub fn from_matrix(m: &Matrix3<T>) -> Self {
        let trace = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
        let one = T::one();
        let quarter = T::lit(0.25);
        let q = if trace > T::zero() {
            let s = (trace + one).sqrt() * T::lit(2.0);
            Self {
                w: quarter * s,
                x: (m[(2, 1)] - m[(1, 2)]) / s,
                y: (m[(0, 2)] - m[(2, 0)]) / s,
                z: (m[(1, 0)] - m[(0, 1)]) / s,
            }
        } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
            let s = (one + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * T::lit(2.0);
            Self {
                w: (m[(2, 1)] - m[(1, 2)]) / s,
                x: quarter * s,
                y: (m[(0, 1)] + m[(1, 0)]) / s,
                z: (m[(0, 2)] + m[(2, 0)]) / s,
            }
        } else if m[(1, 1)] > m[(2, 2)] {
            let s = (one + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * T::lit(2.0);
            Self {
                w: (m[(0, 2)] - m[(2, 0)]) / s,
                x: (m[(0, 1)] + m[(1, 0)]) / s,
                y: quarter * s,
                z: (m[(1, 2)] + m[(2, 1)]) / s,
            }
        } else {
            let s = (one + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * T::lit(2.0);
            Self {
                w: (m[(1, 0)] - m[(0, 1)]) / s,
                x: (m[(0, 2)] + m[(2, 0)]) / s,
                y: (m[(1, 2)] + m[(2, 1)]) / s,
                z: quarter * s,
            }
        };
        q.normalized()
    }

    /// Spherical linear interpolation from `self` (s = 0) to `other` (s = 1).
    pub fn slerp(&self, other: &Self, s: T) -> Self {
        self.boxplus(&(other.boxminus(self) * s))
    }

    /// Rotational equality within `tol` radians (treats `q` and `-q` as equal).
    pub fn approx_eq(&self, other: &Self, tol: T) -> bool {
        self.angle_to(other) <= tol
    }

    pub fn cast<U: Real>(&self) -> Quaternion<U> {
        Quaternion {
            w: U::lit(self.w.to_f64()),
            x: U::lit(self.x.to_f64()),
            y: U::lit(self.y.to_f64()),
            z: U::lit(self.z.to_f64()),
        }
    }
}

impl<T: Real> std::ops::Neg for Quaternion<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Self { w: -self.w, x: -self.x, y: -self.y, z: -self.z }
    }
}

impl<T: Real> Mul for Quaternion<T> {
    type Output = Self;
    fn mul(self, r: Self) -> Self {
        let l = self;
        Self {
            w: l.w * r.w - l.x * r.x - l.y * r.y - l.z * r.z,
            x: l.w * r.x + l.x * r.w + l.y * r.z - l.z * r.y,
            y: l.w * r.y - l.x * r.z + l.y * r.w + l.z * r.x,
            z: l.w * r.z + l.x * r.y - l.y * r.x + l.z * r.w,
        }
    }
}

/// `q` and `-q` are the same rotation and compare equal.
impl<T: Real> PartialEq for Quaternion<T> {
    fn eq(&self, o: &Self) -> bool {
        (self.w == o.w && self.x == o.x && self.y == o.y && self.z == o.z)
            || (self.w == -o.w && self.x == -o.x && self.y == -o.y && self.z == -o.z)
    }
}

/// Rigid transform `T_a^b`: maps a point expressed in frame `a` into frame `b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose<T: Real> {
    pub rotation: Quaternion<T>,
    pub translation: Vector3<T>,
}

impl<T: Real> Pose<T> {
    pub fn new(rotation: Quaternion<T>, translation: Vector3<T>) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self { rotation: Quaternion::identity(), translation: Vector3::zeros() }
    }

    pub fn from_translation(t: Vector3<T>) -> Self {
        Self { rotation: Quaternion::identity(), translation: t }
    }

    pub fn from_rotation(q: Quaternion<T>) -> Self {
        Self { rotation: q, translation: Vector3::zeros() }
    }

    /// `R(q) p + t`.
    pub fn apply(&self, p: &Vector3<T>) -> Vector3<T> {
        self.rotation.rotate(p) + self.translation
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: (self.rotation * other.rotation).normalized(),
            translation: self.rotation.rotate(&other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> Self {
        let r = self.rotation.inverse();
        Self { rotation: r, translation: -r.rotate(&self.translation) }
    }

    /// `self⁻¹ ∘ other`.
    pub fn between(&self, other: &Self) -> Self {
        self.inverse().compose(other)
    }

    pub fn to_matrix(&self) -> Matrix4<T> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation.to_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Rotation angle (rad) and translation distance between two poses.
    pub fn distance(&self, other: &Self) -> (T, T) {
        (self.rotation.angle_to(&other.rotation), (self.translation - other.translation).norm())
    }

    pub fn approx_eq(&self, other: &Self, tol: T) -> bool {
        let (a, d) = self.distance(other);
        a <= tol && d <= tol
    }

    /// `(tx, ty, tz, qw, qx, qy, qz)`.
    pub fn to_record(&self) -> [T; 7] {
        let (t, q) = (self.translation, self.rotation);
        [t.x, t.y, t.z, q.w, q.x, q.y, q.z]
    }

    pub fn from_record(r: &[T; 7]) -> Self {
        Self {
            rotation: Quaternion::new(r[3], r[4], r[5], r[6]),
            translation: Vector3::new(r[0], r[1], r[2]),
        }
    }

    pub fn cast<U: Real>(&self) -> Pose<U> {
        Pose {
            rotation: self.rotation.cast(),
            translation: self.translation.map(|v| U::lit(v.to_f64())),
        }
    }
}

impl<T: Real> Mul for Pose<T> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        self.compose(&rhs)
    }
}

/// Tangent dimension of [`NavState`].
pub const NAV_DIM: usize = 15;

/// Keyframe state `[p, q, v, b_a, b_g]`.
///
/// Tangent layout used by the optimizer: `[δθ, δp, δv, δb_a, δb_g]`, with the
/// rotation perturbed on the right (`q ⊗ Exp(δθ)`) and the rest additive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NavState<T: Real> {
    pub p: Vector3<T>,
    pub q: Quaternion<T>,
    pub v: Vector3<T>,
    pub ba: Vector3<T>,
    pub bg: Vector3<T>,
}

impl<T: Real> NavState<T> {
    pub fn identity() -> Self {
        Self {
            p: Vector3::zeros(),
            q: Quaternion::identity(),
            v: Vector3::zeros(),
            ba: Vector3::zeros(),
            bg: Vector3::zeros(),
        }
    }

    pub fn from_pose(pose: &Pose<T>) -> Self {
        Self { p: pose.translation, q: pose.rotation, ..Self::identity() }
    }

    pub fn pose(&self) -> Pose<T> {
        Pose::new(self.q, self.p)
    }

    pub fn is_finite(&self) -> bool {
        let f = |v: &Vector3<T>| v.iter().all(|c| Real::to_f64(*c).is_finite());
        f(&self.p)
            && f(&self.v)
            && f(&self.ba)
            && f(&self.bg)
            && [self.q.w, self.q.x, self.q.y, self.q.z].iter().all(|c| Real::to_f64(*c).is_finite())
    }

    /// Largest absolute component over position, velocity and biases.
    pub fn max_abs(&self) -> T {
        [self.p, self.v, self.ba, self.bg]
            .iter()
            .flat_map(|v| v.iter().copied())
            .fold(T::zero(), |m, c| if c.abs() > m { c.abs() } else { m })
    }

    pub fn boxplus(&self, d: &SVector<T, NAV_DIM>) -> Self {
        let seg = |i: usize| Vector3::new(d[i], d[i + 1], d[i + 2]);
        Self {
            q: self.q.boxplus(&seg(0)),
            p: self.p + seg(3),
            v: self.v + seg(6),
            ba: self.ba + seg(9),
            bg: self.bg + seg(12),
        }
    }

    pub fn boxminus(&self, other: &Self) -> SVector<T, NAV_DIM> {
        let mut d = SVector::<T, NAV_DIM>::zeros();
        d.fixed_rows_mut::<3>(0).copy_from(&self.q.boxminus(&other.q));
        d.fixed_rows_mut::<3>(3).copy_from(&(self.p - other.p));
        d.fixed_rows_mut::<3>(6).copy_from(&(self.v - other.v));
        d.fixed_rows_mut::<3>(9).copy_from(&(self.ba - other.ba));
        d.fixed_rows_mut::<3>(12).copy_from(&(self.bg - other.bg));
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_6, PI};

    type Q = Quaternion<f64>;
    type P = Pose<f64>;

    fn rz(deg: f64) -> Q {
        Q::from_yaw(deg.to_radians())
    }

    #[test]
    fn compose_examples() {
        assert!(P::identity().compose(&P::identity()).approx_eq(&P::identity(), 1e-12));
        let a = P::from_rotation(rz(90.0));
        assert!((a * a).rotation.approx_eq(&rz(180.0), 1e-12));

        let t = P::from_translation(Vector3::new(1.0, 0.0, 0.0));
        let r = P::from_rotation(rz(90.0));
        let p = (t * r).apply(&Vector3::new(1.0, 0.0, 0.0));
        // hand-multiplied homogeneous matrices: [I|t] * [Rz|0] * (1,0,0,1)
        let m = t.to_matrix() * r.to_matrix() * nalgebra::Vector4::new(1.0, 0.0, 0.0, 1.0);
        assert_relative_eq!(p, Vector3::new(1.0, 1.0, 0.0), epsilon = 1e-12);
        assert_relative_eq!(p, m.xyz(), epsilon = 1e-12);
    }

    #[test]
    fn apply_examples() {
        let v = Vector3::new(1.0, 2.0, 3.0);
        assert_eq!(P::identity().apply(&v), v);
        assert_relative_eq!(
            P::from_rotation(rz(90.0)).apply(&Vector3::x()),
            Vector3::y(),
            epsilon = 1e-12
        );
        let t = P::new(rz(90.0), Vector3::new(0.0, 0.0, 1.0));
        assert_relative_eq!(t.apply(&Vector3::x()), Vector3::new(0.0, 1.0, 1.0), epsilon = 1e-12);
    }

    #[test]
    fn boxplus_boxminus_examples() {
        assert_eq!(Q::identity().boxplus(&Vector3::zeros()), Q::identity());
        let q = Q::identity().boxplus(&Vector3::new(0.0, 0.0, FRAC_PI_2));
        assert!(q.approx_eq(&rz(90.0), 1e-12));
        let d = rz(60.0).boxminus(&rz(30.0));
        assert_relative_eq!(d, Vector3::new(0.0, 0.0, FRAC_PI_6), epsilon = 1e-12);
    }

    #[test]
    fn boxminus_antipodal_is_deterministic() {
        let a = Q::identity();
        let b = Q::from_axis_angle(&Vector3::new(0.0, 0.0, -1.0), PI);
        let d = b.boxminus(&a);
        assert_relative_eq!(d.norm(), PI, epsilon = 1e-12);
        assert!(d.z > 0.0);
        let e = Q::from_axis_angle(&Vector3::new(0.0, 1.0, 0.0), -PI).boxminus(&a);
        assert!(e.y > 0.0 && e.z == 0.0);
    }

    #[test]
    fn negated_quaternion_is_equal() {
        let q = Q::new(0.3, -0.2, 0.5, 0.1);
        assert_eq!(q, -q);
        assert!((q.norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn matrix_roundtrip() {
        for q in [rz(170.0), Q::new(0.1, 0.9, -0.3, 0.2), Q::new(0.0, 0.0, 1.0, 0.0)] {
            assert!(Q::from_matrix(&q.to_matrix()).approx_eq(&q, 1e-12));
        }
    }

    #[test]
    fn right_jacobian_inverse_consistency() {
        let phi = Vector3::new(0.3, -0.7, 1.1);
        let prod = right_jacobian(&phi) * right_jacobian_inv(&phi);
        assert_relative_eq!(prod, Matrix3::identity(), epsilon = 1e-12);
        // Exp(phi + d) ≈ Exp(phi) Exp(Jr d)
        let d = Vector3::new(1e-6, -2e-6, 0.5e-6);
        let lhs = Q::exp(&(phi + d));
        let rhs = Q::exp(&phi).boxplus(&(right_jacobian(&phi) * d));
        assert!(lhs.angle_to(&rhs) < 1e-11);
    }

    #[test]
    fn f32_kernel_works() {
        let p = Pose::<f32>::new(Quaternion::from_yaw(std::f32::consts::FRAC_PI_2), Vector3::zeros());
        let out = p.apply(&Vector3::new(1.0f32, 0.0, 0.0));
        assert!((out - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-6);
    }

    fn unit_quat() -> impl Strategy<Value = Q> {
        (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
            .prop_filter("nonzero", |(w, x, y, z)| w * w + x * x + y * y + z * z > 1e-3)
            .prop_map(|(w, x, y, z)| Q::new(w, x, y, z))
    }

    fn vec3(r: f64) -> impl Strategy<Value = Vector3<f64>> {
        (-r..r, -r..r, -r..r).prop_map(|(x, y, z)| Vector3::new(x, y, z))
    }

    proptest! {
        #[test]
        fn boxplus_roundtrip(q in unit_quat(), d in vec3(0.57)) {
            let back = q.boxplus(&d).boxminus(&q);
            prop_assert!((back - d).norm() < 1e-8);
        }

        #[test]
        fn compose_is_sequential_apply(qa in unit_quat(), ta in vec3(5.0), qb in unit_quat(), tb in vec3(5.0), p in vec3(10.0)) {
            let a = P::new(qa, ta);
            let b = P::new(qb, tb);
            prop_assert!(((a * b).apply(&p) - a.apply(&b.apply(&p))).norm() < 1e-9);
            let id = a * a.inverse();
            prop_assert!(id.approx_eq(&P::identity(), 1e-9));
        }

        #[test]
        fn rotation_preserves_norm(q in unit_quat(), p in vec3(100.0)) {
            let r = P::from_rotation(q);
            prop_assert!((r.apply(&p).norm() - p.norm()).abs() < 1e-9);
        }
    }
}
