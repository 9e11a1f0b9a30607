use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::mat3::Mat3;
use crate::geom::vec3::{self, Vec3};
use crate::scalar::{c, Real};

/// Threshold below which Gram-Schmidt inputs count as degenerate.
pub const FRAME_EPS: f64 = 1e-8;

/// A proper rotation matrix (orthonormal, determinant +1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation<T>(Mat3<T>);

impl<T: Real> Rotation<T> {
    pub fn identity() -> Self {
        Rotation(Mat3::identity())
    }

    /// Wraps a matrix after checking orthonormality and determinant to `tol`.
    pub fn try_from_matrix(m: Mat3<T>, tol: T) -> Result<Self> {
        let r = Rotation(m);
        if r.orthonormality_error() > tol || (m.det() - T::one()).abs() > tol {
            return Err(Error::InvalidArgument(
                "matrix is not a proper rotation".into(),
            ));
        }
        Ok(r)
    }

    /// Wraps a matrix assumed to be a rotation already (e.g. from a projection).
    pub fn from_matrix_unchecked(m: Mat3<T>) -> Self {
        Rotation(m)
    }

    /// Projects an arbitrary matrix onto SO(3).
    pub fn from_matrix_projected(m: &Mat3<T>) -> Self {
        Rotation(crate::geom::linalg::project_to_so3(m))
    }

    pub fn matrix(&self) -> &Mat3<T> {
        &self.0
    }

    pub fn into_matrix(self) -> Mat3<T> {
        self.0
    }

    /// Rotation by `angle` radians about a unit `axis` (Rodrigues).
    pub fn from_axis_angle(axis: Vec3<T>, angle: T) -> Self {
        let k = vec3::normalize(axis).unwrap_or([T::zero(), T::zero(), T::one()]);
        let (s, co) = angle.sin_cos();
        let t = T::one() - co;
        let [x, y, z] = k;
        Rotation(Mat3 {
            m: [
                [t * x * x + co, t * x * y - s * z, t * x * z + s * y],
                [t * x * y + s * z, t * y * y + co, t * y * z - s * x],
                [t * x * z - s * y, t * y * z + s * x, t * z * z + co],
            ],
        })
    }

    pub fn rot_x(angle: T) -> Self {
        Self::from_axis_angle([T::one(), T::zero(), T::zero()], angle)
    }

    pub fn rot_y(angle: T) -> Self {
        Self::from_axis_angle([T::zero(), T::one(), T::zero()], angle)
    }

    pub fn rot_z(angle: T) -> Self {
        Self::from_axis_angle([T::zero(), T::zero(), T::one()], angle)
    }

    pub fn from_quaternion(q: [T; 4]) -> Self {
        let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
        let [w, x, y, z] = [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
        let two = c::<T>(2.0);
        let one = T::one();
        Rotation(Mat3 {
            m: [
                [
                    one - two * (y * y + z * z),
                    two * (x * y - w * z),
                    two * (x * z + w * y),
                ],
                [
                    two * (x * y + w * z),
                    one - two * (x * x + z * z),
                    two * (y * z - w * x),
                ],
                [
                    two * (x * z - w * y),
                    two * (y * z + w * x),
                    one - two * (x * x + y * y),
                ],
            ],
        })
    }

    pub fn transpose(&self) -> Self {
        Rotation(self.0.transpose())
    }

    pub fn inverse(&self) -> Self {
        self.transpose()
    }

    pub fn compose(&self, other: &Self) -> Self {
        Rotation(self.0.mul(&other.0))
    }

    pub fn apply(&self, v: Vec3<T>) -> Vec3<T> {
        self.0.mul_vec(v)
    }

    /// Geodesic angle of this rotation in radians, from `atan2(2 sin θ,
    /// 2 cos θ)` so that small angles keep full precision.
    pub fn angle(&self) -> T {
        let m = &self.0.m;
        let v = [m[2][1] - m[1][2], m[0][2] - m[2][0], m[1][0] - m[0][1]];
        let sin2 = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        sin2.atan2(self.0.trace() - T::one())
    }

    /// Geodesic distance to another rotation in radians.
    pub fn angle_to(&self, other: &Self) -> T {
        self.transpose().compose(other).angle()
    }

    /// Frobenius norm of `RᵀR − I`.
    pub fn orthonormality_error(&self) -> T {
        self.0
            .transpose()
            .mul(&self.0)
            .sub(&Mat3::identity())
            .frobenius()
    }

    /// Intrinsic X-Y-Z Euler angles `(a, b, c)` in radians with
    /// `R = Rx(a)·Ry(b)·Rz(c)`.
    pub fn euler_xyz(&self) -> [T; 3] {
        let m = &self.0.m;
        let sb = m[0][2].max(-T::one()).min(T::one());
        let b = sb.asin();
        if sb.abs() < T::one() - c::<T>(1e-12) {
            let a = (-m[1][2]).atan2(m[2][2]);
            let cc = (-m[0][1]).atan2(m[0][0]);
            [a, b, cc]
        } else {
            // Gimbal lock: fold the free angle into `a`.
            let a = m[1][0].atan2(m[1][1]);
            [a, b, T::zero()]
        }
    }

    pub fn cast<U: Real>(&self) -> Rotation<U> {
        Rotation(self.0.cast())
    }
}

/// Rigid transform acting on column vectors as `x ↦ R·x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform<T> {
    pub rotation: Rotation<T>,
    pub translation: Vec3<T>,
}

impl<T: Real> RigidTransform<T> {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: Rotation::identity(),
            translation: [T::zero(); 3],
        }
    }

    pub fn new(rotation: Rotation<T>, translation: Vec3<T>) -> Self {
        RigidTransform {
            rotation,
            translation,
        }
    }

    pub fn apply(&self, p: Vec3<T>) -> Vec3<T> {
        vec3::add(self.rotation.apply(p), self.translation)
    }

    pub fn apply_all(&self, points: &[Vec3<T>]) -> Vec<Vec3<T>> {
        points.iter().map(|p| self.apply(*p)).collect()
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        RigidTransform {
            rotation: self.rotation.compose(&other.rotation),
            translation: vec3::add(self.rotation.apply(other.translation), self.translation),
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: vec3::scale(rt.apply(self.translation), -T::one()),
        }
    }

    pub fn cast<U: Real>(&self) -> RigidTransform<U> {
        RigidTransform {
            rotation: self.rotation.cast(),
            translation: vec3::cast(self.translation),
        }
    }
}

/// Serializable `f64` form of a rigid transform (row-major rotation).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformRecord {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl<T: Real> From<&RigidTransform<T>> for TransformRecord {
    fn from(t: &RigidTransform<T>) -> Self {
        let m = t.rotation.matrix().cast::<f64>();
        TransformRecord {
            rotation: m.m,
            translation: vec3::cast(t.translation),
        }
    }
}

impl TransformRecord {
    pub fn to_transform<T: Real>(&self) -> RigidTransform<T> {
        RigidTransform {
            rotation: Rotation::from_matrix_unchecked(Mat3 { m: self.rotation }.cast()),
            translation: vec3::cast(self.translation),
        }
    }
}

/// Orthonormal frame from two vectors: rows are `x̂ = û`, `ŷ` the normalized
/// part of `v` orthogonal to `û`, and `ẑ = x̂ × ŷ`.
pub fn gram_schmidt_frame<T: Real>(u: Vec3<T>, v: Vec3<T>) -> Result<Rotation<T>> {
    let eps = c::<T>(FRAME_EPS);
    let nu = vec3::norm(u);
    if !(nu > eps) {
        return Err(Error::DegenerateFrame);
    }
    let x = vec3::scale(u, T::one() / nu);
    let w = vec3::sub(v, vec3::scale(x, vec3::dot(v, x)));
    let nw = vec3::norm(w);
    if !(nw > eps) {
        return Err(Error::DegenerateFrame);
    }
    let y = vec3::scale(w, T::one() / nw);
    let z = vec3::cross(x, y);
    Ok(Rotation(Mat3::from_rows(x, y, z)))
}

/// Haar-uniform random rotation, deterministic per seed.
pub fn random_rotation<T: Real>(seed: u64) -> Rotation<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_rotation_with(&mut rng)
}

/// Haar-uniform random rotation drawn from `rng` (normalized Gaussian quaternion).
pub fn random_rotation_with<T: Real, R: Rng + ?Sized>(rng: &mut R) -> Rotation<T> {
    loop {
        let q: [f64; 4] = [
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        ];
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-9 {
            return Rotation::from_quaternion(q.map(T::c));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &Mat3<f64>, b: &Mat3<f64>, tol: f64) -> bool {
        a.sub(b).frobenius() < tol
    }

    #[test]
    fn frame_axis_aligned_is_identity() {
        let f = gram_schmidt_frame([2.0, 0.0, 0.0], [1.0, 3.0, 0.0]).unwrap();
        assert!(close(f.matrix(), &Mat3::identity(), 1e-15));
    }

    #[test]
    fn frame_hand_orthonormalized() {
        let f: Rotation<f64> = gram_schmidt_frame([0.0, 0.0, 3.0], [1.0, 1.0, 0.0]).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let expected = Mat3::from_rows([0.0, 0.0, 1.0], [h, h, 0.0], [-h, h, 0.0]);
        assert!(close(f.matrix(), &expected, 1e-12));
        assert!(f.orthonormality_error() < 1e-12);
        assert!((f.matrix().det() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn frame_parallel_inputs_fail() {
        assert!(matches!(
            gram_schmidt_frame([1.0, 0.0, 0.0], [2.0, 0.0, 0.0]),
            Err(Error::DegenerateFrame)
        ));
        assert!(matches!(
            gram_schmidt_frame([0.0, 0.0, 0.0], [2.0, 0.0, 0.0]),
            Err(Error::DegenerateFrame)
        ));
    }

    #[test]
    fn frame_is_equivariant() {
        // frame(Ru, Rv) = frame(u, v) · Rᵀ: rows are rotated axes.
        let u = [0.3, -1.2, 0.5];
        let v = [1.0, 0.4, -0.2];
        let base = gram_schmidt_frame(u, v).unwrap();
        for seed in 0..100 {
            let r = random_rotation::<f64>(seed);
            let f = gram_schmidt_frame(r.apply(u), r.apply(v)).unwrap();
            let expected = base.matrix().mul(&r.matrix().transpose());
            assert!(close(f.matrix(), &expected, 1e-12));
        }
    }

    #[test]
    fn random_rotation_deterministic_and_valid() {
        let a = random_rotation::<f64>(42);
        let b = random_rotation::<f64>(42);
        assert_eq!(a, b);
        assert!(a.orthonormality_error() < 1e-6);
        assert!((a.matrix().det() - 1.0).abs() < 1e-6);
        assert_ne!(a, random_rotation::<f64>(43));
    }

    #[test]
    fn euler_of_z_rotation() {
        let r = Rotation::<f64>::rot_z(std::f64::consts::FRAC_PI_2);
        let e = r.euler_xyz();
        assert!(e[0].abs() < 1e-12 && e[1].abs() < 1e-12);
        assert!((e[2] - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        let r = Rotation::<f64>::rot_x(0.3)
            .compose(&Rotation::rot_y(-0.7))
            .compose(&Rotation::rot_z(1.1));
        let e = r.euler_xyz();
        assert!((e[0] - 0.3).abs() < 1e-12);
        assert!((e[1] + 0.7).abs() < 1e-12);
        assert!((e[2] - 1.1).abs() < 1e-12);
    }

    #[test]
    fn transform_inverse_composes_to_identity() {
        let t = RigidTransform::new(random_rotation::<f64>(7), [0.1, -0.4, 2.0]);
        let id = t.inverse().compose(&t);
        assert!(close(id.rotation.matrix(), &Mat3::identity(), 1e-9));
        assert!(vec3::norm(id.translation) < 1e-9);
    }
}
