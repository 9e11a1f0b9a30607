use crate::error::{Error, Result};
use crate::geom::cloud::PointCloud;
use crate::geom::linalg::{svd3, Svd3};
use crate::geom::mat3::Mat3;
use crate::geom::transform::{RigidTransform, Rotation};
use crate::geom::vec3::{self, Vec3};
use crate::scalar::{c, Real};

/// Outcome of a weighted rigid alignment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KabschResult<T> {
    pub transform: RigidTransform<T>,
    /// Set when the weighted source points are coincident or collinear; the
    /// transform is then the centroid offset with identity rotation.
    pub degenerate: bool,
}

/// Weighted rigid alignment of paired points, minimizing
/// `Σ wₖ ‖R·srcₖ + t − tgtₖ‖²`.
pub fn weighted_kabsch_pairs<T: Real>(
    src: &[Vec3<T>],
    tgt: &[Vec3<T>],
    weights: &[T],
) -> Result<KabschResult<T>> {
    if src.len() != tgt.len() || src.len() != weights.len() {
        return Err(Error::shape(
            "weighted_kabsch",
            format!("{} pairs", src.len()),
            format!("{} targets / {} weights", tgt.len(), weights.len()),
        ));
    }
    if src.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "weighted_kabsch needs at least 3 matches, got {}",
            src.len()
        )));
    }
    if weights.iter().any(|w| !(*w >= T::zero()) || !w.is_finite()) {
        return Err(Error::InvalidArgument(
            "weighted_kabsch: weights must be finite and non-negative".into(),
        ));
    }
    let total = weights.iter().fold(T::zero(), |a, w| a + *w);
    if !(total > T::zero()) {
        return Err(Error::InvalidArgument(
            "weighted_kabsch: total weight must be positive".into(),
        ));
    }

    let mut cs = [T::zero(); 3];
    let mut ct = [T::zero(); 3];
    for ((s, t), w) in src.iter().zip(tgt).zip(weights) {
        cs = vec3::add(cs, vec3::scale(*s, *w));
        ct = vec3::add(ct, vec3::scale(*t, *w));
    }
    cs = vec3::scale(cs, T::one() / total);
    ct = vec3::scale(ct, T::one() / total);

    // Cross-covariance H = Σ w (s − s̄)(t − t̄)ᵀ and source scatter.
    let mut h = Mat3::<T>::zeros();
    let mut scatter = Mat3::<T>::zeros();
    for ((s, t), w) in src.iter().zip(tgt).zip(weights) {
        let ds = vec3::sub(*s, cs);
        let dt = vec3::sub(*t, ct);
        for i in 0..3 {
            for j in 0..3 {
                h.m[i][j] += *w * ds[i] * dt[j];
                scatter.m[i][j] += *w * ds[i] * ds[j];
            }
        }
    }

    let spread = svd3(&scatter).s;
    let scale = spread[0].max(T::min_positive_value());
    let degenerate = spread[0] <= c::<T>(1e-24) * total || spread[1] <= c::<T>(1e-10) * scale;
    if degenerate {
        return Ok(KabschResult {
            transform: RigidTransform::new(Rotation::identity(), vec3::sub(ct, cs)),
            degenerate: true,
        });
    }

    let Svd3 { u, v, .. } = svd3(&h);
    // R = V · diag(1, 1, d) · Uᵀ, d flips the weakest singular direction on reflection.
    let d = v.mul(&u.transpose()).det();
    let mut vd = v;
    if d < T::zero() {
        for r in 0..3 {
            vd.m[r][2] = -vd.m[r][2];
        }
    }
    let rot = Rotation::from_matrix_unchecked(vd.mul(&u.transpose()));
    let t = vec3::sub(ct, rot.apply(cs));
    Ok(KabschResult {
        transform: RigidTransform::new(rot, t),
        degenerate: false,
    })
}

/// Weighted alignment of `src` onto `tgt` through index matches `(i, j)`.
pub fn weighted_kabsch<T: Real>(
    src: &PointCloud<T>,
    tgt: &PointCloud<T>,
    weights: &[T],
    matches: &[(usize, usize)],
) -> Result<KabschResult<T>> {
    if weights.len() != matches.len() {
        return Err(Error::shape(
            "weighted_kabsch",
            format!("{} weights", matches.len()),
            weights.len(),
        ));
    }
    let mut s = Vec::with_capacity(matches.len());
    let mut t = Vec::with_capacity(matches.len());
    for &(i, j) in matches {
        let (Some(p), Some(q)) = (src.points.get(i), tgt.points.get(j)) else {
            return Err(Error::InvalidArgument(format!(
                "weighted_kabsch: match ({i}, {j}) out of range"
            )));
        };
        s.push(*p);
        t.push(*q);
    }
    weighted_kabsch_pairs(&s, &t, weights)
}

/// Weighted alignment objective `Σ wₖ ‖T(srcₖ) − tgtₖ‖²`.
pub fn alignment_objective<T: Real>(
    transform: &RigidTransform<T>,
    src: &[Vec3<T>],
    tgt: &[Vec3<T>],
    weights: &[T],
) -> T {
    src.iter()
        .zip(tgt)
        .zip(weights)
        .fold(T::zero(), |acc, ((s, t), w)| {
            acc + *w * vec3::dist_sq(transform.apply(*s), *t)
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::transform::random_rotation;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(n: usize, seed: u64) -> Vec<[f64; 3]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect()
    }

    #[test]
    fn identity_for_equal_clouds() {
        let pts = random_points(8, 1);
        let r = weighted_kabsch_pairs(&pts, &pts, &[1.0; 8]).unwrap();
        assert!(!r.degenerate);
        assert!(r.transform.rotation.angle() < 1e-9);
        assert!(vec3::norm(r.transform.translation) < 1e-12);
    }

    #[test]
    fn recovers_z_rotation_and_shift() {
        let src = random_points(10, 2);
        let gt = RigidTransform::new(Rotation::rot_z(30f64.to_radians()), [0.1, 0.0, 0.0]);
        let tgt = gt.apply_all(&src);
        let r = weighted_kabsch_pairs(&src, &tgt, &[1.0; 10]).unwrap();
        assert!(r.transform.rotation.matrix().sub(gt.rotation.matrix()).frobenius() < 1e-6);
        assert!(vec3::norm(vec3::sub(r.transform.translation, gt.translation)) < 1e-6);
    }

    #[test]
    fn reflection_is_corrected() {
        let src = random_points(12, 3);
        // Mirror the targets; the best proper rotation must still have det +1.
        let tgt: Vec<_> = src.iter().map(|p| [-p[0], p[1], p[2]]).collect();
        let r = weighted_kabsch_pairs(&src, &tgt, &[1.0; 12]).unwrap();
        assert!((r.transform.rotation.matrix().det() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn coincident_sources_are_degenerate() {
        let src = vec![[0.5, 0.5, 0.5]; 4];
        let tgt = random_points(4, 4);
        let r = weighted_kabsch_pairs(&src, &tgt, &[1.0; 4]).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.transform.rotation, Rotation::identity());
        let expected = vec3::sub(vec3::centroid(&tgt), [0.5, 0.5, 0.5]);
        assert!(vec3::norm(vec3::sub(r.transform.translation, expected)) < 1e-12);
    }

    #[test]
    fn too_few_matches_rejected() {
        let pts = random_points(2, 5);
        assert!(weighted_kabsch_pairs(&pts, &pts, &[1.0, 1.0]).is_err());
        let pts = random_points(3, 5);
        assert!(weighted_kabsch_pairs(&pts, &pts, &[0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn objective_is_locally_optimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let src = random_points(20, 6);
        let noisy: Vec<_> = src
            .iter()
            .map(|p| {
                let q = RigidTransform::new(random_rotation::<f64>(11), [0.2, -0.1, 0.3]).apply(*p);
                vec3::add(q, [rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)])
            })
            .collect();
        let w: Vec<f64> = (0..20).map(|_| rng.random_range(0.1..2.0)).collect();
        let best = weighted_kabsch_pairs(&src, &noisy, &w).unwrap().transform;
        let f0 = alignment_objective(&best, &src, &noisy, &w);
        for k in 0..100 {
            let dr = Rotation::from_axis_angle(
                [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
                rng.random_range(-0.05..0.05),
            );
            let dt = [rng.random_range(-0.01..0.01), rng.random_range(-0.01..0.01), rng.random_range(-0.01..0.01)];
            let pert = RigidTransform::new(dr, dt).compose(&best);
            assert!(alignment_objective(&pert, &src, &noisy, &w) >= f0 - 1e-12, "perturbation {k}");
        }
    }
}
