//! Small dense linear algebra: 3×3 SVD, symmetric eigendecomposition and
//! linear solves. Everything here is generic over [`Real`] and sized for the
//! matrices this crate actually meets (3×3 covariances, pose-graph systems of a
//! few dozen unknowns).

use crate::geom::Mat3;
use crate::scalar::{c, Real};

/// Singular value decomposition `m = u · diag(s) · vᵀ` with `s` sorted in
/// descending order and `u`, `v` orthogonal (not necessarily proper).
#[derive(Debug, Clone, Copy)]
pub struct Svd3<T> {
    pub u: Mat3<T>,
    pub s: [T; 3],
    pub v: Mat3<T>,
}

/// One-sided Jacobi SVD of a 3×3 matrix.
pub fn svd3<T: Real>(m: &Mat3<T>) -> Svd3<T> {
    // Columns of `a` are orthogonalized in place; `v` accumulates the rotations.
    let mut a = m.m;
    let mut v = Mat3::<T>::identity().m;
    let eps = T::epsilon();
    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..2 {
            for q in (p + 1)..3 {
                let mut alpha = T::zero();
                let mut beta = T::zero();
                let mut gamma = T::zero();
                for row in &a {
                    alpha += row[p] * row[p];
                    beta += row[q] * row[q];
                    gamma += row[p] * row[q];
                }
                if gamma == T::zero() || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (c::<T>(2.0) * gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let cs = T::one() / (T::one() + t * t).sqrt();
                let sn = cs * t;
                for row in a.iter_mut() {
                    let (x, y) = (row[p], row[q]);
                    row[p] = cs * x - sn * y;
                    row[q] = sn * x + cs * y;
                }
                for row in v.iter_mut() {
                    let (x, y) = (row[p], row[q]);
                    row[p] = cs * x - sn * y;
                    row[q] = sn * x + cs * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let mut s = [T::zero(); 3];
    for (j, sj) in s.iter_mut().enumerate() {
        *sj = (a[0][j] * a[0][j] + a[1][j] * a[1][j] + a[2][j] * a[2][j]).sqrt();
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| s[j].partial_cmp(&s[i]).unwrap_or(std::cmp::Ordering::Equal));

    let mut u = [[T::zero(); 3]; 3];
    let mut vs = [[T::zero(); 3]; 3];
    let mut ss = [T::zero(); 3];
    for (dst, &src) in order.iter().enumerate() {
        ss[dst] = s[src];
        for r in 0..3 {
            vs[r][dst] = v[r][src];
        }
    }
    let scale = ss[0].max(T::min_positive_value());
    let tiny = scale * c::<T>(64.0) * eps;
    let mut valid = [false; 3];
    for j in 0..3 {
        let src = order[j];
        if ss[j] > tiny {
            for r in 0..3 {
                u[r][j] = a[r][src] / ss[j];
            }
            valid[j] = true;
        }
    }
    complete_basis(&mut u, &valid);
    Svd3 {
        u: Mat3 { m: u },
        s: ss,
        v: Mat3 { m: vs },
    }
}

/// Fills invalid columns of `u` so that it becomes orthonormal.
fn complete_basis<T: Real>(u: &mut [[T; 3]; 3], valid: &[bool; 3]) {
    let col = |u: &[[T; 3]; 3], j: usize| [u[0][j], u[1][j], u[2][j]];
    let set = |u: &mut [[T; 3]; 3], j: usize, v: [T; 3]| {
        for r in 0..3 {
            u[r][j] = v[r];
        }
    };
    match valid.iter().filter(|&&v| v).count() {
        3 => {}
        2 => {
            let missing = valid.iter().position(|&v| !v).unwrap_or(2);
            let others: Vec<usize> = (0..3).filter(|&j| j != missing).collect();
            let n = crate::geom::vec3::cross(col(u, others[0]), col(u, others[1]));
            let n = crate::geom::vec3::normalize(n).unwrap_or([T::zero(), T::zero(), T::one()]);
            set(u, missing, n);
        }
        1 => {
            let keep = valid.iter().position(|&v| v).unwrap_or(0);
            let a = col(u, keep);
            let (b, cc) = orthonormal_complement(a);
            let missing: Vec<usize> = (0..3).filter(|&j| j != keep).collect();
            set(u, missing[0], b);
            set(u, missing[1], cc);
        }
        _ => *u = Mat3::<T>::identity().m,
    }
}

/// Two unit vectors completing the unit vector `a` to an orthonormal basis.
pub fn orthonormal_complement<T: Real>(a: [T; 3]) -> ([T; 3], [T; 3]) {
    use crate::geom::vec3::{cross, normalize};
    let axis = if a[0].abs() <= a[1].abs() && a[0].abs() <= a[2].abs() {
        [T::one(), T::zero(), T::zero()]
    } else if a[1].abs() <= a[2].abs() {
        [T::zero(), T::one(), T::zero()]
    } else {
        [T::zero(), T::zero(), T::one()]
    };
    let b = normalize(cross(a, axis)).unwrap_or([T::zero(), T::one(), T::zero()]);
    let cc = cross(a, b);
    (b, cc)
}

/// Nearest rotation (Frobenius sense) to an arbitrary 3×3 matrix.
pub fn project_to_so3<T: Real>(m: &Mat3<T>) -> Mat3<T> {
    let Svd3 { u, v, .. } = svd3(m);
    let d = (u.mul(&v.transpose())).det();
    let mut vd = u;
    if d < T::zero() {
        for r in 0..3 {
            vd.m[r][2] = -vd.m[r][2];
        }
    }
    vd.mul(&v.transpose())
}

/// Eigendecomposition of a symmetric `n×n` matrix (row-major) by cyclic Jacobi.
///
/// Returns eigenvalues in ascending order and the matching eigenvectors as the
/// columns of a row-major `n×n` matrix.
pub fn symmetric_eigen<T: Real>(matrix: &[T], n: usize) -> (Vec<T>, Vec<T>) {
    assert_eq!(matrix.len(), n * n, "symmetric_eigen: matrix is not n×n");
    let mut a = matrix.to_vec();
    let mut v = vec![T::zero(); n * n];
    for i in 0..n {
        v[i * n + i] = T::one();
    }
    let eps = T::epsilon();
    for _sweep in 0..100 {
        let mut off = T::zero();
        let mut diag = T::zero();
        for i in 0..n {
            diag += a[i * n + i] * a[i * n + i];
            for j in (i + 1)..n {
                off += a[i * n + j] * a[i * n + j];
            }
        }
        if off <= eps * eps * diag.max(T::min_positive_value()) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == T::zero() {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (c::<T>(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (T::one() + theta * theta).sqrt());
                let t = if theta == T::zero() { T::one() } else { t };
                let cs = T::one() / (T::one() + t * t).sqrt();
                let sn = t * cs;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = cs * akp - sn * akq;
                    a[k * n + q] = sn * akp + cs * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = cs * apk - sn * aqk;
                    a[q * n + k] = sn * apk + cs * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = cs * vkp - sn * vkq;
                    v[k * n + q] = sn * vkp + cs * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        a[i * n + i]
            .partial_cmp(&a[j * n + j])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vectors = vec![T::zero(); n * n];
    for (dst, &src) in order.iter().enumerate() {
        for k in 0..n {
            vectors[k * n + dst] = v[k * n + src];
        }
    }
    (values, vectors)
}

/// Solves `a · x = b` for square row-major `a` by Gaussian elimination with
/// partial pivoting. Returns `None` when `a` is numerically singular.
pub fn solve<T: Real>(a: &[T], b: &[T], n: usize) -> Option<Vec<T>> {
    assert_eq!(a.len(), n * n);
    assert_eq!(b.len(), n);
    let mut m = a.to_vec();
    let mut x = b.to_vec();
    let scale = m.iter().fold(T::zero(), |acc, v| acc.max(v.abs()));
    let tol = scale * T::epsilon() * T::from_usize_lossy(n.max(1)) * c::<T>(16.0);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| {
                m[i * n + col]
                    .abs()
                    .partial_cmp(&m[j * n + col].abs())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .unwrap_or(col);
        if m[pivot * n + col].abs() <= tol {
            return None;
        }
        if pivot != col {
            for k in 0..n {
                m.swap(pivot * n + k, col * n + k);
            }
            x.swap(pivot, col);
        }
        let d = m[col * n + col];
        for row in (col + 1)..n {
            let f = m[row * n + col] / d;
            if f == T::zero() {
                continue;
            }
            for k in col..n {
                let v = m[col * n + k];
                m[row * n + k] -= f * v;
            }
            let xc = x[col];
            x[row] -= f * xc;
        }
    }
    for row in (0..n).rev() {
        let mut acc = x[row];
        for k in (row + 1)..n {
            acc -= m[row * n + k] * x[k];
        }
        x[row] = acc / m[row * n + row];
    }
    Some(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: &Mat3<f64>, b: &Mat3<f64>, tol: f64) -> bool {
        (0..3).all(|i| (0..3).all(|j| (a.m[i][j] - b.m[i][j]).abs() < tol))
    }

    #[test]
    fn svd_reconstructs() {
        let m: Mat3<f64> = Mat3 {
            m: [[1.0, 2.0, -0.5], [0.3, -1.0, 4.0], [2.5, 0.1, 0.7]],
        };
        let Svd3 { u, s, v } = svd3(&m);
        let rec = u.mul(&Mat3::diag(s)).mul(&v.transpose());
        assert!(approx(&rec, &m, 1e-12));
        assert!(s[0] >= s[1] && s[1] >= s[2]);
        assert!(approx(&u.transpose().mul(&u), &Mat3::identity(), 1e-12));
        assert!(approx(&v.transpose().mul(&v), &Mat3::identity(), 1e-12));
    }

    #[test]
    fn svd_rank_one() {
        let m: Mat3<f64> = Mat3 {
            m: [[1.0, 2.0, 3.0], [2.0, 4.0, 6.0], [0.0, 0.0, 0.0]],
        };
        let Svd3 { u, s, v } = svd3(&m);
        assert!(s[1].abs() < 1e-12);
        assert!(approx(&u.transpose().mul(&u), &Mat3::identity(), 1e-12));
        let rec = u.mul(&Mat3::diag(s)).mul(&v.transpose());
        assert!(approx(&rec, &m, 1e-12));
    }

    #[test]
    fn eigen_of_known_matrix() {
        let a: [f64; 9] = [2.0, 1.0, 0.0, 1.0, 2.0, 0.0, 0.0, 0.0, 5.0];
        let (vals, vecs) = symmetric_eigen(&a, 3);
        assert!((vals[0] - 1.0).abs() < 1e-12);
        assert!((vals[1] - 3.0).abs() < 1e-12);
        assert!((vals[2] - 5.0).abs() < 1e-12);
        // A v = λ v for each column
        for k in 0..3 {
            for i in 0..3 {
                let av: f64 = (0..3).map(|j| a[i * 3 + j] * vecs[j * 3 + k]).sum();
                assert!((av - vals[k] * vecs[i * 3 + k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn solve_small_system() {
        let a: [f64; 4] = [4.0, 1.0, 2.0, 3.0];
        let x: Vec<f64> = solve(&a, &[1.0, 2.0], 2).unwrap();
        assert!((4.0 * x[0] + x[1] - 1.0).abs() < 1e-14);
        assert!((2.0 * x[0] + 3.0 * x[1] - 2.0).abs() < 1e-14);
        assert!(solve::<f64>(&[1.0, 2.0, 2.0, 4.0], &[1.0, 1.0], 2).is_none());
    }
}
