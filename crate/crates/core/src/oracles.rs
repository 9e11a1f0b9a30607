//! Slow, loop-based reference implementations. None of them calls the
//! production routine it is meant to check.

use ndarray::Array2;

use crate::assembler::PairwiseMatcher;
use crate::error::{Error, Result};
use crate::geom::{Mat3, PointCloud, RigidTransform, Rotation, Vec3};
use crate::losses::{LossConfig, PairLabel};
use crate::matcher::AssignmentMatrix;

/// A reference value with a description of how it was obtained.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult<V> {
    pub value: V,
    pub method: &'static str,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Circle loss transcribed literally: unit descriptors, affinities as
/// Euclidean norms of `f̂_i − f̂_j` (or `f̂_i + f̂_j` when `sum`), plain
/// exponentials, and a mean over row then column anchors with both a
/// positive and a negative. `f_p`, `f_q` hold the mating points' rows.
pub fn oracle_circle_loss(f_p: &Array2<f64>, f_q: &Array2<f64>, labels: &Array2<PairLabel>, sum: bool, cfg: &LossConfig) -> OracleResult<f64> {
    let unit = |f: &Array2<f64>, i: usize| -> Vec<f64> {
        let r: Vec<f64> = f.row(i).to_vec();
        let n = norm(&r).max(1e-12);
        r.iter().map(|x| x / n).collect()
    };
    let (n, m) = labels.dim();
    let mut d = vec![vec![0.0; m]; n];
    for (i, row) in d.iter_mut().enumerate() {
        let a = unit(f_p, i);
        for (j, dij) in row.iter_mut().enumerate() {
            let b = unit(f_q, j);
            let v: Vec<f64> = a.iter().zip(&b).map(|(x, y)| if sum { x + y } else { x - y }).collect();
            *dij = norm(&v).max(1e-6);
        }
    }
    let anchor = |cells: Vec<(usize, usize)>| -> Option<f64> {
        let mut sp = 0.0;
        let mut sn = 0.0;
        let (mut np, mut nn) = (0, 0);
        for (i, j) in cells {
            match labels[[i, j]] {
                PairLabel::Positive => {
                    let a = (d[i][j] - cfg.delta_p).max(0.0);
                    sp += (cfg.gamma * a * a).exp();
                    np += 1;
                }
                PairLabel::Negative => {
                    let b = (cfg.delta_n - d[i][j]).max(0.0);
                    sn += (cfg.gamma * b * b).exp();
                    nn += 1;
                }
                PairLabel::Ignored => {}
            }
        }
        if np == 0 || nn == 0 {
            return None;
        }
        Some(if cfg.circle_plus_one { (1.0 + sp * sn).ln() } else { (sp * sn).ln() })
    };
    let mut total = 0.0;
    let mut count = 0;
    for i in 0..n {
        if let Some(v) = anchor((0..m).map(|j| (i, j)).collect()) {
            total += v;
            count += 1;
        }
    }
    for j in 0..m {
        if let Some(v) = anchor((0..n).map(|i| (i, j)).collect()) {
            total += v;
            count += 1;
        }
    }
    OracleResult {
        value: if count == 0 { 0.0 } else { total / count as f64 },
        method: "double loop over row and column anchors, plain exponentials",
    }
}

fn rot_mul_vec(r: &[[f64; 3]; 3], v: Vec3<f64>) -> Vec3<f64> {
    std::array::from_fn(|a| r[a][0] * v[0] + r[a][1] * v[1] + r[a][2] * v[2])
}

fn rot_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
}

/// Rodrigues rotation about a unit axis.
fn axis_angle(axis: Vec3<f64>, angle: f64) -> [[f64; 3]; 3] {
    let (s, c) = angle.sin_cos();
    let [x, y, z] = axis;
    let t = 1.0 - c;
    [
        [c + x * x * t, x * y * t - z * s, x * z * t + y * s],
        [y * x * t + z * s, c + y * y * t, y * z * t - x * s],
        [z * x * t - y * s, z * y * t + x * s, c + z * z * t],
    ]
}

/// Weighted objective with the optimal translation for a fixed rotation.
fn kabsch_cost(r: &[[f64; 3]; 3], src: &[Vec3<f64>], tgt: &[Vec3<f64>], w: &[f64]) -> (f64, Vec3<f64>) {
    let wsum: f64 = w.iter().sum();
    let mut t = [0.0; 3];
    for ((p, q), wi) in src.iter().zip(tgt).zip(w) {
        let rp = rot_mul_vec(r, *p);
        for a in 0..3 {
            t[a] += wi * (q[a] - rp[a]) / wsum;
        }
    }
    let mut cost = 0.0;
    for ((p, q), wi) in src.iter().zip(tgt).zip(w) {
        let rp = rot_mul_vec(r, *p);
        cost += wi * (0..3).map(|a| (rp[a] + t[a] - q[a]).powi(2)).sum::<f64>();
    }
    (cost, t)
}

/// Minimizes `Σ w_i‖R·p_i + t − q_i‖²` by a grid over axis–angle space
/// followed by coordinate descent on small rotations with shrinking steps.
/// `src[i]` pairs with `tgt[i]`; at most five points.
pub fn oracle_kabsch(src: &[Vec3<f64>], tgt: &[Vec3<f64>], weights: &[f64]) -> Result<OracleResult<RigidTransform<f64>>> {
    if src.len() > 5 || src.len() != tgt.len() || src.len() != weights.len() || src.is_empty() {
        return Err(Error::InvalidArgument("kabsch oracle takes 1 to 5 paired points".into()));
    }
    if !(weights.iter().sum::<f64>() > 0.0) {
        return Err(Error::InvalidArgument("kabsch oracle needs positive total weight".into()));
    }
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let axes = 300;
    let mut best = ([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], f64::INFINITY);
    best.1 = kabsch_cost(&best.0, src, tgt, weights).0;
    for k in 0..axes {
        let z = 1.0 - 2.0 * (k as f64 + 0.5) / axes as f64;
        let rho = (1.0 - z * z).sqrt();
        let axis = [rho * (golden * k as f64).cos(), rho * (golden * k as f64).sin(), z];
        for s in 1..=36 {
            let r = axis_angle(axis, s as f64 * std::f64::consts::PI / 36.0);
            let c = kabsch_cost(&r, src, tgt, weights).0;
            if c < best.1 {
                best = (r, c);
            }
        }
    }
    let basis = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let mut step = 5f64.to_radians();
    while step > 1e-9 {
        let mut improved = false;
        for axis in basis {
            for sgn in [1.0, -1.0] {
                let r = rot_mul(&axis_angle(axis, sgn * step), &best.0);
                let c = kabsch_cost(&r, src, tgt, weights).0;
                if c < best.1 {
                    best = (r, c);
                    improved = true;
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    let (_, t) = kabsch_cost(&best.0, src, tgt, weights);
    Ok(OracleResult {
        value: RigidTransform::new(Rotation::from_matrix_unchecked(Mat3 { m: best.0 }), t),
        method: "axis-angle grid then shrinking coordinate descent",
    })
}

/// Neumaier-compensated sum.
fn compensated_sum(xs: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for x in xs {
        let t = s + x;
        c += if s.abs() >= x.abs() { (s - t) + x } else { (x - t) + s };
        s = t;
    }
    s + c
}

/// Probability-domain Sinkhorn on `exp(S)` with a dustbin row and column,
/// compensated sums, and a fixed number of iterations. Real rows and
/// columns carry mass 1, the dustbins `M` and `N`. Costs must be moderate
/// (`|S| ≲ 300`) so that `exp` stays finite.
pub fn oracle_assignment(cost: &Array2<f64>, dustbin: f64, iterations: usize) -> OracleResult<AssignmentMatrix<f64>> {
    let (n, m) = cost.dim();
    let k = Array2::from_shape_fn((n + 1, m + 1), |(i, j)| if i < n && j < m { cost[[i, j]].exp() } else { dustbin.exp() });
    let mu: Vec<f64> = (0..=n).map(|i| if i < n { 1.0 } else { m as f64 }).collect();
    let nu: Vec<f64> = (0..=m).map(|j| if j < m { 1.0 } else { n as f64 }).collect();
    let mut a = vec![1.0; n + 1];
    let mut b = vec![1.0; m + 1];
    for _ in 0..iterations {
        for i in 0..=n {
            a[i] = mu[i] / compensated_sum((0..=m).map(|j| k[[i, j]] * b[j]));
        }
        for j in 0..=m {
            b[j] = nu[j] / compensated_sum((0..=n).map(|i| k[[i, j]] * a[i]));
        }
    }
    OracleResult {
        value: AssignmentMatrix {
            log: Array2::from_shape_fn((n + 1, m + 1), |(i, j)| (a[i] * k[[i, j]] * b[j]).ln()),
        },
        method: "probability-domain Sinkhorn with compensated sums",
    }
}

fn dist_sq(a: Vec3<f64>, b: Vec3<f64>) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum()
}

/// Brute-force k nearest neighbours: full sort by `(distance, index)`.
pub fn oracle_knn(reference: &[Vec3<f64>], queries: &[Vec3<f64>], k: usize, exclude_self: bool) -> OracleResult<Vec<Vec<usize>>> {
    let value = queries
        .iter()
        .enumerate()
        .map(|(qi, q)| {
            let mut all: Vec<(f64, usize)> = reference
                .iter()
                .enumerate()
                .filter(|(ri, _)| !(exclude_self && *ri == qi))
                .map(|(ri, r)| (dist_sq(*q, *r), ri))
                .collect();
            all.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
            all.into_iter().take(k).map(|(_, i)| i).collect()
        })
        .collect();
    OracleResult {
        value,
        method: "full sort of all candidates",
    }
}

/// Brute-force farthest point sampling: every step recomputes each
/// candidate's distance to the whole selected set. Ties go to the lowest index.
pub fn oracle_fps(points: &[Vec3<f64>], m: usize, start: usize) -> OracleResult<Vec<usize>> {
    let mut selected = vec![start];
    while selected.len() < m.min(points.len()) {
        let mut best: Option<(f64, usize)> = None;
        for (i, p) in points.iter().enumerate() {
            if selected.contains(&i) {
                continue;
            }
            let d = selected.iter().map(|&s| dist_sq(*p, points[s])).fold(f64::INFINITY, f64::min);
            if best.is_none_or(|(bd, _)| d > bd) {
                best = Some((d, i));
            }
        }
        selected.push(best.map(|b| b.1).unwrap_or(start));
    }
    OracleResult {
        value: selected,
        method: "quadratic recomputation of set distances",
    }
}

/// Matcher that knows the ground truth: real cells within `tau` after
/// moving both clouds by their parts' poses get log-probability
/// `−(d/tau)²`, so closer pairs rank first; the rest a large negative
/// value. Clouds are identified by `part_id`.
pub struct GroundTruthMatcher {
    pub gt_poses: Vec<RigidTransform<f64>>,
    pub tau: f64,
}

impl PairwiseMatcher for GroundTruthMatcher {
    fn assignment(&self, p: &PointCloud<f64>, q: &PointCloud<f64>) -> Result<AssignmentMatrix<f64>> {
        let pose = |c: &PointCloud<f64>| {
            self.gt_poses
                .get(c.part_id)
                .copied()
                .ok_or_else(|| Error::InvalidArgument(format!("no pose for part {}", c.part_id)))
        };
        let (gp, gq) = (pose(p)?, pose(q)?);
        let a: Vec<Vec3<f64>> = p.points.iter().map(|x| gp.apply(*x)).collect();
        let b: Vec<Vec3<f64>> = q.points.iter().map(|x| gq.apply(*x)).collect();
        let (n, m) = (a.len(), b.len());
        let mut log = Array2::from_elem((n + 1, m + 1), -1e3);
        for i in 0..n {
            for j in 0..m {
                let d2 = dist_sq(a[i], b[j]);
                if d2 <= self.tau * self.tau {
                    log[[i, j]] = -d2 / (self.tau * self.tau);
                }
            }
        }
        Ok(AssignmentMatrix { log })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kabsch_oracle_identity_is_exact() {
        let p = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let r = oracle_kabsch(&p, &p, &[1.0; 4]).unwrap().value;
        assert!(r.rotation.angle() < 1e-9);
        assert!(r.translation.iter().all(|t| t.abs() < 1e-9));
        assert!(oracle_kabsch(&[[0.0; 3]; 6], &[[0.0; 3]; 6], &[1.0; 6]).is_err());
    }

    #[test]
    fn sinkhorn_oracle_keeps_uniform_symmetry() {
        let z = oracle_assignment(&Array2::zeros((3, 3)), 0.0, 10_000).value;
        let p00 = z.log[[0, 0]];
        for i in 0..3 {
            for j in 0..3 {
                assert!((z.log[[i, j]] - p00).abs() < 1e-12);
            }
        }
        assert!(z.marginal_error() < 1e-10);
    }

    #[test]
    fn fps_oracle_spreads() {
        let pts = vec![[0.0, 0.0, 0.0], [0.1, 0.0, 0.0], [1.0, 0.0, 0.0], [0.5, 0.0, 0.0]];
        assert_eq!(oracle_fps(&pts, 3, 0).value, vec![0, 2, 3]);
    }

    #[test]
    fn circle_oracle_margin_boundary_is_zero() {
        // One positive at d = Δp and one negative at d = Δn contribute
        // exp(0)·exp(0) = 1, whose log is 0.
        let cfg = LossConfig {
            delta_p: 2f64.sqrt(),
            delta_n: 2f64.sqrt(),
            ..Default::default()
        };
        let f_p = ndarray::array![[1.0, 0.0]];
        let f_q = ndarray::array![[0.0, 1.0], [0.0, -1.0]];
        let labels = ndarray::array![[PairLabel::Positive, PairLabel::Negative]];
        assert!(oracle_circle_loss(&f_p, &f_q, &labels, false, &cfg).value.abs() < 1e-12);
    }
}
