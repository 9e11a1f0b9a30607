//! Training losses: orientation alignment, the shape and occupancy circle
//! losses, the assignment negative log-likelihood, and their weighted total.

use std::sync::Arc;

use log::warn;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::backbone::vn::get3;
use crate::diff::{Backward, BackwardCtx, GradAcc, Tape, Var};
use crate::error::{Error, Result};
use crate::geom::vec3::{self, Vec3};
use crate::geom::{Mat3, Rotation};
use crate::scalar::{c, Real};

/// Label of a cross-part pair of mating points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairLabel {
    Positive,
    Negative,
    /// Between `τ` and the safe radius `2τ`.
    Ignored,
}

/// Ground-truth pairing between two parts.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceSet {
    /// Cross-part pairs within `τ` under ground-truth poses, sorted.
    pub positives: Vec<(usize, usize)>,
    /// Points of P (resp. Q) taking part in at least one positive.
    pub mating_p: Vec<usize>,
    pub mating_q: Vec<usize>,
    /// `labels[a][b]` for `mating_p[a]`, `mating_q[b]`.
    pub labels: Arc<Array2<PairLabel>>,
}

impl CorrespondenceSet {
    /// Labels pairs from assembled (ground-truth posed) coordinates: positive
    /// within `tau`, negative beyond `2·tau`, ignored in between.
    pub fn from_assembled<T: Real>(p: &[Vec3<T>], q: &[Vec3<T>], tau: T) -> Self {
        let tau_sq = tau * tau;
        let safe_sq = c::<T>(4.0) * tau_sq;
        let mut positives = Vec::new();
        let mut in_p = vec![false; p.len()];
        let mut in_q = vec![false; q.len()];
        for (i, a) in p.iter().enumerate() {
            for (j, b) in q.iter().enumerate() {
                if vec3::dist_sq(*a, *b) <= tau_sq {
                    positives.push((i, j));
                    in_p[i] = true;
                    in_q[j] = true;
                }
            }
        }
        let mating_p: Vec<usize> = (0..p.len()).filter(|&i| in_p[i]).collect();
        let mating_q: Vec<usize> = (0..q.len()).filter(|&j| in_q[j]).collect();
        let labels = Array2::from_shape_fn((mating_p.len(), mating_q.len()), |(a, b)| {
            let d = vec3::dist_sq(p[mating_p[a]], q[mating_q[b]]);
            if d <= tau_sq {
                PairLabel::Positive
            } else if d > safe_sq {
                PairLabel::Negative
            } else {
                PairLabel::Ignored
            }
        });
        CorrespondenceSet {
            positives,
            mating_p,
            mating_q,
            labels: Arc::new(labels),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.positives.is_empty()
    }

    /// Mating mask over P's points.
    pub fn mask_p(&self, n: usize) -> Vec<bool> {
        let mut m = vec![false; n];
        for &i in &self.mating_p {
            m[i] = true;
        }
        m
    }

    pub fn mask_q(&self, n: usize) -> Vec<bool> {
        let mut m = vec![false; n];
        for &j in &self.mating_q {
            m[j] = true;
        }
        m
    }

    /// The same pairing with the roles of P and Q exchanged.
    pub fn swapped(&self) -> Self {
        let mut positives: Vec<(usize, usize)> = self.positives.iter().map(|&(i, j)| (j, i)).collect();
        positives.sort_unstable();
        CorrespondenceSet {
            positives,
            mating_p: self.mating_q.clone(),
            mating_q: self.mating_p.clone(),
            labels: Arc::new(self.labels.t().to_owned()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub delta_p: f64,
    pub delta_n: f64,
    pub gamma: f64,
    pub lambda_d: f64,
    pub lambda_s: f64,
    pub lambda_o: f64,
    /// Use `log(1 + Σ_p·Σ_n)` instead of `log(Σ_p·Σ_n)`.
    pub circle_plus_one: bool,
    pub point_reduction: Reduction,
    /// Floor applied to assignment probabilities before the logarithm.
    pub log_floor: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            delta_p: 0.1,
            delta_n: 1.4,
            gamma: 24.0,
            lambda_d: 0.1,
            lambda_s: 0.5,
            lambda_o: 0.5,
            circle_plus_one: false,
            point_reduction: Reduction::Sum,
            log_floor: 1e-12,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta_p < self.delta_n) || !(self.gamma > 0.0) {
            return Err(Error::InvalidArgument("circle loss needs Δp < Δn and γ > 0".into()));
        }
        if [self.lambda_d, self.lambda_s, self.lambda_o].iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::InvalidArgument("loss weights must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Which affinity a circle loss uses on unit descriptors `f̂_i`, `f̂_j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Affinity {
    /// `‖f̂_i − f̂_j‖`: small for identical shapes.
    Difference,
    /// `‖f̂_i + f̂_j‖`: small for opposite occupancy.
    Sum,
}

impl Affinity {
    fn sign(self) -> f64 {
        match self {
            Affinity::Difference => 1.0,
            Affinity::Sum => -1.0,
        }
    }
}

/// Smallest value under the square root of an affinity.
const AFFINITY_FLOOR: f64 = 1e-12;

fn log_sum_exp<T: Real>(xs: &[T]) -> T {
    let m = xs.iter().copied().fold(T::neg_infinity(), T::max);
    m + xs.iter().map(|x| (*x - m).exp()).fold(T::zero(), |a, b| a + b).ln()
}

/// Per-anchor loss and its derivative with respect to each pair distance.
fn anchor_term<T: Real>(pos: &[T], neg: &[T], cfg: &LossConfig) -> (T, Vec<T>, Vec<T>) {
    let (dp, dn, gamma) = (c::<T>(cfg.delta_p), c::<T>(cfg.delta_n), c::<T>(cfg.gamma));
    let two = c::<T>(2.0);
    let lp: Vec<T> = pos.iter().map(|&d| {
        let a = (d - dp).max(T::zero());
        gamma * a * a
    }).collect();
    let ln: Vec<T> = neg.iter().map(|&d| {
        let b = (dn - d).max(T::zero());
        gamma * b * b
    }).collect();
    let (sp, sn) = (log_sum_exp(&lp), log_sum_exp(&ln));
    let x = sp + sn;
    let (value, outer) = if cfg.circle_plus_one {
        let sp1 = if x > T::zero() { x + (-x).exp().ln_1p() } else { x.exp().ln_1p() };
        (sp1, T::one() / (T::one() + (-x).exp()))
    } else {
        (x, T::one())
    };
    let gp = pos
        .iter()
        .zip(&lp)
        .map(|(&d, &l)| outer * (l - sp).exp() * two * gamma * (d - dp).max(T::zero()))
        .collect();
    let gn = neg
        .iter()
        .zip(&ln)
        .map(|(&d, &l)| -outer * (l - sn).exp() * two * gamma * (dn - d).max(T::zero()))
        .collect();
    (value, gp, gn)
}

struct CircleOp<T> {
    cos: Var,
    sign: f64,
    labels: Arc<Array2<PairLabel>>,
    cfg: LossConfig,
    anchors: usize,
    _marker: std::marker::PhantomData<T>,
}

/// Walks every valid anchor (rows, then columns), calling `f` with the anchor
/// loss and the per-cell distance gradients.
fn for_each_anchor<T: Real>(
    cos: &Array2<T>,
    sign: f64,
    labels: &Array2<PairLabel>,
    cfg: &LossConfig,
    mut f: impl FnMut(T, &[(usize, usize, T)]),
) {
    let s = c::<T>(sign);
    let dist = |g: T| (c::<T>(2.0) - c::<T>(2.0) * s * g).max(c(AFFINITY_FLOOR)).sqrt();
    let (n, m) = labels.dim();
    let mut run = |cells: &mut dyn Iterator<Item = (usize, usize)>| {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        let mut pos_idx = Vec::new();
        let mut neg_idx = Vec::new();
        for (a, b) in cells {
            match labels[[a, b]] {
                PairLabel::Positive => {
                    pos.push(dist(cos[[a, b]]));
                    pos_idx.push((a, b));
                }
                PairLabel::Negative => {
                    neg.push(dist(cos[[a, b]]));
                    neg_idx.push((a, b));
                }
                PairLabel::Ignored => {}
            }
        }
        if pos.is_empty() || neg.is_empty() {
            return;
        }
        let (value, gp, gn) = anchor_term(&pos, &neg, cfg);
        let mut grads = Vec::with_capacity(gp.len() + gn.len());
        for ((&(a, b), g), d) in pos_idx.iter().zip(gp).zip(&pos) {
            grads.push((a, b, g / *d));
        }
        for ((&(a, b), g), d) in neg_idx.iter().zip(gn).zip(&neg) {
            grads.push((a, b, g / *d));
        }
        f(value, &grads);
    };
    for a in 0..n {
        run(&mut (0..m).map(|b| (a, b)));
    }
    for b in 0..m {
        run(&mut (0..n).map(|a| (a, b)));
    }
}

impl<T: Real> Backward<T> for CircleOp<T> {
    fn name(&self) -> &'static str {
        "circle_loss"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &Array2<T>, acc: &mut GradAcc<T>) {
        if self.anchors == 0 {
            return;
        }
        let cos = ctx.value(self.cos);
        let scale = g[[0, 0]] / T::from_usize_lossy(self.anchors);
        let s = c::<T>(self.sign);
        let Some(gc) = acc.grad_mut(self.cos) else { return };
        let floor = c::<T>(AFFINITY_FLOOR);
        for_each_anchor(cos, self.sign, &self.labels, &self.cfg, |_, grads| {
            for &(a, b, gd_over_d) in grads {
                // d = √(2 − 2σG) ⇒ ∂d/∂G = −σ/d (zero where clamped)
                if c::<T>(2.0) - c::<T>(2.0) * s * cos[[a, b]] > floor {
                    gc[[a, b]] -= scale * s * gd_over_d;
                }
            }
        });
    }
}

impl<T: Real> Tape<T> {
    /// Circle loss over a matrix of cosines between unit descriptors of P's
    /// (rows) and Q's (columns) mating points. Anchors are all rows and all
    /// columns having both a positive and a negative; the result is their mean.
    pub fn circle_loss(
        &mut self,
        cos: Var,
        affinity: Affinity,
        labels: &Arc<Array2<PairLabel>>,
        cfg: &LossConfig,
    ) -> Result<Var> {
        if self.shape(cos) != labels.dim() {
            return Err(Error::shape("circle_loss", format!("{:?}", labels.dim()), format!("{:?}", self.shape(cos))));
        }
        let mut total = T::zero();
        let mut anchors = 0usize;
        for_each_anchor(self.value(cos), affinity.sign(), labels, cfg, |v, _| {
            total += v;
            anchors += 1;
        });
        if anchors == 0 {
            warn!("circle loss: no anchor has both positives and negatives");
        }
        let value = if anchors == 0 { T::zero() } else { total / T::from_usize_lossy(anchors) };
        Ok(self.push_op(
            Array2::from_elem((1, 1), value),
            &[cos],
            Box::new(CircleOp::<T> {
                cos,
                sign: affinity.sign(),
                labels: labels.clone(),
                cfg: cfg.clone(),
                anchors,
                _marker: std::marker::PhantomData,
            }),
        ))
    }

    /// Circle loss on raw descriptors `f_p` (`K_P × d`) and `f_q`, restricted
    /// to mating points and L2-normalized first.
    pub fn descriptor_circle_loss(
        &mut self,
        f_p: Var,
        f_q: Var,
        corr: &CorrespondenceSet,
        affinity: Affinity,
        cfg: &LossConfig,
    ) -> Result<Var> {
        if corr.mating_p.is_empty() || corr.mating_q.is_empty() {
            warn!("circle loss: no mating points");
            return Ok(self.scalar(T::zero()));
        }
        let a = self.gather_rows(f_p, Arc::new(corr.mating_p.clone()));
        let b = self.gather_rows(f_q, Arc::new(corr.mating_q.clone()));
        let eps = c::<T>(1e-12);
        let a = self.l2_normalize_rows(a, eps);
        let b = self.l2_normalize_rows(b, eps);
        let cos = self.matmul_nt(a, b);
        self.circle_loss(cos, affinity, &corr.labels, cfg)
    }
}

struct OrientationOp<T> {
    fp: Var,
    fq: Var,
    rp: Mat3<T>,
    rq: Mat3<T>,
    pairs: Arc<Vec<(usize, usize)>>,
}

fn frame_at<T: Real>(f: &Array2<T>, p: usize) -> Mat3<T> {
    Mat3::from_rows(get3(f, p, 0), get3(f, p, 1), get3(f, p, 2))
}

fn aligned_difference<T: Real>(fp: &Array2<T>, fq: &Array2<T>, rp: &Mat3<T>, rq: &Mat3<T>, i: usize, j: usize) -> Mat3<T> {
    frame_at(fp, i).mul(rp).sub(&frame_at(fq, j).mul(rq))
}

impl<T: Real> Backward<T> for OrientationOp<T> {
    fn name(&self) -> &'static str {
        "orientation_loss"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &Array2<T>, acc: &mut GradAcc<T>) {
        let (fp, fq) = (ctx.value(self.fp), ctx.value(self.fq));
        let scale = g[[0, 0]] / T::from_usize_lossy(self.pairs.len());
        let mut gp = Array2::zeros(fp.dim());
        let mut gq = Array2::zeros(fq.dim());
        for &(i, j) in self.pairs.iter() {
            let d = aligned_difference(fp, fq, &self.rp, &self.rq, i, j);
            let n = d.frobenius();
            if !(n > T::zero()) {
                continue;
            }
            let gd = d.scale(scale / n);
            let gmi = gd.mul(&self.rp.transpose());
            let gnj = gd.mul(&self.rq.transpose());
            for a in 0..3 {
                for s in 0..3 {
                    gp[[3 * i + s, a]] += gmi.m[a][s];
                    gq[[3 * j + s, a]] -= gnj.m[a][s];
                }
            }
        }
        acc.add(self.fp, &gp);
        acc.add(self.fq, &gq);
    }
}

impl<T: Real> Tape<T> {
    /// Mean over positive pairs of `‖(F_d^P)_i R^P − (F_d^Q)_j R^Q‖_F`, with
    /// frames in the `(3K × 3)` layout. An empty pair list gives 0.
    pub fn orientation_loss(
        &mut self,
        fp: Var,
        fq: Var,
        rp: &Rotation<T>,
        rq: &Rotation<T>,
        pairs: &Arc<Vec<(usize, usize)>>,
    ) -> Result<Var> {
        if pairs.is_empty() {
            warn!("orientation loss: no positive pairs");
            return Ok(self.scalar(T::zero()));
        }
        let (vp, vq) = (self.value(fp), self.value(fq));
        let (kp, kq) = (vp.nrows() / 3, vq.nrows() / 3);
        if vp.ncols() != 3 || vq.ncols() != 3 || pairs.iter().any(|&(i, j)| i >= kp || j >= kq) {
            return Err(Error::InvalidArgument("orientation loss: frame layout or pair index out of range".into()));
        }
        let total = pairs
            .iter()
            .map(|&(i, j)| aligned_difference(vp, vq, rp.matrix(), rq.matrix(), i, j).frobenius())
            .fold(T::zero(), |a, b| a + b);
        let value = total / T::from_usize_lossy(pairs.len());
        Ok(self.push_op(
            Array2::from_elem((1, 1), value),
            &[fp, fq],
            Box::new(OrientationOp {
                fp,
                fq,
                rp: *rp.matrix(),
                rq: *rq.matrix(),
                pairs: pairs.clone(),
            }),
        ))
    }
}

struct NllOp<T> {
    logz: Var,
    cells: Vec<(usize, usize)>,
    floor: T,
    scale: T,
}

impl<T: Real> Backward<T> for NllOp<T> {
    fn name(&self) -> &'static str {
        "point_matching_loss"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &Array2<T>, acc: &mut GradAcc<T>) {
        let z = ctx.value(self.logz);
        let s = g[[0, 0]] * self.scale;
        if let Some(gz) = acc.grad_mut(self.logz) {
            for &(i, j) in &self.cells {
                if z[[i, j]] > self.floor {
                    gz[[i, j]] -= s;
                }
            }
        }
    }
}

impl<T: Real> Tape<T> {
    /// `−Σ_{(i,j)∈𝓒} log Z_ij − Σ_{unmatched i} log Z_{i,M+1} − Σ_{unmatched j} log Z_{N+1,j}`
    /// on a log-assignment, with probabilities floored at `cfg.log_floor`.
    pub fn point_matching_loss(&mut self, logz: Var, corr: &CorrespondenceSet, cfg: &LossConfig) -> Result<Var> {
        let (n1, m1) = self.shape(logz);
        let (n, m) = (n1 - 1, m1 - 1);
        let mut cells = corr.positives.clone();
        if cells.iter().any(|&(i, j)| i >= n || j >= m) {
            return Err(Error::InvalidArgument("point matching loss: pair index out of range".into()));
        }
        let mp = corr.mask_p(n);
        let mq = corr.mask_q(m);
        cells.extend((0..n).filter(|&i| !mp[i]).map(|i| (i, m)));
        cells.extend((0..m).filter(|&j| !mq[j]).map(|j| (n, j)));
        let floor = c::<T>(cfg.log_floor).ln();
        let z = self.value(logz);
        let total = cells.iter().fold(T::zero(), |a, &(i, j)| a - z[[i, j]].max(floor));
        let scale = match cfg.point_reduction {
            Reduction::Sum => T::one(),
            Reduction::Mean => T::one() / T::from_usize_lossy(cells.len().max(1)),
        };
        Ok(self.push_op(
            Array2::from_elem((1, 1), total * scale),
            &[logz],
            Box::new(NllOp { logz, cells, floor, scale }),
        ))
    }

    /// `λ_d·L_d + λ_s·L_s + λ_o·L_o + L_p`; a missing occupancy term counts as 0.
    pub fn total_loss(&mut self, l_d: Var, l_s: Var, l_o: Option<Var>, l_p: Var, cfg: &LossConfig) -> Var {
        let a = self.scale(l_d, c(cfg.lambda_d));
        let b = self.scale(l_s, c(cfg.lambda_s));
        let mut sum = self.add(a, b);
        if let Some(l_o) = l_o {
            let o = self.scale(l_o, c(cfg.lambda_o));
            sum = self.add(sum, o);
        }
        self.add(sum, l_p)
    }
}

/// Evaluates the weighted total of given component values.
pub fn total_loss_value(l_d: f64, l_s: f64, l_o: f64, l_p: f64, cfg: &LossConfig) -> Result<f64> {
    let v = cfg.lambda_d * l_d + cfg.lambda_s * l_s + cfg.lambda_o * l_o + l_p;
    if !v.is_finite() {
        return Err(Error::NonFiniteValue {
            op: "total_loss".into(),
        });
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{gradient_check, ParamStore};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn value_of(f: impl FnOnce(&mut Tape<f64>) -> Var) -> f64 {
        let mut t = Tape::new();
        let v = f(&mut t);
        t.scalar_value(v)
    }

    fn single_labels(pos: usize, neg: usize) -> Arc<Array2<PairLabel>> {
        let mut l = Array2::from_elem((1, pos + neg), PairLabel::Negative);
        for b in 0..pos {
            l[[0, b]] = PairLabel::Positive;
        }
        Arc::new(l)
    }

    #[test]
    fn shape_circle_examples() {
        let cfg = LossConfig::default();
        // Positive at d = 0 (cos 1), negative at d = 2 (cos −1): both factors 1.
        let v = value_of(|t| {
            let cos = t.constant(array![[1.0, -1.0]]);
            t.circle_loss(cos, Affinity::Difference, &single_labels(1, 1), &cfg).unwrap()
        });
        // Row anchor gives log(1·1) = 0; column anchors lack a negative/positive.
        assert_eq!(v, 0.0);
        // d = Δp exactly for the positive: cos = 1 − Δp²/2.
        let (pos, _, _) = anchor_term(&[0.1f64], &[2.0], &cfg);
        assert_eq!(pos, 0.0);
    }

    #[test]
    fn occupancy_circle_examples() {
        let cfg = LossConfig::default();
        let v = value_of(|t| {
            // positive antipodal (s = 0), negative identical (s = 2)
            let cos = t.constant(array![[-1.0, 1.0]]);
            t.circle_loss(cos, Affinity::Sum, &single_labels(1, 1), &cfg).unwrap()
        });
        assert_eq!(v, 0.0);
    }

    #[test]
    fn occupancy_positive_factor_decreases_toward_antipodal() {
        let cfg = LossConfig::default();
        let mut last = f64::INFINITY;
        for k in 0..=20 {
            let theta = std::f64::consts::PI * k as f64 / 20.0;
            let v = value_of(|t| {
                let cos = t.constant(array![[theta.cos(), 0.9]]);
                t.circle_loss(cos, Affinity::Sum, &single_labels(1, 1), &cfg).unwrap()
            });
            assert!(v <= last + 1e-12);
            last = v;
        }
    }

    #[test]
    fn orientation_examples() {
        let eye = Array2::from_shape_fn((3, 3), |(r, a)| if r == a { 1.0 } else { 0.0 });
        let pairs = Arc::new(vec![(0, 0)]);
        let id = Rotation::<f64>::identity();
        let v = value_of(|t| {
            let f = t.constant(eye.clone());
            t.orientation_loss(f, f, &id, &id, &pairs).unwrap()
        });
        assert_eq!(v, 0.0);
        let rz = Rotation::rot_z(std::f64::consts::PI);
        let v = value_of(|t| {
            let f = t.constant(eye.clone());
            t.orientation_loss(f, f, &id, &rz, &pairs).unwrap()
        });
        assert!((v - 2.0 * 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn orientation_invariant_to_common_right_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let fp = OrientationLayout::random(4, &mut rng);
        let fq = OrientationLayout::random(3, &mut rng);
        let pairs = Arc::new(vec![(0, 1), (2, 2), (3, 0)]);
        let rp = crate::geom::random_rotation::<f64>(1);
        let rq = crate::geom::random_rotation::<f64>(2);
        let g = crate::geom::random_rotation::<f64>(3);
        let eval = |a: &Rotation<f64>, b: &Rotation<f64>| {
            value_of(|t| {
                let x = t.constant(fp.clone());
                let y = t.constant(fq.clone());
                t.orientation_loss(x, y, a, b, &pairs).unwrap()
            })
        };
        let base = eval(&rp, &rq);
        let moved = eval(&rp.compose(&g), &rq.compose(&g));
        assert!((base - moved).abs() < 1e-10);
    }

    struct OrientationLayout;

    impl OrientationLayout {
        fn random(k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
            let mut out = Array2::zeros((3 * k, 3));
            for p in 0..k {
                let r = crate::geom::random_rotation_with::<f64, _>(rng);
                for a in 0..3 {
                    for s in 0..3 {
                        out[[3 * p + s, a]] = r.matrix()[(a, s)];
                    }
                }
            }
            out
        }
    }

    #[test]
    fn point_matching_examples() {
        let cfg = LossConfig::default();
        let corr = CorrespondenceSet {
            positives: vec![(0, 0)],
            mating_p: vec![0],
            mating_q: vec![0],
            labels: Arc::new(array![[PairLabel::Positive]]),
        };
        let v = value_of(|t| {
            let z = t.constant(array![[0.5f64.ln(), 0.0], [0.0, 0.0]]);
            t.point_matching_loss(z, &corr, &cfg).unwrap()
        });
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
        let v = value_of(|t| {
            let z = t.constant(array![[0.0, 0.0], [0.0, 0.0]]);
            t.point_matching_loss(z, &corr, &cfg).unwrap()
        });
        assert_eq!(v, 0.0);
        let v = value_of(|t| {
            let z = t.constant(array![[f64::NEG_INFINITY, 0.0], [0.0, 0.0]]);
            t.point_matching_loss(z, &corr, &cfg).unwrap()
        });
        assert!(v.is_finite() && (v - 1e-12f64.ln().abs()).abs() < 1e-9);
    }

    #[test]
    fn total_examples() {
        let cfg = LossConfig::default();
        assert_eq!(total_loss_value(0.0, 0.0, 0.0, 0.0, &cfg).unwrap(), 0.0);
        assert!((total_loss_value(1.0, 1.0, 1.0, 1.0, &cfg).unwrap() - 2.1).abs() < 1e-15);
        assert!(total_loss_value(f64::NAN, 0.0, 0.0, 0.0, &cfg).is_err());
    }

    #[test]
    fn labels_follow_safe_radius() {
        let p = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let q = vec![[0.01, 0.0, 0.0], [0.0, 0.02, 0.0], [1.0, 0.0, 0.5], [1.0, 0.005, 0.0]];
        let corr = CorrespondenceSet::from_assembled(&p, &q, 0.018);
        assert_eq!(corr.positives, vec![(0, 0), (1, 3)]);
        assert_eq!(corr.mating_q, vec![0, 3]);
        assert_eq!(corr.labels[[0, 1]], PairLabel::Negative);
        let q2 = vec![[0.02, 0.0, 0.0], [0.01, 0.0, 0.0]];
        let c2 = CorrespondenceSet::from_assembled(&p[..1], &q2, 0.018);
        assert_eq!(c2.positives, vec![(0, 1)]);
        assert!(!c2.mating_q.contains(&0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::<f64>::new();
        store.add_uniform("fp", 6, 5, 1.0, &mut rng);
        store.add_uniform("fq", 5, 5, 1.0, &mut rng);
        store.add_uniform("frames_p", 18, 3, 1.0, &mut rng);
        store.add_uniform("frames_q", 15, 3, 1.0, &mut rng);
        store.add_uniform("cost", 6, 5, 2.0, &mut rng);
        store.add("dustbin", array![[1.0]]);
        let labels = array![
            [PairLabel::Positive, PairLabel::Negative, PairLabel::Ignored, PairLabel::Negative],
            [PairLabel::Negative, PairLabel::Positive, PairLabel::Negative, PairLabel::Negative],
            [PairLabel::Negative, PairLabel::Positive, PairLabel::Positive, PairLabel::Negative],
        ];
        let corr = CorrespondenceSet {
            positives: vec![(0, 0), (2, 1), (4, 1), (4, 3)],
            mating_p: vec![0, 2, 4],
            mating_q: vec![0, 1, 3, 4],
            labels: Arc::new(labels),
        };
        let rp = crate::geom::random_rotation::<f64>(5);
        let rq = crate::geom::random_rotation::<f64>(6);
        let pairs = Arc::new(corr.positives.clone());
        for plus_one in [false, true] {
            for reduction in [Reduction::Sum, Reduction::Mean] {
                let cfg = LossConfig {
                    circle_plus_one: plus_one,
                    point_reduction: reduction,
                    gamma: 2.0,
                    ..Default::default()
                };
                let report = gradient_check(
                    &store,
                    |t, p| {
                        let ls = t.descriptor_circle_loss(p[0], p[1], &corr, Affinity::Difference, &cfg)?;
                        let lo = t.descriptor_circle_loss(p[0], p[1], &corr, Affinity::Sum, &cfg)?;
                        let up = t.slice_cols(p[2], 0, 2);
                        let uq = t.slice_cols(p[3], 0, 2);
                        let (fp, _) = t.gram_schmidt(up)?;
                        let (fq, _) = t.gram_schmidt(uq)?;
                        let ld = t.orientation_loss(fp, fq, &rp, &rq, &pairs)?;
                        let z = t.sinkhorn(p[4], p[5], 10)?;
                        let lp = t.point_matching_loss(z, &corr, &cfg)?;
                        Ok(t.total_loss(ld, ls, Some(lo), lp, &cfg))
                    },
                    1e-6,
                )
                .unwrap();
                assert!(report.max_error() < 1e-4, "{report:?}");
            }
        }
    }
}
