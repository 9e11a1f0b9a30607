//! Log-domain Sinkhorn normalization with a dustbin row and column.
//!
//! Marginals give every real row/column mass 1 and the dustbins mass `M` and
//! `N` respectively; the output is the log-assignment rescaled so that real
//! rows and columns sum to 1.

use ndarray::{Array1, Array2};

use crate::diff::{Backward, BackwardCtx, GradAcc, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Real;

fn log_sum_exp<T: Real>(xs: impl Iterator<Item = T> + Clone) -> T {
    let m = xs.clone().fold(T::neg_infinity(), T::max);
    if m == T::neg_infinity() {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).fold(T::zero(), |a, b| a + b).ln()
}

/// Intermediate state of one run, kept for the backward pass.
struct Trace<T> {
    scores: Array2<T>,
    us: Vec<Array1<T>>,
    vs: Vec<Array1<T>>,
}

fn augment<T: Real>(cost: &Array2<T>, dustbin: T) -> Array2<T> {
    let (n, m) = cost.dim();
    let mut s = Array2::from_elem((n + 1, m + 1), dustbin);
    s.slice_mut(ndarray::s![..n, ..m]).assign(cost);
    s
}

fn marginals<T: Real>(n: usize, m: usize) -> (Array1<T>, Array1<T>, T) {
    let norm = -T::from_usize_lossy(n + m).ln();
    let mut log_mu = Array1::from_elem(n + 1, norm);
    log_mu[n] = T::from_usize_lossy(m).ln() + norm;
    let mut log_nu = Array1::from_elem(m + 1, norm);
    log_nu[m] = T::from_usize_lossy(n).ln() + norm;
    (log_mu, log_nu, norm)
}

fn run<T: Real>(cost: &Array2<T>, dustbin: T, iterations: usize, keep: bool) -> (Array2<T>, Option<Trace<T>>) {
    let (n, m) = cost.dim();
    let s = augment(cost, dustbin);
    let (log_mu, log_nu, norm) = marginals::<T>(n, m);
    let mut u = Array1::zeros(n + 1);
    let mut v = Array1::zeros(m + 1);
    let mut us = Vec::new();
    let mut vs = Vec::new();
    for _ in 0..iterations {
        for i in 0..=n {
            let row = s.row(i);
            u[i] = log_mu[i] - log_sum_exp(row.iter().zip(v.iter()).map(|(a, b)| *a + *b));
        }
        for j in 0..=m {
            let col = s.column(j);
            v[j] = log_nu[j] - log_sum_exp(col.iter().zip(u.iter()).map(|(a, b)| *a + *b));
        }
        if keep {
            us.push(u.clone());
            vs.push(v.clone());
        }
    }
    let mut out = s.clone();
    for ((i, j), x) in out.indexed_iter_mut() {
        *x = *x + u[i] + v[j] - norm;
    }
    let trace = keep.then_some(Trace { scores: s, us, vs });
    (out, trace)
}

/// Log-assignment `(N+1)×(M+1)` for `cost` (`N×M`) and a dustbin score.
pub fn log_sinkhorn<T: Real>(cost: &Array2<T>, dustbin: T, iterations: usize) -> Result<Array2<T>> {
    if iterations == 0 {
        return Err(Error::InvalidArgument("sinkhorn needs at least one iteration".into()));
    }
    let (out, _) = run(cost, dustbin, iterations, false);
    if out.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteValue {
            op: "sinkhorn".into(),
        });
    }
    Ok(out)
}

struct SinkhornOp<T> {
    cost: Var,
    dustbin: Var,
    trace: Trace<T>,
}

impl<T: Real> Backward<T> for SinkhornOp<T> {
    fn name(&self) -> &'static str {
        "sinkhorn"
    }

    /// Reverse pass through the unrolled iterations. With `P` the row-softmax
    /// of `S + v` used to compute `u`, and `Q` the column-softmax of `S + u`
    /// used to compute `v`, each update contributes `−P·diag(ḡu)` or
    /// `−diag(ḡv)·Q` to `∂S` and propagates to the previous potential.
    fn backward(&self, _ctx: &BackwardCtx<'_, T>, g: &Array2<T>, acc: &mut GradAcc<T>) {
        let Trace { scores: s, us, vs } = &self.trace;
        let (n1, m1) = s.dim();
        let mut gs = g.clone();
        let mut gu: Array1<T> = g.sum_axis(ndarray::Axis(1));
        let mut gv: Array1<T> = g.sum_axis(ndarray::Axis(0));
        let (log_mu, log_nu, _) = marginals::<T>(n1 - 1, m1 - 1);
        for t in (0..us.len()).rev() {
            let u = &us[t];
            let v = &vs[t];
            // v_j = log ν_j − LSE_i(S_ij + u_i)
            for j in 0..m1 {
                let gvj = gv[j];
                if gvj == T::zero() {
                    continue;
                }
                for i in 0..n1 {
                    let q = (s[[i, j]] + u[i] + v[j] - log_nu[j]).exp();
                    gs[[i, j]] -= q * gvj;
                    gu[i] -= q * gvj;
                }
            }
            // u_i = log μ_i − LSE_j(S_ij + v_prev_j)
            let mut gv_prev = Array1::zeros(m1);
            for i in 0..n1 {
                let gui = gu[i];
                if gui == T::zero() {
                    continue;
                }
                for j in 0..m1 {
                    let vp = if t == 0 { T::zero() } else { vs[t - 1][j] };
                    let p = (s[[i, j]] + vp + u[i] - log_mu[i]).exp();
                    gs[[i, j]] -= p * gui;
                    gv_prev[j] -= p * gui;
                }
            }
            gu.fill(T::zero());
            gv = gv_prev;
        }
        let (n, m) = (n1 - 1, m1 - 1);
        if let Some(gc) = acc.grad_mut(self.cost) {
            *gc += &gs.slice(ndarray::s![..n, ..m]);
        }
        if let Some(gd) = acc.grad_mut(self.dustbin) {
            let mut total = T::zero();
            for i in 0..n1 {
                total += gs[[i, m]];
            }
            for j in 0..m {
                total += gs[[n, j]];
            }
            gd[[0, 0]] += total;
        }
    }
}

impl<T: Real> Tape<T> {
    /// Differentiable log-domain Sinkhorn; `dustbin` is a `1×1` node.
    pub fn sinkhorn(&mut self, cost: Var, dustbin: Var, iterations: usize) -> Result<Var> {
        if iterations == 0 {
            return Err(Error::InvalidArgument("sinkhorn needs at least one iteration".into()));
        }
        if self.shape(dustbin) != (1, 1) {
            return Err(Error::shape("sinkhorn", "1×1 dustbin score", format!("{:?}", self.shape(dustbin))));
        }
        let alpha = self.scalar_value(dustbin);
        let keep = self.needs_grad(cost) || self.needs_grad(dustbin);
        let (out, trace) = run(self.value(cost), alpha, iterations, keep);
        match trace {
            Some(trace) => Ok(self.push_op(out, &[cost, dustbin], Box::new(SinkhornOp { cost, dustbin, trace }))),
            None => Ok(self.constant(out)),
        }
    }
}
