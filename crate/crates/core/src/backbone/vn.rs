//! Vector-neuron operations on the `(3K × C)` layout: row `3p + s` holds
//! spatial coordinate `s` of point `p`, column `c` is a channel. Every
//! operation here commutes with right-multiplying each point's 3-vectors by a
//! rotation.

use std::sync::Arc;

use ndarray::Array2;

use crate::diff::{Backward, BackwardCtx, GradAcc, Tape, Var};
use crate::error::{Error, Result};
use crate::geom::linalg::orthonormal_complement;
use crate::geom::transform::FRAME_EPS;
use crate::geom::vec3::{self, Vec3};
use crate::scalar::{c, Real};

/// Directions with `‖k‖² ≤ DIRECTION_EPS_SQ` leave the input unchanged.
const DIRECTION_EPS_SQ: f64 = 1e-24;

#[inline]
pub(crate) fn get3<T: Real>(a: &Array2<T>, p: usize, ch: usize) -> Vec3<T> {
    [a[[3 * p, ch]], a[[3 * p + 1, ch]], a[[3 * p + 2, ch]]]
}

#[inline]
fn add3<T: Real>(a: &mut Array2<T>, p: usize, ch: usize, v: Vec3<T>) {
    for (s, x) in v.into_iter().enumerate() {
        a[[3 * p + s, ch]] += x;
    }
}

/// Half-space leaky rectifier: `v` if `⟨v,k⟩ ≥ 0`, else
/// `v − (1−slope)·⟨v,k̂⟩·k̂`.
#[inline]
pub fn vn_leaky<T: Real>(v: Vec3<T>, k: Vec3<T>, slope: T) -> Vec3<T> {
    let kk = vec3::dot(k, k);
    if kk <= c(DIRECTION_EPS_SQ) {
        return v;
    }
    let d = vec3::dot(v, k);
    if d >= T::zero() {
        return v;
    }
    let f = (T::one() - slope) * d / kk;
    vec3::sub(v, vec3::scale(k, f))
}

/// Gradients of [`vn_leaky`] with respect to `v` and `k`.
#[inline]
fn vn_leaky_grad<T: Real>(v: Vec3<T>, k: Vec3<T>, slope: T, g: Vec3<T>) -> (Vec3<T>, Vec3<T>) {
    let n = vec3::dot(k, k);
    let d = vec3::dot(v, k);
    if n <= c(DIRECTION_EPS_SQ) || d >= T::zero() {
        return (g, [T::zero(); 3]);
    }
    let a = T::one() - slope;
    let kg = vec3::dot(k, g);
    let gv = vec3::sub(g, vec3::scale(k, a * kg / n));
    let two = c::<T>(2.0);
    let mut gk = [T::zero(); 3];
    for s in 0..3 {
        gk[s] = -a * (v[s] * kg + d * g[s]) / n + two * a * d * kg * k[s] / (n * n);
    }
    (gv, gk)
}

struct VnLeakyOp<T> {
    x: Var,
    k: Var,
    slope: T,
}

impl<T: Real> Backward<T> for VnLeakyOp<T> {
    fn name(&self) -> &'static str {
        "vn_leaky_relu"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &Array2<T>, acc: &mut GradAcc<T>) {
        let (x, k) = (ctx.value(self.x), ctx.value(self.k));
        let (np, nc) = (x.nrows() / 3, x.ncols());
        let mut gx = Array2::zeros(x.dim());
        let mut gk = Array2::zeros(x.dim());
        for p in 0..np {
            for ch in 0..nc {
                let (a, b) = vn_leaky_grad(get3(x, p, ch), get3(k, p, ch), self.slope, get3(g, p, ch));
                add3(&mut gx, p, ch, a);
                add3(&mut gk, p, ch, b);
            }
        }
        acc.add(self.x, &gx);
        acc.add(self.k, &gk);
    }
}

/// Argmax-by-norm selection over candidate groups, recorded for backward.
struct VnMaxPoolOp {
    x: Var,
    /// `chosen[q * C + c]` is the source point picked for output `q`, channel `c`.
    chosen: Vec<usize>,
    channels: usize,
}

impl<T: Real> Backward<T> for VnMaxPoolOp {
    fn name(&self) -> &'static str {
        "vn_max_pool"
    }

    fn backward(&self, _ctx: &BackwardCtx<'_, T>, g: &Array2<T>, acc: &mut GradAcc<T>) {
        if let Some(gx) = acc.grad_mut(self.x) {
            for (i, &src) in self.chosen.iter().enumerate() {
                let (q, ch) = (i / self.channels, i % self.channels);
                add3(gx, src, ch, get3(g, q, ch));
            }
        }
    }
}

/// Fused edge convolution. Edge features `[F_i, F_j − F_i]` pass through a
/// VN-Linear map that expands to `F_i·(W_c − W_e) + F_j·W_e`, so the per-point
/// products `A = F·(W_c − W_e)` and `B = F·W_e` (and their direction-map images
/// `A·U`, `B·U`) are computed once and combined per edge here.
struct EdgeConvOp<T> {
    a: Var,
    b: Var,
    ka: Var,
    kb: Var,
    slope: T,
    /// Winning neighbour per `(point, channel)`.
    chosen: Vec<usize>,
    channels: usize,
}

impl<T: Real> Backward<T> for EdgeConvOp<T> {
    fn name(&self) -> &'static str {
        "vn_edgeconv"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &Array2<T>, acc: &mut GradAcc<T>) {
        let (a, b) = (ctx.value(self.a), ctx.value(self.b));
        let (ka, kb) = (ctx.value(self.ka), ctx.value(self.kb));
        let mut ga = Array2::zeros(a.dim());
        let mut gb = Array2::zeros(b.dim());
        let mut gka = Array2::zeros(a.dim());
        let mut gkb = Array2::zeros(b.dim());
        for (idx, &j) in self.chosen.iter().enumerate() {
            let (i, ch) = (idx / self.channels, idx % self.channels);
            let v = vec3::add(get3(a, i, ch), get3(b, j, ch));
            let k = vec3::add(get3(ka, i, ch), get3(kb, j, ch));
            let (gv, gk) = vn_leaky_grad(v, k, self.slope, get3(g, i, ch));
            add3(&mut ga, i, ch, gv);
            add3(&mut gb, j, ch, gv);
            add3(&mut gka, i, ch, gk);
            add3(&mut gkb, j, ch, gk);
        }
        acc.add(self.a, &ga);
        acc.add(self.b, &gb);
        acc.add(self.ka, &gka);
        acc.add(self.kb, &gkb);
    }
}

struct GramSchmidtOp<T> {
    uv: Var,
    /// Per point: `‖u‖`, `‖w‖` and the effective `v` (after any perturbation).
    cache: Vec<(T, T, Vec3<T>)>,
}

impl<T: Real> Backward<T> for GramSchmidtOp<T> {
    fn name(&self) -> &'static str {
        "gram_schmidt"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &Array2<T>, acc: &mut GradAcc<T>) {
        let f = ctx.output();
        let Some(guv) = acc.grad_mut(self.uv) else {
            return;
        };
        for (p, &(nu, nw, v)) in self.cache.iter().enumerate() {
            let x = get3(f, p, 0);
            let y = get3(f, p, 1);
            let mut gx = get3(g, p, 0);
            let mut gy = get3(g, p, 1);
            let gz = get3(g, p, 2);
            // z = x × y
            gx = vec3::add(gx, vec3::cross(y, gz));
            gy = vec3::add(gy, vec3::cross(gz, x));
            // y = w / ‖w‖
            let gw = vec3::scale(vec3::sub(gy, vec3::scale(y, vec3::dot(y, gy))), T::one() / nw);
            // w = v − ⟨v,x⟩x
            let xgw = vec3::dot(x, gw);
            let gv = vec3::sub(gw, vec3::scale(x, xgw));
            let vx = vec3::dot(v, x);
            gx = vec3::sub(gx, vec3::add(vec3::scale(v, xgw), vec3::scale(gw, vx)));
            // x = u / ‖u‖
            let gu = vec3::scale(vec3::sub(gx, vec3::scale(x, vec3::dot(x, gx))), T::one() / nu);
            add3(guv, p, 0, gu);
            add3(guv, p, 1, gv);
        }
    }
}

struct InvariantOp {
    e: Var,
    f: Var,
}

impl<T: Real> Backward<T> for InvariantOp {
    fn name(&self) -> &'static str {
        "invariant_features"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &Array2<T>, acc: &mut GradAcc<T>) {
        let (e, f) = (ctx.value(self.e), ctx.value(self.f));
        let (np, nc) = (e.nrows() / 3, e.ncols());
        if acc.needs(self.e) {
            let mut ge = Array2::zeros(e.dim());
            for p in 0..np {
                for s in 0..3 {
                    let fr = f.row(3 * p + s);
                    let gr = g.row(p);
                    let mut out = ge.row_mut(3 * p + s);
                    for ch in 0..nc {
                        out[ch] = gr[3 * ch] * fr[0] + gr[3 * ch + 1] * fr[1] + gr[3 * ch + 2] * fr[2];
                    }
                }
            }
            acc.add(self.e, &ge);
        }
        if acc.needs(self.f) {
            let mut gf = Array2::zeros(f.dim());
            for p in 0..np {
                for s in 0..3 {
                    let er = e.row(3 * p + s);
                    let gr = g.row(p);
                    for a in 0..3 {
                        let mut sum = T::zero();
                        for ch in 0..nc {
                            sum += gr[3 * ch + a] * er[ch];
                        }
                        gf[[3 * p + s, a]] = sum;
                    }
                }
            }
            acc.add(self.f, &gf);
        }
    }
}

fn check_layout<T: Real>(tape: &Tape<T>, op: &'static str, v: Var) -> Result<usize> {
    let (r, _) = tape.shape(v);
    if r % 3 != 0 {
        return Err(Error::shape(op, "row count divisible by 3", r));
    }
    Ok(r / 3)
}

impl<T: Real> Tape<T> {
    /// VN-Linear: each output channel mixes input channel vectors with the
    /// weights `w` (`C_in × C_out`), never mixing spatial coordinates.
    pub fn vn_linear(&mut self, x: Var, w: Var) -> Result<Var> {
        check_layout(self, "vn_linear", x)?;
        if self.shape(x).1 != self.shape(w).0 {
            return Err(Error::shape(
                "vn_linear",
                format!("{} input channels", self.shape(w).0),
                self.shape(x).1,
            ));
        }
        Ok(self.matmul(x, w))
    }

    /// VN-LeakyReLU with learned directions `k = x·u`.
    pub fn vn_leaky_relu(&mut self, x: Var, u: Var, slope: T) -> Result<Var> {
        let k = self.vn_linear(x, u)?;
        Ok(self.vn_leaky_with_direction(x, k, slope))
    }

    /// VN-LeakyReLU with explicitly supplied directions (same shape as `x`).
    pub fn vn_leaky_with_direction(&mut self, x: Var, k: Var, slope: T) -> Var {
        assert_eq!(self.shape(x), self.shape(k), "vn_leaky_relu: direction shape differs");
        let (xv, kv) = (self.value(x), self.value(k));
        let mut out = xv.clone();
        for p in 0..xv.nrows() / 3 {
            for ch in 0..xv.ncols() {
                let y = vn_leaky(get3(xv, p, ch), get3(kv, p, ch), slope);
                for s in 0..3 {
                    out[[3 * p + s, ch]] = y[s];
                }
            }
        }
        self.push_op(out, &[x, k], Box::new(VnLeakyOp { x, k, slope }))
    }

    /// For each group of source points, picks per channel the member vector of
    /// largest norm (first on ties).
    pub fn vn_max_pool(&mut self, x: Var, groups: &[Vec<usize>]) -> Result<Var> {
        check_layout(self, "vn_max_pool", x)?;
        let xv = self.value(x);
        let nc = xv.ncols();
        let mut out = Array2::zeros((3 * groups.len(), nc));
        let mut chosen = vec![0usize; groups.len() * nc];
        for (q, group) in groups.iter().enumerate() {
            if group.is_empty() {
                return Err(Error::InvalidArgument("vn_max_pool: empty group".into()));
            }
            for ch in 0..nc {
                let mut best = (T::neg_infinity(), group[0]);
                for &src in group {
                    let n = vec3::norm_sq(get3(xv, src, ch));
                    if n > best.0 {
                        best = (n, src);
                    }
                }
                chosen[q * nc + ch] = best.1;
                let v = get3(xv, best.1, ch);
                for s in 0..3 {
                    out[[3 * q + s, ch]] = v[s];
                }
            }
        }
        Ok(self.push_op(
            out,
            &[x],
            Box::new(VnMaxPoolOp {
                x,
                chosen,
                channels: nc,
            }),
        ))
    }

    /// VN edge convolution: VN-Linear (`w_center`, `w_edge`) and VN-LeakyReLU
    /// (direction map `u`) on every edge `[F_i, F_j − F_i]`, then max-by-norm
    /// pooling over the neighbours `nbrs[i]`.
    pub fn vn_edgeconv(
        &mut self,
        x: Var,
        w_center: Var,
        w_edge: Var,
        u: Var,
        nbrs: &Arc<Vec<Vec<usize>>>,
        slope: T,
    ) -> Result<Var> {
        let np = check_layout(self, "vn_edgeconv", x)?;
        if nbrs.len() != np {
            return Err(Error::shape("vn_edgeconv", format!("{np} neighbour lists"), nbrs.len()));
        }
        let wd = self.sub(w_center, w_edge);
        let a = self.vn_linear(x, wd)?;
        let b = self.vn_linear(x, w_edge)?;
        let ka = self.vn_linear(a, u)?;
        let kb = self.vn_linear(b, u)?;
        let (av, bv, kav, kbv) = (self.value(a), self.value(b), self.value(ka), self.value(kb));
        let nc = av.ncols();
        let mut out = Array2::zeros((3 * np, nc));
        let mut chosen = vec![0usize; np * nc];
        let mut best = vec![T::neg_infinity(); nc];
        for (i, list) in nbrs.iter().enumerate() {
            if list.is_empty() {
                return Err(Error::InvalidArgument("vn_edgeconv: point without neighbours".into()));
            }
            best.fill(T::neg_infinity());
            for &j in list {
                for ch in 0..nc {
                    let v = vec3::add(get3(av, i, ch), get3(bv, j, ch));
                    let k = vec3::add(get3(kav, i, ch), get3(kbv, j, ch));
                    let y = vn_leaky(v, k, slope);
                    let n = vec3::norm_sq(y);
                    if n > best[ch] {
                        best[ch] = n;
                        chosen[i * nc + ch] = j;
                        for s in 0..3 {
                            out[[3 * i + s, ch]] = y[s];
                        }
                    }
                }
            }
        }
        Ok(self.push_op(
            out,
            &[a, b, ka, kb],
            Box::new(EdgeConvOp {
                a,
                b,
                ka,
                kb,
                slope,
                chosen,
                channels: nc,
            }),
        ))
    }

    /// Gram-Schmidt on per-point candidate axes `uv` (`3K × 2`). Returns the
    /// frames as `3K × 3` (column `a` holds axis `a`) and the input magnitudes
    /// `(‖u‖, ‖v‖)` per point.
    ///
    /// A degenerate `v` is nudged by `1e-6` along a fixed direction orthogonal
    /// to `x` once before giving up.
    pub fn gram_schmidt(&mut self, uv: Var) -> Result<(Var, Vec<[T; 2]>)> {
        let np = check_layout(self, "gram_schmidt", uv)?;
        if self.shape(uv).1 != 2 {
            return Err(Error::shape("gram_schmidt", "2 channels", self.shape(uv).1));
        }
        let src = self.value(uv);
        let eps = c::<T>(FRAME_EPS);
        let mut out = Array2::zeros((3 * np, 3));
        let mut cache = Vec::with_capacity(np);
        let mut mags = Vec::with_capacity(np);
        for p in 0..np {
            let u = get3(src, p, 0);
            let mut v = get3(src, p, 1);
            let nu = vec3::norm(u);
            mags.push([nu, vec3::norm(v)]);
            if !(nu > eps) {
                return Err(Error::DegenerateFrame);
            }
            let x = vec3::scale(u, T::one() / nu);
            let mut w = vec3::sub(v, vec3::scale(x, vec3::dot(v, x)));
            let mut nw = vec3::norm(w);
            if !(nw > eps) {
                let (dir, _) = orthonormal_complement(x);
                v = vec3::add(v, vec3::scale(dir, c(1e-6)));
                w = vec3::sub(v, vec3::scale(x, vec3::dot(v, x)));
                nw = vec3::norm(w);
                if !(nw > eps) {
                    return Err(Error::DegenerateFrame);
                }
            }
            let y = vec3::scale(w, T::one() / nw);
            let z = vec3::cross(x, y);
            for s in 0..3 {
                out[[3 * p + s, 0]] = x[s];
                out[[3 * p + s, 1]] = y[s];
                out[[3 * p + s, 2]] = z[s];
            }
            cache.push((nu, nw, v));
        }
        let var = self.push_op(out, &[uv], Box::new(GramSchmidtOp { uv, cache }));
        Ok((var, mags))
    }

    /// Rotation-invariant features: per point, `E_pᵀ·F_p` (`C × 3`, entry
    /// `(c, a)` = channel vector `c` dotted with axis `a`) flattened row-major
    /// into a row of length `3C`.
    pub fn invariant_features(&mut self, e: Var, f: Var) -> Result<Var> {
        let np = check_layout(self, "invariant_features", e)?;
        if self.shape(f) != (3 * np, 3) {
            return Err(Error::shape(
                "invariant_features",
                format!("({}, 3) frames", 3 * np),
                format!("{:?}", self.shape(f)),
            ));
        }
        let (ev, fv) = (self.value(e), self.value(f));
        let nc = ev.ncols();
        let mut out = Array2::zeros((np, 3 * nc));
        for p in 0..np {
            for s in 0..3 {
                let er = ev.row(3 * p + s);
                let fr = fv.row(3 * p + s);
                let mut o = out.row_mut(p);
                for ch in 0..nc {
                    for a in 0..3 {
                        o[3 * ch + a] += er[ch] * fr[a];
                    }
                }
            }
        }
        Ok(self.push_op(out, &[e, f], Box::new(InvariantOp { e, f })))
    }
}
