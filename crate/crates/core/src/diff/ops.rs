//! Primitive differentiable operations on 2-D values.

use std::sync::Arc;

use ndarray::linalg::general_mat_mul;
use ndarray::{concatenate, s, Array2, Axis, Zip};

use crate::diff::tape::{Backward, BackwardCtx, GradAcc, Tape, Var};
use crate::scalar::{c, Real};

macro_rules! op_name {
    ($t:ty, $n:expr) => {
        fn name(&self) -> &'static str {
            $n
        }
    };
}

struct MatMul {
    a: Var,
    b: Var,
}

impl<T: Real> Backward<T> for MatMul {
    op_name!(T, "matmul");
    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &Array2<T>, acc: &mut GradAcc<T>) {
        let (a, b) = (ctx.value(self.a), ctx.value(self.b));
        if let Some(ga) = acc.grad_mut(self.a) {
            general_mat_mul(T::one(), g, &b.t(), T::one(), ga);
        }
        if let Some(gb) = acc.grad_mut(self.b) {
            general_mat_mul(T::one(), &a.t(), g, T::one(), gb);
        }
    }
}

/// `a · bᵀ`
struct MatMulNT {
    a: Var,
    b: Var,
}

impl<T: Real> Backward<T> for MatMulNT {
    op_name!(T, "matmul_nt");
    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &Array2<T>, acc: &mut GradAcc<T>) {
        let (a, b) = (ctx.value(self.a), ctx.value(self.b));
        if let Some(ga) = acc.grad_mut(self.a) {
            general_mat_mul(T::one(), g, b, T::one(), ga);
        }
        if let Some(gb) = acc.grad_mut(self.b) {
            general_mat_mul(T::one(), &g.t(), a, T::one(), gb);
        }
    }
}

struct AddSub {
    a: Var,
    b: Var,
    sign: f64,
}

impl<T: Real> Backward<T> for AddSub {
    fn name(&self) -> &'static str {
        if self.sign > 0.0 {
            "add"
        } else {
            "sub"
        }
    }
    fn backward(&self, _ctx: &BackwardCtx<'_, T>, g: &Array2<T>, acc: &mut GradAcc<T>) {
        acc.add(self.a, g);
        if let Some(gb) = acc.grad_mut(self.b) {
            if self.sign > 0.0 {
                *gb += g;
            } else {
                *gb -= g;
            }
        }
    }
}

struct Mul {
    a: Var,
    b: Var,
}

impl<T: Real> Backward<T> for Mul {
    op_name!(T, "mul");
    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &Array2<T>, acc: &mut GradAcc<T>) {
        let (a, b) = (ctx.value(self.a), ctx.value(self.b));
        if let Some(ga) = acc.grad_mut(self.a) {
            Zip::from(ga).and(g).and(b).for_each(|ga, &g, &b| *ga += g * b);
        }
        if let Some(gb) = acc.grad_mut(self.b) {
            Zip::from(gb).and(g).and(a).for_each(|gb, &g, &a| *gb += g * a);
        }
    }
}

/// `a (r×c) + b (1×c)` broadcast over rows.
struct AddRow {
    a: Var,
    b: Var,
}

impl<T: Real> Backward<T> for AddRow {
    op_name!(T, "add_row");
    fn backward(&self, _ctx: &BackwardCtx<'_, T>, g: &Array2<T>, acc: &mut GradAcc<T>) {
        acc.add(self.a, g);
        if let Some(gb) = acc.grad_mut(self.b) {
            *gb += &g.sum_axis(Axis(0)).insert_axis(Axis(0));
        }
    }
}

/// `a (r×c) ⊙ b (1×c)` broadcast over rows.
struct MulRow {
    a: Var,
    b: Var,
}

impl<T: Real> Backward<T> for MulRow {
    op_name!(T, "mul_row");
    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &Array2<T>, acc: &mut GradAcc<T>) {
        let (a, b) = (ctx.value(self.a), ctx.value(self.b));
        if let Some(ga) = acc.grad_mut(self.a) {
            *ga += &(g * b);
        }
        if let Some(gb) = acc.grad_mut(self.b) {
            *gb += &(g * a).sum_axis(Axis(0)).insert_axis(Axis(0));
        }
    }
}

/// `a (r×c) ⊙ b (r×1)` broadcast over columns.
struct MulCol {
    a: Var,
    b: Var,
}

impl<T: Real> Backward<T> for MulCol {
    op_name!(T, "mul_col");
    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &Array2<T>, acc: &mut GradAcc<T>) {
        let (a, b) = (ctx.value(self.a), ctx.value(self.b));
        if let Some(ga) = acc.grad_mut(self.a) {
            *ga += &(g * b);
        }
        if let Some(gb) = acc.grad_mut(self.b) {
            *gb += &(g * a).sum_axis(Axis(1)).insert_axis(Axis(1));
        }
    }
}

struct Scale<T> {
    a: Var,
    s: T,
}

impl<T: Real> Backward<T> for Scale<T> {
    op_name!(T, "scale");
    fn backward(&self, _ctx: &BackwardCtx<'_, T>, g: &Array2<T>, acc: &mut GradAcc<T>) {
        if let Some(ga) = acc.grad_mut(self.a) {
            ga.scaled_add(self.s, g);
        }
    }
}

/// Multiplies by a `1×1` node.
struct ScaleBy {
    a: Var,
    s: Var,
}

impl<T: Real> Backward<T> for ScaleBy {
    op_name!(T, "scale_by");
    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &Array2<T>, acc: &mut GradAcc<T>) {
        let s = ctx.value(self.s)[[0, 0]];
        let a = ctx.value(self.a);
        if let Some(ga) = acc.grad_mut(self.a) {
            ga.scaled_add(s, g);
        }
        if let Some(gs) = acc.grad_mut(self.s) {
            gs[[0, 0]] += (g * a).sum();
        }
    }
}

struct Identity {
    a: Var,
}

impl<T: Real> Backward<T> for Identity {
    op_name!(T, "add_scalar");
    fn backward(&self, _ctx: &BackwardCtx<'_, T>, g: &Array2<T>, acc: &mut GradAcc<T>) {
        acc.add(self.a, g);
    }
}

/// Pointwise op whose derivative is a function of the input and output values.
struct Pointwise<T> {
    a: Var,
    name: &'static str,
    deriv: fn(x: T, y: T, param: T) -> T,
    param: T,
}

impl<T: Real> Backward<T> for Pointwise<T> {
    fn name(&self) -> &'static str {
        self.name
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &Array2<T>, acc: &mut GradAcc<T>) {
        let x = ctx.value(self.a);
        let y = ctx.output();
        let (deriv, p) = (self.deriv, self.param);
        if let Some(ga) = acc.grad_mut(self.a) {
            Zip::from(ga)
                .and(g)
                .and(x)
                .and(y)
                .for_each(|ga, &g, &x, &y| *ga += g * deriv(x, y, p));
        }
    }
}

struct SumAll {
    a: Var,
    scale: f64,
}

impl<T: Real> Backward<T> for SumAll {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn backward(&self, _ctx: &BackwardCtx<'_, T>, g: &Array2<T>, acc: &mut GradAcc<T>) {
        let gv = g[[0, 0]] * T::c(self.scale);
        if let Some(ga) = acc.grad_mut(self.a) {
            ga.mapv_inplace(|x| x + gv);
        }
    }
}

/// Reduction over axis 0 (rows) to a `1×c` row, scaled.
struct SumRows {
    a: Var,
    scale: f64,
}

impl<T: Real> Backward<T> for SumRows {
    fn name(&self) -> &'static str {
        "sum_rows"
    }
    fn backward(&self, _ctx: &BackwardCtx<'_, T>, g: &Array2<T>, acc: &mut GradAcc<T>) {
        let s = T::c(self.scale);
        if let Some(ga) = acc.grad_mut(self.a) {
            for mut row in ga.rows_mut() {
                row.scaled_add(s, &g.row(0));
            }
        }
    }
}

/// Reduction over axis 1 (columns) to an `r×1` column.
struct SumCols {
    a: Var,
}

impl<T: Real> Backward<T> for SumCols {
    op_name!(T, "sum_cols");
    fn backward(&self, _ctx: &BackwardCtx<'_, T>, g: &Array2<T>, acc: &mut GradAcc<T>) {
        if let Some(ga) = acc.grad_mut(self.a) {
            for (mut row, gv) in ga.rows_mut().into_iter().zip(g.column(0)) {
                row.mapv_inplace(|x| x + *gv);
            }
        }
    }
}

struct MaxRows {
    a: Var,
    argmax: Vec<usize>,
}

impl<T: Real> Backward<T> for MaxRows {
    op_name!(T, "max_rows");
    fn backward(&self, _ctx: &BackwardCtx<'_, T>, g: &Array2<T>, acc: &mut GradAcc<T>) {
        if let Some(ga) = acc.grad_mut(self.a) {
            for (col, &row) in self.argmax.iter().enumerate() {
                ga[[row, col]] += g[[0, col]];
            }
        }
    }
}

struct NormalizeRows<T> {
    a: Var,
    norms: Vec<T>,
    eps: T,
}

impl<T: Real> Backward<T> for NormalizeRows<T> {
    op_name!(T, "l2_normalize_rows");
    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &Array2<T>, acc: &mut GradAcc<T>) {
        let y = ctx.output();
        if let Some(ga) = acc.grad_mut(self.a) {
            for (i, &n) in self.norms.iter().enumerate() {
                let gi = g.row(i);
                if n > self.eps {
                    let yi = y.row(i);
                    let d = yi.dot(&gi);
                    let inv = T::one() / n;
                    for ((o, &gv), &yv) in ga.row_mut(i).iter_mut().zip(gi).zip(yi) {
                        *o += (gv - yv * d) * inv;
                    }
                } else {
                    let inv = T::one() / self.eps;
                    for (o, &gv) in ga.row_mut(i).iter_mut().zip(gi) {
                        *o += gv * inv;
                    }
                }
            }
        }
    }
}

struct GatherRows {
    a: Var,
    index: Arc<Vec<usize>>,
}

impl<T: Real> Backward<T> for GatherRows {
    op_name!(T, "gather_rows");
    fn backward(&self, _ctx: &BackwardCtx<'_, T>, g: &Array2<T>, acc: &mut GradAcc<T>) {
        if let Some(ga) = acc.grad_mut(self.a) {
            for (dst, &src) in self.index.iter().enumerate() {
                let mut row = ga.row_mut(src);
                row += &g.row(dst);
            }
        }
    }
}

/// Constant sparse matrix in compressed-row form.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRows<T> {
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub weights: Vec<T>,
    pub n_cols: usize,
}

impl<T: Real> SparseRows<T> {
    pub fn from_rows(rows: &[Vec<(usize, T)>], n_cols: usize) -> Self {
        let mut indptr = Vec::with_capacity(rows.len() + 1);
        let mut indices = Vec::new();
        let mut weights = Vec::new();
        indptr.push(0);
        for r in rows {
            for &(j, w) in r {
                indices.push(j);
                weights.push(w);
            }
            indptr.push(indices.len());
        }
        SparseRows {
            indptr,
            indices,
            weights,
            n_cols,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.indptr.len() - 1
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let r = self.indptr[i]..self.indptr[i + 1];
        self.indices[r.clone()].iter().copied().zip(self.weights[r].iter().copied())
    }
}

struct SparseMul<T> {
    a: Var,
    m: Arc<SparseRows<T>>,
}

impl<T: Real> Backward<T> for SparseMul<T> {
    op_name!(T, "sparse_mul");
    fn backward(&self, _ctx: &BackwardCtx<'_, T>, g: &Array2<T>, acc: &mut GradAcc<T>) {
        if let Some(ga) = acc.grad_mut(self.a) {
            for i in 0..self.m.n_rows() {
                for (j, w) in self.m.row(i) {
                    let mut row = ga.row_mut(j);
                    row.scaled_add(w, &g.row(i));
                }
            }
        }
    }
}

struct ConcatCols {
    parts: Vec<(Var, usize, usize)>,
}

impl<T: Real> Backward<T> for ConcatCols {
    op_name!(T, "concat_cols");
    fn backward(&self, _ctx: &BackwardCtx<'_, T>, g: &Array2<T>, acc: &mut GradAcc<T>) {
        for &(v, start, end) in &self.parts {
            if let Some(gv) = acc.grad_mut(v) {
                *gv += &g.slice(s![.., start..end]);
            }
        }
    }
}

struct ConcatRows {
    parts: Vec<(Var, usize, usize)>,
}

impl<T: Real> Backward<T> for ConcatRows {
    op_name!(T, "concat_rows");
    fn backward(&self, _ctx: &BackwardCtx<'_, T>, g: &Array2<T>, acc: &mut GradAcc<T>) {
        for &(v, start, end) in &self.parts {
            if let Some(gv) = acc.grad_mut(v) {
                *gv += &g.slice(s![start..end, ..]);
            }
        }
    }
}

struct Transpose {
    a: Var,
}

impl<T: Real> Backward<T> for Transpose {
    op_name!(T, "transpose");
    fn backward(&self, _ctx: &BackwardCtx<'_, T>, g: &Array2<T>, acc: &mut GradAcc<T>) {
        if let Some(ga) = acc.grad_mut(self.a) {
            *ga += &g.t();
        }
    }
}

struct SliceCols {
    a: Var,
    start: usize,
    end: usize,
}

impl<T: Real> Backward<T> for SliceCols {
    op_name!(T, "slice_cols");
    fn backward(&self, _ctx: &BackwardCtx<'_, T>, g: &Array2<T>, acc: &mut GradAcc<T>) {
        if let Some(ga) = acc.grad_mut(self.a) {
            let mut view = ga.slice_mut(s![.., self.start..self.end]);
            view += g;
        }
    }
}

/// Per-column standardization over rows (instance normalization without
/// affine parameters).
struct InstanceNorm<T> {
    a: Var,
    inv_std: Vec<T>,
}

impl<T: Real> Backward<T> for InstanceNorm<T> {
    op_name!(T, "instance_norm");
    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &Array2<T>, acc: &mut GradAcc<T>) {
        let y = ctx.output();
        let n = T::from_usize_lossy(y.nrows());
        if let Some(ga) = acc.grad_mut(self.a) {
            let mean_g = g.sum_axis(Axis(0)) / n;
            let mean_gy = (g * y).sum_axis(Axis(0)) / n;
            Zip::indexed(ga).and(g).and(y).for_each(|(_, j), ga, &g, &y| {
                *ga += self.inv_std[j] * (g - mean_g[j] - y * mean_gy[j]);
            });
        }
    }
}

fn leaky_deriv<T: Real>(x: T, _y: T, slope: T) -> T {
    if x > T::zero() {
        T::one()
    } else {
        slope
    }
}

fn tanh_deriv<T: Real>(_x: T, y: T, _p: T) -> T {
    T::one() - y * y
}

fn sigmoid_deriv<T: Real>(_x: T, y: T, _p: T) -> T {
    y * (T::one() - y)
}

fn exp_deriv<T: Real>(_x: T, y: T, _p: T) -> T {
    y
}

fn ln_deriv<T: Real>(x: T, _y: T, _p: T) -> T {
    T::one() / x
}

fn sqrt_deriv<T: Real>(_x: T, y: T, _p: T) -> T {
    T::one() / (c::<T>(2.0) * y)
}

fn abs_deriv<T: Real>(x: T, _y: T, _p: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn neg_deriv<T: Real>(_x: T, _y: T, _p: T) -> T {
    -T::one()
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Tape<T> {
    fn assert_same_shape(&self, op: &str, a: Var, b: Var) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{op}: operand shapes differ"
        );
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push_op(value, &[a, b], Box::new(MatMul { a, b }))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        self.push_op(value, &[a, b], Box::new(MatMulNT { a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape("add", a, b);
        let value = self.value(a) + self.value(b);
        self.push_op(value, &[a, b], Box::new(AddSub { a, b, sign: 1.0 }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape("sub", a, b);
        let value = self.value(a) - self.value(b);
        self.push_op(value, &[a, b], Box::new(AddSub { a, b, sign: -1.0 }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape("mul", a, b);
        let value = self.value(a) * self.value(b);
        self.push_op(value, &[a, b], Box::new(Mul { a, b }))
    }

    /// Adds a `1×c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "add_row: expected a 1×c row");
        let value = self.value(a) + self.value(row);
        self.push_op(value, &[a, row], Box::new(AddRow { a, b: row }))
    }

    /// Scales every row of `a` elementwise by a `1×c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "mul_row: expected a 1×c row");
        let value = self.value(a) * self.value(row);
        self.push_op(value, &[a, row], Box::new(MulRow { a, b: row }))
    }

    /// Scales every column of `a` elementwise by an `r×1` column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        assert_eq!(self.shape(col).1, 1, "mul_col: expected an r×1 column");
        let value = self.value(a) * self.value(col);
        self.push_op(value, &[a, col], Box::new(MulCol { a, b: col }))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a) * s;
        self.push_op(value, &[a], Box::new(Scale { a, s }))
    }

    /// Multiplies `a` by the `1×1` node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.shape(s), (1, 1), "scale_by: expected a 1×1 factor");
        let sv = self.value(s)[[0, 0]];
        let value = self.value(a) * sv;
        self.push_op(value, &[a, s], Box::new(ScaleBy { a, s }))
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a) + s;
        self.push_op(value, &[a], Box::new(Identity { a }))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.pointwise(a, "neg", |x, _| -x, neg_deriv, T::zero())
    }

    fn pointwise(
        &mut self,
        a: Var,
        name: &'static str,
        f: fn(T, T) -> T,
        deriv: fn(T, T, T) -> T,
        param: T,
    ) -> Var {
        let value = self.value(a).mapv(|x| f(x, param));
        self.push_op(
            value,
            &[a],
            Box::new(Pointwise {
                a,
                name,
                deriv,
                param,
            }),
        )
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        self.pointwise(
            a,
            "leaky_relu",
            |x, s| if x > T::zero() { x } else { x * s },
            leaky_deriv,
            slope,
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, T::zero())
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.pointwise(a, "tanh", |x, _| x.tanh(), tanh_deriv, T::zero())
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.pointwise(a, "sigmoid", |x, _| sigmoid(x), sigmoid_deriv, T::zero())
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.pointwise(a, "exp", |x, _| x.exp(), exp_deriv, T::zero())
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.pointwise(a, "ln", |x, _| x.ln(), ln_deriv, T::zero())
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.pointwise(a, "sqrt", |x, _| x.sqrt(), sqrt_deriv, T::zero())
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.pointwise(a, "abs", |x, _| x.abs(), abs_deriv, T::zero())
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        self.push_op(value, &[a], Box::new(SumAll { a, scale: 1.0 }))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let value = Array2::from_elem((1, 1), self.value(a).sum() / T::from_usize_lossy(n));
        self.push_op(
            value,
            &[a],
            Box::new(SumAll {
                a,
                scale: 1.0 / n as f64,
            }),
        )
    }

    /// Column sums as a `1×c` row.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push_op(value, &[a], Box::new(SumRows { a, scale: 1.0 }))
    }

    /// Column means as a `1×c` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let n = self.shape(a).0.max(1);
        let value = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0)) / T::from_usize_lossy(n);
        self.push_op(
            value,
            &[a],
            Box::new(SumRows {
                a,
                scale: 1.0 / n as f64,
            }),
        )
    }

    /// Row sums as an `r×1` column.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push_op(value, &[a], Box::new(SumCols { a }))
    }

    /// Column maxima as a `1×c` row (first maximal row wins).
    pub fn max_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut argmax = vec![0usize; x.ncols()];
        let mut best = Array2::from_elem((1, x.ncols()), T::neg_infinity());
        for (i, row) in x.rows().into_iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v > best[[0, j]] {
                    best[[0, j]] = v;
                    argmax[j] = i;
                }
            }
        }
        self.push_op(best, &[a], Box::new(MaxRows { a, argmax }))
    }

    /// Scales each row to unit L2 norm; rows with norm below `eps` are divided by `eps`.
    pub fn l2_normalize_rows(&mut self, a: Var, eps: T) -> Var {
        let x = self.value(a);
        let mut value = x.clone();
        let mut norms = Vec::with_capacity(x.nrows());
        for mut row in value.rows_mut() {
            let n = row.dot(&row).sqrt();
            norms.push(n);
            let d = n.max(eps);
            row.mapv_inplace(|v| v / d);
        }
        self.push_op(value, &[a], Box::new(NormalizeRows { a, norms, eps }))
    }

    pub fn gather_rows(&mut self, a: Var, index: Arc<Vec<usize>>) -> Var {
        let x = self.value(a);
        let mut value = Array2::zeros((index.len(), x.ncols()));
        for (dst, &src) in index.iter().enumerate() {
            value.row_mut(dst).assign(&x.row(src));
        }
        self.push_op(value, &[a], Box::new(GatherRows { a, index }))
    }

    /// Left-multiplies `a` by a constant sparse matrix.
    pub fn sparse_mul(&mut self, m: Arc<SparseRows<T>>, a: Var) -> Var {
        let x = self.value(a);
        assert_eq!(m.n_cols, x.nrows(), "sparse_mul: inner dimension mismatch");
        let mut value = Array2::zeros((m.n_rows(), x.ncols()));
        for i in 0..m.n_rows() {
            let mut out = value.row_mut(i);
            for (j, w) in m.row(i) {
                out.scaled_add(w, &x.row(j));
            }
        }
        self.push_op(value, &[a], Box::new(SparseMul { a, m }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        let mut spans = Vec::with_capacity(parts.len());
        let mut start = 0;
        for v in parts {
            let w = self.shape(*v).1;
            spans.push((*v, start, start + w));
            start += w;
        }
        self.push_op(value, parts, Box::new(ConcatCols { parts: spans }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        let mut spans = Vec::with_capacity(parts.len());
        let mut start = 0;
        for v in parts {
            let h = self.shape(*v).0;
            spans.push((*v, start, start + h));
            start += h;
        }
        self.push_op(value, parts, Box::new(ConcatRows { parts: spans }))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.push_op(value, &[a], Box::new(Transpose { a }))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        self.push_op(value, &[a], Box::new(SliceCols { a, start, end }))
    }

    /// Standardizes every column over the rows: `(x − μ) / √(σ² + eps)`.
    pub fn instance_norm(&mut self, a: Var, eps: T) -> Var {
        let x = self.value(a);
        let n = T::from_usize_lossy(x.nrows().max(1));
        let mean = x.sum_axis(Axis(0)) / n;
        let mut value = x - &mean.view().insert_axis(Axis(0));
        let var = value.mapv(|v| v * v).sum_axis(Axis(0)) / n;
        let inv_std: Vec<T> = var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
        Zip::indexed(&mut value).for_each(|(_, j), v| *v *= inv_std[j]);
        self.push_op(value, &[a], Box::new(InstanceNorm { a, inv_std }))
    }
}
