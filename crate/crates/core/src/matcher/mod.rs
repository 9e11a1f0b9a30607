//! Shape and occupancy descriptor heads with channel attention, the
//! combinative cost matrix, optimal-transport assignment and top-k
//! correspondence extraction.

pub mod sinkhorn;

use ndarray::{s, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::{c, Real};

pub use sinkhorn::log_sinkhorn;

/// Per-point shape (`K × d_s`) and occupancy (`K × d_o`) descriptors.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSet<T> {
    pub shape: Array2<T>,
    pub occupancy: Array2<T>,
}

/// Combined cost with its shape and occupancy components.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix<T> {
    pub combined: Array2<T>,
    pub shape: Array2<T>,
    pub occupancy: Array2<T>,
    /// Normalization constant `Z`.
    pub scale: T,
}

/// `C = (C_s − C_o) / √d`, where `C_s` and `C_o` are raw descriptor dot products.
pub fn cost_matrix<T: Real>(p: &DescriptorSet<T>, q: &DescriptorSet<T>) -> Result<CostMatrix<T>> {
    if p.shape.ncols() != q.shape.ncols() || p.occupancy.ncols() != q.occupancy.ncols() {
        return Err(Error::shape(
            "cost_matrix",
            format!("{} / {} channels", p.shape.ncols(), p.occupancy.ncols()),
            format!("{} / {}", q.shape.ncols(), q.occupancy.ncols()),
        ));
    }
    let cs = p.shape.dot(&q.shape.t());
    let co = p.occupancy.dot(&q.occupancy.t());
    let scale = T::from_usize_lossy(p.shape.ncols()).sqrt();
    let combined = (&cs - &co) / scale;
    Ok(CostMatrix {
        combined,
        shape: cs,
        occupancy: co,
        scale,
    })
}

/// Log-assignment matrix with a dustbin row and column.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentMatrix<T> {
    pub log: Array2<T>,
}

impl<T: Real> AssignmentMatrix<T> {
    /// Number of real rows `N`.
    pub fn rows(&self) -> usize {
        self.log.nrows() - 1
    }

    /// Number of real columns `M`.
    pub fn cols(&self) -> usize {
        self.log.ncols() - 1
    }

    pub fn prob(&self, i: usize, j: usize) -> T {
        self.log[[i, j]].exp()
    }

    /// Σ of probabilities over real (non-dustbin) cells.
    pub fn matchability(&self) -> T {
        self.log
            .slice(s![..self.rows(), ..self.cols()])
            .iter()
            .fold(T::zero(), |a, x| a + x.exp())
    }

    /// Largest deviation of a real row or column sum from 1.
    pub fn marginal_error(&self) -> T {
        let z = self.log.mapv(|x| x.exp());
        let mut worst = T::zero();
        for i in 0..self.rows() {
            worst = worst.max((z.row(i).sum() - T::one()).abs());
        }
        for j in 0..self.cols() {
            worst = worst.max((z.column(j).sum() - T::one()).abs());
        }
        worst
    }
}

/// Sinkhorn assignment for a plain cost matrix.
pub fn sinkhorn_with_dustbin<T: Real>(cost: &Array2<T>, iterations: usize, dustbin: T) -> Result<AssignmentMatrix<T>> {
    Ok(AssignmentMatrix {
        log: log_sinkhorn(cost, dustbin, iterations)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Correspondences<T> {
    /// `(i, j, w_ij)` in decreasing weight.
    pub matches: Vec<(usize, usize, T)>,
    /// Fewer than `k` real cells were available.
    pub short: bool,
}

/// The `k` largest real cells of `z`, ties broken by `(i, j)` lexicographically.
pub fn topk_correspondences<T: Real>(z: &AssignmentMatrix<T>, k: usize) -> Result<Correspondences<T>> {
    if k == 0 {
        return Err(Error::InvalidArgument("top-k needs k ≥ 1".into()));
    }
    let (n, m) = (z.rows(), z.cols());
    let mut cells: Vec<(usize, usize, T)> = (0..n)
        .flat_map(|i| (0..m).map(move |j| (i, j)))
        .map(|(i, j)| (i, j, z.prob(i, j)))
        .collect();
    let cmp = |a: &(usize, usize, T), b: &(usize, usize, T)| {
        b.2.partial_cmp(&a.2)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then((a.0, a.1).cmp(&(b.0, b.1)))
    };
    let short = cells.len() < k;
    if !short && k < cells.len() {
        cells.select_nth_unstable_by(k, cmp);
        cells.truncate(k);
    }
    cells.sort_by(cmp);
    Ok(Correspondences { matches: cells, short })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatcherConfig {
    /// Invariant input width `3D`.
    pub input_dim: usize,
    /// Descriptor width `d_s = d_o`.
    pub descriptor_dim: usize,
    pub attention_hidden: usize,
    pub sinkhorn_iterations: usize,
    pub dustbin_init: f64,
    pub slope: f64,
    pub norm_eps: f64,
    /// Drop the occupancy branch (shape-only ablation).
    pub shape_only: bool,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        MatcherConfig {
            input_dim: 1023,
            descriptor_dim: 512,
            attention_hidden: 128,
            sinkhorn_iterations: 100,
            dustbin_init: 1.0,
            slope: 0.2,
            norm_eps: 1e-5,
            shape_only: false,
        }
    }
}

struct Head {
    layers: [ParamId; 3],
}

/// Learnable parts of the matcher.
pub struct Matcher {
    pub config: MatcherConfig,
    attn_in: ParamId,
    attn_out: ParamId,
    shape: Head,
    occupancy: Head,
    dustbin: ParamId,
}

/// Nodes produced by [`Matcher::forward`].
#[derive(Debug, Clone, Copy)]
pub struct MatcherOutput {
    pub attention: Var,
    pub shape_p: Var,
    pub shape_q: Var,
    pub occupancy_p: Option<Var>,
    pub occupancy_q: Option<Var>,
    pub cost_shape: Var,
    pub cost_occupancy: Option<Var>,
    pub cost: Var,
    /// Log-assignment `(N+1) × (M+1)`.
    pub log_assignment: Var,
}

impl Matcher {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, prefix: &str, config: MatcherConfig, rng: &mut R) -> Self {
        let (din, d, h) = (config.input_dim, config.descriptor_dim, config.attention_hidden);
        let attn_in = store.add_glorot(format!("{prefix}.attn.w1"), din, h, rng);
        let attn_out = store.add_glorot(format!("{prefix}.attn.w2"), h, 2 * d, rng);
        let mut head = |name: &str| Head {
            layers: [
                store.add_glorot(format!("{prefix}.{name}.w1"), din, d, rng),
                store.add_glorot(format!("{prefix}.{name}.w2"), d, d, rng),
                store.add_glorot(format!("{prefix}.{name}.w3"), d, d, rng),
            ],
        };
        let shape = head("shape");
        let occupancy = head("occupancy");
        let dustbin = store.add(format!("{prefix}.dustbin"), Array2::from_elem((1, 1), T::c(config.dustbin_init)));
        if config.shape_only {
            for id in occupancy.layers {
                store.set_requires_grad(id, false);
            }
        }
        Matcher {
            config,
            attn_in,
            attn_out,
            shape,
            occupancy,
            dustbin,
        }
    }

    /// Channel attention from both clouds' invariant features: mean- and
    /// max-pooled over the concatenated points, a shared two-layer perceptron
    /// on each, summed, sigmoid. Returns a `1 × 2d` row (`A_s` then `A_o`).
    pub fn attention<T: Real>(&self, tape: &mut Tape<T>, params: &[Var], inv_p: Var, inv_q: Var) -> Result<Var> {
        if tape.shape(inv_p).1 != tape.shape(inv_q).1 {
            return Err(Error::shape("channel_attention", tape.shape(inv_p).1, tape.shape(inv_q).1));
        }
        let both = tape.concat_rows(&[inv_p, inv_q]);
        let avg = tape.mean_rows(both);
        let max = tape.max_rows(both);
        let (w1, w2) = (params[self.attn_in.index()], params[self.attn_out.index()]);
        let mut mlp = |x: Var| {
            let h = tape.matmul(x, w1);
            let h = tape.relu(h);
            tape.matmul(h, w2)
        };
        let a = mlp(avg);
        let b = mlp(max);
        let sum = tape.add(a, b);
        Ok(tape.sigmoid(sum))
    }

    fn head<T: Real>(&self, tape: &mut Tape<T>, params: &[Var], head: &Head, x: Var, tanh_last: bool, weights: Var) -> Var {
        let eps = c::<T>(self.config.norm_eps);
        let slope = c::<T>(self.config.slope);
        let mut h = x;
        for (l, id) in head.layers.iter().enumerate() {
            h = tape.matmul(h, params[id.index()]);
            h = tape.instance_norm(h, eps);
            h = if tanh_last && l == 2 { tape.tanh(h) } else { tape.leaky_relu(h, slope) };
        }
        tape.mul_row(h, weights)
    }

    /// Shape descriptors: three (linear, instance norm, leaky rectifier)
    /// layers, then channel reweighting by `a_s`.
    pub fn shape_head<T: Real>(&self, tape: &mut Tape<T>, params: &[Var], inv: Var, a_s: Var) -> Var {
        self.head(tape, params, &self.shape, inv, false, a_s)
    }

    /// Occupancy descriptors: as the shape head with a final tanh.
    pub fn occupancy_head<T: Real>(&self, tape: &mut Tape<T>, params: &[Var], inv: Var, a_o: Var) -> Var {
        self.head(tape, params, &self.occupancy, inv, true, a_o)
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, params: &[Var], inv_p: Var, inv_q: Var) -> Result<MatcherOutput> {
        let d = self.config.descriptor_dim;
        let attention = self.attention(tape, params, inv_p, inv_q)?;
        let a_s = tape.slice_cols(attention, 0, d);
        let shape_p = self.shape_head(tape, params, inv_p, a_s);
        let shape_q = self.shape_head(tape, params, inv_q, a_s);
        let z = T::one() / T::from_usize_lossy(d).sqrt();
        let cost_shape = tape.matmul_nt(shape_p, shape_q);
        let (occupancy_p, occupancy_q, cost_occupancy, cost) = if self.config.shape_only {
            (None, None, None, tape.scale(cost_shape, z))
        } else {
            let a_o = tape.slice_cols(attention, d, 2 * d);
            let op = self.occupancy_head(tape, params, inv_p, a_o);
            let oq = self.occupancy_head(tape, params, inv_q, a_o);
            let co = tape.matmul_nt(op, oq);
            let diff = tape.sub(cost_shape, co);
            (Some(op), Some(oq), Some(co), tape.scale(diff, z))
        };
        let log_assignment = tape.sinkhorn(cost, params[self.dustbin.index()], self.config.sinkhorn_iterations)?;
        Ok(MatcherOutput {
            attention,
            shape_p,
            shape_q,
            occupancy_p,
            occupancy_q,
            cost_shape,
            cost_occupancy,
            cost,
            log_assignment,
        })
    }

    pub fn dustbin_id(&self) -> ParamId {
        self.dustbin
    }
}
