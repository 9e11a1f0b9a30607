//! Rotation-equivariant U-shaped feature extractor, orientation hypothesizer
//! and rotation-invariant feature computation.

pub mod vn;

use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{ParamId, ParamStore, SparseRows, Tape, Var};
use crate::error::{Error, Result};
use crate::geom::cloud::{farthest_point_sample, knn_query};
use crate::geom::transform::Rotation;
use crate::geom::vec3::{self, Vec3};
use crate::geom::Mat3;
use crate::scalar::{c, Real};

use vn::get3;

/// Per-point channel 3-vectors in the `(3K × D)` layout (row `3p + s`).
#[derive(Debug, Clone, PartialEq)]
pub struct EquivariantFeatures<T> {
    pub data: Array2<T>,
}

impl<T: Real> EquivariantFeatures<T> {
    pub fn new(data: Array2<T>) -> Result<Self> {
        if !data.nrows().is_multiple_of(3) {
            return Err(Error::shape("EquivariantFeatures", "row count divisible by 3", data.nrows()));
        }
        Ok(EquivariantFeatures { data })
    }

    pub fn n_points(&self) -> usize {
        self.data.nrows() / 3
    }

    pub fn channels(&self) -> usize {
        self.data.ncols()
    }

    pub fn vector(&self, point: usize, channel: usize) -> Vec3<T> {
        get3(&self.data, point, channel)
    }

    /// Every channel vector right-multiplied by `r` (`v ↦ v·R`).
    pub fn rotated(&self, r: &Rotation<T>) -> Self {
        EquivariantFeatures {
            data: rotate_layout(&self.data, r),
        }
    }
}

/// Right-multiplies every 3-vector of a `(3K × C)` array by `r`.
pub fn rotate_layout<T: Real>(a: &Array2<T>, r: &Rotation<T>) -> Array2<T> {
    let mut out = a.clone();
    for p in 0..a.nrows() / 3 {
        for ch in 0..a.ncols() {
            let v = r.matrix().vec_mul(get3(a, p, ch));
            for s in 0..3 {
                out[[3 * p + s, ch]] = v[s];
            }
        }
    }
    out
}

/// Per-point orthonormal frames; rows of each rotation are the x, y, z axes.
#[derive(Debug, Clone, PartialEq)]
pub struct OrientationField<T> {
    pub frames: Vec<Rotation<T>>,
    /// Norms of the candidate x and y vectors before orthonormalization.
    pub magnitudes: Option<Vec<[T; 2]>>,
}

impl<T: Real> OrientationField<T> {
    /// Reads frames from the `(3K × 3)` layout (column `a` holds axis `a`).
    pub fn from_layout(f: &Array2<T>, magnitudes: Option<Vec<[T; 2]>>) -> Self {
        let frames = (0..f.nrows() / 3)
            .map(|p| {
                let axis = |a| get3(f, p, a);
                Rotation::from_matrix_unchecked(Mat3::from_rows(axis(0), axis(1), axis(2)))
            })
            .collect();
        OrientationField { frames, magnitudes }
    }

    pub fn to_layout(&self) -> Array2<T> {
        let mut out = Array2::zeros((3 * self.frames.len(), 3));
        for (p, r) in self.frames.iter().enumerate() {
            for a in 0..3 {
                for s in 0..3 {
                    out[[3 * p + s, a]] = r.matrix()[(a, s)];
                }
            }
        }
        out
    }
}

/// Per-point rotation-invariant descriptors (`K × 3D`).
#[derive(Debug, Clone, PartialEq)]
pub struct InvariantFeatures<T> {
    pub data: Array2<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Neighbours per point for edge convolutions and pooling.
    pub k: usize,
    /// Encoder widths, one per level; each level halves the point count.
    pub widths: Vec<usize>,
    /// Decoder widths from the second-coarsest level up to full resolution.
    pub up_widths: Vec<usize>,
    /// Output channels `D`.
    pub out_channels: usize,
    pub slope: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            k: 16,
            widths: vec![32, 64, 128],
            up_widths: vec![64, 128],
            out_channels: 341,
            slope: 0.2,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.up_widths.len() + 1 != self.widths.len() {
            return Err(Error::InvalidArgument(
                "backbone needs one decoder width per level below the coarsest".into(),
            ));
        }
        if self.k == 0 || self.out_channels < 2 {
            return Err(Error::InvalidArgument("backbone needs k ≥ 1 and D ≥ 2".into()));
        }
        if !(0.0..=1.0).contains(&self.slope) {
            return Err(Error::InvalidArgument("slope must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Smallest cloud whose coarsest level keeps two points.
    pub fn min_points(&self) -> usize {
        let mut n = 2;
        for _ in 1..self.widths.len() {
            n = 2 * n - 1;
        }
        n
    }
}

/// Number of points retained when halving `n`.
fn half(n: usize) -> usize {
    n.div_ceil(2)
}

/// Geometry of one resolution level.
#[derive(Debug, Clone)]
pub struct Level<T> {
    pub points: Vec<Vec3<T>>,
    /// Edge-convolution neighbourhoods within this level.
    pub nbrs: Arc<Vec<Vec<usize>>>,
    /// For levels below the finest: pooling groups in the finer level.
    pub pool: Vec<Vec<usize>>,
    /// For levels above the coarsest: interpolation from the next coarser level.
    pub interp: Option<Arc<SparseRows<T>>>,
}

/// Point hierarchy shared by every layer of one forward pass. Depends only on
/// point positions, so it is reusable across parameter updates.
#[derive(Debug, Clone)]
pub struct Hierarchy<T> {
    pub levels: Vec<Level<T>>,
    pub centroid: Vec3<T>,
}

impl<T: Real> Hierarchy<T> {
    /// Centres the cloud, then downsamples by farthest point sampling started
    /// at the point farthest from the centroid (rotation- and
    /// permutation-consistent).
    pub fn build(points: &[Vec3<T>], cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        if points.len() < cfg.min_points() {
            return Err(Error::InvalidArgument(format!(
                "backbone needs at least {} points, got {}",
                cfg.min_points(),
                points.len()
            )));
        }
        let centroid = vec3::centroid(points);
        let centred: Vec<Vec3<T>> = points.iter().map(|p| vec3::sub(*p, centroid)).collect();
        let mut levels: Vec<Level<T>> = Vec::with_capacity(cfg.widths.len());
        let mut current = centred;
        for l in 0..cfg.widths.len() {
            let mut pool = Vec::new();
            if l > 0 {
                let finer = &levels[l - 1].points;
                let start = farthest_from_origin(finer);
                let idx = farthest_point_sample(finer, half(finer.len()), start)?;
                current = idx.iter().map(|&i| finer[i]).collect();
                pool = knn_query(finer, &current, cfg.k.min(finer.len()), false)?;
            }
            let k = cfg.k.min(current.len() - 1);
            let nbrs = knn_query(&current, &current, k, true)?;
            levels.push(Level {
                points: current.clone(),
                nbrs: Arc::new(nbrs),
                pool,
                interp: None,
            });
        }
        for l in 0..levels.len() - 1 {
            let m = interpolation_matrix(&levels[l + 1].points, &levels[l].points)?;
            levels[l].interp = Some(Arc::new(m));
        }
        Ok(Hierarchy { levels, centroid })
    }

    pub fn n_points(&self) -> usize {
        self.levels[0].points.len()
    }
}

fn farthest_from_origin<T: Real>(points: &[Vec3<T>]) -> usize {
    let mut best = (T::neg_infinity(), 0);
    for (i, p) in points.iter().enumerate() {
        let d = vec3::norm_sq(*p);
        if d > best.0 {
            best = (d, i);
        }
    }
    best.1
}

/// Inverse-squared-distance weights over the 3 nearest coarse points, expanded
/// to the `(3K × C)` layout.
fn interpolation_matrix<T: Real>(coarse: &[Vec3<T>], fine: &[Vec3<T>]) -> Result<SparseRows<T>> {
    let k = coarse.len().min(3);
    let nn = knn_query(coarse, fine, k, false)?;
    let floor = c::<T>(1e-10);
    let mut rows = Vec::with_capacity(3 * fine.len());
    for (p, list) in fine.iter().zip(&nn) {
        let w: Vec<T> = list
            .iter()
            .map(|&q| T::one() / vec3::dist_sq(*p, coarse[q]).max(floor))
            .collect();
        let total = w.iter().fold(T::zero(), |a, b| a + *b);
        for s in 0..3 {
            rows.push(list.iter().zip(&w).map(|(&q, &wq)| (3 * q + s, wq / total)).collect());
        }
    }
    Ok(SparseRows::from_rows(&rows, 3 * coarse.len()))
}

struct EdgeParams {
    w_center: ParamId,
    w_edge: ParamId,
    u: ParamId,
}

struct UpParams {
    w: ParamId,
    u: ParamId,
}

/// Learnable parts of the extractor, registered in a [`ParamStore`].
pub struct Backbone {
    pub config: BackboneConfig,
    encoders: Vec<EdgeParams>,
    decoders: Vec<UpParams>,
    out: ParamId,
    hypothesizer: ParamId,
}

/// Nodes produced by one forward pass.
#[derive(Debug, Clone)]
pub struct BackboneOutput<T> {
    /// `F_eqv`, `(3K × D)`.
    pub features: Var,
    /// `F_d`, `(3K × 3)`.
    pub frames: Var,
    /// `F_inv`, `(K × 3D)`.
    pub invariant: Var,
    pub magnitudes: Vec<[T; 2]>,
}

impl Backbone {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        config: BackboneConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let mut encoders = Vec::new();
        let mut c_in = 1;
        for (l, &w) in config.widths.iter().enumerate() {
            encoders.push(EdgeParams {
                w_center: store.add_glorot(format!("{prefix}.enc{l}.w_center"), c_in, w, rng),
                w_edge: store.add_glorot(format!("{prefix}.enc{l}.w_edge"), c_in, w, rng),
                u: store.add_glorot(format!("{prefix}.enc{l}.u"), w, w, rng),
            });
            c_in = w;
        }
        let levels = config.widths.len();
        let mut decoders = Vec::new();
        for (i, &w) in config.up_widths.iter().enumerate() {
            let l = levels - 2 - i;
            let c_cat = c_in + config.widths[l];
            decoders.push(UpParams {
                w: store.add_glorot(format!("{prefix}.dec{l}.w"), c_cat, w, rng),
                u: store.add_glorot(format!("{prefix}.dec{l}.u"), w, w, rng),
            });
            c_in = w;
        }
        let out = store.add_glorot(format!("{prefix}.out.w"), c_in, config.out_channels, rng);
        let hypothesizer = store.add_glorot(format!("{prefix}.hyp.w"), config.out_channels, 2, rng);
        Ok(Backbone {
            config,
            encoders,
            decoders,
            out,
            hypothesizer,
        })
    }

    /// Equivariant features of the (centred) cloud.
    pub fn extract<T: Real>(&self, tape: &mut Tape<T>, params: &[Var], h: &Hierarchy<T>) -> Result<Var> {
        let slope = c::<T>(self.config.slope);
        let p = |id: ParamId| params[id.index()];
        let first = &h.levels[0].points;
        let x0 = Array2::from_shape_fn((3 * first.len(), 1), |(r, _)| first[r / 3][r % 3]);
        let mut x = tape.constant(x0);
        let mut skips = Vec::with_capacity(h.levels.len());
        for (l, enc) in self.encoders.iter().enumerate() {
            let level = &h.levels[l];
            if l > 0 {
                x = tape.vn_max_pool(x, &level.pool)?;
            }
            x = tape.vn_edgeconv(x, p(enc.w_center), p(enc.w_edge), p(enc.u), &level.nbrs, slope)?;
            skips.push(x);
        }
        let levels = h.levels.len();
        for (i, dec) in self.decoders.iter().enumerate() {
            let l = levels - 2 - i;
            let interp = h.levels[l].interp.clone().expect("interpolation for non-coarsest level");
            let up = tape.sparse_mul(interp, x);
            let cat = tape.concat_cols(&[up, skips[l]]);
            let y = tape.vn_linear(cat, p(dec.w))?;
            x = tape.vn_leaky_relu(y, p(dec.u), slope)?;
        }
        tape.vn_linear(x, p(self.out))
    }

    /// Candidate axes via VN-Linear to two channels, then Gram-Schmidt.
    pub fn hypothesize<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        features: Var,
    ) -> Result<(Var, Vec<[T; 2]>)> {
        let uv = tape.vn_linear(features, params[self.hypothesizer.index()])?;
        tape.gram_schmidt(uv)
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, params: &[Var], h: &Hierarchy<T>) -> Result<BackboneOutput<T>> {
        let features = self.extract(tape, params, h)?;
        let (frames, magnitudes) = self.hypothesize(tape, params, features)?;
        let invariant = tape.invariant_features(features, frames)?;
        Ok(BackboneOutput {
            features,
            frames,
            invariant,
            magnitudes,
        })
    }

    /// Inference-only forward pass on raw points.
    pub fn run<T: Real>(
        &self,
        store: &ParamStore<T>,
        points: &[Vec3<T>],
    ) -> Result<(EquivariantFeatures<T>, OrientationField<T>, InvariantFeatures<T>)> {
        let h = Hierarchy::build(points, &self.config)?;
        let mut tape = Tape::new();
        let params = tape.bind_all(store);
        let out = self.forward(&mut tape, &params, &h)?;
        tape.check_finite()?;
        Ok((
            EquivariantFeatures {
                data: tape.value(out.features).clone(),
            },
            OrientationField::from_layout(tape.value(out.frames), Some(out.magnitudes)),
            InvariantFeatures {
                data: tape.value(out.invariant).clone(),
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::random_rotation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cloud(n: usize, seed: u64) -> Vec<Vec3<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-0.5..0.5), rng.random_range(-0.2..0.2)])
            .collect()
    }

    fn small_config() -> BackboneConfig {
        BackboneConfig {
            k: 6,
            widths: vec![8, 12, 16],
            up_widths: vec![12, 16],
            out_channels: 10,
            slope: 0.2,
        }
    }

    fn rel_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        let num = (a - b).mapv(|x| x * x).sum().sqrt();
        num / b.mapv(|x| x * x).sum().sqrt()
    }

    #[test]
    fn default_output_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let bb = Backbone::new(&mut store, "bb", BackboneConfig::default(), &mut rng).unwrap();
        let (f, frames, inv) = bb.run(&store, &cloud(64, 2)).unwrap();
        assert_eq!(f.channels(), 341);
        assert_eq!(inv.data.ncols(), 1023);
        assert_eq!(frames.frames.len(), 64);
        for r in &frames.frames {
            assert!(r.orthonormality_error() < 1e-12);
            assert!((r.matrix().det() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn end_to_end_equivariance_and_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let bb = Backbone::new(&mut store, "bb", small_config(), &mut rng).unwrap();
        let pts = cloud(40, 4);
        let (f, fd, inv) = bb.run(&store, &pts).unwrap();
        for seed in 0..20 {
            let r = random_rotation::<f64>(100 + seed);
            let rotated: Vec<_> = pts.iter().map(|p| r.matrix().vec_mul(*p)).collect();
            let (fr, fdr, invr) = bb.run(&store, &rotated).unwrap();
            assert!(rel_diff(&fr.data, &f.rotated(&r).data) < 1e-5);
            for (a, b) in fdr.frames.iter().zip(&fd.frames) {
                assert!(a.matrix().sub(&b.matrix().mul(r.matrix())).frobenius() < 1e-6);
            }
            assert!(rel_diff(&invr.data, &inv.data) < 1e-5);
        }
    }

    #[test]
    fn translation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        let bb = Backbone::new(&mut store, "bb", small_config(), &mut rng).unwrap();
        let pts = cloud(30, 6);
        let moved: Vec<_> = pts.iter().map(|p| vec3::add(*p, [3.0, -1.0, 0.5])).collect();
        let (a, _, _) = bb.run(&store, &pts).unwrap();
        let (b, _, _) = bb.run(&store, &moved).unwrap();
        assert!(rel_diff(&a.data, &b.data) < 1e-10);
    }

    #[test]
    fn duplicated_cloud_gives_equal_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::<f64>::new();
        let bb = Backbone::new(&mut store, "bb", small_config(), &mut rng).unwrap();
        let pts = cloud(25, 8);
        let doubled: Vec<_> = pts.iter().chain(pts.iter()).copied().collect();
        let (f, _, _) = bb.run(&store, &doubled).unwrap();
        let n = pts.len();
        for p in 0..n {
            for ch in 0..f.channels() {
                assert_eq!(f.vector(p, ch), f.vector(p + n, ch));
            }
        }
    }

    #[test]
    fn permutation_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::<f64>::new();
        let bb = Backbone::new(&mut store, "bb", small_config(), &mut rng).unwrap();
        let pts = cloud(30, 10);
        let perm: Vec<usize> = (0..30).map(|i| (i * 7) % 30).collect();
        let permuted: Vec<_> = perm.iter().map(|&i| pts[i]).collect();
        let (f, _, _) = bb.run(&store, &pts).unwrap();
        let (g, _, _) = bb.run(&store, &permuted).unwrap();
        for (new, &old) in perm.iter().enumerate() {
            for ch in 0..f.channels() {
                let d = vec3::sub(g.vector(new, ch), f.vector(old, ch));
                assert!(vec3::norm(d) < 1e-10);
            }
        }
    }

    #[test]
    fn too_small_cloud_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::<f64>::new();
        let bb = Backbone::new(&mut store, "bb", small_config(), &mut rng).unwrap();
        assert!(bb.run(&store, &cloud(4, 1)).is_err());
        assert!(bb.run(&store, &cloud(5, 1)).is_ok());
    }
}
