//! The full matching network: equivariant backbone shared by both parts,
//! then descriptor heads, cost and optimal-transport assignment.

use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, BackboneOutput, Hierarchy, OrientationField};
use crate::diff::{Checkpoint, Dtype, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::geom::{Rotation, Vec3};
use crate::losses::{Affinity, CorrespondenceSet, LossConfig};
use crate::matcher::{AssignmentMatrix, CostMatrix, Matcher, MatcherConfig, MatcherOutput};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[derive(Default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub matcher: MatcherConfig,
}


impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.matcher.input_dim != 3 * self.backbone.out_channels {
            return Err(Error::InvalidArgument(format!(
                "matcher input width {} must be 3 × backbone channels {}",
                self.matcher.input_dim, self.backbone.out_channels
            )));
        }
        Ok(())
    }
}

pub struct CombiModel {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub matcher: Matcher,
}

/// Graph nodes of one forward pass over a pair of parts.
pub struct PairForward<T> {
    pub p: BackboneOutput<T>,
    pub q: BackboneOutput<T>,
    pub matcher: MatcherOutput,
}

/// Loss components of one pair; `occupancy` is absent for the shape-only model.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub orientation: Var,
    pub shape: Var,
    pub occupancy: Option<Var>,
    pub point: Var,
    pub total: Var,
}

/// Ground truth needed by the losses for one pair.
pub struct PairTarget<'a> {
    pub corr: &'a CorrespondenceSet,
    pub pairs: Arc<Vec<(usize, usize)>>,
    /// Rotations `R^P`, `R^Q` acting on row-vector frames, i.e. the transposes
    /// of the rotations that take each part back to the assembled object.
    pub align_p: Rotation<f64>,
    pub align_q: Rotation<f64>,
}

impl CombiModel {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let backbone = Backbone::new(store, "backbone", config.backbone.clone(), rng)?;
        let matcher = Matcher::new(store, "matcher", config.matcher.clone(), rng);
        Ok(CombiModel {
            config,
            backbone,
            matcher,
        })
    }

    pub fn hierarchy<T: Real>(&self, points: &[Vec3<T>]) -> Result<Hierarchy<T>> {
        Hierarchy::build(points, &self.config.backbone)
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, params: &[Var], hp: &Hierarchy<T>, hq: &Hierarchy<T>) -> Result<PairForward<T>> {
        let p = self.backbone.forward(tape, params, hp)?;
        let q = self.backbone.forward(tape, params, hq)?;
        let matcher = self.matcher.forward(tape, params, p.invariant, q.invariant)?;
        Ok(PairForward { p, q, matcher })
    }

    pub fn loss<T: Real>(&self, tape: &mut Tape<T>, out: &PairForward<T>, target: &PairTarget<'_>, cfg: &LossConfig) -> Result<LossTerms> {
        let orientation = tape.orientation_loss(
            out.p.frames,
            out.q.frames,
            &target.align_p.cast(),
            &target.align_q.cast(),
            &target.pairs,
        )?;
        let m = &out.matcher;
        let shape = tape.descriptor_circle_loss(m.shape_p, m.shape_q, target.corr, Affinity::Difference, cfg)?;
        let occupancy = match (m.occupancy_p, m.occupancy_q) {
            (Some(op), Some(oq)) => Some(tape.descriptor_circle_loss(op, oq, target.corr, Affinity::Sum, cfg)?),
            _ => None,
        };
        let point = tape.point_matching_loss(m.log_assignment, target.corr, cfg)?;
        let total = tape.total_loss(orientation, shape, occupancy, point, cfg);
        Ok(LossTerms {
            orientation,
            shape,
            occupancy,
            point,
            total,
        })
    }

    /// Forward pass without gradients.
    pub fn infer<T: Real>(&self, store: &ParamStore<T>, p: &[Vec3<T>], q: &[Vec3<T>]) -> Result<PairInference<T>> {
        let hp = self.hierarchy(p)?;
        let hq = self.hierarchy(q)?;
        let mut tape = Tape::new();
        let params = tape.bind_all(store);
        let out = self.forward(&mut tape, &params, &hp, &hq)?;
        tape.check_finite()?;
        let m = &out.matcher;
        let d = T::from_usize_lossy(self.config.matcher.descriptor_dim);
        let shape = tape.value(m.cost_shape).clone();
        let occupancy = match m.cost_occupancy {
            Some(v) => tape.value(v).clone(),
            None => Array2::zeros(shape.dim()),
        };
        Ok(PairInference {
            assignment: AssignmentMatrix {
                log: tape.value(m.log_assignment).clone(),
            },
            cost: CostMatrix {
                combined: tape.value(m.cost).clone(),
                shape,
                occupancy,
                scale: T::one() / d.sqrt(),
            },
            frames_p: OrientationField::from_layout(tape.value(out.p.frames), Some(out.p.magnitudes.clone())),
            frames_q: OrientationField::from_layout(tape.value(out.q.frames), Some(out.q.magnitudes.clone())),
        })
    }
}

pub struct PairInference<T> {
    pub assignment: AssignmentMatrix<T>,
    pub cost: CostMatrix<T>,
    pub frames_p: OrientationField<T>,
    pub frames_q: OrientationField<T>,
}

/// Metadata key holding the model configuration in checkpoints.
pub const CONFIG_KEY: &str = "model_config";

/// A model with its weights, ready for inference.
pub struct TrainedModel {
    pub model: CombiModel,
    pub store: ParamStore<f64>,
}

impl TrainedModel {
    /// Builds a model with freshly initialized weights.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        let mut store = ParamStore::new();
        let model = CombiModel::new(&mut store, config, rng)?;
        Ok(TrainedModel { model, store })
    }

    /// Weights as single-precision arrays plus the configuration.
    pub fn to_checkpoint(&self, mut meta: serde_json::Value) -> Result<Checkpoint> {
        meta[CONFIG_KEY] = serde_json::to_value(&self.model.config)?;
        let mut ck = Checkpoint::new(meta);
        for p in self.store.iter() {
            ck.push(p.name.clone(), Dtype::F32, p.value.clone());
        }
        Ok(ck)
    }

    /// Rebuilds the model described by the checkpoint and loads its weights.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: ModelConfig = serde_json::from_value(ck.meta.get(CONFIG_KEY).cloned().ok_or_else(|| Error::Checkpoint("missing model configuration".into()))?)
            .map_err(|e| Error::Checkpoint(format!("bad model configuration: {e}")))?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut m = TrainedModel::init(config, &mut rng)?;
        let names: Vec<String> = m.store.iter().map(|p| p.name.clone()).collect();
        for name in names {
            let arr = ck.get(&name).ok_or_else(|| Error::Checkpoint(format!("missing array `{name}`")))?;
            m.store
                .set_value(&name, arr.data.clone())
                .map_err(|e| Error::Checkpoint(format!("array `{name}`: {e}")))?;
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    pub fn infer(&self, p: &[Vec3<f64>], q: &[Vec3<f64>]) -> Result<PairInference<f64>> {
        self.model.infer(&self.store, p, q)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::gradient_check;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_config(shape_only: bool) -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                k: 4,
                widths: vec![3, 4],
                up_widths: vec![4],
                out_channels: 3,
                slope: 0.2,
            },
            matcher: MatcherConfig {
                input_dim: 9,
                descriptor_dim: 4,
                attention_hidden: 3,
                sinkhorn_iterations: 5,
                shape_only,
                ..Default::default()
            },
        }
    }

    fn blob(n: usize, seed: u64) -> Vec<Vec3<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.1..0.1)]).collect()
    }

    #[test]
    fn mismatched_widths_rejected() {
        let mut c = ModelConfig::default();
        c.matcher.input_dim = 100;
        assert!(c.validate().is_err());
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        let p = blob(9, 1);
        let q: Vec<_> = p.iter().map(|x| [x[0] + 0.01, x[1], x[2]]).collect();
        let corr = CorrespondenceSet::from_assembled(&p, &q, 0.05);
        let pairs = Arc::new(corr.positives.clone());
        let target = PairTarget {
            corr: &corr,
            pairs,
            align_p: Rotation::identity(),
            align_q: Rotation::identity(),
        };
        let cfg = LossConfig {
            gamma: 2.0,
            ..Default::default()
        };
        for shape_only in [false, true] {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut store = ParamStore::<f64>::new();
            let model = CombiModel::new(&mut store, tiny_config(shape_only), &mut rng).unwrap();
            let hp = model.hierarchy(&p).unwrap();
            let hq = model.hierarchy(&q).unwrap();
            let report = gradient_check(
                &store,
                |t, params| {
                    let out = model.forward(t, params, &hp, &hq)?;
                    Ok(model.loss(t, &out, &target, &cfg)?.total)
                },
                1e-6,
            )
            .unwrap();
            assert!(report.max_error() < 1e-4, "{report:?}");
            if shape_only {
                let frozen = store.id("matcher.occupancy.w1").unwrap();
                assert!(report.error_for(&store.get(frozen).name).is_none());
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_keeps_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = TrainedModel::init(tiny_config(false), &mut rng).unwrap();
        let ck = m.to_checkpoint(serde_json::json!({})).unwrap();
        let back = TrainedModel::from_checkpoint(&Checkpoint::from_reader(&ck.to_bytes().unwrap()[..]).unwrap()).unwrap();
        let (p, q) = (blob(12, 4), blob(10, 5));
        let a = m.infer(&p, &q).unwrap().assignment.log;
        let b = back.infer(&p, &q).unwrap().assignment.log;
        let err = (&a - &b).iter().fold(0.0f64, |s, x| s.max(x.abs()));
        assert!(err < 1e-4, "{err}");
    }
}
