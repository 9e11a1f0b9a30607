//! Training loop: per-pair losses, gradient accumulation, AdamW with cosine
//! annealing, JSON-lines epoch logs and resumable checkpoints.
//!
//! Every epoch draws from its own random stream derived from the seed, so a
//! run resumed from a checkpoint replays exactly the epochs it skipped.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Hierarchy;
use crate::dataset::{apply_random_pose, label_correspondences, FracturedObject};
use crate::diff::{evaluate_with_gradients, AdamW, AdamWConfig, Checkpoint, CosineSchedule, Dtype, Gradients, ParamStore};
use crate::error::{Error, Result};
use crate::geom::{PointCloud, RigidTransform};
use crate::losses::{CorrespondenceSet, LossConfig};
use crate::model::{CombiModel, ModelConfig, PairTarget, TrainedModel};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    /// Pairs whose gradients are averaged per optimizer step.
    pub batch_size: usize,
    pub seed: u64,
    /// Random subset size per part each epoch; `None` keeps every point.
    pub points_per_part: Option<usize>,
    /// Re-pose every part randomly each epoch.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            lr: 1e-2,
            min_lr: 0.0,
            weight_decay: 1e-2,
            batch_size: 8,
            seed: 0,
            points_per_part: None,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.lr > 0.0) || !(self.min_lr >= 0.0) {
            return Err(Error::InvalidArgument("training needs epochs, batch size and lr > 0".into()));
        }
        Ok(())
    }
}

/// Mean loss components over one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub orientation: f64,
    pub shape: f64,
    pub occupancy: f64,
    pub point: f64,
    pub total: f64,
    pub lr: f64,
    pub pairs: usize,
    pub skipped: usize,
}

/// One labeled pair ready for the network.
pub struct PreparedPair<T: Real> {
    pub hp: Hierarchy<T>,
    pub hq: Hierarchy<T>,
    pub corr: CorrespondenceSet,
    pub align_p: crate::geom::Rotation<f64>,
    pub align_q: crate::geom::Rotation<f64>,
}

impl<T: Real> PreparedPair<T> {
    pub fn target(&self) -> PairTarget<'_> {
        PairTarget {
            corr: &self.corr,
            pairs: Arc::new(self.corr.positives.clone()),
            align_p: self.align_p.transpose(),
            align_q: self.align_q.transpose(),
        }
    }
}

pub(crate) fn subsample<R: Rng + ?Sized>(cloud: &PointCloud<f64>, n: Option<usize>, rng: &mut R) -> PointCloud<f64> {
    match n {
        Some(n) if n < cloud.len() => {
            let mut idx = rand::seq::index::sample(rng, cloud.len(), n).into_vec();
            idx.sort_unstable();
            PointCloud::new(idx.iter().map(|&i| cloud.points[i]).collect(), cloud.part_id)
        }
        _ => PointCloud::new(cloud.points.clone(), cloud.part_id),
    }
}

/// Subsamples and optionally re-poses parts `a` and `b`, then relabels them.
/// Returns `None` when the resulting pair has no positive.
pub fn prepare_pair<T: Real, R: Rng + ?Sized>(
    model: &CombiModel,
    obj: &FracturedObject,
    a: usize,
    b: usize,
    points_per_part: Option<usize>,
    augment: bool,
    rng: &mut R,
) -> Result<Option<PreparedPair<T>>> {
    let mut clouds = Vec::with_capacity(2);
    let mut gts: Vec<RigidTransform<f64>> = Vec::with_capacity(2);
    for k in [a, b] {
        let c = subsample(&obj.parts[k], points_per_part, rng);
        if augment {
            let (moved, undo) = apply_random_pose(&c, rng);
            clouds.push(moved);
            gts.push(obj.gt_poses[k].compose(&undo));
        } else {
            clouds.push(c);
            gts.push(obj.gt_poses[k]);
        }
    }
    let corr = label_correspondences(&clouds[0], &clouds[1], &gts[0], &gts[1], obj.tau);
    if corr.is_empty() {
        return Ok(None);
    }
    let cast = |c: &PointCloud<f64>| c.cast::<T>().points;
    Ok(Some(PreparedPair {
        hp: model.hierarchy(&cast(&clouds[0]))?,
        hq: model.hierarchy(&cast(&clouds[1]))?,
        corr,
        align_p: gts[0].rotation,
        align_q: gts[1].rotation,
    }))
}

/// Loss components and parameter gradients of one prepared pair.
pub fn pair_gradients<T: Real>(
    model: &CombiModel,
    store: &ParamStore<T>,
    pair: &PreparedPair<T>,
    cfg: &LossConfig,
) -> Result<([f64; 5], Gradients<T>)> {
    let target = pair.target();
    let mut parts = [0.0; 4];
    let (total, grads) = evaluate_with_gradients(store, |tape, params| {
        let out = model.forward(tape, params, &pair.hp, &pair.hq)?;
        let l = model.loss(tape, &out, &target, cfg)?;
        parts = [
            tape.scalar_value(l.orientation).as_f64(),
            tape.scalar_value(l.shape).as_f64(),
            l.occupancy.map_or(0.0, |v| tape.scalar_value(v).as_f64()),
            tape.scalar_value(l.point).as_f64(),
        ];
        Ok(l.total)
    })?;
    Ok(([parts[0], parts[1], parts[2], parts[3], total.as_f64()], grads))
}

/// Labeled part pairs of an object, in a fixed order.
fn object_pairs(obj: &FracturedObject) -> Vec<(usize, usize)> {
    obj.correspondences.iter().map(|(a, b, _)| (*a, *b)).collect()
}

pub struct Trainer<T: Real> {
    pub model: CombiModel,
    pub store: ParamStore<T>,
    pub optimizer: AdamW<T>,
    pub train: TrainConfig,
    pub loss: LossConfig,
    /// Next epoch to run (0-based).
    pub epoch: usize,
    pub history: Vec<EpochLog>,
}

/// Metadata keys of training checkpoints.
const META_TRAIN: &str = "train_config";
const META_LOSS: &str = "loss_config";
const META_EPOCH: &str = "epochs_done";
const META_STEP: &str = "optimizer_step";
const META_HISTORY: &str = "history";
const RESUME_PREFIX: &str = "resume.";

impl<T: Real> Trainer<T> {
    pub fn new(model: ModelConfig, loss: LossConfig, train: TrainConfig) -> Result<Self> {
        train.validate()?;
        loss.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
        let mut store = ParamStore::new();
        let model = CombiModel::new(&mut store, model, &mut rng)?;
        let optimizer = AdamW::new(
            AdamWConfig {
                weight_decay: train.weight_decay,
                ..Default::default()
            },
            &store,
        );
        Ok(Trainer {
            model,
            store,
            optimizer,
            train,
            loss,
            epoch: 0,
            history: Vec::new(),
        })
    }

    pub fn schedule(&self) -> CosineSchedule {
        CosineSchedule {
            base_lr: self.train.lr,
            min_lr: self.train.min_lr,
            total_epochs: self.train.epochs,
        }
    }

    /// Random stream of `epoch`; independent of everything run before it.
    fn epoch_rng(&self, epoch: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.train.seed);
        rng.set_stream(epoch as u64 + 1);
        rng
    }

    pub fn run_epoch(&mut self, data: &[FracturedObject]) -> Result<EpochLog> {
        let epoch = self.epoch;
        let lr = self.schedule().lr_at(epoch);
        let mut rng = self.epoch_rng(epoch);
        let mut items: Vec<(usize, usize, usize)> = data
            .iter()
            .enumerate()
            .flat_map(|(o, obj)| object_pairs(obj).into_iter().map(move |(a, b)| (o, a, b)))
            .collect();
        items.shuffle(&mut rng);
        let mut sums = [0.0f64; 5];
        let (mut pairs, mut skipped) = (0usize, 0usize);
        let mut acc = Gradients::zeros_like(&self.store);
        let mut in_batch = 0usize;
        for &(o, a, b) in &items {
            let prepared = prepare_pair::<T, _>(&self.model, &data[o], a, b, self.train.points_per_part, self.train.augment, &mut rng)?;
            let Some(pair) = prepared else {
                skipped += 1;
                continue;
            };
            let (terms, grads) = pair_gradients(&self.model, &self.store, &pair, &self.loss)?;
            for (s, t) in sums.iter_mut().zip(terms) {
                *s += t;
            }
            acc.accumulate(&grads);
            pairs += 1;
            in_batch += 1;
            if in_batch == self.train.batch_size {
                self.step(&mut acc, in_batch, lr)?;
                in_batch = 0;
            }
        }
        if in_batch > 0 {
            self.step(&mut acc, in_batch, lr)?;
        }
        if pairs == 0 {
            return Err(Error::InvalidArgument("no training pair has positives".into()));
        }
        let n = pairs as f64;
        let log = EpochLog {
            epoch,
            orientation: sums[0] / n,
            shape: sums[1] / n,
            occupancy: sums[2] / n,
            point: sums[3] / n,
            total: sums[4] / n,
            lr,
            pairs,
            skipped,
        };
        if !log.total.is_finite() {
            return Err(Error::NonFiniteValue { op: "training loss".into() });
        }
        self.epoch += 1;
        self.history.push(log.clone());
        Ok(log)
    }

    fn step(&mut self, acc: &mut Gradients<T>, n: usize, lr: f64) -> Result<()> {
        acc.scale(T::one() / T::from_usize_lossy(n));
        self.optimizer.step(&mut self.store, acc, lr)?;
        *acc = Gradients::zeros_like(&self.store);
        Ok(())
    }

    /// Runs the remaining epochs, writing one JSON line per epoch to `log`
    /// and calling `after_epoch` after each.
    pub fn fit(
        &mut self,
        data: &[FracturedObject],
        log: &mut dyn Write,
        mut after_epoch: impl FnMut(&Self, &EpochLog) -> Result<()>,
    ) -> Result<()> {
        while self.epoch < self.train.epochs {
            let entry = self.run_epoch(data)?;
            let line = serde_json::to_string(&entry)?;
            writeln!(log, "{line}").map_err(|e| Error::io("<training log>", e))?;
            after_epoch(self, &entry)?;
        }
        Ok(())
    }

    pub fn trained_model(&self) -> Result<TrainedModel> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = TrainedModel::init(self.model.config.clone(), &mut rng)?;
        m.store = self.store.cast();
        Ok(m)
    }

    /// Weights (f32) for inference plus f64 master weights and optimizer
    /// moments for resuming.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = serde_json::json!({
            META_TRAIN: self.train,
            META_LOSS: self.loss,
            META_EPOCH: self.epoch,
            META_STEP: self.optimizer.state.step,
            META_HISTORY: self.history,
        });
        let mut ck = self.trained_model()?.to_checkpoint(meta)?;
        let f64s = |a: &Array2<T>| a.mapv(|x| x.as_f64());
        for (i, p) in self.store.iter().enumerate() {
            ck.push(format!("{RESUME_PREFIX}param.{}", p.name), Dtype::F64, f64s(&p.value));
            ck.push(format!("{RESUME_PREFIX}m.{}", p.name), Dtype::F64, f64s(&self.optimizer.state.m[i]));
            ck.push(format!("{RESUME_PREFIX}v.{}", p.name), Dtype::F64, f64s(&self.optimizer.state.v[i]));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    /// Restores a trainer from [`Trainer::to_checkpoint`] output. `epochs`
    /// may extend the original schedule.
    pub fn from_checkpoint(ck: &Checkpoint, epochs: Option<usize>) -> Result<Self> {
        let field = |k: &str| ck.meta.get(k).cloned().ok_or_else(|| Error::Checkpoint(format!("missing `{k}`; not a training checkpoint")));
        let parse = |k: &str| -> Result<serde_json::Value> { field(k) };
        let bad = |e: serde_json::Error| Error::Checkpoint(e.to_string());
        let mut train: TrainConfig = serde_json::from_value(parse(META_TRAIN)?).map_err(bad)?;
        if let Some(e) = epochs {
            train.epochs = e;
        }
        let loss: LossConfig = serde_json::from_value(parse(META_LOSS)?).map_err(bad)?;
        let model: ModelConfig = serde_json::from_value(parse(crate::model::CONFIG_KEY)?).map_err(bad)?;
        let mut t = Trainer::new(model, loss, train)?;
        t.epoch = serde_json::from_value(parse(META_EPOCH)?).map_err(bad)?;
        t.optimizer.state.step = serde_json::from_value(parse(META_STEP)?).map_err(bad)?;
        t.history = serde_json::from_value(parse(META_HISTORY)?).map_err(bad)?;
        let names: Vec<String> = t.store.iter().map(|p| p.name.clone()).collect();
        let get = |key: String| -> Result<Array2<T>> {
            let a = ck.get(&key).ok_or_else(|| Error::Checkpoint(format!("missing array `{key}`")))?;
            Ok(a.data.mapv(T::c))
        };
        for (i, name) in names.iter().enumerate() {
            t.store
                .set_value(name, get(format!("{RESUME_PREFIX}param.{name}"))?)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            t.optimizer.state.m[i] = get(format!("{RESUME_PREFIX}m.{name}"))?;
            t.optimizer.state.v[i] = get(format!("{RESUME_PREFIX}v.{name}"))?;
        }
        Ok(t)
    }

    pub fn load(path: &Path, epochs: Option<usize>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, epochs)
    }
}
