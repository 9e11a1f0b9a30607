//! Assembly metrics under the relative-pose protocol: every prediction is
//! judged after anchoring one part, so a common rigid motion of all
//! predicted poses changes nothing.

use std::path::Path;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assembler::{anchor_part, assemble, PairwiseMatcher, DEFAULT_TOP_K};
use crate::dataset::FracturedObject;
use crate::error::{Error, Result};
use crate::geom::{chamfer_points, vec3, PointCloud, RigidTransform};
use crate::losses::CorrespondenceSet;
use crate::train::subsample;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PaThresholds {
    /// Per-part correspondence distance.
    pub crd: f64,
    /// Per-part squared chamfer distance.
    pub cd: f64,
}

impl Default for PaThresholds {
    fn default() -> Self {
        PaThresholds { crd: 0.05, cd: 0.01 }
    }
}

/// Transforms taking each part into the anchor part's frame.
pub fn relative_poses(poses: &[RigidTransform<f64>], anchor: usize) -> Vec<RigidTransform<f64>> {
    let inv = poses[anchor].inverse();
    poses.iter().map(|p| inv.compose(p)).collect()
}

fn check_lengths(pred: &[RigidTransform<f64>], gt: &[RigidTransform<f64>], parts: &[PointCloud<f64>]) -> Result<()> {
    if pred.len() != parts.len() || gt.len() != parts.len() || parts.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} predicted and {} ground-truth poses for {} parts",
            pred.len(),
            gt.len(),
            parts.len()
        )));
    }
    Ok(())
}

/// Mean over positive pairs `(p, q)` of `‖(p̂ − q̂) − (p* − q*)‖`, where hats
/// are positions under predicted relative poses and stars under ground
/// truth, both in the anchor's frame. Also returns per-part means over the
/// positives each part takes part in (`NaN` for parts without any).
pub fn crd_per_part(
    pred: &[RigidTransform<f64>],
    gt: &[RigidTransform<f64>],
    parts: &[PointCloud<f64>],
    corr: &[(usize, usize, CorrespondenceSet)],
) -> Result<(f64, Vec<f64>)> {
    check_lengths(pred, gt, parts)?;
    let anchor = anchor_part(&parts.iter().map(PointCloud::len).collect::<Vec<_>>());
    let (rp, rg) = (relative_poses(pred, anchor), relative_poses(gt, anchor));
    let mut total = (0.0, 0usize);
    let mut per = vec![(0.0, 0usize); parts.len()];
    for (a, b, c) in corr {
        for &(i, j) in &c.positives {
            let (pa, pb) = (parts[*a].points[i], parts[*b].points[j]);
            let dp = vec3::sub(rp[*a].apply(pa), rp[*b].apply(pb));
            let dg = vec3::sub(rg[*a].apply(pa), rg[*b].apply(pb));
            let d = vec3::norm(vec3::sub(dp, dg));
            total = (total.0 + d, total.1 + 1);
            for k in [*a, *b] {
                per[k] = (per[k].0 + d, per[k].1 + 1);
            }
        }
    }
    if total.1 == 0 {
        return Err(Error::InvalidArgument("no positive correspondence to measure".into()));
    }
    let mean = |(s, n): (f64, usize)| if n == 0 { f64::NAN } else { s / n as f64 };
    Ok((mean(total), per.into_iter().map(mean).collect()))
}

pub fn crd(
    pred: &[RigidTransform<f64>],
    gt: &[RigidTransform<f64>],
    parts: &[PointCloud<f64>],
    corr: &[(usize, usize, CorrespondenceSet)],
) -> Result<f64> {
    Ok(crd_per_part(pred, gt, parts, corr)?.0)
}

/// Squared chamfer of the whole assembly and of each part, all in the
/// anchor's frame.
pub fn chamfer_per_part(pred: &[RigidTransform<f64>], gt: &[RigidTransform<f64>], parts: &[PointCloud<f64>]) -> Result<(f64, Vec<f64>)> {
    check_lengths(pred, gt, parts)?;
    let anchor = anchor_part(&parts.iter().map(PointCloud::len).collect::<Vec<_>>());
    let (rp, rg) = (relative_poses(pred, anchor), relative_poses(gt, anchor));
    let mut all_p = Vec::new();
    let mut all_g = Vec::new();
    let mut per = Vec::with_capacity(parts.len());
    for (k, part) in parts.iter().enumerate() {
        let p = rp[k].apply_all(&part.points);
        let g = rg[k].apply_all(&part.points);
        per.push(chamfer_points(&p, &g)?);
        all_p.extend(p);
        all_g.extend(g);
    }
    Ok((chamfer_points(&all_p, &all_g)?, per))
}

/// Squared residuals of one relative pose: XYZ Euler angles in degrees of
/// `R̂·R*ᵀ`, translation components of `t̂ − t*`, and the geodesic angle.
fn residual(pred: &RigidTransform<f64>, gt: &RigidTransform<f64>) -> ([f64; 3], [f64; 3], f64) {
    let r = pred.rotation.compose(&gt.rotation.transpose());
    let e = r.euler_xyz().map(f64::to_degrees);
    let t = vec3::sub(pred.translation, gt.translation);
    (e, t, r.angle().to_degrees())
}

/// Root-mean-square over all Euler components and over all translation
/// components of the residuals. Returns `(RMSE_R degrees, RMSE_T)`.
pub fn rmse_pose(pred_relative: &[RigidTransform<f64>], gt_relative: &[RigidTransform<f64>]) -> (f64, f64) {
    let n = pred_relative.len().min(gt_relative.len());
    if n == 0 {
        return (0.0, 0.0);
    }
    let (mut sr, mut st) = (0.0, 0.0);
    for (p, g) in pred_relative.iter().zip(gt_relative) {
        let (e, t, _) = residual(p, g);
        sr += e.iter().map(|x| x * x).sum::<f64>();
        st += t.iter().map(|x| x * x).sum::<f64>();
    }
    let m = (3 * n) as f64;
    ((sr / m).sqrt(), (st / m).sqrt())
}

/// Fraction of scores strictly below `threshold`; `NaN` scores count as
/// failures.
pub fn part_accuracy(scores: &[f64], threshold: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("no part scores".into()));
    }
    if !(threshold > 0.0) {
        return Err(Error::InvalidArgument(format!("threshold must be positive, got {threshold}")));
    }
    Ok(scores.iter().filter(|s| **s < threshold).count() as f64 / scores.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectMetrics {
    pub id: String,
    pub pattern: u8,
    pub anchor: usize,
    pub crd: f64,
    pub cd: f64,
    pub rmse_r: f64,
    pub rmse_t: f64,
    /// Mean geodesic angle of the residual rotations, degrees.
    pub geodesic_deg: f64,
    pub part_crd: Vec<f64>,
    pub part_cd: Vec<f64>,
}

/// Every metric of one object for predicted poses expressed in any common
/// frame.
pub fn object_metrics(obj: &FracturedObject, pred: &[RigidTransform<f64>]) -> Result<ObjectMetrics> {
    let (crd, part_crd) = crd_per_part(pred, &obj.gt_poses, &obj.parts, &obj.correspondences)?;
    let (cd, part_cd) = chamfer_per_part(pred, &obj.gt_poses, &obj.parts)?;
    let anchor = anchor_part(&obj.parts.iter().map(PointCloud::len).collect::<Vec<_>>());
    let others: Vec<usize> = (0..obj.parts.len()).filter(|k| *k != anchor).collect();
    let rp = relative_poses(pred, anchor);
    let rg = relative_poses(&obj.gt_poses, anchor);
    let pick = |v: &[RigidTransform<f64>]| others.iter().map(|&k| v[k]).collect::<Vec<_>>();
    let (rmse_r, rmse_t) = rmse_pose(&pick(&rp), &pick(&rg));
    let geodesic_deg = others.iter().map(|&k| residual(&rp[k], &rg[k]).2).sum::<f64>() / others.len().max(1) as f64;
    Ok(ObjectMetrics {
        id: obj.id.clone(),
        pattern: obj.pattern,
        anchor,
        crd,
        cd,
        rmse_r,
        rmse_t,
        geodesic_deg,
        part_crd,
        part_cd,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub crd: f64,
    pub cd: f64,
    pub rmse_r: f64,
    pub rmse_t: f64,
    pub geodesic_deg: f64,
    pub pa_crd: f64,
    pub pa_cd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: String,
    pub n_objects: usize,
    pub thresholds: PaThresholds,
    pub metrics: Metrics,
    pub per_object: Vec<ObjectMetrics>,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}

/// Dataset aggregation: CRD, CD and geodesic error are object means, RMSEs
/// pool every non-anchor part, and PA counts non-anchor parts, whose poses
/// are the only predicted ones.
pub fn aggregate(split: &str, per_object: Vec<ObjectMetrics>, thresholds: PaThresholds) -> Result<MetricsReport> {
    let n = per_object.len();
    if n == 0 {
        return Err(Error::InvalidArgument(format!("split `{split}` has no object to evaluate")));
    }
    let mean = |f: fn(&ObjectMetrics) -> f64| per_object.iter().map(f).sum::<f64>() / n as f64;
    let mut pooled = (0.0, 0.0, 0usize);
    let mut crd_scores = Vec::new();
    let mut cd_scores = Vec::new();
    for o in &per_object {
        let m = o.part_crd.len() - 1;
        pooled.0 += o.rmse_r * o.rmse_r * m as f64;
        pooled.1 += o.rmse_t * o.rmse_t * m as f64;
        pooled.2 += m;
        for k in (0..o.part_crd.len()).filter(|k| *k != o.anchor) {
            crd_scores.push(o.part_crd[k]);
            cd_scores.push(o.part_cd[k]);
        }
    }
    let metrics = Metrics {
        crd: mean(|o| o.crd),
        cd: mean(|o| o.cd),
        rmse_r: (pooled.0 / pooled.2.max(1) as f64).sqrt(),
        rmse_t: (pooled.1 / pooled.2.max(1) as f64).sqrt(),
        geodesic_deg: mean(|o| o.geodesic_deg),
        pa_crd: part_accuracy(&crd_scores, thresholds.crd)?,
        pa_cd: part_accuracy(&cd_scores, thresholds.cd)?,
    };
    Ok(MetricsReport {
        split: split.to_string(),
        n_objects: n,
        thresholds,
        metrics,
        per_object,
    })
}

/// Scores predicted poses, one list per object.
pub fn evaluate_poses(split: &str, objects: &[FracturedObject], predictions: &[Vec<RigidTransform<f64>>], thresholds: PaThresholds) -> Result<MetricsReport> {
    if objects.len() != predictions.len() {
        return Err(Error::InvalidArgument(format!("{} objects, {} predictions", objects.len(), predictions.len())));
    }
    let per = objects.iter().zip(predictions).map(|(o, p)| object_metrics(o, p)).collect::<Result<Vec<_>>>()?;
    aggregate(split, per, thresholds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub top_k: usize,
    /// Model inputs are subsampled to at most this many points per part;
    /// metrics always use the full clouds.
    pub points_per_part: Option<usize>,
    /// Seeds the subsampling, combined with each object's seed.
    pub seed: u64,
    pub thresholds: PaThresholds,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            top_k: DEFAULT_TOP_K,
            points_per_part: None,
            seed: 0,
            thresholds: PaThresholds::default(),
        }
    }
}

/// Model inputs: each part subsampled to at most `points_per_part` points
/// with a stream seeded by `seed`, part ids kept.
pub fn model_inputs(parts: &[PointCloud<f64>], points_per_part: Option<usize>, seed: u64) -> Vec<PointCloud<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    parts.iter().map(|p| subsample(p, points_per_part, &mut rng)).collect()
}

/// Assembles every object with `model` and scores the result.
pub fn evaluate(model: &dyn PairwiseMatcher, split: &str, objects: &[FracturedObject], cfg: &EvalConfig) -> Result<MetricsReport> {
    let mut per = Vec::with_capacity(objects.len());
    for (n, obj) in objects.iter().enumerate() {
        let inputs = model_inputs(&obj.parts, cfg.points_per_part, cfg.seed ^ obj.seed);
        let (poses, _) = assemble(&inputs, model, cfg.top_k)?;
        let m = object_metrics(obj, &poses.placements)?;
        info!("evaluated {} ({}/{}): crd {:.4}", obj.id, n + 1, objects.len(), m.crd);
        per.push(m);
    }
    aggregate(split, per, cfg.thresholds)
}
