//! Toy fractured objects: generation, labeling, posing and persistence.

pub mod mesh;
pub mod ply;
pub mod store;
pub mod toy;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::transform::{random_rotation_with, RigidTransform};
use crate::geom::PointCloud;
use crate::losses::CorrespondenceSet;
use mesh::{allocate_budget, TriMesh};
use toy::{object_rng, toy_layout, toy_meshes, Pattern, ToyParams};

pub use store::{generate_toy_split, load_object, load_split, save_object, DatasetManifest, ManifestEntry, SplitConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown split `{s}`")))
    }
}

/// A posed multi-part object with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct FracturedObject {
    pub id: String,
    pub pattern: u8,
    pub seed: u64,
    pub split: Split,
    pub tau: f64,
    /// Parts in their random poses, mating masks set.
    pub parts: Vec<PointCloud<f64>>,
    /// Per part, the transform taking it back to the assembled object.
    pub gt_poses: Vec<RigidTransform<f64>>,
    /// Labeled pairs `(a, b, set)` for parts `a < b` with at least one positive.
    pub correspondences: Vec<(usize, usize, CorrespondenceSet)>,
}

impl FracturedObject {
    /// Parts moved into assembled position by their ground-truth poses.
    pub fn assembled(&self) -> Vec<PointCloud<f64>> {
        self.parts.iter().zip(&self.gt_poses).map(|(p, g)| p.transformed(g)).collect()
    }

    /// Ground-truth transform mapping part `a`'s coordinates into part `b`'s.
    pub fn gt_relative(&self, a: usize, b: usize) -> RigidTransform<f64> {
        self.gt_poses[b].inverse().compose(&self.gt_poses[a])
    }

    pub fn correspondence(&self, a: usize, b: usize) -> Option<CorrespondenceSet> {
        self.correspondences.iter().find_map(|(x, y, c)| {
            if (*x, *y) == (a, b) {
                Some(c.clone())
            } else if (*y, *x) == (a, b) {
                Some(c.swapped())
            } else {
                None
            }
        })
    }

    pub fn total_points(&self) -> usize {
        self.parts.iter().map(PointCloud::len).sum()
    }
}

/// Area-weighted uniform samples of each part; per-part counts are
/// proportional to surface area. Also returns per-point fracture-face flags.
pub fn sample_fragment_points<R: Rng + ?Sized>(
    meshes: &[TriMesh],
    total_budget: usize,
    rng: &mut R,
) -> Result<Vec<(PointCloud<f64>, Vec<bool>)>> {
    if total_budget < 100 {
        return Err(Error::InvalidArgument(format!("point budget {total_budget} below 100")));
    }
    let areas: Vec<f64> = meshes.iter().map(TriMesh::area).collect();
    if areas.iter().any(|a| !(*a > 0.0)) {
        return Err(Error::DegenerateMesh("part has zero area".into()));
    }
    let counts = allocate_budget(&areas, total_budget)?;
    meshes
        .iter()
        .zip(counts)
        .enumerate()
        .map(|(id, (m, n))| {
            let (pts, frac) = m.sample_surface(n, rng)?;
            Ok((PointCloud::new(pts, id), frac))
        })
        .collect()
}

/// Pairs within `tau` once both parts are moved by their ground-truth poses.
pub fn label_correspondences(
    p: &PointCloud<f64>,
    q: &PointCloud<f64>,
    gt_p: &RigidTransform<f64>,
    gt_q: &RigidTransform<f64>,
    tau: f64,
) -> CorrespondenceSet {
    let a = gt_p.apply_all(&p.points);
    let b = gt_q.apply_all(&q.points);
    let corr = CorrespondenceSet::from_assembled(&a, &b, tau);
    if corr.is_empty() {
        log::warn!("parts {} and {} have no positive pair", p.part_id, q.part_id);
    }
    corr
}

/// Moves `part` by a Haar-uniform rotation and a translation uniform in
/// `[−0.5, 0.5]³`; returns the moved cloud and the transform undoing it.
pub fn apply_random_pose<R: Rng + ?Sized>(part: &PointCloud<f64>, rng: &mut R) -> (PointCloud<f64>, RigidTransform<f64>) {
    let rotation = random_rotation_with(rng);
    let translation = std::array::from_fn(|_| rng.random_range(-0.5..=0.5));
    let pose = RigidTransform::new(rotation, translation);
    (part.transformed(&pose), pose.inverse())
}

/// Labels all part pairs and sets each part's mating mask.
pub(crate) fn label_object(parts: &mut [PointCloud<f64>], gt: &[RigidTransform<f64>], tau: f64) -> Vec<(usize, usize, CorrespondenceSet)> {
    let mut out = Vec::new();
    let mut masks: Vec<Vec<bool>> = parts.iter().map(|p| vec![false; p.len()]).collect();
    for a in 0..parts.len() {
        for b in a + 1..parts.len() {
            let c = label_correspondences(&parts[a], &parts[b], &gt[a], &gt[b], tau);
            if c.is_empty() {
                continue;
            }
            for &i in &c.mating_p {
                masks[a][i] = true;
            }
            for &j in &c.mating_q {
                masks[b][j] = true;
            }
            out.push((a, b, c));
        }
    }
    for (p, m) in parts.iter_mut().zip(masks) {
        p.mating_mask = Some(m);
    }
    out
}

/// Builds one two-part toy object; a pure function of its arguments.
pub fn generate_toy_object(pattern_id: u8, seed: u64, split: Split, params: &ToyParams) -> Result<FracturedObject> {
    let pattern = Pattern::new(pattern_id)?;
    params.validate()?;
    let mut rng = object_rng(seed);
    let layout = toy_layout(pattern, params, &mut rng);
    let (meshes, _) = toy_meshes(&layout)?;
    let sampled = sample_fragment_points(&meshes, params.point_budget, &mut rng)?;
    let mut parts = Vec::with_capacity(2);
    let mut gt_poses = Vec::with_capacity(2);
    for (cloud, _) in &sampled {
        let (posed, gt) = apply_random_pose(cloud, &mut rng);
        parts.push(posed);
        gt_poses.push(gt);
    }
    let correspondences = label_object(&mut parts, &gt_poses, params.tau);
    Ok(FracturedObject {
        id: format!("p{pattern_id}_s{seed:016x}"),
        pattern: pattern_id,
        seed,
        split,
        tau: params.tau,
        parts,
        gt_poses,
        correspondences,
    })
}
