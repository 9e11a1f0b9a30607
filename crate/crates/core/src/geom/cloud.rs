use crate::error::{Error, Result};
use crate::geom::transform::RigidTransform;
use crate::geom::vec3::{self, Vec3};
use crate::scalar::Real;

/// Surface samples of one part.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud<T> {
    pub points: Vec<Vec3<T>>,
    pub part_id: usize,
    /// Ground-truth mating-surface flags, when known.
    pub mating_mask: Option<Vec<bool>>,
}

impl<T: Real> PointCloud<T> {
    pub fn new(points: Vec<Vec3<T>>, part_id: usize) -> Self {
        PointCloud {
            points,
            part_id,
            mating_mask: None,
        }
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Self {
        debug_assert_eq!(mask.len(), self.points.len());
        self.mating_mask = Some(mask);
        self
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.points
            .iter()
            .all(|p| p.iter().all(|v| v.is_finite()))
    }

    pub fn centroid(&self) -> Vec3<T> {
        vec3::centroid(&self.points)
    }

    pub fn transformed(&self, t: &RigidTransform<T>) -> Self {
        PointCloud {
            points: t.apply_all(&self.points),
            part_id: self.part_id,
            mating_mask: self.mating_mask.clone(),
        }
    }

    pub fn cast<U: Real>(&self) -> PointCloud<U> {
        PointCloud {
            points: self.points.iter().map(|p| vec3::cast(*p)).collect(),
            part_id: self.part_id,
            mating_mask: self.mating_mask.clone(),
        }
    }
}

/// Squared distance from `p` to its nearest neighbour in `set`.
fn nearest_sq<T: Real>(p: Vec3<T>, set: &[Vec3<T>]) -> T {
    set.iter()
        .map(|q| vec3::dist_sq(p, *q))
        .fold(T::infinity(), T::min)
}

/// Symmetric chamfer distance on point slices: half the sum of both
/// directional means of squared nearest-neighbour distances.
pub fn chamfer_points<T: Real>(a: &[Vec3<T>], b: &[Vec3<T>]) -> Result<T> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let ab = a.iter().map(|p| nearest_sq(*p, b)).fold(T::zero(), |s, v| s + v)
        / T::from_usize_lossy(a.len());
    let ba = b.iter().map(|p| nearest_sq(*p, a)).fold(T::zero(), |s, v| s + v)
        / T::from_usize_lossy(b.len());
    Ok((ab + ba) / (T::one() + T::one()))
}

pub fn chamfer_distance<T: Real>(a: &PointCloud<T>, b: &PointCloud<T>) -> Result<T> {
    chamfer_points(&a.points, &b.points)
}

/// Farthest point sampling from `start`. Ties go to the lowest index.
pub fn farthest_point_sample<T: Real>(
    points: &[Vec3<T>],
    m: usize,
    start: usize,
) -> Result<Vec<usize>> {
    let n = points.len();
    if m > n {
        return Err(Error::InvalidArgument(format!(
            "farthest_point_sample: requested {m} of {n} points"
        )));
    }
    if m == 0 {
        return Ok(Vec::new());
    }
    if start >= n {
        return Err(Error::InvalidArgument(format!(
            "farthest_point_sample: start index {start} out of range {n}"
        )));
    }
    let mut selected = Vec::with_capacity(m);
    let mut min_d = vec![T::infinity(); n];
    let mut taken = vec![false; n];
    let mut current = start;
    for _ in 0..m {
        selected.push(current);
        taken[current] = true;
        let c = points[current];
        let mut best = None::<(T, usize)>;
        for (i, p) in points.iter().enumerate() {
            let d = vec3::dist_sq(*p, c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if taken[i] {
                continue;
            }
            match best {
                Some((bd, _)) if min_d[i] <= bd => {}
                _ => best = Some((min_d[i], i)),
            }
        }
        match best {
            Some((_, i)) => current = i,
            None => break,
        }
    }
    Ok(selected)
}

/// k nearest neighbours of every query among `reference`, nearest first;
/// ties broken by lower reference index. With `exclude_self`, queries and
/// references are the same set and the query's own index is skipped.
pub fn knn_query<T: Real>(
    reference: &[Vec3<T>],
    queries: &[Vec3<T>],
    k: usize,
    exclude_self: bool,
) -> Result<Vec<Vec<usize>>> {
    let available = reference.len() - usize::from(exclude_self && !reference.is_empty());
    if k > available || (exclude_self && k >= reference.len()) {
        return Err(Error::InvalidArgument(format!(
            "knn: k = {k} but only {available} candidate neighbours"
        )));
    }
    let mut out = Vec::with_capacity(queries.len());
    let mut cand: Vec<(T, usize)> = Vec::with_capacity(reference.len());
    for (qi, q) in queries.iter().enumerate() {
        cand.clear();
        cand.extend(
            reference
                .iter()
                .enumerate()
                .filter(|(ri, _)| !(exclude_self && *ri == qi))
                .map(|(ri, r)| (vec3::dist_sq(*q, *r), ri)),
        );
        let cmp = |a: &(T, usize), b: &(T, usize)| {
            a.0.partial_cmp(&b.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.1.cmp(&b.1))
        };
        if k < cand.len() {
            cand.select_nth_unstable_by(k, cmp);
            cand.truncate(k);
        }
        cand.sort_by(cmp);
        out.push(cand.iter().take(k).map(|&(_, i)| i).collect());
    }
    Ok(out)
}

/// k-NN graph over a single point set, self excluded.
pub fn knn_graph<T: Real>(points: &[Vec3<T>], k: usize) -> Result<Vec<Vec<usize>>> {
    if k >= points.len() {
        return Err(Error::InvalidArgument(format!(
            "knn_graph: k = {k} requires more than {} points",
            points.len()
        )));
    }
    knn_query(points, points, k, true)
}
