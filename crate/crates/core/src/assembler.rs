//! Pairwise pose estimation and multi-part assembly.
//!
//! Edge transforms map part `i`'s coordinates into part `j`'s:
//! `x_j = R_ij·x_i + t_ij`. Global solutions `(R̃_i, t̃_i)` map anchor
//! coordinates into each part's frame, so consistent edges satisfy
//! `R̃_j = R_ij·R̃_i` and `t̃_j = R_ij·t̃_i + t_ij`. The reported placements are
//! their inverses: each takes a part into the anchor's frame.

use std::collections::VecDeque;
use std::path::Path;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::kabsch::weighted_kabsch;
use crate::geom::linalg::{project_to_so3, solve, symmetric_eigen};
use crate::geom::transform::TransformRecord;
use crate::geom::{Mat3, PointCloud, RigidTransform, Rotation, Vec3};
use crate::matcher::{topk_correspondences, AssignmentMatrix};
use crate::model::TrainedModel;

/// Anything that produces a log-assignment between two clouds.
pub trait PairwiseMatcher {
    fn assignment(&self, p: &PointCloud<f64>, q: &PointCloud<f64>) -> Result<AssignmentMatrix<f64>>;
}

impl PairwiseMatcher for TrainedModel {
    fn assignment(&self, p: &PointCloud<f64>, q: &PointCloud<f64>) -> Result<AssignmentMatrix<f64>> {
        Ok(self.infer(&p.points, &q.points)?.assignment)
    }
}

/// Correspondences kept for pose estimation.
pub const DEFAULT_TOP_K: usize = 128;

/// Smallest log-probability counted by [`information_scalar`].
const LOG_GUARD: f64 = -50.0;

#[derive(Debug, Clone)]
pub struct PairwiseEstimate {
    /// Maps `p`'s coordinates into `q`'s.
    pub transform: RigidTransform<f64>,
    pub assignment: AssignmentMatrix<f64>,
    pub matchability: f64,
    /// Fewer than `k` non-dustbin cells were available.
    pub short: bool,
    /// The weighted correspondences did not determine a rotation.
    pub degenerate: bool,
}

/// Assignment, top-`k` soft correspondences, then weighted Kabsch.
pub fn estimate_pairwise(p: &PointCloud<f64>, q: &PointCloud<f64>, model: &dyn PairwiseMatcher, k: usize) -> Result<PairwiseEstimate> {
    if p.len() < 3 || q.len() < 3 {
        return Err(Error::InvalidArgument("pairwise estimation needs ≥ 3 points per part".into()));
    }
    let assignment = model.assignment(p, q)?;
    let corr = topk_correspondences(&assignment, k)?;
    let matches: Vec<(usize, usize)> = corr.matches.iter().map(|m| (m.0, m.1)).collect();
    let weights: Vec<f64> = corr.matches.iter().map(|m| m.2).collect();
    let fit = weighted_kabsch(p, q, &weights, &matches)?;
    Ok(PairwiseEstimate {
        transform: fit.transform,
        matchability: assignment.matchability(),
        assignment,
        short: corr.short,
        degenerate: fit.degenerate,
    })
}

/// `(Σ exp Z)⁻¹` over real cells, with entries floored at `e⁻⁵⁰`.
pub fn information_scalar(z: &AssignmentMatrix<f64>) -> f64 {
    let (n, m) = (z.rows(), z.cols());
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..m {
            s += z.log[[i, j]].max(LOG_GUARD).exp();
        }
    }
    1.0 / s
}

/// Isotropic information matrix `s·I₆`.
pub fn information_matrix(z: &AssignmentMatrix<f64>) -> [[f64; 6]; 6] {
    let s = information_scalar(z);
    std::array::from_fn(|i| std::array::from_fn(|j| if i == j { s } else { 0.0 }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseEdge {
    pub from: usize,
    pub to: usize,
    pub transform: RigidTransform<f64>,
    /// Scalar of the isotropic information matrix.
    pub information: f64,
    pub matchability: f64,
    /// Why the estimate is unusable, if it is.
    pub flag: Option<String>,
}

impl PoseEdge {
    pub fn information_matrix(&self) -> [[f64; 6]; 6] {
        std::array::from_fn(|i| std::array::from_fn(|j| if i == j { self.information } else { 0.0 }))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseGraph {
    /// Point count of each part.
    pub nodes: Vec<usize>,
    pub edges: Vec<PoseEdge>,
}

/// One directed edge per ordered pair, each estimated independently.
/// Failures become flagged edges.
pub fn build_pose_graph(parts: &[PointCloud<f64>], model: &dyn PairwiseMatcher, k: usize) -> Result<PoseGraph> {
    if parts.len() < 2 {
        return Err(Error::InvalidArgument("a pose graph needs at least two parts".into()));
    }
    let mut edges = Vec::with_capacity(parts.len() * (parts.len() - 1));
    for i in 0..parts.len() {
        for j in 0..parts.len() {
            if i == j {
                continue;
            }
            let edge = match estimate_pairwise(&parts[i], &parts[j], model, k) {
                Ok(e) => PoseEdge {
                    from: i,
                    to: j,
                    transform: e.transform,
                    information: information_scalar(&e.assignment),
                    matchability: e.matchability,
                    flag: e.degenerate.then(|| "degenerate correspondences".to_string()),
                },
                Err(err) => {
                    warn!("pair ({i}, {j}) failed: {err}");
                    PoseEdge {
                        from: i,
                        to: j,
                        transform: RigidTransform::identity(),
                        information: 0.0,
                        matchability: 0.0,
                        flag: Some(err.to_string()),
                    }
                }
            };
            edges.push(edge);
        }
    }
    Ok(PoseGraph {
        nodes: parts.iter().map(PointCloud::len).collect(),
        edges,
    })
}

/// Keeps each node's best unflagged outgoing edge by matchability; ties go
/// to the lower target id.
pub fn prune_edges(graph: &PoseGraph) -> Result<PoseGraph> {
    let mut edges = Vec::with_capacity(graph.nodes.len());
    for n in 0..graph.nodes.len() {
        let best = graph
            .edges
            .iter()
            .filter(|e| e.from == n && e.flag.is_none())
            .max_by(|a, b| a.matchability.total_cmp(&b.matchability).then(b.to.cmp(&a.to)));
        match best {
            Some(e) => edges.push(e.clone()),
            None => return Err(Error::IsolatedNode(n)),
        }
    }
    Ok(PoseGraph {
        nodes: graph.nodes.clone(),
        edges,
    })
}

fn check_connected(graph: &PoseGraph) -> Result<()> {
    let n = graph.nodes.len();
    let mut adj = vec![Vec::new(); n];
    for e in &graph.edges {
        if e.from >= n || e.to >= n || e.from == e.to {
            return Err(Error::InvalidArgument(format!("bad edge ({}, {})", e.from, e.to)));
        }
        adj[e.from].push(e.to);
        adj[e.to].push(e.from);
    }
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([0]);
    seen[0] = true;
    while let Some(u) = queue.pop_front() {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                queue.push_back(v);
            }
        }
    }
    if seen.iter().all(|s| *s) {
        Ok(())
    } else {
        Err(Error::DisconnectedGraph)
    }
}

/// Edge weight used by the solvers; zero-information edges count as 1.
fn weight(e: &PoseEdge) -> f64 {
    if e.information > 0.0 {
        e.information
    } else {
        1.0
    }
}

/// Chordal rotation averaging: minimizes `Σ w‖R̃_j − R_ij·R̃_i‖²_F` over
/// stacked `3×3` blocks with the orthogonality constraint relaxed to the
/// three lowest eigenvectors, projects each block onto SO(3), and fixes the
/// anchor to identity.
pub fn rotation_average(graph: &PoseGraph, anchor: usize) -> Result<Vec<Rotation<f64>>> {
    let n = graph.nodes.len();
    if anchor >= n {
        return Err(Error::InvalidArgument(format!("anchor {anchor} out of range")));
    }
    check_connected(graph)?;
    let dim = 3 * n;
    let mut l = vec![0.0; dim * dim];
    for e in &graph.edges {
        let (i, j, w) = (e.from, e.to, weight(e));
        let r = e.transform.rotation.matrix();
        for a in 0..3 {
            l[(3 * i + a) * dim + 3 * i + a] += w;
            l[(3 * j + a) * dim + 3 * j + a] += w;
            for b in 0..3 {
                l[(3 * j + a) * dim + 3 * i + b] -= w * r[(a, b)];
                l[(3 * i + b) * dim + 3 * j + a] -= w * r[(a, b)];
            }
        }
    }
    let (_, vecs) = symmetric_eigen(&l, dim);
    let block = |k: usize, flip: bool| -> Mat3<f64> {
        let mut m = Mat3::zeros();
        for a in 0..3 {
            for b in 0..3 {
                let s = if flip && b == 2 { -1.0 } else { 1.0 };
                m.m[a][b] = s * vecs[(3 * k + a) * dim + b];
            }
        }
        m
    };
    let det_sum: f64 = (0..n).map(|k| block(k, false).det()).sum();
    let flip = det_sum < 0.0;
    let raw: Vec<Rotation<f64>> = (0..n).map(|k| Rotation::from_matrix_unchecked(project_to_so3(&block(k, flip)))).collect();
    let fix = raw[anchor].transpose();
    Ok(raw.iter().map(|r| r.compose(&fix)).collect())
}

/// Weighted least squares for `t̃_j − R̂_ij·t̃_i = t_ij` with `t̃_anchor = 0`,
/// where `R̂_ij = R̃_j·R̃_iᵀ` comes from the averaged rotations.
pub fn solve_translations(graph: &PoseGraph, rotations: &[Rotation<f64>], anchor: usize) -> Result<Vec<Vec3<f64>>> {
    let n = graph.nodes.len();
    if rotations.len() != n || anchor >= n {
        return Err(Error::InvalidArgument("one rotation per node and a valid anchor required".into()));
    }
    check_connected(graph)?;
    // Unknowns: the 3 coordinates of every non-anchor node.
    let col = |k: usize| -> Option<usize> {
        match k.cmp(&anchor) {
            std::cmp::Ordering::Less => Some(3 * k),
            std::cmp::Ordering::Equal => None,
            std::cmp::Ordering::Greater => Some(3 * (k - 1)),
        }
    };
    let m = 3 * (n - 1);
    let mut ata = vec![0.0; m * m];
    let mut atb = vec![0.0; m];
    for e in &graph.edges {
        let w = weight(e);
        let r = rotations[e.to].compose(&rotations[e.from].transpose());
        // Row a: t̃_j[a] − Σ_b R[a][b]·t̃_i[b] = t_ij[a].
        for a in 0..3 {
            let mut row: Vec<(usize, f64)> = Vec::with_capacity(4);
            if let Some(cj) = col(e.to) {
                row.push((cj + a, 1.0));
            }
            if let Some(ci) = col(e.from) {
                for b in 0..3 {
                    row.push((ci + b, -r.matrix()[(a, b)]));
                }
            }
            for &(p, vp) in &row {
                atb[p] += w * vp * e.transform.translation[a];
                for &(q, vq) in &row {
                    ata[p * m + q] += w * vp * vq;
                }
            }
        }
    }
    let x = solve(&ata, &atb, m).ok_or(Error::DisconnectedGraph)?;
    Ok((0..n)
        .map(|k| match col(k) {
            Some(c) => [x[c], x[c + 1], x[c + 2]],
            None => [0.0; 3],
        })
        .collect())
}

/// Largest part by point count; ties go to the lower id.
pub fn anchor_part(sizes: &[usize]) -> usize {
    let mut best = 0;
    for (i, &s) in sizes.iter().enumerate() {
        if s > sizes[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalPoses {
    /// Per part, the transform placing it into the anchor's frame.
    pub placements: Vec<RigidTransform<f64>>,
    pub anchor: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeReport {
    pub from: usize,
    pub to: usize,
    pub matchability: f64,
    pub information: f64,
    pub kept: bool,
    pub flag: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssemblyReport {
    pub anchor: usize,
    /// Per part, the placement into the anchor frame.
    pub parts: Vec<TransformRecord>,
    pub edges: Vec<EdgeReport>,
    /// `"pairwise"` for two parts, `"pose-graph"` otherwise.
    pub method: String,
}

impl AssemblyReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn poses(&self) -> GlobalPoses {
        GlobalPoses {
            placements: self.parts.iter().map(TransformRecord::to_transform).collect(),
            anchor: self.anchor,
        }
    }
}

/// Solves the pruned graph; placements are inverses of `(R̃_i, t̃_i)`.
pub fn solve_graph(graph: &PoseGraph, anchor: usize) -> Result<GlobalPoses> {
    let rotations = rotation_average(graph, anchor)?;
    let translations = solve_translations(graph, &rotations, anchor)?;
    Ok(GlobalPoses {
        placements: rotations
            .iter()
            .zip(&translations)
            .map(|(r, t)| RigidTransform::new(*r, *t).inverse())
            .collect(),
        anchor,
    })
}

/// Two parts: one pairwise estimate placing the smaller part onto the
/// anchor. More parts: full graph, pruning, averaging.
pub fn assemble(parts: &[PointCloud<f64>], model: &dyn PairwiseMatcher, k: usize) -> Result<(GlobalPoses, AssemblyReport)> {
    if parts.len() < 2 {
        return Err(Error::InvalidArgument("assembly needs at least two parts".into()));
    }
    let sizes: Vec<usize> = parts.iter().map(PointCloud::len).collect();
    let anchor = anchor_part(&sizes);
    if parts.len() == 2 {
        info!("two parts: pairwise estimate, no graph solve");
        let other = 1 - anchor;
        let est = estimate_pairwise(&parts[other], &parts[anchor], model, k)?;
        let mut placements = vec![RigidTransform::identity(); 2];
        placements[other] = est.transform;
        let poses = GlobalPoses { placements, anchor };
        let report = AssemblyReport {
            anchor,
            parts: poses.placements.iter().map(TransformRecord::from).collect(),
            edges: vec![EdgeReport {
                from: other,
                to: anchor,
                matchability: est.matchability,
                information: information_scalar(&est.assignment),
                kept: true,
                flag: est.degenerate.then(|| "degenerate correspondences".into()),
            }],
            method: "pairwise".into(),
        };
        return Ok((poses, report));
    }
    let graph = build_pose_graph(parts, model, k)?;
    let pruned = prune_edges(&graph)?;
    let poses = solve_graph(&pruned, anchor)?;
    let kept = |e: &PoseEdge| pruned.edges.iter().any(|p| (p.from, p.to) == (e.from, e.to));
    let report = AssemblyReport {
        anchor,
        parts: poses.placements.iter().map(TransformRecord::from).collect(),
        edges: graph
            .edges
            .iter()
            .map(|e| EdgeReport {
                from: e.from,
                to: e.to,
                matchability: e.matchability,
                information: e.information,
                kept: kept(e),
                flag: e.flag.clone(),
            })
            .collect(),
        method: "pose-graph".into(),
    };
    Ok((poses, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::random_rotation;
    use ndarray::Array2;

    fn edge(from: usize, to: usize, t: RigidTransform<f64>, m: f64) -> PoseEdge {
        PoseEdge {
            from,
            to,
            transform: t,
            information: 1.0,
            matchability: m,
            flag: None,
        }
    }

    /// Edges `x_j = R_ij x_i + t_ij` implied by world→part maps `w`.
    fn consistent(w: &[RigidTransform<f64>], pairs: &[(usize, usize)]) -> PoseGraph {
        PoseGraph {
            nodes: vec![10; w.len()],
            edges: pairs.iter().map(|&(i, j)| edge(i, j, w[j].compose(&w[i].inverse()), 1.0)).collect(),
        }
    }

    #[test]
    fn information_examples() {
        let z = AssignmentMatrix { log: Array2::zeros((3, 3)) };
        assert_eq!(information_matrix(&z)[0][0], 0.25);
        assert_eq!(information_matrix(&z)[0][1], 0.0);
        let one = AssignmentMatrix { log: Array2::zeros((2, 2)) };
        assert_eq!(information_scalar(&one), 1.0);
        let mut bigger = z.clone();
        bigger.log[[0, 0]] = 0.5;
        assert!(information_scalar(&bigger) < information_scalar(&z));
        let mut tiny = z.clone();
        tiny.log.fill(f64::NEG_INFINITY);
        assert!(information_scalar(&tiny).is_finite());
    }

    #[test]
    fn pruning_examples() {
        let id = RigidTransform::identity();
        let g = PoseGraph {
            nodes: vec![5; 4],
            edges: vec![edge(0, 1, id, 0.9), edge(0, 2, id, 0.5), edge(0, 3, id, 0.1), edge(1, 0, id, 0.3), edge(2, 3, id, 0.4), edge(2, 1, id, 0.4), edge(3, 0, id, 1.0)],
        };
        let p = prune_edges(&g).unwrap();
        let picks: Vec<(usize, usize)> = p.edges.iter().map(|e| (e.from, e.to)).collect();
        assert_eq!(picks, vec![(0, 1), (1, 0), (2, 1), (3, 0)]);
        let two = PoseGraph {
            nodes: vec![3, 3],
            edges: vec![edge(0, 1, id, 0.2), edge(1, 0, id, 0.7)],
        };
        assert_eq!(prune_edges(&two).unwrap().edges.len(), 2);
        let lonely = PoseGraph {
            nodes: vec![3, 3],
            edges: vec![edge(0, 1, id, 0.2)],
        };
        assert!(matches!(prune_edges(&lonely), Err(Error::IsolatedNode(1))));
    }

    #[test]
    fn two_node_chain() {
        let r = Rotation::rot_z(40f64.to_radians());
        let g = PoseGraph {
            nodes: vec![4, 4],
            edges: vec![edge(0, 1, RigidTransform::new(r, [0.1, 0.0, 0.0]), 1.0)],
        };
        let rots = rotation_average(&g, 0).unwrap();
        assert!(rots[1].angle_to(&r) < 1e-12);
        let g = PoseGraph {
            nodes: vec![4, 4],
            edges: vec![edge(0, 1, RigidTransform::new(Rotation::identity(), [0.1, 0.0, 0.0]), 1.0)],
        };
        let rots = rotation_average(&g, 0).unwrap();
        let t = solve_translations(&g, &rots, 0).unwrap();
        assert!((t[1][0] - 0.1).abs() < 1e-12 && t[1][1].abs() < 1e-12);
    }

    #[test]
    fn consistent_cycle_recovered() {
        let w: Vec<RigidTransform<f64>> = (0..3)
            .map(|k| {
                if k == 0 {
                    RigidTransform::identity()
                } else {
                    RigidTransform::new(random_rotation(k), [0.1 * k as f64, -0.2, 0.05])
                }
            })
            .collect();
        let g = consistent(&w, &[(0, 1), (1, 2), (2, 0)]);
        let rots = rotation_average(&g, 0).unwrap();
        let ts = solve_translations(&g, &rots, 0).unwrap();
        for k in 0..3 {
            assert!(rots[k].angle_to(&w[k].rotation) < 1e-6);
            assert!(ts[k].iter().zip(&w[k].translation).all(|(a, b)| (a - b).abs() < 1e-8));
        }
    }

    #[test]
    fn disconnected_graph_rejected() {
        let id = RigidTransform::identity();
        let g = PoseGraph {
            nodes: vec![1; 4],
            edges: vec![edge(0, 1, id, 1.0), edge(1, 0, id, 1.0), edge(2, 3, id, 1.0), edge(3, 2, id, 1.0)],
        };
        assert!(matches!(rotation_average(&g, 0), Err(Error::DisconnectedGraph)));
    }

    #[test]
    fn anchor_is_largest_then_lowest() {
        assert_eq!(anchor_part(&[3, 7, 7, 2]), 1);
        assert_eq!(anchor_part(&[5]), 0);
    }
}
