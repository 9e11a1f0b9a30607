//! Triangle meshes from extruded polygons and area-weighted surface sampling.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::error::{Error, Result};
use crate::geom::vec3::{self, Vec3};

pub type Point2 = [f64; 2];

/// Triangle soup with a per-triangle fracture-surface flag.
#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Vec3<f64>>,
    pub triangles: Vec<[usize; 3]>,
    pub fracture: Vec<bool>,
}

impl TriMesh {
    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t].map(|i| self.vertices[i]);
        0.5 * vec3::norm(vec3::cross(vec3::sub(b, a), vec3::sub(c, a)))
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    /// Applies `f` to every vertex.
    pub fn map_vertices(&mut self, f: impl Fn(Vec3<f64>) -> Vec3<f64>) {
        for v in &mut self.vertices {
            *v = f(*v);
        }
    }

    /// `n` points uniformly distributed over the surface, each tagged with
    /// whether it lies on a fracture triangle.
    pub fn sample_surface<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<(Vec<Vec3<f64>>, Vec<bool>)> {
        let areas: Vec<f64> = (0..self.triangles.len()).map(|t| self.triangle_area(t)).collect();
        let dist = WeightedIndex::new(&areas).map_err(|_| Error::DegenerateMesh("mesh has zero area".into()))?;
        let mut points = Vec::with_capacity(n);
        let mut flags = Vec::with_capacity(n);
        for _ in 0..n {
            let t = dist.sample(rng);
            let [a, b, c] = self.triangles[t].map(|i| self.vertices[i]);
            let (r1, r2): (f64, f64) = (rng.random(), rng.random());
            let s = r1.sqrt();
            let (wa, wb, wc) = (1.0 - s, s * (1.0 - r2), s * r2);
            points.push(std::array::from_fn(|k| wa * a[k] + wb * b[k] + wc * c[k]));
            flags.push(self.fracture[t]);
        }
        Ok((points, flags))
    }
}

/// Twice the signed area; positive for counter-clockwise polygons.
pub fn signed_area2(poly: &[Point2]) -> f64 {
    (0..poly.len())
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum()
}

fn cross2(o: Point2, a: Point2, b: Point2) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn in_triangle(p: Point2, a: Point2, b: Point2, c: Point2) -> bool {
    cross2(a, b, p) >= 0.0 && cross2(b, c, p) >= 0.0 && cross2(c, a, p) >= 0.0
}

/// Ear-clipping triangulation of a simple counter-clockwise polygon.
pub fn triangulate(poly: &[Point2]) -> Result<Vec<[usize; 3]>> {
    if poly.len() < 3 || !(signed_area2(poly) > 0.0) {
        return Err(Error::DegenerateMesh("polygon must be counter-clockwise with ≥ 3 vertices".into()));
    }
    let mut idx: Vec<usize> = (0..poly.len()).collect();
    let mut out = Vec::with_capacity(poly.len() - 2);
    while idx.len() > 3 {
        let n = idx.len();
        let ear = (0..n).find(|&k| {
            let (ia, ib, ic) = (idx[(k + n - 1) % n], idx[k], idx[(k + 1) % n]);
            let (a, b, c) = (poly[ia], poly[ib], poly[ic]);
            if cross2(a, b, c) < 0.0 {
                return false;
            }
            idx.iter()
                .filter(|&&j| j != ia && j != ib && j != ic)
                .all(|&j| poly[j] == a || poly[j] == b || poly[j] == c || !in_triangle(poly[j], a, b, c))
        });
        let Some(k) = ear else {
            return Err(Error::DegenerateMesh("polygon is not simple".into()));
        };
        let n = idx.len();
        let tri = [idx[(k + n - 1) % n], idx[k], idx[(k + 1) % n]];
        if cross2(poly[tri[0]], poly[tri[1]], poly[tri[2]]) > 0.0 {
            out.push(tri);
        }
        idx.remove(k);
    }
    out.push([idx[0], idx[1], idx[2]]);
    Ok(out)
}

/// Closed prism over `poly` spanning `z ∈ [0, depth]`. Side walls built on
/// edges with `fracture_edge(k)` (edge from vertex `k` to `k+1`) are flagged.
pub fn extrude(poly: &[Point2], depth: f64, fracture_edge: impl Fn(usize) -> bool) -> Result<TriMesh> {
    let caps = triangulate(poly)?;
    let n = poly.len();
    let mut vertices: Vec<Vec3<f64>> = poly.iter().map(|p| [p[0], p[1], 0.0]).collect();
    vertices.extend(poly.iter().map(|p| [p[0], p[1], depth]));
    let mut triangles = Vec::with_capacity(2 * caps.len() + 2 * n);
    let mut fracture = Vec::with_capacity(triangles.capacity());
    for t in &caps {
        triangles.push([t[0], t[2], t[1]]);
        triangles.push([t[0] + n, t[1] + n, t[2] + n]);
        fracture.extend([false, false]);
    }
    for k in 0..n {
        let k1 = (k + 1) % n;
        triangles.push([k, k1, k1 + n]);
        triangles.push([k, k1 + n, k + n]);
        let f = fracture_edge(k);
        fracture.extend([f, f]);
    }
    Ok(TriMesh {
        vertices,
        triangles,
        fracture,
    })
}

/// Splits `budget` proportionally to `weights` by largest remainder; ties in
/// the remainder go to the lower index.
pub fn allocate_budget(weights: &[f64], budget: usize) -> Result<Vec<usize>> {
    let total: f64 = weights.iter().sum();
    if weights.is_empty() || !(total > 0.0) || weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::DegenerateMesh("zero total area".into()));
    }
    let exact: Vec<f64> = weights.iter().map(|w| w / total * budget as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let left = budget - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(left) {
        counts[i] += 1;
    }
    Ok(counts)
}

/// Even-odd point-in-polygon test.
pub fn point_in_polygon(p: Point2, poly: &[Point2]) -> bool {
    let mut inside = false;
    let n = poly.len();
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) / (b[1] - a[1]) * (b[0] - a[0]);
            if p[0] < x {
                inside = !inside;
            }
        }
    }
    inside
}

/// Distance from `p` to the polygon boundary.
pub fn boundary_distance(p: Point2, poly: &[Point2]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            let ab = [b[0] - a[0], b[1] - a[1]];
            let len2 = ab[0] * ab[0] + ab[1] * ab[1];
            let t = if len2 > 0.0 {
                (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let d = [p[0] - a[0] - t * ab[0], p[1] - a[1] - t * ab[1]];
            (d[0] * d[0] + d[1] * d[1]).sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}
