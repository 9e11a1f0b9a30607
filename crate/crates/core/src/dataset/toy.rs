//! Two-part toy plates split by a toothed interface curve.
//!
//! Patterns 1, 2 and 3 use square, triangular and semicircular teeth that
//! protrude from the lower part into the upper one. Patterns 4, 5 and 6 are
//! their occupancy-inverted twins: the same tooth family protrudes downward,
//! so the lower part carries notches where it used to carry teeth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mesh::{extrude, Point2, TriMesh};
use crate::error::{Error, Result};
use crate::geom::vec3::Vec3;

/// Geometry and sampling parameters of the toy generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyParams {
    pub width: f64,
    pub height: f64,
    /// Extrusion depth as a fraction of the width.
    pub depth_ratio: f64,
    pub teeth_min: usize,
    pub teeth_max: usize,
    /// Tooth height range as fractions of the plate height.
    pub tooth_height_min: f64,
    pub tooth_height_max: f64,
    /// Relative per-tooth jitter of width, height and position.
    pub jitter: f64,
    /// Vertices on each semicircular tooth arc.
    pub arc_segments: usize,
    pub point_budget: usize,
    pub tau: f64,
}

impl Default for ToyParams {
    fn default() -> Self {
        ToyParams {
            width: 1.0,
            height: 0.6,
            depth_ratio: 0.2,
            teeth_min: 4,
            teeth_max: 8,
            tooth_height_min: 0.05,
            tooth_height_max: 0.15,
            jitter: 0.1,
            arc_segments: 12,
            point_budget: 1024,
            tau: 0.018,
        }
    }
}

impl ToyParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.width > 0.0
            && self.height > 0.0
            && self.depth_ratio > 0.0
            && (1..=self.teeth_max).contains(&self.teeth_min)
            && 0.0 < self.tooth_height_min
            && self.tooth_height_min <= self.tooth_height_max
            && self.tooth_height_max * (1.0 + self.jitter) < 0.5
            && (0.0..0.5).contains(&self.jitter)
            && self.arc_segments >= 2
            && self.point_budget >= 100
            && self.tau > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid toy parameters: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToothShape {
    Square,
    Triangle,
    Semicircle,
}

/// One of the six ambiguity patterns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pattern {
    id: u8,
}

impl Pattern {
    pub const ALL: [u8; 6] = [1, 2, 3, 4, 5, 6];

    pub fn new(id: u8) -> Result<Self> {
        if (1..=6).contains(&id) {
            Ok(Pattern { id })
        } else {
            Err(Error::InvalidPattern(id))
        }
    }

    pub fn id(self) -> u8 {
        self.id
    }

    pub fn shape(self) -> ToothShape {
        match (self.id - 1) % 3 {
            0 => ToothShape::Square,
            1 => ToothShape::Triangle,
            _ => ToothShape::Semicircle,
        }
    }

    /// Teeth point downward (into the lower part).
    pub fn inverted(self) -> bool {
        self.id > 3
    }
}

/// The 2-D layout of a toy object before extrusion and normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyLayout {
    /// Interface polyline from `x = 0` to `x = width`.
    pub curve: Vec<Point2>,
    /// Counter-clockwise outlines of the lower and upper parts.
    pub polygons: [Vec<Point2>; 2],
    pub depth: f64,
}

/// Draws the interface curve and the two part outlines.
pub fn toy_layout<R: Rng + ?Sized>(pattern: Pattern, params: &ToyParams, rng: &mut R) -> ToyLayout {
    let (w, h) = (params.width, params.height);
    let y0 = 0.5 * h;
    let sign = if pattern.inverted() { -1.0 } else { 1.0 };
    let teeth = rng.random_range(params.teeth_min..=params.teeth_max);
    let tooth_h = h * rng.random_range(params.tooth_height_min..=params.tooth_height_max);
    let cell = w / teeth as f64;
    let j = params.jitter;
    let mut curve = vec![[0.0, y0]];
    for t in 0..teeth {
        let frac = 0.5 * (1.0 + j * rng.random_range(-1.0..=1.0));
        let th = tooth_h * (1.0 + j * rng.random_range(-1.0..=1.0));
        let half = 0.5 * frac * cell;
        let slack = 0.5 * cell - half;
        let mid = (t as f64 + 0.5) * cell + j * slack * rng.random_range(-1.0..=1.0);
        let (xa, xb) = (mid - half, mid + half);
        let top = y0 + sign * th;
        curve.push([xa, y0]);
        match pattern.shape() {
            ToothShape::Square => curve.extend([[xa, top], [xb, top]]),
            ToothShape::Triangle => curve.push([mid, top]),
            ToothShape::Semicircle => {
                let n = params.arc_segments;
                curve.extend((1..n).map(|k| {
                    let a = std::f64::consts::PI * k as f64 / n as f64;
                    [mid - half * a.cos(), y0 + sign * th * a.sin()]
                }));
            }
        }
        curve.push([xb, y0]);
    }
    curve.push([w, y0]);
    let mut lower = vec![[0.0, 0.0], [w, 0.0]];
    lower.extend(curve.iter().rev().copied());
    let mut upper = curve.clone();
    upper.extend([[w, h], [0.0, h]]);
    ToyLayout {
        curve,
        polygons: [lower, upper],
        depth: params.depth_ratio * w,
    }
}

/// Normalization that maps the assembled object to unit diameter, centred
/// on its bounding-box centre.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub center: Vec3<f64>,
    pub scale: f64,
}

impl Normalization {
    pub fn apply(&self, v: Vec3<f64>) -> Vec3<f64> {
        std::array::from_fn(|k| (v[k] - self.center[k]) * self.scale)
    }

    pub fn of_vertices(vs: &[Vec3<f64>]) -> Result<Self> {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for v in vs {
            for k in 0..3 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
        }
        let mut diam_sq = 0.0f64;
        for (i, a) in vs.iter().enumerate() {
            for b in &vs[i + 1..] {
                diam_sq = diam_sq.max(crate::geom::vec3::dist_sq(*a, *b));
            }
        }
        if !(diam_sq > 0.0) {
            return Err(Error::DegenerateMesh("object has zero extent".into()));
        }
        Ok(Normalization {
            center: std::array::from_fn(|k| 0.5 * (lo[k] + hi[k])),
            scale: 1.0 / diam_sq.sqrt(),
        })
    }
}

/// Extruded, normalized meshes of both parts in assembled position.
pub fn toy_meshes(layout: &ToyLayout) -> Result<([TriMesh; 2], Normalization)> {
    // The lower outline starts with two plate corners, then the reversed curve;
    // the upper one starts with the curve. Edges along the curve are fracture.
    let nc = layout.curve.len();
    let lower = extrude(&layout.polygons[0], layout.depth, |k| (2..nc + 1).contains(&k))?;
    let upper = extrude(&layout.polygons[1], layout.depth, |k| k + 1 < nc)?;
    let all: Vec<Vec3<f64>> = lower.vertices.iter().chain(&upper.vertices).copied().collect();
    let norm = Normalization::of_vertices(&all)?;
    let mut meshes = [lower, upper];
    for m in &mut meshes {
        m.map_vertices(|v| norm.apply(v));
    }
    Ok((meshes, norm))
}

/// Deterministic generator state for one object.
pub(crate) fn object_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::mesh::{signed_area2, triangulate};

    #[test]
    fn pattern_ids() {
        assert_eq!(Pattern::ALL.len(), 6);
        assert!(Pattern::new(0).is_err());
        assert!(matches!(Pattern::new(7), Err(Error::InvalidPattern(7))));
        assert_eq!(Pattern::new(5).unwrap().shape(), ToothShape::Triangle);
        assert!(Pattern::new(4).unwrap().inverted());
    }

    #[test]
    fn outlines_tile_the_plate() {
        let params = ToyParams::default();
        for id in Pattern::ALL {
            let mut rng = object_rng(id as u64);
            let l = toy_layout(Pattern::new(id).unwrap(), &params, &mut rng);
            let a0 = signed_area2(&l.polygons[0]) / 2.0;
            let a1 = signed_area2(&l.polygons[1]) / 2.0;
            assert!(a0 > 0.0 && a1 > 0.0);
            assert!((a0 + a1 - params.width * params.height).abs() < 1e-12);
            assert!(triangulate(&l.polygons[0]).is_ok() && triangulate(&l.polygons[1]).is_ok());
            let lower_is_bigger = a0 > 0.5 * params.width * params.height;
            assert_eq!(lower_is_bigger, id <= 3);
        }
    }

    #[test]
    fn fracture_faces_coincide() {
        let params = ToyParams::default();
        let mut rng = object_rng(3);
        let l = toy_layout(Pattern::new(3).unwrap(), &params, &mut rng);
        let ([lo, up], norm) = toy_meshes(&l).unwrap();
        let area = |m: &TriMesh| -> f64 {
            (0..m.triangles.len()).filter(|&t| m.fracture[t]).map(|t| m.triangle_area(t)).sum()
        };
        assert!((area(&lo) - area(&up)).abs() < 1e-12);
        assert!(area(&lo) > 0.0);
        let diag = (params.width.powi(2) + params.height.powi(2) + (params.depth_ratio * params.width).powi(2)).sqrt();
        assert!((norm.scale - 1.0 / diag).abs() < 1e-12);
    }
}
