//! Polygon geometry and score-map post-processing.
//!
//! Coordinates are image pixels with `x` to the right and `y` down; a pixel
//! `(x, y)` covers `[x, x+1] × [y, y+1]`. Orientation is measured with the
//! plain shoelace sum on raw coordinates, so "counter-clockwise" (positive
//! signed area) looks clockwise on screen, which is the usual annotation
//! order `tl, tr, br, bl`.

mod iou;
mod offset;
mod raster;
mod reference;

pub use iou::polygon_iou;
pub use offset::{dilation_offset, offset_polygon, MITER_LIMIT};
pub use raster::{binarize, component_to_polygon, connected_components, fill_polygon, Component, Mask};
pub use reference::{
    centroid, cross_section_center, inner_reference, normalize_point, perturb_reference, perturb_with, reference_corners, shift_reference,
    PointMode,
};

use crate::error::{DeerError, Result};

pub type Point = [f64; 2];

/// Closed polygon with positive signed area (degenerate zero-area inputs are
/// representable so that they can be measured).
#[derive(Clone, Debug, PartialEq)]
pub struct Polygon {
    pts: Vec<Point>,
}

impl Polygon {
    /// Validates and orients `pts`. When the orientation has to be flipped
    /// the first vertex is kept first.
    pub fn new(mut pts: Vec<Point>) -> Result<Self> {
        if pts.len() < 3 {
            return Err(DeerError::Degenerate(format!("polygon needs 3 vertices, got {}", pts.len())));
        }
        if pts.iter().flatten().any(|v| !v.is_finite()) {
            return Err(DeerError::Input("polygon has a non-finite coordinate".into()));
        }
        if signed_area(&pts) < 0.0 {
            pts[1..].reverse();
        }
        Ok(Self { pts })
    }

    /// Parses `x1,y1,...,xn,yn`.
    pub fn from_flat(coords: &[f64]) -> Result<Self> {
        if coords.len() % 2 != 0 {
            return Err(DeerError::Input(format!("odd number of polygon coordinates ({})", coords.len())));
        }
        Self::new(coords.chunks(2).map(|c| [c[0], c[1]]).collect())
    }

    pub fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        Self::new(vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1]])
    }

    pub fn vertices(&self) -> &[Point] {
        &self.pts
    }

    pub fn len(&self) -> usize {
        self.pts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pts.is_empty()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.pts.iter().flatten().copied().collect()
    }

    pub fn area(&self) -> f64 {
        signed_area(&self.pts)
    }

    pub fn perimeter(&self) -> f64 {
        self.edges().map(|(a, b)| dist(a, b)).sum()
    }

    /// Directed edges `(p_i, p_{i+1})`, closing back to the first vertex.
    pub fn edges(&self) -> impl Iterator<Item = (Point, Point)> + '_ {
        let n = self.pts.len();
        (0..n).map(move |i| (self.pts[i], self.pts[(i + 1) % n]))
    }

    /// `(min_x, min_y, max_x, max_y)`.
    pub fn bbox(&self) -> [f64; 4] {
        self.pts.iter().fold(
            [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY],
            |b, p| [b[0].min(p[0]), b[1].min(p[1]), b[2].max(p[0]), b[3].max(p[1])],
        )
    }

    /// Even-odd point-in-polygon test.
    pub fn contains(&self, p: Point) -> bool {
        let mut inside = false;
        for (a, b) in self.edges() {
            if (a[1] > p[1]) != (b[1] > p[1]) {
                let x = a[0] + (p[1] - a[1]) / (b[1] - a[1]) * (b[0] - a[0]);
                if p[0] < x {
                    inside = !inside;
                }
            }
        }
        inside
    }

    /// Distance from `p` to the nearest edge.
    pub fn boundary_distance(&self, p: Point) -> f64 {
        self.edges().map(|(a, b)| segment_distance(p, a, b)).fold(f64::INFINITY, f64::min)
    }

    pub fn map(&self, f: impl Fn(Point) -> Point) -> Result<Self> {
        Self::new(self.pts.iter().map(|&p| f(p)).collect())
    }

    pub fn translate(&self, v: Point) -> Result<Self> {
        self.map(|p| [p[0] + v[0], p[1] + v[1]])
    }

    pub fn scale(&self, sx: f64, sy: f64) -> Result<Self> {
        self.map(|p| [p[0] * sx, p[1] * sy])
    }

    /// True when no two non-adjacent edges touch and adjacent edges meet
    /// only at their shared vertex.
    pub fn is_simple(&self) -> bool {
        let n = self.pts.len();
        let e: Vec<(Point, Point)> = self.edges().collect();
        for i in 0..n {
            if dist(e[i].0, e[i].1) == 0.0 {
                return false;
            }
            for j in i + 1..n {
                let adjacent = j == i + 1 || (i == 0 && j == n - 1);
                if adjacent {
                    // adjacent edges must not fold back onto each other
                    let (a, b) = if j == i + 1 { (e[i], e[j]) } else { (e[j], e[i]) };
                    let d1 = sub(a.1, a.0);
                    let d2 = sub(b.1, b.0);
                    if cross(d1, d2) == 0.0 && dot(d1, d2) < 0.0 {
                        return false;
                    }
                } else if segments_intersect(e[i].0, e[i].1, e[j].0, e[j].1) {
                    return false;
                }
            }
        }
        true
    }

    /// Removes repeated vertices and vertices lying on the line through
    /// their neighbours.
    pub fn remove_collinear(&self) -> Result<Self> {
        Self::new(drop_collinear(&self.pts))
    }

    /// Douglas–Peucker simplification of the closed outline with tolerance
    /// `eps` pixels. Returns the input when simplification would leave fewer
    /// than three vertices.
    pub fn simplify(&self, eps: f64) -> Self {
        let n = self.pts.len();
        if n <= 4 || eps <= 0.0 {
            return self.clone();
        }
        // split at the vertex farthest from the first one
        let far = (1..n)
            .max_by(|&a, &b| dist(self.pts[0], self.pts[a]).total_cmp(&dist(self.pts[0], self.pts[b])))
            .unwrap_or(1);
        let mut keep = vec![false; n];
        keep[0] = true;
        keep[far] = true;
        let ring: Vec<Point> = self.pts.iter().chain(std::iter::once(&self.pts[0])).copied().collect();
        dp(&ring, 0, far, eps, &mut keep);
        dp(&ring, far, n, eps, &mut keep);
        let pts: Vec<Point> = (0..n).filter(|&i| keep[i]).map(|i| self.pts[i]).collect();
        match Self::new(pts) {
            Ok(p) if p.area() > 0.0 && p.is_simple() => p,
            _ => self.clone(),
        }
    }

    /// Convex hull (monotone chain), positively oriented.
    pub fn convex_hull(&self) -> Result<Self> {
        Self::new(convex_hull(&self.pts))
    }
}

fn dp(ring: &[Point], a: usize, b: usize, eps: f64, keep: &mut [bool]) {
    if b <= a + 1 {
        return;
    }
    let (mut best, mut idx) = (0.0, a);
    for i in a + 1..b {
        let d = segment_distance(ring[i], ring[a], ring[b]);
        if d > best {
            best = d;
            idx = i;
        }
    }
    if best > eps {
        keep[idx] = true;
        dp(ring, a, idx, eps, keep);
        dp(ring, idx, b, eps, keep);
    }
}

pub(crate) fn drop_collinear(pts: &[Point]) -> Vec<Point> {
    let mut out: Vec<Point> = Vec::with_capacity(pts.len());
    for &p in pts {
        if out.last() != Some(&p) {
            out.push(p);
        }
    }
    while out.len() > 1 && out.first() == out.last() {
        out.pop();
    }
    let mut changed = true;
    while changed && out.len() > 3 {
        changed = false;
        let n = out.len();
        for i in 0..n {
            let (a, b, c) = (out[(i + n - 1) % n], out[i], out[(i + 1) % n]);
            if cross(sub(b, a), sub(c, b)).abs() <= 1e-12 * (1.0 + dist(a, b) * dist(b, c)) {
                out.remove(i);
                changed = true;
                break;
            }
        }
    }
    out
}

pub(crate) fn convex_hull(pts: &[Point]) -> Vec<Point> {
    let mut p = pts.to_vec();
    p.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    p.dedup();
    if p.len() < 3 {
        return p;
    }
    let mut lower: Vec<Point> = Vec::new();
    for &q in &p {
        while lower.len() >= 2 && cross(sub(lower[lower.len() - 1], lower[lower.len() - 2]), sub(q, lower[lower.len() - 1])) <= 0.0 {
            lower.pop();
        }
        lower.push(q);
    }
    let mut upper: Vec<Point> = Vec::new();
    for &q in p.iter().rev() {
        while upper.len() >= 2 && cross(sub(upper[upper.len() - 1], upper[upper.len() - 2]), sub(q, upper[upper.len() - 1])) <= 0.0 {
            upper.pop();
        }
        upper.push(q);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

pub(crate) fn signed_area(pts: &[Point]) -> f64 {
    let n = pts.len();
    0.5 * (0..n)
        .map(|i| {
            let (a, b) = (pts[i], pts[(i + 1) % n]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum::<f64>()
}

pub(crate) fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}

pub(crate) fn cross(a: Point, b: Point) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

pub(crate) fn dot(a: Point, b: Point) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

pub(crate) fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

pub(crate) fn segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let ab = sub(b, a);
    let len2 = dot(ab, ab);
    let t = if len2 == 0.0 { 0.0 } else { (dot(sub(p, a), ab) / len2).clamp(0.0, 1.0) };
    dist(p, [a[0] + t * ab[0], a[1] + t * ab[1]])
}

fn on_segment(p: Point, a: Point, b: Point) -> bool {
    p[0] >= a[0].min(b[0]) && p[0] <= a[0].max(b[0]) && p[1] >= a[1].min(b[1]) && p[1] <= a[1].max(b[1])
}

/// Closed-segment intersection test (touching counts).
pub(crate) fn segments_intersect(a: Point, b: Point, c: Point, d: Point) -> bool {
    let d1 = cross(sub(b, a), sub(c, a));
    let d2 = cross(sub(b, a), sub(d, a));
    let d3 = cross(sub(d, c), sub(a, c));
    let d4 = cross(sub(d, c), sub(b, c));
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    (d1 == 0.0 && on_segment(c, a, b))
        || (d2 == 0.0 && on_segment(d, a, b))
        || (d3 == 0.0 && on_segment(a, c, d))
        || (d4 == 0.0 && on_segment(b, c, d))
}
