use rand::Rng;

use super::{convex_hull, cross, dist, dot, sub, Point, Polygon};
use crate::error::{DeerError, Result};

/// How an instance's reference point is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PointMode {
    /// Area centroid of the polygon.
    Center,
    /// Random interior point when training, centre of the vertical cross
    /// section when inferring.
    Inner,
}

impl std::str::FromStr for PointMode {
    type Err = DeerError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "center" => Ok(PointMode::Center),
            "inner" => Ok(PointMode::Inner),
            _ => Err(DeerError::Config(format!("point mode must be `center` or `inner`, got `{s}`"))),
        }
    }
}

impl std::fmt::Display for PointMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PointMode::Center => "center",
            PointMode::Inner => "inner",
        })
    }
}

/// Area-weighted centroid in pixels.
pub fn centroid(poly: &Polygon) -> Result<Point> {
    let a = poly.area();
    if a.abs() < 1e-12 {
        return Err(DeerError::Degenerate("centroid of a zero-area polygon".into()));
    }
    let (mut cx, mut cy) = (0.0, 0.0);
    for (p, q) in poly.edges() {
        let c = p[0] * q[1] - q[0] * p[1];
        cx += (p[0] + q[0]) * c;
        cy += (p[1] + q[1]) * c;
    }
    Ok([cx / (6.0 * a), cy / (6.0 * a)])
}

/// Pixel point to normalised `[0, 1]²` image coordinates.
pub fn normalize_point(p: Point, w: usize, h: usize) -> Point {
    [p[0] / w as f64, p[1] / h as f64]
}

/// `(top-left, top-right, bottom-left)` corners. Quadrilaterals use their
/// vertex order; other polygons use the minimum-area enclosing rectangle,
/// whose top-left is the corner nearest the first vertex.
pub fn reference_corners(poly: &Polygon) -> Result<(Point, Point, Point)> {
    let v = poly.vertices();
    if v.len() == 4 {
        return Ok((v[0], v[1], v[3]));
    }
    let rect = min_area_rect(v)?;
    let tl = (0..4)
        .min_by(|&a, &b| dist(rect[a], v[0]).total_cmp(&dist(rect[b], v[0])))
        .expect("four corners");
    Ok((rect[tl], rect[(tl + 1) % 4], rect[(tl + 3) % 4]))
}

/// Corners of the minimum-area rectangle enclosing `pts`, positively
/// oriented.
fn min_area_rect(pts: &[Point]) -> Result<[Point; 4]> {
    let hull = convex_hull(pts);
    if hull.len() < 3 {
        return Err(DeerError::Degenerate("points are collinear".into()));
    }
    let mut best: Option<(f64, [Point; 4])> = None;
    for i in 0..hull.len() {
        let e = sub(hull[(i + 1) % hull.len()], hull[i]);
        let len = e[0].hypot(e[1]);
        if len == 0.0 {
            continue;
        }
        let u = [e[0] / len, e[1] / len];
        let w = [-u[1], u[0]];
        let (mut a0, mut a1, mut b0, mut b1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for &p in &hull {
            let (a, b) = (dot(p, u), dot(p, w));
            a0 = a0.min(a);
            a1 = a1.max(a);
            b0 = b0.min(b);
            b1 = b1.max(b);
        }
        let area = (a1 - a0) * (b1 - b0);
        if best.as_ref().is_none_or(|(ba, _)| area < *ba - 1e-12) {
            let at = |a: f64, b: f64| [a * u[0] + b * w[0], a * u[1] + b * w[1]];
            best = Some((area, [at(a0, b0), at(a1, b0), at(a1, b1), at(a0, b1)]));
        }
    }
    let (_, mut r) = best.ok_or_else(|| DeerError::Degenerate("no hull edge".into()))?;
    if cross(sub(r[1], r[0]), sub(r[2], r[1])) < 0.0 {
        r[1..].reverse();
    }
    Ok(r)
}

/// `p_c + (eta_x s / 2, eta_y s / 2)` with `s` the shorter side length
/// through the top-left corner.
pub fn perturb_with(poly: &Polygon, eta: [f64; 2]) -> Result<Point> {
    let c = centroid(poly)?;
    let (tl, tr, bl) = reference_corners(poly)?;
    let s = dist(tl, tr).min(dist(tl, bl));
    if s <= 0.0 {
        return Err(DeerError::Degenerate("polygon has a zero-length side".into()));
    }
    Ok([c[0] + eta[0] * s / 2.0, c[1] + eta[1] * s / 2.0])
}

/// [`perturb_with`] with each `eta` coordinate drawn independently from
/// `Uniform(-1, 1)`.
pub fn perturb_reference<R: Rng>(poly: &Polygon, rng: &mut R) -> Result<Point> {
    let eta = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
    perturb_with(poly, eta)
}

/// `(1 - beta) p + beta tl`.
pub fn shift_reference(p: Point, tl: Point, beta: f64) -> Result<Point> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(DeerError::Config(format!("beta {beta} outside [0, 1]")));
    }
    Ok([(1.0 - beta) * p[0] + beta * tl[0], (1.0 - beta) * p[1] + beta * tl[1]])
}

const INNER_TRIES: usize = 1000;

/// Interior reference point. Training draws a uniform point inside the
/// polygon by rejection from its bounding box (falling back to the
/// centroid); inference takes the midpoint of the longest segment cut by the
/// vertical line through the bounding-box centre.
pub fn inner_reference<R: Rng>(poly: &Polygon, train: bool, rng: &mut R) -> Result<Point> {
    let [x0, y0, x1, y1] = poly.bbox();
    if train {
        for _ in 0..INNER_TRIES {
            let p = [rng.random_range(x0..=x1), rng.random_range(y0..=y1)];
            if poly.contains(p) {
                return Ok(p);
            }
        }
        return centroid(poly);
    }
    Ok(cross_section_center(poly))
}

/// Midpoint of the longest segment the vertical line through the
/// bounding-box centre cuts from `poly` (the centroid if there is none).
pub fn cross_section_center(poly: &Polygon) -> Point {
    let [x0, _, x1, _] = poly.bbox();
    let x = 0.5 * (x0 + x1);
    let mut ys: Vec<f64> = poly
        .edges()
        .filter(|(a, b)| (a[0] > x) != (b[0] > x))
        .map(|(a, b)| a[1] + (x - a[0]) / (b[0] - a[0]) * (b[1] - a[1]))
        .collect();
    ys.sort_by(f64::total_cmp);
    let best = ys
        .chunks_exact(2)
        .max_by(|p, q| (p[1] - p[0]).total_cmp(&(q[1] - q[0])));
    match best {
        Some(seg) if seg[1] > seg[0] => [x, 0.5 * (seg[0] + seg[1])],
        _ => centroid(poly).unwrap_or([x, 0.5 * (poly.bbox()[1] + poly.bbox()[3])]),
    }
}
