use super::{cross, dot, sub, Point, Polygon};
use crate::error::{DeerError, Result};

/// Miter joins longer than this multiple of the offset distance are
/// bevelled.
pub const MITER_LIMIT: f64 = 2.0;

/// Offset distance `A * r / L` for a region of area `A` and perimeter `L`.
pub fn dilation_offset(poly: &Polygon, r: f64) -> Result<f64> {
    let l = poly.perimeter();
    if l <= 0.0 {
        return Err(DeerError::Degenerate("polygon has zero perimeter".into()));
    }
    Ok(poly.area() * r / l)
}

/// Moves every edge by `d` along its outward normal (inward for negative
/// `d`) and rejoins neighbours with miter joins, bevelling outer joins that
/// exceed [`MITER_LIMIT`]. Fails when the result is not a simple,
/// positively oriented polygon, or when shrinking flips an edge (the
/// polygon collapsed).
pub fn offset_polygon(poly: &Polygon, d: f64) -> Result<Polygon> {
    if !d.is_finite() {
        return Err(DeerError::Input(format!("offset distance {d} is not finite")));
    }
    let src = poly.remove_collinear()?;
    let pts = src.vertices();
    let n = pts.len();
    if d == 0.0 {
        return Ok(src);
    }
    let normal = |a: Point, b: Point| {
        let e = sub(b, a);
        let len = e[0].hypot(e[1]);
        [e[1] / len, -e[0] / len]
    };
    let mut out: Vec<Point> = Vec::with_capacity(n + 4);
    // which output vertices each source edge starts and ends at
    let mut edge_ends: Vec<(usize, usize)> = vec![(0, 0); n];
    for i in 0..n {
        let prev = pts[(i + n - 1) % n];
        let p = pts[i];
        let next = pts[(i + 1) % n];
        let n1 = normal(prev, p);
        let n2 = normal(p, next);
        let denom = 1.0 + dot(n1, n2);
        let outer = cross(sub(p, prev), sub(next, p)) * d > 0.0;
        let miter_ok = denom > 1e-12 && {
            let m = [n1[0] + n2[0], n1[1] + n2[1]];
            m[0].hypot(m[1]) / denom <= MITER_LIMIT
        };
        let first = out.len();
        if miter_ok || (!outer && denom > 1e-12) {
            let k = d / denom;
            out.push([p[0] + k * (n1[0] + n2[0]), p[1] + k * (n1[1] + n2[1])]);
        } else {
            out.push([p[0] + d * n1[0], p[1] + d * n1[1]]);
            out.push([p[0] + d * n2[0], p[1] + d * n2[1]]);
        }
        edge_ends[(i + n - 1) % n].1 = first;
        edge_ends[i].0 = out.len() - 1;
    }
    for (i, &(s, e)) in edge_ends.iter().enumerate() {
        let orig = sub(pts[(i + 1) % n], pts[i]);
        let moved = sub(out[e], out[s]);
        if dot(orig, moved) <= 0.0 {
            return Err(DeerError::Degenerate(format!("offset by {d} collapses the polygon")));
        }
    }
    let res = Polygon::new(out.clone())?;
    if super::signed_area(&out) <= 0.0 || !res.is_simple() {
        return Err(DeerError::Degenerate(format!("offset by {d} does not yield a simple polygon")));
    }
    Ok(res)
}
