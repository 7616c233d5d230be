use std::collections::HashMap;

use super::{drop_collinear, sub, Point, Polygon};
use crate::error::{DeerError, Result};

/// Row-major boolean map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn new(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            bits: vec![false; h * w],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.w + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.w + x] = v;
    }

    /// Like [`get`](Self::get) but `false` outside the map.
    pub fn at(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.w && (y as usize) < self.h && self.get(x as usize, y as usize)
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// `true` where `probability > t`.
pub fn binarize(probability: &[f64], h: usize, w: usize, t: f64) -> Result<Mask> {
    if probability.len() != h * w {
        return Err(DeerError::Input(format!("map of {} values is not {h}x{w}", probability.len())));
    }
    Ok(Mask {
        h,
        w,
        bits: probability.iter().map(|&p| p > t).collect(),
    })
}

/// Pixel set `(x, y)` of one connected component, in raster order.
pub type Component = Vec<(usize, usize)>;

/// 8-connected components, ordered by `(min y, min x)` of each component
/// and then by the raster position of its first pixel.
pub fn connected_components(mask: &Mask) -> Vec<Component> {
    let (h, w) = (mask.h, mask.w);
    let mut label = vec![usize::MAX; h * w];
    let mut comps: Vec<Component> = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !mask.bits[start] || label[start] != usize::MAX {
            continue;
        }
        let id = comps.len();
        label[start] = id;
        stack.push(start);
        let mut pix = Vec::new();
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            pix.push((x, y));
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if mask.at(nx, ny) {
                        let j = ny as usize * w + nx as usize;
                        if label[j] == usize::MAX {
                            label[j] = id;
                            stack.push(j);
                        }
                    }
                }
            }
        }
        pix.sort_by_key(|&(x, y)| (y, x));
        comps.push(pix);
    }
    comps.sort_by_key(|c| {
        let min_y = c.iter().map(|p| p.1).min().unwrap_or(0);
        let min_x = c.iter().map(|p| p.0).min().unwrap_or(0);
        (min_y, min_x, c[0].1, c[0].0)
    });
    comps
}

/// Components smaller than this cannot form a region polygon.
const MIN_COMPONENT_PIXELS: usize = 3;
/// How far pinch vertices are pulled apart, in pixels.
const PINCH_CUT: f64 = 0.25;

/// Outer outline of a pixel region, traced along pixel edges, with collinear
/// vertices removed. Holes are ignored. Where the region is joined only
/// diagonally the outline is cut slightly across the outside corner so the
/// result stays simple.
pub fn component_to_polygon(component: &[(usize, usize)]) -> Result<Polygon> {
    if component.len() < MIN_COMPONENT_PIXELS {
        return Err(DeerError::Degenerate(format!(
            "region of {} pixels is below the minimum of {MIN_COMPONENT_PIXELS}",
            component.len()
        )));
    }
    let set: std::collections::HashSet<(i64, i64)> = component.iter().map(|&(x, y)| (x as i64, y as i64)).collect();
    let inside = |x: i64, y: i64| set.contains(&(x, y));
    // directed boundary edges with the region on the left
    let mut out: HashMap<(i64, i64), Vec<(i64, i64)>> = HashMap::new();
    let mut add = |a: (i64, i64), b: (i64, i64)| out.entry(a).or_default().push(b);
    for &(x, y) in &set {
        if !inside(x, y - 1) {
            add((x, y), (x + 1, y));
        }
        if !inside(x + 1, y) {
            add((x + 1, y), (x + 1, y + 1));
        }
        if !inside(x, y + 1) {
            add((x + 1, y + 1), (x, y + 1));
        }
        if !inside(x - 1, y) {
            add((x, y + 1), (x, y));
        }
    }
    // the top edge of the first raster pixel is on the outer boundary
    let &(sx, sy) = set.iter().min_by_key(|&&(x, y)| (y, x)).expect("non-empty component");
    let start = (sx, sy);
    let mut ring = vec![start];
    let mut prev = start;
    let mut cur = (sx + 1, sy);
    let limit = 4 * set.len() + 4;
    while cur != start {
        ring.push(cur);
        if ring.len() > limit {
            return Err(DeerError::Degenerate("outline tracing did not close".into()));
        }
        let next = out.get(&cur).ok_or_else(|| DeerError::Degenerate("open outline".into()))?;
        let din = (cur.0 - prev.0, cur.1 - prev.1);
        let chosen = if next.len() == 1 {
            next[0]
        } else {
            // at a diagonal pinch take the right turn, keeping the two
            // diagonal pixels in one outline
            *next
                .iter()
                .min_by_key(|n| {
                    let d = (n.0 - cur.0, n.1 - cur.1);
                    din.0 * d.1 - din.1 * d.0
                })
                .expect("two candidates")
        };
        prev = cur;
        cur = chosen;
    }
    let pts: Vec<Point> = ring.iter().map(|&(x, y)| [x as f64, y as f64]).collect();
    let pts = drop_collinear(&pts);
    let pts = cut_pinches(&pts);
    let poly = Polygon::new(pts)?;
    if poly.area() <= 0.0 {
        return Err(DeerError::Degenerate("region outline has no area".into()));
    }
    Ok(poly)
}

fn cut_pinches(pts: &[Point]) -> Vec<Point> {
    let n = pts.len();
    let mut out = Vec::with_capacity(n + 4);
    for i in 0..n {
        let p = pts[i];
        let repeated = pts.iter().enumerate().any(|(j, q)| j != i && *q == p);
        if !repeated {
            out.push(p);
            continue;
        }
        let toward = |q: Point| {
            let d = sub(q, p);
            let len = d[0].hypot(d[1]);
            [p[0] + PINCH_CUT * d[0] / len, p[1] + PINCH_CUT * d[1] / len]
        };
        out.push(toward(pts[(i + n - 1) % n]));
        out.push(toward(pts[(i + 1) % n]));
    }
    out
}

/// Pixels whose centre lies inside `poly`.
pub fn fill_polygon(poly: &Polygon, h: usize, w: usize) -> Mask {
    let mut m = Mask::new(h, w);
    let [_, y0, _, y1] = poly.bbox();
    let ys = (y0 - 0.5).ceil().max(0.0) as usize;
    let ye = ((y1 - 0.5).floor() + 1.0).clamp(0.0, h as f64) as usize;
    let edges: Vec<(Point, Point)> = poly.edges().collect();
    for y in ys..ye {
        let cy = y as f64 + 0.5;
        let mut xs: Vec<f64> = edges
            .iter()
            .filter(|(a, b)| (a[1] > cy) != (b[1] > cy))
            .map(|(a, b)| a[0] + (cy - a[1]) / (b[1] - a[1]) * (b[0] - a[0]))
            .collect();
        xs.sort_by(f64::total_cmp);
        for pair in xs.chunks(2) {
            if pair.len() < 2 {
                break;
            }
            // centres cx with pair[0] <= cx < pair[1]
            let a = (pair[0] - 0.5).ceil().max(0.0);
            let b = (pair[1] - 0.5).ceil().min(w as f64);
            let mut x = a;
            while x < b {
                m.set(x as usize, y, true);
                x += 1.0;
            }
        }
    }
    m
}
