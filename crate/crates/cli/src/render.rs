//! Overlays and attention heatmaps.

use deer_core::data::font::{glyph, GLYPH_H, GLYPH_W};
use deer_core::data::Image;
use deer_core::evaluation::SpottingResult;
use deer_core::geometry::Point;
use deer_core::nn::LevelLayout;

pub const POLYGON_COLOR: [f32; 3] = [1.0, 0.1, 0.1];
pub const REFERENCE_COLOR: [f32; 3] = [0.1, 1.0, 0.1];
pub const TEXT_COLOR: [f32; 3] = [1.0, 0.9, 0.1];

fn put(img: &mut Image, x: f64, y: f64, rgb: [f32; 3]) {
    if x >= 0.0 && y >= 0.0 && (x as usize) < img.w && (y as usize) < img.h {
        img.set_pixel(x as usize, y as usize, rgb);
    }
}

pub fn draw_line(img: &mut Image, a: Point, b: Point, rgb: [f32; 3]) {
    let n = ((b[0] - a[0]).abs().max((b[1] - a[1]).abs()) * 2.0).ceil().max(1.0) as usize;
    for i in 0..=n {
        let t = i as f64 / n as f64;
        put(img, a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, rgb);
    }
}

/// A `+` of half-size `r` centred on `p`.
pub fn draw_cross(img: &mut Image, p: Point, r: f64, rgb: [f32; 3]) {
    draw_line(img, [p[0] - r, p[1]], [p[0] + r, p[1]], rgb);
    draw_line(img, [p[0], p[1] - r], [p[0], p[1] + r], rgb);
}

/// Bitmap text with its top-left corner at `(x, y)`; unknown characters
/// are skipped but keep their cell.
pub fn draw_text(img: &mut Image, x: f64, y: f64, text: &str, rgb: [f32; 3]) {
    for (i, c) in text.chars().enumerate() {
        let Some(g) = glyph(c.to_ascii_uppercase()) else { continue };
        let x0 = x + (i * (GLYPH_W + 1)) as f64;
        for (r, row) in g.iter().enumerate() {
            for (col, &on) in row.iter().enumerate() {
                if on {
                    put(img, x0 + col as f64, y + r as f64, rgb);
                }
            }
        }
    }
}

/// A copy of `image` with outlines, reference crosses and transcriptions.
pub fn overlay(image: &Image, results: &[SpottingResult]) -> Image {
    let mut out = image.clone();
    for r in results {
        let v = r.polygon.vertices();
        for i in 0..v.len() {
            draw_line(&mut out, v[i], v[(i + 1) % v.len()], POLYGON_COLOR);
        }
        draw_cross(&mut out, r.reference, 3.0, REFERENCE_COLOR);
        let [x0, y0, _, _] = r.polygon.bbox();
        draw_text(&mut out, x0, (y0 - GLYPH_H as f64 - 2.0).max(0.0), &r.text, TEXT_COLOR);
    }
    out
}

/// Attention mass per token of a plain cross-attention layer: the head
/// average summed over query positions (`probs[h][q][token]`).
pub fn plain_mass(probs: &[Vec<Vec<f64>>]) -> Vec<f64> {
    let heads = probs.len() as f64;
    let n = probs.first().and_then(|h| h.first()).map_or(0, Vec::len);
    let mut mass = vec![0.0; n];
    for head in probs {
        for q in head {
            for (m, p) in mass.iter_mut().zip(q) {
                *m += p / heads;
            }
        }
    }
    mass
}

/// Token mass spread evenly over the input pixels each token covers, summed
/// over levels; the map keeps the total mass.
pub fn plain_heatmap(mass: &[f64], layout: &LevelLayout, (h, w): (usize, usize)) -> Vec<f64> {
    let mut map = vec![0.0; h * w];
    for (l, &(lh, lw)) in layout.shapes.iter().enumerate() {
        let cover = (h * w) as f64 / (lh * lw) as f64;
        for y in 0..h {
            let ty = (y * lh / h).min(lh - 1);
            for x in 0..w {
                let tx = (x * lw / w).min(lw - 1);
                map[y * w + x] += mass[layout.flat_index(l, ty, tx)] / cover;
            }
        }
    }
    map
}

/// Sampling locations in input pixels with their attention weights for
/// one query of a deformable layer.
pub fn deformable_splats(
    offsets: &[[f64; 2]],
    weights: &[f64],
    reference: Point,
    layout: &LevelLayout,
    heads: usize,
    points: usize,
    (h, w): (usize, usize),
) -> Vec<(Point, f64)> {
    let dl = layout.deform_layout(heads, points);
    let flat: Vec<f64> = offsets.iter().flat_map(|o| [o[0], o[1]]).collect();
    let mut out = Vec::with_capacity(heads * layout.levels() * points);
    for head in 0..heads {
        for l in 0..layout.levels() {
            for k in 0..points {
                let [x, y] = dl.location(reference, &flat, head, l, k);
                let a = weights[(head * layout.levels() + l) * points + k];
                out.push(([x * w as f64, y * h as f64], a));
            }
        }
    }
    out
}

/// Gaussian dots of standard deviation `sigma` pixels, one per splat.
pub fn splat_heatmap(splats: &[(Point, f64)], (h, w): (usize, usize), sigma: f64) -> Vec<f64> {
    let mut map = vec![0.0; h * w];
    let r = (3.0 * sigma).ceil() as i64;
    for &([cx, cy], a) in splats {
        let (x0, y0) = (cx.floor() as i64, cy.floor() as i64);
        for y in (y0 - r).max(0)..=(y0 + r).min(h as i64 - 1) {
            for x in (x0 - r).max(0)..=(x0 + r).min(w as i64 - 1) {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                map[y as usize * w + x as usize] += a * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    map
}

/// Grayscale image of `map` scaled so its maximum is white.
pub fn grayscale(map: &[f64], (h, w): (usize, usize)) -> Image {
    let max = map.iter().cloned().fold(0.0, f64::max);
    let mut img = Image::new(h, w);
    for y in 0..h {
        for x in 0..w {
            let v = if max > 0.0 { (map[y * w + x] / max) as f32 } else { 0.0 };
            img.set_pixel(x, y, [v; 3]);
        }
    }
    img
}
