use rand::Rng;

use super::{DataConfig, Image, Sample, TextInstance, MIN_INSTANCE_AREA};
use crate::error::{DeerError, Result};
use crate::geometry::Polygon;

/// Training-time augmentation settings.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Rotation is drawn from `[-rotation, rotation]` degrees.
    pub rotation: f64,
    pub resize_min: f64,
    pub resize_max: f64,
    /// Side of the square output crop.
    pub crop_size: usize,
    pub jitter_prob: f64,
    /// Brightness, contrast and saturation factors vary by up to this much.
    pub jitter: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotation: 90.0,
            resize_min: 0.5,
            resize_max: 3.0,
            crop_size: 128,
            jitter_prob: 0.8,
            jitter: 0.3,
        }
    }
}

/// One concrete draw of the augmentation parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentDraw {
    pub rotation_deg: f64,
    pub scale: f64,
    /// Top-left of the crop window in the rotated and resized frame.
    pub crop_origin: [f64; 2],
    /// Brightness, contrast, saturation offsets; `None` skips jitter.
    pub jitter: Option<[f64; 3]>,
}

/// Forward map of a rotation by `theta` about the image centre followed by
/// a resize, onto a canvas just large enough to hold the result.
struct Frame {
    cos: f64,
    sin: f64,
    scale: f64,
    src_c: [f64; 2],
    dst_c: [f64; 2],
    size: [f64; 2],
}

impl Frame {
    fn new(h: usize, w: usize, rotation_deg: f64, scale: f64) -> Self {
        let (sin, cos) = rotation_deg.to_radians().sin_cos();
        let (w, h) = (w as f64, h as f64);
        let nw = scale * (cos.abs() * w + sin.abs() * h);
        let nh = scale * (sin.abs() * w + cos.abs() * h);
        Self {
            cos,
            sin,
            scale,
            src_c: [w / 2.0, h / 2.0],
            dst_c: [nw / 2.0, nh / 2.0],
            size: [nw, nh],
        }
    }

    fn forward(&self, p: [f64; 2]) -> [f64; 2] {
        let (dx, dy) = (p[0] - self.src_c[0], p[1] - self.src_c[1]);
        [
            self.dst_c[0] + self.scale * (self.cos * dx - self.sin * dy),
            self.dst_c[1] + self.scale * (self.sin * dx + self.cos * dy),
        ]
    }

    fn inverse(&self, p: [f64; 2]) -> [f64; 2] {
        let (dx, dy) = ((p[0] - self.dst_c[0]) / self.scale, (p[1] - self.dst_c[1]) / self.scale);
        [
            self.src_c[0] + self.cos * dx + self.sin * dy,
            self.src_c[1] - self.sin * dx + self.cos * dy,
        ]
    }
}

const CROP_TRIES: usize = 50;

fn crop_range(extent: f64, crop: f64) -> (f64, f64) {
    let slack = extent - crop;
    (slack.min(0.0), slack.max(0.0))
}

/// Draws parameters and applies [`augment_with`]. Crop windows are sampled
/// until one cuts through no kept instance.
pub fn augment<R: Rng>(sample: &Sample, rng: &mut R, aug: &AugmentConfig, data: &DataConfig) -> Result<Sample> {
    let rotation_deg = rng.random_range(-aug.rotation..=aug.rotation);
    let scale = rng.random_range(aug.resize_min..=aug.resize_max);
    let frame = Frame::new(sample.image.h, sample.image.w, rotation_deg, scale);
    let crop = aug.crop_size as f64;
    let boxes: Vec<[f64; 4]> = sample
        .instances
        .iter()
        .filter(|i| !i.ignore)
        .map(|i| {
            let pts: Vec<[f64; 2]> = i.polygon.vertices().iter().map(|&p| frame.forward(p)).collect();
            bbox(&pts)
        })
        .collect();
    let (xr, yr) = (crop_range(frame.size[0], crop), crop_range(frame.size[1], crop));
    let safe = |o: [f64; 2]| {
        let win = [o[0], o[1], o[0] + crop, o[1] + crop];
        let mut kept = 0;
        for b in &boxes {
            let inside = b[0] >= win[0] && b[1] >= win[1] && b[2] <= win[2] && b[3] <= win[3];
            let outside = b[2] <= win[0] || b[0] >= win[2] || b[3] <= win[1] || b[1] >= win[3];
            if !inside && !outside {
                return false;
            }
            kept += usize::from(inside);
        }
        boxes.is_empty() || kept > 0
    };
    let draw_origin = |rng: &mut R| [rng.random_range(xr.0..=xr.1), rng.random_range(yr.0..=yr.1)];
    let mut origin = None;
    for _ in 0..CROP_TRIES {
        let o = draw_origin(rng);
        if safe(o) {
            origin = Some(o);
            break;
        }
    }
    let crop_origin = origin.unwrap_or_else(|| match boxes.first() {
        Some(b) => [
            (0.5 * (b[0] + b[2]) - crop / 2.0).clamp(xr.0, xr.1),
            (0.5 * (b[1] + b[3]) - crop / 2.0).clamp(yr.0, yr.1),
        ],
        None => [xr.0, yr.0],
    });
    let jitter = (rng.random::<f64>() < aug.jitter_prob).then(|| {
        [0; 3].map(|_| rng.random_range(-aug.jitter..=aug.jitter))
    });
    augment_with(
        sample,
        &AugmentDraw {
            rotation_deg,
            scale,
            crop_origin,
            jitter,
        },
        aug,
        data,
    )
}

fn bbox(pts: &[[f64; 2]]) -> [f64; 4] {
    pts.iter().fold(
        [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY],
        |b, p| [b[0].min(p[0]), b[1].min(p[1]), b[2].max(p[0]), b[3].max(p[1])],
    )
}

/// Rotates about the centre, resizes, crops a `crop_size` square at
/// `crop_origin` and optionally colour-jitters. Instances entirely outside
/// the crop are dropped; instances the crop cuts are clipped and ignored.
/// Targets are rebuilt for the new geometry.
pub fn augment_with(sample: &Sample, draw: &AugmentDraw, aug: &AugmentConfig, data: &DataConfig) -> Result<Sample> {
    if !(draw.scale > 0.0) || aug.crop_size == 0 {
        return Err(DeerError::Config("augmentation needs a positive scale and crop size".into()));
    }
    let frame = Frame::new(sample.image.h, sample.image.w, draw.rotation_deg, draw.scale);
    let o = draw.crop_origin;
    let c = aug.crop_size;
    let mut image = sample
        .image
        .warp(c, c, |x, y| {
            let p = frame.inverse([x + o[0], y + o[1]]);
            (p[0], p[1])
        });
    if let Some(j) = draw.jitter {
        color_jitter(&mut image, j);
    }
    let window = [0.0, 0.0, c as f64, c as f64];
    let mut instances = Vec::new();
    for inst in &sample.instances {
        let moved: Vec<[f64; 2]> = inst
            .polygon
            .vertices()
            .iter()
            .map(|&p| {
                let q = frame.forward(p);
                [q[0] - o[0], q[1] - o[1]]
            })
            .collect();
        let b = bbox(&moved);
        let inside = b[0] >= window[0] && b[1] >= window[1] && b[2] <= window[2] && b[3] <= window[3];
        let (pts, cut) = if inside {
            (moved, false)
        } else {
            (clip_to_window(&moved, window), true)
        };
        if pts.len() < 3 {
            continue;
        }
        let Ok(polygon) = Polygon::new(pts) else { continue };
        if polygon.area() <= 0.0 {
            continue;
        }
        let ignore = inst.ignore || cut || polygon.area() < MIN_INSTANCE_AREA;
        instances.push(TextInstance {
            polygon,
            text: inst.text.clone(),
            ignore,
        });
    }
    Ok(Sample::new(image, instances, data))
}

/// Sutherland–Hodgman clip against an axis-aligned window.
fn clip_to_window(pts: &[[f64; 2]], win: [f64; 4]) -> Vec<[f64; 2]> {
    let mut poly = pts.to_vec();
    // (axis, bound, keep greater)
    for (axis, bound, greater) in [(0, win[0], true), (0, win[2], false), (1, win[1], true), (1, win[3], false)] {
        if poly.is_empty() {
            break;
        }
        let keep = |p: &[f64; 2]| if greater { p[axis] >= bound } else { p[axis] <= bound };
        let mut out = Vec::new();
        for i in 0..poly.len() {
            let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
            let (ka, kb) = (keep(&a), keep(&b));
            if ka {
                out.push(a);
            }
            if ka != kb {
                let t = (bound - a[axis]) / (b[axis] - a[axis]);
                out.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
            }
        }
        poly = out;
    }
    crate::geometry::Polygon::new(poly.clone())
        .and_then(|p| p.remove_collinear())
        .map(|p| p.vertices().to_vec())
        .unwrap_or_default()
}

/// Brightness, contrast and saturation offsets in that order.
fn color_jitter(image: &mut Image, j: [f64; 3]) {
    let [b, c, s] = j.map(|v| (1.0 + v) as f32);
    for px in image.data.chunks_mut(3) {
        for v in px.iter_mut() {
            *v *= b;
        }
    }
    let n = (image.h * image.w).max(1) as f32;
    let mean: f32 = image.data.chunks(3).map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).sum::<f32>() / n;
    for px in image.data.chunks_mut(3) {
        for v in px.iter_mut() {
            *v = mean + c * (*v - mean);
        }
        let gray = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
        for v in px.iter_mut() {
            *v = (gray + s * (*v - gray)).clamp(0.0, 1.0);
        }
    }
}
