use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::font::{glyph, GLYPH_H, GLYPH_W};
use super::{Image, Sample, TextInstance, DEFAULT_GLYPHS};
use crate::error::{DeerError, Result};
use crate::geometry::{fill_polygon, offset_polygon, Mask, Polygon};

/// Synthetic data and label-map settings.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub words_min: usize,
    pub words_max: usize,
    pub word_len_min: usize,
    pub word_len_max: usize,
    pub glyphs: String,
    /// Word rotation is drawn from `[-rotation, rotation]` degrees.
    pub rotation: f64,
    /// Pixels per font cell.
    pub scale_min: f64,
    pub scale_max: f64,
    /// Amplitude of uniform pixel noise.
    pub noise: f64,
    pub shrink_ratio: f64,
    pub thresh_min: f64,
    pub thresh_max: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            image_h: 128,
            image_w: 128,
            words_min: 1,
            words_max: 3,
            word_len_min: 1,
            word_len_max: 5,
            glyphs: DEFAULT_GLYPHS.to_string(),
            rotation: 15.0,
            scale_min: 1.5,
            scale_max: 2.5,
            noise: 0.03,
            shrink_ratio: 0.4,
            thresh_min: 0.3,
            thresh_max: 0.7,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(DeerError::Config(m.to_string()));
        if self.image_h == 0 || self.image_w == 0 {
            return err("data.image_h and data.image_w must be positive");
        }
        if self.words_min > self.words_max {
            return err("data.words_min exceeds data.words_max");
        }
        if self.word_len_min == 0 || self.word_len_min > self.word_len_max {
            return err("data.word_len_min must be in 1..=data.word_len_max");
        }
        if self.glyphs.is_empty() {
            return err("data.glyphs is empty");
        }
        if let Some(c) = self.glyphs.chars().find(|&c| glyph(c).is_none()) {
            return Err(DeerError::Config(format!("data.glyphs: no bitmap for {c:?}")));
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max) {
            return err("data.scale_min must be positive and not above data.scale_max");
        }
        if !(0.0 < self.shrink_ratio && self.shrink_ratio < 1.0) {
            return err("data.shrink_ratio must lie in (0, 1)");
        }
        if !(0.0 <= self.thresh_min && self.thresh_min <= self.thresh_max && self.thresh_max <= 1.0) {
            return err("data.thresh_min/thresh_max must satisfy 0 <= min <= max <= 1");
        }
        Ok(())
    }
}

/// Gap kept between words and from the image border, in pixels.
const MARGIN: f64 = 3.0;
const PLACEMENT_TRIES: usize = 50;
const SUPERSAMPLE: usize = 3;

/// The `index`-th sample of the dataset identified by `seed`.
pub fn sample_at(seed: u64, index: u64, cfg: &DataConfig) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    generate_sample(&mut rng, cfg)
}

pub fn generate_sample<R: Rng>(rng: &mut R, cfg: &DataConfig) -> Result<Sample> {
    Ok(generate_sample_with_ink(rng, cfg)?.0)
}

fn luminance(c: [f32; 3]) -> f32 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

/// Like [`generate_sample`], also returning each word's rendered ink mask
/// (pixels at least half covered by glyph cells).
pub fn generate_sample_with_ink<R: Rng>(rng: &mut R, cfg: &DataConfig) -> Result<(Sample, Vec<Mask>)> {
    cfg.validate()?;
    let (h, w) = (cfg.image_h, cfg.image_w);
    let glyphs: Vec<char> = cfg.glyphs.chars().collect();
    let bg: [f32; 3] = [rng.random(), rng.random(), rng.random()];
    let fg = loop {
        let c: [f32; 3] = [rng.random(), rng.random(), rng.random()];
        if (luminance(c) - luminance(bg)).abs() >= 0.35 {
            break c;
        }
    };
    let mut image = Image::filled(h, w, bg);
    let mut occupied = Mask::new(h, w);
    let mut instances = Vec::new();
    let mut inks = Vec::new();
    let words = rng.random_range(cfg.words_min..=cfg.words_max);
    for _ in 0..words {
        let len = rng.random_range(cfg.word_len_min..=cfg.word_len_max);
        let text: String = (0..len).map(|_| glyphs[rng.random_range(0..glyphs.len())]).collect();
        for _ in 0..PLACEMENT_TRIES {
            let s = rng.random_range(cfg.scale_min..=cfg.scale_max);
            let theta = rng.random_range(-cfg.rotation..=cfg.rotation).to_radians();
            let bw = ((GLYPH_W + 1) * len - 1) as f64 * s;
            let bh = GLYPH_H as f64 * s;
            let cx = rng.random_range(0.0..w as f64);
            let cy = rng.random_range(0.0..h as f64);
            let (sin, cos) = theta.sin_cos();
            let place = |lx: f64, ly: f64| [cx + cos * lx - sin * ly, cy + sin * lx + cos * ly];
            let poly = Polygon::new(vec![
                place(-bw / 2.0, -bh / 2.0),
                place(bw / 2.0, -bh / 2.0),
                place(bw / 2.0, bh / 2.0),
                place(-bw / 2.0, bh / 2.0),
            ])?;
            let [x0, y0, x1, y1] = poly.bbox();
            if x0 < MARGIN || y0 < MARGIN || x1 > w as f64 - MARGIN || y1 > h as f64 - MARGIN {
                continue;
            }
            let halo = offset_polygon(&poly, MARGIN)?;
            let halo_mask = fill_polygon(&halo, h, w);
            if halo_mask.bits.iter().zip(&occupied.bits).any(|(a, b)| *a && *b) {
                continue;
            }
            for (o, m) in occupied.bits.iter_mut().zip(&halo_mask.bits) {
                *o |= *m;
            }
            let ink = render_word(&mut image, &text, [cx, cy], theta, s, fg, [x0, y0, x1, y1]);
            instances.push(TextInstance {
                polygon: poly,
                text,
                ignore: false,
            });
            inks.push(ink);
            break;
        }
    }
    if cfg.noise > 0.0 {
        for v in image.data.iter_mut() {
            *v = (*v + rng.random_range(-cfg.noise..=cfg.noise) as f32).clamp(0.0, 1.0);
        }
    }
    Ok((Sample::new(image, instances, cfg), inks))
}

fn render_word(image: &mut Image, text: &str, c: [f64; 2], theta: f64, s: f64, fg: [f32; 3], bbox: [f64; 4]) -> Mask {
    let masks: Vec<_> = text.chars().map(|ch| glyph(ch).expect("validated glyph")).collect();
    let bw = ((GLYPH_W + 1) * masks.len() - 1) as f64 * s;
    let bh = GLYPH_H as f64 * s;
    let (sin, cos) = theta.sin_cos();
    let inked = |px: f64, py: f64| {
        let (dx, dy) = (px - c[0], py - c[1]);
        let lx = cos * dx + sin * dy + bw / 2.0;
        let ly = -sin * dx + cos * dy + bh / 2.0;
        if lx < 0.0 || ly < 0.0 || lx >= bw || ly >= bh {
            return false;
        }
        let cell = (lx / s) as usize;
        let (ci, col) = (cell / (GLYPH_W + 1), cell % (GLYPH_W + 1));
        let row = (ly / s) as usize;
        col < GLYPH_W && row < GLYPH_H && ci < masks.len() && masks[ci][row][col]
    };
    let mut ink = Mask::new(image.h, image.w);
    let xs = (bbox[0].floor().max(0.0) as usize)..(bbox[2].ceil() as usize).min(image.w);
    let ys = (bbox[1].floor().max(0.0) as usize)..(bbox[3].ceil() as usize).min(image.h);
    let n = (SUPERSAMPLE * SUPERSAMPLE) as f32;
    for y in ys {
        for x in xs.clone() {
            let mut hits = 0usize;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = x as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
                    let py = y as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
                    hits += usize::from(inked(px, py));
                }
            }
            if hits == 0 {
                continue;
            }
            let a = hits as f32 / n;
            let p = image.pixel(x, y);
            image.set_pixel(x, y, [0, 1, 2].map(|k| p[k] * (1.0 - a) + fg[k] * a));
            ink.set(x, y, a >= 0.5);
        }
    }
    ink
}
