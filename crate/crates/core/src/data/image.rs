use std::path::Path;

use deer_tensor::{Float, Tensor};

use crate::error::{DeerError, Result};

/// RGB image, row-major `h * w * 3` with channels interleaved, values in
/// `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![0.0; h * w * 3],
        }
    }

    pub fn filled(h: usize, w: usize, rgb: [f32; 3]) -> Self {
        Self {
            h,
            w,
            data: (0..h * w).flat_map(|_| rgb).collect(),
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.w + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.w + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Channel-first `[3, h, w]` tensor.
    pub fn to_tensor<F: Float>(&self) -> Tensor<F> {
        let (h, w) = (self.h, self.w);
        Tensor::from_fn(&[3, h, w], |i| {
            let (c, p) = (i / (h * w), i % (h * w));
            F::from_f64c(self.data[p * 3 + c] as f64)
        })
    }

    /// Bilinear sample at continuous pixel coordinates (pixel centres at
    /// `i + 0.5`); zero outside the image.
    pub fn sample(&self, x: f64, y: f64) -> [f32; 3] {
        let (fx, fy) = (x - 0.5, y - 0.5);
        let (x0, y0) = (fx.floor(), fy.floor());
        let (ax, ay) = (fx - x0, fy - y0);
        let mut out = [0.0f64; 3];
        for (dy, wy) in [(0, 1.0 - ay), (1, ay)] {
            for (dx, wx) in [(0, 1.0 - ax), (1, ax)] {
                let (px, py) = (x0 as i64 + dx, y0 as i64 + dy);
                let wgt = wx * wy;
                if wgt == 0.0 || px < 0 || py < 0 || px >= self.w as i64 || py >= self.h as i64 {
                    continue;
                }
                let p = self.pixel(px as usize, py as usize);
                for c in 0..3 {
                    out[c] += wgt * p[c] as f64;
                }
            }
        }
        out.map(|v| v as f32)
    }

    /// Resamples into an `h x w` canvas; `inverse` maps output pixel
    /// coordinates to source coordinates.
    pub fn warp(&self, h: usize, w: usize, inverse: impl Fn(f64, f64) -> (f64, f64)) -> Image {
        let mut out = Image::new(h, w);
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = inverse(x as f64 + 0.5, y as f64 + 0.5);
                out.set_pixel(x, y, self.sample(sx, sy));
            }
        }
        out
    }

    pub fn load(path: &Path) -> Result<Image> {
        let img = image::open(path)
            .map_err(|e| DeerError::Input(format!("cannot read image {}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        Ok(Image {
            h,
            w,
            data: img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
        })
    }

    /// Writes PNG, or binary PPM when the extension is `.ppm`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        let buf = image::RgbImage::from_raw(self.w as u32, self.h as u32, bytes)
            .ok_or_else(|| DeerError::Input("image buffer size mismatch".into()))?;
        let ppm = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm"));
        let format = if ppm { image::ImageFormat::Pnm } else { image::ImageFormat::Png };
        buf.save_with_format(path, format)?;
        Ok(())
    }
}

/// Result of [`resize_for_inference`]: the padded network input and the
/// factors mapping its coordinates back to the original image.
#[derive(Clone, Debug)]
pub struct Resized {
    pub image: Image,
    /// Original-image pixels per resized pixel, per axis.
    pub inverse_scale: [f64; 2],
    /// Size of the resized content before padding, `(h, w)`.
    pub content: (usize, usize),
}

impl Resized {
    pub fn to_original(&self, p: [f64; 2]) -> [f64; 2] {
        [p[0] * self.inverse_scale[0], p[1] * self.inverse_scale[1]]
    }
}

/// Scales `image` so its longer side equals `long_side` (aspect kept), then
/// zero-pads bottom and right to multiples of 32.
pub fn resize_for_inference(image: &Image, long_side: usize) -> Result<Resized> {
    if long_side == 0 || image.h == 0 || image.w == 0 {
        return Err(DeerError::Input(format!(
            "cannot resize a {}x{} image to long side {long_side}",
            image.h, image.w
        )));
    }
    let s = long_side as f64 / image.h.max(image.w) as f64;
    let nh = ((image.h as f64 * s).round() as usize).max(1);
    let nw = ((image.w as f64 * s).round() as usize).max(1);
    let (sy, sx) = (image.h as f64 / nh as f64, image.w as f64 / nw as f64);
    let ph = nh.div_ceil(32) * 32;
    let pw = nw.div_ceil(32) * 32;
    let resized = if (nh, nw) == (image.h, image.w) {
        image.clone()
    } else {
        image.warp(nh, nw, |x, y| (x * sx, y * sy))
    };
    let mut padded = Image::new(ph, pw);
    for y in 0..nh {
        let (src, dst) = (y * nw * 3, y * pw * 3);
        padded.data[dst..dst + nw * 3].copy_from_slice(&resized.data[src..src + nw * 3]);
    }
    Ok(Resized {
        image: padded,
        inverse_scale: [sx, sy],
        content: (nh, nw),
    })
}
