//! Synthetic scene-text data, ground-truth maps and augmentation.

mod augment;
pub mod font;
mod image;
mod io;
mod synth;
mod targets;

pub use augment::{augment, augment_with, AugmentConfig, AugmentDraw};
pub use image::{resize_for_inference, Image, Resized};
pub use io::{format_annotation, format_coords, load_dir, parse_annotation, write_sample, LabeledImage, IGNORE_TEXT};
pub use synth::{generate_sample, generate_sample_with_ink, sample_at, DataConfig};
pub use targets::{build_targets, make_prob_target, make_thresh_target, shrink_distance, Targets};

use crate::geometry::Polygon;

/// Default ten-glyph alphabet of the synthetic data.
pub const DEFAULT_GLYPHS: &str = "ACEHKLNPTX";

/// Smallest polygon area, in square pixels, that is still scored.
pub const MIN_INSTANCE_AREA: f64 = 4.0;

#[derive(Clone, Debug, PartialEq)]
pub struct TextInstance {
    pub polygon: Polygon,
    pub text: String,
    /// Excluded from training losses and evaluation.
    pub ignore: bool,
}

/// An image with its instances and the detection targets derived from
/// them.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub instances: Vec<TextInstance>,
    pub targets: Targets,
}

impl Sample {
    /// Builds targets for `instances` (marking collapsed ones ignored).
    pub fn new(image: Image, mut instances: Vec<TextInstance>, cfg: &DataConfig) -> Self {
        let targets = build_targets(&mut instances, image.h, image.w, cfg);
        Self {
            image,
            instances,
            targets,
        }
    }
}
