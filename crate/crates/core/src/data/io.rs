use std::path::{Path, PathBuf};

use super::{Image, Sample, TextInstance};
use crate::error::{DeerError, Result};
use crate::geometry::Polygon;

/// Transcription marking an instance as "do not care".
pub const IGNORE_TEXT: &str = "###";

/// Parses annotation lines `x1,y1,...,xn,yn<TAB>transcription`.
pub fn parse_annotation(text: &str) -> Result<Vec<TextInstance>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let (coords, transcription) = line
            .split_once('\t')
            .ok_or_else(|| DeerError::Input(format!("annotation line {}: missing tab before transcription", n + 1)))?;
        let values = coords
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| DeerError::Input(format!("annotation line {}: {e}", n + 1)))?;
        let polygon =
            Polygon::from_flat(&values).map_err(|e| DeerError::Input(format!("annotation line {}: {e}", n + 1)))?;
        let ignore = transcription == IGNORE_TEXT;
        if !ignore && transcription.is_empty() {
            return Err(DeerError::Input(format!("annotation line {}: empty transcription", n + 1)));
        }
        out.push(TextInstance {
            polygon,
            text: if ignore { String::new() } else { transcription.to_string() },
            ignore,
        });
    }
    Ok(out)
}

pub fn format_coords(poly: &Polygon) -> String {
    poly.to_flat().iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>().join(",")
}

pub fn format_annotation(instances: &[TextInstance]) -> String {
    instances
        .iter()
        .map(|i| {
            let text = if i.ignore { IGNORE_TEXT } else { i.text.as_str() };
            format!("{}\t{text}\n", format_coords(&i.polygon))
        })
        .collect()
}

/// An image file with its annotations.
#[derive(Clone, Debug)]
pub struct LabeledImage {
    pub name: String,
    pub image: Image,
    pub instances: Vec<TextInstance>,
}

/// Loads every `NAME.png` in `dir` (sorted by name) together with its
/// `NAME.txt` annotation.
pub fn load_dir(dir: &Path) -> Result<Vec<LabeledImage>> {
    let entries = std::fs::read_dir(dir).map_err(|e| DeerError::Input(format!("cannot read {}: {e}", dir.display())))?;
    let mut images: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png") || e.eq_ignore_ascii_case("ppm")))
        .collect();
    images.sort();
    images
        .into_iter()
        .map(|p| {
            let ann = p.with_extension("txt");
            let text = std::fs::read_to_string(&ann)
                .map_err(|e| DeerError::Input(format!("cannot read annotation {}: {e}", ann.display())))?;
            Ok(LabeledImage {
                name: p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
                image: Image::load(&p)?,
                instances: parse_annotation(&text)?,
            })
        })
        .collect()
}

/// Writes `NAME.png` and `NAME.txt` into `dir`.
pub fn write_sample(dir: &Path, name: &str, sample: &Sample) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    sample.image.save(&dir.join(format!("{name}.png")))?;
    std::fs::write(dir.join(format!("{name}.txt")), format_annotation(&sample.instances))?;
    Ok(())
}
