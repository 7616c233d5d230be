//! Detection and end-to-end metrics, transcription protocols and the
//! inference pipeline they score.

mod metrics;
mod pipeline;
mod text;

pub use metrics::{detection_prf, match_detections, match_with, MatchResult, Prf, IOU_RASTER_SCALE};
pub use pipeline::{
    attention_trace, detect_regions, inference_reference, run_image, AttentionView, ImageOutput, PostConfig, References,
    SpottingResult, TraceLayer,
};
pub use text::{edit_distance, ic15_filter, lexicon_correct, texts_match, IC15_MIN_LEN};

use rayon::prelude::*;

use crate::data::{LabeledImage, TextInstance};
use crate::error::Result;
use crate::geometry::{centroid, cross_section_center, reference_corners, shift_reference, Point, PointMode, Polygon};
use crate::model::Deer;
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub post: PostConfig,
    pub iou_threshold: f64,
    pub case_sensitive: bool,
    /// Apply the IC15 transcription rules to ground truth and predictions.
    pub ic15_rules: bool,
    /// Decode at ground-truth reference points instead of detections.
    pub gt_points: bool,
    pub point_mode: PointMode,
    /// Longer-side resize before inference; `None` keeps the input size.
    pub long_side: Option<usize>,
    /// Optional word list for lexicon-corrected end-to-end scores.
    pub lexicon: Option<Vec<String>>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            post: PostConfig::default(),
            iou_threshold: 0.5,
            case_sensitive: false,
            ic15_rules: false,
            gt_points: false,
            point_mode: PointMode::Center,
            long_side: None,
            lexicon: None,
        }
    }
}

/// Default β sweep of the reference-shift ablation.
pub const DEFAULT_BETAS: [f64; 5] = [0.0, 0.1, 0.2, 0.3, 0.4];

/// Ground truth after the transcription protocol: `(polygon, text, ignore)`.
fn scored_gt(instances: &[TextInstance], cfg: &EvalConfig) -> Vec<(Polygon, String, bool)> {
    instances
        .iter()
        .map(|i| {
            if cfg.ic15_rules && !i.ignore {
                let (t, ign) = ic15_filter(&i.text);
                (i.polygon.clone(), t, ign)
            } else {
                (i.polygon.clone(), i.text.clone(), i.ignore)
            }
        })
        .collect()
}

/// Prediction text after the protocol and optional lexicon; `None` drops
/// the prediction from end-to-end scoring.
fn scored_text(text: &str, cfg: &EvalConfig, lexicon: Option<&[String]>) -> Option<String> {
    let mut t = text.to_string();
    if cfg.ic15_rules {
        let (s, ign) = ic15_filter(&t);
        if ign {
            return None;
        }
        t = s;
    }
    if let Some(l) = lexicon {
        if let Some(c) = lexicon_correct(&t, l) {
            t = c.to_string();
        }
    }
    Some(t)
}

/// End-to-end counts: a prediction is a true positive when it overlaps an
/// unmatched ground truth at the IoU threshold and its (protocol-filtered,
/// optionally lexicon-corrected) transcription matches.
pub fn e2e_counts(gts: &[TextInstance], preds: &[SpottingResult], cfg: &EvalConfig, lexicon: Option<&[String]>) -> Prf {
    let gt = scored_gt(gts, cfg);
    let texts: Vec<Option<String>> = preds.iter().map(|p| scored_text(&p.text, cfg, lexicon)).collect();
    let kept: Vec<usize> = (0..preds.len()).filter(|&i| texts[i].is_some()).collect();
    let polys: Vec<Polygon> = kept.iter().map(|&i| preds[i].polygon.clone()).collect();
    let gpolys: Vec<Polygon> = gt.iter().map(|g| g.0.clone()).collect();
    let ignore: Vec<bool> = gt.iter().map(|g| g.2).collect();
    let m = match_with(&gpolys, &ignore, &polys, cfg.iou_threshold, |g, p| {
        texts[kept[p]].as_deref().is_some_and(|t| texts_match(t, &gt[g].1, cfg.case_sensitive))
    });
    Prf::from_match(&m)
}

/// End-to-end F-measure of one image.
pub fn e2e_fscore(gts: &[TextInstance], preds: &[SpottingResult], cfg: &EvalConfig, lexicon: Option<&[String]>) -> f64 {
    e2e_counts(gts, preds, cfg, lexicon).f_measure()
}

fn detection_counts(gts: &[TextInstance], preds: &[SpottingResult], cfg: &EvalConfig) -> Prf {
    let gt = scored_gt(gts, cfg);
    let gpolys: Vec<Polygon> = gt.iter().map(|g| g.0.clone()).collect();
    let ignore: Vec<bool> = gt.iter().map(|g| g.2).collect();
    let polys: Vec<Polygon> = preds.iter().map(|p| p.polygon.clone()).collect();
    Prf::from_match(&match_detections(&gpolys, &ignore, &polys, cfg.iou_threshold))
}

/// Aggregated metrics of one evaluation run.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub images: usize,
    pub gt_points: bool,
    pub point_mode: PointMode,
    pub iou_threshold: f64,
    /// Absent in ground-truth-point mode.
    pub detection: Option<Prf>,
    pub e2e: Prf,
    pub e2e_lexicon: Option<Prf>,
    pub mean_confidence: f64,
}

fn prf_lines(out: &mut String, p: &Prf) {
    out.push_str(&format!(
        "gt: {}\npred: {}\nmatched: {}\nrecall: {:.6}\nprecision: {:.6}\nf_measure: {:.6}\n",
        p.gt,
        p.pred,
        p.matched,
        p.recall(),
        p.precision(),
        p.f_measure()
    ));
}

impl Report {
    /// Plain-text report: `[section]` headers and `key: value` lines.
    pub fn render(&self) -> String {
        let mut s = String::from("[run]\n");
        s.push_str(&format!("images: {}\n", self.images));
        s.push_str(&format!("mode: {}\n", if self.gt_points { "gt_points" } else { "detect" }));
        s.push_str(&format!("point_mode: {}\n", self.point_mode));
        s.push_str(&format!("iou_threshold: {}\n", self.iou_threshold));
        if let Some(d) = &self.detection {
            s.push_str("\n[detection]\n");
            prf_lines(&mut s, d);
        }
        s.push_str("\n[e2e]\n");
        prf_lines(&mut s, &self.e2e);
        s.push_str(&format!("mean_confidence: {:.6}\n", self.mean_confidence));
        if let Some(l) = &self.e2e_lexicon {
            s.push_str("\n[e2e_lexicon]\n");
            prf_lines(&mut s, l);
        }
        s
    }
}

/// Ground-truth polygons with the reference point the decoder should use,
/// in original pixels.
fn gt_references(instances: &[TextInstance], mode: PointMode, beta: f64) -> Result<Vec<(Polygon, Point)>> {
    instances
        .iter()
        .filter(|i| !i.ignore)
        .map(|i| {
            let base = match mode {
                PointMode::Center => centroid(&i.polygon)?,
                PointMode::Inner => cross_section_center(&i.polygon),
            };
            let p = if beta == 0.0 {
                base
            } else {
                shift_reference(base, reference_corners(&i.polygon)?.0, beta)?
            };
            Ok((i.polygon.clone(), p))
        })
        .collect()
}

/// Per-image predictions for `data`, computed in parallel and returned in
/// input order.
pub fn predict_all(
    model: &Deer,
    store: &ParamStore<f32>,
    data: &[LabeledImage],
    cfg: &EvalConfig,
    beta: f64,
) -> Result<Vec<Vec<SpottingResult>>> {
    data.par_iter()
        .map(|item| {
            let refs = if cfg.gt_points {
                References::Given(gt_references(&item.instances, cfg.point_mode, beta)?)
            } else {
                References::Detect(cfg.point_mode)
            };
            Ok(run_image(model, store, &item.image, &refs, &cfg.post, cfg.long_side)?.results)
        })
        .collect()
}

fn report_from(data: &[LabeledImage], preds: &[Vec<SpottingResult>], cfg: &EvalConfig) -> Report {
    let mut det = Prf::default();
    let mut e2e = Prf::default();
    let mut lex = Prf::default();
    let (mut conf, mut count) = (0.0, 0usize);
    for (item, p) in data.iter().zip(preds) {
        det.add(detection_counts(&item.instances, p, cfg));
        e2e.add(e2e_counts(&item.instances, p, cfg, None));
        if let Some(l) = &cfg.lexicon {
            lex.add(e2e_counts(&item.instances, p, cfg, Some(l)));
        }
        conf += p.iter().map(|r| r.confidence).sum::<f64>();
        count += p.len();
    }
    Report {
        images: data.len(),
        gt_points: cfg.gt_points,
        point_mode: cfg.point_mode,
        iou_threshold: cfg.iou_threshold,
        detection: (!cfg.gt_points).then_some(det),
        e2e,
        e2e_lexicon: cfg.lexicon.as_ref().map(|_| lex),
        mean_confidence: if count == 0 { 0.0 } else { conf / count as f64 },
    }
}

/// Runs the full inference chain on `data` and scores it.
pub fn evaluate(model: &Deer, store: &ParamStore<f32>, data: &[LabeledImage], cfg: &EvalConfig) -> Result<Report> {
    let preds = predict_all(model, store, data, cfg, 0.0)?;
    Ok(report_from(data, &preds, cfg))
}

/// End-to-end F-measure with ground-truth reference points moved toward
/// each polygon's top-left corner by every `beta`.
pub fn run_beta_ablation(
    model: &Deer,
    store: &ParamStore<f32>,
    data: &[LabeledImage],
    betas: &[f64],
    cfg: &EvalConfig,
) -> Result<Vec<(f64, Report)>> {
    let cfg = EvalConfig {
        gt_points: true,
        ..cfg.clone()
    };
    betas
        .iter()
        .map(|&b| {
            let preds = predict_all(model, store, data, &cfg, b)?;
            Ok((b, report_from(data, &preds, &cfg)))
        })
        .collect()
}
