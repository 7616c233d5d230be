use crate::geometry::{polygon_iou, Polygon};

/// Raster samples per pixel used for IoU.
pub const IOU_RASTER_SCALE: f64 = 4.0;

/// One-to-one matching between ground truth and predictions.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchResult {
    pub pairs: Vec<(usize, usize, f64)>,
    pub unmatched_gt: Vec<usize>,
    pub unmatched_pred: Vec<usize>,
    /// Predictions excluded for overlapping an ignored ground truth.
    pub excluded_pred: Vec<usize>,
}

impl MatchResult {
    pub fn num_gt(&self) -> usize {
        self.pairs.len() + self.unmatched_gt.len()
    }

    pub fn num_pred(&self) -> usize {
        self.pairs.len() + self.unmatched_pred.len()
    }
}

/// Greedy matching by descending IoU (ties by ground-truth then prediction
/// index). `accept(gt, pred)` may veto a pair, e.g. on transcription.
pub fn match_with(
    gts: &[Polygon],
    gt_ignore: &[bool],
    preds: &[Polygon],
    iou_threshold: f64,
    accept: impl Fn(usize, usize) -> bool,
) -> MatchResult {
    let iou: Vec<Vec<f64>> = gts
        .iter()
        .map(|g| preds.iter().map(|p| polygon_iou(g, p, IOU_RASTER_SCALE)).collect())
        .collect();
    let ignored = |g: usize| gt_ignore.get(g).copied().unwrap_or(false);
    let excluded: Vec<usize> = (0..preds.len())
        .filter(|&p| (0..gts.len()).any(|g| ignored(g) && iou[g][p] >= iou_threshold))
        .collect();
    let mut cands: Vec<(f64, usize, usize)> = Vec::new();
    for (g, row) in iou.iter().enumerate() {
        if ignored(g) {
            continue;
        }
        for (p, &v) in row.iter().enumerate() {
            if v >= iou_threshold && !excluded.contains(&p) && accept(g, p) {
                cands.push((v, g, p));
            }
        }
    }
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_g = vec![false; gts.len()];
    let mut used_p = vec![false; preds.len()];
    let mut pairs = Vec::new();
    for (v, g, p) in cands {
        if !used_g[g] && !used_p[p] {
            used_g[g] = true;
            used_p[p] = true;
            pairs.push((g, p, v));
        }
    }
    MatchResult {
        pairs,
        unmatched_gt: (0..gts.len()).filter(|&g| !ignored(g) && !used_g[g]).collect(),
        unmatched_pred: (0..preds.len()).filter(|&p| !used_p[p] && !excluded.contains(&p)).collect(),
        excluded_pred: excluded,
    }
}

pub fn match_detections(gts: &[Polygon], gt_ignore: &[bool], preds: &[Polygon], iou_threshold: f64) -> MatchResult {
    match_with(gts, gt_ignore, preds, iou_threshold, |_, _| true)
}

/// Recall, precision and F-measure from match counts; empty denominators
/// give 0.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Prf {
    pub matched: usize,
    pub gt: usize,
    pub pred: usize,
}

impl Prf {
    pub fn from_match(m: &MatchResult) -> Self {
        Self {
            matched: m.pairs.len(),
            gt: m.num_gt(),
            pred: m.num_pred(),
        }
    }

    pub fn add(&mut self, o: Prf) {
        self.matched += o.matched;
        self.gt += o.gt;
        self.pred += o.pred;
    }

    pub fn recall(&self) -> f64 {
        ratio(self.matched, self.gt)
    }

    pub fn precision(&self) -> f64 {
        ratio(self.matched, self.pred)
    }

    pub fn f_measure(&self) -> f64 {
        let (r, p) = (self.recall(), self.precision());
        if r + p == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// `(recall, precision, f_measure)` of a matching.
pub fn detection_prf(m: &MatchResult) -> (f64, f64, f64) {
    let p = Prf::from_match(m);
    (p.recall(), p.precision(), p.f_measure())
}
