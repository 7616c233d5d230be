use super::{DataConfig, TextInstance, MIN_INSTANCE_AREA};
use crate::geometry::{dilation_offset, fill_polygon, offset_polygon, Mask, Polygon};

/// Detection targets of one image, row-major `h * w`.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub h: usize,
    pub w: usize,
    /// 1 inside shrunk instance polygons.
    pub prob: Vec<f64>,
    /// False inside ignored instances; such pixels carry no loss.
    pub valid: Mask,
    pub thresh: Vec<f64>,
    /// The threshold band: dilated minus shrunk instance regions.
    pub thresh_mask: Mask,
}

/// Offset used both to shrink the probability target and to bound the
/// threshold band: `A (1 - r^2) / L`.
pub fn shrink_distance(poly: &Polygon, shrink_ratio: f64) -> f64 {
    dilation_offset(poly, 1.0 - shrink_ratio * shrink_ratio).unwrap_or(0.0)
}

fn shrunk(poly: &Polygon, r: f64) -> Option<Polygon> {
    offset_polygon(poly, -shrink_distance(poly, r)).ok()
}

/// Marks instances that are too small or whose shrunk polygon collapses as
/// ignored, then builds all targets.
pub fn build_targets(instances: &mut [TextInstance], h: usize, w: usize, cfg: &DataConfig) -> Targets {
    for inst in instances.iter_mut() {
        if inst.polygon.area() < MIN_INSTANCE_AREA || shrunk(&inst.polygon, cfg.shrink_ratio).is_none() {
            inst.ignore = true;
        }
    }
    let (prob, valid) = make_prob_target(instances, h, w, cfg.shrink_ratio);
    let (thresh, thresh_mask) = make_thresh_target(instances, h, w, cfg);
    Targets {
        h,
        w,
        prob,
        valid,
        thresh,
        thresh_mask,
    }
}

/// Probability target (1 inside each shrunk kept polygon) and the loss
/// mask excluding ignored instances.
pub fn make_prob_target(instances: &[TextInstance], h: usize, w: usize, shrink_ratio: f64) -> (Vec<f64>, Mask) {
    let mut prob = vec![0.0; h * w];
    let mut valid = Mask {
        h,
        w,
        bits: vec![true; h * w],
    };
    for inst in instances {
        if inst.ignore {
            let m = fill_polygon(&inst.polygon, h, w);
            for (v, &b) in valid.bits.iter_mut().zip(&m.bits) {
                *v &= !b;
            }
            continue;
        }
        if let Some(s) = shrunk(&inst.polygon, shrink_ratio) {
            let m = fill_polygon(&s, h, w);
            for (p, &b) in prob.iter_mut().zip(&m.bits) {
                if b {
                    *p = 1.0;
                }
            }
        }
    }
    // kept text wins over an overlapping ignored region
    for (v, &p) in valid.bits.iter_mut().zip(&prob) {
        *v |= p > 0.0;
    }
    (prob, valid)
}

/// Threshold target: inside each instance's band the value falls from
/// `thresh_max` on the polygon boundary to `thresh_min` at distance `D`;
/// `thresh_min` elsewhere.
pub fn make_thresh_target(instances: &[TextInstance], h: usize, w: usize, cfg: &DataConfig) -> (Vec<f64>, Mask) {
    let (tmin, tmax) = (cfg.thresh_min, cfg.thresh_max);
    let mut thresh = vec![tmin; h * w];
    let mut band = Mask::new(h, w);
    for inst in instances.iter().filter(|i| !i.ignore) {
        let d = shrink_distance(&inst.polygon, cfg.shrink_ratio);
        if d <= 0.0 {
            continue;
        }
        let Some(inner) = shrunk(&inst.polygon, cfg.shrink_ratio) else {
            continue;
        };
        let outer = offset_polygon(&inst.polygon, d)
            .or_else(|_| inst.polygon.convex_hull().and_then(|hull| offset_polygon(&hull, d)));
        let Ok(outer) = outer else { continue };
        let outer_m = fill_polygon(&outer, h, w);
        let inner_m = fill_polygon(&inner, h, w);
        for i in 0..h * w {
            if !outer_m.bits[i] || inner_m.bits[i] {
                continue;
            }
            band.bits[i] = true;
            let p = [(i % w) as f64 + 0.5, (i / w) as f64 + 0.5];
            let t = tmax - (tmax - tmin) * (inst.polygon.boundary_distance(p) / d).clamp(0.0, 1.0);
            thresh[i] = thresh[i].max(t);
        }
    }
    (thresh, band)
}
