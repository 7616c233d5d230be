use super::Polygon;

/// Intersection over union of two polygons, rasterised over their joint
/// bounding box at `scale` samples per pixel along each axis.
pub fn polygon_iou(a: &Polygon, b: &Polygon, scale: f64) -> f64 {
    let ba = a.bbox();
    let bb = b.bbox();
    let (x0, y0) = (ba[0].min(bb[0]), ba[1].min(bb[1]));
    let (x1, y1) = (ba[2].max(bb[2]), ba[3].max(bb[3]));
    let scale = scale.max(1e-9);
    let nx = (((x1 - x0) * scale).ceil() as usize).max(1);
    let ny = (((y1 - y0) * scale).ceil() as usize).max(1);
    let mut inter = 0usize;
    let mut union = 0usize;
    let spans = |p: &Polygon, y: f64| -> Vec<f64> {
        let mut xs: Vec<f64> = p
            .edges()
            .filter(|(a, b)| (a[1] > y) != (b[1] > y))
            .map(|(a, b)| a[0] + (y - a[1]) / (b[1] - a[1]) * (b[0] - a[0]))
            .collect();
        xs.sort_by(f64::total_cmp);
        xs
    };
    let inside = |xs: &[f64], x: f64| xs.iter().filter(|&&v| v > x).count() % 2 == 1;
    for j in 0..ny {
        let y = y0 + (j as f64 + 0.5) / scale;
        let (sa, sb) = (spans(a, y), spans(b, y));
        if sa.is_empty() && sb.is_empty() {
            continue;
        }
        for i in 0..nx {
            let x = x0 + (i as f64 + 0.5) / scale;
            let (ia, ib) = (inside(&sa, x), inside(&sb, x));
            inter += usize::from(ia && ib);
            union += usize::from(ia || ib);
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}
