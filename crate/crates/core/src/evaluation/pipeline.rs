use crate::data::{resize_for_inference, Image, Resized};
use crate::error::{DeerError, Result};
use crate::geometry::{
    binarize, centroid, component_to_polygon, connected_components, cross_section_center, dilation_offset, offset_polygon,
    Point, PointMode, Polygon,
};
use crate::model::{greedy_decode_batch, CrossKind, Deer, DecoderTrace, LayerTrace, ModelScorer, ScoreMaps, BOS};
use crate::nn::{LevelLayout, MultiScaleValue};
use crate::params::{Ctx, ParamStore};

/// Score-map post-processing settings.
#[derive(Clone, Debug, PartialEq)]
pub struct PostConfig {
    /// Probability above which a pixel is text.
    pub bin_thresh: f64,
    /// `r` in the dilation distance `A r / L`.
    pub unclip_ratio: f64,
    /// Smallest region, in pixels.
    pub min_area: usize,
    /// Smallest mean probability of a region.
    pub min_score: f64,
    /// Outline simplification tolerance before dilation, in pixels.
    pub simplify: f64,
}

impl Default for PostConfig {
    fn default() -> Self {
        Self {
            bin_thresh: 0.3,
            unclip_ratio: 1.5,
            min_area: 4,
            min_score: 0.5,
            simplify: 1.0,
        }
    }
}

/// A detected (or given) text instance with its decoded transcription.
#[derive(Clone, Debug, PartialEq)]
pub struct SpottingResult {
    pub polygon: Polygon,
    /// Reference point in original-image pixels.
    pub reference: Point,
    pub text: String,
    pub confidence: f64,
}

/// Regions found in a probability map: dilated polygons with their mean
/// probability, in map pixels. Only the top-left `content` area is
/// searched.
pub fn detect_regions(maps: &ScoreMaps, content: (usize, usize), post: &PostConfig) -> Result<Vec<(Polygon, f64)>> {
    let mut mask = binarize(&maps.probability, maps.h, maps.w, post.bin_thresh)?;
    for y in 0..maps.h {
        for x in 0..maps.w {
            if y >= content.0 || x >= content.1 {
                mask.set(x, y, false);
            }
        }
    }
    let mut out = Vec::new();
    for comp in connected_components(&mask) {
        if comp.len() < post.min_area {
            continue;
        }
        let score = comp.iter().map(|&(x, y)| maps.probability[y * maps.w + x]).sum::<f64>() / comp.len() as f64;
        if score < post.min_score {
            continue;
        }
        let Ok(outline) = component_to_polygon(&comp) else { continue };
        let outline = outline.simplify(post.simplify);
        let Ok(d) = dilation_offset(&outline, post.unclip_ratio) else { continue };
        let dilated = offset_polygon(&outline, d)
            .or_else(|_| outline.convex_hull().and_then(|h| offset_polygon(&h, d)));
        if let Ok(p) = dilated {
            out.push((p, score));
        }
    }
    Ok(out)
}

/// Reference point of a detected region at inference time.
pub fn inference_reference(poly: &Polygon, mode: PointMode) -> Result<Point> {
    match mode {
        PointMode::Center => centroid(poly),
        PointMode::Inner => Ok(cross_section_center(poly)),
    }
}

/// Where the decoder's reference points come from.
#[derive(Clone, Debug)]
pub enum References {
    /// Detected regions, reduced to points with the given mode.
    Detect(PointMode),
    /// Polygons and reference points supplied in original-image pixels.
    Given(Vec<(Polygon, Point)>),
}

/// Everything produced for one image.
#[derive(Clone, Debug)]
pub struct ImageOutput {
    pub results: Vec<SpottingResult>,
    /// Maps over the padded network input.
    pub maps: ScoreMaps,
    pub resized_scale: [f64; 2],
}

/// Runs the network on `image` and decodes one transcription per
/// reference point. `long_side = None` keeps the original scale (the input
/// is still padded to a multiple of 32).
pub fn run_image(
    model: &Deer,
    store: &ParamStore<f32>,
    image: &Image,
    refs: &References,
    post: &PostConfig,
    long_side: Option<usize>,
) -> Result<ImageOutput> {
    let resized = resize_for_inference(image, long_side.unwrap_or(image.h.max(image.w)))?;
    let mut ctx = Ctx::new(store, false);
    let input = resized.image.to_tensor::<f32>();
    let (tokens, pos) = model.encode_image(&mut ctx, &input)?;
    let maps_v = model.head.forward(&mut ctx, &tokens)?;
    let maps = ScoreMaps::from_vars(&ctx, &maps_v);
    let to_net = |p: Point| [p[0] / resized.inverse_scale[0], p[1] / resized.inverse_scale[1]];
    // (polygon in original pixels, reference in network pixels)
    let regions: Vec<(Polygon, Point)> = match refs {
        References::Detect(mode) => detect_regions(&maps, resized.content, post)?
            .into_iter()
            .filter_map(|(poly, _)| {
                let r = inference_reference(&poly, *mode).ok()?;
                let back = poly.map(|p| resized.to_original(p)).ok()?;
                Some((back, r))
            })
            .collect(),
        References::Given(list) => list.iter().map(|(poly, r)| (poly.clone(), to_net(*r))).collect(),
    };
    let results = decode_regions(model, &mut ctx, &tokens, pos, &resized, regions)?;
    Ok(ImageOutput {
        results,
        maps,
        resized_scale: resized.inverse_scale,
    })
}

fn decode_regions(
    model: &Deer,
    ctx: &mut Ctx<f32>,
    tokens: &MultiScaleValue,
    pos: deer_tensor::Var,
    resized: &Resized,
    regions: Vec<(Polygon, Point)>,
) -> Result<Vec<SpottingResult>> {
    if regions.is_empty() {
        return Ok(Vec::new());
    }
    let (h, w) = (resized.image.h as f64, resized.image.w as f64);
    let memory = model.decoder.memory(ctx, tokens, pos)?;
    let refs: Vec<Point> = regions.iter().map(|(_, r)| [r[0] / w, r[1] / h]).collect();
    let n = refs.len();
    let mut scorer = ModelScorer {
        model,
        ctx,
        memory: &memory,
        refs,
    };
    let decoded = greedy_decode_batch(&mut scorer, n, model.config.max_text_len)?;
    Ok(regions
        .into_iter()
        .zip(decoded)
        .map(|((polygon, r), d)| SpottingResult {
            polygon,
            reference: resized.to_original(r),
            text: model.config.vocab.decode(&d.ids),
            confidence: d.confidence,
        })
        .collect())
}

/// Decoder cross-attention recorded while re-reading the greedy
/// transcription at one reference point.
#[derive(Clone, Debug)]
pub struct AttentionView {
    pub text: String,
    pub kinds: Vec<CrossKind>,
    pub layers: Vec<TraceLayer>,
    /// Padded network input size `(h, w)`.
    pub input_size: (usize, usize),
    pub layout: LevelLayout,
    /// Normalised reference point.
    pub reference: Point,
    pub heads: usize,
    pub points: usize,
}

pub fn attention_trace(model: &Deer, store: &ParamStore<f32>, image: &Image, reference_px: Point) -> Result<AttentionView> {
    let resized = resize_for_inference(image, image.h.max(image.w))?;
    let mut ctx = Ctx::new(store, false);
    let input = resized.image.to_tensor::<f32>();
    let (tokens, pos) = model.encode_image(&mut ctx, &input)?;
    let r = [reference_px[0] / resized.image.w as f64, reference_px[1] / resized.image.h as f64];
    let memory = model.decoder.memory(&mut ctx, &tokens, pos)?;
    let decoded = {
        let mut scorer = ModelScorer {
            model,
            ctx: &mut ctx,
            memory: &memory,
            refs: vec![r],
        };
        greedy_decode_batch(&mut scorer, 1, model.config.max_text_len)?.remove(0)
    };
    let mut seq = vec![BOS];
    seq.extend(&decoded.ids);
    let (_, trace) = model.decoder.forward(&mut ctx, &memory, &[r], &[seq])?;
    let layers = read_trace(&ctx, &trace)?;
    Ok(AttentionView {
        text: model.config.vocab.decode(&decoded.ids),
        kinds: model.decoder.cross_kinds(),
        layers,
        input_size: (resized.image.h, resized.image.w),
        layout: tokens.layout.clone(),
        reference: r,
        heads: model.config.heads,
        points: model.config.points,
    })
}

/// Plain values of one decoder layer's cross-attention.
#[derive(Clone, Debug)]
pub enum TraceLayer {
    /// `offsets[q][(h*L + l)*K + k] = (dx, dy)` raw offsets and matching
    /// weights.
    Deformable { offsets: Vec<Vec<[f64; 2]>>, weights: Vec<Vec<f64>> },
    /// `probs[h][q][token]`.
    Plain { probs: Vec<Vec<Vec<f64>>> },
}

fn read_trace(ctx: &Ctx<f32>, trace: &DecoderTrace) -> Result<Vec<TraceLayer>> {
    trace
        .layers
        .iter()
        .map(|l| match l {
            LayerTrace::Deformable(t) => {
                let off = ctx.g.value(t.offsets);
                let w = ctx.g.value(t.weights);
                let q = off.shape()[0];
                let n = w.shape()[1];
                let (od, wd) = (off.to_f64_vec(), w.to_f64_vec());
                Ok(TraceLayer::Deformable {
                    offsets: (0..q).map(|i| (0..n).map(|j| [od[(i * n + j) * 2], od[(i * n + j) * 2 + 1]]).collect()).collect(),
                    weights: (0..q).map(|i| wd[i * n..(i + 1) * n].to_vec()).collect(),
                })
            }
            LayerTrace::Plain(p) => {
                let t = ctx.g.value(*p);
                let s = t.shape().to_vec();
                if s.len() != 3 {
                    return Err(DeerError::Input(format!("unexpected attention shape {s:?}")));
                }
                let d = t.to_f64_vec();
                Ok(TraceLayer::Plain {
                    probs: (0..s[0])
                        .map(|h| (0..s[1]).map(|q| d[(h * s[1] + q) * s[2]..(h * s[1] + q + 1) * s[2]].to_vec()).collect())
                        .collect(),
                })
            }
        })
        .collect()
}
