use deer_core::data::{sample_at, DataConfig, LabeledImage, TextInstance};
use deer_core::evaluation::{
    detection_prf, e2e_counts, edit_distance, evaluate, ic15_filter, lexicon_correct, match_detections, run_beta_ablation,
    texts_match, EvalConfig, Prf, SpottingResult,
};
use deer_core::geometry::{polygon_iou, Polygon};
use deer_core::model::{Deer, ModelConfig, Vocab};
use deer_core::params::ParamStore;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Polygon {
    Polygon::rect(x0, y0, x1, y1).unwrap()
}

fn inst(p: Polygon, text: &str) -> TextInstance {
    TextInstance {
        polygon: p,
        text: text.into(),
        ignore: false,
    }
}

fn pred(p: Polygon, text: &str) -> SpottingResult {
    let c = p.vertices()[0];
    SpottingResult {
        polygon: p,
        reference: c,
        text: text.into(),
        confidence: 1.0,
    }
}

#[test]
fn edit_distance_examples() {
    assert_eq!(edit_distance("kitten", "sitting"), 3);
    assert_eq!(edit_distance("", "abc"), 3);
    assert_eq!(edit_distance("flaw", "lawn"), 2);
    assert_eq!(edit_distance("same", "same"), 0);
}

/// Recursive definition of the Levenshtein distance.
fn edit_oracle(a: &[char], b: &[char]) -> usize {
    match (a.split_first(), b.split_first()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, ra)), Some((y, rb))) => {
            let sub = edit_oracle(ra, rb) + usize::from(x != y);
            sub.min(edit_oracle(ra, b) + 1).min(edit_oracle(a, rb) + 1)
        }
    }
}

#[test]
fn lexicon_examples() {
    let lex: Vec<String> = ["CAT", "DOG", "BIRD"].iter().map(|s| s.to_string()).collect();
    assert_eq!(lexicon_correct("CVT", &lex), Some("CAT"));
    assert_eq!(lexicon_correct("dgo", &lex), Some("DOG"));
    assert_eq!(lexicon_correct("x", &[]), None);
    // equal distances resolve to the smallest entry
    let tie: Vec<String> = ["AB", "AA"].iter().map(|s| s.to_string()).collect();
    assert_eq!(lexicon_correct("AC", &tie), Some("AA"));
}

#[test]
fn ic15_examples() {
    assert_eq!(ic15_filter("hello!"), ("hello".to_string(), false));
    assert_eq!(ic15_filter("\"(WORLD).\""), ("WORLD".to_string(), false));
    assert_eq!(ic15_filter("a-b"), ("a-b".to_string(), false));
    assert_eq!(ic15_filter("##"), (String::new(), true));
    assert_eq!(ic15_filter("ab."), ("ab".to_string(), true));
    assert_eq!(ic15_filter("abc"), ("abc".to_string(), false));
}

#[test]
fn text_comparison_respects_case_flag() {
    assert!(texts_match("Cat", "CAT", false));
    assert!(!texts_match("Cat", "CAT", true));
}

#[test]
fn matching_examples() {
    let gts = vec![rect(0.0, 0.0, 10.0, 10.0), rect(20.0, 0.0, 30.0, 10.0), rect(40.0, 0.0, 50.0, 10.0)];
    let preds = vec![rect(21.0, 0.0, 31.0, 10.0), rect(0.0, 0.0, 10.0, 10.0), rect(70.0, 0.0, 80.0, 10.0)];
    let m = match_detections(&gts, &[false; 3], &preds, 0.5);
    assert_eq!(m.pairs.iter().map(|p| (p.0, p.1)).collect::<Vec<_>>(), vec![(0, 1), (1, 0)]);
    assert_eq!(m.unmatched_gt, vec![2]);
    assert_eq!(m.unmatched_pred, vec![2]);
    let (r, p, f) = detection_prf(&m);
    assert!((r - 2.0 / 3.0).abs() < 1e-12 && (p - 2.0 / 3.0).abs() < 1e-12 && (f - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn ignored_ground_truth_absorbs_predictions() {
    let gts = vec![rect(0.0, 0.0, 10.0, 10.0), rect(20.0, 0.0, 30.0, 10.0)];
    let preds = vec![rect(0.0, 0.0, 10.0, 10.0), rect(20.0, 0.0, 30.0, 10.0)];
    let m = match_detections(&gts, &[false, true], &preds, 0.5);
    assert_eq!(m.excluded_pred, vec![1]);
    assert_eq!((m.num_gt(), m.num_pred(), m.pairs.len()), (1, 1, 1));
}

#[test]
fn prf_edge_cases() {
    let empty = Prf::default();
    assert_eq!((empty.recall(), empty.precision(), empty.f_measure()), (0.0, 0.0, 0.0));
    let p = Prf {
        matched: 3,
        gt: 4,
        pred: 6,
    };
    assert!((p.f_measure() - 2.0 * 0.75 * 0.5 / 1.25).abs() < 1e-15);
}

/// Largest one-to-one matching over all admissible pairs, by exhaustive
/// search.
fn max_matching(adm: &[Vec<bool>], g: usize, used: &mut Vec<bool>) -> usize {
    if g == adm.len() {
        return 0;
    }
    let mut best = max_matching(adm, g + 1, used);
    for p in 0..used.len() {
        if adm[g][p] && !used[p] {
            used[p] = true;
            best = best.max(1 + max_matching(adm, g + 1, used));
            used[p] = false;
        }
    }
    best
}

fn random_rect(rng: &mut ChaCha8Rng) -> Polygon {
    let x = rng.random_range(0.0..40.0);
    let y = rng.random_range(0.0..40.0);
    rect(x, y, x + rng.random_range(6.0..16.0), y + rng.random_range(4.0..10.0))
}

#[test]
fn greedy_matching_is_near_optimal() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut greedy, mut best) = (Prf::default(), Prf::default());
    for _ in 0..200 {
        let gts: Vec<Polygon> = (0..rng.random_range(1..5)).map(|_| random_rect(&mut rng)).collect();
        let preds: Vec<Polygon> = (0..rng.random_range(1..5)).map(|_| random_rect(&mut rng)).collect();
        let m = match_detections(&gts, &vec![false; gts.len()], &preds, 0.3);
        let adm: Vec<Vec<bool>> = gts.iter().map(|g| preds.iter().map(|p| polygon_iou(g, p, 4.0) >= 0.3).collect()).collect();
        let opt = max_matching(&adm, 0, &mut vec![false; preds.len()]);
        assert!(m.pairs.len() <= opt);
        for (g, p, _) in &m.pairs {
            assert!(adm[*g][*p]);
        }
        greedy.add(Prf::from_match(&m));
        best.add(Prf {
            matched: opt,
            gt: gts.len(),
            pred: preds.len(),
        });
    }
    assert!(best.f_measure() - greedy.f_measure() <= 0.02);
}

#[test]
fn end_to_end_requires_matching_text() {
    let gts = vec![inst(rect(0.0, 0.0, 10.0, 10.0), "CAT"), inst(rect(20.0, 0.0, 30.0, 10.0), "DOG")];
    let preds = vec![pred(rect(0.0, 0.0, 10.0, 10.0), "cat"), pred(rect(20.0, 0.0, 30.0, 10.0), "DIG")];
    let cfg = EvalConfig::default();
    assert_eq!(e2e_counts(&gts, &preds, &cfg, None).matched, 1);
    let strict = EvalConfig {
        case_sensitive: true,
        ..EvalConfig::default()
    };
    assert_eq!(e2e_counts(&gts, &preds, &strict, None).matched, 0);
    let lex: Vec<String> = vec!["CAT".into(), "DOG".into()];
    assert_eq!(e2e_counts(&gts, &preds, &cfg, Some(&lex)).matched, 2);
}

#[test]
fn lexicon_turns_near_miss_into_match() {
    let gts = vec![inst(rect(0.0, 0.0, 10.0, 10.0), "CAT")];
    let preds = vec![pred(rect(0.0, 0.0, 10.0, 10.0), "CVT")];
    let lex: Vec<String> = vec!["CAT".into(), "EEL".into()];
    let cfg = EvalConfig::default();
    assert_eq!(e2e_counts(&gts, &preds, &cfg, None).f_measure(), 0.0);
    assert_eq!(e2e_counts(&gts, &preds, &cfg, Some(&lex)).f_measure(), 1.0);
}

#[test]
fn ic15_rules_apply_to_both_sides() {
    let gts = vec![inst(rect(0.0, 0.0, 10.0, 10.0), "(CAT)"), inst(rect(20.0, 0.0, 30.0, 10.0), "AB")];
    let preds = vec![pred(rect(0.0, 0.0, 10.0, 10.0), "CAT."), pred(rect(20.0, 0.0, 30.0, 10.0), "AB")];
    let cfg = EvalConfig {
        ic15_rules: true,
        ..EvalConfig::default()
    };
    let c = e2e_counts(&gts, &preds, &cfg, None);
    // the short word is ignored on both sides
    assert_eq!((c.matched, c.gt, c.pred), (1, 1, 1));
}

fn small_model(seed: u64) -> (Deer, ParamStore<f32>) {
    let cfg = ModelConfig {
        d_model: 16,
        enc_layers: 1,
        dec_layers: 2,
        heads: 2,
        points: 2,
        ffn_dim: 16,
        backbone_channels: [8, 8, 16, 16],
        head_channels: [8, 4],
        gn_groups: 4,
        max_text_len: 5,
        vocab: Vocab::new("ACEHKLNPTX").unwrap(),
        ..ModelConfig::default()
    };
    let mut store = ParamStore::new();
    let model = Deer::new(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (model, store)
}

fn dataset(n: usize) -> Vec<LabeledImage> {
    let cfg = DataConfig {
        image_h: 64,
        image_w: 64,
        words_max: 2,
        word_len_max: 3,
        scale_min: 1.0,
        scale_max: 1.5,
        ..DataConfig::default()
    };
    (0..n)
        .map(|i| {
            let s = sample_at(9, i as u64, &cfg).unwrap();
            LabeledImage {
                name: format!("s{i}"),
                image: s.image,
                instances: s.instances,
            }
        })
        .collect()
}

#[test]
fn silent_location_head_finds_nothing() {
    let (model, mut store) = small_model(1);
    model.head.set_constant_probability(&mut store, -20.0);
    let data = dataset(3);
    let r = evaluate(&model, &store, &data, &EvalConfig::default()).unwrap();
    let det = r.detection.unwrap();
    assert_eq!((det.pred, det.matched, r.e2e.pred), (0, 0, 0));
    assert!(det.gt > 0);
    assert_eq!((det.f_measure(), r.e2e.f_measure()), (0.0, 0.0));
    assert!(r.render().contains("[detection]"));
}

#[test]
fn evaluation_is_deterministic() {
    let (model, store) = small_model(2);
    let data = dataset(3);
    let cfg = EvalConfig {
        gt_points: true,
        lexicon: Some(vec!["CAT".into()]),
        ..EvalConfig::default()
    };
    let a = evaluate(&model, &store, &data, &cfg).unwrap().render();
    let b = evaluate(&model, &store, &data, &cfg).unwrap().render();
    assert_eq!(a, b);
    assert!(a.contains("mode: gt_points") && a.contains("[e2e_lexicon]") && !a.contains("[detection]"));
}

#[test]
fn zero_shift_equals_ground_truth_points() {
    let (model, store) = small_model(3);
    let data = dataset(3);
    let cfg = EvalConfig {
        gt_points: true,
        ..EvalConfig::default()
    };
    let plain = evaluate(&model, &store, &data, &cfg).unwrap();
    let sweep = run_beta_ablation(&model, &store, &data, &[0.0, 0.2], &EvalConfig::default()).unwrap();
    assert_eq!(sweep[0].1, plain);
    assert_eq!(sweep[0].1.e2e.gt, plain.e2e.pred);
    assert!(run_beta_ablation(&model, &store, &data, &[1.5], &cfg).is_err());
}

proptest! {
    #[test]
    fn edit_distance_matches_recursion(a in "[abc]{0,6}", b in "[abc]{0,6}") {
        let (ca, cb): (Vec<char>, Vec<char>) = (a.chars().collect(), b.chars().collect());
        prop_assert_eq!(edit_distance(&a, &b), edit_oracle(&ca, &cb));
        prop_assert_eq!(edit_distance(&a, &b), edit_distance(&b, &a));
    }

    #[test]
    fn lexicon_picks_a_closest_entry(word in "[A-D]{1,5}", words in proptest::collection::vec("[A-D]{1,5}", 1..6)) {
        let got = lexicon_correct(&word, &words).unwrap();
        let best = words.iter().map(|w| edit_distance(&word, w)).min().unwrap();
        prop_assert_eq!(edit_distance(&word, got), best);
        prop_assert!(words.iter().filter(|w| edit_distance(&word, w) == best).all(|w| got <= w.as_str()));
    }

    #[test]
    fn ic15_filter_is_idempotent(w in "[-.!a-zA-Z0-9()]{0,8}") {
        let (once, ign) = ic15_filter(&w);
        let (twice, ign2) = ic15_filter(&once);
        prop_assert_eq!(&once, &twice);
        prop_assert_eq!(ign, ign2);
        prop_assert_eq!(ign, once.chars().count() < 3);
    }
}
