use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use deer_cli::commands::{
    cmd_config, layer_file_name, load_model, ConfigArgs, CONFIG_FILE, FINAL_CHECKPOINT, METRICS_FILE,
};
use deer_cli::config::{reference_page, RunConfig};
use deer_cli::render::{deformable_splats, plain_heatmap, plain_mass, splat_heatmap};
use deer_cli::ConfigError;
use deer_core::data::Image;
use deer_core::model::{CrossKind, Deer, HEAD_PREFIX};
use deer_core::nn::LevelLayout;
use deer_core::params::ParamStore;
use deer_core::training::snapshot;
use deer_tensor::checkpoint;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A model small enough to train a few steps in a test.
const TINY: &str = "\
# tiny run
model.d_model = 16
model.enc_layers = 1
model.dec_layers = 2
model.heads = 2
model.points = 2
model.ffn_dim = 16
model.max_text_len = 5
model.backbone_channels = 8,8,16,16
model.head_channels = 8,4
model.gn_groups = 4
train.batch_size = 2
train.total_steps = 4
train.warmup_steps = 1
train.checkpoint_every = 2
data.image_h = 64
data.image_w = 64
data.words_max = 2
data.word_len_max = 3
data.scale_min = 1.0
data.scale_max = 1.5
eval.dataset_size = 3
";

fn deer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deer")).args(args).output().unwrap()
}

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.cfg");
    fs::write(&p, TINY).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let cfg = tiny_config(dir);
    let out = dir.join(name);
    let mut args = vec!["train", "--config", s(&cfg), "--out", s(&out), "--log-every", "0"];
    args.extend_from_slice(extra);
    let o = deer(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn final_ckpt(run: &Path) -> PathBuf {
    run.join("checkpoints").join(FINAL_CHECKPOINT)
}

#[test]
fn config_round_trips_through_text() {
    let mut c = RunConfig::from_text(TINY).unwrap();
    c.apply_override("train.lr_base=2e-3").unwrap();
    assert_eq!(c.train.lr_base, 2e-3);
    assert_eq!(c.model.backbone_channels, [8, 8, 16, 16]);
    assert_eq!(RunConfig::from_text(&c.render()).unwrap(), c);
    assert_eq!(RunConfig::from_text("").unwrap(), RunConfig::default());
}

#[test]
fn config_errors_are_specific() {
    assert!(matches!(RunConfig::from_text("model.colour = 3"), Err(ConfigError::UnknownKey(_))));
    assert!(matches!(RunConfig::from_text("train.seed = -1"), Err(ConfigError::BadValue { .. })));
    assert!(matches!(
        RunConfig::from_text("train.seed = 1\ntrain.seed = 2"),
        Err(ConfigError::Syntax { line: 2, .. })
    ));
    assert!(matches!(RunConfig::from_text("no equals sign"), Err(ConfigError::Syntax { line: 1, .. })));
    let bad = RunConfig::from_text("train.warmup_steps = 10\ntrain.total_steps = 10").unwrap();
    assert!(matches!(bad.validate(), Err(ConfigError::Invalid(_))));
}

#[test]
fn reference_page_lists_every_key() {
    let page = reference_page();
    for line in RunConfig::default().render().lines() {
        let key = line.split(" = ").next().unwrap();
        assert!(page.contains(&format!("`{key}`")), "{key}");
    }
    let resolved = cmd_config(&ConfigArgs::default(), false).unwrap();
    assert_eq!(resolved, RunConfig::default().render());
}

#[test]
fn usage_and_config_problems_exit_with_two() {
    assert_eq!(deer(&["config", "--set", "model.nonsense=1"]).status.code(), Some(2));
    assert_eq!(deer(&["config", "--set", "train.total_steps=0"]).status.code(), Some(2));
    assert_eq!(deer(&["eval", "--checkpoint", "/nonexistent/final.ckpt"]).status.code(), Some(2));
    assert_eq!(deer(&["train", "--frobnicate"]).status.code(), Some(2));
    let ok = deer(&["config", "--set", "train.seed=5"]);
    assert!(ok.status.success());
    assert!(String::from_utf8_lossy(&ok.stdout).contains("train.seed = 5"));
}

#[test]
fn training_writes_the_run_layout() {
    let dir = tempfile::tempdir().unwrap();
    let run = train(dir.path(), "run", &[]);
    for f in [CONFIG_FILE, METRICS_FILE, "checkpoints/step_000002.ckpt", "checkpoints/step_000004.ckpt"] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert!(final_ckpt(&run).exists());
    let metrics = fs::read_to_string(run.join(METRICS_FILE)).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "step\tL\tL_r\tL_s\tL_b\tL_t\tlr");
    assert_eq!(lines.len(), 5);
    assert!(lines[4].starts_with("4\t"));
    assert_eq!(lines[1].split('\t').count(), 7);
}

#[test]
fn training_and_evaluation_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = train(dir.path(), "a", &["--steps", "3"]);
    let b = train(dir.path(), "b", &["--steps", "3"]);
    assert_eq!(fs::read(a.join(METRICS_FILE)).unwrap(), fs::read(b.join(METRICS_FILE)).unwrap());
    assert_eq!(fs::read(final_ckpt(&a)).unwrap(), fs::read(final_ckpt(&b)).unwrap());
    let eval = |run: &Path| {
        let o = deer(&["eval", "--checkpoint", s(&final_ckpt(run)), "--gt-points"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        (o.stdout, fs::read(run.join("eval/report.txt")).unwrap())
    };
    assert_eq!(eval(&a), eval(&b));
    let c = train(dir.path(), "c", &["--steps", "3", "--seed", "9"]);
    assert_ne!(fs::read(a.join(METRICS_FILE)).unwrap(), fs::read(c.join(METRICS_FILE)).unwrap());
}

#[test]
fn resuming_reproduces_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let full = train(dir.path(), "full", &[]);
    let part = train(dir.path(), "part", &[]);
    let mid = part.join("checkpoints/step_000002.ckpt");
    let cfg = tiny_config(dir.path());
    let o = deer(&["train", "--config", s(&cfg), "--out", s(&part), "--log-every", "0", "--resume", s(&mid)]);
    assert!(o.status.success());
    assert_eq!(fs::read(full.join(METRICS_FILE)).unwrap(), fs::read(part.join(METRICS_FILE)).unwrap());
    assert_eq!(fs::read(final_ckpt(&full)).unwrap(), fs::read(final_ckpt(&part)).unwrap());
}

#[test]
fn detection_supervision_off_freezes_the_location_head() {
    let dir = tempfile::tempdir().unwrap();
    let run = train(dir.path(), "nodet", &["--detection-supervision", "false"]);
    let metrics = fs::read_to_string(run.join(METRICS_FILE)).unwrap();
    for line in metrics.lines().skip(1) {
        let f: Vec<&str> = line.split('\t').collect();
        assert_eq!(&f[3..6], &["0.000000", "0.000000", "0.000000"]);
        assert_eq!(f[1], f[2]);
    }
    let cfg = RunConfig::load(&run.join(CONFIG_FILE)).unwrap();
    assert!(!cfg.train.detection_supervision);
    let mut init = ParamStore::<f32>::new();
    Deer::new(cfg.model.clone(), &mut init, &mut ChaCha8Rng::seed_from_u64(cfg.train.seed)).unwrap();
    let (_, trained) = load_model(&cfg, &final_ckpt(&run)).unwrap();
    let (a, b) = (snapshot(&init, HEAD_PREFIX), snapshot(&trained, HEAD_PREFIX));
    assert!(!a.is_empty());
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert_ne!(snapshot(&init, "decoder."), snapshot(&trained, "decoder."));
    let o = deer(&["eval", "--checkpoint", s(&final_ckpt(&run)), "--gt-points"]);
    assert!(o.status.success());
    let report = String::from_utf8(o.stdout).unwrap();
    assert!(report.contains("mode: gt_points") && report.contains("[e2e]") && !report.contains("[detection]"));
}

/// Writes a run directory whose location head never fires.
fn silent_run(dir: &Path) -> PathBuf {
    let cfg = RunConfig::from_text(TINY).unwrap();
    let mut store = ParamStore::<f32>::new();
    let model = Deer::new(cfg.model.clone(), &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    model.head.set_constant_probability(&mut store, -20.0);
    let run = dir.join("silent");
    fs::create_dir_all(run.join("checkpoints")).unwrap();
    fs::write(run.join(CONFIG_FILE), cfg.render()).unwrap();
    checkpoint::save(final_ckpt(&run), &store.named()).unwrap();
    run
}

#[test]
fn blank_image_yields_an_empty_result_file() {
    let dir = tempfile::tempdir().unwrap();
    let run = silent_run(dir.path());
    let img = dir.path().join("blank.png");
    Image::new(48, 80).save(&img).unwrap();
    let out = dir.path().join("infer");
    let o = deer(&["infer", "--checkpoint", s(&final_ckpt(&run)), "--out", s(&out), "--overlay", s(&img)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(out.join("blank.txt")).unwrap(), "");
    let overlay = Image::load(&out.join("blank_overlay.png")).unwrap();
    assert_eq!((overlay.h, overlay.w), (48, 80));
}

#[test]
fn evaluation_accepts_a_long_side_and_a_beta_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let run = silent_run(dir.path());
    let ck = final_ckpt(&run);
    let o = deer(&["eval", "--checkpoint", s(&ck), "--long-side", "96"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = String::from_utf8(o.stdout).unwrap();
    assert!(report.contains("images: 3") && report.contains("[detection]") && report.contains("pred: 0"));
    let o = deer(&["eval", "--checkpoint", s(&ck), "--beta", "0,0.2"]);
    assert!(o.status.success());
    let csv = fs::read_to_string(run.join("eval/beta_curve.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().nth(2).unwrap().starts_with("0.2,"));
    assert_eq!(deer(&["eval", "--checkpoint", s(&ck), "--beta", "1.5"]).status.code(), Some(2));
}

#[test]
fn visualize_writes_one_map_per_decoder_layer() {
    let dir = tempfile::tempdir().unwrap();
    let run = silent_run(dir.path());
    let img = dir.path().join("img.png");
    let synth = dir.path().join("synth");
    let cfg = tiny_config(dir.path());
    assert!(deer(&["synth", "--config", s(&cfg), "--out", s(&synth), "--count", "1"]).status.success());
    fs::copy(synth.join("synth_00000.png"), &img).unwrap();
    let o = deer(&["visualize", "--checkpoint", s(&final_ckpt(&run)), "--point", "20,30", "--out", s(&run), s(&img)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let names: Vec<String> = String::from_utf8(o.stdout).unwrap().lines().map(String::from).collect();
    assert_eq!(names, vec!["layer1_deformable.png", "layer2_plain.png"]);
    for n in &names {
        let m = Image::load(&run.join("viz").join(n)).unwrap();
        assert_eq!((m.h, m.w), (64, 64));
    }
    assert!(fs::read_to_string(run.join("viz/trace.txt")).unwrap().contains("reference: 20.00,30.00"));
    assert_eq!(layer_file_name(4, CrossKind::Deformable), "layer5_deformable.png");
}

#[test]
fn plain_heatmap_keeps_attention_mass() {
    let layout = LevelLayout::new(vec![(4, 4), (2, 2), (1, 1)]);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    use rand::Rng;
    let probs: Vec<Vec<Vec<f64>>> = (0..2)
        .map(|_| {
            (0..3)
                .map(|_| {
                    let raw: Vec<f64> = (0..21).map(|_| rng.random_range(0.0..1.0)).collect();
                    let sum: f64 = raw.iter().sum();
                    raw.iter().map(|x| x / sum).collect()
                })
                .collect()
        })
        .collect();
    let mass = plain_mass(&probs);
    assert!((mass.iter().sum::<f64>() - 3.0).abs() < 1e-12);
    let map = plain_heatmap(&mass, &layout, (16, 16));
    assert!((map.iter().sum::<f64>() - 3.0).abs() < 1e-12);
    // the coarsest token spreads evenly over the whole input
    let single = plain_heatmap(&[vec![0.0; 20], vec![1.0]].concat(), &layout, (16, 16));
    assert!(single.iter().all(|&v| (v - 1.0 / 256.0).abs() < 1e-15));
}

#[test]
fn deformable_splats_cover_every_sample() {
    let layout = LevelLayout::new(vec![(8, 8), (4, 4)]);
    let (heads, points) = (2, 3);
    let n = heads * 2 * points;
    let offsets = vec![[0.0, 0.0]; n];
    let weights = vec![1.0 / (2 * points) as f64; n];
    let splats = deformable_splats(&offsets, &weights, [0.25, 0.5], &layout, heads, points, (32, 32));
    assert_eq!(splats.len(), n);
    assert!(splats.iter().all(|(p, _)| (p[0] - 8.0).abs() < 1e-12 && (p[1] - 16.0).abs() < 1e-12));
    // one pixel of the 4x4 level is 8 input pixels
    let mut shifted = offsets.clone();
    shifted[points] = [1.0, 0.0];
    let s2 = deformable_splats(&shifted, &weights, [0.25, 0.5], &layout, heads, points, (32, 32));
    assert!((s2[points].0[0] - 16.0).abs() < 1e-12);
    // an interior Gaussian dot integrates to about 2 pi sigma^2 times its weight
    let map = splat_heatmap(&[([16.0, 16.0], 0.5)], (32, 32), 1.5);
    let total: f64 = map.iter().sum();
    assert!((total - 0.5 * 2.0 * std::f64::consts::PI * 2.25).abs() < 0.02);
}
