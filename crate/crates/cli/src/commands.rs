//! The `deer` subcommands.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use deer_core::data::{format_coords, load_dir, sample_at, write_sample, Image, LabeledImage};
use deer_core::evaluation::{
    attention_trace, evaluate, run_beta_ablation, run_image, EvalConfig, PostConfig, References, Report,
    TraceLayer,
};
use deer_core::geometry::{Point, PointMode};
use deer_core::model::{CrossKind, Deer};
use deer_core::params::ParamStore;
use deer_core::training::{Trainer, METRICS_HEADER};
use deer_tensor::checkpoint;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{reference_page, RunConfig};
use crate::error::{CliError, CliResult};
use crate::render;

pub const CONFIG_FILE: &str = "config.resolved";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const METRICS_FILE: &str = "metrics.tsv";
pub const EVAL_DIR: &str = "eval";
pub const VIZ_DIR: &str = "viz";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// Config file plus `key=value` overrides shared by every command.
#[derive(Clone, Debug, Default)]
pub struct ConfigArgs {
    pub config: Option<PathBuf>,
    pub sets: Vec<String>,
}

impl ConfigArgs {
    /// The file (or the defaults) with overrides applied, not yet
    /// validated.
    fn load(&self, fallback: Option<PathBuf>) -> CliResult<RunConfig> {
        let mut cfg = match self.config.clone().or(fallback) {
            Some(p) => RunConfig::load(&p)?,
            None => RunConfig::default(),
        };
        for kv in &self.sets {
            cfg.apply_override(kv)?;
        }
        Ok(cfg)
    }
}

/// Run directory of a checkpoint stored as `<run>/checkpoints/<file>`.
pub fn run_dir_of(checkpoint: &Path) -> Option<PathBuf> {
    let dir = checkpoint.parent()?;
    if dir.file_name()? == CHECKPOINT_DIR {
        dir.parent().map(Path::to_path_buf)
    } else {
        Some(dir.to_path_buf())
    }
}

/// Config for a checkpoint: the explicit file, else the run's
/// `config.resolved`.
fn checkpoint_config(args: &ConfigArgs, checkpoint: &Path) -> CliResult<RunConfig> {
    let fallback = match &args.config {
        Some(_) => None,
        None => {
            let p = run_dir_of(checkpoint).map(|d| d.join(CONFIG_FILE));
            match p {
                Some(p) if p.exists() => Some(p),
                _ => {
                    return Err(CliError::Usage(format!(
                        "no --config given and no {CONFIG_FILE} found next to {}",
                        checkpoint.display()
                    )))
                }
            }
        }
    };
    let cfg = args.load(fallback)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Builds the network described by `cfg` and loads `checkpoint` into it.
pub fn load_model(cfg: &RunConfig, checkpoint: &Path) -> CliResult<(Deer, ParamStore<f32>)> {
    if !checkpoint.exists() {
        return Err(CliError::Usage(format!("checkpoint {} does not exist", checkpoint.display())));
    }
    let mut store = ParamStore::new();
    let model = Deer::new(cfg.model.clone(), &mut store, &mut ChaCha8Rng::seed_from_u64(0))?;
    let named = checkpoint::load::<f32>(checkpoint)?;
    store.load_named(&named, true)?;
    Ok((model, store))
}

fn create_dir(p: &Path) -> CliResult<()> {
    fs::create_dir_all(p).map_err(CliError::io(format!("creating {}", p.display())))
}

fn write_file(p: &Path, contents: &[u8]) -> CliResult<()> {
    fs::write(p, contents).map_err(CliError::io(format!("writing {}", p.display())))
}

#[derive(Clone, Debug, Default)]
pub struct TrainArgs {
    pub config: ConfigArgs,
    pub out: PathBuf,
    pub steps: Option<usize>,
    pub seed: Option<u64>,
    pub detection_supervision: Option<bool>,
    pub perturb: Option<bool>,
    pub resume: Option<PathBuf>,
    /// Progress lines on stderr every this many steps; 0 is silent.
    pub log_every: usize,
}

/// The config a training run uses: file, overrides, then flags.
pub fn train_config(args: &TrainArgs) -> CliResult<RunConfig> {
    let mut cfg = args.config.load(None)?;
    if let Some(s) = args.steps {
        cfg.train.total_steps = s;
        if cfg.train.warmup_steps >= s {
            cfg.train.warmup_steps = s / 10;
        }
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    if let Some(d) = args.detection_supervision {
        cfg.train.detection_supervision = d;
    }
    if let Some(p) = args.perturb {
        cfg.train.perturb = p;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Trains to `train.total_steps`, writing the run directory layout.
pub fn cmd_train(args: &TrainArgs) -> CliResult<()> {
    let cfg = train_config(args)?;
    let ckpt_dir = args.out.join(CHECKPOINT_DIR);
    create_dir(&ckpt_dir)?;
    write_file(&args.out.join(CONFIG_FILE), cfg.render().as_bytes())?;
    let mut trainer = Trainer::new(cfg.model.clone(), cfg.train.clone(), cfg.data.clone(), cfg.augment.clone())?;
    let metrics_path = args.out.join(METRICS_FILE);
    let mut log = format!("{METRICS_HEADER}\n");
    if let Some(r) = &args.resume {
        if !r.exists() {
            return Err(CliError::Usage(format!("checkpoint {} does not exist", r.display())));
        }
        trainer.restore(&checkpoint::load::<f32>(r)?)?;
        // keep the logged steps the checkpoint already covers
        if let Ok(old) = fs::read_to_string(&metrics_path) {
            for line in old.lines().skip(1) {
                let step = line.split('\t').next().and_then(|s| s.parse::<usize>().ok());
                if step.is_some_and(|s| s <= trainer.step) {
                    log.push_str(line);
                    log.push('\n');
                }
            }
        }
    }
    write_file(&metrics_path, log.as_bytes())?;
    let mut metrics = fs::OpenOptions::new()
        .append(true)
        .open(&metrics_path)
        .map_err(CliError::io(format!("opening {}", metrics_path.display())))?;
    let every = cfg.train.checkpoint_every;
    while trainer.step < cfg.train.total_steps {
        let b = trainer.step_synthetic()?;
        writeln!(metrics, "{}", b.tsv()).map_err(CliError::io("writing metrics"))?;
        if args.log_every > 0 && b.step % args.log_every == 0 {
            eprintln!(
                "step {} L {:.4} L_r {:.4} L_s {:.4} L_b {:.4} L_t {:.4} lr {:.2e}",
                b.step, b.total, b.recognition, b.shrink, b.binary, b.thresh, b.lr
            );
        }
        if every > 0 && b.step % every == 0 {
            checkpoint::save(ckpt_dir.join(format!("step_{:06}.ckpt", b.step)), &trainer.checkpoint())?;
        }
    }
    checkpoint::save(ckpt_dir.join(FINAL_CHECKPOINT), &trainer.checkpoint())?;
    Ok(())
}

#[derive(Clone, Debug, Default)]
pub struct EvalArgs {
    pub config: ConfigArgs,
    pub checkpoint: PathBuf,
    /// Directory of images with annotation files; synthetic when absent.
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub lexicon: Option<PathBuf>,
    pub ic15_rules: bool,
    pub gt_points: bool,
    pub case_sensitive: bool,
    pub point_mode: Option<PointMode>,
    pub beta: Option<Vec<f64>>,
    pub long_side: Option<usize>,
}

/// The synthetic evaluation set described by `cfg`.
pub fn synthetic_dataset(cfg: &RunConfig) -> CliResult<Vec<LabeledImage>> {
    (0..cfg.eval.dataset_size)
        .map(|i| {
            let s = sample_at(cfg.eval.dataset_seed, i as u64, &cfg.data)?;
            Ok(LabeledImage {
                name: format!("synth_{i:05}"),
                image: s.image,
                instances: s.instances,
            })
        })
        .collect()
}

pub fn read_lexicon(path: &Path) -> CliResult<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read lexicon {}: {e}", path.display())))?;
    let words: Vec<String> = text.lines().map(str::trim).filter(|w| !w.is_empty()).map(String::from).collect();
    if words.is_empty() {
        return Err(CliError::Usage(format!("lexicon {} is empty", path.display())));
    }
    Ok(words)
}

fn post_config(cfg: &RunConfig) -> PostConfig {
    cfg.eval.post.clone()
}

fn long_side(cfg: &RunConfig, flag: Option<usize>) -> Option<usize> {
    match flag.unwrap_or(cfg.eval.long_side) {
        0 => None,
        n => Some(n),
    }
}

/// Evaluation protocol from the config and flags.
pub fn eval_config(cfg: &RunConfig, args: &EvalArgs) -> CliResult<EvalConfig> {
    Ok(EvalConfig {
        post: post_config(cfg),
        iou_threshold: cfg.eval.iou_threshold,
        case_sensitive: args.case_sensitive || cfg.eval.case_sensitive,
        ic15_rules: args.ic15_rules || cfg.eval.ic15_rules,
        gt_points: args.gt_points,
        point_mode: args.point_mode.unwrap_or(cfg.eval.point_mode),
        long_side: long_side(cfg, args.long_side),
        lexicon: args.lexicon.as_deref().map(read_lexicon).transpose()?,
    })
}

/// Output of an evaluation: the report text and, for β sweeps, the curve.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutput {
    pub report: String,
    pub beta_curve: Option<String>,
}

pub const BETA_CSV_HEADER: &str = "beta,recall,precision,f_measure,matched,gt,pred";

fn beta_csv(rows: &[(f64, Report)]) -> String {
    let mut s = format!("{BETA_CSV_HEADER}\n");
    for (b, r) in rows {
        let p = &r.e2e;
        s.push_str(&format!(
            "{b},{:.6},{:.6},{:.6},{},{},{}\n",
            p.recall(),
            p.precision(),
            p.f_measure(),
            p.matched,
            p.gt,
            p.pred
        ));
    }
    s
}

/// Runs the evaluation and writes `eval/report.txt` (and
/// `eval/beta_curve.csv` for β sweeps) under the output directory.
pub fn cmd_eval(args: &EvalArgs) -> CliResult<EvalOutput> {
    let cfg = checkpoint_config(&args.config, &args.checkpoint)?;
    let ecfg = eval_config(&cfg, args)?;
    let (model, store) = load_model(&cfg, &args.checkpoint)?;
    let data = match &args.data {
        Some(d) => {
            if !d.is_dir() {
                return Err(CliError::Usage(format!("dataset directory {} does not exist", d.display())));
            }
            load_dir(d)?
        }
        None => synthetic_dataset(&cfg)?,
    };
    let out = match &args.beta {
        Some(betas) => {
            if betas.iter().any(|b| !(0.0..=1.0).contains(b)) {
                return Err(CliError::Usage("--beta values must lie in [0, 1]".into()));
            }
            let rows = run_beta_ablation(&model, &store, &data, betas, &ecfg)?;
            let mut report = String::new();
            for (b, r) in &rows {
                report.push_str(&format!("[beta]\nvalue: {b}\n\n"));
                report.push_str(&r.render());
                report.push('\n');
            }
            EvalOutput {
                report,
                beta_curve: Some(beta_csv(&rows)),
            }
        }
        None => EvalOutput {
            report: evaluate(&model, &store, &data, &ecfg)?.render(),
            beta_curve: None,
        },
    };
    let dir = args.out.clone().or_else(|| run_dir_of(&args.checkpoint)).unwrap_or_else(|| PathBuf::from("."));
    let eval_dir = dir.join(EVAL_DIR);
    create_dir(&eval_dir)?;
    write_file(&eval_dir.join("report.txt"), out.report.as_bytes())?;
    if let Some(c) = &out.beta_curve {
        write_file(&eval_dir.join("beta_curve.csv"), c.as_bytes())?;
    }
    Ok(out)
}

#[derive(Clone, Debug, Default)]
pub struct InferArgs {
    pub config: ConfigArgs,
    pub checkpoint: PathBuf,
    pub images: Vec<PathBuf>,
    pub out: PathBuf,
    pub overlay: bool,
    pub long_side: Option<usize>,
    pub point_mode: Option<PointMode>,
}

/// One annotation line per result: coordinates, text, confidence.
pub fn format_results(results: &[deer_core::evaluation::SpottingResult]) -> String {
    results
        .iter()
        .map(|r| format!("{}\t{}\t{:.4}\n", format_coords(&r.polygon), r.text, r.confidence))
        .collect()
}

fn stem(p: &Path) -> String {
    p.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned())
}

/// Spots text in every image and writes `<stem>.txt` (and
/// `<stem>_overlay.png`) to the output directory.
pub fn cmd_infer(args: &InferArgs) -> CliResult<()> {
    let cfg = checkpoint_config(&args.config, &args.checkpoint)?;
    let (model, store) = load_model(&cfg, &args.checkpoint)?;
    create_dir(&args.out)?;
    let mode = args.point_mode.unwrap_or(cfg.eval.point_mode);
    for path in &args.images {
        if !path.exists() {
            return Err(CliError::Usage(format!("image {} does not exist", path.display())));
        }
        let image = Image::load(path)?;
        let out = run_image(&model, &store, &image, &References::Detect(mode), &post_config(&cfg), long_side(&cfg, args.long_side))?;
        let name = stem(path);
        write_file(&args.out.join(format!("{name}.txt")), format_results(&out.results).as_bytes())?;
        if args.overlay {
            render::overlay(&image, &out.results).save(&args.out.join(format!("{name}_overlay.png")))?;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, Default)]
pub struct VisualizeArgs {
    pub config: ConfigArgs,
    pub checkpoint: PathBuf,
    pub image: PathBuf,
    /// Reference point in image pixels; detected when absent.
    pub point: Option<Point>,
    pub out: PathBuf,
}

/// Splat width of deformable sampling locations, in pixels.
pub const SPLAT_SIGMA: f64 = 1.5;

/// File name of decoder layer `index` (0-based).
pub fn layer_file_name(index: usize, kind: CrossKind) -> String {
    format!("layer{}_{}.png", index + 1, kind.name())
}

/// Heatmap of one decoder layer over the padded input.
pub fn layer_heatmap(view: &deer_core::evaluation::AttentionView, layer: &TraceLayer) -> Vec<f64> {
    match layer {
        TraceLayer::Plain { probs } => render::plain_heatmap(&render::plain_mass(probs), &view.layout, view.input_size),
        TraceLayer::Deformable { offsets, weights } => {
            let splats: Vec<_> = offsets
                .iter()
                .zip(weights)
                .flat_map(|(o, w)| {
                    render::deformable_splats(o, w, view.reference, &view.layout, view.heads, view.points, view.input_size)
                })
                .collect();
            render::splat_heatmap(&splats, view.input_size, SPLAT_SIGMA)
        }
    }
}

/// Writes one heatmap per decoder layer under `viz/`; returns the file
/// names in layer order.
pub fn cmd_visualize(args: &VisualizeArgs) -> CliResult<Vec<String>> {
    let cfg = checkpoint_config(&args.config, &args.checkpoint)?;
    let (model, store) = load_model(&cfg, &args.checkpoint)?;
    if !args.image.exists() {
        return Err(CliError::Usage(format!("image {} does not exist", args.image.display())));
    }
    let image = Image::load(&args.image)?;
    let point = match args.point {
        Some(p) => p,
        None => {
            let out = run_image(&model, &store, &image, &References::Detect(cfg.eval.point_mode), &post_config(&cfg), None)?;
            match out.results.first() {
                Some(r) => r.reference,
                None => [image.w as f64 / 2.0, image.h as f64 / 2.0],
            }
        }
    };
    let view = attention_trace(&model, &store, &image, point)?;
    let dir = args.out.join(VIZ_DIR);
    create_dir(&dir)?;
    let mut names = Vec::new();
    for (i, (layer, kind)) in view.layers.iter().zip(&view.kinds).enumerate() {
        let name = layer_file_name(i, *kind);
        render::grayscale(&layer_heatmap(&view, layer), view.input_size).save(&dir.join(&name))?;
        names.push(name);
    }
    let summary = format!("text: {}\nreference: {:.2},{:.2}\n", view.text, point[0], point[1]);
    write_file(&dir.join("trace.txt"), summary.as_bytes())?;
    Ok(names)
}

/// Writes `count` synthetic images with annotations to `out`.
pub fn cmd_synth(config: &ConfigArgs, out: &Path, count: usize, seed: u64) -> CliResult<()> {
    let cfg = config.load(None)?;
    cfg.validate()?;
    create_dir(out)?;
    for i in 0..count {
        let s = sample_at(seed, i as u64, &cfg.data)?;
        write_sample(out, &format!("synth_{i:05}"), &s)?;
    }
    Ok(())
}

/// The reference page, or the resolved config when a file or overrides
/// are given.
pub fn cmd_config(config: &ConfigArgs, reference: bool) -> CliResult<String> {
    if reference {
        return Ok(reference_page());
    }
    let cfg = config.load(None)?;
    cfg.validate()?;
    Ok(cfg.render())
}
