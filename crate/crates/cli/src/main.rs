use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use deer_cli::commands::{self, ConfigArgs, EvalArgs, InferArgs, TrainArgs, VisualizeArgs};
use deer_cli::{init_threads, CliError, CliResult};
use deer_core::geometry::{Point, PointMode};

#[derive(Parser)]
#[command(name = "deer", version, about = "Train, evaluate and run the DEER scene-text spotter")]
struct Cli {
    /// Worker threads.
    #[arg(long, global = true, env = "DEER_THREADS", default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigFlags {
    /// Config file of `section.key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.lr_base=1e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigFlags {
    fn into_args(self) -> ConfigArgs {
        ConfigArgs {
            config: self.config,
            sets: self.sets,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train on synthetic data.
    Train {
        #[command(flatten)]
        config: ConfigFlags,
        /// Run directory.
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Total steps; overrides `train.total_steps`.
        #[arg(long)]
        steps: Option<usize>,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Train the location head; `false` leaves it frozen.
        #[arg(long)]
        detection_supervision: Option<bool>,
        /// Jitter reference points during training.
        #[arg(long)]
        perturb: Option<bool>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Progress interval on stderr; 0 is silent.
        #[arg(long, default_value_t = 50)]
        log_every: usize,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[command(flatten)]
        config: ConfigFlags,
        /// Model checkpoint; without `--config` its run's `config.resolved` is used.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory of images with `.txt` annotations; synthetic if absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Directory that receives `eval/`; defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Word list, one per line.
        #[arg(long)]
        lexicon: Option<PathBuf>,
        /// Strip non-alphanumeric edges and ignore words shorter than three characters.
        #[arg(long)]
        ic15_rules: bool,
        /// Decode at ground-truth reference points.
        #[arg(long)]
        gt_points: bool,
        /// Compare transcriptions without case folding.
        #[arg(long)]
        case_sensitive: bool,
        /// Reference point of each detection: `center` or `inner`.
        #[arg(long)]
        point_mode: Option<PointMode>,
        /// Comma-separated reference shifts toward the top-left corner.
        #[arg(long, value_delimiter = ',')]
        beta: Option<Vec<f64>>,
        /// Resize so the longer image side has this length; 0 keeps the size.
        #[arg(long)]
        long_side: Option<usize>,
    },
    /// Spot text in images.
    Infer {
        #[command(flatten)]
        config: ConfigFlags,
        /// Model checkpoint; without `--config` its run's `config.resolved` is used.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input images.
        #[arg(required = true)]
        images: Vec<PathBuf>,
        /// Directory for per-image `.txt` results.
        #[arg(long, default_value = "infer")]
        out: PathBuf,
        /// Also write images with outlines, reference points and text.
        #[arg(long)]
        overlay: bool,
        /// Resize so the longer image side has this length; 0 keeps the size.
        #[arg(long)]
        long_side: Option<usize>,
        /// Reference point of each detection: `center` or `inner`.
        #[arg(long)]
        point_mode: Option<PointMode>,
    },
    /// Save decoder cross-attention maps for one reference point.
    Visualize {
        #[command(flatten)]
        config: ConfigFlags,
        /// Model checkpoint; without `--config` its run's `config.resolved` is used.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input image.
        image: PathBuf,
        /// `x,y` in image pixels, or `auto` to use the first detection.
        #[arg(long, default_value = "auto")]
        point: String,
        /// Directory that receives `viz/`.
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Write a synthetic dataset with annotations.
    Synth {
        #[command(flatten)]
        config: ConfigFlags,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Number of images.
        #[arg(long, default_value_t = 200)]
        count: usize,
        /// Generator seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the resolved config, or the reference of every key.
    Config {
        #[command(flatten)]
        config: ConfigFlags,
        /// Describe every key with its default.
        #[arg(long)]
        reference: bool,
    },
}

fn parse_point(s: &str) -> CliResult<Option<Point>> {
    if s == "auto" {
        return Ok(None);
    }
    let bad = || CliError::Usage(format!("--point expects `x,y` or `auto`, got {s:?}"));
    let (x, y) = s.split_once(',').ok_or_else(bad)?;
    let x: f64 = x.trim().parse().map_err(|_| bad())?;
    let y: f64 = y.trim().parse().map_err(|_| bad())?;
    Ok(Some([x, y]))
}

fn run(cli: Cli) -> CliResult<()> {
    init_threads(cli.threads)?;
    match cli.command {
        Command::Train {
            config,
            out,
            steps,
            seed,
            detection_supervision,
            perturb,
            resume,
            log_every,
        } => commands::cmd_train(&TrainArgs {
            config: config.into_args(),
            out,
            steps,
            seed,
            detection_supervision,
            perturb,
            resume,
            log_every,
        }),
        Command::Eval {
            config,
            checkpoint,
            data,
            out,
            lexicon,
            ic15_rules,
            gt_points,
            case_sensitive,
            point_mode,
            beta,
            long_side,
        } => {
            let out = commands::cmd_eval(&EvalArgs {
                config: config.into_args(),
                checkpoint,
                data,
                out,
                lexicon,
                ic15_rules,
                gt_points,
                case_sensitive,
                point_mode,
                beta,
                long_side,
            })?;
            print!("{}", out.beta_curve.unwrap_or(out.report));
            Ok(())
        }
        Command::Infer {
            config,
            checkpoint,
            images,
            out,
            overlay,
            long_side,
            point_mode,
        } => commands::cmd_infer(&InferArgs {
            config: config.into_args(),
            checkpoint,
            images,
            out,
            overlay,
            long_side,
            point_mode,
        }),
        Command::Visualize {
            config,
            checkpoint,
            image,
            point,
            out,
        } => {
            let names = commands::cmd_visualize(&VisualizeArgs {
                config: config.into_args(),
                checkpoint,
                image,
                point: parse_point(&point)?,
                out,
            })?;
            for n in names {
                println!("{n}");
            }
            Ok(())
        }
        Command::Synth { config, out, count, seed } => commands::cmd_synth(&config.into_args(), &out, count, seed),
        Command::Config { config, reference } => {
            print!("{}", commands::cmd_config(&config.into_args(), reference)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("deer: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
