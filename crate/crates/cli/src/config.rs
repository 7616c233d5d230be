//! Run configuration: `section.key = value` files with command-line
//! overrides.

use std::fmt::Write as _;
use std::path::Path;

use deer_core::data::{AugmentConfig, DataConfig};
use deer_core::evaluation::PostConfig;
use deer_core::geometry::PointMode;
use deer_core::model::{ModelConfig, Vocab};
use deer_core::training::TrainConfig;

use crate::error::ConfigError;

/// Evaluation settings that live in the config file.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSettings {
    pub post: PostConfig,
    pub iou_threshold: f64,
    pub case_sensitive: bool,
    pub ic15_rules: bool,
    pub point_mode: PointMode,
    /// 0 keeps the input scale.
    pub long_side: usize,
    pub dataset_seed: u64,
    pub dataset_size: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            post: PostConfig::default(),
            iou_threshold: 0.5,
            case_sensitive: false,
            ic15_rules: false,
            point_mode: PointMode::Center,
            long_side: 0,
            dataset_seed: 1_000_003,
            dataset_size: 200,
        }
    }
}

/// Everything a command needs besides its flags.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub augment: AugmentConfig,
    pub eval: EvalSettings,
}

/// A value that can appear on the right of `key = value`.
trait ConfigValue: Sized {
    fn parse(s: &str) -> Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! from_str_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse(s: &str) -> Result<Self, String> {
                s.parse().map_err(|e| format!("{e}"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

from_str_value!(usize, u64, f64, bool, PointMode);

impl ConfigValue for String {
    fn parse(s: &str) -> Result<Self, String> {
        Ok(s.to_string())
    }
    fn render(&self) -> String {
        self.clone()
    }
}

impl ConfigValue for Vocab {
    fn parse(s: &str) -> Result<Self, String> {
        Vocab::new(s).map_err(|e| e.to_string())
    }
    fn render(&self) -> String {
        self.symbols()
    }
}

impl<const N: usize> ConfigValue for [usize; N] {
    fn parse(s: &str) -> Result<Self, String> {
        let v = s
            .split(',')
            .map(|p| p.trim().parse::<usize>().map_err(|e| e.to_string()))
            .collect::<Result<Vec<_>, _>>()?;
        v.try_into().map_err(|v: Vec<usize>| format!("expected {N} comma-separated values, got {}", v.len()))
    }
    fn render(&self) -> String {
        self.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
    }
}

macro_rules! keys {
    ($($key:literal => $($field:ident).+ , $doc:literal;)*) => {
        /// Every key with its description, in file order.
        pub const KEYS: &[(&str, &str)] = &[$(($key, $doc)),*];

        impl RunConfig {
            /// Current value of `key` in file syntax.
            pub fn get(&self, key: &str) -> Result<String, ConfigError> {
                match key {
                    $($key => Ok(self.$($field).+.render()),)*
                    _ => Err(ConfigError::UnknownKey(key.to_string())),
                }
            }

            pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
                match key {
                    $($key => {
                        self.$($field).+ = ConfigValue::parse(value).map_err(|reason| ConfigError::BadValue {
                            key: key.to_string(),
                            value: value.to_string(),
                            reason,
                        })?;
                    })*
                    _ => return Err(ConfigError::UnknownKey(key.to_string())),
                }
                Ok(())
            }
        }
    };
}

keys! {
    "model.d_model" => model.d_model, "Token width; a multiple of 4 divisible by the head count.";
    "model.enc_layers" => model.enc_layers, "Deformable encoder layers.";
    "model.dec_layers" => model.dec_layers, "Decoder layers; even when attention alternates.";
    "model.heads" => model.heads, "Attention heads.";
    "model.points" => model.points, "Sampling points per head and level in deformable attention.";
    "model.ffn_dim" => model.ffn_dim, "Hidden width of the feed-forward blocks.";
    "model.vocab" => model.vocab, "Recognisable characters, in id order.";
    "model.max_text_len" => model.max_text_len, "Longest transcription the decoder emits.";
    "model.backbone_channels" => model.backbone_channels, "Channels of the four backbone stages (1/4 to 1/32).";
    "model.head_channels" => model.head_channels, "Channels of the two upsampling stages of each head branch.";
    "model.gn_groups" => model.gn_groups, "Group-norm groups.";
    "model.db_k" => model.db_k, "Steepness k of the approximate binarisation.";
    "model.alternate_attention" => model.alternate_attention, "Alternate deformable and plain cross-attention in the decoder.";
    "train.lambda_s" => train.lambda_s, "Weight of the probability-map loss.";
    "train.lambda_b" => train.lambda_b, "Weight of the binary-map loss.";
    "train.lambda_t" => train.lambda_t, "Weight of the threshold-map loss.";
    "train.lr_base" => train.lr_base, "Peak learning rate.";
    "train.lr_min" => train.lr_min, "Final learning rate of the cosine decay.";
    "train.warmup_steps" => train.warmup_steps, "Linear warm-up steps.";
    "train.total_steps" => train.total_steps, "Optimisation steps.";
    "train.batch_size" => train.batch_size, "Images per step.";
    "train.n_instances" => train.n_instances, "Text instances decoded per image.";
    "train.perturb" => train.perturb, "Perturb training reference points.";
    "train.detection_supervision" => train.detection_supervision, "Train the location head.";
    "train.point_mode" => train.point_mode, "Training reference point: center or inner.";
    "train.augment" => train.augment, "Rotate, rescale, crop and colour-jitter training images.";
    "train.weight_decay" => train.weight_decay, "Decoupled weight decay.";
    "train.grad_clip" => train.grad_clip, "Global gradient-norm clip.";
    "train.checkpoint_every" => train.checkpoint_every, "Checkpoint interval in steps; 0 keeps only the final one.";
    "train.seed" => train.seed, "Seed of initialisation, data and sampling.";
    "data.image_h" => data.image_h, "Synthetic image height.";
    "data.image_w" => data.image_w, "Synthetic image width.";
    "data.words_min" => data.words_min, "Fewest words per image.";
    "data.words_max" => data.words_max, "Most words per image.";
    "data.word_len_min" => data.word_len_min, "Shortest word.";
    "data.word_len_max" => data.word_len_max, "Longest word.";
    "data.glyphs" => data.glyphs, "Characters words are drawn from.";
    "data.rotation" => data.rotation, "Word rotation range in degrees (symmetric).";
    "data.scale_min" => data.scale_min, "Smallest pixels per font cell.";
    "data.scale_max" => data.scale_max, "Largest pixels per font cell.";
    "data.noise" => data.noise, "Amplitude of uniform pixel noise.";
    "data.shrink_ratio" => data.shrink_ratio, "Shrink ratio of probability-map targets.";
    "data.thresh_min" => data.thresh_min, "Threshold-map target far from text edges.";
    "data.thresh_max" => data.thresh_max, "Threshold-map target on text edges.";
    "augment.rotation" => augment.rotation, "Rotation range in degrees (symmetric).";
    "augment.resize_min" => augment.resize_min, "Smallest resize factor.";
    "augment.resize_max" => augment.resize_max, "Largest resize factor.";
    "augment.crop_size" => augment.crop_size, "Side of the square crop.";
    "augment.jitter_prob" => augment.jitter_prob, "Probability of colour jitter.";
    "augment.jitter" => augment.jitter, "Largest brightness, contrast and saturation change.";
    "eval.bin_thresh" => eval.post.bin_thresh, "Probability above which a pixel is text.";
    "eval.unclip_ratio" => eval.post.unclip_ratio, "Dilation factor r of detected regions.";
    "eval.min_area" => eval.post.min_area, "Smallest region in pixels.";
    "eval.min_score" => eval.post.min_score, "Smallest mean probability of a region.";
    "eval.simplify" => eval.post.simplify, "Outline simplification tolerance in pixels.";
    "eval.iou_threshold" => eval.iou_threshold, "IoU needed for a match.";
    "eval.case_sensitive" => eval.case_sensitive, "Compare transcriptions case-sensitively.";
    "eval.ic15_rules" => eval.ic15_rules, "Strip edge punctuation and ignore words shorter than 3.";
    "eval.point_mode" => eval.point_mode, "Inference reference point: center or inner.";
    "eval.long_side" => eval.long_side, "Resize the longer image side to this before inference; 0 keeps the size.";
    "eval.dataset_seed" => eval.dataset_seed, "Seed of the synthetic evaluation set.";
    "eval.dataset_size" => eval.dataset_size, "Images in the synthetic evaluation set.";
}

/// Splits one `key = value` line; `None` for blanks and comments.
fn parse_line(line: &str, number: usize) -> Result<Option<(&str, &str)>, ConfigError> {
    let line = match line.find('#') {
        Some(i) => &line[..i],
        None => line,
    }
    .trim();
    if line.is_empty() {
        return Ok(None);
    }
    let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
        line: number,
        message: "expected `section.key = value`".into(),
    })?;
    Ok(Some((k.trim(), v.trim())))
}

impl RunConfig {
    /// Applies every line of `text` on top of `self`. Repeated keys are
    /// rejected.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        let mut seen = std::collections::HashSet::new();
        for (i, line) in text.lines().enumerate() {
            if let Some((k, v)) = parse_line(line, i + 1)? {
                if !seen.insert(k.to_string()) {
                    return Err(ConfigError::Syntax {
                        line: i + 1,
                        message: format!("duplicate key {k}"),
                    });
                }
                self.set(k, v)?;
            }
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::from_text(&text)
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<(), ConfigError> {
        let (k, v) = kv.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: 0,
            message: format!("override {kv:?} is not key=value"),
        })?;
        self.set(k.trim(), v.trim())
    }

    /// Checks every section.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate().map_err(ConfigError::invalid)?;
        self.train.validate().map_err(ConfigError::invalid)?;
        self.data.validate().map_err(ConfigError::invalid)?;
        if let Some(c) = self.data.glyphs.chars().find(|&c| self.model.vocab.id(c).is_none()) {
            return Err(ConfigError::Invalid(format!("data.glyphs: {c:?} is not in model.vocab")));
        }
        if self.data.word_len_max > self.model.max_text_len {
            return Err(ConfigError::Invalid("data.word_len_max exceeds model.max_text_len".into()));
        }
        if self.train.augment && self.augment.crop_size % 32 != 0 {
            return Err(ConfigError::Invalid("augment.crop_size must be a multiple of 32".into()));
        }
        if !(self.eval.iou_threshold > 0.0 && self.eval.iou_threshold <= 1.0) {
            return Err(ConfigError::Invalid("eval.iou_threshold must lie in (0, 1]".into()));
        }
        Ok(())
    }

    /// The full configuration, one key per line.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, _) in KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k).expect("listed key"));
        }
        s
    }
}

/// Markdown table of every key with its default and meaning.
pub fn reference_page() -> String {
    let d = RunConfig::default();
    let mut s = String::from(
        "# Configuration keys\n\nConfig files hold `section.key = value` lines; `#` starts a comment.\n\
         Unknown or repeated keys are errors. Command-line `--set key=value` overrides the file.\n\n\
         | key | default | meaning |\n|---|---|---|\n",
    );
    for (k, doc) in KEYS {
        let _ = writeln!(s, "| `{k}` | `{}` | {doc} |", d.get(k).expect("listed key"));
    }
    s
}
