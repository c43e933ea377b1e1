//! Model and run configuration, parsed from flat `key=value` text.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Total spatial stride of the video encoder (two stride-2 blocks).
pub const ENCODER_STRIDE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Task {
    OpenEnded,
    Count,
    MultiChoice,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::OpenEnded, Task::Count, Task::MultiChoice];

    pub fn name(self) -> &'static str {
        match self {
            Task::OpenEnded => "open_ended",
            Task::Count => "count",
            Task::MultiChoice => "multi_choice",
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Task::OpenEnded => 0,
            Task::Count => 1,
            Task::MultiChoice => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Task> {
        Task::ALL.into_iter().find(|t| t.tag() == tag)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown task {s:?}")))
    }
}

/// How the top-down pathway injects upper-level context.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TopDown {
    Cmb,
    Upsample,
    Attention,
    None,
}

impl TopDown {
    const NAMES: [(TopDown, &'static str); 4] = [
        (TopDown::Cmb, "cmb"),
        (TopDown::Upsample, "upsample"),
        (TopDown::Attention, "attention"),
        (TopDown::None, "none"),
    ];

    pub fn name(self) -> &'static str {
        TopDown::NAMES.iter().find(|(v, _)| *v == self).map(|(_, n)| *n).unwrap()
    }
}

impl FromStr for TopDown {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        TopDown::NAMES
            .iter()
            .find(|(_, n)| *n == s)
            .map(|(v, _)| *v)
            .ok_or_else(|| Error::Config(format!("unknown top-down variant {s:?}")))
    }
}

/// Divisor inside the attention softmax: `sqrt(D)` or `sqrt(D / heads)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionScale {
    Model,
    Head,
}

impl FromStr for AttentionScale {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "model" => Ok(AttentionScale::Model),
            "head" => Ok(AttentionScale::Head),
            _ => Err(Error::Config(format!("unknown attention scale {s:?}"))),
        }
    }
}

impl AttentionScale {
    pub fn name(self) -> &'static str {
        match self {
            AttentionScale::Model => "model",
            AttentionScale::Head => "head",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FloatWidth {
    F32,
    F64,
}

impl FromStr for FloatWidth {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" | "32" => Ok(FloatWidth::F32),
            "f64" | "64" => Ok(FloatWidth::F64),
            _ => Err(Error::Config(format!("unknown float width {s:?}"))),
        }
    }
}

impl FloatWidth {
    pub fn name(self) -> &'static str {
        match self {
            FloatWidth::F32 => "f32",
            FloatWidth::F64 => "f64",
        }
    }
}

/// Which loss drives the plateau learning-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlateauOn {
    Val,
    Train,
}

impl FromStr for PlateauOn {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "val" => Ok(PlateauOn::Val),
            "train" => Ok(PlateauOn::Train),
            _ => Err(Error::Config(format!("plateau_on must be val or train, got {s:?}"))),
        }
    }
}

impl PlateauOn {
    pub fn name(self) -> &'static str {
        match self {
            PlateauOn::Val => "val",
            PlateauOn::Train => "train",
        }
    }
}

/// Everything that fixes the architecture and its parameter shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: [usize; 3],
    pub d_model: usize,
    pub heads: usize,
    pub levels: usize,
    pub vocab_size: usize,
    pub task: Task,
    /// Open-ended answer classes.
    pub classes: usize,
    pub max_count: usize,
    pub lambda: f64,
    pub attention_scale: AttentionScale,
    pub no_decomposition: bool,
    pub topdown: TopDown,
    pub no_constraint: bool,
    /// Normalize with running statistics in train mode too.
    pub bn_running_stats: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            frames: 16,
            height: 32,
            width: 32,
            channels: [4, 8, 16],
            d_model: 64,
            heads: 4,
            levels: 3,
            vocab_size: 64,
            task: Task::OpenEnded,
            classes: 8,
            max_count: 5,
            lambda: 0.1,
            attention_scale: AttentionScale::Model,
            no_decomposition: false,
            topdown: TopDown::Cmb,
            no_constraint: false,
            bn_running_stats: false,
        }
    }
}

impl ModelConfig {
    /// The tiny configuration used for finite-difference checks.
    pub fn tiny(task: Task) -> Self {
        ModelConfig {
            frames: 4,
            height: 8,
            width: 8,
            channels: [2, 2, 2],
            d_model: 8,
            heads: 2,
            levels: 2,
            vocab_size: 32,
            task,
            classes: 3,
            max_count: 5,
            ..ModelConfig::default()
        }
    }

    /// Feature-grid extents `(T, H, W)` after the video encoder.
    pub fn grid(&self) -> (usize, usize, usize) {
        (self.frames, self.height / ENCODER_STRIDE, self.width / ENCODER_STRIDE)
    }

    /// Pooling window per dimension at level `l` (1-based).
    pub fn window(&self, level: usize) -> usize {
        if self.no_decomposition {
            1
        } else {
            1 << (level - 1)
        }
    }

    /// Width of the decoder output for this task.
    pub fn output_width(&self) -> usize {
        match self.task {
            Task::OpenEnded => self.classes,
            Task::Count | Task::MultiChoice => 1,
        }
    }

    pub fn attention_divisor(&self) -> f64 {
        match self.attention_scale {
            AttentionScale::Model => (self.d_model as f64).sqrt(),
            AttentionScale::Head => ((self.d_model / self.heads) as f64).sqrt(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.frames < 2 {
            return bad(format!("frames must be at least 2, got {}", self.frames));
        }
        if self.levels == 0 {
            return bad("levels must be at least 1".into());
        }
        let max_levels = usize::BITS - 1 - self.frames.leading_zeros();
        if self.levels > max_levels as usize {
            return bad(format!(
                "levels {} exceeds log2(frames) = {} for frames {}",
                self.levels, max_levels, self.frames
            ));
        }
        for (name, v) in [("height", self.height), ("width", self.width)] {
            if v == 0 || v % ENCODER_STRIDE != 0 {
                return bad(format!("{name} {v} is not divisible by the encoder stride {ENCODER_STRIDE}"));
            }
        }
        let (t, h, w) = self.grid();
        let unit = 1usize << (self.levels - 1);
        for (name, v) in [("frames", t), ("feature height", h), ("feature width", w)] {
            if v % unit != 0 {
                return bad(format!("{name} {v} is not divisible by 2^(levels-1) = {unit}"));
            }
        }
        if self.channels.contains(&0) {
            return bad("encoder channels must be positive".into());
        }
        if self.d_model == 0 || self.d_model % 2 != 0 {
            return bad(format!("d_model must be positive and even, got {}", self.d_model));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("d_model {} is not divisible by heads {}", self.d_model, self.heads));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad(format!("lambda must be finite and non-negative, got {}", self.lambda));
        }
        if self.vocab_size == 0 || self.vocab_size > u16::MAX as usize {
            return bad(format!("vocab_size {} out of range", self.vocab_size));
        }
        if self.task == Task::OpenEnded && self.classes < 2 {
            return bad("open-ended task needs at least 2 classes".into());
        }
        if self.max_count == 0 {
            return bad("max_count must be at least 1".into());
        }
        Ok(())
    }
}

/// Data augmentation switches.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub crop: bool,
    /// Smallest crop side in pixels.
    pub crop_min: usize,
    pub mask: bool,
    /// Largest mask side in pixels; 0 disables masking.
    pub mask_max: usize,
    pub rotate: bool,
    pub max_degrees: f64,
    pub blur: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            crop: true,
            crop_min: 28,
            mask: true,
            mask_max: 3,
            rotate: false,
            max_degrees: 10.0,
            blur: false,
        }
    }
}

/// Full run configuration: architecture, optimization, data and paths.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub plateau_on: PlateauOn,
    pub seed: u64,
    pub float: FloatWidth,
    /// Dataset directory written by `gen-data`; generated in memory when unset.
    pub dataset: Option<PathBuf>,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    /// Tasks mixed into generated data; defaults to the model task.
    pub task_mix: Vec<Task>,
    pub raw_frames: usize,
    pub augment: AugmentConfig,
    pub checkpoint_dir: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
    /// Write per-sample readout weights to a sidecar log.
    pub diagnostics: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            lr: 1e-4,
            batch_size: 16,
            max_epochs: 50,
            patience: 10,
            plateau_on: PlateauOn::Val,
            seed: 0,
            float: FloatWidth::F32,
            dataset: None,
            train_size: 1024,
            val_size: 256,
            test_size: 256,
            task_mix: Vec::new(),
            raw_frames: 32,
            augment: AugmentConfig::default(),
            checkpoint_dir: None,
            metrics: None,
            diagnostics: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("invalid value {v:?} for {key}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {v:?} for {key}"))),
    }
}

fn opt_path(v: &str) -> Option<PathBuf> {
    if v.is_empty() {
        None
    } else {
        Some(PathBuf::from(v))
    }
}

impl RunConfig {
    /// Tasks present in generated data.
    pub fn tasks(&self) -> Vec<Task> {
        if self.task_mix.is_empty() {
            vec![self.model.task]
        } else {
            self.task_mix.clone()
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let m = &mut self.model;
        let a = &mut self.augment;
        match key.trim().replace('-', "_").as_str() {
            "frames" => m.frames = parse(key, v)?,
            "height" => m.height = parse(key, v)?,
            "width" => m.width = parse(key, v)?,
            "channels" => {
                let parts: Vec<usize> = v.split(',').map(|p| parse(key, p.trim())).collect::<Result<_>>()?;
                m.channels = parts
                    .try_into()
                    .map_err(|_| Error::Config(format!("channels needs three comma-separated values, got {v:?}")))?;
            }
            "d_model" => m.d_model = parse(key, v)?,
            "heads" => m.heads = parse(key, v)?,
            "levels" => m.levels = parse(key, v)?,
            "vocab_size" => m.vocab_size = parse(key, v)?,
            "task" => m.task = v.parse()?,
            "classes" => m.classes = parse(key, v)?,
            "max_count" => m.max_count = parse(key, v)?,
            "lambda" => m.lambda = parse(key, v)?,
            "attention_scale" => m.attention_scale = v.parse()?,
            "no_decomposition" => m.no_decomposition = parse_bool(key, v)?,
            "topdown" => m.topdown = v.parse()?,
            "no_constraint" => m.no_constraint = parse_bool(key, v)?,
            "bn_running_stats" => m.bn_running_stats = parse_bool(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "max_epochs" => self.max_epochs = parse(key, v)?,
            "patience" => self.patience = parse(key, v)?,
            "plateau_on" => self.plateau_on = v.parse()?,
            "seed" => self.seed = parse(key, v)?,
            "float" => self.float = v.parse()?,
            "dataset" => self.dataset = opt_path(v),
            "train_size" => self.train_size = parse(key, v)?,
            "val_size" => self.val_size = parse(key, v)?,
            "test_size" => self.test_size = parse(key, v)?,
            "task_mix" => {
                self.task_mix = if v.is_empty() {
                    Vec::new()
                } else {
                    v.split(',').map(|p| p.trim().parse()).collect::<Result<_>>()?
                }
            }
            "raw_frames" => self.raw_frames = parse(key, v)?,
            "augment" => a.enabled = parse_bool(key, v)?,
            "crop" => a.crop = parse_bool(key, v)?,
            "crop_min" => a.crop_min = parse(key, v)?,
            "mask" => a.mask = parse_bool(key, v)?,
            "mask_max" => a.mask_max = parse(key, v)?,
            "rotate" => a.rotate = parse_bool(key, v)?,
            "max_degrees" => a.max_degrees = parse(key, v)?,
            "blur" => a.blur = parse_bool(key, v)?,
            "checkpoint_dir" => self.checkpoint_dir = opt_path(v),
            "metrics" => self.metrics = opt_path(v),
            "diagnostics" => self.diagnostics = parse_bool(key, v)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Apply `key=value` lines. Blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Serialize every key; `from_text(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let a = &self.augment;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mix: Vec<&str> = self.task_mix.iter().map(|t| t.name()).collect();
        let pairs: Vec<(&str, String)> = vec![
            ("frames", m.frames.to_string()),
            ("height", m.height.to_string()),
            ("width", m.width.to_string()),
            ("channels", format!("{},{},{}", m.channels[0], m.channels[1], m.channels[2])),
            ("d_model", m.d_model.to_string()),
            ("heads", m.heads.to_string()),
            ("levels", m.levels.to_string()),
            ("vocab_size", m.vocab_size.to_string()),
            ("task", m.task.name().into()),
            ("classes", m.classes.to_string()),
            ("max_count", m.max_count.to_string()),
            ("lambda", m.lambda.to_string()),
            ("attention_scale", m.attention_scale.name().into()),
            ("no_decomposition", m.no_decomposition.to_string()),
            ("topdown", m.topdown.name().into()),
            ("no_constraint", m.no_constraint.to_string()),
            ("bn_running_stats", m.bn_running_stats.to_string()),
            ("lr", self.lr.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("max_epochs", self.max_epochs.to_string()),
            ("patience", self.patience.to_string()),
            ("plateau_on", self.plateau_on.name().into()),
            ("seed", self.seed.to_string()),
            ("float", self.float.name().into()),
            ("dataset", path(&self.dataset)),
            ("train_size", self.train_size.to_string()),
            ("val_size", self.val_size.to_string()),
            ("test_size", self.test_size.to_string()),
            ("task_mix", mix.join(",")),
            ("raw_frames", self.raw_frames.to_string()),
            ("augment", a.enabled.to_string()),
            ("crop", a.crop.to_string()),
            ("crop_min", a.crop_min.to_string()),
            ("mask", a.mask.to_string()),
            ("mask_max", a.mask_max.to_string()),
            ("rotate", a.rotate.to_string()),
            ("max_degrees", a.max_degrees.to_string()),
            ("blur", a.blur.to_string()),
            ("checkpoint_dir", path(&self.checkpoint_dir)),
            ("metrics", path(&self.metrics)),
            ("diagnostics", self.diagnostics.to_string()),
        ];
        pairs.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Check every invariant before anything is built.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.batch_size < 2 && !self.model.bn_running_stats {
            return bad("batch statistics need batch_size >= 2; set bn_running_stats=true for single-sample batches".into());
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if self.model.height != self.model.width {
            return bad(format!(
                "synthetic canvases are square; height {} != width {}",
                self.model.height, self.model.width
            ));
        }
        if self.raw_frames < self.model.frames {
            return bad(format!(
                "raw_frames {} is smaller than the frame budget {}",
                self.raw_frames, self.model.frames
            ));
        }
        if self.augment.crop_min == 0 || self.augment.crop_min > self.model.height {
            return bad(format!("crop_min {} out of range", self.augment.crop_min));
        }
        if self.model.task == Task::OpenEnded && self.model.classes != 8 {
            return bad(format!("the synthetic color task has 8 classes, got classes={}", self.model.classes));
        }
        if self.augment.mask_max > 3 {
            return bad(format!("mask_max {} could hide a whole shape; the limit is 3", self.augment.mask_max));
        }
        if !self.tasks().contains(&self.model.task) {
            return bad(format!("task_mix does not include the model task {}", self.model.task));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        RunConfig::default().validate().unwrap();
        ModelConfig::tiny(Task::Count).validate().unwrap();
        assert_eq!(ModelConfig::default().grid(), (16, 8, 8));
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("topdown", "upsample").unwrap();
        cfg.set("task_mix", "count,open_ended").unwrap();
        cfg.set("metrics", "/tmp/m.tsv").unwrap();
        cfg.set("lambda", "0.25").unwrap();
        let back = RunConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_bad_invariants() {
        let cases = [
            ("levels", "5"),
            ("heads", "3"),
            ("d_model", "30"),
            ("lambda", "-0.1"),
            ("height", "30"),
            ("frames", "6"),
        ];
        for (k, v) in cases {
            let mut cfg = RunConfig::default();
            cfg.set(k, v).unwrap();
            assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{k}={v} accepted");
        }
    }

    #[test]
    fn level_bound_follows_log2_frames() {
        let mut m = ModelConfig {
            frames: 8,
            levels: 3,
            ..ModelConfig::default()
        };
        m.validate().unwrap();
        m.levels = 4;
        assert!(m.validate().is_err());
    }

    #[test]
    fn unknown_key_and_bad_line() {
        assert!(RunConfig::from_text("nope=1").is_err());
        assert!(RunConfig::from_text("frames 16").is_err());
        let cfg = RunConfig::from_text("# comment\n\nframes = 8\nlevels=2\n").unwrap();
        assert_eq!(cfg.model.frames, 8);
    }

    #[test]
    fn single_sample_batches_need_running_stats() {
        let mut cfg = RunConfig::default();
        cfg.batch_size = 1;
        assert!(cfg.validate().is_err());
        cfg.model.bn_running_stats = true;
        cfg.validate().unwrap();
    }
}
