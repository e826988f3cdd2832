//! Run configuration in flat `section.key = value` text.
//!
//! One assignment per line, `#` starts a comment. Every key has a default
//! (see [`render_defaults`]) except `command` and `seed`, which are
//! required. Unknown and repeated keys are rejected.

use std::collections::HashMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use dualrate_core::data::{Dataset, GmmSpec, GridPatternSpec};
use dualrate_core::distill::{DistillConfig, DistillVariant, StudentInit};
use dualrate_core::models::{ModelConfig, ParamMode};
use dualrate_core::nnkit::Activation;
use dualrate_core::sample::SampleConfig;
use dualrate_core::schedule::{LogSnrSchedule, LossWeight, WeightMode};
use dualrate_core::train::TrainConfig;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("{}: expected `key = value`, got `{text}`", origin(*line))]
    Syntax { line: usize, text: String },
    #[error("line {line}: duplicate key `{key}` (first set on line {first})")]
    Duplicate { key: String, line: usize, first: usize },
    #[error("{}: unknown key `{key}`", origin(*line))]
    UnknownKey { key: String, line: usize },
    #[error("{key}: {message}")]
    Value { key: String, message: String },
    #[error("missing required key `{0}`")]
    Missing(&'static str),
}

/// Line 0 marks a command-line override.
fn origin(line: usize) -> String {
    if line == 0 {
        "override".to_string()
    } else {
        format!("line {line}")
    }
}

impl ConfigError {
    fn value(key: &str, message: impl Into<String>) -> Self {
        ConfigError::Value {
            key: key.to_string(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Train,
    Sample,
    Distill,
    Eval,
    Ablate,
}

impl FromStr for Command {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Command::Train),
            "sample" => Ok(Command::Sample),
            "distill" => Ok(Command::Distill),
            "eval" => Ok(Command::Eval),
            "ablate" => Ok(Command::Ablate),
            _ => Err(format!("expected train|sample|distill|eval|ablate, got `{s}`")),
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Command::Train => "train",
            Command::Sample => "sample",
            Command::Distill => "distill",
            Command::Eval => "eval",
            Command::Ablate => "ablate",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataKind {
    Gmm,
    Grid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub kind: DataKind,
    pub components: usize,
    pub radius: f64,
    pub comp_std: f64,
    pub grid_side: usize,
    pub grid_classes: usize,
    /// Train and sample class-conditionally.
    pub conditional: bool,
}

impl DataConfig {
    pub fn dataset(&self) -> Result<Dataset, ConfigError> {
        match self.kind {
            DataKind::Gmm => GmmSpec::circle(self.components, 2, self.radius, self.comp_std)
                .map(Dataset::Gmm)
                .map_err(|e| ConfigError::value("data", e.to_string())),
            DataKind::Grid => GridPatternSpec::new(self.grid_side, self.grid_classes)
                .map(Dataset::Grid)
                .map_err(|e| ConfigError::value("data", e.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSection {
    pub config: SampleConfig,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub n_samples: usize,
    pub n_projections: usize,
    pub mse_points: usize,
    pub elbo_draws: usize,
    pub elbo_items: usize,
    pub cost_encoder: f64,
    pub cost_denoiser: f64,
    pub checkpoint: Option<PathBuf>,
}

/// Toggle axes; rows are their cartesian product. No axes means no rows.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AblateGrid {
    pub multi_level: Vec<bool>,
    pub embed_drop: Vec<f64>,
    pub augment: Vec<f64>,
}

impl AblateGrid {
    pub fn is_empty(&self) -> bool {
        self.multi_level.is_empty() && self.embed_drop.is_empty() && self.augment.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub train_resume: Option<PathBuf>,
    /// Translation probability and largest shift; folded into `train.augment`.
    pub augment_p: f64,
    pub augment_shift: usize,
    pub sample: SampleSection,
    pub distill: DistillConfig,
    pub distill_teacher: Option<PathBuf>,
    pub eval: EvalConfig,
    pub ablate: AblateGrid,
}

impl RunConfig {
    /// Defaults for everything; `command` and `seed` are placeholders.
    pub fn defaults(command: Command, seed: u64) -> Self {
        let distill = DistillConfig::default();
        Self {
            command,
            seed,
            output_dir: PathBuf::from("out"),
            data: DataConfig {
                kind: DataKind::Gmm,
                components: 8,
                radius: 2.0,
                comp_std: 0.1,
                grid_side: 4,
                grid_classes: 4,
                conditional: false,
            },
            lambda_min: -12.0,
            lambda_max: 12.0,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            train_resume: None,
            augment_p: 0.0,
            augment_shift: 1,
            sample: SampleSection {
                config: SampleConfig::new(8, 64, 10_000).expect("default rates are valid"),
                checkpoint: None,
            },
            distill: DistillConfig {
                student: ModelConfig {
                    encoder_hidden: vec![128, 128],
                    denoiser_hidden: vec![128, 128],
                    embed_drop_p: 0.0,
                    ..ModelConfig::default()
                },
                n_steps: 8_000,
                lr: 1e-3,
                aux_lr: 1e-3,
                pretrain_steps: 3_000,
                ..distill
            },
            distill_teacher: None,
            eval: EvalConfig {
                n_samples: 10_000,
                n_projections: 128,
                mse_points: 1024,
                elbo_draws: 64,
                elbo_items: 512,
                cost_encoder: 108.45,
                cost_denoiser: 44.02,
                checkpoint: None,
            },
            ablate: AblateGrid::default(),
        }
    }

    pub fn schedule(&self) -> LogSnrSchedule {
        LogSnrSchedule::cosine(self.lambda_min, self.lambda_max).expect("validated bounds")
    }

    pub fn dataset(&self) -> Dataset {
        self.data.dataset().expect("validated data section")
    }
}

type Getter = fn(&RunConfig) -> String;
type Setter = fn(&mut RunConfig, &str) -> Result<(), String>;

struct Field {
    key: &'static str,
    doc: &'static str,
    get: Getter,
    set: Setter,
}

fn num<T: FromStr>(v: &str) -> Result<T, String> {
    v.parse::<T>()
        .map_err(|_| format!("expected a {}, got `{v}`", std::any::type_name::<T>()))
}

fn float(v: &str) -> Result<f64, String> {
    let x: f64 = v.parse().map_err(|_| format!("expected a number, got `{v}`"))?;
    if x.is_nan() {
        return Err("NaN is not allowed".into());
    }
    Ok(x)
}

fn boolean(v: &str) -> Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got `{v}`")),
    }
}

fn list<T, F: Fn(&str) -> Result<T, String>>(v: &str, item: F) -> Result<Vec<T>, String> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| item(s.trim())).collect()
}

fn join<T: fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

fn path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or(String::new(), |p| p.display().to_string())
}

fn weight_mode(v: &str) -> Result<WeightMode, String> {
    match v {
        "sigmoid" => Ok(WeightMode::Sigmoid),
        "unit" => Ok(WeightMode::Unit),
        _ => Err(format!("expected sigmoid or unit, got `{v}`")),
    }
}

fn show_weight(w: &LossWeight) -> String {
    match w.mode {
        WeightMode::Sigmoid => "sigmoid".into(),
        WeightMode::Unit => "unit".into(),
    }
}

macro_rules! field {
    ($key:literal, $doc:literal, |$c:ident| $get:expr, |$s:ident, $v:ident| $set:expr) => {
        Field {
            key: $key,
            doc: $doc,
            get: |$c: &RunConfig| $get,
            set: |$s: &mut RunConfig, $v: &str| {
                $set;
                Ok(())
            },
        }
    };
}

const FIELDS: &[Field] = &[
    field!("command", "train | sample | distill | eval | ablate (required)",
        |c| c.command.to_string(), |s, v| s.command = v.parse()?),
    field!("seed", "global seed; every random draw derives from it (required)",
        |c| c.seed.to_string(), |s, v| s.seed = num(v)?),
    field!("output_dir", "directory receiving every output file",
        |c| c.output_dir.display().to_string(), |s, v| s.output_dir = PathBuf::from(v)),
    // data
    field!("data.kind", "gmm | grid",
        |c| match c.data.kind { DataKind::Gmm => "gmm".into(), DataKind::Grid => "grid".into() },
        |s, v| s.data.kind = match v {
            "gmm" => DataKind::Gmm,
            "grid" => DataKind::Grid,
            _ => return Err(format!("expected gmm or grid, got `{v}`")),
        }),
    field!("data.components", "mixture components on a circle",
        |c| c.data.components.to_string(), |s, v| s.data.components = num(v)?),
    field!("data.radius", "circle radius",
        |c| c.data.radius.to_string(), |s, v| s.data.radius = float(v)?),
    field!("data.std", "per-component standard deviation",
        |c| c.data.comp_std.to_string(), |s, v| s.data.comp_std = float(v)?),
    field!("data.grid_side", "side of the square grid patterns",
        |c| c.data.grid_side.to_string(), |s, v| s.data.grid_side = num(v)?),
    field!("data.grid_classes", "number of grid pattern classes",
        |c| c.data.grid_classes.to_string(), |s, v| s.data.grid_classes = num(v)?),
    field!("data.conditional", "class-conditional modelling",
        |c| c.data.conditional.to_string(), |s, v| s.data.conditional = boolean(v)?),
    // schedule
    field!("schedule.kind", "cosine (the only supported family)",
        |_c| "cosine".to_string(), |_s, v| if v != "cosine" {
            return Err(format!("expected cosine, got `{v}`"));
        }),
    field!("schedule.lambda_min", "lower log-SNR bound",
        |c| c.lambda_min.to_string(), |s, v| s.lambda_min = float(v)?),
    field!("schedule.lambda_max", "upper log-SNR bound",
        |c| c.lambda_max.to_string(), |s, v| s.lambda_max = float(v)?),
    // model
    field!("model.encoder_hidden", "context encoder widths; empty gives a standard denoiser",
        |c| join(&c.model.encoder_hidden), |s, v| s.model.encoder_hidden = list(v, num)?),
    field!("model.denoiser_hidden", "light denoiser widths",
        |c| join(&c.model.denoiser_hidden), |s, v| s.model.denoiser_hidden = list(v, num)?),
    field!("model.multi_level", "feed every encoder layer (false: last layer only)",
        |c| c.model.multi_level.to_string(), |s, v| s.model.multi_level = boolean(v)?),
    field!("model.param", "v | x output parameterisation",
        |c| match c.model.param_mode { ParamMode::VPred => "v".into(), ParamMode::XPred => "x".into() },
        |s, v| s.model.param_mode = match v {
            "v" => ParamMode::VPred,
            "x" => ParamMode::XPred,
            _ => return Err(format!("expected v or x, got `{v}`")),
        }),
    field!("model.time_embed_dim", "Fourier feature width per time input",
        |c| c.model.time_embed_dim.to_string(), |s, v| s.model.time_embed_dim = num(v)?),
    field!("model.activation", "silu | relu",
        |c| match c.model.activation { Activation::Silu => "silu".into(), Activation::Relu => "relu".into() },
        |s, v| s.model.activation = match v {
            "silu" => Activation::Silu,
            "relu" => Activation::Relu,
            _ => return Err(format!("expected silu or relu, got `{v}`")),
        }),
    // train
    field!("train.heavy_steps", "K: encoder refreshes (times sampled on this grid)",
        |c| c.train.heavy_steps.to_string(), |s, v| s.train.heavy_steps = num(v)?),
    field!("train.light_steps", "k: light steps; must be a multiple of K",
        |c| c.train.light_steps.to_string(), |s, v| s.train.light_steps = num(v)?),
    field!("train.batch", "batch size",
        |c| c.train.batch_size.to_string(), |s, v| s.train.batch_size = num(v)?),
    field!("train.steps", "total optimisation steps",
        |c| c.train.n_steps.to_string(), |s, v| s.train.n_steps = num(v)?),
    field!("train.lr", "peak learning rate",
        |c| c.train.lr.to_string(), |s, v| s.train.lr = float(v)?),
    field!("train.warmup", "linear warmup steps",
        |c| c.train.warmup_steps.to_string(), |s, v| s.train.warmup_steps = num(v)?),
    field!("train.beta1", "Adam first-moment decay",
        |c| c.train.beta1.to_string(), |s, v| s.train.beta1 = float(v)?),
    field!("train.beta2", "Adam second-moment decay",
        |c| c.train.beta2.to_string(), |s, v| s.train.beta2 = float(v)?),
    field!("train.clip", "global gradient norm clip",
        |c| c.train.clip_norm.to_string(), |s, v| s.train.clip_norm = float(v)?),
    field!("train.ema", "parameter EMA decay",
        |c| c.train.ema_decay.to_string(), |s, v| s.train.ema_decay = float(v)?),
    field!("train.weight", "sigmoid | unit loss weighting",
        |c| show_weight(&c.train.weight), |s, v| s.train.weight.mode = weight_mode(v)?),
    field!("train.weight_bias", "sigmoid weighting shift b",
        |c| c.train.weight.bias.to_string(), |s, v| s.train.weight.bias = float(v)?),
    field!("train.embed_drop", "probability of dropping all encoder features per item",
        |c| c.train.embed_drop_p.to_string(), |s, v| s.train.embed_drop_p = float(v)?),
    field!("train.class_drop", "probability of replacing a label by the null class",
        |c| c.train.class_drop_p.to_string(), |s, v| s.train.class_drop_p = float(v)?),
    field!("train.augment", "translation probability on grid data (0 disables)",
        |c| c.augment_p.to_string(), |s, v| s.augment_p = float(v)?),
    field!("train.augment_shift", "largest translation in cells",
        |c| c.augment_shift.to_string(), |s, v| s.augment_shift = num(v)?),
    field!("train.snapshot_every", "steps between metric rows (0 disables)",
        |c| c.train.snapshot_every.to_string(), |s, v| s.train.snapshot_every = num(v)?),
    field!("train.eval_points", "items per log-SNR grid point in snapshot oracle MSE",
        |c| c.train.eval_points.to_string(), |s, v| s.train.eval_points = num(v)?),
    field!("train.divergence_loss", "abort when a batch loss exceeds this",
        |c| c.train.divergence_loss.to_string(), |s, v| s.train.divergence_loss = float(v)?),
    field!("train.resume", "checkpoint to continue from (empty: fresh run)",
        |c| show_path(&c.train_resume), |s, v| s.train_resume = path(v)),
    // sample
    field!("sample.heavy_steps", "K used by the sampler",
        |c| c.sample.config.heavy_steps.to_string(), |s, v| s.sample.config.heavy_steps = num(v)?),
    field!("sample.light_steps", "k used by the sampler",
        |c| c.sample.config.light_steps.to_string(), |s, v| s.sample.config.light_steps = num(v)?),
    field!("sample.n", "number of samples",
        |c| c.sample.config.n_samples.to_string(), |s, v| s.sample.config.n_samples = num(v)?),
    field!("sample.guidance", "classifier-free guidance weight (0 disables)",
        |c| c.sample.config.guidance.w.to_string(), |s, v| s.sample.config.guidance.w = float(v)?),
    field!("sample.guidance_lambda_lo", "guidance active for log-SNR above this",
        |c| c.sample.config.guidance.lambda_lo.to_string(),
        |s, v| s.sample.config.guidance.lambda_lo = float(v)?),
    field!("sample.guidance_lambda_hi", "guidance active for log-SNR below this",
        |c| c.sample.config.guidance.lambda_hi.to_string(),
        |s, v| s.sample.config.guidance.lambda_hi = float(v)?),
    field!("sample.noise_interp", "log-variance interpolation toward the forward variance",
        |c| c.sample.config.noise_interp.to_string(), |s, v| s.sample.config.noise_interp = float(v)?),
    field!("sample.clip", "clip predictions to [-1, 1]",
        |c| c.sample.config.clip.to_string(), |s, v| s.sample.config.clip = boolean(v)?),
    field!("sample.use_ema", "sample with averaged parameters",
        |c| c.sample.config.use_ema.to_string(), |s, v| s.sample.config.use_ema = boolean(v)?),
    field!("sample.trace", "write the per-step trace",
        |c| c.sample.config.record_trace.to_string(), |s, v| s.sample.config.record_trace = boolean(v)?),
    field!("sample.checkpoint", "model to sample (empty: <output_dir>/checkpoint.bin)",
        |c| show_path(&c.sample.checkpoint), |s, v| s.sample.checkpoint = path(v)),
    // distill
    field!("distill.teacher", "standard-model checkpoint (empty: <output_dir>/checkpoint.bin)",
        |c| show_path(&c.distill_teacher), |s, v| s.distill_teacher = path(v)),
    field!("distill.variant", "standard | rollout",
        |c| match c.distill.variant {
            DistillVariant::Standard => "standard".into(),
            DistillVariant::FullRollout => "rollout".into(),
        },
        |s, v| s.distill.variant = match v {
            "standard" => DistillVariant::Standard,
            "rollout" => DistillVariant::FullRollout,
            _ => return Err(format!("expected standard or rollout, got `{v}`")),
        }),
    field!("distill.init", "frozen_teacher_encoder | pretrained",
        |c| match c.distill.init {
            StudentInit::FrozenTeacherEncoder => "frozen_teacher_encoder".into(),
            StudentInit::PretrainedDualRate => "pretrained".into(),
        },
        |s, v| s.distill.init = match v {
            "frozen_teacher_encoder" => StudentInit::FrozenTeacherEncoder,
            "pretrained" => StudentInit::PretrainedDualRate,
            _ => return Err(format!("expected frozen_teacher_encoder or pretrained, got `{v}`")),
        }),
    field!("distill.heavy_steps", "student K",
        |c| c.distill.heavy_steps.to_string(), |s, v| s.distill.heavy_steps = num(v)?),
    field!("distill.light_steps", "student k; must be a multiple of K",
        |c| c.distill.light_steps.to_string(), |s, v| s.distill.light_steps = num(v)?),
    field!("distill.encoder_hidden", "student encoder widths",
        |c| join(&c.distill.student.encoder_hidden), |s, v| s.distill.student.encoder_hidden = list(v, num)?),
    field!("distill.denoiser_hidden", "student light network widths",
        |c| join(&c.distill.student.denoiser_hidden), |s, v| s.distill.student.denoiser_hidden = list(v, num)?),
    field!("distill.steps", "alternating steps (half auxiliary, half student)",
        |c| c.distill.n_steps.to_string(), |s, v| s.distill.n_steps = num(v)?),
    field!("distill.batch", "batch size",
        |c| c.distill.batch_size.to_string(), |s, v| s.distill.batch_size = num(v)?),
    field!("distill.lr", "student learning rate",
        |c| c.distill.lr.to_string(), |s, v| s.distill.lr = float(v)?),
    field!("distill.aux_lr", "auxiliary model learning rate",
        |c| c.distill.aux_lr.to_string(), |s, v| s.distill.aux_lr = float(v)?),
    field!("distill.warmup", "warmup steps of both optimisers",
        |c| c.distill.warmup_steps.to_string(), |s, v| s.distill.warmup_steps = num(v)?),
    field!("distill.beta1", "Adam first-moment decay",
        |c| c.distill.beta1.to_string(), |s, v| s.distill.beta1 = float(v)?),
    field!("distill.beta2", "Adam second-moment decay",
        |c| c.distill.beta2.to_string(), |s, v| s.distill.beta2 = float(v)?),
    field!("distill.clip", "global gradient norm clip",
        |c| c.distill.clip_norm.to_string(), |s, v| s.distill.clip_norm = float(v)?),
    field!("distill.ema", "student EMA decay",
        |c| c.distill.ema_decay.to_string(), |s, v| s.distill.ema_decay = float(v)?),
    field!("distill.weight", "sigmoid | unit loss weighting",
        |c| show_weight(&c.distill.weight), |s, v| s.distill.weight.mode = weight_mode(v)?),
    field!("distill.weight_bias", "sigmoid weighting shift b",
        |c| c.distill.weight.bias.to_string(), |s, v| s.distill.weight.bias = float(v)?),
    field!("distill.pretrain_steps", "student initialisation steps",
        |c| c.distill.pretrain_steps.to_string(), |s, v| s.distill.pretrain_steps = num(v)?),
    field!("distill.pretrain_lr", "student initialisation learning rate",
        |c| c.distill.pretrain_lr.to_string(), |s, v| s.distill.pretrain_lr = float(v)?),
    field!("distill.snapshot_every", "steps between metric rows (0 disables)",
        |c| c.distill.snapshot_every.to_string(), |s, v| s.distill.snapshot_every = num(v)?),
    field!("distill.eval_samples", "samples per snapshot W2 (0 disables)",
        |c| c.distill.eval_samples.to_string(), |s, v| s.distill.eval_samples = num(v)?),
    field!("distill.n_projections", "projections per snapshot W2",
        |c| c.distill.n_projections.to_string(), |s, v| s.distill.n_projections = num(v)?),
    field!("distill.divergence_loss", "abort when a loss magnitude exceeds this",
        |c| c.distill.divergence_loss.to_string(), |s, v| s.distill.divergence_loss = float(v)?),
    field!("distill.track_sg", "record the auxiliary gradient of student steps",
        |c| c.distill.track_sg_gradients.to_string(), |s, v| s.distill.track_sg_gradients = boolean(v)?),
    // eval
    field!("eval.n_samples", "samples for sliced W2",
        |c| c.eval.n_samples.to_string(), |s, v| s.eval.n_samples = num(v)?),
    field!("eval.n_projections", "random projections for sliced W2",
        |c| c.eval.n_projections.to_string(), |s, v| s.eval.n_projections = num(v)?),
    field!("eval.mse_points", "items per log-SNR grid point in the oracle MSE table",
        |c| c.eval.mse_points.to_string(), |s, v| s.eval.mse_points = num(v)?),
    field!("eval.elbo_draws", "Monte Carlo time draws of the bound",
        |c| c.eval.elbo_draws.to_string(), |s, v| s.eval.elbo_draws = num(v)?),
    field!("eval.elbo_items", "data items in the bound",
        |c| c.eval.elbo_items.to_string(), |s, v| s.eval.elbo_items = num(v)?),
    field!("eval.cost_encoder", "cost of one encoder evaluation",
        |c| c.eval.cost_encoder.to_string(), |s, v| s.eval.cost_encoder = float(v)?),
    field!("eval.cost_denoiser", "cost of one light evaluation",
        |c| c.eval.cost_denoiser.to_string(), |s, v| s.eval.cost_denoiser = float(v)?),
    field!("eval.checkpoint", "model to evaluate (empty: <output_dir>/checkpoint.bin)",
        |c| show_path(&c.eval.checkpoint), |s, v| s.eval.checkpoint = path(v)),
    // ablate
    field!("ablate.multi_level", "multi-level conditioning values, e.g. `true, false`",
        |c| join(&c.ablate.multi_level), |s, v| s.ablate.multi_level = list(v, boolean)?),
    field!("ablate.embed_drop", "feature dropout values",
        |c| join(&c.ablate.embed_drop), |s, v| s.ablate.embed_drop = list(v, float)?),
    field!("ablate.augment", "augmentation probabilities",
        |c| join(&c.ablate.augment), |s, v| s.ablate.augment = list(v, float)?),
];

/// Short spellings accepted alongside the canonical keys.
const ALIASES: &[(&str, &str)] = &[
    ("train.K", "train.heavy_steps"),
    ("train.k", "train.light_steps"),
    ("train.ema_decay", "train.ema"),
    ("sample.K", "sample.heavy_steps"),
    ("sample.k", "sample.light_steps"),
    ("sample.guidance_w", "sample.guidance"),
    ("distill.K", "distill.heavy_steps"),
    ("distill.k", "distill.light_steps"),
    ("distill.ema_decay", "distill.ema"),
];

fn canonical(key: &str) -> &str {
    ALIASES
        .iter()
        .find(|(a, _)| *a == key)
        .map_or(key, |(_, c)| c)
}

fn field(key: &str) -> Option<&'static Field> {
    let key = canonical(key);
    FIELDS.iter().find(|f| f.key == key)
}

/// Parses `text` and validates the result.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    parse_config_with(text, &[])
}

/// Parses `text`, then applies `overrides` (which may repeat file keys).
pub fn parse_config_with(text: &str, overrides: &[(String, String)]) -> Result<RunConfig, ConfigError> {
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let (key, value) = body.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line,
            text: body.to_string(),
        })?;
        let key = canonical(key.trim());
        if key.is_empty() || key.contains(char::is_whitespace) {
            return Err(ConfigError::Syntax {
                line,
                text: body.to_string(),
            });
        }
        if let Some(&first) = seen.get(key) {
            return Err(ConfigError::Duplicate {
                key: key.to_string(),
                line,
                first,
            });
        }
        seen.insert(key.to_string(), line);
        entries.push((line, key.to_string(), value.trim().to_string()));
    }
    let has = |k: &str| seen.contains_key(k) || overrides.iter().any(|(o, _)| canonical(o) == k);
    if !has("command") {
        return Err(ConfigError::Missing("command"));
    }
    if !has("seed") {
        return Err(ConfigError::Missing("seed"));
    }
    let mut cfg = RunConfig::defaults(Command::Train, 0);
    let over = overrides.iter().map(|(k, v)| (0, k.clone(), v.clone()));
    for (line, key, value) in entries.into_iter().chain(over) {
        let f = field(&key).ok_or_else(|| ConfigError::UnknownKey {
            key: key.clone(),
            line,
        })?;
        (f.set)(&mut cfg, &value).map_err(|m| ConfigError::value(&key, m))?;
    }
    finish(cfg)
}

fn check_rates(heavy_key: &str, heavy: usize, light: usize) -> Result<(), ConfigError> {
    if heavy == 0 || light == 0 {
        return Err(ConfigError::value(heavy_key, "step counts must be positive"));
    }
    if !light.is_multiple_of(heavy) {
        return Err(ConfigError::value(
            heavy_key,
            format!("K = {heavy} does not divide k = {light}; K must be a divisor of k"),
        ));
    }
    Ok(())
}

fn wrap(section: &str, r: dualrate_core::Result<()>) -> Result<(), ConfigError> {
    r.map_err(|e| ConfigError::value(section, e.to_string()))
}

/// Derives dependent fields and checks every constraint.
fn finish(mut cfg: RunConfig) -> Result<RunConfig, ConfigError> {
    if !(cfg.lambda_min < cfg.lambda_max) || !cfg.lambda_min.is_finite() || !cfg.lambda_max.is_finite() {
        return Err(ConfigError::value(
            "schedule.lambda_min",
            format!("need finite lambda_min < lambda_max, got ({}, {})", cfg.lambda_min, cfg.lambda_max),
        ));
    }
    if !(0.0..=1.0).contains(&cfg.augment_p) {
        return Err(ConfigError::value("train.augment", format!("{} outside [0, 1]", cfg.augment_p)));
    }
    cfg.train.augment = (cfg.augment_p > 0.0).then_some((cfg.augment_p, cfg.augment_shift));
    let dataset = cfg.data.dataset()?;
    let n_classes = if cfg.data.conditional { dataset.n_labels() } else { 0 };
    cfg.model.data_dim = dataset.dim();
    cfg.model.n_classes = n_classes;
    cfg.model.embed_drop_p = cfg.train.embed_drop_p;
    let base = cfg.model.clone();
    let student = &mut cfg.distill.student;
    student.data_dim = base.data_dim;
    student.n_classes = n_classes;
    student.activation = base.activation;
    student.time_embed_dim = base.time_embed_dim;
    student.param_mode = base.param_mode;
    student.multi_level = base.multi_level;
    student.embed_drop_p = 0.0;
    if cfg.train.augment.is_some() && cfg.data.kind != DataKind::Grid {
        return Err(ConfigError::value("train.augment", "translation needs data.kind = grid"));
    }

    check_rates("train.heavy_steps", cfg.train.heavy_steps, cfg.train.light_steps)?;
    check_rates("sample.heavy_steps", cfg.sample.config.heavy_steps, cfg.sample.config.light_steps)?;
    check_rates("distill.heavy_steps", cfg.distill.heavy_steps, cfg.distill.light_steps)?;
    wrap("model", cfg.model.validate())?;
    wrap("train", cfg.train.validate())?;
    wrap("sample", cfg.sample.config.validate())?;
    wrap("distill", cfg.distill.validate())?;
    if cfg.sample.config.n_samples == 0 {
        return Err(ConfigError::value("sample.n", "must be at least 1"));
    }
    if cfg.sample.config.guidance.w < 0.0 {
        return Err(ConfigError::value("sample.guidance", "must be non-negative"));
    }
    if cfg.sample.config.guidance.w > 0.0 && n_classes == 0 {
        return Err(ConfigError::value("sample.guidance", "guidance needs data.conditional = true"));
    }
    if cfg.eval.n_samples < 2 || cfg.eval.n_projections == 0 {
        return Err(ConfigError::value("eval.n_samples", "need at least 2 samples and 1 projection"));
    }
    if cfg.eval.elbo_draws < 2 || cfg.eval.elbo_items == 0 {
        return Err(ConfigError::value("eval.elbo_draws", "need at least 2 draws and 1 item"));
    }
    if !(cfg.eval.cost_encoder >= 0.0 && cfg.eval.cost_denoiser >= 0.0) {
        return Err(ConfigError::value("eval.cost_encoder", "costs must be non-negative"));
    }
    for (i, &p) in cfg.ablate.embed_drop.iter().enumerate() {
        if !(0.0..=1.0).contains(&p) {
            return Err(ConfigError::value("ablate.embed_drop", format!("entry {i} = {p} outside [0, 1]")));
        }
    }
    for (i, &p) in cfg.ablate.augment.iter().enumerate() {
        if !(0.0..=1.0).contains(&p) {
            return Err(ConfigError::value("ablate.augment", format!("entry {i} = {p} outside [0, 1]")));
        }
        if p > 0.0 && cfg.data.kind != DataKind::Grid {
            return Err(ConfigError::value("ablate.augment", "translation needs data.kind = grid"));
        }
    }
    Ok(cfg)
}

/// Every key with its current value, one per line.
pub fn render(cfg: &RunConfig) -> String {
    render_filtered(cfg, |_| true)
}

/// Keys selected by `keep`, one `key = value` per line.
pub fn render_filtered(cfg: &RunConfig, keep: impl Fn(&str) -> bool) -> String {
    let mut out = String::new();
    for f in FIELDS.iter().filter(|f| keep(f.key)) {
        out.push_str(f.key);
        out.push_str(" = ");
        out.push_str(&(f.get)(cfg));
        out.push('\n');
    }
    out
}

/// The full key reference: description comment plus default value.
pub fn render_defaults() -> String {
    let d = RunConfig::defaults(Command::Train, 0);
    let mut out = String::new();
    for f in FIELDS {
        out.push_str(&format!("# {}\n{} = {}\n", f.doc, f.key, (f.get)(&d)));
    }
    out
}

/// Model architecture as `model.*` lines, for checkpoints.
pub fn render_model(model: &ModelConfig) -> String {
    let mut cfg = RunConfig::defaults(Command::Train, 0);
    cfg.model = model.clone();
    let mut out = render_filtered(&cfg, |k| k.starts_with("model."));
    out.push_str(&format!("data_dim = {}\nn_classes = {}\nembed_drop = {}\n", model.data_dim, model.n_classes, model.embed_drop_p));
    out
}

/// Inverse of [`render_model`].
pub fn parse_model(text: &str) -> Result<ModelConfig, ConfigError> {
    let mut cfg = RunConfig::defaults(Command::Train, 0);
    let mut model_extra = (None, None, None);
    for (i, raw) in text.lines().enumerate() {
        let body = raw.trim();
        if body.is_empty() {
            continue;
        }
        let (k, v) = body.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: i + 1,
            text: body.to_string(),
        })?;
        let (k, v) = (k.trim(), v.trim());
        match k {
            "data_dim" => model_extra.0 = Some(num::<usize>(v).map_err(|m| ConfigError::value(k, m))?),
            "n_classes" => model_extra.1 = Some(num::<usize>(v).map_err(|m| ConfigError::value(k, m))?),
            "embed_drop" => model_extra.2 = Some(float(v).map_err(|m| ConfigError::value(k, m))?),
            _ if k.starts_with("model.") => {
                let f = field(k).ok_or_else(|| ConfigError::UnknownKey {
                    key: k.to_string(),
                    line: i + 1,
                })?;
                (f.set)(&mut cfg, v).map_err(|m| ConfigError::value(k, m))?;
            }
            _ => {
                return Err(ConfigError::UnknownKey {
                    key: k.to_string(),
                    line: i + 1,
                })
            }
        }
    }
    let mut m = cfg.model;
    m.data_dim = model_extra.0.ok_or(ConfigError::Missing("data_dim"))?;
    m.n_classes = model_extra.1.ok_or(ConfigError::Missing("n_classes"))?;
    m.embed_drop_p = model_extra.2.ok_or(ConfigError::Missing("embed_drop"))?;
    m.validate().map_err(|e| ConfigError::value("model", e.to_string()))?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = parse_config("command = train\nseed = 5\n").unwrap();
        assert_eq!(c.command, Command::Train);
        assert_eq!(c.seed, 5);
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.model.encoder_hidden, vec![256, 256, 256]);
        assert_eq!(c.model.n_classes, 0);
    }

    #[test]
    fn short_keys_alias_canonical_ones() {
        let c = parse_config("command = train\nseed = 1\ntrain.K = 4\ntrain.k = 32\ntrain.ema_decay = 0.99\nschedule.kind = cosine\n")
            .unwrap();
        assert_eq!((c.train.heavy_steps, c.train.light_steps), (4, 32));
        assert_eq!(c.train.ema_decay, 0.99);
        let dup = parse_config("command = train\nseed = 1\ntrain.K = 4\ntrain.heavy_steps = 4\n");
        assert!(matches!(dup, Err(ConfigError::Duplicate { .. })));
        assert!(parse_config("command = train\nseed = 1\nschedule.kind = linear\n").is_err());
    }

    #[test]
    fn divisibility_is_enforced_with_key_path() {
        let e = parse_config("command = train\nseed = 1\ntrain.heavy_steps = 3\ntrain.light_steps = 8\n")
            .unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("train.heavy_steps") && msg.contains("divisor"), "{msg}");
    }

    #[test]
    fn duplicates_and_unknown_keys_are_rejected() {
        let e = parse_config("command = train\nseed = 1\nseed = 2\n").unwrap_err();
        assert!(matches!(e, ConfigError::Duplicate { line: 3, first: 2, .. }));
        let e = parse_config("command = train\nseed = 1\ntrain.speed = 2\n").unwrap_err();
        assert!(matches!(e, ConfigError::UnknownKey { line: 3, .. }));
    }

    #[test]
    fn type_errors_name_the_key() {
        let e = parse_config("command = train\nseed = 1\ntrain.lr = fast\n").unwrap_err();
        assert!(e.to_string().starts_with("train.lr:"));
        let e = parse_config("command = train\nseed = -1\n").unwrap_err();
        assert!(e.to_string().starts_with("seed:"));
        assert_eq!(parse_config("seed = 1").unwrap_err(), ConfigError::Missing("command"));
        assert!(matches!(parse_config("command = train\nseed 1").unwrap_err(), ConfigError::Syntax { line: 2, .. }));
    }

    #[test]
    fn comments_blank_lines_and_overrides() {
        let c = parse_config_with(
            "# run\ncommand = distill # inline\n\nseed = 3\ndistill.variant = standard\n",
            &[("distill.variant".into(), "rollout".into())],
        )
        .unwrap();
        assert_eq!(c.distill.variant, DistillVariant::FullRollout);
    }

    #[test]
    fn rendered_defaults_parse_back() {
        let text = render_defaults().replace("command = train", "command = eval");
        let c = parse_config(&text).unwrap();
        assert_eq!(c.command, Command::Eval);
        assert_eq!(render(&c), render(&parse_config(&render(&c)).unwrap()));
    }

    #[test]
    fn model_text_round_trips() {
        let m = ModelConfig {
            n_classes: 3,
            embed_drop_p: 0.25,
            encoder_hidden: vec![],
            ..ModelConfig::default()
        };
        assert_eq!(parse_model(&render_model(&m)).unwrap(), m);
    }

    #[test]
    fn constraint_violations() {
        let bad = [
            "schedule.lambda_min = 3\nschedule.lambda_max = 1",
            "train.augment = 0.5",
            "sample.guidance = 1",
            "distill.heavy_steps = 3",
            "ablate.embed_drop = 0.5, 2",
            "train.embed_drop = 1.5",
        ];
        for b in bad {
            assert!(parse_config(&format!("command = train\nseed = 1\n{b}\n")).is_err(), "{b}");
        }
        assert!(parse_config("command = train\nseed = 1\ndata.kind = grid\ntrain.augment = 0.5\n").is_ok());
        let c = parse_config("command = train\nseed = 1\ndata.kind = grid\ntrain.augment_shift = 2\ntrain.augment = 0.5\n")
            .unwrap();
        assert_eq!(c.train.augment, Some((0.5, 2)));
    }
}
