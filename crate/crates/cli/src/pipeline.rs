//! Seeded pipelines behind each command.
//!
//! Every file lands in `output_dir`. CSV contents depend only on the config
//! and seed; wall-clock timings go to `run_info.txt`.

use std::fmt::Write as _;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use dualrate_core::data::Dataset;
use dualrate_core::distill::{distill_loop, DistillState};
use dualrate_core::eval::{
    default_lambda_grid, elbo_estimate, inference_cost, oracle_mse, resampling_baseline, sliced_w2,
    CostModel,
};
use dualrate_core::models::{Denoiser, DualRateModel};
use dualrate_core::sample::{ancestral_sample, SampleConfig, SampleOutput};
use dualrate_core::schedule::LogSnrSchedule;
use dualrate_core::train::{train_steps, TrainState};
use dualrate_core::{derive_seed, seeded_rng};
use ndarray::Array2;
use thiserror::Error;

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, RngCursor};
use crate::config::{Command, ConfigError, RunConfig};
use crate::plot;

const SAMPLE_STREAM: u64 = 100;
const EVAL_STREAM: u64 = 200;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("config error: {0}")]
    Config(#[from] ConfigError),
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Core(#[from] dualrate_core::Error),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

impl RunError {
    /// 2 for configuration problems, 3 for numerical divergence, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        use dualrate_core::Error as E;
        match self {
            RunError::Config(_) | RunError::Core(E::Config(_)) => 2,
            RunError::Core(E::Divergence { .. } | E::NonFinite(_)) => 3,
            _ => 1,
        }
    }
}

/// Headline numbers and the files written.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunSummary {
    pub metrics: Vec<(String, f64)>,
    pub files: Vec<PathBuf>,
}

impl RunSummary {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

struct Out<'a> {
    dir: &'a Path,
    summary: RunSummary,
}

impl<'a> Out<'a> {
    fn new(dir: &'a Path) -> io::Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            dir,
            summary: RunSummary::default(),
        })
    }

    fn write(&mut self, name: &str, contents: &str) -> io::Result<()> {
        let p = self.dir.join(name);
        std::fs::write(&p, contents)?;
        self.summary.files.push(p);
        Ok(())
    }

    fn metric(&mut self, name: &str, v: f64) {
        self.summary.metrics.push((name.to_string(), v));
    }
}

/// Runs `cfg.command`.
pub fn run(cfg: &RunConfig) -> Result<RunSummary, RunError> {
    let start = Instant::now();
    let mut out = Out::new(&cfg.output_dir)?;
    match cfg.command {
        Command::Train => run_train(cfg, &mut out)?,
        Command::Sample => run_sample(cfg, &mut out)?,
        Command::Distill => run_distill(cfg, &mut out)?,
        Command::Eval => run_eval(cfg, &mut out)?,
        Command::Ablate => run_ablation(cfg, &mut out)?,
    }
    let info = format!(
        "command = {}\nseed = {}\nwall_ms = {}\n",
        cfg.command,
        cfg.seed,
        start.elapsed().as_millis()
    );
    out.write("run_info.txt", &info)?;
    Ok(out.summary)
}

fn default_checkpoint(cfg: &RunConfig, explicit: &Option<PathBuf>) -> PathBuf {
    explicit
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join("checkpoint.bin"))
}

fn rows_to_points(x: &Array2<f64>) -> Vec<(f64, f64)> {
    x.rows()
        .into_iter()
        .map(|r| (r[0], if r.len() > 1 { r[1] } else { 0.0 }))
        .collect()
}

/// Trains (or resumes) and returns the final state.
pub fn train_model(cfg: &RunConfig) -> Result<TrainState, RunError> {
    let dataset = cfg.dataset();
    let sched = cfg.schedule();
    let mut state = match &cfg.train_resume {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            if ck.model != cfg.model {
                return Err(ConfigError::Value {
                    key: "train.resume".into(),
                    message: "checkpoint architecture differs from model.*".into(),
                }
                .into());
            }
            if ck.seed != cfg.seed {
                return Err(ConfigError::Value {
                    key: "train.resume".into(),
                    message: format!("checkpoint seed {} differs from seed {}", ck.seed, cfg.seed),
                }
                .into());
            }
            ck.train_state()?
        }
        None => TrainState::new(&cfg.model, &cfg.train, cfg.seed)?,
    };
    let remaining = cfg.train.n_steps.saturating_sub(state.step);
    train_steps(&mut state, &cfg.train, &dataset, &sched, remaining)?;
    Ok(state)
}

fn run_train(cfg: &RunConfig, out: &mut Out<'_>) -> Result<(), RunError> {
    let state = train_model(cfg)?;
    let mut csv = String::from("step,loss,oracle_mse,wall_ms\n");
    for r in &state.log {
        let mse = r.oracle_mse.map_or(String::new(), |v| v.to_string());
        let _ = writeln!(csv, "{},{},{},{}", r.step, r.loss, mse, r.wall_ms);
    }
    out.write("train_metrics.csv", &csv)?;
    let ck = Checkpoint::from_state(&state, &cfg.model, (cfg.lambda_min, cfg.lambda_max));
    let path = cfg.output_dir.join("checkpoint.bin");
    save_checkpoint(&path, &ck)?;
    out.summary.files.push(path);
    let loss: Vec<(f64, f64)> = state.log.iter().map(|r| (r.step as f64, r.loss.ln())).collect();
    let mse: Vec<(f64, f64)> = state
        .log
        .iter()
        .filter_map(|r| r.oracle_mse.map(|m| (r.step as f64, m.ln())))
        .collect();
    out.write(
        "train_curves.svg",
        &plot::lines("log loss and log oracle MSE", &[("loss", &loss), ("oracle mse", &mse)]),
    )?;
    out.metric("steps", state.step as f64);
    if let Some(r) = state.log.last() {
        out.metric("final_loss", r.loss);
        if let Some(m) = r.oracle_mse {
            out.metric("final_oracle_mse", m);
        }
    }
    Ok(())
}

fn load_model(cfg: &RunConfig, path: &Path, use_ema: bool) -> Result<(DualRateModel, LogSnrSchedule), RunError> {
    let ck = load_checkpoint(path)?;
    let model = if use_ema { ck.ema_model()? } else { ck.raw_model()? };
    if model.data_dim() != cfg.dataset().dim() {
        return Err(ConfigError::Value {
            key: "data".into(),
            message: format!(
                "checkpoint models {} dimensions, data has {}",
                model.data_dim(),
                cfg.dataset().dim()
            ),
        }
        .into());
    }
    let sched = LogSnrSchedule::cosine(ck.lambda_min, ck.lambda_max)?;
    Ok((model, sched))
}

/// Samples as many items as `truth` holds (with its labels when the model
/// is conditional) and measures sliced W2 against it. All draws come from
/// `seed`.
pub fn sample_and_score(
    model: &dyn Denoiser,
    dataset: &Dataset,
    sched: &LogSnrSchedule,
    config: &SampleConfig,
    n: usize,
    n_projections: usize,
    seed: u64,
) -> Result<(f64, SampleOutput, Array2<f64>), RunError> {
    let mut rng = seeded_rng(seed);
    let truth = dataset.sample(n, &mut rng);
    let labels = truth.labels.as_deref().filter(|_| model.n_classes() > 0);
    let sc = SampleConfig { n_samples: n, ..*config };
    let out = ancestral_sample(model, labels, dataset.dim(), sched, &sc, &mut rng)?;
    let w2 = sliced_w2(out.x.view(), truth.x.view(), n_projections, &mut rng)?;
    Ok((w2, out, truth.x))
}

fn run_sample(cfg: &RunConfig, out: &mut Out<'_>) -> Result<(), RunError> {
    let sc = &cfg.sample.config;
    let (model, sched) = load_model(cfg, &default_checkpoint(cfg, &cfg.sample.checkpoint), sc.use_ema)?;
    let dataset = cfg.dataset();
    let mut rng = seeded_rng(derive_seed(cfg.seed, SAMPLE_STREAM));
    let labels: Option<Vec<usize>> = (model.n_classes > 0).then(|| {
        let n = model.n_classes;
        (0..sc.n_samples).map(|i| i % n).collect()
    });
    let res = ancestral_sample(&model, labels.as_deref(), dataset.dim(), &sched, sc, &mut rng)?;
    let d = dataset.dim();
    let mut csv = (0..d).map(|j| format!("x{j}")).collect::<Vec<_>>().join(",");
    if labels.is_some() {
        csv.push_str(",label");
    }
    csv.push('\n');
    for (i, row) in res.x.rows().into_iter().enumerate() {
        let vals: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        csv.push_str(&vals.join(","));
        if let Some(l) = &labels {
            let _ = write!(csv, ",{}", l[i]);
        }
        csv.push('\n');
    }
    out.write("samples.csv", &csv)?;
    let c = res.counts;
    let cost = CostModel::new(cfg.eval.cost_encoder, cfg.eval.cost_denoiser)?;
    let total = inference_cost(&cost, c.heavy, c.light, c.guided_heavy, c.guided_light);
    out.write(
        "nfe.csv",
        &format!(
            "heavy,light,guided_heavy,guided_light,cost\n{},{},{},{},{}\n",
            c.heavy, c.light, c.guided_heavy, c.guided_light, total
        ),
    )?;
    if let Some(tr) = &res.trace {
        let mut t = String::from("index,t,tau,refreshed,heavy_guided,light_guided,mean_abs_x_hat\n");
        for (i, s) in tr.steps.iter().enumerate() {
            let mean = s.x_hat.mapv(f64::abs).mean().unwrap_or(0.0);
            let _ = writeln!(
                t,
                "{i},{},{},{},{},{},{mean}",
                s.t, s.tau, s.refreshed as u8, s.heavy_guided as u8, s.light_guided as u8
            );
        }
        out.write("trace.csv", &t)?;
    }
    out.write("samples.svg", &plot::scatter("samples", &[("samples", &rows_to_points(&res.x))]))?;
    out.metric("heavy_nfe", c.heavy as f64);
    out.metric("light_nfe", c.light as f64);
    out.metric("cost", total);
    Ok(())
}

fn run_eval(cfg: &RunConfig, out: &mut Out<'_>) -> Result<(), RunError> {
    let sc = &cfg.sample.config;
    let (model, sched) = load_model(cfg, &default_checkpoint(cfg, &cfg.eval.checkpoint), sc.use_ema)?;
    let dataset = cfg.dataset();
    let e = &cfg.eval;
    let seed = derive_seed(cfg.seed, EVAL_STREAM);
    let (w2, res, truth) = sample_and_score(&model, &dataset, &sched, sc, e.n_samples, e.n_projections, seed)?;
    let spec = dataset.oracle_mixture();
    let mut rng = seeded_rng(derive_seed(seed, 1));
    let baseline = resampling_baseline(&spec, e.n_samples, e.n_projections, &mut rng)?;
    let table = oracle_mse(&model, &spec, &sched, &default_lambda_grid(), e.mse_points, sc.heavy_steps, &mut rng)?;
    let data = dataset.sample(e.elbo_items, &mut rng);
    let labels = data.labels.as_deref().filter(|_| model.n_classes > 0);
    let elbo = elbo_estimate(&model, data.x.view(), labels, &sched, e.elbo_draws, sc.heavy_steps, &mut rng)?;
    let cost = CostModel::new(e.cost_encoder, e.cost_denoiser)?;
    let c = res.counts;
    let total = inference_cost(&cost, c.heavy, c.light, c.guided_heavy, c.guided_light);

    let metrics = [
        ("sliced_w2", w2),
        ("baseline_w2", baseline),
        ("w2_ratio", w2 / baseline),
        ("oracle_mse_mean_pm4", table.mean_within(-4.0, 4.0)),
        ("elbo_nats_per_dim", elbo.nats_per_dim),
        ("elbo_std_err", elbo.std_err),
        ("prior_kl_per_dim", elbo.prior_kl),
        ("heavy_nfe", c.heavy as f64),
        ("light_nfe", c.light as f64),
        ("inference_cost", total),
    ];
    let mut csv = String::from("metric,value\n");
    for (k, v) in metrics {
        let _ = writeln!(csv, "{k},{v}");
        out.metric(k, v);
    }
    out.write("eval_metrics.csv", &csv)?;
    let mut mse = String::from("lambda,mse\n");
    for (l, m) in table.lambdas.iter().zip(&table.mse) {
        let _ = writeln!(mse, "{l},{m}");
    }
    out.write("oracle_mse.csv", &mse)?;
    let pts: Vec<(f64, f64)> = table.lambdas.iter().copied().zip(table.mse.iter().map(|m| m.max(1e-300).ln())).collect();
    out.write("oracle_mse.svg", &plot::lines("log oracle MSE against log-SNR", &[("model", &pts)]))?;
    out.write(
        "eval_samples.svg",
        &plot::scatter(
            "data and samples",
            &[("data", &rows_to_points(&truth)), ("samples", &rows_to_points(&res.x))],
        ),
    )?;
    Ok(())
}

fn student_checkpoint(state: &DistillState, cfg: &RunConfig, sched: &LogSnrSchedule) -> Checkpoint {
    let (lo, hi) = (sched.lambda_min, sched.lambda_max);
    Checkpoint {
        model: cfg.distill.student.clone(),
        lambda_min: lo,
        lambda_max: hi,
        params: state.student.flat_params(),
        ema: state.student_ema.clone(),
        optim: state.student_opt.clone(),
        step: state.step,
        seed: state.seed,
        pending_loss: (0.0, 0),
        rng: RngCursor::of(&state.rng),
        log: Vec::new(),
    }
}

/// Distills the teacher checkpoint named by the config.
pub fn distill_model(cfg: &RunConfig) -> Result<(DistillState, LogSnrSchedule), RunError> {
    let (teacher, sched) = load_model(cfg, &default_checkpoint(cfg, &cfg.distill_teacher), true)?;
    if teacher.has_encoder() {
        return Err(ConfigError::Value {
            key: "distill.teacher".into(),
            message: "teacher must be a standard model (empty model.encoder_hidden)".into(),
        }
        .into());
    }
    let state = distill_loop(&teacher, &cfg.distill, &cfg.dataset(), &sched, cfg.seed)?;
    Ok((state, sched))
}

fn run_distill(cfg: &RunConfig, out: &mut Out<'_>) -> Result<(), RunError> {
    let (state, sched) = distill_model(cfg)?;
    let mut csv = String::from("step,aux_loss,student_loss,w2\n");
    for r in &state.log {
        let w2 = r.w2.map_or(String::new(), |v| v.to_string());
        let _ = writeln!(csv, "{},{},{},{}", r.step, r.aux_loss, r.student_loss, w2);
    }
    out.write("distill_metrics.csv", &csv)?;
    let path = cfg.output_dir.join("student.bin");
    save_checkpoint(&path, &student_checkpoint(&state, cfg, &sched))?;
    out.summary.files.push(path);
    let w2: Vec<(f64, f64)> = state.log.iter().filter_map(|r| r.w2.map(|w| (r.step as f64, w))).collect();
    out.write("distill_w2.svg", &plot::lines("student sliced W2", &[("w2", &w2)]))?;
    out.metric("aux_updates", state.aux_updates as f64);
    out.metric("student_updates", state.student_updates as f64);
    if let Some(w) = w2.last() {
        out.metric("final_w2", w.1);
    }
    Ok(())
}

/// One ablation row: the toggles and the seed it ran with.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblationRow {
    pub seed: u64,
    pub multi_level: bool,
    pub embed_drop: f64,
    pub augment: f64,
}

/// Cartesian product of the configured axes; unset axes take the base
/// config value. Row `i` runs with seed `seed ^ i`.
pub fn ablation_rows(cfg: &RunConfig) -> Vec<AblationRow> {
    if cfg.ablate.is_empty() {
        return Vec::new();
    }
    let or = |v: &Vec<f64>, d: f64| if v.is_empty() { vec![d] } else { v.clone() };
    let ml = if cfg.ablate.multi_level.is_empty() {
        vec![cfg.model.multi_level]
    } else {
        cfg.ablate.multi_level.clone()
    };
    let ed = or(&cfg.ablate.embed_drop, cfg.train.embed_drop_p);
    let au = or(&cfg.ablate.augment, cfg.augment_p);
    let mut rows = Vec::new();
    for &m in &ml {
        for &e in &ed {
            for &a in &au {
                let i = rows.len() as u64;
                rows.push(AblationRow {
                    seed: cfg.seed ^ i,
                    multi_level: m,
                    embed_drop: e,
                    augment: a,
                });
            }
        }
    }
    rows
}

/// The plain config that an ablation row stands for.
pub fn row_config(cfg: &RunConfig, row: &AblationRow) -> RunConfig {
    let mut c = cfg.clone();
    c.command = Command::Train;
    c.seed = row.seed;
    c.train_resume = None;
    c.model.multi_level = row.multi_level;
    c.train.embed_drop_p = row.embed_drop;
    c.model.embed_drop_p = row.embed_drop;
    c.augment_p = row.augment;
    c.train.augment = (row.augment > 0.0).then_some((row.augment, cfg.augment_shift));
    c
}

/// Final sliced W2 of a freshly trained model, drawn exactly as `eval`
/// draws it for the same config.
pub fn train_and_score(cfg: &RunConfig) -> Result<f64, RunError> {
    let state = train_model(cfg)?;
    let sc = &cfg.sample.config;
    let model = if sc.use_ema { state.ema_model() } else { state.model.clone() };
    let seed = derive_seed(cfg.seed, EVAL_STREAM);
    let (w2, _, _) = sample_and_score(
        &model,
        &cfg.dataset(),
        &cfg.schedule(),
        sc,
        cfg.eval.n_samples,
        cfg.eval.n_projections,
        seed,
    )?;
    Ok(w2)
}

fn run_ablation(cfg: &RunConfig, out: &mut Out<'_>) -> Result<(), RunError> {
    let mut csv = String::from("row,seed,multi_level,embed_drop,augment,w2\n");
    for (i, row) in ablation_rows(cfg).iter().enumerate() {
        let w2 = train_and_score(&row_config(cfg, row))?;
        let _ = writeln!(
            csv,
            "{i},{},{},{},{},{w2}",
            row.seed, row.multi_level, row.embed_drop, row.augment
        );
        out.metric(&format!("row{i}_w2"), w2);
    }
    out.write("ablation.csv", &csv)?;
    Ok(())
}
