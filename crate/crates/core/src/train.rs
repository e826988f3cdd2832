//! Dual-rate diffusion training.
//!
//! Each step draws one `(τ, t)` pair for the whole batch, noises the data to
//! `z_τ`, bridges to `z_t`, and regresses `x` with the weighted ELBO factor
//! `−dλ/dt · e^λ · w(λ)`. Gradients flow through the denoiser and, via the
//! features, into the encoder.

use std::time::Instant;

use ndarray::Array2;
use rand::Rng;

use crate::data::{augment_translate, drop_class_labels, DataBatch, DataLayout, Dataset};
use crate::eval::{default_lambda_grid, oracle_mse};
use crate::models::{DualRateModel, FeatureDrop, ModelConfig, ModelGrads};
use crate::nnkit::{adam_step, EmaState, OptimState};
use crate::process::{sample_bridge, sample_marginal};
use crate::sample::validate_rates;
use crate::schedule::{LogSnrSchedule, LossWeight};
use crate::{derive_seed, seeded_rng, Error, Result, SimRng};

const TRAIN_STREAM: u64 = 1;
const EVAL_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub heavy_steps: usize,
    pub light_steps: usize,
    pub batch_size: usize,
    pub n_steps: u64,
    pub weight: LossWeight,
    pub lr: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub clip_norm: f64,
    pub ema_decay: f64,
    pub embed_drop_p: f64,
    pub class_drop_p: f64,
    /// Translation augmentation `(probability, max shift)` for grid data.
    pub augment: Option<(f64, usize)>,
    /// Keeps encoder parameters fixed (denoiser-only pretraining).
    pub freeze_encoder: bool,
    pub snapshot_every: u64,
    /// Items per log-SNR grid point in snapshot oracle MSE; 0 disables it.
    pub eval_points: usize,
    pub divergence_loss: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            heavy_steps: 8,
            light_steps: 64,
            batch_size: 256,
            n_steps: 20_000,
            weight: LossWeight::default(),
            lr: 1e-3,
            warmup_steps: 200,
            beta1: 0.9,
            beta2: 0.99,
            clip_norm: 1.0,
            ema_decay: 0.999,
            embed_drop_p: 0.5,
            class_drop_p: 0.1,
            augment: None,
            freeze_encoder: false,
            snapshot_every: 1_000,
            eval_points: 512,
            divergence_loss: 1e6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        validate_rates(self.heavy_steps, self.light_steps)?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        for (name, p) in [
            ("embed_drop_p", self.embed_drop_p),
            ("class_drop_p", self.class_drop_p),
            ("ema_decay", self.ema_decay),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if let Some((p, _)) = self.augment {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!(
                    "augmentation probability must lie in [0, 1], got {p}"
                )));
            }
        }
        if !(self.lr > 0.0) {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }

    fn optimizer(&self, n_params: usize) -> OptimState {
        OptimState::new(n_params, self.lr)
            .with_betas(self.beta1, self.beta2)
            .with_warmup(self.warmup_steps)
            .with_clip(self.clip_norm)
    }
}

/// `τ ∼ U[1/K, 1]`, `t = τ − δ` with `δ ∼ U(0, 1/K]`.
pub fn sample_training_times<R: Rng + ?Sized>(heavy_steps: usize, rng: &mut R) -> (f64, f64) {
    let k = heavy_steps.max(1) as f64;
    let u: f64 = rng.random();
    let tau = if heavy_steps <= 1 {
        1.0
    } else {
        1.0 / k + (1.0 - 1.0 / k) * u
    };
    let delta = (1.0 - rng.random::<f64>()) / k;
    (tau, (tau - delta).max(0.0))
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub grads: ModelGrads,
}

/// Weighted regression loss for one batch at times `(τ, t)` and its
/// gradients with respect to both networks.
#[allow(clippy::too_many_arguments)]
pub fn diffusion_loss<R: Rng + ?Sized>(
    model: &DualRateModel,
    batch: &DataBatch,
    tau: f64,
    t: f64,
    sched: &LogSnrSchedule,
    weight: &LossWeight,
    embed_drop_p: f64,
    rng: &mut R,
) -> Result<LossOutput> {
    loss_and_grads(model, batch, tau, t, sched, weight, embed_drop_p, true, rng)
}

#[allow(clippy::too_many_arguments)]
fn loss_and_grads<R: Rng + ?Sized>(
    model: &DualRateModel,
    batch: &DataBatch,
    tau: f64,
    t: f64,
    sched: &LogSnrSchedule,
    weight: &LossWeight,
    embed_drop_p: f64,
    train_encoder: bool,
    rng: &mut R,
) -> Result<LossOutput> {
    if !(t < tau) {
        return Err(Error::Ordering(format!(
            "training needs t < τ, got t = {t}, τ = {tau}"
        )));
    }
    let point_tau = sched.eval(tau)?;
    let point_t = sched.eval(t)?;
    let x = batch.x.view();
    let z_tau = sample_marginal(x, &point_tau, rng);
    let z_t = sample_bridge(&z_tau, x, &point_t, &point_tau, rng)?;
    let labels = (model.n_classes > 0).then(|| batch.effective_labels(model.n_classes));
    let (features, enc_tape) = model.encode_context(
        &z_tau,
        labels.as_deref(),
        FeatureDrop::Rate(embed_drop_p),
        train_encoder,
        rng,
    )?;
    let (x_hat, den_tape) = model.denoise(&z_t, &point_t, &features, labels.as_deref())?;
    let factor = weight.factor(&point_t);
    let n = batch.len().max(1) as f64;
    let diff: Array2<f64> = &batch.x - &x_hat;
    let loss = factor * diff.mapv(|v| v * v).sum() / n;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss {loss} at t = {t}, τ = {tau} (λ_t = {})",
            point_t.lambda
        )));
    }
    let d_x_hat = diff.mapv(|v| -2.0 * factor * v / n);
    let grads = model.backward(enc_tape.as_ref(), &den_tape, d_x_hat.view())?;
    Ok(LossOutput { loss, grads })
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainRecord {
    pub step: u64,
    /// Mean training loss since the previous record.
    pub loss: f64,
    /// Mean oracle MSE over `λ ∈ [−4, 4]` of the averaged model.
    pub oracle_mse: Option<f64>,
    pub wall_ms: u64,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: DualRateModel,
    pub opt: OptimState,
    pub ema: EmaState,
    pub step: u64,
    pub seed: u64,
    pub rng: SimRng,
    pub log: Vec<TrainRecord>,
    loss_acc: f64,
    loss_count: u64,
}

impl TrainState {
    /// Fresh model initialised from `seed`.
    pub fn new(model_config: &ModelConfig, config: &TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init_rng = seeded_rng(seed);
        let mut model = DualRateModel::new(model_config, &mut init_rng)?;
        model.embed_drop_p = config.embed_drop_p;
        Ok(Self::from_model(model, config, seed))
    }

    /// Starts training from existing parameters.
    pub fn from_model(model: DualRateModel, config: &TrainConfig, seed: u64) -> Self {
        let flat = model.flat_params();
        Self {
            opt: config.optimizer(flat.len()),
            ema: EmaState::new(&flat, config.ema_decay),
            model,
            step: 0,
            seed,
            rng: seeded_rng(derive_seed(seed, TRAIN_STREAM)),
            log: Vec::new(),
            loss_acc: 0.0,
            loss_count: 0,
        }
    }

    /// Rebuilds a state from persisted parts.
    #[allow(clippy::too_many_arguments)]
    pub fn restore(
        model: DualRateModel,
        opt: OptimState,
        ema: EmaState,
        step: u64,
        seed: u64,
        rng: SimRng,
        log: Vec<TrainRecord>,
        pending_loss: (f64, u64),
    ) -> Self {
        Self {
            model,
            opt,
            ema,
            step,
            seed,
            rng,
            log,
            loss_acc: pending_loss.0,
            loss_count: pending_loss.1,
        }
    }

    /// Loss accumulated since the last log record, as `(sum, count)`.
    pub fn pending_loss(&self) -> (f64, u64) {
        (self.loss_acc, self.loss_count)
    }

    /// The model with averaged parameters.
    pub fn ema_model(&self) -> DualRateModel {
        let mut m = self.model.clone();
        m.set_flat_params(&self.ema.shadow)
            .expect("shadow matches the model");
        m
    }
}

fn draw_batch<R: Rng + ?Sized>(
    dataset: &Dataset,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<DataBatch> {
    let mut batch = dataset.sample(config.batch_size, rng);
    if let (Some((p, shift)), DataLayout::Grid { .. }) = (config.augment, batch.layout) {
        batch = augment_translate(&batch, p, shift, rng)?;
    }
    if config.class_drop_p > 0.0 {
        batch = drop_class_labels(&batch, config.class_drop_p, rng);
    }
    Ok(batch)
}

/// Mean oracle MSE over the grid points with `λ ∈ [−4, 4]`.
pub fn snapshot_oracle_mse(
    model: &DualRateModel,
    dataset: &Dataset,
    sched: &LogSnrSchedule,
    heavy_steps: usize,
    n_per_point: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = seeded_rng(seed);
    let table = oracle_mse(
        model,
        &dataset.oracle_mixture(),
        sched,
        &default_lambda_grid(),
        n_per_point,
        heavy_steps,
        &mut rng,
    )?;
    Ok(table.mean_within(-4.0, 4.0))
}

/// Runs `n` more optimisation steps on `state`.
pub fn train_steps(
    state: &mut TrainState,
    config: &TrainConfig,
    dataset: &Dataset,
    sched: &LogSnrSchedule,
    n: u64,
) -> Result<()> {
    config.validate()?;
    if dataset.dim() != state.model.data_dim() {
        return Err(Error::config(format!(
            "dataset dimension {} but model dimension {}",
            dataset.dim(),
            state.model.data_dim()
        )));
    }
    let started = Instant::now();
    let enc_range = state.model.encoder_range();
    let heavy = if state.model.has_encoder() {
        config.heavy_steps
    } else {
        1
    };
    for _ in 0..n {
        let batch = draw_batch(dataset, config, &mut state.rng)?;
        let (tau, t) = sample_training_times(heavy, &mut state.rng);
        let out = loss_and_grads(
            &state.model,
            &batch,
            tau,
            t,
            sched,
            &config.weight,
            config.embed_drop_p,
            !config.freeze_encoder,
            &mut state.rng,
        )?;
        if out.loss > config.divergence_loss {
            return Err(Error::Divergence {
                step: state.step,
                loss: out.loss,
            });
        }
        let mut grads = state.model.flat_grads(&out.grads);
        if config.freeze_encoder {
            grads[enc_range.clone()].fill(0.0);
        }
        let mut params = state.model.flat_params();
        if config.freeze_encoder {
            let frozen = params[enc_range.clone()].to_vec();
            adam_step(&mut params, &grads, &mut state.opt)?;
            params[enc_range.clone()].copy_from_slice(&frozen);
        } else {
            adam_step(&mut params, &grads, &mut state.opt)?;
        }
        state.model.set_flat_params(&params)?;
        state.ema.update(&params)?;
        state.step += 1;
        state.loss_acc += out.loss;
        state.loss_count += 1;
        if config.snapshot_every > 0 && state.step.is_multiple_of(config.snapshot_every) {
            let oracle = if config.eval_points > 0 {
                Some(snapshot_oracle_mse(
                    &state.ema_model(),
                    dataset,
                    sched,
                    heavy,
                    config.eval_points,
                    derive_seed(derive_seed(state.seed, EVAL_STREAM), state.step),
                )?)
            } else {
                None
            };
            state.log.push(TrainRecord {
                step: state.step,
                loss: state.loss_acc / state.loss_count as f64,
                oracle_mse: oracle,
                wall_ms: started.elapsed().as_millis() as u64,
            });
            state.loss_acc = 0.0;
            state.loss_count = 0;
        }
    }
    Ok(())
}

/// Trains a fresh model for `config.n_steps` steps.
pub fn train_loop(
    model_config: &ModelConfig,
    config: &TrainConfig,
    dataset: &Dataset,
    sched: &LogSnrSchedule,
    seed: u64,
) -> Result<TrainState> {
    let mut state = TrainState::new(model_config, config, seed)?;
    train_steps(&mut state, config, dataset, sched, config.n_steps)?;
    Ok(state)
}
