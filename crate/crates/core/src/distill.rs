//! Dual-rate moment matching distillation.
//!
//! A dual-rate student (`E_H`, `g_η`) is distilled from a standard teacher
//! `g_θ` with the help of an auxiliary denoiser `g_φ` that tracks the
//! student's own moments. Steps alternate: even steps fit `g_φ`, odd steps
//! move the student along the detached moment gap `g_φ − g_θ`.
//!
//! Rollout intermediates are detached. Student gradients flow only through
//! the final `x̃ = g_η(z_t, t, e_τ)` and through `e_τ = E_H(z_τ, τ)`.

use ndarray::Array2;
use rand::Rng;

use crate::data::{DataBatch, Dataset};
use crate::eval::sliced_w2;
use crate::models::{
    ContextFeatures, Denoiser, DenoiseTape, DualRateModel, EncoderTape, FeatureDrop, ModelConfig,
    ModelGrads,
};
use crate::nnkit::{adam_step, EmaState, OptimState};
use crate::process::{posterior_params, sample_marginal, sample_posterior, standard_normal, NoisyState};
use crate::sample::{ancestral_sample, validate_rates, SampleConfig};
use crate::schedule::{LogSnrSchedule, LossWeight, SnrPoint};
use crate::train::{train_steps, TrainConfig, TrainState};
use crate::{derive_seed, seeded_rng, Error, Result, SimRng};

const DISTILL_STREAM: u64 = 11;
const PRETRAIN_STREAM: u64 = 12;
const EVAL_STREAM: u64 = 13;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DistillVariant {
    /// `z_τ` drawn from the forward process on data.
    #[default]
    Standard,
    /// `z_τ` generated from noise by the student itself.
    FullRollout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StudentInit {
    /// Train the full student briefly with the dual-rate diffusion loss.
    PretrainedDualRate,
    /// Copy the teacher into the encoder, pretrain the denoiser with the
    /// encoder frozen, then distill everything.
    #[default]
    FrozenTeacherEncoder,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    pub heavy_steps: usize,
    pub light_steps: usize,
    pub variant: DistillVariant,
    pub init: StudentInit,
    pub student: ModelConfig,
    pub n_steps: u64,
    pub batch_size: usize,
    pub weight: LossWeight,
    pub lr: f64,
    pub aux_lr: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub clip_norm: f64,
    pub ema_decay: f64,
    /// Steps of the initialisation training run.
    pub pretrain_steps: u64,
    pub pretrain_lr: f64,
    pub snapshot_every: u64,
    /// Samples per snapshot W2 evaluation; 0 disables it.
    pub eval_samples: usize,
    pub n_projections: usize,
    pub divergence_loss: f64,
    /// Also differentiates the student loss with respect to `φ` (through the
    /// stop-gradient) and records the largest entry.
    pub track_sg_gradients: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            heavy_steps: 2,
            light_steps: 8,
            variant: DistillVariant::Standard,
            init: StudentInit::FrozenTeacherEncoder,
            student: ModelConfig {
                embed_drop_p: 0.0,
                ..ModelConfig::default()
            },
            n_steps: 4_000,
            batch_size: 256,
            weight: LossWeight::default(),
            lr: 1e-4,
            aux_lr: 1e-4,
            warmup_steps: 100,
            beta1: 0.0,
            beta2: 0.99,
            clip_norm: 1.0,
            ema_decay: 0.999,
            pretrain_steps: 2_000,
            pretrain_lr: 1e-3,
            snapshot_every: 500,
            eval_samples: 10_000,
            n_projections: 128,
            divergence_loss: 1e6,
            track_sg_gradients: false,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        validate_rates(self.heavy_steps, self.light_steps)?;
        if self.batch_size == 0 {
            return Err(Error::config("distillation batch must be at least 1"));
        }
        if !(self.lr > 0.0 && self.aux_lr > 0.0) {
            return Err(Error::config("distillation learning rates must be positive"));
        }
        if self.student.encoder_hidden.is_empty() {
            return Err(Error::config("the student needs a context encoder"));
        }
        self.student.validate()
    }

    fn optimizer(&self, n: usize, lr: f64) -> OptimState {
        OptimState::new(n, lr)
            .with_betas(self.beta1, self.beta2)
            .with_warmup(self.warmup_steps)
            .with_clip(self.clip_norm)
    }
}

/// Times of one distillation step on the student's grids.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillTimes {
    pub tau: f64,
    pub t: f64,
    pub s: f64,
    /// Light-grid index of `τ` (`τ = 1 − tau_index / k`).
    pub tau_index: usize,
    /// Number of light steps from `τ` to `t`.
    pub delta_steps: usize,
}

/// `τ ∈ {1/K, …, 1}`, `t = τ − Δ/k` with `Δ ∈ {0, …, k/K − 1}`, and
/// `s = t − δ` with `δ ∼ U(0, 1/k]`.
pub fn sample_distill_times<R: Rng + ?Sized>(
    heavy: usize,
    light: usize,
    rng: &mut R,
) -> Result<DistillTimes> {
    validate_rates(heavy, light)?;
    let block = light / heavy;
    let j = rng.random_range(1..=heavy);
    let delta_steps = rng.random_range(0..block);
    let tau_index = light - j * block;
    let t_index = tau_index + delta_steps;
    let tau = (light - tau_index) as f64 / light as f64;
    let t = (light - t_index) as f64 / light as f64;
    let delta = (1.0 - rng.random::<f64>()) / light as f64;
    Ok(DistillTimes {
        tau,
        t,
        s: (t - delta).max(0.0),
        tau_index,
        delta_steps,
    })
}

/// One detached generative step `z_t → z_s` with the student's light
/// network and fixed features.
fn light_step<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    student: &D,
    z: &NoisyState,
    features: &ContextFeatures,
    labels: Option<&[usize]>,
    point_t: &SnrPoint,
    point_s: &SnrPoint,
    rng: &mut R,
) -> Result<NoisyState> {
    let x = student.predict(z, point_t, features, labels)?;
    let post = posterior_params(z, x.view(), point_s, point_t, 0.0)?;
    Ok(sample_posterior(&post, point_s, rng))
}

fn grid_index(t: f64, light: usize) -> Result<usize> {
    let pos = (1.0 - t) * light as f64;
    let idx = pos.round();
    if (pos - idx).abs() > 1e-9 || idx < 0.0 || idx > light as f64 {
        return Err(Error::Invalid(format!(
            "time {t} is not on the light grid of {light} steps"
        )));
    }
    Ok(idx as usize)
}

/// Runs the light network from `z_τ` down to `target_t` holding the
/// features fixed. The result carries no gradient.
#[allow(clippy::too_many_arguments)]
pub fn rollout_light<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    student: &D,
    z_tau: &NoisyState,
    features: &ContextFeatures,
    labels: Option<&[usize]>,
    target_t: f64,
    light: usize,
    sched: &LogSnrSchedule,
    rng: &mut R,
) -> Result<NoisyState> {
    let from = grid_index(z_tau.t, light)?;
    let to = grid_index(target_t, light)?;
    if to < from {
        return Err(Error::Ordering(format!(
            "rollout target {target_t} is noisier than the start {}",
            z_tau.t
        )));
    }
    let mut z = z_tau.clone();
    for i in from..to {
        let point_t = sched.eval((light - i) as f64 / light as f64)?;
        let point_s = sched.eval((light - i - 1) as f64 / light as f64)?;
        z = light_step(student, &z, features, labels, &point_t, &point_s, rng)?;
    }
    z.t = target_t;
    Ok(z)
}

/// Generates `z_τ` from pure noise with the student's sampler. Returns the
/// state and the number of encoder refreshes performed.
#[allow(clippy::too_many_arguments)]
pub fn full_rollout<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    student: &D,
    tau: f64,
    heavy: usize,
    light: usize,
    labels: Option<&[usize]>,
    n: usize,
    sched: &LogSnrSchedule,
    rng: &mut R,
) -> Result<(NoisyState, usize)> {
    validate_rates(heavy, light)?;
    let block = light / heavy;
    let to = grid_index(tau, light)?;
    if to % block != 0 {
        return Err(Error::Invalid(format!("τ = {tau} is not a heavy step")));
    }
    let mut z = NoisyState {
        z: standard_normal(n, student.data_dim(), rng),
        t: 1.0,
    };
    let mut refreshes = 0;
    let mut features = None;
    for i in 0..to {
        if i % block == 0 {
            features = Some(student.encode(&z, labels)?);
            refreshes += 1;
        }
        let point_t = sched.eval((light - i) as f64 / light as f64)?;
        let point_s = sched.eval((light - i - 1) as f64 / light as f64)?;
        let f = features.as_ref().expect("refreshed at block start");
        z = light_step(student, &z, f, labels, &point_t, &point_s, rng)?;
    }
    z.t = tau;
    Ok((z, refreshes))
}

/// One row of the distillation log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillRecord {
    pub step: u64,
    pub aux_loss: f64,
    pub student_loss: f64,
    pub w2: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct DistillState {
    teacher: DualRateModel,
    pub student: DualRateModel,
    pub aux: DualRateModel,
    pub student_opt: OptimState,
    pub aux_opt: OptimState,
    pub student_ema: EmaState,
    pub step: u64,
    pub aux_updates: u64,
    pub student_updates: u64,
    /// Largest `|∂L_student/∂φ|` seen, when tracked.
    pub max_phi_grad: Option<f64>,
    pub seed: u64,
    pub rng: SimRng,
    pub log: Vec<DistillRecord>,
    aux_acc: (f64, u64),
    student_acc: (f64, u64),
}

impl DistillState {
    /// Pairs an initialised student with a frozen teacher; the auxiliary
    /// model starts as a copy of the teacher.
    pub fn new(teacher: DualRateModel, student: DualRateModel, config: &DistillConfig, seed: u64) -> Result<Self> {
        if teacher.has_encoder() {
            return Err(Error::config("the teacher must be a standard diffusion model"));
        }
        if teacher.data_dim() != student.data_dim() {
            return Err(Error::config("teacher and student dimensions differ"));
        }
        let aux = teacher.clone();
        let s_flat = student.flat_params();
        Ok(Self {
            student_opt: config.optimizer(s_flat.len(), config.lr),
            aux_opt: config.optimizer(aux.n_params(), config.aux_lr),
            student_ema: EmaState::new(&s_flat, config.ema_decay),
            teacher,
            student,
            aux,
            step: 0,
            aux_updates: 0,
            student_updates: 0,
            max_phi_grad: None,
            seed,
            rng: seeded_rng(derive_seed(seed, DISTILL_STREAM)),
            log: Vec::new(),
            aux_acc: (0.0, 0),
            student_acc: (0.0, 0),
        })
    }

    pub fn teacher(&self) -> &DualRateModel {
        &self.teacher
    }

    pub fn student_ema_model(&self) -> DualRateModel {
        let mut m = self.student.clone();
        m.set_flat_params(&self.student_ema.shadow)
            .expect("shadow matches the student");
        m
    }
}

/// The student's prediction at `z_t` with the records needed to
/// differentiate it.
pub struct StudentForward {
    pub x_tilde: Array2<f64>,
    enc_tape: Option<EncoderTape>,
    den_tape: DenoiseTape,
}

impl StudentForward {
    /// Runs the light network at `z_t` on features whose encoder record is
    /// `enc_tape` (none keeps the encoder out of the gradient).
    pub fn new(
        student: &DualRateModel,
        features: &ContextFeatures,
        enc_tape: Option<EncoderTape>,
        z_t: &NoisyState,
        point_t: &SnrPoint,
        labels: Option<&[usize]>,
    ) -> Result<Self> {
        let (x_tilde, den_tape) = student.denoise(z_t, point_t, features, labels)?;
        Ok(Self {
            x_tilde,
            enc_tape,
            den_tape,
        })
    }
}

/// `−dλ/ds · e^{λ_s} · w(λ_s)`.
fn weight_at(weight: &LossWeight, point: &SnrPoint) -> f64 {
    weight.factor(point)
}

/// Fits `g_φ` to the student samples while tying it to the teacher.
pub fn aux_step(
    state: &mut DistillState,
    z_s: &NoisyState,
    s_point: &SnrPoint,
    x_tilde: &Array2<f64>,
    weight: f64,
) -> Result<f64> {
    if !state.step.is_multiple_of(2) {
        return Err(Error::Parity(format!(
            "auxiliary update requested on odd step {}",
            state.step
        )));
    }
    let empty = ContextFeatures::null(&[], z_s.z.nrows(), 1.0);
    let teacher_x = state.teacher.predict(z_s, s_point, &empty, None)?;
    let (aux_x, tape) = state.aux.denoise(z_s, s_point, &empty, None)?;
    let n = z_s.z.nrows().max(1) as f64;
    let r1: Array2<f64> = x_tilde - &aux_x;
    let r2: Array2<f64> = &teacher_x - &aux_x;
    let loss = weight * (r1.mapv(|v| v * v).sum() + r2.mapv(|v| v * v).sum()) / n;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("auxiliary loss at step {}", state.step)));
    }
    let d_aux = (&r1 + &r2).mapv(|v| -2.0 * weight * v / n);
    let grads = state.aux.backward(None, &tape, d_aux.view())?;
    let g = state.aux.flat_grads(&grads);
    let mut p = state.aux.flat_params();
    adam_step(&mut p, &g, &mut state.aux_opt)?;
    state.aux.set_flat_params(&p)?;
    state.step += 1;
    state.aux_updates += 1;
    Ok(loss)
}

/// Student surrogate loss and its gradient with respect to the encoder and
/// light network. The moment gap enters under a stop-gradient.
pub fn student_gradients(
    state: &DistillState,
    forward: &StudentForward,
    z_s: &NoisyState,
    s_point: &SnrPoint,
    weight: f64,
) -> Result<(f64, ModelGrads)> {
    let empty = ContextFeatures::null(&[], z_s.z.nrows(), 1.0);
    let teacher_x = state.teacher.predict(z_s, s_point, &empty, None)?;
    let aux_x = state.aux.predict(z_s, s_point, &empty, None)?;
    let n = z_s.z.nrows().max(1) as f64;
    let gap: Array2<f64> = &aux_x - &teacher_x;
    let loss = weight * (&forward.x_tilde * &gap).sum() / n;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("student loss at step {}", state.step)));
    }
    let d_x = gap.mapv(|v| weight * v / n);
    let grads = state
        .student
        .backward(forward.enc_tape.as_ref(), &forward.den_tape, d_x.view())?;
    Ok((loss, grads))
}

/// Gradient reaching `φ` from the student loss: the gap is detached, so
/// the upstream into the auxiliary network is zero.
fn aux_gradient_from_student_loss(state: &DistillState, z_s: &NoisyState, s_point: &SnrPoint) -> Result<f64> {
    let empty = ContextFeatures::null(&[], z_s.z.nrows(), 1.0);
    let (aux_x, tape) = state.aux.denoise(z_s, s_point, &empty, None)?;
    let upstream = Array2::zeros(aux_x.raw_dim());
    let g = state.aux.backward(None, &tape, upstream.view())?;
    Ok(g.denoiser.values.iter().fold(0.0f64, |a, v| a.max(v.abs())))
}

/// Moves the student along the detached moment gap.
pub fn student_step(
    state: &mut DistillState,
    forward: &StudentForward,
    z_s: &NoisyState,
    s_point: &SnrPoint,
    weight: f64,
    track_sg: bool,
) -> Result<f64> {
    if state.step % 2 != 1 {
        return Err(Error::Parity(format!(
            "student update requested on even step {}",
            state.step
        )));
    }
    let (loss, grads) = student_gradients(state, forward, z_s, s_point, weight)?;
    if track_sg {
        let m = aux_gradient_from_student_loss(state, z_s, s_point)?;
        state.max_phi_grad = Some(state.max_phi_grad.unwrap_or(0.0).max(m));
    }
    let g = state.student.flat_grads(&grads);
    let mut p = state.student.flat_params();
    adam_step(&mut p, &g, &mut state.student_opt)?;
    state.student.set_flat_params(&p)?;
    state.student_ema.update(&p)?;
    state.step += 1;
    state.student_updates += 1;
    Ok(loss)
}

fn labels_for(student: &DualRateModel, batch: &DataBatch) -> Option<Vec<usize>> {
    (student.n_classes > 0).then(|| batch.effective_labels(student.n_classes))
}

/// One alternating step: sample times and states, roll the student out,
/// then update either `φ` or the student depending on parity.
pub fn distill_step(
    state: &mut DistillState,
    config: &DistillConfig,
    dataset: &Dataset,
    sched: &LogSnrSchedule,
) -> Result<f64> {
    let (heavy, light) = (config.heavy_steps, config.light_steps);
    let times = sample_distill_times(heavy, light, &mut state.rng)?;
    let batch = dataset.sample(config.batch_size, &mut state.rng);
    let labels = labels_for(&state.student, &batch);
    let point_tau = sched.eval(times.tau)?;
    let z_tau = match config.variant {
        DistillVariant::Standard => sample_marginal(batch.x.view(), &point_tau, &mut state.rng),
        DistillVariant::FullRollout => {
            full_rollout(
                &state.student,
                times.tau,
                heavy,
                light,
                labels.as_deref(),
                config.batch_size,
                sched,
                &mut state.rng,
            )?
            .0
        }
    };
    let student_turn = state.step % 2 == 1;
    let (features, enc_tape) = state.student.encode_context(
        &z_tau,
        labels.as_deref(),
        FeatureDrop::Keep,
        student_turn,
        &mut state.rng,
    )?;
    let z_t = rollout_light(
        &state.student,
        &z_tau,
        &features,
        labels.as_deref(),
        times.t,
        light,
        sched,
        &mut state.rng,
    )?;
    let point_t = sched.eval(times.t)?;
    let point_s = sched.eval(times.s)?;
    let fwd = StudentForward::new(&state.student, &features, enc_tape, &z_t, &point_t, labels.as_deref())?;
    let post = posterior_params(&z_t, fwd.x_tilde.view(), &point_s, &point_t, 0.0)?;
    let z_s = sample_posterior(&post, &point_s, &mut state.rng);
    let w = weight_at(&config.weight, &point_s);
    let loss = if student_turn {
        let l = student_step(state, &fwd, &z_s, &point_s, w, config.track_sg_gradients)?;
        state.student_acc.0 += l;
        state.student_acc.1 += 1;
        l
    } else {
        let l = aux_step(state, &z_s, &point_s, &fwd.x_tilde, w)?;
        state.aux_acc.0 += l;
        state.aux_acc.1 += 1;
        l
    };
    if loss.abs() > config.divergence_loss {
        return Err(Error::Divergence {
            step: state.step,
            loss,
        });
    }
    Ok(loss)
}

/// Sliced W2 of `n` student samples against fresh data, both drawn from
/// `seed`.
pub fn student_w2(
    student: &DualRateModel,
    dataset: &Dataset,
    sched: &LogSnrSchedule,
    heavy: usize,
    light: usize,
    n: usize,
    n_projections: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = seeded_rng(seed);
    let truth = dataset.sample(n, &mut rng);
    let labels = labels_for(student, &truth);
    let mut sc = SampleConfig::new(heavy, light, n)?;
    sc.noise_interp = 0.0;
    let out = ancestral_sample(student, labels.as_deref(), student.data_dim(), sched, &sc, &mut rng)?;
    sliced_w2(out.x.view(), truth.x.view(), n_projections, &mut rng)
}

/// Builds the initial student.
pub fn init_student(
    teacher: &DualRateModel,
    config: &DistillConfig,
    dataset: &Dataset,
    sched: &LogSnrSchedule,
    seed: u64,
) -> Result<DualRateModel> {
    let mut rng = seeded_rng(derive_seed(seed, PRETRAIN_STREAM));
    let mut student = DualRateModel::new(&config.student, &mut rng)?;
    let freeze = config.init == StudentInit::FrozenTeacherEncoder;
    if freeze {
        let enc = student
            .encoder
            .as_mut()
            .expect("validated student has an encoder");
        if enc.spec != teacher.denoiser.spec {
            return Err(Error::config(
                "FrozenTeacherEncoder needs an encoder shaped exactly like the teacher",
            ));
        }
        enc.params = teacher.denoiser.params.clone();
    }
    if config.pretrain_steps == 0 {
        return Ok(student);
    }
    let tc = TrainConfig {
        heavy_steps: config.heavy_steps,
        light_steps: config.light_steps,
        batch_size: config.batch_size,
        n_steps: config.pretrain_steps,
        lr: config.pretrain_lr,
        embed_drop_p: config.student.embed_drop_p,
        class_drop_p: 0.0,
        freeze_encoder: freeze,
        snapshot_every: 0,
        eval_points: 0,
        ..TrainConfig::default()
    };
    let mut ts = TrainState::from_model(student, &tc, derive_seed(seed, PRETRAIN_STREAM));
    train_steps(&mut ts, &tc, dataset, sched, tc.n_steps)?;
    Ok(ts.ema_model())
}

fn snapshot(state: &mut DistillState, config: &DistillConfig, dataset: &Dataset, sched: &LogSnrSchedule) -> Result<()> {
    let w2 = if config.eval_samples > 0 {
        Some(student_w2(
            &state.student_ema_model(),
            dataset,
            sched,
            config.heavy_steps,
            config.light_steps,
            config.eval_samples,
            config.n_projections,
            derive_seed(derive_seed(state.seed, EVAL_STREAM), state.step),
        )?)
    } else {
        None
    };
    let mean = |acc: (f64, u64)| if acc.1 == 0 { f64::NAN } else { acc.0 / acc.1 as f64 };
    state.log.push(DistillRecord {
        step: state.step,
        aux_loss: mean(state.aux_acc),
        student_loss: mean(state.student_acc),
        w2,
    });
    state.aux_acc = (0.0, 0);
    state.student_acc = (0.0, 0);
    Ok(())
}

/// Runs `n` alternating steps.
pub fn distill_steps(
    state: &mut DistillState,
    config: &DistillConfig,
    dataset: &Dataset,
    sched: &LogSnrSchedule,
    n: u64,
) -> Result<()> {
    config.validate()?;
    for _ in 0..n {
        distill_step(state, config, dataset, sched)?;
        if config.snapshot_every > 0 && state.step.is_multiple_of(config.snapshot_every) {
            snapshot(state, config, dataset, sched)?;
        }
    }
    Ok(())
}

/// Initialises a student from `teacher` and distills it for
/// `config.n_steps` steps. With zero steps a single snapshot of the
/// initialised student is logged.
pub fn distill_loop(
    teacher: &DualRateModel,
    config: &DistillConfig,
    dataset: &Dataset,
    sched: &LogSnrSchedule,
    seed: u64,
) -> Result<DistillState> {
    config.validate()?;
    let student = init_student(teacher, config, dataset, sched, seed)?;
    let mut state = DistillState::new(teacher.clone(), student, config, seed)?;
    if config.n_steps == 0 {
        snapshot(&mut state, config, dataset, sched)?;
        return Ok(state);
    }
    distill_steps(&mut state, config, dataset, sched, config.n_steps)?;
    Ok(state)
}
