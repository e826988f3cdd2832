//! Dual-rate ancestral sampling.
//!
//! Light step `i` (of `k`) runs from `t = (k − i)/k` to `s = (k − i − 1)/k`.
//! The encoder is refreshed whenever `i` is a multiple of `k / K`, and its
//! features are reused by every light step until the next refresh.

use ndarray::Array2;
use rand::Rng;

use crate::models::{ContextFeatures, Denoiser, Guidance};
use crate::process::{posterior_params, sample_posterior, standard_normal, NoisyState};
use crate::schedule::LogSnrSchedule;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleConfig {
    pub heavy_steps: usize,
    pub light_steps: usize,
    pub guidance: Guidance,
    /// Log-variance interpolation between posterior and forward variance.
    pub noise_interp: f64,
    pub clip: bool,
    pub n_samples: usize,
    /// For callers holding raw and averaged parameters; the sampler itself
    /// uses whatever model it is given.
    pub use_ema: bool,
    pub record_trace: bool,
}

impl SampleConfig {
    pub fn new(heavy_steps: usize, light_steps: usize, n_samples: usize) -> Result<Self> {
        let c = Self {
            heavy_steps,
            light_steps,
            guidance: Guidance::off(),
            noise_interp: 0.2,
            clip: false,
            n_samples,
            use_ema: true,
            record_trace: false,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        validate_rates(self.heavy_steps, self.light_steps)?;
        if !(0.0..=1.0).contains(&self.noise_interp) {
            return Err(Error::config(format!(
                "noise_interp must lie in [0, 1], got {}",
                self.noise_interp
            )));
        }
        Ok(())
    }

    pub fn block(&self) -> usize {
        self.light_steps / self.heavy_steps
    }
}

/// `K ≥ 1`, `k ≥ 1` and `K` divides `k`.
pub fn validate_rates(heavy: usize, light: usize) -> Result<()> {
    if heavy == 0 || light == 0 {
        return Err(Error::config(format!(
            "step counts must be positive, got K = {heavy}, k = {light}"
        )));
    }
    if !light.is_multiple_of(heavy) {
        return Err(Error::config(format!(
            "K = {heavy} does not divide k = {light}"
        )));
    }
    Ok(())
}

/// One light step of a recorded chain.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub t: f64,
    /// Time at which the features in use were computed.
    pub tau: f64,
    pub refreshed: bool,
    /// Whether the encoder was also run on the unconditional branch here.
    pub heavy_guided: bool,
    pub light_guided: bool,
    pub z_t: Array2<f64>,
    pub x_hat: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SampleTrace {
    pub steps: Vec<TraceStep>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct NfeCounts {
    pub heavy: usize,
    pub light: usize,
    pub guided_heavy: usize,
    pub guided_light: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    pub x: Array2<f64>,
    pub trace: Option<SampleTrace>,
    pub counts: NfeCounts,
}

/// Evaluation counts read off a trace.
pub fn count_nfe(trace: &SampleTrace) -> NfeCounts {
    let mut c = NfeCounts::default();
    for s in &trace.steps {
        c.light += 1;
        c.heavy += s.refreshed as usize;
        c.guided_heavy += s.heavy_guided as usize;
        c.guided_light += s.light_guided as usize;
    }
    c
}

/// Evaluation counts implied by a configuration without running it.
pub fn count_nfe_planned(config: &SampleConfig, sched: &LogSnrSchedule) -> Result<NfeCounts> {
    config.validate()?;
    let plan = plan_guidance(config, sched)?;
    Ok(NfeCounts {
        heavy: config.heavy_steps,
        light: config.light_steps,
        guided_heavy: plan.block_guided.iter().filter(|&&g| g).count(),
        guided_light: plan.step_guided.iter().filter(|&&g| g).count(),
    })
}

struct GuidancePlan {
    step_guided: Vec<bool>,
    block_guided: Vec<bool>,
}

fn plan_guidance(config: &SampleConfig, sched: &LogSnrSchedule) -> Result<GuidancePlan> {
    let k = config.light_steps;
    let block = config.block();
    let mut step_guided = Vec::with_capacity(k);
    for i in 0..k {
        let t = (k - i) as f64 / k as f64;
        step_guided.push(config.guidance.active(sched.eval(t)?.lambda));
    }
    let block_guided = step_guided.chunks(block).map(|c| c.iter().any(|&g| g)).collect();
    Ok(GuidancePlan {
        step_guided,
        block_guided,
    })
}

/// Generates `config.n_samples` items (or one per label).
///
/// The final step returns the prediction `x̂` instead of sampling `z_0`.
pub fn ancestral_sample<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    model: &D,
    labels: Option<&[usize]>,
    data_dim: usize,
    sched: &LogSnrSchedule,
    config: &SampleConfig,
    rng: &mut R,
) -> Result<SampleOutput> {
    config.validate()?;
    let n = labels.map_or(config.n_samples, |l| l.len());
    let z = NoisyState {
        z: standard_normal(n, data_dim, rng),
        t: 1.0,
    };
    run_chain(model, z, labels, sched, config, 0, rng)
}

/// Runs light steps `first..k` starting from `z` at `t = (k − first)/k`.
/// `first` must be a heavy-step index.
pub(crate) fn run_chain<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    model: &D,
    mut z: NoisyState,
    labels: Option<&[usize]>,
    sched: &LogSnrSchedule,
    config: &SampleConfig,
    first: usize,
    rng: &mut R,
) -> Result<SampleOutput> {
    let k = config.light_steps;
    let block = config.block();
    if !first.is_multiple_of(block) || first > k {
        return Err(Error::Invalid(format!(
            "chain must start on a heavy step, got index {first}"
        )));
    }
    let plan = plan_guidance(config, sched)?;
    let mut trace = config.record_trace.then(SampleTrace::default);
    let mut counts = NfeCounts::default();
    let mut cond: Option<ContextFeatures> = None;
    let mut uncond: Option<ContextFeatures> = None;
    let mut x_hat = z.z.clone();
    for i in first..k {
        let t = (k - i) as f64 / k as f64;
        let s = (k - i - 1) as f64 / k as f64;
        let refreshed = i % block == 0;
        let mut heavy_guided = false;
        if refreshed {
            cond = Some(model.encode(&z, labels)?);
            counts.heavy += 1;
            uncond = None;
            if plan.block_guided[i / block] {
                uncond = Some(model.encode(&z, None)?);
                counts.guided_heavy += 1;
                heavy_guided = true;
            }
        }
        let feats = cond.as_ref().expect("first step refreshes");
        let point_t = sched.eval(t)?;
        let light_guided = plan.step_guided[i];
        x_hat = model.guided(&z, &point_t, feats, uncond.as_ref(), labels, &config.guidance)?;
        counts.light += 1;
        counts.guided_light += light_guided as usize;
        if config.clip {
            x_hat.mapv_inplace(|v| v.clamp(-1.0, 1.0));
        }
        if x_hat.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("prediction at t = {t}")));
        }
        if let Some(tr) = trace.as_mut() {
            tr.steps.push(TraceStep {
                t,
                tau: feats.tau,
                refreshed,
                heavy_guided,
                light_guided,
                z_t: z.z.clone(),
                x_hat: x_hat.clone(),
            });
        }
        if i + 1 < k {
            let point_s = sched.eval(s)?;
            let post = posterior_params(&z, x_hat.view(), &point_s, &point_t, config.noise_interp)?;
            z = sample_posterior(&post, &point_s, rng);
        }
    }
    Ok(SampleOutput {
        x: x_hat,
        trace,
        counts,
    })
}
