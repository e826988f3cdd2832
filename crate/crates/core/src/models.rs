//! The heavy-encoder / light-denoiser pair.
//!
//! The encoder runs on `(z_τ, τ, class)` and its hidden activations form the
//! context features. The denoiser runs on `(z_t, t, τ, class)` with those
//! features concatenated into its hidden layer inputs. Predictions are
//! always returned in x-space.

use ndarray::{Array2, ArrayView2, Zip};
use rand::Rng;

use crate::data::{log_sum_exp, GmmSpec};
use crate::nnkit::{
    mlp_backward, mlp_forward, Activation, MlpInput, MlpSpec, MlpTape, ParamVector,
};
use crate::process::NoisyState;
use crate::schedule::SnrPoint;
use crate::{Error, Result};

/// What the raw denoiser output stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ParamMode {
    XPred,
    #[default]
    VPred,
}

/// An architecture together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub spec: MlpSpec,
    pub params: ParamVector,
}

impl Network {
    pub fn new<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let params = spec.init_params(rng);
        Ok(Self { spec, params })
    }
}

/// Cached encoder output `e_τ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextFeatures {
    pub layers: Vec<Array2<f64>>,
    pub tau: f64,
    /// `true` for items whose features were replaced by zeros.
    pub null_flag: Vec<bool>,
}

impl ContextFeatures {
    /// All-zero features, the encoding of "no context".
    pub fn null(widths: &[usize], batch: usize, tau: f64) -> Self {
        Self {
            layers: widths.iter().map(|&w| Array2::zeros((batch, w))).collect(),
            tau,
            null_flag: vec![true; batch],
        }
    }

    pub fn batch(&self) -> usize {
        self.null_flag.len()
    }
}

/// How encoder features are dropped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FeatureDrop {
    Keep,
    All,
    Rate(f64),
}

/// Hyperparameters needed to build a [`DualRateModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub data_dim: usize,
    /// Empty means no encoder: a standard single-rate diffusion model.
    pub encoder_hidden: Vec<usize>,
    pub denoiser_hidden: Vec<usize>,
    pub multi_level: bool,
    pub param_mode: ParamMode,
    pub n_classes: usize,
    pub embed_drop_p: f64,
    pub time_embed_dim: usize,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            data_dim: 2,
            encoder_hidden: vec![256, 256, 256],
            denoiser_hidden: vec![128, 128],
            multi_level: true,
            param_mode: ParamMode::VPred,
            n_classes: 0,
            embed_drop_p: 0.5,
            time_embed_dim: 16,
            activation: Activation::Silu,
        }
    }
}

impl ModelConfig {
    /// Encoder hidden layers whose activations become features, in the
    /// order of the denoiser layers they feed.
    pub fn feature_layers(&self) -> Vec<usize> {
        let n_enc = self.encoder_hidden.len();
        if n_enc == 0 {
            return Vec::new();
        }
        if self.multi_level {
            let n = n_enc.min(self.denoiser_hidden.len());
            (n_enc - n..n_enc).collect()
        } else {
            vec![n_enc - 1]
        }
    }

    pub fn encoder_spec(&self) -> Option<MlpSpec> {
        if self.encoder_hidden.is_empty() {
            return None;
        }
        Some(MlpSpec {
            input_dim: self.data_dim,
            hidden_dims: self.encoder_hidden.clone(),
            output_dim: self.data_dim,
            activation: self.activation,
            time_embed_dim: self.time_embed_dim,
            n_times: 1,
            n_classes: self.n_classes,
            film_enabled: true,
            cond_dims: Vec::new(),
        })
    }

    pub fn denoiser_spec(&self) -> MlpSpec {
        let has_encoder = !self.encoder_hidden.is_empty();
        MlpSpec {
            input_dim: self.data_dim,
            hidden_dims: self.denoiser_hidden.clone(),
            output_dim: self.data_dim,
            activation: self.activation,
            time_embed_dim: self.time_embed_dim,
            n_times: if has_encoder { 2 } else { 1 },
            n_classes: self.n_classes,
            film_enabled: true,
            cond_dims: self
                .feature_layers()
                .iter()
                .map(|&l| self.encoder_hidden[l])
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.embed_drop_p) {
            return Err(Error::config(format!(
                "embed_drop_p must lie in [0, 1], got {}",
                self.embed_drop_p
            )));
        }
        if self.denoiser_hidden.is_empty() && !self.encoder_hidden.is_empty() {
            return Err(Error::config(
                "a denoiser without hidden layers cannot take context features",
            ));
        }
        if let Some(e) = self.encoder_spec() {
            e.validate()?;
        }
        self.denoiser_spec().validate()
    }
}

/// Encoder forward record needed to backpropagate into the encoder.
#[derive(Debug, Clone)]
pub struct EncoderTape {
    tape: MlpTape,
    dropped: Vec<bool>,
}

/// Denoiser forward record.
#[derive(Debug, Clone)]
pub struct DenoiseTape {
    tape: MlpTape,
    sigma: f64,
}

/// Parameter gradients of both networks.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub encoder: Option<ParamVector>,
    pub denoiser: ParamVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualRateModel {
    pub encoder: Option<Network>,
    pub denoiser: Network,
    pub feature_layers: Vec<usize>,
    pub multi_level: bool,
    pub param_mode: ParamMode,
    pub n_classes: usize,
    pub embed_drop_p: f64,
}

/// `x = α z − σ v`.
pub fn v_to_x(v: ArrayView2<'_, f64>, z: ArrayView2<'_, f64>, point: &SnrPoint) -> Result<Array2<f64>> {
    if v.dim() != z.dim() {
        return Err(Error::shape(format!("v is {:?}, z is {:?}", v.dim(), z.dim())));
    }
    let (a, s) = (point.alpha, point.sigma);
    let mut x = Array2::zeros(z.raw_dim());
    Zip::from(&mut x)
        .and(z)
        .and(v)
        .for_each(|x, &z, &v| *x = a * z - s * v);
    Ok(x)
}

/// `v = α ε − σ x` with `ε = (z − α x) / σ`.
pub fn x_to_v(x: ArrayView2<'_, f64>, z: ArrayView2<'_, f64>, point: &SnrPoint) -> Result<Array2<f64>> {
    if x.dim() != z.dim() {
        return Err(Error::shape(format!("x is {:?}, z is {:?}", x.dim(), z.dim())));
    }
    let (a, s) = (point.alpha, point.sigma);
    if s <= 0.0 {
        return Err(Error::Invalid(
            "x_to_v is singular at sigma = 0".into(),
        ));
    }
    let mut v = Array2::zeros(z.raw_dim());
    Zip::from(&mut v).and(z).and(x).for_each(|v, &z, &x| {
        let eps = (z - a * x) / s;
        *v = a * eps - s * x;
    });
    Ok(v)
}

impl DualRateModel {
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let encoder = match config.encoder_spec() {
            Some(spec) => Some(Network::new(spec, rng)?),
            None => None,
        };
        let denoiser = Network::new(config.denoiser_spec(), rng)?;
        Ok(Self {
            encoder,
            denoiser,
            feature_layers: config.feature_layers(),
            multi_level: config.multi_level,
            param_mode: config.param_mode,
            n_classes: config.n_classes,
            embed_drop_p: config.embed_drop_p,
        })
    }

    pub fn data_dim(&self) -> usize {
        self.denoiser.spec.input_dim
    }

    pub fn has_encoder(&self) -> bool {
        self.encoder.is_some()
    }

    pub fn feature_widths(&self) -> &[usize] {
        &self.denoiser.spec.cond_dims
    }

    fn check_labels(&self, labels: Option<&[usize]>, batch: usize) -> Result<()> {
        if let Some(l) = labels {
            if l.len() != batch {
                return Err(Error::shape(format!("{} labels for batch {batch}", l.len())));
            }
            if self.n_classes > 0 {
                if let Some(bad) = l.iter().find(|&&c| c > self.n_classes) {
                    return Err(Error::Invalid(format!(
                        "label {bad} outside 0..{} (null class {})",
                        self.n_classes, self.n_classes
                    )));
                }
            }
        }
        Ok(())
    }

    /// Runs the encoder and collects feature levels. The tape is kept only
    /// when `record` is set.
    pub fn encode_context<R: Rng + ?Sized>(
        &self,
        z_tau: &NoisyState,
        labels: Option<&[usize]>,
        drop: FeatureDrop,
        record: bool,
        rng: &mut R,
    ) -> Result<(ContextFeatures, Option<EncoderTape>)> {
        let batch = z_tau.z.nrows();
        self.check_labels(labels, batch)?;
        let Some(enc) = &self.encoder else {
            return Ok((ContextFeatures::null(&[], batch, z_tau.t), None));
        };
        let times = [vec![z_tau.t]];
        let input = MlpInput {
            x: z_tau.z.view(),
            times: &times,
            labels,
            cond: &[],
        };
        let (_, tape) = mlp_forward::<R>(&enc.spec, &enc.params, input, None)?;
        let dropped: Vec<bool> = match drop {
            FeatureDrop::Keep => vec![false; batch],
            FeatureDrop::All => vec![true; batch],
            FeatureDrop::Rate(p) => (0..batch).map(|_| rng.random::<f64>() < p).collect(),
        };
        let layers = self
            .feature_layers
            .iter()
            .map(|&l| {
                let mut f = tape.hidden_output(l).clone();
                for (mut row, &d) in f.rows_mut().into_iter().zip(&dropped) {
                    if d {
                        row.fill(0.0);
                    }
                }
                f
            })
            .collect();
        let features = ContextFeatures {
            layers,
            tau: z_tau.t,
            null_flag: dropped.clone(),
        };
        let tape = record.then_some(EncoderTape { tape, dropped });
        Ok((features, tape))
    }

    /// Predicts `x̂` from `z_t`. `point_t` must be the schedule point of
    /// `z_t.t`.
    pub fn denoise(
        &self,
        z_t: &NoisyState,
        point_t: &SnrPoint,
        features: &ContextFeatures,
        labels: Option<&[usize]>,
    ) -> Result<(Array2<f64>, DenoiseTape)> {
        if features.tau < z_t.t {
            return Err(Error::Ordering(format!(
                "features from τ = {} used at later time t = {}",
                features.tau, z_t.t
            )));
        }
        let batch = z_t.z.nrows();
        if self.has_encoder() && features.batch() != batch {
            return Err(Error::shape(format!(
                "features for {} items, batch has {batch}",
                features.batch()
            )));
        }
        self.check_labels(labels, batch)?;
        let times: Vec<Vec<f64>> = if self.has_encoder() {
            vec![vec![z_t.t], vec![features.tau]]
        } else {
            vec![vec![z_t.t]]
        };
        let cond: &[Array2<f64>] = if self.has_encoder() {
            &features.layers
        } else {
            &[]
        };
        let input = MlpInput {
            x: z_t.z.view(),
            times: &times,
            labels,
            cond,
        };
        let (raw, tape) =
            mlp_forward::<crate::SimRng>(&self.denoiser.spec, &self.denoiser.params, input, None)?;
        let x_hat = match self.param_mode {
            ParamMode::XPred => raw,
            ParamMode::VPred => v_to_x(raw.view(), z_t.z.view(), point_t)?,
        };
        Ok((
            x_hat,
            DenoiseTape {
                tape,
                sigma: point_t.sigma,
            },
        ))
    }

    /// Gradients of a scalar loss whose gradient with respect to `x̂` is
    /// `d_x_hat`. Without an encoder tape the features are treated as
    /// constants.
    pub fn backward(
        &self,
        enc_tape: Option<&EncoderTape>,
        den_tape: &DenoiseTape,
        d_x_hat: ArrayView2<'_, f64>,
    ) -> Result<ModelGrads> {
        let d_raw = match self.param_mode {
            ParamMode::XPred => d_x_hat.to_owned(),
            ParamMode::VPred => d_x_hat.mapv(|g| -den_tape.sigma * g),
        };
        let den = mlp_backward(
            &self.denoiser.spec,
            &self.denoiser.params,
            &den_tape.tape,
            d_raw.view(),
            &[],
        )?;
        let encoder = match (&self.encoder, enc_tape) {
            (Some(enc), Some(et)) => {
                let mut d_hidden: Vec<Option<Array2<f64>>> = vec![None; enc.spec.n_hidden()];
                for (level, &l) in self.feature_layers.iter().enumerate() {
                    let mut g = den.cond[level].clone();
                    for (mut row, &d) in g.rows_mut().into_iter().zip(&et.dropped) {
                        if d {
                            row.fill(0.0);
                        }
                    }
                    d_hidden[l] = Some(match d_hidden[l].take() {
                        Some(prev) => prev + g,
                        None => g,
                    });
                }
                let d_hidden: Vec<Option<Array2<f64>>> = d_hidden
                    .into_iter()
                    .enumerate()
                    .map(|(l, g)| {
                        Some(g.unwrap_or_else(|| {
                            Array2::zeros((et.tape.batch(), enc.spec.hidden_dims[l]))
                        }))
                    })
                    .collect();
                let d_out = Array2::zeros((et.tape.batch(), enc.spec.output_dim));
                let g = mlp_backward(&enc.spec, &enc.params, &et.tape, d_out.view(), &d_hidden)?;
                Some(g.params)
            }
            _ => None,
        };
        Ok(ModelGrads {
            encoder,
            denoiser: den.params,
        })
    }

    /// Total number of trainable parameters.
    pub fn n_params(&self) -> usize {
        self.encoder.as_ref().map_or(0, |e| e.params.len()) + self.denoiser.params.len()
    }

    /// Encoder parameters followed by denoiser parameters.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_params());
        if let Some(e) = &self.encoder {
            v.extend_from_slice(&e.params.values);
        }
        v.extend_from_slice(&self.denoiser.params.values);
        v
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::shape(format!(
                "{} values for {} parameters",
                flat.len(),
                self.n_params()
            )));
        }
        let mut rest = flat;
        if let Some(e) = &mut self.encoder {
            let (head, tail) = rest.split_at(e.params.len());
            e.params.values.copy_from_slice(head);
            rest = tail;
        }
        self.denoiser.params.values.copy_from_slice(rest);
        Ok(())
    }

    /// Gradients laid out like [`Self::flat_params`]; missing encoder
    /// gradients are zero.
    pub fn flat_grads(&self, grads: &ModelGrads) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_params());
        if let Some(e) = &self.encoder {
            match &grads.encoder {
                Some(g) => v.extend_from_slice(&g.values),
                None => v.extend(std::iter::repeat_n(0.0, e.params.len())),
            }
        }
        v.extend_from_slice(&grads.denoiser.values);
        v
    }

    /// Range of the encoder inside the flat parameter vector.
    pub fn encoder_range(&self) -> std::ops::Range<usize> {
        0..self.encoder.as_ref().map_or(0, |e| e.params.len())
    }
}

/// Classifier-free guidance weight and the log-SNR interval where it acts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Guidance {
    pub w: f64,
    pub lambda_lo: f64,
    pub lambda_hi: f64,
}

impl Guidance {
    pub fn off() -> Self {
        Self {
            w: 0.0,
            ..Self::default()
        }
    }

    /// Whether a step at log-SNR `lambda` needs the unconditional branch.
    pub fn active(&self, lambda: f64) -> bool {
        self.w > 0.0 && lambda > self.lambda_lo && lambda < self.lambda_hi
    }
}

impl Default for Guidance {
    fn default() -> Self {
        Self {
            w: 0.0,
            lambda_lo: 1.5,
            lambda_hi: 5.0,
        }
    }
}

/// `cond + w (cond − uncond)`.
pub fn guidance_combine(cond: &Array2<f64>, uncond: &Array2<f64>, w: f64) -> Array2<f64> {
    let mut out = cond.clone();
    Zip::from(&mut out)
        .and(uncond)
        .for_each(|c, &u| *c += w * (*c - u));
    out
}

/// Anything the sampler can query: an encoder stage and a prediction stage.
pub trait Denoiser {
    fn data_dim(&self) -> usize;

    fn has_encoder(&self) -> bool;

    fn n_classes(&self) -> usize;

    fn encode(&self, z_tau: &NoisyState, labels: Option<&[usize]>) -> Result<ContextFeatures>;

    fn predict(
        &self,
        z_t: &NoisyState,
        point_t: &SnrPoint,
        features: &ContextFeatures,
        labels: Option<&[usize]>,
    ) -> Result<Array2<f64>>;

    /// Guided prediction. Outside the guidance interval only the
    /// conditional branch is evaluated.
    fn guided(
        &self,
        z_t: &NoisyState,
        point_t: &SnrPoint,
        cond: &ContextFeatures,
        uncond: Option<&ContextFeatures>,
        labels: Option<&[usize]>,
        guidance: &Guidance,
    ) -> Result<Array2<f64>> {
        let c = self.predict(z_t, point_t, cond, labels)?;
        if !guidance.active(point_t.lambda) {
            return Ok(c);
        }
        let uncond = uncond.ok_or_else(|| {
            Error::Invalid("guided step without unconditional features".into())
        })?;
        let u = self.predict(z_t, point_t, uncond, None)?;
        Ok(guidance_combine(&c, &u, guidance.w))
    }
}

impl Denoiser for DualRateModel {
    fn data_dim(&self) -> usize {
        DualRateModel::data_dim(self)
    }

    fn has_encoder(&self) -> bool {
        self.encoder.is_some()
    }

    fn n_classes(&self) -> usize {
        self.n_classes
    }

    fn encode(&self, z_tau: &NoisyState, labels: Option<&[usize]>) -> Result<ContextFeatures> {
        let mut rng = crate::seeded_rng(0);
        Ok(self
            .encode_context(z_tau, labels, FeatureDrop::Keep, false, &mut rng)?
            .0)
    }

    fn predict(
        &self,
        z_t: &NoisyState,
        point_t: &SnrPoint,
        features: &ContextFeatures,
        labels: Option<&[usize]>,
    ) -> Result<Array2<f64>> {
        Ok(self.denoise(z_t, point_t, features, labels)?.0)
    }
}

/// Closed-form `E[x | z_t]` under a Gaussian mixture.
///
/// With `labels`, each item is restricted to its own component; a label equal
/// to the number of components means "unconditional".
pub fn oracle_denoiser(
    spec: &GmmSpec,
    z_t: ArrayView2<'_, f64>,
    point: &SnrPoint,
    labels: Option<&[usize]>,
) -> Result<Array2<f64>> {
    let d = spec.dim();
    if z_t.ncols() != d {
        return Err(Error::shape(format!(
            "z has {} columns, mixture has dimension {d}",
            z_t.ncols()
        )));
    }
    if let Some(l) = labels {
        if l.len() != z_t.nrows() {
            return Err(Error::shape(format!("{} labels for {} rows", l.len(), z_t.nrows())));
        }
    }
    let (a, sig) = (point.alpha, point.sigma);
    let s2 = spec.comp_std().powi(2);
    let var = a * a * s2 + sig * sig;
    let gain = a * s2 / var;
    let means = spec.means();
    let n_comp = spec.n_components();
    let log_w: Vec<f64> = spec.weights().iter().map(|w| w.ln()).collect();
    let mut out = Array2::zeros(z_t.raw_dim());
    let mut logits = vec![0.0; n_comp];
    for (i, z) in z_t.rows().into_iter().enumerate() {
        let label = labels.map(|l| l[i]).filter(|&c| c < n_comp);
        let resp: Vec<f64> = match label {
            Some(c) => (0..n_comp).map(|j| if j == c { 1.0 } else { 0.0 }).collect(),
            None => {
                for (j, m) in means.rows().into_iter().enumerate() {
                    let sq: f64 = z
                        .iter()
                        .zip(m.iter())
                        .map(|(zv, mv)| (zv - a * mv).powi(2))
                        .sum();
                    logits[j] = log_w[j] - 0.5 * sq / var;
                }
                let norm = log_sum_exp(&logits);
                logits.iter().map(|l| (l - norm).exp()).collect()
            }
        };
        let mut row = out.row_mut(i);
        for (j, m) in means.rows().into_iter().enumerate() {
            if resp[j] == 0.0 {
                continue;
            }
            for k in 0..d {
                row[k] += resp[j] * (m[k] + gain * (z[k] - a * m[k]));
            }
        }
    }
    Ok(out)
}

/// The analytic optimum wrapped as a [`Denoiser`] without an encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmOracle {
    pub spec: GmmSpec,
    /// Whether labels restrict the posterior to one component.
    pub conditional: bool,
}

impl Denoiser for GmmOracle {
    fn data_dim(&self) -> usize {
        self.spec.dim()
    }

    fn has_encoder(&self) -> bool {
        false
    }

    fn n_classes(&self) -> usize {
        if self.conditional {
            self.spec.n_components()
        } else {
            0
        }
    }

    fn encode(&self, z_tau: &NoisyState, _labels: Option<&[usize]>) -> Result<ContextFeatures> {
        Ok(ContextFeatures::null(&[], z_tau.z.nrows(), z_tau.t))
    }

    fn predict(
        &self,
        z_t: &NoisyState,
        point_t: &SnrPoint,
        _features: &ContextFeatures,
        labels: Option<&[usize]>,
    ) -> Result<Array2<f64>> {
        let labels = if self.conditional { labels } else { None };
        oracle_denoiser(&self.spec, z_t.z.view(), point_t, labels)
    }
}
