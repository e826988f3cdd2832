//! Sample-quality and accuracy metrics plus the inference cost model.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{gmm_sample, GmmSpec};
use crate::models::{oracle_denoiser, Denoiser};
use crate::process::{sample_bridge, sample_marginal};
use crate::schedule::LogSnrSchedule;
use crate::{Error, Result};

/// Squared 1-D Wasserstein-2 distance between two empirical distributions,
/// integrating the squared quantile gap. Inputs are sorted in place.
fn w2_squared_1d(a: &mut [f64], b: &mut [f64]) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    if a.len() == b.len() {
        return a
            .iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            / a.len() as f64;
    }
    // Walk the merged quantile breakpoints i/n and j/m.
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut pos = 0.0;
    let mut total = 0.0;
    while i < a.len() && j < b.len() {
        let next_a = (i + 1) as f64 / n;
        let next_b = (j + 1) as f64 / m;
        let next = next_a.min(next_b);
        total += (next - pos) * (a[i] - b[j]).powi(2);
        pos = next;
        if next_a <= next {
            i += 1;
        }
        if next_b <= next {
            j += 1;
        }
    }
    total
}

/// Sliced 2-Wasserstein distance with `n_projections` random unit
/// directions: `sqrt(mean_u W2²(a·u, b·u))`.
pub fn sliced_w2<R: Rng + ?Sized>(
    a: ArrayView2<'_, f64>,
    b: ArrayView2<'_, f64>,
    n_projections: usize,
    rng: &mut R,
) -> Result<f64> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::Invalid("sliced W2 of an empty batch".into()));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::shape(format!(
            "sample dimensions differ: {} vs {}",
            a.ncols(),
            b.ncols()
        )));
    }
    if n_projections == 0 {
        return Err(Error::config("sliced W2 needs at least one projection"));
    }
    let d = a.ncols();
    let mut acc = 0.0;
    for _ in 0..n_projections {
        let mut u: Array1<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let norm = u.dot(&u).sqrt();
        u /= norm;
        let mut pa = a.dot(&u).to_vec();
        let mut pb = b.dot(&u).to_vec();
        acc += w2_squared_1d(&mut pa, &mut pb);
    }
    Ok((acc / n_projections as f64).sqrt())
}

/// Sliced W2 between two independent ground-truth draws of size `n`, the
/// noise floor every sample-quality threshold is calibrated against.
pub fn resampling_baseline<R: Rng + ?Sized>(
    spec: &GmmSpec,
    n: usize,
    n_projections: usize,
    rng: &mut R,
) -> Result<f64> {
    let a = gmm_sample(spec, n, rng);
    let b = gmm_sample(spec, n, rng);
    sliced_w2(a.x.view(), b.x.view(), n_projections, rng)
}

/// `n` points evenly spaced on `[lo, hi]`.
pub fn lambda_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.5 * (lo + hi)],
        _ => (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

/// The default evaluation grid: 17 points on `[−8, 8]`.
pub fn default_lambda_grid() -> Vec<f64> {
    lambda_grid(-8.0, 8.0, 17)
}

/// Heavy time a light step at `t` reads its features from.
pub fn heavy_time_for(t: f64, heavy_steps: usize) -> f64 {
    let k = heavy_steps as f64;
    ((t * k).ceil().max(1.0) / k).min(1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleMseTable {
    pub lambdas: Vec<f64>,
    /// Mean over items of `‖x̂ − E[x|z_t]‖²`.
    pub mse: Vec<f64>,
}

impl OracleMseTable {
    pub fn mean(&self) -> f64 {
        self.mse.iter().sum::<f64>() / self.mse.len() as f64
    }

    /// Mean over grid points with `lo ≤ λ ≤ hi`.
    pub fn mean_within(&self, lo: f64, hi: f64) -> f64 {
        let sel: Vec<f64> = self
            .lambdas
            .iter()
            .zip(&self.mse)
            .filter(|(l, _)| **l >= lo && **l <= hi)
            .map(|(_, m)| *m)
            .collect();
        sel.iter().sum::<f64>() / sel.len() as f64
    }
}

/// Distance of a model's predictions to the analytic optimum on a log-SNR
/// grid. States follow the training distribution with features taken at the
/// nearest heavy time at or above `t`.
pub fn oracle_mse<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    model: &D,
    spec: &GmmSpec,
    sched: &LogSnrSchedule,
    lambdas: &[f64],
    n_per_point: usize,
    heavy_steps: usize,
    rng: &mut R,
) -> Result<OracleMseTable> {
    if heavy_steps == 0 {
        return Err(Error::config("oracle_mse needs at least one heavy step"));
    }
    let conditional = model.n_classes() > 0;
    let mut mse = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let t = sched.t_of_lambda(lambda);
        let tau = heavy_time_for(t, heavy_steps);
        let point_t = sched.eval(t)?;
        let point_tau = sched.eval(tau)?;
        let batch = gmm_sample(spec, n_per_point, rng);
        let labels = batch.labels.as_deref().filter(|_| conditional);
        let z_tau = sample_marginal(batch.x.view(), &point_tau, rng);
        let z_t = sample_bridge(&z_tau, batch.x.view(), &point_t, &point_tau, rng)?;
        let features = model.encode(&z_tau, labels)?;
        let pred = model.predict(&z_t, &point_t, &features, labels)?;
        let best = oracle_denoiser(spec, z_t.z.view(), &point_t, labels)?;
        let err = (&pred - &best).mapv(|v| v * v).sum() / n_per_point as f64;
        mse.push(err);
    }
    Ok(OracleMseTable {
        lambdas: lambdas.to_vec(),
        mse,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboEstimate {
    /// Diffusion term of the bound in nats per dimension.
    pub nats_per_dim: f64,
    pub std_err: f64,
    /// `KL(q(z_1|x) ‖ N(0, I))` per dimension, reported separately.
    pub prior_kl: f64,
}

/// Monte Carlo estimate of the unweighted diffusion loss term
/// `½ E_t[−dλ/dt e^λ ‖x − x̂‖²] / dim`. Each draw takes one `t ∼ U(0, 1)`
/// for the whole batch.
pub fn elbo_estimate<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    model: &D,
    x: ArrayView2<'_, f64>,
    labels: Option<&[usize]>,
    sched: &LogSnrSchedule,
    n_mc: usize,
    heavy_steps: usize,
    rng: &mut R,
) -> Result<ElboEstimate> {
    if n_mc < 2 || x.nrows() == 0 || heavy_steps == 0 {
        return Err(Error::config(
            "elbo_estimate needs n_mc >= 2, data and a heavy step",
        ));
    }
    let (n, d) = x.dim();
    let mut draws = Vec::with_capacity(n_mc);
    for _ in 0..n_mc {
        let t = loop {
            let u: f64 = rng.random();
            if u > 0.0 {
                break u;
            }
        };
        let tau = heavy_time_for(t, heavy_steps);
        let point_t = sched.eval(t)?;
        let point_tau = sched.eval(tau)?;
        let z_tau = sample_marginal(x, &point_tau, rng);
        let z_t = sample_bridge(&z_tau, x, &point_t, &point_tau, rng)?;
        let feats = model.encode(&z_tau, labels)?;
        let pred = model.predict(&z_t, &point_t, &feats, labels)?;
        let sq = (&pred - &x).mapv(|v| v * v).sum() / n as f64;
        draws.push(0.5 * point_t.elbo_factor() * sq / d as f64);
    }
    let mean = draws.iter().sum::<f64>() / n_mc as f64;
    let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n_mc - 1) as f64;
    let p1 = sched.eval(1.0)?;
    let (a2, s2) = (p1.alpha.powi(2), p1.sigma.powi(2));
    let mean_sq = x.mapv(|v| v * v).sum_axis(Axis(1)).sum() / n as f64;
    let prior_kl = 0.5 * (a2 * mean_sq / d as f64 + s2 - 1.0 - s2.ln());
    Ok(ElboEstimate {
        nats_per_dim: mean,
        std_err: (var / n_mc as f64).sqrt(),
        prior_kl,
    })
}

/// Per-evaluation costs of the two networks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostModel {
    pub c_encoder: f64,
    pub c_denoiser: f64,
    /// Whether guided evaluations are charged a second time.
    pub guidance_doubling: bool,
}

impl CostModel {
    pub fn new(c_encoder: f64, c_denoiser: f64) -> Result<Self> {
        if !(c_encoder >= 0.0 && c_denoiser >= 0.0) {
            return Err(Error::config("evaluation costs must be nonnegative"));
        }
        Ok(Self {
            c_encoder,
            c_denoiser,
            guidance_doubling: true,
        })
    }

    /// GFLOPs per evaluation of the 64×64 ImageNet networks.
    pub fn imagenet64() -> Self {
        Self::new(108.45, 44.02).expect("published costs are nonnegative")
    }
}

/// `(K + guided_heavy) c_e + (k + guided_light) c_d`.
pub fn inference_cost(
    cost: &CostModel,
    heavy: usize,
    light: usize,
    guided_heavy: usize,
    guided_light: usize,
) -> f64 {
    let (gh, gl) = if cost.guidance_doubling {
        (guided_heavy, guided_light)
    } else {
        (0, 0)
    };
    (heavy + gh) as f64 * cost.c_encoder + (light + gl) as f64 * cost.c_denoiser
}

/// One row of an evaluation log.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricsRecord {
    pub step: u64,
    pub loss: Option<f64>,
    pub oracle_mse: Option<f64>,
    pub sliced_w2: Option<f64>,
    pub elbo: Option<f64>,
    pub cost_units: Option<f64>,
}

impl MetricsRecord {
    pub fn all_finite(&self) -> bool {
        [self.loss, self.oracle_mse, self.sliced_w2, self.elbo, self.cost_units]
            .iter()
            .flatten()
            .all(|v| v.is_finite())
    }
}

/// Mean and covariance diagonal of a batch, used for moment checks.
pub fn column_moments(x: ArrayView2<'_, f64>) -> (Array1<f64>, Array1<f64>) {
    let n = x.nrows() as f64;
    let mean = x.sum_axis(Axis(0)) / n;
    let centered: Array2<f64> = &x - &mean;
    let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / (n - 1.0);
    (mean, var)
}
