//! Central-difference verification of [`mlp_backward`].

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::mlp::{mlp_backward, mlp_forward, MlpInput, MlpSpec, ParamVector};
use crate::{Result, SimRng};

/// Largest relative disagreement found, and where.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst: String,
    pub n_checked: usize,
}

/// Inputs and a fixed random functional for one check.
#[derive(Debug, Clone)]
pub struct GradCheckCase {
    pub spec: MlpSpec,
    pub params: ParamVector,
    pub x: Array2<f64>,
    pub times: Vec<Vec<f64>>,
    pub labels: Option<Vec<usize>>,
    pub cond: Vec<Array2<f64>>,
    out_weights: Array2<f64>,
    hidden_weights: Vec<Array2<f64>>,
}

fn gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng))
}

impl GradCheckCase {
    /// Random inputs for `spec` with `batch` rows.
    pub fn random<R: Rng + ?Sized>(spec: MlpSpec, batch: usize, rng: &mut R) -> Self {
        let params = spec.init_params(rng);
        let x = gaussian(batch, spec.input_dim, rng);
        let times = (0..spec.n_times)
            .map(|_| (0..batch).map(|_| rng.random::<f64>()).collect())
            .collect();
        let labels = (spec.n_classes > 0)
            .then(|| (0..batch).map(|_| rng.random_range(0..=spec.n_classes)).collect());
        let cond = spec.cond_dims.iter().map(|&d| gaussian(batch, d, rng)).collect();
        let out_weights = gaussian(batch, spec.output_dim, rng);
        let hidden_weights = spec.hidden_dims.iter().map(|&d| gaussian(batch, d, rng)).collect();
        Self {
            spec,
            params,
            x,
            times,
            labels,
            cond,
            out_weights,
            hidden_weights,
        }
    }

    /// `Σ out ⊙ W_out + Σ_l h_l ⊙ W_l`.
    fn objective(&self, params: &ParamVector, x: &Array2<f64>, cond: &[Array2<f64>]) -> Result<f64> {
        let (out, tape) = mlp_forward::<SimRng>(
            &self.spec,
            params,
            MlpInput {
                x: x.view(),
                times: &self.times,
                labels: self.labels.as_deref(),
                cond,
            },
            None,
        )?;
        let mut total = (&out * &self.out_weights).sum();
        for (l, w) in self.hidden_weights.iter().enumerate() {
            total += (tape.hidden_output(l) * w).sum();
        }
        Ok(total)
    }

    /// Compares analytic gradients for every parameter, input and
    /// conditioning entry against central differences with step `h`.
    pub fn run(&self, h: f64) -> Result<GradCheckReport> {
        let (_, tape) = mlp_forward::<SimRng>(
            &self.spec,
            &self.params,
            MlpInput {
                x: self.x.view(),
                times: &self.times,
                labels: self.labels.as_deref(),
                cond: &self.cond,
            },
            None,
        )?;
        let d_hidden: Vec<Option<Array2<f64>>> =
            self.hidden_weights.iter().cloned().map(Some).collect();
        let g = mlp_backward(&self.spec, &self.params, &tape, self.out_weights.view(), &d_hidden)?;

        let mut report = GradCheckReport {
            max_rel_err: 0.0,
            worst: String::new(),
            n_checked: 0,
        };
        let mut record = |analytic: f64, numeric: f64, what: String| {
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            report.n_checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = format!("{what}: analytic {analytic:e}, numeric {numeric:e}");
            }
        };

        let mut p = self.params.clone();
        for i in 0..p.len() {
            let v = p.values[i];
            p.values[i] = v + h;
            let up = self.objective(&p, &self.x, &self.cond)?;
            p.values[i] = v - h;
            let down = self.objective(&p, &self.x, &self.cond)?;
            p.values[i] = v;
            record(g.params.values[i], (up - down) / (2.0 * h), format!("param {i}"));
        }
        let mut x = self.x.clone();
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let v = x[[r, c]];
            x[[r, c]] = v + h;
            let up = self.objective(&self.params, &x, &self.cond)?;
            x[[r, c]] = v - h;
            let down = self.objective(&self.params, &x, &self.cond)?;
            x[[r, c]] = v;
            record(g.input[[r, c]], (up - down) / (2.0 * h), format!("input ({r}, {c})"));
        }
        let mut cond = self.cond.clone();
        for l in 0..cond.len() {
            for idx in 0..cond[l].len() {
                let (r, c) = (idx / cond[l].ncols(), idx % cond[l].ncols());
                let v = cond[l][[r, c]];
                cond[l][[r, c]] = v + h;
                let up = self.objective(&self.params, &self.x, &cond)?;
                cond[l][[r, c]] = v - h;
                let down = self.objective(&self.params, &self.x, &cond)?;
                cond[l][[r, c]] = v;
                record(g.cond[l][[r, c]], (up - down) / (2.0 * h), format!("cond {l} ({r}, {c})"));
            }
        }
        Ok(report)
    }
}

/// A random conditioned spec with at most `max_params` parameters, always
/// using FiLM and two time inputs.
pub fn random_film_spec<R: Rng + ?Sized>(max_params: usize, rng: &mut R) -> MlpSpec {
    loop {
        let n_hidden = rng.random_range(1..=3);
        let hidden_dims: Vec<usize> = (0..n_hidden).map(|_| rng.random_range(2..=12)).collect();
        let n_cond = rng.random_range(0..=n_hidden);
        let spec = MlpSpec {
            input_dim: rng.random_range(1..=3),
            output_dim: rng.random_range(1..=3),
            activation: super::Activation::Silu,
            time_embed_dim: 2 * rng.random_range(1..=2),
            n_times: 2,
            n_classes: rng.random_range(0..=3),
            film_enabled: true,
            cond_dims: (0..n_cond).map(|_| rng.random_range(1..=3)).collect(),
            hidden_dims,
        };
        if spec.validate().is_ok() && spec.param_count() <= max_params {
            return spec;
        }
    }
}
