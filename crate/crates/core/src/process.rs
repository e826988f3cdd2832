//! Gaussian forward process: marginals, the Markovian posterior, and bridges
//! between two noise levels.
//!
//! For `s < t` the posterior `q(z_s | z_t, x)` has, with `r = e^{λ_t − λ_s}`,
//! mean `r (α_s/α_t) z_t + (1 − r) α_s x` and variance `(1 − r) σ_s²`. The
//! forward transition variance `σ²_{t|s} = (1 − r) σ_t²` bounds it from
//! above; sampling can interpolate between the two in log-variance.

use ndarray::{Array2, ArrayView2, Zip};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::schedule::SnrPoint;
use crate::{Error, Result};

/// A batch of noisy states sharing one time.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyState {
    pub z: Array2<f64>,
    pub t: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorParams {
    pub mean: Array2<f64>,
    pub std: f64,
}

pub fn standard_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

/// `z = α x + σ ε`.
pub fn sample_marginal<R: Rng + ?Sized>(
    x: ArrayView2<'_, f64>,
    point: &SnrPoint,
    rng: &mut R,
) -> NoisyState {
    let eps = standard_normal(x.nrows(), x.ncols(), rng);
    NoisyState {
        z: marginal_from_noise(x, &eps.view(), point),
        t: point.t,
    }
}

/// `α x + σ ε` for a given noise draw.
pub fn marginal_from_noise(
    x: ArrayView2<'_, f64>,
    eps: &ArrayView2<'_, f64>,
    point: &SnrPoint,
) -> Array2<f64> {
    let (a, s) = (point.alpha, point.sigma);
    let mut z = Array2::zeros(x.raw_dim());
    Zip::from(&mut z)
        .and(x)
        .and(eps)
        .for_each(|z, &x, &e| *z = a * x + s * e);
    z
}

/// Coefficients of the posterior between two points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorCoefs {
    /// Multiplies `z_t`.
    pub c_z: f64,
    /// Multiplies the clean-data estimate.
    pub c_x: f64,
    /// `(1 − r) σ_s²`.
    pub var_post: f64,
    /// `σ_t² − (α_t/α_s)² σ_s²`.
    pub var_upper: f64,
}

impl PosteriorCoefs {
    pub fn between(point_s: &SnrPoint, point_t: &SnrPoint) -> Result<Self> {
        if point_s.lambda < point_t.lambda {
            return Err(Error::Ordering(format!(
                "posterior target must be less noisy: λ_s = {} < λ_t = {}",
                point_s.lambda, point_t.lambda
            )));
        }
        if point_s.lambda == point_t.lambda {
            return Ok(Self {
                c_z: 1.0,
                c_x: 0.0,
                var_post: 0.0,
                var_upper: 0.0,
            });
        }
        let one_minus_r = -(point_t.lambda - point_s.lambda).exp_m1();
        // r α_s / α_t rewritten without dividing by α_t.
        let c_z = if point_s.alpha == 0.0 {
            0.0
        } else {
            point_t.alpha * point_s.sigma.powi(2) / (point_t.sigma.powi(2) * point_s.alpha)
        };
        Ok(Self {
            c_z,
            c_x: one_minus_r * point_s.alpha,
            var_post: one_minus_r * point_s.sigma.powi(2),
            var_upper: one_minus_r * point_t.sigma.powi(2),
        })
    }

    /// Log-variance interpolation: `nu = 0` gives the posterior variance,
    /// `nu = 1` the forward transition variance.
    pub fn variance(&self, nu: f64) -> f64 {
        if nu <= 0.0 {
            self.var_post
        } else if nu >= 1.0 {
            self.var_upper
        } else if self.var_post == 0.0 || self.var_upper == 0.0 {
            0.0
        } else {
            (nu * self.var_upper.ln() + (1.0 - nu) * self.var_post.ln()).exp()
        }
    }
}

pub fn posterior_params(
    z_t: &NoisyState,
    x_hat: ArrayView2<'_, f64>,
    point_s: &SnrPoint,
    point_t: &SnrPoint,
    noise_interp: f64,
) -> Result<PosteriorParams> {
    if z_t.z.dim() != x_hat.dim() {
        return Err(Error::shape(format!(
            "z_t is {:?} but x_hat is {:?}",
            z_t.z.dim(),
            x_hat.dim()
        )));
    }
    if !(0.0..=1.0).contains(&noise_interp) {
        return Err(Error::Invalid(format!(
            "noise interpolation {noise_interp} outside [0, 1]"
        )));
    }
    let c = PosteriorCoefs::between(point_s, point_t)?;
    let mut mean = Array2::zeros(x_hat.raw_dim());
    Zip::from(&mut mean)
        .and(&z_t.z)
        .and(x_hat)
        .for_each(|m, &z, &x| *m = c.c_z * z + c.c_x * x);
    Ok(PosteriorParams {
        mean,
        std: c.variance(noise_interp).sqrt(),
    })
}

pub fn sample_posterior<R: Rng + ?Sized>(
    params: &PosteriorParams,
    point_s: &SnrPoint,
    rng: &mut R,
) -> NoisyState {
    let mut z = params.mean.clone();
    if params.std > 0.0 {
        for v in z.iter_mut() {
            let e: f64 = StandardNormal.sample(rng);
            *v += params.std * e;
        }
    }
    NoisyState { z, t: point_s.t }
}

/// Training-time bridge `z_t ~ q(z_t | z_τ, x)` for `t ≤ τ`, always with the
/// exact posterior variance.
pub fn sample_bridge<R: Rng + ?Sized>(
    z_tau: &NoisyState,
    x: ArrayView2<'_, f64>,
    point_t: &SnrPoint,
    point_tau: &SnrPoint,
    rng: &mut R,
) -> Result<NoisyState> {
    if point_t.t > point_tau.t {
        return Err(Error::Ordering(format!(
            "bridge target t = {} is noisier than τ = {}",
            point_t.t, point_tau.t
        )));
    }
    if point_t.t == point_tau.t {
        return Ok(z_tau.clone());
    }
    let params = posterior_params(z_tau, x, point_t, point_tau, 0.0)?;
    Ok(sample_posterior(&params, point_t, rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::LogSnrSchedule;
    use crate::seeded_rng;

    /// Conditions z_s on z_t by Gaussian algebra on the joint covariance of
    /// (z_s, z_t) given x, with z_t = α_{t|s} z_s + σ_{t|s} η.
    fn joint_conditioning(x: f64, zt: f64, s: &SnrPoint, t: &SnrPoint) -> (f64, f64, f64) {
        let a_ts = t.alpha / s.alpha;
        let var_ts = t.sigma.powi(2) - a_ts.powi(2) * s.sigma.powi(2);
        let var_s = s.sigma.powi(2);
        let var_t = a_ts.powi(2) * var_s + var_ts;
        let cov = a_ts * var_s;
        let mean = s.alpha * x + cov / var_t * (zt - t.alpha * x);
        let var = var_s - cov * cov / var_t;
        // Transition variance from the same joint: Var(z_t | z_s).
        let trans = var_t - cov * cov / var_s;
        (mean, var, trans)
    }

    #[test]
    fn posterior_matches_joint_gaussian_oracle() {
        let sched = LogSnrSchedule::default();
        let s = sched.eval(0.31).unwrap();
        let t = sched.eval(0.58).unwrap();
        let x = ndarray::array![[0.7, -1.3]];
        let zt = NoisyState {
            z: ndarray::array![[0.2, 0.9]],
            t: t.t,
        };
        let p0 = posterior_params(&zt, x.view(), &s, &t, 0.0).unwrap();
        let p1 = posterior_params(&zt, x.view(), &s, &t, 1.0).unwrap();
        for j in 0..2 {
            let (m, v, trans) = joint_conditioning(x[[0, j]], zt.z[[0, j]], &s, &t);
            assert!((p0.mean[[0, j]] - m).abs() < 1e-10);
            assert!((p0.std.powi(2) - v).abs() < 1e-10);
            assert!((p1.std.powi(2) - trans).abs() < 1e-10);
        }
    }

    #[test]
    fn degenerate_step_is_identity() {
        let sched = LogSnrSchedule::default();
        let t = sched.eval(0.4).unwrap();
        let z = NoisyState {
            z: ndarray::array![[1.0, 2.0]],
            t: 0.4,
        };
        let p = posterior_params(&z, ndarray::array![[5.0, 5.0]].view(), &t, &t, 0.5).unwrap();
        assert_eq!(p.mean, z.z);
        assert_eq!(p.std, 0.0);
    }

    #[test]
    fn clean_target_returns_estimate() {
        let s = SnrPoint::at_lambda(f64::INFINITY);
        let t = SnrPoint::at_lambda(0.5);
        let z = NoisyState {
            z: ndarray::array![[1.0, 2.0]],
            t: 0.5,
        };
        let xh = ndarray::array![[-0.3, 0.8]];
        let p = posterior_params(&z, xh.view(), &s, &t, 0.0).unwrap();
        assert!((&p.mean - &xh).iter().all(|d| d.abs() < 1e-15));
        assert_eq!(p.std, 0.0);
    }

    #[test]
    fn wrong_order_rejected() {
        let sched = LogSnrSchedule::default();
        let s = sched.eval(0.2).unwrap();
        let t = sched.eval(0.6).unwrap();
        let z = NoisyState {
            z: Array2::zeros((1, 1)),
            t: 0.2,
        };
        let err = posterior_params(&z, Array2::zeros((1, 1)).view(), &t, &s, 0.0).unwrap_err();
        assert!(matches!(err, Error::Ordering(_)));
    }

    #[test]
    fn variance_is_ordered_for_all_interpolations() {
        let sched = LogSnrSchedule::default();
        for &(ts, tt) in &[(0.01, 0.02), (0.2, 0.7), (0.5, 0.51), (0.9, 1.0)] {
            let c = PosteriorCoefs::between(&sched.eval(ts).unwrap(), &sched.eval(tt).unwrap())
                .unwrap();
            for i in 0..=20 {
                let v = c.variance(i as f64 / 20.0);
                assert!(v >= c.var_post * (1.0 - 1e-12) && v <= c.var_upper * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn noiseless_marginal_is_data() {
        let x = ndarray::array![[1.0, -2.0], [3.5, 0.0]];
        let mut rng = seeded_rng(0);
        let z = sample_marginal(x.view(), &SnrPoint::at_lambda(f64::INFINITY), &mut rng);
        assert_eq!(z.z, x);
    }

    #[test]
    fn zero_std_posterior_is_mean_and_seeded_draws_repeat() {
        let p = PosteriorParams {
            mean: ndarray::array![[1.0, 2.0]],
            std: 0.0,
        };
        let s = SnrPoint::at_lambda(1.0);
        assert_eq!(sample_posterior(&p, &s, &mut seeded_rng(1)).z, p.mean);
        let p = PosteriorParams { std: 0.3, ..p };
        let a = sample_posterior(&p, &s, &mut seeded_rng(7));
        let b = sample_posterior(&p, &s, &mut seeded_rng(7));
        assert_eq!(a.z, b.z);
    }

    #[test]
    fn bridge_edge_cases() {
        let sched = LogSnrSchedule::default();
        let t = sched.eval(0.3).unwrap();
        let z = NoisyState {
            z: ndarray::array![[0.4]],
            t: 0.3,
        };
        let mut rng = seeded_rng(2);
        assert_eq!(
            sample_bridge(&z, ndarray::array![[1.0]].view(), &t, &t, &mut rng).unwrap(),
            z
        );
        let empty = NoisyState {
            z: Array2::zeros((0, 3)),
            t: 0.7,
        };
        let tau = sched.eval(0.7).unwrap();
        let out = sample_bridge(&empty, Array2::zeros((0, 3)).view(), &t, &tau, &mut rng).unwrap();
        assert_eq!(out.z.dim(), (0, 3));
        assert!(sample_bridge(&z, ndarray::array![[1.0]].view(), &tau, &t, &mut rng).is_err());
    }
}
