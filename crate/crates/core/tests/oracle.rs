use dualrate_core::data::{gmm_log_density, GmmSpec};
use dualrate_core::models::oracle_denoiser;
use dualrate_core::schedule::LogSnrSchedule;
use ndarray::{array, Array1};

/// Posterior mean by trapezoidal quadrature over a square grid.
fn quadrature_mean(spec: &GmmSpec, z: &[f64], alpha: f64, sigma: f64, half: f64, steps: usize) -> Vec<f64> {
    let h = 2.0 * half / steps as f64;
    let d = spec.dim();
    let n_pts = (steps + 1).pow(d as u32);
    let mut log_w = Vec::with_capacity(n_pts);
    let mut pts = Vec::with_capacity(n_pts);
    for idx in 0..n_pts {
        let mut x = Array1::zeros(d);
        let mut rem = idx;
        let mut edge = 1.0;
        for k in 0..d {
            let i = rem % (steps + 1);
            rem /= steps + 1;
            x[k] = -half + i as f64 * h;
            if i == 0 || i == steps {
                edge *= 0.5;
            }
        }
        let lik: f64 = (0..d).map(|k| -(z[k] - alpha * x[k]).powi(2) / (2.0 * sigma * sigma)).sum();
        log_w.push(lik + gmm_log_density(spec, x.view()).unwrap() + f64::ln(edge));
        pts.push(x);
    }
    let m = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut num = vec![0.0; d];
    let mut den = 0.0;
    for (w, x) in log_w.iter().zip(&pts) {
        let e = (w - m).exp();
        den += e;
        for k in 0..d {
            num[k] += e * x[k];
        }
    }
    num.iter().map(|v| v / den).collect()
}

#[test]
fn oracle_matches_quadrature_in_one_dimension() {
    let spec = GmmSpec::new(
        vec![0.2, 0.5, 0.3],
        array![[-1.5], [0.3], [1.2]],
        0.15,
    )
    .unwrap();
    let sched = LogSnrSchedule::default();
    for &t in &[0.1, 0.35, 0.5, 0.8, 0.97] {
        let p = sched.eval(t).unwrap();
        for &z in &[-1.7, -0.2, 0.4, 1.1, 2.5] {
            let want = quadrature_mean(&spec, &[z], p.alpha, p.sigma, 4.0, 16_000);
            let got = oracle_denoiser(&spec, array![[z]].view(), &p, None).unwrap();
            assert!((got[[0, 0]] - want[0]).abs() < 1e-6, "t={t} z={z}: {} vs {}", got[[0, 0]], want[0]);
        }
    }
}

#[test]
fn oracle_matches_quadrature_on_benchmark() {
    let spec = GmmSpec::benchmark();
    let sched = LogSnrSchedule::default();
    for &(t, z) in &[(0.3, [1.4, 1.3]), (0.6, [-0.5, 0.9]), (0.9, [0.2, -0.1])] {
        let p = sched.eval(t).unwrap();
        let want = quadrature_mean(&spec, &z, p.alpha, p.sigma, 3.0, 900);
        let got = oracle_denoiser(&spec, array![[z[0], z[1]]].view(), &p, None).unwrap();
        for k in 0..2 {
            assert!((got[[0, k]] - want[k]).abs() < 1e-6, "t={t}: {} vs {}", got[[0, k]], want[k]);
        }
    }
}

#[test]
fn benchmark_density_integrates_to_one() {
    let spec = GmmSpec::benchmark();
    let (half, steps) = (3.0, 600);
    let h = 2.0 * half / steps as f64;
    let mut total = 0.0;
    for i in 0..=steps {
        for j in 0..=steps {
            let x = array![-half + i as f64 * h, -half + j as f64 * h];
            total += gmm_log_density(&spec, x.view()).unwrap().exp();
        }
    }
    assert!((total * h * h - 1.0).abs() < 1e-3, "{}", total * h * h);
}
