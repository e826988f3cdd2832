use dualrate_core::schedule::LogSnrSchedule;

const N: usize = 10_000;

fn grid() -> impl Iterator<Item = f64> {
    (0..N).map(|i| i as f64 / (N - 1) as f64)
}

#[test]
fn grid_properties_of_the_clamped_cosine() {
    let s = LogSnrSchedule::cosine(-12.0, 12.0).unwrap();
    let pts: Vec<_> = grid().map(|t| s.eval(t).unwrap()).collect();
    for p in &pts {
        assert!((p.alpha * p.alpha + p.sigma * p.sigma - 1.0).abs() < 1e-12, "t={}", p.t);
    }
    assert!(pts.windows(2).all(|w| w[1].lambda < w[0].lambda));
    let hi = pts.iter().map(|p| p.lambda).fold(f64::NEG_INFINITY, f64::max);
    let lo = pts.iter().map(|p| p.lambda).fold(f64::INFINITY, f64::min);
    assert!((hi - 12.0).abs() < 1e-9 && (lo + 12.0).abs() < 1e-9, "{lo} {hi}");
}

#[test]
fn analytic_derivative_matches_central_differences() {
    let s = LogSnrSchedule::default();
    let h = 1e-6;
    let mut worst = 0.0f64;
    for t in grid().skip(1).take(N - 2) {
        let fd = (s.eval(t + h).unwrap().lambda - s.eval(t - h).unwrap().lambda) / (2.0 * h);
        let exact = s.eval(t).unwrap().dlambda_dt;
        worst = worst.max((fd - exact).abs() / exact.abs());
    }
    assert!(worst < 1e-6, "worst relative error {worst:e}");
}
