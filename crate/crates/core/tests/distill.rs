use dualrate_core::data::GmmSpec;
use dualrate_core::distill::full_rollout;
use dualrate_core::models::GmmOracle;
use dualrate_core::schedule::LogSnrSchedule;
use dualrate_core::seeded_rng;
use ndarray::Axis;

#[test]
fn rollout_of_an_exact_model_keeps_marginal_variance() {
    let spec = GmmSpec::benchmark();
    let oracle = GmmOracle {
        spec: spec.clone(),
        conditional: false,
    };
    let sched = LogSnrSchedule::default();
    let per_dim_var = spec.total_variance() / spec.dim() as f64;
    for &tau in &[0.75, 0.5, 0.25] {
        let (z, refreshes) = full_rollout(&oracle, tau, 4, 64, None, 20_000, &sched, &mut seeded_rng(3)).unwrap();
        assert_eq!(refreshes, ((1.0 - tau) * 4.0).round() as usize);
        let p = sched.eval(tau).unwrap();
        let want = p.alpha * p.alpha * per_dim_var + p.sigma * p.sigma;
        for v in z.z.var_axis(Axis(0), 1.0) {
            assert!((v / want - 1.0).abs() < 0.1, "τ={tau}: {v} vs {want}");
        }
    }
}
