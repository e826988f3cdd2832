use dualrate_core::data::{gmm_sample, GmmSpec};
use dualrate_core::eval::{elbo_estimate, resampling_baseline, sliced_w2};
use dualrate_core::models::GmmOracle;
use dualrate_core::sample::{ancestral_sample, SampleConfig};
use dualrate_core::schedule::LogSnrSchedule;
use dualrate_core::seeded_rng;

#[test]
fn oracle_sampler_is_close_to_resampling_noise() {
    let spec = GmmSpec::benchmark();
    let sched = LogSnrSchedule::default();
    let oracle = GmmOracle {
        spec: spec.clone(),
        conditional: false,
    };
    let n = 4000;
    let config = SampleConfig::new(64, 64, n).unwrap();
    let out = ancestral_sample(&oracle, None, 2, &sched, &config, &mut seeded_rng(1)).unwrap();
    let truth = gmm_sample(&spec, n, &mut seeded_rng(2)).x;
    let w2 = sliced_w2(out.x.view(), truth.view(), 64, &mut seeded_rng(3)).unwrap();
    let base = resampling_baseline(&spec, n, 64, &mut seeded_rng(3)).unwrap();
    assert!(w2 <= 2.0 * base, "w2 {w2} vs baseline {base}");
}

#[test]
fn labels_lower_the_bound_under_shared_draws() {
    let spec = GmmSpec::benchmark();
    let sched = LogSnrSchedule::default();
    let batch = gmm_sample(&spec, 256, &mut seeded_rng(5));
    let labels = batch.labels.clone().unwrap();
    let cond = GmmOracle {
        spec: spec.clone(),
        conditional: true,
    };
    let uncond = GmmOracle {
        spec: spec.clone(),
        conditional: false,
    };
    let with = elbo_estimate(&cond, batch.x.view(), Some(&labels), &sched, 200, 1, &mut seeded_rng(6)).unwrap();
    let without = elbo_estimate(&uncond, batch.x.view(), None, &sched, 200, 1, &mut seeded_rng(6)).unwrap();
    assert!(with.nats_per_dim < without.nats_per_dim, "{with:?} vs {without:?}");
    assert_eq!(with.prior_kl, without.prior_kl);
    assert!(with.std_err > 0.0 && with.std_err.is_finite());
}
