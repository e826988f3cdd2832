use dualrate_core::data::{Dataset, GmmSpec};
use dualrate_core::models::ModelConfig;
use dualrate_core::schedule::LogSnrSchedule;
use dualrate_core::train::{snapshot_oracle_mse, train_loop, TrainConfig};

fn small_model() -> ModelConfig {
    ModelConfig {
        encoder_hidden: vec![32, 32],
        denoiser_hidden: vec![16, 16],
        time_embed_dim: 8,
        ..ModelConfig::default()
    }
}

fn short_run(n_steps: u64) -> TrainConfig {
    TrainConfig {
        n_steps,
        batch_size: 128,
        warmup_steps: 50,
        snapshot_every: 100,
        eval_points: 256,
        ..TrainConfig::default()
    }
}

#[test]
fn short_training_moves_toward_the_oracle() {
    let data = Dataset::Gmm(GmmSpec::benchmark());
    let sched = LogSnrSchedule::default();
    let tc = short_run(500);
    let init = train_loop(&small_model(), &TrainConfig { n_steps: 0, ..tc.clone() }, &data, &sched, 4).unwrap();
    let before = snapshot_oracle_mse(&init.model, &data, &sched, tc.heavy_steps, 512, 1).unwrap();
    let state = train_loop(&small_model(), &tc, &data, &sched, 4).unwrap();
    let after = snapshot_oracle_mse(&state.model, &data, &sched, tc.heavy_steps, 512, 1).unwrap();
    assert!(after < 0.5 * before, "oracle mse {before} -> {after}");
    assert_eq!(state.log.len(), 5);
    assert!(state.log.iter().all(|r| r.loss.is_finite() && r.oracle_mse.unwrap().is_finite()));
}

#[test]
fn same_seed_same_parameters() {
    let data = Dataset::Gmm(GmmSpec::benchmark());
    let sched = LogSnrSchedule::default();
    let tc = short_run(60);
    let a = train_loop(&small_model(), &tc, &data, &sched, 9).unwrap();
    let b = train_loop(&small_model(), &tc, &data, &sched, 9).unwrap();
    let c = train_loop(&small_model(), &tc, &data, &sched, 10).unwrap();
    assert_eq!(a.model.flat_params(), b.model.flat_params());
    assert_eq!(a.ema.shadow, b.ema.shadow);
    assert_ne!(a.model.flat_params(), c.model.flat_params());
}

#[test]
fn frozen_encoder_is_untouched() {
    let data = Dataset::Gmm(GmmSpec::benchmark());
    let sched = LogSnrSchedule::default();
    let frozen = TrainConfig {
        freeze_encoder: true,
        ..short_run(30)
    };
    let init = train_loop(&small_model(), &TrainConfig { n_steps: 0, ..frozen.clone() }, &data, &sched, 2).unwrap();
    let state = train_loop(&small_model(), &frozen, &data, &sched, 2).unwrap();
    let range = state.model.encoder_range();
    assert!(!range.is_empty());
    assert_eq!(
        state.model.flat_params()[range.clone()],
        init.model.flat_params()[range.clone()]
    );
    assert_ne!(state.model.flat_params(), init.model.flat_params());
}
