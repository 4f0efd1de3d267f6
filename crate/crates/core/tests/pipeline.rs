use proptest::prelude::*;
use vice_core::encoder::Architecture;
use vice_core::synth::{self, SyntheticDatasetSpec};
use vice_core::training::{self, PreparedImage, TrainConfig, TrainState};

fn small_cfg() -> TrainConfig {
    TrainConfig {
        images_per_batch: 2,
        views: 3,
        view_size: (24, 24),
        embed_dim: 8,
        concepts: 6,
        arch: Architecture::UNet { widths: [4, 4, 8, 8] },
        queue_capacity: 32,
        warmup_steps: 2,
        total_steps: 6,
        seed: 5,
        ..TrainConfig::default()
    }
}

fn dataset(cfg: &TrainConfig) -> Vec<PreparedImage> {
    let spec = SyntheticDatasetSpec { images: 4, size: 40, classes: 3, seed: 2, val_fraction: 0.25 };
    synth::generate(&spec).unwrap().into_iter().map(|s| training::prepare_image(s.image, cfg).unwrap()).collect()
}

fn run(state: &mut TrainState, data: &[PreparedImage], cfg: &TrainConfig, steps: u64) -> Vec<f64> {
    (0..steps)
        .map(|_| {
            let ids = training::batch_indices(data.len(), state.step, cfg);
            training::train_step(state, data, &ids, cfg).unwrap().loss
        })
        .collect()
}

#[test]
fn short_training_is_finite_and_repeatable() {
    let cfg = small_cfg();
    let data = dataset(&cfg);
    let mut a = TrainState::init(&cfg).unwrap();
    let mut b = TrainState::init(&cfg).unwrap();
    let la = run(&mut a, &data, &cfg, 4);
    let lb = run(&mut b, &data, &cfg, 4);
    assert!(la.iter().all(|l| l.is_finite() && *l >= 0.0), "{la:?}");
    assert_eq!(la, lb);
    assert_eq!(a, b);
}

#[test]
fn checkpoint_resume_matches_uninterrupted_run() {
    let cfg = small_cfg();
    let data = dataset(&cfg);
    let mut full = TrainState::init(&cfg).unwrap();
    let expected = run(&mut full, &data, &cfg, 5);

    let mut first = TrainState::init(&cfg).unwrap();
    let mut got = run(&mut first, &data, &cfg, 2);
    let mut resumed = training::decode_checkpoint(&training::encode_checkpoint(&first)).unwrap();
    got.extend(run(&mut resumed, &data, &cfg, 3));
    assert_eq!(got, expected);
    assert_eq!(resumed, full);
}

#[test]
fn mutual_regions_appear_in_every_view() {
    let cfg = small_cfg();
    let data = dataset(&cfg);
    for step in 0..5 {
        let batch = training::make_views(&data[1], 1, step, &cfg).unwrap();
        assert_eq!(batch.views.len(), cfg.views);
        for view in &batch.views {
            for id in &batch.mutual_region_ids {
                assert!(view.labels.labels().iter().any(|&l| l == *id as i32), "region {id} missing at step {step}");
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn learning_rate_stays_within_base(step in 0u64..5000, warmup in 0u64..200, total in 1u64..4000) {
        let cfg = TrainConfig { warmup_steps: warmup, total_steps: total.max(warmup + 1), ..TrainConfig::default() };
        let lr = training::lr_at(step, &cfg);
        prop_assert!((0.0..=cfg.base_lr + 1e-12).contains(&lr));
    }
}
