mod common;

use common::*;
use proptest::prelude::*;
use ptd_core::autodiff::Tape;
use ptd_core::config::SwitchMode;
use ptd_core::geometry::{centroid, ego_inverse, ego_transform, EntityClass};
use ptd_core::model::{rollout, PtdModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn ego_round_trip_on_random_entities() {
    let e = ego_round_trip_error(1000, 3);
    assert!(e <= 1e-12, "round trip error {e:e}");
}

#[test]
fn attention_is_normalized_and_order_free() {
    let r = attention_check(1000, 11);
    assert!(r.normalization <= 1e-12, "{}", r.normalization);
    assert!(r.permutation <= 1e-12, "{}", r.permutation);
}

#[test]
fn switch_state_machine() {
    switch_mechanics(5).unwrap();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ego_frame_puts_center_at_origin(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = random_entity(&mut rng, EntityClass::Human);
        let x = random_entity(&mut rng, EntityClass::Object);
        let cb = centroid(&ego_transform(&c, &c).unwrap());
        prop_assert!(cb.iter().all(|v| v.abs() < 1e-9));
        let back = ego_inverse(&ego_transform(&x, &c).unwrap(), &c).unwrap();
        prop_assert!(max_abs_diff(&back.flat(), &x.flat()) <= 1e-12);
    }

    #[test]
    fn ego_frame_ignores_shared_translation(seed in any::<u64>(), v in prop::array::uniform3(-3000.0f64..3000.0)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = random_entity(&mut rng, EntityClass::Human);
        let x = random_entity(&mut rng, EntityClass::Object);
        let shift = |e: &ptd_core::geometry::EntityFeatures| {
            let pts = e.points.iter().map(|p| [p[0] + v[0], p[1] + v[1], p[2] + v[2]]).collect();
            ptd_core::geometry::EntityFeatures::new(e.class, e.class_label.clone(), pts).unwrap()
        };
        let a = ego_transform(&x, &c).unwrap().flat();
        let b = ego_transform(&shift(&x), &shift(&c)).unwrap().flat();
        prop_assert!(max_abs_diff(&a, &b) <= 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn transient_channel_is_translation_equivariant(
        seed in 0u64..1000,
        v in prop::array::uniform3(-2000.0f64..2000.0),
    ) {
        let model = PtdModel::new(small_config(SwitchMode::On), seed).unwrap();
        let scene = interaction_scene();
        let e = translation_equivariance_error(&model, &scene, v);
        prop_assert!(e <= 1e-9, "equivariance error {e:e}");
    }

    #[test]
    fn score_never_exceeds_gamma(seed in 0u64..1000, beta in 1e-5f64..0.05) {
        let mut cfg = small_config(SwitchMode::Learned);
        cfg.beta_init = beta;
        let model = PtdModel::new(cfg, seed).unwrap();
        let scene = interaction_scene();
        let mut tape = Tape::new();
        let out = rollout(&mut tape, &model, &scene).unwrap();
        for h in out.switches.iter().flatten() {
            prop_assert!(h.value <= h.gamma);
            prop_assert!((0.0..=1.0).contains(&h.gamma));
        }
    }
}
