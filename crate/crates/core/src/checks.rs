//! Whole-model gradient check on a tiny hand-built scene.

use std::collections::BTreeMap;

use crate::autodiff::{param_gradcheck, GradcheckReport};
use crate::config::{ModelConfig, SwitchMode};
use crate::error::Result;
use crate::geometry::EntityClass;
use crate::model::{rollout, PtdModel};
use crate::scene::{Scene, SceneEntity};
use crate::synth::{box_corners, human_rig, HOLD_OFFSET, HUMAN_CENTROID_Z};
use crate::train::compute_loss;

/// Three entities over five steps: a walking human carrying a cup, and a
/// box inside the attention radius but outside the manipulation radius.
pub fn micro_scene() -> Scene {
    let rig = human_rig();
    let steps = 5;
    let human_at = |t: usize| [100.0 + 45.0 * t as f64, 200.0 - 10.0 * t as f64, HUMAN_CENTROID_Z];
    let mut human = Vec::new();
    let mut cup = Vec::new();
    let mut boxed = Vec::new();
    for t in 0..steps {
        let c = human_at(t);
        // slight per-joint sway keeps the features from being exactly rigid
        human.push(
            rig.iter()
                .enumerate()
                .flat_map(|(j, p)| {
                    let w = 3.0 * ((j + t) as f64).sin();
                    [c[0] + p[0] + w, c[1] + p[1] - w, c[2] + p[2]]
                })
                .collect(),
        );
        cup.push(box_corners(
            [c[0] + HOLD_OFFSET[0], c[1] + HOLD_OFFSET[1], c[2] + HOLD_OFFSET[2]],
            [80.0, 80.0, 110.0],
        ));
        boxed.push(box_corners([350.0, 380.0, HUMAN_CENTROID_Z + 40.0], [300.0, 250.0, 200.0]));
    }
    Scene {
        scene_id: "micro".into(),
        dt: 0.1,
        entities: vec![
            SceneEntity {
                id: 0,
                class: EntityClass::Human,
                class_label: "human".into(),
                features: human,
            },
            SceneEntity {
                id: 1,
                class: EntityClass::Object,
                class_label: "cup".into(),
                features: cup,
            },
            SceneEntity {
                id: 2,
                class: EntityClass::Object,
                class_label: "box".into(),
                features: boxed,
            },
        ],
        switch_labels: BTreeMap::from([(0, vec![0, 1, 1, 1, 0])]),
    }
}

/// Model configuration of the micro check: T = 3, L = 2, width 8.
pub fn micro_config(mode: SwitchMode) -> ModelConfig {
    ModelConfig {
        obs_steps: 3,
        horizon: 2,
        hidden_dim: 8,
        att_dim: 8,
        mlp_hidden: 8,
        switch_mode: mode,
        ..ModelConfig::default()
    }
}

/// Finite-difference check of the total loss with respect to every model
/// parameter on [`micro_scene`].
pub fn micro_gradcheck(seed: u64, mode: SwitchMode, lambda: f64) -> Result<GradcheckReport> {
    let model = PtdModel::new(micro_config(mode), seed)?;
    let scene = micro_scene();
    param_gradcheck(
        &model,
        |m: &PtdModel, tape| {
            let out = rollout(tape, m, &scene)?;
            Ok(compute_loss(tape, &m.config, &out, &scene, lambda)?.total)
        },
        1e-5,
        1,
    )
}
