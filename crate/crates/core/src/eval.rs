//! Held-out metrics: per-horizon-step errors in mm, switch precision and
//! recall, and an audit of which channel produced each prediction.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::geometry::EntityClass;
use crate::model::{rollout, PredictionSource, PtdModel};
use crate::scene::Scene;

/// Mean Euclidean distance between corresponding points of two flattened
/// point lists.
pub fn mean_point_error(pred: &[f64], truth: &[f64]) -> f64 {
    let n = pred.len() / 3;
    let mut s = 0.0;
    for p in 0..n {
        let d = [
            pred[3 * p] - truth[3 * p],
            pred[3 * p + 1] - truth[3 * p + 1],
            pred[3 * p + 2] - truth[3 * p + 2],
        ];
        s += (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    }
    s / n as f64
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SwitchMetrics {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl SwitchMetrics {
    /// Precision (recall) is 1 when nothing was predicted (labeled)
    /// positive.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = if tp + fn_ == 0 { 1.0 } else { tp as f64 / (tp + fn_) as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            tp,
            fp,
            fn_,
            tn,
            precision,
            recall,
            f1,
        }
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (bool, bool)>) -> Self {
        let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
        for (pred, label) in pairs {
            match (pred, label) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => tn += 1,
            }
        }
        Self::from_counts(tp, fp, fn_, tn)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneReport {
    pub scene_id: String,
    pub has_interaction: bool,
    pub ade_mm: f64,
    pub switch: SwitchMetrics,
    pub transient_predictions: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceAudit {
    pub persistent: usize,
    pub transient: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub horizon: usize,
    /// Per-step mean error over humans, objects and all entities (mm).
    pub human_error_mm: Vec<f64>,
    pub object_error_mm: Vec<f64>,
    pub all_error_mm: Vec<f64>,
    pub ade_mm: f64,
    pub ade_human_mm: f64,
    pub ade_object_mm: f64,
    pub switch: SwitchMetrics,
    pub scenes: Vec<SceneReport>,
    pub audit: SourceAudit,
}

/// Errors and switch outcomes of one scene.
#[derive(Clone, Debug)]
pub struct SceneEval {
    pub scene_id: String,
    pub has_interaction: bool,
    /// `[L][N]` mean point error per entity.
    pub errors: Vec<Vec<f64>>,
    pub classes: Vec<EntityClass>,
    /// `(predicted on, label)` over humans and steps.
    pub switch_pairs: Vec<(bool, bool)>,
    pub sources: Vec<Vec<PredictionSource>>,
}

pub fn evaluate_scene(model: &PtdModel, scene: &Scene) -> Result<SceneEval> {
    let (obs, horizon) = (model.config.obs_steps, model.config.horizon);
    if scene.num_steps() < obs + horizon {
        return Err(Error::Scene {
            scene: scene.scene_id.clone(),
            msg: format!("horizon mismatch: {} steps, model needs {}", scene.num_steps(), obs + horizon),
        });
    }
    let mut tape = Tape::new();
    let out = rollout(&mut tape, model, scene)?;
    let errors = out
        .predictions
        .iter()
        .enumerate()
        .map(|(k, step)| {
            let truth = out.layout.features_at(scene, obs + k);
            step.iter().zip(truth).map(|(&p, y)| mean_point_error(tape.value(p), y)).collect()
        })
        .collect();
    let mut switch_pairs = Vec::new();
    for (t, humans) in out.switches.iter().enumerate() {
        for h in humans {
            let id = out.layout.ids[h.human];
            let bits = scene.switch_labels.get(&id).ok_or_else(|| Error::Scene {
                scene: scene.scene_id.clone(),
                msg: format!("missing switch labels for human {id}"),
            })?;
            switch_pairs.push((h.on, bits[t] == 1));
        }
    }
    Ok(SceneEval {
        scene_id: scene.scene_id.clone(),
        has_interaction: scene.has_interaction(),
        errors,
        classes: out.layout.classes.clone(),
        switch_pairs,
        sources: out.sources,
    })
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Evaluates every scene. Scenes are processed in `scene_id` order so the
/// report does not depend on dataset file order.
pub fn evaluate(model: &PtdModel, scenes: &[Scene]) -> Result<EvalReport> {
    let mut sorted: Vec<&Scene> = scenes.iter().collect();
    sorted.sort_by(|a, b| a.scene_id.cmp(&b.scene_id));
    let evals = sorted
        .par_iter()
        .map(|s| evaluate_scene(model, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(aggregate(model.config.horizon, &evals))
}

pub fn aggregate(horizon: usize, evals: &[SceneEval]) -> EvalReport {
    let mut h_sum = vec![0.0; horizon];
    let mut o_sum = vec![0.0; horizon];
    let (mut h_n, mut o_n) = (0usize, 0usize);
    let mut pairs = Vec::new();
    let mut audit = SourceAudit::default();
    let mut scenes = Vec::with_capacity(evals.len());
    for e in evals {
        for (k, step) in e.errors.iter().enumerate() {
            for (i, &err) in step.iter().enumerate() {
                match e.classes[i] {
                    EntityClass::Human => h_sum[k] += err,
                    EntityClass::Object => o_sum[k] += err,
                }
            }
        }
        h_n += e.classes.iter().filter(|c| **c == EntityClass::Human).count();
        o_n += e.classes.iter().filter(|c| **c == EntityClass::Object).count();
        let mut transient = 0;
        for s in e.sources.iter().flatten() {
            match s {
                PredictionSource::Persistent => audit.persistent += 1,
                PredictionSource::Transient(_) => {
                    audit.transient += 1;
                    transient += 1;
                }
            }
        }
        pairs.extend_from_slice(&e.switch_pairs);
        let per_step: Vec<f64> = e.errors.iter().map(|s| mean(s)).collect();
        scenes.push(SceneReport {
            scene_id: e.scene_id.clone(),
            has_interaction: e.has_interaction,
            ade_mm: mean(&per_step),
            switch: SwitchMetrics::from_pairs(e.switch_pairs.iter().copied()),
            transient_predictions: transient,
        });
    }
    let div = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    let human_error_mm: Vec<f64> = h_sum.iter().map(|&s| div(s, h_n)).collect();
    let object_error_mm: Vec<f64> = o_sum.iter().map(|&s| div(s, o_n)).collect();
    let all_error_mm: Vec<f64> = (0..horizon).map(|k| div(h_sum[k] + o_sum[k], h_n + o_n)).collect();
    EvalReport {
        horizon,
        ade_mm: mean(&all_error_mm),
        ade_human_mm: mean(&human_error_mm),
        ade_object_mm: mean(&object_error_mm),
        human_error_mm,
        object_error_mm,
        all_error_mm,
        switch: SwitchMetrics::from_pairs(pairs),
        scenes,
        audit,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_joint_off_by_five() {
        let truth = vec![0.0; 54];
        let mut pred = truth.clone();
        pred[0] = 3.0;
        pred[1] = 4.0;
        assert!((mean_point_error(&pred, &truth) - 5.0 / 18.0).abs() < 1e-12);
    }

    #[test]
    fn zero_positive_convention() {
        let m = SwitchMetrics::from_pairs(vec![(false, false); 5]);
        assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
        let m = SwitchMetrics::from_pairs([(true, true), (false, true), (true, false), (true, true)]);
        assert!((m.precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.recall - 2.0 / 3.0).abs() < 1e-12);
    }
}
