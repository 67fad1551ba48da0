//! Losses, the Adam optimizer and the training loop.

use std::fmt::Write as _;
use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamGrads, ParamStore, Tape, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::model::{rollout, PtdModel, RolloutOutput};
use crate::scene::Scene;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Weight of the switch loss.
    pub lambda: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient norm cap; 0 disables clipping.
    pub clip_norm: f64,
    pub train_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            learning_rate: 1e-3,
            epochs: 50,
            batch_size: 8,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 5.0,
            train_fraction: 0.8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lambda >= 0.0) {
            return bad("lambda must be >= 0");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be > 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("adam_beta1/adam_beta2 must lie in [0, 1) and adam_eps > 0");
        }
        if !(self.clip_norm >= 0.0) {
            return bad("clip_norm must be >= 0");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return bad("train_fraction must lie in (0, 1]");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Loss {
    pub total: Var,
    pub pred: Var,
    /// `None` when no switch score was produced (switch forced off, or no
    /// humans).
    pub switch: Option<Var>,
}

/// Mean squared error of predictions against targets, in units of
/// `scale` (coordinates are divided by it first).
pub fn prediction_loss(tape: &mut Tape, predictions: &[Var], targets: &[&[f64]], scale: f64) -> Result<Var> {
    if predictions.len() != targets.len() {
        return Err(Error::invalid("prediction_loss", "one target per prediction required"));
    }
    let mut acc: Option<Var> = None;
    let mut count = 0usize;
    for (&p, &y) in predictions.iter().zip(targets) {
        let y = tape.input(y)?;
        let d = tape.sub(p, y)?;
        let sq = tape.squared_l2(d)?;
        count += tape.value(p).len();
        acc = Some(match acc {
            None => sq,
            Some(a) => tape.add(a, sq)?,
        });
    }
    match acc {
        None => Ok(tape.zeros(1)),
        Some(a) => tape.scale(a, 1.0 / (count as f64 * scale * scale)),
    }
}

/// Mean binary cross-entropy of switch scores against 0/1 labels.
pub fn switch_loss(tape: &mut Tape, scores: &[Var], labels: &[f64]) -> Result<Var> {
    let p = tape.concat(scores)?;
    tape.bce(p, labels)
}

/// `pred + lambda * switch`.
pub fn total_loss(tape: &mut Tape, pred: Var, switch: Option<Var>, lambda: f64) -> Result<Var> {
    match switch {
        None => Ok(pred),
        Some(s) => {
            let w = tape.scale(s, lambda)?;
            tape.add(pred, w)
        }
    }
}

/// Loss of a rollout against its scene: prediction error over the horizon
/// and switch cross-entropy over every step.
pub fn compute_loss(
    tape: &mut Tape,
    cfg: &ModelConfig,
    out: &RolloutOutput,
    scene: &Scene,
    lambda: f64,
) -> Result<Loss> {
    let (obs, horizon) = (cfg.obs_steps, cfg.horizon);
    if scene.num_steps() < obs + horizon {
        return Err(Error::Scene {
            scene: scene.scene_id.clone(),
            msg: format!("{} steps, need {} for the loss", scene.num_steps(), obs + horizon),
        });
    }
    let mut preds = Vec::new();
    let mut targets = Vec::new();
    for (k, step) in out.predictions.iter().enumerate() {
        preds.extend_from_slice(step);
        targets.extend(out.layout.features_at(scene, obs + k));
    }
    let pred = prediction_loss(tape, &preds, &targets, cfg.coord_scale_mm)?;

    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (t, humans) in out.switches.iter().enumerate() {
        for h in humans {
            let Some(s) = h.score else { continue };
            let id = out.layout.ids[h.human];
            let bits = scene.switch_labels.get(&id).ok_or_else(|| Error::Scene {
                scene: scene.scene_id.clone(),
                msg: format!("missing switch labels for human {id}"),
            })?;
            scores.push(s);
            labels.push(bits[t] as f64);
        }
    }
    let switch = if scores.is_empty() {
        None
    } else {
        Some(switch_loss(tape, &scores, &labels)?)
    };
    let total = total_loss(tape, pred, switch, lambda)?;
    Ok(Loss { total, pred, switch })
}

#[derive(Clone, Debug, Default)]
pub struct SceneGradients {
    pub grads: Option<ParamGrads>,
    pub l_pred: f64,
    pub l_switch: f64,
}

/// Loss and parameter gradients of one scene.
pub fn scene_gradients(model: &PtdModel, scene: &Scene, lambda: f64) -> Result<SceneGradients> {
    let mut tape = Tape::new();
    let out = rollout(&mut tape, model, scene)?;
    let loss = compute_loss(&mut tape, &model.config, &out, scene, lambda)?;
    let g = tape.backward(loss.total)?;
    Ok(SceneGradients {
        grads: Some(g.to_param_grads(&model.store)),
        l_pred: tape.scalar(loss.pred),
        l_switch: loss.switch.map_or(0.0, |s| tape.scalar(s)),
    })
}

/// Adam with bias correction and optional global-norm clipping.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: &TrainConfig) -> Self {
        let zeros = ParamGrads::zeros_like(store).0;
        Self {
            learning_rate: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            clip_norm: cfg.clip_norm,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Returns `false` (and leaves everything
    /// untouched) when the gradient is not finite.
    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads) -> bool {
        if !grads.is_finite() {
            warn!("skipping update {}: non-finite gradient", self.step + 1);
            return false;
        }
        let norm = grads.global_norm();
        let clip = if self.clip_norm > 0.0 && norm > self.clip_norm {
            self.clip_norm / norm
        } else {
            1.0
        };
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let g = grads.get(id);
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = store.get_mut(id).values_mut();
            for k in 0..p.len() {
                let gk = g[k] * clip;
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                p[k] -= self.learning_rate * mh / (vh.sqrt() + self.eps);
            }
        }
        true
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_pred: f64,
    pub l_switch: f64,
    pub val_ade_mm: f64,
    pub switch_f1: f64,
}

pub const METRICS_HEADER: &str = "epoch,L_pred,L_switch,val_ADE_mm,switch_F1";

pub fn metrics_csv(log: &[EpochMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for m in log {
        let _ = writeln!(s, "{},{:.9},{:.9},{:.6},{:.6}", m.epoch, m.l_pred, m.l_switch, m.val_ade_mm, m.switch_f1);
    }
    s
}

pub fn write_metrics(log: &[EpochMetrics], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, metrics_csv(log)).map_err(|e| Error::io(path, e))
}

/// Seeded train/validation split. Validation is empty when the fraction
/// is 1 or the dataset has a single scene.
pub fn split_dataset(scenes: &[Scene], fraction: f64, seed: u64) -> (Vec<Scene>, Vec<Scene>) {
    let mut idx: Vec<usize> = (0..scenes.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_5B17));
    let n_train = ((scenes.len() as f64 * fraction).round() as usize).clamp(1.min(scenes.len()), scenes.len());
    let train = idx[..n_train].iter().map(|&i| scenes[i].clone()).collect();
    let val = idx[n_train..].iter().map(|&i| scenes[i].clone()).collect();
    (train, val)
}

pub struct TrainOutcome {
    pub model: PtdModel,
    pub log: Vec<EpochMetrics>,
    pub validation: Vec<Scene>,
}

/// Trains a fresh model (initialized from `cfg.seed`) on `train` and
/// reports validation metrics on `val` after every epoch.
pub fn train_model(model_cfg: &ModelConfig, cfg: &TrainConfig, train: &[Scene], val: &[Scene]) -> Result<(PtdModel, Vec<EpochMetrics>)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("train", "empty training set"));
    }
    let mut model = PtdModel::new(model_cfg.clone(), cfg.seed)?;
    let mut adam = Adam::new(&model.store, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut lp, mut ls) = (0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<Result<SceneGradients>> = batch
                .par_iter()
                .map(|&i| scene_gradients(&model, &train[i], cfg.lambda))
                .collect();
            let mut sum = ParamGrads::zeros_like(&model.store);
            for r in results {
                let r = r?;
                sum.add_assign(r.grads.as_ref().expect("gradients"));
                lp += r.l_pred;
                ls += r.l_switch;
            }
            sum.scale(1.0 / batch.len() as f64);
            adam.step(&mut model.store, &sum);
        }
        let n = train.len() as f64;
        let (val_ade, f1) = if val.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let r = evaluate(&model, val)?;
            (r.ade_mm, r.switch.f1)
        };
        let m = EpochMetrics {
            epoch,
            l_pred: lp / n,
            l_switch: ls / n,
            val_ade_mm: val_ade,
            switch_f1: f1,
        };
        info!(
            "epoch {epoch}: L_pred {:.6} L_switch {:.6} val ADE {:.2} mm F1 {:.4}",
            m.l_pred, m.l_switch, m.val_ade_mm, m.switch_f1
        );
        log.push(m);
    }
    Ok((model, log))
}

/// Splits `scenes`, then trains.
pub fn train(model_cfg: &ModelConfig, cfg: &TrainConfig, scenes: &[Scene]) -> Result<TrainOutcome> {
    if scenes.is_empty() {
        return Err(Error::invalid("train", "empty dataset"));
    }
    let (tr, val) = split_dataset(scenes, cfg.train_fraction, cfg.seed);
    let (model, log) = train_model(model_cfg, cfg, &tr, &val)?;
    Ok(TrainOutcome {
        model,
        log,
        validation: val,
    })
}
