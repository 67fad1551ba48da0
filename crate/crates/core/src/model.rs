//! The full model: one step across both channels and the switches, the
//! prediction routing, and the observe-then-predict rollout.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Parameterized, Tape, Var};
use crate::config::{ModelConfig, SwitchMode};
use crate::error::{Error, Result};
use crate::geometry::{EntityClass, TapeGeometry};
use crate::persistent::{persistent_step, PersistentParams, PersistentState};
use crate::scene::{Layout, Scene};
use crate::switch::{switch_decide, switch_step, SwitchEvent, SwitchParams, SwitchState};
use crate::transient::{entity_centroids, spawn_session, transient_step, EgoView, TransientParams, TransientSession};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PtdParams {
    pub persistent: PersistentParams,
    pub transient: TransientParams,
    pub switch: SwitchParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PtdModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub params: PtdParams,
}

impl Parameterized for PtdModel {
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}

impl PtdModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let params = PtdParams {
            persistent: PersistentParams::new(&mut store, &mut rng, &config),
            transient: TransientParams::new(&mut store, &mut rng, &config),
            switch: SwitchParams::new(&mut store, &mut rng, &config),
        };
        Ok(Self { config, store, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Self = serde_json::from_str(&text)?;
        // Gradient buffers are not serialized.
        for id in m.store.ids().collect::<Vec<_>>() {
            let t = m.store.get_mut(id);
            *t = t.clone().requiring_grad();
        }
        m.config.validate()?;
        Ok(m)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PredictionSource {
    Persistent,
    /// Transient session centered on the human at this layout position.
    Transient(usize),
}

#[derive(Clone, Debug)]
pub struct HumanStep {
    pub human: usize,
    /// Differentiable score; `None` when the switch is not evaluated.
    pub score: Option<Var>,
    pub value: f64,
    pub gamma: f64,
    pub on: bool,
    pub event: SwitchEvent,
}

#[derive(Clone, Debug, Default)]
pub struct SessionDiagnostics {
    pub center: usize,
    pub inward: Vec<usize>,
    pub outward: Vec<usize>,
    pub attention: Vec<(usize, f64)>,
    pub to_persistent_norm: f64,
}

#[derive(Clone, Debug, Default)]
pub struct StepDiagnostics {
    pub persistent_attention: Vec<Vec<(usize, f64)>>,
    pub sessions: Vec<SessionDiagnostics>,
    /// Norm of the transient-to-persistent slot each persistent cell consumed.
    pub consumed_norms: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct StepResult {
    pub predictions: Vec<Var>,
    pub sources: Vec<PredictionSource>,
    pub humans: Vec<HumanStep>,
    pub diagnostics: StepDiagnostics,
}

/// Recurrent state of one scene evaluation. Lives on one tape.
pub struct ModelState<'m> {
    pub model: &'m PtdModel,
    pub layout: Layout,
    pub geo: TapeGeometry,
    pub persistent: PersistentState,
    pub switches: Vec<SwitchState>,
    pub sessions: BTreeMap<usize, TransientSession>,
    /// Transient-to-persistent messages produced last step, per entity.
    pub pending: Vec<Option<Var>>,
    /// Features consumed by the previous step.
    pub previous: Option<Vec<Var>>,
    pub t: usize,
}

impl<'m> ModelState<'m> {
    pub fn new(tape: &mut Tape, model: &'m PtdModel, layout: Layout) -> Result<Self> {
        let h = model.config.hidden_dim;
        let geo = TapeGeometry::new(tape)?;
        let persistent = PersistentState::new(tape, &layout, h);
        let switches = layout.humans().into_iter().map(|i| SwitchState::new(tape, i, h)).collect();
        let n = layout.len();
        Ok(Self {
            model,
            layout,
            geo,
            persistent,
            switches,
            sessions: BTreeMap::new(),
            pending: vec![None; n],
            previous: None,
            t: 0,
        })
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Picks each entity's prediction: a human with a live session takes its
/// own transient prediction; an object reached by outward edges takes the
/// prediction of the highest-scoring such session (lowest center wins
/// ties); everything else keeps the persistent prediction.
pub fn combine_predictions(
    persistent: &[Var],
    transient: &BTreeMap<usize, BTreeMap<usize, Var>>,
    classes: &[EntityClass],
    scores: &BTreeMap<usize, f64>,
) -> (Vec<Var>, Vec<PredictionSource>) {
    let mut preds = persistent.to_vec();
    let mut sources = vec![PredictionSource::Persistent; persistent.len()];
    for (i, class) in classes.iter().enumerate() {
        match class {
            EntityClass::Human => {
                if let Some(p) = transient.get(&i).and_then(|m| m.get(&i)) {
                    preds[i] = *p;
                    sources[i] = PredictionSource::Transient(i);
                }
            }
            EntityClass::Object => {
                let mut best: Option<(usize, f64, Var)> = None;
                for (&c, outs) in transient {
                    if let Some(&p) = outs.get(&i) {
                        let s = scores.get(&c).copied().unwrap_or(0.0);
                        if best.map_or(true, |(_, bs, _)| s > bs) {
                            best = Some((c, s, p));
                        }
                    }
                }
                if let Some((c, _, p)) = best {
                    preds[i] = p;
                    sources[i] = PredictionSource::Transient(c);
                }
            }
        }
    }
    (preds, sources)
}

/// One timestep. `features[i]` are the global features of layout entity `i`.
pub fn model_step(tape: &mut Tape, state: &mut ModelState, features: &[Var]) -> Result<StepResult> {
    let model = state.model;
    let cfg = &model.config;
    let store = &model.store;
    let params = &model.params;
    let layout = &state.layout;
    let n = layout.len();
    if features.len() != n {
        return Err(Error::invalid("model_step", format!("expected {n} feature vectors, got {}", features.len())));
    }

    let displacement = match &state.previous {
        Some(prev) => features
            .iter()
            .zip(prev)
            .map(|(&x, &p)| tape.sub(x, p))
            .collect::<Result<Vec<_>>>()?,
        None => layout.classes.iter().map(|c| tape.zeros(c.feature_dim())).collect(),
    };

    // (1) persistent channel with last step's transient messages
    let incoming = std::mem::replace(&mut state.pending, vec![None; n]);
    let pout = persistent_step(
        tape,
        store,
        &params.persistent,
        cfg,
        layout,
        &mut state.persistent,
        features,
        &displacement,
        &incoming,
    )?;
    let mut diag = StepDiagnostics {
        persistent_attention: pout.attention.clone(),
        sessions: Vec::new(),
        consumed_norms: pout.consumed.iter().map(|&v| norm(tape.value(v))).collect(),
    };

    // (2)-(3) switches in ascending order, then session life cycles
    let needs_views = cfg.switch_mode != SwitchMode::Off;
    let centroids = if needs_views {
        entity_centroids(tape, &state.geo, layout, features)?
    } else {
        Vec::new()
    };
    let mut views = BTreeMap::new();
    let mut humans = Vec::with_capacity(state.switches.len());
    for st in state.switches.iter_mut() {
        let r = st.human;
        let (score, value, gamma, raw_on) = if needs_views {
            let view = EgoView::new(tape, &state.geo, cfg, layout, features, &displacement, &centroids, r)?;
            let s = switch_step(tape, store, &params.switch, st, state.persistent.hidden[r], &view)?;
            views.insert(r, view);
            (Some(s.score), s.value, s.gamma, s.value)
        } else {
            (None, 0.0, 0.0, 0.0)
        };
        let decided = match cfg.switch_mode {
            SwitchMode::Learned => raw_on,
            SwitchMode::Off => 0.0,
            SwitchMode::On => 1.0,
        };
        let event = switch_decide(st, decided);
        humans.push(HumanStep {
            human: r,
            score,
            value,
            gamma,
            on: st.on,
            event,
        });
    }
    for h in &humans {
        match h.event {
            SwitchEvent::Spawn => spawn_session(tape, &mut state.sessions, cfg, layout, &views[&h.human], state.t)?,
            SwitchEvent::Terminate => {
                if let Some(mut s) = state.sessions.remove(&h.human) {
                    s.live = false;
                }
            }
            SwitchEvent::None => {}
        }
    }

    // (4) live sessions with this step's persistent messages
    let mut transient = BTreeMap::new();
    for (&r, sess) in state.sessions.iter_mut() {
        let m_pt = pout.messages[r].expect("humans carry a persistent message");
        let out = transient_step(
            tape,
            store,
            &params.transient,
            cfg,
            &state.geo,
            layout,
            sess,
            &views[&r],
            m_pt,
        )?;
        diag.sessions.push(SessionDiagnostics {
            center: r,
            inward: sess.graph.inward.iter().copied().collect(),
            outward: sess.graph.outward.iter().copied().collect(),
            attention: out.attention.clone(),
            to_persistent_norm: norm(tape.value(out.to_persistent)),
        });
        state.pending[r] = Some(out.to_persistent);
        transient.insert(r, out.predictions);
    }

    // (5) routing
    let scores: BTreeMap<usize, f64> = humans.iter().map(|h| (h.human, h.value)).collect();
    let (predictions, sources) = combine_predictions(&pout.predictions, &transient, &layout.classes, &scores);
    state.previous = Some(features.to_vec());
    state.t += 1;
    Ok(StepResult {
        predictions,
        sources,
        humans,
        diagnostics: diag,
    })
}

/// Output of [`rollout`]. Predictions are for steps `T..T+L` (0-based);
/// switch records cover steps `0..T+L`.
pub struct RolloutOutput {
    pub layout: Layout,
    /// `[L][N]` predicted global features.
    pub predictions: Vec<Vec<Var>>,
    pub sources: Vec<Vec<PredictionSource>>,
    /// `[T+L]` per-step switch records, humans in ascending order.
    pub switches: Vec<Vec<HumanStep>>,
    pub diagnostics: Vec<StepDiagnostics>,
}

impl RolloutOutput {
    /// Switch status per step per human (ascending layout order).
    pub fn status(&self) -> Vec<Vec<bool>> {
        self.switches.iter().map(|s| s.iter().map(|h| h.on).collect()).collect()
    }
}

/// Observes the first `T` ground-truth steps, then feeds back its own
/// combined predictions for `L` more steps.
pub fn rollout(tape: &mut Tape, model: &PtdModel, scene: &Scene) -> Result<RolloutOutput> {
    let (obs, horizon) = (model.config.obs_steps, model.config.horizon);
    if scene.num_steps() < obs {
        return Err(Error::Scene {
            scene: scene.scene_id.clone(),
            msg: format!("{} steps, need at least {obs} observed", scene.num_steps()),
        });
    }
    let layout = Layout::from_scene(scene);
    let mut state = ModelState::new(tape, model, layout.clone())?;
    let mut out = RolloutOutput {
        layout,
        predictions: Vec::with_capacity(horizon),
        sources: Vec::with_capacity(horizon),
        switches: Vec::with_capacity(obs + horizon),
        diagnostics: Vec::with_capacity(obs + horizon),
    };
    let mut feedback: Option<Vec<Var>> = None;
    for t in 0..obs + horizon {
        let features = if t < obs {
            state
                .layout
                .features_at(scene, t)
                .into_iter()
                .map(|f| tape.input(f))
                .collect::<Result<Vec<_>>>()?
        } else {
            feedback.take().expect("prediction from the previous step")
        };
        let step = model_step(tape, &mut state, &features)?;
        if t + 1 >= obs && t + 1 < obs + horizon {
            out.predictions.push(step.predictions.clone());
            out.sources.push(step.sources.clone());
        }
        feedback = Some(step.predictions);
        out.switches.push(step.humans);
        out.diagnostics.push(step.diagnostics);
    }
    Ok(out)
}
