//! The persistent channel: a fully connected recurrent relational network
//! over every entity of the scene.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::geometry::{EntityClass, HUMAN_DIM};
use crate::nn::{gru_step, mlp_apply, AttnParams, ByClass, GruParams, MlpParams};
use crate::scene::Layout;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersistentParams {
    pub cell: ByClass<GruParams>,
    pub attn: AttnParams,
    pub predict: ByClass<MlpParams>,
    /// Persistent-to-transient message head (humans only).
    pub message: MlpParams,
}

impl PersistentParams {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: &ModelConfig) -> Self {
        let (h, a, m) = (cfg.hidden_dim, cfg.att_dim, cfg.mlp_hidden);
        let act = cfg.mlp_activation;
        let cell_in = |c: EntityClass| 2 * c.feature_dim() + a + h;
        Self {
            cell: ByClass {
                human: GruParams::new(store, rng, "persistent.cell.human", cell_in(EntityClass::Human), h),
                object: GruParams::new(store, rng, "persistent.cell.object", cell_in(EntityClass::Object), h),
            },
            attn: AttnParams::new(store, rng, "persistent.attn", HUMAN_DIM + h, HUMAN_DIM + h, a, cfg.attn_sigma),
            predict: ByClass {
                human: MlpParams::new(store, rng, "persistent.predict.human", &[h, m, EntityClass::Human.feature_dim()], act),
                object: MlpParams::new(store, rng, "persistent.predict.object", &[h, m, EntityClass::Object.feature_dim()], act),
            },
            message: MlpParams::new(store, rng, "persistent.message", &[h, m, h], act),
        }
    }
}

/// Per-entity hidden states of the persistent channel, indexed like the
/// scene [`Layout`].
#[derive(Clone, Debug)]
pub struct PersistentState {
    pub hidden: Vec<Var>,
}

impl PersistentState {
    pub fn new(tape: &mut Tape, layout: &Layout, hidden_dim: usize) -> Self {
        Self {
            hidden: (0..layout.len()).map(|_| tape.zeros(hidden_dim)).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PersistentStepOutput {
    /// Global-frame prediction of every entity's next features (mm).
    pub predictions: Vec<Var>,
    /// Message to the transient channel, present for humans.
    pub messages: Vec<Option<Var>>,
    /// Softmax weights over the other entities, `(neighbor, weight)`.
    pub attention: Vec<Vec<(usize, f64)>>,
    /// The transient-to-persistent slot each cell consumed.
    pub consumed: Vec<Var>,
}

/// Zero-pads object features to the human width so every entity can share
/// one attention value space.
pub fn pad_to_human(tape: &mut Tape, class: EntityClass, x: Var) -> Result<Var> {
    match class {
        EntityClass::Human => Ok(x),
        EntityClass::Object => {
            let z = tape.zeros(HUMAN_DIM - class.feature_dim());
            tape.concat(&[x, z])
        }
    }
}

/// Residual readout `x + delta_scale * head(h)`.
pub(crate) fn residual_readout(
    tape: &mut Tape,
    store: &ParamStore,
    head: &MlpParams,
    cfg: &ModelConfig,
    base_mm: Var,
    hidden: Var,
) -> Result<Var> {
    let d = mlp_apply(tape, store, head, hidden)?;
    let d = tape.scale(d, cfg.delta_scale_mm)?;
    tape.add(base_mm, d)
}

/// One update of every entity's persistent hidden state followed by the
/// prediction and message heads.
///
/// `displacement[i]` is `x_i^t - x_i^{t-1}` in mm (zeros at the first
/// step). `incoming[i]` is the transient-to-persistent message for entity
/// `i`; `None` feeds the zero vector.
pub fn persistent_step(
    tape: &mut Tape,
    store: &ParamStore,
    params: &PersistentParams,
    cfg: &ModelConfig,
    layout: &Layout,
    state: &mut PersistentState,
    features: &[Var],
    displacement: &[Var],
    incoming: &[Option<Var>],
) -> Result<PersistentStepOutput> {
    let n = layout.len();
    if features.len() != n || displacement.len() != n || incoming.len() != n || state.hidden.len() != n {
        return Err(Error::invalid(
            "persistent_step",
            format!("expected {n} entities, got {} features / {} messages", features.len(), incoming.len()),
        ));
    }
    let inv_scale = 1.0 / cfg.coord_scale_mm;
    let mut scaled = Vec::with_capacity(n);
    let mut query = Vec::with_capacity(n);
    let mut projected = Vec::with_capacity(n);
    for i in 0..n {
        let class = layout.classes[i];
        if tape.shape(features[i]) != [class.feature_dim()] {
            return Err(Error::ShapeMismatch {
                op: "persistent_step",
                lhs: vec![class.feature_dim()],
                rhs: tape.shape(features[i]).to_vec(),
            });
        }
        let xs = tape.scale(features[i], inv_scale)?;
        let padded = pad_to_human(tape, class, xs)?;
        let u = tape.concat(&[padded, state.hidden[i]])?;
        query.push(params.attn.project_query(tape, store, u)?);
        projected.push(params.attn.project_value(tape, store, u)?);
        scaled.push(xs);
    }

    let mut out = PersistentStepOutput {
        predictions: Vec::with_capacity(n),
        messages: Vec::with_capacity(n),
        attention: Vec::with_capacity(n),
        consumed: Vec::with_capacity(n),
    };
    let mut new_hidden = Vec::with_capacity(n);
    for i in 0..n {
        let class = layout.classes[i];
        let others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        let message = if others.is_empty() {
            out.attention.push(Vec::new());
            tape.zeros(cfg.att_dim)
        } else {
            let vals: Vec<Var> = others.iter().map(|&j| projected[j]).collect();
            let a = params.attn.aggregate(tape, store, query[i], &vals)?;
            let w = tape.value(a.weights);
            out.attention.push(others.iter().copied().zip(w.iter().copied()).collect());
            a.message
        };
        let tp = match (class, incoming[i]) {
            (EntityClass::Human, Some(m)) => m,
            _ => tape.zeros(cfg.hidden_dim),
        };
        out.consumed.push(tp);
        let d = tape.scale(displacement[i], 1.0 / cfg.delta_scale_mm)?;
        let input = tape.concat(&[scaled[i], d, message, tp])?;
        let h = gru_step(tape, store, params.cell.get(class), input, state.hidden[i])?;
        new_hidden.push(h);

        out.predictions
            .push(residual_readout(tape, store, params.predict.get(class), cfg, features[i], h)?);
        out.messages.push(match class {
            EntityClass::Human => Some(mlp_apply(tape, store, &params.message, h)?),
            EntityClass::Object => None,
        });
    }
    state.hidden = new_hidden;
    Ok(out)
}
