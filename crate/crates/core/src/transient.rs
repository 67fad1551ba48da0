//! The transient channel: an egocentric star graph around one human,
//! spawned and terminated by that human's switch.
//!
//! Entities are addressed by their position in the scene [`Layout`].

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::geometry::{centroid_flat, point_distance, EntityClass, TapeGeometry, HUMAN_DIM};
use crate::nn::{gru_step, mlp_apply, AttnParams, ByClass, GruParams, MlpParams};
use crate::persistent::{pad_to_human, residual_readout};
use crate::scene::Layout;

/// Smoothing under the square root of tape distances (mm^2).
pub const DISTANCE_EPS: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransientParams {
    pub center_cell: GruParams,
    pub leaf_cell: ByClass<GruParams>,
    pub attn: AttnParams,
    /// Center-to-leaf message head.
    pub outward: MlpParams,
    pub center_readout: MlpParams,
    pub leaf_readout: ByClass<MlpParams>,
    /// Transient-to-persistent message head, followed by `phi`.
    pub to_persistent: MlpParams,
}

impl TransientParams {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: &ModelConfig) -> Self {
        let (h, a, m) = (cfg.hidden_dim, cfg.att_dim, cfg.mlp_hidden);
        let act = cfg.mlp_activation;
        let (hd, od) = (EntityClass::Human.feature_dim(), EntityClass::Object.feature_dim());
        Self {
            center_cell: GruParams::new(store, rng, "transient.center_cell", 2 * HUMAN_DIM + a + h, h),
            leaf_cell: ByClass {
                human: GruParams::new(store, rng, "transient.leaf_cell.human", 2 * hd + h, h),
                object: GruParams::new(store, rng, "transient.leaf_cell.object", 2 * od + h, h),
            },
            attn: AttnParams::new(store, rng, "transient.attn", HUMAN_DIM + h, HUMAN_DIM + h, a, cfg.attn_sigma),
            outward: MlpParams::new(store, rng, "transient.outward", &[h, m, h], act),
            center_readout: MlpParams::new(store, rng, "transient.center_readout", &[h, m, hd], act),
            leaf_readout: ByClass {
                human: MlpParams::new(store, rng, "transient.leaf_readout.human", &[h, m, hd], act),
                object: MlpParams::new(store, rng, "transient.leaf_readout.object", &[h, m, od], act),
            },
            to_persistent: MlpParams::new(store, rng, "transient.to_persistent", &[h, m, h], act),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransientGraph {
    pub center: usize,
    pub leaves: Vec<usize>,
    pub inward: BTreeSet<usize>,
    pub outward: BTreeSet<usize>,
    /// Center-leaf centroid distance per leaf (mm).
    pub distances: BTreeMap<usize, f64>,
}

fn graph_from_distances(
    layout: &Layout,
    center: usize,
    distance_mm: &[f64],
    rho_in: f64,
    rho_out: f64,
) -> Result<TransientGraph> {
    if layout.classes.get(center) != Some(&EntityClass::Human) {
        return Err(Error::NotHuman(layout.ids.get(center).copied().unwrap_or(center)));
    }
    if !(rho_out <= rho_in) {
        return Err(Error::invalid(
            "build_transient_graph",
            format!("rho_out {rho_out} exceeds rho_in {rho_in}"),
        ));
    }
    let mut g = TransientGraph {
        center,
        leaves: Vec::new(),
        inward: BTreeSet::new(),
        outward: BTreeSet::new(),
        distances: BTreeMap::new(),
    };
    for l in (0..layout.len()).filter(|&l| l != center) {
        let d = distance_mm[l];
        g.leaves.push(l);
        g.distances.insert(l, d);
        if d <= rho_in {
            g.inward.insert(l);
        }
        if d <= rho_out {
            g.outward.insert(l);
        }
    }
    Ok(g)
}

/// Star graph around `center` from flattened global features.
pub fn build_transient_graph(
    layout: &Layout,
    features: &[&[f64]],
    center: usize,
    rho_in: f64,
    rho_out: f64,
) -> Result<TransientGraph> {
    if features.len() != layout.len() {
        return Err(Error::invalid("build_transient_graph", "one feature vector per entity required"));
    }
    let c = centroid_flat(features.get(center).copied().unwrap_or(&[]));
    let d: Vec<f64> = features.iter().map(|f| point_distance(c, centroid_flat(f))).collect();
    graph_from_distances(layout, center, &d, rho_in, rho_out)
}

/// Everything the switch and the transient channel need to see the scene
/// from one human's viewpoint at one step.
#[derive(Clone, Debug)]
pub struct EgoView {
    pub center: usize,
    pub center_centroid: Var,
    /// `x - centroid(x_center)` per entity, in mm.
    pub ego: Vec<Var>,
    /// Scaled egocentric features.
    pub scaled: Vec<Var>,
    /// Scaled egocentric features zero-padded to the human width.
    pub padded: Vec<Var>,
    /// One-step displacement relative to the center, in units of
    /// `delta_scale_mm`.
    pub motion: Vec<Var>,
    /// `motion` zero-padded to the human width.
    pub padded_motion: Vec<Var>,
    /// Differentiable centroid distance to the center; `None` for the center.
    pub distance: Vec<Option<Var>>,
    /// Exact centroid distances (mm); zero for the center.
    pub distance_mm: Vec<f64>,
}

/// Centroid of every entity's features, on the tape.
pub fn entity_centroids(tape: &mut Tape, geo: &TapeGeometry, layout: &Layout, features: &[Var]) -> Result<Vec<Var>> {
    (0..layout.len())
        .map(|i| geo.centroid(tape, layout.classes[i], features[i]))
        .collect()
}

impl EgoView {
    pub fn new(
        tape: &mut Tape,
        geo: &TapeGeometry,
        cfg: &ModelConfig,
        layout: &Layout,
        features: &[Var],
        displacement: &[Var],
        centroids: &[Var],
        center: usize,
    ) -> Result<Self> {
        if layout.classes.get(center) != Some(&EntityClass::Human) {
            return Err(Error::NotHuman(layout.ids.get(center).copied().unwrap_or(center)));
        }
        let c = centroids[center];
        let cv = tape.value(c).to_vec();
        let center_motion = geo.centroid(tape, EntityClass::Human, displacement[center])?;
        let n = layout.len();
        let mut view = EgoView {
            center,
            center_centroid: c,
            ego: Vec::with_capacity(n),
            scaled: Vec::with_capacity(n),
            padded: Vec::with_capacity(n),
            motion: Vec::with_capacity(n),
            padded_motion: Vec::with_capacity(n),
            distance: Vec::with_capacity(n),
            distance_mm: Vec::with_capacity(n),
        };
        for i in 0..n {
            let class = layout.classes[i];
            let e = geo.ego(tape, class, features[i], c)?;
            let s = tape.scale(e, 1.0 / cfg.coord_scale_mm)?;
            view.padded.push(pad_to_human(tape, class, s)?);
            let rel = geo.ego(tape, class, displacement[i], center_motion)?;
            let m = tape.scale(rel, 1.0 / cfg.delta_scale_mm)?;
            view.padded_motion.push(pad_to_human(tape, class, m)?);
            view.motion.push(m);
            view.ego.push(e);
            view.scaled.push(s);
            if i == center {
                view.distance.push(None);
                view.distance_mm.push(0.0);
            } else {
                let ci = tape.value(centroids[i]);
                view.distance_mm
                    .push(point_distance([cv[0], cv[1], cv[2]], [ci[0], ci[1], ci[2]]));
                view.distance.push(Some(geo.distance(tape, centroids[i], c, DISTANCE_EPS)?));
            }
        }
        Ok(view)
    }
}

#[derive(Clone, Debug)]
pub struct TransientSession {
    pub center: usize,
    pub graph: TransientGraph,
    pub center_hidden: Var,
    pub leaf_hidden: BTreeMap<usize, Var>,
    pub start_time: usize,
    pub live: bool,
}

/// Opens a session for `center` at step `t` with zeroed hidden states.
pub fn spawn_session(
    tape: &mut Tape,
    sessions: &mut BTreeMap<usize, TransientSession>,
    cfg: &ModelConfig,
    layout: &Layout,
    view: &EgoView,
    t: usize,
) -> Result<()> {
    let center = view.center;
    if sessions.get(&center).is_some_and(|s| s.live) {
        return Err(Error::DuplicateSession(layout.ids[center]));
    }
    let graph = graph_from_distances(layout, center, &view.distance_mm, cfg.rho_in_mm, cfg.rho_out_mm)?;
    let leaf_hidden = graph.leaves.iter().map(|&l| (l, tape.zeros(cfg.hidden_dim))).collect();
    sessions.insert(
        center,
        TransientSession {
            center,
            graph,
            center_hidden: tape.zeros(cfg.hidden_dim),
            leaf_hidden,
            start_time: t,
            live: true,
        },
    );
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TransientStepOutput {
    /// Global-frame predictions for the center and every outward leaf.
    pub predictions: BTreeMap<usize, Var>,
    pub to_persistent: Var,
    /// Inward attention weights, `(leaf, weight)`.
    pub attention: Vec<(usize, f64)>,
}

pub fn transient_step(
    tape: &mut Tape,
    store: &ParamStore,
    params: &TransientParams,
    cfg: &ModelConfig,
    geo: &TapeGeometry,
    layout: &Layout,
    sess: &mut TransientSession,
    view: &EgoView,
    from_persistent: Var,
) -> Result<TransientStepOutput> {
    if !sess.live {
        return Err(Error::SessionNotLive(layout.ids[sess.center]));
    }
    if view.center != sess.center {
        return Err(Error::invalid("transient_step", "view is centered on another entity"));
    }
    let r = sess.center;
    sess.graph = graph_from_distances(layout, r, &view.distance_mm, cfg.rho_in_mm, cfg.rho_out_mm)?;

    let inward: Vec<usize> = sess.graph.inward.iter().copied().collect();
    let mut attention = Vec::new();
    let m_in = if inward.is_empty() {
        tape.zeros(cfg.att_dim)
    } else {
        let q = tape.concat(&[view.padded[r], sess.center_hidden])?;
        let qp = params.attn.project_query(tape, store, q)?;
        let mut vals = Vec::with_capacity(inward.len());
        for &l in &inward {
            let u = tape.concat(&[view.padded[l], sess.leaf_hidden[&l]])?;
            vals.push(params.attn.project_value(tape, store, u)?);
        }
        let a = params.attn.aggregate(tape, store, qp, &vals)?;
        attention = inward.iter().copied().zip(tape.value(a.weights).iter().copied()).collect();
        a.message
    };

    let z_r = tape.concat(&[view.scaled[r], view.motion[r], m_in, from_persistent])?;
    let h_r = gru_step(tape, store, &params.center_cell, z_r, sess.center_hidden)?;
    sess.center_hidden = h_r;

    let mut predictions = BTreeMap::new();
    let base = residual_readout(tape, store, &params.center_readout, cfg, view.ego[r], h_r)?;
    predictions.insert(r, geo.ego_inverse(tape, EntityClass::Human, base, view.center_centroid)?);

    if !sess.graph.outward.is_empty() {
        let m_out = mlp_apply(tape, store, &params.outward, h_r)?;
        for &l in &sess.graph.outward {
            let class = layout.classes[l];
            let z_l = tape.concat(&[view.scaled[l], view.motion[l], m_out])?;
            let h_l = gru_step(tape, store, params.leaf_cell.get(class), z_l, sess.leaf_hidden[&l])?;
            sess.leaf_hidden.insert(l, h_l);
            let base = residual_readout(tape, store, params.leaf_readout.get(class), cfg, view.ego[l], h_l)?;
            predictions.insert(l, geo.ego_inverse(tape, class, base, view.center_centroid)?);
        }
    }

    let m = mlp_apply(tape, store, &params.to_persistent, h_r)?;
    let to_persistent = cfg.phi.apply(tape, m)?;
    Ok(TransientStepOutput {
        predictions,
        to_persistent,
        attention,
    })
}
