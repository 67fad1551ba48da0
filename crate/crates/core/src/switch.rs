//! The transient switch: a recurrent gate per human whose score, damped by
//! the distance to the nearest other entity, opens and closes sessions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::config::ModelConfig;
use crate::error::Result;
use crate::geometry::HUMAN_DIM;
use crate::nn::{gru_step, init_uniform, AttnParams, GruParams};
use crate::transient::EgoView;

/// Scores at or above this value turn the switch on.
pub const THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwitchParams {
    pub cell: GruParams,
    pub attn: AttnParams,
    pub w: ParamId,
    /// Unconstrained decay rate; the rate used is `softplus(beta_raw)`.
    pub beta_raw: ParamId,
}

/// `softplus^-1(y) = ln(exp(y) - 1)`, stable for small `y`.
pub fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

impl SwitchParams {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: &ModelConfig) -> Self {
        let (h, a) = (cfg.hidden_dim, cfg.att_dim);
        Self {
            cell: GruParams::new(store, rng, "switch.cell", h + a, h),
            attn: AttnParams::new(store, rng, "switch.attn", h, 2 * HUMAN_DIM, a, cfg.attn_sigma),
            w: store.add("switch.w", init_uniform(rng, vec![1, h], h)),
            beta_raw: store.add("switch.beta_raw", Tensor::scalar(inverse_softplus(cfg.beta_init)).requiring_grad()),
        }
    }

    /// Current decay rate per mm.
    pub fn beta(&self, store: &ParamStore) -> f64 {
        softplus(store.get(self.beta_raw).values()[0])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SwitchEvent {
    None,
    Spawn,
    Terminate,
}

#[derive(Clone, Debug)]
pub struct SwitchState {
    /// Layout position of the human.
    pub human: usize,
    pub hidden: Var,
    pub on: bool,
    pub last_score: f64,
}

impl SwitchState {
    pub fn new(tape: &mut Tape, human: usize, hidden_dim: usize) -> Self {
        Self {
            human,
            hidden: tape.zeros(hidden_dim),
            on: false,
            last_score: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SwitchScore {
    pub score: Var,
    pub value: f64,
    pub gamma: f64,
}

/// Updates the switch hidden state from the human's persistent state and
/// egocentric surroundings and returns the score.
pub fn switch_step(
    tape: &mut Tape,
    store: &ParamStore,
    params: &SwitchParams,
    st: &mut SwitchState,
    persistent_hidden: Var,
    view: &EgoView,
) -> Result<SwitchScore> {
    let r = st.human;
    let leaves: Vec<usize> = (0..view.padded.len()).filter(|&l| l != r).collect();
    let message = if leaves.is_empty() {
        tape.zeros(params.attn.att_dim)
    } else {
        // where each leaf is and how it moves relative to the human
        let vals = leaves
            .iter()
            .map(|&l| tape.concat(&[view.padded[l], view.padded_motion[l]]))
            .collect::<Result<Vec<_>>>()?;
        crate::nn::attn(tape, store, &params.attn, st.hidden, &vals)?.message
    };
    let input = tape.concat(&[persistent_hidden, message])?;
    let h = gru_step(tape, store, &params.cell, input, st.hidden)?;
    st.hidden = h;

    let w = tape.param(store, params.w);
    let logit = tape.matmul(w, h)?;
    let s = tape.sigmoid(logit)?;

    // The gradient of the minimum is that of the nearest leaf; the first
    // index wins ties.
    let nearest = leaves
        .iter()
        .copied()
        .min_by(|&a, &b| view.distance_mm[a].total_cmp(&view.distance_mm[b]));
    let gamma = match nearest {
        None => tape.zeros(1),
        Some(l) => {
            let d = view.distance[l].expect("leaf distance");
            let raw = tape.param(store, params.beta_raw);
            let beta = tape.softplus(raw)?;
            let bd = tape.mul(beta, d)?;
            let neg = tape.scale(bd, -1.0)?;
            tape.exp(neg)?
        }
    };
    let score = tape.mul(gamma, s)?;
    let value = tape.scalar(score);
    st.last_score = value;
    Ok(SwitchScore {
        score,
        value,
        gamma: tape.scalar(gamma),
    })
}

/// Thresholds a score and updates the on/off status.
pub fn switch_decide(st: &mut SwitchState, score: f64) -> SwitchEvent {
    let on = score >= THRESHOLD;
    let ev = match (st.on, on) {
        (false, true) => SwitchEvent::Spawn,
        (true, false) => SwitchEvent::Terminate,
        _ => SwitchEvent::None,
    };
    st.on = on;
    ev
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_softplus_round_trips() {
        for y in [1e-4, 0.002, 0.5, 3.0] {
            assert!((softplus(inverse_softplus(y)) - y).abs() < 1e-15 * y.max(1.0) * 10.0);
        }
    }

    #[test]
    fn decide_transitions() {
        let mut t = Tape::new();
        let mut st = SwitchState::new(&mut t, 0, 2);
        let evs: Vec<_> = [0.7, 0.6, 0.4].iter().map(|&p| switch_decide(&mut st, p)).collect();
        assert_eq!(evs, [SwitchEvent::Spawn, SwitchEvent::None, SwitchEvent::Terminate]);
        assert_eq!(switch_decide(&mut st, 0.5), SwitchEvent::Spawn);
        assert!(st.on);
        let mut st = SwitchState::new(&mut t, 0, 2);
        assert!((0..20).all(|_| switch_decide(&mut st, 0.49) == SwitchEvent::None));
    }
}
