//! Learned building blocks shared by every channel: a gated recurrent cell,
//! a feed-forward network and the additive attention used for message
//! aggregation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::EntityClass;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
    Sigmoid,
    Relu,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Identity => Ok(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::Relu => tape.relu(x),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "identity" => Some(Self::Identity),
            "tanh" => Some(Self::Tanh),
            "sigmoid" => Some(Self::Sigmoid),
            "relu" => Some(Self::Relu),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
            Activation::Relu => "relu",
        }
    }
}

/// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` initialization.
pub fn init_uniform<R: Rng>(rng: &mut R, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let values = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape, values).expect("initializer produces finite values")
}

/// Gated recurrent unit with fused gate matrices (`r`, `z`, `n` rows).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GruParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    w: ParamId,
    u: ParamId,
    bx: ParamId,
    bh: ParamId,
}

impl GruParams {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, input_dim: usize, hidden_dim: usize) -> Self {
        let h3 = 3 * hidden_dim;
        Self {
            input_dim,
            hidden_dim,
            w: store.add(format!("{name}.w"), init_uniform(rng, vec![h3, input_dim], input_dim)),
            u: store.add(format!("{name}.u"), init_uniform(rng, vec![h3, hidden_dim], hidden_dim)),
            bx: store.add(format!("{name}.bx"), init_uniform(rng, vec![h3], input_dim)),
            bh: store.add(format!("{name}.bh"), init_uniform(rng, vec![h3], hidden_dim)),
        }
    }

    pub fn param_ids(&self) -> [ParamId; 4] {
        [self.w, self.u, self.bx, self.bh]
    }
}

/// One recurrent update: `h' = n + z * (h - n)` with reset gate `r`,
/// update gate `z` and candidate `n = tanh(W_n x + b + r * (U_n h + b'))`.
pub fn gru_step(tape: &mut Tape, store: &ParamStore, p: &GruParams, input: Var, h_prev: Var) -> Result<Var> {
    if tape.shape(input) != [p.input_dim] || tape.shape(h_prev) != [p.hidden_dim] {
        return Err(Error::ShapeMismatch {
            op: "gru_step",
            lhs: vec![p.input_dim, p.hidden_dim],
            rhs: [tape.shape(input), tape.shape(h_prev)].concat(),
        });
    }
    let hd = p.hidden_dim;
    let (w, u, bx, bh) = (
        tape.param(store, p.w),
        tape.param(store, p.u),
        tape.param(store, p.bx),
        tape.param(store, p.bh),
    );
    let wx = tape.matmul(w, input)?;
    let wx = tape.add(wx, bx)?;
    let uh = tape.matmul(u, h_prev)?;
    let uh = tape.add(uh, bh)?;

    let wx_rz = tape.slice(wx, 0, 2 * hd)?;
    let uh_rz = tape.slice(uh, 0, 2 * hd)?;
    let rz = tape.add(wx_rz, uh_rz)?;
    let rz = tape.sigmoid(rz)?;
    let r = tape.slice(rz, 0, hd)?;
    let z = tape.slice(rz, hd, hd)?;

    let wx_n = tape.slice(wx, 2 * hd, hd)?;
    let uh_n = tape.slice(uh, 2 * hd, hd)?;
    let gated = tape.mul(r, uh_n)?;
    let n = tape.add(wx_n, gated)?;
    let n = tape.tanh(n)?;

    let diff = tape.sub(h_prev, n)?;
    let keep = tape.mul(z, diff)?;
    tape.add(n, keep)
}

/// Feed-forward network; hidden layers use `activation`, the last layer is
/// linear.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub widths: Vec<usize>,
    pub activation: Activation,
    layers: Vec<(ParamId, ParamId)>,
}

impl MlpParams {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, widths: &[usize], activation: Activation) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least one layer");
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, out) = (w[0], w[1]);
                (
                    store.add(format!("{name}.{i}.w"), init_uniform(rng, vec![out, fan_in], fan_in)),
                    store.add(format!("{name}.{i}.b"), init_uniform(rng, vec![out], fan_in)),
                )
            })
            .collect();
        Self {
            widths: widths.to_vec(),
            activation,
            layers,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("non-empty widths")
    }

    pub fn layer_ids(&self) -> &[(ParamId, ParamId)] {
        &self.layers
    }
}

pub fn mlp_apply(tape: &mut Tape, store: &ParamStore, p: &MlpParams, x: Var) -> Result<Var> {
    if tape.shape(x) != [p.input_dim()] {
        return Err(Error::ShapeMismatch {
            op: "mlp_apply",
            lhs: vec![p.input_dim()],
            rhs: tape.shape(x).to_vec(),
        });
    }
    let mut h = x;
    let last = p.layers.len() - 1;
    for (i, &(w, b)) in p.layers.iter().enumerate() {
        let w = tape.param(store, w);
        let b = tape.param(store, b);
        let y = tape.matmul(w, h)?;
        h = tape.add(y, b)?;
        if i < last {
            h = p.activation.apply(tape, h)?;
        }
    }
    Ok(h)
}

/// `Attn(q, V) = sigma(sum_j softmax_j(w_alpha . [W_q q; W_v v_j]) W_v v_j)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttnParams {
    pub query_dim: usize,
    pub value_dim: usize,
    pub att_dim: usize,
    pub sigma: Activation,
    w_q: ParamId,
    w_v: ParamId,
    w_alpha: ParamId,
}

impl AttnParams {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        query_dim: usize,
        value_dim: usize,
        att_dim: usize,
        sigma: Activation,
    ) -> Self {
        Self {
            query_dim,
            value_dim,
            att_dim,
            sigma,
            w_q: store.add(format!("{name}.w_q"), init_uniform(rng, vec![att_dim, query_dim], query_dim)),
            w_v: store.add(format!("{name}.w_v"), init_uniform(rng, vec![att_dim, value_dim], value_dim)),
            w_alpha: store.add(
                format!("{name}.w_alpha"),
                init_uniform(rng, vec![1, 2 * att_dim], 2 * att_dim),
            ),
        }
    }

    pub fn param_ids(&self) -> [ParamId; 3] {
        [self.w_q, self.w_v, self.w_alpha]
    }
}

/// Output of [`attn`]: the aggregated message and the softmax weights.
#[derive(Clone, Copy, Debug)]
pub struct AttnOutput {
    pub message: Var,
    pub weights: Var,
}

impl AttnParams {
    /// `W_q q`.
    pub fn project_query(&self, tape: &mut Tape, store: &ParamStore, q: Var) -> Result<Var> {
        if tape.shape(q) != [self.query_dim] {
            return Err(Error::ShapeMismatch {
                op: "attn",
                lhs: vec![self.query_dim],
                rhs: tape.shape(q).to_vec(),
            });
        }
        let w_q = tape.param(store, self.w_q);
        tape.matmul(w_q, q)
    }

    /// `W_v v`.
    pub fn project_value(&self, tape: &mut Tape, store: &ParamStore, v: Var) -> Result<Var> {
        if tape.shape(v) != [self.value_dim] {
            return Err(Error::ShapeMismatch {
                op: "attn",
                lhs: vec![self.value_dim],
                rhs: tape.shape(v).to_vec(),
            });
        }
        let w_v = tape.param(store, self.w_v);
        tape.matmul(w_v, v)
    }

    /// Attention over already projected query and values. Lets callers
    /// reuse one projection per entity across many queries.
    pub fn aggregate(&self, tape: &mut Tape, store: &ParamStore, qp: Var, projected: &[Var]) -> Result<AttnOutput> {
        if projected.is_empty() {
            return Err(Error::invalid("attn", "empty value set"));
        }
        let w_alpha = tape.param(store, self.w_alpha);
        let mut scores = Vec::with_capacity(projected.len());
        for &vp in projected {
            let joint = tape.concat(&[qp, vp])?;
            scores.push(tape.matmul(w_alpha, joint)?);
        }
        let scores = tape.concat(&scores)?;
        let weights = tape.softmax(scores, 0)?;

        let mut acc: Option<Var> = None;
        for (j, &vp) in projected.iter().enumerate() {
            let a = tape.slice(weights, j, 1)?;
            let term = tape.mul(vp, a)?;
            acc = Some(match acc {
                None => term,
                Some(s) => tape.add(s, term)?,
            });
        }
        let message = self.sigma.apply(tape, acc.expect("non-empty values"))?;
        Ok(AttnOutput { message, weights })
    }
}

pub fn attn(tape: &mut Tape, store: &ParamStore, p: &AttnParams, q: Var, values: &[Var]) -> Result<AttnOutput> {
    if values.is_empty() {
        return Err(Error::invalid("attn", "empty value set"));
    }
    let qp = p.project_query(tape, store, q)?;
    let projected = values
        .iter()
        .map(|&v| p.project_value(tape, store, v))
        .collect::<Result<Vec<_>>>()?;
    p.aggregate(tape, store, qp, &projected)
}

/// One parameter set per entity class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ByClass<T> {
    pub human: T,
    pub object: T,
}

impl<T> ByClass<T> {
    pub fn get(&self, class: EntityClass) -> &T {
        match class {
            EntityClass::Human => &self.human,
            EntityClass::Object => &self.object,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::param_gradcheck;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_all(store: &mut ParamStore) {
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).values_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }

    #[test]
    fn zero_gru_keeps_zero_state() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = GruParams::new(&mut store, &mut rng, "g", 3, 4);
        zero_all(&mut store);
        let mut t = Tape::new();
        let x = t.input(&[1.0, -2.0, 0.5]).unwrap();
        let h = t.zeros(4);
        let h1 = gru_step(&mut t, &store, &g, x, h).unwrap();
        assert_eq!(t.value(h1), &[0.0; 4]);
    }

    #[test]
    fn gru_output_stays_in_open_unit_interval() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = GruParams::new(&mut store, &mut rng, "g", 5, 6);
        let mut t = Tape::new();
        let mut h = t.zeros(6);
        for step in 0..20 {
            let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-3.0..3.0) * (step as f64 + 1.0)).collect();
            let xv = t.input(&x).unwrap();
            h = gru_step(&mut t, &store, &g, xv, h).unwrap();
            assert!(t.value(h).iter().all(|v| v.abs() < 1.0));
        }
    }

    #[test]
    fn gru_gradient_matches_finite_differences() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = GruParams::new(&mut store, &mut rng, "g", 3, 4);
        let x = [0.3, -1.1, 0.8];
        let h0 = [0.1, -0.2, 0.3, 0.05];
        let report = param_gradcheck(
            &store,
            |s, t| {
                let xv = t.input(&x)?;
                let hv = t.input(&h0)?;
                let h1 = gru_step(t, s, &g, xv, hv)?;
                let h2 = gru_step(t, s, &g, xv, h1)?;
                t.sum(h2)
            },
            1e-5,
            1,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn gru_rejects_wrong_input() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = GruParams::new(&mut store, &mut rng, "g", 3, 4);
        let mut t = Tape::new();
        let x = t.input(&[1.0, 2.0]).unwrap();
        let h = t.zeros(4);
        assert!(matches!(gru_step(&mut t, &store, &g, x, h), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn mlp_identity_and_bias() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = MlpParams::new(&mut store, &mut rng, "m", &[3, 3], Activation::Relu);
        let (w, b) = m.layer_ids()[0];
        store.get_mut(w).values_mut().copy_from_slice(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        store.get_mut(b).values_mut().iter_mut().for_each(|x| *x = 0.0);
        let mut t = Tape::new();
        let x = t.input(&[1.5, -2.0, 3.0]).unwrap();
        let y = mlp_apply(&mut t, &store, &m, x).unwrap();
        assert_eq!(t.value(y), &[1.5, -2.0, 3.0]);

        store.get_mut(w).values_mut().iter_mut().for_each(|x| *x = 0.0);
        store.get_mut(b).values_mut().copy_from_slice(&[0.25, 0.5, -1.0]);
        let mut t = Tape::new();
        let x = t.input(&[1.5, -2.0, 3.0]).unwrap();
        let y = mlp_apply(&mut t, &store, &m, x).unwrap();
        assert_eq!(t.value(y), &[0.25, 0.5, -1.0]);
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = MlpParams::new(&mut store, &mut rng, "m", &[4, 6, 3], Activation::Relu);
        let report = param_gradcheck(
            &store,
            |s, t| {
                let x = t.input(&[0.4, -0.7, 1.3, 0.2])?;
                let y = mlp_apply(t, s, &m, x)?;
                t.squared_l2(y)
            },
            1e-5,
            1,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    fn identity_attn(dim: usize) -> (ParamStore, AttnParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = AttnParams::new(&mut store, &mut rng, "a", dim, dim, dim, Activation::Tanh);
        let mut eye = vec![0.0; dim * dim];
        for i in 0..dim {
            eye[i * dim + i] = 1.0;
        }
        store.get_mut(a.w_v).values_mut().copy_from_slice(&eye);
        (store, a)
    }

    #[test]
    fn single_value_attention_is_sigma_of_value() {
        let (store, a) = identity_attn(2);
        let mut t = Tape::new();
        let q = t.input(&[0.3, 0.9]).unwrap();
        let v = t.input(&[0.5, -0.5]).unwrap();
        let out = attn(&mut t, &store, &a, q, &[v]).unwrap();
        assert_eq!(t.value(out.weights), &[1.0]);
        assert_abs_diff_eq!(t.value(out.message)[0], 0.46212, epsilon = 1e-5);
        assert_abs_diff_eq!(t.value(out.message)[1], -0.46212, epsilon = 1e-5);
        assert_eq!(t.value(out.message)[0], 0.5f64.tanh());

        let v2 = t.input(&[0.5, -0.5]).unwrap();
        let twice = attn(&mut t, &store, &a, q, &[v, v2]).unwrap();
        assert_eq!(t.value(twice.message), t.value(out.message));
    }

    #[test]
    fn empty_values_rejected() {
        let (store, a) = identity_attn(2);
        let mut t = Tape::new();
        let q = t.input(&[0.3, 0.9]).unwrap();
        assert!(attn(&mut t, &store, &a, q, &[]).is_err());
    }

    #[test]
    fn attention_gradient_matches_finite_differences() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = AttnParams::new(&mut store, &mut rng, "a", 3, 4, 5, Activation::Tanh);
        let report = param_gradcheck(
            &store,
            |s, t| {
                let q = t.input(&[0.2, -0.4, 0.9])?;
                let vs = [
                    t.input(&[1.0, 0.0, -0.5, 0.3])?,
                    t.input(&[-0.2, 0.7, 0.1, 0.0])?,
                    t.input(&[0.4, 0.4, 0.4, -1.0])?,
                ];
                let out = attn(t, s, &a, q, &vs)?;
                t.sum(out.message)
            },
            1e-5,
            1,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
