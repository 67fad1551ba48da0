use super::{ParamGrads, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf { requires_grad: bool },
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Concat(Vec<Var>),
    Slice { src: Var, offset: usize },
    Sum(Var),
    Mean(Var),
    Exp(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Sqrt(Var),
    Softplus(Var),
    Softmax { src: Var, axis: usize },
    SquaredL2(Var),
    Bce { p: Var, labels: Vec<f64> },
}

/// Tensor shape of rank at most [`MAX_RANK`], stored inline so recording a
/// node allocates only its values.
#[derive(Clone, Copy, PartialEq, Eq)]
struct Shape {
    dims: [usize; MAX_RANK],
    rank: usize,
}

const MAX_RANK: usize = 3;

impl Shape {
    fn new(dims: &[usize]) -> Result<Self> {
        if dims.len() > MAX_RANK {
            return Err(Error::invalid("tape", format!("rank {} exceeds {MAX_RANK}", dims.len())));
        }
        let mut d = [0; MAX_RANK];
        d[..dims.len()].copy_from_slice(dims);
        Ok(Self { dims: d, rank: dims.len() })
    }

    fn vector(n: usize) -> Self {
        Self {
            dims: [n, 0, 0],
            rank: 1,
        }
    }

    /// `lead` rows of `trailing`.
    fn rows(lead: usize, trailing: &[usize]) -> Result<Self> {
        let mut s = Self::new(&[lead])?;
        if trailing.len() + 1 > MAX_RANK {
            return Err(Error::invalid("tape", "rank too large"));
        }
        s.dims[1..=trailing.len()].copy_from_slice(trailing);
        s.rank += trailing.len();
        Ok(s)
    }
}

impl std::ops::Deref for Shape {
    type Target = [usize];
    fn deref(&self) -> &[usize] {
        &self.dims[..self.rank]
    }
}

impl std::fmt::Debug for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self[..].fmt(f)
    }
}

#[derive(Clone, Debug)]
struct Node {
    shape: Shape,
    value: Vec<f64>,
    op: Op,
}

/// Probability clamp used by binary cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

/// Linear record of one forward pass. Nodes are appended in evaluation
/// order, so every input precedes its consumer.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: Vec<Option<Var>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..n {
        s += a[i] * b[i];
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<&Node> {
        self.nodes.get(v.0).ok_or(Error::UnknownVar(v.0))
    }

    fn push(&mut self, op_name: &'static str, shape: Shape, value: Vec<f64>, op: Op) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len());
        if value.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node { shape, value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor {
            shape: n.shape.to_vec(),
            values: n.value.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Records a constant that receives no gradient.
    pub fn constant(&mut self, t: &Tensor) -> Result<Var> {
        self.leaf(&t.shape, t.values.clone(), false)
    }

    pub fn input(&mut self, values: &[f64]) -> Result<Var> {
        if values.is_empty() {
            return Err(Error::invalid("input", "empty vector"));
        }
        self.leaf(&[values.len()], values.to_vec(), false)
    }

    pub fn zeros(&mut self, n: usize) -> Var {
        self.nodes.push(Node {
            shape: Shape::vector(n),
            value: vec![0.0; n],
            op: Op::Leaf {
                requires_grad: false,
            },
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf whose gradient is reported by [`Tape::backward`].
    pub fn variable(&mut self, t: &Tensor) -> Result<Var> {
        self.leaf(&t.shape, t.values.clone(), true)
    }

    fn leaf(&mut self, shape: &[usize], value: Vec<f64>, requires_grad: bool) -> Result<Var> {
        self.push("leaf", Shape::new(shape)?, value, Op::Leaf { requires_grad })
    }

    /// Binds a stored parameter onto the tape. Repeated binds return the
    /// same node so gradients accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if self.bound.len() <= id.0 {
            self.bound.resize(id.0 + 1, None);
        }
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let t = store.get(id);
        self.nodes.push(Node {
            shape: Shape::new(&t.shape).expect("parameter rank"),
            value: t.values.clone(),
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.bound[id.0] = Some(v);
        v
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (na, nb) = (self.check(a)?, self.check(b)?);
        if na.shape != nb.shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: na.shape.to_vec(),
                rhs: nb.shape.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let shape = self.nodes[a.0].shape;
        self.push("add", shape, value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let shape = self.nodes[a.0].shape;
        self.push("sub", shape, value, Op::Sub(a, b))
    }

    /// Elementwise product; either operand may be a single-element tensor,
    /// which is broadcast.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.check(a)?, self.check(b)?);
        let (shape, value): (Shape, Vec<f64>) = if na.shape == nb.shape {
            (na.shape, na.value.iter().zip(&nb.value).map(|(x, y)| x * y).collect())
        } else if nb.value.len() == 1 {
            let k = nb.value[0];
            (na.shape, na.value.iter().map(|x| x * k).collect())
        } else if na.value.len() == 1 {
            let k = na.value[0];
            (nb.shape, nb.value.iter().map(|x| x * k).collect())
        } else {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: na.shape.to_vec(),
                rhs: nb.shape.to_vec(),
            });
        };
        self.push("mul", shape, value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let n = self.check(a)?;
        let value = n.value.iter().map(|x| x * k).collect();
        let shape = n.shape;
        self.push("scale", shape, value, Op::Scale(a, k))
    }

    /// `[m,k] x [k] -> [m]` or `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.check(a)?, self.check(b)?);
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: na.shape.to_vec(),
            rhs: nb.shape.to_vec(),
        };
        if na.shape.len() != 2 {
            return Err(mismatch());
        }
        let (m, k) = (na.shape[0], na.shape[1]);
        let (shape, value) = match &*nb.shape {
            [kb] if *kb == k => {
                let out: Vec<f64> = na.value.chunks_exact(k).map(|row| dot(row, &nb.value)).collect();
                (Shape::vector(m), out)
            }
            [kb, n] if *kb == k => {
                let n = *n;
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    let row = &na.value[i * k..(i + 1) * k];
                    let o = &mut out[i * n..(i + 1) * n];
                    for (p, &aip) in row.iter().enumerate() {
                        axpy(aip, &nb.value[p * n..(p + 1) * n], o);
                    }
                }
                (Shape { dims: [m, n, 0], rank: 2 }, out)
            }
            _ => return Err(mismatch()),
        };
        self.push("matmul", shape, value, Op::MatMul(a, b))
    }

    /// Concatenation along the leading axis. Trailing dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let head = self.check(first)?.shape;
        let trailing = &head[1..];
        let mut lead = 0;
        let mut value = Vec::new();
        for &p in parts {
            let n = self.check(p)?;
            if n.shape[1..] != *trailing {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: self.shape(first).to_vec(),
                    rhs: n.shape.to_vec(),
                });
            }
            lead += n.shape[0];
            value.extend_from_slice(&n.value);
        }
        let shape = Shape::rows(lead, trailing)?;
        self.push("concat", shape, value, Op::Concat(parts.to_vec()))
    }

    /// Rows `start..start+len` along the leading axis.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let n = self.check(a)?;
        if len == 0 || start + len > n.shape[0] {
            return Err(Error::invalid(
                "slice",
                format!("range {start}..{} out of bounds for shape {:?}", start + len, n.shape),
            ));
        }
        let row: usize = n.shape[1..].iter().product();
        let value = n.value[start * row..(start + len) * row].to_vec();
        let shape = Shape::rows(len, &n.shape[1..])?;
        self.push("slice", shape, value, Op::Slice { src: a, offset: start * row })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.check(a)?.value.iter().sum();
        self.push("sum", Shape::vector(1), vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.check(a)?;
        let s = n.value.iter().sum::<f64>() / n.value.len() as f64;
        self.push("mean", Shape::vector(1), vec![s], Op::Mean(a))
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let n = self.check(a)?;
        let value = n.value.iter().map(|&x| f(x)).collect();
        let shape = n.shape;
        self.push(name, shape, value, op)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary("softplus", a, softplus, Op::Softplus(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.check(a)?.value.iter().any(|&x| x <= 0.0) {
            return Err(Error::invalid("sqrt", "argument must be positive"));
        }
        self.unary("sqrt", a, f64::sqrt, Op::Sqrt(a))
    }

    /// Softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let n = self.check(a)?;
        if axis >= n.shape.len() {
            return Err(Error::invalid(
                "softmax",
                format!("axis {axis} out of range for shape {:?}", n.shape),
            ));
        }
        let (outer, len, inner) = split_axis(&n.shape, axis);
        let mut value = n.value.clone();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| value[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (value[idx(j)] - max).exp();
                    value[idx(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    value[idx(j)] /= total;
                }
            }
        }
        let shape = n.shape;
        self.push("softmax", shape, value, Op::Softmax { src: a, axis })
    }

    /// Sum of squared entries.
    pub fn squared_l2(&mut self, a: Var) -> Result<Var> {
        let s = dot(self.check(a)?.value.as_slice(), self.value(a));
        self.push("squared_l2", Shape::vector(1), vec![s], Op::SquaredL2(a))
    }

    /// Mean binary cross-entropy of probabilities `p` against `labels`,
    /// with `p` clamped to `[BCE_EPS, 1 - BCE_EPS]`.
    pub fn bce(&mut self, p: Var, labels: &[f64]) -> Result<Var> {
        let n = self.check(p)?;
        if n.value.len() != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "binary_cross_entropy",
                lhs: n.shape.to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if labels.iter().any(|y| !(0.0..=1.0).contains(y)) {
            return Err(Error::invalid("binary_cross_entropy", "labels must lie in [0, 1]"));
        }
        let total: f64 = n
            .value
            .iter()
            .zip(labels)
            .map(|(&p, &y)| {
                let c = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                -(y * c.ln() + (1.0 - y) * (1.0 - c).ln())
            })
            .sum();
        let v = total / labels.len() as f64;
        self.push(
            "binary_cross_entropy",
            Shape::vector(1),
            vec![v],
            Op::Bce {
                p,
                labels: labels.to_vec(),
            },
        )
    }

    /// Reverse-mode sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rn = self.check(root)?;
        if rn.value.len() != 1 {
            return Err(Error::NonScalarRoot(rn.shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf { .. } | Op::Param(_) => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &g, &self.nodes);
                    accumulate(&mut grads, *b, &g, &self.nodes);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, &g, &self.nodes);
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    accumulate(&mut grads, *b, &neg, &self.nodes);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let ga = product_grad(&g, vb, va.len());
                    let gb = product_grad(&g, va, vb.len());
                    accumulate(&mut grads, *a, &ga, &self.nodes);
                    accumulate(&mut grads, *b, &gb, &self.nodes);
                }
                Op::Scale(a, k) => {
                    let ga: Vec<f64> = g.iter().map(|x| x * k).collect();
                    accumulate(&mut grads, *a, &ga, &self.nodes);
                }
                Op::MatMul(a, b) => {
                    let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
                    let (m, k) = (na.shape[0], na.shape[1]);
                    let n = if nb.shape.len() == 2 { nb.shape[1] } else { 1 };
                    // dA = G B^T, dB = A^T G with G: [m, n]
                    let mut ga = vec![0.0; m * k];
                    let mut gb = vec![0.0; k * n];
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        let arow = &na.value[r * k..(r + 1) * k];
                        let garow = &mut ga[r * k..(r + 1) * k];
                        if n == 1 {
                            let gr = grow[0];
                            axpy(gr, &nb.value, garow);
                            axpy(gr, arow, &mut gb);
                        } else {
                            for p in 0..k {
                                let brow = &nb.value[p * n..(p + 1) * n];
                                garow[p] += dot(grow, brow);
                                axpy(arow[p], grow, &mut gb[p * n..(p + 1) * n]);
                            }
                        }
                    }
                    accumulate(&mut grads, *a, &ga, &self.nodes);
                    accumulate(&mut grads, *b, &gb, &self.nodes);
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let len = self.nodes[p.0].value.len();
                        accumulate(&mut grads, *p, &g[off..off + len], &self.nodes);
                        off += len;
                    }
                }
                Op::Slice { src, offset } => {
                    let len = self.nodes[src.0].value.len();
                    let buf = grads[src.0].get_or_insert_with(|| vec![0.0; len]);
                    for (b, x) in buf[*offset..*offset + g.len()].iter_mut().zip(&g) {
                        *b += x;
                    }
                }
                Op::Sum(a) => {
                    let len = self.nodes[a.0].value.len();
                    accumulate(&mut grads, *a, &vec![g[0]; len], &self.nodes);
                }
                Op::Mean(a) => {
                    let len = self.nodes[a.0].value.len();
                    accumulate(&mut grads, *a, &vec![g[0] / len as f64; len], &self.nodes);
                }
                Op::Exp(a) => {
                    let ga: Vec<f64> = g.iter().zip(&node.value).map(|(g, y)| g * y).collect();
                    accumulate(&mut grads, *a, &ga, &self.nodes);
                }
                Op::Tanh(a) => {
                    let ga: Vec<f64> = g.iter().zip(&node.value).map(|(g, y)| g * (1.0 - y * y)).collect();
                    accumulate(&mut grads, *a, &ga, &self.nodes);
                }
                Op::Sigmoid(a) => {
                    let ga: Vec<f64> = g.iter().zip(&node.value).map(|(g, y)| g * y * (1.0 - y)).collect();
                    accumulate(&mut grads, *a, &ga, &self.nodes);
                }
                Op::Relu(a) => {
                    let x = &self.nodes[a.0].value;
                    let ga: Vec<f64> = g.iter().zip(x).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect();
                    accumulate(&mut grads, *a, &ga, &self.nodes);
                }
                Op::Sqrt(a) => {
                    let ga: Vec<f64> = g.iter().zip(&node.value).map(|(g, y)| g * 0.5 / y).collect();
                    accumulate(&mut grads, *a, &ga, &self.nodes);
                }
                Op::Softplus(a) => {
                    let x = &self.nodes[a.0].value;
                    let ga: Vec<f64> = g.iter().zip(x).map(|(g, x)| g * sigmoid(*x)).collect();
                    accumulate(&mut grads, *a, &ga, &self.nodes);
                }
                Op::Softmax { src, axis } => {
                    let (outer, len, inner) = split_axis(&node.shape, *axis);
                    let y = &node.value;
                    let mut ga = vec![0.0; y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * len + j) * inner + i;
                            let s: f64 = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                            for j in 0..len {
                                ga[idx(j)] = y[idx(j)] * (g[idx(j)] - s);
                            }
                        }
                    }
                    accumulate(&mut grads, *src, &ga, &self.nodes);
                }
                Op::SquaredL2(a) => {
                    let x = &self.nodes[a.0].value;
                    let ga: Vec<f64> = x.iter().map(|x| 2.0 * x * g[0]).collect();
                    accumulate(&mut grads, *a, &ga, &self.nodes);
                }
                Op::Bce { p, labels } => {
                    let x = &self.nodes[p.0].value;
                    let n = labels.len() as f64;
                    let ga: Vec<f64> = x
                        .iter()
                        .zip(labels)
                        .map(|(&p, &y)| {
                            if !(BCE_EPS..=1.0 - BCE_EPS).contains(&p) {
                                0.0
                            } else {
                                g[0] * (-y / p + (1.0 - y) / (1.0 - p)) / n
                            }
                        })
                        .collect();
                    accumulate(&mut grads, *p, &ga, &self.nodes);
                }
            }
        }

        let mut params = Vec::new();
        let mut leaves = Vec::new();
        for (i, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            match self.nodes[i].op {
                Op::Param(id) => params.push((id, g)),
                Op::Leaf { requires_grad: true } => leaves.push((Var(i), g)),
                _ => {}
            }
        }
        Ok(Gradients { params, leaves })
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Gradient of an elementwise (possibly broadcast) product with respect to
/// the operand whose length is `target_len`.
fn product_grad(g: &[f64], other: &[f64], target_len: usize) -> Vec<f64> {
    if target_len == g.len() {
        if other.len() == g.len() {
            g.iter().zip(other).map(|(g, o)| g * o).collect()
        } else {
            g.iter().map(|g| g * other[0]).collect()
        }
    } else {
        vec![dot(g, other)]
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64], nodes: &[Node]) {
    match &mut grads[v.0] {
        Some(buf) => {
            for (b, x) in buf.iter_mut().zip(g) {
                *b += x;
            }
        }
        slot @ None => {
            debug_assert_eq!(nodes[v.0].value.len(), g.len());
            *slot = Some(g.to_vec());
        }
    }
}

/// Result of [`Tape::backward`].
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    params: Vec<(ParamId, Vec<f64>)>,
    leaves: Vec<(Var, Vec<f64>)>,
}

impl Gradients {
    /// Gradient of a leaf created with [`Tape::variable`].
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.leaves.iter().find(|(l, _)| *l == v).map(|(_, g)| g.as_slice())
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g.as_slice())
    }

    /// Dense per-parameter gradients; parameters not on the tape get zeros.
    pub fn to_param_grads(&self, store: &ParamStore) -> ParamGrads {
        let mut out = ParamGrads::zeros_like(store);
        for (id, g) in &self.params {
            out.0[id.0].copy_from_slice(g);
        }
        out
    }
}
