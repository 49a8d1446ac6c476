use super::{as_matrix, gemm, MatRef, Tensor};
use crate::error::{dim_err, Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Pointwise nonlinearity used by the networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f32) -> f32 {
        match self {
            Activation::Identity => x,
            Activation::Gelu => {
                let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
                0.5 * x * (1.0 + t)
            }
        }
    }

    pub fn derivative(self, x: f32) -> f32 {
        match self {
            Activation::Identity => 1.0,
            Activation::Gelu => {
                let inner = GELU_C * (x + 0.044715 * x * x * x);
                let t = inner.tanh();
                let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
            }
        }
    }
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const LAYER_NORM_EPS: f32 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Max,
}

/// Vector-Jacobian rule for [`Graph::custom`]: receives the upstream
/// gradient and the input values, returns one gradient per input.
pub type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor]) -> Result<Vec<Tensor>>>;

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f32),
    Activate(Var, Activation),
    LayerNorm {
        x: Var,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    SoftmaxRows(Var),
    Reduce {
        x: Var,
        axis: usize,
        kind: Reduction,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Select {
        x: Var,
        axis: usize,
        indices: Vec<usize>,
    },
    BroadcastRows(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f32>,
    },
    Custom {
        inputs: Vec<Var>,
        backward: BackwardFn,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Dynamic tape. Ops append nodes in topological order; `backward` is
/// allowed once.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push_unchecked(t, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_unchecked(t, Op::Leaf, false)
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var], what: &str) -> Result<Var> {
        value.ensure_finite(what)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn check_finite(&self, v: Var, what: &str) -> Result<()> {
        self.value(v).ensure_finite(what)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b), &[a, b], "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        self.push(out, Op::Transpose(a), &[a], "transpose")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(dim_err!("add: {:?} vs {:?}", x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push(out, Op::Add(a, b), &[a, b], "add")
    }

    fn row_operand(&self, x: Var, row: Var, name: &str) -> Result<usize> {
        let cols = *self.shape(x).last().unwrap_or(&1);
        if self.value(row).len() != cols {
            return Err(dim_err!(
                "{name}: row vector of {} values against last extent {}",
                self.value(row).len(),
                cols
            ));
        }
        Ok(cols)
    }

    /// Adds a row vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let n = self.row_operand(x, row, "add_row")?;
        let r = self.value(row).data();
        let mut data = self.value(x).data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (d, b) in chunk.iter_mut().zip(r) {
                *d += b;
            }
        }
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push(out, Op::AddRow(x, row), &[x, row], "add_row")
    }

    /// Multiplies every row of `x` elementwise by a row vector.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let n = self.row_operand(x, row, "mul_row")?;
        let r = self.value(row).data();
        let mut data = self.value(x).data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (d, g) in chunk.iter_mut().zip(r) {
                *d *= g;
            }
        }
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push(out, Op::MulRow(x, row), &[x, row], "mul_row")
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * c).collect())?;
        self.push(out, Op::Scale(x, c), &[x], "scale")
    }

    pub fn activate(&mut self, x: Var, act: Activation) -> Result<Var> {
        if act == Activation::Identity {
            return Ok(x);
        }
        let t = self.value(x);
        let out = Tensor::new(
            t.shape().to_vec(),
            t.data().iter().map(|&v| act.apply(v)).collect(),
        )?;
        self.push(out, Op::Activate(x, act), &[x], "activation")
    }

    /// Normalizes each row (last axis) to zero mean and unit variance.
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = *t
            .shape()
            .last()
            .ok_or_else(|| dim_err!("layer_norm of a scalar"))?;
        let rows = t.len() / n.max(1);
        let mut xhat = vec![0.0; t.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &t.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f32>() / n as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n as f32;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = s;
            for (o, v) in xhat[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = (v - mean) * s;
            }
        }
        let out = Tensor::new(t.shape().to_vec(), xhat.clone())?;
        self.push(out, Op::LayerNorm { x, xhat, rstd }, &[x], "layer_norm")
    }

    /// Row-wise softmax stabilized by subtracting the row maximum.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.check_finite(x, "softmax input")?;
        let out = softmax_rows(self.value(x))?;
        self.push(out, Op::SoftmaxRows(x), &[x], "softmax_rows")
    }

    /// Mean or max along `axis`; the axis is removed from the shape.
    pub fn reduce(&mut self, x: Var, axis: usize, kind: Reduction) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.ndim() {
            return Err(dim_err!(
                "reduce axis {} out of range for {:?}",
                axis,
                t.shape()
            ));
        }
        let (outer, len, inner) = split_axis(t.shape(), axis);
        if len == 0 {
            return Err(dim_err!("reduce over an empty axis"));
        }
        let mut out = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        let src = t.data();
        match kind {
            Reduction::Mean => {
                for o in 0..outer {
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        for i in 0..inner {
                            out[o * inner + i] += src[base + i];
                        }
                    }
                }
                let inv = 1.0 / len as f32;
                out.iter_mut().for_each(|v| *v *= inv);
            }
            Reduction::Max => {
                argmax = vec![0; outer * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut best = f32::NEG_INFINITY;
                        let mut arg = 0;
                        for l in 0..len {
                            let v = src[(o * len + l) * inner + i];
                            if v > best {
                                best = v;
                                arg = l;
                            }
                        }
                        out[o * inner + i] = best;
                        argmax[o * inner + i] = arg;
                    }
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let out = Tensor::new(shape, out)?;
        self.push(
            out,
            Op::Reduce {
                x,
                axis,
                kind,
                argmax,
            },
            &[x],
            "reduce",
        )
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push(out, Op::Reshape(x), &[x], "reshape")
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| dim_err!("concat of nothing"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(dim_err!("concat axis {} out of range for {:?}", axis, base));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(dim_err!("concat: {:?} incompatible with {:?}", s, base));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(shape, data)?;
        self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
            "concat",
        )
    }

    /// Gathers entries along `axis` by an index list (repeats allowed).
    pub fn select(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.ndim() {
            return Err(dim_err!(
                "select axis {} out of range for {:?}",
                axis,
                t.shape()
            ));
        }
        let (outer, len, inner) = split_axis(t.shape(), axis);
        if let Some(bad) = indices.iter().find(|&&i| i >= len) {
            return Err(Error::Index(format!(
                "select index {bad} out of range {len}"
            )));
        }
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let start = (o * len + i) * inner;
                data.extend_from_slice(&t.data()[start..start + inner]);
            }
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = indices.len();
        let out = Tensor::new(shape, data)?;
        self.push(
            out,
            Op::Select {
                x,
                axis,
                indices: indices.to_vec(),
            },
            &[x],
            "select",
        )
    }

    /// Repeats a row vector `m` times into an `m×n` matrix.
    pub fn broadcast_rows(&mut self, row: Var, m: usize) -> Result<Var> {
        let r = self.value(row);
        let n = r.len();
        let mut data = Vec::with_capacity(m * n);
        for _ in 0..m {
            data.extend_from_slice(r.data());
        }
        let out = Tensor::new(vec![m, n], data)?;
        self.push(out, Op::BroadcastRows(row), &[row], "broadcast_rows")
    }

    /// Mean negative log-likelihood of `labels` under row-softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (b, classes) = as_matrix(t)?;
        if labels.len() != b {
            return Err(dim_err!("{} labels for {} rows", labels.len(), b));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Index(format!("label {bad} out of range {classes}")));
        }
        self.check_finite(logits, "cross_entropy input")?;
        let probs = softmax_rows(t)?.into_data();
        let mut loss = 0.0f64;
        for (r, &l) in labels.iter().enumerate() {
            let row = t.row(r);
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let lse = max as f64
                + row
                    .iter()
                    .map(|&v| ((v - max) as f64).exp())
                    .sum::<f64>()
                    .ln();
            loss += lse - row[l] as f64;
        }
        let out = Tensor::scalar((loss / b as f64) as f32);
        self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
            "cross_entropy",
        )
    }

    /// Records a node whose forward value is supplied directly and whose
    /// backward pass is the given vector-Jacobian rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: BackwardFn) -> Result<Var> {
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
            inputs,
            "custom node",
        )
    }

    /// Reverse pass seeded with 1 at the scalar `output`.
    pub fn backward(&mut self, output: Var) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return Err(dim_err!(
                "backward needs a scalar output, got {:?}",
                self.shape(output)
            ));
        }
        let seed = Tensor::full(self.shape(output).to_vec(), 1.0);
        self.backward_with(output, seed)
    }

    /// Reverse pass seeded with an explicit upstream gradient.
    pub fn backward_with(&mut self, output: Var, seed: Tensor) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Tape("backward already ran on this graph".into()));
        }
        if seed.shape() != self.shape(output) {
            return Err(dim_err!(
                "seed gradient {:?} for output {:?}",
                seed.shape(),
                self.shape(output)
            ));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.propagate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| &nodes[v.0].value;
        match &nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = as_matrix(val(*a))?;
                let n = val(*b).shape()[1];
                if needs(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(
                        m,
                        n,
                        k,
                        MatRef::row_major(g.data(), n),
                        MatRef::transposed(val(*b).data(), n),
                        &mut ga,
                        false,
                    );
                    accumulate(grads, *a, val(*a).shape(), ga);
                }
                if needs(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(
                        k,
                        m,
                        n,
                        MatRef::transposed(val(*a).data(), k),
                        MatRef::row_major(g.data(), n),
                        &mut gb,
                        false,
                    );
                    accumulate(grads, *b, val(*b).shape(), gb);
                }
            }
            Op::Transpose(a) => {
                if needs(*a) {
                    let gt = g.transpose()?;
                    accumulate(grads, *a, val(*a).shape(), gt.into_data());
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if needs(v) {
                        accumulate(grads, v, val(v).shape(), g.data().to_vec());
                    }
                }
            }
            Op::AddRow(x, row) => {
                if needs(*x) {
                    accumulate(grads, *x, val(*x).shape(), g.data().to_vec());
                }
                if needs(*row) {
                    let n = val(*row).len();
                    let mut gr = vec![0.0; n];
                    for chunk in g.data().chunks(n) {
                        for (o, v) in gr.iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                    accumulate(grads, *row, val(*row).shape(), gr);
                }
            }
            Op::MulRow(x, row) => {
                let r = val(*row).data();
                let n = r.len();
                if needs(*x) {
                    let mut gx = g.data().to_vec();
                    for chunk in gx.chunks_mut(n) {
                        for (o, s) in chunk.iter_mut().zip(r) {
                            *o *= s;
                        }
                    }
                    accumulate(grads, *x, val(*x).shape(), gx);
                }
                if needs(*row) {
                    let mut gr = vec![0.0; n];
                    for (gc, xc) in g.data().chunks(n).zip(val(*x).data().chunks(n)) {
                        for j in 0..n {
                            gr[j] += gc[j] * xc[j];
                        }
                    }
                    accumulate(grads, *row, val(*row).shape(), gr);
                }
            }
            Op::Scale(x, c) => {
                if needs(*x) {
                    let gx = g.data().iter().map(|v| v * c).collect();
                    accumulate(grads, *x, val(*x).shape(), gx);
                }
            }
            Op::Activate(x, act) => {
                if needs(*x) {
                    let gx = g
                        .data()
                        .iter()
                        .zip(val(*x).data())
                        .map(|(gv, &xv)| gv * act.derivative(xv))
                        .collect();
                    accumulate(grads, *x, val(*x).shape(), gx);
                }
            }
            Op::LayerNorm { x, xhat, rstd } => {
                if needs(*x) {
                    let n = *val(*x).shape().last().unwrap();
                    let mut gx = vec![0.0; g.len()];
                    for (r, s) in rstd.iter().enumerate() {
                        let gr = &g.data()[r * n..(r + 1) * n];
                        let xr = &xhat[r * n..(r + 1) * n];
                        let mean_g = gr.iter().sum::<f32>() / n as f32;
                        let mean_gx = gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f32>() / n as f32;
                        for j in 0..n {
                            gx[r * n + j] = s * (gr[j] - mean_g - xr[j] * mean_gx);
                        }
                    }
                    accumulate(grads, *x, val(*x).shape(), gx);
                }
            }
            Op::SoftmaxRows(x) => {
                if needs(*x) {
                    let y = &nodes[id].value;
                    let n = y.cols();
                    let mut gx = vec![0.0; y.len()];
                    for r in 0..y.rows() {
                        let yr = &y.data()[r * n..(r + 1) * n];
                        let gr = &g.data()[r * n..(r + 1) * n];
                        let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            gx[r * n + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(grads, *x, val(*x).shape(), gx);
                }
            }
            Op::Reduce {
                x,
                axis,
                kind,
                argmax,
            } => {
                if needs(*x) {
                    let (outer, len, inner) = split_axis(val(*x).shape(), *axis);
                    let mut gx = vec![0.0; val(*x).len()];
                    match kind {
                        Reduction::Mean => {
                            let inv = 1.0 / len as f32;
                            for o in 0..outer {
                                for l in 0..len {
                                    for i in 0..inner {
                                        gx[(o * len + l) * inner + i] =
                                            g.data()[o * inner + i] * inv;
                                    }
                                }
                            }
                        }
                        Reduction::Max => {
                            for o in 0..outer {
                                for i in 0..inner {
                                    let l = argmax[o * inner + i];
                                    gx[(o * len + l) * inner + i] = g.data()[o * inner + i];
                                }
                            }
                        }
                    }
                    accumulate(grads, *x, val(*x).shape(), gx);
                }
            }
            Op::Reshape(x) => {
                if needs(*x) {
                    accumulate(grads, *x, val(*x).shape(), g.data().to_vec());
                }
            }
            Op::Concat { inputs, axis } => {
                let shape = nodes[id].value.shape();
                let (outer, total, inner) = split_axis(shape, *axis);
                let mut offset = 0;
                for v in inputs {
                    let len = val(*v).shape()[*axis];
                    if needs(*v) {
                        let mut gv = Vec::with_capacity(val(*v).len());
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            gv.extend_from_slice(&g.data()[start..start + len * inner]);
                        }
                        accumulate(grads, *v, val(*v).shape(), gv);
                    }
                    offset += len;
                }
            }
            Op::Select { x, axis, indices } => {
                if needs(*x) {
                    let (outer, len, inner) = split_axis(val(*x).shape(), *axis);
                    let k = indices.len();
                    let mut gx = vec![0.0; val(*x).len()];
                    for o in 0..outer {
                        for (j, &i) in indices.iter().enumerate() {
                            let src = (o * k + j) * inner;
                            let dst = (o * len + i) * inner;
                            for t in 0..inner {
                                gx[dst + t] += g.data()[src + t];
                            }
                        }
                    }
                    accumulate(grads, *x, val(*x).shape(), gx);
                }
            }
            Op::BroadcastRows(row) => {
                if needs(*row) {
                    let n = val(*row).len();
                    let mut gr = vec![0.0; n];
                    for chunk in g.data().chunks(n) {
                        for (o, v) in gr.iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                    accumulate(grads, *row, val(*row).shape(), gr);
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if needs(*logits) {
                    let b = labels.len();
                    let classes = probs.len() / b;
                    let scale = g.data()[0] / b as f32;
                    let mut gl = probs.clone();
                    for (r, &l) in labels.iter().enumerate() {
                        gl[r * classes + l] -= 1.0;
                    }
                    gl.iter_mut().for_each(|v| *v *= scale);
                    accumulate(grads, *logits, val(*logits).shape(), gl);
                }
            }
            Op::Custom { inputs, backward } => {
                let values: Vec<&Tensor> = inputs.iter().map(|v| val(*v)).collect();
                let out = backward(g, &values)?;
                if out.len() != inputs.len() {
                    return Err(dim_err!(
                        "custom backward returned {} gradients for {} inputs",
                        out.len(),
                        inputs.len()
                    ));
                }
                for (v, gv) in inputs.iter().zip(out) {
                    if gv.shape() != val(*v).shape() {
                        return Err(dim_err!(
                            "custom backward gradient {:?} for input {:?}",
                            gv.shape(),
                            val(*v).shape()
                        ));
                    }
                    if needs(*v) {
                        accumulate(grads, *v, val(*v).shape(), gv.into_data());
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], data: Vec<f32>) {
    match &mut grads[v.0] {
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(&data) {
                *a += b;
            }
        }
        slot @ None => {
            *slot = Some(Tensor {
                shape: shape.to_vec(),
                data,
            });
        }
    }
}

/// Untaped row-wise softmax.
pub(crate) fn softmax_rows(t: &Tensor) -> Result<Tensor> {
    let n = t.cols();
    let mut out = t.data().to_vec();
    if n == 0 {
        return Ok(t.clone());
    }
    for row in out.chunks_mut(n) {
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        row.iter_mut().for_each(|v| *v *= inv);
    }
    Tensor::new(t.shape().to_vec(), out)
}
