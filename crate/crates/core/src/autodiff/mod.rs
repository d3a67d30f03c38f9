//! Minimal reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its output
//! value and enough saved state to run its backward rule. Nodes can only
//! refer to earlier nodes, so the node order is a topological order and
//! [`Graph::backward`] simply walks it in reverse.
//!
//! Matrix operations work on `[rows, cols]` tensors. Bias vectors may be
//! `[n]` or `[1, n]`; adding one to a `[m, n]` matrix is the only broadcast.

mod gradcheck;
mod params;
mod tensor;

pub use gradcheck::{check_input_gradient, check_param_gradients, FdOptions, FdReport};
pub use params::{ParamStore, Params};
pub use tensor::{Real, Tensor};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub const LAYER_NORM_EPS: f64 = 1e-12;

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

#[derive(Debug, Error, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: index {index} out of range for size {bound}")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{op}: {msg}")]
    Contract { op: &'static str, msg: String },
    #[error("tensor shape {shape:?} does not match {len} values")]
    BadTensor { shape: Vec<usize>, len: usize },
}

type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<R> {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, R),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Transpose(Var),
    Gather { table: Var, ids: Vec<usize> },
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<R>, rstd: Vec<R> },
    Gelu(Var),
    Tanh(Var),
    Relu(Var),
    Sigmoid(Var),
    Dropout { input: Var, mask: Vec<R> },
    CrossEntropy { logits: Var, probs: Vec<R>, targets: Vec<Option<usize>> },
    SumAll(Var),
    MeanAll(Var),
    SumRows(Var),
    MaxRows { input: Var, argmax: Vec<usize> },
    Custom { inputs: Vec<Var>, grads: Vec<Tensor<R>> },
}

#[derive(Debug)]
struct Node<R> {
    value: Tensor<R>,
    op: Op<R>,
    needs_grad: bool,
}

/// Computation tape.
#[derive(Debug)]
pub struct Graph<R: Real = f32> {
    nodes: Vec<Node<R>>,
    rng: Option<ChaCha8Rng>,
}

impl<R: Real> Default for Graph<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Graph<R> {
    /// A graph in evaluation mode: dropout is the identity.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            rng: None,
        }
    }

    /// A graph in training mode whose dropout masks come from `seed`.
    pub fn training(seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor<R>) -> Var {
        self.push_node(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor<R>) -> Var {
        self.push_node(value, Op::Constant, false)
    }

    fn push_node(&mut self, value: Tensor<R>, op: Op<R>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push_node(value, op, needs_grad)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        match s.len() {
            2 => Ok((s[0], s[1])),
            1 => Ok((1, s[0])),
            _ => Err(AutodiffError::Shape {
                op,
                left: s.to_vec(),
                right: vec![],
            }),
        }
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> AutodiffError {
        AutodiffError::Shape {
            op,
            left: self.shape(a).to_vec(),
            right: self.shape(b).to_vec(),
        }
    }

    fn map(&mut self, a: Var, op: Op<R>, f: impl Fn(R) -> R) -> Var {
        let x = &self.nodes[a.0].value;
        let value = Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
            .expect("same shape");
        self.push(value, op, &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let mut out = vec![R::zero(); m * n];
        kernels::matmul(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// Elementwise sum, or a row-wise bias add when `b` is `[n]` / `[1, n]`
    /// and `a` is `[m, n]`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) == self.shape(b) {
            let value = zip_values(self.value(a), self.value(b), |x, y| x + y);
            return Ok(self.push(value, Op::Add(a, b), &[a, b]));
        }
        let (m, n) = self.dims2(a, "add")?;
        let bias = self.value(b);
        let is_bias = bias.numel() == n && (bias.shape().len() == 1 || bias.shape()[0] == 1);
        if !is_bias || self.shape(a).len() != 2 {
            return Err(self.shape_err("add", a, b));
        }
        let mut out = self.value(a).data().to_vec();
        let bias = self.value(b).data();
        for r in 0..m {
            for (o, &bv) in out[r * n..(r + 1) * n].iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::AddBias(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("sub", a, b));
        }
        let value = zip_values(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("mul", a, b));
        }
        let value = zip_values(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: R) -> Var {
        self.map(a, Op::Scale(a, factor), |x| x * factor)
    }

    /// Concatenates matrices along axis 0 (rows) or 1 (columns).
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| AutodiffError::Contract {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        if axis > 1 {
            return Err(AutodiffError::Contract {
                op: "concat",
                msg: format!("axis {axis} not supported"),
            });
        }
        let (m0, n0) = self.dims2(first, "concat")?;
        let mut dims = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let (m, n) = self.dims2(v, "concat")?;
            if (axis == 0 && n != n0) || (axis == 1 && m != m0) {
                return Err(self.shape_err("concat", first, v));
            }
            dims.push((m, n));
        }
        let value = if axis == 0 {
            let rows: usize = dims.iter().map(|d| d.0).sum();
            let mut data = Vec::with_capacity(rows * n0);
            for &v in inputs {
                data.extend_from_slice(self.value(v).data());
            }
            Tensor::new(vec![rows, n0], data)?
        } else {
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut data = Vec::with_capacity(m0 * cols);
            for r in 0..m0 {
                for (&v, &(_, n)) in inputs.iter().zip(&dims) {
                    data.extend_from_slice(&self.value(v).data()[r * n..(r + 1) * n]);
                }
            }
            Tensor::new(vec![m0, cols], data)?
        };
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    /// Rows (axis 0) or columns (axis 1) `start..start + len` of a matrix.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(a, "slice")?;
        let bound = if axis == 0 { m } else { n };
        if axis > 1 || len == 0 || start + len > bound {
            return Err(AutodiffError::Index {
                op: "slice",
                index: start + len,
                bound,
            });
        }
        let src = self.value(a).data();
        let (shape, data) = if axis == 0 {
            (vec![len, n], src[start * n..(start + len) * n].to_vec())
        } else {
            let mut d = Vec::with_capacity(m * len);
            for r in 0..m {
                d.extend_from_slice(&src[r * n + start..r * n + start + len]);
            }
            (vec![m, len], d)
        };
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Slice { input: a, axis, start }, &[a]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "transpose")?;
        let src = self.value(a).data();
        let mut data = vec![R::zero(); m * n];
        for r in 0..m {
            for c in 0..n {
                data[c * m + r] = src[r * n + c];
            }
        }
        let value = Tensor::new(vec![n, m], data)?;
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    /// Gathers rows of `table` (`[V, H]`) into a `[ids.len(), H]` matrix.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, h) = self.dims2(table, "embedding_lookup")?;
        if ids.is_empty() {
            return Err(AutodiffError::Contract {
                op: "embedding_lookup",
                msg: "no ids".into(),
            });
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * h);
        for &id in ids {
            if id >= v {
                return Err(AutodiffError::Index {
                    op: "embedding_lookup",
                    index: id,
                    bound: v,
                });
            }
            data.extend_from_slice(&src[id * h..(id + 1) * h]);
        }
        let value = Tensor::new(vec![ids.len(), h], data)?;
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (_, n) = self.dims2(a, "softmax")?;
        self.masked_softmax(a, n)
    }

    /// Row-wise softmax where columns `valid..` get exactly zero mass.
    pub fn masked_softmax(&mut self, a: Var, valid: usize) -> Result<Var> {
        let (m, n) = self.dims2(a, "softmax")?;
        if valid == 0 || valid > n {
            return Err(AutodiffError::Index {
                op: "softmax",
                index: valid,
                bound: n,
            });
        }
        let src = self.value(a).data();
        let mut data = vec![R::zero(); m * n];
        for r in 0..m {
            kernels::softmax_into(&src[r * n..r * n + valid], &mut data[r * n..r * n + valid]);
        }
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Softmax(a), &[a]))
    }

    /// Normalizes each row to zero mean and unit variance, then applies the
    /// gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "layer_norm")?;
        if self.value(gain).numel() != n {
            return Err(self.shape_err("layer_norm", x, gain));
        }
        if self.value(bias).numel() != n {
            return Err(self.shape_err("layer_norm", x, bias));
        }
        let eps = R::c(LAYER_NORM_EPS);
        let nf = R::c(n as f64);
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = vec![R::zero(); m * n];
        let mut xhat = vec![R::zero(); m * n];
        let mut rstd = vec![R::zero(); m];
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<R>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<R>() / nf;
            let rs = R::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Gaussian error linear unit, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, Op::Gelu(a), |x| {
            let k = R::c(GELU_K);
            let c = R::c(GELU_C);
            R::c(0.5) * x * (R::one() + (k * (x + c * x * x * x)).tanh())
        })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), |x| x.tanh())
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| if x > R::zero() { x } else { R::zero() })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), |x| R::one() / (R::one() + (-x).exp()))
    }

    /// Inverted dropout in training mode, identity otherwise.
    pub fn dropout(&mut self, a: Var, p: f64) -> Var {
        let Some(rng) = self.rng.as_mut() else {
            return a;
        };
        if p <= 0.0 {
            return a;
        }
        let keep = R::c(1.0 / (1.0 - p));
        let n = self.nodes[a.0].value.numel();
        let mask: Vec<R> = (0..n)
            .map(|_| if rng.random::<f64>() < p { R::zero() } else { keep })
            .collect();
        let x = &self.nodes[a.0].value;
        let value = Tensor::new(
            x.shape().to_vec(),
            x.data().iter().zip(&mask).map(|(&v, &k)| v * k).collect(),
        )
        .expect("same shape");
        self.push(value, Op::Dropout { input: a, mask }, &[a])
    }

    /// Mean cross-entropy of row-wise softmax(`logits`) against `targets`;
    /// `None` rows are ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (m, n) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != m {
            return Err(AutodiffError::Shape {
                op: "cross_entropy",
                left: self.shape(logits).to_vec(),
                right: vec![targets.len()],
            });
        }
        let active = targets.iter().filter(|t| t.is_some()).count();
        if active == 0 {
            return Err(AutodiffError::Contract {
                op: "cross_entropy",
                msg: "every target is ignored".into(),
            });
        }
        let src = self.value(logits).data();
        let mut probs = vec![R::zero(); m * n];
        let mut loss = R::zero();
        for (r, t) in targets.iter().enumerate() {
            let row = &src[r * n..(r + 1) * n];
            kernels::softmax_into(row, &mut probs[r * n..(r + 1) * n]);
            if let Some(t) = *t {
                if t >= n {
                    return Err(AutodiffError::Index {
                        op: "cross_entropy",
                        index: t,
                        bound: n,
                    });
                }
                loss += kernels::logsumexp(row) - row[t];
            }
        }
        let value = Tensor::scalar(loss / R::c(active as f64));
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = x.data().iter().copied().sum::<R>() / R::c(x.numel() as f64);
        self.push(Tensor::scalar(s), Op::MeanAll(a), &[a])
    }

    /// Column sums of a matrix, as `[1, n]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "sum_rows")?;
        let src = self.value(a).data();
        let mut out = vec![R::zero(); n];
        for r in 0..m {
            for (o, &v) in out.iter_mut().zip(&src[r * n..(r + 1) * n]) {
                *o += v;
            }
        }
        let value = Tensor::new(vec![1, n], out)?;
        Ok(self.push(value, Op::SumRows(a), &[a]))
    }

    /// Column sums taken in ascending value order, so the result does not
    /// depend on the order of the rows.
    pub fn sum_rows_sorted(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "sum_rows_sorted")?;
        let src = self.value(a).data();
        let mut col = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(n);
        for c in 0..n {
            col.clear();
            col.extend((0..m).map(|r| src[r * n + c]));
            col.sort_by(|x, y| x.partial_cmp(y).unwrap_or(std::cmp::Ordering::Equal));
            out.push(col.iter().fold(R::zero(), |acc, &v| acc + v));
        }
        let value = Tensor::new(vec![1, n], out)?;
        Ok(self.push(value, Op::SumRows(a), &[a]))
    }

    /// Column maxima of a matrix, as `[1, n]`; ties go to the first row.
    pub fn max_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "max_rows")?;
        let src = self.value(a).data();
        let mut out = src[..n].to_vec();
        let mut argmax = vec![0usize; n];
        for r in 1..m {
            for c in 0..n {
                if src[r * n + c] > out[c] {
                    out[c] = src[r * n + c];
                    argmax[c] = r;
                }
            }
        }
        let value = Tensor::new(vec![1, n], out)?;
        Ok(self.push(value, Op::MaxRows { input: a, argmax }, &[a]))
    }

    /// A scalar computed outside the tape whose gradient with respect to
    /// each input has already been worked out.
    pub fn custom_scalar(&mut self, inputs: &[Var], value: R, grads: Vec<Tensor<R>>) -> Result<Var> {
        if inputs.len() != grads.len() {
            return Err(AutodiffError::Contract {
                op: "custom_scalar",
                msg: format!("{} inputs but {} gradients", inputs.len(), grads.len()),
            });
        }
        for (&v, g) in inputs.iter().zip(&grads) {
            if self.shape(v) != g.shape() {
                return Err(AutodiffError::Shape {
                    op: "custom_scalar",
                    left: self.shape(v).to_vec(),
                    right: g.shape().to_vec(),
                });
            }
        }
        Ok(self.push(
            Tensor::scalar(value),
            Op::Custom {
                inputs: inputs.to_vec(),
                grads,
            },
            inputs,
        ))
    }

    /// Back-propagates from a scalar `loss`. Gradients of nodes used more
    /// than once are summed.
    pub fn backward(&self, loss: Var) -> Result<Gradients<R>> {
        let shape = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(AutodiffError::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<R>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![R::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| match n.op {
                Op::Leaf => g.map(|d| Tensor::new(n.value.shape().to_vec(), d).expect("leaf shape")),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node<R>, g: &[R], grads: &mut [Option<Vec<R>>]) {
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        let val = |v: Var| self.nodes[v.0].value.data();
        let out = node.value.data();
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(*a, "").expect("2d");
                let n = self.dims2(*b, "").expect("2d").1;
                if needs(*a) {
                    let mut ga = vec![R::zero(); m * k];
                    kernels::matmul_nt(g, val(*b), &mut ga, m, n, k);
                    accumulate(grads, *a, &ga);
                }
                if needs(*b) {
                    let mut gb = vec![R::zero(); k * n];
                    kernels::matmul_tn(val(*a), g, &mut gb, m, k, n);
                    accumulate(grads, *b, &gb);
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g);
                }
                if needs(*b) {
                    accumulate(grads, *b, g);
                }
            }
            Op::AddBias(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g);
                }
                if needs(*b) {
                    let n = self.value(*b).numel();
                    let mut gb = vec![R::zero(); n];
                    for row in g.chunks(n) {
                        for (o, &v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    accumulate(grads, *b, &gb);
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g);
                }
                if needs(*b) {
                    let neg: Vec<R> = g.iter().map(|&x| -x).collect();
                    accumulate(grads, *b, &neg);
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let ga: Vec<R> = g.iter().zip(val(*b)).map(|(&x, &y)| x * y).collect();
                    accumulate(grads, *a, &ga);
                }
                if needs(*b) {
                    let gb: Vec<R> = g.iter().zip(val(*a)).map(|(&x, &y)| x * y).collect();
                    accumulate(grads, *b, &gb);
                }
            }
            Op::Scale(a, f) => {
                let ga: Vec<R> = g.iter().map(|&x| x * *f).collect();
                accumulate(grads, *a, &ga);
            }
            Op::Concat { inputs, axis } => {
                let cols = node.value.cols();
                let mut offset = 0;
                for &v in inputs {
                    let (m, n) = self.dims2(v, "").expect("2d");
                    if needs(v) {
                        let gv: Vec<R> = if *axis == 0 {
                            g[offset * cols..(offset + m) * cols].to_vec()
                        } else {
                            (0..m)
                                .flat_map(|r| g[r * cols + offset..r * cols + offset + n].iter().copied())
                                .collect()
                        };
                        accumulate(grads, v, &gv);
                    }
                    offset += if *axis == 0 { m } else { n };
                }
            }
            Op::Slice { input, axis, start } => {
                let (m, n) = self.dims2(*input, "").expect("2d");
                let mut gi = vec![R::zero(); m * n];
                let cols = node.value.cols();
                if *axis == 0 {
                    gi[start * n..start * n + g.len()].copy_from_slice(g);
                } else {
                    for r in 0..m {
                        gi[r * n + start..r * n + start + cols].copy_from_slice(&g[r * cols..(r + 1) * cols]);
                    }
                }
                accumulate(grads, *input, &gi);
            }
            Op::Transpose(a) => {
                let (m, n) = self.dims2(*a, "").expect("2d");
                let mut ga = vec![R::zero(); m * n];
                for r in 0..m {
                    for c in 0..n {
                        ga[r * n + c] = g[c * m + r];
                    }
                }
                accumulate(grads, *a, &ga);
            }
            Op::Gather { table, ids } => {
                let t = self.value(*table);
                let h = t.cols();
                let slot = grads[table.0].get_or_insert_with(|| vec![R::zero(); t.numel()]);
                for (r, &id) in ids.iter().enumerate() {
                    for (o, &v) in slot[id * h..(id + 1) * h].iter_mut().zip(&g[r * h..(r + 1) * h]) {
                        *o += v;
                    }
                }
            }
            Op::Softmax(a) => {
                let n = node.value.cols();
                let mut ga = vec![R::zero(); out.len()];
                for ((gr, yr), or) in g.chunks(n).zip(out.chunks(n)).zip(ga.chunks_mut(n)) {
                    let dot: R = gr.iter().zip(yr).map(|(&x, &y)| x * y).sum();
                    for ((o, &x), &y) in or.iter_mut().zip(gr).zip(yr) {
                        *o = y * (x - dot);
                    }
                }
                accumulate(grads, *a, &ga);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = node.value.cols();
                let gv = val(*gain);
                if needs(*gain) || needs(*bias) {
                    let mut gg = vec![R::zero(); n];
                    let mut gb = vec![R::zero(); n];
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for c in 0..n {
                            gg[c] += gr[c] * hr[c];
                            gb[c] += gr[c];
                        }
                    }
                    if needs(*gain) {
                        accumulate(grads, *gain, &gg);
                    }
                    if needs(*bias) {
                        accumulate(grads, *bias, &gb);
                    }
                }
                if needs(*x) {
                    let nf = R::c(n as f64);
                    let mut gx = vec![R::zero(); g.len()];
                    for (r, ((gr, hr), or)) in g.chunks(n).zip(xhat.chunks(n)).zip(gx.chunks_mut(n)).enumerate() {
                        let mut mean_g = R::zero();
                        let mut mean_gh = R::zero();
                        for c in 0..n {
                            let gh = gr[c] * gv[c];
                            mean_g += gh;
                            mean_gh += gh * hr[c];
                        }
                        mean_g = mean_g / nf;
                        mean_gh = mean_gh / nf;
                        for c in 0..n {
                            or[c] = rstd[r] * (gr[c] * gv[c] - mean_g - hr[c] * mean_gh);
                        }
                    }
                    accumulate(grads, *x, &gx);
                }
            }
            Op::Gelu(a) => {
                let k = R::c(GELU_K);
                let c = R::c(GELU_C);
                let half = R::c(0.5);
                let ga: Vec<R> = g
                    .iter()
                    .zip(val(*a))
                    .map(|(&gy, &x)| {
                        let t = (k * (x + c * x * x * x)).tanh();
                        let d = half * (R::one() + t)
                            + half * x * (R::one() - t * t) * k * (R::one() + R::c(3.0) * c * x * x);
                        gy * d
                    })
                    .collect();
                accumulate(grads, *a, &ga);
            }
            Op::Tanh(a) => {
                let ga: Vec<R> = g.iter().zip(out).map(|(&gy, &y)| gy * (R::one() - y * y)).collect();
                accumulate(grads, *a, &ga);
            }
            Op::Relu(a) => {
                let ga: Vec<R> = g
                    .iter()
                    .zip(val(*a))
                    .map(|(&gy, &x)| if x > R::zero() { gy } else { R::zero() })
                    .collect();
                accumulate(grads, *a, &ga);
            }
            Op::Sigmoid(a) => {
                let ga: Vec<R> = g.iter().zip(out).map(|(&gy, &y)| gy * y * (R::one() - y)).collect();
                accumulate(grads, *a, &ga);
            }
            Op::Dropout { input, mask } => {
                let ga: Vec<R> = g.iter().zip(mask).map(|(&gy, &k)| gy * k).collect();
                accumulate(grads, *input, &ga);
            }
            Op::CrossEntropy {
                logits,
                probs,
                targets,
            } => {
                let n = self.value(*logits).cols();
                let active = targets.iter().filter(|t| t.is_some()).count();
                let scale = g[0] / R::c(active as f64);
                let mut gl = vec![R::zero(); probs.len()];
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    for c in 0..n {
                        gl[r * n + c] = probs[r * n + c] * scale;
                    }
                    gl[r * n + t] -= scale;
                }
                accumulate(grads, *logits, &gl);
            }
            Op::SumAll(a) => {
                let ga = vec![g[0]; self.value(*a).numel()];
                accumulate(grads, *a, &ga);
            }
            Op::MeanAll(a) => {
                let n = self.value(*a).numel();
                let ga = vec![g[0] / R::c(n as f64); n];
                accumulate(grads, *a, &ga);
            }
            Op::SumRows(a) => {
                let (m, _) = self.dims2(*a, "").expect("2d");
                let ga: Vec<R> = (0..m).flat_map(|_| g.iter().copied()).collect();
                accumulate(grads, *a, &ga);
            }
            Op::MaxRows { input, argmax } => {
                let x = self.value(*input);
                let n = x.cols();
                let mut ga = vec![R::zero(); x.numel()];
                for (c, &r) in argmax.iter().enumerate() {
                    ga[r * n + c] = g[c];
                }
                accumulate(grads, *input, &ga);
            }
            Op::Custom { inputs, grads: local } => {
                for (&v, lg) in inputs.iter().zip(local) {
                    if needs(v) {
                        let gv: Vec<R> = lg.data().iter().map(|&x| x * g[0]).collect();
                        accumulate(grads, v, &gv);
                    }
                }
            }
        }
    }
}

fn zip_values<R: Real>(a: &Tensor<R>, b: &Tensor<R>, f: impl Fn(R, R) -> R) -> Tensor<R> {
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
    .expect("same shape")
}

fn accumulate<R: Real>(grads: &mut [Option<Vec<R>>], v: Var, g: &[R]) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, &x) in acc.iter_mut().zip(g) {
                *a += x;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

/// Gradients of the leaves of a graph.
#[derive(Debug)]
pub struct Gradients<R> {
    grads: Vec<Option<Tensor<R>>>,
}

impl<R: Real> Gradients<R> {
    /// Gradient of a leaf; `None` when no path connects it to the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<R>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a leaf, zero when it did not influence the loss.
    pub fn get_or_zero(&self, graph: &Graph<R>, v: Var) -> Tensor<R> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(graph.shape(v)))
    }

    /// Gradients for every bound parameter, keyed like the store.
    pub fn params(&self, graph: &Graph<R>, params: &Params) -> ParamStore<R> {
        let mut out = ParamStore::new();
        for (name, &v) in params.iter() {
            out.insert(name.clone(), self.get_or_zero(graph, v));
        }
        out
    }
}

pub(crate) mod kernels {
    use super::Real;

    /// `out += a[m,k] * b[k,n]`
    pub fn matmul<R: Real>(a: &[R], b: &[R], out: &mut [R], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                if av == R::zero() {
                    continue;
                }
                for (o, &bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                    *o += av * bv;
                }
            }
        }
    }

    /// `out += g[m,n] * b[k,n]^T`, giving `[m,k]`.
    pub fn matmul_nt<R: Real>(g: &[R], b: &[R], out: &mut [R], m: usize, n: usize, k: usize) {
        for i in 0..m {
            let grow = &g[i * n..(i + 1) * n];
            for p in 0..k {
                let brow = &b[p * n..(p + 1) * n];
                let mut s = R::zero();
                for (&x, &y) in grow.iter().zip(brow) {
                    s += x * y;
                }
                out[i * k + p] += s;
            }
        }
    }

    /// `out += a[m,k]^T * g[m,n]`, giving `[k,n]`.
    pub fn matmul_tn<R: Real>(a: &[R], g: &[R], out: &mut [R], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let grow = &g[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                if av == R::zero() {
                    continue;
                }
                for (o, &gv) in out[p * n..(p + 1) * n].iter_mut().zip(grow) {
                    *o += av * gv;
                }
            }
        }
    }

    pub fn logsumexp<R: Real>(row: &[R]) -> R {
        let max = row.iter().copied().fold(R::neg_infinity(), R::max);
        if max == R::neg_infinity() {
            return max;
        }
        max + row.iter().map(|&x| (x - max).exp()).sum::<R>().ln()
    }

    pub fn softmax_into<R: Real>(row: &[R], out: &mut [R]) {
        let max = row.iter().copied().fold(R::neg_infinity(), R::max);
        let mut total = R::zero();
        for (o, &x) in out.iter_mut().zip(row) {
            *o = (x - max).exp();
            total += *o;
        }
        for o in out.iter_mut() {
            *o = *o / total;
        }
    }
}

#[cfg(test)]
mod tests;
