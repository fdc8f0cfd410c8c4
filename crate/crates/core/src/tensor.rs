//! Dense tensors and a define-by-run reverse-mode autodiff graph.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so the append order is already a topological order and
//! [`Graph::backward`] is a single reverse sweep.

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: domain error: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("invalid axis {axis} for tensor of rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("dropout probability must be in [0,1), got {0}")]
    InvalidProbability(f64),
    #[error("shape {shape:?} needs {expected} values, got {got}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Row-major dense array of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected = shape.iter().product::<usize>();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a `rows × cols` matrix from row slices.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "from_rows",
                    left: vec![cols],
                    right: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    /// Standard-normal entries scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| std * rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            1
        }
    }

    /// Row `i` of a matrix (or of any tensor viewed as `rows × rest`).
    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    /// Gathers the listed rows into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        if shape.is_empty() {
            shape.push(1);
        }
        shape[0] = idx.len();
        Tensor { shape, data }
    }

    /// Gathers the listed columns of a matrix.
    pub fn select_cols(&self, idx: &[usize]) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut data = Vec::with_capacity(r * idx.len());
        for i in 0..r {
            let row = &self.data[i * c..(i + 1) * c];
            data.extend(idx.iter().map(|&j| row[j]));
        }
        Tensor {
            shape: vec![r, idx.len()],
            data,
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let expected = shape.iter().product::<usize>();
        if expected != self.data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                got: self.data.len(),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Exp,
    Log,
    Softplus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Act(Var, Activation),
    Reduce {
        input: Var,
        // flat output index for every input element
        target: Vec<usize>,
        scale: f64,
    },
    SliceCols {
        input: Var,
        start: usize,
        len: usize,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation record list; append order is evaluation order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when nothing flowed to it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `c = a·b` (or `c += a·b` when `accumulate`) with explicit element strides,
/// so transposed operands need no copy.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slice lengths were checked above against the extents, and
    // the strides index within an m×k, k×n and m×n row-major block.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            &mut out,
            false,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Adds a length-`n` vector to every row of an `m × n` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.value(x).shape(), self.value(bias).shape());
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                left: sx.to_vec(),
                right: sb.to_vec(),
            });
        }
        let n = sx[1];
        let b = self.value(bias).data();
        let mut out = self.value(x).clone();
        for row in out.data.chunks_mut(n) {
            row.iter_mut().zip(b).for_each(|(o, bv)| *o += bv);
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddRow(x, bias), rg))
    }

    fn zip_op(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: name,
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| f(*x, *y)).collect();
        Ok(Tensor {
            shape: ta.shape.clone(),
            data,
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_op("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_op("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_op("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let mut t = self.value(a).clone();
        t.data.iter_mut().for_each(|v| *v *= c);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let src = self.value(x);
        if kind == Activation::Log {
            if let Some(bad) = src.data.iter().find(|v| !(**v > 0.0)) {
                return Err(TensorError::Domain {
                    op: "log",
                    detail: format!("non-positive input {bad}"),
                });
            }
        }
        let f: fn(f64) -> f64 = match kind {
            Activation::Relu => |v| v.max(0.0),
            Activation::Sigmoid => sigmoid,
            Activation::Exp => f64::exp,
            Activation::Log => f64::ln,
            Activation::Softplus => softplus,
        };
        let t = Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().map(|v| f(*v)).collect(),
        };
        let rg = self.rg(x);
        Ok(self.push(t, Op::Act(x, kind), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu).expect("relu is total")
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
            .expect("sigmoid is total")
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Exp).expect("exp is total")
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Softplus)
            .expect("softplus is total")
    }

    /// Sums or averages over `axes`, removing them from the shape. An empty
    /// axis set is the identity.
    pub fn reduce(&mut self, x: Var, kind: Reduction, axes: &[usize]) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let rank = shape.len();
        let mut reduced = vec![false; rank];
        for &a in axes {
            if a >= rank {
                return Err(TensorError::InvalidAxis { axis: a, rank });
            }
            reduced[a] = true;
        }
        let out_shape: Vec<usize> = shape
            .iter()
            .zip(&reduced)
            .filter(|(_, r)| !**r)
            .map(|(s, _)| *s)
            .collect();
        let count: usize = shape
            .iter()
            .zip(&reduced)
            .filter(|(_, r)| **r)
            .map(|(s, _)| *s)
            .product();
        let scale = match kind {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / count.max(1) as f64,
        };

        // output strides over the kept axes
        let mut out_strides = vec![0usize; rank];
        let mut acc = 1;
        for ax in (0..rank).rev() {
            if !reduced[ax] {
                out_strides[ax] = acc;
                acc *= shape[ax];
            }
        }
        let numel: usize = shape.iter().product();
        let mut target = Vec::with_capacity(numel);
        let mut idx = vec![0usize; rank];
        for _ in 0..numel {
            target.push(idx.iter().zip(&out_strides).map(|(i, s)| i * s).sum());
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                if idx[ax] < shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        let mut out = Tensor::zeros(&out_shape);
        for (v, &t) in self.value(x).data.iter().zip(&target) {
            out.data[t] += v;
        }
        out.data.iter_mut().for_each(|v| *v *= scale);
        let rg = self.rg(x);
        Ok(self.push(
            out,
            Op::Reduce {
                input: x,
                target,
                scale,
            },
            rg,
        ))
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let axes: Vec<usize> = (0..self.value(x).rank()).collect();
        self.reduce(x, Reduction::Sum, &axes)
            .expect("all axes are valid")
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.value(x).shape();
        if s.len() != 2 || start + len > s[1] {
            return Err(TensorError::ShapeMismatch {
                op: "slice_cols",
                left: s.to_vec(),
                right: vec![start, len],
            });
        }
        let t = self
            .value(x)
            .select_cols(&(start..start + len).collect::<Vec<_>>());
        let rg = self.rg(x);
        Ok(self.push(t, Op::SliceCols { input: x, start, len }, rg))
    }

    /// Inverted dropout: in training mode each unit is zeroed with
    /// probability `p` and survivors are scaled by `1/(1-p)`; otherwise `x`
    /// itself is returned.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f64,
        rng: &mut R,
        training: bool,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::InvalidProbability(p));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - p;
        let shape = self.value(x).shape().to_vec();
        let n = self.value(x).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let m = self.constant(Tensor::new(shape, mask)?);
        self.mul(x, m)
    }

    /// Reverse sweep from a scalar `loss`, seeded with gradient 1.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                    if self.rg(*a) {
                        let da = grad_slot(&mut grads, *a, m * k);
                        // dA += G · Bᵀ
                        gemm(m, n, k, &g, (n as isize, 1), tb.data(), (1, n as isize), da, true);
                    }
                    if self.rg(*b) {
                        let db = grad_slot(&mut grads, *b, k * n);
                        // dB += Aᵀ · G
                        gemm(k, m, n, ta.data(), (1, k as isize), &g, (n as isize, 1), db, true);
                    }
                }
                Op::AddRow(x, b) => {
                    let n = self.value(*b).numel();
                    if self.rg(*x) {
                        accumulate(grad_slot(&mut grads, *x, g.len()), &g);
                    }
                    if self.rg(*b) {
                        let db = grad_slot(&mut grads, *b, n);
                        for row in g.chunks(n) {
                            db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                        }
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    if self.rg(*a) {
                        accumulate(grad_slot(&mut grads, *a, g.len()), &g);
                    }
                    if self.rg(*b) {
                        let db = grad_slot(&mut grads, *b, g.len());
                        db.iter_mut().zip(&g).for_each(|(d, v)| *d += sign * v);
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        let other = self.value(*b).data();
                        let da = grad_slot(&mut grads, *a, g.len());
                        for ((d, gv), o) in da.iter_mut().zip(&g).zip(other) {
                            *d += gv * o;
                        }
                    }
                    if self.rg(*b) {
                        let other = self.value(*a).data();
                        let db = grad_slot(&mut grads, *b, g.len());
                        for ((d, gv), o) in db.iter_mut().zip(&g).zip(other) {
                            *d += gv * o;
                        }
                    }
                }
                Op::Scale(a, c) => {
                    if self.rg(*a) {
                        let da = grad_slot(&mut grads, *a, g.len());
                        da.iter_mut().zip(&g).for_each(|(d, v)| *d += c * v);
                    }
                }
                Op::Act(x, kind) => {
                    if self.rg(*x) {
                        let input = self.value(*x).data();
                        let output = node.value.data();
                        let dx = grad_slot(&mut grads, *x, g.len());
                        for j in 0..g.len() {
                            let local = match kind {
                                Activation::Relu => {
                                    if input[j] > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                                Activation::Sigmoid => output[j] * (1.0 - output[j]),
                                Activation::Exp => output[j],
                                Activation::Log => 1.0 / input[j],
                                Activation::Softplus => sigmoid(input[j]),
                            };
                            dx[j] += g[j] * local;
                        }
                    }
                }
                Op::Reduce {
                    input,
                    target,
                    scale,
                } => {
                    if self.rg(*input) {
                        let dx = grad_slot(&mut grads, *input, target.len());
                        for (d, &t) in dx.iter_mut().zip(target) {
                            *d += scale * g[t];
                        }
                    }
                }
                Op::SliceCols { input, start, len } => {
                    if self.rg(*input) {
                        let cols = self.value(*input).cols();
                        let rows = self.value(*input).rows();
                        let dx = grad_slot(&mut grads, *input, rows * cols);
                        for r in 0..rows {
                            for c in 0..*len {
                                dx[r * cols + start + c] += g[r * len + c];
                            }
                        }
                    }
                }
            }
            // keep leaf gradients for the caller
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                match (g, &node.op) {
                    (Some(g), Op::Leaf) => Some(Tensor {
                        shape: node.value.shape.clone(),
                        data: g,
                    }),
                    _ => None,
                }
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn grad_slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mat(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_values() {
        let mut g = Graph::new();
        let i2 = g.constant(mat(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let m = g.constant(mat(&[&[2.0, 3.0], &[4.0, 5.0]]));
        let p = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(p).data(), &[2.0, 3.0, 4.0, 5.0]);

        let a = g.constant(mat(&[&[1.0, 2.0]]));
        let b = g.constant(mat(&[&[3.0], &[4.0]]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, TensorError::ShapeMismatch { .. }));
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 2], 1.0, &mut rng);
        let w = Tensor::randn(&[3, 2], 1.0, &mut rng);
        let err = grad_check(&[a, b], 1e-5, |p| {
            let mut g = Graph::new();
            let a = g.param(p[0].clone());
            let b = g.param(p[1].clone());
            let wv = g.constant(w.clone());
            let c = g.matmul(a, b)?;
            let cw = g.mul(c, wv)?;
            let l = g.sum_all(cw);
            let grads = g.backward(l)?;
            Ok::<_, TensorError>((
                g.value(l).item(),
                vec![grads.get(a).unwrap().clone(), grads.get(b).unwrap().clone()],
            ))
        })
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn activations_basic_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![0.0, -2.5]));
        let s = g.sigmoid(x);
        let r = g.relu(x);
        assert_eq!(g.value(s).data()[0], 0.5);
        assert_eq!(g.value(r).data()[1], 0.0);
        assert!(g.value(s).data().iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn softplus_matches_direct_formula() {
        for i in 0..=200 {
            let x = -10.0 + 0.1 * i as f64;
            let direct = (1.0 + x.exp()).ln();
            assert!((softplus(x) - direct).abs() < 1e-12, "x={x}");
        }
    }

    #[test]
    fn log_of_non_positive_is_domain_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![1.0, 0.0]));
        assert!(matches!(
            g.activation(x, Activation::Log),
            Err(TensorError::Domain { .. })
        ));
    }

    #[test]
    fn activation_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[5], 1.0, &mut rng);
        for kind in [
            Activation::Relu,
            Activation::Sigmoid,
            Activation::Exp,
            Activation::Softplus,
        ] {
            let err = grad_check(std::slice::from_ref(&x), 1e-6, |p| {
                let mut g = Graph::new();
                let v = g.param(p[0].clone());
                let y = g.activation(v, kind)?;
                let l = g.sum_all(y);
                let gr = g.backward(l)?;
                Ok::<_, TensorError>((g.value(l).item(), vec![gr.get_or_zeros(v, &p[0])]))
            })
            .unwrap();
            assert!(err < 1e-6, "{kind:?}: {err}");
        }
        let pos = Tensor::from_vec(vec![0.5, 1.5, 3.0]);
        let err = grad_check(&[pos], 1e-6, |p| {
            let mut g = Graph::new();
            let v = g.param(p[0].clone());
            let y = g.activation(v, Activation::Log)?;
            let l = g.sum_all(y);
            let gr = g.backward(l)?;
            Ok::<_, TensorError>((g.value(l).item(), vec![gr.get(v).unwrap().clone()]))
        })
        .unwrap();
        assert!(err < 1e-6);
    }

    #[test]
    fn reduce_sum_mean_and_identity() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let s = g.reduce(x, Reduction::Sum, &[0]).unwrap();
        assert_eq!(g.value(s).item(), 6.0);
        let id = g.reduce(x, Reduction::Mean, &[]).unwrap();
        assert_eq!(g.value(id).data(), &[1.0, 2.0, 3.0]);

        let mut g = Graph::new();
        let v = g.param(Tensor::from_vec(vec![4.0, -1.0, 2.0, 7.0]));
        let m = g.reduce(v, Reduction::Mean, &[0]).unwrap();
        let gr = g.backward(m).unwrap();
        assert_eq!(gr.get(v).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn reduce_over_one_axis_of_matrix() {
        let mut g = Graph::new();
        let x = g.constant(mat(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]));
        let rows = g.reduce(x, Reduction::Sum, &[1]).unwrap();
        assert_eq!(g.value(rows).data(), &[6.0, 15.0]);
        let cols = g.reduce(x, Reduction::Mean, &[0]).unwrap();
        assert_eq!(g.value(cols).data(), &[2.5, 3.5, 4.5]);
        assert!(matches!(
            g.reduce(x, Reduction::Sum, &[2]),
            Err(TensorError::InvalidAxis { axis: 2, rank: 2 })
        ));
    }

    #[test]
    fn dropout_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn(&[4, 4], 1.0, &mut rng));
        let same = g.dropout(x, 0.0, &mut rng, true).unwrap();
        assert_eq!(g.value(same), g.value(x));
        let eval = g.dropout(x, 0.5, &mut rng, false).unwrap();
        assert_eq!(g.value(eval), g.value(x));
        assert!(matches!(
            g.dropout(x, 1.0, &mut rng, true),
            Err(TensorError::InvalidProbability(_))
        ));
    }

    #[test]
    fn dropout_preserves_mean_in_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1_000_000], 1.0));
        let d = g.dropout(x, 0.5, &mut rng, true).unwrap();
        let mean = g.value(d).data().iter().sum::<f64>() / 1e6;
        assert!((mean - 1.0).abs() < 0.01, "{mean}");
    }

    #[test]
    fn backward_square_and_errors() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let gr = g.backward(y).unwrap();
        assert_eq!(gr.get(x).unwrap().item(), 6.0);

        let v = g.param(Tensor::zeros(&[2]));
        assert!(matches!(
            g.backward(v),
            Err(TensorError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn backward_sigmoid_layer_and_repeatability() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = Tensor::randn(&[3, 4], 0.3, &mut rng);
        let x = Tensor::randn(&[4, 2], 1.0, &mut rng);
        let run = |p: &[Tensor]| {
            let mut g = Graph::new();
            let wv = g.param(p[0].clone());
            let xv = g.param(p[1].clone());
            let h = g.matmul(wv, xv)?;
            let s = g.sigmoid(h);
            let l = g.sum_all(s);
            let gr = g.backward(l)?;
            let first = vec![gr.get(wv).unwrap().clone(), gr.get(xv).unwrap().clone()];
            let again = g.backward(l)?;
            assert_eq!(again.get(wv), gr.get(wv));
            Ok::<_, TensorError>((g.value(l).item(), first))
        };
        let err = grad_check(&[w, x], 1e-5, run).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn slice_and_add_row_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[2], 1.0, &mut rng);
        let err = grad_check(&[x, b], 1e-5, |p| {
            let mut g = Graph::new();
            let xv = g.param(p[0].clone());
            let bv = g.param(p[1].clone());
            let s = g.slice_cols(xv, 1, 2)?;
            let a = g.add_row(s, bv)?;
            let e = g.exp(a);
            let l = g.sum_all(e);
            let gr = g.backward(l)?;
            Ok::<_, TensorError>((
                g.value(l).item(),
                vec![gr.get(xv).unwrap().clone(), gr.get(bv).unwrap().clone()],
            ))
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
