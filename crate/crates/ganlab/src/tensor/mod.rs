//! Dense f64 tensors with a reverse-mode differentiation tape.
//!
//! A [`Tensor`] is a cheaply cloneable handle (shared storage) carrying shape,
//! row-major data, and an optional gradient buffer. A [`Tape`] records every
//! primitive applied to tensors that require gradients; [`Tape::backward`]
//! replays the recording in reverse and accumulates d(root)/d(leaf) into each
//! leaf's gradient buffer.
//!
//! Tensors and tapes are deliberately not `Send`: a tape and everything on it
//! belong to one worker. Parallelism happens across independent runs, each of
//! which builds its own tensors.

pub mod optim;

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use thiserror::Error;

/// Errors surfaced by tensor construction, primitives, and backward passes.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch, left {left:?} vs right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: domain error, {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("data length {len} does not match shape {shape:?}")]
    LengthMismatch { len: usize, shape: Vec<usize> },
    #[error("backward root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("backward root was not produced by this tape")]
    RootNotOnTape,
    #[error("parameter `{name}` has no gradient")]
    MissingGrad { name: String },
    #[error("optimizer was stepped with {got} parameters, state holds {expected}")]
    ParamCountChanged { expected: usize, got: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

struct Inner {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Handle to a dense n-dimensional f64 array. Cloning shares storage.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<Inner>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("shape", &inner.shape)
            .field("requires_grad", &inner.requires_grad)
            .field("data", &inner.data)
            .finish()
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

impl Tensor {
    /// Constant tensor (no gradient tracking).
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        Self::build(shape, data, false)
    }

    /// Leaf tensor that participates in differentiation.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        Self::build(shape, data, true)
    }

    fn build(shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::LengthMismatch {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        check_finite("tensor construction", &data)?;
        Ok(Tensor {
            inner: Rc::new(RefCell::new(Inner {
                shape: shape.to_vec(),
                data,
                requires_grad,
                grad: None,
            })),
        })
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::new(&[1], vec![v]).expect("scalar construction cannot fail on finite input")
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, vec![0.0; n]).expect("zeros are finite")
    }

    pub fn filled(shape: &[usize], v: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        Tensor::new(shape, vec![v; n])
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    /// Copy of the stored values.
    pub fn data(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    /// Borrow the stored values without copying.
    pub fn with_data<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.inner.borrow().data)
    }

    /// Value of a single-element tensor.
    ///
    /// Panics if the tensor is not a scalar; losses are scalar by contract.
    pub fn item(&self) -> f64 {
        let inner = self.inner.borrow();
        assert!(
            inner.data.len() == 1,
            "item() on tensor of shape {:?}",
            inner.shape
        );
        inner.data[0]
    }

    /// Copy of the gradient buffer, if one has been accumulated.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// New leaf holding the same values, disconnected from any tape.
    pub fn detach(&self) -> Tensor {
        let inner = self.inner.borrow();
        Tensor {
            inner: Rc::new(RefCell::new(Inner {
                shape: inner.shape.clone(),
                data: inner.data.clone(),
                requires_grad: false,
                grad: None,
            })),
        }
    }

    /// Overwrite the stored values in place. Shape must be preserved.
    pub fn set_data(&self, data: &[f64]) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        if data.len() != inner.data.len() {
            return Err(TensorError::LengthMismatch {
                len: data.len(),
                shape: inner.shape.clone(),
            });
        }
        check_finite("set_data", data)?;
        inner.data.copy_from_slice(data);
        Ok(())
    }

    fn accumulate_grad(&self, contribution: &[f64]) {
        let mut inner = self.inner.borrow_mut();
        match inner.grad.as_mut() {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contribution) {
                    *gi += ci;
                }
            }
            None => inner.grad = Some(contribution.to_vec()),
        }
    }

    fn same_storage(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

/// Primitive operations the tape knows how to differentiate.
#[derive(Clone, Debug)]
enum Op {
    Add,
    Sub,
    Mul,
    MatMul,
    Neg,
    Exp,
    Ln,
    Sigmoid,
    Tanh,
    Square,
    Softplus,
    LogSigmoid,
    LogSoftmax,
    XLnX,
    Sum,
    RowSum,
    MeanBatch,
    Concat,
    Slice { start: usize, end: usize },
    Reshape,
    AddScalar,
    MulScalar(f64),
    Clamp { lo: f64, hi: f64 },
}

struct Recording {
    op: Op,
    inputs: Vec<Tensor>,
    output: Tensor,
}

/// Ordered record of primitives applied to gradient-tracked tensors.
///
/// The recording order is the execution order, so it is topologically sorted
/// by construction; `backward` walks it once, in reverse.
#[derive(Default)]
pub struct Tape {
    recordings: Vec<Recording>,
}

/// Broadcast relation between two elementwise operands.
enum Broadcast {
    /// Identical shapes.
    None,
    /// Right operand repeats across the left's leading batch dimension.
    Right(usize),
    /// Left operand repeats across the right's leading batch dimension.
    Left(usize),
}

fn broadcast_of(op: &'static str, a: &[usize], b: &[usize]) -> Result<Broadcast> {
    if a == b {
        return Ok(Broadcast::None);
    }
    if a.len() == b.len() + 1 && a[1..] == *b {
        return Ok(Broadcast::Right(a[0]));
    }
    if b.len() == a.len() + 1 && b[1..] == *a {
        return Ok(Broadcast::Left(b[0]));
    }
    Err(TensorError::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    })
}

fn sigmoid_scalar(x: f64) -> f64 {
    // Branch on sign so exp never overflows.
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus_scalar(x: f64) -> f64 {
    // ln(1 + e^x) = max(x, 0) + ln(1 + e^-|x|)
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn log_sigmoid_scalar(x: f64) -> f64 {
    // ln σ(x) = -softplus(-x)
    -softplus_scalar(-x)
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.recordings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.recordings.is_empty()
    }

    fn record(&mut self, op: Op, inputs: &[&Tensor], output: &Tensor) {
        if inputs.iter().any(|t| t.requires_grad()) {
            output.inner.borrow_mut().requires_grad = true;
            self.recordings.push(Recording {
                op,
                inputs: inputs.iter().map(|t| (*t).clone()).collect(),
                output: output.clone(),
            });
        }
    }

    fn elementwise_binary(
        &mut self,
        op: Op,
        name: &'static str,
        a: &Tensor,
        b: &Tensor,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (shape_a, shape_b) = (a.shape(), b.shape());
        let bc = broadcast_of(name, &shape_a, &shape_b)?;
        let out = a.with_data(|da| {
            b.with_data(|db| match bc {
                Broadcast::None => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect::<Vec<_>>(),
                Broadcast::Right(batch) => {
                    let stride = db.len();
                    let mut out = Vec::with_capacity(da.len());
                    for i in 0..batch {
                        let row = &da[i * stride..(i + 1) * stride];
                        out.extend(row.iter().zip(db).map(|(&x, &y)| f(x, y)));
                    }
                    out
                }
                Broadcast::Left(batch) => {
                    let stride = da.len();
                    let mut out = Vec::with_capacity(db.len());
                    for i in 0..batch {
                        let row = &db[i * stride..(i + 1) * stride];
                        out.extend(da.iter().zip(row).map(|(&x, &y)| f(x, y)));
                    }
                    out
                }
            })
        });
        check_finite(name, &out)?;
        let out_shape = match bc {
            Broadcast::None | Broadcast::Right(_) => shape_a,
            Broadcast::Left(_) => shape_b,
        };
        let out = Tensor::new(&out_shape, out)?;
        self.record(op, &[a, b], &out);
        Ok(out)
    }

    fn elementwise_unary(
        &mut self,
        op: Op,
        name: &'static str,
        x: &Tensor,
        f: impl Fn(f64) -> f64,
    ) -> Result<Tensor> {
        let out: Vec<f64> = x.with_data(|d| d.iter().map(|&v| f(v)).collect());
        check_finite(name, &out)?;
        let out = Tensor::new(&x.shape(), out)?;
        self.record(op, &[x], &out);
        Ok(out)
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.elementwise_binary(Op::Add, "add", a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.elementwise_binary(Op::Sub, "subtract", a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.elementwise_binary(Op::Mul, "multiply", a, b, |x, y| x * y)
    }

    /// 2-D matrix product: (m,k) × (k,n) → (m,n).
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matrix-product",
                left: sa,
                right: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = a.with_data(|da| b.with_data(|db| mm_nn(da, db, m, k, n)));
        check_finite("matrix-product", &out)?;
        let out = Tensor::new(&[m, n], out)?;
        self.record(Op::MatMul, &[a, b], &out);
        Ok(out)
    }

    pub fn neg(&mut self, x: &Tensor) -> Result<Tensor> {
        self.elementwise_unary(Op::Neg, "negate", x, |v| -v)
    }

    pub fn exp(&mut self, x: &Tensor) -> Result<Tensor> {
        self.elementwise_unary(Op::Exp, "exponential", x, f64::exp)
    }

    /// Natural logarithm; inputs must be strictly positive.
    pub fn ln(&mut self, x: &Tensor) -> Result<Tensor> {
        let bad = x.with_data(|d| d.iter().copied().find(|&v| v <= 0.0));
        if let Some(v) = bad {
            return Err(TensorError::Domain {
                op: "natural-log",
                detail: format!("input {v} is not strictly positive"),
            });
        }
        self.elementwise_unary(Op::Ln, "natural-log", x, f64::ln)
    }

    pub fn sigmoid(&mut self, x: &Tensor) -> Result<Tensor> {
        self.elementwise_unary(Op::Sigmoid, "sigmoid", x, sigmoid_scalar)
    }

    pub fn tanh(&mut self, x: &Tensor) -> Result<Tensor> {
        self.elementwise_unary(Op::Tanh, "hyperbolic-tangent", x, f64::tanh)
    }

    pub fn square(&mut self, x: &Tensor) -> Result<Tensor> {
        self.elementwise_unary(Op::Square, "square", x, |v| v * v)
    }

    pub fn softplus(&mut self, x: &Tensor) -> Result<Tensor> {
        self.elementwise_unary(Op::Softplus, "softplus", x, softplus_scalar)
    }

    /// Fused ln∘σ; stable at both saturation ends.
    pub fn log_sigmoid(&mut self, x: &Tensor) -> Result<Tensor> {
        self.elementwise_unary(Op::LogSigmoid, "log-sigmoid", x, log_sigmoid_scalar)
    }

    /// x·ln(x) elementwise with the 0·ln 0 = 0 convention; inputs must be
    /// non-negative. The entropy building block.
    pub fn x_ln_x(&mut self, x: &Tensor) -> Result<Tensor> {
        let bad = x.with_data(|d| d.iter().copied().find(|&v| v < 0.0));
        if let Some(v) = bad {
            return Err(TensorError::Domain {
                op: "x-ln-x",
                detail: format!("input {v} is negative"),
            });
        }
        self.elementwise_unary(Op::XLnX, "x-ln-x", x, |v| if v == 0.0 { 0.0 } else { v * v.ln() })
    }

    /// Row-wise log-softmax over the last dimension.
    pub fn log_softmax(&mut self, x: &Tensor) -> Result<Tensor> {
        let shape = x.shape();
        let width = *shape.last().ok_or_else(|| TensorError::Domain {
            op: "log-softmax",
            detail: "zero-dimensional input".into(),
        })?;
        let out = x.with_data(|d| {
            let mut out = Vec::with_capacity(d.len());
            for row in d.chunks(width) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let log_z = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
                out.extend(row.iter().map(|v| v - log_z));
            }
            out
        });
        check_finite("log-softmax", &out)?;
        let out = Tensor::new(&shape, out)?;
        self.record(Op::LogSoftmax, &[x], &out);
        Ok(out)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: &Tensor) -> Result<Tensor> {
        let total = x.with_data(|d| d.iter().sum::<f64>());
        check_finite("sum", &[total])?;
        let out = Tensor::new(&[1], vec![total])?;
        self.record(Op::Sum, &[x], &out);
        Ok(out)
    }

    /// Sum over the last dimension: (..., k) → (..., 1).
    pub fn row_sum(&mut self, x: &Tensor) -> Result<Tensor> {
        let shape = x.shape();
        let width = *shape.last().ok_or_else(|| TensorError::Domain {
            op: "row-sum",
            detail: "zero-dimensional input".into(),
        })?;
        let out: Vec<f64> = x.with_data(|d| d.chunks(width).map(|row| row.iter().sum()).collect());
        check_finite("row-sum", &out)?;
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = 1;
        let out = Tensor::new(&out_shape, out)?;
        self.record(Op::RowSum, &[x], &out);
        Ok(out)
    }

    /// Mean over the leading (batch) dimension: (b, rest…) → (rest…).
    pub fn mean_batch(&mut self, x: &Tensor) -> Result<Tensor> {
        let shape = x.shape();
        let batch = *shape.first().ok_or_else(|| TensorError::Domain {
            op: "mean-over-batch",
            detail: "zero-dimensional input".into(),
        })?;
        let rest: usize = shape[1..].iter().product::<usize>().max(1);
        let out = x.with_data(|d| {
            let mut out = vec![0.0; rest];
            for row in d.chunks(rest) {
                for (o, v) in out.iter_mut().zip(row) {
                    *o += v;
                }
            }
            for o in out.iter_mut() {
                *o /= batch as f64;
            }
            out
        });
        check_finite("mean-over-batch", &out)?;
        let out_shape: Vec<usize> = if shape.len() == 1 {
            vec![1]
        } else {
            shape[1..].to_vec()
        };
        let out = Tensor::new(&out_shape, out)?;
        self.record(Op::MeanBatch, &[x], &out);
        Ok(out)
    }

    /// Concatenate along the last dimension; leading dimensions must agree.
    pub fn concat(&mut self, parts: &[&Tensor]) -> Result<Tensor> {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let first = parts[0].shape();
        let lead = &first[..first.len() - 1];
        let mut total_width = 0;
        for p in parts {
            let s = p.shape();
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(TensorError::ShapeMismatch {
                    op: "concatenate",
                    left: first.clone(),
                    right: s,
                });
            }
            total_width += s[s.len() - 1];
        }
        let rows: usize = lead.iter().product::<usize>().max(1);
        let mut out = vec![0.0; rows * total_width];
        let mut offset = 0;
        for p in parts {
            let w = *p.shape().last().unwrap();
            p.with_data(|d| {
                for r in 0..rows {
                    out[r * total_width + offset..r * total_width + offset + w]
                        .copy_from_slice(&d[r * w..(r + 1) * w]);
                }
            });
            offset += w;
        }
        let mut out_shape = lead.to_vec();
        out_shape.push(total_width);
        let out = Tensor::new(&out_shape, out)?;
        self.record(Op::Concat, parts, &out);
        Ok(out)
    }

    /// Slice `[start, end)` of the last dimension.
    pub fn slice(&mut self, x: &Tensor, start: usize, end: usize) -> Result<Tensor> {
        let shape = x.shape();
        let width = *shape.last().ok_or_else(|| TensorError::Domain {
            op: "slice",
            detail: "zero-dimensional input".into(),
        })?;
        if start >= end || end > width {
            return Err(TensorError::Domain {
                op: "slice",
                detail: format!("range {start}..{end} out of bounds for width {width}"),
            });
        }
        let rows: usize = shape[..shape.len() - 1].iter().product::<usize>().max(1);
        let w = end - start;
        let out = x.with_data(|d| {
            let mut out = Vec::with_capacity(rows * w);
            for r in 0..rows {
                out.extend_from_slice(&d[r * width + start..r * width + end]);
            }
            out
        });
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = w;
        let out = Tensor::new(&out_shape, out)?;
        self.record(Op::Slice { start, end }, &[x], &out);
        Ok(out)
    }

    /// Reinterpret the shape; element count must be unchanged.
    pub fn reshape(&mut self, x: &Tensor, new_shape: &[usize]) -> Result<Tensor> {
        let numel: usize = new_shape.iter().product();
        if numel != x.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: x.shape(),
                right: new_shape.to_vec(),
            });
        }
        let out = Tensor::new(new_shape, x.data())?;
        self.record(Op::Reshape, &[x], &out);
        Ok(out)
    }

    pub fn add_scalar(&mut self, x: &Tensor, c: f64) -> Result<Tensor> {
        self.elementwise_unary(Op::AddScalar, "add-scalar", x, |v| v + c)
    }

    pub fn mul_scalar(&mut self, x: &Tensor, c: f64) -> Result<Tensor> {
        self.elementwise_unary(Op::MulScalar(c), "mul-scalar", x, |v| v * c)
    }

    /// Clamp to `[lo, hi]`; the gradient passes through strictly inside the
    /// interval and is zero outside.
    pub fn clamp(&mut self, x: &Tensor, lo: f64, hi: f64) -> Result<Tensor> {
        assert!(lo < hi, "clamp bounds out of order");
        self.elementwise_unary(Op::Clamp { lo, hi }, "clamp", x, |v| v.clamp(lo, hi))
    }

    /// Accumulate d(root)/d(leaf) into every gradient-tracked tensor reachable
    /// from `root`. Repeated calls without `zero_grad` accumulate.
    pub fn backward(&self, root: &Tensor) -> Result<()> {
        if root.numel() != 1 {
            return Err(TensorError::NonScalarRoot { shape: root.shape() });
        }
        if !self
            .recordings
            .iter()
            .any(|r| r.output.same_storage(root))
        {
            return Err(TensorError::RootNotOnTape);
        }
        // Seed via a private buffer so pre-existing grads on the root are
        // not double-counted, then walk the tape once in reverse.
        let mut pending: Vec<Option<Vec<f64>>> = vec![None; self.recordings.len()];
        for (i, rec) in self.recordings.iter().enumerate().rev() {
            let mut out_grad = pending[i].take();
            if rec.output.same_storage(root) {
                match out_grad.as_mut() {
                    Some(g) => g[0] += 1.0,
                    None => out_grad = Some(vec![1.0]),
                }
            }
            let Some(out_grad) = out_grad else { continue };
            let contributions = propagate(rec, &out_grad);
            for (input, contrib) in rec.inputs.iter().zip(contributions.iter()) {
                // Route the contribution to the producing recording when the
                // input is itself an op output; leaves accumulate directly.
                let producer = self.recordings[..i]
                    .iter()
                    .rposition(|r| r.output.same_storage(input));
                match producer {
                    Some(j) => match pending[j].as_mut() {
                        Some(g) => {
                            for (gi, ci) in g.iter_mut().zip(contrib) {
                                *gi += ci;
                            }
                        }
                        None => pending[j] = Some(contrib.clone()),
                    },
                    None => {
                        if input.requires_grad() {
                            input.accumulate_grad(contrib);
                        }
                    }
                }
            }
        }
        // The root's own leaf-grad contract: if root is also a leaf this is
        // unreachable (roots come off the tape), so nothing more to do.
        Ok(())
    }
}

/// Local gradient rules: given an output cotangent, produce one contribution
/// per input, in input order.
fn propagate(rec: &Recording, out_grad: &[f64]) -> Vec<Vec<f64>> {
    let inputs = &rec.inputs;
    match &rec.op {
        Op::Add => binary_broadcast_grads(inputs, out_grad, |_, _| (1.0, 1.0)),
        Op::Sub => binary_broadcast_grads(inputs, out_grad, |_, _| (1.0, -1.0)),
        Op::Mul => binary_broadcast_grads(inputs, out_grad, |x, y| (y, x)),
        Op::MatMul => {
            let a = &inputs[0];
            let b = &inputs[1];
            let (sa, sb) = (a.shape(), b.shape());
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let da = b.with_data(|db| mm_nt(out_grad, db, m, n, k));
            let db = a.with_data(|dat| mm_tn(dat, out_grad, m, k, n));
            vec![da, db]
        }
        Op::Neg => vec![out_grad.iter().map(|g| -g).collect()],
        Op::Exp => vec![rec
            .output
            .with_data(|o| o.iter().zip(out_grad).map(|(&y, &g)| y * g).collect())],
        Op::Ln => vec![inputs[0]
            .with_data(|x| x.iter().zip(out_grad).map(|(&v, &g)| g / v).collect())],
        Op::Sigmoid => vec![rec.output.with_data(|o| {
            o.iter()
                .zip(out_grad)
                .map(|(&s, &g)| s * (1.0 - s) * g)
                .collect()
        })],
        Op::Tanh => vec![rec.output.with_data(|o| {
            o.iter()
                .zip(out_grad)
                .map(|(&t, &g)| (1.0 - t * t) * g)
                .collect()
        })],
        Op::Square => vec![inputs[0].with_data(|x| {
            x.iter()
                .zip(out_grad)
                .map(|(&v, &g)| 2.0 * v * g)
                .collect()
        })],
        Op::Softplus => vec![inputs[0].with_data(|x| {
            x.iter()
                .zip(out_grad)
                .map(|(&v, &g)| sigmoid_scalar(v) * g)
                .collect()
        })],
        Op::LogSigmoid => vec![inputs[0].with_data(|x| {
            x.iter()
                .zip(out_grad)
                .map(|(&v, &g)| sigmoid_scalar(-v) * g)
                .collect()
        })],
        Op::LogSoftmax => {
            let shape = rec.output.shape();
            let width = *shape.last().unwrap();
            let dx = rec.output.with_data(|o| {
                let mut dx = Vec::with_capacity(o.len());
                for (row, grow) in o.chunks(width).zip(out_grad.chunks(width)) {
                    let gsum: f64 = grow.iter().sum();
                    dx.extend(
                        row.iter()
                            .zip(grow)
                            .map(|(&lp, &g)| g - lp.exp() * gsum),
                    );
                }
                dx
            });
            vec![dx]
        }
        Op::XLnX => vec![inputs[0].with_data(|x| {
            x.iter()
                .zip(out_grad)
                // Subgradient 0 at the x = 0 kink; softmax outputs never land there.
                .map(|(&v, &g)| if v == 0.0 { 0.0 } else { (v.ln() + 1.0) * g })
                .collect()
        })],
        Op::Sum => {
            let g = out_grad[0];
            vec![vec![g; inputs[0].numel()]]
        }
        Op::RowSum => {
            let shape = inputs[0].shape();
            let width = *shape.last().unwrap();
            let mut dx = Vec::with_capacity(inputs[0].numel());
            for &g in out_grad {
                dx.extend(std::iter::repeat(g).take(width));
            }
            vec![dx]
        }
        Op::MeanBatch => {
            let shape = inputs[0].shape();
            let batch = shape[0];
            let scale = 1.0 / batch as f64;
            let rest: usize = shape[1..].iter().product::<usize>().max(1);
            let mut dx = Vec::with_capacity(batch * rest);
            for _ in 0..batch {
                dx.extend(out_grad.iter().map(|g| g * scale));
            }
            vec![dx]
        }
        Op::Concat => {
            let lead_rows: usize = {
                let s = rec.output.shape();
                s[..s.len() - 1].iter().product::<usize>().max(1)
            };
            let total_width = *rec.output.shape().last().unwrap();
            let mut grads = Vec::with_capacity(inputs.len());
            let mut offset = 0;
            for p in inputs {
                let w = *p.shape().last().unwrap();
                let mut dp = Vec::with_capacity(lead_rows * w);
                for r in 0..lead_rows {
                    dp.extend_from_slice(
                        &out_grad[r * total_width + offset..r * total_width + offset + w],
                    );
                }
                grads.push(dp);
                offset += w;
            }
            grads
        }
        Op::Slice { start, end } => {
            let shape = inputs[0].shape();
            let width = *shape.last().unwrap();
            let rows: usize = shape[..shape.len() - 1].iter().product::<usize>().max(1);
            let w = end - start;
            let mut dx = vec![0.0; inputs[0].numel()];
            for r in 0..rows {
                dx[r * width + start..r * width + end]
                    .copy_from_slice(&out_grad[r * w..(r + 1) * w]);
            }
            vec![dx]
        }
        Op::Reshape => vec![out_grad.to_vec()],
        Op::AddScalar => vec![out_grad.to_vec()],
        Op::MulScalar(c) => vec![out_grad.iter().map(|g| g * c).collect()],
        Op::Clamp { lo, hi } => vec![inputs[0].with_data(|x| {
            x.iter()
                .zip(out_grad)
                .map(|(&v, &g)| if v > *lo && v < *hi { g } else { 0.0 })
                .collect()
        })],
    }
}

/// Shared backward for elementwise binaries under leading-batch broadcast.
/// `local` returns (∂out/∂a, ∂out/∂b) at one element pair.
fn binary_broadcast_grads(
    inputs: &[Tensor],
    out_grad: &[f64],
    local: impl Fn(f64, f64) -> (f64, f64),
) -> Vec<Vec<f64>> {
    let a = &inputs[0];
    let b = &inputs[1];
    let (sa, sb) = (a.shape(), b.shape());
    let bc = broadcast_of("backward", &sa, &sb).expect("shapes validated in forward");
    a.with_data(|da| {
        b.with_data(|db| match bc {
            Broadcast::None => {
                let mut ga = vec![0.0; da.len()];
                let mut gb = vec![0.0; db.len()];
                for i in 0..da.len() {
                    let (la, lb) = local(da[i], db[i]);
                    ga[i] = la * out_grad[i];
                    gb[i] = lb * out_grad[i];
                }
                vec![ga, gb]
            }
            Broadcast::Right(batch) => {
                let stride = db.len();
                let mut ga = vec![0.0; da.len()];
                let mut gb = vec![0.0; stride];
                for r in 0..batch {
                    for j in 0..stride {
                        let idx = r * stride + j;
                        let (la, lb) = local(da[idx], db[j]);
                        ga[idx] = la * out_grad[idx];
                        gb[j] += lb * out_grad[idx];
                    }
                }
                vec![ga, gb]
            }
            Broadcast::Left(batch) => {
                let stride = da.len();
                let mut ga = vec![0.0; stride];
                let mut gb = vec![0.0; db.len()];
                for r in 0..batch {
                    for j in 0..stride {
                        let idx = r * stride + j;
                        let (la, lb) = local(da[j], db[idx]);
                        ga[j] += la * out_grad[idx];
                        gb[idx] = lb * out_grad[idx];
                    }
                }
                vec![ga, gb]
            }
        })
    })
}

/// C = A·B with A (m,k), B (k,n).
fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

/// C = A·Bᵀ with A (m,n), B (k,n) → (m,k).
fn mm_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            out[i * k + p] = a_row.iter().zip(b_row).map(|(&x, &y)| x * y).sum();
        }
    }
    out
}

/// C = Aᵀ·B with A (m,k), B (m,n) → (k,n).
fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}
