//! Minimal reverse-mode automatic differentiation over `f64` matrices.
//!
//! The tape is rebuilt on every forward pass (define-by-run): an operation
//! whose inputs carry `requires_grad` records one [`Step`] holding shared
//! handles to its input and output tensors; [`Tape::backward`] then walks the
//! steps in reverse, accumulating adjoints into each tensor's `grad` buffer.
//! Gradient accumulation order is fixed by tape order, so runs are
//! deterministic bit for bit.
//!
//! Tensors are 1-D vectors `[n]` or row-major 2-D matrices `[m, n]`; scalars
//! are `[1]`. Broadcasting is deliberately narrow: `add`/`sub` accept equal
//! shapes or a `[m, n]` matrix against an `[n]` row vector (either order).
//! Every other mismatch is a shape error naming the operation.

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use crate::field::ScalarField;
use crate::spline;
use crate::{Error, Result};

// ───────────────────────── tensor handles ─────────────────────────

struct TensorData {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

/// Shared handle to a tensor; clones are shallow and alias the same storage.
#[derive(Clone)]
pub struct Tensor(Rc<RefCell<TensorData>>);

impl Tensor {
    /// Builds a tensor, validating that `values.len()` matches the shape.
    pub fn new(shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> Result<Tensor> {
        if shape.is_empty() || shape.len() > 2 {
            return Err(Error::BadShape {
                op: "Tensor::new",
                expected: "a 1-D or 2-D shape".into(),
                got: shape,
            });
        }
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::BadShape {
                op: "Tensor::new",
                expected: format!("{} values for this shape", numel),
                got: shape,
            });
        }
        Ok(Tensor(Rc::new(RefCell::new(TensorData {
            shape,
            values,
            grad: None,
            requires_grad,
        }))))
    }

    /// Constant (non-differentiated) matrix with `m` rows and `n` columns.
    pub fn matrix(m: usize, n: usize, values: Vec<f64>) -> Result<Tensor> {
        Tensor::new(vec![m, n], values, false)
    }

    /// Trainable matrix with `m` rows and `n` columns.
    pub fn param_matrix(m: usize, n: usize, values: Vec<f64>) -> Result<Tensor> {
        Tensor::new(vec![m, n], values, true)
    }

    /// Constant row vector of shape `[n]`.
    pub fn vector(values: Vec<f64>) -> Tensor {
        let n = values.len();
        Tensor::new(vec![n], values, false).expect("vector shape always consistent")
    }

    /// Trainable row vector of shape `[n]`.
    pub fn param_vector(values: Vec<f64>) -> Tensor {
        let n = values.len();
        Tensor::new(vec![n], values, true).expect("vector shape always consistent")
    }

    /// Constant scalar of shape `[1]`.
    pub fn scalar(value: f64) -> Tensor {
        Tensor::vector(vec![value])
    }

    /// Zero-filled tensor.
    pub fn zeros(shape: Vec<usize>, requires_grad: bool) -> Result<Tensor> {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![0.0; numel], requires_grad)
    }

    fn data(&self) -> Ref<'_, TensorData> {
        self.0.borrow()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.data().shape.clone()
    }

    /// Number of rows; 1 for vectors.
    pub fn rows(&self) -> usize {
        let d = self.data();
        if d.shape.len() == 2 {
            d.shape[0]
        } else {
            1
        }
    }

    /// Number of columns (the trailing dimension).
    pub fn cols(&self) -> usize {
        let d = self.data();
        *d.shape.last().expect("shape never empty")
    }

    pub fn numel(&self) -> usize {
        self.data().values.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.data().requires_grad
    }

    /// Copies the values out.
    pub fn to_vec(&self) -> Vec<f64> {
        self.data().values.clone()
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> f64 {
        let d = self.data();
        debug_assert_eq!(d.values.len(), 1, "item() on non-scalar tensor");
        d.values[0]
    }

    /// Copies the accumulated gradient out, if any backward pass reached it.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.data().grad.clone()
    }

    /// Accumulated gradient, or zeros for leaves no backward pass reached.
    pub fn grad_or_zeros(&self) -> Vec<f64> {
        let d = self.data();
        d.grad.clone().unwrap_or_else(|| vec![0.0; d.values.len()])
    }

    /// Clears the gradient buffer.
    pub fn zero_grad(&self) {
        self.0.borrow_mut().grad = None;
    }

    /// Overwrites the values in place (used by the optimizer).
    pub fn set_values(&self, values: &[f64]) {
        let mut d = self.0.borrow_mut();
        assert_eq!(d.values.len(), values.len(), "set_values length mismatch");
        d.values.copy_from_slice(values);
    }

    /// True when both handles alias the same storage.
    pub fn same_storage(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    fn accumulate_grad(&self, delta: &[f64]) {
        let mut d = self.0.borrow_mut();
        let n = d.values.len();
        let grad = d.grad.get_or_insert_with(|| vec![0.0; n]);
        for (g, dv) in grad.iter_mut().zip(delta) {
            *g += dv;
        }
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let d = self.data();
        f.debug_struct("Tensor")
            .field("shape", &d.shape)
            .field("requires_grad", &d.requires_grad)
            .finish()
    }
}

// ───────────────────────── tape and operations ─────────────────────────

/// How `add`/`sub` operands lined up.
#[derive(Clone, Copy, Debug)]
enum Broadcast {
    /// Identical shapes.
    Same,
    /// Left is `[m, n]`, right is `[n]`, applied to every row.
    RowRight,
    /// Left is `[n]`, right is `[m, n]`.
    RowLeft,
}

#[derive(Clone, Copy, Debug)]
enum UnaryKind {
    Sin,
    Cos,
    Tanh,
    Silu,
    Relu,
    Abs,
    Square,
    Sqrt,
}

enum Op {
    MatMul,
    Transpose,
    Add(Broadcast),
    Sub(Broadcast),
    Mul,
    Scale(f64),
    AddScalar,
    Unary(UnaryKind),
    Sum,
    Mean,
    SliceCols { lo: usize },
    ConcatCols { widths: Vec<usize> },
    KanBasis { knots: Rc<[f64]>, degree: usize },
    /// Row-wise scalar field evaluation; the Jacobian (one gradient row per
    /// input row) is captured at forward time.
    FieldEval { jacobian: Vec<f64> },
}

struct Step {
    op: Op,
    inputs: Vec<Tensor>,
    output: Tensor,
}

/// Records operations for one forward pass; rebuilt per pass.
#[derive(Default)]
pub struct Tape {
    steps: Vec<Step>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    /// Number of recorded steps (differentiable operations).
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    fn record(&mut self, op: Op, inputs: Vec<Tensor>, output: &Tensor) {
        if inputs.iter().any(|t| t.requires_grad()) {
            output.0.borrow_mut().requires_grad = true;
            self.steps.push(Step {
                op,
                inputs,
                output: output.clone(),
            });
        }
    }

    // ── binary operations ──

    /// Matrix product of `[m, k] × [k, n] → [m, n]`.
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (ad, bd) = (a.data(), b.data());
        if ad.shape.len() != 2 || bd.shape.len() != 2 || ad.shape[1] != bd.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ad.shape.clone(),
                rhs: bd.shape.clone(),
            });
        }
        let (m, k, n) = (ad.shape[0], ad.shape[1], bd.shape[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(&ad.values, &bd.values, m, k, n, &mut out);
        drop((ad, bd));
        let out = Tensor::new(vec![m, n], out, false)?;
        self.record(Op::MatMul, vec![a.clone(), b.clone()], &out);
        Ok(out)
    }

    /// Matrix transpose `[m, n] → [n, m]`.
    pub fn transpose(&mut self, a: &Tensor) -> Result<Tensor> {
        let ad = a.data();
        if ad.shape.len() != 2 {
            return Err(Error::BadShape {
                op: "transpose",
                expected: "a 2-D matrix".into(),
                got: ad.shape.clone(),
            });
        }
        let (m, n) = (ad.shape[0], ad.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = ad.values[i * n + j];
            }
        }
        drop(ad);
        let out = Tensor::new(vec![n, m], out, false)?;
        self.record(Op::Transpose, vec![a.clone()], &out);
        Ok(out)
    }

    fn broadcast_case(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Broadcast> {
        let (ad, bd) = (a.data(), b.data());
        if ad.shape == bd.shape {
            return Ok(Broadcast::Same);
        }
        if ad.shape.len() == 2 && bd.shape.len() == 1 && ad.shape[1] == bd.shape[0] {
            return Ok(Broadcast::RowRight);
        }
        if ad.shape.len() == 1 && bd.shape.len() == 2 && ad.shape[0] == bd.shape[1] {
            return Ok(Broadcast::RowLeft);
        }
        Err(Error::ShapeMismatch {
            op,
            lhs: ad.shape.clone(),
            rhs: bd.shape.clone(),
        })
    }

    /// Elementwise sum, broadcasting an `[n]` vector over the rows of an
    /// `[m, n]` matrix (either operand order).
    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let case = Self::broadcast_case("add", a, b)?;
        let out = broadcast_zip(a, b, case, |x, y| x + y)?;
        self.record(Op::Add(case), vec![a.clone(), b.clone()], &out);
        Ok(out)
    }

    /// Elementwise difference with the same broadcasting rules as [`Tape::add`].
    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let case = Self::broadcast_case("sub", a, b)?;
        let out = broadcast_zip(a, b, case, |x, y| x - y)?;
        self.record(Op::Sub(case), vec![a.clone(), b.clone()], &out);
        Ok(out)
    }

    /// Elementwise product; shapes must match exactly.
    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (ad, bd) = (a.data(), b.data());
        if ad.shape != bd.shape {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: ad.shape.clone(),
                rhs: bd.shape.clone(),
            });
        }
        let values = ad
            .values
            .iter()
            .zip(&bd.values)
            .map(|(x, y)| x * y)
            .collect();
        let shape = ad.shape.clone();
        drop((ad, bd));
        let out = Tensor::new(shape, values, false)?;
        self.record(Op::Mul, vec![a.clone(), b.clone()], &out);
        Ok(out)
    }

    // ── scalar-parameter operations ──

    /// Multiplies every element by a constant.
    pub fn scale(&mut self, a: &Tensor, c: f64) -> Tensor {
        let out = map_values(a, |x| c * x);
        self.record(Op::Scale(c), vec![a.clone()], &out);
        out
    }

    /// Adds a constant to every element.
    pub fn add_scalar(&mut self, a: &Tensor, c: f64) -> Tensor {
        let out = map_values(a, |x| x + c);
        self.record(Op::AddScalar, vec![a.clone()], &out);
        out
    }

    // ── elementwise nonlinearities ──

    fn unary(&mut self, a: &Tensor, kind: UnaryKind) -> Tensor {
        let out = map_values(a, |x| unary_value(kind, x));
        self.record(Op::Unary(kind), vec![a.clone()], &out);
        out
    }

    pub fn sin(&mut self, a: &Tensor) -> Tensor {
        self.unary(a, UnaryKind::Sin)
    }

    pub fn cos(&mut self, a: &Tensor) -> Tensor {
        self.unary(a, UnaryKind::Cos)
    }

    pub fn tanh(&mut self, a: &Tensor) -> Tensor {
        self.unary(a, UnaryKind::Tanh)
    }

    /// SiLU (a.k.a. swish): `x·σ(x)`.
    pub fn silu(&mut self, a: &Tensor) -> Tensor {
        self.unary(a, UnaryKind::Silu)
    }

    /// Rectifier `max(x, 0)`; subgradient 0 at the kink.
    pub fn relu(&mut self, a: &Tensor) -> Tensor {
        self.unary(a, UnaryKind::Relu)
    }

    /// Absolute value; subgradient 0 at the kink.
    pub fn abs(&mut self, a: &Tensor) -> Tensor {
        self.unary(a, UnaryKind::Abs)
    }

    pub fn square(&mut self, a: &Tensor) -> Tensor {
        self.unary(a, UnaryKind::Square)
    }

    /// Elementwise square root; the derivative at 0 is taken as 0.
    pub fn sqrt(&mut self, a: &Tensor) -> Tensor {
        self.unary(a, UnaryKind::Sqrt)
    }

    // ── reductions ──

    /// Sum of all elements, as a `[1]` scalar.
    pub fn sum(&mut self, a: &Tensor) -> Tensor {
        let out = Tensor::scalar(a.data().values.iter().sum());
        self.record(Op::Sum, vec![a.clone()], &out);
        out
    }

    /// Mean of all elements, as a `[1]` scalar.
    pub fn mean(&mut self, a: &Tensor) -> Tensor {
        let d = a.data();
        let n = d.values.len().max(1);
        let out = Tensor::scalar(d.values.iter().sum::<f64>() / n as f64);
        drop(d);
        self.record(Op::Mean, vec![a.clone()], &out);
        out
    }

    // ── feature-axis surgery ──

    /// Columns `lo..hi` of a matrix.
    pub fn slice_cols(&mut self, a: &Tensor, lo: usize, hi: usize) -> Result<Tensor> {
        let ad = a.data();
        if ad.shape.len() != 2 || lo >= hi || hi > ad.shape[1] {
            return Err(Error::BadShape {
                op: "slice_cols",
                expected: format!("a 2-D matrix with at least {hi} columns"),
                got: ad.shape.clone(),
            });
        }
        let (m, n) = (ad.shape[0], ad.shape[1]);
        let w = hi - lo;
        let mut out = vec![0.0; m * w];
        for i in 0..m {
            out[i * w..(i + 1) * w].copy_from_slice(&ad.values[i * n + lo..i * n + hi]);
        }
        drop(ad);
        let out = Tensor::new(vec![m, w], out, false)?;
        self.record(Op::SliceCols { lo }, vec![a.clone()], &out);
        Ok(out)
    }

    /// Concatenates matrices with equal row counts along the feature axis.
    pub fn concat_cols(&mut self, parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::BadShape {
                op: "concat_cols",
                expected: "at least one operand".into(),
                got: vec![],
            });
        }
        let m = parts[0].rows();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let d = p.data();
            if d.shape.len() != 2 || d.shape[0] != m {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: parts[0].shape(),
                    rhs: d.shape.clone(),
                });
            }
            widths.push(d.shape[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; m * total];
        for i in 0..m {
            let mut off = 0;
            for (p, w) in parts.iter().zip(&widths) {
                let d = p.data();
                out[i * total + off..i * total + off + w]
                    .copy_from_slice(&d.values[i * w..(i + 1) * w]);
                off += w;
            }
        }
        let out = Tensor::new(vec![m, total], out, false)?;
        self.record(
            Op::ConcatCols { widths },
            parts.iter().map(|p| (*p).clone()).collect(),
            &out,
        );
        Ok(out)
    }

    // ── structured operations ──

    /// Evaluates the B-spline basis along every column: input `[m, n]` maps to
    /// `[m, n·nb]` where `nb` is the number of basis functions on the knot
    /// vector. Inputs outside the grid are clamped for the basis lookup.
    pub fn kan_basis(&mut self, a: &Tensor, knots: &Rc<[f64]>, degree: usize) -> Result<Tensor> {
        let ad = a.data();
        if ad.shape.len() != 2 {
            return Err(Error::BadShape {
                op: "kan_basis",
                expected: "a 2-D matrix".into(),
                got: ad.shape.clone(),
            });
        }
        let (m, n) = (ad.shape[0], ad.shape[1]);
        let nb = spline::basis_count(knots, degree);
        let mut out = vec![0.0; m * n * nb];
        let mut buf = vec![0.0; nb];
        for (i, x) in ad.values.iter().enumerate() {
            spline::basis_values(knots, degree, *x, &mut buf);
            out[i * nb..(i + 1) * nb].copy_from_slice(&buf);
        }
        drop(ad);
        let out = Tensor::new(vec![m, n * nb], out, false)?;
        self.record(
            Op::KanBasis {
                knots: Rc::clone(knots),
                degree,
            },
            vec![a.clone()],
            &out,
        );
        Ok(out)
    }

    /// Applies a differentiable scalar field row by row: `[m, k] → [m, 1]`.
    /// The field's analytic gradient is captured on the tape so adjoints flow
    /// back into the coordinates.
    pub fn field_eval(&mut self, a: &Tensor, field: &dyn ScalarField) -> Result<Tensor> {
        let ad = a.data();
        if ad.shape.len() != 2 || ad.shape[1] != field.dim() {
            return Err(Error::BadShape {
                op: "field_eval",
                expected: format!("a 2-D matrix with {} columns", field.dim()),
                got: ad.shape.clone(),
            });
        }
        let (m, k) = (ad.shape[0], ad.shape[1]);
        let mut values = vec![0.0; m];
        let mut jacobian = vec![0.0; m * k];
        for i in 0..m {
            let row = &ad.values[i * k..(i + 1) * k];
            values[i] = field.value(row);
            field.gradient(row, &mut jacobian[i * k..(i + 1) * k]);
        }
        drop(ad);
        let out = Tensor::new(vec![m, 1], values, false)?;
        self.record(Op::FieldEval { jacobian }, vec![a.clone()], &out);
        Ok(out)
    }

    // ── reverse pass ──

    /// Accumulates `∂root/∂t` into every `requires_grad` tensor reachable
    /// from `root` on this tape. The root must be a scalar.
    pub fn backward(&self, root: &Tensor) -> Result<()> {
        if root.numel() != 1 {
            return Err(Error::BadShape {
                op: "backward",
                expected: "a scalar root".into(),
                got: root.shape(),
            });
        }
        root.accumulate_grad(&[1.0]);
        for step in self.steps.iter().rev() {
            let Some(gout) = step.output.grad() else {
                continue;
            };
            backward_step(step, &gout);
        }
        Ok(())
    }
}

// ───────────────────────── forward helpers ─────────────────────────

fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

fn map_values(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let d = a.data();
    let values = d.values.iter().map(|x| f(*x)).collect();
    Tensor::new(d.shape.clone(), values, false).expect("shape preserved")
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn unary_value(kind: UnaryKind, x: f64) -> f64 {
    match kind {
        UnaryKind::Sin => x.sin(),
        UnaryKind::Cos => x.cos(),
        UnaryKind::Tanh => x.tanh(),
        UnaryKind::Silu => x * sigmoid(x),
        UnaryKind::Relu => x.max(0.0),
        UnaryKind::Abs => x.abs(),
        UnaryKind::Square => x * x,
        UnaryKind::Sqrt => x.sqrt(),
    }
}

/// Local derivative of a unary op given the input value `x` and output `y`.
fn unary_derivative(kind: UnaryKind, x: f64, y: f64) -> f64 {
    match kind {
        UnaryKind::Sin => x.cos(),
        UnaryKind::Cos => -x.sin(),
        UnaryKind::Tanh => 1.0 - y * y,
        UnaryKind::Silu => {
            let s = sigmoid(x);
            s * (1.0 + x * (1.0 - s))
        }
        UnaryKind::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        UnaryKind::Abs => {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        UnaryKind::Square => 2.0 * x,
        UnaryKind::Sqrt => {
            if x == 0.0 {
                0.0
            } else {
                0.5 / y
            }
        }
    }
}

fn broadcast_zip(a: &Tensor, b: &Tensor, case: Broadcast, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let (ad, bd) = (a.data(), b.data());
    match case {
        Broadcast::Same => {
            let values = ad
                .values
                .iter()
                .zip(&bd.values)
                .map(|(x, y)| f(*x, *y))
                .collect();
            Tensor::new(ad.shape.clone(), values, false)
        }
        Broadcast::RowRight => {
            let (m, n) = (ad.shape[0], ad.shape[1]);
            let mut values = Vec::with_capacity(m * n);
            for i in 0..m {
                for j in 0..n {
                    values.push(f(ad.values[i * n + j], bd.values[j]));
                }
            }
            Tensor::new(vec![m, n], values, false)
        }
        Broadcast::RowLeft => {
            let (m, n) = (bd.shape[0], bd.shape[1]);
            let mut values = Vec::with_capacity(m * n);
            for i in 0..m {
                for j in 0..n {
                    values.push(f(ad.values[j], bd.values[i * n + j]));
                }
            }
            Tensor::new(vec![m, n], values, false)
        }
    }
}

// ───────────────────────── reverse helpers ─────────────────────────

/// Sums a `[m, n]` adjoint over rows, producing the `[n]` adjoint of a
/// broadcast row vector.
fn sum_rows(g: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for i in 0..m {
        for j in 0..n {
            out[j] += g[i * n + j];
        }
    }
    out
}

fn backward_step(step: &Step, gout: &[f64]) {
    match &step.op {
        Op::MatMul => {
            let (a, b) = (&step.inputs[0], &step.inputs[1]);
            let (m, k) = (a.rows(), a.cols());
            let n = b.cols();
            if a.requires_grad() {
                // dA = dC · Bᵀ
                let bd = b.data();
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for j in 0..n {
                        let g = gout[i * n + j];
                        if g == 0.0 {
                            continue;
                        }
                        for p in 0..k {
                            da[i * k + p] += g * bd.values[p * n + j];
                        }
                    }
                }
                drop(bd);
                a.accumulate_grad(&da);
            }
            if b.requires_grad() {
                // dB = Aᵀ · dC
                let ad = a.data();
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let av = ad.values[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            db[p * n + j] += av * gout[i * n + j];
                        }
                    }
                }
                drop(ad);
                b.accumulate_grad(&db);
            }
        }
        Op::Transpose => {
            let a = &step.inputs[0];
            if a.requires_grad() {
                let (m, n) = (a.rows(), a.cols());
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = gout[j * m + i];
                    }
                }
                a.accumulate_grad(&da);
            }
        }
        Op::Add(case) => {
            let (a, b) = (&step.inputs[0], &step.inputs[1]);
            accumulate_broadcast(a, gout, *case, Side::Left, 1.0);
            accumulate_broadcast(b, gout, *case, Side::Right, 1.0);
        }
        Op::Sub(case) => {
            let (a, b) = (&step.inputs[0], &step.inputs[1]);
            accumulate_broadcast(a, gout, *case, Side::Left, 1.0);
            accumulate_broadcast(b, gout, *case, Side::Right, -1.0);
        }
        Op::Mul => {
            let (a, b) = (&step.inputs[0], &step.inputs[1]);
            if a.requires_grad() {
                let bd = b.data();
                let da: Vec<f64> = gout.iter().zip(&bd.values).map(|(g, y)| g * y).collect();
                drop(bd);
                a.accumulate_grad(&da);
            }
            if b.requires_grad() {
                let ad = a.data();
                let db: Vec<f64> = gout.iter().zip(&ad.values).map(|(g, x)| g * x).collect();
                drop(ad);
                b.accumulate_grad(&db);
            }
        }
        Op::Scale(c) => {
            let a = &step.inputs[0];
            if a.requires_grad() {
                let da: Vec<f64> = gout.iter().map(|g| g * c).collect();
                a.accumulate_grad(&da);
            }
        }
        Op::AddScalar => {
            let a = &step.inputs[0];
            if a.requires_grad() {
                a.accumulate_grad(gout);
            }
        }
        Op::Unary(kind) => {
            let a = &step.inputs[0];
            if a.requires_grad() {
                let ad = a.data();
                let od = step.output.data();
                let da: Vec<f64> = gout
                    .iter()
                    .zip(ad.values.iter().zip(&od.values))
                    .map(|(g, (x, y))| g * unary_derivative(*kind, *x, *y))
                    .collect();
                drop((ad, od));
                a.accumulate_grad(&da);
            }
        }
        Op::Sum => {
            let a = &step.inputs[0];
            if a.requires_grad() {
                a.accumulate_grad(&vec![gout[0]; a.numel()]);
            }
        }
        Op::Mean => {
            let a = &step.inputs[0];
            if a.requires_grad() {
                let n = a.numel().max(1);
                a.accumulate_grad(&vec![gout[0] / n as f64; a.numel()]);
            }
        }
        Op::SliceCols { lo } => {
            let a = &step.inputs[0];
            if a.requires_grad() {
                let (m, n) = (a.rows(), a.cols());
                let w = step.output.cols();
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..w {
                        da[i * n + lo + j] = gout[i * w + j];
                    }
                }
                a.accumulate_grad(&da);
            }
        }
        Op::ConcatCols { widths } => {
            let total: usize = widths.iter().sum();
            let m = step.output.rows();
            let mut off = 0;
            for (part, w) in step.inputs.iter().zip(widths) {
                if part.requires_grad() {
                    let mut dp = vec![0.0; m * w];
                    for i in 0..m {
                        dp[i * w..(i + 1) * w]
                            .copy_from_slice(&gout[i * total + off..i * total + off + w]);
                    }
                    part.accumulate_grad(&dp);
                }
                off += w;
            }
        }
        Op::KanBasis { knots, degree } => {
            let a = &step.inputs[0];
            if a.requires_grad() {
                let ad = a.data();
                let nb = spline::basis_count(knots, *degree);
                let mut da = vec![0.0; ad.values.len()];
                let mut dbuf = vec![0.0; nb];
                for (i, x) in ad.values.iter().enumerate() {
                    spline::basis_derivatives(knots, *degree, *x, &mut dbuf);
                    let grow = &gout[i * nb..(i + 1) * nb];
                    da[i] = grow.iter().zip(&dbuf).map(|(g, d)| g * d).sum();
                }
                drop(ad);
                a.accumulate_grad(&da);
            }
        }
        Op::FieldEval { jacobian } => {
            let a = &step.inputs[0];
            if a.requires_grad() {
                let (m, k) = (a.rows(), a.cols());
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    let g = gout[i];
                    if g == 0.0 {
                        continue;
                    }
                    for j in 0..k {
                        da[i * k + j] = g * jacobian[i * k + j];
                    }
                }
                a.accumulate_grad(&da);
            }
        }
    }
}

#[derive(Clone, Copy)]
enum Side {
    Left,
    Right,
}

/// Routes an `add`/`sub` adjoint to one operand, summing over the batch when
/// that operand was the broadcast row vector.
fn accumulate_broadcast(t: &Tensor, gout: &[f64], case: Broadcast, side: Side, sign: f64) {
    if !t.requires_grad() {
        return;
    }
    let broadcast_row = matches!(
        (case, side),
        (Broadcast::RowRight, Side::Right) | (Broadcast::RowLeft, Side::Left)
    );
    let delta: Vec<f64> = if broadcast_row {
        let n = t.cols();
        let m = gout.len() / n;
        sum_rows(gout, m, n).into_iter().map(|g| g * sign).collect()
    } else {
        gout.iter().map(|g| g * sign).collect()
    };
    t.accumulate_grad(&delta);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_values() {
        let mut tape = Tape::new();
        let a = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::matrix(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = tape.matmul(&a, &b).unwrap();
        assert_eq!(c.to_vec(), vec![58.0, 64.0, 139.0, 154.0]);
        // Neither input requires grad, so nothing is recorded.
        assert!(tape.is_empty());
    }

    #[test]
    fn matmul_shape_error_names_operands() {
        let mut tape = Tape::new();
        let a = Tensor::matrix(2, 3, vec![0.0; 6]).unwrap();
        let b = Tensor::matrix(2, 2, vec![0.0; 4]).unwrap();
        let err = tape.matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]") && msg.contains("[2, 2]"));
    }

    #[test]
    fn bias_broadcast_and_row_sum_gradient() {
        let mut tape = Tape::new();
        let x = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::param_vector(vec![10.0, 20.0]);
        let y = tape.add(&x, &b).unwrap();
        assert_eq!(y.to_vec(), vec![11.0, 22.0, 13.0, 24.0, 15.0, 26.0]);
        let loss = tape.sum(&y);
        tape.backward(&loss).unwrap();
        // Each bias coordinate is used in every one of the 3 rows.
        assert_eq!(b.grad().unwrap(), vec![3.0, 3.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::new();
        let a = Tensor::param_vector(vec![1.0, 2.0]);
        let y = tape.square(&a);
        assert!(tape.backward(&y).is_err());
    }

    #[test]
    fn unreachable_leaf_has_zero_grad() {
        let mut tape = Tape::new();
        let a = Tensor::param_vector(vec![1.0, 2.0]);
        let b = Tensor::param_vector(vec![3.0, 4.0]);
        let sq = tape.square(&a);
        let loss = tape.sum(&sq);
        tape.backward(&loss).unwrap();
        assert_eq!(a.grad().unwrap(), vec![2.0, 4.0]);
        assert!(b.grad().is_none());
        assert_eq!(b.grad_or_zeros(), vec![0.0, 0.0]);
    }

    #[test]
    fn grad_accumulates_across_uses() {
        // f = sum(a ⊙ a) + sum(a): df/da = 2a + 1.
        let mut tape = Tape::new();
        let a = Tensor::param_vector(vec![1.0, -2.0, 0.5]);
        let sq = tape.mul(&a, &a).unwrap();
        let s1 = tape.sum(&sq);
        let s2 = tape.sum(&a);
        let loss = tape.add(&s1, &s2).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(a.grad().unwrap(), vec![3.0, -3.0, 2.0]);
    }

    #[test]
    fn empty_batch_flows_through() {
        let mut tape = Tape::new();
        let x = Tensor::matrix(0, 3, vec![]).unwrap();
        let w = Tensor::param_matrix(3, 2, vec![0.1; 6]).unwrap();
        let y = tape.matmul(&x, &w).unwrap();
        assert_eq!(y.shape(), vec![0, 2]);
        let z = tape.tanh(&y);
        assert_eq!(z.numel(), 0);
    }

    #[test]
    fn slice_concat_roundtrip() {
        let mut tape = Tape::new();
        let a = Tensor::param_matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let left = tape.slice_cols(&a, 0, 1).unwrap();
        let right = tape.slice_cols(&a, 1, 3).unwrap();
        let back = tape.concat_cols(&[&left, &right]).unwrap();
        assert_eq!(back.to_vec(), a.to_vec());
        let loss = tape.sum(&back);
        tape.backward(&loss).unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0; 6]);
    }
}
