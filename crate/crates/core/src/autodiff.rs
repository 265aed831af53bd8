//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! A `Tape` records every operation as it executes (define-by-run, eager
//! values). The backward pass emits its vector-Jacobian products as new tape
//! nodes, so a gradient is itself a differentiable graph — this is what makes
//! double backpropagation (gradient-of-gradient penalties) work with one
//! mechanism.
//!
//! Conventions:
//! - nodes are appended in execution order, so node ids are already a
//!   topological order; the backward pass walks ids in reverse and visits
//!   every node exactly once;
//! - `sign(0) == 0` for `Sign`, `Abs`, and every gradient-sign path;
//! - a tape is single-threaded; distinct tapes on distinct threads share
//!   nothing.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{matmul, Tensor};

pub type NodeId = usize;

/// Fixed index map used by `Gather`/`Scatter`. An entry of `NONE` reads as
/// zero (gather) or drops the element (scatter).
#[derive(Debug)]
pub struct IndexPlan {
    pub indices: Vec<i64>,
    pub out_shape: Vec<usize>,
}

pub const NONE_INDEX: i64 = -1;

// Some payloads (the AddScalar constant, the Sign input) are recorded for the
// trace but not consulted by any VJP.
#[allow(dead_code)]
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    /// (n×m) + row vector (m), broadcast over rows.
    AddRowVec(NodeId, NodeId),
    /// (n×m) ∘ column vector (n), broadcast over columns.
    MulColVec(NodeId, NodeId),
    SumAll(NodeId),
    /// n×m → n (sum over columns within each row).
    SumRows(NodeId),
    /// n×m → m (sum over rows within each column).
    SumCols(NodeId),
    Relu(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    Abs(NodeId),
    Sign(NodeId),
    /// |x|^c with c ≥ 1 (so the derivative exponent stays non-negative).
    AbsPow(NodeId, f64),
    /// x^c for strictly positive x.
    PowScalar(NodeId, f64),
    /// Row-wise log(Softmax(z / tau)).
    LogSoftmaxRows(NodeId, f64),
    Gather(NodeId, Arc<IndexPlan>),
    Scatter(NodeId, Arc<IndexPlan>),
}

struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
}

/// A computation record. Cheap to clone (shared handle).
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

/// Handle to a node on a tape.
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: NodeId,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op, value: Tensor) -> Var {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node { op, value });
        Var { tape: self.clone(), id }
    }

    /// Leaf node: differentiation targets and constants are both leaves; the
    /// caller decides which ids it asks gradients for.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn scalar(&self, v: f64) -> Var {
        self.leaf(Tensor::scalar(v))
    }

    fn value_of(&self, id: NodeId) -> Tensor {
        self.inner.borrow().nodes[id].value.clone()
    }

    fn shape_of(&self, id: NodeId) -> Vec<usize> {
        self.inner.borrow().nodes[id].value.shape().to_vec()
    }

    fn with_values<R>(&self, ids: &[NodeId], f: impl FnOnce(&[&Tensor]) -> R) -> R {
        let inner = self.inner.borrow();
        let refs: Vec<&Tensor> = ids.iter().map(|&i| &inner.nodes[i].value).collect();
        f(&refs)
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let values = a.values().iter().zip(b.values()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), values).expect("zip_map preserves shape")
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl Var {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape_of(self.id)
    }

    pub fn item(&self) -> Result<f64> {
        self.value().item()
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.tape.with_values(&[self.id], |vs| vs[0].map(&f));
        self.tape.push(op, value)
    }

    fn binary_elementwise(
        &self,
        name: &'static str,
        other: &Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let value = self.tape.with_values(&[self.id, other.id], |vs| {
            same_shape(name, vs[0], vs[1]).map(|_| zip_map(vs[0], vs[1], &f))
        })?;
        Ok(self.tape.push(op, value))
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.binary_elementwise("add", other, Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.binary_elementwise("sub", other, Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.binary_elementwise("mul", other, Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn div(&self, other: &Var) -> Result<Var> {
        self.binary_elementwise("div", other, Op::Div(self.id, other.id), |a, b| a / b)
    }

    pub fn neg(&self) -> Var {
        self.unary(Op::Neg(self.id), |v| -v)
    }

    pub fn scale(&self, c: f64) -> Var {
        self.unary(Op::Scale(self.id, c), |v| c * v)
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        self.unary(Op::AddScalar(self.id, c), |v| v + c)
    }

    pub fn relu(&self) -> Var {
        self.unary(Op::Relu(self.id), |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn tanh(&self) -> Var {
        self.unary(Op::Tanh(self.id), f64::tanh)
    }

    pub fn exp(&self) -> Var {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn log(&self) -> Var {
        self.unary(Op::Log(self.id), f64::ln)
    }

    pub fn sqrt(&self) -> Var {
        self.unary(Op::Sqrt(self.id), f64::sqrt)
    }

    pub fn abs(&self) -> Var {
        self.unary(Op::Abs(self.id), f64::abs)
    }

    /// Entrywise sign with sign(0) = 0. Derivative is zero almost everywhere
    /// and is treated as identically zero.
    pub fn sign(&self) -> Var {
        self.unary(Op::Sign(self.id), sign)
    }

    /// |x|^c for c ≥ 1.
    pub fn abs_pow(&self, c: f64) -> Result<Var> {
        if c < 1.0 {
            return Err(Error::invalid(format!("abs_pow exponent must be >= 1, got {c}")));
        }
        Ok(self.unary(Op::AbsPow(self.id, c), |v| v.abs().powf(c)))
    }

    /// x^c for positive x (norm roots and similar).
    pub fn pow_scalar(&self, c: f64) -> Var {
        self.unary(Op::PowScalar(self.id, c), |v| v.powf(c))
    }

    pub fn matmul(&self, other: &Var) -> Result<Var> {
        let value =
            self.tape.with_values(&[self.id, other.id], |vs| matmul(vs[0], vs[1]))?;
        Ok(self.tape.push(Op::MatMul(self.id, other.id), value))
    }

    pub fn transpose(&self) -> Var {
        let value = self.tape.with_values(&[self.id], |vs| {
            let (n, m) = vs[0].dims2();
            let src = vs[0].values();
            let mut out = vec![0.0; n * m];
            for i in 0..n {
                for j in 0..m {
                    out[j * n + i] = src[i * m + j];
                }
            }
            Tensor::new(vec![m, n], out).expect("transpose shape")
        });
        self.tape.push(Op::Transpose(self.id), value)
    }

    /// (n×m) + (m,) with the row vector broadcast over rows.
    pub fn add_row_vec(&self, row: &Var) -> Result<Var> {
        let value = self.tape.with_values(&[self.id, row.id], |vs| {
            let (n, m) = vs[0].dims2();
            if vs[1].numel() != m {
                return Err(Error::shape(
                    "add_row_vec",
                    format!("matrix {:?} with row {:?}", vs[0].shape(), vs[1].shape()),
                ));
            }
            let a = vs[0].values();
            let r = vs[1].values();
            let mut out = Vec::with_capacity(n * m);
            for i in 0..n {
                for j in 0..m {
                    out.push(a[i * m + j] + r[j]);
                }
            }
            Tensor::new(vs[0].shape().to_vec(), out)
        })?;
        Ok(self.tape.push(Op::AddRowVec(self.id, row.id), value))
    }

    /// (n×m) ∘ (n,) with the column vector broadcast over columns.
    pub fn mul_col_vec(&self, col: &Var) -> Result<Var> {
        let value = self.tape.with_values(&[self.id, col.id], |vs| {
            let (n, m) = vs[0].dims2();
            if vs[1].numel() != n {
                return Err(Error::shape(
                    "mul_col_vec",
                    format!("matrix {:?} with column {:?}", vs[0].shape(), vs[1].shape()),
                ));
            }
            let a = vs[0].values();
            let c = vs[1].values();
            let mut out = Vec::with_capacity(n * m);
            for i in 0..n {
                for j in 0..m {
                    out.push(a[i * m + j] * c[i]);
                }
            }
            Tensor::new(vs[0].shape().to_vec(), out)
        })?;
        Ok(self.tape.push(Op::MulColVec(self.id, col.id), value))
    }

    pub fn sum_all(&self) -> Var {
        let value = self
            .tape
            .with_values(&[self.id], |vs| Tensor::scalar(vs[0].values().iter().sum()));
        self.tape.push(Op::SumAll(self.id), value)
    }

    pub fn sum_rows(&self) -> Var {
        let value = self.tape.with_values(&[self.id], |vs| {
            let (n, m) = vs[0].dims2();
            let a = vs[0].values();
            let out: Vec<f64> = (0..n).map(|i| a[i * m..(i + 1) * m].iter().sum()).collect();
            Tensor::from_vec(out)
        });
        self.tape.push(Op::SumRows(self.id), value)
    }

    pub fn sum_cols(&self) -> Var {
        let value = self.tape.with_values(&[self.id], |vs| {
            let (n, m) = vs[0].dims2();
            let a = vs[0].values();
            let mut out = vec![0.0; m];
            for i in 0..n {
                for j in 0..m {
                    out[j] += a[i * m + j];
                }
            }
            Tensor::from_vec(out)
        });
        self.tape.push(Op::SumCols(self.id), value)
    }

    /// Row-wise log-softmax of logits divided by `tau` (max-shifted, stable).
    pub fn log_softmax_rows(&self, tau: f64) -> Result<Var> {
        if tau <= 0.0 {
            return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
        }
        let value = self.tape.with_values(&[self.id], |vs| {
            let (n, m) = vs[0].dims2();
            let a = vs[0].values();
            let mut out = Vec::with_capacity(n * m);
            for i in 0..n {
                let row = &a[i * m..(i + 1) * m];
                let mx = row.iter().fold(f64::NEG_INFINITY, |acc, &v| acc.max(v / tau));
                let lse = mx
                    + row.iter().map(|&v| (v / tau - mx).exp()).sum::<f64>().ln();
                out.extend(row.iter().map(|&v| v / tau - lse));
            }
            Tensor::new(vs[0].shape().to_vec(), out).expect("log_softmax shape")
        });
        Ok(self.tape.push(Op::LogSoftmaxRows(self.id, tau), value))
    }

    /// Fixed re-indexing (slice / reshape-with-permutation / broadcast).
    pub fn gather(&self, plan: Arc<IndexPlan>) -> Result<Var> {
        let value = self.tape.with_values(&[self.id], |vs| {
            let src = vs[0].values();
            let mut out = Vec::with_capacity(plan.indices.len());
            for &ix in &plan.indices {
                if ix == NONE_INDEX {
                    out.push(0.0);
                } else {
                    let ix = ix as usize;
                    if ix >= src.len() {
                        return Err(Error::shape(
                            "gather",
                            format!("index {} out of range {}", ix, src.len()),
                        ));
                    }
                    out.push(src[ix]);
                }
            }
            Tensor::new(plan.out_shape.clone(), out)
        })?;
        Ok(self.tape.push(Op::Gather(self.id, plan), value))
    }

    /// Adjoint of `gather`: adds element i of self into `plan.indices[i]` of a
    /// zero tensor of `plan.out_shape`.
    pub fn scatter(&self, plan: Arc<IndexPlan>) -> Result<Var> {
        let value = self.tape.with_values(&[self.id], |vs| {
            let src = vs[0].values();
            if src.len() != plan.indices.len() {
                return Err(Error::shape(
                    "scatter",
                    format!("plan covers {} elements, input has {}", plan.indices.len(), src.len()),
                ));
            }
            let mut out = Tensor::zeros(plan.out_shape.clone());
            let ov = out.values_mut();
            for (i, &ix) in plan.indices.iter().enumerate() {
                if ix != NONE_INDEX {
                    ov[ix as usize] += src[i];
                }
            }
            Ok(out)
        })?;
        Ok(self.tape.push(Op::Scatter(self.id, plan), value))
    }

    /// Extract element `k` of a vector-shaped node as a scalar node.
    pub fn index(&self, k: usize) -> Result<Var> {
        let n = self.value().numel();
        if k >= n {
            return Err(Error::shape("index", format!("index {k} out of range {n}")));
        }
        self.gather(Arc::new(IndexPlan { indices: vec![k as i64], out_shape: vec![1] }))
    }

    /// Gradient values of this scalar node with respect to `wrt`.
    pub fn gradient(&self, wrt: &Var) -> Result<Tensor> {
        Ok(self.gradient_graph(wrt)?.value())
    }

    /// Gradient of this scalar node as a differentiable graph node.
    ///
    /// Disconnected targets yield a zero tensor of the target's shape.
    pub fn gradient_graph(&self, wrt: &Var) -> Result<Var> {
        let grads = backward(self, &[wrt.clone()])?;
        Ok(grads.into_iter().next().expect("one target"))
    }

    pub fn gradient_graph_multi(&self, wrt: &[Var]) -> Result<Vec<Var>> {
        backward(self, wrt)
    }
}

/// Reverse pass from scalar `output`, emitting adjoints as new tape nodes.
fn backward(output: &Var, wrt: &[Var]) -> Result<Vec<Var>> {
    let tape = output.tape.clone();
    let out_len = output.value().numel();
    if out_len != 1 {
        return Err(Error::NonScalarOutput { len: out_len });
    }
    // Nodes appended by the backward pass itself live past this snapshot and
    // are never revisited.
    let frontier = output.id + 1;
    let mut adjoint: Vec<Option<Var>> = (0..frontier).map(|_| None).collect();
    adjoint[output.id] = Some(tape.scalar(1.0));

    for id in (0..frontier).rev() {
        let Some(dy) = adjoint[id].clone() else { continue };
        let op = tape.inner.borrow().nodes[id].op.clone();
        let node_var = Var { tape: tape.clone(), id };
        for (src, contrib) in vjp(&tape, &op, &node_var, &dy)? {
            adjoint[src] = Some(match adjoint[src].take() {
                Some(existing) => existing.add(&contrib)?,
                None => contrib,
            });
        }
    }

    let mut out = Vec::with_capacity(wrt.len());
    for w in wrt {
        match adjoint.get(w.id).and_then(|a| a.clone()) {
            Some(g) => out.push(g),
            None => out.push(tape.leaf(Tensor::zeros(w.shape()))),
        }
    }
    Ok(out)
}

/// Vector-Jacobian product of one op, expressed in tape primitives so the
/// result stays differentiable.
fn vjp(tape: &Tape, op: &Op, node: &Var, dy: &Var) -> Result<Vec<(NodeId, Var)>> {
    let var = |id: NodeId| Var { tape: tape.clone(), id };
    Ok(match op {
        Op::Leaf => vec![],
        Op::Add(a, b) => vec![(*a, dy.clone()), (*b, dy.clone())],
        Op::Sub(a, b) => vec![(*a, dy.clone()), (*b, dy.neg())],
        Op::Mul(a, b) => {
            vec![(*a, dy.mul(&var(*b))?), (*b, dy.mul(&var(*a))?)]
        }
        Op::Div(a, b) => {
            let bv = var(*b);
            let da = dy.div(&bv)?;
            let db = dy.mul(&var(*a))?.div(&bv.mul(&bv)?)?.neg();
            vec![(*a, da), (*b, db)]
        }
        Op::Neg(a) => vec![(*a, dy.neg())],
        Op::Scale(a, c) => vec![(*a, dy.scale(*c))],
        Op::AddScalar(a, _) => vec![(*a, dy.clone())],
        Op::MatMul(a, b) => {
            let da = dy.matmul(&var(*b).transpose())?;
            let db = var(*a).transpose().matmul(dy)?;
            vec![(*a, da), (*b, db)]
        }
        Op::Transpose(a) => vec![(*a, dy.transpose())],
        Op::AddRowVec(a, r) => vec![(*a, dy.clone()), (*r, dy.sum_cols())],
        Op::MulColVec(a, c) => {
            let da = dy.mul_col_vec(&var(*c))?;
            let dc = dy.mul(&var(*a))?.sum_rows();
            vec![(*a, da), (*c, dc)]
        }
        Op::SumAll(a) => {
            let shape = tape.shape_of(*a);
            let n: usize = shape.iter().product();
            let plan = Arc::new(IndexPlan { indices: vec![0; n], out_shape: shape });
            vec![(*a, dy.gather(plan)?)]
        }
        Op::SumRows(a) => {
            let shape = tape.shape_of(*a);
            let (n, m) = (shape[0], shape[1..].iter().product::<usize>());
            let indices = (0..n).flat_map(|i| std::iter::repeat(i as i64).take(m)).collect();
            let plan = Arc::new(IndexPlan { indices, out_shape: shape });
            vec![(*a, dy.gather(plan)?)]
        }
        Op::SumCols(a) => {
            let shape = tape.shape_of(*a);
            let (n, m) = (shape[0], shape[1..].iter().product::<usize>());
            let indices = (0..n).flat_map(|_| 0..m as i64).collect();
            let plan = Arc::new(IndexPlan { indices, out_shape: shape });
            vec![(*a, dy.gather(plan)?)]
        }
        Op::Relu(a) => {
            // Mask is sign of the output: 1 where input > 0, else 0.
            vec![(*a, dy.mul(&node.sign())?)]
        }
        Op::Tanh(a) => {
            let one_minus_sq = node.mul(node)?.neg().add_scalar(1.0);
            vec![(*a, dy.mul(&one_minus_sq)?)]
        }
        Op::Exp(a) => vec![(*a, dy.mul(node)?)],
        Op::Log(a) => vec![(*a, dy.div(&var(*a))?)],
        Op::Sqrt(a) => vec![(*a, dy.scale(0.5).div(node)?)],
        Op::Abs(a) => vec![(*a, dy.mul(&var(*a).sign())?)],
        Op::Sign(_) => vec![],
        Op::AbsPow(a, c) => {
            let x = var(*a);
            let inner = if (*c - 1.0).abs() < f64::EPSILON {
                x.sign()
            } else {
                x.sign().mul(&x.abs_pow(*c - 1.0)?)?
            };
            vec![(*a, dy.mul(&inner.scale(*c))?)]
        }
        Op::PowScalar(a, c) => {
            let x = var(*a);
            vec![(*a, dy.mul(&x.pow_scalar(*c - 1.0).scale(*c))?)]
        }
        Op::LogSoftmaxRows(a, tau) => {
            // dz = (dy - softmax ∘ rowsum(dy)) / tau, with softmax = exp(self).
            let soft = node.exp();
            let correction = soft.mul_col_vec(&dy.sum_rows())?;
            vec![(*a, dy.sub(&correction)?.scale(1.0 / *tau))]
        }
        Op::Gather(a, plan) => {
            let in_shape = tape.shape_of(*a);
            let back = Arc::new(IndexPlan { indices: plan.indices.clone(), out_shape: in_shape });
            vec![(*a, dy.scatter(back)?)]
        }
        Op::Scatter(a, plan) => {
            let in_shape = tape.shape_of(*a);
            let back = Arc::new(IndexPlan { indices: plan.indices.clone(), out_shape: in_shape });
            vec![(*a, dy.gather(back)?)]
        }
    })
}

/// Row-wise softmax on plain values (no tape).
pub fn softmax_rows_values(logits: &Tensor, tau: f64) -> Tensor {
    let (n, m) = logits.dims2();
    let a = logits.values();
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        let row = &a[i * m..(i + 1) * m];
        let mx = row.iter().fold(f64::NEG_INFINITY, |acc, &v| acc.max(v / tau));
        let exps: Vec<f64> = row.iter().map(|&v| (v / tau - mx).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|&e| e / z));
    }
    Tensor::new(logits.shape().to_vec(), out).expect("softmax shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng, Stream};
    use rand::Rng;

    fn finite_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        for i in 0..x.len() {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[i] += h;
            xm[i] -= h;
            g[i] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
            .fold(0.0, f64::max)
    }

    #[test]
    fn quadratic_gradient() {
        // d/dx (x·x) at (1,2) = (2,4)
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let y = x.mul(&x).unwrap().sum_all();
        let g = y.gradient(&x).unwrap();
        assert_eq!(g.values(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let c = tape.scalar(3.0);
        let g = c.gradient(&x).unwrap();
        assert_eq!(g.values(), &[0.0, 0.0]);
        assert_eq!(g.shape(), &[2]);
    }

    #[test]
    fn non_scalar_output_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let y = x.scale(2.0);
        assert!(matches!(y.gradient(&x), Err(Error::NonScalarOutput { len: 2 })));
    }

    #[test]
    fn shape_mismatch_reports_dimensions() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let b = tape.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let err = a.add(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2]") && msg.contains("[3]"), "{msg}");
    }

    #[test]
    fn affine_identity_case() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let w = tape.leaf(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = tape.leaf(Tensor::from_vec(vec![0.0, 0.0]));
        let y = x.matmul(&w).unwrap().add_row_vec(&b).unwrap();
        assert_eq!(y.value().values(), &[1.0, 2.0]);
    }

    #[test]
    fn softmax_symmetry_and_relu() {
        let tape = Tape::new();
        let z = tape.leaf(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let s = z.log_softmax_rows(1.0).unwrap().exp();
        assert!((s.value().values()[0] - 0.5).abs() < 1e-15);
        assert!((s.value().values()[1] - 0.5).abs() < 1e-15);

        let x = tape.leaf(Tensor::from_vec(vec![-1.0, 2.0]));
        assert_eq!(x.relu().value().values(), &[0.0, 2.0]);
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        // Linear-softmax model, loss = -log softmax(xW)[y].
        let mut r = rng(11, Stream::Verify, 0);
        let d = 5;
        let k = 3;
        let w: Vec<f64> = (0..d * k).map(|_| r.random_range(-1.0..1.0)).collect();
        let x0: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
        let loss = |xv: &[f64]| -> f64 {
            let tape = Tape::new();
            let x = tape.leaf(Tensor::matrix(1, d, xv.to_vec()).unwrap());
            let wv = tape.leaf(Tensor::matrix(d, k, w.clone()).unwrap());
            let ls = x.matmul(&wv).unwrap().log_softmax_rows(1.0).unwrap();
            -ls.value().values()[1]
        };
        let tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(1, d, x0.clone()).unwrap());
        let wv = tape.leaf(Tensor::matrix(d, k, w.clone()).unwrap());
        let ls = x.matmul(&wv).unwrap().log_softmax_rows(1.0).unwrap();
        let l = ls.index(1).unwrap().neg();
        let g = l.gradient(&x).unwrap();
        let fd = finite_diff(loss, &x0, 1e-5);
        assert!(max_rel_err(g.values(), &fd) < 1e-4);
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        // Composite graph touching each differentiable primitive, checked over
        // 100 seeds against central differences.
        for seed in 0..100u64 {
            let mut r = rng(seed, Stream::Verify, 7);
            let n = 2;
            let m = 3;
            let x0: Vec<f64> = (0..n * m).map(|_| r.random_range(0.3..1.7)).collect();
            let c0: Vec<f64> = (0..n).map(|_| r.random_range(0.5..1.5)).collect();
            let b0: Vec<f64> = (0..m).map(|_| r.random_range(-0.5..0.5)).collect();
            let f = |xv: &[f64]| -> (Tape, Var, Var) {
                let tape = Tape::new();
                let x = tape.leaf(Tensor::matrix(n, m, xv.to_vec()).unwrap());
                let col = tape.leaf(Tensor::from_vec(c0.clone()));
                let row = tape.leaf(Tensor::from_vec(b0.clone()));
                let a = x.add_row_vec(&row).unwrap().mul_col_vec(&col).unwrap();
                let t1 = a.tanh().exp().log(); // log(exp(tanh)) keeps values positive-safe
                let t2 = a.abs_pow(1.7).unwrap().add_scalar(0.1).sqrt();
                let t3 = a.mul(&a).unwrap().add_scalar(0.2).pow_scalar(0.6);
                let t4 = a.relu().sub(&a.abs()).unwrap();
                let quad = a.matmul(&a.transpose()).unwrap(); // n×n
                let mix = t1
                    .add(&t2)
                    .unwrap()
                    .add(&t3)
                    .unwrap()
                    .add(&t4)
                    .unwrap();
                let ls = a.log_softmax_rows(2.0).unwrap();
                let total = mix
                    .sum_all()
                    .add(&quad.sum_all())
                    .unwrap()
                    .add(&ls.mul(&ls).unwrap().sum_rows().sum_all())
                    .unwrap()
                    .add(&a.div(&a.add_scalar(3.0)).unwrap().sum_cols().sum_all())
                    .unwrap();
                (tape, x, total)
            };
            let (_tape, x, total) = f(&x0);
            let g = total.gradient(&x).unwrap();
            let fd = finite_diff(|xv| f(xv).2.item().unwrap(), &x0, 1e-5);
            let err = max_rel_err(g.values(), &fd);
            assert!(err < 1e-4, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn backward_is_linear_over_graph_sum() {
        let mut r = rng(3, Stream::Verify, 1);
        let x0: Vec<f64> = (0..4).map(|_| r.random_range(0.1..1.0)).collect();
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(x0));
        let f = x.mul(&x).unwrap().sum_all();
        let g = x.tanh().sum_all();
        let sum = f.add(&g).unwrap();
        let grad_sum = sum.gradient(&x).unwrap();
        let gf = f.gradient(&x).unwrap();
        let gg = g.gradient(&x).unwrap();
        for i in 0..4 {
            let lhs = grad_sum.values()[i];
            let rhs = gf.values()[i] + gg.values()[i];
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_and_backward_are_deterministic() {
        let run = || {
            let tape = Tape::new();
            let x = tape.leaf(Tensor::from_vec(vec![0.3, -0.7, 1.1]));
            let y = x.tanh().mul(&x).unwrap().sum_all();
            let g = y.gradient(&x).unwrap();
            (y.item().unwrap().to_bits(), g.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn double_backprop_of_gradient_norm() {
        // h(w) = ||∇_x f(x; w)||² for f = sum((x∘w)²): ∇_x = 2x∘w², so
        // h = Σ 4 x²w⁴ and dh/dw = 16 x² w³.
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let w = tape.leaf(Tensor::from_vec(vec![3.0, 0.5]));
        let f = x.mul(&w).unwrap().abs_pow(2.0).unwrap().sum_all();
        let gx = f.gradient_graph(&x).unwrap();
        let h = gx.mul(&gx).unwrap().sum_all();
        let dh_dw = h.gradient(&w).unwrap();
        let expect = [16.0 * 1.0 * 27.0, 16.0 * 4.0 * 0.125];
        for i in 0..2 {
            assert!(
                (dh_dw.values()[i] - expect[i]).abs() < 1e-9,
                "{:?} vs {:?}",
                dh_dw.values(),
                expect
            );
        }
    }

    #[test]
    fn gather_scatter_roundtrip_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        // y = x[2] + 2*x[0]
        let plan = Arc::new(IndexPlan { indices: vec![2, 0, 0], out_shape: vec![3] });
        let y = x.gather(plan).unwrap().sum_all();
        let g = y.gradient(&x).unwrap();
        assert_eq!(g.values(), &[2.0, 0.0, 1.0]);
    }
}
