//! Define-by-run reverse-mode tape.
//!
//! Operations append nodes in topological order; `backward` walks the nodes
//! in exact reverse order and accumulates vector-Jacobian products. One tape
//! per forward pass, single-threaded; tapes on different threads share
//! nothing.

use crate::kernels;
use crate::tensor::{Element, Tensor};
use std::sync::atomic::{AtomicU64, Ordering};

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TapeError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected a matrix, got shape {shape:?}")]
    NotAMatrix { op: &'static str, shape: Vec<usize> },
    #[error("{op}: split sizes {sizes:?} do not sum to dimension {dim}")]
    BadSplit {
        op: &'static str,
        sizes: Vec<usize>,
        dim: usize,
    },
    #[error("{op}: value out of range: {what}")]
    InvalidValue { op: &'static str, what: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this tape; call reset_backward first")]
    BackwardConsumed,
    #[error("{op}: variable belongs to a different tape (detached graph)")]
    ForeignVar { op: &'static str },
    #[error("non-finite value in {ctx} at coordinate {coord}")]
    NonFinite { ctx: String, coord: usize },
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(u32, u32),
    Transpose(u32),
    Add(u32, u32),
    AddBias(u32, u32),
    Scale(u32, f64),
    ConcatRows(Vec<u32>),
    ConcatCols(Vec<u32>),
    NarrowRows {
        src: u32,
        start: usize,
        len: usize,
    },
    NarrowCols {
        src: u32,
        start: usize,
        len: usize,
    },
    Reshape(u32),
    /// `scale * (a @ b^T)` fused; avoids materializing the transpose and a
    /// separate scale node on the hot attention path.
    ScaledNt { a: u32, b: u32, scale: f64 },
    LayerNorm {
        x: u32,
        gamma: u32,
        beta: u32,
        eps: f64,
    },
    Softmax(u32),
    Gelu(u32),
    Sigmoid(u32),
    Mse(u32, u32),
    BceLogits(u32, u32),
}

struct Node<E: Element> {
    value: Tensor<E>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by one backward pass, keyed by `Var`.
#[derive(Debug)]
pub struct Gradients<E: Element = f64> {
    tape: u64,
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Element> Gradients<E> {
    /// Gradient of the loss w.r.t. `v`, if `v` participated in the graph.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<E>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx as usize).and_then(|g| g.as_ref())
    }
}

pub struct Tape<E: Element = f64> {
    id: u64,
    nodes: Vec<Node<E>>,
    consumed: bool,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Self {
            id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a leaf, honoring the tensor's `requires_grad` flag.
    pub fn insert(&mut self, t: Tensor<E>) -> Var {
        let needs = t.requires_grad();
        self.push(t, Op::Leaf, needs)
    }

    /// Insert a non-differentiable leaf.
    pub fn input(&mut self, t: Tensor<E>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Insert a differentiable leaf.
    pub fn param(&mut self, t: Tensor<E>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        assert_eq!(v.tape, self.id, "Var from another tape");
        &self.nodes[v.idx as usize].value
    }

    fn push(&mut self, value: Tensor<E>, op: Op, needs_grad: bool) -> Var {
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var { tape: self.id, idx }
    }

    fn check(&self, op: &'static str, v: Var) -> Result<u32, TapeError> {
        if v.tape != self.id {
            return Err(TapeError::ForeignVar { op });
        }
        Ok(v.idx)
    }

    fn needs(&self, idx: u32) -> bool {
        self.nodes[idx as usize].needs_grad
    }

    fn val(&self, idx: u32) -> &Tensor<E> {
        &self.nodes[idx as usize].value
    }

    // ---- forward ops -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        let (ai, bi) = (self.check("matmul", a)?, self.check("matmul", b)?);
        let (av, bv) = (self.val(ai), self.val(bi));
        if av.shape().len() != 2 {
            return Err(TapeError::NotAMatrix {
                op: "matmul",
                shape: av.shape().to_vec(),
            });
        }
        if bv.shape().len() != 2 || av.cols() != bv.rows() {
            return Err(TapeError::ShapeMismatch {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let data = kernels::matmul_nn(av.data(), bv.data(), m, k, n);
        let needs = self.needs(ai) || self.needs(bi);
        let out = Tensor::new(vec![m, n], data).expect("matmul shape");
        Ok(self.push(out, Op::Matmul(ai, bi), needs))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TapeError> {
        let ai = self.check("transpose", a)?;
        let av = self.val(ai);
        if av.shape().len() != 2 {
            return Err(TapeError::NotAMatrix {
                op: "transpose",
                shape: av.shape().to_vec(),
            });
        }
        let (r, c) = (av.rows(), av.cols());
        let data = kernels::transpose(av.data(), r, c);
        let needs = self.needs(ai);
        let out = Tensor::new(vec![c, r], data).expect("transpose shape");
        Ok(self.push(out, Op::Transpose(ai), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        let (ai, bi) = (self.check("add", a)?, self.check("add", b)?);
        let (av, bv) = (self.val(ai), self.val(bi));
        if av.shape() != bv.shape() {
            return Err(TapeError::ShapeMismatch {
                op: "add",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let out = av.add(bv);
        let needs = self.needs(ai) || self.needs(bi);
        Ok(self.push(out, Op::Add(ai, bi), needs))
    }

    /// Row-broadcast bias add: `[m x n] + [n]`. The only broadcast on the tape.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var, TapeError> {
        let (ai, bi) = (self.check("add_bias", a)?, self.check("add_bias", bias)?);
        let (av, bv) = (self.val(ai), self.val(bi));
        if av.shape().len() != 2 || bv.shape().len() != 1 || av.cols() != bv.cols() {
            return Err(TapeError::ShapeMismatch {
                op: "add_bias",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (r, c) = (av.rows(), av.cols());
        let mut data = Vec::with_capacity(r * c);
        for row in 0..r {
            for (x, b) in av.row(row).iter().zip(bv.data()) {
                data.push(*x + *b);
            }
        }
        let needs = self.needs(ai) || self.needs(bi);
        let out = Tensor::new(vec![r, c], data).expect("add_bias shape");
        Ok(self.push(out, Op::AddBias(ai, bi), needs))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var, TapeError> {
        let ai = self.check("scale", a)?;
        let kk = E::lit(k);
        let out = self.val(ai).scale(kk);
        let needs = self.needs(ai);
        Ok(self.push(out, Op::Scale(ai, k), needs))
    }

    pub fn concat(&mut self, axis: Axis, parts: &[Var]) -> Result<Var, TapeError> {
        if parts.is_empty() {
            return Err(TapeError::InvalidValue {
                op: "concat",
                what: "empty input list".into(),
            });
        }
        let mut ids = Vec::with_capacity(parts.len());
        for &p in parts {
            ids.push(self.check("concat", p)?);
        }
        let first = self.val(ids[0]);
        if first.shape().len() != 2 {
            return Err(TapeError::NotAMatrix {
                op: "concat",
                shape: first.shape().to_vec(),
            });
        }
        let (r0, c0) = (first.rows(), first.cols());
        for &i in &ids[1..] {
            let v = self.val(i);
            let ok = match axis {
                Axis::Cols => v.shape().len() == 2 && v.rows() == r0,
                Axis::Rows => v.shape().len() == 2 && v.cols() == c0,
            };
            if !ok {
                return Err(TapeError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
        }
        let needs = ids.iter().any(|&i| self.needs(i));
        let out = match axis {
            Axis::Cols => {
                let tensors: Vec<&Tensor<E>> = ids.iter().map(|&i| self.val(i)).collect();
                Tensor::concat_cols(&tensors)
            }
            Axis::Rows => {
                let cols = c0;
                let rows: usize = ids.iter().map(|&i| self.val(i).rows()).sum();
                let mut data = Vec::with_capacity(rows * cols);
                for &i in &ids {
                    data.extend_from_slice(self.val(i).data());
                }
                Tensor::new(vec![rows, cols], data).expect("concat rows shape")
            }
        };
        let op = match axis {
            Axis::Rows => Op::ConcatRows(ids),
            Axis::Cols => Op::ConcatCols(ids),
        };
        Ok(self.push(out, op, needs))
    }

    pub fn split(
        &mut self,
        axis: Axis,
        v: Var,
        sizes: &[usize],
    ) -> Result<Vec<Var>, TapeError> {
        let vi = self.check("split", v)?;
        let t = self.val(vi);
        if t.shape().len() != 2 {
            return Err(TapeError::NotAMatrix {
                op: "split",
                shape: t.shape().to_vec(),
            });
        }
        let dim = match axis {
            Axis::Rows => t.rows(),
            Axis::Cols => t.cols(),
        };
        if sizes.iter().sum::<usize>() != dim || sizes.iter().any(|&s| s == 0) {
            return Err(TapeError::BadSplit {
                op: "split",
                sizes: sizes.to_vec(),
                dim,
            });
        }
        let needs = self.needs(vi);
        let (rows, cols) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &len in sizes {
            let (tensor, op) = match axis {
                Axis::Rows => {
                    let src = self.val(vi);
                    let data = src.data()[start * cols..(start + len) * cols].to_vec();
                    (
                        Tensor::new(vec![len, cols], data).expect("split rows"),
                        Op::NarrowRows {
                            src: vi,
                            start,
                            len,
                        },
                    )
                }
                Axis::Cols => {
                    let src = self.val(vi);
                    let mut data = Vec::with_capacity(rows * len);
                    for r in 0..rows {
                        data.extend_from_slice(&src.row(r)[start..start + len]);
                    }
                    (
                        Tensor::new(vec![rows, len], data).expect("split cols"),
                        Op::NarrowCols {
                            src: vi,
                            start,
                            len,
                        },
                    )
                }
            };
            out.push(self.push(tensor, op, needs));
            start += len;
        }
        Ok(out)
    }

    /// Reinterpret the value under a new shape with the same element count.
    pub fn reshape(&mut self, v: Var, shape: Vec<usize>) -> Result<Var, TapeError> {
        let vi = self.check("reshape", v)?;
        let t = self.val(vi);
        if shape.iter().product::<usize>() != t.numel() {
            return Err(TapeError::ShapeMismatch {
                op: "reshape",
                lhs: t.shape().to_vec(),
                rhs: shape,
            });
        }
        let out = Tensor::new(shape, t.data().to_vec()).expect("reshape numel checked");
        let needs = self.needs(vi);
        Ok(self.push(out, Op::Reshape(vi), needs))
    }

    /// Row-wise layer normalization with learned scale and shift.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<Var, TapeError> {
        let xi = self.check("layer_norm", x)?;
        let gi = self.check("layer_norm", gamma)?;
        let bi = self.check("layer_norm", beta)?;
        let xv = self.val(xi);
        if xv.shape().len() != 2 {
            return Err(TapeError::NotAMatrix {
                op: "layer_norm",
                shape: xv.shape().to_vec(),
            });
        }
        let c = xv.cols();
        for &(pi, name) in &[(gi, "gamma"), (bi, "beta")] {
            let p = self.val(pi);
            if p.shape() != [c] {
                let _ = name;
                return Err(TapeError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: xv.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let (xv, gv, bv) = (self.val(xi), self.val(gi), self.val(bi));
        let rows = xv.rows();
        let inv_c = E::lit(1.0 / c as f64);
        let epse = E::lit(eps);
        let mut data = Vec::with_capacity(rows * c);
        for r in 0..rows {
            let row = xv.row(r);
            let mut mean = E::zero();
            for &v in row {
                mean = mean + v;
            }
            mean = mean * inv_c;
            let mut var = E::zero();
            for &v in row {
                let d = v - mean;
                var = var + d * d;
            }
            var = var * inv_c;
            let inv_std = (var + epse).sqrt().recip();
            for (j, &v) in row.iter().enumerate() {
                let xhat = (v - mean) * inv_std;
                data.push(gv.data()[j] * xhat + bv.data()[j]);
            }
        }
        let needs = self.needs(xi) || self.needs(gi) || self.needs(bi);
        let out = Tensor::new(vec![rows, c], data).expect("layer_norm shape");
        Ok(self.push(
            out,
            Op::LayerNorm {
                x: xi,
                gamma: gi,
                beta: bi,
                eps,
            },
            needs,
        ))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var, TapeError> {
        let xi = self.check("softmax", x)?;
        let xv = self.val(xi);
        if xv.shape().len() != 2 {
            return Err(TapeError::NotAMatrix {
                op: "softmax",
                shape: xv.shape().to_vec(),
            });
        }
        let (rows, cols) = (xv.rows(), xv.cols());
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = xv.row(r);
            let mut mx = row[0];
            for &v in row {
                if v > mx {
                    mx = v;
                }
            }
            let mut denom = E::zero();
            let base = data.len();
            for &v in row {
                let e = (v - mx).exp();
                data.push(e);
                denom = denom + e;
            }
            let inv = denom.recip();
            for v in &mut data[base..] {
                *v = *v * inv;
            }
        }
        let needs = self.needs(xi);
        let out = Tensor::new(vec![rows, cols], data).expect("softmax shape");
        Ok(self.push(out, Op::Softmax(xi), needs))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var, TapeError> {
        let xi = self.check("gelu", x)?;
        let c = E::lit(GELU_C);
        let a = E::lit(GELU_A);
        let half = E::lit(0.5);
        let out = self.val(xi).map(|v| {
            let u = c * (v + a * v * v * v);
            half * v * (E::one() + u.tanh())
        });
        let needs = self.needs(xi);
        Ok(self.push(out, Op::Gelu(xi), needs))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TapeError> {
        let xi = self.check("sigmoid", x)?;
        let out = self.val(xi).map(|v| (E::one() + (-v).exp()).recip());
        let needs = self.needs(xi);
        Ok(self.push(out, Op::Sigmoid(xi), needs))
    }

    /// `scale * (a @ b^T)`: the attention score kernel as one node.
    pub fn scaled_nt(&mut self, a: Var, b: Var, scale: f64) -> Result<Var, TapeError> {
        let ai = self.check("scaled_nt", a)?;
        let bi = self.check("scaled_nt", b)?;
        let (av, bv) = (self.val(ai), self.val(bi));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.cols() != bv.cols() {
            return Err(TapeError::ShapeMismatch {
                op: "scaled_nt",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (m, p, q) = (av.rows(), av.cols(), bv.rows());
        let mut data = kernels::matmul_nt(av.data(), bv.data(), m, p, q);
        let s = E::lit(scale);
        for v in &mut data {
            *v = *v * s;
        }
        let needs = self.needs(ai) || self.needs(bi);
        let out = Tensor::new(vec![m, q], data).expect("scaled_nt shape");
        Ok(self.push(out, Op::ScaledNt { a: ai, b: bi, scale }, needs))
    }

    /// Scaled dot-product attention `softmax(q k^T / sqrt(d)) v`, composed
    /// from tape primitives so its gradient needs no dedicated rule.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var, TapeError> {
        let qi = self.check("attention", q)?;
        let ki = self.check("attention", k)?;
        let vi = self.check("attention", v)?;
        let (qv, kv, vv) = (self.val(qi), self.val(ki), self.val(vi));
        if qv.shape().len() != 2 || kv.shape().len() != 2 || qv.cols() != kv.cols() {
            return Err(TapeError::ShapeMismatch {
                op: "attention",
                lhs: qv.shape().to_vec(),
                rhs: kv.shape().to_vec(),
            });
        }
        if vv.shape().len() != 2 || vv.rows() != kv.rows() {
            return Err(TapeError::ShapeMismatch {
                op: "attention",
                lhs: kv.shape().to_vec(),
                rhs: vv.shape().to_vec(),
            });
        }
        let d = qv.cols();
        let scaled = self.scaled_nt(q, k, 1.0 / (d as f64).sqrt())?;
        let probs = self.softmax(scaled)?;
        self.matmul(probs, v)
    }

    /// Mean squared error over all elements; returns a scalar.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var, TapeError> {
        let (pi, ti) = (self.check("mse", pred)?, self.check("mse", target)?);
        let (pv, tv) = (self.val(pi), self.val(ti));
        if pv.shape() != tv.shape() {
            return Err(TapeError::ShapeMismatch {
                op: "mse",
                lhs: pv.shape().to_vec(),
                rhs: tv.shape().to_vec(),
            });
        }
        let n = E::lit(pv.numel() as f64);
        let mut acc = E::zero();
        for (&p, &t) in pv.data().iter().zip(tv.data()) {
            let d = p - t;
            acc = acc + d * d;
        }
        let needs = self.needs(pi) || self.needs(ti);
        Ok(self.push(Tensor::scalar(acc / n), Op::Mse(pi, ti), needs))
    }

    /// Numerically stable binary cross-entropy on logits; mean over elements.
    /// Targets must lie in `[0, 1]`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Var) -> Result<Var, TapeError> {
        let (zi, yi) = (
            self.check("bce_with_logits", logits)?,
            self.check("bce_with_logits", targets)?,
        );
        let (zv, yv) = (self.val(zi), self.val(yi));
        if zv.shape() != yv.shape() {
            return Err(TapeError::ShapeMismatch {
                op: "bce_with_logits",
                lhs: zv.shape().to_vec(),
                rhs: yv.shape().to_vec(),
            });
        }
        if let Some(pos) = yv
            .data()
            .iter()
            .position(|&y| y < E::zero() || y > E::one())
        {
            return Err(TapeError::InvalidValue {
                op: "bce_with_logits",
                what: format!("target at index {pos} outside [0, 1]"),
            });
        }
        let n = E::lit(zv.numel() as f64);
        let mut acc = E::zero();
        for (&z, &y) in zv.data().iter().zip(yv.data()) {
            let m = if z > E::zero() { z } else { E::zero() };
            acc = acc + m - z * y + (E::one() + (-z.abs()).exp()).ln();
        }
        let needs = self.needs(zi) || self.needs(yi);
        Ok(self.push(Tensor::scalar(acc / n), Op::BceLogits(zi, yi), needs))
    }

    // ---- backward ------------------------------------------------------

    /// Reverse pass from a scalar loss. Errors if the loss is not scalar or
    /// if backward already ran without `reset_backward`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<E>, TapeError> {
        let li = self.check("backward", loss)?;
        if self.consumed {
            return Err(TapeError::BackwardConsumed);
        }
        let lv = self.val(li);
        if lv.numel() != 1 || lv.shape().len() > 1 {
            return Err(TapeError::NonScalarLoss(lv.shape().to_vec()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<E>>> = vec![None; self.nodes.len()];
        grads[li as usize] = Some(vec![E::one()]);

        for idx in (0..=li as usize).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.accumulate(idx, &g, &mut grads);
            // Leaves keep their gradient for the caller.
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }

        let out = grads
            .iter_mut()
            .enumerate()
            .map(|(i, g)| {
                g.take().map(|data| {
                    Tensor::new(self.nodes[i].value.shape().to_vec(), data)
                        .expect("gradient shape mirrors value shape")
                })
            })
            .collect();
        Ok(Gradients {
            tape: self.id,
            grads: out,
        })
    }

    /// Allow another backward pass on this tape.
    pub fn reset_backward(&mut self) {
        self.consumed = false;
    }

    fn accumulate(&self, idx: usize, g: &[E], grads: &mut [Option<Vec<E>>]) {
        let add_to = |grads: &mut [Option<Vec<E>>], target: u32, contrib: &[E]| {
            let slot = &mut grads[target as usize];
            match slot {
                Some(acc) => {
                    for (a, &c) in acc.iter_mut().zip(contrib) {
                        *a = *a + c;
                    }
                }
                None => *slot = Some(contrib.to_vec()),
            }
        };
        let numel = |i: u32| self.nodes[i as usize].value.numel();

        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.needs(*a) {
                    // dA = dC @ B^T
                    let mut da = vec![E::zero(); m * k];
                    kernels::matmul_nt_acc(g, bv.data(), m, n, k, &mut da);
                    add_to(grads, *a, &da);
                }
                if self.needs(*b) {
                    // dB = A^T @ dC
                    let mut db = vec![E::zero(); k * n];
                    kernels::matmul_tn_acc(av.data(), g, m, k, n, &mut db);
                    add_to(grads, *b, &db);
                }
            }
            Op::Transpose(a) => {
                if self.needs(*a) {
                    let av = self.val(*a);
                    let da = kernels::transpose(g, av.cols(), av.rows());
                    add_to(grads, *a, &da);
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    add_to(grads, *a, g);
                }
                if self.needs(*b) {
                    add_to(grads, *b, g);
                }
            }
            Op::AddBias(a, b) => {
                if self.needs(*a) {
                    add_to(grads, *a, g);
                }
                if self.needs(*b) {
                    let c = numel(*b);
                    let mut db = vec![E::zero(); c];
                    for chunk in g.chunks_exact(c) {
                        for (d, &v) in db.iter_mut().zip(chunk) {
                            *d = *d + v;
                        }
                    }
                    add_to(grads, *b, &db);
                }
            }
            Op::Scale(a, k) => {
                if self.needs(*a) {
                    let kk = E::lit(*k);
                    let da: Vec<E> = g.iter().map(|&v| v * kk).collect();
                    add_to(grads, *a, &da);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = numel(p);
                    if self.needs(p) {
                        add_to(grads, p, &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let rows = self.nodes[idx].value.rows();
                let total = self.nodes[idx].value.cols();
                let mut off = 0;
                for &p in parts {
                    let w = self.val(p).cols();
                    if self.needs(p) {
                        let mut dp = vec![E::zero(); rows * w];
                        for r in 0..rows {
                            dp[r * w..(r + 1) * w]
                                .copy_from_slice(&g[r * total + off..r * total + off + w]);
                        }
                        add_to(grads, p, &dp);
                    }
                    off += w;
                }
            }
            Op::NarrowRows { src, start, len } => {
                if self.needs(*src) {
                    let s = self.val(*src);
                    let cols = s.cols();
                    let mut ds = vec![E::zero(); s.numel()];
                    ds[start * cols..(start + len) * cols].copy_from_slice(g);
                    add_to(grads, *src, &ds);
                }
            }
            Op::NarrowCols { src, start, len } => {
                if self.needs(*src) {
                    let s = self.val(*src);
                    let (rows, cols) = (s.rows(), s.cols());
                    let mut ds = vec![E::zero(); s.numel()];
                    for r in 0..rows {
                        ds[r * cols + start..r * cols + start + len]
                            .copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                    add_to(grads, *src, &ds);
                }
            }
            Op::Reshape(src) => {
                if self.needs(*src) {
                    add_to(grads, *src, g);
                }
            }
            Op::ScaledNt { a, b, scale } => {
                // C = s * A @ B^T with A: [m x p], B: [q x p], C: [m x q]
                let (av, bv) = (self.val(*a), self.val(*b));
                let (m, p, q) = (av.rows(), av.cols(), bv.rows());
                let s = E::lit(*scale);
                if self.needs(*a) {
                    // dA = s * dC @ B
                    let mut da = kernels::matmul_nn(g, bv.data(), m, q, p);
                    for v in &mut da {
                        *v = *v * s;
                    }
                    add_to(grads, *a, &da);
                }
                if self.needs(*b) {
                    // dB = s * dC^T @ A
                    let mut db = vec![E::zero(); q * p];
                    kernels::matmul_tn_acc(g, av.data(), m, q, p, &mut db);
                    for v in &mut db {
                        *v = *v * s;
                    }
                    add_to(grads, *b, &db);
                }
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xv = self.val(*x);
                let gv = self.val(*gamma);
                let (rows, c) = (xv.rows(), xv.cols());
                let inv_c = E::lit(1.0 / c as f64);
                let epse = E::lit(*eps);
                let mut dx = vec![E::zero(); rows * c];
                let mut dgamma = vec![E::zero(); c];
                let mut dbeta = vec![E::zero(); c];
                for r in 0..rows {
                    let row = xv.row(r);
                    let grow = &g[r * c..(r + 1) * c];
                    let mut mean = E::zero();
                    for &v in row {
                        mean = mean + v;
                    }
                    mean = mean * inv_c;
                    let mut var = E::zero();
                    for &v in row {
                        let d = v - mean;
                        var = var + d * d;
                    }
                    var = var * inv_c;
                    let inv_std = (var + epse).sqrt().recip();
                    // h = dy * gamma; dx = inv_std * (h - mean(h) - xhat * mean(h*xhat))
                    let mut m1 = E::zero();
                    let mut m2 = E::zero();
                    for j in 0..c {
                        let xhat = (row[j] - mean) * inv_std;
                        let h = grow[j] * gv.data()[j];
                        m1 = m1 + h;
                        m2 = m2 + h * xhat;
                        dgamma[j] = dgamma[j] + grow[j] * xhat;
                        dbeta[j] = dbeta[j] + grow[j];
                    }
                    m1 = m1 * inv_c;
                    m2 = m2 * inv_c;
                    for j in 0..c {
                        let xhat = (row[j] - mean) * inv_std;
                        let h = grow[j] * gv.data()[j];
                        dx[r * c + j] = inv_std * (h - m1 - xhat * m2);
                    }
                }
                if self.needs(*x) {
                    add_to(grads, *x, &dx);
                }
                if self.needs(*gamma) {
                    add_to(grads, *gamma, &dgamma);
                }
                if self.needs(*beta) {
                    add_to(grads, *beta, &dbeta);
                }
            }
            Op::Softmax(a) => {
                if self.needs(*a) {
                    let y = &self.nodes[idx].value;
                    let (rows, c) = (y.rows(), y.cols());
                    let mut da = vec![E::zero(); rows * c];
                    for r in 0..rows {
                        let yrow = y.row(r);
                        let grow = &g[r * c..(r + 1) * c];
                        let mut dot = E::zero();
                        for j in 0..c {
                            dot = dot + yrow[j] * grow[j];
                        }
                        for j in 0..c {
                            da[r * c + j] = yrow[j] * (grow[j] - dot);
                        }
                    }
                    add_to(grads, *a, &da);
                }
            }
            Op::Gelu(a) => {
                if self.needs(*a) {
                    let c = E::lit(GELU_C);
                    let k3 = E::lit(3.0 * GELU_A);
                    let ka = E::lit(GELU_A);
                    let half = E::lit(0.5);
                    let xv = self.val(*a);
                    let da: Vec<E> = xv
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&x, &gv)| {
                            let u = c * (x + ka * x * x * x);
                            let t = u.tanh();
                            let sech2 = E::one() - t * t;
                            let du = c * (E::one() + k3 * x * x);
                            gv * (half * (E::one() + t) + half * x * sech2 * du)
                        })
                        .collect();
                    add_to(grads, *a, &da);
                }
            }
            Op::Sigmoid(a) => {
                if self.needs(*a) {
                    let y = &self.nodes[idx].value;
                    let da: Vec<E> = y
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&s, &gv)| gv * s * (E::one() - s))
                        .collect();
                    add_to(grads, *a, &da);
                }
            }
            Op::Mse(p, t) => {
                let (pv, tv) = (self.val(*p), self.val(*t));
                let n = E::lit(pv.numel() as f64);
                let two = E::lit(2.0);
                let g0 = g[0];
                if self.needs(*p) {
                    let dp: Vec<E> = pv
                        .data()
                        .iter()
                        .zip(tv.data())
                        .map(|(&pp, &tt)| g0 * two * (pp - tt) / n)
                        .collect();
                    add_to(grads, *p, &dp);
                }
                if self.needs(*t) {
                    let dt: Vec<E> = pv
                        .data()
                        .iter()
                        .zip(tv.data())
                        .map(|(&pp, &tt)| -(g0 * two * (pp - tt) / n))
                        .collect();
                    add_to(grads, *t, &dt);
                }
            }
            Op::BceLogits(z, y) => {
                let (zv, yv) = (self.val(*z), self.val(*y));
                let n = E::lit(zv.numel() as f64);
                let g0 = g[0];
                if self.needs(*z) {
                    let dz: Vec<E> = zv
                        .data()
                        .iter()
                        .zip(yv.data())
                        .map(|(&zz, &yy)| {
                            let s = (E::one() + (-zz).exp()).recip();
                            g0 * (s - yy) / n
                        })
                        .collect();
                    add_to(grads, *z, &dz);
                }
                if self.needs(*y) {
                    let dy: Vec<E> = zv.data().iter().map(|&zz| -(g0 * zz / n)).collect();
                    add_to(grads, *y, &dy);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_cols_matches_latent_dims() {
        // [T x 20] ++ [T x 1] -> [T x 21]
        let mut t = Tape::<f64>::new();
        let a = t.input(Tensor::zeros(vec![6, 20]));
        let b = t.input(Tensor::zeros(vec![6, 1]));
        let j = t.concat(Axis::Cols, &[a, b]).unwrap();
        assert_eq!(t.value(j).shape(), &[6, 21]);
    }

    #[test]
    fn split_cols_matches_material_dims() {
        // [T x 37] -> ([T x 20], [T x 17])
        let mut t = Tape::<f64>::new();
        let x = t.input(Tensor::from_fn(5, 37, |r, c| (r * 37 + c) as f64));
        let parts = t.split(Axis::Cols, x, &[20, 17]).unwrap();
        assert_eq!(t.value(parts[0]).shape(), &[5, 20]);
        assert_eq!(t.value(parts[1]).shape(), &[5, 17]);
        assert_eq!(t.value(parts[1]).at(2, 0), (2 * 37 + 20) as f64);
    }

    #[test]
    fn sigmoid_midpoint() {
        let mut t = Tape::<f64>::new();
        let x = t.input(Tensor::matrix(1, 1, vec![0.0]).unwrap());
        let y = t.sigmoid(x).unwrap();
        assert_eq!(t.value(y).data()[0], 0.5);
    }

    #[test]
    fn scalar_quadratic_gradient_is_analytic() {
        // loss = (x - c)^2 for scalar x -> grad = 2(x - c)
        let (x0, c0) = (1.75f64, -0.5f64);
        let mut t = Tape::<f64>::new();
        let x = t.param(Tensor::matrix(1, 1, vec![x0]).unwrap());
        let c = t.input(Tensor::matrix(1, 1, vec![c0]).unwrap());
        let loss = t.mse(x, c).unwrap();
        let grads = t.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data()[0], 2.0 * (x0 - c0));
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let mut t = Tape::<f64>::new();
        let x = t.param(Tensor::from_fn(3, 3, |r, c| (r + c) as f64));
        let zeroed = t.scale(x, 0.0).unwrap();
        let target = t.input(Tensor::zeros(vec![3, 3]));
        let loss = t.mse(zeroed, target).unwrap();
        let grads = t.backward(loss).unwrap();
        assert!(grads.wrt(x).unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut t = Tape::<f64>::new();
        let a = t.input(Tensor::zeros(vec![2, 3]));
        let b = t.input(Tensor::zeros(vec![4, 5]));
        let err = t.matmul(a, b).unwrap_err();
        match err {
            TapeError::ShapeMismatch { op, lhs, rhs } => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4, 5]);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut t = Tape::<f64>::new();
        let x = t.param(Tensor::zeros(vec![2, 2]));
        let err = t.backward(x).unwrap_err();
        assert_eq!(err, TapeError::NonScalarLoss(vec![2, 2]));
    }

    #[test]
    fn second_backward_without_reset_errors() {
        let mut t = Tape::<f64>::new();
        let x = t.param(Tensor::matrix(1, 1, vec![2.0]).unwrap());
        let tgt = t.input(Tensor::matrix(1, 1, vec![0.0]).unwrap());
        let loss = t.mse(x, tgt).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.backward(loss).unwrap_err(), TapeError::BackwardConsumed);
        t.reset_backward();
        assert!(t.backward(loss).is_ok());
    }

    #[test]
    fn foreign_var_is_rejected() {
        let mut t1 = Tape::<f64>::new();
        let mut t2 = Tape::<f64>::new();
        let a = t1.input(Tensor::zeros(vec![2, 2]));
        let b = t2.input(Tensor::zeros(vec![2, 2]));
        assert_eq!(
            t1.add(a, b).unwrap_err(),
            TapeError::ForeignVar { op: "add" }
        );
    }

    #[test]
    fn bce_target_range_checked() {
        let mut t = Tape::<f64>::new();
        let z = t.input(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let y = t.input(Tensor::matrix(1, 2, vec![0.5, 1.5]).unwrap());
        match t.bce_with_logits(z, y).unwrap_err() {
            TapeError::InvalidValue { op, what } => {
                assert_eq!(op, "bce_with_logits");
                assert!(what.contains("index 1"));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn repeated_evaluation_is_bit_identical() {
        let run = || {
            let mut t = Tape::<f64>::new();
            let x = t.input(Tensor::from_fn(7, 5, |r, c| ((r * 5 + c) as f64).sin()));
            let w = t.input(Tensor::from_fn(5, 4, |r, c| ((r + 2 * c) as f64).cos()));
            let h = t.matmul(x, w).unwrap();
            let g = t.gelu(h).unwrap();
            let s = t.softmax(g).unwrap();
            t.value(s).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn f32_mode_runs_the_same_graph() {
        let mut t = Tape::<f32>::new();
        let x = t.param(Tensor::<f32>::from_fn(3, 4, |r, c| (r as f32) - (c as f32)));
        let w = t.input(Tensor::<f32>::from_fn(4, 2, |r, c| 0.1 * (r + c) as f32));
        let h = t.matmul(x, w).unwrap();
        let s = t.sigmoid(h).unwrap();
        let tgt = t.input(Tensor::<f32>::full(vec![3, 2], 0.5));
        let loss = t.mse(s, tgt).unwrap();
        let grads = t.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap().shape(), &[3, 4]);
        assert!(t.value(loss).item().is_finite());
    }
}
