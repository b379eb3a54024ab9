//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and enough
//! bookkeeping to apply its gradient rule. [`Tape::backward`] walks the
//! nodes in reverse and deposits gradients into leaves created with
//! `requires_grad = true`.

use super::gemm::{gemm, Layout};
use super::{NumericsError, Tensor};

/// Handle to a value recorded on a [`Tape`].
///
/// Handles are plain indices; using a handle with a tape other than the one
/// that produced it is a logic error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, trans_b: bool },
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRow { x: usize, row: usize },
    Affine { x: usize, scale: f64 },
    Minimum(usize, usize),
    Maximum(usize, usize),
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Ln(usize),
    Softplus(usize),
    Abs(usize),
    Powf { x: usize, p: f64 },
    Softmax { x: usize, axis: usize },
    RowMax { x: usize, argmax: Vec<usize> },
    GatherRows { x: usize, idx: Vec<usize> },
    ConcatRows(Vec<usize>),
    SliceRows { x: usize, start: usize },
    ConcatCols(Vec<usize>),
    SliceCols { x: usize, start: usize },
    Sum(usize),
    MeanRows(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    StraightThrough { soft: usize },
    Reshape(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    is_leaf: bool,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients deposited by [`Tape::backward`], indexed by leaf handle.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the differentiated scalar with respect to `var`.
    ///
    /// `None` when `var` is not a `requires_grad` leaf or did not contribute.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            is_leaf: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
            is_leaf: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copy of `x` cut off from the gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(NumericsError::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn matrix_dims(&self, op: &'static str, x: Var) -> Result<(usize, usize), NumericsError> {
        match self.shape(x) {
            [m, n] => Ok((*m, *n)),
            s => Err(NumericsError::InvalidShape {
                op,
                shape: s.to_vec(),
                reason: "expected a matrix",
            }),
        }
    }

    // ---- linear algebra -------------------------------------------------

    /// `a · b` for `a: m×k`, `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, NumericsError> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (br, bc) = self.matrix_dims("matmul", b)?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        let lb = if trans_b {
            Layout::Transposed
        } else {
            Layout::RowMajor
        };
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            Layout::RowMajor,
            self.value(b).data(),
            lb,
            &mut out,
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a: a.0, b: b.0, trans_b }, &[a.0, b.0]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, NumericsError> {
        let (m, n) = self.matrix_dims("transpose", x)?;
        let src = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(value, Op::Transpose(x.0), &[x.0]))
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, NumericsError> {
        self.same_shape(op_name, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, op, &[a.0, b.0]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a.0, b.0))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary("minimum", a, b, |x, y| if y < x { y } else { x }, Op::Minimum(a.0, b.0))
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary("maximum", a, b, |x, y| if y > x { y } else { x }, Op::Maximum(a.0, b.0))
    }

    /// Adds a row vector (`[n]` or `[1×n]`) to every row of `x: m×n`.
    /// This is the only broadcasting the tape supports.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, NumericsError> {
        let (m, n) = self.matrix_dims("add_row", x)?;
        let ok = matches!(self.shape(row), [k] if *k == n) || matches!(self.shape(row), [1, k] if *k == n);
        if !ok {
            return Err(NumericsError::ShapeMismatch {
                op: "add_row",
                left: self.shape(x).to_vec(),
                right: self.shape(row).to_vec(),
            });
        }
        let r = self.value(row).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for i in 0..m {
            for (v, rv) in data[i * n..(i + 1) * n].iter_mut().zip(&r) {
                *v += rv;
            }
        }
        let value = Tensor::new(vec![m, n], data)?;
        Ok(self.push(value, Op::AddRow { x: x.0, row: row.0 }, &[x.0, row.0]))
    }

    /// `scale · x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let data = self.value(x).data().iter().map(|v| scale * v + shift).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("shape preserved");
        self.push(value, Op::Affine { x: x.0, scale }, &[x.0])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.affine(x, c, 0.0)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 0.0)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data = self.value(x).data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("shape preserved");
        self.push(value, op, &[x.0])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x.0))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x.0))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Ln(x.0))
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x.0))
    }

    /// Absolute value; the gradient uses `sign(x)` with `sign(0) = 0`.
    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x.0))
    }

    /// `xᵖ` for nonnegative `x`.
    pub fn powf(&mut self, x: Var, p: f64) -> Var {
        self.unary(x, |v| v.powf(p), Op::Powf { x: x.0, p })
    }

    // ---- reductions and normalizations ----------------------------------

    /// Softmax along `axis`, stabilized by subtracting the slice maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, NumericsError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(NumericsError::InvalidArgument(format!(
                "softmax axis {axis} out of range for rank {}",
                shape.len()
            )));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for t in 0..len {
                    mx = mx.max(src[base + t * inner]);
                }
                let mut total = 0.0;
                for t in 0..len {
                    let e = (src[base + t * inner] - mx).exp();
                    out[base + t * inner] = e;
                    total += e;
                }
                for t in 0..len {
                    out[base + t * inner] /= total;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Softmax { x: x.0, axis }, &[x.0]))
    }

    /// Per-row maximum of `x: n×m`, returned as a length-`n` vector.
    /// Ties pick the first column; only that entry receives gradient.
    pub fn rowmax(&mut self, x: Var) -> Result<Var, NumericsError> {
        let (n, m) = self.matrix_dims("rowmax", x)?;
        if m == 0 {
            return Err(NumericsError::InvalidShape {
                op: "rowmax",
                shape: self.shape(x).to_vec(),
                reason: "rows must be non-empty",
            });
        }
        let src = self.value(x).data();
        let mut argmax = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let row = &src[i * m..(i + 1) * m];
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            argmax.push(best);
            out.push(row[best]);
        }
        let value = Tensor::vector(out);
        Ok(self.push(value, Op::RowMax { x: x.0, argmax }, &[x.0]))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x.0), &[x.0])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Column means of `x: m×n`, as a `1×n` matrix.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var, NumericsError> {
        let (m, n) = self.matrix_dims("mean_rows", x)?;
        if m == 0 {
            return Err(NumericsError::InvalidShape {
                op: "mean_rows",
                shape: vec![m, n],
                reason: "no rows to average",
            });
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, v) in out.iter_mut().zip(&src[i * n..(i + 1) * n]) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        let value = Tensor::new(vec![1, n], out)?;
        Ok(self.push(value, Op::MeanRows(x.0), &[x.0]))
    }

    /// Row-wise layer normalization followed by a per-column gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, NumericsError> {
        let (m, n) = self.matrix_dims("layer_norm", x)?;
        for p in [gain, bias] {
            if self.value(p).len() != n {
                return Err(NumericsError::ShapeMismatch {
                    op: "layer_norm",
                    left: self.shape(x).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let h = (row[j] - mu) * is;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                inv_std,
            },
            &[x.0, gain.0, bias.0],
        ))
    }

    // ---- indexing and structure -----------------------------------------

    /// Rows of `x` at `idx`, in order. Duplicates are allowed; their
    /// gradients add up in the source row.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var, NumericsError> {
        let (n, d) = self.matrix_dims("gather_rows", x)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(NumericsError::IndexOutOfRange {
                op: "gather_rows",
                index: bad,
                bound: n,
            });
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let value = Tensor::new(vec![idx.len(), d], out)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                x: x.0,
                idx: idx.to_vec(),
            },
            &[x.0],
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let Some(&first) = parts.first() else {
            return Err(NumericsError::InvalidArgument("concat_rows of nothing".into()));
        };
        let (_, d) = self.matrix_dims("concat_rows", first)?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (m, dp) = self.matrix_dims("concat_rows", p)?;
            if dp != d {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat_rows",
                    left: self.shape(first).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            rows += m;
            out.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(vec![rows, d], out)?;
        let ids: Vec<usize> = parts.iter().map(|v| v.0).collect();
        Ok(self.push(value, Op::ConcatRows(ids.clone()), &ids))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let (m, d) = self.matrix_dims("slice_rows", x)?;
        if start + len > m {
            return Err(NumericsError::IndexOutOfRange {
                op: "slice_rows",
                index: start + len,
                bound: m,
            });
        }
        let out = self.value(x).data()[start * d..(start + len) * d].to_vec();
        let value = Tensor::new(vec![len, d], out)?;
        Ok(self.push(value, Op::SliceRows { x: x.0, start }, &[x.0]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let Some(&first) = parts.first() else {
            return Err(NumericsError::InvalidArgument("concat_cols of nothing".into()));
        };
        let (m, _) = self.matrix_dims("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (mp, w) = self.matrix_dims("concat_cols", p)?;
            if mp != m {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.shape(first).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            widths.push(w);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let value = Tensor::new(vec![m, total], out)?;
        let ids: Vec<usize> = parts.iter().map(|v| v.0).collect();
        Ok(self.push(value, Op::ConcatCols(ids.clone()), &ids))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let (m, n) = self.matrix_dims("slice_cols", x)?;
        if start + len > n {
            return Err(NumericsError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                bound: n,
            });
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let value = Tensor::new(vec![m, len], out)?;
        Ok(self.push(value, Op::SliceCols { x: x.0, start }, &[x.0]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(x.0), &[x.0]))
    }

    /// Forward value is exactly `hard`; the backward pass treats the node
    /// as if it were `soft`.
    pub fn straight_through(&mut self, hard: Tensor, soft: Var) -> Result<Var, NumericsError> {
        if hard.shape() != self.shape(soft) {
            return Err(NumericsError::ShapeMismatch {
                op: "straight_through",
                left: hard.shape().to_vec(),
                right: self.shape(soft).to_vec(),
            });
        }
        Ok(self.push(hard, Op::StraightThrough { soft: soft.0 }, &[soft.0]))
    }

    // ---- composites -----------------------------------------------------

    /// `softmax(q·kᵀ/√d)·v`, also returning the attention matrix.
    pub fn attention_with_weights(&mut self, q: Var, k: Var, v: Var) -> Result<(Var, Var), NumericsError> {
        let (_, dq) = self.matrix_dims("scaled_dot_attention", q)?;
        let (nk, dk) = self.matrix_dims("scaled_dot_attention", k)?;
        let (nv, _) = self.matrix_dims("scaled_dot_attention", v)?;
        if dq != dk || nk != nv {
            return Err(NumericsError::ShapeMismatch {
                op: "scaled_dot_attention",
                left: self.shape(q).to_vec(),
                right: if dq != dk {
                    self.shape(k).to_vec()
                } else {
                    self.shape(v).to_vec()
                },
            });
        }
        let scores = self.matmul_t(q, k)?;
        let scores = self.scale(scores, 1.0 / (dq as f64).sqrt());
        let weights = self.softmax(scores, 1)?;
        let out = self.matmul(weights, v)?;
        Ok((out, weights))
    }

    pub fn scaled_dot_attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var, NumericsError> {
        Ok(self.attention_with_weights(q, k, v)?.0)
    }

    // ---- backward -------------------------------------------------------

    /// Accumulates `d(out)/d(leaf)` for every `requires_grad` leaf that
    /// contributes to the single-element `out`.
    pub fn backward(&self, out: Var) -> Result<Gradients, NumericsError> {
        if self.value(out).len() != 1 {
            return Err(NumericsError::NotScalar {
                shape: self.shape(out).to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; out.0 + 1];
        let mut leaf_grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[out.0].needs_grad {
            grads[out.0] = Some(vec![1.0]);
        }
        for id in (0..=out.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.is_leaf {
                leaf_grads[id] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            self.propagate(id, &g, &mut grads);
        }
        Ok(Gradients { grads: leaf_grads })
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = node.value.shape()[1];
                if let Some(ga) = self.slot(grads, *a) {
                    // dA = G·Bᵀ (or G·B when b was used transposed)
                    let lb = if *trans_b {
                        Layout::RowMajor
                    } else {
                        Layout::Transposed
                    };
                    gemm(m, n, k, g, Layout::RowMajor, bv.data(), lb, ga);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    if *trans_b {
                        // dB (n×k) = Gᵀ·A
                        gemm(n, m, k, g, Layout::Transposed, av.data(), Layout::RowMajor, gb);
                    } else {
                        // dB (k×n) = Aᵀ·G
                        gemm(k, m, n, av.data(), Layout::Transposed, g, Layout::RowMajor, gb);
                    }
                }
            }
            Op::Transpose(x) => {
                let (m, n) = (node.value.shape()[1], node.value.shape()[0]);
                if let Some(gx) = self.slot(grads, *x) {
                    for i in 0..m {
                        for j in 0..n {
                            gx[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |gx| add_into(gx, g));
                self.acc(grads, *b, |gx| add_into(gx, g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |gx| add_into(gx, g));
                self.acc(grads, *b, |gx| gx.iter_mut().zip(g).for_each(|(o, gi)| *o -= gi));
            }
            Op::Mul(a, b) => {
                let av = self.nodes[*a].value.data();
                let bv = self.nodes[*b].value.data();
                self.acc(grads, *a, |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * bv[i];
                    }
                });
                self.acc(grads, *b, |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * av[i];
                    }
                });
            }
            Op::Div(a, b) => {
                let av = self.nodes[*a].value.data();
                let bv = self.nodes[*b].value.data();
                self.acc(grads, *a, |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] / bv[i];
                    }
                });
                self.acc(grads, *b, |gx| {
                    for i in 0..gx.len() {
                        gx[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                    }
                });
            }
            Op::Minimum(a, b) | Op::Maximum(a, b) => {
                let av = self.nodes[*a].value.data();
                let to_a: Vec<bool> = y.iter().zip(av).map(|(yv, a)| yv == a).collect();
                self.acc(grads, *a, |gx| {
                    for i in 0..gx.len() {
                        if to_a[i] {
                            gx[i] += g[i];
                        }
                    }
                });
                self.acc(grads, *b, |gx| {
                    for i in 0..gx.len() {
                        if !to_a[i] {
                            gx[i] += g[i];
                        }
                    }
                });
            }
            Op::AddRow { x, row } => {
                self.acc(grads, *x, |gx| add_into(gx, g));
                let n = self.nodes[*row].value.len();
                self.acc(grads, *row, |gr| {
                    for chunk in g.chunks(n) {
                        add_into(gr, chunk);
                    }
                });
            }
            Op::Affine { x, scale } => {
                self.acc(grads, *x, |gx| gx.iter_mut().zip(g).for_each(|(o, gi)| *o += scale * gi));
            }
            Op::Relu(x) => {
                let xv = self.nodes[*x].value.data();
                self.acc(grads, *x, |gx| {
                    for i in 0..gx.len() {
                        if xv[i] > 0.0 {
                            gx[i] += g[i];
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                self.acc(grads, *x, |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Exp(x) => {
                self.acc(grads, *x, |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * y[i];
                    }
                });
            }
            Op::Ln(x) => {
                let xv = self.nodes[*x].value.data();
                self.acc(grads, *x, |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] / xv[i];
                    }
                });
            }
            Op::Softplus(x) => {
                let xv = self.nodes[*x].value.data();
                self.acc(grads, *x, |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * sigmoid(xv[i]);
                    }
                });
            }
            Op::Abs(x) => {
                let xv = self.nodes[*x].value.data();
                self.acc(grads, *x, |gx| {
                    for i in 0..gx.len() {
                        let s = if xv[i] > 0.0 {
                            1.0
                        } else if xv[i] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        gx[i] += g[i] * s;
                    }
                });
            }
            Op::Powf { x, p } => {
                let xv = self.nodes[*x].value.data();
                self.acc(grads, *x, |gx| {
                    for i in 0..gx.len() {
                        let d = if xv[i] == 0.0 {
                            if *p == 1.0 {
                                1.0
                            } else {
                                0.0
                            }
                        } else {
                            p * xv[i].powf(p - 1.0)
                        };
                        gx[i] += g[i] * d;
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                self.acc(grads, *x, |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let mut dot = 0.0;
                            for t in 0..len {
                                dot += g[base + t * inner] * y[base + t * inner];
                            }
                            for t in 0..len {
                                let at = base + t * inner;
                                gx[at] += y[at] * (g[at] - dot);
                            }
                        }
                    }
                });
            }
            Op::RowMax { x, argmax } => {
                let m = self.nodes[*x].value.cols();
                self.acc(grads, *x, |gx| {
                    for (i, &j) in argmax.iter().enumerate() {
                        gx[i * m + j] += g[i];
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let d = self.nodes[*x].value.cols();
                self.acc(grads, *x, |gx| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut gx[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p].value.len();
                    let chunk = &g[offset..offset + len];
                    self.acc(grads, p, |gx| add_into(gx, chunk));
                    offset += len;
                }
            }
            Op::SliceRows { x, start } => {
                let d = node.value.cols();
                let off = start * d;
                self.acc(grads, *x, |gx| add_into(&mut gx[off..off + g.len()], g));
            }
            Op::ConcatCols(parts) => {
                let m = node.value.rows();
                let total = node.value.cols();
                let mut col = 0;
                for &p in parts {
                    let w = self.nodes[p].value.cols();
                    self.acc(grads, p, |gx| {
                        for i in 0..m {
                            add_into(&mut gx[i * w..(i + 1) * w], &g[i * total + col..i * total + col + w]);
                        }
                    });
                    col += w;
                }
            }
            Op::SliceCols { x, start } => {
                let m = node.value.rows();
                let w = node.value.cols();
                let n = self.nodes[*x].value.cols();
                self.acc(grads, *x, |gx| {
                    for i in 0..m {
                        add_into(&mut gx[i * n + start..i * n + start + w], &g[i * w..(i + 1) * w]);
                    }
                });
            }
            Op::Sum(x) => {
                self.acc(grads, *x, |gx| gx.iter_mut().for_each(|o| *o += g[0]));
            }
            Op::MeanRows(x) => {
                let n = node.value.cols();
                let m = self.nodes[*x].value.rows() as f64;
                self.acc(grads, *x, |gx| {
                    for chunk in gx.chunks_mut(n) {
                        for (o, gi) in chunk.iter_mut().zip(g) {
                            *o += gi / m;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = node.value.cols();
                let gv = self.nodes[*gain].value.data();
                self.acc(grads, *x, |gx| {
                    for (i, is) in inv_std.iter().enumerate() {
                        let r = i * n..(i + 1) * n;
                        let dh: Vec<f64> = g[r.clone()].iter().zip(gv).map(|(a, b)| a * b).collect();
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(&xhat[r.clone()]).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            gx[i * n + j] +=
                                is / n as f64 * (n as f64 * dh[j] - sum_dh - xhat[i * n + j] * sum_dh_h);
                        }
                    }
                });
                self.acc(grads, *gain, |gg| {
                    for (gi, h) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] += gi[j] * h[j];
                        }
                    }
                });
                self.acc(grads, *bias, |gb| {
                    for gi in g.chunks(n) {
                        add_into(gb, gi);
                    }
                });
            }
            Op::StraightThrough { soft } => {
                self.acc(grads, *soft, |gx| add_into(gx, g));
            }
            Op::Reshape(x) => {
                self.acc(grads, *x, |gx| add_into(gx, g));
            }
        }
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], i: usize) -> Option<&'g mut [f64]> {
        if !self.nodes[i].needs_grad {
            return None;
        }
        let len = self.nodes[i].value.len();
        Some(grads[i].get_or_insert_with(|| vec![0.0; len]).as_mut_slice())
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], i: usize, f: impl FnOnce(&mut [f64])) {
        if let Some(gx) = self.slot(grads, i) {
            f(gx);
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
