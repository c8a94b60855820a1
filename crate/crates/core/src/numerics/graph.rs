//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every primitive applied to its nodes. Parameters are
//! bound by name from a [`ParameterStore`] and borrowed, not copied, so a
//! graph can be rebuilt cheaply on every step. [`Graph::backward`] walks the
//! tape in reverse and returns a gradient for every bound parameter.

use std::collections::HashMap;

use super::tensor::{Gradients, ParameterStore, Tensor};
use crate::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value<'p> {
    Owned(Vec<f64>),
    Borrowed(&'p [f64]),
}

impl Value<'_> {
    fn as_slice(&self) -> &[f64] {
        match self {
            Value::Owned(v) => v,
            Value::Borrowed(s) => s,
        }
    }
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Softmax {
        x: Var,
        temp: f64,
    },
    LogSoftmax {
        x: Var,
        temp: f64,
        mask: Option<Vec<bool>>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Log(Var),
    Exp(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Block {
        x: Var,
    },
    ConcatCols(Vec<Var>),
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    Sum(Var),
    Mse(Var, Var),
}

struct Node<'p> {
    shape: Vec<usize>,
    value: Value<'p>,
    op: Op,
    needs_grad: bool,
}

/// A single forward computation and its recorded trace.
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
    bound: HashMap<String, Var>,
    params: Vec<(Var, String)>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => (
            shape[..shape.len() - 1].iter().product(),
            shape[shape.len() - 1],
        ),
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: all strides index within the slices, whose lengths were
    // checked against the shapes by the callers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn mask_allows(mask: Option<&[bool]>, r: usize, c: usize, cols: usize) -> bool {
    match mask {
        None => true,
        Some(m) if m.len() == cols => m[c],
        Some(m) => m[r * cols + c],
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            bound: HashMap::new(),
            params: Vec::new(),
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            shape,
            value: Value::Owned(data),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.as_slice()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    fn rc(&self, v: Var) -> (usize, usize) {
        rows_cols(self.shape(v))
    }

    /// Copies a node's value out of the graph.
    pub fn value(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.data(v).to_vec())
            .expect("node shape is consistent")
    }

    /// The single entry of a scalar node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.data(v)[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input; no gradient is tracked for it.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        let shape = tensor.shape().to_vec();
        self.push(shape, tensor.into_data(), Op::Leaf, false)
    }

    /// Binds a named parameter from `store`. Binding the same name twice
    /// returns the same node.
    pub fn param(&mut self, store: &'p ParameterStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = store.get(name)?;
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: Value::Borrowed(t.data()),
            op: Op::Leaf,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(name.to_string(), v);
        self.params.push((v, name.to_string()));
        Ok(v)
    }

    /// Binds every parameter of `store` so that untouched ones report zero
    /// gradients.
    pub fn bind_all(&mut self, store: &'p ParameterStore) -> Result<()> {
        for name in store.names() {
            self.param(store, name)?;
        }
        Ok(())
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n, bstr) = if trans_b {
            (sb[1], sb[0], (1, sb[1]))
        } else {
            (sb[0], sb[1], (sb[1], 1))
        };
        if k != kb {
            return Err(Error::shape("matmul", sa, sb));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.data(a),
            (k, 1),
            self.data(b),
            bstr,
            0.0,
            &mut out,
        );
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, trans_b }, ng))
    }

    /// `a · b` for 2-D tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::shape("transpose", s, &[]));
        }
        let (r, c) = (s[0], s[1]);
        let d = self.data(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let ng = self.ng(x);
        Ok(self.push(vec![c, r], out, Op::Transpose(x), ng))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let ng = self.ng(a) || self.ng(b);
        self.push(self.shape(a).to_vec(), out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.binary(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.binary(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.binary(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.data(x).iter().map(|v| v * factor).collect();
        let ng = self.ng(x);
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, factor), ng)
    }

    /// Adds a row vector to every row of a matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (r, c) = self.rc(x);
        if self.data(row).len() != c {
            return Err(Error::shape("add_row", self.shape(x), self.shape(row)));
        }
        let bias = self.data(row);
        let mut out = self.data(x).to_vec();
        for i in 0..r {
            for (o, b) in out[i * c..(i + 1) * c].iter_mut().zip(bias) {
                *o += b;
            }
        }
        let ng = self.ng(x) || self.ng(row);
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddRow(x, row), ng))
    }

    /// Sum of several equally shaped nodes.
    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let (&first, rest) = xs
            .split_first()
            .ok_or_else(|| Error::InvalidArgument("add_n of nothing".into()))?;
        rest.iter().try_fold(first, |acc, &x| self.add(acc, x))
    }

    fn check_mask(&self, op: &'static str, x: Var, mask: Option<&[bool]>) -> Result<()> {
        if let Some(m) = mask {
            let (r, c) = self.rc(x);
            if m.len() != c && m.len() != r * c {
                return Err(Error::shape(op, self.shape(x), &[m.len()]));
            }
            for i in 0..r {
                if !(0..c).any(|j| mask_allows(mask, i, j, c)) {
                    return Err(Error::InvalidArgument(format!(
                        "{op}: row {i} fully masked"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Row-wise softmax of `x / temp`. Columns excluded by `mask` (either one
    /// flag per column or one per entry) get probability exactly zero.
    pub fn softmax(&mut self, x: Var, temp: f64, mask: Option<&[bool]>) -> Result<Var> {
        if temp <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "softmax temperature {temp}"
            )));
        }
        self.check_mask("softmax", x, mask)?;
        let (r, c) = self.rc(x);
        let d = self.data(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &d[i * c..(i + 1) * c];
            let max = (0..c)
                .filter(|&j| mask_allows(mask, i, j, c))
                .map(|j| row[j] / temp)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..c {
                if mask_allows(mask, i, j, c) {
                    let e = (row[j] / temp - max).exp();
                    out[i * c + j] = e;
                    sum += e;
                }
            }
            for o in &mut out[i * c..(i + 1) * c] {
                *o /= sum;
            }
        }
        let ng = self.ng(x);
        Ok(self.push(self.shape(x).to_vec(), out, Op::Softmax { x, temp }, ng))
    }

    /// Row-wise log-softmax of `x / temp`. Masked entries are excluded from
    /// the normalizer and read as `0.0` with zero gradient.
    pub fn log_softmax(&mut self, x: Var, temp: f64, mask: Option<&[bool]>) -> Result<Var> {
        if temp <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "log_softmax temperature {temp}"
            )));
        }
        self.check_mask("log_softmax", x, mask)?;
        let (r, c) = self.rc(x);
        let d = self.data(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &d[i * c..(i + 1) * c];
            let max = (0..c)
                .filter(|&j| mask_allows(mask, i, j, c))
                .map(|j| row[j] / temp)
                .fold(f64::NEG_INFINITY, f64::max);
            let lse = max
                + (0..c)
                    .filter(|&j| mask_allows(mask, i, j, c))
                    .map(|j| (row[j] / temp - max).exp())
                    .sum::<f64>()
                    .ln();
            for j in 0..c {
                if mask_allows(mask, i, j, c) {
                    out[i * c + j] = row[j] / temp - lse;
                }
            }
        }
        let ng = self.ng(x);
        let mask = mask.map(<[bool]>::to_vec);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::LogSoftmax { x, temp, mask },
            ng,
        ))
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.rc(x);
        if self.data(gain).len() != c || self.data(bias).len() != c {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let d = self.data(x);
        let gv = self.data(gain);
        let bv = self.data(bias);
        let mut normed = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &d[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let n = (row[j] - mean) * is;
                normed[i * c + j] = n;
                out[i * c + j] = n * gv[j] + bv[j];
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            },
            ng,
        ))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.data(x).iter().map(|v| f(*v)).collect();
        let ng = self.ng(x);
        self.push(self.shape(x).to_vec(), out, op, ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()),
            Op::Gelu(x),
        )
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// `ln σ(x)`, stable for large |x|.
    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, log_sigmoid, Op::LogSigmoid(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(v) = self.data(x).iter().find(|v| **v <= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "log of non-positive value {v}"
            )));
        }
        Ok(self.unary(x, f64::ln, Op::Log(x)))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    /// Gathers rows of an embedding table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(Error::shape("embedding", s, &[ids.len()]));
        }
        let (v, h) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::InvalidArgument(format!(
                "token id {bad} out of range for vocabulary of {v}"
            )));
        }
        let d = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * h);
        for &i in ids {
            out.extend_from_slice(&d[i * h..(i + 1) * h]);
        }
        let ng = self.ng(table);
        Ok(self.push(
            vec![ids.len(), h],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Picks rows of a matrix (repeats allowed).
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.rc(x);
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::shape("select_rows", self.shape(x), &[bad]));
        }
        let d = self.data(x);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            out.extend_from_slice(&d[i * c..(i + 1) * c]);
        }
        let ng = self.ng(x);
        Ok(self.push(
            vec![rows.len(), c],
            out,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            ng,
        ))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.rc(x);
        if start + len > c {
            return Err(Error::shape("slice_cols", self.shape(x), &[start, len]));
        }
        let d = self.data(x);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&d[i * c + start..i * c + start + len]);
        }
        let ng = self.ng(x);
        Ok(self.push(vec![r, len], out, Op::SliceCols { x, start }, ng))
    }

    /// The leading `rows × cols` block of a matrix.
    pub fn block(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let (r, c) = self.rc(x);
        if rows > r || cols > c {
            return Err(Error::shape("block", self.shape(x), &[rows, cols]));
        }
        let d = self.data(x);
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            out.extend_from_slice(&d[i * c..i * c + cols]);
        }
        let ng = self.ng(x);
        Ok(self.push(vec![rows, cols], out, Op::Block { x }, ng))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat_cols of nothing".into()))?;
        let r = self.rc(first).0;
        for &x in xs {
            if self.rc(x).0 != r {
                return Err(Error::shape(
                    "concat_cols",
                    self.shape(first),
                    self.shape(x),
                ));
            }
        }
        let total: usize = xs.iter().map(|&x| self.rc(x).1).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &x in xs {
                let c = self.rc(x).1;
                out.extend_from_slice(&self.data(x)[i * c..(i + 1) * c]);
            }
        }
        let ng = xs.iter().any(|&x| self.ng(x));
        Ok(self.push(vec![r, total], out, Op::ConcatCols(xs.to_vec()), ng))
    }

    /// Entries at `(row, col)` pairs, as a vector.
    pub fn gather(&mut self, x: Var, at: &[(usize, usize)]) -> Result<Var> {
        let (r, c) = self.rc(x);
        let mut index = Vec::with_capacity(at.len());
        for &(i, j) in at {
            if i >= r || j >= c {
                return Err(Error::shape("gather", self.shape(x), &[i, j]));
            }
            index.push(i * c + j);
        }
        let d = self.data(x);
        let out = index.iter().map(|&k| d[k]).collect();
        let ng = self.ng(x);
        Ok(self.push(vec![at.len()], out, Op::Gather { x, index }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let ng = self.ng(x);
        self.push(vec![1], vec![s], Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.data(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Mean squared error between two equally shaped nodes.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let n = self.data(a).len().max(1) as f64;
        let s: f64 = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(vec![1], vec![s / n], Op::Mse(a, b), ng))
    }

    /// Σ wᵢ xᵢ with constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        let w = self.constant(Tensor::new(self.shape(x).to_vec(), weights.to_vec())?);
        let p = self.mul(x, w)?;
        Ok(self.sum(p))
    }

    /// Reverse pass from a scalar node. Every bound parameter gets an entry;
    /// parameters off the path get zeros.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out_shape = self.shape(output);
        if self.data(output).len() != 1 {
            return Err(Error::NonScalar(out_shape.to_vec()));
        }
        let n = output.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[output.0] = Some(vec![1.0]);
        let mut param_grads: HashMap<usize, Vec<f64>> = HashMap::new();
        let param_ids: HashMap<usize, ()> = self.params.iter().map(|(v, _)| (v.0, ())).collect();

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if param_ids.contains_key(&i) {
                param_grads.insert(i, g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }

        let mut out = Gradients::default();
        for (v, name) in &self.params {
            let data = param_grads
                .remove(&v.0)
                .unwrap_or_else(|| vec![0.0; self.data(*v).len()]);
            out.insert(
                name.clone(),
                Tensor::new(self.shape(*v).to_vec(), data)
                    .expect("gradient shape matches parameter"),
            );
        }
        Ok(out)
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.as_slice();
        let sizes = |v: Var| self.data(v).len();
        macro_rules! buf {
            ($v:expr) => {{
                let v: Var = $v;
                grads[v.0].get_or_insert_with(|| vec![0.0; sizes(v)])
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = node.shape[1];
                let ad = self.data(*a);
                let bd = self.data(*b);
                if self.ng(*a) {
                    // dA = G · Bᵀ (or G · B when B was used transposed)
                    let bstr = if *trans_b { (k, 1) } else { (1, n) };
                    gemm(m, n, k, g, (n, 1), bd, bstr, 1.0, buf!(*a));
                }
                if self.ng(*b) {
                    if *trans_b {
                        // dB (n×k) = Gᵀ · A
                        gemm(n, m, k, g, (1, n), ad, (k, 1), 1.0, buf!(*b));
                    } else {
                        // dB (k×n) = Aᵀ · G
                        gemm(k, m, n, ad, (1, k), g, (n, 1), 1.0, buf!(*b));
                    }
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let gx = buf!(*x);
                for a in 0..r {
                    for b in 0..c {
                        gx[a * c + b] += g[b * r + a];
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.ng(v) {
                        for (o, d) in buf!(v).iter_mut().zip(g) {
                            *o += d;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.ng(*a) {
                    for (o, d) in buf!(*a).iter_mut().zip(g) {
                        *o += d;
                    }
                }
                if self.ng(*b) {
                    for (o, d) in buf!(*b).iter_mut().zip(g) {
                        *o -= d;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let bd = self.data(*b);
                    for ((o, d), w) in buf!(*a).iter_mut().zip(g).zip(bd) {
                        *o += d * w;
                    }
                }
                if self.ng(*b) {
                    let ad = self.data(*a);
                    for ((o, d), w) in buf!(*b).iter_mut().zip(g).zip(ad) {
                        *o += d * w;
                    }
                }
            }
            Op::Scale(x, f) => {
                for (o, d) in buf!(*x).iter_mut().zip(g) {
                    *o += d * f;
                }
            }
            Op::AddRow(x, row) => {
                let (r, c) = self.rc(*x);
                if self.ng(*x) {
                    for (o, d) in buf!(*x).iter_mut().zip(g) {
                        *o += d;
                    }
                }
                if self.ng(*row) {
                    let gr = buf!(*row);
                    for i in 0..r {
                        for j in 0..c {
                            gr[j] += g[i * c + j];
                        }
                    }
                }
            }
            Op::Softmax { x, temp } => {
                let (r, c) = self.rc(*x);
                let gx = buf!(*x);
                for i in 0..r {
                    let yr = &y[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        gx[i * c + j] += yr[j] * (gr[j] - dot) / temp;
                    }
                }
            }
            Op::LogSoftmax { x, temp, mask } => {
                let (r, c) = self.rc(*x);
                let mask = mask.as_deref();
                let gx = buf!(*x);
                for i in 0..r {
                    let mut gsum = 0.0;
                    for j in 0..c {
                        if mask_allows(mask, i, j, c) {
                            gsum += g[i * c + j];
                        }
                    }
                    for j in 0..c {
                        if mask_allows(mask, i, j, c) {
                            let p = y[i * c + j].exp();
                            gx[i * c + j] += (g[i * c + j] - p * gsum) / temp;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            } => {
                let (r, c) = self.rc(*x);
                let gv = self.data(*gain);
                if self.ng(*x) {
                    let gx = buf!(*x);
                    for i in 0..r {
                        let nr = &normed[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let mut mean_dn = 0.0;
                        let mut mean_dn_n = 0.0;
                        for j in 0..c {
                            let dn = gr[j] * gv[j];
                            mean_dn += dn;
                            mean_dn_n += dn * nr[j];
                        }
                        mean_dn /= c as f64;
                        mean_dn_n /= c as f64;
                        for j in 0..c {
                            let dn = gr[j] * gv[j];
                            gx[i * c + j] += inv_std[i] * (dn - mean_dn - nr[j] * mean_dn_n);
                        }
                    }
                }
                if self.ng(*gain) {
                    let gg = buf!(*gain);
                    for i in 0..r {
                        for j in 0..c {
                            gg[j] += g[i * c + j] * normed[i * c + j];
                        }
                    }
                }
                if self.ng(*bias) {
                    let gb = buf!(*bias);
                    for i in 0..r {
                        for j in 0..c {
                            gb[j] += g[i * c + j];
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xd = self.data(*x);
                for ((o, d), v) in buf!(*x).iter_mut().zip(g).zip(xd) {
                    let u = GELU_C * (v + 0.044715 * v * v * v);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                    *o += d * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
                }
            }
            Op::Tanh(x) => {
                for ((o, d), t) in buf!(*x).iter_mut().zip(g).zip(y) {
                    *o += d * (1.0 - t * t);
                }
            }
            Op::Sigmoid(x) => {
                for ((o, d), s) in buf!(*x).iter_mut().zip(g).zip(y) {
                    *o += d * s * (1.0 - s);
                }
            }
            Op::LogSigmoid(x) => {
                let xd = self.data(*x);
                for ((o, d), v) in buf!(*x).iter_mut().zip(g).zip(xd) {
                    *o += d * sigmoid(-v);
                }
            }
            Op::Log(x) => {
                let xd = self.data(*x);
                for ((o, d), v) in buf!(*x).iter_mut().zip(g).zip(xd) {
                    *o += d / v;
                }
            }
            Op::Exp(x) => {
                for ((o, d), e) in buf!(*x).iter_mut().zip(g).zip(y) {
                    *o += d * e;
                }
            }
            Op::Embedding { table, ids } => {
                let h = self.shape(*table)[1];
                let gt = buf!(*table);
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..h {
                        gt[id * h + j] += g[r * h + j];
                    }
                }
            }
            Op::SelectRows { x, rows } => {
                let c = self.rc(*x).1;
                let gx = buf!(*x);
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..c {
                        gx[r * c + j] += g[k * c + j];
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let (r, c) = self.rc(*x);
                let len = node.shape[1];
                let gx = buf!(*x);
                for i in 0..r {
                    for j in 0..len {
                        gx[i * c + start + j] += g[i * len + j];
                    }
                }
            }
            Op::Block { x } => {
                let c = self.rc(*x).1;
                let (rows, cols) = (node.shape[0], node.shape[1]);
                let gx = buf!(*x);
                for i in 0..rows {
                    for j in 0..cols {
                        gx[i * c + j] += g[i * cols + j];
                    }
                }
            }
            Op::ConcatCols(xs) => {
                let r = node.shape[0];
                let total = node.shape[1];
                let mut offset = 0;
                for &x in xs {
                    let c = self.rc(x).1;
                    if self.ng(x) {
                        let gx = buf!(x);
                        for i in 0..r {
                            for j in 0..c {
                                gx[i * c + j] += g[i * total + offset + j];
                            }
                        }
                    }
                    offset += c;
                }
            }
            Op::Gather { x, index } => {
                let gx = buf!(*x);
                for (k, &at) in index.iter().enumerate() {
                    gx[at] += g[k];
                }
            }
            Op::Sum(x) => {
                for o in buf!(*x).iter_mut() {
                    *o += g[0];
                }
            }
            Op::Mse(a, b) => {
                let n = self.data(*a).len().max(1) as f64;
                let ad = self.data(*a);
                let bd = self.data(*b);
                if self.ng(*a) {
                    for ((o, x), z) in buf!(*a).iter_mut().zip(ad).zip(bd) {
                        *o += g[0] * 2.0 * (x - z) / n;
                    }
                }
                if self.ng(*b) {
                    for ((o, x), z) in buf!(*b).iter_mut().zip(ad).zip(bd) {
                        *o -= g[0] * 2.0 * (x - z) / n;
                    }
                }
            }
        }
    }
}
