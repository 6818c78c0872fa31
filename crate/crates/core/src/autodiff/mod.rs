//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Tape`] records every forward operation; [`Tape::backward`] walks the
//! record once in reverse, accumulating gradients additively on fan-out.
//! Tensors are immutable once pushed, so a tape built single-threaded is
//! deterministic: identical inputs give bit-identical outputs and gradients.

mod check;
pub mod ops;
mod tensor;

pub use check::{grad_check, grad_check_at};
pub use tensor::Tensor;

use crate::error::{Error, Result};
use ops::{gelu, gelu_deriv, matmul_a_bt_acc, matmul_acc, matmul_at_b_acc, sigmoid, softmax_rows};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    /// (m,n) + row (n) broadcast over rows.
    AddRow(Var, Var),
    /// (m,n) * row (n) broadcast over rows.
    MulRow(Var, Var),
    ConcatRows(Var, Var),
    ConcatCols(Var, Var),
    SliceCols(Var, usize, usize),
    Reshape(Var),
    Softmax(Var, usize),
    Attention { q: Var, k: Var, v: Var, scale: f64 },
    LayerNorm(Var, f64),
    Gelu(Var),
    Sigmoid(Var),
    Ln(Var),
    PowConst(Var, f64),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    Conv3x3 { x: Var, w: Var, h: usize, wd: usize, cin: usize, cout: usize },
    Upsample2x { x: Var, h: usize, wd: usize, c: usize },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
    /// Saved forward context (attention weights, layer-norm row stats).
    aux: Vec<f64>,
    needs_grad: bool,
}

/// Recorded computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape2(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        1 => (1, shape[0]),
        2 => (shape[0], shape[1]),
        _ => {
            // Treat trailing axis as columns, everything else as rows.
            let n = *shape.last().unwrap();
            (shape.iter().product::<usize>() / n, n)
        }
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

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, aux: Vec<f64>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            shape,
            data,
            aux,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable input (parameters, or anything a gradient is wanted for).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let (shape, data) = t.into_parts();
        self.push(Op::Leaf, shape, data, Vec::new(), true)
    }

    /// Non-differentiable input (data, targets, masks).
    pub fn constant(&mut self, t: Tensor) -> Var {
        let (shape, data) = t.into_parts();
        self.push(Op::Leaf, shape, data, Vec::new(), false)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].data.clone()).expect("node is consistent")
    }

    /// Scalar value of a rank-0/1 node holding exactly one element.
    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    // ---- elementwise and broadcast -------------------------------------------------

    fn binary_same_shape(&mut self, op_name: &'static str, a: Var, b: Var) -> Result<(Vec<usize>, bool)> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op: op_name,
                left: sa.clone(),
                right: sb.clone(),
            });
        }
        Ok((sa.clone(), self.ng(a) || self.ng(b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, g) = self.binary_same_shape("add", a, b)?;
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(Op::Add(a, b), shape, data, Vec::new(), g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, g) = self.binary_same_shape("sub", a, b)?;
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x - y)
            .collect();
        Ok(self.push(Op::Sub(a, b), shape, data, Vec::new(), g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, g) = self.binary_same_shape("mul", a, b)?;
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(Op::Mul(a, b), shape, data, Vec::new(), g))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let shape = self.nodes[a.0].shape.clone();
        let g = self.ng(a);
        let data = self.nodes[a.0].data.iter().map(|x| x * c).collect();
        self.push(Op::Scale(a, c), shape, data, Vec::new(), g)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let shape = self.nodes[a.0].shape.clone();
        let g = self.ng(a);
        let data = self.nodes[a.0].data.iter().map(|x| x + c).collect();
        self.push(Op::AddScalar(a, c), shape, data, Vec::new(), g)
    }

    /// 1 - x, a common focal-loss building block.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, 1.0)
    }

    fn row_broadcast_check(&self, op: &'static str, a: Var, r: Var) -> Result<(usize, usize, bool)> {
        let (m, n) = shape2(&self.nodes[a.0].shape);
        let rn = self.nodes[r.0].data.len();
        if rn != n {
            return Err(Error::ShapeMismatch {
                op,
                left: self.nodes[a.0].shape.clone(),
                right: self.nodes[r.0].shape.clone(),
            });
        }
        Ok((m, n, self.ng(a) || self.ng(r)))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n, g) = self.row_broadcast_check("add_row", a, row)?;
        let mut data = self.nodes[a.0].data.clone();
        for i in 0..m {
            let dst = &mut data[i * n..(i + 1) * n];
            for (d, r) in dst.iter_mut().zip(&self.nodes[row.0].data) {
                *d += r;
            }
        }
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(Op::AddRow(a, row), shape, data, Vec::new(), g))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n, g) = self.row_broadcast_check("mul_row", a, row)?;
        let mut data = self.nodes[a.0].data.clone();
        for i in 0..m {
            let dst = &mut data[i * n..(i + 1) * n];
            for (d, r) in dst.iter_mut().zip(&self.nodes[row.0].data) {
                *d *= r;
            }
        }
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(Op::MulRow(a, row), shape, data, Vec::new(), g))
    }

    // ---- structure -----------------------------------------------------------------

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ma, na) = shape2(&self.nodes[a.0].shape);
        let (mb, nb) = shape2(&self.nodes[b.0].shape);
        if na != nb {
            return Err(Error::ShapeMismatch {
                op: "concat_rows",
                left: self.nodes[a.0].shape.clone(),
                right: self.nodes[b.0].shape.clone(),
            });
        }
        let mut data = Vec::with_capacity((ma + mb) * na);
        data.extend_from_slice(&self.nodes[a.0].data);
        data.extend_from_slice(&self.nodes[b.0].data);
        let g = self.ng(a) || self.ng(b);
        Ok(self.push(Op::ConcatRows(a, b), vec![ma + mb, na], data, Vec::new(), g))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ma, na) = shape2(&self.nodes[a.0].shape);
        let (mb, nb) = shape2(&self.nodes[b.0].shape);
        if ma != mb {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                left: self.nodes[a.0].shape.clone(),
                right: self.nodes[b.0].shape.clone(),
            });
        }
        let n = na + nb;
        let mut data = vec![0.0; ma * n];
        for i in 0..ma {
            data[i * n..i * n + na].copy_from_slice(&self.nodes[a.0].data[i * na..(i + 1) * na]);
            data[i * n + na..(i + 1) * n].copy_from_slice(&self.nodes[b.0].data[i * nb..(i + 1) * nb]);
        }
        let g = self.ng(a) || self.ng(b);
        Ok(self.push(Op::ConcatCols(a, b), vec![ma, n], data, Vec::new(), g))
    }

    pub fn slice_cols(&mut self, a: Var, from: usize, to: usize) -> Result<Var> {
        let (m, n) = shape2(&self.nodes[a.0].shape);
        if from >= to || to > n {
            return Err(Error::InvalidArgument {
                what: "slice_cols range",
                detail: format!("[{from}, {to}) of {n} columns"),
            });
        }
        let w = to - from;
        let mut data = vec![0.0; m * w];
        for i in 0..m {
            data[i * w..(i + 1) * w].copy_from_slice(&self.nodes[a.0].data[i * n + from..i * n + to]);
        }
        let g = self.ng(a);
        Ok(self.push(Op::SliceCols(a, from, to), vec![m, w], data, Vec::new(), g))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.nodes[a.0].data.len() {
            return Err(Error::InvalidArgument {
                what: "reshape",
                detail: format!("{:?} -> {shape:?} changes element count", self.nodes[a.0].shape),
            });
        }
        let data = self.nodes[a.0].data.clone();
        let g = self.ng(a);
        Ok(self.push(Op::Reshape(a), shape, data, Vec::new(), g))
    }

    // ---- linear algebra ------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = shape2(&self.nodes[a.0].shape);
        let (kb, n) = shape2(&self.nodes[b.0].shape);
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.nodes[a.0].shape.clone(),
                right: self.nodes[b.0].shape.clone(),
            });
        }
        let mut data = vec![0.0; m * n];
        matmul_acc(&self.nodes[a.0].data, &self.nodes[b.0].data, m, ka, n, &mut data);
        let g = self.ng(a) || self.ng(b);
        Ok(self.push(Op::MatMul(a, b), vec![m, n], data, Vec::new(), g))
    }

    /// Stabilized softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        if axis >= shape.len() {
            return Err(Error::InvalidArgument {
                what: "softmax axis",
                detail: format!("axis {axis} for shape {shape:?}"),
            });
        }
        if !self.nodes[a.0].data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { context: "softmax input" });
        }
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut data = self.nodes[a.0].data.clone();
        for o in 0..outer {
            for r in 0..inner {
                let base = o * len * inner + r;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..len {
                    mx = mx.max(data[base + j * inner]);
                }
                let mut z = 0.0;
                for j in 0..len {
                    let e = (data[base + j * inner] - mx).exp();
                    data[base + j * inner] = e;
                    z += e;
                }
                let inv = 1.0 / z;
                for j in 0..len {
                    data[base + j * inner] *= inv;
                }
            }
        }
        let g = self.ng(a);
        Ok(self.push(Op::Softmax(a, axis), shape, data, Vec::new(), g))
    }

    /// Fused scaled dot-product attention: softmax(q·kᵀ/√d)·v.
    ///
    /// q is m×d, k is n×d, v is n×e. The row-stochastic weight matrix is kept
    /// for the backward pass.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (m, dq) = shape2(&self.nodes[q.0].shape);
        let (nk, dk) = shape2(&self.nodes[k.0].shape);
        let (nv, e) = shape2(&self.nodes[v.0].shape);
        if dq != dk {
            return Err(Error::ShapeMismatch {
                op: "attention q/k width",
                left: self.nodes[q.0].shape.clone(),
                right: self.nodes[k.0].shape.clone(),
            });
        }
        if nk != nv {
            return Err(Error::ShapeMismatch {
                op: "attention k/v tokens",
                left: self.nodes[k.0].shape.clone(),
                right: self.nodes[v.0].shape.clone(),
            });
        }
        let scale = 1.0 / (dq as f64).sqrt();
        let mut weights = vec![0.0; m * nk];
        matmul_a_bt_acc(&self.nodes[q.0].data, &self.nodes[k.0].data, m, dq, nk, scale, &mut weights);
        softmax_rows(&mut weights, m, nk);
        let mut data = vec![0.0; m * e];
        matmul_acc(&weights, &self.nodes[v.0].data, m, nk, e, &mut data);
        let g = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(Op::Attention { q, k, v, scale }, vec![m, e], data, weights, g))
    }

    /// Row-wise layer normalization over the last axis, no affine part.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        let (m, n) = shape2(&shape);
        if n == 0 {
            return Err(Error::InvalidArgument {
                what: "layer_norm width",
                detail: "zero-width rows".into(),
            });
        }
        let mut data = vec![0.0; m * n];
        let mut aux = vec![0.0; m]; // reciprocal stddev per row
        for i in 0..m {
            let row = &self.nodes[a.0].data[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            aux[i] = rstd;
            for j in 0..n {
                data[i * n + j] = (row[j] - mean) * rstd;
            }
        }
        let g = self.ng(a);
        Ok(self.push(Op::LayerNorm(a, eps), shape, data, aux, g))
    }

    // ---- nonlinearities ------------------------------------------------------------

    pub fn gelu(&mut self, a: Var) -> Var {
        let shape = self.nodes[a.0].shape.clone();
        let data = self.nodes[a.0].data.iter().map(|&x| gelu(x)).collect();
        let g = self.ng(a);
        self.push(Op::Gelu(a), shape, data, Vec::new(), g)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let shape = self.nodes[a.0].shape.clone();
        let data = self.nodes[a.0].data.iter().map(|&x| sigmoid(x)).collect();
        let g = self.ng(a);
        self.push(Op::Sigmoid(a), shape, data, Vec::new(), g)
    }

    /// x * sigmoid(x), composed from primitives.
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let s = self.sigmoid(a);
        self.mul(a, s)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let shape = self.nodes[a.0].shape.clone();
        let data = self.nodes[a.0].data.iter().map(|x| x.ln()).collect();
        let g = self.ng(a);
        self.push(Op::Ln(a), shape, data, Vec::new(), g)
    }

    pub fn pow_const(&mut self, a: Var, c: f64) -> Var {
        let shape = self.nodes[a.0].shape.clone();
        let data = self.nodes[a.0].data.iter().map(|x| x.powf(c)).collect();
        let g = self.ng(a);
        self.push(Op::PowConst(a, c), shape, data, Vec::new(), g)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let shape = self.nodes[a.0].shape.clone();
        let data = self.nodes[a.0].data.iter().map(|x| x.clamp(lo, hi)).collect();
        let g = self.ng(a);
        self.push(Op::Clamp(a, lo, hi), shape, data, Vec::new(), g)
    }

    // ---- reductions ----------------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let g = self.ng(a);
        self.push(Op::Sum(a), vec![1], vec![s], Vec::new(), g)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].data.len().max(1);
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let g = self.ng(a);
        self.push(Op::Mean(a), vec![1], vec![s / n as f64], Vec::new(), g)
    }

    // ---- spatial ops ---------------------------------------------------------------

    /// Same-padded 3×3 convolution on channels-last (h, w, cin) input.
    /// Weights are laid out (3, 3, cin, cout).
    pub fn conv3x3(&mut self, x: Var, w: Var, h: usize, wd: usize, cin: usize, cout: usize) -> Result<Var> {
        if self.nodes[x.0].data.len() != h * wd * cin {
            return Err(Error::ShapeMismatch {
                op: "conv3x3 input",
                left: self.nodes[x.0].shape.clone(),
                right: vec![h, wd, cin],
            });
        }
        if self.nodes[w.0].data.len() != 9 * cin * cout {
            return Err(Error::ShapeMismatch {
                op: "conv3x3 weight",
                left: self.nodes[w.0].shape.clone(),
                right: vec![3, 3, cin, cout],
            });
        }
        let mut data = vec![0.0; h * wd * cout];
        {
            let inp = &self.nodes[x.0].data;
            let wt = &self.nodes[w.0].data;
            for y in 0..h {
                for xx in 0..wd {
                    let out_px = (y * wd + xx) * cout;
                    for ky in 0..3usize {
                        let yy = y as isize + ky as isize - 1;
                        if yy < 0 || yy >= h as isize {
                            continue;
                        }
                        for kx in 0..3usize {
                            let xs = xx as isize + kx as isize - 1;
                            if xs < 0 || xs >= wd as isize {
                                continue;
                            }
                            let in_px = (yy as usize * wd + xs as usize) * cin;
                            let wk = (ky * 3 + kx) * cin * cout;
                            for ci in 0..cin {
                                let v = inp[in_px + ci];
                                let wrow = &wt[wk + ci * cout..wk + (ci + 1) * cout];
                                let orow = &mut data[out_px..out_px + cout];
                                for co in 0..cout {
                                    orow[co] += v * wrow[co];
                                }
                            }
                        }
                    }
                }
            }
        }
        let g = self.ng(x) || self.ng(w);
        Ok(self.push(Op::Conv3x3 { x, w, h, wd, cin, cout }, vec![h, wd, cout], data, Vec::new(), g))
    }

    /// 2× nearest-neighbor upsample of a channels-last (h, w, c) grid.
    pub fn upsample2x(&mut self, x: Var, h: usize, wd: usize, c: usize) -> Result<Var> {
        if self.nodes[x.0].data.len() != h * wd * c {
            return Err(Error::ShapeMismatch {
                op: "upsample2x input",
                left: self.nodes[x.0].shape.clone(),
                right: vec![h, wd, c],
            });
        }
        let (h2, w2) = (2 * h, 2 * wd);
        let mut data = vec![0.0; h2 * w2 * c];
        for y in 0..h2 {
            for xx in 0..w2 {
                let src = ((y / 2) * wd + xx / 2) * c;
                let dst = (y * w2 + xx) * c;
                data[dst..dst + c].copy_from_slice(&self.nodes[x.0].data[src..src + c]);
            }
        }
        let g = self.ng(x);
        Ok(self.push(Op::Upsample2x { x, h, wd, c }, vec![h2, w2, c], data, Vec::new(), g))
    }

    // ---- backward ------------------------------------------------------------------

    /// Reverse pass from a scalar loss node. Gradients accumulate on every
    /// node that (transitively) requires them; fetch with [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<Vec<Option<Vec<f64>>>> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::InvalidArgument {
                what: "backward seed",
                detail: format!("loss must be scalar, got shape {:?}", self.nodes[loss.0].shape),
            });
        }
        if !self.nodes[loss.0].data[0].is_finite() {
            return Err(Error::NonFinite { context: "loss" });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if grads[idx].is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            let g = grads[idx].take().unwrap();
            self.scatter(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(grads)
    }

    fn ensure<'g>(grads: &'g mut [Option<Vec<f64>>], v: Var, len: usize) -> &'g mut [f64] {
        grads[v.0].get_or_insert_with(|| vec![0.0; len]).as_mut_slice()
    }

    fn scatter(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for dst in [a, b] {
                    if self.ng(dst) {
                        let acc = Self::ensure(grads, dst, g.len());
                        for (d, s) in acc.iter_mut().zip(g) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.ng(a) {
                    let acc = Self::ensure(grads, a, g.len());
                    for (d, s) in acc.iter_mut().zip(g) {
                        *d += s;
                    }
                }
                if self.ng(b) {
                    let acc = Self::ensure(grads, b, g.len());
                    for (d, s) in acc.iter_mut().zip(g) {
                        *d -= s;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.ng(a) {
                    let bd = &self.nodes[b.0].data;
                    let acc = Self::ensure(grads, a, g.len());
                    for i in 0..g.len() {
                        acc[i] += g[i] * bd[i];
                    }
                }
                if self.ng(b) {
                    let ad = &self.nodes[a.0].data;
                    let acc = Self::ensure(grads, b, g.len());
                    for i in 0..g.len() {
                        acc[i] += g[i] * ad[i];
                    }
                }
            }
            Op::Scale(a, c) => {
                if self.ng(a) {
                    let acc = Self::ensure(grads, a, g.len());
                    for (d, s) in acc.iter_mut().zip(g) {
                        *d += s * c;
                    }
                }
            }
            Op::AddScalar(a, _) => {
                if self.ng(a) {
                    let acc = Self::ensure(grads, a, g.len());
                    for (d, s) in acc.iter_mut().zip(g) {
                        *d += s;
                    }
                }
            }
            Op::AddRow(a, r) => {
                let (m, n) = shape2(&node.shape);
                if self.ng(a) {
                    let acc = Self::ensure(grads, a, g.len());
                    for (d, s) in acc.iter_mut().zip(g) {
                        *d += s;
                    }
                }
                if self.ng(r) {
                    let acc = Self::ensure(grads, r, n);
                    for i in 0..m {
                        for j in 0..n {
                            acc[j] += g[i * n + j];
                        }
                    }
                }
            }
            Op::MulRow(a, r) => {
                let (m, n) = shape2(&node.shape);
                if self.ng(a) {
                    let rd = &self.nodes[r.0].data;
                    let acc = Self::ensure(grads, a, g.len());
                    for i in 0..m {
                        for j in 0..n {
                            acc[i * n + j] += g[i * n + j] * rd[j];
                        }
                    }
                }
                if self.ng(r) {
                    let ad = &self.nodes[a.0].data;
                    let acc = Self::ensure(grads, r, n);
                    for i in 0..m {
                        for j in 0..n {
                            acc[j] += g[i * n + j] * ad[i * n + j];
                        }
                    }
                }
            }
            Op::ConcatRows(a, b) => {
                let na = self.nodes[a.0].data.len();
                if self.ng(a) {
                    let acc = Self::ensure(grads, a, na);
                    for (d, s) in acc.iter_mut().zip(&g[..na]) {
                        *d += s;
                    }
                }
                if self.ng(b) {
                    let nb = self.nodes[b.0].data.len();
                    let acc = Self::ensure(grads, b, nb);
                    for (d, s) in acc.iter_mut().zip(&g[na..]) {
                        *d += s;
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let (m, n) = shape2(&node.shape);
                let (_, na) = shape2(&self.nodes[a.0].shape);
                if self.ng(a) {
                    let acc = Self::ensure(grads, a, m * na);
                    for i in 0..m {
                        for j in 0..na {
                            acc[i * na + j] += g[i * n + j];
                        }
                    }
                }
                if self.ng(b) {
                    let nb = n - na;
                    let acc = Self::ensure(grads, b, m * nb);
                    for i in 0..m {
                        for j in 0..nb {
                            acc[i * nb + j] += g[i * n + na + j];
                        }
                    }
                }
            }
            Op::SliceCols(a, from, _to) => {
                if self.ng(a) {
                    let (m, w) = shape2(&node.shape);
                    let (_, n) = shape2(&self.nodes[a.0].shape);
                    let acc = Self::ensure(grads, a, m * n);
                    for i in 0..m {
                        for j in 0..w {
                            acc[i * n + from + j] += g[i * w + j];
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if self.ng(a) {
                    let acc = Self::ensure(grads, a, g.len());
                    for (d, s) in acc.iter_mut().zip(g) {
                        *d += s;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = shape2(&self.nodes[a.0].shape);
                let (_, n) = shape2(&self.nodes[b.0].shape);
                if self.ng(a) {
                    // dA += dC · Bᵀ
                    let bd = &self.nodes[b.0].data;
                    let acc = Self::ensure(grads, a, m * k);
                    matmul_a_bt_acc(g, bd, m, n, k, 1.0, acc);
                }
                if self.ng(b) {
                    // dB += Aᵀ · dC
                    let ad = &self.nodes[a.0].data;
                    let acc = Self::ensure(grads, b, k * n);
                    matmul_at_b_acc(ad, g, m, k, n, acc);
                }
            }
            Op::Softmax(a, axis) => {
                if self.ng(a) {
                    let shape = &node.shape;
                    let len = shape[axis];
                    let inner: usize = shape[axis + 1..].iter().product();
                    let outer: usize = shape[..axis].iter().product();
                    let y = &node.data;
                    let acc = Self::ensure(grads, a, g.len());
                    for o in 0..outer {
                        for r in 0..inner {
                            let base = o * len * inner + r;
                            let mut dot = 0.0;
                            for j in 0..len {
                                let off = base + j * inner;
                                dot += g[off] * y[off];
                            }
                            for j in 0..len {
                                let off = base + j * inner;
                                acc[off] += y[off] * (g[off] - dot);
                            }
                        }
                    }
                }
            }
            Op::Attention { q, k, v, scale } => {
                let (m, d) = shape2(&self.nodes[q.0].shape);
                let (n, _) = shape2(&self.nodes[k.0].shape);
                let (_, e) = shape2(&self.nodes[v.0].shape);
                let weights = &node.aux; // m×n row-stochastic
                if self.ng(v) {
                    let acc = Self::ensure(grads, v, n * e);
                    matmul_at_b_acc(weights, g, m, n, e, acc);
                }
                if self.ng(q) || self.ng(k) {
                    // dA = dO · Vᵀ, then softmax backward to dS.
                    let mut da = vec![0.0; m * n];
                    matmul_a_bt_acc(g, &self.nodes[v.0].data, m, e, n, 1.0, &mut da);
                    let mut ds = vec![0.0; m * n];
                    for i in 0..m {
                        let w = &weights[i * n..(i + 1) * n];
                        let dai = &da[i * n..(i + 1) * n];
                        let dot: f64 = w.iter().zip(dai).map(|(a, b)| a * b).sum();
                        let dsi = &mut ds[i * n..(i + 1) * n];
                        for j in 0..n {
                            dsi[j] = w[j] * (dai[j] - dot) * scale;
                        }
                    }
                    if self.ng(q) {
                        let acc = Self::ensure(grads, q, m * d);
                        matmul_acc(&ds, &self.nodes[k.0].data, m, n, d, acc);
                    }
                    if self.ng(k) {
                        let acc = Self::ensure(grads, k, n * d);
                        matmul_at_b_acc(&ds, &self.nodes[q.0].data, m, n, d, acc);
                    }
                }
            }
            Op::LayerNorm(a, _eps) => {
                if self.ng(a) {
                    let (m, n) = shape2(&node.shape);
                    let y = &node.data;
                    let rstd = &node.aux;
                    let acc = Self::ensure(grads, a, g.len());
                    let inv_n = 1.0 / n as f64;
                    for i in 0..m {
                        let yi = &y[i * n..(i + 1) * n];
                        let gi = &g[i * n..(i + 1) * n];
                        let mean_g: f64 = gi.iter().sum::<f64>() * inv_n;
                        let mean_gy: f64 = gi.iter().zip(yi).map(|(a, b)| a * b).sum::<f64>() * inv_n;
                        let out = &mut acc[i * n..(i + 1) * n];
                        for j in 0..n {
                            out[j] += rstd[i] * (gi[j] - mean_g - yi[j] * mean_gy);
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                if self.ng(a) {
                    let xd = &self.nodes[a.0].data;
                    let acc = Self::ensure(grads, a, g.len());
                    for i in 0..g.len() {
                        acc[i] += g[i] * gelu_deriv(xd[i]);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if self.ng(a) {
                    let y = &node.data;
                    let acc = Self::ensure(grads, a, g.len());
                    for i in 0..g.len() {
                        acc[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                }
            }
            Op::Ln(a) => {
                if self.ng(a) {
                    let xd = &self.nodes[a.0].data;
                    let acc = Self::ensure(grads, a, g.len());
                    for i in 0..g.len() {
                        acc[i] += g[i] / xd[i];
                    }
                }
            }
            Op::PowConst(a, c) => {
                if self.ng(a) {
                    let xd = &self.nodes[a.0].data;
                    let acc = Self::ensure(grads, a, g.len());
                    for i in 0..g.len() {
                        let d = if xd[i] == 0.0 && c > 1.0 {
                            0.0
                        } else {
                            c * xd[i].powf(c - 1.0)
                        };
                        acc[i] += g[i] * d;
                    }
                }
            }
            Op::Clamp(a, lo, hi) => {
                if self.ng(a) {
                    let xd = &self.nodes[a.0].data;
                    let acc = Self::ensure(grads, a, g.len());
                    for i in 0..g.len() {
                        if xd[i] > lo && xd[i] < hi {
                            acc[i] += g[i];
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if self.ng(a) {
                    let n = self.nodes[a.0].data.len();
                    let acc = Self::ensure(grads, a, n);
                    for d in acc.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Mean(a) => {
                if self.ng(a) {
                    let n = self.nodes[a.0].data.len();
                    let s = g[0] / n.max(1) as f64;
                    let acc = Self::ensure(grads, a, n);
                    for d in acc.iter_mut() {
                        *d += s;
                    }
                }
            }
            Op::Conv3x3 { x, w, h, wd, cin, cout } => {
                let xd = &self.nodes[x.0].data;
                let wtd = &self.nodes[w.0].data;
                let gx = self.ng(x);
                let gw = self.ng(w);
                let mut dx = if gx { vec![0.0; h * wd * cin] } else { Vec::new() };
                let mut dw = if gw { vec![0.0; 9 * cin * cout] } else { Vec::new() };
                for y in 0..h {
                    for xx in 0..wd {
                        let gout = &g[(y * wd + xx) * cout..(y * wd + xx + 1) * cout];
                        for ky in 0..3usize {
                            let yy = y as isize + ky as isize - 1;
                            if yy < 0 || yy >= h as isize {
                                continue;
                            }
                            for kx in 0..3usize {
                                let xs = xx as isize + kx as isize - 1;
                                if xs < 0 || xs >= wd as isize {
                                    continue;
                                }
                                let in_px = (yy as usize * wd + xs as usize) * cin;
                                let wk = (ky * 3 + kx) * cin * cout;
                                for ci in 0..cin {
                                    let wrow = &wtd[wk + ci * cout..wk + (ci + 1) * cout];
                                    if gx {
                                        let mut s = 0.0;
                                        for co in 0..cout {
                                            s += gout[co] * wrow[co];
                                        }
                                        dx[in_px + ci] += s;
                                    }
                                    if gw {
                                        let v = xd[in_px + ci];
                                        let drow = &mut dw[wk + ci * cout..wk + (ci + 1) * cout];
                                        for co in 0..cout {
                                            drow[co] += v * gout[co];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if gx {
                    let acc = Self::ensure(grads, x, dx.len());
                    for (d, s) in acc.iter_mut().zip(&dx) {
                        *d += s;
                    }
                }
                if gw {
                    let acc = Self::ensure(grads, w, dw.len());
                    for (d, s) in acc.iter_mut().zip(&dw) {
                        *d += s;
                    }
                }
            }
            Op::Upsample2x { x, h, wd, c } => {
                if self.ng(x) {
                    let w2 = 2 * wd;
                    let acc = Self::ensure(grads, x, h * wd * c);
                    for y in 0..2 * h {
                        for xx in 0..w2 {
                            let src = ((y / 2) * wd + xx / 2) * c;
                            let dst = (y * w2 + xx) * c;
                            for ch in 0..c {
                                acc[src + ch] += g[dst + ch];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradient bundle returned by [`Tape::backward`], indexable by `Var`.
pub trait GradSlice {
    fn grad(&self, v: Var) -> Option<&[f64]>;
}

impl GradSlice for Vec<Option<Vec<f64>>> {
    fn grad(&self, v: Var) -> Option<&[f64]> {
        self[v.0].as_deref()
    }
}

#[cfg(test)]
mod tests;
