//! Dynamically recorded computation graph with reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value, so the node list
//! is already in topological order and the backward pass is a single reverse
//! sweep. Nodes derived only from constants are marked as not requiring a
//! gradient and are skipped during that sweep.

use std::sync::Arc;
use std::sync::atomic::{AtomicU32, Ordering};

use super::tensor::{
    matmul_kernel, matmul_nt_kernel, matmul_tn_kernel, softmax_rows_in_place, transpose_kernel,
    Tensor,
};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    index: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.index as usize
    }
}

/// Derivative of a scalar loss with respect to one recorded tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub with_respect_to: Var,
    pub value: Tensor,
}

/// How the right operand of an elementwise binary op is broadcast.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    /// Right operand has one element.
    Scalar,
    /// Right operand is a row vector repeated over every row of the left one.
    Row,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Transpose(usize),
    Binary(BinOp, Bcast, usize, usize),
    Scale(usize, f64),
    AddConst(usize),
    Softmax(usize),
    Sum(usize),
    Gather(usize, Arc<[usize]>),
    ConcatCols(usize, usize),
    Concat(Vec<usize>),
    Extremum(usize, usize),
    Silu(usize),
    LayerNorm(usize, Vec<f64>),
    DwConv3x3 {
        x: usize,
        kernel: usize,
        height: usize,
        width: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A recorded computation. Values are immutable once recorded.
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a differentiable input.
    pub fn var(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers an input that never needs a gradient (masks, targets).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.index()].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let index = self.nodes.len() as u32;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index,
        }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index() >= self.nodes.len() {
            return Err(Error::UnknownVariable(format!(
                "variable {} of tape {} is not recorded on tape {}",
                v.index, v.tape, self.id
            )));
        }
        Ok(v.index())
    }

    fn rg(&self, inputs: &[usize]) -> bool {
        inputs.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn dims2(&self, i: usize) -> Result<(usize, usize)> {
        self.nodes[i].value.dims2()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (m, k) = self.dims2(ia)?;
        let (k2, n) = self.dims2(ib)?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner dimensions disagree: {m}x{k} by {k2}x{n}"
            )));
        }
        let data = matmul_kernel(
            self.nodes[ia].value.data(),
            self.nodes[ib].value.data(),
            m,
            k,
            n,
        );
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(Tensor::from_parts(vec![m, n], data), Op::MatMul(ia, ib), rg))
    }

    /// `a * b^T` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (m, k) = self.dims2(ia)?;
        let (n, k2) = self.dims2(ib)?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul_nt inner dimensions disagree: {m}x{k} by ({n}x{k2})^T"
            )));
        }
        let data = matmul_nt_kernel(
            self.nodes[ia].value.data(),
            self.nodes[ib].value.data(),
            m,
            k,
            n,
        );
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(Tensor::from_parts(vec![m, n], data), Op::MatMulNt(ia, ib), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let (r, c) = self.dims2(ia)?;
        let data = transpose_kernel(self.nodes[ia].value.data(), r, c);
        let rg = self.rg(&[ia]);
        Ok(self.push(Tensor::from_parts(vec![c, r], data), Op::Transpose(ia), rg))
    }

    fn binary(&mut self, op: BinOp, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let av = &self.nodes[ia].value;
        let bv = &self.nodes[ib].value;
        let bcast = if av.shape() == bv.shape() {
            Bcast::Same
        } else if bv.len() == 1 {
            Bcast::Scalar
        } else if av.shape().len() == 2 && bv.len() == av.shape()[1] {
            Bcast::Row
        } else {
            return Err(Error::Dimension(format!(
                "cannot broadcast {:?} onto {:?}",
                bv.shape(),
                av.shape()
            )));
        };
        let f = |x: f64, y: f64| match op {
            BinOp::Add => x + y,
            BinOp::Sub => x - y,
            BinOp::Mul => x * y,
            BinOp::Div => x / y,
        };
        let a_data = av.data();
        let b_data = bv.data();
        let data: Vec<f64> = match bcast {
            Bcast::Same => a_data.iter().zip(b_data).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::Scalar => {
                let y = b_data[0];
                a_data.iter().map(|&x| f(x, y)).collect()
            }
            Bcast::Row => {
                let n = b_data.len();
                a_data
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, b_data[i % n]))
                    .collect()
            }
        };
        let shape = av.shape().to_vec();
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Binary(op, bcast, ia, ib),
            rg,
        ))
    }

    /// Elementwise sum; `b` may also be a scalar or a row vector.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Div, a, b)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let value = self.nodes[ia].value.map(|v| v * factor);
        let rg = self.rg(&[ia]);
        Ok(self.push(value, Op::Scale(ia, factor), rg))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let value = self.nodes[ia].value.map(|v| v + c);
        let rg = self.rg(&[ia]);
        Ok(self.push(value, Op::AddConst(ia), rg))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let (r, c) = self.dims2(ia)?;
        let mut data = self.nodes[ia].value.data().to_vec();
        softmax_rows_in_place(&mut data, r, c);
        let rg = self.rg(&[ia]);
        Ok(self.push(Tensor::from_parts(vec![r, c], data), Op::Softmax(ia), rg))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let total = self.nodes[ia].value.sum();
        let rg = self.rg(&[ia]);
        Ok(self.push(Tensor::scalar(total), Op::Sum(ia), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// `out[i] = a[indices[i]]` over the flattened data, with the given output shape.
    pub fn gather(&mut self, a: Var, indices: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        let ia = self.check(a)?;
        let src = self.nodes[ia].value.data();
        if shape.iter().product::<usize>() != indices.len() {
            return Err(Error::Dimension(format!(
                "gather of {} indices cannot fill shape {:?}",
                indices.len(),
                shape
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= src.len()) {
            return Err(Error::Dimension(format!(
                "gather index {bad} out of range for {} elements",
                src.len()
            )));
        }
        let data = indices.iter().map(|&i| src[i]).collect();
        let rg = self.rg(&[ia]);
        Ok(self.push(
            Tensor::from_parts(shape.to_vec(), data),
            Op::Gather(ia, indices),
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n = self.value(a).len();
        let indices: Arc<[usize]> = (0..n).collect();
        self.gather(a, indices, shape)
    }

    /// Column `col` of a matrix as an `[rows]` vector.
    pub fn column(&mut self, a: Var, col: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let (r, c) = self.dims2(ia)?;
        if col >= c {
            return Err(Error::Dimension(format!("column {col} out of range for {c} columns")));
        }
        let indices: Arc<[usize]> = (0..r).map(|i| i * c + col).collect();
        self.gather(a, indices, &[r])
    }

    /// Horizontal concatenation of two matrices with equal row counts.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (r, ca) = self.dims2(ia)?;
        let (r2, cb) = self.dims2(ib)?;
        if r != r2 {
            return Err(Error::Dimension(format!("concat_cols rows disagree: {r} vs {r2}")));
        }
        let ad = self.nodes[ia].value.data();
        let bd = self.nodes[ib].value.data();
        let mut data = Vec::with_capacity(r * (ca + cb));
        for i in 0..r {
            data.extend_from_slice(&ad[i * ca..(i + 1) * ca]);
            data.extend_from_slice(&bd[i * cb..(i + 1) * cb]);
        }
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(
            Tensor::from_parts(vec![r, ca + cb], data),
            Op::ConcatCols(ia, ib),
            rg,
        ))
    }

    /// Flat concatenation into a 1-D tensor.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Dimension("concat of zero tensors".into()));
        }
        let idx = parts.iter().map(|&p| self.check(p)).collect::<Result<Vec<_>>>()?;
        let mut data = Vec::new();
        for &i in &idx {
            data.extend_from_slice(self.nodes[i].value.data());
        }
        let rg = self.rg(&idx);
        let n = data.len();
        Ok(self.push(Tensor::from_parts(vec![n], data), Op::Concat(idx), rg))
    }

    /// Largest element; ties resolve to the lowest flat index.
    pub fn max(&mut self, a: Var) -> Result<Var> {
        self.extremum(a, |cand, best| cand > best)
    }

    /// Smallest element; ties resolve to the lowest flat index.
    pub fn min(&mut self, a: Var) -> Result<Var> {
        self.extremum(a, |cand, best| cand < best)
    }

    fn extremum(&mut self, a: Var, better: impl Fn(f64, f64) -> bool) -> Result<Var> {
        let ia = self.check(a)?;
        let data = self.nodes[ia].value.data();
        let mut arg = 0;
        for (i, &v) in data.iter().enumerate().skip(1) {
            if better(v, data[arg]) {
                arg = i;
            }
        }
        let value = Tensor::scalar(data[arg]);
        let rg = self.rg(&[ia]);
        Ok(self.push(value, Op::Extremum(ia, arg), rg))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let value = self.nodes[ia].value.map(|x| x * sigmoid(x));
        let rg = self.rg(&[ia]);
        Ok(self.push(value, Op::Silu(ia), rg))
    }

    /// Per-row standardization (zero mean, unit variance) without affine terms.
    pub fn layer_norm_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let (r, c) = self.dims2(ia)?;
        let src = self.nodes[ia].value.data();
        let mut out = vec![0.0; r * c];
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mean = row.iter().fold(0.0, |s, &v| s + v) / c as f64;
            let var = row.iter().fold(0.0, |s, &v| s + (v - mean) * (v - mean)) / c as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (o, &v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = (v - mean) * s;
            }
            inv_std.push(s);
        }
        let rg = self.rg(&[ia]);
        Ok(self.push(
            Tensor::from_parts(vec![r, c], out),
            Op::LayerNorm(ia, inv_std),
            rg,
        ))
    }

    /// Depthwise 3x3 convolution with zero padding over a `[height*width x channels]`
    /// feature matrix (pixels row-major). `kernel` is `[9 x channels]`.
    pub fn dwconv3x3(&mut self, x: Var, kernel: Var, height: usize, width: usize) -> Result<Var> {
        let (ix, ik) = (self.check(x)?, self.check(kernel)?);
        let (p, c) = self.dims2(ix)?;
        let (taps, c2) = self.dims2(ik)?;
        if p != height * width || taps != 9 || c != c2 {
            return Err(Error::Dimension(format!(
                "dwconv3x3: input {p}x{c} for a {height}x{width} grid with kernel {taps}x{c2}"
            )));
        }
        let xd = self.nodes[ix].value.data();
        let kd = self.nodes[ik].value.data();
        let mut out = vec![0.0; p * c];
        for y in 0..height {
            for xx in 0..width {
                let o = &mut out[(y * width + xx) * c..(y * width + xx + 1) * c];
                for (t, (dy, dx)) in TAPS.iter().enumerate() {
                    let sy = y as isize + dy;
                    let sx = xx as isize + dx;
                    if sy < 0 || sx < 0 || sy >= height as isize || sx >= width as isize {
                        continue;
                    }
                    let src = (sy as usize * width + sx as usize) * c;
                    let xin = &xd[src..src + c];
                    let kw = &kd[t * c..(t + 1) * c];
                    for ((ov, &xv), &wv) in o.iter_mut().zip(xin).zip(kw) {
                        *ov += xv * wv;
                    }
                }
            }
        }
        let rg = self.rg(&[ix, ik]);
        Ok(self.push(
            Tensor::from_parts(vec![p, c], out),
            Op::DwConv3x3 {
                x: ix,
                kernel: ik,
                height,
                width,
            },
            rg,
        ))
    }

    /// Gradient of the scalar `loss` with respect to `wrt`.
    ///
    /// A recorded tensor that does not influence the loss gets a zero gradient.
    pub fn grad(&self, loss: Var, wrt: Var) -> Result<Gradient> {
        let iw = self.check(wrt)?;
        let grads = self.backward(loss)?;
        let value = match &grads[iw] {
            Some(g) => Tensor::from_parts(self.nodes[iw].value.shape().to_vec(), g.clone()),
            None => Tensor::zeros(self.nodes[iw].value.shape()),
        };
        Ok(Gradient {
            with_respect_to: wrt,
            value,
        })
    }

    /// Gradients of `loss` with respect to each of `wrt`, from a single backward sweep.
    pub fn grads(&self, loss: Var, wrt: &[Var]) -> Result<Vec<Gradient>> {
        let idx = wrt.iter().map(|&w| self.check(w)).collect::<Result<Vec<_>>>()?;
        let mut grads = self.backward(loss)?;
        Ok(idx
            .iter()
            .zip(wrt)
            .map(|(&i, &w)| {
                let shape = self.nodes[i].value.shape().to_vec();
                let value = match grads[i].take() {
                    Some(g) => Tensor::from_parts(shape, g),
                    None => Tensor::zeros(&shape),
                };
                Gradient {
                    with_respect_to: w,
                    value,
                }
            })
            .collect())
    }

    fn backward(&self, loss: Var) -> Result<Vec<Option<Vec<f64>>>> {
        let il = self.check(loss)?;
        if self.nodes[il].value.len() != 1 {
            return Err(Error::Dimension(format!(
                "gradient requires a scalar loss, got shape {:?}",
                self.nodes[il].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[il] = Some(vec![1.0]);
        for i in (0..=il).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(grads)
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], target: usize, contribution: Vec<f64>) {
        if !self.nodes[target].requires_grad {
            return;
        }
        match &mut grads[target] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contribution) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[*a].value.dims2().expect("matrix");
                let n = out.shape()[1];
                if self.wants(*a) {
                    let da = matmul_nt_kernel(g, self.nodes[*b].value.data(), m, n, k);
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let db = matmul_tn_kernel(self.nodes[*a].value.data(), g, m, k, n);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.nodes[*a].value.dims2().expect("matrix");
                let n = out.shape()[1];
                if self.wants(*a) {
                    let da = matmul_kernel(g, self.nodes[*b].value.data(), m, n, k);
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let db = matmul_tn_kernel(g, self.nodes[*a].value.data(), m, n, k);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.nodes[*a].value.dims2().expect("matrix");
                self.accumulate(grads, *a, transpose_kernel(g, c, r));
            }
            Op::Binary(op, bcast, a, b) => self.propagate_binary(*op, *bcast, *a, *b, g, out, grads),
            Op::Scale(a, f) => {
                self.accumulate(grads, *a, g.iter().map(|v| v * f).collect());
            }
            Op::AddConst(a) => self.accumulate(grads, *a, g.to_vec()),
            Op::Softmax(a) => {
                let (r, c) = out.dims2().expect("matrix");
                let y = out.data();
                let mut dx = vec![0.0; r * c];
                for row in 0..r {
                    let ys = &y[row * c..(row + 1) * c];
                    let gs = &g[row * c..(row + 1) * c];
                    let dot = ys.iter().zip(gs).fold(0.0, |s, (&yv, &gv)| s + yv * gv);
                    for ((d, &yv), &gv) in dx[row * c..(row + 1) * c].iter_mut().zip(ys).zip(gs) {
                        *d = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::Sum(a) => {
                let n = self.nodes[*a].value.len();
                self.accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::Gather(a, indices) => {
                let mut dx = vec![0.0; self.nodes[*a].value.len()];
                for (&src, &gv) in indices.iter().zip(g) {
                    dx[src] += gv;
                }
                self.accumulate(grads, *a, dx);
            }
            Op::ConcatCols(a, b) => {
                let (r, ca) = self.nodes[*a].value.dims2().expect("matrix");
                let cb = self.nodes[*b].value.shape()[1];
                let w = ca + cb;
                let mut da = Vec::with_capacity(r * ca);
                let mut db = Vec::with_capacity(r * cb);
                for row in 0..r {
                    da.extend_from_slice(&g[row * w..row * w + ca]);
                    db.extend_from_slice(&g[row * w + ca..(row + 1) * w]);
                }
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p].value.len();
                    self.accumulate(grads, p, g[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::Extremum(a, arg) => {
                let mut dx = vec![0.0; self.nodes[*a].value.len()];
                dx[*arg] = g[0];
                self.accumulate(grads, *a, dx);
            }
            Op::Silu(a) => {
                let x = self.nodes[*a].value.data();
                let dx = x
                    .iter()
                    .zip(g)
                    .map(|(&xv, &gv)| {
                        let s = sigmoid(xv);
                        gv * s * (1.0 + xv * (1.0 - s))
                    })
                    .collect();
                self.accumulate(grads, *a, dx);
            }
            Op::LayerNorm(a, inv_std) => {
                let (r, c) = out.dims2().expect("matrix");
                let y = out.data();
                let mut dx = vec![0.0; r * c];
                for row in 0..r {
                    let ys = &y[row * c..(row + 1) * c];
                    let gs = &g[row * c..(row + 1) * c];
                    let mean_g = gs.iter().fold(0.0, |s, &v| s + v) / c as f64;
                    let mean_gy = ys.iter().zip(gs).fold(0.0, |s, (&yv, &gv)| s + yv * gv) / c as f64;
                    let s = inv_std[row];
                    for ((d, &yv), &gv) in dx[row * c..(row + 1) * c].iter_mut().zip(ys).zip(gs) {
                        *d = s * (gv - mean_g - yv * mean_gy);
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::DwConv3x3 {
                x,
                kernel,
                height,
                width,
            } => {
                let (h, w) = (*height, *width);
                let c = out.shape()[1];
                let xd = self.nodes[*x].value.data();
                let kd = self.nodes[*kernel].value.data();
                let want_x = self.wants(*x);
                let want_k = self.wants(*kernel);
                let mut dx = if want_x { vec![0.0; xd.len()] } else { Vec::new() };
                let mut dk = if want_k { vec![0.0; kd.len()] } else { Vec::new() };
                for y in 0..h {
                    for xx in 0..w {
                        let gs = &g[(y * w + xx) * c..(y * w + xx + 1) * c];
                        for (t, (dy, dxo)) in TAPS.iter().enumerate() {
                            let sy = y as isize + dy;
                            let sx = xx as isize + dxo;
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            let src = (sy as usize * w + sx as usize) * c;
                            if want_x {
                                let kw = &kd[t * c..(t + 1) * c];
                                for ((d, &gv), &wv) in dx[src..src + c].iter_mut().zip(gs).zip(kw) {
                                    *d += gv * wv;
                                }
                            }
                            if want_k {
                                let xin = &xd[src..src + c];
                                for ((d, &gv), &xv) in
                                    dk[t * c..(t + 1) * c].iter_mut().zip(gs).zip(xin)
                                {
                                    *d += gv * xv;
                                }
                            }
                        }
                    }
                }
                if want_x {
                    self.accumulate(grads, *x, dx);
                }
                if want_k {
                    self.accumulate(grads, *kernel, dk);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn propagate_binary(
        &self,
        op: BinOp,
        bcast: Bcast,
        a: usize,
        b: usize,
        g: &[f64],
        out: &Tensor,
        grads: &mut [Option<Vec<f64>>],
    ) {
        let av = self.nodes[a].value.data();
        let bv = self.nodes[b].value.data();
        let nb = bv.len();
        let b_at = |i: usize| match bcast {
            Bcast::Same => bv[i],
            Bcast::Scalar => bv[0],
            Bcast::Row => bv[i % nb],
        };
        if self.wants(a) {
            let da: Vec<f64> = match op {
                BinOp::Add => g.to_vec(),
                BinOp::Sub => g.to_vec(),
                BinOp::Mul => g.iter().enumerate().map(|(i, &gv)| gv * b_at(i)).collect(),
                BinOp::Div => g.iter().enumerate().map(|(i, &gv)| gv / b_at(i)).collect(),
            };
            self.accumulate(grads, a, da);
        }
        if self.wants(b) {
            let per_elem = |i: usize, gv: f64| match op {
                BinOp::Add => gv,
                BinOp::Sub => -gv,
                BinOp::Mul => gv * av[i],
                BinOp::Div => -gv * out.data()[i] / b_at(i),
            };
            let mut db = vec![0.0; nb];
            for (i, &gv) in g.iter().enumerate() {
                let slot = match bcast {
                    Bcast::Same => i,
                    Bcast::Scalar => 0,
                    Bcast::Row => i % nb,
                };
                db[slot] += per_elem(i, gv);
            }
            self.accumulate(grads, b, db);
        }
    }
}

const TAPS: [(isize, isize); 9] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 0),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Central-difference gradient of `f` at `x`.
    fn finite_diff(x: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Vec<f64> {
        let h = 1e-5;
        (0..x.len())
            .map(|i| {
                let mut plus = x.clone();
                plus.data_mut()[i] += h;
                let mut minus = x.clone();
                minus.data_mut()[i] -= h;
                (f(&plus) - f(&minus)) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-12);
        num / den
    }

    fn check_op(shape: &[usize], build: impl Fn(&mut Tape, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(shape, &mut rng);
        let weights = random(&[1], &mut rng);
        let _ = weights;
        let eval = |t: &Tensor| {
            let mut tape = Tape::new();
            let v = tape.var(t.clone());
            let out = build(&mut tape, v);
            tape.scalar(out)
        };
        let mut tape = Tape::new();
        let v = tape.var(x.clone());
        let out = build(&mut tape, v);
        let g = tape.grad(out, v).unwrap();
        let fd = finite_diff(&x, &eval);
        let err = rel_err(g.value.data(), &fd);
        assert!(err < 1e-6, "relative error {err}");
    }

    /// Random weighted sum so every output element influences the scalar.
    fn probe(tape: &mut Tape, v: Var) -> Var {
        let n = tape.value(v).len();
        let w = Tensor::from_fn(tape.shape(v), |i| ((i * 7919 % 97) as f64 / 97.0) - 0.4);
        let _ = n;
        let w = tape.constant(w);
        let p = tape.mul(v, w).unwrap();
        tape.sum(p).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::from_fn(&[3, 4], |i| i as f64));
        let s = tape.sum(x).unwrap();
        assert_eq!(tape.grad(s, x).unwrap().value, Tensor::ones(&[3, 4]));
    }

    #[test]
    fn half_square_gradient_is_identity() {
        let mut tape = Tape::new();
        let x0 = Tensor::from_fn(&[5], |i| i as f64 - 2.5);
        let x = tape.var(x0.clone());
        let sq = tape.square(x).unwrap();
        let s = tape.sum(sq).unwrap();
        let half = tape.scale(s, 0.5).unwrap();
        assert_eq!(tape.grad(half, x).unwrap().value, x0);
    }

    #[test]
    fn unknown_variable_is_rejected() {
        let mut a = Tape::new();
        let mut b = Tape::new();
        let xa = a.var(Tensor::ones(&[2]));
        let xb = b.var(Tensor::ones(&[2]));
        let s = a.sum(xa).unwrap();
        assert!(matches!(a.grad(s, xb), Err(Error::UnknownVariable(_))));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::ones(&[2]));
        assert!(matches!(tape.grad(x, x), Err(Error::Dimension(_))));
    }

    #[test]
    fn unrelated_variable_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::ones(&[2]));
        let y = tape.var(Tensor::ones(&[3]));
        let s = tape.sum(x).unwrap();
        assert_eq!(tape.grad(s, y).unwrap().value, Tensor::zeros(&[3]));
    }

    #[test]
    fn matmul_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = random(&[4, 3], &mut rng);
        check_op(&[2, 4], |t, x| {
            let bv = t.constant(b.clone());
            let y = t.matmul(x, bv).unwrap();
            probe(t, y)
        });
        let a = random(&[3, 2], &mut rng);
        check_op(&[2, 4], |t, x| {
            let av = t.constant(a.clone());
            let y = t.matmul(av, x).unwrap();
            probe(t, y)
        });
        let c = random(&[5, 4], &mut rng);
        check_op(&[2, 4], |t, x| {
            let cv = t.constant(c.clone());
            let y = t.matmul_nt(x, cv).unwrap();
            let z = t.matmul_nt(cv, x).unwrap();
            let p = probe(t, y);
            let q = probe(t, z);
            t.add(p, q).unwrap()
        });
    }

    #[test]
    fn elementwise_and_broadcast_gradients() {
        check_op(&[3, 4], |t, x| {
            let row = t.column(x, 1).unwrap();
            let row = t.reshape(row, &[3]).unwrap();
            let r4 = t.gather(x, (0..4).collect(), &[4]).unwrap();
            let a = t.add(x, r4).unwrap();
            let b = t.mul(a, r4).unwrap();
            let s = t.sum(row).unwrap();
            let c = t.div(b, s).unwrap();
            let d = t.sub(c, s).unwrap();
            let e = t.add_const(d, 3.0).unwrap();
            let f = t.div(e, r4).unwrap();
            probe(t, f)
        });
    }

    #[test]
    fn softmax_layernorm_silu_gradients() {
        check_op(&[4, 5], |t, x| {
            let s = t.softmax_rows(x).unwrap();
            let l = t.layer_norm_rows(x).unwrap();
            let q = t.silu(x).unwrap();
            let a = t.add(s, l).unwrap();
            let b = t.mul(a, q).unwrap();
            let tr = t.transpose(b).unwrap();
            probe(t, tr)
        });
    }

    #[test]
    fn extremum_concat_gradients() {
        check_op(&[6], |t, x| {
            let mx = t.max(x).unwrap();
            let mn = t.min(x).unwrap();
            let range = t.sub(mx, mn).unwrap();
            let shifted = t.sub(x, mn).unwrap();
            let norm = t.div(shifted, range).unwrap();
            let cat = t.concat(&[norm, mx]).unwrap();
            probe(t, cat)
        });
    }

    #[test]
    fn dwconv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = random(&[9, 3], &mut rng);
        check_op(&[20, 3], |t, x| {
            let kv = t.constant(k.clone());
            let y = t.dwconv3x3(x, kv, 4, 5).unwrap();
            probe(t, y)
        });
        let x0 = random(&[20, 3], &mut rng);
        check_op(&[9, 3], |t, k| {
            let xv = t.constant(x0.clone());
            let y = t.dwconv3x3(xv, k, 4, 5).unwrap();
            let cat = t.concat_cols(y, xv).unwrap();
            probe(t, cat)
        });
    }

    #[test]
    fn dwconv_identity_kernel() {
        let mut tape = Tape::new();
        let x0 = Tensor::from_fn(&[12, 2], |i| i as f64);
        let mut k = Tensor::zeros(&[9, 2]);
        k.data_mut()[4 * 2] = 1.0;
        k.data_mut()[4 * 2 + 1] = 1.0;
        let x = tape.var(x0.clone());
        let kv = tape.constant(k);
        let y = tape.dwconv3x3(x, kv, 3, 4).unwrap();
        assert_eq!(tape.value(y), &x0);
    }

    #[test]
    fn deterministic_replay() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let mut tape = Tape::new();
            let x = tape.var(random(&[8, 8], &mut rng));
            let y = tape.matmul(x, x).unwrap();
            let s = tape.softmax_rows(y).unwrap();
            let l = probe(&mut tape, s);
            (tape.value(s).clone(), tape.grad(l, x).unwrap().value)
        };
        assert_eq!(run(), run());
    }
}
