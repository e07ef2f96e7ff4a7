//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass as a node holding
//! its value. Nodes are appended in evaluation order, so the tape is already
//! topologically sorted and the backward sweep walks it in reverse. Graphs are
//! rebuilt for each forward pass and borrow the parameters read-only, which
//! lets independent graphs run in parallel over the same [`ParamStore`].

use std::collections::HashMap;

use crate::error::{shape_err, Error, Result};
use crate::params::{Gradients, ParamStore};
use crate::tensor::{axpy, dot, matmul_kernel, normalize_row, softmax_in_place, Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T: Scalar> {
    Constant,
    Param(usize),
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// matrix plus a row vector broadcast over rows
    AddRow(Var, Var),
    /// matrix times a `rows x 1` column broadcast over columns
    MulCol(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Softplus(Var),
    Log { x: Var, floor: T },
    Softmax { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Sum(Var),
    GatherCols { src: Var, ids: Vec<usize> },
    Concat(Vec<Var>),
    SliceCols { x: Var, start: usize },
    ShiftRows { x: Var, offset: isize },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    /// true when some parameter feeds this node
    tracked: bool,
}

pub struct Graph<'p, T: Scalar = f32> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<usize, Var>,
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self { params, nodes: Vec::new(), param_vars: HashMap::new() }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn rc(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn param(&mut self, path: &str) -> Result<Var> {
        let idx = self
            .params
            .index_of(path)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter {path}")))?;
        if let Some(&v) = self.param_vars.get(&idx) {
            return Ok(v);
        }
        let value = self.params.by_index(idx).1.clone();
        let v = self.push(value, Op::Param(idx), true);
        self.param_vars.insert(idx, v);
        Ok(v)
    }

    /// Copy of `v` that gradients do not flow through.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.rc(a);
        let (k2, m) = self.rc(b);
        if k != k2 {
            return Err(shape_err(format!("matmul {n}x{k} by {k2}x{m}")));
        }
        let out = matmul_kernel(self.value(a).data(), self.value(b).data(), n, k, m);
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::MatMul(a, b), tracked))
    }

    /// `a * b^T` for `a: n x k`, `b: m x k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.rc(a);
        let (m, k2) = self.rc(b);
        if k != k2 {
            return Err(shape_err(format!("matmul_nt {n}x{k} by ({m}x{k2})^T")));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![T::zero(); n * m];
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] = dot(av.row(i), bv.row(j));
            }
        }
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::MatMulNt(a, b), tracked))
    }

    fn zip_same(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(format!("{what} {:?} and {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "add", |x, y| x + y)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(out, Op::Add(a, b), tracked))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(out, Op::Sub(a, b), tracked))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(out, Op::Mul(a, b), tracked))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (n, m) = self.rc(a);
        if self.value(row).len() != m {
            return Err(shape_err(format!("row of {} added to {n}x{m}", self.value(row).len())));
        }
        let mut out = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for chunk in out.data_mut().chunks_mut(m) {
            for (d, &s) in chunk.iter_mut().zip(&r) {
                *d = *d + s;
            }
        }
        out.set_requires_grad(false);
        let tracked = self.tracked(a) || self.tracked(row);
        Ok(self.push(out, Op::AddRow(a, row), tracked))
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (n, m) = self.rc(a);
        if self.value(col).len() != n {
            return Err(shape_err(format!("column of {} scaling {n}x{m}", self.value(col).len())));
        }
        let mut out = self.value(a).clone();
        let c = self.value(col).data().to_vec();
        for (chunk, &s) in out.data_mut().chunks_mut(m).zip(&c) {
            for d in chunk.iter_mut() {
                *d = *d * s;
            }
        }
        out.set_requires_grad(false);
        let tracked = self.tracked(a) || self.tracked(col);
        Ok(self.push(out, Op::MulCol(a, col), tracked))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let out = self.value(a).map(|x| x * factor);
        let tracked = self.tracked(a);
        self.push(out, Op::Scale(a, factor), tracked)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let tracked = self.tracked(a);
        self.push(out, Op::Relu(a), tracked)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        let tracked = self.tracked(a);
        self.push(out, Op::Softplus(a), tracked)
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn log_clamped(&mut self, a: Var, floor: T) -> Var {
        let out = self.value(a).map(|x| x.max(floor).ln());
        let tracked = self.tracked(a);
        self.push(out, Op::Log { x: a, floor }, tracked)
    }

    /// Softmax over the last axis. `mask` has one flag per element.
    pub fn softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (n, m) = self.rc(a);
        if let Some(mk) = mask {
            if mk.len() != n * m {
                return Err(shape_err(format!("mask of {} for {n}x{m} logits", mk.len())));
            }
        }
        let mut out = self.value(a).clone();
        out.set_requires_grad(false);
        for (r, row) in out.data_mut().chunks_mut(m).enumerate() {
            softmax_in_place(row, mask.map(|mk| &mk[r * m..(r + 1) * m]))?;
        }
        let tracked = self.tracked(a);
        Ok(self.push(out, Op::Softmax { x: a }, tracked))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (n, d) = self.rc(x);
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(shape_err(format!("layer norm over {d} features")));
        }
        let mut xhat = Vec::with_capacity(n * d);
        let mut inv_std = Vec::with_capacity(n);
        for r in 0..n {
            let (row, inv) = normalize_row(self.value(x).row(r), eps);
            xhat.extend(row);
            inv_std.push(inv);
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let out: Vec<T> = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| h * g[i % d] + b[i % d])
            .collect();
        let tracked = self.tracked(x) || self.tracked(gain) || self.tracked(bias);
        let value = Tensor::new(self.value(x).shape().to_vec(), out)?;
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, xhat, inv_std }, tracked))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().copied().sum::<T>();
        let tracked = self.tracked(a);
        self.push(Tensor::scalar(total), Op::Sum(a), tracked)
    }

    /// Row `i` of the output is column `ids[i]` of `src`.
    pub fn gather_cols(&mut self, src: Var, ids: &[usize]) -> Result<Var> {
        let (d, vocab) = self.rc(src);
        if ids.is_empty() {
            return Err(shape_err("gather of zero columns"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::BadSpeaker(format!("index {bad} outside vocabulary of {vocab}")));
        }
        let s = self.value(src);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend((0..d).map(|r| s.at(r, id)));
        }
        let tracked = self.tracked(src);
        let value = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(value, Op::GatherCols { src, ids: ids.to_vec() }, tracked))
    }

    /// Concatenation along columns.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.rc(*parts.first().ok_or_else(|| shape_err("concat of nothing"))?).0;
        if parts.iter().any(|&p| self.rc(p).0 != n) {
            return Err(shape_err("concat parts differ in row count"));
        }
        let total: usize = parts.iter().map(|&p| self.rc(p).1).sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let tracked = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(Tensor::new(vec![n, total], out)?, Op::Concat(parts.to_vec()), tracked))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, m) = self.rc(x);
        if len == 0 || start + len > m {
            return Err(shape_err(format!("columns {start}..{} of {m}", start + len)));
        }
        let v = self.value(x);
        let mut out = Vec::with_capacity(n * len);
        for r in 0..n {
            out.extend_from_slice(&v.row(r)[start..start + len]);
        }
        let tracked = self.tracked(x);
        Ok(self.push(Tensor::new(vec![n, len], out)?, Op::SliceCols { x, start }, tracked))
    }

    /// Row `i` of the output is row `i + offset` of `x`, or zeros when that
    /// row does not exist.
    pub fn shift_rows(&mut self, x: Var, offset: isize) -> Result<Var> {
        let (n, m) = self.rc(x);
        let v = self.value(x);
        let mut out = vec![T::zero(); n * m];
        for i in 0..n {
            let src = i as isize + offset;
            if (0..n as isize).contains(&src) {
                out[i * m..(i + 1) * m].copy_from_slice(v.row(src as usize));
            }
        }
        let tracked = self.tracked(x);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::ShiftRows { x, offset }, tracked))
    }

    /// `x * w + b` with `b` broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, T::one() / T::from_usize(n).expect("len"))
    }

    /// Reverse sweep from a single-element `loss`; returns gradients for every
    /// parameter that reached it.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(shape_err(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = Gradients::empty(self.params.len());

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let mut send = |v: Var, contrib: Vec<T>| {
                if !self.nodes[v.0].tracked {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => {
                        for (d, s) in existing.iter_mut().zip(contrib) {
                            *d = *d + s;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Constant => {}
                Op::Param(p) => out.accumulate(*p, &g),
                Op::MatMul(a, b) => {
                    let (n, k) = self.rc(*a);
                    let m = self.rc(*b).1;
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    if self.tracked(*a) {
                        let mut da = vec![T::zero(); n * k];
                        for i in 0..n {
                            let gi = &g[i * m..(i + 1) * m];
                            for p in 0..k {
                                da[i * k + p] = dot(gi, &bv[p * m..(p + 1) * m]);
                            }
                        }
                        send(*a, da);
                    }
                    if self.tracked(*b) {
                        let mut db = vec![T::zero(); k * m];
                        for i in 0..n {
                            let gi = &g[i * m..(i + 1) * m];
                            for p in 0..k {
                                let s = av[i * k + p];
                                if s != T::zero() {
                                    axpy(s, gi, &mut db[p * m..(p + 1) * m]);
                                }
                            }
                        }
                        send(*b, db);
                    }
                }
                Op::MatMulNt(a, b) => {
                    let (n, k) = self.rc(*a);
                    let m = self.rc(*b).0;
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.tracked(*a) {
                        let mut da = vec![T::zero(); n * k];
                        for i in 0..n {
                            for j in 0..m {
                                axpy(g[i * m + j], bv.row(j), &mut da[i * k..(i + 1) * k]);
                            }
                        }
                        send(*a, da);
                    }
                    if self.tracked(*b) {
                        let mut db = vec![T::zero(); m * k];
                        for i in 0..n {
                            for j in 0..m {
                                axpy(g[i * m + j], av.row(i), &mut db[j * k..(j + 1) * k]);
                            }
                        }
                        send(*b, db);
                    }
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Sub(a, b) => {
                    send(*b, g.iter().map(|&x| -x).collect());
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    send(*a, g.iter().zip(bv).map(|(&x, &y)| x * y).collect());
                    send(*b, g.iter().zip(av).map(|(&x, &y)| x * y).collect());
                }
                Op::AddRow(a, row) => {
                    let m = self.rc(*a).1;
                    if self.tracked(*row) {
                        let mut dr = vec![T::zero(); m];
                        for chunk in g.chunks(m) {
                            axpy(T::one(), chunk, &mut dr);
                        }
                        send(*row, dr);
                    }
                    send(*a, g);
                }
                Op::MulCol(a, col) => {
                    let m = self.rc(*a).1;
                    let (av, cv) = (self.value(*a).data(), self.value(*col).data());
                    if self.tracked(*col) {
                        let dc = g
                            .chunks(m)
                            .zip(av.chunks(m))
                            .map(|(gr, ar)| dot(gr, ar))
                            .collect();
                        send(*col, dc);
                    }
                    if self.tracked(*a) {
                        let mut da = g.clone();
                        for (chunk, &s) in da.chunks_mut(m).zip(cv) {
                            for d in chunk.iter_mut() {
                                *d = *d * s;
                            }
                        }
                        send(*a, da);
                    }
                }
                Op::Scale(a, f) => send(*a, g.iter().map(|&x| x * *f).collect()),
                Op::Relu(a) => {
                    let av = self.value(*a).data();
                    let da = g
                        .iter()
                        .zip(av)
                        .map(|(&x, &v)| if v > T::zero() { x } else { T::zero() })
                        .collect();
                    send(*a, da);
                }
                Op::Softplus(a) => {
                    let av = self.value(*a).data();
                    send(*a, g.iter().zip(av).map(|(&x, &v)| x * sigmoid(v)).collect());
                }
                Op::Log { x, floor } => {
                    let xv = self.value(*x).data();
                    let dx = g
                        .iter()
                        .zip(xv)
                        .map(|(&gg, &v)| if v > *floor { gg / v } else { T::zero() })
                        .collect();
                    send(*x, dx);
                }
                Op::Softmax { x } => {
                    let m = self.rc(*x).1;
                    let y = node.value.data();
                    let mut dx = vec![T::zero(); y.len()];
                    for ((dr, gr), yr) in dx.chunks_mut(m).zip(g.chunks(m)).zip(y.chunks(m)) {
                        let inner = dot(gr, yr);
                        for j in 0..m {
                            dr[j] = yr[j] * (gr[j] - inner);
                        }
                    }
                    send(*x, dx);
                }
                Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                    let d = self.rc(*x).1;
                    let gv = self.value(*gain).data();
                    if self.tracked(*gain) {
                        let mut dg = vec![T::zero(); d];
                        for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                            for j in 0..d {
                                dg[j] = dg[j] + gr[j] * hr[j];
                            }
                        }
                        send(*gain, dg);
                    }
                    if self.tracked(*bias) {
                        let mut db = vec![T::zero(); d];
                        for gr in g.chunks(d) {
                            axpy(T::one(), gr, &mut db);
                        }
                        send(*bias, db);
                    }
                    if self.tracked(*x) {
                        let nd = T::from_usize(d).expect("dim");
                        let mut dx = vec![T::zero(); g.len()];
                        for (r, ((dr, gr), hr)) in
                            dx.chunks_mut(d).zip(g.chunks(d)).zip(xhat.chunks(d)).enumerate()
                        {
                            let dh: Vec<T> = gr.iter().zip(gv).map(|(&a, &b)| a * b).collect();
                            let sum_dh = dh.iter().copied().sum::<T>();
                            let sum_dh_h = dot(&dh, hr);
                            let k = inv_std[r] / nd;
                            for j in 0..d {
                                dr[j] = k * (nd * dh[j] - sum_dh - hr[j] * sum_dh_h);
                            }
                        }
                        send(*x, dx);
                    }
                }
                Op::Sum(a) => {
                    let n = self.value(*a).len();
                    send(*a, vec![g[0]; n]);
                }
                Op::GatherCols { src, ids } => {
                    let (d, vocab) = self.rc(*src);
                    let mut ds = vec![T::zero(); d * vocab];
                    for (i, &id) in ids.iter().enumerate() {
                        for r in 0..d {
                            ds[r * vocab + id] = ds[r * vocab + id] + g[i * d + r];
                        }
                    }
                    send(*src, ds);
                }
                Op::Concat(parts) => {
                    let total = node.value.cols();
                    let n = node.value.rows();
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.rc(p).1;
                        if self.tracked(p) {
                            let mut dp = Vec::with_capacity(n * w);
                            for r in 0..n {
                                dp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                            }
                            send(p, dp);
                        }
                        offset += w;
                    }
                }
                Op::SliceCols { x, start } => {
                    let (n, m) = self.rc(*x);
                    let len = node.value.cols();
                    let mut dx = vec![T::zero(); n * m];
                    for r in 0..n {
                        dx[r * m + start..r * m + start + len]
                            .copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                    send(*x, dx);
                }
                Op::ShiftRows { x, offset } => {
                    let (n, m) = self.rc(*x);
                    let mut dx = vec![T::zero(); n * m];
                    for i in 0..n {
                        let src = i as isize + offset;
                        if (0..n as isize).contains(&src) {
                            let s = src as usize;
                            axpy(T::one(), &g[i * m..(i + 1) * m], &mut dx[s * m..(s + 1) * m]);
                        }
                    }
                    send(*x, dx);
                }
            }
        }
        Ok(out)
    }
}

pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
