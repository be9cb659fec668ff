//! Elementwise arithmetic with broadcasting, reductions, shape manipulation
//! and batched matrix products.

use std::rc::Rc;

use super::float::gemm;
use super::{numel, Float, Tensor};
use crate::error::{Error, Result};

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Contiguous strides of `shape` aligned to `out` (zero on broadcast axes).
fn aligned_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + rank - shape.len();
        strides[oi] = if shape[i] == 1 && out[oi] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` for every output element in order.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let total = numel(out);
    if total == 0 {
        return;
    }
    if out.is_empty() {
        f(0, 0, 0);
        return;
    }
    let rank = out.len();
    let inner = out[rank - 1];
    let (ia_step, ib_step) = (sa[rank - 1], sb[rank - 1]);
    let mut counter = vec![0usize; rank - 1];
    let mut oi = 0;
    loop {
        let mut ia = 0;
        let mut ib = 0;
        for d in 0..rank - 1 {
            ia += counter[d] * sa[d];
            ib += counter[d] * sb[d];
        }
        for _ in 0..inner {
            f(oi, ia, ib);
            oi += 1;
            ia += ia_step;
            ib += ib_step;
        }
        if oi >= total {
            break;
        }
        let mut d = rank - 1;
        loop {
            d -= 1;
            counter[d] += 1;
            if counter[d] < out[d] {
                break;
            }
            counter[d] = 0;
        }
    }
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    fn name(self) -> &'static str {
        match self {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::Div => "div",
        }
    }

    fn apply<F: Float>(self, a: F, b: F) -> F {
        match self {
            BinOp::Add => a + b,
            BinOp::Sub => a - b,
            BinOp::Mul => a * b,
            BinOp::Div => a / b,
        }
    }

    /// Partial derivatives (d/da, d/db) scaled by `g`.
    fn partials<F: Float>(self, g: F, a: F, b: F) -> (F, F) {
        match self {
            BinOp::Add => (g, g),
            BinOp::Sub => (g, -g),
            BinOp::Mul => (g * b, g * a),
            BinOp::Div => (g / b, -g * a / (b * b)),
        }
    }
}

fn binary<F: Float>(op: BinOp, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let out_shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| Error::Shape {
        op: op.name(),
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    })?;
    let (ad, bd) = (a.data_rc(), b.data_rc());
    let same = a.shape() == b.shape();
    let data: Vec<F> = if same {
        ad.iter().zip(bd.iter()).map(|(&x, &y)| op.apply(x, y)).collect()
    } else {
        let sa = aligned_strides(a.shape(), &out_shape);
        let sb = aligned_strides(b.shape(), &out_shape);
        let mut out = vec![F::zero(); numel(&out_shape)];
        for_each_broadcast(&out_shape, &sa, &sb, |o, i, j| out[o] = op.apply(ad[i], bd[j]));
        out
    };
    let (a_shape, b_shape) = (a.shape().to_vec(), b.shape().to_vec());
    let (ra, rb) = (a.requires_grad(), b.requires_grad());
    let oshape = out_shape.clone();
    Tensor::from_op(op.name(), data, out_shape, vec![a.clone(), b.clone()], move |g| {
        let mut ga = ra.then(|| vec![F::zero(); ad.len()]);
        let mut gb = rb.then(|| vec![F::zero(); bd.len()]);
        if same {
            for i in 0..g.len() {
                let (pa, pb) = op.partials(g[i], ad[i], bd[i]);
                if let Some(ga) = ga.as_mut() {
                    ga[i] = pa;
                }
                if let Some(gb) = gb.as_mut() {
                    gb[i] = pb;
                }
            }
        } else {
            let sa = aligned_strides(&a_shape, &oshape);
            let sb = aligned_strides(&b_shape, &oshape);
            for_each_broadcast(&oshape, &sa, &sb, |o, i, j| {
                let (pa, pb) = op.partials(g[o], ad[i], bd[j]);
                if let Some(ga) = ga.as_mut() {
                    ga[i] += pa;
                }
                if let Some(gb) = gb.as_mut() {
                    gb[j] += pb;
                }
            });
        }
        vec![ga, gb]
    })
}

fn unary<F: Float>(
    name: &'static str,
    x: &Tensor<F>,
    f: impl Fn(F) -> F,
    // derivative given (input, output)
    df: impl Fn(F, F) -> F + 'static,
) -> Result<Tensor<F>> {
    let xd = x.data_rc();
    let data: Vec<F> = xd.iter().map(|&v| f(v)).collect();
    let out = Rc::new(data);
    super::check_finite(name, &out)?;
    let saved = Rc::clone(&out);
    Ok(Tensor::from_op_rc(name, out, x.shape().to_vec(), vec![x.clone()], move |g| {
        let gx = g
            .iter()
            .zip(xd.iter().zip(saved.iter()))
            .map(|(&gi, (&xi, &yi))| gi * df(xi, yi))
            .collect();
        vec![Some(gx)]
    }))
}

impl<F: Float> Tensor<F> {
    pub fn add(&self, rhs: &Tensor<F>) -> Result<Tensor<F>> {
        binary(BinOp::Add, self, rhs)
    }

    pub fn sub(&self, rhs: &Tensor<F>) -> Result<Tensor<F>> {
        binary(BinOp::Sub, self, rhs)
    }

    pub fn mul(&self, rhs: &Tensor<F>) -> Result<Tensor<F>> {
        binary(BinOp::Mul, self, rhs)
    }

    pub fn div(&self, rhs: &Tensor<F>) -> Result<Tensor<F>> {
        binary(BinOp::Div, self, rhs)
    }

    pub fn scale(&self, c: f64) -> Result<Tensor<F>> {
        let c = F::of(c);
        unary("scale", self, move |v| v * c, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor<F>> {
        let c = F::of(c);
        unary("add_scalar", self, move |v| v + c, |_, _| F::one())
    }

    pub fn neg(&self) -> Result<Tensor<F>> {
        unary("neg", self, |v| -v, |_, _| -F::one())
    }

    pub fn square(&self) -> Result<Tensor<F>> {
        unary("square", self, |v| v * v, |x, _| x + x)
    }

    pub fn sqrt(&self) -> Result<Tensor<F>> {
        unary("sqrt", self, |v| v.sqrt(), |_, y| F::of(0.5) / y)
    }

    pub fn exp(&self) -> Result<Tensor<F>> {
        unary("exp", self, |v| v.exp(), |_, y| y)
    }

    pub fn ln(&self) -> Result<Tensor<F>> {
        unary("ln", self, |v| v.ln(), |x, _| F::one() / x)
    }

    pub fn sin(&self) -> Result<Tensor<F>> {
        unary("sin", self, |v| v.sin(), |x, _| x.cos())
    }

    pub fn tanh(&self) -> Result<Tensor<F>> {
        unary("tanh", self, |v| v.tanh(), |_, y| F::one() - y * y)
    }

    pub fn sigmoid(&self) -> Result<Tensor<F>> {
        unary("sigmoid", self, sigmoid, |_, y| y * (F::one() - y))
    }

    pub fn relu(&self) -> Result<Tensor<F>> {
        unary(
            "relu",
            self,
            |v| if v > F::zero() { v } else { F::zero() },
            |x, _| if x > F::zero() { F::one() } else { F::zero() },
        )
    }

    pub fn leaky_relu(&self, slope: f64) -> Result<Tensor<F>> {
        let s = F::of(slope);
        unary(
            "leaky_relu",
            self,
            move |v| if v > F::zero() { v } else { v * s },
            move |x, _| if x > F::zero() { F::one() } else { s },
        )
    }

    /// Tanh approximation of the Gaussian error linear unit.
    pub fn gelu(&self) -> Result<Tensor<F>> {
        let c = F::of((2.0 / std::f64::consts::PI).sqrt());
        let k = F::of(0.044715);
        let half = F::of(0.5);
        unary(
            "gelu",
            self,
            move |x| half * x * (F::one() + (c * (x + k * x * x * x)).tanh()),
            move |x, _| {
                let u = c * (x + k * x * x * x);
                let t = u.tanh();
                let du = c * (F::one() + F::of(3.0) * k * x * x);
                half * (F::one() + t) + half * x * (F::one() - t * t) * du
            },
        )
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&self) -> Result<Tensor<F>> {
        unary("softplus", self, softplus, |x, _| sigmoid(x))
    }

    pub fn sum(&self) -> Result<Tensor<F>> {
        let n = self.numel();
        let s = self.data().iter().copied().sum::<F>();
        Tensor::from_op("sum", vec![s], vec![], vec![self.clone()], move |g| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean(&self) -> Result<Tensor<F>> {
        let n = self.numel();
        let s = self.data().iter().copied().sum::<F>() / F::of(n as f64);
        Tensor::from_op("mean", vec![s], vec![], vec![self.clone()], move |g| {
            vec![Some(vec![g[0] / F::of(n as f64); n])]
        })
    }

    fn axis_split(&self, axis: usize) -> Result<(usize, usize, usize)> {
        if axis >= self.rank() {
            return Err(Error::Index {
                op: "axis",
                index: axis,
                size: self.rank(),
            });
        }
        let outer = numel(&self.shape()[..axis]);
        let inner = numel(&self.shape()[axis + 1..]);
        Ok((outer, self.shape()[axis], inner))
    }

    /// Sum over one axis (kept as size 1 when `keepdim`).
    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor<F>> {
        let (outer, len, inner) = self.axis_split(axis)?;
        let x = self.data();
        let mut out = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &x[(o * len + a) * inner..(o * len + a + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += *s);
            }
        }
        let mut shape = self.shape().to_vec();
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        Tensor::from_op("sum_axis", out, shape, vec![self.clone()], move |g| {
            let mut gx = vec![F::zero(); outer * len * inner];
            for o in 0..outer {
                for a in 0..len {
                    gx[(o * len + a) * inner..(o * len + a + 1) * inner]
                        .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(gx)]
        })
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor<F>> {
        let len = *self.shape().get(axis).ok_or(Error::Index {
            op: "mean_axis",
            index: axis,
            size: self.rank(),
        })?;
        self.sum_axis(axis, keepdim)?.scale(1.0 / len as f64)
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<F>> {
        if numel(shape) != self.numel() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        if shape == self.shape() {
            return Ok(self.clone());
        }
        Ok(Tensor::from_op_rc(
            "reshape",
            self.data_rc(),
            shape.to_vec(),
            vec![self.clone()],
            |g| vec![Some(g.to_vec())],
        ))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<F>> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::contract(format!("permute: invalid permutation {perm:?} for rank {rank}")));
        }
        if perm.iter().enumerate().all(|(i, &p)| i == p) {
            return Ok(self.clone());
        }
        let in_shape = self.shape().to_vec();
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let data = permute_data(self.data(), &in_shape, perm);
        let mut inverse = vec![0; rank];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let oshape = out_shape.clone();
        Tensor::from_op("permute", data, out_shape, vec![self.clone()], move |g| {
            vec![Some(permute_data(g, &oshape, &inverse))]
        })
    }

    pub fn transpose(&self, a: usize, b: usize) -> Result<Tensor<F>> {
        let mut perm: Vec<usize> = (0..self.rank()).collect();
        if a >= perm.len() || b >= perm.len() {
            return Err(Error::contract("transpose: axis out of range"));
        }
        perm.swap(a, b);
        self.permute(&perm)
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(parts: &[Tensor<F>], axis: usize) -> Result<Tensor<F>> {
        let first = parts.first().ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::Index {
                op: "concat",
                index: axis,
                size: rank,
            });
        }
        for p in parts {
            if p.rank() != rank {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            for d in 0..rank {
                if d != axis && p.shape()[d] != first.shape()[d] {
                    return Err(Error::Dim {
                        op: "concat",
                        axis: d,
                        expected: first.shape()[d],
                        got: p.shape()[d],
                    });
                }
            }
        }
        let outer = numel(&first.shape()[..axis]);
        let inner = numel(&first.shape()[axis + 1..]);
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &l) in parts.iter().zip(&lens) {
                data.extend_from_slice(&p.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let flags: Vec<bool> = parts.iter().map(|p| p.requires_grad()).collect();
        Tensor::from_op("concat", data, shape, parts.to_vec(), move |g| {
            let mut grads: Vec<Option<Vec<F>>> = flags
                .iter()
                .zip(&lens)
                .map(|(&f, &l)| f.then(|| Vec::with_capacity(outer * l * inner)))
                .collect();
            let mut off = 0;
            for _ in 0..outer {
                for (gp, &l) in grads.iter_mut().zip(&lens) {
                    if let Some(gp) = gp.as_mut() {
                        gp.extend_from_slice(&g[off..off + l * inner]);
                    }
                    off += l * inner;
                }
            }
            grads
        })
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<F>> {
        let (outer, full, inner) = self.axis_split(axis)?;
        if start + len > full {
            return Err(Error::Index {
                op: "narrow",
                index: start + len,
                size: full,
            });
        }
        let x = self.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&x[(o * full + start) * inner..(o * full + start + len) * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Tensor::from_op("narrow", data, shape, vec![self.clone()], move |g| {
            let mut gx = vec![F::zero(); outer * full * inner];
            for o in 0..outer {
                gx[(o * full + start) * inner..(o * full + start + len) * inner]
                    .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        })
    }

    /// Gathers slices along axis 0: `out[i] = self[indices[i]]`. Gradients
    /// scatter-add back, so repeated indices accumulate.
    pub fn index_select(&self, indices: &[usize]) -> Result<Tensor<F>> {
        if self.rank() == 0 {
            return Err(Error::contract("index_select on a scalar"));
        }
        let rows = self.shape()[0];
        let row = numel(&self.shape()[1..]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Index {
                op: "index_select",
                index: bad,
                size: rows,
            });
        }
        let x = self.data();
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            data.extend_from_slice(&x[i * row..(i + 1) * row]);
        }
        let mut shape = self.shape().to_vec();
        shape[0] = indices.len();
        let idx = indices.to_vec();
        Tensor::from_op("index_select", data, shape, vec![self.clone()], move |g| {
            let mut gx = vec![F::zero(); rows * row];
            for (k, &i) in idx.iter().enumerate() {
                gx[i * row..(i + 1) * row]
                    .iter_mut()
                    .zip(&g[k * row..(k + 1) * row])
                    .for_each(|(a, b)| *a += *b);
            }
            vec![Some(gx)]
        })
    }

    /// Forward value of `hard`, gradient routed to `soft` unchanged.
    pub fn straight_through(soft: &Tensor<F>, hard: &Tensor<F>) -> Result<Tensor<F>> {
        if soft.shape() != hard.shape() {
            return Err(Error::Shape {
                op: "straight_through",
                lhs: soft.shape().to_vec(),
                rhs: hard.shape().to_vec(),
            });
        }
        Ok(Tensor::from_op_rc(
            "straight_through",
            hard.data_rc(),
            hard.shape().to_vec(),
            vec![soft.clone()],
            |g| vec![Some(g.to_vec())],
        ))
    }

    /// Batched matrix product. `self` is `[.., m, k]`; `rhs` is `[.., k, n]`
    /// with identical leading dims, or a plain `[k, n]` matrix shared across
    /// the batch. With `trans_rhs`, `rhs` is stored as `[.., n, k]`.
    pub fn matmul_ext(&self, rhs: &Tensor<F>, trans_rhs: bool) -> Result<Tensor<F>> {
        let mismatch = || Error::Shape {
            op: "matmul",
            lhs: self.shape().to_vec(),
            rhs: rhs.shape().to_vec(),
        };
        if self.rank() < 2 || rhs.rank() < 2 {
            return Err(mismatch());
        }
        let ar = self.rank();
        let br = rhs.rank();
        let (m, k) = (self.shape()[ar - 2], self.shape()[ar - 1]);
        let (bk, n) = if trans_rhs {
            (rhs.shape()[br - 1], rhs.shape()[br - 2])
        } else {
            (rhs.shape()[br - 2], rhs.shape()[br - 1])
        };
        if bk != k {
            return Err(Error::Dim {
                op: "matmul",
                axis: ar - 1,
                expected: bk,
                got: k,
            });
        }
        let batch = numel(&self.shape()[..ar - 2]);
        let shared_rhs = br == 2;
        if !shared_rhs && self.shape()[..ar - 2] != rhs.shape()[..br - 2] {
            return Err(mismatch());
        }
        let (ad, bd) = (self.data_rc(), rhs.data_rc());
        let mut out = vec![F::zero(); batch * m * n];
        if shared_rhs && !trans_rhs {
            // one large product: [batch*m, k] x [k, n]
            gemm(batch * m, k, n, &ad, false, &bd, false, F::zero(), &mut out);
        } else {
            for i in 0..batch {
                let bo = if shared_rhs { 0 } else { i * k * n };
                gemm(
                    m,
                    k,
                    n,
                    &ad[i * m * k..],
                    false,
                    &bd[bo..],
                    trans_rhs,
                    F::zero(),
                    &mut out[i * m * n..],
                );
            }
        }
        let mut shape = self.shape()[..ar - 2].to_vec();
        shape.extend([m, n]);
        let (ra, rb) = (self.requires_grad(), rhs.requires_grad());
        Tensor::from_op("matmul", out, shape, vec![self.clone(), rhs.clone()], move |g| {
            let ga = ra.then(|| {
                let mut ga = vec![F::zero(); batch * m * k];
                if shared_rhs && !trans_rhs {
                    gemm(batch * m, n, k, g, false, &bd, true, F::zero(), &mut ga);
                } else {
                    for i in 0..batch {
                        let bo = if shared_rhs { 0 } else { i * k * n };
                        // dA = dC · op(B)^T
                        gemm(m, n, k, &g[i * m * n..], false, &bd[bo..], !trans_rhs, F::zero(), &mut ga[i * m * k..]);
                    }
                }
                ga
            });
            let gb = rb.then(|| {
                let mut gb = vec![F::zero(); bd.len()];
                if shared_rhs && !trans_rhs {
                    gemm(k, batch * m, n, &ad, true, g, false, F::zero(), &mut gb);
                } else {
                    for i in 0..batch {
                        let bo = if shared_rhs { 0 } else { i * k * n };
                        let beta = if shared_rhs && i > 0 { F::one() } else { F::zero() };
                        if trans_rhs {
                            // dB = dC^T · A  -> [n, k]
                            gemm(n, m, k, &g[i * m * n..], true, &ad[i * m * k..], false, beta, &mut gb[bo..]);
                        } else {
                            // dB = A^T · dC  -> [k, n]
                            gemm(k, m, n, &ad[i * m * k..], true, &g[i * m * n..], false, beta, &mut gb[bo..]);
                        }
                    }
                }
                gb
            });
            vec![ga, gb]
        })
    }

    pub fn matmul(&self, rhs: &Tensor<F>) -> Result<Tensor<F>> {
        self.matmul_ext(rhs, false)
    }

    /// Row index of the maximum along the last axis (ties: lowest index).
    pub fn argmax_last(&self) -> Vec<usize> {
        let k = *self.shape().last().unwrap_or(&1);
        self.data()
            .chunks(k.max(1))
            .map(|row| {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

pub(crate) fn sigmoid<F: Float>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

pub(crate) fn softplus<F: Float>(x: F) -> F {
    x.max(F::zero()) + (-x.abs()).exp().ln_1p()
}

/// Copies `x` (row-major, `shape`) into the permuted layout.
pub(crate) fn permute_data<F: Float>(x: &[F], shape: &[usize], perm: &[usize]) -> Vec<F> {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    if x.is_empty() {
        return out;
    }
    let inner = out_shape[rank - 1];
    let inner_stride = strides[rank - 1];
    let mut counter = vec![0usize; rank - 1];
    loop {
        let base: usize = counter.iter().zip(&strides).map(|(c, s)| c * s).sum();
        if inner_stride == 1 {
            out.extend_from_slice(&x[base..base + inner]);
        } else {
            out.extend((0..inner).map(|i| x[base + i * inner_stride]));
        }
        if out.len() >= x.len() {
            break;
        }
        let mut d = rank - 1;
        loop {
            d -= 1;
            counter[d] += 1;
            if counter[d] < out_shape[d] {
                break;
            }
            counter[d] = 0;
        }
    }
    out
}

/// Plain `[m,k] x [k,n]` product on raw buffers (no tape).
pub fn matmul_raw<F: Float>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut c = vec![F::zero(); m * n];
    gemm(m, k, n, a, false, b, false, F::zero(), &mut c);
    c
}

/// `[m,k] x [n,k]ᵀ` on raw buffers (no tape).
pub fn matmul_raw_nt<F: Float>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut c = vec![F::zero(); m * n];
    gemm(m, k, n, a, false, b, true, F::zero(), &mut c);
    c
}
