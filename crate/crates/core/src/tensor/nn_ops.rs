//! Fused neural-network primitives: softmax, cross entropy, normalization
//! and dropout.

use rand::Rng;

use super::{numel, Float, Tensor};
use crate::error::{Error, Result};

fn softmax_row<F: Float>(x: &[F], allowed: Option<&[bool]>, out: &mut [F]) -> bool {
    let mut max = F::neg_infinity();
    for (j, &v) in x.iter().enumerate() {
        if allowed.is_none_or(|a| a[j]) && v > max {
            max = v;
        }
    }
    if max == F::neg_infinity() {
        return false;
    }
    let mut sum = F::zero();
    for (j, (&v, o)) in x.iter().zip(out.iter_mut()).enumerate() {
        *o = if allowed.is_none_or(|a| a[j]) { (v - max).exp() } else { F::zero() };
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
    true
}

impl<F: Float> Tensor<F> {
    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<F>> {
        if axis + 1 == self.rank() {
            return self.softmax_masked(None);
        }
        let last = self.rank() - 1;
        self.transpose(axis, last)?.softmax_masked(None)?.transpose(axis, last)
    }

    /// Softmax over the last axis where `allowed` (a row-major `[rows, cols]`
    /// pattern repeated over all leading dims) excludes entries exactly, as if
    /// their logits were minus infinity.
    pub fn softmax_masked(&self, allowed: Option<(&[bool], usize)>) -> Result<Tensor<F>> {
        let cols = *self.shape().last().ok_or_else(|| Error::contract("softmax of a scalar"))?;
        let x = self.data();
        let mut out = vec![F::zero(); x.len()];
        let pattern_rows = match allowed {
            Some((mask, rows)) => {
                if mask.len() != rows * cols || rows == 0 || !(x.len() / cols).is_multiple_of(rows) {
                    return Err(Error::contract(format!(
                        "softmax mask {}x{} does not tile logits {:?}",
                        rows,
                        mask.len() / rows.max(1),
                        self.shape()
                    )));
                }
                rows
            }
            None => 1,
        };
        for (r, (xr, or)) in x.chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
            let mask_row = allowed.map(|(m, _)| {
                let pr = r % pattern_rows;
                &m[pr * cols..(pr + 1) * cols]
            });
            if !softmax_row(xr, mask_row, or) {
                return Err(Error::contract(format!("attention row {} has no allowed column", r % pattern_rows)));
            }
        }
        let y = std::rc::Rc::new(out);
        super::check_finite("softmax", &y)?;
        let saved = std::rc::Rc::clone(&y);
        Ok(Tensor::from_op_rc("softmax", y, self.shape().to_vec(), vec![self.clone()], move |g| {
            let mut gx = vec![F::zero(); g.len()];
            for ((gr, yr), dr) in g.chunks(cols).zip(saved.chunks(cols)).zip(gx.chunks_mut(cols)) {
                let dot: F = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                for ((d, &gi), &yi) in dr.iter_mut().zip(gr).zip(yr) {
                    *d = yi * (gi - dot);
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Mean over rows of `-log softmax(logits)[target]`; logits are `[N, K]`.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Tensor<F>> {
        if self.rank() != 2 {
            return Err(Error::contract(format!("cross_entropy expects [N, K] logits, got {:?}", self.shape())));
        }
        let (n, k) = (self.shape()[0], self.shape()[1]);
        if targets.len() != n {
            return Err(Error::Dim {
                op: "cross_entropy",
                axis: 0,
                expected: n,
                got: targets.len(),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Index {
                op: "cross_entropy",
                index: bad,
                size: k,
            });
        }
        let x = self.data_rc();
        let mut probs = vec![F::zero(); n * k];
        let mut loss = F::zero();
        for i in 0..n {
            let row = &x[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<F>().ln();
            loss += lse - row[targets[i]];
            for j in 0..k {
                probs[i * k + j] = (row[j] - lse).exp();
            }
        }
        let nf = F::of(n as f64);
        let t = targets.to_vec();
        Tensor::from_op("cross_entropy", vec![loss / nf], vec![], vec![self.clone()], move |g| {
            let scale = g[0] / nf;
            let mut gx: Vec<F> = probs.iter().map(|&p| p * scale).collect();
            for (i, &ti) in t.iter().enumerate() {
                gx[i * k + ti] -= scale;
            }
            vec![Some(gx)]
        })
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&self, gamma: &Tensor<F>, beta: &Tensor<F>, eps: f64) -> Result<Tensor<F>> {
        let d = *self.shape().last().ok_or_else(|| Error::contract("layer_norm of a scalar"))?;
        for p in [gamma, beta] {
            if p.shape() != [d] {
                return Err(Error::Shape {
                    op: "layer_norm",
                    lhs: self.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let rows = self.numel() / d;
        let groups = Groups {
            count: rows,
            len: d,
            channel_of: ChannelMap::Inner { d },
        };
        normalize("layer_norm", self, gamma, beta, eps, groups)
    }

    /// Group normalization of `[B, C, ...]` with per-channel affine params.
    pub fn group_norm(&self, num_groups: usize, gamma: &Tensor<F>, beta: &Tensor<F>, eps: f64) -> Result<Tensor<F>> {
        if self.rank() < 2 {
            return Err(Error::contract("group_norm expects [B, C, ...]"));
        }
        let (b, c) = (self.shape()[0], self.shape()[1]);
        if num_groups == 0 || c % num_groups != 0 {
            return Err(Error::contract(format!("group_norm: {c} channels not divisible into {num_groups} groups")));
        }
        for p in [gamma, beta] {
            if p.shape() != [c] {
                return Err(Error::Dim {
                    op: "group_norm",
                    axis: 1,
                    expected: c,
                    got: p.numel(),
                });
            }
        }
        let spatial = numel(&self.shape()[2..]);
        let groups = Groups {
            count: b * num_groups,
            len: (c / num_groups) * spatial,
            channel_of: ChannelMap::Outer {
                groups: num_groups,
                per_group: c / num_groups,
                spatial,
            },
        };
        normalize("group_norm", self, gamma, beta, eps, groups)
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&self, p: f64, rng: &mut R) -> Result<Tensor<F>> {
        if p <= 0.0 {
            return Ok(self.clone());
        }
        if p >= 1.0 {
            return Err(Error::contract("dropout probability must be < 1"));
        }
        let keep = F::of(1.0 / (1.0 - p));
        let mask: Vec<F> = (0..self.numel())
            .map(|_| if rng.random::<f64>() < p { F::zero() } else { keep })
            .collect();
        let m = Tensor::new(mask, self.shape())?;
        self.mul(&m)
    }
}

#[derive(Clone, Copy)]
enum ChannelMap {
    /// Channel is the position within the group (layer norm).
    Inner { d: usize },
    /// Group `g` of sample covers channels `g*per_group..` each with `spatial` entries.
    Outer {
        groups: usize,
        per_group: usize,
        spatial: usize,
    },
}

#[derive(Clone, Copy)]
struct Groups {
    count: usize,
    len: usize,
    channel_of: ChannelMap,
}

impl Groups {
    fn channel(&self, group: usize, offset: usize) -> usize {
        match self.channel_of {
            ChannelMap::Inner { d } => offset % d,
            ChannelMap::Outer {
                groups,
                per_group,
                spatial,
            } => (group % groups) * per_group + offset / spatial,
        }
    }
}

fn normalize<F: Float>(
    name: &'static str,
    x: &Tensor<F>,
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
    eps: f64,
    groups: Groups,
) -> Result<Tensor<F>> {
    let xd = x.data_rc();
    let (gd, bd) = (gamma.data_rc(), beta.data_rc());
    let n = groups.len;
    let nf = F::of(n as f64);
    let mut xhat = vec![F::zero(); xd.len()];
    let mut inv_std = vec![F::zero(); groups.count];
    let mut out = vec![F::zero(); xd.len()];
    for g in 0..groups.count {
        let seg = &xd[g * n..(g + 1) * n];
        let mean = seg.iter().copied().sum::<F>() / nf;
        let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / nf;
        let is = F::one() / (var + F::of(eps)).sqrt();
        inv_std[g] = is;
        for (j, &v) in seg.iter().enumerate() {
            let h = (v - mean) * is;
            let c = groups.channel(g, j);
            xhat[g * n + j] = h;
            out[g * n + j] = h * gd[c] + bd[c];
        }
    }
    let c = gd.len();
    let flags = (x.requires_grad(), gamma.requires_grad(), beta.requires_grad());
    Tensor::from_op(name, out, x.shape().to_vec(), vec![x.clone(), gamma.clone(), beta.clone()], move |gout| {
        let mut dgamma = flags.1.then(|| vec![F::zero(); c]);
        let mut dbeta = flags.2.then(|| vec![F::zero(); c]);
        let mut dx = flags.0.then(|| vec![F::zero(); gout.len()]);
        for (g, &is) in inv_std.iter().enumerate().take(groups.count) {
            let mut sum_dh = F::zero();
            let mut sum_dh_h = F::zero();
            for j in 0..n {
                let i = g * n + j;
                let ch = groups.channel(g, j);
                let dh = gout[i] * gd[ch];
                sum_dh += dh;
                sum_dh_h += dh * xhat[i];
                if let Some(dg) = dgamma.as_mut() {
                    dg[ch] += gout[i] * xhat[i];
                }
                if let Some(db) = dbeta.as_mut() {
                    db[ch] += gout[i];
                }
            }
            if let Some(dx) = dx.as_mut() {
                for j in 0..n {
                    let i = g * n + j;
                    let ch = groups.channel(g, j);
                    let dh = gout[i] * gd[ch];
                    dx[i] = is * (dh - sum_dh / nf - xhat[i] * sum_dh_h / nf);
                }
            }
        }
        vec![dx, dgamma, dbeta]
    })
}
