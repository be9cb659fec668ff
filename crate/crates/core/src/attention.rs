//! Attention kernels, masks and the transformer blocks built on them.
//!
//! Prototype attention routes every query through `R` rows picked from the
//! pooled queries and keys, so its cost is linear in sequence length:
//! `Y = softmax(Q Pᵀ/√d) · (softmax(P Kᵀ/√d) · V)`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, ParamStore};
use crate::tensor::{Float, Tensor};

pub struct PrototypeSet<F: Float> {
    /// `[R, D]`, or `[G, R, D]` for batched input.
    pub prototypes: Tensor<F>,
    /// Per group, indices into the pooled `[Q; K]` rows.
    pub source_indices: Vec<Vec<usize>>,
}

/// Greedy max-min orthogonality over `rows` (`[n, d]`): start from the
/// largest-norm row, then keep adding the row whose largest absolute cosine
/// to the already chosen rows is smallest. Ties go to the lower index.
pub fn select_orthogonal<F: Float>(rows: &[F], d: usize, r: usize) -> Result<Vec<usize>> {
    let n = rows.len().checked_div(d).unwrap_or(0);
    if r == 0 || r > n {
        return Err(Error::contract(format!("prototype count {r} outside 1..={n}")));
    }
    let norms: Vec<f64> = rows
        .chunks(d)
        .map(|row| row.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt())
        .collect();
    // unit rows in the working precision keep the R sweeps cache-resident
    let unit: Vec<F> = rows
        .chunks(d)
        .zip(&norms)
        .flat_map(|(row, &nr)| row.iter().map(move |v| F::of(if nr > 0.0 { v.f64() / nr } else { 0.0 })))
        .collect();
    let mut first = 0;
    for (i, &nr) in norms.iter().enumerate() {
        if nr > norms[first] {
            first = i;
        }
    }
    let mut chosen = vec![first];
    let mut taken = vec![false; n];
    taken[first] = true;
    let mut worst = vec![0.0f64; n];
    let mut last = first;
    while chosen.len() < r {
        let lu = &unit[last * d..(last + 1) * d];
        let mut pick = usize::MAX;
        for i in 0..n {
            if taken[i] {
                continue;
            }
            let c = lane_dot(&unit[i * d..(i + 1) * d], lu);
            worst[i] = worst[i].max(c.abs());
            if pick == usize::MAX || worst[i] < worst[pick] {
                pick = i;
            }
        }
        chosen.push(pick);
        taken[pick] = true;
        last = pick;
    }
    Ok(chosen)
}

/// Dot product with eight fixed accumulation lanes (vectorisable, and the
/// summation order does not depend on the target).
fn lane_dot<F: Float>(a: &[F], b: &[F]) -> f64 {
    let mut acc = [F::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = F::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    acc.iter().fold(tail.f64(), |s, v| s + v.f64())
}

fn as_batched<F: Float>(x: &Tensor<F>, what: &str) -> Result<Tensor<F>> {
    match x.rank() {
        2 => x.reshape(&[1, x.dim(0), x.dim(1)]),
        3 => Ok(x.clone()),
        _ => Err(Error::contract(format!("{what} must be [N, D] or [G, N, D], got {:?}", x.shape()))),
    }
}

/// Picks `r` prototypes per group from the pooled rows of `q` and `k`
/// (`[N_q, D]` / `[N_k, D]`, or batched with a leading group axis). The
/// prototypes are the raw rows, so gradients reach the selected inputs.
pub fn most_orthogonal_subset<F: Float>(q: &Tensor<F>, k: &Tensor<F>, r: usize) -> Result<PrototypeSet<F>> {
    let batched = q.rank() == 3;
    let (q3, k3) = (as_batched(q, "queries")?, as_batched(k, "keys")?);
    let (g, nq, d) = (q3.dim(0), q3.dim(1), q3.dim(2));
    let nk = k3.dim(1);
    if k3.dim(0) != g || k3.dim(2) != d {
        return Err(Error::Shape {
            op: "most_orthogonal_subset",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    if r == 0 || r > nq + nk {
        return Err(Error::contract(format!("prototype count {r} outside 1..={}", nq + nk)));
    }
    let pooled = Tensor::concat(&[q3, k3], 1)?;
    let pd = pooled.data();
    let per = (nq + nk) * d;
    let mut source_indices = Vec::with_capacity(g);
    let mut flat = Vec::with_capacity(g * r);
    for gi in 0..g {
        let sel = select_orthogonal(&pd[gi * per..(gi + 1) * per], d, r)?;
        flat.extend(sel.iter().map(|&i| gi * (nq + nk) + i));
        source_indices.push(sel);
    }
    let rows = pooled.reshape(&[g * (nq + nk), d])?.index_select(&flat)?;
    let prototypes = if batched { rows.reshape(&[g, r, d])? } else { rows.reshape(&[r, d])? };
    Ok(PrototypeSet {
        prototypes,
        source_indices,
    })
}

/// The two row-stochastic factors `(Ω₁ [.., N_q, R], Ω₂ [.., R, N_k])`.
pub fn prototype_weights<F: Float>(q: &Tensor<F>, k: &Tensor<F>, r: usize) -> Result<(Tensor<F>, Tensor<F>)> {
    let d = *q.shape().last().unwrap_or(&1);
    let scale = 1.0 / (d as f64).sqrt();
    let p = most_orthogonal_subset(q, k, r)?.prototypes;
    let last = q.rank() - 1;
    let omega1 = q.matmul_ext(&p, true)?.scale(scale)?.softmax(last)?;
    let omega2 = p.matmul_ext(k, true)?.scale(scale)?.softmax(last)?;
    Ok((omega1, omega2))
}

/// Prototype attention; `q [.., N_q, D]`, `k [.., N_k, D]`, `v [.., N_k, D_v]`.
pub fn prototype_attention<F: Float>(q: &Tensor<F>, k: &Tensor<F>, v: &Tensor<F>, r: usize) -> Result<Tensor<F>> {
    let kr = k.rank();
    if v.rank() != kr || k.dim(kr - 2) != v.dim(kr - 2) {
        return Err(Error::Shape {
            op: "prototype_attention",
            lhs: k.shape().to_vec(),
            rhs: v.shape().to_vec(),
        });
    }
    let (omega1, omega2) = prototype_weights(q, k, r)?;
    omega1.matmul(&omega2.matmul(v)?)
}

/// Dense `softmax(Q Kᵀ/√d) V`, batched over leading axes.
pub fn dense_attention<F: Float>(q: &Tensor<F>, k: &Tensor<F>, v: &Tensor<F>) -> Result<Tensor<F>> {
    attend(q, k, v, None)
}

fn attend<F: Float>(q: &Tensor<F>, k: &Tensor<F>, v: &Tensor<F>, allowed: Option<(&[bool], usize)>) -> Result<Tensor<F>> {
    let d = *q.shape().last().unwrap_or(&1);
    let logits = q.matmul_ext(k, true)?.scale(1.0 / (d as f64).sqrt())?;
    logits.softmax_masked(allowed)?.matmul(v)
}

/// Row-major `[rows, cols]` boolean pattern: `allowed[i][j]` means query `i`
/// may read key `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    pub allowed: Vec<bool>,
    pub rows: usize,
    pub cols: usize,
    pub condition_len: usize,
}

impl AttentionMask {
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }

    /// Rows `start..end` restricted to the first `cols` keys (incremental
    /// decoding reads a growing prefix).
    pub fn slice(&self, start: usize, end: usize, cols: usize) -> AttentionMask {
        let allowed = (start..end)
            .flat_map(|i| (0..cols).map(move |j| (i, j)))
            .map(|(i, j)| self.get(i, j))
            .collect();
        AttentionMask {
            allowed,
            rows: end - start,
            cols,
            condition_len: self.condition_len,
        }
    }
}

/// Condition block fully bidirectional; target `i` reads every condition
/// token and targets `j <= i`.
pub fn build_seq2seq_mask(condition_len: usize, target_len: usize) -> AttentionMask {
    let l = condition_len + target_len;
    let allowed = (0..l)
        .flat_map(|i| (0..l).map(move |j| (i, j)))
        .map(|(i, j)| if i < condition_len { j < condition_len } else { j <= i })
        .collect();
    AttentionMask {
        allowed,
        rows: l,
        cols: l,
        condition_len,
    }
}

/// Plain lower-triangular mask over the whole sequence.
pub fn build_causal_mask(len: usize) -> AttentionMask {
    let allowed = (0..len)
        .flat_map(|i| (0..len).map(move |j| j <= i))
        .collect();
    AttentionMask {
        allowed,
        rows: len,
        cols: len,
        condition_len: 0,
    }
}

/// Dense attention with disallowed logits excluded exactly.
pub fn masked_attention<F: Float>(q: &Tensor<F>, k: &Tensor<F>, v: &Tensor<F>, mask: &AttentionMask) -> Result<Tensor<F>> {
    let lq = q.dim(q.rank() - 2);
    let lk = k.dim(k.rank() - 2);
    if mask.rows != lq || mask.cols != lk {
        return Err(Error::contract(format!(
            "mask {}x{} does not match attention {}x{}",
            mask.rows, mask.cols, lq, lk
        )));
    }
    attend(q, k, v, Some((&mask.allowed, mask.rows)))
}

/// `[B, L, D]` -> `[B·H, L, D/H]`.
pub fn split_heads<F: Float>(x: &Tensor<F>, heads: usize) -> Result<Tensor<F>> {
    let (b, l, d) = (x.dim(0), x.dim(1), x.dim(2));
    x.reshape(&[b, l, heads, d / heads])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[b * heads, l, d / heads])
}

/// Inverse of [`split_heads`].
pub fn merge_heads<F: Float>(x: &Tensor<F>, heads: usize) -> Result<Tensor<F>> {
    let (bh, l, dh) = (x.dim(0), x.dim(1), x.dim(2));
    x.reshape(&[bh / heads, heads, l, dh])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[bh / heads, l, heads * dh])
}

fn check_heads(d: usize, heads: usize) -> Result<()> {
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::contract(format!("width {d} not divisible into {heads} heads")));
    }
    Ok(())
}

/// Pre-norm two-layer GELU MLP (without the residual).
#[derive(Debug, Clone)]
pub struct FeedForward {
    ln: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl FeedForward {
    pub fn new<F: Float, R: Rng + ?Sized>(store: &mut ParamStore<F>, rng: &mut R, name: &str, d: usize, hidden: usize) -> Self {
        Self {
            ln: LayerNorm::new(store, &format!("{name}/ln"), d),
            fc1: Linear::new(store, rng, &format!("{name}/fc1"), d, hidden, true),
            fc2: Linear::new(store, rng, &format!("{name}/fc2"), hidden, d, true),
        }
    }

    pub fn forward<F: Float>(&self, store: &ParamStore<F>, x: &Tensor<F>) -> Result<Tensor<F>> {
        let h = self.fc1.forward(store, &self.ln.forward(store, x)?)?.gelu()?;
        self.fc2.forward(store, &h)
    }
}

/// Cached keys and values (`[H, L, d_h]`) for incremental decoding.
#[derive(Clone, Default)]
pub struct KvCache<F: Float> {
    pub k: Option<Tensor<F>>,
    pub v: Option<Tensor<F>>,
}

impl<F: Float> KvCache<F> {
    pub fn len(&self) -> usize {
        self.k.as_ref().map_or(0, |k| k.dim(1))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Pre-norm multi-head self-attention (without the residual).
#[derive(Debug, Clone)]
pub struct SelfAttention {
    ln: LayerNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    heads: usize,
}

impl SelfAttention {
    pub fn new<F: Float, R: Rng + ?Sized>(store: &mut ParamStore<F>, rng: &mut R, name: &str, d: usize, heads: usize) -> Result<Self> {
        check_heads(d, heads)?;
        Ok(Self {
            ln: LayerNorm::new(store, &format!("{name}/ln"), d),
            wq: Linear::new(store, rng, &format!("{name}/q"), d, d, false),
            wk: Linear::new(store, rng, &format!("{name}/k"), d, d, false),
            wv: Linear::new(store, rng, &format!("{name}/v"), d, d, false),
            wo: Linear::new(store, rng, &format!("{name}/o"), d, d, true),
            heads,
        })
    }

    /// `x [G, L, D]` -> `[G, L, D]`.
    pub fn forward<F: Float>(&self, store: &ParamStore<F>, x: &Tensor<F>, mask: Option<&AttentionMask>) -> Result<Tensor<F>> {
        let xn = self.ln.forward(store, x)?;
        let q = split_heads(&self.wq.forward(store, &xn)?, self.heads)?;
        let k = split_heads(&self.wk.forward(store, &xn)?, self.heads)?;
        let v = split_heads(&self.wv.forward(store, &xn)?, self.heads)?;
        let y = match mask {
            Some(m) => masked_attention(&q, &k, &v, m)?,
            None => dense_attention(&q, &k, &v)?,
        };
        self.wo.forward(store, &merge_heads(&y, self.heads)?)
    }

    /// Single-sequence incremental step: `x [1, L_new, D]` is appended to
    /// the cache, and `mask` gives the new rows against all cached keys.
    pub fn forward_cached<F: Float>(
        &self,
        store: &ParamStore<F>,
        x: &Tensor<F>,
        cache: &mut KvCache<F>,
        mask: &AttentionMask,
    ) -> Result<Tensor<F>> {
        let xn = self.ln.forward(store, x)?;
        let q = split_heads(&self.wq.forward(store, &xn)?, self.heads)?;
        let k_new = split_heads(&self.wk.forward(store, &xn)?, self.heads)?;
        let v_new = split_heads(&self.wv.forward(store, &xn)?, self.heads)?;
        let (k, v) = match (&cache.k, &cache.v) {
            (Some(k0), Some(v0)) => (Tensor::concat(&[k0.clone(), k_new], 1)?, Tensor::concat(&[v0.clone(), v_new], 1)?),
            _ => (k_new, v_new),
        };
        let y = masked_attention(&q, &k, &v, mask)?;
        cache.k = Some(k);
        cache.v = Some(v);
        self.wo.forward(store, &merge_heads(&y, self.heads)?)
    }
}

/// Spatial-then-temporal block over `x [B, t, n, D]` (`n = h·w` tokens per
/// frame). Every query token attends, through prototypes, to the tokens of
/// each frame separately, which yields one trajectory token per frame; a
/// dense attention over those `t` tokens, queried by the token's own-frame
/// entry, pools the trajectory.
#[derive(Debug, Clone)]
pub struct TrajectoryBlock {
    ln: LayerNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wq_time: Linear,
    wk_time: Linear,
    wv_time: Linear,
    wo: Linear,
    ff: FeedForward,
    heads: usize,
    prototypes: usize,
}

impl TrajectoryBlock {
    pub fn new<F: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        d: usize,
        heads: usize,
        prototypes: usize,
        ff_mult: usize,
    ) -> Result<Self> {
        check_heads(d, heads)?;
        let lin = |store: &mut ParamStore<F>, rng: &mut R, s: &str, bias| Linear::new(store, rng, &format!("{name}/{s}"), d, d, bias);
        Ok(Self {
            ln: LayerNorm::new(store, &format!("{name}/ln"), d),
            wq: lin(store, rng, "q", false),
            wk: lin(store, rng, "k", false),
            wv: lin(store, rng, "v", false),
            wq_time: lin(store, rng, "q_time", false),
            wk_time: lin(store, rng, "k_time", false),
            wv_time: lin(store, rng, "v_time", false),
            wo: lin(store, rng, "o", true),
            ff: FeedForward::new(store, rng, &format!("{name}/ff"), d, ff_mult * d),
            heads,
            prototypes,
        })
    }

    pub fn forward<F: Float>(&self, store: &ParamStore<F>, x: &Tensor<F>) -> Result<Tensor<F>> {
        if x.rank() != 4 {
            return Err(Error::contract(format!("trajectory block expects [B, t, n, D], got {:?}", x.shape())));
        }
        let (b, t, n, d) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let h = self.heads;
        if d % h != 0 || n == 0 {
            return Err(Error::Dim {
                op: "trajectory block",
                axis: 3,
                expected: h,
                got: d,
            });
        }
        let dh = d / h;
        let xn = self.ln.forward(store, x)?;
        let per_head = |y: Tensor<F>| -> Result<Tensor<F>> {
            y.reshape(&[b, t * n, h, dh])?
                .permute(&[0, 2, 1, 3])?
                .reshape(&[b * h, t, n, dh])
        };
        let k = per_head(self.wk.forward(store, &xn)?)?;
        let v = per_head(self.wv.forward(store, &xn)?)?;
        let q = per_head(self.wq.forward(store, &xn)?)?.reshape(&[b * h, t * n, dh])?;
        let r = self.prototypes.clamp(1, t * n + n);

        // one trajectory token per (query, frame)
        let mut per_frame = Vec::with_capacity(t);
        for tp in 0..t {
            let kt = k.narrow(1, tp, 1)?.reshape(&[b * h, n, dh])?;
            let vt = v.narrow(1, tp, 1)?.reshape(&[b * h, n, dh])?;
            per_frame.push(prototype_attention(&q, &kt, &vt, r)?.reshape(&[b * h, t * n, 1, dh])?);
        }
        let traj = Tensor::concat(&per_frame, 2)?
            .reshape(&[b, h, t * n, t, dh])?
            .permute(&[0, 2, 3, 1, 4])?
            .reshape(&[b, t, n, t, d])?;

        let own: Vec<Tensor<F>> = (0..t)
            .map(|tau| traj.narrow(1, tau, 1)?.narrow(3, tau, 1))
            .collect::<Result<_>>()?;
        let own = Tensor::concat(&own, 1)?.reshape(&[b * t * n, 1, d])?;
        let traj = traj.reshape(&[b * t * n, t, d])?;
        let q2 = split_heads(&self.wq_time.forward(store, &own)?, h)?;
        let k2 = split_heads(&self.wk_time.forward(store, &traj)?, h)?;
        let v2 = split_heads(&self.wv_time.forward(store, &traj)?, h)?;
        let pooled = merge_heads(&dense_attention(&q2, &k2, &v2)?, h)?.reshape(&[b, t, n, d])?;
        let x = x.add(&self.wo.forward(store, &pooled)?)?;
        x.add(&self.ff.forward(store, &x)?)
    }
}

/// Dense self-attention along w, then h, then t of `x [B, t, h, w, D]`,
/// each with its own residual, followed by a feed-forward sublayer.
#[derive(Debug, Clone)]
pub struct AxialBlock {
    along_w: SelfAttention,
    along_h: SelfAttention,
    along_t: SelfAttention,
    ff: FeedForward,
}

impl AxialBlock {
    pub fn new<F: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        d: usize,
        heads: usize,
        ff_mult: usize,
    ) -> Result<Self> {
        Ok(Self {
            along_w: SelfAttention::new(store, rng, &format!("{name}/w"), d, heads)?,
            along_h: SelfAttention::new(store, rng, &format!("{name}/h"), d, heads)?,
            along_t: SelfAttention::new(store, rng, &format!("{name}/t"), d, heads)?,
            ff: FeedForward::new(store, rng, &format!("{name}/ff"), d, ff_mult * d),
        })
    }

    pub fn forward<F: Float>(&self, store: &ParamStore<F>, x: &Tensor<F>) -> Result<Tensor<F>> {
        if x.rank() != 5 {
            return Err(Error::contract(format!("axial block expects [B, t, h, w, D], got {:?}", x.shape())));
        }
        let mut x = x.clone();
        for (axis, attn) in [(3, &self.along_w), (2, &self.along_h), (1, &self.along_t)] {
            x = x.add(&along_axis(&x, axis, |g| attn.forward(store, g, None))?)?;
        }
        x.add(&self.ff.forward(store, &x)?)
    }
}

/// Applies `f` to `[G, L, D]` sequences running along `axis` of a rank-5
/// tensor whose last axis is the channel axis.
fn along_axis<F: Float>(x: &Tensor<F>, axis: usize, f: impl Fn(&Tensor<F>) -> Result<Tensor<F>>) -> Result<Tensor<F>> {
    let mut perm: Vec<usize> = (0..4).filter(|&a| a != axis).collect();
    perm.push(axis);
    perm.push(4);
    let moved = x.permute(&perm)?;
    let s = moved.shape().to_vec();
    let y = f(&moved.reshape(&[s[0] * s[1] * s[2], s[3], s[4]])?)?.reshape(&s)?;
    let mut inverse = vec![0; 5];
    for (i, &p) in perm.iter().enumerate() {
        inverse[p] = i;
    }
    y.permute(&inverse)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn t(v: &[f64], s: &[usize]) -> Tensor<f64> {
        Tensor::from_f64(v, s).unwrap()
    }

    #[test]
    fn basis_rows_all_selected() {
        let mut eye = vec![0.0; 16];
        (0..4).for_each(|i| eye[i * 4 + i] = 1.0);
        let mut sel = select_orthogonal(&eye, 4, 4).unwrap();
        sel.sort();
        assert_eq!(sel, vec![0, 1, 2, 3]);
    }

    #[test]
    fn single_prototype_is_largest_row() {
        let rows = [0.1, 0.0, 0.0, 3.0, 2.0, 2.0];
        assert_eq!(select_orthogonal(&rows, 2, 1).unwrap(), vec![1]);
        assert!(select_orthogonal(&rows, 2, 4).is_err());
        assert!(select_orthogonal(&rows, 2, 0).is_err());
    }

    #[test]
    fn near_duplicate_is_rejected() {
        let q = t(&[1.0, 0.0, 0.999, 0.04], &[2, 2]);
        let k = t(&[0.0, 1.0], &[1, 2]);
        let set = most_orthogonal_subset(&q, &k, 2).unwrap();
        assert_eq!(set.source_indices[0], vec![0, 2]);
        assert_eq!(set.prototypes.data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn constant_values_pass_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = Tensor::<f64>::randn(&[7, 3], 1.0, &mut rng);
        let k = Tensor::<f64>::randn(&[5, 3], 1.0, &mut rng);
        let v = t(&[0.3, -1.2].repeat(5), &[5, 2]);
        for r in 1..=12 {
            let y = prototype_attention(&q, &k, &v, r).unwrap();
            for row in y.data().chunks(2) {
                assert!((row[0] - 0.3).abs() < 1e-12 && (row[1] + 1.2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn one_prototype_gives_identical_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = Tensor::<f64>::randn(&[6, 4], 1.0, &mut rng);
        let k = Tensor::<f64>::randn(&[5, 4], 1.0, &mut rng);
        let v = Tensor::<f64>::randn(&[5, 3], 1.0, &mut rng);
        let y = prototype_attention(&q, &k, &v, 1).unwrap();
        let p = most_orthogonal_subset(&q, &k, 1).unwrap().prototypes;
        let expected = dense_attention(&p, &k, &v).unwrap();
        for row in y.data().chunks(3) {
            for (a, b) in row.iter().zip(expected.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn seq2seq_mask_examples() {
        let m = build_seq2seq_mask(2, 2);
        let expect = [[1, 1, 0, 0], [1, 1, 0, 0], [1, 1, 1, 0], [1, 1, 1, 1]];
        for (i, row) in expect.iter().enumerate() {
            for (j, &e) in row.iter().enumerate() {
                assert_eq!(m.get(i, j), e == 1);
            }
        }
        assert_eq!(build_seq2seq_mask(0, 3), build_causal_mask(3));
        assert!(build_seq2seq_mask(3, 0).allowed.iter().all(|&a| a));
    }

    #[test]
    fn diagonal_mask_returns_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q = Tensor::<f64>::randn(&[4, 3], 1.0, &mut rng);
        let k = Tensor::<f64>::randn(&[4, 3], 1.0, &mut rng);
        let v = Tensor::<f64>::randn(&[4, 2], 1.0, &mut rng);
        let mask = AttentionMask {
            allowed: (0..16).map(|i| i / 4 == i % 4).collect(),
            rows: 4,
            cols: 4,
            condition_len: 0,
        };
        assert_eq!(masked_attention(&q, &k, &v, &mask).unwrap().data(), v.data());
        let full = AttentionMask {
            allowed: vec![true; 16],
            ..mask.clone()
        };
        assert_eq!(
            masked_attention(&q, &k, &v, &full).unwrap().data(),
            dense_attention(&q, &k, &v).unwrap().data()
        );
        let empty = AttentionMask {
            allowed: vec![false; 16],
            ..mask
        };
        assert!(masked_attention(&q, &k, &v, &empty).is_err());
    }

    #[test]
    fn axis_moves_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::<f64>::randn(&[2, 3, 4, 5, 6], 1.0, &mut rng);
        for axis in 1..4 {
            let y = along_axis(&x, axis, |g| {
                assert_eq!(g.dim(1), x.dim(axis));
                Ok(g.clone())
            })
            .unwrap();
            assert_eq!(y.data(), x.data());
        }
    }
}
