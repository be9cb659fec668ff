//! Discrete bottleneck: nearest-code lookup, the VQ loss terms, usage
//! statistics and dead-code revival.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Float, Tensor};

/// Codebook entries live in a [`ParamStore`] under `name`; this struct keeps
/// the name plus usage counters.
#[derive(Debug, Clone)]
pub struct Codebook {
    name: String,
    k: usize,
    n_z: usize,
    usage: Vec<u64>,
    since_used: Vec<u64>,
    /// When false, quantize leaves the counters untouched.
    pub track_usage: bool,
}

pub struct QuantizeResult<F: Float> {
    /// Row-major over every position of `z_e` except the channel axis.
    pub indices: Vec<usize>,
    /// Gathered entries, shaped like `z_e`; gradients flow to the codebook.
    pub z_q: Tensor<F>,
    pub z_e: Tensor<F>,
}

pub struct VqLossTerms<F: Float> {
    pub recon: Tensor<F>,
    pub codebook: Tensor<F>,
    pub commit: Tensor<F>,
    pub beta: f64,
}

impl<F: Float> VqLossTerms<F> {
    pub fn total(&self) -> Result<Tensor<F>> {
        self.recon.add(&self.codebook)?.add(&self.commit)
    }
}

impl Codebook {
    /// Registers a `[k, n_z]` table initialised uniformly in `±1/k`.
    pub fn new<F: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        k: usize,
        n_z: usize,
    ) -> Result<Self> {
        if k < 2 || n_z == 0 {
            return Err(Error::contract(format!("codebook needs K >= 2 and n_z >= 1, got {k}x{n_z}")));
        }
        let bound = 1.0 / k as f64;
        store.insert(name, &Tensor::uniform(&[k, n_z], -bound, bound, rng));
        Ok(Self::attach(name, k, n_z))
    }

    /// Wraps entries already present in a store (e.g. loaded from disk).
    pub fn attach(name: &str, k: usize, n_z: usize) -> Self {
        Self {
            name: name.to_string(),
            k,
            n_z,
            usage: vec![0; k],
            since_used: vec![0; k],
            track_usage: true,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn size(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.n_z
    }

    pub fn usage(&self) -> &[u64] {
        &self.usage
    }

    pub fn steps_since_used(&self) -> &[u64] {
        &self.since_used
    }

    pub fn reset_usage(&mut self) {
        self.usage.iter_mut().for_each(|u| *u = 0);
        self.since_used.iter_mut().for_each(|u| *u = 0);
    }

    pub fn entries<F: Float>(&self, store: &ParamStore<F>) -> Result<Tensor<F>> {
        let e = store.get(&self.name)?;
        if e.shape() != [self.k, self.n_z] {
            return Err(Error::Shape {
                op: "codebook",
                lhs: e.shape().to_vec(),
                rhs: vec![self.k, self.n_z],
            });
        }
        Ok(e)
    }

    /// Nearest entry per position of `z_e` (last axis = n_z), lowest index
    /// on ties.
    pub fn quantize<F: Float>(&mut self, store: &ParamStore<F>, z_e: &Tensor<F>) -> Result<QuantizeResult<F>> {
        if z_e.shape().last() != Some(&self.n_z) {
            return Err(Error::Dim {
                op: "quantize",
                axis: z_e.rank().saturating_sub(1),
                expected: self.n_z,
                got: z_e.shape().last().copied().unwrap_or(0),
            });
        }
        let entries = self.entries(store)?;
        let indices = nearest_codes(z_e.data(), entries.data(), self.n_z)?;
        self.record(&indices);
        let z_q = entries.index_select(&indices)?.reshape(z_e.shape())?;
        Ok(QuantizeResult {
            indices,
            z_q,
            z_e: z_e.clone(),
        })
    }

    /// Gathers entries for given indices into shape `[.., n_z]`.
    pub fn lookup<F: Float>(&self, store: &ParamStore<F>, indices: &[usize], shape: &[usize]) -> Result<Tensor<F>> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.k) {
            return Err(Error::Index {
                op: "codebook lookup",
                index: bad,
                size: self.k,
            });
        }
        let mut full = shape.to_vec();
        full.push(self.n_z);
        self.entries(store)?.index_select(indices)?.reshape(&full)
    }

    fn record(&mut self, indices: &[usize]) {
        if !self.track_usage {
            return;
        }
        let mut hit = vec![false; self.k];
        for &i in indices {
            self.usage[i] += 1;
            hit[i] = true;
        }
        for (s, h) in self.since_used.iter_mut().zip(hit) {
            *s = if h { 0 } else { *s + 1 };
        }
    }

    /// `(perplexity, dead_fraction)` of the recorded usage.
    pub fn stats(&self) -> Result<(f64, f64)> {
        let total: u64 = self.usage.iter().sum();
        if total == 0 {
            return Err(Error::contract("codebook stats requested before any quantization"));
        }
        let dead = self.usage.iter().filter(|&&u| u == 0).count();
        Ok((perplexity_of_counts(&self.usage), dead as f64 / self.k as f64))
    }

    /// Resets every entry unused for at least `threshold_steps` quantize
    /// calls to a random row of `z_e_batch` plus Gaussian noise of scale
    /// `noise`. Returns the number of revived entries.
    pub fn revive_dead_codes<F: Float, R: Rng + ?Sized>(
        &mut self,
        store: &mut ParamStore<F>,
        z_e_batch: &Tensor<F>,
        threshold_steps: u64,
        noise: f64,
        rng: &mut R,
    ) -> Result<usize> {
        let rows = z_e_batch.numel() / self.n_z;
        if rows == 0 || z_e_batch.shape().last() != Some(&self.n_z) {
            return Err(Error::contract("revive_dead_codes needs a nonempty [.., n_z] batch"));
        }
        let dead: Vec<usize> = (0..self.k).filter(|&i| self.since_used[i] >= threshold_steps).collect();
        if dead.is_empty() {
            return Ok(0);
        }
        let normal = rand_distr::Normal::new(0.0, noise.max(0.0)).map_err(|e| Error::contract(e.to_string()))?;
        let mut table = self.entries(store)?.to_vec();
        let src = z_e_batch.data();
        for &d in &dead {
            let r = rng.random_range(0..rows);
            for c in 0..self.n_z {
                let jitter: f64 = rng.sample(normal);
                table[d * self.n_z + c] = F::of(src[r * self.n_z + c].f64() + jitter);
            }
            self.usage[d] = 0;
            self.since_used[d] = 0;
        }
        store.set_data(&self.name, table)?;
        Ok(dead.len())
    }
}

/// exp of the entropy of the empirical distribution given by `counts`.
pub fn perplexity_of_counts(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 1.0;
    }
    let t = total as f64;
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / t;
            -p * p.ln()
        })
        .sum();
    h.exp()
}

/// Perplexity of a batch of indices over a codebook of size `k`.
pub fn perplexity_of_indices(indices: &[usize], k: usize) -> f64 {
    let mut counts = vec![0u64; k];
    indices.iter().for_each(|&i| counts[i] += 1);
    perplexity_of_counts(&counts)
}

/// Index of the nearest row of `entries` (`[K, n_z]`) for every row of `z`.
///
/// Candidates are ranked with the `|e|² - 2 z·e` expansion (one GEMM), then
/// every candidate within rounding distance of the best is rescored with
/// the direct squared difference so the choice matches an exhaustive scan,
/// including the lowest-index tie rule.
pub fn nearest_codes<F: Float>(z: &[F], entries: &[F], n_z: usize) -> Result<Vec<usize>> {
    if entries.is_empty() || n_z == 0 {
        return Err(Error::contract("quantize against an empty codebook"));
    }
    let k = entries.len() / n_z;
    let n = z.len() / n_z;
    let e_norm: Vec<F> = entries.chunks(n_z).map(|e| e.iter().map(|&v| v * v).sum()).collect();
    let e_max = e_norm.iter().fold(0.0f64, |m, v| m.max(v.f64()));
    let dots = crate::tensor::matmul_raw_nt(z, entries, n, n_z, k);
    let eps = F::epsilon().f64();
    let mut out = Vec::with_capacity(n);
    let mut cands = Vec::new();
    for (row, zr) in z.chunks(n_z).enumerate() {
        let zn: f64 = zr.iter().map(|v| v.f64() * v.f64()).sum();
        let d = &dots[row * k..(row + 1) * k];
        let approx = |j: usize| e_norm[j].f64() - 2.0 * d[j].f64();
        let best = (0..k).map(approx).fold(f64::INFINITY, f64::min);
        let tol = 8.0 * (n_z as f64 + 4.0) * eps * (zn + e_max + 1e-30);
        cands.clear();
        cands.extend((0..k).filter(|&j| approx(j) <= best + tol));
        let mut pick = cands[0];
        let mut pick_d = direct_sq_dist(zr, &entries[pick * n_z..(pick + 1) * n_z]);
        for &j in &cands[1..] {
            let dj = direct_sq_dist(zr, &entries[j * n_z..(j + 1) * n_z]);
            if dj < pick_d {
                pick = j;
                pick_d = dj;
            }
        }
        out.push(pick);
    }
    Ok(out)
}

/// Sequential `sum (a - b)^2` in the working precision.
pub fn direct_sq_dist<F: Float>(a: &[F], b: &[F]) -> F {
    let mut s = F::zero();
    for (&x, &y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    s
}

/// The three VQ objective terms. Stop-gradients are realised by detaching:
/// the codebook term only reaches the entries, the commit term only reaches
/// the encoder output.
pub fn vq_losses<F: Float>(x: &Tensor<F>, x_hat: &Tensor<F>, result: &QuantizeResult<F>, beta: f64) -> Result<VqLossTerms<F>> {
    if x.shape() != x_hat.shape() {
        return Err(Error::Shape {
            op: "vq_losses",
            lhs: x.shape().to_vec(),
            rhs: x_hat.shape().to_vec(),
        });
    }
    let recon = x.sub(x_hat)?.square()?.mean()?;
    let codebook = result.z_e.detach().sub(&result.z_q)?.square()?.mean()?;
    let commit = result.z_q.detach().sub(&result.z_e)?.square()?.mean()?.scale(beta)?;
    Ok(VqLossTerms {
        recon,
        codebook,
        commit,
        beta,
    })
}

/// Decoder input: carries the value of `z_q` and hands its gradient to `z_e`.
pub fn straight_through<F: Float>(z_e: &Tensor<F>, z_q: &Tensor<F>) -> Result<Tensor<F>> {
    Tensor::straight_through(z_e, &z_q.detach())
}
