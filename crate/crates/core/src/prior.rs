//! Stage 2: conditional autoregressive transformer over raster-ordered
//! latent codes, trained with cross entropy plus perceptual and
//! reconstruction losses through a Gumbel-softmax straight-through decode.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{build_causal_mask, build_seq2seq_mask, AttentionMask, FeedForward, KvCache, SelfAttention};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{Embedding, LayerNorm, Linear, ParamStore};
use crate::optim::{cosine_lr, AdamW, AdamWConfig};
use crate::tensor::{Float, Tensor};
use crate::vqgan::{LatentGrid, PerceptualNet, VqGan, PERCEPTUAL_SEED};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    /// Condition block bidirectional, targets causal.
    Seq2seq,
    /// Causal over the whole sequence.
    Causal,
}

impl FromStr for MaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seq2seq" => Ok(Self::Seq2seq),
            "causal" => Ok(Self::Causal),
            _ => Err(Error::config("mask", format!("unknown mask '{s}' (causal|seq2seq)"))),
        }
    }
}

impl fmt::Display for MaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Seq2seq => "seq2seq",
            Self::Causal => "causal",
        })
    }
}

/// Which terms enter the stage-2 objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossSet {
    #[serde(rename = "ce")]
    Ce,
    #[serde(rename = "ce+lpips")]
    CeLpips,
    #[serde(rename = "ce+lpips+recon")]
    CeLpipsRecon,
}

impl LossSet {
    pub fn uses_perceptual(self) -> bool {
        !matches!(self, Self::Ce)
    }

    pub fn uses_recon(self) -> bool {
        matches!(self, Self::CeLpipsRecon)
    }
}

impl FromStr for LossSet {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(Self::Ce),
            "ce+lpips" => Ok(Self::CeLpips),
            "ce+lpips+recon" => Ok(Self::CeLpipsRecon),
            _ => Err(Error::config("losses", format!("unknown loss set '{s}' (ce|ce+lpips|ce+lpips+recon)"))),
        }
    }
}

impl fmt::Display for LossSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ce => "ce",
            Self::CeLpips => "ce+lpips",
            Self::CeLpipsRecon => "ce+lpips+recon",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    pub n_model: usize,
    pub depth: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub dropout: f64,
    pub n_classes: usize,
    pub mask: MaskKind,
    pub losses: LossSet,
    pub gumbel_tau: f64,
    /// Temperature reached by linear annealing at the last step; equal to
    /// `gumbel_tau` for a fixed temperature.
    pub gumbel_tau_final: f64,
    pub w_ce: f64,
    pub w_lpips: f64,
    pub w_recon: f64,
    /// Steps between evaluations of the decoded losses.
    pub decode_every: u64,
}

impl PriorConfig {
    pub fn desk(n_classes: usize) -> Self {
        Self {
            n_model: 64,
            depth: 2,
            heads: 4,
            ff_mult: 2,
            dropout: 0.0,
            n_classes,
            mask: MaskKind::Seq2seq,
            losses: LossSet::CeLpipsRecon,
            gumbel_tau: 1.0,
            gumbel_tau_final: 1.0,
            w_ce: 1.0,
            w_lpips: 1.0,
            w_recon: 1.0,
            decode_every: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.n_model.is_multiple_of(self.heads) {
            return Err(Error::config("prior.heads", format!("n_model {} not divisible by {}", self.n_model, self.heads)));
        }
        if self.gumbel_tau <= 0.0 || self.gumbel_tau_final <= 0.0 {
            return Err(Error::config("prior.gumbel_tau", "temperature must be positive"));
        }
        if self.w_ce < 0.0 || self.w_lpips < 0.0 || self.w_recon < 0.0 {
            return Err(Error::config("prior.w_ce", "loss weights must be nonnegative"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("prior.dropout", "dropout must lie in [0, 1)"));
        }
        if self.n_classes == 0 || self.decode_every == 0 {
            return Err(Error::config("prior.n_classes", "class count and decode_every must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleParams {
    pub temperature: f64,
    pub top_k: usize,
    pub seed: u64,
}

impl Default for SampleParams {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_k: 64,
            seed: 0,
        }
    }
}

/// t-major, then row, then column: `(τ, i, j) -> τ·h·w + i·w + j`.
pub fn raster_index(shape: [usize; 3], pos: [usize; 3]) -> usize {
    (pos[0] * shape[1] + pos[1]) * shape[2] + pos[2]
}

/// Raster sequence of one item of a latent grid.
pub fn flatten_raster(grid: &LatentGrid, item: usize) -> Vec<usize> {
    grid.item(item).to_vec()
}

/// Inverse of [`flatten_raster`] for a single item.
pub fn unflatten_raster(seq: &[usize], shape: [usize; 3], factor: [usize; 3]) -> Result<LatentGrid> {
    if seq.len() != shape.iter().product::<usize>() {
        return Err(Error::Dim {
            op: "unflatten_raster",
            axis: 0,
            expected: shape.iter().product(),
            got: seq.len(),
        });
    }
    Ok(LatentGrid {
        indices: seq.to_vec(),
        batch: 1,
        shape,
        factor,
    })
}

/// Tiles a single `[H, W, C]` frame along time, encodes it and keeps the
/// first temporal slice of the code grid (`h·w` tokens).
pub fn encode_condition_frame<F: Float>(frame: &[F], vqgan: &mut VqGan, store: &ParamStore<F>) -> Result<Vec<usize>> {
    encode_condition_frames(&[frame], vqgan, store).map(|mut v| v.remove(0))
}

pub fn encode_condition_frames<F: Float>(frames: &[&[F]], vqgan: &mut VqGan, store: &ParamStore<F>) -> Result<Vec<Vec<usize>>> {
    let [t, h, w] = vqgan.config.resolution;
    let c = vqgan.config.channels;
    let mut data = Vec::with_capacity(frames.len() * t * h * w * c);
    for f in frames {
        if f.len() != h * w * c {
            return Err(Error::Dim {
                op: "encode_condition_frame",
                axis: 0,
                expected: h * w * c,
                got: f.len(),
            });
        }
        for _ in 0..t {
            data.extend_from_slice(f);
        }
    }
    let video = Tensor::new(data, &[frames.len(), t, h, w, c])?;
    let tracking = vqgan.codebook.track_usage;
    vqgan.codebook.track_usage = false;
    let res = vqgan.encode(store, &video);
    vqgan.codebook.track_usage = tracking;
    let (_, grid) = res?;
    let [_, lh, lw] = grid.shape;
    Ok((0..frames.len()).map(|b| grid.item(b)[..lh * lw].to_vec()).collect())
}

/// One conditioning example: label, condition codes and target codes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub label: usize,
    pub condition: Vec<usize>,
    pub targets: Vec<usize>,
}

#[derive(Debug, Clone)]
struct PriorBlock {
    attn: SelfAttention,
    ff: FeedForward,
}

/// The prior transformer. Parameters live under `prior/`.
#[derive(Debug, Clone)]
pub struct Prior {
    pub config: PriorConfig,
    codebook_size: usize,
    cond_codes: usize,
    target_codes: usize,
    code_emb: Embedding,
    label_emb: Embedding,
    pos_emb: String,
    blocks: Vec<PriorBlock>,
    ln: LayerNorm,
    head: Linear,
    mask: AttentionMask,
}

pub const PRIOR_PREFIX: &str = "prior/";

impl Prior {
    /// `latent` is the stage-1 grid shape `[t, h, w]`.
    pub fn new<F: Float, R: Rng + ?Sized>(
        config: PriorConfig,
        codebook_size: usize,
        latent: [usize; 3],
        store: &mut ParamStore<F>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.n_model;
        let cond_codes = latent[1] * latent[2];
        let target_codes = latent.iter().product();
        let len = 1 + cond_codes + target_codes;
        let code_emb = Embedding::new(store, rng, "prior/code_emb", codebook_size, d, 0.02);
        let label_emb = Embedding::new(store, rng, "prior/label_emb", config.n_classes, d, 0.02);
        let pos_emb = "prior/pos_emb".to_string();
        store.insert(&pos_emb, &Tensor::randn(&[len, d], 0.02, rng));
        let blocks = (0..config.depth)
            .map(|i| {
                Ok(PriorBlock {
                    attn: SelfAttention::new(store, rng, &format!("prior/block{i}/attn"), d, config.heads)?,
                    ff: FeedForward::new(store, rng, &format!("prior/block{i}/ff"), d, config.ff_mult * d),
                })
            })
            .collect::<Result<_>>()?;
        let mask = match config.mask {
            MaskKind::Seq2seq => build_seq2seq_mask(1 + cond_codes, target_codes),
            MaskKind::Causal => build_causal_mask(len),
        };
        Ok(Self {
            ln: LayerNorm::new(store, "prior/ln", d),
            head: Linear::new(store, rng, "prior/head", d, codebook_size, true),
            config,
            codebook_size,
            cond_codes,
            target_codes,
            code_emb,
            label_emb,
            pos_emb,
            blocks,
            mask,
        })
    }

    pub fn condition_len(&self) -> usize {
        1 + self.cond_codes
    }

    pub fn target_len(&self) -> usize {
        self.target_codes
    }

    pub fn mask(&self) -> &AttentionMask {
        &self.mask
    }

    /// Replaces the attention mask (used to contrast mask variants on
    /// identical parameters).
    pub fn set_mask(&mut self, mask: AttentionMask) -> Result<()> {
        let len = self.condition_len() + self.target_codes;
        if mask.rows != len || mask.cols != len {
            return Err(Error::contract(format!("mask {}x{} for sequence length {len}", mask.rows, mask.cols)));
        }
        self.mask = mask;
        Ok(())
    }

    fn check(&self, seq: &TokenSequence) -> Result<()> {
        if seq.label >= self.config.n_classes {
            return Err(Error::Index {
                op: "prior label",
                index: seq.label,
                size: self.config.n_classes,
            });
        }
        if seq.condition.len() != self.cond_codes || seq.targets.len() != self.target_codes {
            return Err(Error::contract(format!(
                "token sequence {}+{} does not match {}+{}",
                seq.condition.len(),
                seq.targets.len(),
                self.cond_codes,
                self.target_codes
            )));
        }
        if let Some(&bad) = seq.condition.iter().chain(&seq.targets).find(|&&c| c >= self.codebook_size) {
            return Err(Error::Index {
                op: "prior code",
                index: bad,
                size: self.codebook_size,
            });
        }
        Ok(())
    }

    fn block_forward<F: Float>(&self, store: &ParamStore<F>, x: &Tensor<F>, block: &PriorBlock, dropout: Option<(f64, &mut ChaCha8Rng)>) -> Result<Tensor<F>> {
        let mut a = block.attn.forward(store, x, Some(&self.mask))?;
        if let Some((p, rng)) = dropout {
            a = a.dropout(p, rng)?;
        }
        let x = x.add(&a)?;
        x.add(&block.ff.forward(store, &x)?)
    }

    /// Teacher-forced logits `[B·t·h·w, K]`; row `i` of item `b` predicts
    /// target `i` from the label, the condition codes and targets `< i`.
    pub fn forward_logits<F: Float>(&self, store: &ParamStore<F>, batch: &[TokenSequence], mut rng: Option<&mut ChaCha8Rng>) -> Result<Tensor<F>> {
        let b = batch.len();
        let d = self.config.n_model;
        let cond = self.condition_len();
        let len = cond + self.target_codes;
        let mut codes = Vec::with_capacity(b * (len - 1));
        for seq in batch {
            self.check(seq)?;
            codes.extend_from_slice(&seq.condition);
            codes.extend_from_slice(&seq.targets);
        }
        let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
        let code_x = self.code_emb.forward(store, &codes)?.reshape(&[b, len - 1, d])?;
        let label_x = self.label_emb.forward(store, &labels)?.reshape(&[b, 1, d])?;
        let mut x = Tensor::concat(&[label_x, code_x], 1)?.add(&store.get(&self.pos_emb)?)?;
        let p = self.config.dropout;
        for block in &self.blocks {
            let drop = match (&mut rng, p > 0.0) {
                (Some(r), true) => Some((p, &mut **r)),
                _ => None,
            };
            x = self.block_forward(store, &x, block, drop)?;
        }
        let hidden = x.narrow(1, cond - 1, self.target_codes)?;
        let logits = self.head.forward(store, &self.ln.forward(store, &hidden)?)?;
        logits.reshape(&[b * self.target_codes, self.codebook_size])
    }

    /// Autoregressive sampling with a key/value cache. Top-k filtering and
    /// temperature apply to every step; `top_k = 1` is greedy decoding.
    pub fn sample_codes<F: Float>(&self, store: &ParamStore<F>, label: usize, condition: &[usize], params: &SampleParams) -> Result<Vec<usize>> {
        if params.temperature <= 0.0 || params.top_k == 0 || params.top_k > self.codebook_size {
            return Err(Error::contract(format!(
                "sampling needs temperature > 0 and 1 <= top_k <= {}",
                self.codebook_size
            )));
        }
        self.check(&TokenSequence {
            label,
            condition: condition.to_vec(),
            targets: vec![0; self.target_codes],
        })?;
        let mut frozen = store.clone();
        frozen.freeze();
        let store = &frozen;
        let d = self.config.n_model;
        let cond = self.condition_len();
        let pos = store.get(&self.pos_emb)?;
        let mut caches: Vec<KvCache<F>> = vec![KvCache::default(); self.blocks.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);

        let label_x = self.label_emb.forward(store, &[label])?;
        let cond_x = self.code_emb.forward(store, condition)?;
        let mut x = Tensor::concat(&[label_x, cond_x], 0)?
            .add(&pos.narrow(0, 0, cond)?)?
            .reshape(&[1, cond, d])?;
        let mut filled = 0;
        let mut out = Vec::with_capacity(self.target_codes);
        loop {
            let new = x.dim(1);
            let rows = self.mask.slice(filled, filled + new, filled + new);
            for (block, cache) in self.blocks.iter().zip(caches.iter_mut()) {
                x = x.add(&block.attn.forward_cached(store, &x, cache, &rows)?)?;
                x = x.add(&block.ff.forward(store, &x)?)?;
            }
            filled += new;
            let last = x.narrow(1, new - 1, 1)?;
            let logits = self.head.forward(store, &self.ln.forward(store, &last)?)?;
            let tok = sample_top_k(logits.data(), params.temperature, params.top_k, &mut rng);
            out.push(tok);
            if out.len() == self.target_codes {
                break;
            }
            x = self
                .code_emb
                .forward(store, &[tok])?
                .add(&pos.narrow(0, filled, 1)?)?
                .reshape(&[1, 1, d])?;
        }
        Ok(out)
    }
}

/// Draws from `softmax(logits / temperature)` restricted to the `top_k`
/// largest logits (ties broken by lower index).
pub fn sample_top_k<F: Float, R: Rng + ?Sized>(logits: &[F], temperature: f64, top_k: usize, rng: &mut R) -> usize {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    order.truncate(top_k.max(1));
    if order.len() == 1 {
        return order[0];
    }
    let max = logits[order[0]].f64();
    let weights: Vec<f64> = order.iter().map(|&i| ((logits[i].f64() - max) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (&i, w) in order.iter().zip(&weights) {
        if u < *w {
            return i;
        }
        u -= w;
    }
    *order.last().expect("nonempty")
}

/// Mean next-token cross entropy over all target positions.
pub fn stage2_ce<F: Float>(logits: &Tensor<F>, targets: &[usize]) -> Result<Tensor<F>> {
    logits.cross_entropy(targets)
}

/// Soft sample `softmax((logits + G)/τ)` with i.i.d. Gumbel noise and the
/// hard argmax indices.
pub fn gumbel_sample<F: Float, R: Rng + ?Sized>(logits: &Tensor<F>, tau: f64, rng: &mut R) -> Result<(Tensor<F>, Vec<usize>)> {
    if tau <= 0.0 {
        return Err(Error::contract("gumbel temperature must be positive"));
    }
    let noise: Vec<F> = (0..logits.numel())
        .map(|_| {
            let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            F::of(-(-u.ln()).ln())
        })
        .collect();
    let g = Tensor::new(noise, logits.shape())?;
    let soft = logits.add(&g)?.scale(1.0 / tau)?.softmax(logits.rank() - 1)?;
    let hard = soft.argmax_last();
    Ok((soft, hard))
}

/// Embedding whose forward value is the hard gather `entries[hard]` and whose
/// gradient is that of the soft mixture `soft · entries`.
pub fn straight_through_embed<F: Float>(soft: &Tensor<F>, hard: &[usize], entries: &Tensor<F>) -> Result<Tensor<F>> {
    let mixture = soft.matmul(entries)?;
    let gathered = entries.index_select(hard)?;
    Tensor::straight_through(&mixture, &gathered)
}

/// Teacher-forced next-token accuracy.
pub fn token_accuracy<F: Float>(logits: &Tensor<F>, targets: &[usize]) -> f64 {
    let pred = logits.argmax_last();
    let hits = pred.iter().zip(targets).filter(|(a, b)| a == b).count();
    hits as f64 / targets.len().max(1) as f64
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Stage2Metrics {
    pub step: u64,
    pub ce: f64,
    pub perceptual: f64,
    pub recon: f64,
    pub total: f64,
    pub accuracy: f64,
    pub tau: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage2TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    /// Sequences per step routed through the decoder for the decoded
    /// losses (0 means the whole batch).
    pub decode_batch: usize,
    pub optimizer: AdamWConfig,
    pub min_lr: f64,
    pub warmup: u64,
}

impl Default for Stage2TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 8,
            decode_batch: 0,
            optimizer: AdamWConfig {
                lr: 1e-3,
                ..AdamWConfig::default()
            },
            min_lr: 1e-5,
            warmup: 50,
        }
    }
}

/// Stage-2 state: the prior, the frozen stage-1 model and the token cache.
pub struct Stage2Trainer<F: Float> {
    pub prior: Prior,
    pub store: ParamStore<F>,
    pub vqgan: VqGan,
    pub vq_store: ParamStore<F>,
    pub perceptual: PerceptualNet<F>,
    pub train: Stage2TrainConfig,
    pub sequences: Vec<TokenSequence>,
    videos: Vec<Tensor<F>>,
    opt: AdamW,
    names: Vec<String>,
    pub step: u64,
    rng: ChaCha8Rng,
}

impl<F: Float> Stage2Trainer<F> {
    /// Encodes the training set once with the frozen stage-1 model.
    pub fn new(
        config: PriorConfig,
        train: Stage2TrainConfig,
        mut vqgan: VqGan,
        mut vq_store: ParamStore<F>,
        data: &Dataset,
        seed: u64,
    ) -> Result<Self> {
        vq_store.freeze();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let latent = vqgan.config.latent_shape();
        let prior = Prior::new(config, vqgan.config.codebook_size, latent, &mut store, &mut rng)?;
        let sequences = encode_dataset(&mut vqgan, &vq_store, data)?;
        let videos = (0..data.len()).map(|i| data.batch(&[i])).collect::<Result<_>>()?;
        let names = store.names().map(String::from).collect();
        Ok(Self {
            perceptual: PerceptualNet::new(vqgan.config.channels, PERCEPTUAL_SEED),
            opt: AdamW::new(train.optimizer),
            prior,
            store,
            vqgan,
            vq_store,
            train,
            sequences,
            videos,
            names,
            step: 0,
            rng,
        })
    }

    fn tau(&self) -> f64 {
        let c = &self.prior.config;
        let progress = self.step as f64 / self.train.steps.max(1) as f64;
        c.gumbel_tau + (c.gumbel_tau_final - c.gumbel_tau) * progress.min(1.0)
    }

    /// Loss record for a batch of training positions; the returned tensor
    /// is the weighted total on the tape.
    pub fn loss(&mut self, positions: &[usize]) -> Result<(Tensor<F>, Stage2Metrics)> {
        if !self.vq_store.is_frozen() {
            return Err(Error::contract("stage-1 parameters must be frozen during stage 2"));
        }
        let cfg = self.prior.config.clone();
        let batch: Vec<TokenSequence> = positions.iter().map(|&p| self.sequences[p].clone()).collect();
        let targets: Vec<usize> = batch.iter().flat_map(|s| s.targets.iter().copied()).collect();
        let logits = self.prior.forward_logits(&self.store, &batch, Some(&mut self.rng))?;
        let ce = stage2_ce(&logits, &targets)?;
        let accuracy = token_accuracy(&logits, &targets);
        let mut total = ce.scale(cfg.w_ce)?;
        let (mut perceptual_v, mut recon_v) = (0.0, 0.0);
        let tau = self.tau();
        let decode_now = cfg.losses.uses_perceptual() && self.step.is_multiple_of(cfg.decode_every);
        if decode_now {
            let nd = match self.train.decode_batch {
                0 => positions.len(),
                n => n.min(positions.len()),
            };
            let per = self.prior.target_len();
            let sub = logits.narrow(0, 0, nd * per)?;
            let (soft, hard) = gumbel_sample(&sub, tau, &mut self.rng)?;
            let entries = self.vqgan.codebook.entries(&self.vq_store)?;
            let [t, h, w] = self.vqgan.config.latent_shape();
            let z = straight_through_embed(&soft, &hard, &entries)?.reshape(&[nd, t, h, w, self.vqgan.config.n_z])?;
            let x_hat = self.vqgan.decode(&self.vq_store, &z)?;
            let real = Tensor::concat(&positions[..nd].iter().map(|&p| self.videos[p].clone()).collect::<Vec<_>>(), 0)?;
            let perceptual = self.perceptual.distance(&real, &x_hat)?;
            perceptual_v = perceptual.item().f64();
            total = total.add(&perceptual.scale(cfg.w_lpips)?)?;
            if cfg.losses.uses_recon() {
                let recon = real.sub(&x_hat)?.square()?.mean()?;
                recon_v = recon.item().f64();
                total = total.add(&recon.scale(cfg.w_recon)?)?;
            }
        }
        let metrics = Stage2Metrics {
            step: self.step,
            ce: ce.item().f64(),
            perceptual: perceptual_v,
            recon: recon_v,
            total: total.item().f64(),
            accuracy,
            tau,
            lr: 0.0,
        };
        Ok((total, metrics))
    }

    /// One optimisation step on the given training positions.
    pub fn train_step(&mut self, positions: &[usize]) -> Result<Stage2Metrics> {
        let lr = cosine_lr(self.step, self.train.steps, self.train.optimizer.lr, self.train.min_lr, self.train.warmup);
        self.store.zero_grad();
        let (total, mut m) = self.loss(positions).map_err(|e| match e {
            Error::NonFinite { op } => Error::NumericAbort {
                step: self.step,
                what: format!("stage-2 loss: non-finite value in {op}"),
            },
            other => other,
        })?;
        if !m.total.is_finite() {
            return Err(Error::NumericAbort {
                step: self.step,
                what: format!("stage-2 loss {}", m.total),
            });
        }
        total.backward()?;
        self.opt.step(&mut self.store, &self.names, lr)?;
        m.lr = lr;
        self.step += 1;
        Ok(m)
    }

    /// Teacher-forced `(ce, accuracy)` over every training sequence.
    pub fn evaluate(&self) -> Result<(f64, f64)> {
        let logits = self.prior.forward_logits(&self.store, &self.sequences, None)?;
        let targets: Vec<usize> = self.sequences.iter().flat_map(|s| s.targets.iter().copied()).collect();
        Ok((stage2_ce(&logits, &targets)?.item().f64(), token_accuracy(&logits, &targets)))
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Label, condition codes and target codes for every sample.
pub fn encode_dataset<F: Float>(vqgan: &mut VqGan, store: &ParamStore<F>, data: &Dataset) -> Result<Vec<TokenSequence>> {
    let tracking = vqgan.codebook.track_usage;
    vqgan.codebook.track_usage = false;
    let mut out = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        let video = data.batch::<F>(&[i])?;
        let (_, grid) = vqgan.encode(store, &video)?;
        let frame: Vec<F> = data.first_frame(i).iter().map(|&v| F::of(v as f64)).collect();
        let condition = encode_condition_frame(&frame, vqgan, store)?;
        out.push(TokenSequence {
            label: data.samples[i].label,
            condition,
            targets: flatten_raster(&grid, 0),
        });
    }
    vqgan.codebook.track_usage = tracking;
    Ok(out)
}

/// Sample codes and decode them to a `[1, T, H, W, C]` video.
#[allow(clippy::too_many_arguments)]
pub fn sample_video<F: Float>(
    prior: &Prior,
    prior_store: &ParamStore<F>,
    vqgan: &mut VqGan,
    vq_store: &ParamStore<F>,
    label: usize,
    condition_frame: &[F],
    params: &SampleParams,
) -> Result<Tensor<F>> {
    let condition = encode_condition_frame(condition_frame, vqgan, vq_store)?;
    let codes = prior.sample_codes(prior_store, label, &condition, params)?;
    let grid = unflatten_raster(&codes, vqgan.config.latent_shape(), vqgan.config.downsample)?;
    let mut frozen = vq_store.clone();
    frozen.freeze();
    vqgan.decode_grid(&frozen, &grid)
}
