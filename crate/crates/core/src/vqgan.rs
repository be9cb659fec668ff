//! Stage 1: 3D VQ-GAN with a motion transformer on both sides of the
//! codebook, a patch discriminator and a fixed perceptual feature network.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AxialBlock, TrajectoryBlock};
use crate::error::{Error, Result};
use crate::nn::{Conv3d, ConvTranspose3d, GroupNorm, LayerNorm, Linear, ParamStore};
use crate::optim::{cosine_lr, AdamW, AdamWConfig};
use crate::quantize::{perplexity_of_indices, straight_through, vq_losses, Codebook, QuantizeResult};
use crate::tensor::{Conv3dGeometry, Float, Tensor};

/// Which transformer sits between the conv stacks and the codebook.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    Trajectory,
    Axial,
    None,
}

impl FromStr for AttentionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trajectory" => Ok(Self::Trajectory),
            "axial" => Ok(Self::Axial),
            "none" => Ok(Self::None),
            _ => Err(Error::config("attention", format!("unknown attention '{s}' (trajectory|axial|none)"))),
        }
    }
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Trajectory => "trajectory",
            Self::Axial => "axial",
            Self::None => "none",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VqGanConfig {
    /// Input video extent `[T, H, W]`.
    pub resolution: [usize; 3],
    pub channels: usize,
    /// Per-axis downsample factor `[f_t, f_h, f_w]`, each a power of two.
    pub downsample: [usize; 3],
    pub n_z: usize,
    pub codebook_size: usize,
    pub base_channels: usize,
    /// Transformer width; also the channel count of the last conv level.
    pub model_width: usize,
    pub depth: usize,
    pub heads: usize,
    pub prototypes: usize,
    pub ff_mult: usize,
    pub groups: usize,
    pub attention: AttentionKind,
    pub disc_channels: usize,
    pub disc_layers: usize,
    pub beta: f64,
    pub delta: f64,
    pub lambda_max: f64,
    pub adversarial: bool,
    pub disc_start_step: u64,
    pub perceptual_weight: f64,
}

impl VqGanConfig {
    /// 16×32×32 RGB, factor 4 on every axis, K = 1024.
    pub fn desk() -> Self {
        Self {
            resolution: [16, 32, 32],
            channels: 3,
            downsample: [4, 4, 4],
            n_z: 64,
            codebook_size: 1024,
            base_channels: 8,
            model_width: 64,
            depth: 2,
            heads: 4,
            prototypes: 32,
            ff_mult: 2,
            groups: 8,
            attention: AttentionKind::Trajectory,
            disc_channels: 16,
            disc_layers: 3,
            beta: 0.25,
            delta: 1e-6,
            lambda_max: 1e4,
            adversarial: true,
            disc_start_step: 500,
            perceptual_weight: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, msg: String| Err(Error::config(path, msg));
        for (ax, (&n, &f)) in self.resolution.iter().zip(&self.downsample).enumerate() {
            if f == 0 || !f.is_power_of_two() {
                return bad("downsample", format!("factor {f} on axis {ax} is not a power of two"));
            }
            if n == 0 || n % f != 0 {
                return bad("resolution", format!("extent {n} on axis {ax} not divisible by factor {f}"));
            }
        }
        if self.codebook_size < 2 {
            return bad("codebook_size", "needs at least 2 entries".into());
        }
        if self.n_z == 0 || self.channels == 0 || self.base_channels == 0 {
            return bad("n_z", "latent, image and base channel counts must be positive".into());
        }
        if self.heads == 0 || !self.model_width.is_multiple_of(self.heads) {
            return bad("heads", format!("model_width {} not divisible by heads {}", self.model_width, self.heads));
        }
        if self.prototypes == 0 {
            return bad("prototypes", "must be at least 1".into());
        }
        if self.delta <= 0.0 || self.beta < 0.0 || self.lambda_max < 0.0 || self.perceptual_weight < 0.0 {
            return bad("beta", "loss constants must be nonnegative (delta positive)".into());
        }
        Ok(())
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.resolution[a] / self.downsample[a])
    }

    fn levels(&self) -> usize {
        self.downsample.iter().map(|f| f.trailing_zeros() as usize).max().unwrap_or(0)
    }

    /// Per level, the stride geometry and kernel extent.
    fn level_geometry(&self, level: usize) -> (Conv3dGeometry, [usize; 3]) {
        let strided = self.downsample.map(|f| level < f.trailing_zeros() as usize);
        let stride = strided.map(|s| if s { 2 } else { 1 });
        let kernel = strided.map(|s| if s { 4 } else { 3 });
        (Conv3dGeometry::new(stride, [1, 1, 1]), kernel)
    }

    fn level_channels(&self) -> Vec<usize> {
        let l = self.levels();
        if l == 0 {
            return vec![self.model_width];
        }
        (0..=l)
            .map(|j| if j == l { self.model_width } else { (self.base_channels << j).min(self.model_width) })
            .collect()
    }
}

/// Integer code grid produced by encoding a batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatentGrid {
    /// Row-major `[B, t, h, w]`.
    pub indices: Vec<usize>,
    pub batch: usize,
    pub shape: [usize; 3],
    pub factor: [usize; 3],
}

impl LatentGrid {
    pub fn per_item(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn item(&self, b: usize) -> &[usize] {
        let n = self.per_item();
        &self.indices[b * n..(b + 1) * n]
    }
}

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
enum Block {
    Trajectory(TrajectoryBlock),
    Axial(AxialBlock),
}

impl Block {
    fn new<F: Float, R: Rng + ?Sized>(cfg: &VqGanConfig, store: &mut ParamStore<F>, rng: &mut R, name: &str) -> Result<Option<Self>> {
        let d = cfg.model_width;
        Ok(match cfg.attention {
            AttentionKind::Trajectory => Some(Block::Trajectory(TrajectoryBlock::new(
                store,
                rng,
                name,
                d,
                cfg.heads,
                cfg.prototypes,
                cfg.ff_mult,
            )?)),
            AttentionKind::Axial => Some(Block::Axial(AxialBlock::new(store, rng, name, d, cfg.heads, cfg.ff_mult)?)),
            AttentionKind::None => None,
        })
    }

    /// `x [B, t, h, w, D]`.
    fn forward<F: Float>(&self, store: &ParamStore<F>, x: &Tensor<F>) -> Result<Tensor<F>> {
        match self {
            Block::Axial(b) => b.forward(store, x),
            Block::Trajectory(b) => {
                let s = x.shape().to_vec();
                b.forward(store, &x.reshape(&[s[0], s[1], s[2] * s[3], s[4]])?)?.reshape(&s)
            }
        }
    }
}

fn act<F: Float>(x: &Tensor<F>) -> Result<Tensor<F>> {
    x.leaky_relu(0.1)
}

/// `[B, T, H, W, C]` <-> `[B, C, T, H, W]`.
pub fn to_channels_first<F: Float>(x: &Tensor<F>) -> Result<Tensor<F>> {
    x.permute(&[0, 4, 1, 2, 3])
}

pub fn to_channels_last<F: Float>(x: &Tensor<F>) -> Result<Tensor<F>> {
    x.permute(&[0, 2, 3, 4, 1])
}

/// Encoder, codebook and decoder. Parameters live in a caller-owned store
/// under `vqgan/`.
#[derive(Debug, Clone)]
pub struct VqGan {
    pub config: VqGanConfig,
    enc_in: Conv3d,
    enc_down: Vec<(Conv3d, GroupNorm)>,
    enc_blocks: Vec<Block>,
    enc_ln: LayerNorm,
    enc_out: Linear,
    pub codebook: Codebook,
    dec_in: Linear,
    dec_blocks: Vec<Block>,
    dec_ln: LayerNorm,
    dec_up: Vec<(ConvTranspose3d, GroupNorm)>,
    dec_out: Conv3d,
}

pub const VQGAN_PREFIX: &str = "vqgan/";
const UNIT3: [usize; 3] = [3, 3, 3];

impl VqGan {
    pub fn new<F: Float, R: Rng + ?Sized>(config: VqGanConfig, store: &mut ParamStore<F>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let ch = config.level_channels();
        let pad1 = Conv3dGeometry::new([1, 1, 1], [1, 1, 1]);
        let gain = 2f64.sqrt();
        let enc_in = Conv3d::new(store, rng, "vqgan/enc/in", config.channels, ch[0], UNIT3, pad1, gain);
        let mut enc_down = Vec::new();
        for j in 0..ch.len() - 1 {
            let (geom, k) = config.level_geometry(j);
            let name = format!("vqgan/enc/down{j}");
            enc_down.push((
                Conv3d::new(store, rng, &name, ch[j], ch[j + 1], k, geom, gain),
                GroupNorm::new(store, &format!("{name}/gn"), ch[j + 1], config.groups),
            ));
        }
        let d = config.model_width;
        let mut enc_blocks = Vec::new();
        let mut dec_blocks = Vec::new();
        for i in 0..config.depth {
            enc_blocks.extend(Block::new(&config, store, rng, &format!("vqgan/enc/block{i}"))?);
        }
        let enc_ln = LayerNorm::new(store, "vqgan/enc/ln", d);
        let enc_out = Linear::new(store, rng, "vqgan/enc/out", d, config.n_z, true);
        let codebook = Codebook::new(store, rng, "vqgan/codebook", config.codebook_size, config.n_z)?;
        let dec_in = Linear::new(store, rng, "vqgan/dec/in", config.n_z, d, true);
        for i in 0..config.depth {
            dec_blocks.extend(Block::new(&config, store, rng, &format!("vqgan/dec/block{i}"))?);
        }
        let dec_ln = LayerNorm::new(store, "vqgan/dec/ln", d);
        let mut dec_up = Vec::new();
        for j in (0..ch.len() - 1).rev() {
            let (geom, k) = config.level_geometry(j);
            let name = format!("vqgan/dec/up{j}");
            dec_up.push((
                ConvTranspose3d::new(store, rng, &name, ch[j + 1], ch[j], k, geom, gain),
                GroupNorm::new(store, &format!("{name}/gn"), ch[j], config.groups),
            ));
        }
        let dec_out = Conv3d::new(store, rng, "vqgan/dec/out", ch[0], config.channels, UNIT3, pad1, 1.0);
        Ok(Self {
            config,
            enc_in,
            enc_down,
            enc_blocks,
            enc_ln,
            enc_out,
            codebook,
            dec_in,
            dec_blocks,
            dec_ln,
            dec_up,
            dec_out,
        })
    }

    fn check_video<F: Float>(&self, video: &Tensor<F>) -> Result<()> {
        let [t, h, w] = self.config.resolution;
        let expected = [t, h, w, self.config.channels];
        if video.rank() != 5 || video.shape()[1..] != expected {
            return Err(Error::Shape {
                op: "vqgan input",
                lhs: video.shape().to_vec(),
                rhs: expected.to_vec(),
            });
        }
        Ok(())
    }

    /// Continuous encoder output `z_e [B, t, h, w, n_z]`.
    pub fn encode_continuous<F: Float>(&self, store: &ParamStore<F>, video: &Tensor<F>) -> Result<Tensor<F>> {
        self.check_video(video)?;
        let mut x = act(&self.enc_in.forward(store, &to_channels_first(video)?)?)?;
        for (conv, gn) in &self.enc_down {
            x = act(&gn.forward(store, &conv.forward(store, &x)?)?)?;
        }
        let mut x = to_channels_last(&x)?;
        for b in &self.enc_blocks {
            x = b.forward(store, &x)?;
        }
        self.enc_out.forward(store, &self.enc_ln.forward(store, &x)?)
    }

    /// Encode and quantize.
    pub fn encode<F: Float>(&mut self, store: &ParamStore<F>, video: &Tensor<F>) -> Result<(QuantizeResult<F>, LatentGrid)> {
        let z_e = self.encode_continuous(store, video)?;
        let q = self.codebook.quantize(store, &z_e)?;
        let grid = LatentGrid {
            indices: q.indices.clone(),
            batch: video.dim(0),
            shape: self.config.latent_shape(),
            factor: self.config.downsample,
        };
        Ok((q, grid))
    }

    /// Decoder from continuous latents `[B, t, h, w, n_z]` to `[B, T, H, W, C]`
    /// in `[-0.5, 0.5]`.
    pub fn decode<F: Float>(&self, store: &ParamStore<F>, z: &Tensor<F>) -> Result<Tensor<F>> {
        let lat = self.config.latent_shape();
        if z.rank() != 5 || z.shape()[1..4] != lat || z.dim(4) != self.config.n_z {
            return Err(Error::Shape {
                op: "vqgan decode",
                lhs: z.shape().to_vec(),
                rhs: vec![lat[0], lat[1], lat[2], self.config.n_z],
            });
        }
        let mut x = self.dec_in.forward(store, z)?;
        for b in &self.dec_blocks {
            x = b.forward(store, &x)?;
        }
        let mut x = to_channels_first(&self.dec_ln.forward(store, &x)?)?;
        for (conv, gn) in &self.dec_up {
            x = act(&gn.forward(store, &conv.forward(store, &x)?)?)?;
        }
        to_channels_last(&self.dec_out.forward(store, &x)?.tanh()?.scale(0.5)?)
    }

    pub fn decode_grid<F: Float>(&self, store: &ParamStore<F>, grid: &LatentGrid) -> Result<Tensor<F>> {
        let [t, h, w] = grid.shape;
        let z = self.codebook.lookup(store, &grid.indices, &[grid.batch, t, h, w])?;
        self.decode(store, &z)
    }

    /// Encode, quantize, decode through the straight-through path.
    pub fn reconstruct<F: Float>(&mut self, store: &ParamStore<F>, video: &Tensor<F>) -> Result<(Tensor<F>, QuantizeResult<F>)> {
        let (q, _) = self.encode(store, video)?;
        let x_hat = self.decode(store, &straight_through(&q.z_e, &q.z_q)?)?;
        Ok((x_hat, q))
    }

    /// Parameter names of the final decoder layer (used for the adaptive
    /// adversarial weight).
    pub fn last_layer_names(&self) -> Vec<String> {
        self.dec_out.param_names().iter().map(|s| s.to_string()).collect()
    }
}

/// Strided 3D conv stack producing a grid of patch logits `[B, t', h', w']`.
#[derive(Debug, Clone)]
pub struct PatchDiscriminator {
    layers: Vec<(Conv3d, Option<GroupNorm>)>,
    head: Conv3d,
}

impl PatchDiscriminator {
    pub fn new<F: Float, R: Rng + ?Sized>(cfg: &VqGanConfig, store: &mut ParamStore<F>, rng: &mut R) -> Self {
        let strided = Conv3dGeometry::new([2, 2, 2], [1, 1, 1]);
        let mut layers = Vec::new();
        let mut c = cfg.channels;
        for i in 0..cfg.disc_layers {
            let out = cfg.disc_channels << i;
            let name = format!("vqgan/disc/conv{i}");
            let conv = Conv3d::new(store, rng, &name, c, out, [4, 4, 4], strided, 2f64.sqrt());
            let gn = (i > 0).then(|| GroupNorm::new(store, &format!("{name}/gn"), out, cfg.groups));
            layers.push((conv, gn));
            c = out;
        }
        let head = Conv3d::new(store, rng, "vqgan/disc/head", c, 1, UNIT3, Conv3dGeometry::new([1, 1, 1], [1, 1, 1]), 1.0);
        Self { layers, head }
    }

    pub fn forward<F: Float>(&self, store: &ParamStore<F>, video: &Tensor<F>) -> Result<Tensor<F>> {
        let mut x = to_channels_first(video)?;
        for (conv, gn) in &self.layers {
            x = conv.forward(store, &x)?;
            if let Some(gn) = gn {
                x = gn.forward(store, &x)?;
            }
            x = x.leaky_relu(0.2)?;
        }
        let y = self.head.forward(store, &x)?;
        let s = y.shape().to_vec();
        y.reshape(&[s[0], s[2], s[3], s[4]])
    }
}

/// Fixed random per-frame feature extractor for the perceptual distance:
/// three stride-2 conv stages with 16, 32 and 64 channels.
pub struct PerceptualNet<F: Float> {
    convs: Vec<Conv3d>,
    store: ParamStore<F>,
}

impl<F: Float> PerceptualNet<F> {
    pub fn new(channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let geom = Conv3dGeometry::new([1, 2, 2], [0, 1, 1]);
        let mut c = channels;
        let convs = [16, 32, 64]
            .iter()
            .enumerate()
            .map(|(i, &out)| {
                let conv = Conv3d::new(&mut store, &mut rng, &format!("lpips/conv{i}"), c, out, [1, 3, 3], geom, 2f64.sqrt());
                c = out;
                conv
            })
            .collect();
        store.freeze();
        Self { convs, store }
    }

    /// Channel-normalised activations per stage, `[B, C_s, T, h_s, w_s]`.
    pub fn features(&self, video: &Tensor<F>) -> Result<Vec<Tensor<F>>> {
        let mut x = to_channels_first(video)?;
        let mut out = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            x = conv.forward(&self.store, &x)?.relu()?;
            let norm = x.square()?.sum_axis(1, true)?.add_scalar(1e-8)?.sqrt()?;
            out.push(x.div(&norm)?);
        }
        Ok(out)
    }

    /// Sum over stages of the per-position squared feature difference
    /// (summed over channels, averaged over positions, frames and batch).
    pub fn distance(&self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        if a.shape() != b.shape() {
            return Err(Error::Shape {
                op: "perceptual_distance",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let fa = self.features(a)?;
        let fb = self.features(b)?;
        let mut total: Option<Tensor<F>> = None;
        for (x, y) in fa.iter().zip(&fb) {
            let d = x.sub(y)?.square()?.sum_axis(1, false)?.mean()?;
            total = Some(match total {
                Some(t) => t.add(&d)?,
                None => d,
            });
        }
        total.ok_or_else(|| Error::contract("perceptual net without stages"))
    }
}

pub struct GanLosses<F: Float> {
    pub d_loss: Tensor<F>,
    pub g_adv: Tensor<F>,
}

/// Logit-form discriminator loss and non-saturating generator loss.
pub fn gan_losses<F: Float>(real: &Tensor<F>, fake_for_d: &Tensor<F>, fake_for_g: &Tensor<F>) -> Result<GanLosses<F>> {
    Ok(GanLosses {
        d_loss: discriminator_loss(real, fake_for_d)?,
        g_adv: generator_adv_loss(fake_for_g)?,
    })
}

/// `-mean log σ(real) - mean log(1 - σ(fake))`.
pub fn discriminator_loss<F: Float>(real: &Tensor<F>, fake: &Tensor<F>) -> Result<Tensor<F>> {
    real.neg()?.softplus()?.mean()?.add(&fake.softplus()?.mean()?)
}

/// `-mean log σ(fake)`.
pub fn generator_adv_loss<F: Float>(fake: &Tensor<F>) -> Result<Tensor<F>> {
    fake.neg()?.softplus()?.mean()
}

/// `‖∇ recon_like‖ / (‖∇ g_adv‖ + δ)` over `last_layer`, clamped to
/// `[0, max]`. The result is a plain number, so no gradient flows through it.
pub fn adaptive_weight<F: Float>(
    recon_like: &Tensor<F>,
    g_adv: &Tensor<F>,
    last_layer: &[&Tensor<F>],
    delta: f64,
    max: f64,
) -> Result<f64> {
    let norm = |grads: Vec<Vec<F>>| grads.iter().flatten().map(|g| g.f64() * g.f64()).sum::<f64>().sqrt();
    let n_rec = norm(recon_like.grad_wrt(last_layer)?);
    let n_gan = norm(g_adv.grad_wrt(last_layer)?);
    let lambda = n_rec / (n_gan + delta);
    Ok(if lambda.is_finite() { lambda.clamp(0.0, max) } else { max })
}

/// One line of the stage-1 training log.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Stage1Metrics {
    pub step: u64,
    pub recon: f64,
    pub codebook: f64,
    pub commit: f64,
    pub perceptual: f64,
    pub g_adv: f64,
    pub d_loss: f64,
    pub lambda: f64,
    pub perplexity: f64,
    pub total: f64,
    pub revived: usize,
}

/// Optimisation settings for stage 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage1TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// Floor of the cosine schedule.
    pub min_lr: f64,
    pub warmup: u64,
    /// Steps between checkpoints written by the command-line driver.
    pub checkpoint_every: u64,
    /// Revive codes unused for this many steps; 0 disables revival.
    pub revive_after: u64,
    pub revive_noise: f64,
    /// Initialise the codebook from encoder outputs of the first batch.
    pub data_init_codebook: bool,
}

impl Default for Stage1TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 4,
            optimizer: AdamWConfig {
                lr: 2e-3,
                ..AdamWConfig::default()
            },
            min_lr: 1e-4,
            warmup: 50,
            checkpoint_every: 500,
            revive_after: 50,
            revive_noise: 0.01,
            data_init_codebook: true,
        }
    }
}

/// Generator, discriminator and their optimisers.
pub struct Stage1Trainer<F: Float> {
    pub model: VqGan,
    pub gen: ParamStore<F>,
    pub disc_model: PatchDiscriminator,
    pub disc: ParamStore<F>,
    pub perceptual: PerceptualNet<F>,
    pub train: Stage1TrainConfig,
    opt_g: AdamW,
    opt_d: AdamW,
    gen_names: Vec<String>,
    disc_names: Vec<String>,
    pub step: u64,
    rng: ChaCha8Rng,
    initialised: bool,
}

/// Seed offset for the perceptual network, shared by every consumer so all
/// perceptual numbers are on one scale.
pub const PERCEPTUAL_SEED: u64 = 0x1f5e_ed01;

impl<F: Float> Stage1Trainer<F> {
    pub fn new(config: VqGanConfig, train: Stage1TrainConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gen = ParamStore::new();
        let model = VqGan::new(config.clone(), &mut gen, &mut rng)?;
        let mut disc = ParamStore::new();
        let disc_model = PatchDiscriminator::new(&config, &mut disc, &mut rng);
        let gen_names = gen.names().map(String::from).collect();
        let disc_names = disc.names().map(String::from).collect();
        Ok(Self {
            perceptual: PerceptualNet::new(config.channels, PERCEPTUAL_SEED),
            model,
            gen,
            disc_model,
            disc,
            opt_g: AdamW::new(train.optimizer),
            opt_d: AdamW::new(train.optimizer),
            train,
            gen_names,
            disc_names,
            step: 0,
            rng,
            initialised: false,
        })
    }

    fn discriminator_active(&self) -> bool {
        self.model.config.adversarial && self.step >= self.model.config.disc_start_step
    }

    fn abort(&self, what: &str, err: Error) -> Error {
        match err {
            Error::NonFinite { op } => Error::NumericAbort {
                step: self.step,
                what: format!("{what}: non-finite value in {op}"),
            },
            other => other,
        }
    }

    fn init_codebook_from(&mut self, z_e: &Tensor<F>) -> Result<()> {
        let k = self.model.codebook.size();
        let n_z = self.model.codebook.dim();
        let rows = z_e.numel() / n_z;
        let src = z_e.data();
        let normal = rand_distr::Normal::new(0.0, 0.01).map_err(|e| Error::contract(e.to_string()))?;
        let mut table = Vec::with_capacity(k * n_z);
        for _ in 0..k {
            let r = self.rng.random_range(0..rows);
            for c in 0..n_z {
                let jitter: f64 = self.rng.sample(normal);
                table.push(F::of(src[r * n_z + c].f64() + jitter));
            }
        }
        let name = self.model.codebook.name().to_string();
        self.gen.set_data(&name, table)
    }

    /// Generator and codebook update. Returns the metrics (without the
    /// discriminator loss) and the detached reconstruction.
    pub fn generator_step(&mut self, batch: &Tensor<F>, lr: f64) -> Result<(Stage1Metrics, Tensor<F>)> {
        if self.train.data_init_codebook && !self.initialised {
            let z_e = self.model.encode_continuous(&self.gen, batch)?;
            self.init_codebook_from(&z_e)?;
        }
        self.initialised = true;
        let cfg = self.model.config.clone();
        self.gen.unfreeze();
        self.disc.freeze();
        self.gen.zero_grad();
        let (x_hat, q) = self.model.reconstruct(&self.gen, batch).map_err(|e| self.abort("reconstruction", e))?;
        let terms = vq_losses(batch, &x_hat, &q, cfg.beta)?;
        let perceptual = self.perceptual.distance(batch, &x_hat)?.scale(cfg.perceptual_weight)?;
        let recon_like = terms.recon.add(&perceptual)?;
        let mut total = recon_like.add(&terms.codebook)?.add(&terms.commit)?;
        let (mut g_adv_v, mut lambda) = (0.0, 0.0);
        if self.discriminator_active() {
            let fake = self.disc_model.forward(&self.disc, &x_hat)?;
            let g_adv = generator_adv_loss(&fake)?;
            let last: Vec<Tensor<F>> = self
                .model
                .last_layer_names()
                .iter()
                .map(|n| self.gen.get(n))
                .collect::<Result<_>>()?;
            let last_refs: Vec<&Tensor<F>> = last.iter().collect();
            lambda = adaptive_weight(&recon_like, &g_adv, &last_refs, cfg.delta, cfg.lambda_max)?;
            g_adv_v = g_adv.item().f64();
            total = total.add(&g_adv.scale(lambda)?)?;
        }
        let total_v = total.item().f64();
        if !total_v.is_finite() {
            return Err(Error::NumericAbort {
                step: self.step,
                what: format!("generator loss {total_v}"),
            });
        }
        total.backward()?;
        self.opt_g.step(&mut self.gen, &self.gen_names, lr).map_err(|e| self.abort("generator update", e))?;

        let mut revived = 0;
        if self.train.revive_after > 0 {
            revived = self.model.codebook.revive_dead_codes(
                &mut self.gen,
                &q.z_e.detach(),
                self.train.revive_after,
                self.train.revive_noise,
                &mut self.rng,
            )?;
        }
        let metrics = Stage1Metrics {
            step: self.step,
            recon: terms.recon.item().f64(),
            codebook: terms.codebook.item().f64(),
            commit: terms.commit.item().f64(),
            perceptual: perceptual.item().f64(),
            g_adv: g_adv_v,
            d_loss: 0.0,
            lambda,
            perplexity: perplexity_of_indices(&q.indices, cfg.codebook_size),
            total: total_v,
            revived,
        };
        Ok((metrics, x_hat.detach()))
    }

    /// Discriminator update on real versus (detached) reconstructed videos.
    pub fn discriminator_step(&mut self, real: &Tensor<F>, fake: &Tensor<F>, lr: f64) -> Result<f64> {
        self.gen.freeze();
        self.disc.unfreeze();
        self.disc.zero_grad();
        let real_logits = self.disc_model.forward(&self.disc, real)?;
        let fake_logits = self.disc_model.forward(&self.disc, &fake.detach())?;
        let d_loss = discriminator_loss(&real_logits, &fake_logits).map_err(|e| self.abort("discriminator", e))?;
        d_loss.backward()?;
        self.opt_d.step(&mut self.disc, &self.disc_names, lr).map_err(|e| self.abort("discriminator update", e))?;
        self.gen.unfreeze();
        Ok(d_loss.item().f64())
    }

    /// Cosine-annealed learning rate for the current step.
    pub fn scheduled_lr(&self) -> f64 {
        let t = &self.train;
        cosine_lr(self.step, t.steps, t.optimizer.lr, t.min_lr, t.warmup)
    }

    /// One alternating step.
    pub fn train_step(&mut self, batch: &Tensor<F>, lr: f64) -> Result<Stage1Metrics> {
        let (mut m, x_hat) = self.generator_step(batch, lr)?;
        if self.discriminator_active() {
            m.d_loss = self.discriminator_step(batch, &x_hat, lr)?;
        }
        self.step += 1;
        Ok(m)
    }

    /// All stage-1 parameters (generator and discriminator) in one store.
    pub fn merged_params(&self) -> ParamStore<F> {
        let mut all = self.gen.clone();
        for (name, t) in self.disc.iter() {
            all.insert(name, t);
        }
        all
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}
