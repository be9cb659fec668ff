//! End-to-end commands shared by the `lmt` binary and the acceptance suite:
//! stage-1 and stage-2 training, sampling, evaluation, codebook inspection
//! and the ablation sweeps.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, restore_into, save_checkpoint, store_entries, Entry};
use crate::config::Config;
use crate::data::{generate_dataset, split, Dataset};
use crate::error::{Error, Result};
use crate::frames::{decode_ppm, write_dump, FrameDump};
use crate::metrics::{feature_stats, frechet_distance, recon_mse, FeatureNet, SlrClassifier};
use crate::nn::ParamStore;
use crate::prior::{sample_video, Prior, Stage2Metrics, Stage2Trainer, PRIOR_PREFIX};
use crate::quantize::perplexity_of_counts;
use crate::tensor::Tensor;
use crate::vqgan::{PerceptualNet, Stage1Metrics, Stage1Trainer, VqGan, PERCEPTUAL_SEED};

pub const VQGAN_PREFIX: &str = "vqgan/";
pub const VQGAN_CHECKPOINT: &str = "vqgan.lmtc";
pub const PRIOR_CHECKPOINT: &str = "prior.lmtc";

/// Codebook sizes of the codebook-size ablation.
pub const CODEBOOK_SWEEP: [usize; 3] = [512, 1024, 2048];

/// `(f_t, f_h, f_w)` downsampling factors of the factor ablation.
pub const FACTOR_SWEEP: [[usize; 3]; 8] = [
    [4, 2, 2],
    [8, 4, 4],
    [4, 4, 4],
    [2, 4, 4],
    [8, 8, 8],
    [4, 8, 8],
    [2, 8, 8],
    [4, 16, 16],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sweep {
    CodebookSize,
    DownsampleFactor,
}

impl FromStr for Sweep {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "codebook_size" => Ok(Self::CodebookSize),
            "downsample_factor" => Ok(Self::DownsampleFactor),
            _ => Err(Error::config("sweep", format!("unknown sweep '{s}' (codebook_size|downsample_factor)"))),
        }
    }
}

impl fmt::Display for Sweep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::CodebookSize => "codebook_size",
            Self::DownsampleFactor => "downsample_factor",
        })
    }
}

impl Sweep {
    /// `(label, override)` per sweep point.
    pub fn points(self) -> Vec<(String, String)> {
        match self {
            Self::CodebookSize => CODEBOOK_SWEEP
                .iter()
                .map(|k| (k.to_string(), format!("vqgan.codebook_size={k}")))
                .collect(),
            Self::DownsampleFactor => FACTOR_SWEEP
                .iter()
                .map(|[t, h, w]| (format!("{t}x{h}x{w}"), format!("vqgan.downsample=[{t}, {h}, {w}]")))
                .collect(),
        }
    }
}

/// One structured evaluation record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub metric: String,
    pub value: Option<f64>,
    pub status: String,
    pub config_hash: String,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl ReportEntry {
    fn ok(cfg: &Config, metric: &str, value: f64) -> Self {
        Self {
            metric: metric.to_string(),
            value: Some(value),
            status: "ok".into(),
            config_hash: format!("{:08x}", cfg.hash()),
            seed: cfg.seed,
            sweep: None,
            detail: None,
        }
    }

    fn unavailable(cfg: &Config, metric: &str, why: String) -> Self {
        Self {
            value: None,
            status: "unavailable".into(),
            detail: Some(why),
            ..Self::ok(cfg, metric, 0.0)
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

/// Training and held-out splits of the configured dataset.
pub fn datasets(cfg: &Config) -> Result<(Dataset, Dataset)> {
    let all = generate_dataset(&cfg.data)?;
    if cfg.train_fraction >= 1.0 {
        return Ok((all.clone(), all));
    }
    split(&all, cfg.train_fraction, cfg.data.seed)
}

/// Endless reshuffled pass over `n` positions, `batch` at a time.
pub struct BatchOrder {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl BatchOrder {
    pub fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self { order, cursor: 0, rng }
    }

    pub fn next_batch(&mut self, batch: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(batch);
        while out.len() < batch.min(self.order.len()) {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

struct JsonLines(Option<BufWriter<File>>);

impl JsonLines {
    fn create(path: Option<PathBuf>) -> Result<Self> {
        match path {
            Some(p) => {
                let f = File::create(&p).map_err(|e| Error::io(&p, e))?;
                Ok(Self(Some(BufWriter::new(f))))
            }
            None => Ok(Self(None)),
        }
    }

    fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        if let Some(w) = &mut self.0 {
            let line = serde_json::to_string(record).map_err(|e| Error::contract(e.to_string()))?;
            writeln!(w, "{line}").map_err(|e| Error::io("metrics log", e))?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        if let Some(w) = &mut self.0 {
            w.flush().map_err(|e| Error::io("metrics log", e))?;
        }
        Ok(())
    }
}

fn prepare_out(cfg: &Config, out: Option<&Path>) -> Result<()> {
    if let Some(dir) = out {
        cfg.echo(dir)?;
    }
    Ok(())
}

fn stage1_entries(trainer: &Stage1Trainer<f32>) -> Vec<Entry> {
    let mut entries = store_entries(&trainer.merged_params());
    entries.push(Entry::int("meta/stage1_step", vec![trainer.step as i64]));
    entries
}

/// Stage-1 training. `observe` sees every step's metrics and may stop
/// training early by returning `false`. Writes the echoed config, a JSON
/// lines metric log and periodic checkpoints when `out` is given.
pub fn train_vqgan(
    cfg: &Config,
    train: &Dataset,
    out: Option<&Path>,
    mut observe: impl FnMut(&mut Stage1Trainer<f32>, &Stage1Metrics) -> Result<bool>,
) -> Result<Stage1Trainer<f32>> {
    prepare_out(cfg, out)?;
    let mut trainer = Stage1Trainer::<f32>::new(cfg.vqgan.clone(), cfg.stage1.clone(), cfg.seed)?;
    let mut order = BatchOrder::new(train.len(), cfg.seed ^ 0x5157_a6e1);
    let mut log = JsonLines::create(out.map(|d| d.join("stage1_metrics.jsonl")))?;
    let every = cfg.stage1.checkpoint_every;
    while trainer.step < cfg.stage1.steps {
        let batch = train.batch::<f32>(&order.next_batch(cfg.stage1.batch_size))?;
        let lr = trainer.scheduled_lr();
        let m = trainer.train_step(&batch, lr)?;
        log.write(&m)?;
        if let (Some(dir), true) = (out, every > 0 && trainer.step % every == 0) {
            save_checkpoint(&dir.join(VQGAN_CHECKPOINT), &stage1_entries(&trainer))?;
        }
        if !observe(&mut trainer, &m)? {
            break;
        }
    }
    log.flush()?;
    if let Some(dir) = out {
        save_checkpoint(&dir.join(VQGAN_CHECKPOINT), &stage1_entries(&trainer))?;
    }
    Ok(trainer)
}

/// Stage-1 model and parameters from a checkpoint.
pub fn load_vqgan(cfg: &Config, path: &Path) -> Result<(VqGan, ParamStore<f32>)> {
    let entries = load_checkpoint(path, Some(VQGAN_PREFIX))?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let model = VqGan::new(cfg.vqgan.clone(), &mut store, &mut rng)?;
    restore_into(&mut store, &entries)?;
    store.freeze();
    Ok((model, store))
}

fn prior_entries(trainer: &Stage2Trainer<f32>) -> Vec<Entry> {
    let mut entries = store_entries(&trainer.store);
    entries.push(Entry::int("meta/stage2_step", vec![trainer.step as i64]));
    entries
}

/// Stage-2 training on top of a frozen stage-1 model.
pub fn train_prior(
    cfg: &Config,
    vqgan: VqGan,
    vq_store: ParamStore<f32>,
    train: &Dataset,
    out: Option<&Path>,
    mut observe: impl FnMut(&mut Stage2Trainer<f32>, &Stage2Metrics) -> Result<bool>,
) -> Result<Stage2Trainer<f32>> {
    prepare_out(cfg, out)?;
    let mut trainer = Stage2Trainer::new(cfg.prior.clone(), cfg.stage2.clone(), vqgan, vq_store, train, cfg.seed)?;
    let mut order = BatchOrder::new(train.len(), cfg.seed ^ 0x0a11_0c47);
    let mut log = JsonLines::create(out.map(|d| d.join("stage2_metrics.jsonl")))?;
    while trainer.step < cfg.stage2.steps {
        let m = trainer.train_step(&order.next_batch(cfg.stage2.batch_size))?;
        log.write(&m)?;
        if !observe(&mut trainer, &m)? {
            break;
        }
    }
    log.flush()?;
    if let Some(dir) = out {
        save_checkpoint(&dir.join(PRIOR_CHECKPOINT), &prior_entries(&trainer))?;
    }
    Ok(trainer)
}

/// Prior model and parameters from a checkpoint.
pub fn load_prior(cfg: &Config, path: &Path) -> Result<(Prior, ParamStore<f32>)> {
    let entries = load_checkpoint(path, Some(PRIOR_PREFIX))?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let prior = Prior::new(cfg.prior.clone(), cfg.vqgan.codebook_size, cfg.vqgan.latent_shape(), &mut store, &mut rng)?;
    restore_into(&mut store, &entries)?;
    store.freeze();
    Ok((prior, store))
}

/// First frame of the first sample of class `label`.
pub fn default_condition_frame(data: &Dataset, label: usize) -> Result<Vec<f32>> {
    let pos = data
        .samples
        .iter()
        .position(|s| s.label == label)
        .ok_or_else(|| Error::config("label", format!("no sample of class {label}")))?;
    Ok(data.first_frame(pos).to_vec())
}

/// Reads a condition frame from a PPM/PGM file.
pub fn read_condition_frame(path: &Path, cfg: &Config) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (values, h, w, c) = decode_ppm(&bytes)?;
    let [_, eh, ew] = cfg.vqgan.resolution;
    if (h, w, c) != (eh, ew, cfg.vqgan.channels) {
        return Err(Error::config("condition_frame", format!("frame is {h}x{w}x{c}, model expects {eh}x{ew}x{}", cfg.vqgan.channels)));
    }
    Ok(values.into_iter().map(|v| v as f32).collect())
}

/// Samples one clip and, when `out` is given, dumps it with the condition
/// frame at index −1.
#[allow(clippy::too_many_arguments)]
pub fn sample_clip(
    cfg: &Config,
    prior: &Prior,
    prior_store: &ParamStore<f32>,
    vqgan: &mut VqGan,
    vq_store: &ParamStore<f32>,
    label: usize,
    condition: &[f32],
    out: Option<&Path>,
) -> Result<Tensor<f32>> {
    if label >= cfg.prior.n_classes {
        return Err(Error::config("label", format!("label {label} outside 0..{}", cfg.prior.n_classes)));
    }
    let video = sample_video(prior, prior_store, vqgan, vq_store, label, condition, &cfg.sample)?;
    if let Some(dir) = out {
        let [t, h, w] = cfg.vqgan.resolution;
        let c = cfg.vqgan.channels;
        let values: Vec<f64> = video.data().iter().map(|&v| v as f64).collect();
        let dump = FrameDump {
            shape: [h, w, c],
            frames: values.chunks(h * w * c).take(t).map(<[f64]>::to_vec).collect(),
            condition: Some(condition.iter().map(|&v| v as f64).collect()),
            meta: vec![
                ("label".into(), label.to_string()),
                ("seed".into(), cfg.sample.seed.to_string()),
                ("temperature".into(), cfg.sample.temperature.to_string()),
                ("top_k".into(), cfg.sample.top_k.to_string()),
            ],
        };
        write_dump(dir, &dump)?;
    }
    Ok(video)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    ReconFvd,
    Fvd,
    Lpips,
    Mse,
    SlrAcc,
}

impl FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rfvd" => Ok(Self::ReconFvd),
            "fvd" => Ok(Self::Fvd),
            "lpips" => Ok(Self::Lpips),
            "mse" => Ok(Self::Mse),
            "slr" => Ok(Self::SlrAcc),
            _ => Err(Error::config("metrics", format!("unknown metric '{s}' (rfvd|fvd|lpips|mse|slr)"))),
        }
    }
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Self::ReconFvd => "rfvd",
            Self::Fvd => "fvd",
            Self::Lpips => "lpips",
            Self::Mse => "mse",
            Self::SlrAcc => "slr",
        }
    }

    pub fn needs_prior(self) -> bool {
        matches!(self, Self::Fvd | Self::SlrAcc)
    }
}

/// Videos of `data` one by one.
pub fn videos_of(data: &Dataset) -> Result<Vec<Tensor<f32>>> {
    (0..data.len()).map(|i| data.batch::<f32>(&[i])).collect()
}

/// Reconstructions of every video of `data`.
pub fn reconstructions(vqgan: &mut VqGan, store: &ParamStore<f32>, data: &Dataset) -> Result<Vec<Tensor<f32>>> {
    let mut frozen = store.clone();
    frozen.freeze();
    (0..data.len())
        .map(|i| Ok(vqgan.reconstruct(&frozen, &data.batch::<f32>(&[i])?)?.0))
        .collect()
}

/// One sample per item of `data`, conditioned on its label and first frame,
/// cycling over the data until `count` samples exist.
pub fn samples_for(
    cfg: &Config,
    prior: &Prior,
    prior_store: &ParamStore<f32>,
    vqgan: &mut VqGan,
    vq_store: &ParamStore<f32>,
    data: &Dataset,
    count: usize,
) -> Result<(Vec<Tensor<f32>>, Vec<usize>)> {
    let mut videos = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for k in 0..count {
        let i = k % data.len();
        let mut c = cfg.clone();
        c.sample.seed = cfg.sample.seed.wrapping_add(k as u64);
        let label = data.samples[i].label;
        videos.push(sample_clip(&c, prior, prior_store, vqgan, vq_store, label, data.first_frame(i), None)?);
        labels.push(label);
    }
    Ok((videos, labels))
}

/// Fréchet distance between two video sets under the fixed feature net.
pub fn fvd_between(a: &[Tensor<f32>], b: &[Tensor<f32>], channels: usize) -> Result<f64> {
    let net = FeatureNet::new(channels);
    frechet_distance(&feature_stats(a, &net)?, &feature_stats(b, &net)?)
}

/// Metric report for the given models on the held-out split.
pub fn evaluate(
    cfg: &Config,
    vqgan: &mut VqGan,
    vq_store: &ParamStore<f32>,
    prior: Option<(&Prior, &ParamStore<f32>)>,
    eval_data: &Dataset,
    metrics: &[Metric],
) -> Result<Vec<ReportEntry>> {
    let real = videos_of(eval_data)?;
    let mut report = Vec::new();
    let needs_recon = metrics.iter().any(|m| matches!(m, Metric::ReconFvd | Metric::Lpips | Metric::Mse));
    let recon = if needs_recon { reconstructions(vqgan, vq_store, eval_data)? } else { Vec::new() };
    let mut samples = None;
    for &metric in metrics {
        let entry = match metric {
            Metric::ReconFvd => ReportEntry::ok(cfg, "rfvd", fvd_between(&recon, &real, cfg.vqgan.channels)?),
            Metric::Mse => {
                let total: f64 = recon.iter().zip(&real).map(|(a, b)| recon_mse(a, b)).sum::<Result<f64>>()?;
                ReportEntry::ok(cfg, "mse", total / real.len().max(1) as f64)
            }
            Metric::Lpips => {
                let net = PerceptualNet::<f32>::new(cfg.vqgan.channels, PERCEPTUAL_SEED);
                let mut total = 0.0;
                for (a, b) in recon.iter().zip(&real) {
                    total += net.distance(a, b)?.item() as f64;
                }
                ReportEntry::ok(cfg, "lpips", total / real.len().max(1) as f64)
            }
            Metric::Fvd | Metric::SlrAcc => {
                let Some((p, ps)) = prior else {
                    report.push(ReportEntry::unavailable(cfg, metric.name(), "no prior checkpoint given".into()));
                    continue;
                };
                if samples.is_none() {
                    let count = cfg.eval.samples.max(2);
                    samples = Some(samples_for(cfg, p, ps, vqgan, vq_store, eval_data, count)?);
                }
                let (videos, labels) = samples.as_ref().expect("filled above");
                if metric == Metric::Fvd {
                    ReportEntry::ok(cfg, "fvd", fvd_between(videos, &real, cfg.vqgan.channels)?)
                } else {
                    match slr_score(cfg, videos, labels) {
                        Ok(v) => ReportEntry::ok(cfg, "slr", v),
                        Err(Error::Unavailable(why)) => ReportEntry::unavailable(cfg, "slr", why),
                        Err(e) => return Err(e),
                    }
                }
            }
        };
        report.push(entry);
    }
    Ok(report)
}

fn slr_score(cfg: &Config, videos: &[Tensor<f32>], labels: &[usize]) -> Result<f64> {
    let data = generate_dataset(&cfg.eval.classifier_data)?;
    let (train, test) = split(&data, 0.5, cfg.eval.classifier_data.seed)?;
    let classifier = SlrClassifier::train(&train, &test, &cfg.eval.classifier, cfg.seed)?;
    let batch = Tensor::concat(videos, 0)?;
    classifier.accuracy(&batch, labels)
}

/// Appends report records as JSON lines to `path`.
pub fn write_report(path: &Path, entries: &[ReportEntry]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    for e in entries {
        let line = serde_json::to_string(e).map_err(|err| Error::contract(err.to_string()))?;
        writeln!(f, "{line}").map_err(|err| Error::io(path, err))?;
    }
    Ok(())
}

/// Codebook usage over the encoded dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodebookReport {
    pub codebook_size: usize,
    pub perplexity: f64,
    pub used: usize,
    pub dead_fraction: f64,
    /// `(code, count)` for the most used codes.
    pub top: Vec<(usize, u64)>,
}

pub fn inspect_codebook(vqgan: &mut VqGan, store: &ParamStore<f32>, data: &Dataset) -> Result<CodebookReport> {
    let k = vqgan.config.codebook_size;
    let mut counts = vec![0u64; k];
    let tracking = vqgan.codebook.track_usage;
    vqgan.codebook.track_usage = false;
    for i in 0..data.len() {
        let (_, grid) = vqgan.encode(store, &data.batch::<f32>(&[i])?)?;
        for &c in &grid.indices {
            counts[c] += 1;
        }
    }
    vqgan.codebook.track_usage = tracking;
    let used = counts.iter().filter(|&&c| c > 0).count();
    let mut top: Vec<(usize, u64)> = counts.iter().copied().enumerate().filter(|&(_, c)| c > 0).collect();
    top.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    top.truncate(16);
    Ok(CodebookReport {
        codebook_size: k,
        perplexity: perplexity_of_counts(&counts),
        used,
        dead_fraction: 1.0 - used as f64 / k as f64,
        top,
    })
}

/// Result of one sweep point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub label: String,
    pub latent: [usize; 3],
    pub perplexity: f64,
    pub report: Vec<ReportEntry>,
}

/// Trains both stages for every point of `sweep` and evaluates them.
/// `out` receives one subdirectory per point.
pub fn run_sweep(cfg: &Config, sweep: Sweep, metrics: &[Metric], out: Option<&Path>) -> Result<Vec<SweepPoint>> {
    let mut points = Vec::new();
    for (label, ov) in sweep.points() {
        let mut c = cfg.clone();
        c.apply_override(&ov)?;
        let dir = out.map(|d| d.join(format!("{sweep}_{label}")));
        let (train, test) = datasets(&c)?;
        let trainer = train_vqgan(&c, &train, dir.as_deref(), |_, _| Ok(true))?;
        let mut vqgan = trainer.model.clone();
        let mut vq_store = trainer.gen.clone();
        vq_store.freeze();
        let codebook = inspect_codebook(&mut vqgan, &vq_store, &train)?;
        let prior_run = if metrics.iter().any(|m| m.needs_prior()) {
            Some(train_prior(&c, vqgan.clone(), vq_store.clone(), &train, dir.as_deref(), |_, _| Ok(true))?)
        } else {
            None
        };
        let mut report = evaluate(
            &c,
            &mut vqgan,
            &vq_store,
            prior_run.as_ref().map(|t| (&t.prior, &t.store)),
            &test,
            metrics,
        )?;
        let mut ppl = ReportEntry::ok(&c, "perplexity", codebook.perplexity);
        ppl.sweep = Some(label.clone());
        report.iter_mut().for_each(|e| e.sweep = Some(label.clone()));
        report.insert(0, ppl);
        if let Some(d) = &dir {
            write_report(&d.join("report.jsonl"), &report)?;
        }
        points.push(SweepPoint {
            label,
            latent: c.vqgan.latent_shape(),
            perplexity: codebook.perplexity,
            report,
        });
    }
    Ok(points)
}
