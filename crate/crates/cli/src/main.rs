use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lmt_core::config::Config;
use lmt_core::pipeline::{
    datasets, default_condition_frame, evaluate, inspect_codebook, load_prior, load_vqgan, read_condition_frame, run_sweep,
    sample_clip, train_prior, train_vqgan, write_report, Metric, Sweep, PRIOR_CHECKPOINT, VQGAN_CHECKPOINT,
};
use lmt_core::prior::{LossSet, MaskKind};
use lmt_core::{Error, Result};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Two-stage latent video generator: train, sample and evaluate.
#[derive(Parser)]
#[command(name = "lmt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// `key=value` overrides, e.g. `attention=axial` (repeatable).
    #[arg(long = "ablation", value_name = "KEY=VALUE")]
    ablations: Vec<String>,
    /// Output directory (defaults to the configured `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Stage 1: train the 3D VQ-GAN.
    TrainVqgan {
        #[command(flatten)]
        common: Common,
    },
    /// Stage 2: train the latent prior on a frozen stage-1 checkpoint.
    TrainPrior {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        vqgan: Option<PathBuf>,
        /// ce | ce+lpips | ce+lpips+recon
        #[arg(long)]
        losses: Option<String>,
        /// causal | seq2seq
        #[arg(long)]
        mask: Option<String>,
    },
    /// Sample one clip for a class label and dump its frames.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        vqgan: Option<PathBuf>,
        #[arg(long)]
        prior: Option<PathBuf>,
        #[arg(long)]
        label: usize,
        /// PPM condition frame; defaults to the first frame of a training
        /// clip of the same class.
        #[arg(long)]
        condition_frame: Option<PathBuf>,
    },
    /// Compute metrics, optionally over an ablation sweep.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        vqgan: Option<PathBuf>,
        #[arg(long)]
        prior: Option<PathBuf>,
        /// Comma-separated subset of rfvd, fvd, lpips, mse, slr.
        #[arg(long, default_value = "rfvd,lpips,mse")]
        metrics: String,
        /// codebook_size | downsample_factor
        #[arg(long)]
        sweep: Option<String>,
    },
    /// Codebook usage statistics over the training set.
    InspectCodebook {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        vqgan: Option<PathBuf>,
    },
}

fn resolve(common: &Common) -> Result<(Config, PathBuf)> {
    let mut cfg = Config::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.sample.seed = seed;
    }
    for a in &common.ablations {
        cfg.apply_override(a)?;
    }
    let out = common.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
    Ok((cfg, out))
}

fn or_default(path: &Option<PathBuf>, out: &Path, name: &str) -> PathBuf {
    path.clone().unwrap_or_else(|| out.join(name))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainVqgan { common } => {
            let (cfg, out) = resolve(&common)?;
            let (train, _) = datasets(&cfg)?;
            let steps = cfg.stage1.steps;
            let trainer = train_vqgan(&cfg, &train, Some(&out), |_, m| {
                if m.step % 50 == 0 || m.step + 1 == steps {
                    eprintln!(
                        "stage1 step {:>5} recon {:.5} perceptual {:.4} perplexity {:.1} d_loss {:.3}",
                        m.step, m.recon, m.perceptual, m.perplexity, m.d_loss
                    );
                }
                Ok(true)
            })?;
            println!("{}", out.join(VQGAN_CHECKPOINT).display());
            eprintln!("stage1 finished at step {}", trainer.step);
        }
        Command::TrainPrior {
            common,
            vqgan,
            losses,
            mask,
        } => {
            let (mut cfg, out) = resolve(&common)?;
            if let Some(l) = losses {
                cfg.prior.losses = l.parse::<LossSet>()?;
            }
            if let Some(m) = mask {
                cfg.prior.mask = m.parse::<MaskKind>()?;
            }
            let (model, store) = load_vqgan(&cfg, &or_default(&vqgan, &out, VQGAN_CHECKPOINT))?;
            let (train, _) = datasets(&cfg)?;
            let steps = cfg.stage2.steps;
            train_prior(&cfg, model, store, &train, Some(&out), |_, m| {
                if m.step % 50 == 0 || m.step + 1 == steps {
                    eprintln!(
                        "stage2 step {:>5} ce {:.4} accuracy {:.3} perceptual {:.4} recon {:.5}",
                        m.step, m.ce, m.accuracy, m.perceptual, m.recon
                    );
                }
                Ok(true)
            })?;
            println!("{}", out.join(PRIOR_CHECKPOINT).display());
        }
        Command::Sample {
            common,
            vqgan,
            prior,
            label,
            condition_frame,
        } => {
            let (cfg, out) = resolve(&common)?;
            if label >= cfg.prior.n_classes {
                return Err(Error::config("label", format!("label {label} outside 0..{}", cfg.prior.n_classes)));
            }
            let (mut model, store) = load_vqgan(&cfg, &or_default(&vqgan, &out, VQGAN_CHECKPOINT))?;
            let (p, ps) = load_prior(&cfg, &or_default(&prior, &out, PRIOR_CHECKPOINT))?;
            let condition = match condition_frame {
                Some(path) => read_condition_frame(&path, &cfg)?,
                None => default_condition_frame(&datasets(&cfg)?.0, label)?,
            };
            let dir = out.join(format!("sample_label{label}_seed{}", cfg.sample.seed));
            cfg.echo(&dir)?;
            sample_clip(&cfg, &p, &ps, &mut model, &store, label, &condition, Some(&dir))?;
            println!("{}", dir.display());
        }
        Command::Eval {
            common,
            vqgan,
            prior,
            metrics,
            sweep,
        } => {
            let (cfg, out) = resolve(&common)?;
            let metrics: Vec<Metric> = metrics.split(',').map(|m| m.trim().parse()).collect::<Result<_>>()?;
            let report_path = out.join("report.jsonl");
            let entries = if let Some(s) = sweep {
                let sweep: Sweep = s.parse()?;
                cfg.echo(&out)?;
                let points = run_sweep(&cfg, sweep, &metrics, Some(&out))?;
                points.into_iter().flat_map(|p| p.report).collect()
            } else {
                let (mut model, store) = load_vqgan(&cfg, &or_default(&vqgan, &out, VQGAN_CHECKPOINT))?;
                let needs_prior = metrics.iter().any(|m| m.needs_prior());
                let prior_path = or_default(&prior, &out, PRIOR_CHECKPOINT);
                // Without a prior the sample metrics are reported unavailable.
                let loaded = if needs_prior && (prior.is_some() || prior_path.exists()) {
                    Some(load_prior(&cfg, &prior_path)?)
                } else {
                    None
                };
                let (_, test) = datasets(&cfg)?;
                evaluate(&cfg, &mut model, &store, loaded.as_ref().map(|(p, s)| (p, s)), &test, &metrics)?
            };
            write_report(&report_path, &entries)?;
            for e in &entries {
                println!("{}", serde_line(e));
            }
            if let Some(bad) = entries.iter().find(|e| !e.is_ok()) {
                return Err(Error::Unavailable(format!(
                    "{}: {}",
                    bad.metric,
                    bad.detail.clone().unwrap_or_default()
                )));
            }
        }
        Command::InspectCodebook { common, vqgan } => {
            let (cfg, out) = resolve(&common)?;
            let (mut model, store) = load_vqgan(&cfg, &or_default(&vqgan, &out, VQGAN_CHECKPOINT))?;
            let (train, _) = datasets(&cfg)?;
            let report = inspect_codebook(&mut model, &store, &train)?;
            println!("{}", serde_line(&report));
        }
    }
    Ok(())
}

fn serde_line<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string(value).unwrap_or_else(|e| format!("{{\"error\":\"{e}\"}}"))
}

fn main() -> ExitCode {
    if std::env::var("LMT_DETERMINISTIC").is_ok_and(|v| v == "1") {
        // Fixed reduction order across runs.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
