//! Command-line front end: synthetic data, pretraining, cross-validated
//! fine-tuning, evaluation, heatmap export and gradient checks.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use idennet::bench::{run_ablation, AblationConfig};
use idennet::checkpoint::{Checkpoint, ModelKind};
use idennet::config::RunConfig;
use idennet::data::{load_manifest, make_folds, synth_generate, write_dataset, Sample};
use idennet::eval::heatmap_export;
use idennet::gradcheck::{gradcheck_all, Fault, DEFAULT_SEEDS};
use idennet::model::{StreamTask, Variant};
use idennet::nn::BackboneConfig;
use idennet::optim::Stage;
use idennet::train::{evaluate, finetune, pretrain, EpochLog, FinetuneOptions, PretrainOptions, Pretrained};

#[derive(Parser)]
#[command(name = "idennet", version, about = "Identity-enhanced facial expression recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat key=value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    variant: Option<Variant>,
    #[arg(long, global = true, value_parser = clap::builder::PossibleValuesParser::new(["16", "22", "40"]))]
    depth: Option<String>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct DataArg {
    /// Dataset manifest; a synthetic set from the configuration is used when absent.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset (PGM images plus manifest).
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train a single-task stream and save per-epoch and best checkpoints.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long, value_enum)]
        stream: StreamArg,
    },
    /// Cross-validated fine-tuning of a variant from pretrained streams.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// Pretrained emotion stream checkpoint.
        #[arg(long)]
        emotion: PathBuf,
        /// Pretrained identity stream checkpoint (variants f and if).
        #[arg(long)]
        identity: Option<PathBuf>,
    },
    /// Expression accuracy of a fine-tuned checkpoint on a dataset or one of its folds.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluate only this held-out fold of the configured split.
        #[arg(long)]
        fold: Option<usize>,
    },
    /// Export input crops and fusion-block heatmaps as PGM images.
    Heatmap {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Export at most this many samples.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Compare the variants on the synthetic benchmark over paired seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Number of seeds, counting up from --seed (default 0).
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long)]
        pretrain_epochs: Option<usize>,
        #[arg(long)]
        finetune_epochs: Option<usize>,
    },
    /// Finite-difference check of every differentiable op and loss.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, hide = true)]
        inject_fault: Option<FaultArg>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum StreamArg {
    Emotion,
    Identity,
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    Relu,
}

impl Common {
    fn run_config(&self, stage: Stage) -> Result<RunConfig> {
        let mut cfg = RunConfig::for_stage(stage);
        if let Some(path) = &self.config {
            cfg.apply_file(path).with_context(|| format!("reading {}", path.display()))?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(v) = self.variant {
            cfg.variant = v;
        }
        if let Some(d) = &self.depth {
            cfg.depth = d.parse()?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self) -> Result<&Path> {
        self.out.as_deref().context("--out is required")
    }
}

fn load_data(data: &DataArg, cfg: &RunConfig) -> Result<Vec<Sample>> {
    match &data.data {
        Some(path) => load_manifest(path).with_context(|| format!("loading {}", path.display())),
        None => Ok(synth_generate(&cfg.synth)?),
    }
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

/// Prints epoch lines and appends them to `epochs.log` in `dir`.
struct EpochSink {
    file: fs::File,
}

impl EpochSink {
    fn open(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let file = fs::OpenOptions::new().create(true).append(true).open(dir.join("epochs.log"))?;
        Ok(Self { file })
    }

    fn write(&mut self, log: &EpochLog) {
        println!("{log}");
        if let Err(e) = writeln!(self.file, "{log}") {
            log::warn!("could not append to epochs.log: {e}");
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Synth { common } => {
            let cfg = common.run_config(Stage::Pretrain)?;
            let mut spec = cfg.synth.clone();
            if let Some(seed) = common.seed {
                spec.seed = seed;
            }
            let samples = synth_generate(&spec)?;
            let manifest = write_dataset(common.out_dir()?, &samples)?;
            println!("wrote {} samples to {}", samples.len(), manifest.display());
        }
        Command::Pretrain { common, data, stream } => {
            let cfg = common.run_config(Stage::Pretrain)?;
            let samples = load_data(&data, &cfg)?;
            let out = common.out_dir()?.to_path_buf();
            let task = match stream {
                StreamArg::Emotion => StreamTask::Emotion,
                StreamArg::Identity => StreamTask::Identity,
            };
            let opts = PretrainOptions {
                train: cfg.train.clone(),
                seed: cfg.seed,
                augment: cfg.augment,
                crop: cfg.train_crop,
                validation_fraction: cfg.validation_fraction,
                num_classes: None,
                out_dir: Some(out.clone()),
            };
            let mut sink = EpochSink::open(&out)?;
            let outcome = pretrain(task, &samples, BackboneConfig::from_depth(cfg.depth)?, &opts, |l| sink.write(l))?;
            let best = out.join(format!("{}_best.ckpt", task.as_str()));
            match outcome.best_val_accuracy {
                Some(acc) => println!("best epoch {} val_acc={acc:.4} -> {}", outcome.best_epoch, best.display()),
                None => println!("best epoch {} -> {}", outcome.best_epoch, best.display()),
            }
        }
        Command::Finetune { common, data, emotion, identity } => {
            let cfg = common.run_config(Stage::Finetune)?;
            let samples = load_data(&data, &cfg)?;
            let out = common.out_dir()?.to_path_buf();
            let emo = load_checkpoint(&emotion)?;
            let id = identity.as_deref().map(load_checkpoint).transpose()?;
            let pretrained = Pretrained::new(&emo, id.as_ref())?;
            if pretrained.backbone().depth != cfg.depth {
                info!("using depth {} from the pretrained checkpoints", pretrained.backbone().depth);
            }
            let folds = make_folds(&samples, cfg.folds, cfg.seed)?;
            let opts = FinetuneOptions {
                train: cfg.train.clone(),
                loss: cfg.loss,
                seed: cfg.seed,
                augment: cfg.augment,
                crop: cfg.train_crop,
                cache_features: cfg.cache_features,
                out_dir: Some(out.clone()),
                record_steps: false,
            };
            let mut sink = EpochSink::open(&out)?;
            let outcome = finetune(cfg.variant, &pretrained, &samples, &folds, &opts, |l| sink.write(l))?;
            let text = format!("variant={}\n{}\n", cfg.variant, outcome.report);
            fs::write(out.join("report.txt"), &text)?;
            print!("{text}");
        }
        Command::Eval { common, data, checkpoint, fold } => {
            let cfg = common.run_config(Stage::Finetune)?;
            let samples = load_data(&data, &cfg)?;
            let ckpt = load_checkpoint(&checkpoint)?;
            let samples = match fold {
                Some(k) => {
                    let folds = make_folds(&samples, cfg.folds, cfg.seed)?;
                    let (_, test) = folds.split(&samples, k)?;
                    test.into_iter().map(|i| samples[i].clone()).collect()
                }
                None => samples,
            };
            let report = match ckpt.kind {
                ModelKind::IdenNet { num_expressions, .. } => evaluate(&mut ckpt.to_model()?, &samples, num_expressions)?,
                ModelKind::Stream { task: StreamTask::Emotion, num_classes } => {
                    evaluate(&mut ckpt.to_stream()?, &samples, num_classes)?
                }
                ModelKind::Stream { task: StreamTask::Identity, .. } => {
                    bail!("{} holds an identity stream; expression accuracy needs an emotion model", checkpoint.display())
                }
            };
            println!("{report}");
        }
        Command::Heatmap { common, data, checkpoint, limit } => {
            let cfg = common.run_config(Stage::Finetune)?;
            let mut samples = load_data(&data, &cfg)?;
            if let Some(n) = limit {
                samples.truncate(n);
            }
            let mut model = load_checkpoint(&checkpoint)?.to_model()?;
            let export = heatmap_export(&mut model, &samples, common.out_dir()?)?;
            println!("wrote {} heatmaps, index {}", export.heatmaps.len(), export.index.display());
        }
        Command::Ablate { common, seeds, folds, pretrain_epochs, finetune_epochs } => {
            let mut cfg = AblationConfig::default();
            let first = common.seed.unwrap_or(0);
            cfg.seeds = (first..first + seeds).collect();
            if let Some(d) = &common.depth {
                cfg.depth = d.parse()?;
            }
            if let Some(k) = folds {
                cfg.folds = k;
            }
            if let Some(e) = pretrain_epochs {
                cfg.pretrain.epochs = e;
            }
            if let Some(e) = finetune_epochs {
                cfg.finetune.epochs = e;
            }
            let r = run_ablation(&cfg, |l| println!("{l}"))?;
            for v in &cfg.variants {
                println!("variant={v} mean_acc={:.4} per_seed={:?}", r.mean(*v), r.per_seed(*v));
            }
        }
        Command::Gradcheck { common, inject_fault } => {
            let seeds: Vec<u64> = match common.seed {
                Some(s) => (0..DEFAULT_SEEDS.len() as u64).map(|i| s.wrapping_add(i)).collect(),
                None => DEFAULT_SEEDS.to_vec(),
            };
            let fault = inject_fault.map(|FaultArg::Relu| Fault::ReluBackward);
            let report = gradcheck_all(&seeds, fault)?;
            println!("{report}");
            if !report.passed() {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
