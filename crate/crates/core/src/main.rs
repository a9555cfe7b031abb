//! Command-line entry point. Exit codes: 0 success, 1 usage error,
//! 2 failed ordering assertions in `ablate`, 3 runtime failure.

use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use mome::config::Config;
use mome::data::{export_dataset, generate_dataset, load_raw_dataset, Dataset, SyntheticSpec};
use mome::harness::{export_gate_weights, run_ablation};
use mome::model::{Model, ModelConfig, Variant};
use mome::numerics::check_gradients;
use mome::numerics::Graph;
use mome::trainer::{
    evaluate, load_checkpoint, save_checkpoint, train, write_run_log, Checkpoint, OptimConfig,
    OptimState,
};
use mome::{Error, Result};

#[derive(Parser)]
#[command(
    name = "mome",
    about = "Mixture-of-modality-experts fusion with holistic token learning, desk scale"
)]
struct Cli {
    /// Key-value config file (sections: [data], [model], [htl], [optim])
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for data generation, initialization and shuffling
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Directory for all outputs (created if missing)
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic dataset and export it with a TSV manifest
    GenData,
    /// Train one variant; writes run_log.csv, best.ckpt and last.ckpt
    Train {
        #[arg(long, default_value = "mome_htl")]
        variant: String,
        /// Load samples from a manifest instead of generating them
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Resume from a last.ckpt written by an earlier run
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Finite-difference check of the full objective's gradients
    Gradcheck {
        #[arg(long, default_value = "mome_htl")]
        variant: String,
    },
    /// Train and compare variants across seeds; prints the comparison table
    Ablate {
        /// Comma-separated variant names (defaults to the 6-variant ladder)
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
        /// Comma-separated seeds (defaults to 0,1,2)
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Export per-sample gate weights of a trained checkpoint
    ExportGates {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
}

fn main() {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let code = match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::InvalidArgument(_) => 1,
                _ => 3,
            }
        }
    };
    std::process::exit(code);
}

struct Ctx {
    config: Config,
    seed: u64,
    out_dir: PathBuf,
}

impl Ctx {
    fn data_spec(&self) -> Result<SyntheticSpec> {
        self.config
            .data(SyntheticSpec::toy(8, 120, self.seed))
            .map(|mut s| {
                s.seed = self.seed;
                s
            })
    }

    fn dataset(&self, manifest: Option<&PathBuf>) -> Result<Dataset> {
        match manifest {
            Some(path) => load_raw_dataset(path),
            None => generate_dataset(&self.data_spec()?),
        }
    }

    fn model_config(&self, variant: Variant, num_classes: usize) -> Result<ModelConfig> {
        self.config.model(ModelConfig::toy(variant, num_classes))
    }

    fn optim(&self) -> Result<OptimConfig> {
        self.config.optim(OptimConfig {
            seed: self.seed,
            ..OptimConfig::default()
        })
    }

    /// A checkpoint's config echo: the variant plus the verbatim config, so
    /// eval/export can rebuild the exact model without extra flags.
    fn checkpoint_echo(&self, variant: Variant) -> String {
        format!(
            "variant = {}\nseed = {}\n{}",
            variant.name(),
            self.seed,
            self.config.echo()
        )
    }
}

/// Rebuild the model a checkpoint was trained with from its config echo.
fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<(Model<f32>, Ctx)> {
    let echoed = Config::parse(&ckpt.config_echo)?;
    let variant = Variant::parse(
        echoed
            .get("", "variant")
            .ok_or_else(|| Error::Format("checkpoint echo lacks a variant".into()))?,
    )?;
    let seed: u64 = echoed
        .get("", "seed")
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);
    let ctx = Ctx {
        config: echoed,
        seed,
        out_dir: PathBuf::new(),
    };
    let spec = ctx.data_spec()?;
    let cfg = ctx.model_config(variant, spec.num_classes)?;
    let mut model: Model<f32> = Model::new(cfg, seed)?;
    ckpt.apply(&mut model)?;
    Ok((model, ctx))
}

fn run(cli: Cli) -> Result<i32> {
    let config = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    let ctx = Ctx {
        config,
        seed: cli.seed,
        out_dir: cli.out_dir,
    };
    std::fs::create_dir_all(&ctx.out_dir).map_err(Error::Io)?;
    ctx.config.write_echo(&ctx.out_dir)?;

    match cli.cmd {
        Cmd::GenData => {
            let spec = ctx.data_spec()?;
            let data = generate_dataset(&spec)?;
            let manifest = export_dataset(&data, &ctx.out_dir.join("data"))?;
            println!(
                "wrote {} train / {} val / {} test samples; manifest: {}",
                data.train.len(),
                data.val.len(),
                data.test.len(),
                manifest.display()
            );
            Ok(0)
        }
        Cmd::Train {
            variant,
            manifest,
            resume,
        } => {
            let variant = Variant::parse(&variant)?;
            let data = ctx.dataset(manifest.as_ref())?;
            let spec_classes = ctx.data_spec()?.num_classes;
            let cfg = ctx.model_config(variant, spec_classes)?;
            let mut model: Model<f32> = Model::new(cfg, ctx.seed)?;
            let optim = ctx.optim()?;
            let (mut state, start_epoch) = match &resume {
                Some(path) => {
                    let ckpt = load_checkpoint(path)?;
                    let state = ckpt.apply(&mut model)?;
                    (state, ckpt.epoch)
                }
                None => (OptimState::new(model.store.len()), 0),
            };
            let result = train(&mut model, &data, &optim, &mut state, start_epoch)?;
            write_run_log(
                &ctx.out_dir.join("run_log.csv"),
                model.cfg.num_experts(),
                &result.records,
            )?;
            let echo = ctx.checkpoint_echo(variant);
            save_checkpoint(
                &ctx.out_dir.join("last.ckpt"),
                &Checkpoint::from_model(&model, &state, optim.max_epochs, &echo),
            )?;
            let mut best = model.clone();
            best.store.data_mut().copy_from_slice(&result.best_params);
            save_checkpoint(
                &ctx.out_dir.join("best.ckpt"),
                &Checkpoint::from_model(&best, &state, optim.max_epochs, &echo),
            )?;
            let test = evaluate(&best, &data.test)?;
            println!(
                "{}: best val mean1 {:.4} (epoch {}), test top1 {:.4}, test mean1 {:.4}",
                variant.name(),
                result.best_val_mean1,
                result.best_epoch,
                test.top1,
                test.mean1
            );
            Ok(0)
        }
        Cmd::Eval {
            checkpoint,
            manifest,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let (model, ckpt_ctx) = model_from_checkpoint(&ckpt)?;
            let data = match manifest {
                Some(path) => load_raw_dataset(&path)?,
                None => generate_dataset(&ckpt_ctx.data_spec()?)?,
            };
            let m = evaluate(&model, &data.test)?;
            println!("test top1 {:.4}, test mean1 {:.4}", m.top1, m.mean1);
            for (k, acc) in m.per_class_acc.iter().enumerate() {
                println!("class {k}: {acc:.4}");
            }
            Ok(0)
        }
        Cmd::Gradcheck { variant } => {
            let variant = Variant::parse(&variant)?;
            // double precision and a reduced geometry keep the check tight
            let mut spec = ctx.config.data(SyntheticSpec::toy(4, 1, ctx.seed))?;
            spec.seed = ctx.seed;
            let data = generate_dataset(&spec)?;
            let mut cfg = ctx.model_config(variant, spec.num_classes)?;
            // keep the objective fully differentiable so the oracle and the
            // backward pass see the same function
            cfg.htl.detach_teacher = false;
            let model: Model<f64> = Model::new(cfg.clone(), ctx.seed)?;
            let sample = &data.train[0];
            let tensors = sample.tensors_as::<f64>();
            let label = sample.label;
            let params = model.store.data().to_vec();
            let seed = ctx.seed;
            let mut eval_fn = move |p: &[f64]| {
                let mut m: Model<f64> = Model::new(cfg.clone(), seed).unwrap();
                m.store.data_mut().copy_from_slice(p);
                let mut g = Graph::new(m.store.len());
                let (loss, _, _) = m.loss(&mut g, &tensors, label).unwrap();
                let grads = g.backward(loss).unwrap();
                (g.value(loss).item(), grads)
            };
            let report = check_gradients(&mut eval_fn, &params, 1e-4, 1e-4);
            println!(
                "{}: {} parameters, max abs diff {:.3e}, max rel diff {:.3e} -> {}",
                variant.name(),
                params.len(),
                report.max_abs_diff,
                report.max_rel_diff,
                if report.passed() { "pass" } else { "FAIL" }
            );
            if report.passed() {
                Ok(0)
            } else {
                Ok(3)
            }
        }
        Cmd::Ablate { variants, seeds } => {
            let variants = match variants {
                Some(names) => names
                    .iter()
                    .map(|n| Variant::parse(n))
                    .collect::<Result<Vec<_>>>()?,
                None => vec![
                    Variant::EarlyFusion,
                    Variant::LateFusion,
                    Variant::MoeInputGate,
                    Variant::Mome,
                    Variant::MomeInterOnly,
                    Variant::MomeHtl,
                ],
            };
            let seeds = seeds.unwrap_or_else(|| vec![0, 1, 2]);
            let spec = ctx.data_spec()?;
            let template = ctx.model_config(Variant::Mome, spec.num_classes)?;
            let optim = ctx.optim()?;
            let report = run_ablation(&variants, &seeds, &spec, &template, &optim)?;
            let table = report.table();
            print!("{table}");
            std::fs::write(ctx.out_dir.join("ablation.txt"), &table).map_err(Error::Io)?;
            let any_failed_run = report.rows.iter().any(|r| r.error.is_some());
            if any_failed_run {
                Ok(3)
            } else if report.all_assertions_pass() {
                Ok(0)
            } else {
                Ok(2)
            }
        }
        Cmd::ExportGates {
            checkpoint,
            manifest,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let (model, ckpt_ctx) = model_from_checkpoint(&ckpt)?;
            let data = match manifest {
                Some(path) => load_raw_dataset(&path)?,
                None => generate_dataset(&ckpt_ctx.data_spec()?)?,
            };
            let path = ctx.out_dir.join("gates.csv");
            export_gate_weights(&model, &data.test, &path)?;
            println!("wrote {}", path.display());
            Ok(0)
        }
    }
}
