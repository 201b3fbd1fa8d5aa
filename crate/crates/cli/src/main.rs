//! Command-line front end for the shape-generation pipeline. Every
//! subcommand reads one TOML config (defaults when omitted), applies
//! `--override key=value` patches, echoes the resolved result, and runs the
//! corresponding pipeline stage. Failures exit nonzero with a single
//! machine-parsable line on stderr.

use std::path::PathBuf;
use std::process::ExitCode;

use ambishape::pipeline::{
    cmd_dataset, cmd_eval, cmd_finetune, cmd_sample, cmd_train_codec, cmd_train_prior,
    load_config, resolved_toml, PipelineError, RunConfig, SampleSource,
};
use ambishape::rng::derive_seed;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "ambishape", version, about = "Probabilistic 3D shape generation pipeline")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML). Defaults are used when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory, overriding the config.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Set one config key, e.g. --override prior.steps=4000. Repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the dataset: shapes, scenes, renders, mappings, manifest.
    Dataset,
    /// Train the patch codec and export index grids for every shape.
    TrainCodec,
    /// Train the image-conditioned prior over code grids.
    TrainPrior {
        /// Continue from the existing checkpoint instead of starting fresh.
        #[arg(long)]
        resume: bool,
    },
    /// Sample shape hypotheses for one observation.
    Sample {
        /// Dataset scene id to condition on.
        #[arg(long, conflicts_with = "image")]
        scene: Option<String>,
        /// Image file to condition on (the renderer's format).
        #[arg(long, value_name = "FILE")]
        image: Option<PathBuf>,
        /// Number of hypotheses.
        #[arg(long, default_value_t = 6)]
        k: usize,
        /// Softmax temperature; 0 decodes greedily.
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        /// Sampling seed; derived from the master seed when omitted.
        #[arg(long)]
        sample_seed: Option<u64>,
        /// Zero the image tokens (unconditioned ablation).
        #[arg(long)]
        zero_image: bool,
    },
    /// Evaluate the trained pair on the validation split.
    Eval {
        /// Zero the image tokens (unconditioned ablation).
        #[arg(long)]
        zero_image: bool,
    },
    /// Adapt the conditioning path to a shifted-profile dataset.
    Finetune,
}

fn resolve_config(common: &Common) -> Result<RunConfig, PipelineError> {
    let mut overrides = Vec::new();
    for raw in &common.overrides {
        let (k, v) = raw.split_once('=').ok_or_else(|| {
            PipelineError::Config(format!("override {raw:?} is not of the form key=value"))
        })?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(seed) = common.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    if let Some(out) = &common.out {
        overrides.push(("out_dir".into(), out.to_string_lossy().into_owned()));
    }
    load_config(common.config.as_deref(), &overrides)
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let cfg = resolve_config(&cli.common)?;
    let echoed = resolved_toml(&cfg)?;
    println!("# resolved configuration");
    for line in echoed.lines() {
        println!("# {line}");
    }

    match cli.command {
        Command::Dataset => {
            let manifest = cmd_dataset(&cfg)?;
            println!(
                "dataset: {} shapes, {} scenes ({} skipped), mapping mean size {:.2}",
                manifest.shapes.len(),
                manifest.scenes.len(),
                manifest.skipped_scenes.len(),
                manifest.mapping_mean_size,
            );
            println!(
                "splits: {} train / {} val shapes",
                manifest.train_shape_ids.len(),
                manifest.val_shape_ids.len(),
            );
        }
        Command::TrainCodec => {
            let out = cmd_train_codec(&cfg)?;
            let (first, last) = (
                out.report.curve.first().map(|r| r.total).unwrap_or(f64::NAN),
                out.report.curve.last().map(|r| r.total).unwrap_or(f64::NAN),
            );
            println!(
                "codec: loss {first:.4} -> {last:.4} (ratio {:.3}), {} restarts, {} grids exported",
                out.loss_ratio, out.report.restarts, out.exported,
            );
        }
        Command::TrainPrior { resume } => {
            let out = cmd_train_prior(&cfg, resume)?;
            println!(
                "prior: {} steps, final val ce {:.4}",
                out.curve.len(),
                out.final_val_ce,
            );
        }
        Command::Sample {
            scene,
            image,
            k,
            temperature,
            sample_seed,
            zero_image,
        } => {
            let source = match (scene, image) {
                (Some(id), None) => SampleSource::Scene(id),
                (None, Some(path)) => SampleSource::ImageFile(path),
                _ => {
                    return Err(PipelineError::Config(
                        "pass exactly one of --scene or --image".into(),
                    ))
                }
            };
            let seed = sample_seed.unwrap_or_else(|| derive_seed(cfg.seed, "sample-cli"));
            let out = cmd_sample(&cfg, &source, k, temperature, seed, zero_image)?;
            println!("samples: {} hypotheses in {}", out.grids.len(), out.dir.display());
            if !out.degenerate.is_empty() {
                println!("degenerate (no surface): {:?}", out.degenerate);
            }
        }
        Command::Eval { zero_image } => {
            let report = cmd_eval(&cfg, zero_image)?;
            print!("{report}");
            let stem = if zero_image { "report-zero" } else { "report" };
            println!(
                "reports: {}/eval/{stem}.json and .txt",
                cfg.out_dir.display(),
            );
        }
        Command::Finetune => {
            let out = cmd_finetune(&cfg)?;
            println!(
                "finetune: val ce {:.4} -> {:.4} over {} steps (scratch control {:.4})",
                out.pre_ce, out.post_ce, out.steps, out.scratch_ce,
            );
            println!(
                "frozen transformer/head bit-identical: {}",
                out.frozen_bit_identical,
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error kind={} msg={:?}", e.kind(), e.to_string());
            ExitCode::FAILURE
        }
    }
}
