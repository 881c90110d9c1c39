use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use strokeseg::gradcheck::{Fault, GradcheckOptions};
use strokeseg::pipeline::{self, PipelineError, RunConfig};
use strokeseg::volume::Axis;

#[derive(Parser, Debug)]
#[command(name = "strokeseg", version, about = "Multi-axial Res-UNet lesion segmentation with majority-vote fusion")]
struct Cli {
    /// TOML run configuration; its keys override the selected profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for initialization, shuffling and synthetic data.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (or file, for `fuse`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Base settings before the config file is applied.
    #[arg(long, global = true, value_enum, default_value_t = Profile::Full)]
    profile: Profile,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Profile {
    /// Full-length defaults: 200 epochs, batch 4, learning rate 1e-4.
    Full,
    /// Small synthetic profile for a laptop CPU.
    Desk,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the denoising model and write its encoder weights.
    Pretrain,
    /// Train one model per axis.
    Train(TrainArgs),
    /// Segment cases with per-axis models and fuse the results.
    Predict(PredictArgs),
    /// Majority-vote several masks into one.
    Fuse {
        /// Mask files to fuse.
        #[arg(required = true)]
        masks: Vec<PathBuf>,
    },
    /// Score predictions against ground truth.
    Evaluate(EvaluateArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic case tree.
    Synth {
        /// Number of cases (defaults to `synth_cases` from the config).
        #[arg(long)]
        cases: Option<usize>,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Case directory root; overrides `data_root`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Encoder weights from `pretrain`.
    #[arg(long)]
    pretrained: Option<PathBuf>,
    #[arg(long)]
    freeze_encoder: bool,
    /// Also record a from-scratch epoch-1 validation loss per axis.
    #[arg(long)]
    compare_scratch: bool,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    /// Directory holding model_x.runw, model_y.runw and model_z.runw.
    #[arg(long)]
    models: Option<PathBuf>,
    #[arg(long)]
    weights_x: Option<PathBuf>,
    #[arg(long)]
    weights_y: Option<PathBuf>,
    #[arg(long)]
    weights_z: Option<PathBuf>,
    /// Case directories or roots containing them.
    #[arg(long, required = true, num_args = 1..)]
    cases: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Prediction root written by `predict`.
    #[arg(long)]
    pred: PathBuf,
    /// Case root with ground-truth masks.
    #[arg(long)]
    gt: PathBuf,
    /// Training summary to embed (adds the transfer comparison).
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Perturb the analytic gradient of this case (verifies that failures are caught).
    #[arg(long, hide = true)]
    fault_case: Option<String>,
    #[arg(long, hide = true, default_value_t = 1e-2)]
    fault_delta: f64,
}

fn run_config(cli: &Cli) -> Result<RunConfig, PipelineError> {
    let base = match cli.profile {
        Profile::Full => RunConfig::default(),
        Profile::Desk => RunConfig::desk(),
    };
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::overlay_file(&base, path)?,
        None => base,
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn required_out(cli: &Cli) -> Result<&Path, PipelineError> {
    cli.out.as_deref().ok_or_else(|| PipelineError::Config("--out is required for this command".into()))
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    match &cli.command {
        Command::Pretrain => {
            let cfg = run_config(cli)?;
            let s = pipeline::cmd_pretrain(&cfg)?;
            println!("encoder weights: {} ({} parameters)", s.weights.display(), s.encoder_params);
            for (i, l) in s.epoch_losses.iter().enumerate() {
                println!("epoch {:>3} mse {l:.6}", i + 1);
            }
        }
        Command::Train(args) => {
            let mut cfg = run_config(cli)?;
            if let Some(d) = &args.data {
                cfg.data_root = Some(d.clone());
            }
            if let Some(p) = &args.pretrained {
                cfg.pretrained = Some(p.clone());
            }
            if let Some(e) = args.epochs {
                cfg.epochs = e;
            }
            cfg.freeze_encoder |= args.freeze_encoder;
            cfg.compare_scratch |= args.compare_scratch;
            let s = pipeline::cmd_train(&cfg)?;
            println!("epochs={} batch_size={} learning_rate={}", s.epochs, s.batch_size, s.learning_rate);
            for a in &s.axes {
                println!(
                    "axis {}: trainable {} of {}, final val soft dice {}, weights {}",
                    a.axis,
                    a.trainable_params,
                    a.total_params,
                    a.final_val_soft_dice.map_or_else(|| "-".into(), |d| format!("{d:.4}")),
                    a.weights.display()
                );
            }
        }
        Command::Predict(args) => {
            let out = required_out(cli)?;
            let mut weights = Vec::new();
            for (axis, explicit) in [(Axis::X, &args.weights_x), (Axis::Y, &args.weights_y), (Axis::Z, &args.weights_z)] {
                let path = explicit.clone().or_else(|| {
                    args.models.as_ref().map(|d| d.join(format!("model_{}.runw", axis.to_string().to_lowercase())))
                });
                if let Some(p) = path {
                    weights.push((axis, p));
                }
            }
            let model_cfg = match &cli.config {
                Some(_) => Some(run_config(cli)?.model),
                None => None,
            };
            let dirs = pipeline::cmd_predict(&weights, model_cfg.as_ref(), &args.cases, out)?;
            println!("wrote predictions for {} case(s) under {}", dirs.len(), out.display());
        }
        Command::Fuse { masks } => {
            let out = required_out(cli)?;
            let fused = pipeline::cmd_fuse(masks, out)?;
            println!("fused {} masks: {} lesion voxels -> {}", masks.len(), fused.lesion_count(), out.display());
        }
        Command::Evaluate(args) => {
            let out = required_out(cli)?;
            let report = pipeline::cmd_evaluate(&args.pred, &args.gt, out, args.summary.as_deref())?;
            print!("{}", report.to_text());
        }
        Command::Gradcheck(args) => {
            let mut opts = GradcheckOptions::default();
            if let Some(seed) = cli.seed {
                opts.seed = seed;
            }
            opts.fault = args.fault_case.clone().map(|case| Fault { case, delta: args.fault_delta });
            match pipeline::cmd_gradcheck(&opts) {
                Ok(report) => print!("{}", report.render()),
                Err(PipelineError::GradcheckFailed(report)) => {
                    print!("{}", report.render());
                    return Err(PipelineError::GradcheckFailed(report));
                }
                Err(e) => return Err(e),
            }
        }
        Command::Synth { cases } => {
            let cfg = run_config(cli)?;
            let n = cases.unwrap_or(cfg.synth_cases);
            let dirs = pipeline::cmd_synth(&cfg.synth, n, cfg.split_ratio, &cfg.out_dir)?;
            println!("wrote {} cases under {}", dirs.len(), cfg.out_dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
