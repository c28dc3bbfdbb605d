//! `protoseg` binary: training, evaluation, rectification-quality
//! reporting, and synthetic dataset export. Exit codes: 0 success,
//! 2 configuration error, 3 data error, 4 numeric failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use protoseg::commands::{
    cmd_dataset_gen, cmd_eval, cmd_rectify_report, cmd_train, DatasetGenArgs, EvalArgs,
    RectifyReportArgs, TrainArgs,
};

#[derive(Debug, Parser)]
#[command(
    name = "protoseg",
    version,
    about = "Semi-supervised volumetric segmentation: prototype-rectified teacher-student training"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Train a model and write checkpoints plus metrics logs to a run
    /// directory.
    Train(TrainCli),
    /// Score a checkpoint on the validation split with sliding-window
    /// inference.
    Eval(EvalCli),
    /// Report pseudo-label reliability and accuracy before vs after
    /// rectification for each checkpoint of a run.
    RectifyReport(RectifyCli),
    /// Write the configured synthetic dataset to a directory.
    DatasetGen(DatasetGenCli),
}

#[derive(Debug, Args)]
struct TrainCli {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Run directory for logs and checkpoints (must not be in use).
    #[arg(long)]
    out: PathBuf,
    /// Override the training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Disable or swap a component: no-crln, no-cps, no-strongaug,
    /// agg-sum, rect-v1, rect-v2. May be repeated.
    #[arg(long)]
    ablate: Vec<String>,
    /// Prototypes per class.
    #[arg(long)]
    r: Option<usize>,
    /// Positive-centre blend weight in [0, 1].
    #[arg(long)]
    xi: Option<f64>,
    /// Iterations before pseudo-label rectification activates.
    #[arg(long)]
    s_iters: Option<u64>,
    /// Confidence threshold gating the unsupervised loss.
    #[arg(long)]
    tau: Option<f64>,
    /// Weak confidence threshold gating contrastive set membership.
    #[arg(long)]
    tau_w: Option<f64>,
    /// Resume from a checkpoint produced with the same config.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalCli {
    /// Checkpoint to evaluate (the teacher weights are used).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Evaluate on a dataset directory instead of the configured source.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Inference window, e.g. 16,16,16 (extents >= 8, divisible by 4).
    #[arg(long, value_parser = parse_triple)]
    window: Option<[usize; 3]>,
    /// Window stride, e.g. 8,8,8.
    #[arg(long, value_parser = parse_triple)]
    stride: Option<[usize; 3]>,
    /// Report surface distances in physical units instead of voxels.
    #[arg(long)]
    physical_spacing: bool,
    /// Where to write the JSON-lines records (default: next to the
    /// checkpoint).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RectifyCli {
    /// Run directory whose checkpoint-*.ckpt files are replayed in order.
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// A single checkpoint to report on.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dataset directory overriding the configured source.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Where to write the JSON-lines records.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Optional SVG plot of the curves.
    #[arg(long)]
    plot: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DatasetGenCli {
    /// Run configuration (TOML); the [dataset] section drives generation.
    #[arg(long)]
    config: PathBuf,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
}

fn parse_triple(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err("expected three comma-separated extents, e.g. 16,16,16".into());
    }
    let mut out = [0usize; 3];
    for (o, p) in out.iter_mut().zip(&parts) {
        *o = p.parse().map_err(|_| format!("'{p}' is not a valid extent"))?;
    }
    Ok(out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Train(a) => cmd_train(&TrainArgs {
            config: a.config,
            out: a.out,
            seed: a.seed,
            ablate: a.ablate,
            r: a.r,
            xi: a.xi,
            s_iters: a.s_iters,
            tau: a.tau,
            tau_w: a.tau_w,
            resume: a.resume,
        })
        .map(|s| {
            println!(
                "finished {} iterations; final checkpoint {}",
                s.iterations,
                s.final_checkpoint.display()
            );
        }),
        Cmd::Eval(a) => cmd_eval(&EvalArgs {
            checkpoint: a.checkpoint,
            data_dir: a.data_dir,
            window: a.window,
            stride: a.stride,
            physical_spacing: a.physical_spacing,
            out: a.out,
        })
        .map(|s| {
            println!("records written to {}", s.out_path.display());
        }),
        Cmd::RectifyReport(a) => cmd_rectify_report(&RectifyReportArgs {
            run_dir: a.run_dir,
            checkpoint: a.checkpoint,
            data_dir: a.data_dir,
            out: a.out,
            plot: a.plot,
        })
        .map(|_| ()),
        Cmd::DatasetGen(a) => cmd_dataset_gen(&DatasetGenArgs { config: a.config, out: a.out }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
