//! Command-line front end. All logic lives in `sliceflow::commands`; this
//! binary only parses arguments and maps errors to stable exit codes:
//! 0 success, 2 input error, 3 training divergence, 4 shape mismatch.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sliceflow::commands::{self, BenchOpts, Method};
use sliceflow::Error;

#[derive(Parser)]
#[command(name = "sliceflow", version, about = "CT slice-interpolation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic liver phantoms as NIfTI image/label pairs.
    Phantom {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Gaussian noise level added to the rendered HU values.
        #[arg(long, default_value_t = 3.0)]
        noise: f32,
        /// Optional phantom description file used verbatim for case 0.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Train the interpolator on thin-slice triplets.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fine-tune a pretrained interpolator on thickness-degraded volumes.
    Finetune {
        #[arg(long)]
        data: PathBuf,
        /// Pretrained checkpoint (g_pre.ifck) with its .cfg sidecar.
        #[arg(long)]
        pretrained: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Slice-thickness degradation factor to train against.
        #[arg(long, default_value_t = 2)]
        factor: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Segmenter checkpoint for the attention loss; trained on the
        /// spot when omitted and the attention weight is non-zero.
        #[arg(long)]
        segmenter: Option<PathBuf>,
        /// Epochs for the on-the-spot attention segmenter.
        #[arg(long, default_value_t = commands::DEFAULT_SEG_EPOCHS)]
        seg_epochs: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Insert interpolated slices along z.
    Upsample {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, value_parser = parse_method)]
        method: Method,
        #[arg(long, default_value_t = 2)]
        factor: usize,
        /// Flow checkpoint; required for --method flow.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Score a predicted volume (or segmentation) against a reference.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// Label volume defining liver/lesion ROIs for masked metrics.
        #[arg(long)]
        seg: Option<PathBuf>,
        /// Treat both inputs as label volumes and report overlap metrics.
        #[arg(long)]
        labels: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full method x factor x ROI comparison matrix.
    Bench {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Degradation factors to fine-tune and score (repeatable).
        #[arg(long = "factor")]
        factors: Vec<usize>,
        /// Thickness-ladder factors for the degradation curve (repeatable).
        #[arg(long = "ladder")]
        ladder: Vec<usize>,
        /// Held-out evaluation cases taken from the end of the manifest.
        #[arg(long, default_value_t = 2)]
        holdout: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Epochs for the downstream/attention segmenter.
        #[arg(long, default_value_t = commands::DEFAULT_SEG_EPOCHS)]
        seg_epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn run(cli: Cli) -> sliceflow::Result<()> {
    match cli.command {
        Command::Phantom {
            out,
            count,
            seed,
            noise,
            spec,
        } => commands::cmd_phantom(&out, count, seed, noise, spec.as_deref()),
        Command::Pretrain {
            data,
            out,
            config,
            seed,
        } => commands::cmd_pretrain(&data, &out, config.as_deref(), seed),
        Command::Finetune {
            data,
            pretrained,
            out,
            factor,
            config,
            segmenter,
            seg_epochs,
            seed,
        } => commands::cmd_finetune(
            &data,
            &pretrained,
            &out,
            factor,
            config.as_deref(),
            segmenter.as_deref(),
            seg_epochs,
            seed,
        ),
        Command::Upsample {
            input,
            output,
            method,
            factor,
            model,
        } => commands::cmd_upsample(&input, &output, factor, method, model.as_deref()),
        Command::Eval {
            pred,
            reference,
            seg,
            labels,
            out,
        } => commands::cmd_eval(&pred, &reference, seg.as_deref(), labels, &out),
        Command::Bench {
            data,
            out,
            factors,
            ladder,
            holdout,
            config,
            seg_epochs,
            seed,
        } => {
            let defaults = BenchOpts::default();
            let opts = BenchOpts {
                factors: if factors.is_empty() {
                    defaults.factors
                } else {
                    factors
                },
                ladder: if ladder.is_empty() {
                    defaults.ladder
                } else {
                    ladder
                },
                holdout,
                config,
                seg_epochs,
                seed,
            };
            commands::cmd_bench(&data, &out, &opts).map(|_| ())
        }
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Diverged(_) => 3,
        Error::DimMismatch { .. } | Error::InvalidShape(_) | Error::CheckpointShape { .. } => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
