use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use attconv_cli::commands::GRADCHECK_STEP;
use attconv_cli::{
    cmd_attmap, cmd_eval, cmd_gradcheck, cmd_params, cmd_synth, cmd_train, AttmapArgs, CliError, EvalArgs,
    GradcheckArgs, MapFormat, ParamsArgs, SynthArgs, SynthTask, TrainArgs,
};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "attconv", version, about = "Attentive convolution text classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Tsv,
    Svg,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Nonlocal,
    Lookup,
    Separable,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint; metrics go to stdout as JSONL.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides ATTCONV_SEED and the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Pretrained vectors (word2vec text format).
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
    },
    /// Evaluate a checkpoint; prints accuracy and confusion counts as JSON.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Evaluation threads.
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1e-6)]
        tolerance: f64,
        #[arg(long, default_value_t = GRADCHECK_STEP)]
        step: f64,
    },
    /// Export attention matrices as TSV tables or SVG heatmaps.
    Attmap {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "tsv")]
        format: FormatArg,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the parameter table of a config or checkpoint.
    Params {
        #[arg(long, conflicts_with = "model", required_unless_present = "model")]
        config: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Vocabulary size assumed with --config.
        #[arg(long)]
        vocab_size: Option<usize>,
    },
    /// Write a seeded synthetic dataset as JSONL.
    Synth {
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        seq_len: usize,
        #[arg(long, default_value_t = 30)]
        vocab_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cmd: Command, out: &mut dyn Write) -> Result<(), CliError> {
    match cmd {
        Command::Train {
            config,
            train,
            dev,
            out: path,
            seed,
            embeddings,
            epochs,
            learning_rate,
        } => cmd_train(
            &TrainArgs {
                config,
                train,
                dev,
                out: path,
                seed,
                embeddings,
                epochs,
                learning_rate,
            },
            out,
        ),
        Command::Eval { model, data, workers } => cmd_eval(&EvalArgs { model, data, workers }, out),
        Command::Gradcheck {
            config,
            seed,
            tolerance,
            step,
        } => cmd_gradcheck(
            &GradcheckArgs {
                config,
                seed,
                tolerance,
                step,
            },
            out,
        ),
        Command::Attmap {
            model,
            input,
            format,
            out: dir,
        } => {
            let format = match format {
                FormatArg::Tsv => MapFormat::Tsv,
                FormatArg::Svg => MapFormat::Svg,
            };
            cmd_attmap(
                &AttmapArgs {
                    model,
                    input,
                    format,
                    out: dir,
                },
                out,
            )
        }
        Command::Params {
            config,
            model,
            vocab_size,
        } => cmd_params(
            &ParamsArgs {
                config,
                model,
                vocab_size,
            },
            out,
        ),
        Command::Synth {
            task,
            n,
            seed,
            seq_len,
            vocab_size,
            out: path,
        } => {
            let task = match task {
                TaskArg::Nonlocal => SynthTask::Nonlocal,
                TaskArg::Lookup => SynthTask::Lookup,
                TaskArg::Separable => SynthTask::Separable,
            };
            cmd_synth(
                &SynthArgs {
                    task,
                    n,
                    seed,
                    seq_len,
                    vocab_size,
                    out: path,
                },
                out,
            )
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let result = run(cli.command, &mut out);
    let _ = out.flush();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
