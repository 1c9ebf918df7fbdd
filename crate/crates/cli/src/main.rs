use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod workflows;

/// Decoder-only speech recognition with CTC-compressed prompts.
#[derive(Parser, Debug)]
#[command(name = "promptasr", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Seed for data generation, initialization and batching.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// `key = value` configuration file; unset keys keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic paired corpus, a text-only pool and a test set.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train an ASR model on a generated data directory.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train an external language model on the data directory's text.
    TrainLm {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Decode a manifest with beam search.
    Decode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// External LM checkpoint for shallow fusion.
        #[arg(long)]
        lm: Option<PathBuf>,
        #[arg(long)]
        ctc_weight: Option<f64>,
        #[arg(long)]
        lm_weight: Option<f64>,
        #[arg(long)]
        beam: Option<usize>,
    },
    /// Score hypotheses against references.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Manifest or `utt_id<TAB>text` file.
        #[arg(long)]
        reference: PathBuf,
        /// Decode output or `utt_id<TAB>text` file.
        #[arg(long)]
        hyp: PathBuf,
    },
    /// Compare decoder cost with compressed and full-length prompts.
    Profile {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Train and evaluate the downsample, average and remove variants.
    CompareCompression {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { common } => workflows::gen_data(&common),
        Command::Train { common, data } => workflows::train(&common, &data),
        Command::TrainLm { common, data } => workflows::train_lm(&common, &data),
        Command::Decode {
            common,
            model,
            manifest,
            lm,
            ctc_weight,
            lm_weight,
            beam,
        } => workflows::decode(
            &common,
            &workflows::DecodeArgs {
                model,
                manifest,
                lm,
                ctc_weight,
                lm_weight,
                beam,
            },
        ),
        Command::Eval { common, reference, hyp } => workflows::eval(&common, &reference, &hyp),
        Command::Profile { common, model, manifest } => workflows::profile(&common, &model, &manifest),
        Command::CompareCompression { common, data } => workflows::compare_compression(&common, &data),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
