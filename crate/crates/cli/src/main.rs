//! `versa`: synthesize a corpus, train the tokenizer and the two generator
//! stages, build the pose bank, generate, evaluate and render.

mod commands;
mod layout;
mod render;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "versa",
    version,
    about = "Audio- and text-conditioned motion generation"
)]
pub struct Cli {
    /// JSON run config; missing fields take the built-in defaults.
    #[arg(short, long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides both the config seed and VERSA_SEED.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write the synthetic corpus and its split manifest.
    DataSynth {
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
    /// Run one training stage; stages must run in order vqvae, text, audio.
    Train {
        stage: TrainStage,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long, default_value = "runs/default")]
        ckpt: PathBuf,
    },
    /// Build the token-to-pose bank from the training split.
    BankBuild {
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long, default_value = "runs/default")]
        ckpt: PathBuf,
    },
    /// Audio (and optional prompt) to tokens, motion and 2D poses.
    Generate {
        #[arg(long)]
        audio: PathBuf,
        #[arg(long)]
        text: Option<String>,
        /// Sample categorically at this temperature instead of greedily.
        #[arg(long)]
        temperature: Option<f32>,
        /// Retarget the poses onto this skeleton (JSON bone lengths and anchor).
        #[arg(long)]
        target: Option<PathBuf>,
        #[arg(long, default_value = "runs/default")]
        ckpt: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Token file to a 2D pose file through the bank.
    Translate {
        #[arg(long)]
        tokens: PathBuf,
        #[arg(long)]
        target: Option<PathBuf>,
        #[arg(long, default_value = "runs/default")]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the evaluation protocol on a split and write a JSON report.
    Evaluate {
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long, default_value = "runs/default")]
        ckpt: PathBuf,
        #[arg(long, default_value = versa_core::metrics::PROTOCOL_VERSION)]
        protocol: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// One SVG stick figure per frame of a pose or motion file.
    Render {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainStage {
    Vqvae,
    Text,
    Audio,
}

fn error_line(e: &anyhow::Error) -> String {
    let code = e
        .chain()
        .find_map(|c| c.downcast_ref::<versa_core::Error>())
        .map_or("E_CLI", |c| c.code());
    let msg = format!("{e:#}").replace('\n', " ");
    format!("error[{code}]: {msg}")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            let first = msg
                .lines()
                .next()
                .unwrap_or("bad arguments")
                .trim_start_matches("error: ");
            eprintln!("error[E_USAGE]: {first}");
            return ExitCode::from(2);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::FAILURE
        }
    }
}
