//! `prefdiff`: runs the toy preference-optimization experiments.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 bad arguments or config.
//! Failures print one line to stderr:
//! `error: kind=<kind> [field=<key>] msg="<text>" [log=<path>]`.

mod commands;
mod report;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use prefdiff_core::Error;

#[derive(Parser, Debug)]
#[command(name = "prefdiff", version, about = "Preference optimization on toy diffusion models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for every random draw of the run.
    #[arg(long)]
    seed: u64,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the ε-prediction network on the toy target.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Sample preference pairs from a pretrained network.
    GenPairs {
        #[command(flatten)]
        common: Common,
        /// Network to sample from; pretrained in place when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Winners from the target modes instead of the network.
        #[arg(long)]
        unlike: bool,
        /// Overrides `pairs.n`.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Preference fine-tuning against a frozen reference.
    Align {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        method: MethodArgs,
        /// Reference network; pretrained in place when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Pairs CSV; generated from the reference when omitted.
        #[arg(long)]
        pairs: Option<PathBuf>,
    },
    /// Rounds of on-policy pair generation and alignment.
    Iterate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        method: MethodArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Weight-curve or density diagnostics of a network.
    Diagnose {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        what: Diagnostic,
        /// Network to inspect; pretrained in place when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Reference for the density margin; defaults to the checkpoint itself.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Pairs CSV; winners feed the weight curve, both sides the density.
        #[arg(long)]
        pairs: Option<PathBuf>,
    },
    /// Sample a flow model through its SDE with Euler–Maruyama.
    SdeSample {
        #[command(flatten)]
        common: Common,
        /// Overrides `sde.epsilon`.
        #[arg(long)]
        epsilon: Option<f64>,
    },
    /// Summary table and SVG plots for an existing run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

#[derive(Args, Debug, Clone)]
struct MethodArgs {
    /// Overrides the config's `method`.
    #[arg(long)]
    method: Option<String>,
    /// Overrides `loss.beta`.
    #[arg(long)]
    beta: Option<f64>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Diagnostic {
    WeightCurve,
    Density,
}

/// A failure ready to print.
#[derive(Debug)]
pub struct Failure {
    code: u8,
    kind: &'static str,
    field: Option<String>,
    msg: String,
    log: Option<PathBuf>,
}

impl Failure {
    fn usage(msg: impl Into<String>) -> Self {
        Self {
            code: 2,
            kind: "usage",
            field: None,
            msg: msg.into(),
            log: None,
        }
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        Self {
            code: 1,
            kind: "runtime",
            field: None,
            msg: msg.into(),
            log: None,
        }
    }

    pub fn with_log(mut self, log: PathBuf) -> Self {
        if self.code == 1 {
            self.log = Some(log);
        }
        self
    }

    fn line(&self) -> String {
        let mut s = format!("error: kind={}", self.kind);
        if let Some(f) = &self.field {
            s += &format!(" field={f}");
        }
        let msg = self.msg.replace(['\n', '\r'], " ").replace('"', "'");
        s += &format!(" msg=\"{}\"", msg.trim());
        if let Some(l) = &self.log {
            s += &format!(" log={}", l.display());
        }
        s
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { field, message } => Self {
                code: 2,
                kind: "config",
                field: Some(field),
                msg: message,
                log: None,
            },
            Error::Io(ref io) => Self {
                code: 1,
                kind: "io",
                field: None,
                msg: io.to_string(),
                log: None,
            },
            Error::Diverged { .. } => Self {
                code: 1,
                kind: "diverged",
                field: None,
                msg: e.to_string(),
                log: None,
            },
            other => Self::runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Pretrain { common } => commands::pretrain(&common),
        Command::GenPairs {
            common,
            checkpoint,
            unlike,
            n,
        } => commands::gen_pairs(&common, checkpoint.as_deref(), unlike, n),
        Command::Align {
            common,
            method,
            checkpoint,
            pairs,
        } => commands::align(&common, &method, checkpoint.as_deref(), pairs.as_deref()),
        Command::Iterate {
            common,
            method,
            checkpoint,
        } => commands::iterate(&common, &method, checkpoint.as_deref()),
        Command::Diagnose {
            common,
            what,
            checkpoint,
            reference,
            pairs,
        } => commands::diagnose(&common, what, checkpoint.as_deref(), reference.as_deref(), pairs.as_deref()),
        Command::SdeSample { common, epsilon } => commands::sde_sample(&common, epsilon),
        Command::Report { run } => report::report(&run),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let msg: Vec<&str> = text
                .lines()
                .map(str::trim)
                .take_while(|l| !l.starts_with("Usage:"))
                .filter(|l| !l.is_empty())
                .collect();
            eprintln!("{}", Failure::usage(msg.join(" ").trim_start_matches("error: ")).line());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.line());
            ExitCode::from(f.code)
        }
    }
}
