//! `fetcm`: ingest click logs, generate synthetic ones, train the click
//! model, evaluate checkpoints, and validate gradients.
//!
//! Exit codes are stable for scripting: 0 success, 2 input or configuration
//! error, 3 training failure, 4 diagnostic failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fetcm_core::Error;

use config::{RunConfig, KEY_HELP};

fn keys_help() -> String {
    let mut out = String::from("Config keys (also accepted via --set KEY=VALUE):\n");
    for (key, desc) in KEY_HELP {
        out.push_str(&format!("  {:<22}{}\n", key, desc));
    }
    out
}

#[derive(Parser)]
#[command(
    name = "fetcm",
    version,
    about = "Click-prediction toolkit: frequency-filtered transformer + recurrent click model",
    after_help = keys_help()
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Configuration file of `key = value` lines; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master random seed (config key: seed)
    #[arg(long)]
    seed: Option<u64>,
    /// Main output: converted/generated log, checkpoint, report CSV, or a
    /// copy of the gradcheck table, depending on the command
    #[arg(long)]
    out: Option<PathBuf>,
    /// Extra key=value settings applied after the config file
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Read a click log and rewrite it in the canonical line-JSON form
    Ingest {
        #[command(flatten)]
        common: Common,
        /// Log file to read (config key: input_path)
        #[arg(long)]
        input: Option<PathBuf>,
        /// Input format: canonical or yandex (config key: format)
        #[arg(long)]
        format: Option<String>,
    },
    /// Generate position-model sessions with a known ground truth
    Synth {
        #[command(flatten)]
        common: Common,
        /// Number of sessions (config key: n_sessions)
        #[arg(long)]
        sessions: Option<usize>,
        /// Ground-truth sidecar CSV (config key: truth_path)
        #[arg(long)]
        truth_out: Option<PathBuf>,
    },
    /// Fit the model; writes the best checkpoint and an epoch log
    Train {
        #[command(flatten)]
        common: Common,
        /// Single log split by split_ratios (config key: data_path)
        #[arg(long)]
        data: Option<PathBuf>,
        /// Explicit training split (config key: train_path)
        #[arg(long)]
        train: Option<PathBuf>,
        /// Explicit validation split (config key: valid_path)
        #[arg(long)]
        valid: Option<PathBuf>,
        /// Epoch log CSV (config key: epoch_log_path)
        #[arg(long)]
        log_out: Option<PathBuf>,
    },
    /// Score a test split with a trained checkpoint
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to load (config key: checkpoint_path)
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Explicit test split (config key: test_path)
        #[arg(long)]
        test: Option<PathBuf>,
        /// Single log split by split_ratios (config key: data_path)
        #[arg(long)]
        data: Option<PathBuf>,
        /// Also report the per-rank click-rate reference
        #[arg(long)]
        baseline: bool,
        /// Ground-truth sidecar for oracle perplexity (config key: truth_path)
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Compare analytic gradients against finite differences
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
}

impl Cmd {
    fn common(&self) -> &Common {
        match self {
            Cmd::Ingest { common, .. }
            | Cmd::Synth { common, .. }
            | Cmd::Train { common, .. }
            | Cmd::Eval { common, .. }
            | Cmd::Gradcheck { common } => common,
        }
    }
}

/// Defaults, then the config file, then --set pairs, then dedicated flags.
fn build_config(cmd: &Cmd) -> Result<RunConfig, Error> {
    let common = cmd.common();
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {}", path.display(), e)))?;
        cfg.apply_file(&text)?;
    }
    for pair in &common.set {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set wants KEY=VALUE, got `{}`", pair)))?;
        cfg.apply(key.trim(), value.trim())?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    match cmd {
        Cmd::Ingest { input, format, .. } => {
            if let Some(p) = input {
                cfg.input_path = Some(p.clone());
            }
            if let Some(f) = format {
                cfg.apply("format", f)?;
            }
            if let Some(p) = &common.out {
                cfg.output_path = Some(p.clone());
            }
        }
        Cmd::Synth { sessions, truth_out, .. } => {
            if let Some(n) = sessions {
                cfg.n_sessions = *n;
            }
            if let Some(p) = truth_out {
                cfg.truth_path = Some(p.clone());
            }
            if let Some(p) = &common.out {
                cfg.output_path = Some(p.clone());
            }
        }
        Cmd::Train { data, train, valid, log_out, .. } => {
            if let Some(p) = data {
                cfg.data_path = Some(p.clone());
            }
            if let Some(p) = train {
                cfg.train_path = Some(p.clone());
            }
            if let Some(p) = valid {
                cfg.valid_path = Some(p.clone());
            }
            if let Some(p) = log_out {
                cfg.epoch_log_path = Some(p.clone());
            }
            if let Some(p) = &common.out {
                cfg.checkpoint_path = Some(p.clone());
            }
        }
        Cmd::Eval { checkpoint, test, data, baseline, truth, .. } => {
            if let Some(p) = checkpoint {
                cfg.checkpoint_path = Some(p.clone());
            }
            if let Some(p) = test {
                cfg.test_path = Some(p.clone());
            }
            if let Some(p) = data {
                cfg.data_path = Some(p.clone());
            }
            if *baseline {
                cfg.baseline = true;
            }
            if let Some(p) = truth {
                cfg.truth_path = Some(p.clone());
            }
            if let Some(p) = &common.out {
                cfg.report_path = Some(p.clone());
            }
        }
        Cmd::Gradcheck { .. } => {
            if let Some(p) = &common.out {
                cfg.output_path = Some(p.clone());
            }
        }
    }
    cfg.finish();
    Ok(cfg)
}

fn exit_for(e: &Error) -> u8 {
    match e {
        Error::Training(_) => 3,
        _ => 2,
    }
}

fn run(cli: Cli) -> u8 {
    let cfg = match build_config(&cli.cmd) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {}", e);
            return 2;
        }
    };
    let result = match &cli.cmd {
        Cmd::Ingest { .. } => commands::cmd_ingest(&cfg),
        Cmd::Synth { .. } => commands::cmd_synth(&cfg),
        Cmd::Train { .. } => commands::cmd_train(&cfg),
        Cmd::Eval { .. } => commands::cmd_eval(&cfg),
        Cmd::Gradcheck { .. } => {
            return match commands::cmd_gradcheck(&cfg) {
                Ok(true) => 0,
                Ok(false) => 4,
                Err(e) => {
                    eprintln!("error: {}", e);
                    4
                }
            };
        }
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e);
            exit_for(&e)
        }
    }
}

fn main() -> ExitCode {
    ExitCode::from(run(Cli::parse()))
}
