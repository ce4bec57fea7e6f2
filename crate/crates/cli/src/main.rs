mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{parse_assignment, parse_on_off};

#[derive(Parser)]
#[command(name = "beamtrack", version, about = "Vision-aided mmWave beam tracking on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
pub struct Common {
    /// key=value config file
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Worker threads (1 gives bit-exact runs)
    #[arg(long, value_name = "N")]
    threads: Option<usize>,
    /// Residual attention block
    #[arg(long, value_name = "on|off", value_parser = parse_on_off)]
    mha: Option<String>,
    /// Extra config override, repeatable
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_assignment)]
    set: Vec<(String, String)>,
}

impl Common {
    fn overrides(&self) -> Vec<(String, String)> {
        let mut out = self.set.clone();
        if let Some(s) = self.seed {
            out.push(("seed".into(), s.to_string()));
        }
        if let Some(t) = self.threads {
            out.push(("threads".into(), t.to_string()));
        }
        if let Some(m) = &self.mha {
            out.push(("mha".into(), m.clone()));
        }
        out
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scene and write a BTDS dataset
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH", default_value = "dataset.btds")]
        out: PathBuf,
    },
    /// Train on a dataset and write the best checkpoint plus a per-epoch report
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        data: PathBuf,
        /// Checkpoint to write
        #[arg(long, value_name = "PATH", default_value = "model.btmd")]
        out: PathBuf,
        #[arg(long, value_name = "PATH", default_value = "train_report.csv")]
        report: PathBuf,
        #[arg(long, value_name = "N")]
        epochs: Option<usize>,
    },
    /// Score a checkpoint on a dataset
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        data: PathBuf,
        #[arg(long, value_name = "PATH", required_unless_present = "probe_oracle")]
        model: Option<PathBuf>,
        #[arg(long, value_name = "PATH", default_value = "report.csv")]
        report: PathBuf,
        /// Score the exhaustive-search labels themselves
        #[arg(long)]
        probe_oracle: bool,
    },
    /// Finite-difference check of the tiny network's gradients
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, hide = true, value_name = "PARAM")]
        corrupt_grad: Option<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen { common, out } => commands::gen(&common, &out),
        Command::Train {
            common,
            data,
            out,
            report,
            epochs,
        } => commands::train(&common, &data, &out, &report, epochs),
        Command::Eval {
            common,
            data,
            model,
            report,
            probe_oracle,
        } => commands::eval(&common, &data, model.as_deref(), &report, probe_oracle),
        Command::Gradcheck { common, corrupt_grad } => commands::gradcheck(&common, corrupt_grad.as_deref()),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
