use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use neardgd::cli::{self, PlotCommand, RunOptions, VerifyOptions};

#[derive(Parser)]
#[command(name = "neardgd", version, about = "Nested decentralized gradient simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured sweep and export trajectory CSVs.
    Run {
        /// Config file, or `preset:<name>`.
        #[arg(long)]
        config: String,
        /// Output directory (overrides the config and NEARDGD_OUT_DIR).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads for the sweep.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Check measured trajectories against the theoretical bounds.
    Verify {
        #[arg(long)]
        config: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw rel_error plots from exported records.
    Plot {
        /// Directory containing manifest.csv.
        #[arg(long)]
        records: PathBuf,
        #[arg(long, default_value = "iters,grads,comms,cost")]
        axes: String,
        #[arg(long, default_value_t = 500)]
        marker_every: usize,
        /// Linear instead of logarithmic error axis.
        #[arg(long)]
        linear_y: bool,
        /// Where to write plots (default: the records directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let args = match Cli::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { cli::EXIT_CONFIG as u8 } else { 0 });
        }
    };
    let mut stdout = std::io::stdout();
    let result = match args.command {
        Command::Run { config, out, jobs } => cli::cmd_run(&RunOptions { config, out, jobs }, &mut stdout),
        Command::Verify { config, out } => cli::cmd_verify(&VerifyOptions { config, out }, &mut stdout),
        Command::Plot {
            records,
            axes,
            marker_every,
            linear_y,
            out,
        } => cli::cmd_plot(
            &PlotCommand {
                records,
                axes,
                marker_every,
                log_y: !linear_y,
                out,
            },
            &mut stdout,
        ),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("neardgd: {f}");
            ExitCode::from(f.exit_code() as u8)
        }
    }
}
