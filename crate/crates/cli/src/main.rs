//! `taps`: echo demos and simulator experiments.

mod echo;

use std::process::ExitCode;
use std::time::Duration;

use clap::{ArgAction, Parser, Subcommand, ValueEnum};
use taps_core::netsim::experiments::{
    reduction_pct, run_fct_experiment, run_hol_experiment, FctConfig, FctMode, HolConfig,
};
use taps_core::Error;

#[derive(Parser, Debug)]
#[command(name = "taps", version, about = "Transport services demos and experiments")]
struct Cli {
    /// Print the event trace to standard error.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Clone,
    Separate,
    Both,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Echo every received message back to its sender.
    EchoServer {
        #[arg(long, default_value_t = 5000)]
        port: u16,
        /// Run the demo on the simulator instead of loopback.
        #[arg(long)]
        sim: bool,
    },
    /// Send "FIVE!" and, on a clone, "HelloWorld"; print both replies.
    EchoClient {
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 5000)]
        port: u16,
        #[arg(long)]
        sim: bool,
    },
    /// Flow completion times of a long and a late short flow.
    FctBench {
        #[arg(long, default_value_t = 1_500_000)]
        long_bytes: u64,
        #[arg(long, default_value_t = 100_000)]
        short_bytes: u64,
        /// Seconds between the long and the short flow.
        #[arg(long, default_value_t = 1.0)]
        join_after: f64,
        /// Bottleneck rate in bit/s.
        #[arg(long, default_value_t = 5_000_000)]
        rate: u64,
        /// One-way propagation delay in milliseconds.
        #[arg(long, default_value_t = 30)]
        delay: u64,
        #[arg(long, value_enum, default_value_t = ModeArg::Both)]
        mode: ModeArg,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Bottleneck queue in packets (default: one bandwidth-delay product).
        #[arg(long)]
        queue: Option<usize>,
    },
    /// Delivery order of four chunks when the second one is lost once.
    HolDemo {
        #[arg(long, action = ArgAction::Set, default_value_t = true)]
        ordered: bool,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn exit_for(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    match e {
        Error::Config(_) => ExitCode::from(2),
        _ => ExitCode::from(1),
    }
}

fn fct(cli_mode: ModeArg, base: FctConfig) -> Result<(), Error> {
    let run = |mode| run_fct_experiment(FctConfig { mode, ..base });
    match cli_mode {
        ModeArg::Clone => print!("{}", run(FctMode::Clone)?),
        ModeArg::Separate => print!("{}", run(FctMode::Separate)?),
        ModeArg::Both => {
            let clone = run(FctMode::Clone)?;
            let separate = run(FctMode::Separate)?;
            print!("{clone}{separate}");
            println!("reduction_pct={:.2}", reduction_pct(&clone, &separate));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::EchoServer { port, sim } => {
            if sim {
                echo::run_sim(true, port, cli.verbose).map(|_| true)
            } else {
                echo::run_server(port, cli.verbose).map(|_| true)
            }
        }
        Command::EchoClient { host, port, sim } => {
            if sim {
                echo::run_sim(false, port, cli.verbose)
            } else {
                echo::run_client(&host, port, cli.verbose)
            }
        }
        Command::FctBench {
            long_bytes,
            short_bytes,
            join_after,
            rate,
            delay,
            mode,
            seed,
            queue,
        } => {
            if !(join_after.is_finite() && join_after >= 0.0) {
                return exit_for(&Error::Config("--join-after must be a non-negative number".into()));
            }
            let base = FctConfig {
                long_bytes,
                short_bytes,
                join_after: Duration::from_secs_f64(join_after),
                rate_bps: rate,
                delay_ms: delay,
                mode: FctMode::Clone,
                seed,
                queue,
            };
            if cli.verbose {
                eprintln!("{base:?}");
            }
            fct(mode, base).map(|_| true)
        }
        Command::HolDemo { ordered, seed } => run_hol_experiment(HolConfig::new(ordered, seed)).map(|r| {
            print!("{r}");
            true
        }),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => exit_for(&e),
    }
}
