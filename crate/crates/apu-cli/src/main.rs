//! `apu` — compiler and simulator front end for the structured-sparse
//! accelerator toolchain.
//!
//! Exit codes: 0 success, 2 usage/input error, 3 internal assertion.
//! Set `APU_LOG=1` for progress chatter on stderr.

mod cmd;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "apu",
    version,
    about = "Compress, schedule, map, simulate, and price structured-sparse DNN inference"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compress a model: mask, pack, quantize, calibrate.
    Compress(cmd::compress::Args),
    /// Build and dump the static routing schedule for a compressed model.
    Schedule(cmd::schedule::Args),
    /// Map a compressed model (or a layer-shape manifest) onto the PE array.
    Map(cmd::map::Args),
    /// Execute a mapped program cycle- and bit-accurately.
    Simulate(cmd::simulate::Args),
    /// Evaluate the analytic energy/area/throughput model.
    Cost(cmd::cost::Args),
    /// Run a design-space sweep to CSV.
    Sweep(cmd::sweep::Args),
    /// Compare APU cycles against a baseline cycle model.
    Compare(cmd::compare::Args),
    /// Run compress -> schedule -> map -> simulate -> cost end to end.
    Pipeline(cmd::pipeline::Args),
    /// Materialize a bundled model, dataset, or manifest.
    Gen(cmd::gen::Args),
}

pub(crate) fn log(msg: impl AsRef<str>) {
    if std::env::var_os("APU_LOG").is_some_and(|v| !v.is_empty()) {
        eprintln!("[apu] {}", msg.as_ref());
    }
}

fn run() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Compress(a) => cmd::compress::run(a),
        Command::Schedule(a) => cmd::schedule::run(a),
        Command::Map(a) => cmd::map::run(a),
        Command::Simulate(a) => cmd::simulate::run(a),
        Command::Cost(a) => cmd::cost::run(a),
        Command::Sweep(a) => cmd::sweep::run(a),
        Command::Compare(a) => cmd::compare::run(a),
        Command::Pipeline(a) => cmd::pipeline::run(a),
        Command::Gen(a) => cmd::gen::run(a),
    }
}

fn main() -> ExitCode {
    match std::panic::catch_unwind(run) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(err)) => {
            eprintln!("error: {err:#}");
            let internal = err
                .downcast_ref::<apu_core::Error>()
                .is_some_and(|e| matches!(e, apu_core::Error::SimFault { .. }));
            if internal {
                ExitCode::from(3)
            } else {
                ExitCode::from(2)
            }
        }
        Err(_) => {
            eprintln!("error: internal assertion failure");
            ExitCode::from(3)
        }
    }
}
