use std::path::PathBuf;

use anyhow::{Context, Result};
use apu_core::format::read_compressed;
use apu_core::mapper::{AcceleratorConfig, MappedProgram};
use apu_core::simulator::{simulate, PeMode};

#[derive(clap::Args)]
pub struct Args {
    /// Program file written by `apu map --out`.
    #[arg(long)]
    pub program: PathBuf,
    /// Input tensor JSON.
    #[arg(long)]
    pub input: PathBuf,
    /// Processing mode: spatial | temporal.
    #[arg(long, default_value = "spatial")]
    pub mode: String,
    /// Report JSON output (stdout summary otherwise).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Output activation tensor JSON.
    #[arg(long)]
    pub activations_out: Option<PathBuf>,
    /// Optional phase-level trace CSV (cycle, unit, event).
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(serde::Deserialize)]
struct ProgramFile {
    compressed: String,
    config: AcceleratorConfig,
    program: MappedProgram,
}

pub fn run(args: Args) -> Result<()> {
    let text = std::fs::read_to_string(&args.program)
        .with_context(|| format!("failed to read program `{}`", args.program.display()))?;
    let pf: ProgramFile = serde_json::from_str(&text)
        .with_context(|| format!("failed to parse program `{}`", args.program.display()))?;
    // The compressed path is stored relative to where map ran; also try
    // resolving next to the program file.
    let cm_path = PathBuf::from(&pf.compressed);
    let cm = match read_compressed(&cm_path) {
        Ok(cm) => cm,
        Err(first_err) => {
            let sibling = args
                .program
                .parent()
                .unwrap_or_else(|| std::path::Path::new("."))
                .join(cm_path.file_name().unwrap_or_default());
            read_compressed(&sibling).map_err(|_| first_err)?
        }
    };
    let input = super::load_input(&args.input)?;
    let mode: PeMode = args.mode.parse()?;
    let (output, report) = simulate(&pf.program, &cm, &input, &pf.config, mode)?;

    if let Some(trace) = &args.trace {
        let mut text = String::from("cycle,unit,event\n");
        let mut cycle = 0u64;
        for p in &report.phases {
            text.push_str(&format!(
                "{cycle},{:?},layer{} {} cycles\n",
                p.kind, p.layer, p.cycles
            ));
            cycle += p.cycles;
        }
        std::fs::write(trace, text)?;
    }

    println!(
        "simulated `{}` ({mode}): {} cycles total ({} route, {} compute, {} reload, {} host), \
         compute utilization {:.4}, {} normalized ops",
        pf.program.model_name,
        report.total_cycles,
        report.route_cycles,
        report.compute_cycles,
        report.reload_cycles,
        report.host_cycles,
        report.compute_utilization,
        report.normalized_ops,
        mode = mode,
    );
    if let Some(out) = &args.out {
        super::write_json(&report, out)?;
        println!("report -> {}", out.display());
    }
    if let Some(acts) = &args.activations_out {
        super::write_json(&output, acts)?;
    }
    Ok(())
}
