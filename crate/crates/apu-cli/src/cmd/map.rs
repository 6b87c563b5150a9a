use std::path::PathBuf;

use anyhow::{bail, Result};
use apu_core::format::{load_shape_manifest, read_compressed};
use apu_core::mapper::{dump_program, map_model, map_shape_manifest};

use super::OutFormat;

#[derive(clap::Args)]
pub struct Args {
    /// Compressed model (.apu) to map functionally.
    #[arg(long, conflicts_with = "manifest", alias = "compressed")]
    pub model: Option<PathBuf>,
    /// Layer-shape manifest to map analytically (shapes only).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Accelerator config JSON (or `flagship`).
    #[arg(long, default_value = "flagship")]
    pub config: String,
    /// Print the phase listing.
    #[arg(long)]
    pub dump_program: bool,
    /// Write the mapped program / layer report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed for shape-manifest mask generation.
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "json")]
    pub format: OutFormat,
}

pub fn run(args: Args) -> Result<()> {
    let cfg = super::load_config(&args.config)?;
    match (&args.model, &args.manifest) {
        (Some(path), None) => {
            let cm = read_compressed(path)?;
            let program = map_model(&cm, &cfg)?;
            if args.dump_program {
                print!("{}", dump_program(&program));
            } else {
                println!(
                    "mapped `{}`: {} phases over {} PEs, {} select bits",
                    program.model_name,
                    program.phases.len(),
                    program.num_pes,
                    program.select_bits()
                );
            }
            if let Some(out) = &args.out {
                #[derive(serde::Serialize)]
                struct ProgramFile<'a> {
                    compressed: String,
                    config: &'a apu_core::mapper::AcceleratorConfig,
                    program: &'a apu_core::mapper::MappedProgram,
                }
                super::write_json(
                    &ProgramFile {
                        compressed: path.display().to_string(),
                        config: &cfg,
                        program: &program,
                    },
                    out,
                )?;
                println!("program -> {}", out.display());
            }
        }
        (None, Some(path)) => {
            let manifest = load_shape_manifest(path)?;
            let reports = map_shape_manifest(&manifest, &cfg, args.seed)?;
            match args.format {
                OutFormat::Json => {
                    let text = serde_json::to_string_pretty(&reports)?;
                    match &args.out {
                        Some(out) => std::fs::write(out, text)?,
                        None => println!("{text}"),
                    }
                }
                OutFormat::Csv => {
                    let mut text = String::from(
                        "name,kind,case,folds,jobs,route_cycles,compute_cycles,reload_cycles,host_cycles,total_cycles,utilization\n",
                    );
                    for r in &reports {
                        text.push_str(&format!(
                            "{},{},{},{},{},{},{},{},{},{},{:.6}\n",
                            r.name,
                            r.kind,
                            r.conv_case.map(|c| format!("{c:?}")).unwrap_or_default(),
                            r.folds,
                            r.jobs,
                            r.route_cycles,
                            r.compute_cycles,
                            r.reload_cycles,
                            r.host_cycles,
                            r.total_cycles,
                            r.utilization
                        ));
                    }
                    match &args.out {
                        Some(out) => std::fs::write(out, text)?,
                        None => print!("{text}"),
                    }
                }
            }
        }
        _ => bail!("pass exactly one of --model or --manifest"),
    }
    Ok(())
}
