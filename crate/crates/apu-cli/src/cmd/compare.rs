use std::path::PathBuf;

use anyhow::Result;
use apu_core::baseline::{compare_manifest, BaselineKind, BaselineSpec};
use apu_core::format::load_shape_manifest;

use super::OutFormat;

#[derive(clap::Args)]
pub struct Args {
    /// Layer-shape manifest to compare.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Accelerator config JSON (or `flagship`).
    #[arg(long, default_value = "flagship")]
    pub config: String,
    /// Baseline cycle model: dense-sequential | unstructured-sparse.
    #[arg(long, default_value = "unstructured-sparse")]
    pub baseline: String,
    /// Dense baseline MACs per cycle.
    #[arg(long, default_value_t = 1)]
    pub macs_per_cycle: u64,
    /// Unstructured baseline cycles per nonzero MAC.
    #[arg(long, default_value_t = 3.0)]
    pub penalty: f64,
    /// Unstructured baseline pointer bits per nonzero weight.
    #[arg(long, default_value_t = 16)]
    pub pointer_bits: u32,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "json")]
    pub format: OutFormat,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(args: Args) -> Result<()> {
    let manifest = load_shape_manifest(&args.manifest)?;
    let cfg = super::load_config(&args.config)?;
    let baseline = BaselineSpec {
        kind: args.baseline.parse::<BaselineKind>()?,
        macs_per_cycle: args.macs_per_cycle,
        random_access_penalty: args.penalty,
        pointer_overhead_bits: args.pointer_bits,
    };
    let report = compare_manifest(&manifest, &cfg, &baseline, args.seed)?;

    match args.format {
        OutFormat::Json => {
            let text = serde_json::to_string_pretty(&report)?;
            match &args.out {
                Some(out) => std::fs::write(out, text)?,
                None => println!("{text}"),
            }
        }
        OutFormat::Csv => {
            let mut text = String::from(
                "name,kind,folds,dense_macs,nnz_macs,apu_cycles,baseline_cycles,speedup\n",
            );
            for l in &report.layers {
                text.push_str(&format!(
                    "{},{},{},{},{},{},{},{:.3}\n",
                    l.name,
                    l.kind,
                    l.folds,
                    l.dense_macs,
                    l.nnz_macs,
                    l.apu_cycles,
                    l.baseline_cycles,
                    l.speedup
                ));
            }
            text.push_str(&format!(
                "end-to-end,,,,,,,{:.3}\n",
                report.end_to_end_speedup
            ));
            match &args.out {
                Some(out) => std::fs::write(out, text)?,
                None => print!("{text}"),
            }
        }
    }
    Ok(())
}
