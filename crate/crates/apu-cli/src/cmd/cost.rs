use std::path::PathBuf;

use anyhow::Result;
use apu_core::costmodel::{pe_cost, throughput, CostParams, PeMode};

use super::OutFormat;

#[derive(clap::Args)]
pub struct Args {
    /// Accelerator config JSON (or `flagship`).
    #[arg(long, default_value = "flagship")]
    pub config: String,
    /// Processing mode: spatial | temporal.
    #[arg(long, default_value = "spatial")]
    pub mode: String,
    /// Calibration wattage for TOPS/W.
    #[arg(long, default_value_t = 0.44)]
    pub watts: f64,
    #[arg(long, value_enum, default_value = "json")]
    pub format: OutFormat,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(args: Args) -> Result<()> {
    let cfg = super::load_config(&args.config)?;
    let mode: PeMode = args.mode.parse()?;
    let params = CostParams::default();
    let report = pe_cost(cfg.pe_rows, cfg.pe_cols, cfg.weight_bits, mode, &params);
    let tput = throughput(
        cfg.pe_cols,
        cfg.weight_bits,
        cfg.clock_hz,
        cfg.num_pes,
        args.watts,
    )?;

    #[derive(serde::Serialize)]
    struct Full<'a> {
        pe: &'a apu_core::costmodel::CostReport,
        throughput: &'a apu_core::costmodel::ThroughputReport,
        watts: f64,
    }
    match args.format {
        OutFormat::Json => {
            let text = serde_json::to_string_pretty(&Full {
                pe: &report,
                throughput: &tput,
                watts: args.watts,
            })?;
            match &args.out {
                Some(out) => std::fs::write(out, text)?,
                None => println!("{text}"),
            }
        }
        OutFormat::Csv => {
            let e = &report.energy;
            let text = format!(
                "metric,value\nenergy_total,{}\nenergy_weight_sram,{}\nenergy_multipliers,{}\n\
                 energy_adder_tree,{}\nenergy_register_file,{}\nenergy_quantizer,{}\n\
                 energy_routing,{}\narea_total,{}\nops_per_cycle,{}\ntops,{}\ntops_per_watt,{}\n",
                report.energy_total,
                e.weight_sram,
                e.multipliers,
                e.adder_tree,
                e.register_file,
                e.quantizer,
                e.routing,
                report.area_total,
                tput.ops_per_cycle_per_pe,
                tput.tops,
                tput.tops_per_watt
            );
            match &args.out {
                Some(out) => std::fs::write(out, text)?,
                None => print!("{text}"),
            }
        }
    }
    Ok(())
}
