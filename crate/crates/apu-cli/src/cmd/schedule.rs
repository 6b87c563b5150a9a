use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use apu_core::format::{read_compressed, write_schedule_csv, write_select_table};
use apu_core::mapper::{map_model, Phase};
use apu_core::scheduler::{emit_selects, RoutingSchedule};

#[derive(clap::Args)]
pub struct Args {
    /// Compressed model (.apu).
    #[arg(long)]
    pub compressed: PathBuf,
    /// Accelerator config JSON (or `flagship`).
    #[arg(long, default_value = "flagship")]
    pub config: String,
    /// Layer to dump (by name); defaults to the first routed layer.
    #[arg(long)]
    pub layer: Option<String>,
    /// Schedule CSV output.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional select-table binary dump.
    #[arg(long)]
    pub select_out: Option<PathBuf>,
}

pub fn run(args: Args) -> Result<()> {
    let cm = read_compressed(&args.compressed)?;
    let cfg = super::load_config(&args.config)?;
    let program = map_model(&cm, &cfg)?;

    // Concatenate the chosen layer's per-fold schedules with a running
    // cycle offset.
    let mut target = args.layer.clone();
    let mut merged: Option<RoutingSchedule> = None;
    let mut total_select_bits = 0u64;
    for phase in &program.phases {
        if let Phase::RouteIn { layer, schedule, .. } = phase {
            let name = &program.layer_names[*layer];
            total_select_bits += emit_selects(schedule, schedule.num_sources).storage_bits();
            if target.is_none() {
                target = Some(name.clone());
            }
            if target.as_deref() == Some(name.as_str()) {
                match merged.as_mut() {
                    None => merged = Some(schedule.clone()),
                    Some(m) => m.cycles.extend(schedule.cycles.iter().cloned()),
                }
            }
        }
    }
    let Some(sched) = merged else {
        bail!("no routed layer found (pick one of: {:?})", program.layer_names);
    };

    let file = std::fs::File::create(&args.out)
        .with_context(|| format!("failed to create `{}`", args.out.display()))?;
    write_schedule_csv(&sched, std::io::BufWriter::new(file))?;
    println!(
        "schedule: {} cycles, {} transfers -> {}",
        sched.len(),
        sched.cycles.iter().map(|c| c.len()).sum::<usize>(),
        args.out.display()
    );

    if let Some(sel_path) = &args.select_out {
        let table = emit_selects(&sched, sched.num_sources);
        let file = std::fs::File::create(sel_path)
            .with_context(|| format!("failed to create `{}`", sel_path.display()))?;
        write_select_table(&table, std::io::BufWriter::new(file))?;
        println!(
            "select table: {} bits ({}-bit entries) -> {}",
            table.storage_bits(),
            table.width_bits(),
            sel_path.display()
        );
    }
    crate::log(format!(
        "total select storage across program: {total_select_bits} bits"
    ));
    Ok(())
}
