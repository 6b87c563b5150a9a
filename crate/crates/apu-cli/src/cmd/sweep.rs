use std::path::PathBuf;
use std::sync::Mutex;

use anyhow::{Context, Result};
use apu_core::costmodel::{interconnect_memory, pe_cost, CostParams, PeMode};
use apu_core::format::load_sweep_spec;

#[derive(clap::Args)]
pub struct Args {
    /// Sweep spec JSON: block_dims, bits, interconnects.
    #[arg(long)]
    pub spec: PathBuf,
    /// Output CSV, one row per design point.
    #[arg(long)]
    pub out: PathBuf,
    /// Concurrent design-point workers.
    #[arg(long, default_value_t = 4)]
    pub jobs: usize,
    /// Processing mode priced per point.
    #[arg(long, default_value = "spatial")]
    pub mode: String,
}

pub fn run(args: Args) -> Result<()> {
    let spec = load_sweep_spec(&args.spec)?;
    let mode: PeMode = args.mode.parse()?;
    let params = CostParams::default();

    // Cross product of design points.
    let mut points = Vec::new();
    for &dim in &spec.block_dims {
        for &bits in &spec.bits {
            for &ic in &spec.interconnects {
                points.push((dim, bits, ic));
            }
        }
    }
    crate::log(format!("sweeping {} design points", points.len()));

    // Embarrassingly parallel; results keyed by index so output order is
    // deterministic regardless of worker interleaving.
    let results: Mutex<Vec<Option<String>>> = Mutex::new(vec![None; points.len()]);
    let next = std::sync::atomic::AtomicUsize::new(0);
    let workers = args.jobs.clamp(1, 64);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= points.len() {
                    break;
                }
                let (dim, bits, ic) = points[i];
                let report = pe_cost(dim, dim, bits, mode, &params);
                let routed = spec.routed_n.unwrap_or(dim);
                let sched_len = spec.schedule_len.unwrap_or(dim as u64);
                let ic_bits = interconnect_memory(ic, routed, sched_len).unwrap_or(f64::NAN);
                let row = format!(
                    "{dim},{bits},{mode},{ic:?},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{:.1}\n",
                    report.energy_total,
                    report.energy.weight_sram,
                    report.energy.multipliers,
                    report.energy.adder_tree,
                    report.energy.register_file,
                    report.energy.quantizer,
                    report.energy.routing,
                    report.area_total,
                    report.ops_per_cycle,
                    ic_bits,
                    mode = mode,
                );
                results.lock().unwrap()[i] = Some(row);
            });
        }
    });

    let mut text = String::from(
        "block_dim,bits,mode,interconnect,energy_total,energy_weight_sram,energy_multipliers,\
         energy_adder_tree,energy_register_file,energy_quantizer,energy_routing,area_total,\
         ops_per_cycle,interconnect_bits\n",
    );
    for row in results.into_inner().unwrap() {
        text.push_str(&row.expect("all points computed"));
    }
    std::fs::write(&args.out, text)
        .with_context(|| format!("failed to write `{}`", args.out.display()))?;
    println!("{} design points -> {}", points.len(), args.out.display());
    Ok(())
}
