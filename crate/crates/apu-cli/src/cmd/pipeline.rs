use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use apu_core::compress::{compress_model, CompressOptions, Scheme};
use apu_core::costmodel::{pe_cost, throughput, CostParams, PeMode};
use apu_core::format::{
    read_compressed, sha256_file, write_compressed, write_schedule_csv, RunManifest,
};
use apu_core::mapper::{map_model, Phase};
use apu_core::model::load_model;
use apu_core::simulator::simulate;
use apu_core::zoo;

#[derive(clap::Args)]
pub struct Args {
    /// Model JSON, or an already-compressed .apu container.
    #[arg(long)]
    pub model: PathBuf,
    /// Accelerator config JSON (or `flagship`).
    #[arg(long, default_value = "flagship")]
    pub config: String,
    #[arg(long, default_value_t = 10)]
    pub blocks: usize,
    #[arg(long, default_value_t = 4)]
    pub bits: u32,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Input tensor JSON; a seeded random input is used when absent.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, default_value = "spatial")]
    pub mode: String,
    /// Calibration wattage for TOPS/W.
    #[arg(long, default_value_t = 0.44)]
    pub watts: f64,
    /// Output directory for all artifacts.
    #[arg(long)]
    pub out_dir: PathBuf,
}

fn stage<T>(name: &str, r: apu_core::Result<T>) -> Result<T> {
    r.with_context(|| format!("stage `{name}` failed"))
}

pub fn run(args: Args) -> Result<()> {
    std::fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("failed to create `{}`", args.out_dir.display()))?;
    let out = |f: &str| args.out_dir.join(f);
    let cfg = super::load_config(&args.config)?;
    let mode: PeMode = args.mode.parse()?;

    // Compress (skipped when the input is already a .apu container).
    let apu_path: PathBuf;
    let cm = if args.model.extension().is_some_and(|e| e == "apu") {
        apu_path = args.model.clone();
        stage("compress", read_compressed(&args.model))?
    } else {
        let model = load_model(&args.model).context("stage `compress` failed")?;
        let cm = stage(
            "compress",
            compress_model(
                &model,
                &CompressOptions {
                    num_blocks: args.blocks,
                    weight_bits: args.bits,
                    activation_bits: args.bits,
                    scheme: Scheme::UniformSymmetric,
                    seed: args.seed,
                    calibration: None,
                    masks: Default::default(),
                },
            ),
        )?;
        apu_path = out("model.apu");
        stage("compress", write_compressed(&cm, &apu_path))?;
        cm
    };
    crate::log(format!("compressed: {} stored weights", cm.stored_weights()));

    // Schedule + map.
    let program = stage("map", map_model(&cm, &cfg))?;
    let sched_path = out("schedule.csv");
    {
        // First routed layer's schedule, folds concatenated.
        let mut merged: Option<apu_core::scheduler::RoutingSchedule> = None;
        let mut first: Option<usize> = None;
        for p in &program.phases {
            if let Phase::RouteIn { layer, schedule, .. } = p {
                if first.is_none() {
                    first = Some(*layer);
                }
                if first == Some(*layer) {
                    match merged.as_mut() {
                        None => merged = Some(schedule.clone()),
                        Some(m) => m.cycles.extend(schedule.cycles.iter().cloned()),
                    }
                }
            }
        }
        if let Some(s) = merged {
            let file = std::fs::File::create(&sched_path)?;
            write_schedule_csv(&s, std::io::BufWriter::new(file)).context("stage `schedule`")?;
        }
    }

    // Simulate.
    let input = match &args.input {
        Some(p) => super::load_input(p)?,
        None => zoo::seeded_tensor(
            &cm.input_shape,
            apu_core::compress::fan_seed(args.seed, 0x1297),
        ),
    };
    let (activations, sim_report) = stage("simulate", simulate(&program, &cm, &input, &cfg, mode))?;
    super::write_json(&sim_report, &out("sim_report.json"))?;
    super::write_json(&activations, &out("activations.json"))?;

    // Cost.
    let cost = pe_cost(cfg.pe_rows, cfg.pe_cols, cfg.weight_bits, mode, &CostParams::default());
    let tput = stage(
        "cost",
        throughput(cfg.pe_cols, cfg.weight_bits, cfg.clock_hz, cfg.num_pes, args.watts),
    )?;
    #[derive(serde::Serialize)]
    struct CostFile {
        pe: apu_core::costmodel::CostReport,
        throughput: apu_core::costmodel::ThroughputReport,
        watts: f64,
    }
    super::write_json(
        &CostFile {
            pe: cost,
            throughput: tput,
            watts: args.watts,
        },
        &out("cost_report.json"),
    )?;

    // Manifest: digests of every input, paths of every output.
    let mut input_digests = std::collections::BTreeMap::new();
    input_digests.insert(
        args.model.display().to_string(),
        sha256_file(&args.model)?,
    );
    if let Some(p) = &args.input {
        input_digests.insert(p.display().to_string(), sha256_file(p)?);
    }
    let config_sha256 = if Path::new(&args.config).exists() {
        sha256_file(Path::new(&args.config))?
    } else {
        apu_core::format::sha256_hex(args.config.as_bytes())
    };
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: args.seed,
        config_sha256,
        input_digests,
        outputs: vec![
            apu_path.display().to_string(),
            sched_path.display().to_string(),
            out("sim_report.json").display().to_string(),
            out("activations.json").display().to_string(),
            out("cost_report.json").display().to_string(),
        ],
    };
    manifest.write(&out("run_manifest.json"))?;

    println!(
        "pipeline `{}` done: {} total cycles ({} compute), utilization {:.4}, reports in {}",
        cm.name,
        sim_report.total_cycles,
        sim_report.compute_cycles,
        sim_report.compute_utilization,
        args.out_dir.display()
    );
    Ok(())
}
