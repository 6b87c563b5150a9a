use std::path::PathBuf;

use anyhow::{Context, Result};
use apu_core::compress::{compress_model, CompressOptions, Scheme};
use apu_core::format::write_compressed;
use apu_core::model::load_model;

#[derive(clap::Args)]
pub struct Args {
    /// Model JSON file.
    #[arg(long)]
    pub model: PathBuf,
    /// Blocks per fully-connected layer (= compression ratio).
    #[arg(long, default_value_t = 10)]
    pub blocks: usize,
    /// Weight bit width (4, 8, or 16).
    #[arg(long, default_value_t = 4)]
    pub bits: u32,
    /// Activation bit width; defaults to the weight width.
    #[arg(long)]
    pub act_bits: Option<u32>,
    /// Weight quantization scheme: uniform | codebook.
    #[arg(long, default_value = "uniform")]
    pub scheme: String,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Calibration input tensor JSON (seeded random when absent).
    #[arg(long)]
    pub calibrate: Option<PathBuf>,
    /// Output container path (`<out>` sidecar + `<out>.bin`).
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(args: Args) -> Result<()> {
    let model = load_model(&args.model)
        .with_context(|| format!("loading model `{}`", args.model.display()))?;
    crate::log(format!(
        "loaded `{}`: {} layers",
        model.name,
        model.layers.len()
    ));
    let calibration = match &args.calibrate {
        Some(p) => Some(super::load_input(p)?),
        None => None,
    };
    let opts = CompressOptions {
        num_blocks: args.blocks,
        weight_bits: args.bits,
        activation_bits: args.act_bits.unwrap_or(args.bits),
        scheme: args.scheme.parse::<Scheme>()?,
        seed: args.seed,
        calibration,
        masks: Default::default(),
    };
    let cm = compress_model(&model, &opts)?;
    write_compressed(&cm, &args.out)?;
    println!(
        "compressed `{}`: {} layers, {} stored weights -> {}",
        cm.name,
        cm.layers.len(),
        cm.stored_weights(),
        args.out.display()
    );
    Ok(())
}
