use std::path::PathBuf;

use anyhow::{bail, Result};
use apu_core::format::{save_shape_manifest, write_compressed};
use apu_core::model::save_model;
use apu_core::zoo;

#[derive(clap::Args)]
pub struct Args {
    /// One of: lenet300, flagship, spiral-data, spiral-mlp, fig14, vgg19,
    /// resnet50, mixed, input:N.
    #[arg(long)]
    pub preset: String,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(args: Args) -> Result<()> {
    match args.preset.as_str() {
        "lenet300" => save_model(&zoo::lenet300(args.seed), &args.out)?,
        "flagship" => write_compressed(&zoo::flagship_compressed(args.seed), &args.out)?,
        "spiral-data" => {
            let data = zoo::spiral(args.seed, 100);
            let text = serde_json::to_string_pretty(&data)?;
            std::fs::write(&args.out, text)?;
        }
        "spiral-mlp" => save_model(&zoo::spiral_mlp(args.seed), &args.out)?,
        "fig14" => save_shape_manifest(&zoo::fig14_fc_manifest(), &args.out)?,
        "vgg19" => save_shape_manifest(&zoo::vgg19_groupconv_manifest(), &args.out)?,
        "resnet50" => save_shape_manifest(&zoo::resnet50_groupconv_manifest(), &args.out)?,
        "mixed" => save_model(&zoo::random_mixed_model(args.seed), &args.out)?,
        other => {
            if let Some(n) = other.strip_prefix("input:") {
                let n: usize = n.parse()?;
                let t = zoo::seeded_tensor(&[n], args.seed);
                std::fs::write(&args.out, serde_json::to_string(&SerTensor::from(&t))?)?;
            } else {
                bail!("unknown preset `{other}`");
            }
        }
    }
    println!("{} -> {}", args.preset, args.out.display());
    Ok(())
}

/// Input tensors serialize as the documented `{shape, data}` schema.
#[derive(serde::Serialize)]
struct SerTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl From<&apu_core::tensor::Tensor> for SerTensor {
    fn from(t: &apu_core::tensor::Tensor) -> Self {
        SerTensor {
            shape: t.shape.clone(),
            data: t.as_real().expect("real tensor").to_vec(),
        }
    }
}
