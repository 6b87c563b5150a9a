pub mod compare;
pub mod compress;
pub mod cost;
pub mod gen;
pub mod map;
pub mod pipeline;
pub mod schedule;
pub mod simulate;
pub mod sweep;

use std::path::Path;

use anyhow::{Context, Result};
use apu_core::mapper::AcceleratorConfig;
use apu_core::tensor::Tensor;

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum OutFormat {
    Json,
    Csv,
}

/// Load an accelerator config JSON; `flagship` is a built-in alias.
pub fn load_config(path: &str) -> Result<AcceleratorConfig> {
    if path == "flagship" {
        return Ok(AcceleratorConfig::flagship());
    }
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("failed to read config `{path}`"))?;
    let cfg: AcceleratorConfig =
        serde_json::from_str(&text).with_context(|| format!("failed to parse config `{path}`"))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Load an input tensor `{shape, data}` JSON file.
pub fn load_input(path: &Path) -> Result<Tensor> {
    #[derive(serde::Deserialize)]
    struct Raw {
        shape: Vec<usize>,
        data: Vec<f64>,
    }
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("failed to read input `{}`", path.display()))?;
    let raw: Raw = serde_json::from_str(&text)
        .with_context(|| format!("failed to parse input `{}`", path.display()))?;
    Ok(Tensor::real(raw.shape, raw.data)?)
}

pub fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text)
        .with_context(|| format!("failed to write `{}`", path.display()))?;
    Ok(())
}
