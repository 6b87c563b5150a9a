//! Baseline cycle models and the structured-vs-baseline comparison.
//!
//! Two explicit baselines: a dense sequential engine pricing every MAC of
//! the uncompressed layer at a fixed MACs/cycle rate, and an
//! unstructured-sparse engine that executes only the nonzero MACs but pays
//! a random-access penalty per MAC (irregular sparsity defeats wide fetch)
//! plus pointer storage overhead. Reported speedups are ratios against these
//! documented models, not reproductions of published figures.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::ShapeManifest;
use crate::mapper::{map_shape_manifest, AcceleratorConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    DenseSequential,
    UnstructuredSparse,
}

impl std::str::FromStr for BaselineKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" | "dense-sequential" => Ok(BaselineKind::DenseSequential),
            "unstructured" | "unstructured-sparse" => Ok(BaselineKind::UnstructuredSparse),
            other => Err(Error::Config(format!("unknown baseline `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineSpec {
    pub kind: BaselineKind,
    /// Dense baseline: MACs retired per cycle.
    pub macs_per_cycle: u64,
    /// Unstructured baseline: cycles per nonzero MAC (irregular access).
    pub random_access_penalty: f64,
    /// Unstructured baseline: index/pointer bits stored per nonzero weight.
    pub pointer_overhead_bits: u32,
}

impl Default for BaselineSpec {
    fn default() -> Self {
        BaselineSpec {
            kind: BaselineKind::UnstructuredSparse,
            macs_per_cycle: 1,
            random_access_penalty: 3.0,
            pointer_overhead_bits: 16,
        }
    }
}

impl BaselineSpec {
    pub fn validate(&self) -> Result<()> {
        if self.random_access_penalty < 1.0 {
            return Err(Error::Config(
                "random-access penalty must be at least 1".into(),
            ));
        }
        if self.macs_per_cycle == 0 {
            return Err(Error::Config("macs_per_cycle must be positive".into()));
        }
        Ok(())
    }

    /// Baseline cycle count for a layer with `dense_macs` total and
    /// `nnz_macs` surviving MACs.
    pub fn cycles(&self, dense_macs: u64, nnz_macs: u64) -> u64 {
        match self.kind {
            BaselineKind::DenseSequential => dense_macs.div_ceil(self.macs_per_cycle),
            BaselineKind::UnstructuredSparse => {
                (nnz_macs as f64 * self.random_access_penalty).ceil() as u64
            }
        }
    }
}

/// Speedup ratio; a baseline equal to the APU itself reports exactly 1.
pub fn speedup(baseline_cycles: u64, apu_cycles: u64) -> f64 {
    baseline_cycles as f64 / apu_cycles.max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerComparison {
    pub name: String,
    pub kind: String,
    pub folds: u64,
    pub dense_macs: u64,
    pub nnz_macs: u64,
    pub apu_cycles: u64,
    pub baseline_cycles: u64,
    pub speedup: f64,
    /// Pointer bits an unstructured format would store for this layer.
    pub pointer_overhead_bits: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub manifest: String,
    pub baseline: BaselineSpec,
    pub layers: Vec<LayerComparison>,
    pub end_to_end_speedup: f64,
}

/// Per-layer speedup table for a shape manifest against a baseline model.
/// Layers without MACs (pooling) are mapped but not compared.
pub fn compare_manifest(
    manifest: &ShapeManifest,
    cfg: &AcceleratorConfig,
    baseline: &BaselineSpec,
    seed: u64,
) -> Result<CompareReport> {
    baseline.validate()?;
    let reports = map_shape_manifest(manifest, cfg, seed)?;
    let mut layers = Vec::new();
    let mut apu_total = 0u64;
    let mut base_total = 0u64;
    for r in &reports {
        if r.dense_macs == 0 {
            continue;
        }
        let baseline_cycles = baseline.cycles(r.dense_macs, r.nnz_macs);
        apu_total += r.total_cycles;
        base_total += baseline_cycles;
        layers.push(LayerComparison {
            name: r.name.clone(),
            kind: r.kind.clone(),
            folds: r.folds,
            dense_macs: r.dense_macs,
            nnz_macs: r.nnz_macs,
            apu_cycles: r.total_cycles,
            baseline_cycles,
            speedup: speedup(baseline_cycles, r.total_cycles),
            pointer_overhead_bits: r.nnz_macs * baseline.pointer_overhead_bits as u64,
        });
    }
    Ok(CompareReport {
        manifest: manifest.name.clone(),
        baseline: baseline.clone(),
        layers,
        end_to_end_speedup: speedup(base_total, apu_total),
    })
}
