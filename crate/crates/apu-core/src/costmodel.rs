//! Analytic energy/area/throughput model for one PE and the routing fabric.
//!
//! All energies and areas are relative units anchored at "one 4-bit multiply
//! = 1 unit"; absolute joules are out of scope. The PE model is static:
//! the memory term is driven by the weight array size (reads engage the full
//! bitline array), the compute term by the datapath width (one multiplier
//! per weight column), and the processing mode only swaps the reduction
//! structure (widening tree vs. flat accumulators) and adds the partial-sum
//! register file in temporal mode.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::accumulator_bits;

/// ceil(log2(n)) with ceil_log2(0) = ceil_log2(1) = 0.
pub fn ceil_log2(n: u64) -> u32 {
    if n <= 1 {
        0
    } else {
        64 - (n - 1).leading_zeros()
    }
}

/// Per-stage adder tree profile for `n` inputs: `(adders, operand_bits)`
/// where stage `s` (1-based) operates on operands of `2*weight_bits + s - 1`
/// bits. Odd elements pass through unwidened.
pub fn tree_profile(n: usize, weight_bits: u32) -> Vec<(u64, u32)> {
    let mut stages = Vec::new();
    let mut width = n as u64;
    let mut s = 1u32;
    while width > 1 {
        let adders = width / 2;
        stages.push((adders, 2 * weight_bits + s - 1));
        width = width.div_ceil(2);
        s += 1;
    }
    stages
}

/// Normalized 4-bit-equivalent operations per cycle for one PE emitting one
/// output from `cols` products: a 4-bit multiply counts 2, an adder of
/// operand width `w` counts one 4-bit op per full 4 bits (`w / 4`, floored).
/// With 400 columns at 4-bit this lands at 1623 ops/cycle.
pub fn normalized_ops_per_cycle(cols: usize, weight_bits: u32) -> u64 {
    let mults = 2 * cols as u64;
    let adds: u64 = tree_profile(cols, weight_bits)
        .iter()
        .map(|&(adders, w)| adders * (w / 4) as u64)
        .sum();
    mults + adds
}

/// Processing mode of the PE datapath.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PeMode {
    /// One complete output activation per cycle through a widening adder tree.
    Spatial,
    /// One input activation per cycle, partial sums held in a register file.
    Temporal,
}

impl std::fmt::Display for PeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PeMode::Spatial => write!(f, "spatial"),
            PeMode::Temporal => write!(f, "temporal"),
        }
    }
}

impl std::str::FromStr for PeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spatial" => Ok(PeMode::Spatial),
            "temporal" => Ok(PeMode::Temporal),
            other => Err(Error::Config(format!("unknown PE mode `{other}`"))),
        }
    }
}

/// Relative-unit coefficients. Defaults are calibrated so the 400x400/4-bit
/// PE reproduces the reference power breakdown (memory > 50%, compute about
/// a third) and the precision sweep's break-even and 3x crossover points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    /// Energy of one 4-bit multiply (the unit); a b-bit multiply is (b/4)^2.
    pub mult_energy: f64,
    /// Energy per 4-bit adder slice; an adder of operand width w is w/4 slices.
    pub add_slice_energy: f64,
    /// Weight SRAM energy per array bit engaged by a read.
    pub sram_bit_energy: f64,
    /// Array-size factor: reads cost `(1 + alpha * log2(array_bits))`.
    pub sram_alpha: f64,
    /// Input activation latch energy per bit read.
    pub latch_bit_energy: f64,
    /// Partial-sum register file energy per bit per access (temporal only).
    pub rf_bit_energy: f64,
    /// Quantizer energy per output, per 4 bits of activation width.
    pub quant_energy: f64,
    /// Crossbar traversal energy per routed activation bit.
    pub route_bit_energy: f64,
    /// Area per multiplier operand-bit squared.
    pub area_mult: f64,
    /// Area per adder operand bit.
    pub area_add: f64,
    /// Area per SRAM bit.
    pub area_sram: f64,
    /// Area per register-file bit.
    pub area_rf: f64,
    /// Off-chip DRAM access energy relative to on-chip SRAM.
    pub dram_vs_sram: f64,
    /// Additional saving factor for near-processor (in-PE) memory.
    pub near_mem_factor: f64,
}

impl Default for CostParams {
    fn default() -> Self {
        CostParams {
            mult_energy: 1.0,
            add_slice_energy: 0.1,
            sram_bit_energy: 1.08e-3,
            sram_alpha: 0.005,
            latch_bit_energy: 0.13,
            rf_bit_energy: 0.3,
            quant_energy: 2.0,
            route_bit_energy: 0.5,
            area_mult: 1.0,
            area_add: 0.25,
            area_sram: 0.05,
            area_rf: 0.15,
            dram_vs_sram: 10.0,
            near_mem_factor: 3.0,
        }
    }
}

impl CostParams {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.mult_energy,
            self.add_slice_energy,
            self.sram_bit_energy,
            self.latch_bit_energy,
            self.rf_bit_energy,
            self.quant_energy,
            self.route_bit_energy,
            self.area_mult,
            self.area_add,
            self.area_sram,
            self.area_rf,
            self.dram_vs_sram,
            self.near_mem_factor,
        ];
        if all.iter().any(|c| !c.is_finite() || *c <= 0.0) || self.sram_alpha < 0.0 {
            return Err(Error::Cost("all cost coefficients must be positive".into()));
        }
        Ok(())
    }
}

/// Energy breakdown per PE activity, relative units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub weight_sram: f64,
    pub multipliers: f64,
    pub adder_tree: f64,
    pub register_file: f64,
    pub quantizer: f64,
    pub routing: f64,
}

impl EnergyBreakdown {
    pub fn total(&self) -> f64 {
        self.weight_sram
            + self.multipliers
            + self.adder_tree
            + self.register_file
            + self.quantizer
            + self.routing
    }

    /// Compute = multipliers + adder tree.
    pub fn compute(&self) -> f64 {
        self.multipliers + self.adder_tree
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaBreakdown {
    pub weight_sram: f64,
    pub multipliers: f64,
    pub adder_tree: f64,
    pub register_file: f64,
    pub quantizer: f64,
    pub routing: f64,
}

impl AreaBreakdown {
    pub fn total(&self) -> f64 {
        self.weight_sram
            + self.multipliers
            + self.adder_tree
            + self.register_file
            + self.quantizer
            + self.routing
    }

    pub fn compute(&self) -> f64 {
        self.multipliers + self.adder_tree
    }
}

/// Cost report for one PE configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub block_rows: usize,
    pub block_cols: usize,
    pub weight_bits: u32,
    pub mode: PeMode,
    pub energy: EnergyBreakdown,
    pub area: AreaBreakdown,
    pub energy_total: f64,
    pub area_total: f64,
    pub ops_per_cycle: u64,
}

/// Energy/area model for one PE holding a `rows x cols` block.
pub fn pe_cost(
    rows: usize,
    cols: usize,
    weight_bits: u32,
    mode: PeMode,
    params: &CostParams,
) -> CostReport {
    let act_bits = weight_bits;
    let array_bits = (rows * cols) as f64 * weight_bits as f64;
    let size_factor = 1.0 + params.sram_alpha * array_bits.log2();
    let weight_sram = params.sram_bit_energy * array_bits * size_factor;

    let mult_scale = (weight_bits as f64 / 4.0).powi(2);
    let multipliers = cols as f64 * mult_scale * params.mult_energy;

    let acc_bits = accumulator_bits(weight_bits, act_bits, cols);
    let (adder_tree, adder_area, register_file, rf_area) = match mode {
        PeMode::Spatial => {
            let slices: f64 = tree_profile(cols, weight_bits)
                .iter()
                .map(|&(adders, w)| adders as f64 * w as f64 / 4.0)
                .sum();
            let area: f64 = tree_profile(cols, weight_bits)
                .iter()
                .map(|&(adders, w)| adders as f64 * w as f64)
                .sum();
            (slices * params.add_slice_energy, area * params.area_add, 0.0, 0.0)
        }
        PeMode::Temporal => {
            // Flat accumulator adds at full precision, plus the psum file.
            let slices = cols as f64 * acc_bits as f64 / 4.0;
            let area = cols as f64 * acc_bits as f64;
            (
                slices * params.add_slice_energy,
                area * params.area_add,
                rows as f64 * acc_bits as f64 * params.rf_bit_energy,
                rows as f64 * acc_bits as f64 * params.area_rf,
            )
        }
    };

    let quantizer = act_bits as f64 / 4.0 * params.quant_energy;

    // Activation movement: latch fill, crossbar traversal, output write.
    let out_array_bits = (rows as u64 * act_bits as u64).max(1) as f64;
    let out_factor = 1.0 + params.sram_alpha * out_array_bits.log2();
    let routing = cols as f64 * act_bits as f64 * params.latch_bit_energy
        + act_bits as f64 * params.route_bit_energy
        + params.sram_bit_energy * out_array_bits * out_factor;

    let energy = EnergyBreakdown {
        weight_sram,
        multipliers,
        adder_tree,
        register_file,
        quantizer,
        routing,
    };

    let area = AreaBreakdown {
        weight_sram: array_bits * params.area_sram,
        multipliers: cols as f64 * (weight_bits as f64).powi(2) * params.area_mult,
        adder_tree: adder_area,
        register_file: rf_area,
        quantizer: act_bits as f64 * params.area_add,
        routing: cols as f64 * act_bits as f64 * params.area_rf
            + out_array_bits * params.area_sram,
    };

    let energy_total = energy.total();
    let area_total = area.total();
    CostReport {
        block_rows: rows,
        block_cols: cols,
        weight_bits,
        mode,
        energy,
        area,
        energy_total,
        area_total,
        ops_per_cycle: normalized_ops_per_cycle(cols, weight_bits),
    }
}

/// Bit-precision sweep of the 400x400 PE, spatial mode.
pub fn precision_sweep(bits: &[u32], params: &CostParams) -> Result<Vec<CostReport>> {
    bits.iter()
        .map(|&b| {
            if !matches!(b, 4 | 8 | 16) {
                return Err(Error::Cost(format!("unsupported bit width {b}")));
            }
            Ok(pe_cost(400, 400, b, PeMode::Spatial, params))
        })
        .collect()
}

/// Interconnect flavor for the routing-memory comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interconnect {
    Mux,
    Clos,
    Crossbar,
}

impl std::str::FromStr for Interconnect {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mux" => Ok(Interconnect::Mux),
            "clos" => Ok(Interconnect::Clos),
            "crossbar" => Ok(Interconnect::Crossbar),
            other => Err(Error::Config(format!("unknown interconnect `{other}`"))),
        }
    }
}

/// Control-memory bits for routing `n` activations per layer over a schedule
/// of length `schedule_len`.
///
/// Mux: exact select SRAM size `n * L * ceil(log2 n)`. Crossbar: one enable
/// bit per crosspoint per cycle, `n^2 * L`. Clos: three-stage approximation,
/// `6 * n^1.5 * L`. The mux <= clos <= crossbar ordering holds for n >= 36
/// (below that the Clos constant exceeds the crossbar's n^2).
pub fn interconnect_memory(kind: Interconnect, n: usize, schedule_len: u64) -> Result<f64> {
    if n < 2 {
        return Err(Error::Cost(format!("interconnect size must be >= 2, got {n}")));
    }
    let nf = n as f64;
    let l = schedule_len as f64;
    Ok(match kind {
        Interconnect::Mux => nf * l * ceil_log2(n as u64) as f64,
        Interconnect::Crossbar => nf * nf * l,
        Interconnect::Clos => 6.0 * nf.powf(1.5) * l,
    })
}

/// Exact mux select storage for `num_dests` PEs over `schedule_len` cycles
/// selecting among `num_sources` lines; must match
/// [`crate::scheduler::SelectTable::storage_bits`].
pub fn mux_select_bits(num_sources: usize, num_dests: usize, schedule_len: u64) -> u64 {
    num_dests as u64 * schedule_len * ceil_log2(num_sources as u64) as u64
}

/// Peak throughput report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub ops_per_cycle_per_pe: u64,
    pub tops: f64,
    pub tops_per_watt: f64,
}

/// TOPS and TOPS/W for a PE array: `ops/cycle * clock * num_pes * 1e-12`,
/// divided by the calibration wattage.
pub fn throughput(
    pe_cols: usize,
    weight_bits: u32,
    clock_hz: u64,
    num_pes: usize,
    watts: f64,
) -> Result<ThroughputReport> {
    if !watts.is_finite() || watts <= 0.0 {
        return Err(Error::Cost("calibration wattage must be > 0".into()));
    }
    let ops = normalized_ops_per_cycle(pe_cols, weight_bits);
    let tops = ops as f64 * clock_hz as f64 * num_pes as f64 * 1e-12;
    Ok(ThroughputReport {
        ops_per_cycle_per_pe: ops,
        tops,
        tops_per_watt: tops / watts,
    })
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let num: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    num / den
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ceil_log2_values() {
        assert_eq!(ceil_log2(1), 0);
        assert_eq!(ceil_log2(2), 1);
        assert_eq!(ceil_log2(10), 4);
        assert_eq!(ceil_log2(400), 9);
        assert_eq!(ceil_log2(1024), 10);
    }

    #[test]
    fn tree_profile_400_has_nine_stages() {
        let p = tree_profile(400, 4);
        assert_eq!(p.len(), 9);
        assert_eq!(p[0], (200, 8));
        assert_eq!(p[8], (1, 16)); // last stage has 16-bit operands
        let total_adders: u64 = p.iter().map(|s| s.0).sum();
        assert_eq!(total_adders, 399);
    }

    #[test]
    fn flagship_ops_per_cycle_near_1600() {
        let ops = normalized_ops_per_cycle(400, 4);
        assert_eq!(ops, 1623);
        assert!((1500..=1700).contains(&ops));
    }

    #[test]
    fn flagship_tops_arithmetic() {
        let t = throughput(400, 4, 1_000_000_000, 10, 0.44).unwrap();
        assert!(t.tops >= 15.0 && t.tops <= 17.0, "tops {}", t.tops);
        assert!(
            t.tops_per_watt >= 34.0 && t.tops_per_watt <= 39.0,
            "tops/w {}",
            t.tops_per_watt
        );
        // 1 PE is exactly a tenth of the 10-PE figure.
        let one = throughput(400, 4, 1_000_000_000, 1, 0.44).unwrap();
        assert!((one.tops - t.tops / 10.0).abs() < 1e-12);
    }

    #[test]
    fn zero_watts_rejected() {
        assert!(throughput(400, 4, 1_000_000_000, 10, 0.0).is_err());
    }

    #[test]
    fn fig4b_breakdown_shares() {
        let r = pe_cost(400, 400, 4, PeMode::Spatial, &CostParams::default());
        let mem_share = r.energy.weight_sram / r.energy_total;
        let compute_share = r.energy.compute() / r.energy_total;
        assert!(mem_share > 0.5, "memory share {mem_share}");
        assert!(
            (0.15..=0.35).contains(&compute_share),
            "compute share {compute_share}"
        );
    }

    #[test]
    fn doubling_block_dim_quadruples_memory() {
        let p = CostParams::default();
        let a = pe_cost(200, 200, 4, PeMode::Spatial, &p);
        let b = pe_cost(400, 400, 4, PeMode::Spatial, &p);
        let mem_ratio = b.energy.weight_sram / a.energy.weight_sram;
        assert!((mem_ratio - 4.0).abs() / 4.0 <= 0.01, "memory ratio {mem_ratio}");
        let compute_ratio = b.energy.multipliers / a.energy.multipliers;
        assert!((compute_ratio - 2.0).abs() < 1e-9, "multiplier ratio {compute_ratio}");
    }

    #[test]
    fn spatial_beats_temporal() {
        let p = CostParams::default();
        for (r, c) in [(400, 400), (1, 400), (400, 1), (13, 57)] {
            let s = pe_cost(r, c, 4, PeMode::Spatial, &p);
            let t = pe_cost(r, c, 4, PeMode::Temporal, &p);
            assert!(
                s.energy_total < t.energy_total,
                "spatial {} vs temporal {} at {}x{}",
                s.energy_total,
                t.energy_total,
                r,
                c
            );
            assert_eq!(s.energy.register_file, 0.0);
            assert!(t.energy.register_file > 0.0);
        }
    }

    #[test]
    fn breakdown_sums_match_totals() {
        for mode in [PeMode::Spatial, PeMode::Temporal] {
            let r = pe_cost(256, 512, 8, mode, &CostParams::default());
            assert!((r.energy.total() - r.energy_total).abs() <= 1e-9 * r.energy_total);
            assert!((r.area.total() - r.area_total).abs() <= 1e-9 * r.area_total);
        }
    }

    #[test]
    fn precision_sweep_reference_points() {
        let reports = precision_sweep(&[4, 8, 16], &CostParams::default()).unwrap();
        let (m4, c4) = (reports[0].energy.weight_sram, reports[0].energy.compute());
        let (m8, c8) = (reports[1].energy.weight_sram, reports[1].energy.compute());
        let (m16, c16) = (reports[2].energy.weight_sram, reports[2].energy.compute());
        assert!(m4 > c4, "4-bit memory {m4} must dominate compute {c4}");
        assert!(
            (c8 - m8).abs() / m8 <= 0.25,
            "8-bit break-even violated: {}",
            (c8 - m8).abs() / m8
        );
        let ratio = c16 / m16;
        assert!((2.1..=3.9).contains(&ratio), "16-bit compute/memory {ratio}");
    }

    #[test]
    fn unsupported_width_rejected() {
        assert!(precision_sweep(&[12], &CostParams::default()).is_err());
    }

    #[test]
    fn interconnect_reference_points() {
        // N=1024, L=1: crossbar/mux ~ 102x.
        let mux = interconnect_memory(Interconnect::Mux, 1024, 1).unwrap();
        let xbar = interconnect_memory(Interconnect::Crossbar, 1024, 1).unwrap();
        let ratio = xbar / mux;
        assert!((ratio - 102.4).abs() < 0.1, "ratio {ratio}");
        // N=512: clos/mux ~ 15x.
        let mux = interconnect_memory(Interconnect::Mux, 512, 1).unwrap();
        let clos = interconnect_memory(Interconnect::Clos, 512, 1).unwrap();
        assert!((clos / mux - 15.08).abs() < 0.01, "clos/mux {}", clos / mux);
    }

    #[test]
    fn interconnect_ordering_from_36() {
        for n in [36usize, 64, 128, 512, 4096] {
            let mux = interconnect_memory(Interconnect::Mux, n, 7).unwrap();
            let clos = interconnect_memory(Interconnect::Clos, n, 7).unwrap();
            let xbar = interconnect_memory(Interconnect::Crossbar, n, 7).unwrap();
            assert!(mux <= clos && clos <= xbar, "ordering at n={n}");
        }
    }

    #[test]
    fn interconnect_degenerate_n2() {
        // All three within small constants of each other.
        let mux = interconnect_memory(Interconnect::Mux, 2, 1).unwrap();
        let clos = interconnect_memory(Interconnect::Clos, 2, 1).unwrap();
        let xbar = interconnect_memory(Interconnect::Crossbar, 2, 1).unwrap();
        assert!(mux >= 1.0 && xbar <= 20.0 && clos <= 20.0);
        assert!(interconnect_memory(Interconnect::Mux, 1, 1).is_err());
    }

    #[test]
    fn scaling_slopes() {
        let p = CostParams::default();
        let dims = [200usize, 256, 400, 512, 1024, 2048];
        let mem_e: Vec<(f64, f64)> = dims
            .iter()
            .map(|&d| (d as f64, pe_cost(d, d, 4, PeMode::Spatial, &p).energy.weight_sram))
            .collect();
        let mem_a: Vec<(f64, f64)> = dims
            .iter()
            .map(|&d| (d as f64, pe_cost(d, d, 4, PeMode::Spatial, &p).area.weight_sram))
            .collect();
        let comp_e: Vec<(f64, f64)> = dims
            .iter()
            .map(|&d| (d as f64, pe_cost(d, d, 4, PeMode::Spatial, &p).energy.compute()))
            .collect();
        let comp_a: Vec<(f64, f64)> = dims
            .iter()
            .map(|&d| (d as f64, pe_cost(d, d, 4, PeMode::Spatial, &p).area.compute()))
            .collect();
        let se = loglog_slope(&mem_e);
        let sa = loglog_slope(&mem_a);
        let ce = loglog_slope(&comp_e);
        let ca = loglog_slope(&comp_a);
        assert!((se - 2.0).abs() <= 0.1, "memory energy slope {se}");
        assert!((sa - 2.0).abs() <= 0.1, "memory area slope {sa}");
        assert!((ce - 1.0).abs() <= 0.1, "compute energy slope {ce}");
        assert!((ca - 1.0).abs() <= 0.1, "compute area slope {ca}");
    }
}
