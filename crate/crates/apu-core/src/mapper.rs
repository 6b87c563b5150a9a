//! Lowering network layers onto the PE array.
//!
//! The mapper assigns blocks to PEs, picks the convolution mapping case,
//! folds batch normalization, schedules activation routing per fold, and
//! emits the phase-level command stream the simulator executes. Work that
//! has no multiply-accumulate structure (pooling, softmax, partial-sum
//! reduction) is routed to the host core.

use serde::{Deserialize, Serialize};

use crate::compress::{AttentionLayer, CompressedLayer, CompressedModel, ConvLayer, PoolLayer};
use crate::costmodel::Interconnect;
use crate::error::{Error, Result};
use crate::model::{Layer, NetworkModel};
use crate::pruner::BlockDiagonalLayer;
use crate::scheduler::{build_schedule, RoutingDemand, RoutingSchedule, Transfer};
use crate::tensor::Matrix;

/// Host-core cycle costs per primitive operation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HostOpCosts {
    pub compare: u64,
    pub add: u64,
    pub softmax_element: u64,
    pub quantize: u64,
}

impl Default for HostOpCosts {
    fn default() -> Self {
        HostOpCosts {
            compare: 1,
            add: 1,
            softmax_element: 4,
            quantize: 1,
        }
    }
}

fn default_reload() -> u64 {
    1
}

/// Hardware parameters of one accelerator instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceleratorConfig {
    pub num_pes: usize,
    /// Weight SRAM rows per PE (output capacity of one block).
    pub pe_rows: usize,
    /// Weight SRAM columns per PE (input capacity / multiplier count).
    pub pe_cols: usize,
    pub weight_bits: u32,
    pub activation_bits: u32,
    pub clock_hz: u64,
    #[serde(default)]
    pub host_op_cycles: HostOpCosts,
    pub interconnect: Interconnect,
    /// Weight reload cost per SRAM row rewritten between folds.
    #[serde(default = "default_reload")]
    pub reload_cycles_per_row: u64,
    /// Allow RouteIn of the next fold to overlap the previous Compute phase.
    #[serde(default)]
    pub overlap_route_compute: bool,
}

impl AcceleratorConfig {
    /// The taped-out instance: 10 PEs of 400x400 at 4-bit, 1 GHz, mux routing.
    pub fn flagship() -> Self {
        AcceleratorConfig {
            num_pes: 10,
            pe_rows: 400,
            pe_cols: 400,
            weight_bits: 4,
            activation_bits: 4,
            clock_hz: 1_000_000_000,
            host_op_cycles: HostOpCosts::default(),
            interconnect: Interconnect::Mux,
            reload_cycles_per_row: 1,
            overlap_route_compute: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_pes == 0
            || self.pe_rows == 0
            || self.pe_cols == 0
            || self.clock_hz == 0
            || self.weight_bits == 0
            || self.activation_bits == 0
        {
            return Err(Error::Config(
                "all accelerator dimensions must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Weight SRAM bits per PE.
    pub fn weight_sram_bits(&self) -> u64 {
        self.pe_rows as u64 * self.pe_cols as u64 * self.weight_bits as u64
    }
}

// ---------------------------------------------------------------------------
// Batch-norm folding and model lowering
// ---------------------------------------------------------------------------

/// Fold a batch-norm into the preceding fully-connected or convolution
/// layer: `w' = w * g / sqrt(var + eps)` per output channel and
/// `b' = (b - mean) * g / sqrt(var + eps) + beta`.
pub fn fold_batchnorm(bn: &Layer, prev: &Layer) -> Result<Layer> {
    let Layer::BatchNorm {
        gamma,
        beta,
        mean,
        variance,
        epsilon,
        ..
    } = bn
    else {
        return Err(Error::Mapping("fold_batchnorm expects a BatchNorm layer".into()));
    };
    let channels = gamma.len();
    let scale: Vec<f64> = (0..channels)
        .map(|c| gamma[c] / (variance[c] + epsilon).sqrt())
        .collect();
    let shift: Vec<f64> = (0..channels)
        .map(|c| beta[c] - mean[c] * scale[c])
        .collect();

    match prev {
        Layer::FullyConnected { name, weights, bias } => {
            if weights.rows != channels {
                return Err(Error::Mapping(format!(
                    "batchnorm has {channels} channels but fc `{name}` outputs {}",
                    weights.rows
                )));
            }
            let mut w = weights.clone();
            let mut b = bias.clone();
            for r in 0..w.rows {
                for c in 0..w.cols {
                    w.set(r, c, w.get(r, c) * scale[r]);
                }
                b[r] = b[r] * scale[r] + shift[r];
            }
            Ok(Layer::FullyConnected {
                name: name.clone(),
                weights: w,
                bias: b,
            })
        }
        Layer::Conv2D {
            name,
            kernel,
            c_out,
            c_in,
            k_h,
            k_w,
            bias,
            stride,
            padding,
            groups,
        } => {
            if *c_out != channels {
                return Err(Error::Mapping(format!(
                    "batchnorm has {channels} channels but conv `{name}` outputs {c_out}"
                )));
            }
            let per_out = kernel.len() / c_out;
            let mut k = kernel.clone();
            let mut b = bias.clone();
            for co in 0..*c_out {
                for i in 0..per_out {
                    k[co * per_out + i] *= scale[co];
                }
                b[co] = b[co] * scale[co] + shift[co];
            }
            Ok(Layer::Conv2D {
                name: name.clone(),
                kernel: k,
                c_out: *c_out,
                c_in: *c_in,
                k_h: *k_h,
                k_w: *k_w,
                bias: b,
                stride: *stride,
                padding: *padding,
                groups: *groups,
            })
        }
        other => Err(Error::Mapping(format!(
            "cannot fold batchnorm into `{}`",
            other.name()
        ))),
    }
}

/// Lower a model for inference: fold every batch-norm into its preceding
/// FC/conv layer; a batch-norm with no foldable predecessor becomes a 1x1
/// convolution with one channel per group (or a diagonal FC on flat inputs).
pub fn lower_for_inference(model: &NetworkModel) -> Result<NetworkModel> {
    let shapes = model.boundary_shapes()?;
    let mut out: Vec<Layer> = Vec::with_capacity(model.layers.len());
    for (idx, layer) in model.layers.iter().enumerate() {
        match layer {
            Layer::BatchNorm { name, gamma, .. } => {
                let foldable = matches!(
                    out.last(),
                    Some(Layer::FullyConnected { .. }) | Some(Layer::Conv2D { .. })
                );
                if foldable {
                    let prev = out.pop().unwrap();
                    out.push(fold_batchnorm(layer, &prev)?);
                } else {
                    // Standalone: per-channel affine as a grouped 1x1 conv,
                    // or a diagonal FC when the boundary is flat.
                    let in_shape = &shapes[idx];
                    let channels = gamma.len();
                    let (scale, shift) = bn_affine(layer);
                    if in_shape.len() == 3 {
                        out.push(Layer::Conv2D {
                            name: name.clone(),
                            kernel: scale.clone(),
                            c_out: channels,
                            c_in: channels,
                            k_h: 1,
                            k_w: 1,
                            bias: shift,
                            stride: (1, 1),
                            padding: (0, 0),
                            groups: channels,
                        });
                    } else {
                        let mut w = Matrix::zeros(channels, channels);
                        for c in 0..channels {
                            w.set(c, c, scale[c]);
                        }
                        out.push(Layer::FullyConnected {
                            name: name.clone(),
                            weights: w,
                            bias: shift,
                        });
                    }
                }
            }
            other => out.push(other.clone()),
        }
    }
    NetworkModel::new(model.name.clone(), model.input_shape.clone(), out)
}

fn bn_affine(bn: &Layer) -> (Vec<f64>, Vec<f64>) {
    let Layer::BatchNorm {
        gamma,
        beta,
        mean,
        variance,
        epsilon,
        ..
    } = bn
    else {
        unreachable!()
    };
    let scale: Vec<f64> = (0..gamma.len())
        .map(|c| gamma[c] / (variance[c] + epsilon).sqrt())
        .collect();
    let shift: Vec<f64> = (0..gamma.len())
        .map(|c| beta[c] - mean[c] * scale[c])
        .collect();
    (scale, shift)
}

// ---------------------------------------------------------------------------
// Activation layout
// ---------------------------------------------------------------------------

/// Which output-SRAM bank (physical PE port) holds each activation of a
/// layer boundary, in storage order. The model input and every
/// host-produced boundary are staged round-robin across the PEs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationLayout {
    pub banks: Vec<Vec<u32>>,
}

impl ActivationLayout {
    pub fn round_robin(count: usize, num_banks: usize) -> Self {
        let mut banks = vec![Vec::new(); num_banks];
        for id in 0..count {
            banks[id % num_banks].push(id as u32);
        }
        ActivationLayout { banks }
    }

    /// Inverse map: activation id -> bank.
    pub fn bank_of(&self, total: usize) -> Vec<u32> {
        let mut inv = vec![0u32; total];
        for (b, ids) in self.banks.iter().enumerate() {
            for &id in ids {
                inv[id as usize] = b as u32;
            }
        }
        inv
    }

    pub fn total(&self) -> usize {
        self.banks.iter().map(|b| b.len()).sum()
    }
}

// ---------------------------------------------------------------------------
// Mapped program
// ---------------------------------------------------------------------------

/// Attention datapath step executed on a head's PE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttnStep {
    ProjQ,
    ProjK,
    ProjV,
    Scores,
    Ctx,
    OutProj,
}

/// One PE's assignment within a compute phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComputeJob {
    pub pe: u32,
    pub work: Work,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Work {
    /// One block of a block-diagonal FC layer.
    FcBlock { block: usize },
    /// One (output position, group) pair of a case I/III convolution.
    ConvJob {
        oy: usize,
        ox: usize,
        group: usize,
        /// Latch slots in kernel order; None is a padding zero.
        latch: Vec<Option<u32>>,
    },
    /// One (output position, tile) partial of a case II convolution;
    /// produces wide partial sums, finalized on the host.
    ConvPartial {
        oy: usize,
        ox: usize,
        row_start: usize,
        row_end: usize,
        latch: Vec<Option<u32>>,
        /// Kernel column range covered by this tile.
        col_start: usize,
        col_end: usize,
    },
    /// One attention step for one head.
    Attn { head: usize, step: AttnStep },
}

/// Host-core work attached to a HostOp phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum HostWork {
    PoolLayer,
    ReluLayer,
    AttnSoftmax { heads: Vec<usize> },
    AttnHeadSum,
    /// Sum case II partials, add bias, apply activation, requantize.
    ConvFinalize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Phase {
    /// Deliver activations into PE input latches over the crossbar.
    RouteIn {
        layer: usize,
        fold: usize,
        demand: RoutingDemand,
        schedule: RoutingSchedule,
    },
    /// Rewrite PE weight SRAM rows between folds (or stage a local matrix).
    ReloadWeights { layer: usize, fold: usize, rows: u64 },
    Compute {
        layer: usize,
        fold: usize,
        jobs: Vec<ComputeJob>,
        /// One output row per cycle per PE.
        cycles_spatial: u64,
        /// One input per cycle per PE.
        cycles_temporal: u64,
    },
    HostOp {
        layer: usize,
        kind: HostWork,
        elements: u64,
        cycles: u64,
    },
    /// Layer barrier.
    Sync { layer: usize },
}

impl Phase {
    pub fn layer(&self) -> usize {
        match self {
            Phase::RouteIn { layer, .. }
            | Phase::ReloadWeights { layer, .. }
            | Phase::Compute { layer, .. }
            | Phase::HostOp { layer, .. }
            | Phase::Sync { layer } => *layer,
        }
    }
}

/// The command stream for one compressed model on one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappedProgram {
    pub model_name: String,
    pub num_pes: usize,
    pub phases: Vec<Phase>,
    /// Boundary layouts: `layouts[0]` is the staged input, `layouts[i+1]`
    /// the placement of layer i's outputs.
    pub layouts: Vec<ActivationLayout>,
    pub layer_names: Vec<String>,
}

impl MappedProgram {
    /// Total select-SRAM bits across all RouteIn phases.
    pub fn select_bits(&self) -> u64 {
        self.phases
            .iter()
            .map(|p| match p {
                Phase::RouteIn { schedule, .. } => {
                    crate::scheduler::emit_selects(schedule, schedule.num_sources).storage_bits()
                }
                _ => 0,
            })
            .sum()
    }
}

// ---------------------------------------------------------------------------
// FC mapping
// ---------------------------------------------------------------------------

/// Map one block-diagonal FC layer. Blocks are assigned round-robin to PEs;
/// more blocks than PEs serializes into folds with weight reloads between.
pub fn map_fc(
    layer: &BlockDiagonalLayer,
    cfg: &AcceleratorConfig,
    layer_idx: usize,
    input_layout: &ActivationLayout,
) -> Result<(Vec<Phase>, ActivationLayout)> {
    let nb = layer.mask.num_blocks;
    for k in 0..nb {
        let (r, c) = layer.mask.block_dims(k);
        if r > cfg.pe_rows || c > cfg.pe_cols {
            return Err(Error::BlockCapacity {
                block: k,
                rows: r,
                cols: c,
                pe_rows: cfg.pe_rows,
                pe_cols: cfg.pe_cols,
            });
        }
    }

    let bank_of = input_layout.bank_of(layer.mask.cols);
    let folds = nb.div_ceil(cfg.num_pes);
    let mut phases = Vec::new();
    let mut out_banks = vec![Vec::new(); cfg.num_pes];

    for fold in 0..folds {
        let blocks: Vec<usize> = (fold * cfg.num_pes..nb.min((fold + 1) * cfg.num_pes)).collect();
        if fold > 0 {
            let rows = blocks
                .iter()
                .map(|&b| layer.mask.block_dims(b).0 as u64)
                .max()
                .unwrap_or(0);
            phases.push(Phase::ReloadWeights {
                layer: layer_idx,
                fold,
                rows: rows * cfg.reload_cycles_per_row,
            });
        }

        // Demand: per destination PE, latch slots filled in block-column
        // order.
        let mut transfers = Vec::new();
        for (pe, &b) in blocks.iter().enumerate() {
            for &col in layer.mask.block_cols(b) {
                transfers.push(Transfer {
                    source: bank_of[col],
                    dest: pe as u32,
                    activation: col as u32,
                });
            }
        }
        let demand = RoutingDemand::new(cfg.num_pes, cfg.num_pes, transfers)?;
        let schedule = build_schedule(&demand);
        phases.push(Phase::RouteIn {
            layer: layer_idx,
            fold,
            demand,
            schedule,
        });

        let cycles_spatial = blocks
            .iter()
            .map(|&b| layer.mask.block_dims(b).0 as u64)
            .max()
            .unwrap_or(0);
        let cycles_temporal = blocks
            .iter()
            .map(|&b| layer.mask.block_dims(b).1 as u64)
            .max()
            .unwrap_or(0)
            .max(1);
        let jobs: Vec<ComputeJob> = blocks
            .iter()
            .enumerate()
            .map(|(pe, &b)| ComputeJob {
                pe: pe as u32,
                work: Work::FcBlock { block: b },
            })
            .collect();
        for (pe, &b) in blocks.iter().enumerate() {
            out_banks[pe].extend(layer.mask.block_rows(b).iter().map(|&r| r as u32));
        }
        phases.push(Phase::Compute {
            layer: layer_idx,
            fold,
            jobs,
            cycles_spatial,
            cycles_temporal,
        });
    }
    phases.push(Phase::Sync { layer: layer_idx });
    Ok((phases, ActivationLayout { banks: out_banks }))
}

// ---------------------------------------------------------------------------
// Convolution mapping
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConvCase {
    /// Whole kernel on one PE; PEs parallelize over output positions.
    I,
    /// Kernel split across PEs along input (and output row) dimensions;
    /// partial sums reduced on the host.
    II,
    /// Group convolution: each group's unrolled kernel is an exclusive
    /// block; (position, group) jobs parallelize over PEs.
    III,
}

/// Shape-level plan for one convolution on one config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvPlan {
    pub case: ConvCase,
    pub h_out: usize,
    pub w_out: usize,
    /// Rows per block in SRAM (= outputs per job).
    pub rows_per_job: usize,
    /// Latch width per job.
    pub cols_per_job: usize,
    /// Groups simultaneously resident per PE (case I/III).
    pub groups_per_load: usize,
    /// Weight-reload chunks (case I/III) or tile chunks (case II).
    pub chunks: usize,
    /// Total (position, group) or (position, tile) jobs.
    pub total_jobs: u64,
    /// Case II: column slices and row tiles.
    pub col_slices: usize,
    pub row_tiles: usize,
}

/// Pick the mapping case and fold structure for a convolution shape.
pub fn plan_conv(
    name: &str,
    c_in: usize,
    c_out: usize,
    k_h: usize,
    k_w: usize,
    groups: usize,
    h_out: usize,
    w_out: usize,
    cfg: &AcceleratorConfig,
) -> Result<ConvPlan> {
    let positions = (h_out * w_out) as u64;
    let unrolled_cols = k_h * k_w * c_in;
    if groups > 1 {
        // Case III: one block per group.
        let rows = c_out / groups;
        let cols = unrolled_cols / groups;
        if rows > cfg.pe_rows || cols > cfg.pe_cols {
            return Err(Error::Mapping(format!(
                "conv `{name}`: group kernel {rows}x{cols} exceeds PE capacity \
                 {}x{}; split the group across PEs (case II within group) or \
                 increase the group count",
                cfg.pe_rows, cfg.pe_cols
            )));
        }
        let per_load = (cfg.pe_rows / rows).max(1).min(groups);
        Ok(ConvPlan {
            case: ConvCase::III,
            h_out,
            w_out,
            rows_per_job: rows,
            cols_per_job: cols,
            groups_per_load: per_load,
            chunks: groups.div_ceil(per_load),
            total_jobs: positions * groups as u64,
            col_slices: 1,
            row_tiles: 1,
        })
    } else if unrolled_cols <= cfg.pe_cols && c_out <= cfg.pe_rows {
        // Case I: whole kernel on one PE, positions in parallel.
        Ok(ConvPlan {
            case: ConvCase::I,
            h_out,
            w_out,
            rows_per_job: c_out,
            cols_per_job: unrolled_cols,
            groups_per_load: 1,
            chunks: 1,
            total_jobs: positions,
            col_slices: 1,
            row_tiles: 1,
        })
    } else {
        // Case II: split the unrolled matrix along columns (and rows).
        let col_slices = unrolled_cols.div_ceil(cfg.pe_cols);
        let row_tiles = c_out.div_ceil(cfg.pe_rows);
        let tiles = col_slices * row_tiles;
        Ok(ConvPlan {
            case: ConvCase::II,
            h_out,
            w_out,
            rows_per_job: c_out.min(cfg.pe_rows),
            cols_per_job: unrolled_cols.min(cfg.pe_cols),
            groups_per_load: 1,
            chunks: tiles.div_ceil(cfg.num_pes),
            total_jobs: positions * tiles as u64,
            col_slices,
            row_tiles,
        })
    }
}

/// Latch slot ids for one conv window: kernel order is channels-outer,
/// spatial row-major inner (matching kernel memory layout). Out-of-bounds
/// positions are padding zeros.
fn conv_window_ids(
    conv: &ConvLayer,
    in_shape: &[usize],
    oy: usize,
    ox: usize,
    group: usize,
    col_range: Option<(usize, usize)>,
) -> Vec<Option<u32>> {
    let (h, w) = (in_shape[1], in_shape[2]);
    let cig = conv.c_in / conv.groups;
    let mut ids = Vec::new();
    let mut col = 0usize;
    let (lo, hi) = col_range.unwrap_or((0, cig * conv.k_h * conv.k_w));
    for ci in 0..cig {
        let ci_abs = group * cig + ci;
        for ky in 0..conv.k_h {
            for kx in 0..conv.k_w {
                if col >= lo && col < hi {
                    let iy = (oy * conv.stride.0 + ky) as isize - conv.padding.0 as isize;
                    let ix = (ox * conv.stride.1 + kx) as isize - conv.padding.1 as isize;
                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                        ids.push(None);
                    } else {
                        ids.push(Some(((ci_abs * h + iy as usize) * w + ix as usize) as u32));
                    }
                }
                col += 1;
            }
        }
    }
    ids
}

#[allow(clippy::too_many_arguments)]
fn map_conv_layer(
    conv: &ConvLayer,
    cfg: &AcceleratorConfig,
    layer_idx: usize,
    in_shape: &[usize],
    out_shape: &[usize],
    input_layout: &ActivationLayout,
) -> Result<(Vec<Phase>, ActivationLayout)> {
    let plan = plan_conv(
        &conv.name,
        conv.c_in,
        conv.c_out,
        conv.k_h,
        conv.k_w,
        conv.groups,
        out_shape[1],
        out_shape[2],
        cfg,
    )?;
    let total_in: usize = in_shape.iter().product();
    let bank_of = input_layout.bank_of(total_in);
    let mut phases = Vec::new();
    let mut out_banks = vec![Vec::new(); cfg.num_pes];
    let (h_out, w_out) = (plan.h_out, plan.w_out);

    match plan.case {
        ConvCase::I | ConvCase::III {} => {
            let groups = conv.groups;
            let cog = conv.c_out / groups;
            let mut fold_counter = 0usize;
            for chunk in 0..plan.chunks {
                let g_lo = chunk * plan.groups_per_load;
                let g_hi = ((chunk + 1) * plan.groups_per_load).min(groups);
                let chunk_groups = g_hi - g_lo;
                // The initial load is part of model setup; reloads between
                // chunks cost SRAM rewrite cycles.
                if chunk > 0 {
                    phases.push(Phase::ReloadWeights {
                        layer: layer_idx,
                        fold: fold_counter,
                        rows: (chunk_groups * plan.rows_per_job) as u64
                            * cfg.reload_cycles_per_row,
                    });
                }
                // Jobs: (position, group) pairs, positions row-major.
                let jobs_total = h_out * w_out * chunk_groups;
                let mut j = 0usize;
                while j < jobs_total {
                    let fold_jobs = (jobs_total - j).min(cfg.num_pes);
                    let mut transfers = Vec::new();
                    let mut jobs = Vec::new();
                    for pe in 0..fold_jobs {
                        let job = j + pe;
                        let pos = job / chunk_groups;
                        let grp = g_lo + job % chunk_groups;
                        let (oy, ox) = (pos / w_out, pos % w_out);
                        let latch = conv_window_ids(conv, in_shape, oy, ox, grp, None);
                        for id in latch.iter().flatten() {
                            transfers.push(Transfer {
                                source: bank_of[*id as usize],
                                dest: pe as u32,
                                activation: *id,
                            });
                        }
                        for co_local in 0..cog {
                            let co = grp * cog + co_local;
                            out_banks[pe].push(((co * h_out + oy) * w_out + ox) as u32);
                        }
                        jobs.push(ComputeJob {
                            pe: pe as u32,
                            work: Work::ConvJob {
                                oy,
                                ox,
                                group: grp,
                                latch,
                            },
                        });
                    }
                    let demand = RoutingDemand::new(cfg.num_pes, cfg.num_pes, transfers)?;
                    let schedule = build_schedule(&demand);
                    phases.push(Phase::RouteIn {
                        layer: layer_idx,
                        fold: fold_counter,
                        demand,
                        schedule,
                    });
                    phases.push(Phase::Compute {
                        layer: layer_idx,
                        fold: fold_counter,
                        jobs,
                        cycles_spatial: plan.rows_per_job as u64,
                        cycles_temporal: plan.cols_per_job as u64,
                    });
                    fold_counter += 1;
                    j += fold_jobs;
                }
            }
        }
        ConvCase::II => {
            // Tiles pinned to PEs per chunk; every position visits each
            // chunk; host reduces partials afterwards.
            let cig = conv.c_in; // groups == 1
            let unrolled = cig * conv.k_h * conv.k_w;
            let mut tiles = Vec::new();
            for rt in 0..plan.row_tiles {
                for cs in 0..plan.col_slices {
                    let row_start = rt * cfg.pe_rows;
                    let row_end = ((rt + 1) * cfg.pe_rows).min(conv.c_out);
                    let col_start = cs * cfg.pe_cols;
                    let col_end = ((cs + 1) * cfg.pe_cols).min(unrolled);
                    tiles.push((row_start, row_end, col_start, col_end));
                }
            }
            let mut fold_counter = 0usize;
            for chunk_tiles in tiles.chunks(cfg.num_pes) {
                if fold_counter > 0 {
                    let rows = chunk_tiles
                        .iter()
                        .map(|t| (t.1 - t.0) as u64)
                        .max()
                        .unwrap_or(0);
                    phases.push(Phase::ReloadWeights {
                        layer: layer_idx,
                        fold: fold_counter,
                        rows: rows * cfg.reload_cycles_per_row,
                    });
                }
                for oy in 0..h_out {
                    for ox in 0..w_out {
                        let mut transfers = Vec::new();
                        let mut jobs = Vec::new();
                        for (pe, &(rs, re, cs, ce)) in chunk_tiles.iter().enumerate() {
                            let latch =
                                conv_window_ids(conv, in_shape, oy, ox, 0, Some((cs, ce)));
                            for id in latch.iter().flatten() {
                                transfers.push(Transfer {
                                    source: bank_of[*id as usize],
                                    dest: pe as u32,
                                    activation: *id,
                                });
                            }
                            jobs.push(ComputeJob {
                                pe: pe as u32,
                                work: Work::ConvPartial {
                                    oy,
                                    ox,
                                    row_start: rs,
                                    row_end: re,
                                    latch,
                                    col_start: cs,
                                    col_end: ce,
                                },
                            });
                        }
                        // The same activation may feed two tiles of the same
                        // window; deduplicate per destination.
                        transfers.sort();
                        transfers.dedup();
                        let demand = RoutingDemand::new(cfg.num_pes, cfg.num_pes, transfers)?;
                        let schedule = build_schedule(&demand);
                        phases.push(Phase::RouteIn {
                            layer: layer_idx,
                            fold: fold_counter,
                            demand,
                            schedule,
                        });
                        let rows = chunk_tiles
                            .iter()
                            .map(|t| (t.1 - t.0) as u64)
                            .max()
                            .unwrap_or(0);
                        let cols = chunk_tiles
                            .iter()
                            .map(|t| (t.3 - t.2) as u64)
                            .max()
                            .unwrap_or(0);
                        phases.push(Phase::Compute {
                            layer: layer_idx,
                            fold: fold_counter,
                            jobs,
                            cycles_spatial: rows,
                            cycles_temporal: cols,
                        });
                    }
                }
                fold_counter += 1;
            }
            // Host: one add per partial-sum element per extra slice, then
            // bias + activation + requantization per output element.
            let outputs = (conv.c_out * h_out * w_out) as u64;
            let extra = (plan.col_slices as u64).saturating_sub(1);
            let adds = extra * outputs;
            let cycles = adds * cfg.host_op_cycles.add + outputs * cfg.host_op_cycles.quantize;
            phases.push(Phase::HostOp {
                layer: layer_idx,
                kind: HostWork::ConvFinalize,
                elements: outputs,
                cycles,
            });
            // Host-produced outputs are restaged round-robin.
            out_banks = ActivationLayout::round_robin(outputs as usize, cfg.num_pes).banks;
        }
    }

    phases.push(Phase::Sync { layer: layer_idx });
    Ok((phases, ActivationLayout { banks: out_banks }))
}

// ---------------------------------------------------------------------------
// Pool / relu / attention mapping
// ---------------------------------------------------------------------------

fn map_pool_layer(
    pool: &PoolLayer,
    cfg: &AcceleratorConfig,
    layer_idx: usize,
    out_shape: &[usize],
) -> (Vec<Phase>, ActivationLayout) {
    let outputs: usize = out_shape.iter().product();
    let window = pool.window.0 * pool.window.1;
    // A 1x1 window at stride 1 is a passthrough: zero host work.
    let passthrough = pool.window == (1, 1) && pool.stride == (1, 1);
    let elements = if passthrough {
        0
    } else {
        (outputs * window) as u64
    };
    let phases = vec![
        Phase::HostOp {
            layer: layer_idx,
            kind: HostWork::PoolLayer,
            elements,
            cycles: elements * cfg.host_op_cycles.compare,
        },
        Phase::Sync { layer: layer_idx },
    ];
    (phases, ActivationLayout::round_robin(outputs, cfg.num_pes))
}

fn map_attention_layer(
    attn: &AttentionLayer,
    cfg: &AcceleratorConfig,
    layer_idx: usize,
    in_shape: &[usize],
    input_layout: &ActivationLayout,
) -> Result<(Vec<Phase>, ActivationLayout)> {
    let seq = in_shape[0];
    let (dm, dk) = (attn.d_model, attn.d_k);
    // Every operand matrix must fit the PE at its time of use.
    let checks = [
        (dk, dm, "projection (d_k x d_model)"),
        (seq, dk, "score operand (seq x d_k)"),
        (seq, seq, "probability operand (seq x seq)"),
        (dm, dk, "output projection (d_model x d_k)"),
    ];
    for (r, c, what) in checks {
        if r > cfg.pe_rows || c > cfg.pe_cols {
            return Err(Error::Mapping(format!(
                "attention `{}`: {what} is {r}x{c}, exceeding PE capacity {}x{}",
                attn.name, cfg.pe_rows, cfg.pe_cols
            )));
        }
    }

    let n_heads = attn.heads.len();
    let total_in = seq * dm;
    let bank_of = input_layout.bank_of(total_in);
    let folds = n_heads.div_ceil(cfg.num_pes);
    let mut phases = Vec::new();

    for fold in 0..folds {
        let heads: Vec<usize> = (fold * cfg.num_pes..n_heads.min((fold + 1) * cfg.num_pes)).collect();
        if fold > 0 {
            phases.push(Phase::ReloadWeights {
                layer: layer_idx,
                fold,
                rows: (3 * dk + dm) as u64 * cfg.reload_cycles_per_row,
            });
        }
        // Broadcast the full input to every active head PE.
        let mut transfers = Vec::new();
        for (pe, _) in heads.iter().enumerate() {
            for id in 0..total_in {
                transfers.push(Transfer {
                    source: bank_of[id],
                    dest: pe as u32,
                    activation: id as u32,
                });
            }
        }
        let demand = RoutingDemand::new(cfg.num_pes, cfg.num_pes, transfers)?;
        let schedule = build_schedule(&demand);
        phases.push(Phase::RouteIn {
            layer: layer_idx,
            fold,
            demand,
            schedule,
        });

        let step_phase = |step: AttnStep, spatial: u64, temporal: u64| Phase::Compute {
            layer: layer_idx,
            fold,
            jobs: heads
                .iter()
                .enumerate()
                .map(|(pe, &h)| ComputeJob {
                    pe: pe as u32,
                    work: Work::Attn { head: h, step },
                })
                .collect(),
            cycles_spatial: spatial,
            cycles_temporal: temporal,
        };
        let t = seq as u64;
        phases.push(step_phase(AttnStep::ProjQ, t * dk as u64, t * dm as u64));
        phases.push(step_phase(AttnStep::ProjK, t * dk as u64, t * dm as u64));
        phases.push(step_phase(AttnStep::ProjV, t * dk as u64, t * dm as u64));
        // Q moves from output SRAM into the weight array for the
        // activation-by-activation multiply.
        phases.push(Phase::ReloadWeights {
            layer: layer_idx,
            fold,
            rows: t * cfg.reload_cycles_per_row,
        });
        phases.push(step_phase(AttnStep::Scores, t * t, t * dk as u64));
        let sm_elems = (seq * seq * heads.len()) as u64;
        phases.push(Phase::HostOp {
            layer: layer_idx,
            kind: HostWork::AttnSoftmax {
                heads: heads.clone(),
            },
            elements: sm_elems,
            cycles: sm_elems * cfg.host_op_cycles.softmax_element,
        });
        phases.push(Phase::ReloadWeights {
            layer: layer_idx,
            fold,
            rows: t * cfg.reload_cycles_per_row,
        });
        phases.push(step_phase(AttnStep::Ctx, t * dk as u64, t * t));
        phases.push(Phase::ReloadWeights {
            layer: layer_idx,
            fold,
            rows: dm as u64 * cfg.reload_cycles_per_row,
        });
        phases.push(step_phase(AttnStep::OutProj, t * dm as u64, t * dk as u64));
    }

    // Head summation (and saturation) on the host.
    let out_elems = (seq * dm) as u64;
    let sum_elems = out_elems * n_heads as u64;
    phases.push(Phase::HostOp {
        layer: layer_idx,
        kind: HostWork::AttnHeadSum,
        elements: sum_elems,
        cycles: sum_elems * cfg.host_op_cycles.add,
    });
    phases.push(Phase::Sync { layer: layer_idx });
    Ok((
        phases,
        ActivationLayout::round_robin(out_elems as usize, cfg.num_pes),
    ))
}

// ---------------------------------------------------------------------------
// Whole-model mapping
// ---------------------------------------------------------------------------

/// Lower a compressed model to a phase-level program for `cfg`.
pub fn map_model(cm: &CompressedModel, cfg: &AcceleratorConfig) -> Result<MappedProgram> {
    cfg.validate()?;
    // The datapath width is fixed in silicon; the model must match it.
    for l in &cm.layers {
        let bits = match l {
            CompressedLayer::Fc(f) => f.quant.as_ref().map(|q| q.weight_bits),
            CompressedLayer::Conv(c) => Some(c.quant.weight_bits),
            CompressedLayer::Attention(a) => Some(a.quant.weight_bits),
            _ => None,
        };
        if let Some(b) = bits {
            if b != cfg.weight_bits {
                return Err(Error::Mapping(format!(
                    "layer `{}` is quantized to {b}-bit weights but the \
                     accelerator datapath is {}-bit",
                    l.name(),
                    cfg.weight_bits
                )));
            }
        }
    }

    let (model, _) = crate::compress::unpack_to_model(cm)?;
    let mut shapes = vec![cm.input_shape.clone()];
    // Walk shapes over compressed layers (relu folded away keeps shape).
    let mut cur = cm.input_shape.clone();
    for cl in &cm.layers {
        cur = compressed_out_shape(cl, &cur, &model)?;
        shapes.push(cur.clone());
    }

    let input_count: usize = cm.input_shape.iter().product();
    let mut layouts = vec![ActivationLayout::round_robin(input_count, cfg.num_pes)];
    let mut phases = Vec::new();
    let mut names = Vec::new();

    for (idx, cl) in cm.layers.iter().enumerate() {
        names.push(cl.name().to_string());
        let in_layout = layouts.last().unwrap().clone();
        let (mut ph, layout) = match cl {
            CompressedLayer::Fc(f) => map_fc(f, cfg, idx, &in_layout)?,
            CompressedLayer::Conv(c) => {
                map_conv_layer(c, cfg, idx, &shapes[idx], &shapes[idx + 1], &in_layout)?
            }
            CompressedLayer::Pool(p) => map_pool_layer(p, cfg, idx, &shapes[idx + 1]),
            CompressedLayer::Attention(a) => {
                map_attention_layer(a, cfg, idx, &shapes[idx], &in_layout)?
            }
            CompressedLayer::Relu { .. } => {
                let n: usize = shapes[idx].iter().product();
                (
                    vec![
                        Phase::HostOp {
                            layer: idx,
                            kind: HostWork::ReluLayer,
                            elements: n as u64,
                            cycles: n as u64 * cfg.host_op_cycles.compare,
                        },
                        Phase::Sync { layer: idx },
                    ],
                    ActivationLayout::round_robin(n, cfg.num_pes),
                )
            }
        };
        phases.append(&mut ph);
        layouts.push(layout);
    }

    Ok(MappedProgram {
        model_name: cm.name.clone(),
        num_pes: cfg.num_pes,
        phases,
        layouts,
        layer_names: names,
    })
}

pub(crate) fn compressed_out_shape(
    cl: &CompressedLayer,
    in_shape: &[usize],
    model: &NetworkModel,
) -> Result<Vec<usize>> {
    // Reuse layer shape logic through the unpacked model's matching layer.
    match cl {
        CompressedLayer::Fc(f) => Ok(vec![f.mask.rows]),
        CompressedLayer::Relu { .. } => Ok(in_shape.to_vec()),
        CompressedLayer::Pool(p) => {
            let l = Layer::MaxPool2D {
                name: p.name.clone(),
                window: p.window,
                stride: p.stride,
            };
            l.output_shape(in_shape)
        }
        CompressedLayer::Conv(c) => {
            let l = model
                .layers
                .iter()
                .find(|l| l.name() == c.name)
                .ok_or_else(|| Error::Mapping(format!("conv `{}` missing", c.name)))?;
            l.output_shape(in_shape)
        }
        CompressedLayer::Attention(_) => Ok(in_shape.to_vec()),
    }
}

// ---------------------------------------------------------------------------
// Shape-level mapping (no weights)
// ---------------------------------------------------------------------------

/// Cycle and utilization estimate for one layer of a shape manifest.
///
/// Compute, reload, and host cycles are exact fold arithmetic; route cycles
/// for convolutions use one scheduled representative fold per fold class
/// (FC route cycles are exact, from real per-fold schedules over a seeded
/// mask).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeLayerReport {
    pub name: String,
    pub kind: String,
    pub conv_case: Option<ConvCase>,
    pub blocks: Option<usize>,
    pub folds: u64,
    pub jobs: u64,
    pub route_cycles: u64,
    pub compute_cycles: u64,
    pub reload_cycles: u64,
    pub host_cycles: u64,
    pub total_cycles: u64,
    /// PE busy share during compute phases (0 for host-only layers).
    pub utilization: f64,
    /// Stored nonzero MACs per inference for this layer.
    pub nnz_macs: u64,
    /// Dense MACs the uncompressed layer would need.
    pub dense_macs: u64,
}

/// Exact fold/route arithmetic for a block-diagonal FC shape. A seeded mask
/// supplies the permutations; the input is staged round-robin.
pub fn plan_fc_shape(
    name: &str,
    rows: usize,
    cols: usize,
    blocks: usize,
    cfg: &AcceleratorConfig,
    seed: u64,
) -> Result<ShapeLayerReport> {
    let mask = crate::pruner::generate_mask(rows, cols, blocks, seed)?;
    for k in 0..blocks {
        let (r, c) = mask.block_dims(k);
        if r > cfg.pe_rows || c > cfg.pe_cols {
            return Err(Error::BlockCapacity {
                block: k,
                rows: r,
                cols: c,
                pe_rows: cfg.pe_rows,
                pe_cols: cfg.pe_cols,
            });
        }
    }
    let layout = ActivationLayout::round_robin(cols, cfg.num_pes);
    let bank_of = layout.bank_of(cols);
    let folds = blocks.div_ceil(cfg.num_pes);
    let mut route = 0u64;
    let mut compute = 0u64;
    let mut reload = 0u64;
    let mut busy = 0u64;
    for fold in 0..folds {
        let fold_blocks: Vec<usize> =
            (fold * cfg.num_pes..blocks.min((fold + 1) * cfg.num_pes)).collect();
        let mut transfers = Vec::new();
        for (pe, &b) in fold_blocks.iter().enumerate() {
            for &col in mask.block_cols(b) {
                transfers.push(Transfer {
                    source: bank_of[col],
                    dest: pe as u32,
                    activation: col as u32,
                });
            }
        }
        let demand = RoutingDemand::new(cfg.num_pes, cfg.num_pes, transfers)?;
        route += build_schedule(&demand).len();
        let fold_rows = fold_blocks
            .iter()
            .map(|&b| mask.block_dims(b).0 as u64)
            .max()
            .unwrap_or(0);
        compute += fold_rows;
        busy += fold_blocks
            .iter()
            .map(|&b| mask.block_dims(b).0 as u64)
            .sum::<u64>();
        if fold > 0 {
            reload += fold_rows * cfg.reload_cycles_per_row;
        }
    }
    let nnz = mask.count_nonzero() as u64;
    Ok(ShapeLayerReport {
        name: name.to_string(),
        kind: "fc".into(),
        conv_case: None,
        blocks: Some(blocks),
        folds: folds as u64,
        jobs: blocks as u64,
        route_cycles: route,
        compute_cycles: compute,
        reload_cycles: reload,
        host_cycles: 0,
        total_cycles: route + compute + reload,
        utilization: if compute > 0 {
            busy as f64 / (compute * cfg.num_pes as u64) as f64
        } else {
            0.0
        },
        nnz_macs: nnz,
        dense_macs: rows as u64 * cols as u64,
    })
}

fn conv_shape_report(
    name: &str,
    c_in: usize,
    c_out: usize,
    k: (usize, usize),
    stride: (usize, usize),
    padding: (usize, usize),
    groups: usize,
    in_hw: (usize, usize),
    cfg: &AcceleratorConfig,
) -> Result<(ShapeLayerReport, (usize, usize))> {
    let h_out = (in_hw.0 + 2 * padding.0 - k.0) / stride.0 + 1;
    let w_out = (in_hw.1 + 2 * padding.1 - k.1) / stride.1 + 1;
    let plan = plan_conv(name, c_in, c_out, k.0, k.1, groups, h_out, w_out, cfg)?;
    let positions = (h_out * w_out) as u64;

    let (mut folds, mut compute, mut reload, mut busy_jobs, mut host) = (0u64, 0u64, 0u64, 0u64, 0u64);
    match plan.case {
        ConvCase::I | ConvCase::III => {
            for chunk in 0..plan.chunks {
                let g_lo = chunk * plan.groups_per_load;
                let g_hi = ((chunk + 1) * plan.groups_per_load).min(groups.max(1));
                let chunk_jobs = positions * (g_hi - g_lo) as u64;
                let chunk_folds = chunk_jobs.div_ceil(cfg.num_pes as u64);
                folds += chunk_folds;
                compute += chunk_folds * plan.rows_per_job as u64;
                busy_jobs += chunk_jobs * plan.rows_per_job as u64;
                if chunk > 0 {
                    reload += ((g_hi - g_lo) * plan.rows_per_job) as u64
                        * cfg.reload_cycles_per_row;
                }
            }
        }
        ConvCase::II => {
            let tiles = (plan.col_slices * plan.row_tiles) as u64;
            let chunk_count = tiles.div_ceil(cfg.num_pes as u64);
            folds = chunk_count * positions;
            compute = folds * plan.rows_per_job as u64;
            busy_jobs = positions * tiles * plan.rows_per_job as u64;
            reload = chunk_count.saturating_sub(1)
                * plan.rows_per_job as u64
                * cfg.reload_cycles_per_row;
            let outputs = c_out as u64 * positions;
            let adds = (plan.col_slices as u64).saturating_sub(1) * outputs;
            host = adds * cfg.host_op_cycles.add + outputs * cfg.host_op_cycles.quantize;
        }
    }

    // One scheduled representative fold prices routing: every active PE
    // pulls a full window from round-robin banks.
    let window = plan.cols_per_job.min(cfg.pe_cols);
    let mut transfers = Vec::new();
    for pe in 0..cfg.num_pes {
        for i in 0..window {
            let id = (pe * window + i) as u32;
            transfers.push(Transfer {
                source: id % cfg.num_pes as u32,
                dest: pe as u32,
                activation: id,
            });
        }
    }
    let demand = RoutingDemand::new(cfg.num_pes, cfg.num_pes, transfers)?;
    let rep_route = build_schedule(&demand).len();
    let route = rep_route * folds;

    let cig = c_in / groups.max(1);
    let nnz = (c_out * cig * k.0 * k.1) as u64 * positions;
    let dense = (c_out * c_in * k.0 * k.1) as u64 * positions;
    Ok((
        ShapeLayerReport {
            name: name.to_string(),
            kind: "conv".into(),
            conv_case: Some(plan.case),
            blocks: None,
            folds,
            jobs: plan.total_jobs,
            route_cycles: route,
            compute_cycles: compute,
            reload_cycles: reload,
            host_cycles: host,
            total_cycles: route + compute + reload + host,
            utilization: if compute > 0 {
                busy_jobs as f64 / (compute * cfg.num_pes as u64) as f64
            } else {
                0.0
            },
            nnz_macs: nnz,
            dense_macs: dense,
        },
        (h_out, w_out),
    ))
}

/// Map a layer-shape manifest: per-layer cycle and utilization reports.
pub fn map_shape_manifest(
    manifest: &crate::format::ShapeManifest,
    cfg: &AcceleratorConfig,
    seed: u64,
) -> Result<Vec<ShapeLayerReport>> {
    cfg.validate()?;
    let mut reports = Vec::new();
    let mut hw = manifest
        .input
        .as_ref()
        .map(|s| (s[1], s[2]))
        .unwrap_or((1, 1));
    let mut channels = manifest.input.as_ref().map(|s| s[0]).unwrap_or(0);
    for (i, layer) in manifest.layers.iter().enumerate() {
        match layer {
            crate::format::ShapeLayer::Conv {
                name,
                c_in,
                c_out,
                k,
                stride,
                padding,
                groups,
            } => {
                if channels != 0 && channels != *c_in {
                    return Err(Error::Mapping(format!(
                        "conv `{name}` expects {c_in} channels, previous layer left {channels}"
                    )));
                }
                let (report, out_hw) = conv_shape_report(
                    name, *c_in, *c_out, *k, *stride, *padding, *groups, hw, cfg,
                )?;
                reports.push(report);
                hw = out_hw;
                channels = *c_out;
            }
            crate::format::ShapeLayer::Pool { name, window, stride } => {
                let h_out = (hw.0 - window.0) / stride.0 + 1;
                let w_out = (hw.1 - window.1) / stride.1 + 1;
                let outputs = (channels.max(1) * h_out * w_out) as u64;
                let elements = outputs * (window.0 * window.1) as u64;
                reports.push(ShapeLayerReport {
                    name: name.clone(),
                    kind: "pool".into(),
                    conv_case: None,
                    blocks: None,
                    folds: 0,
                    jobs: 0,
                    route_cycles: 0,
                    compute_cycles: 0,
                    reload_cycles: 0,
                    host_cycles: elements * cfg.host_op_cycles.compare,
                    total_cycles: elements * cfg.host_op_cycles.compare,
                    utilization: 0.0,
                    nnz_macs: 0,
                    dense_macs: 0,
                });
                hw = (h_out, w_out);
            }
            crate::format::ShapeLayer::Fc { name, rows, cols, blocks } => {
                let blocks = blocks.unwrap_or_else(|| {
                    rows.div_ceil(cfg.pe_rows).max(cols.div_ceil(cfg.pe_cols)).max(1)
                });
                reports.push(plan_fc_shape(
                    name,
                    *rows,
                    *cols,
                    blocks,
                    cfg,
                    crate::compress::fan_seed(seed, i as u64),
                )?);
                channels = 0;
            }
        }
    }
    Ok(reports)
}

/// Pretty-print a program as a phase listing.
pub fn dump_program(program: &MappedProgram) -> String {
    use std::fmt::Write as _;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "program `{}` on {} PEs, {} phases",
        program.model_name,
        program.num_pes,
        program.phases.len()
    );
    for (i, p) in program.phases.iter().enumerate() {
        let layer = &program.layer_names[p.layer()];
        match p {
            Phase::RouteIn { fold, demand, schedule, .. } => {
                let _ = writeln!(
                    s,
                    "{i:>5}  route-in   {layer} fold {fold}: {} transfers in {} cycles",
                    demand.transfers.len(),
                    schedule.len()
                );
            }
            Phase::ReloadWeights { fold, rows, .. } => {
                let _ = writeln!(s, "{i:>5}  reload     {layer} fold {fold}: {rows} cycles");
            }
            Phase::Compute {
                fold,
                jobs,
                cycles_spatial,
                cycles_temporal,
                ..
            } => {
                let _ = writeln!(
                    s,
                    "{i:>5}  compute    {layer} fold {fold}: {} PEs busy, {cycles_spatial} cycles (spatial) / {cycles_temporal} (temporal)",
                    jobs.len()
                );
            }
            Phase::HostOp { kind, elements, cycles, .. } => {
                let _ = writeln!(
                    s,
                    "{i:>5}  host       {layer}: {kind:?}, {elements} elements, {cycles} cycles"
                );
            }
            Phase::Sync { .. } => {
                let _ = writeln!(s, "{i:>5}  sync       {layer}");
            }
        }
    }
    s
}
