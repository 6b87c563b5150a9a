//! Cycle-accurate, bit-accurate execution of a mapped program.
//!
//! PEs hold quantized weight codes; activations travel as integer codes;
//! MACs accumulate exactly in wide integers, so the only rounding points are
//! the shared boundary quantizations. An activation routed in cycle t is
//! readable from t+1: phases are barriers by default, which satisfies the
//! rule by construction (an optional config flag lets RouteIn overlap the
//! preceding compute phase of the same layer, double-buffered).

use serde::{Deserialize, Serialize};

use crate::compress::{CompressedLayer, CompressedModel};
pub use crate::costmodel::PeMode;
use crate::costmodel::{ceil_log2, normalized_ops_per_cycle};
use crate::error::{Error, Result};
use crate::eval::softmax_in_place;
use crate::mapper::{
    AcceleratorConfig, AttnStep, HostWork, MappedProgram, Phase, Work,
};
use crate::quant::{
    self, accumulator_bits, bias_code, quantize_uniform, requant_code, requant_multiplier,
    QuantSpec, WeightQuant,
};
use crate::tensor::{Tensor, TensorData};

/// Stage count of a reduction tree over `n` inputs.
pub fn adder_tree_stages(n: usize) -> u32 {
    ceil_log2(n as u64)
}

/// Exact pairwise-reduction sum. Odd elements pass through a stage
/// unwidened; the result equals sequential summation exactly (integer
/// arithmetic is associative). Small inputs reduce in a stack buffer.
pub fn adder_tree_eval(products: &[i64]) -> i64 {
    if products.is_empty() {
        return 0;
    }
    if products.len() <= 8 {
        let mut buf = [0i64; 8];
        buf[..products.len()].copy_from_slice(products);
        return reduce_in_place(&mut buf, products.len());
    }
    if products.len() <= 64 {
        let mut buf = [0i64; 64];
        buf[..products.len()].copy_from_slice(products);
        return reduce_in_place(&mut buf, products.len());
    }
    let mut level: Vec<i64> = products.to_vec();
    let n = level.len();
    reduce_in_place(&mut level, n)
}

#[inline]
fn reduce_in_place(buf: &mut [i64], mut n: usize) -> i64 {
    while n > 1 {
        let half = n / 2;
        for i in 0..half {
            buf[i] = buf[2 * i] + buf[2 * i + 1];
        }
        if n % 2 == 1 {
            buf[half] = buf[n - 1];
        }
        n = n.div_ceil(2);
    }
    buf[0]
}

/// Widening adder tree descriptor: stage s (1-based) adds operands of
/// `2*weight_bits + s - 1` bits; the final stage output is
/// `2*weight_bits + stages` bits wide.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdderTree {
    pub inputs: usize,
    pub stages: u32,
    pub stage_operand_bits: Vec<u32>,
}

impl AdderTree {
    pub fn new(inputs: usize, weight_bits: u32) -> Self {
        let stages = adder_tree_stages(inputs);
        AdderTree {
            inputs,
            stages,
            stage_operand_bits: (1..=stages).map(|s| 2 * weight_bits + s - 1).collect(),
        }
    }
}

/// One PE's execution context for a block of work.
#[derive(Debug, Clone)]
pub struct PEState {
    /// Weight SRAM rows as integer codes.
    pub weights: Vec<Vec<i64>>,
    /// Bias per row, already in accumulator units.
    pub bias: Vec<i64>,
    /// Input activation latch.
    pub latch: Vec<i64>,
    pub row_cursor: usize,
    pub mode: PeMode,
    /// Partial-sum register file (temporal mode only).
    pub psums: Vec<i64>,
    pub acc_bits: u32,
}

impl PEState {
    pub fn new(weights: Vec<Vec<i64>>, bias: Vec<i64>, mode: PeMode, acc_bits: u32) -> Self {
        let rows = weights.len();
        PEState {
            weights,
            bias,
            latch: Vec::new(),
            row_cursor: 0,
            mode,
            psums: if mode == PeMode::Temporal {
                vec![0; rows]
            } else {
                Vec::new()
            },
            acc_bits,
        }
    }
}

fn check_acc(acc: i64, acc_bits: u32, cycle: u64) -> Result<i64> {
    let lim = 1i64 << (acc_bits - 1);
    if acc >= lim || acc < -lim {
        return Err(Error::SimFault {
            cycle,
            message: format!("accumulator overflow: {acc} does not fit {acc_bits} bits"),
        });
    }
    Ok(acc)
}

/// Spatial-mode output step: one row read, one output activation per call
/// (= one cycle). Returns the quantized activation code.
pub fn pe_output_step(
    state: &mut PEState,
    row: usize,
    relu: bool,
    requant_mult: f64,
    activation_bits: u32,
) -> Result<i64> {
    if row >= state.weights.len() {
        return Err(Error::SimFault {
            cycle: state.row_cursor as u64,
            message: format!("row {row} out of range ({} rows)", state.weights.len()),
        });
    }
    let products: Vec<i64> = state.weights[row]
        .iter()
        .zip(&state.latch)
        .map(|(w, a)| w * a)
        .collect();
    let mut acc = adder_tree_eval(&products) + state.bias[row];
    acc = check_acc(acc, state.acc_bits, state.row_cursor as u64)?;
    if relu {
        acc = acc.max(0);
    }
    state.row_cursor = row + 1;
    Ok(requant_code(acc, requant_mult, activation_bits))
}

/// Temporal-mode block execution: streams one input per cycle into the
/// partial-sum register file; outputs become available after the last input.
fn pe_temporal_block(
    state: &mut PEState,
    relu: bool,
    requant_mult: f64,
    activation_bits: u32,
) -> Result<Vec<i64>> {
    let rows = state.weights.len();
    for (j, &a) in state.latch.iter().enumerate() {
        for r in 0..rows {
            state.psums[r] = check_acc(
                state.psums[r] + state.weights[r][j] * a,
                state.acc_bits,
                j as u64,
            )?;
        }
    }
    (0..rows)
        .map(|r| {
            let mut acc = check_acc(state.psums[r] + state.bias[r], state.acc_bits, 0)?;
            if relu {
                acc = acc.max(0);
            }
            Ok(requant_code(acc, requant_mult, activation_bits))
        })
        .collect()
}

/// Run a block: spatial iterates rows through the tree, temporal streams
/// inputs. Both produce identical bits.
fn run_block(
    weights: Vec<Vec<i64>>,
    bias: Vec<i64>,
    latch: Vec<i64>,
    mode: PeMode,
    acc_bits: u32,
    relu: bool,
    requant_mult: f64,
    activation_bits: u32,
) -> Result<Vec<i64>> {
    let rows = weights.len();
    let mut state = PEState::new(weights, bias, mode, acc_bits);
    state.latch = latch;
    match mode {
        PeMode::Spatial => (0..rows)
            .map(|r| pe_output_step(&mut state, r, relu, requant_mult, activation_bits))
            .collect(),
        PeMode::Temporal => pe_temporal_block(&mut state, relu, requant_mult, activation_bits),
    }
}

/// Raw wide accumulators for a block (no activation, no requantization);
/// used for score matrices and case II partial sums handed to the host.
fn run_block_raw(
    weights: &[Vec<i64>],
    latch: &[i64],
    acc_bits: u32,
) -> Result<Vec<i64>> {
    weights
        .iter()
        .map(|row| {
            let products: Vec<i64> = row.iter().zip(latch).map(|(w, a)| w * a).collect();
            check_acc(adder_tree_eval(&products), acc_bits, 0)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhaseKind {
    Route,
    Reload,
    Compute,
    Host,
    Sync,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseCycles {
    pub layer: usize,
    pub kind: PhaseKind,
    pub cycles: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub name: String,
    pub total_cycles: u64,
    pub route_cycles: u64,
    pub compute_cycles: u64,
    pub reload_cycles: u64,
    pub host_cycles: u64,
    /// PE busy share during this layer's compute phases (0 when none).
    pub utilization: f64,
}

/// Cycle counts, utilization, and normalized op counts for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub mode: PeMode,
    pub total_cycles: u64,
    pub route_cycles: u64,
    pub compute_cycles: u64,
    pub reload_cycles: u64,
    pub host_cycles: u64,
    pub per_pe_busy: Vec<u64>,
    /// Busy share of the PE array during compute phases.
    pub compute_utilization: f64,
    /// Busy share over the whole run.
    pub occupancy: f64,
    /// 4-bit-equivalent operations executed (mode-independent).
    pub normalized_ops: u64,
    pub per_layer: Vec<LayerReport>,
    pub phases: Vec<PhaseCycles>,
}

struct LayerAccum {
    route: u64,
    compute: u64,
    reload: u64,
    host: u64,
    busy_in_compute: u64,
    compute_capacity: u64,
}

/// Execute `program` over `cm` on `input`.
///
/// The output tensor is bit-exact against
/// `reference_eval(unpack_to_model(cm), input, quant)`.
pub fn simulate(
    program: &MappedProgram,
    cm: &CompressedModel,
    input: &Tensor,
    cfg: &AcceleratorConfig,
    mode: PeMode,
) -> Result<(Tensor, SimReport)> {
    if program.num_pes != cfg.num_pes {
        return Err(Error::Config(format!(
            "program was mapped for {} PEs, config has {}",
            program.num_pes, cfg.num_pes
        )));
    }
    let expect: usize = cm.input_shape.iter().product();
    if input.len() != expect {
        return Err(Error::ShapeMismatch {
            producer: "<input>".into(),
            produced: input.shape.clone(),
            consumer: cm.name.clone(),
            expected: cm.input_shape.clone(),
        });
    }

    // Boundary shapes along the compressed layer walk.
    let mut shapes = vec![cm.input_shape.clone()];
    {
        let (model, _) = crate::compress::unpack_to_model(cm)?;
        let mut cur = cm.input_shape.clone();
        for cl in &cm.layers {
            cur = crate::mapper::compressed_out_shape(cl, &cur, &model)?;
            shapes.push(cur.clone());
        }
    }

    let mut exec = Exec {
        cm,
        cfg,
        mode,
        shapes,
        codes: match &input.data {
            TensorData::Real(v) => v
                .iter()
                .map(|&x| quantize_uniform(x, cm.input_bits, cm.input_scale))
                .collect(),
            TensorData::Int { codes, .. } => codes.clone(),
        },
        scale: cm.input_scale,
        bits: cm.input_bits,
        next: LayerScratch::default(),
        cycle: 0,
        per_pe_busy: vec![0; cfg.num_pes],
        normalized_ops: 0,
        phases: Vec::new(),
        layer_acc: (0..cm.layers.len())
            .map(|_| LayerAccum {
                route: 0,
                compute: 0,
                reload: 0,
                host: 0,
                busy_in_compute: 0,
                compute_capacity: 0,
            })
            .collect(),
        overlap_credit: 0,
        last_compute_len: None,
    };

    for phase in &program.phases {
        exec.run_phase(phase)?;
    }

    let total: u64 = exec.cycle - exec.overlap_credit;
    let route: u64 = exec.layer_acc.iter().map(|l| l.route).sum();
    let compute: u64 = exec.layer_acc.iter().map(|l| l.compute).sum();
    let reload: u64 = exec.layer_acc.iter().map(|l| l.reload).sum();
    let host: u64 = exec.layer_acc.iter().map(|l| l.host).sum();
    let busy_total: u64 = exec.per_pe_busy.iter().sum();
    let busy_in_compute: u64 = exec.layer_acc.iter().map(|l| l.busy_in_compute).sum();
    let compute_capacity: u64 = exec.layer_acc.iter().map(|l| l.compute_capacity).sum();

    let per_layer = cm
        .layers
        .iter()
        .zip(&exec.layer_acc)
        .map(|(cl, acc)| LayerReport {
            name: cl.name().to_string(),
            total_cycles: acc.route + acc.compute + acc.reload + acc.host,
            route_cycles: acc.route,
            compute_cycles: acc.compute,
            reload_cycles: acc.reload,
            host_cycles: acc.host,
            utilization: if acc.compute_capacity > 0 {
                acc.busy_in_compute as f64 / acc.compute_capacity as f64
            } else {
                0.0
            },
        })
        .collect();

    let report = SimReport {
        mode,
        total_cycles: total,
        route_cycles: route,
        compute_cycles: compute,
        reload_cycles: reload,
        host_cycles: host,
        per_pe_busy: exec.per_pe_busy.clone(),
        compute_utilization: if compute_capacity > 0 {
            busy_in_compute as f64 / compute_capacity as f64
        } else {
            0.0
        },
        occupancy: if total > 0 {
            busy_total as f64 / (cfg.num_pes as u64 * total) as f64
        } else {
            0.0
        },
        normalized_ops: exec.normalized_ops,
        per_layer,
        phases: exec.phases,
    };

    let out_shape = exec.shapes.last().unwrap().clone();
    let out = Tensor::int(out_shape, exec.bits, exec.codes)?;
    Ok((out, report))
}

/// Scratch for the layer currently executing.
#[derive(Default)]
struct LayerScratch {
    /// Output codes being assembled (FC / conv case I & III).
    out_codes: Vec<i64>,
    /// Wide partial sums (conv case II).
    partials: Vec<i64>,
    /// Attention per-head state.
    attn: Option<AttnScratch>,
}

struct AttnScratch {
    q: Vec<Vec<i64>>,
    k: Vec<Vec<i64>>,
    v: Vec<Vec<i64>>,
    scores: Vec<Vec<i64>>,
    probs: Vec<Vec<i64>>,
    ctx: Vec<Vec<i64>>,
    /// Wide head-output accumulator.
    head_sum: Vec<i64>,
}

struct Exec<'a> {
    cm: &'a CompressedModel,
    cfg: &'a AcceleratorConfig,
    mode: PeMode,
    shapes: Vec<Vec<usize>>,
    codes: Vec<i64>,
    scale: f64,
    bits: u32,
    next: LayerScratch,
    cycle: u64,
    per_pe_busy: Vec<u64>,
    normalized_ops: u64,
    phases: Vec<PhaseCycles>,
    layer_acc: Vec<LayerAccum>,
    overlap_credit: u64,
    last_compute_len: Option<(usize, u64)>,
}

impl<'a> Exec<'a> {
    fn push_phase(&mut self, layer: usize, kind: PhaseKind, cycles: u64) {
        self.phases.push(PhaseCycles { layer, kind, cycles });
        self.cycle += cycles;
    }

    fn run_phase(&mut self, phase: &Phase) -> Result<()> {
        match phase {
            Phase::RouteIn { layer, demand, schedule, .. } => {
                let violations = crate::scheduler::verify_schedule(demand, schedule);
                if let Some(v) = violations.first() {
                    return Err(Error::SimFault {
                        cycle: self.cycle + v.cycle.unwrap_or(0),
                        message: format!("select/latch inconsistency: {}", v.message),
                    });
                }
                let cycles = schedule.len();
                // Double-buffered overlap with the previous compute phase of
                // the same layer, when enabled.
                if self.cfg.overlap_route_compute {
                    if let Some((l, c)) = self.last_compute_len {
                        if l == *layer {
                            self.overlap_credit += cycles.min(c);
                        }
                    }
                }
                self.layer_acc[*layer].route += cycles;
                self.push_phase(*layer, PhaseKind::Route, cycles);
            }
            Phase::ReloadWeights { layer, rows, .. } => {
                self.layer_acc[*layer].reload += rows;
                self.push_phase(*layer, PhaseKind::Reload, *rows);
            }
            Phase::Compute {
                layer,
                jobs,
                cycles_spatial,
                cycles_temporal,
                ..
            } => {
                let cycles = match self.mode {
                    PeMode::Spatial => *cycles_spatial,
                    PeMode::Temporal => *cycles_temporal,
                };
                for job in jobs {
                    let busy = self.run_job(*layer, job)?;
                    self.per_pe_busy[job.pe as usize] += busy;
                    self.layer_acc[*layer].busy_in_compute += busy;
                }
                self.layer_acc[*layer].compute += cycles;
                self.layer_acc[*layer].compute_capacity += cycles * self.cfg.num_pes as u64;
                self.last_compute_len = Some((*layer, cycles));
                self.push_phase(*layer, PhaseKind::Compute, cycles);
            }
            Phase::HostOp { layer, kind, cycles, .. } => {
                self.run_host(*layer, kind)?;
                self.layer_acc[*layer].host += cycles;
                self.push_phase(*layer, PhaseKind::Host, *cycles);
            }
            Phase::Sync { layer } => {
                self.finish_layer(*layer)?;
                self.last_compute_len = None;
                self.push_phase(*layer, PhaseKind::Sync, 0);
            }
        }
        Ok(())
    }

    fn quant_of(&self, layer: usize) -> Result<&QuantSpec> {
        match &self.cm.layers[layer] {
            CompressedLayer::Fc(f) => f.quant.as_ref().ok_or_else(|| {
                Error::InvalidQuant(format!("fc `{}` lacks a quant spec", f.name))
            }),
            CompressedLayer::Conv(c) => Ok(&c.quant),
            CompressedLayer::Attention(a) => Ok(&a.quant),
            other => Err(Error::Mapping(format!(
                "layer `{}` has no quantized datapath",
                other.name()
            ))),
        }
    }

    fn uniform_scale(&self, layer: usize) -> Result<f64> {
        match &self.quant_of(layer)?.weights {
            WeightQuant::Uniform { scale } => Ok(*scale),
            WeightQuant::Codebook { .. } => Err(Error::InvalidQuant(
                "codebook weights are not supported on the integer datapath; \
                 compress with the uniform-symmetric scheme"
                    .into(),
            )),
        }
    }

    /// Execute one compute job; returns the PE's busy cycles.
    fn run_job(&mut self, layer: usize, job: &crate::mapper::ComputeJob) -> Result<u64> {
        match (&self.cm.layers[layer], &job.work) {
            (CompressedLayer::Fc(fc), Work::FcBlock { block }) => {
                let spec = self.quant_of(layer)?.clone();
                let w_scale = self.uniform_scale(layer)?;
                let acc_bits = accumulator_bits(spec.weight_bits, self.bits, fc.mask.cols);
                let mult = requant_multiplier(w_scale, self.scale, spec.act_scale);
                let blk = &fc.blocks[*block];
                let weights: Vec<Vec<i64>> = (0..blk.rows)
                    .map(|r| blk.row(r).iter().map(|w| spec.quantize_weight(*w).0).collect())
                    .collect();
                let bias: Vec<i64> = fc.bias[*block]
                    .iter()
                    .map(|b| bias_code(*b, w_scale, self.scale, acc_bits))
                    .collect();
                let latch: Vec<i64> = fc
                    .mask
                    .block_cols(*block)
                    .iter()
                    .map(|&c| self.codes[c])
                    .collect();
                let out = run_block(
                    weights,
                    bias,
                    latch,
                    self.mode,
                    acc_bits,
                    fc.relu,
                    mult,
                    spec.activation_bits,
                )?;
                self.ensure_out(layer)?;
                for (p, &r) in fc.mask.block_rows(*block).iter().enumerate() {
                    self.next.out_codes[r] = out[p];
                }
                self.normalized_ops +=
                    blk.rows as u64 * normalized_ops_per_cycle(blk.cols, spec.weight_bits);
                Ok(match self.mode {
                    PeMode::Spatial => blk.rows as u64,
                    PeMode::Temporal => blk.cols.max(1) as u64,
                })
            }
            (CompressedLayer::Conv(conv), Work::ConvJob { oy, ox, group, latch }) => {
                let spec = conv.quant.clone();
                let w_scale = self.uniform_scale(layer)?;
                let cig = conv.c_in / conv.groups;
                let cog = conv.c_out / conv.groups;
                let fanin = cig * conv.k_h * conv.k_w;
                let acc_bits = accumulator_bits(spec.weight_bits, self.bits, fanin);
                let mult = requant_multiplier(w_scale, self.scale, spec.act_scale);
                let latch_codes: Vec<i64> = latch
                    .iter()
                    .map(|id| id.map(|i| self.codes[i as usize]).unwrap_or(0))
                    .collect();
                let weights: Vec<Vec<i64>> = (0..cog)
                    .map(|co_local| {
                        let co = group * cog + co_local;
                        conv.kernel[co * fanin..(co + 1) * fanin]
                            .iter()
                            .map(|w| spec.quantize_weight(*w).0)
                            .collect()
                    })
                    .collect();
                let bias: Vec<i64> = (0..cog)
                    .map(|co_local| {
                        bias_code(
                            conv.bias[group * cog + co_local],
                            w_scale,
                            self.scale,
                            acc_bits,
                        )
                    })
                    .collect();
                let out = run_block(
                    weights,
                    bias,
                    latch_codes,
                    self.mode,
                    acc_bits,
                    conv.relu,
                    mult,
                    spec.activation_bits,
                )?;
                self.ensure_out(layer)?;
                let (h_out, w_out) = (self.shapes[layer + 1][1], self.shapes[layer + 1][2]);
                for (co_local, code) in out.iter().enumerate() {
                    let co = group * cog + co_local;
                    self.next.out_codes[(co * h_out + oy) * w_out + ox] = *code;
                }
                self.normalized_ops += cog as u64 * normalized_ops_per_cycle(fanin, spec.weight_bits);
                Ok(match self.mode {
                    PeMode::Spatial => cog as u64,
                    PeMode::Temporal => fanin as u64,
                })
            }
            (
                CompressedLayer::Conv(conv),
                Work::ConvPartial {
                    oy,
                    ox,
                    row_start,
                    row_end,
                    latch,
                    col_start,
                    col_end,
                },
            ) => {
                let spec = conv.quant.clone();
                let fanin = conv.c_in * conv.k_h * conv.k_w;
                let acc_bits = accumulator_bits(spec.weight_bits, self.bits, fanin);
                let latch_codes: Vec<i64> = latch
                    .iter()
                    .map(|id| id.map(|i| self.codes[i as usize]).unwrap_or(0))
                    .collect();
                let weights: Vec<Vec<i64>> = (*row_start..*row_end)
                    .map(|co| {
                        conv.kernel[co * fanin + col_start..co * fanin + col_end]
                            .iter()
                            .map(|w| spec.quantize_weight(*w).0)
                            .collect()
                    })
                    .collect();
                let partial = run_block_raw(&weights, &latch_codes, acc_bits)?;
                self.ensure_partials(layer)?;
                let (h_out, w_out) = (self.shapes[layer + 1][1], self.shapes[layer + 1][2]);
                for (i, p) in partial.iter().enumerate() {
                    let co = row_start + i;
                    let idx = (co * h_out + oy) * w_out + ox;
                    self.next.partials[idx] =
                        check_acc(self.next.partials[idx] + p, acc_bits, self.cycle)?;
                }
                let rows = (row_end - row_start) as u64;
                let cols = (col_end - col_start) as u64;
                self.normalized_ops += rows
                    * normalized_ops_per_cycle((col_end - col_start).max(1), spec.weight_bits);
                Ok(match self.mode {
                    PeMode::Spatial => rows,
                    PeMode::Temporal => cols,
                })
            }
            (CompressedLayer::Attention(attn), Work::Attn { head, step }) => {
                self.run_attn_step(layer, attn.clone(), *head, *step)
            }
            (cl, work) => Err(Error::SimFault {
                cycle: self.cycle,
                message: format!(
                    "job {:?} does not match layer `{}`",
                    work,
                    cl.name()
                ),
            }),
        }
    }

    fn run_attn_step(
        &mut self,
        layer: usize,
        attn: crate::compress::AttentionLayer,
        head: usize,
        step: AttnStep,
    ) -> Result<u64> {
        let spec = &attn.quant;
        let w_scale = self.uniform_scale(layer)?;
        let seq = self.shapes[layer][0];
        let (dm, dk) = (attn.d_model, attn.d_k);
        let a_bits = spec.activation_bits;
        let a_scale = spec.act_scale;
        // Sized for the widest multiply in the layer: weight-by-activation
        // projections and activation-by-activation score/context products.
        let acc_bits = accumulator_bits(
            spec.weight_bits.max(a_bits),
            self.bits.max(a_bits),
            dm.max(seq).max(dk),
        );

        if self.next.attn.is_none() {
            let n = attn.heads.len();
            self.next.attn = Some(AttnScratch {
                q: vec![Vec::new(); n],
                k: vec![Vec::new(); n],
                v: vec![Vec::new(); n],
                scores: vec![Vec::new(); n],
                probs: vec![Vec::new(); n],
                ctx: vec![Vec::new(); n],
                head_sum: vec![0; seq * dm],
            });
        }

        // Projection: weights W^T (d_k rows over d_model cols), one column
        // of outputs per sequence position.
        let project = |wm: &crate::tensor::Matrix, codes: &[i64], in_scale: f64| -> Result<Vec<i64>> {
            let mult = requant_multiplier(w_scale, in_scale, a_scale);
            let weights: Vec<Vec<i64>> = (0..dk)
                .map(|kcol| (0..dm).map(|m| spec.quantize_weight(wm.get(m, kcol)).0).collect())
                .collect();
            let mut out = vec![0i64; seq * dk];
            for t in 0..seq {
                let latch: Vec<i64> = codes[t * dm..(t + 1) * dm].to_vec();
                let vals = run_block(
                    weights.clone(),
                    vec![0; dk],
                    latch,
                    self.mode,
                    acc_bits,
                    false,
                    mult,
                    a_bits,
                )?;
                out[t * dk..(t + 1) * dk].copy_from_slice(&vals);
            }
            Ok(out)
        };

        let h = &attn.heads[head];
        let in_codes = self.codes.clone();
        let in_scale = self.scale;
        let scratch = self.next.attn.as_mut().unwrap();
        let busy = match step {
            AttnStep::ProjQ => {
                scratch.q[head] = project(&h.wq, &in_codes, in_scale)?;
                self.normalized_ops +=
                    (seq * dk) as u64 * normalized_ops_per_cycle(dm, spec.weight_bits);
                match self.mode {
                    PeMode::Spatial => (seq * dk) as u64,
                    PeMode::Temporal => (seq * dm) as u64,
                }
            }
            AttnStep::ProjK => {
                scratch.k[head] = project(&h.wk, &in_codes, in_scale)?;
                self.normalized_ops +=
                    (seq * dk) as u64 * normalized_ops_per_cycle(dm, spec.weight_bits);
                match self.mode {
                    PeMode::Spatial => (seq * dk) as u64,
                    PeMode::Temporal => (seq * dm) as u64,
                }
            }
            AttnStep::ProjV => {
                scratch.v[head] = project(&h.wv, &in_codes, in_scale)?;
                self.normalized_ops +=
                    (seq * dk) as u64 * normalized_ops_per_cycle(dm, spec.weight_bits);
                match self.mode {
                    PeMode::Spatial => (seq * dk) as u64,
                    PeMode::Temporal => (seq * dm) as u64,
                }
            }
            AttnStep::Scores => {
                // Q in the weight array, K streamed; raw accumulators out.
                let q = &scratch.q[head];
                let k = &scratch.k[head];
                let weights: Vec<Vec<i64>> =
                    (0..seq).map(|t| q[t * dk..(t + 1) * dk].to_vec()).collect();
                let mut scores = vec![0i64; seq * seq];
                for u in 0..seq {
                    let latch: Vec<i64> = k[u * dk..(u + 1) * dk].to_vec();
                    let col = run_block_raw(&weights, &latch, acc_bits)?;
                    for t in 0..seq {
                        scores[t * seq + u] = col[t];
                    }
                }
                scratch.scores[head] = scores;
                self.normalized_ops +=
                    (seq * seq) as u64 * normalized_ops_per_cycle(dk, spec.weight_bits);
                match self.mode {
                    PeMode::Spatial => (seq * seq) as u64,
                    PeMode::Temporal => (seq * dk) as u64,
                }
            }
            AttnStep::Ctx => {
                let probs = &scratch.probs[head];
                let v = &scratch.v[head];
                let p_scale = 1.0 / quant::qmax(a_bits) as f64;
                let mult = requant_multiplier(p_scale, a_scale, a_scale);
                let weights: Vec<Vec<i64>> = (0..seq)
                    .map(|t| probs[t * seq..(t + 1) * seq].to_vec())
                    .collect();
                let mut ctx = vec![0i64; seq * dk];
                for kcol in 0..dk {
                    let latch: Vec<i64> = (0..seq).map(|u| v[u * dk + kcol]).collect();
                    let col = run_block(
                        weights.clone(),
                        vec![0; seq],
                        latch,
                        self.mode,
                        acc_bits,
                        false,
                        mult,
                        a_bits,
                    )?;
                    for t in 0..seq {
                        ctx[t * dk + kcol] = col[t];
                    }
                }
                scratch.ctx[head] = ctx;
                self.normalized_ops +=
                    (seq * dk) as u64 * normalized_ops_per_cycle(seq, spec.weight_bits);
                match self.mode {
                    PeMode::Spatial => (seq * dk) as u64,
                    PeMode::Temporal => (seq * seq) as u64,
                }
            }
            AttnStep::OutProj => {
                let ctx = &scratch.ctx[head];
                let mult = requant_multiplier(w_scale, a_scale, a_scale);
                let weights: Vec<Vec<i64>> = (0..dm)
                    .map(|m| (0..dk).map(|kk| spec.quantize_weight(h.wo.get(kk, m)).0).collect())
                    .collect();
                for t in 0..seq {
                    let latch: Vec<i64> = ctx[t * dk..(t + 1) * dk].to_vec();
                    let out = run_block(
                        weights.clone(),
                        vec![0; dm],
                        latch,
                        self.mode,
                        acc_bits,
                        false,
                        mult,
                        a_bits,
                    )?;
                    for m in 0..dm {
                        scratch.head_sum[t * dm + m] += out[m];
                    }
                }
                self.normalized_ops +=
                    (seq * dm) as u64 * normalized_ops_per_cycle(dk, spec.weight_bits);
                match self.mode {
                    PeMode::Spatial => (seq * dm) as u64,
                    PeMode::Temporal => (seq * dk) as u64,
                }
            }
        };
        Ok(busy)
    }

    fn ensure_out(&mut self, layer: usize) -> Result<()> {
        if self.next.out_codes.is_empty() {
            let n: usize = self.shapes[layer + 1].iter().product();
            self.next.out_codes = vec![0; n];
        }
        Ok(())
    }

    fn ensure_partials(&mut self, layer: usize) -> Result<()> {
        if self.next.partials.is_empty() {
            let n: usize = self.shapes[layer + 1].iter().product();
            self.next.partials = vec![0; n];
        }
        Ok(())
    }

    fn run_host(&mut self, layer: usize, kind: &HostWork) -> Result<()> {
        match kind {
            HostWork::PoolLayer => {
                let CompressedLayer::Pool(p) = &self.cm.layers[layer] else {
                    return Err(Error::SimFault {
                        cycle: self.cycle,
                        message: "pool host op on non-pool layer".into(),
                    });
                };
                let in_shape = &self.shapes[layer];
                let out_shape = &self.shapes[layer + 1];
                let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
                let (h_out, w_out) = (out_shape[1], out_shape[2]);
                let mut out = Vec::with_capacity(c * h_out * w_out);
                for ch in 0..c {
                    for oy in 0..h_out {
                        for ox in 0..w_out {
                            let mut best = i64::MIN;
                            for ky in 0..p.window.0 {
                                for kx in 0..p.window.1 {
                                    let iy = oy * p.stride.0 + ky;
                                    let ix = ox * p.stride.1 + kx;
                                    best = best.max(self.codes[(ch * h + iy) * w + ix]);
                                }
                            }
                            out.push(best);
                        }
                    }
                }
                self.next.out_codes = out;
            }
            HostWork::ReluLayer => {
                self.next.out_codes = self.codes.iter().map(|&c| c.max(0)).collect();
            }
            HostWork::AttnSoftmax { heads } => {
                let CompressedLayer::Attention(attn) = &self.cm.layers[layer] else {
                    return Err(Error::SimFault {
                        cycle: self.cycle,
                        message: "softmax host op on non-attention layer".into(),
                    });
                };
                let seq = self.shapes[layer][0];
                let a_bits = attn.quant.activation_bits;
                let a_scale = attn.quant.act_scale;
                let p_scale = 1.0 / quant::qmax(a_bits) as f64;
                let score_scale = a_scale * a_scale / (attn.d_k as f64).sqrt();
                let scratch = self.next.attn.as_mut().ok_or(Error::SimFault {
                    cycle: self.cycle,
                    message: "softmax before scores".into(),
                })?;
                for &head in heads {
                    let scores = &scratch.scores[head];
                    let mut probs = vec![0i64; seq * seq];
                    let mut row = vec![0.0f64; seq];
                    for t in 0..seq {
                        for u in 0..seq {
                            row[u] = scores[t * seq + u] as f64 * score_scale;
                        }
                        softmax_in_place(&mut row);
                        for u in 0..seq {
                            probs[t * seq + u] = quantize_uniform(row[u], a_bits, p_scale);
                        }
                    }
                    scratch.probs[head] = probs;
                }
            }
            HostWork::AttnHeadSum => {
                let CompressedLayer::Attention(attn) = &self.cm.layers[layer] else {
                    return Err(Error::SimFault {
                        cycle: self.cycle,
                        message: "head sum on non-attention layer".into(),
                    });
                };
                let a_bits = attn.quant.activation_bits;
                let lo = quant::qmin(a_bits);
                let hi = quant::qmax(a_bits);
                let scratch = self.next.attn.as_ref().ok_or(Error::SimFault {
                    cycle: self.cycle,
                    message: "head sum before projections".into(),
                })?;
                let mut out: Vec<i64> =
                    scratch.head_sum.iter().map(|&c| c.clamp(lo, hi)).collect();
                if attn.relu {
                    for v in out.iter_mut() {
                        *v = (*v).max(0);
                    }
                }
                self.next.out_codes = out;
            }
            HostWork::ConvFinalize => {
                let CompressedLayer::Conv(conv) = &self.cm.layers[layer] else {
                    return Err(Error::SimFault {
                        cycle: self.cycle,
                        message: "conv finalize on non-conv layer".into(),
                    });
                };
                let spec = &conv.quant;
                let w_scale = self.uniform_scale(layer)?;
                let fanin = conv.c_in * conv.k_h * conv.k_w;
                let acc_bits = accumulator_bits(spec.weight_bits, self.bits, fanin);
                let mult = requant_multiplier(w_scale, self.scale, spec.act_scale);
                let out_shape = &self.shapes[layer + 1];
                let (h_out, w_out) = (out_shape[1], out_shape[2]);
                let mut out = vec![0i64; self.next.partials.len()];
                for co in 0..conv.c_out {
                    let b = bias_code(conv.bias[co], w_scale, self.scale, acc_bits);
                    for oy in 0..h_out {
                        for ox in 0..w_out {
                            let idx = (co * h_out + oy) * w_out + ox;
                            let mut acc =
                                check_acc(self.next.partials[idx] + b, acc_bits, self.cycle)?;
                            if conv.relu {
                                acc = acc.max(0);
                            }
                            out[idx] = requant_code(acc, mult, spec.activation_bits);
                        }
                    }
                }
                self.next.out_codes = out;
            }
        }
        Ok(())
    }

    /// Layer barrier: publish the staged outputs as the next boundary.
    fn finish_layer(&mut self, layer: usize) -> Result<()> {
        let (scale, bits) = match &self.cm.layers[layer] {
            CompressedLayer::Fc(f) => {
                let q = f.quant.as_ref().unwrap();
                (q.act_scale, q.activation_bits)
            }
            CompressedLayer::Conv(c) => (c.quant.act_scale, c.quant.activation_bits),
            CompressedLayer::Attention(a) => (a.quant.act_scale, a.quant.activation_bits),
            // Pool and relu keep the boundary grid.
            _ => (self.scale, self.bits),
        };
        let expect: usize = self.shapes[layer + 1].iter().product();
        if self.next.out_codes.len() != expect {
            return Err(Error::SimFault {
                cycle: self.cycle,
                message: format!(
                    "layer `{}` produced {} values, expected {expect}",
                    self.cm.layers[layer].name(),
                    self.next.out_codes.len()
                ),
            });
        }
        self.codes = std::mem::take(&mut self.next.out_codes);
        self.scale = scale;
        self.bits = bits;
        self.next = LayerScratch::default();
        Ok(())
    }
}
