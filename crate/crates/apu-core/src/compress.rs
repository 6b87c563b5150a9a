//! The compression pipeline: lower a network for inference, mask and pack
//! fully-connected layers into block-diagonal form, project all weights onto
//! the quantization grid, and calibrate activation scales.
//!
//! The compressed model is the unit the mapper and simulator operate on.
//! `unpack_to_model` reconstructs the equivalent dense network plus its
//! quantization spec, which is exactly what the reference evaluator needs to
//! serve as the simulator's oracle.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval;
use crate::mapper::lower_for_inference;
use crate::model::{AttentionHead, Layer, NetworkModel};
use crate::pruner::{apply_mask, generate_mask, pack_blocks, BlockDiagonalLayer};
use crate::quant::{self, ModelQuant, QuantSpec, WeightQuant};
use crate::tensor::Tensor;

/// Weight quantization scheme selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    UniformSymmetric,
    NonuniformCodebook,
}

impl std::str::FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" | "uniform-symmetric" => Ok(Scheme::UniformSymmetric),
            "codebook" | "nonuniform-codebook" => Ok(Scheme::NonuniformCodebook),
            other => Err(Error::InvalidQuant(format!("unknown scheme `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CompressOptions {
    /// Blocks per fully-connected layer (= compression ratio). Layers too
    /// small to carry this many blocks are clamped to max(rows, cols).
    pub num_blocks: usize,
    pub weight_bits: u32,
    pub activation_bits: u32,
    pub scheme: Scheme,
    pub seed: u64,
    /// Calibration input for activation scales; a seeded random input in
    /// [-1, 1] is used when absent.
    pub calibration: Option<Tensor>,
    /// Pre-committed masks by layer name (from mask-constrained training);
    /// layers not listed get a fresh seeded mask.
    pub masks: std::collections::BTreeMap<String, crate::pruner::BlockMask>,
}

impl Default for CompressOptions {
    fn default() -> Self {
        CompressOptions {
            num_blocks: 10,
            weight_bits: 4,
            activation_bits: 4,
            scheme: Scheme::UniformSymmetric,
            seed: 42,
            calibration: None,
            masks: std::collections::BTreeMap::new(),
        }
    }
}

/// Dense quantized convolution layer (groups induce the block structure).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub name: String,
    pub kernel: Vec<f64>,
    pub c_out: usize,
    pub c_in: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub bias: Vec<f64>,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
    pub quant: QuantSpec,
    pub relu: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolLayer {
    pub name: String,
    pub window: (usize, usize),
    pub stride: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionLayer {
    pub name: String,
    pub d_model: usize,
    pub d_k: usize,
    pub heads: Vec<AttentionHead>,
    pub quant: QuantSpec,
    pub relu: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CompressedLayer {
    Fc(BlockDiagonalLayer),
    Conv(ConvLayer),
    Pool(PoolLayer),
    Attention(AttentionLayer),
    Relu { name: String },
}

impl CompressedLayer {
    pub fn name(&self) -> &str {
        match self {
            CompressedLayer::Fc(l) => &l.name,
            CompressedLayer::Conv(l) => &l.name,
            CompressedLayer::Pool(l) => &l.name,
            CompressedLayer::Attention(l) => &l.name,
            CompressedLayer::Relu { name } => name,
        }
    }
}

/// A lowered, masked, quantized model ready for mapping and simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressedModel {
    pub name: String,
    pub input_shape: Vec<usize>,
    pub input_scale: f64,
    pub input_bits: u32,
    pub layers: Vec<CompressedLayer>,
}

impl CompressedModel {
    /// Stored (nonzero) weight count across all layers.
    pub fn stored_weights(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                CompressedLayer::Fc(f) => f.stored_weights(),
                CompressedLayer::Conv(c) => c.kernel.len(),
                CompressedLayer::Attention(a) => a
                    .heads
                    .iter()
                    .map(|h| h.wq.data.len() + h.wk.data.len() + h.wv.data.len() + h.wo.data.len())
                    .sum(),
                _ => 0,
            })
            .sum()
    }
}

/// Deterministic per-stage seed fan-out (splitmix64 over a stream index).
pub fn fan_seed(base: u64, stream: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn scale_for(max_abs: f64, bits: u32) -> f64 {
    if max_abs > 0.0 {
        max_abs / quant::qmax(bits) as f64
    } else {
        1.0
    }
}

fn weight_spec(
    values: &[f64],
    opts: &CompressOptions,
    seed: u64,
    act_scale: f64,
) -> Result<QuantSpec> {
    let max_abs = values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let weights = match opts.scheme {
        Scheme::UniformSymmetric => WeightQuant::Uniform {
            scale: scale_for(max_abs, opts.weight_bits),
        },
        Scheme::NonuniformCodebook => WeightQuant::Codebook {
            entries: quant::fit_codebook(values, opts.weight_bits, seed)?,
        },
    };
    let spec = QuantSpec {
        weight_bits: opts.weight_bits,
        activation_bits: opts.activation_bits,
        weights,
        act_scale,
    };
    spec.validate()?;
    Ok(spec)
}

/// Project every value onto the quantization grid (quantize-dequantize).
fn project(values: &mut [f64], spec: &QuantSpec) {
    for v in values.iter_mut() {
        let (_, deq) = spec.quantize_weight(*v);
        *v = deq;
    }
}

/// Compress a network: lower, mask, pack, quantize, calibrate.
pub fn compress_model(model: &NetworkModel, opts: &CompressOptions) -> Result<CompressedModel> {
    let lowered = lower_for_inference(model)?;
    let calibration = match &opts.calibration {
        Some(t) => t.clone(),
        None => seeded_input(&lowered.input_shape, fan_seed(opts.seed, 0xCA11)),
    };
    // Per-boundary activation scales from a real-mode calibration pass.
    let boundaries = eval::real_boundary_values(&lowered, &calibration)?;
    let bscale: Vec<f64> = boundaries
        .iter()
        .map(|vals| {
            let m = vals.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            scale_for(m, opts.activation_bits)
        })
        .collect();

    let mut layers: Vec<CompressedLayer> = Vec::new();
    for (idx, layer) in lowered.layers.iter().enumerate() {
        let act_scale = bscale[idx + 1];
        match layer {
            Layer::FullyConnected { name, weights, bias } => {
                let mask = match opts.masks.get(name) {
                    Some(m) => {
                        if m.rows != weights.rows || m.cols != weights.cols {
                            return Err(Error::Mask(format!(
                                "mask for `{name}` is {}x{} but weights are {}x{}",
                                m.rows, m.cols, weights.rows, weights.cols
                            )));
                        }
                        m.clone()
                    }
                    None => {
                        let blocks = opts.num_blocks.min(weights.rows.max(weights.cols));
                        generate_mask(
                            weights.rows,
                            weights.cols,
                            blocks,
                            fan_seed(opts.seed, idx as u64),
                        )?
                    }
                };
                let mut masked = apply_mask(weights, &mask)?;
                let spec = weight_spec(
                    &masked.data,
                    opts,
                    fan_seed(opts.seed, 0xC0DE + idx as u64),
                    act_scale,
                )?;
                project(&mut masked.data, &spec);
                let mut packed = pack_blocks(&masked, bias, &mask, Some(spec))?;
                packed.name = name.clone();
                layers.push(CompressedLayer::Fc(packed));
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
                let mut k = kernel.clone();
                let spec = weight_spec(
                    &k,
                    opts,
                    fan_seed(opts.seed, 0xC0DE + idx as u64),
                    act_scale,
                )?;
                project(&mut k, &spec);
                layers.push(CompressedLayer::Conv(ConvLayer {
                    name: name.clone(),
                    kernel: k,
                    c_out: *c_out,
                    c_in: *c_in,
                    k_h: *k_h,
                    k_w: *k_w,
                    bias: bias.clone(),
                    stride: *stride,
                    padding: *padding,
                    groups: *groups,
                    quant: spec,
                    relu: false,
                }));
            }
            Layer::MaxPool2D { name, window, stride } => {
                layers.push(CompressedLayer::Pool(PoolLayer {
                    name: name.clone(),
                    window: *window,
                    stride: *stride,
                }));
            }
            Layer::MultiHeadAttention {
                name,
                d_model,
                d_k,
                heads,
            } => {
                let all: Vec<f64> = heads
                    .iter()
                    .flat_map(|h| {
                        h.wq
                            .data
                            .iter()
                            .chain(&h.wk.data)
                            .chain(&h.wv.data)
                            .chain(&h.wo.data)
                            .copied()
                            .collect::<Vec<_>>()
                    })
                    .collect();
                let spec = weight_spec(
                    &all,
                    opts,
                    fan_seed(opts.seed, 0xC0DE + idx as u64),
                    act_scale,
                )?;
                let mut projected = heads.clone();
                for h in &mut projected {
                    project(&mut h.wq.data, &spec);
                    project(&mut h.wk.data, &spec);
                    project(&mut h.wv.data, &spec);
                    project(&mut h.wo.data, &spec);
                }
                layers.push(CompressedLayer::Attention(AttentionLayer {
                    name: name.clone(),
                    d_model: *d_model,
                    d_k: *d_k,
                    heads: projected,
                    quant: spec,
                    relu: false,
                }));
            }
            Layer::Relu { name } => {
                // Fuse into the preceding MAC layer when possible.
                let fused = match layers.last_mut() {
                    Some(CompressedLayer::Fc(f)) if !f.relu => {
                        f.relu = true;
                        true
                    }
                    Some(CompressedLayer::Conv(c)) if !c.relu => {
                        c.relu = true;
                        true
                    }
                    Some(CompressedLayer::Attention(a)) if !a.relu => {
                        a.relu = true;
                        true
                    }
                    _ => false,
                };
                if !fused {
                    layers.push(CompressedLayer::Relu { name: name.clone() });
                }
            }
            Layer::BatchNorm { name, .. } => {
                return Err(Error::InvalidModel(format!(
                    "batchnorm `{name}` survived lowering; this is a bug"
                )));
            }
        }
    }

    Ok(CompressedModel {
        name: lowered.name.clone(),
        input_shape: lowered.input_shape.clone(),
        input_scale: bscale[0],
        input_bits: opts.activation_bits,
        layers,
    })
}

fn seeded_input(shape: &[usize], seed: u64) -> Tensor {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::real(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .expect("shape/data consistent")
}

/// Reconstruct the dense lowered network and its quantization spec.
///
/// `reference_eval(unpacked, x, Some(quant))` is the bit-exact oracle for
/// simulating the compressed model on input `x`.
pub fn unpack_to_model(cm: &CompressedModel) -> Result<(NetworkModel, ModelQuant)> {
    let mut layers = Vec::new();
    let mut specs = std::collections::BTreeMap::new();
    for cl in &cm.layers {
        match cl {
            CompressedLayer::Fc(f) => {
                let (w, b) = f.unpack();
                let spec = f.quant.clone().ok_or_else(|| {
                    Error::InvalidQuant(format!("fc `{}` lacks a quant spec", f.name))
                })?;
                specs.insert(f.name.clone(), spec);
                layers.push(Layer::FullyConnected {
                    name: f.name.clone(),
                    weights: w,
                    bias: b,
                });
                if f.relu {
                    layers.push(Layer::Relu {
                        name: format!("{}/relu", f.name),
                    });
                }
            }
            CompressedLayer::Conv(c) => {
                specs.insert(c.name.clone(), c.quant.clone());
                layers.push(Layer::Conv2D {
                    name: c.name.clone(),
                    kernel: c.kernel.clone(),
                    c_out: c.c_out,
                    c_in: c.c_in,
                    k_h: c.k_h,
                    k_w: c.k_w,
                    bias: c.bias.clone(),
                    stride: c.stride,
                    padding: c.padding,
                    groups: c.groups,
                });
                if c.relu {
                    layers.push(Layer::Relu {
                        name: format!("{}/relu", c.name),
                    });
                }
            }
            CompressedLayer::Pool(p) => {
                layers.push(Layer::MaxPool2D {
                    name: p.name.clone(),
                    window: p.window,
                    stride: p.stride,
                });
            }
            CompressedLayer::Attention(a) => {
                specs.insert(a.name.clone(), a.quant.clone());
                layers.push(Layer::MultiHeadAttention {
                    name: a.name.clone(),
                    d_model: a.d_model,
                    d_k: a.d_k,
                    heads: a.heads.clone(),
                });
                if a.relu {
                    layers.push(Layer::Relu {
                        name: format!("{}/relu", a.name),
                    });
                }
            }
            CompressedLayer::Relu { name } => {
                layers.push(Layer::Relu { name: name.clone() });
            }
        }
    }
    let model = NetworkModel::new(cm.name.clone(), cm.input_shape.clone(), layers)?;
    let quant = ModelQuant {
        input_scale: cm.input_scale,
        input_bits: cm.input_bits,
        layers: specs,
    };
    Ok((model, quant))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::reference_eval;
    use crate::tensor::Matrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_mlp(seed: u64) -> NetworkModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mat = |r: usize, c: usize| {
            Matrix::new(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
        };
        NetworkModel::new(
            "mlp",
            vec![8],
            vec![
                Layer::FullyConnected {
                    name: "fc1".into(),
                    weights: mat(16, 8),
                    bias: vec![0.1; 16],
                },
                Layer::Relu { name: "r1".into() },
                Layer::FullyConnected {
                    name: "fc2".into(),
                    weights: mat(4, 16),
                    bias: vec![0.0; 4],
                },
            ],
        )
        .unwrap()
    }

    #[test]
    fn compress_fuses_relu_and_is_deterministic() {
        let model = small_mlp(5);
        let opts = CompressOptions {
            num_blocks: 4,
            weight_bits: 8,
            activation_bits: 8,
            ..Default::default()
        };
        let cm = compress_model(&model, &opts).unwrap();
        assert_eq!(cm.layers.len(), 2, "relu fused into fc1");
        let CompressedLayer::Fc(fc1) = &cm.layers[0] else {
            panic!("expected fc")
        };
        assert!(fc1.relu);
        let (unpacked, quant) = unpack_to_model(&cm).unwrap();
        let x = Tensor::real(vec![8], (0..8).map(|i| (i as f64) / 8.0 - 0.4).collect()).unwrap();
        let y = reference_eval(&unpacked, &x, Some(&quant)).unwrap();
        assert_eq!(y.shape, vec![4]);
        let cm2 = compress_model(&model, &opts).unwrap();
        assert_eq!(cm, cm2);
    }

    #[test]
    fn fc_weights_land_on_grid() {
        let model = small_mlp(6);
        let cm = compress_model(
            &model,
            &CompressOptions {
                num_blocks: 2,
                weight_bits: 4,
                activation_bits: 4,
                ..Default::default()
            },
        )
        .unwrap();
        let CompressedLayer::Fc(fc) = &cm.layers[0] else {
            panic!("expected fc");
        };
        let spec = fc.quant.as_ref().unwrap();
        let (w, _) = fc.unpack();
        for v in &w.data {
            let (_, deq) = spec.quantize_weight(*v);
            assert_eq!(*v, deq, "weight {v} not on the quant grid");
        }
    }

    #[test]
    fn fan_seed_is_stable_and_spreads() {
        assert_eq!(fan_seed(42, 1), fan_seed(42, 1));
        assert_ne!(fan_seed(42, 1), fan_seed(42, 2));
        assert_ne!(fan_seed(42, 1), fan_seed(43, 1));
    }
}
