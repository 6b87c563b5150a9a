//! Bundled model, dataset, and manifest generators, all seeded and
//! deterministic. The CLI `gen` subcommand materializes these to disk; the
//! committed manifests under `assets/` were produced by these functions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::compress::{fan_seed, CompressedLayer, CompressedModel};
use crate::format::{ShapeLayer, ShapeManifest};
use crate::model::{AttentionHead, Layer, NetworkModel};
use crate::pruner::{generate_mask, BlockDiagonalLayer};
use crate::quant::QuantSpec;
use crate::tensor::{Matrix, Tensor};
use crate::train::Dataset;

fn rand_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, range: f64) -> Matrix {
    Matrix::new(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(-range..range)).collect(),
    )
    .expect("consistent dims")
}

/// Random matrix with values rounded to 3 decimals so serialized demo
/// models stay compact.
fn rand_matrix_short(rng: &mut ChaCha8Rng, rows: usize, cols: usize, range: f64) -> Matrix {
    Matrix::new(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| (rng.gen_range(-range..range) * 1000.0).round() / 1000.0)
            .collect(),
    )
    .expect("consistent dims")
}

/// LeNet-300-100 style MLP: 784 -> 300 -> 100 -> 10 with ReLU between FC
/// layers, random weights.
pub fn lenet300(seed: u64) -> NetworkModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    NetworkModel::new(
        "lenet300",
        vec![784],
        vec![
            Layer::FullyConnected {
                name: "fc1".into(),
                weights: rand_matrix_short(&mut rng, 300, 784, 0.2),
                bias: vec![0.0; 300],
            },
            Layer::Relu { name: "relu1".into() },
            Layer::FullyConnected {
                name: "fc2".into(),
                weights: rand_matrix_short(&mut rng, 100, 300, 0.2),
                bias: vec![0.0; 100],
            },
            Layer::Relu { name: "relu2".into() },
            Layer::FullyConnected {
                name: "fc3".into(),
                weights: rand_matrix_short(&mut rng, 10, 100, 0.2),
                bias: vec![0.0; 10],
            },
        ],
    )
    .expect("lenet300 is well-formed")
}

/// The flagship demo layer: a 4000x4000 FC at 10x structured compression
/// (10 blocks of 400x400), 4-bit weights already on the grid, fused ReLU.
/// Built directly in compressed form so the dense matrix never materializes.
pub fn flagship_compressed(seed: u64) -> CompressedModel {
    let mut rng = ChaCha8Rng::seed_from_u64(fan_seed(seed, 1));
    let mask = generate_mask(4000, 4000, 10, fan_seed(seed, 0)).expect("valid mask");
    let w_scale = 1.0 / 7.0;
    let blocks: Vec<Matrix> = (0..10)
        .map(|_| {
            Matrix::new(
                400,
                400,
                (0..160_000)
                    .map(|_| rng.gen_range(-7i64..=7) as f64 * w_scale)
                    .collect(),
            )
            .unwrap()
        })
        .collect();
    let input_scale = 1.0 / 7.0;
    // Accumulators reach 400 * 7 * 7 in code units; spread the output grid
    // to cover that range.
    let act_scale = 400.0 * 7.0 * w_scale * input_scale / 7.0;
    let quant = QuantSpec::uniform(4, 4, w_scale, act_scale);
    CompressedModel {
        name: "flagship-fc".into(),
        input_shape: vec![4000],
        input_scale,
        input_bits: 4,
        layers: vec![CompressedLayer::Fc(BlockDiagonalLayer {
            name: "fc".into(),
            mask,
            blocks,
            bias: vec![vec![0.0; 400]; 10],
            quant: Some(quant),
            relu: true,
        })],
    }
}

/// A seeded input vector for the flagship layer, values in [-1, 1].
pub fn flagship_input(seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::real(
        vec![4000],
        (0..4000).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Two-class interleaved spiral, the desk-scale pruning benchmark: two
/// opposing half-turn arcs with growing radius and mild noise.
pub fn spiral(seed: u64, per_class: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Vec::with_capacity(2 * per_class);
    let mut labels = Vec::with_capacity(2 * per_class);
    for class in 0..2usize {
        for i in 0..per_class {
            let t = i as f64 / per_class as f64;
            let r = 0.25 + 0.75 * t;
            let theta = t * std::f64::consts::PI + class as f64 * std::f64::consts::PI;
            let noise = 0.03;
            inputs.push(vec![
                r * theta.cos() + rng.gen_range(-noise..noise),
                r * theta.sin() + rng.gen_range(-noise..noise),
            ]);
            labels.push(class);
        }
    }
    // Deterministic interleave for mini-batch variety.
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    use rand::seq::SliceRandom;
    order.shuffle(&mut rng);
    Dataset {
        inputs: order.iter().map(|&i| inputs[i].clone()).collect(),
        labels: order.iter().map(|&i| labels[i]).collect(),
    }
}

/// The 2 -> 64 -> 2 MLP for the spiral task.
pub fn spiral_mlp(seed: u64) -> NetworkModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    NetworkModel::new(
        "spiral-mlp",
        vec![2],
        vec![
            Layer::FullyConnected {
                name: "fc1".into(),
                weights: rand_matrix(&mut rng, 64, 2, 0.5),
                bias: vec![0.0; 64],
            },
            Layer::Relu { name: "relu1".into() },
            Layer::FullyConnected {
                name: "fc2".into(),
                weights: rand_matrix(&mut rng, 2, 64, 0.5),
                bias: vec![0.0; 2],
            },
        ],
    )
    .expect("spiral mlp is well-formed")
}

/// Random small mixed model (conv / pool / batchnorm / fc / relu) with
/// coherent shapes, for randomized oracle-equivalence sweeps. At most four
/// MAC/pool/norm layers; widths stay at or below 64.
pub fn random_mixed_model(seed: u64) -> NetworkModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers: Vec<Layer> = Vec::new();
    let with_conv = rng.gen_bool(0.6);
    let mut budget = 4usize;

    let input_shape: Vec<usize>;
    let mut shape: Vec<usize>;
    let flat: usize;
    if with_conv {
        let c = rng.gen_range(1..=3usize);
        let hw = rng.gen_range(5..=9usize);
        input_shape = vec![c, hw, hw];

        // Conv block.
        let groups = if c > 1 && rng.gen_bool(0.3) { c } else { 1 };
        let c_out = groups * rng.gen_range(1..=2usize);
        let k = rng.gen_range(1..=3usize).min(hw);
        let padding = if rng.gen_bool(0.4) { 1 } else { 0 };
        let kernel_len = c_out * (c / groups) * k * k;
        layers.push(Layer::Conv2D {
            name: "conv1".into(),
            kernel: (0..kernel_len).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            c_out,
            c_in: c,
            k_h: k,
            k_w: k,
            bias: (0..c_out).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            stride: (1, 1),
            padding: (padding, padding),
            groups,
        });
        budget -= 1;
        let h2 = hw + 2 * padding - k + 1;
        shape = vec![c_out, h2, h2];

        if rng.gen_bool(0.5) && budget > 1 {
            layers.push(Layer::BatchNorm {
                name: "bn1".into(),
                gamma: (0..c_out).map(|_| rng.gen_range(0.5..1.5)).collect(),
                beta: (0..c_out).map(|_| rng.gen_range(-0.3..0.3)).collect(),
                mean: (0..c_out).map(|_| rng.gen_range(-0.3..0.3)).collect(),
                variance: (0..c_out).map(|_| rng.gen_range(0.5..1.5)).collect(),
                epsilon: 1e-5,
            });
            budget -= 1;
        }
        if rng.gen_bool(0.7) {
            layers.push(Layer::Relu { name: "relu_c".into() });
        }
        // Pool until the flattened width fits a 64-wide FC layer.
        let mut pool_idx = 0;
        while (shape.iter().product::<usize>() > 64 || (rng.gen_bool(0.3) && pool_idx == 0))
            && shape[1] >= 2
        {
            pool_idx += 1;
            layers.push(Layer::MaxPool2D {
                name: format!("pool{pool_idx}"),
                window: (2, 2),
                stride: (2, 2),
            });
            shape = vec![shape[0], (shape[1] - 2) / 2 + 1, (shape[2] - 2) / 2 + 1];
        }
        if pool_idx > 0 {
            budget -= 1;
        }
    } else {
        let n = rng.gen_range(4..=16usize);
        input_shape = vec![n];
        shape = vec![n];
        if rng.gen_bool(0.3) {
            // Standalone batchnorm at the front exercises the 1x1 lowering.
            layers.push(Layer::BatchNorm {
                name: "bn0".into(),
                gamma: (0..n).map(|_| rng.gen_range(0.5..1.5)).collect(),
                beta: (0..n).map(|_| rng.gen_range(-0.3..0.3)).collect(),
                mean: (0..n).map(|_| rng.gen_range(-0.3..0.3)).collect(),
                variance: (0..n).map(|_| rng.gen_range(0.5..1.5)).collect(),
                epsilon: 1e-5,
            });
            budget -= 1;
        }
    }
    flat = shape.iter().product();

    // One or two FC layers to finish.
    let mut flat = flat;
    let mut fc_idx = 0;
    while budget > 0 {
        fc_idx += 1;
        let rows = rng.gen_range(2..=32usize);
        layers.push(Layer::FullyConnected {
            name: format!("fc{fc_idx}"),
            weights: rand_matrix(&mut rng, rows, flat, 1.0),
            bias: (0..rows).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        });
        flat = rows;
        budget -= 1;
        if rng.gen_bool(0.6) {
            layers.push(Layer::Relu {
                name: format!("relu_f{fc_idx}"),
            });
        }
        if rng.gen_bool(0.5) {
            break;
        }
    }

    NetworkModel::new(format!("mixed-{seed}"), input_shape, layers)
        .expect("generated model is well-formed")
}

/// Seeded random input for any model.
pub fn random_input(model: &NetworkModel, seed: u64) -> Tensor {
    seeded_tensor(&model.input_shape, seed)
}

/// Seeded random tensor with values in [-1, 1].
pub fn seeded_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::real(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// A small self-attention model for functional tests.
pub fn small_attention(seed: u64, heads: usize, seq: usize, d_model: usize, d_k: usize) -> NetworkModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let heads: Vec<AttentionHead> = (0..heads)
        .map(|_| AttentionHead {
            wq: rand_matrix(&mut rng, d_model, d_k, 0.5),
            wk: rand_matrix(&mut rng, d_model, d_k, 0.5),
            wv: rand_matrix(&mut rng, d_model, d_k, 0.5),
            wo: rand_matrix(&mut rng, d_k, d_model, 0.5),
        })
        .collect();
    NetworkModel::new(
        "attention",
        vec![seq, d_model],
        vec![Layer::MultiHeadAttention {
            name: "mha".into(),
            d_model,
            d_k,
            heads,
        }],
    )
    .expect("attention model is well-formed")
}

// ---------------------------------------------------------------------------
// Shape manifests
// ---------------------------------------------------------------------------

/// The CNN fully-connected comparison suite (AlexNet/VGG FC layers) at a
/// fixed 512x512 PE / 9-PE setup: block counts are the smallest that fit
/// each layer, so VGG's 25088-wide fc6 packs 49 blocks and folds 6 ways.
pub fn fig14_fc_manifest() -> ShapeManifest {
    let fc = |name: &str, rows: usize, cols: usize, blocks: usize| ShapeLayer::Fc {
        name: name.into(),
        rows,
        cols,
        blocks: Some(blocks),
    };
    ShapeManifest {
        name: "fc-suite-512x512-9pe".into(),
        input: None,
        layers: vec![
            fc("alexnet-fc6", 4096, 9216, 18),
            fc("alexnet-fc7", 4096, 4096, 8),
            fc("alexnet-fc8", 1000, 4096, 8),
            fc("vgg-fc6", 4096, 25088, 49),
            fc("vgg-fc7", 4096, 4096, 8),
            fc("vgg-fc8", 1000, 4096, 8),
        ],
    }
}

/// Group-convolution VGG-19: each conv's group count keeps the per-group
/// unrolled kernel at 288 columns, so every layer fits 9 PEs of 513x513.
pub fn vgg19_groupconv_manifest() -> ShapeManifest {
    let conv = |name: &str, c_in: usize, c_out: usize, groups: usize| ShapeLayer::Conv {
        name: name.into(),
        c_in,
        c_out,
        k: (3, 3),
        stride: (1, 1),
        padding: (1, 1),
        groups,
    };
    let pool = |name: &str| ShapeLayer::Pool {
        name: name.into(),
        window: (2, 2),
        stride: (2, 2),
    };
    ShapeManifest {
        name: "vgg19-groupconv".into(),
        input: Some(vec![3, 224, 224]),
        layers: vec![
            conv("conv1_1", 3, 64, 1),
            conv("conv1_2", 64, 64, 2),
            pool("pool1"),
            conv("conv2_1", 64, 128, 2),
            conv("conv2_2", 128, 128, 4),
            pool("pool2"),
            conv("conv3_1", 128, 256, 4),
            conv("conv3_2", 256, 256, 8),
            conv("conv3_3", 256, 256, 8),
            conv("conv3_4", 256, 256, 8),
            pool("pool3"),
            conv("conv4_1", 256, 512, 8),
            conv("conv4_2", 512, 512, 16),
            conv("conv4_3", 512, 512, 16),
            conv("conv4_4", 512, 512, 16),
            pool("pool4"),
            conv("conv5_1", 512, 512, 16),
            conv("conv5_2", 512, 512, 16),
            conv("conv5_3", 512, 512, 16),
            conv("conv5_4", 512, 512, 16),
            pool("pool5"),
        ],
    }
}

/// Group-convolution ResNet-50 (distinct layer shapes of each stage, with
/// downsampling expressed through the pool layers). Group counts keep every
/// per-group kernel within a 513x513 PE.
pub fn resnet50_groupconv_manifest() -> ShapeManifest {
    let conv = |name: &str,
                c_in: usize,
                c_out: usize,
                k: usize,
                pad: usize,
                stride: usize,
                groups: usize| ShapeLayer::Conv {
        name: name.into(),
        c_in,
        c_out,
        k: (k, k),
        stride: (stride, stride),
        padding: (pad, pad),
        groups,
    };
    let pool = |name: &str| ShapeLayer::Pool {
        name: name.into(),
        window: (2, 2),
        stride: (2, 2),
    };
    ShapeManifest {
        name: "resnet50-groupconv".into(),
        input: Some(vec![3, 224, 224]),
        layers: vec![
            conv("conv1", 3, 64, 7, 3, 2, 1),
            pool("pool1"),
            // conv2_x at 56x56
            conv("conv2-a", 64, 64, 1, 0, 1, 1),
            conv("conv2-b", 64, 64, 3, 1, 1, 2),
            conv("conv2-c", 64, 256, 1, 0, 1, 1),
            conv("conv2-d", 256, 64, 1, 0, 1, 1),
            pool("pool2"),
            // conv3_x at 28x28
            conv("conv3-a", 64, 128, 1, 0, 1, 1),
            conv("conv3-b", 128, 128, 3, 1, 1, 4),
            conv("conv3-c", 128, 512, 1, 0, 1, 1),
            conv("conv3-d", 512, 128, 1, 0, 1, 1),
            pool("pool3"),
            // conv4_x at 14x14
            conv("conv4-a", 128, 256, 1, 0, 1, 1),
            conv("conv4-b", 256, 256, 3, 1, 1, 8),
            conv("conv4-c", 256, 1024, 1, 0, 1, 2),
            conv("conv4-d", 1024, 256, 1, 0, 1, 2),
            pool("pool4"),
            // conv5_x at 7x7
            conv("conv5-a", 256, 512, 1, 0, 1, 2),
            conv("conv5-b", 512, 512, 3, 1, 1, 16),
            conv("conv5-c", 512, 2048, 1, 0, 1, 16),
            conv("conv5-d", 2048, 512, 1, 0, 1, 4),
        ],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lenet300_shape() {
        let m = lenet300(1);
        assert_eq!(m.layers.len(), 5);
        assert_eq!(m.input_shape, vec![784]);
        assert_eq!(m.output_shape().unwrap(), vec![10]);
        let fcs = m
            .layers
            .iter()
            .filter(|l| matches!(l, Layer::FullyConnected { .. }))
            .count();
        assert_eq!(fcs, 3);
    }

    #[test]
    fn flagship_blocks_are_400_square() {
        let cm = flagship_compressed(42);
        let CompressedLayer::Fc(fc) = &cm.layers[0] else {
            panic!()
        };
        assert_eq!(fc.blocks.len(), 10);
        for b in &fc.blocks {
            assert_eq!((b.rows, b.cols), (400, 400));
        }
        assert_eq!(cm.stored_weights(), 1_600_000);
    }

    #[test]
    fn random_models_validate_and_evaluate() {
        for seed in 0..40 {
            let m = random_mixed_model(seed);
            let x = random_input(&m, seed ^ 0xFF);
            let y = crate::eval::reference_eval(&m, &x, None);
            assert!(y.is_ok(), "seed {seed}: {:?}", y.err());
        }
    }

    #[test]
    fn spiral_is_deterministic_and_balanced() {
        let a = spiral(9, 100);
        let b = spiral(9, 100);
        assert_eq!(a, b);
        assert_eq!(a.len(), 200);
        assert_eq!(a.labels.iter().filter(|&&l| l == 1).count(), 100);
    }
}
