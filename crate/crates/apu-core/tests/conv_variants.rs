//! Simulator-vs-oracle checks over the convolution mapping corners:
//! strides, padding, grouped kernels spanning multiple weight loads, and
//! the 16-bit datapath.

use apu_core::compress::{compress_model, unpack_to_model, CompressOptions};
use apu_core::eval::reference_eval;
use apu_core::mapper::{map_model, AcceleratorConfig, ConvCase, Phase};
use apu_core::model::{Layer, NetworkModel};
use apu_core::simulator::{simulate, PeMode};
use apu_core::zoo;
use rand::{Rng, SeedableRng};

fn conv_model(
    seed: u64,
    c_in: usize,
    hw: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    padding: usize,
    groups: usize,
) -> NetworkModel {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let kernel_len = c_out * (c_in / groups) * k * k;
    NetworkModel::new(
        format!("conv-s{stride}-p{padding}-g{groups}"),
        vec![c_in, hw, hw],
        vec![
            Layer::Conv2D {
                name: "conv".into(),
                kernel: (0..kernel_len).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                c_out,
                c_in,
                k_h: k,
                k_w: k,
                bias: (0..c_out).map(|_| rng.gen_range(-0.5..0.5)).collect(),
                stride: (stride, stride),
                padding: (padding, padding),
                groups,
            },
            Layer::Relu { name: "r".into() },
        ],
    )
    .unwrap()
}

fn check(model: &NetworkModel, cfg: &AcceleratorConfig, bits: u32, seed: u64) {
    let cm = compress_model(
        model,
        &CompressOptions {
            num_blocks: 1,
            weight_bits: bits,
            activation_bits: bits,
            seed,
            ..Default::default()
        },
    )
    .unwrap();
    let (oracle_model, quant) = unpack_to_model(&cm).unwrap();
    let input = zoo::random_input(model, seed ^ 0x77);
    let expected = reference_eval(&oracle_model, &input, Some(&quant)).unwrap();
    let program = map_model(&cm, cfg).unwrap();
    for mode in [PeMode::Spatial, PeMode::Temporal] {
        let (out, _) = simulate(&program, &cm, &input, cfg, mode).unwrap();
        assert_eq!(
            out.as_codes().unwrap(),
            expected.as_codes().unwrap(),
            "{} mode {mode}",
            model.name
        );
    }
}

fn cfg(bits: u32) -> AcceleratorConfig {
    AcceleratorConfig {
        num_pes: 4,
        pe_rows: 64,
        pe_cols: 64,
        weight_bits: bits,
        ..AcceleratorConfig::flagship()
    }
}

#[test]
fn strided_and_padded_convs_match_oracle() {
    for (seed, stride, padding) in [(1u64, 2usize, 0usize), (2, 2, 1), (3, 3, 1), (4, 1, 2)] {
        let model = conv_model(seed, 3, 9, 4, 3, stride, padding, 1);
        check(&model, &cfg(8), 8, seed);
    }
}

#[test]
fn grouped_conv_with_multiple_weight_chunks_matches_oracle() {
    // 8 groups of 2x9 kernels on PEs holding 4 rows: two rows per group,
    // two groups per load, four chunks -> reload phases between chunks.
    let model = conv_model(5, 8, 6, 16, 3, 1, 1, 8);
    let tight = AcceleratorConfig {
        num_pes: 3,
        pe_rows: 4,
        pe_cols: 16,
        weight_bits: 8,
        ..AcceleratorConfig::flagship()
    };
    let cm = compress_model(
        &model,
        &CompressOptions {
            num_blocks: 1,
            weight_bits: 8,
            activation_bits: 8,
            seed: 5,
            ..Default::default()
        },
    )
    .unwrap();
    let program = map_model(&cm, &tight).unwrap();
    let reloads = program
        .phases
        .iter()
        .filter(|p| matches!(p, Phase::ReloadWeights { .. }))
        .count();
    assert!(reloads >= 3, "expected chunked weight reloads, got {reloads}");
    check(&model, &tight, 8, 5);
}

#[test]
fn depthwise_conv_is_case_three() {
    let model = conv_model(6, 4, 6, 4, 3, 1, 1, 4);
    let c = cfg(8);
    let plan = apu_core::mapper::plan_conv("d", 4, 4, 3, 3, 4, 6, 6, &c).unwrap();
    assert_eq!(plan.case, ConvCase::III);
    check(&model, &c, 8, 6);
}

#[test]
fn sixteen_bit_datapath_matches_oracle() {
    let model = conv_model(7, 2, 7, 3, 3, 1, 1, 1);
    check(&model, &cfg(16), 16, 7);
    // And a 16-bit FC stack.
    let mlp = zoo::spiral_mlp(9);
    let cm = compress_model(
        &mlp,
        &CompressOptions {
            num_blocks: 2,
            weight_bits: 16,
            activation_bits: 16,
            seed: 9,
            ..Default::default()
        },
    )
    .unwrap();
    let (oracle_model, quant) = unpack_to_model(&cm).unwrap();
    let input = zoo::random_input(&mlp, 31);
    let expected = reference_eval(&oracle_model, &input, Some(&quant)).unwrap();
    let c = cfg(16);
    let program = map_model(&cm, &c).unwrap();
    for mode in [PeMode::Spatial, PeMode::Temporal] {
        let (out, _) = simulate(&program, &cm, &input, &c, mode).unwrap();
        assert_eq!(out.as_codes().unwrap(), expected.as_codes().unwrap(), "{mode}");
    }
}

#[test]
fn pool_with_stride_unequal_to_window_matches_oracle() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    let model = NetworkModel::new(
        "pool-overlap",
        vec![2, 7, 7],
        vec![
            Layer::MaxPool2D {
                name: "pool".into(),
                window: (3, 3),
                stride: (2, 2),
            },
            Layer::FullyConnected {
                name: "fc".into(),
                weights: apu_core::tensor::Matrix::new(
                    3,
                    18,
                    (0..54).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                )
                .unwrap(),
                bias: vec![0.0; 3],
            },
        ],
    )
    .unwrap();
    check(&model, &cfg(8), 8, 11);
}
