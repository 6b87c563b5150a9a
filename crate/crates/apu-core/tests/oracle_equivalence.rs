//! End-to-end functional checks: the simulator must reproduce the reference
//! evaluator bit-exactly on compressed models, in both processing modes.

use apu_core::compress::{compress_model, unpack_to_model, CompressOptions};
use apu_core::eval::reference_eval;
use apu_core::mapper::{map_model, AcceleratorConfig};
use apu_core::simulator::{simulate, PeMode};
use apu_core::zoo;

fn cfg_small() -> AcceleratorConfig {
    AcceleratorConfig {
        num_pes: 4,
        pe_rows: 64,
        pe_cols: 64,
        ..AcceleratorConfig::flagship()
    }
}

fn check_model(seed: u64, blocks: usize, bits: u32) {
    let model = zoo::random_mixed_model(seed);
    let opts = CompressOptions {
        num_blocks: blocks,
        weight_bits: bits,
        activation_bits: bits.max(4),
        seed,
        ..Default::default()
    };
    let cm = compress_model(&model, &opts).unwrap_or_else(|e| {
        panic!("seed {seed}: compress failed: {e}");
    });
    let (oracle_model, quant) = unpack_to_model(&cm).unwrap();
    let input = zoo::random_input(&model, seed ^ 0xABCD);
    let expected = reference_eval(&oracle_model, &input, Some(&quant))
        .unwrap_or_else(|e| panic!("seed {seed}: reference eval failed: {e}"));

    let cfg = AcceleratorConfig {
        weight_bits: bits,
        ..cfg_small()
    };
    let program = map_model(&cm, &cfg).unwrap_or_else(|e| {
        panic!("seed {seed}: mapping failed: {e}");
    });
    for mode in [PeMode::Spatial, PeMode::Temporal] {
        let (out, report) = simulate(&program, &cm, &input, &cfg, mode)
            .unwrap_or_else(|e| panic!("seed {seed} {mode}: simulate failed: {e}"));
        assert_eq!(
            out.as_codes().unwrap(),
            expected.as_codes().unwrap(),
            "seed {seed}, mode {mode}: simulator diverged from the oracle"
        );
        assert!(report.total_cycles > 0);
    }
}

#[test]
fn mixed_models_match_oracle_both_modes() {
    for seed in 0..30u64 {
        let blocks = 1 + (seed % 8) as usize;
        let bits = if seed % 2 == 0 { 4 } else { 8 };
        check_model(seed, blocks, bits);
    }
}

#[test]
fn modes_agree_with_each_other() {
    for seed in [3u64, 7, 11] {
        let model = zoo::random_mixed_model(seed);
        let cm = compress_model(
            &model,
            &CompressOptions {
                num_blocks: 4,
                seed,
                ..Default::default()
            },
        )
        .unwrap();
        let cfg = cfg_small();
        let program = map_model(&cm, &cfg).unwrap();
        let input = zoo::random_input(&model, seed);
        let (a, ra) = simulate(&program, &cm, &input, &cfg, PeMode::Spatial).unwrap();
        let (b, rb) = simulate(&program, &cm, &input, &cfg, PeMode::Temporal).unwrap();
        assert_eq!(a, b, "seed {seed}: spatial and temporal outputs differ");
        // Cycle accounting is deterministic per mode.
        let (a2, ra2) = simulate(&program, &cm, &input, &cfg, PeMode::Spatial).unwrap();
        assert_eq!(a, a2);
        assert_eq!(ra, ra2);
        let _ = rb;
    }
}

#[test]
fn attention_matches_oracle() {
    for (seed, heads) in [(1u64, 1usize), (2, 2), (5, 4)] {
        let model = zoo::small_attention(seed, heads, 5, 8, 4);
        let cm = compress_model(
            &model,
            &CompressOptions {
                num_blocks: 1,
                weight_bits: 8,
                activation_bits: 8,
                seed,
                ..Default::default()
            },
        )
        .unwrap();
        let (oracle_model, quant) = unpack_to_model(&cm).unwrap();
        let input = zoo::random_input(&model, seed ^ 0x55);
        let expected = reference_eval(&oracle_model, &input, Some(&quant)).unwrap();
        let cfg = AcceleratorConfig {
            num_pes: 3,
            pe_rows: 16,
            pe_cols: 16,
            weight_bits: 8,
            ..AcceleratorConfig::flagship()
        };
        let program = map_model(&cm, &cfg).unwrap();
        for mode in [PeMode::Spatial, PeMode::Temporal] {
            let (out, _) = simulate(&program, &cm, &input, &cfg, mode).unwrap();
            assert_eq!(
                out.as_codes().unwrap(),
                expected.as_codes().unwrap(),
                "attention seed {seed} heads {heads} mode {mode}"
            );
        }
    }
}

#[test]
fn attention_with_wider_activations_than_weights() {
    // 4-bit weights with 8-bit activations: the score products are
    // activation-by-activation and must not trip the accumulator guard.
    let model = zoo::small_attention(13, 2, 6, 8, 4);
    let cm = compress_model(
        &model,
        &CompressOptions {
            num_blocks: 1,
            weight_bits: 4,
            activation_bits: 8,
            seed: 13,
            ..Default::default()
        },
    )
    .unwrap();
    let (oracle_model, quant) = unpack_to_model(&cm).unwrap();
    let input = zoo::random_input(&model, 29);
    let expected = reference_eval(&oracle_model, &input, Some(&quant)).unwrap();
    let cfg = AcceleratorConfig {
        num_pes: 3,
        pe_rows: 16,
        pe_cols: 16,
        weight_bits: 4,
        activation_bits: 8,
        ..AcceleratorConfig::flagship()
    };
    let program = map_model(&cm, &cfg).unwrap();
    for mode in [PeMode::Spatial, PeMode::Temporal] {
        let (out, _) = simulate(&program, &cm, &input, &cfg, mode).unwrap();
        assert_eq!(out.as_codes().unwrap(), expected.as_codes().unwrap(), "{mode}");
    }
}

#[test]
fn attention_head_folding() {
    // 8 heads on 10 PEs: one fold; 16 heads: two folds.
    let cfg = AcceleratorConfig {
        pe_rows: 16,
        pe_cols: 16,
        weight_bits: 8,
        ..AcceleratorConfig::flagship()
    };
    for (heads, want_folds) in [(8usize, 1u64), (16, 2)] {
        let model = zoo::small_attention(9, heads, 4, 8, 4);
        let cm = compress_model(
            &model,
            &CompressOptions {
                num_blocks: 1,
                weight_bits: 8,
                activation_bits: 8,
                seed: 9,
                ..Default::default()
            },
        )
        .unwrap();
        let program = map_model(&cm, &cfg).unwrap();
        let mut max_fold = 0u64;
        for p in &program.phases {
            if let apu_core::mapper::Phase::Compute { fold, .. } = p {
                max_fold = max_fold.max(*fold as u64 + 1);
            }
        }
        assert_eq!(max_fold, want_folds, "{heads} heads");
    }
}

#[test]
fn case_two_conv_matches_oracle() {
    // A conv too wide for one PE forces the host-reduced case II path.
    use apu_core::model::{Layer, NetworkModel};
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
    let (c_in, hw, c_out, k) = (8usize, 6usize, 5usize, 3usize);
    let kernel: Vec<f64> = (0..c_out * c_in * k * k)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let model = NetworkModel::new(
        "case2",
        vec![c_in, hw, hw],
        vec![
            Layer::Conv2D {
                name: "conv".into(),
                kernel,
                c_out,
                c_in,
                k_h: k,
                k_w: k,
                bias: (0..c_out).map(|_| rng.gen_range(-0.5..0.5)).collect(),
                stride: (1, 1),
                padding: (0, 0),
                groups: 1,
            },
            Layer::Relu { name: "r".into() },
        ],
    )
    .unwrap();
    // 8*3*3 = 72 unrolled columns > 32 PE columns: case II with 3 slices.
    let cfg = AcceleratorConfig {
        num_pes: 4,
        pe_rows: 8,
        pe_cols: 32,
        ..AcceleratorConfig::flagship()
    };
    let cm = compress_model(
        &model,
        &CompressOptions {
            num_blocks: 1,
            seed: 5,
            ..Default::default()
        },
    )
    .unwrap();
    let (oracle_model, quant) = unpack_to_model(&cm).unwrap();
    let input = zoo::random_input(&model, 123);
    let expected = reference_eval(&oracle_model, &input, Some(&quant)).unwrap();
    let program = map_model(&cm, &cfg).unwrap();
    for mode in [PeMode::Spatial, PeMode::Temporal] {
        let (out, _) = simulate(&program, &cm, &input, &cfg, mode).unwrap();
        assert_eq!(out.as_codes().unwrap(), expected.as_codes().unwrap(), "{mode}");
    }
}

#[test]
fn standalone_relu_runs_on_host_and_matches_oracle() {
    // ReLU directly after a pool cannot fuse into a MAC layer; it must run
    // as a host op and still match the oracle bit-exactly.
    use apu_core::mapper::{HostWork, Phase};
    use apu_core::model::{Layer, NetworkModel};
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(63);
    let model = NetworkModel::new(
        "host-relu",
        vec![2, 6, 6],
        vec![
            Layer::MaxPool2D {
                name: "pool".into(),
                window: (2, 2),
                stride: (2, 2),
            },
            Layer::Relu { name: "relu".into() },
            Layer::FullyConnected {
                name: "fc".into(),
                weights: apu_core::tensor::Matrix::new(
                    4,
                    18,
                    (0..72).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                )
                .unwrap(),
                bias: vec![0.25; 4],
            },
        ],
    )
    .unwrap();
    let cm = compress_model(
        &model,
        &CompressOptions {
            num_blocks: 2,
            seed: 63,
            ..Default::default()
        },
    )
    .unwrap();
    let cfg = cfg_small();
    let program = map_model(&cm, &cfg).unwrap();
    assert!(
        program.phases.iter().any(|p| matches!(
            p,
            Phase::HostOp {
                kind: HostWork::ReluLayer,
                ..
            }
        )),
        "standalone relu must lower to a host op"
    );
    let (oracle_model, quant) = unpack_to_model(&cm).unwrap();
    let input = zoo::random_input(&model, 17);
    let expected = reference_eval(&oracle_model, &input, Some(&quant)).unwrap();
    for mode in [PeMode::Spatial, PeMode::Temporal] {
        let (out, _) = simulate(&program, &cm, &input, &cfg, mode).unwrap();
        assert_eq!(out.as_codes().unwrap(), expected.as_codes().unwrap(), "{mode}");
    }
}

#[test]
fn partial_fold_utilization_is_assigned_over_pes() {
    // 8 equal blocks on 10 PEs: one fold, utilization 8/10 during compute.
    use apu_core::model::{Layer, NetworkModel};
    use apu_core::tensor::Matrix;
    let model = NetworkModel::new(
        "m",
        vec![32],
        vec![Layer::FullyConnected {
            name: "fc".into(),
            weights: Matrix::identity(32),
            bias: vec![0.0; 32],
        }],
    )
    .unwrap();
    let cm = compress_model(
        &model,
        &CompressOptions {
            num_blocks: 8,
            seed: 2,
            ..Default::default()
        },
    )
    .unwrap();
    let cfg = AcceleratorConfig::flagship();
    let program = map_model(&cm, &cfg).unwrap();
    let input = zoo::random_input(&model, 2);
    let (_, report) = simulate(&program, &cm, &input, &cfg, PeMode::Spatial).unwrap();
    assert!(
        (report.compute_utilization - 0.8).abs() < 1e-12,
        "8 blocks on 10 PEs: utilization {}",
        report.compute_utilization
    );
}

#[test]
fn masked_spiral_mlp_survives_the_whole_pipeline() {
    // The 2->64->2 MLP at 4 blocks per layer produces blocks with empty
    // column sets (bias-only rows); train, compress, map, and simulate must
    // all handle them, and the simulator must still match the oracle.
    use apu_core::pruner::generate_mask;
    use apu_core::train::{train_structured, TrainConfig};
    use std::collections::BTreeMap;

    let data = zoo::spiral(42, 60);
    let model = zoo::spiral_mlp(42);
    let mut masks = BTreeMap::new();
    masks.insert("fc1".to_string(), generate_mask(64, 2, 4, 7).unwrap());
    masks.insert("fc2".to_string(), generate_mask(2, 64, 4, 8).unwrap());
    let cfg_train = TrainConfig {
        epochs: 30,
        ..Default::default()
    };
    let (trained, _) = train_structured(&model, &data, &masks, &cfg_train).unwrap();

    // Compress under the training masks so the packed blocks carry exactly
    // the weights training produced.
    let cm = compress_model(
        &trained,
        &CompressOptions {
            num_blocks: 4,
            weight_bits: 8,
            activation_bits: 8,
            seed: 4242,
            masks: masks.clone(),
            ..Default::default()
        },
    )
    .unwrap();
    let apu_core::compress::CompressedLayer::Fc(fc1) = &cm.layers[0] else {
        panic!("expected fc");
    };
    assert_eq!(fc1.mask, masks["fc1"], "training mask carried into the container");
    let (oracle_model, quant) = unpack_to_model(&cm).unwrap();
    let cfg = AcceleratorConfig {
        num_pes: 4,
        pe_rows: 64,
        pe_cols: 64,
        weight_bits: 8,
        ..AcceleratorConfig::flagship()
    };
    let program = map_model(&cm, &cfg).unwrap();
    for (i, sample) in data.inputs.iter().take(5).enumerate() {
        let x = apu_core::tensor::Tensor::real(vec![2], sample.clone()).unwrap();
        let expected = reference_eval(&oracle_model, &x, Some(&quant)).unwrap();
        for mode in [PeMode::Spatial, PeMode::Temporal] {
            let (out, _) = simulate(&program, &cm, &x, &cfg, mode).unwrap();
            assert_eq!(
                out.as_codes().unwrap(),
                expected.as_codes().unwrap(),
                "sample {i} mode {mode}"
            );
        }
    }
}

#[test]
fn eval_rejects_mismatched_input_shape() {
    let model = zoo::spiral_mlp(1);
    let bad = zoo::seeded_tensor(&[5], 1);
    let err = reference_eval(&model, &bad, None).unwrap_err();
    assert!(matches!(err, apu_core::Error::ShapeMismatch { .. }));
}

#[test]
fn overlap_flag_shortens_folded_runs_without_changing_bits() {
    // 20 blocks on 10 PEs: the second fold's route-in can hide behind the
    // first fold's compute when overlap is enabled.
    use apu_core::model::{Layer, NetworkModel};
    use apu_core::tensor::Matrix;
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let model = NetworkModel::new(
        "m",
        vec![200],
        vec![Layer::FullyConnected {
            name: "fc".into(),
            weights: Matrix::new(
                200,
                200,
                (0..40_000).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap(),
            bias: vec![0.0; 200],
        }],
    )
    .unwrap();
    let cm = compress_model(
        &model,
        &CompressOptions {
            num_blocks: 20,
            seed: 3,
            ..Default::default()
        },
    )
    .unwrap();
    let base = AcceleratorConfig {
        num_pes: 10,
        pe_rows: 32,
        pe_cols: 32,
        ..AcceleratorConfig::flagship()
    };
    let overlapped = AcceleratorConfig {
        overlap_route_compute: true,
        ..base.clone()
    };
    let input = zoo::random_input(&model, 9);
    let pa = map_model(&cm, &base).unwrap();
    let pb = map_model(&cm, &overlapped).unwrap();
    let (out_a, rep_a) = simulate(&pa, &cm, &input, &base, PeMode::Spatial).unwrap();
    let (out_b, rep_b) = simulate(&pb, &cm, &input, &overlapped, PeMode::Spatial).unwrap();
    assert_eq!(out_a, out_b, "overlap must not change results");
    assert!(
        rep_b.total_cycles < rep_a.total_cycles,
        "overlap {} must beat barriers {}",
        rep_b.total_cycles,
        rep_a.total_cycles
    );
}

#[test]
fn trainer_divergence_guard_trips() {
    use apu_core::train::{train_structured, TrainConfig};
    use std::collections::BTreeMap;
    let data = zoo::spiral(1, 40);
    let model = zoo::spiral_mlp(1);
    // A step size large enough to overflow the second layer's logits to
    // infinity, which turns the softmax (inf - inf) into NaN loss.
    let cfg = TrainConfig {
        epochs: 60,
        learning_rate: 1e200,
        momentum: 0.99,
        ..Default::default()
    };
    let err = train_structured(&model, &data, &BTreeMap::new(), &cfg).unwrap_err();
    assert!(
        matches!(err, apu_core::Error::Diverged { .. }),
        "expected divergence guard, got {err}"
    );
}

#[test]
fn flagship_compute_phase_is_400_cycles() {
    let cm = zoo::flagship_compressed(42);
    let cfg = AcceleratorConfig::flagship();
    let program = map_model(&cm, &cfg).unwrap();
    let input = zoo::flagship_input(42);
    let (out, report) = simulate(&program, &cm, &input, &cfg, PeMode::Spatial).unwrap();
    assert_eq!(report.compute_cycles, 400);
    assert_eq!(report.compute_utilization, 1.0);
    assert_eq!(report.route_cycles, 400, "balanced layer routes at L*");
    // Oracle equality holds at full scale too.
    let (oracle_model, quant) = unpack_to_model(&cm).unwrap();
    let expected = reference_eval(&oracle_model, &input, Some(&quant)).unwrap();
    assert_eq!(out.as_codes().unwrap(), expected.as_codes().unwrap());
    // Temporal mode: identical bits, same compute-cycle count (400 inputs).
    let (out_t, report_t) = simulate(&program, &cm, &input, &cfg, PeMode::Temporal).unwrap();
    assert_eq!(out_t, out);
    assert_eq!(report_t.compute_cycles, 400);
}
