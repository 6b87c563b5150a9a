//! Property tests over the pruner, scheduler, and quantizer invariants.

use proptest::prelude::*;

use apu_core::costmodel::mux_select_bits;
use apu_core::pruner::{apply_mask, generate_mask, pack_blocks};
use apu_core::quant::{dequantize_uniform, quantize_uniform};
use apu_core::scheduler::{build_schedule, emit_selects, verify_schedule, RoutingDemand, Transfer};
use apu_core::tensor::Matrix;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    /// Pack/unpack is the identity on masked matrices.
    #[test]
    fn pack_unpack_round_trip(
        rows in 2usize..48,
        cols in 2usize..48,
        nb_pick in 0usize..4,
        seed in any::<u64>(),
    ) {
        let nb = [1usize, 2, 4, 8][nb_pick].min(rows.max(cols));
        let mask = generate_mask(rows, cols, nb, seed).unwrap();
        // Random dense weights, masked.
        let mut state = seed;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        };
        let dense = Matrix::new(rows, cols, (0..rows * cols).map(|_| next()).collect()).unwrap();
        let masked = apply_mask(&dense, &mask).unwrap();
        let bias: Vec<f64> = (0..rows).map(|_| next()).collect();
        let layer = pack_blocks(&masked, &bias, &mask, None).unwrap();
        let (w2, b2) = layer.unpack();
        prop_assert_eq!(masked, w2);
        prop_assert_eq!(bias, b2);
    }

    /// Masks are exactly block-diagonal under their stored permutations, and
    /// block index sets partition rows and columns.
    #[test]
    fn mask_structure(
        rows in 1usize..40,
        cols in 1usize..40,
        nb in 1usize..10,
        seed in any::<u64>(),
    ) {
        prop_assume!(nb <= rows.max(cols));
        let mask = generate_mask(rows, cols, nb, seed).unwrap();
        // Exclusivity: block index sets partition both dimensions.
        let mut rs: Vec<usize> = (0..nb).flat_map(|k| mask.block_rows(k).to_vec()).collect();
        let mut cs: Vec<usize> = (0..nb).flat_map(|k| mask.block_cols(k).to_vec()).collect();
        rs.sort_unstable();
        cs.sort_unstable();
        prop_assert_eq!(rs, (0..rows).collect::<Vec<_>>());
        prop_assert_eq!(cs, (0..cols).collect::<Vec<_>>());
        // Even division gives the exact compression ratio.
        if rows % nb == 0 && cols % nb == 0 {
            prop_assert_eq!(mask.count_nonzero(), rows * cols / nb);
        }
        // Determinism.
        prop_assert_eq!(generate_mask(rows, cols, nb, seed).unwrap(), mask);
    }

    /// Uniform quantization is idempotent and saturating.
    #[test]
    fn quantizer_idempotence(x in -1e4f64..1e4, bits_pick in 0usize..3, scale in 1e-3f64..10.0) {
        let bits = [4u32, 8, 16][bits_pick];
        let c1 = quantize_uniform(x, bits, scale);
        let c2 = quantize_uniform(dequantize_uniform(c1, scale), bits, scale);
        prop_assert_eq!(c1, c2);
        prop_assert!(c1 <= (1 << (bits - 1)) - 1);
        prop_assert!(c1 >= -(1 << (bits - 1)));
    }
}

fn random_demand(seed: u64, n: usize, max_triples: usize) -> RoutingDemand {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut transfers = Vec::new();
    let count = rng.gen_range(1..=max_triples);
    for a in 0..count as u32 {
        transfers.push(Transfer {
            source: rng.gen_range(0..n as u32),
            dest: rng.gen_range(0..n as u32),
            activation: a,
        });
    }
    RoutingDemand::new(n, n, transfers).unwrap()
}

/// A balanced demand: the superposition of k random permutation matrices,
/// so every source sends k values and every destination receives k.
fn balanced_demand(seed: u64, n: usize, k: usize) -> RoutingDemand {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut transfers = Vec::new();
    let mut act = 0u32;
    for _ in 0..k {
        let mut perm: Vec<u32> = (0..n as u32).collect();
        perm.shuffle(&mut rng);
        for (s, &d) in perm.iter().enumerate() {
            transfers.push(Transfer {
                source: s as u32,
                dest: d,
                activation: act,
            });
            act += 1;
        }
    }
    RoutingDemand::new(n, n, transfers).unwrap()
}

#[test]
fn random_demands_schedule_validly() {
    for seed in 0..300u64 {
        let n = 2 + (seed % 7) as usize; // up to 8
        let d = random_demand(seed, n, 64);
        let s = build_schedule(&d);
        let v = verify_schedule(&d, &s);
        assert!(v.is_empty(), "seed {seed}: {v:?}");
        assert!(s.len() >= d.lower_bound());
    }
}

#[test]
fn balanced_demands_meet_lower_bound() {
    for seed in 0..200u64 {
        let n = 2 + (seed % 7) as usize;
        let k = 1 + (seed % 9) as usize;
        let d = balanced_demand(seed, n, k);
        assert_eq!(d.lower_bound(), k as u64);
        let s = build_schedule(&d);
        assert_eq!(
            s.len(),
            k as u64,
            "seed {seed}: balanced {n}x{n} demand of degree {k} must finish in {k} cycles"
        );
        assert!(verify_schedule(&d, &s).is_empty());
    }
}

#[test]
fn select_formula_matches_emitted_tables() {
    for seed in 0..50u64 {
        let n = 2 + (seed % 8) as usize;
        let d = random_demand(seed.wrapping_mul(31), n, 48);
        let s = build_schedule(&d);
        let table = emit_selects(&s, n);
        assert_eq!(
            table.storage_bits(),
            mux_select_bits(n, n, s.len()),
            "seed {seed}"
        );
    }
}

/// Within each (source, dest) pair, deliveries happen in demand order —
/// the destination PE's latch fill order.
#[test]
fn per_pair_delivery_preserves_consumption_order() {
    for seed in 0..100u64 {
        let n = 2 + (seed % 6) as usize;
        let d = random_demand(seed.wrapping_add(4000), n, 48);
        let s = build_schedule(&d);
        // Delivery order per pair.
        let mut delivered: std::collections::BTreeMap<(u32, u32), Vec<u32>> =
            std::collections::BTreeMap::new();
        for cycle in &s.cycles {
            for t in cycle {
                delivered.entry((t.source, t.dest)).or_default().push(t.activation);
            }
        }
        // Demand order per pair.
        let mut wanted: std::collections::BTreeMap<(u32, u32), Vec<u32>> =
            std::collections::BTreeMap::new();
        for t in &d.transfers {
            wanted.entry((t.source, t.dest)).or_default().push(t.activation);
        }
        assert_eq!(delivered, wanted, "seed {seed}");
    }
}

/// Exhaustive small-scale check: every d-regular 0/1 demand on n <= 4
/// nodes (all of them) schedules in exactly d cycles.
#[test]
fn all_regular_demands_up_to_4_meet_lower_bound() {
    for n in 1usize..=4 {
        let cells = n * n;
        let mut checked = 0u64;
        for bits in 0u32..(1u32 << cells) {
            // Row/column sums must all equal some d >= 1.
            let mut row = vec![0u32; n];
            let mut col = vec![0u32; n];
            for i in 0..cells {
                if bits >> i & 1 == 1 {
                    row[i / n] += 1;
                    col[i % n] += 1;
                }
            }
            let d = row[0];
            if d == 0 || row.iter().any(|&r| r != d) || col.iter().any(|&c| c != d) {
                continue;
            }
            let mut transfers = Vec::new();
            for i in 0..cells {
                if bits >> i & 1 == 1 {
                    transfers.push(Transfer {
                        source: (i / n) as u32,
                        dest: (i % n) as u32,
                        activation: i as u32,
                    });
                }
            }
            let demand = RoutingDemand::new(n, n, transfers).unwrap();
            assert_eq!(demand.lower_bound(), d as u64);
            let sched = build_schedule(&demand);
            assert_eq!(
                sched.len(),
                d as u64,
                "{d}-regular demand on {n} nodes (bits {bits:#x})"
            );
            assert!(verify_schedule(&demand, &sched).is_empty());
            checked += 1;
        }
        assert!(checked > 0, "no regular demands enumerated at n={n}");
    }
}

/// Per-cycle legality confirmed by a brute-force bipartite check on small
/// instances: every cycle's transfer set must be an injective partial map
/// in both directions, verified by exhaustive pairwise comparison.
#[test]
fn brute_force_matching_oracle_small() {
    for seed in 0..120u64 {
        let n = 2 + (seed % 5) as usize; // up to 6 nodes
        let d = random_demand(seed.wrapping_add(7000), n, 36);
        let s = build_schedule(&d);
        for (ci, cycle) in s.cycles.iter().enumerate() {
            for i in 0..cycle.len() {
                for j in 0..cycle.len() {
                    if i != j {
                        assert_ne!(
                            cycle[i].source, cycle[j].source,
                            "seed {seed} cycle {ci}: not a matching (source)"
                        );
                        assert_ne!(
                            cycle[i].dest, cycle[j].dest,
                            "seed {seed} cycle {ci}: not a matching (dest)"
                        );
                    }
                }
            }
        }
    }
}
