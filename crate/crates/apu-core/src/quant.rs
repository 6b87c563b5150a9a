//! Fixed-point quantization: uniform symmetric grids and fitted codebooks.
//!
//! These primitives define the bit-exact layer-boundary semantics shared by
//! the reference evaluator and the simulator. Both sides call into the same
//! code/dequantize formulas; everything downstream of them (MACs, reductions)
//! is exact integer arithmetic, so sum order never changes the result.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest positive code for a signed width, `2^(bits-1) - 1`.
pub fn qmax(bits: u32) -> i64 {
    (1i64 << (bits - 1)) - 1
}

/// Most negative code for a signed width, `-2^(bits-1)`.
pub fn qmin(bits: u32) -> i64 {
    -(1i64 << (bits - 1))
}

/// Weight quantization scheme for one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum WeightQuant {
    /// `code = clamp(round(x / scale))`, dequant `code * scale`.
    Uniform { scale: f64 },
    /// Nearest codebook entry, ties to the lower index. The code is the
    /// entry index biased by `-2^(bits-1)` so it fits the signed width.
    Codebook { entries: Vec<f64> },
}

/// Per-layer quantization: weight grid plus the output activation scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub weight_bits: u32,
    pub activation_bits: u32,
    pub weights: WeightQuant,
    /// Scale of this layer's output activation codes.
    pub act_scale: f64,
}

impl QuantSpec {
    pub fn uniform(weight_bits: u32, activation_bits: u32, w_scale: f64, act_scale: f64) -> Self {
        QuantSpec {
            weight_bits,
            activation_bits,
            weights: WeightQuant::Uniform { scale: w_scale },
            act_scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.weight_bits, 4 | 8 | 16) {
            return Err(Error::InvalidQuant(format!(
                "weight_bits must be 4, 8 or 16, got {}",
                self.weight_bits
            )));
        }
        if self.activation_bits == 0 || self.activation_bits > 32 {
            return Err(Error::InvalidQuant(format!(
                "activation_bits out of range: {}",
                self.activation_bits
            )));
        }
        if !self.act_scale.is_finite() || self.act_scale <= 0.0 {
            return Err(Error::InvalidQuant("activation scale must be > 0".into()));
        }
        match &self.weights {
            WeightQuant::Uniform { scale } => {
                if !scale.is_finite() || *scale <= 0.0 {
                    return Err(Error::InvalidQuant("uniform scale must be > 0".into()));
                }
            }
            WeightQuant::Codebook { entries } => {
                let want = 1usize << self.weight_bits;
                if entries.len() != want {
                    return Err(Error::InvalidQuant(format!(
                        "codebook must hold 2^{} = {} entries, got {}",
                        self.weight_bits,
                        want,
                        entries.len()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Quantize a weight value: `(code, dequantized)`.
    pub fn quantize_weight(&self, x: f64) -> (i64, f64) {
        match &self.weights {
            WeightQuant::Uniform { scale } => {
                let code = quantize_uniform(x, self.weight_bits, *scale);
                (code, code as f64 * scale)
            }
            WeightQuant::Codebook { entries } => {
                let idx = nearest_codebook_entry(x, entries);
                (idx as i64 + qmin(self.weight_bits), entries[idx])
            }
        }
    }
}

/// Uniform symmetric quantizer: `clamp(round(x/scale), qmin, qmax)`.
/// Saturating; `round` is half-away-from-zero (IEEE `f64::round`).
pub fn quantize_uniform(x: f64, bits: u32, scale: f64) -> i64 {
    let q = (x / scale).round();
    let lo = qmin(bits) as f64;
    let hi = qmax(bits) as f64;
    q.clamp(lo, hi) as i64
}

pub fn dequantize_uniform(code: i64, scale: f64) -> f64 {
    code as f64 * scale
}

/// Index of the nearest codebook entry; ties go to the lower index.
pub fn nearest_codebook_entry(x: f64, entries: &[f64]) -> usize {
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for (i, e) in entries.iter().enumerate() {
        let d = (x - e).abs();
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Quantize one value under a spec: returns the integer code and the
/// dequantized real it stands for.
pub fn quantize_value(x: f64, spec: &QuantSpec) -> (i64, f64) {
    spec.quantize_weight(x)
}

/// Fit a `2^bits`-entry codebook to a value set with seeded Lloyd k-means.
///
/// Deterministic per seed: initial centroids are a seeded sample of the
/// values, iteration count is fixed, and assignment ties go to the lower
/// centroid index. Empty clusters keep their previous centroid.
pub fn fit_codebook(values: &[f64], bits: u32, seed: u64) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::InvalidQuant(
            "cannot fit a codebook to an empty value set".into(),
        ));
    }
    let k = 1usize << bits;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Seeded initial pick from the (sorted, deduplicated) value set so the
    // starting centroids are distinct whenever possible.
    let mut uniq: Vec<f64> = values.to_vec();
    uniq.sort_by(|a, b| a.partial_cmp(b).unwrap());
    uniq.dedup();
    let mut centroids: Vec<f64> = if uniq.len() >= k {
        let mut picks: Vec<f64> = uniq.choose_multiple(&mut rng, k).copied().collect();
        picks.sort_by(|a, b| a.partial_cmp(b).unwrap());
        picks
    } else {
        let mut c = uniq.clone();
        while c.len() < k {
            c.push(*uniq.last().unwrap());
        }
        c
    };

    const ITERS: usize = 25;
    for _ in 0..ITERS {
        let mut sums = vec![0.0f64; k];
        let mut counts = vec![0usize; k];
        for &v in values {
            let i = nearest_codebook_entry(v, &centroids);
            sums[i] += v;
            counts[i] += 1;
        }
        for i in 0..k {
            if counts[i] > 0 {
                centroids[i] = sums[i] / counts[i] as f64;
            }
        }
    }
    centroids.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(centroids)
}

/// Requantization multiplier taking a wide accumulator (in units of
/// `w_scale * in_scale`) down to output activation codes.
pub fn requant_multiplier(w_scale: f64, in_scale: f64, out_scale: f64) -> f64 {
    w_scale * in_scale / out_scale
}

/// Map a wide integer accumulator to an output activation code.
pub fn requant_code(acc: i64, mult: f64, activation_bits: u32) -> i64 {
    let q = (acc as f64 * mult).round();
    q.clamp(qmin(activation_bits) as f64, qmax(activation_bits) as f64) as i64
}

/// Bias folded into accumulator units (`w_scale * in_scale` per count),
/// saturating to the accumulator width.
pub fn bias_code(bias: f64, w_scale: f64, in_scale: f64, acc_bits: u32) -> i64 {
    let q = (bias / (w_scale * in_scale)).round();
    let lo = -(1i128 << (acc_bits - 1)) as f64;
    let hi = ((1i128 << (acc_bits - 1)) - 1) as f64;
    q.clamp(lo, hi) as i64
}

/// Accumulator width that makes temporal-mode overflow impossible:
/// `2*weight_bits + ceil(log2(max_fanin))` plus headroom for the bias add.
pub fn accumulator_bits(weight_bits: u32, activation_bits: u32, max_fanin: usize) -> u32 {
    let product_bits = weight_bits + activation_bits;
    // +1: the bias add on top of a full-magnitude sum.
    product_bits + crate::costmodel::ceil_log2(max_fanin.max(1) as u64) + 1
}

/// Whole-model quantization: the input tensor grid plus one spec per
/// MAC-bearing layer, keyed by layer name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelQuant {
    pub input_scale: f64,
    pub input_bits: u32,
    pub layers: BTreeMap<String, QuantSpec>,
}

impl ModelQuant {
    pub fn spec_for(&self, layer: &str) -> Result<&QuantSpec> {
        self.layers
            .get(layer)
            .ok_or_else(|| Error::InvalidQuant(format!("no quant spec for layer `{layer}`")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(bits: u32, scale: f64) -> QuantSpec {
        QuantSpec::uniform(bits, bits, scale, 1.0)
    }

    #[test]
    fn zero_quantizes_to_code_zero() {
        for bits in [4, 8, 16] {
            let (code, deq) = quantize_value(0.0, &spec(bits, 0.37));
            assert_eq!(code, 0);
            assert_eq!(deq, 0.0);
        }
    }

    #[test]
    fn four_bit_saturates() {
        // scale 1: 9.4 rounds to 9, clamps to qmax = 7.
        let (code, _) = quantize_value(9.4, &spec(4, 1.0));
        assert_eq!(code, 7);
        let (code, _) = quantize_value(-100.0, &spec(4, 1.0));
        assert_eq!(code, -8);
    }

    #[test]
    fn four_bit_half_scale() {
        // round(1.3 / 0.5) = round(2.6) = 3, dequant 1.5.
        let (code, deq) = quantize_value(1.3, &spec(4, 0.5));
        assert_eq!(code, 3);
        assert_eq!(deq, 1.5);
    }

    #[test]
    fn quantizer_idempotent() {
        let s = spec(4, 0.37);
        for i in -40..=40 {
            let x = i as f64 * 0.11;
            let (c1, d1) = quantize_value(x, &s);
            let (c2, _) = quantize_value(d1, &s);
            assert_eq!(c1, c2, "idempotence failed at x={x}");
        }
    }

    #[test]
    fn codebook_exact_clusters() {
        let cb = fit_codebook(&[-1.0, -1.0, 1.0, 1.0], 1, 7).unwrap();
        assert_eq!(cb, vec![-1.0, 1.0]);
    }

    #[test]
    fn codebook_degenerate_single_value() {
        let cb = fit_codebook(&[0.25; 10], 2, 3).unwrap();
        assert!(cb.iter().all(|&c| c == 0.25));
    }

    #[test]
    fn codebook_beats_uniform_grid_on_uniform_data() {
        // Values uniform on [0, 1): a fitted codebook should not lose to the
        // symmetric uniform grid, which wastes half its codes on negatives.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        use rand::Rng;
        let values: Vec<f64> = (0..512).map(|_| rng.gen::<f64>()).collect();
        let bits = 2;
        let cb = fit_codebook(&values, bits, 5).unwrap();
        let cb_mse: f64 = values
            .iter()
            .map(|&v| {
                let e = cb[nearest_codebook_entry(v, &cb)];
                (v - e) * (v - e)
            })
            .sum::<f64>()
            / values.len() as f64;
        let max_abs = values.iter().cloned().fold(0.0f64, |a, v| a.max(v.abs()));
        let scale = max_abs / qmax(bits) as f64;
        let grid_mse: f64 = values
            .iter()
            .map(|&v| {
                let d = dequantize_uniform(quantize_uniform(v, bits, scale), scale);
                (v - d) * (v - d)
            })
            .sum::<f64>()
            / values.len() as f64;
        assert!(
            cb_mse <= grid_mse,
            "codebook mse {cb_mse} should not exceed grid mse {grid_mse}"
        );
    }

    #[test]
    fn codebook_tie_breaks_low() {
        // x equidistant from both entries: lower index wins.
        assert_eq!(nearest_codebook_entry(0.5, &[0.0, 1.0]), 0);
    }

    #[test]
    fn codebook_size_validated() {
        let s = QuantSpec {
            weight_bits: 4,
            activation_bits: 4,
            weights: WeightQuant::Codebook {
                entries: vec![0.0; 3],
            },
            act_scale: 1.0,
        };
        assert!(s.validate().is_err());
    }
}
