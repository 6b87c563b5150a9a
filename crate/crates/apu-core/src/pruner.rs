//! Structured pruning: permuted block-diagonal masks and packing masked
//! weights into dense per-block sub-matrices.
//!
//! A mask is a seeded permutation of an identity-block pattern: the
//! unpermuted pattern is block-diagonal with near-even splits, and the
//! stored row/column permutations scatter it over the full matrix. Applying
//! the inverse permutations recovers the pattern exactly, which is what
//! packing exploits.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::QuantSpec;
use crate::tensor::Matrix;

/// Split `n` items into `parts` contiguous ranges whose sizes differ by at
/// most one (larger ranges first). Parts may be empty when `parts > n`.
pub fn even_split(n: usize, parts: usize) -> Vec<(usize, usize)> {
    let base = n / parts;
    let extra = n % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for k in 0..parts {
        let len = base + usize::from(k < extra);
        out.push((start, start + len));
        start += len;
    }
    out
}

/// A permuted block-diagonal binary mask.
///
/// `row_perm[p]` / `col_perm[p]` give the original row/column sitting at
/// pattern position `p`; pattern positions are carved into `num_blocks`
/// contiguous ranges. Position order within a block is the order the
/// destination PE consumes activations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockMask {
    pub rows: usize,
    pub cols: usize,
    pub num_blocks: usize,
    pub row_perm: Vec<usize>,
    pub col_perm: Vec<usize>,
}

impl BlockMask {
    /// Identity-permutation mask: blocks sit contiguously on the diagonal.
    pub fn unpermuted(rows: usize, cols: usize, num_blocks: usize) -> Result<Self> {
        validate_block_count(rows, cols, num_blocks)?;
        Ok(BlockMask {
            rows,
            cols,
            num_blocks,
            row_perm: (0..rows).collect(),
            col_perm: (0..cols).collect(),
        })
    }

    pub fn row_ranges(&self) -> Vec<(usize, usize)> {
        even_split(self.rows, self.num_blocks)
    }

    pub fn col_ranges(&self) -> Vec<(usize, usize)> {
        even_split(self.cols, self.num_blocks)
    }

    /// Original row indices owned by block `k`, in PE emission order.
    pub fn block_rows(&self, k: usize) -> &[usize] {
        let (s, e) = self.row_ranges()[k];
        &self.row_perm[s..e]
    }

    /// Original column indices owned by block `k`, in latch fill order.
    pub fn block_cols(&self, k: usize) -> &[usize] {
        let (s, e) = self.col_ranges()[k];
        &self.col_perm[s..e]
    }

    /// Block dimensions (rows, cols) for block `k`.
    pub fn block_dims(&self, k: usize) -> (usize, usize) {
        let (rs, re) = self.row_ranges()[k];
        let (cs, ce) = self.col_ranges()[k];
        (re - rs, ce - cs)
    }

    /// Whether mask position (r, c) is set, via the inverse permutations.
    pub fn is_set(&self, r: usize, c: usize) -> bool {
        let inv = self.inverse_perms();
        self.is_set_with(&inv, r, c)
    }

    fn inverse_perms(&self) -> (Vec<usize>, Vec<usize>) {
        let mut inv_r = vec![0usize; self.rows];
        for (p, &r) in self.row_perm.iter().enumerate() {
            inv_r[r] = p;
        }
        let mut inv_c = vec![0usize; self.cols];
        for (p, &c) in self.col_perm.iter().enumerate() {
            inv_c[c] = p;
        }
        (inv_r, inv_c)
    }

    fn is_set_with(&self, inv: &(Vec<usize>, Vec<usize>), r: usize, c: usize) -> bool {
        let rp = inv.0[r];
        let cp = inv.1[c];
        block_of(&self.row_ranges(), rp) == block_of(&self.col_ranges(), cp)
    }

    /// Materialize the dense binary mask (row-major).
    pub fn mask_matrix(&self) -> Vec<bool> {
        let mut m = vec![false; self.rows * self.cols];
        for k in 0..self.num_blocks {
            for &r in self.block_rows(k) {
                for &c in self.block_cols(k) {
                    m[r * self.cols + c] = true;
                }
            }
        }
        m
    }

    pub fn count_nonzero(&self) -> usize {
        (0..self.num_blocks)
            .map(|k| {
                let (r, c) = self.block_dims(k);
                r * c
            })
            .sum()
    }
}

fn block_of(ranges: &[(usize, usize)], pos: usize) -> Option<usize> {
    ranges
        .iter()
        .position(|&(s, e)| pos >= s && pos < e)
}

fn validate_block_count(rows: usize, cols: usize, num_blocks: usize) -> Result<()> {
    if rows == 0 || cols == 0 {
        return Err(Error::Mask("matrix dimensions must be positive".into()));
    }
    if num_blocks == 0 {
        return Err(Error::Mask("num_blocks must be at least 1".into()));
    }
    // More blocks than the longer dimension cannot even be laid out; blocks
    // may have an empty index set on the shorter dimension (their rows then
    // carry bias-only outputs).
    if num_blocks > rows.max(cols) {
        return Err(Error::Mask(format!(
            "num_blocks {} exceeds max(rows, cols) = {}",
            num_blocks,
            rows.max(cols)
        )));
    }
    Ok(())
}

/// Generate a seeded permuted block-diagonal mask.
///
/// Nonzero count is exactly `rows*cols/num_blocks` when `num_blocks` divides
/// both dimensions (compression ratio = block count); uneven splits differ
/// by at most one per dimension. Deterministic for a fixed seed.
pub fn generate_mask(rows: usize, cols: usize, num_blocks: usize, seed: u64) -> Result<BlockMask> {
    validate_block_count(rows, cols, num_blocks)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut row_perm: Vec<usize> = (0..rows).collect();
    let mut col_perm: Vec<usize> = (0..cols).collect();
    row_perm.shuffle(&mut rng);
    col_perm.shuffle(&mut rng);
    Ok(BlockMask {
        rows,
        cols,
        num_blocks,
        row_perm,
        col_perm,
    })
}

/// Elementwise (Hadamard) product of a weight matrix with a mask.
pub fn apply_mask(w: &Matrix, mask: &BlockMask) -> Result<Matrix> {
    if w.rows != mask.rows || w.cols != mask.cols {
        return Err(Error::Mask(format!(
            "mask is {}x{} but weights are {}x{}",
            mask.rows, mask.cols, w.rows, w.cols
        )));
    }
    let mut out = Matrix::zeros(w.rows, w.cols);
    for k in 0..mask.num_blocks {
        for &r in mask.block_rows(k) {
            for &c in mask.block_cols(k) {
                out.set(r, c, w.get(r, c));
            }
        }
    }
    Ok(out)
}

/// The compressed form of one fully-connected layer: dense blocks plus the
/// permutations that scatter them, with optional quantization metadata and a
/// fused-ReLU flag set by the compressor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockDiagonalLayer {
    pub name: String,
    pub mask: BlockMask,
    /// Dense sub-matrix per block, rows/cols in pattern order.
    pub blocks: Vec<Matrix>,
    /// Bias entries per block, aligned with the block's row order.
    pub bias: Vec<Vec<f64>>,
    pub quant: Option<QuantSpec>,
    pub relu: bool,
}

impl BlockDiagonalLayer {
    pub fn original_shape(&self) -> (usize, usize) {
        (self.mask.rows, self.mask.cols)
    }

    /// Reassemble the dense masked matrix and bias vector.
    pub fn unpack(&self) -> (Matrix, Vec<f64>) {
        let mut w = Matrix::zeros(self.mask.rows, self.mask.cols);
        let mut bias = vec![0.0; self.mask.rows];
        for k in 0..self.mask.num_blocks {
            let rows = self.mask.block_rows(k);
            let cols = self.mask.block_cols(k);
            let blk = &self.blocks[k];
            for (p, &r) in rows.iter().enumerate() {
                bias[r] = self.bias[k][p];
                for (q, &c) in cols.iter().enumerate() {
                    w.set(r, c, blk.get(p, q));
                }
            }
        }
        (w, bias)
    }

    /// Total nonzero (stored) weight count.
    pub fn stored_weights(&self) -> usize {
        self.blocks.iter().map(|b| b.rows * b.cols).sum()
    }
}

/// Extract dense blocks from a masked weight matrix.
///
/// `w` must already satisfy `w = mask ∘ w`; violations are reported with
/// their coordinates. The round trip `unpack(pack_blocks(w)) == w` is
/// bit-exact.
pub fn pack_blocks(
    w: &Matrix,
    bias: &[f64],
    mask: &BlockMask,
    quant: Option<QuantSpec>,
) -> Result<BlockDiagonalLayer> {
    if w.rows != mask.rows || w.cols != mask.cols {
        return Err(Error::Mask(format!(
            "mask is {}x{} but weights are {}x{}",
            mask.rows, mask.cols, w.rows, w.cols
        )));
    }
    if bias.len() != w.rows {
        return Err(Error::Mask(format!(
            "bias length {} does not match {} rows",
            bias.len(),
            w.rows
        )));
    }

    // Masked positions must be exactly zero.
    let inv = mask.inverse_perms();
    let mut offenders = Vec::new();
    for r in 0..w.rows {
        for c in 0..w.cols {
            if w.get(r, c) != 0.0 && !mask.is_set_with(&inv, r, c) {
                if offenders.len() < 8 {
                    offenders.push((r, c));
                }
            }
        }
    }
    if !offenders.is_empty() {
        // Count them all for the report.
        let mut count = 0usize;
        for r in 0..w.rows {
            for c in 0..w.cols {
                if w.get(r, c) != 0.0 && !mask.is_set_with(&inv, r, c) {
                    count += 1;
                }
            }
        }
        return Err(Error::MaskViolation {
            count,
            first: offenders,
        });
    }

    let mut blocks = Vec::with_capacity(mask.num_blocks);
    let mut bias_segs = Vec::with_capacity(mask.num_blocks);
    for k in 0..mask.num_blocks {
        let rows = mask.block_rows(k);
        let cols = mask.block_cols(k);
        let mut data = Vec::with_capacity(rows.len() * cols.len());
        let mut bseg = Vec::with_capacity(rows.len());
        for &r in rows {
            bseg.push(bias[r]);
            for &c in cols {
                data.push(w.get(r, c));
            }
        }
        blocks.push(Matrix::new(rows.len(), cols.len(), data)?);
        bias_segs.push(bseg);
    }
    Ok(BlockDiagonalLayer {
        name: String::new(),
        mask: mask.clone(),
        blocks,
        bias: bias_segs,
        quant,
        relu: false,
    })
}
