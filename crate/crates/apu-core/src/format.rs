//! On-disk formats: the `.apu` compressed-model container, run manifests,
//! schedule/select dumps, layer-shape manifests, and sweep specs.
//!
//! A compressed model is two files: `<out>` is the JSON sidecar (structure,
//! permutations, quantization, biases, and tensor offsets) and `<out>.bin`
//! holds all weight tensors as little-endian f64, integrity-checked by a
//! sha256 recorded in the sidecar.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::compress::{
    AttentionLayer, CompressedLayer, CompressedModel, ConvLayer, PoolLayer,
};
use crate::error::{Error, Result};
use crate::model::AttentionHead;
use crate::pruner::{BlockDiagonalLayer, BlockMask};
use crate::quant::QuantSpec;
use crate::scheduler::{RoutingSchedule, SelectTable};
use crate::tensor::Matrix;

pub const APU_FORMAT: &str = "apu-compressed-v1";

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let out = h.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(sha256_hex(&bytes))
}

// ---------------------------------------------------------------------------
// .apu container
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct TensorRef {
    offset: u64,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum ApuLayer {
    Fc {
        name: String,
        rows: usize,
        cols: usize,
        num_blocks: usize,
        row_perm: Vec<usize>,
        col_perm: Vec<usize>,
        quant: Option<QuantSpec>,
        relu: bool,
        blocks: Vec<TensorRef>,
        bias: Vec<Vec<f64>>,
    },
    Conv {
        name: String,
        c_out: usize,
        c_in: usize,
        k_h: usize,
        k_w: usize,
        stride: (usize, usize),
        padding: (usize, usize),
        groups: usize,
        quant: QuantSpec,
        relu: bool,
        kernel: TensorRef,
        bias: Vec<f64>,
    },
    Pool {
        name: String,
        window: (usize, usize),
        stride: (usize, usize),
    },
    Attention {
        name: String,
        d_model: usize,
        d_k: usize,
        quant: QuantSpec,
        relu: bool,
        heads: Vec<[TensorRef; 4]>,
    },
    Relu {
        name: String,
    },
}

#[derive(Serialize, Deserialize)]
struct ApuFile {
    format: String,
    name: String,
    input_shape: Vec<usize>,
    input_scale: f64,
    input_bits: u32,
    bin_file: String,
    bin_sha256: String,
    bin_len: u64,
    layers: Vec<ApuLayer>,
}

struct BinWriter {
    data: Vec<u8>,
}

impl BinWriter {
    fn push(&mut self, values: &[f64], rows: usize, cols: usize) -> TensorRef {
        let offset = self.data.len() as u64;
        for v in values {
            self.data.extend_from_slice(&v.to_le_bytes());
        }
        TensorRef { offset, rows, cols }
    }
}

fn bin_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_os_string();
    os.push(".bin");
    PathBuf::from(os)
}

/// Write `<path>` (JSON sidecar) and `<path>.bin` (weight tensors).
pub fn write_compressed(cm: &CompressedModel, path: &Path) -> Result<()> {
    let mut bin = BinWriter { data: Vec::new() };
    let layers: Vec<ApuLayer> = cm
        .layers
        .iter()
        .map(|cl| match cl {
            CompressedLayer::Fc(f) => ApuLayer::Fc {
                name: f.name.clone(),
                rows: f.mask.rows,
                cols: f.mask.cols,
                num_blocks: f.mask.num_blocks,
                row_perm: f.mask.row_perm.clone(),
                col_perm: f.mask.col_perm.clone(),
                quant: f.quant.clone(),
                relu: f.relu,
                blocks: f
                    .blocks
                    .iter()
                    .map(|b| bin.push(&b.data, b.rows, b.cols))
                    .collect(),
                bias: f.bias.clone(),
            },
            CompressedLayer::Conv(c) => ApuLayer::Conv {
                name: c.name.clone(),
                c_out: c.c_out,
                c_in: c.c_in,
                k_h: c.k_h,
                k_w: c.k_w,
                stride: c.stride,
                padding: c.padding,
                groups: c.groups,
                quant: c.quant.clone(),
                relu: c.relu,
                kernel: bin.push(&c.kernel, c.c_out, c.kernel.len() / c.c_out.max(1)),
                bias: c.bias.clone(),
            },
            CompressedLayer::Pool(p) => ApuLayer::Pool {
                name: p.name.clone(),
                window: p.window,
                stride: p.stride,
            },
            CompressedLayer::Attention(a) => ApuLayer::Attention {
                name: a.name.clone(),
                d_model: a.d_model,
                d_k: a.d_k,
                quant: a.quant.clone(),
                relu: a.relu,
                heads: a
                    .heads
                    .iter()
                    .map(|h| {
                        [
                            bin.push(&h.wq.data, h.wq.rows, h.wq.cols),
                            bin.push(&h.wk.data, h.wk.rows, h.wk.cols),
                            bin.push(&h.wv.data, h.wv.rows, h.wv.cols),
                            bin.push(&h.wo.data, h.wo.rows, h.wo.cols),
                        ]
                    })
                    .collect(),
            },
            CompressedLayer::Relu { name } => ApuLayer::Relu { name: name.clone() },
        })
        .collect();

    let bin_file = bin_path(path);
    let file = ApuFile {
        format: APU_FORMAT.to_string(),
        name: cm.name.clone(),
        input_shape: cm.input_shape.clone(),
        input_scale: cm.input_scale,
        input_bits: cm.input_bits,
        bin_file: bin_file
            .file_name()
            .unwrap()
            .to_string_lossy()
            .to_string(),
        bin_sha256: sha256_hex(&bin.data),
        bin_len: bin.data.len() as u64,
        layers,
    };
    std::fs::write(&bin_file, &bin.data).map_err(|source| Error::Io {
        path: bin_file.clone(),
        source,
    })?;
    let text = serde_json::to_string(&file).expect("apu serialization");
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

struct BinReader<'a> {
    data: &'a [u8],
}

impl BinReader<'_> {
    fn matrix(&self, r: &TensorRef) -> Result<Matrix> {
        let values = self.values(r)?;
        Matrix::new(r.rows, r.cols, values)
    }

    fn values(&self, r: &TensorRef) -> Result<Vec<f64>> {
        let n = r.rows * r.cols;
        let start = r.offset as usize;
        let end = start + n * 8;
        if end > self.data.len() {
            return Err(Error::Format(format!(
                "tensor at offset {} overruns the binary ({} bytes)",
                r.offset,
                self.data.len()
            )));
        }
        Ok(self.data[start..end]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }
}

/// Read a `.apu` sidecar plus its binary, verifying the recorded checksum.
pub fn read_compressed(path: &Path) -> Result<CompressedModel> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let file: ApuFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    if file.format != APU_FORMAT {
        return Err(Error::Format(format!(
            "unsupported container format `{}`",
            file.format
        )));
    }
    let bin_file = path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&file.bin_file);
    let data = std::fs::read(&bin_file).map_err(|source| Error::Io {
        path: bin_file.clone(),
        source,
    })?;
    let actual = sha256_hex(&data);
    if actual != file.bin_sha256 {
        return Err(Error::Checksum {
            path: bin_file,
            expected: file.bin_sha256,
            actual,
        });
    }
    let reader = BinReader { data: &data };

    let mut layers = Vec::with_capacity(file.layers.len());
    for l in &file.layers {
        layers.push(match l {
            ApuLayer::Fc {
                name,
                rows,
                cols,
                num_blocks,
                row_perm,
                col_perm,
                quant,
                relu,
                blocks,
                bias,
            } => CompressedLayer::Fc(BlockDiagonalLayer {
                name: name.clone(),
                mask: BlockMask {
                    rows: *rows,
                    cols: *cols,
                    num_blocks: *num_blocks,
                    row_perm: row_perm.clone(),
                    col_perm: col_perm.clone(),
                },
                blocks: blocks
                    .iter()
                    .map(|r| reader.matrix(r))
                    .collect::<Result<Vec<_>>>()?,
                bias: bias.clone(),
                quant: quant.clone(),
                relu: *relu,
            }),
            ApuLayer::Conv {
                name,
                c_out,
                c_in,
                k_h,
                k_w,
                stride,
                padding,
                groups,
                quant,
                relu,
                kernel,
                bias,
            } => CompressedLayer::Conv(ConvLayer {
                name: name.clone(),
                kernel: reader.values(kernel)?,
                c_out: *c_out,
                c_in: *c_in,
                k_h: *k_h,
                k_w: *k_w,
                bias: bias.clone(),
                stride: *stride,
                padding: *padding,
                groups: *groups,
                quant: quant.clone(),
                relu: *relu,
            }),
            ApuLayer::Pool { name, window, stride } => CompressedLayer::Pool(PoolLayer {
                name: name.clone(),
                window: *window,
                stride: *stride,
            }),
            ApuLayer::Attention {
                name,
                d_model,
                d_k,
                quant,
                relu,
                heads,
            } => CompressedLayer::Attention(AttentionLayer {
                name: name.clone(),
                d_model: *d_model,
                d_k: *d_k,
                heads: heads
                    .iter()
                    .map(|[wq, wk, wv, wo]| {
                        Ok(AttentionHead {
                            wq: reader.matrix(wq)?,
                            wk: reader.matrix(wk)?,
                            wv: reader.matrix(wv)?,
                            wo: reader.matrix(wo)?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?,
                quant: quant.clone(),
                relu: *relu,
            }),
            ApuLayer::Relu { name } => CompressedLayer::Relu { name: name.clone() },
        });
    }

    Ok(CompressedModel {
        name: file.name,
        input_shape: file.input_shape,
        input_scale: file.input_scale,
        input_bits: file.input_bits,
        layers,
    })
}

// ---------------------------------------------------------------------------
// Run manifests
// ---------------------------------------------------------------------------

/// Reproducibility record: rerunning with an identical manifest produces
/// byte-identical reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub seed: u64,
    pub config_sha256: String,
    /// Input path -> sha256.
    pub input_digests: std::collections::BTreeMap<String, String>,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serialization");
        std::fs::write(path, text).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    }
}

// ---------------------------------------------------------------------------
// Schedule and select-table dumps
// ---------------------------------------------------------------------------

/// CSV rows `cycle,source,dest,activation`.
pub fn write_schedule_csv<W: Write>(sched: &RoutingSchedule, mut w: W) -> std::io::Result<()> {
    writeln!(w, "cycle,source,dest,activation")?;
    for (i, cycle) in sched.cycles.iter().enumerate() {
        for t in cycle {
            writeln!(w, "{i},{},{},{}", t.source, t.dest, t.activation)?;
        }
    }
    Ok(())
}

/// Select-table binary dump: header `u32 num_dests, u32 num_cycles,
/// u32 num_sources`, then row-major u32 entries with idle encoded as the
/// sentinel value `num_sources`.
pub fn write_select_table<W: Write>(table: &SelectTable, mut w: W) -> std::io::Result<()> {
    let dests = table.entries.len() as u32;
    let cycles = table.num_cycles() as u32;
    w.write_all(&dests.to_le_bytes())?;
    w.write_all(&cycles.to_le_bytes())?;
    w.write_all(&(table.num_sources as u32).to_le_bytes())?;
    let sentinel = table.num_sources as u32;
    for row in &table.entries {
        for e in row {
            w.write_all(&e.unwrap_or(sentinel).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_select_table(bytes: &[u8]) -> Result<SelectTable> {
    if bytes.len() < 12 {
        return Err(Error::Format("select dump too short".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i * 4..i * 4 + 4].try_into().unwrap());
    let dests = word(0) as usize;
    let cycles = word(1) as usize;
    let num_sources = word(2) as usize;
    let want = 12 + dests * cycles * 4;
    if bytes.len() != want {
        return Err(Error::Format(format!(
            "select dump length {} does not match header ({want})",
            bytes.len()
        )));
    }
    let sentinel = num_sources as u32;
    let mut entries = Vec::with_capacity(dests);
    for d in 0..dests {
        let mut row = Vec::with_capacity(cycles);
        for c in 0..cycles {
            let v = word(3 + d * cycles + c);
            row.push(if v == sentinel { None } else { Some(v) });
        }
        entries.push(row);
    }
    Ok(SelectTable {
        num_sources,
        entries,
    })
}

// ---------------------------------------------------------------------------
// Layer-shape manifests
// ---------------------------------------------------------------------------

/// A network described by layer shapes only (no weights); used for mapping
/// studies and baseline comparisons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeManifest {
    pub name: String,
    /// (channels, height, width) input for convolutional manifests.
    #[serde(default)]
    pub input: Option<Vec<usize>>,
    pub layers: Vec<ShapeLayer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ShapeLayer {
    Conv {
        name: String,
        c_in: usize,
        c_out: usize,
        k: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
        groups: usize,
    },
    Pool {
        name: String,
        window: (usize, usize),
        stride: (usize, usize),
    },
    Fc {
        name: String,
        rows: usize,
        cols: usize,
        /// Block count; when absent, the smallest count whose blocks fit one
        /// PE is used.
        #[serde(default)]
        blocks: Option<usize>,
    },
}

pub fn load_shape_manifest(path: &Path) -> Result<ShapeManifest> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

pub fn save_shape_manifest(m: &ShapeManifest, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(m).expect("manifest serialization");
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

// ---------------------------------------------------------------------------
// Sweep specs
// ---------------------------------------------------------------------------

/// Design-space sweep: the cross product of block dimensions, bit widths,
/// and interconnect kinds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub block_dims: Vec<usize>,
    pub bits: Vec<u32>,
    pub interconnects: Vec<crate::costmodel::Interconnect>,
    /// Activations routed per layer for interconnect sizing; defaults to the
    /// block dimension.
    #[serde(default)]
    pub routed_n: Option<usize>,
    /// Schedule length for interconnect sizing; defaults to the block
    /// dimension (balanced layer).
    #[serde(default)]
    pub schedule_len: Option<u64>,
}

pub fn load_sweep_spec(path: &Path) -> Result<SweepSpec> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compress::{compress_model, CompressOptions};
    use crate::model::{Layer, NetworkModel};
    use crate::scheduler::{build_schedule, emit_selects, RoutingDemand, Transfer};

    fn sample_compressed() -> CompressedModel {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        let model = NetworkModel::new(
            "m",
            vec![12],
            vec![
                Layer::FullyConnected {
                    name: "fc".into(),
                    weights: Matrix::new(
                        8,
                        12,
                        (0..96).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                    )
                    .unwrap(),
                    bias: vec![0.05; 8],
                },
                Layer::Relu { name: "r".into() },
            ],
        )
        .unwrap();
        compress_model(
            &model,
            &CompressOptions {
                num_blocks: 4,
                ..Default::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn apu_container_round_trip() {
        let cm = sample_compressed();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.apu");
        write_compressed(&cm, &path).unwrap();
        let back = read_compressed(&path).unwrap();
        assert_eq!(cm, back);
    }

    #[test]
    fn apu_container_round_trip_attention_and_pool() {
        let model = crate::zoo::small_attention(3, 2, 4, 6, 3);
        let cm = compress_model(
            &model,
            &CompressOptions {
                num_blocks: 1,
                weight_bits: 8,
                activation_bits: 8,
                ..Default::default()
            },
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("attn.apu");
        write_compressed(&cm, &path).unwrap();
        assert_eq!(read_compressed(&path).unwrap(), cm);
    }

    #[test]
    fn corrupted_binary_fails_checksum() {
        let cm = sample_compressed();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.apu");
        write_compressed(&cm, &path).unwrap();
        let bin = dir.path().join("m.apu.bin");
        let mut data = std::fs::read(&bin).unwrap();
        data[0] ^= 0xFF;
        std::fs::write(&bin, data).unwrap();
        let err = read_compressed(&path).unwrap_err();
        assert!(matches!(err, Error::Checksum { .. }), "{err}");
    }

    #[test]
    fn select_table_dump_round_trip() {
        let transfers = vec![
            Transfer { source: 0, dest: 0, activation: 0 },
            Transfer { source: 1, dest: 1, activation: 1 },
            Transfer { source: 0, dest: 1, activation: 2 },
        ];
        let d = RoutingDemand::new(3, 3, transfers).unwrap();
        let s = build_schedule(&d);
        let table = emit_selects(&s, 3);
        let mut buf = Vec::new();
        write_select_table(&table, &mut buf).unwrap();
        let back = read_select_table(&buf).unwrap();
        assert_eq!(table, back);
        assert_eq!(table.idle_count(), back.idle_count());
    }

    #[test]
    fn schedule_csv_shape() {
        let d = RoutingDemand::new(
            2,
            2,
            vec![
                Transfer { source: 0, dest: 0, activation: 5 },
                Transfer { source: 1, dest: 1, activation: 6 },
            ],
        )
        .unwrap();
        let s = build_schedule(&d);
        let mut buf = Vec::new();
        write_schedule_csv(&s, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("cycle,source,dest,activation\n"));
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn shape_manifest_round_trip() {
        let m = ShapeManifest {
            name: "t".into(),
            input: Some(vec![3, 8, 8]),
            layers: vec![
                ShapeLayer::Conv {
                    name: "c1".into(),
                    c_in: 3,
                    c_out: 8,
                    k: (3, 3),
                    stride: (1, 1),
                    padding: (1, 1),
                    groups: 1,
                },
                ShapeLayer::Pool {
                    name: "p1".into(),
                    window: (2, 2),
                    stride: (2, 2),
                },
                ShapeLayer::Fc {
                    name: "f1".into(),
                    rows: 10,
                    cols: 128,
                    blocks: Some(4),
                },
            ],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save_shape_manifest(&m, &path).unwrap();
        assert_eq!(load_shape_manifest(&path).unwrap(), m);
    }
}
