//! Network intermediate representation: an ordered layer graph with a
//! neutral JSON serialization.
//!
//! The on-disk schema is `{name, input_shape, layers: [{type, params...}]}`
//! with tensors as `{shape: [...], data: [...]}` flat arrays. See the README
//! for the full schema.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// One attention head's four projection matrices.
///
/// `wq`, `wk`, `wv` are `d_model x d_k` (applied as `x W`), `wo` is
/// `d_k x d_model`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionHead {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    FullyConnected {
        name: String,
        /// rows = outputs, cols = inputs.
        weights: Matrix,
        bias: Vec<f64>,
    },
    Conv2D {
        name: String,
        /// Kernel shape (c_out, c_in/groups, k_h, k_w), row-major.
        kernel: Vec<f64>,
        c_out: usize,
        c_in: usize,
        k_h: usize,
        k_w: usize,
        bias: Vec<f64>,
        stride: (usize, usize),
        /// Explicit zero padding (top/bottom, left/right).
        padding: (usize, usize),
        groups: usize,
    },
    MaxPool2D {
        name: String,
        window: (usize, usize),
        stride: (usize, usize),
    },
    BatchNorm {
        name: String,
        gamma: Vec<f64>,
        beta: Vec<f64>,
        mean: Vec<f64>,
        variance: Vec<f64>,
        epsilon: f64,
    },
    MultiHeadAttention {
        name: String,
        d_model: usize,
        d_k: usize,
        heads: Vec<AttentionHead>,
    },
    Relu {
        name: String,
    },
}

impl Layer {
    pub fn name(&self) -> &str {
        match self {
            Layer::FullyConnected { name, .. }
            | Layer::Conv2D { name, .. }
            | Layer::MaxPool2D { name, .. }
            | Layer::BatchNorm { name, .. }
            | Layer::MultiHeadAttention { name, .. }
            | Layer::Relu { name } => name,
        }
    }

    /// Output shape given an input shape, checking layer-local invariants.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::FullyConnected { name, weights, .. } => {
                let flat: usize = input.iter().product();
                if flat != weights.cols {
                    return Err(Error::ShapeMismatch {
                        producer: "<input>".into(),
                        produced: input.to_vec(),
                        consumer: name.clone(),
                        expected: vec![weights.cols],
                    });
                }
                Ok(vec![weights.rows])
            }
            Layer::Conv2D {
                name,
                c_out,
                c_in,
                k_h,
                k_w,
                stride,
                padding,
                ..
            } => {
                let [c, h, w] = chw(input, name)?;
                if c != *c_in {
                    return Err(Error::InvalidModel(format!(
                        "conv `{name}` expects {c_in} input channels, input has {c}"
                    )));
                }
                let h_p = h + 2 * padding.0;
                let w_p = w + 2 * padding.1;
                if h_p < *k_h || w_p < *k_w {
                    return Err(Error::InvalidModel(format!(
                        "conv `{name}` kernel {k_h}x{k_w} larger than padded input {h_p}x{w_p}"
                    )));
                }
                let h_out = (h_p - k_h) / stride.0 + 1;
                let w_out = (w_p - k_w) / stride.1 + 1;
                Ok(vec![*c_out, h_out, w_out])
            }
            Layer::MaxPool2D {
                name,
                window,
                stride,
            } => {
                let [c, h, w] = chw(input, name)?;
                if h < window.0 || w < window.1 {
                    return Err(Error::InvalidModel(format!(
                        "pool `{name}` window {}x{} larger than input {h}x{w}",
                        window.0, window.1
                    )));
                }
                let h_out = (h - window.0) / stride.0 + 1;
                let w_out = (w - window.1) / stride.1 + 1;
                Ok(vec![c, h_out, w_out])
            }
            Layer::BatchNorm { name, gamma, .. } => {
                let channels = if input.len() == 3 { input[0] } else { input.iter().product() };
                if channels != gamma.len() {
                    return Err(Error::InvalidModel(format!(
                        "batchnorm `{name}` has {} channels, input has {channels}",
                        gamma.len()
                    )));
                }
                Ok(input.to_vec())
            }
            Layer::MultiHeadAttention { name, d_model, .. } => {
                if input.len() != 2 || input[1] != *d_model {
                    return Err(Error::InvalidModel(format!(
                        "attention `{name}` expects input [seq, {d_model}], got {input:?}"
                    )));
                }
                Ok(input.to_vec())
            }
            Layer::Relu { .. } => Ok(input.to_vec()),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Layer::FullyConnected { name, weights, bias } => {
                if bias.len() != weights.rows {
                    return Err(Error::InvalidModel(format!(
                        "fc `{name}`: bias length {} != {} output rows",
                        bias.len(),
                        weights.rows
                    )));
                }
            }
            Layer::Conv2D {
                name,
                kernel,
                c_out,
                c_in,
                k_h,
                k_w,
                bias,
                groups,
                ..
            } => {
                if *groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
                    return Err(Error::InvalidModel(format!(
                        "conv `{name}`: c_in={c_in} and c_out={c_out} must both divide by groups={groups}"
                    )));
                }
                let want = c_out * (c_in / groups) * k_h * k_w;
                if kernel.len() != want {
                    return Err(Error::InvalidModel(format!(
                        "conv `{name}`: kernel has {} elements, shape says {want}",
                        kernel.len()
                    )));
                }
                if bias.len() != *c_out {
                    return Err(Error::InvalidModel(format!(
                        "conv `{name}`: bias length {} != c_out {c_out}",
                        bias.len()
                    )));
                }
            }
            Layer::BatchNorm {
                name,
                gamma,
                beta,
                mean,
                variance,
                epsilon,
            } => {
                let n = gamma.len();
                if beta.len() != n || mean.len() != n || variance.len() != n {
                    return Err(Error::InvalidModel(format!(
                        "batchnorm `{name}`: parameter vectors must share one length"
                    )));
                }
                for (c, v) in variance.iter().enumerate() {
                    if (v + epsilon).partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
                        return Err(Error::InvalidModel(format!(
                            "batchnorm `{name}`: variance + epsilon must be > 0 (channel {c})"
                        )));
                    }
                }
            }
            Layer::MultiHeadAttention {
                name,
                d_model,
                d_k,
                heads,
            } => {
                if heads.is_empty() {
                    return Err(Error::InvalidModel(format!(
                        "attention `{name}` needs at least one head"
                    )));
                }
                for (i, h) in heads.iter().enumerate() {
                    let proj_ok = h.wq.rows == *d_model
                        && h.wq.cols == *d_k
                        && h.wk.rows == *d_model
                        && h.wk.cols == *d_k
                        && h.wv.rows == *d_model
                        && h.wv.cols == *d_k
                        && h.wo.rows == *d_k
                        && h.wo.cols == *d_model;
                    if !proj_ok {
                        return Err(Error::InvalidModel(format!(
                            "attention `{name}` head {i}: projection shapes inconsistent with \
                             d_model={d_model}, d_k={d_k}"
                        )));
                    }
                }
            }
            Layer::MaxPool2D { name, window, stride } => {
                if window.0 == 0 || window.1 == 0 || stride.0 == 0 || stride.1 == 0 {
                    return Err(Error::InvalidModel(format!(
                        "pool `{name}`: window and stride must be positive"
                    )));
                }
            }
            Layer::Relu { .. } => {}
        }
        Ok(())
    }
}

fn chw(shape: &[usize], name: &str) -> Result<[usize; 3]> {
    if shape.len() != 3 {
        return Err(Error::InvalidModel(format!(
            "layer `{name}` expects a (channels, height, width) input, got {shape:?}"
        )));
    }
    Ok([shape[0], shape[1], shape[2]])
}

/// An ordered layer graph. Immutable after construction; shapes are checked
/// end to end at build time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkModel {
    pub name: String,
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
}

impl NetworkModel {
    pub fn new(name: impl Into<String>, input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        let model = NetworkModel {
            name: name.into(),
            input_shape,
            layers,
        };
        model.validate()?;
        Ok(model)
    }

    /// Checks layer-local invariants, name uniqueness, and that consecutive
    /// layer shapes are compatible (FC consumes any shape of matching
    /// flattened size).
    pub fn validate(&self) -> Result<()> {
        if self.input_shape.is_empty() || self.input_shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidModel(format!(
                "input_shape must be non-empty and positive, got {:?}",
                self.input_shape
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for layer in &self.layers {
            if !seen.insert(layer.name().to_string()) {
                return Err(Error::InvalidModel(format!(
                    "duplicate layer name `{}`",
                    layer.name()
                )));
            }
            layer.validate()?;
        }
        // Shape walk; rewrite the generic error so it names both layers.
        let mut shape = self.input_shape.clone();
        let mut prev = "<input>".to_string();
        for layer in &self.layers {
            shape = layer.output_shape(&shape).map_err(|e| match e {
                Error::ShapeMismatch {
                    produced, consumer, expected, ..
                } => Error::ShapeMismatch {
                    producer: prev.clone(),
                    produced,
                    consumer,
                    expected,
                },
                other => other,
            })?;
            prev = layer.name().to_string();
        }
        Ok(())
    }

    /// Shapes at every layer boundary: `shapes[0]` is the input shape,
    /// `shapes[i+1]` the output of layer `i`.
    pub fn boundary_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![self.input_shape.clone()];
        for layer in &self.layers {
            let next = layer.output_shape(shapes.last().unwrap())?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self.boundary_shapes()?.pop().unwrap())
    }
}

// ---------------------------------------------------------------------------
// JSON schema
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
struct RawModel {
    name: String,
    input_shape: Vec<usize>,
    layers: Vec<Value>,
}

#[derive(Deserialize)]
struct RawTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn tensor_to_matrix(t: RawTensor, ctx: &str) -> Result<Matrix> {
    if t.shape.len() != 2 {
        return Err(Error::InvalidModel(format!(
            "{ctx}: expected a 2-d tensor, got shape {:?}",
            t.shape
        )));
    }
    Matrix::new(t.shape[0], t.shape[1], t.data)
        .map_err(|e| Error::InvalidModel(format!("{ctx}: {e}")))
}

fn field<'a>(v: &'a Value, key: &str, ctx: &str) -> Result<&'a Value> {
    v.get(key)
        .ok_or_else(|| Error::InvalidModel(format!("{ctx}: missing field `{key}`")))
}

fn parse_tensor(v: &Value, key: &str, ctx: &str) -> Result<RawTensor> {
    serde_json::from_value(field(v, key, ctx)?.clone())
        .map_err(|e| Error::InvalidModel(format!("{ctx}: bad tensor `{key}`: {e}")))
}

fn parse_vec(v: &Value, key: &str, ctx: &str) -> Result<Vec<f64>> {
    serde_json::from_value(field(v, key, ctx)?.clone())
        .map_err(|e| Error::InvalidModel(format!("{ctx}: bad array `{key}`: {e}")))
}

fn parse_pair(v: &Value, key: &str, default: (usize, usize), ctx: &str) -> Result<(usize, usize)> {
    match v.get(key) {
        None => Ok(default),
        Some(val) => {
            let arr: Vec<usize> = serde_json::from_value(val.clone())
                .map_err(|e| Error::InvalidModel(format!("{ctx}: bad pair `{key}`: {e}")))?;
            match arr.as_slice() {
                [a] => Ok((*a, *a)),
                [a, b] => Ok((*a, *b)),
                _ => Err(Error::InvalidModel(format!(
                    "{ctx}: `{key}` must be [n] or [h, w]"
                ))),
            }
        }
    }
}

fn parse_layer(v: &Value, index: usize) -> Result<Layer> {
    let ty = v
        .get("type")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::InvalidModel(format!("layer {index}: missing `type` tag")))?;
    let name = v
        .get("name")
        .and_then(Value::as_str)
        .map(str::to_string)
        .unwrap_or_else(|| format!("layer{index}"));
    let ctx = format!("layer {index} (`{name}`)");

    match ty {
        "FullyConnected" => {
            let weights = tensor_to_matrix(parse_tensor(v, "weights", &ctx)?, &ctx)?;
            let bias = match v.get("bias") {
                Some(_) => parse_vec(v, "bias", &ctx)?,
                None => vec![0.0; weights.rows],
            };
            Ok(Layer::FullyConnected { name, weights, bias })
        }
        "Conv2D" => {
            let kernel = parse_tensor(v, "kernel", &ctx)?;
            if kernel.shape.len() != 4 {
                return Err(Error::InvalidModel(format!(
                    "{ctx}: kernel must be 4-d (c_out, c_in/groups, k_h, k_w)"
                )));
            }
            let groups = v.get("groups").and_then(Value::as_u64).unwrap_or(1) as usize;
            let c_out = kernel.shape[0];
            let c_in = kernel.shape[1] * groups;
            let (k_h, k_w) = (kernel.shape[2], kernel.shape[3]);
            let bias = match v.get("bias") {
                Some(_) => parse_vec(v, "bias", &ctx)?,
                None => vec![0.0; c_out],
            };
            Ok(Layer::Conv2D {
                name,
                kernel: kernel.data,
                c_out,
                c_in,
                k_h,
                k_w,
                bias,
                stride: parse_pair(v, "stride", (1, 1), &ctx)?,
                padding: parse_pair(v, "padding", (0, 0), &ctx)?,
                groups,
            })
        }
        "MaxPool2D" => Ok(Layer::MaxPool2D {
            name,
            window: parse_pair(v, "window", (2, 2), &ctx)?,
            stride: parse_pair(v, "stride", (2, 2), &ctx)?,
        }),
        "BatchNorm" => Ok(Layer::BatchNorm {
            name,
            gamma: parse_vec(v, "gamma", &ctx)?,
            beta: parse_vec(v, "beta", &ctx)?,
            mean: parse_vec(v, "mean", &ctx)?,
            variance: parse_vec(v, "variance", &ctx)?,
            epsilon: v
                .get("epsilon")
                .and_then(Value::as_f64)
                .unwrap_or(1e-5),
        }),
        "MultiHeadAttention" => {
            let d_model = field(v, "d_model", &ctx)?.as_u64().ok_or_else(|| {
                Error::InvalidModel(format!("{ctx}: `d_model` must be an integer"))
            })? as usize;
            let d_k = field(v, "d_k", &ctx)?.as_u64().ok_or_else(|| {
                Error::InvalidModel(format!("{ctx}: `d_k` must be an integer"))
            })? as usize;
            let raw_heads = field(v, "heads", &ctx)?
                .as_array()
                .ok_or_else(|| Error::InvalidModel(format!("{ctx}: `heads` must be an array")))?;
            let mut heads = Vec::with_capacity(raw_heads.len());
            for (i, h) in raw_heads.iter().enumerate() {
                let hctx = format!("{ctx} head {i}");
                heads.push(AttentionHead {
                    wq: tensor_to_matrix(parse_tensor(h, "wq", &hctx)?, &hctx)?,
                    wk: tensor_to_matrix(parse_tensor(h, "wk", &hctx)?, &hctx)?,
                    wv: tensor_to_matrix(parse_tensor(h, "wv", &hctx)?, &hctx)?,
                    wo: tensor_to_matrix(parse_tensor(h, "wo", &hctx)?, &hctx)?,
                });
            }
            Ok(Layer::MultiHeadAttention {
                name,
                d_model,
                d_k,
                heads,
            })
        }
        "ReLU" => Ok(Layer::Relu { name }),
        // Only ReLU is a recognized activation; anything else is rejected
        // at load time.
        other => Err(Error::UnknownVariant {
            variant: other.to_string(),
            index,
        }),
    }
}

/// Parse a model from JSON text. `origin` is used in error messages.
pub fn parse_model(text: &str, origin: &Path) -> Result<NetworkModel> {
    let raw: RawModel = serde_json::from_str(text).map_err(|e| Error::Parse {
        path: origin.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let mut layers = Vec::with_capacity(raw.layers.len());
    for (i, v) in raw.layers.iter().enumerate() {
        layers.push(parse_layer(v, i)?);
    }
    NetworkModel::new(raw.name, raw.input_shape, layers)
}

/// Load and validate a model JSON file.
pub fn load_model(path: impl AsRef<Path>) -> Result<NetworkModel> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_model(&text, path)
}

/// Serialize a model back to the JSON schema.
pub fn model_to_json(model: &NetworkModel) -> Value {
    let layers: Vec<Value> = model
        .layers
        .iter()
        .map(|layer| match layer {
            Layer::FullyConnected { name, weights, bias } => serde_json::json!({
                "type": "FullyConnected",
                "name": name,
                "weights": {"shape": [weights.rows, weights.cols], "data": weights.data},
                "bias": bias,
            }),
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
            } => serde_json::json!({
                "type": "Conv2D",
                "name": name,
                "kernel": {"shape": [c_out, c_in / groups, k_h, k_w], "data": kernel},
                "bias": bias,
                "stride": [stride.0, stride.1],
                "padding": [padding.0, padding.1],
                "groups": groups,
            }),
            Layer::MaxPool2D { name, window, stride } => serde_json::json!({
                "type": "MaxPool2D",
                "name": name,
                "window": [window.0, window.1],
                "stride": [stride.0, stride.1],
            }),
            Layer::BatchNorm {
                name,
                gamma,
                beta,
                mean,
                variance,
                epsilon,
            } => serde_json::json!({
                "type": "BatchNorm",
                "name": name,
                "gamma": gamma,
                "beta": beta,
                "mean": mean,
                "variance": variance,
                "epsilon": epsilon,
            }),
            Layer::MultiHeadAttention {
                name,
                d_model,
                d_k,
                heads,
            } => serde_json::json!({
                "type": "MultiHeadAttention",
                "name": name,
                "d_model": d_model,
                "d_k": d_k,
                "heads": heads.iter().map(|h| serde_json::json!({
                    "wq": {"shape": [h.wq.rows, h.wq.cols], "data": h.wq.data},
                    "wk": {"shape": [h.wk.rows, h.wk.cols], "data": h.wk.data},
                    "wv": {"shape": [h.wv.rows, h.wv.cols], "data": h.wv.data},
                    "wo": {"shape": [h.wo.rows, h.wo.cols], "data": h.wo.data},
                })).collect::<Vec<_>>(),
            }),
            Layer::Relu { name } => serde_json::json!({"type": "ReLU", "name": name}),
        })
        .collect();
    serde_json::json!({
        "name": model.name,
        "input_shape": model.input_shape,
        "layers": layers,
    })
}

pub fn save_model(model: &NetworkModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string(&model_to_json(model)).expect("model serialization");
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_fc_identity_parses() {
        let text = r#"{
            "name": "id4",
            "input_shape": [4],
            "layers": [
                {"type": "FullyConnected", "name": "fc",
                 "weights": {"shape": [4, 4],
                             "data": [1,0,0,0, 0,1,0,0, 0,0,1,0, 0,0,0,1]},
                 "bias": [0, 0, 0, 0]}
            ]
        }"#;
        let m = parse_model(text, Path::new("mem")).unwrap();
        assert_eq!(m.layers.len(), 1);
        assert_eq!(m.input_shape, vec![4]);
    }

    #[test]
    fn incompatible_fc_chain_names_both_layers() {
        let text = r#"{
            "name": "bad",
            "input_shape": [4],
            "layers": [
                {"type": "FullyConnected", "name": "a",
                 "weights": {"shape": [3, 4], "data": [0,0,0,0,0,0,0,0,0,0,0,0]}},
                {"type": "FullyConnected", "name": "b",
                 "weights": {"shape": [2, 5], "data": [0,0,0,0,0,0,0,0,0,0]}}
            ]
        }"#;
        let err = parse_model(text, Path::new("mem")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('a') && msg.contains('b'), "got: {msg}");
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn unknown_variant_rejected() {
        let text = r#"{
            "name": "bad",
            "input_shape": [4],
            "layers": [{"type": "Sigmoid", "name": "s"}]
        }"#;
        let err = parse_model(text, Path::new("mem")).unwrap_err();
        assert!(matches!(err, Error::UnknownVariant { ref variant, index: 0 } if variant == "Sigmoid"));
    }

    #[test]
    fn parse_error_reports_position() {
        let err = parse_model("{ not json", Path::new("mem")).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn duplicate_layer_names_rejected() {
        let w = Matrix::identity(2);
        let mk = |n: &str| Layer::FullyConnected {
            name: n.into(),
            weights: w.clone(),
            bias: vec![0.0; 2],
        };
        let err = NetworkModel::new("m", vec![2], vec![mk("x"), mk("x")]).unwrap_err();
        assert!(err.to_string().contains("duplicate"));
    }

    #[test]
    fn conv_groups_must_divide_channels() {
        let layer = Layer::Conv2D {
            name: "c".into(),
            kernel: vec![0.0; 6 * 1 * 1 * 1],
            c_out: 6,
            c_in: 3,
            k_h: 1,
            k_w: 1,
            bias: vec![0.0; 6],
            stride: (1, 1),
            padding: (0, 0),
            groups: 2,
        };
        let err = NetworkModel::new("m", vec![3, 4, 4], vec![layer]).unwrap_err();
        assert!(err.to_string().contains("groups"));
    }

    #[test]
    fn json_round_trip() {
        let text = r#"{
            "name": "rt",
            "input_shape": [1, 4, 4],
            "layers": [
                {"type": "Conv2D", "name": "c",
                 "kernel": {"shape": [2, 1, 2, 2], "data": [1,2,3,4,5,6,7,8]},
                 "bias": [0.5, -0.5], "stride": [1, 1], "padding": [0, 0], "groups": 1},
                {"type": "ReLU", "name": "r"},
                {"type": "MaxPool2D", "name": "p", "window": [3, 3], "stride": [1, 1]}
            ]
        }"#;
        let m = parse_model(text, Path::new("mem")).unwrap();
        let json = model_to_json(&m).to_string();
        let m2 = parse_model(&json, Path::new("mem2")).unwrap();
        assert_eq!(m, m2);
    }
}
