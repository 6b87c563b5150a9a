//! Reference evaluator: a plain scalar-loop interpreter for the model IR.
//!
//! This is the oracle the simulator is checked against. In real mode it
//! evaluates layers in f64. In quantized mode it applies the exact
//! fixed-point semantics of the quantizer at every layer boundary — integer
//! codes flow between layers, MACs accumulate in wide integers, and each
//! boundary requantizes with the shared multiplier formula — so its output
//! is bit-exact against the hardware model.

use crate::error::{Error, Result};
use crate::model::{Layer, NetworkModel};
use crate::quant::{
    self, accumulator_bits, bias_code, quantize_uniform, requant_code, requant_multiplier,
    ModelQuant, QuantSpec, WeightQuant,
};
use crate::tensor::{Tensor, TensorData};

/// Evaluate `model` on `input`.
///
/// With `quant = None`, arithmetic is f64 end to end. With a quant spec the
/// input is quantized to codes and every layer runs on the integer datapath;
/// batch-norm layers must have been folded or lowered first (see
/// [`crate::mapper::lower_for_inference`]).
pub fn reference_eval(
    model: &NetworkModel,
    input: &Tensor,
    quant: Option<&ModelQuant>,
) -> Result<Tensor> {
    let flat_in: usize = model.input_shape.iter().product();
    if input.len() != flat_in {
        return Err(Error::ShapeMismatch {
            producer: "<input>".into(),
            produced: input.shape.clone(),
            consumer: model
                .layers
                .first()
                .map(|l| l.name().to_string())
                .unwrap_or_else(|| "<output>".into()),
            expected: model.input_shape.clone(),
        });
    }
    match quant {
        None => eval_real(model, input),
        Some(q) => eval_quant(model, input, q),
    }
}

// ---------------------------------------------------------------------------
// Real mode
// ---------------------------------------------------------------------------

/// Real-mode values at every layer boundary: index 0 is the input, index
/// `i+1` the output of layer `i`. Used for activation-scale calibration.
pub fn real_boundary_values(model: &NetworkModel, input: &Tensor) -> Result<Vec<Vec<f64>>> {
    let mut boundaries = vec![input.as_real()?.to_vec()];
    let mut shape = model.input_shape.clone();
    for layer in &model.layers {
        let out_shape = layer.output_shape(&shape)?;
        let prev = boundaries.last().unwrap();
        let next = eval_layer_real(layer, &shape, &out_shape, prev)?;
        boundaries.push(next);
        shape = out_shape;
    }
    Ok(boundaries)
}

fn eval_real(model: &NetworkModel, input: &Tensor) -> Result<Tensor> {
    let mut values = input.as_real()?.to_vec();
    let mut shape = model.input_shape.clone();
    for layer in &model.layers {
        let out_shape = layer.output_shape(&shape)?;
        values = eval_layer_real(layer, &shape, &out_shape, &values)?;
        shape = out_shape;
    }
    Tensor::real(shape, values)
}

fn eval_layer_real(
    layer: &Layer,
    shape: &[usize],
    out_shape: &[usize],
    values: &[f64],
) -> Result<Vec<f64>> {
    Ok(match layer {
        Layer::FullyConnected { weights, bias, .. } => {
            let mut y = weights.matvec(values)?;
            for (o, b) in y.iter_mut().zip(bias) {
                *o += b;
            }
            y
        }
        Layer::Relu { .. } => values.iter().map(|v| v.max(0.0)).collect(),
        Layer::MaxPool2D { window, stride, .. } => pool_map(
            shape,
            out_shape,
            *window,
            *stride,
            |vals| vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            values,
        ),
        Layer::BatchNorm {
            gamma,
            beta,
            mean,
            variance,
            epsilon,
            ..
        } => {
            let channels = gamma.len();
            let per_channel = values.len() / channels;
            let mut out = Vec::with_capacity(values.len());
            for (i, v) in values.iter().enumerate() {
                let c = i / per_channel;
                let inv = gamma[c] / (variance[c] + epsilon).sqrt();
                out.push((v - mean[c]) * inv + beta[c]);
            }
            out
        }
        Layer::Conv2D { .. } => conv_real(layer, shape, out_shape, values)?,
        Layer::MultiHeadAttention {
            d_model, d_k, heads, ..
        } => attention_real(values, shape[0], *d_model, *d_k, heads),
    })
}

fn conv_real(layer: &Layer, in_shape: &[usize], out_shape: &[usize], x: &[f64]) -> Result<Vec<f64>> {
    let Layer::Conv2D {
        kernel,
        c_out,
        c_in,
        k_h,
        k_w,
        bias,
        stride,
        padding,
        groups,
        ..
    } = layer
    else {
        unreachable!()
    };
    let (h, w) = (in_shape[1], in_shape[2]);
    let (h_out, w_out) = (out_shape[1], out_shape[2]);
    let cig = c_in / groups;
    let cog = c_out / groups;
    let mut out = vec![0.0; c_out * h_out * w_out];
    for co in 0..*c_out {
        let g = co / cog;
        for oy in 0..h_out {
            for ox in 0..w_out {
                let mut acc = bias[co];
                for ci in 0..cig {
                    let ci_abs = g * cig + ci;
                    for ky in 0..*k_h {
                        for kx in 0..*k_w {
                            let iy = (oy * stride.0 + ky) as isize - padding.0 as isize;
                            let ix = (ox * stride.1 + kx) as isize - padding.1 as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue; // explicit zero padding
                            }
                            let xi = (ci_abs * h + iy as usize) * w + ix as usize;
                            let ki = ((co * cig + ci) * k_h + ky) * k_w + kx;
                            acc += kernel[ki] * x[xi];
                        }
                    }
                }
                out[(co * h_out + oy) * w_out + ox] = acc;
            }
        }
    }
    Ok(out)
}

fn pool_map<T: Copy, F: Fn(&[T]) -> T>(
    in_shape: &[usize],
    out_shape: &[usize],
    window: (usize, usize),
    stride: (usize, usize),
    reduce: F,
    x: &[T],
) -> Vec<T> {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (h_out, w_out) = (out_shape[1], out_shape[2]);
    let mut out = Vec::with_capacity(c * h_out * w_out);
    let mut buf = Vec::with_capacity(window.0 * window.1);
    for ch in 0..c {
        for oy in 0..h_out {
            for ox in 0..w_out {
                buf.clear();
                for ky in 0..window.0 {
                    for kx in 0..window.1 {
                        let iy = oy * stride.0 + ky;
                        let ix = ox * stride.1 + kx;
                        buf.push(x[(ch * h + iy) * w + ix]);
                    }
                }
                out.push(reduce(&buf));
            }
        }
    }
    out
}

fn attention_real(
    x: &[f64],
    seq: usize,
    d_model: usize,
    d_k: usize,
    heads: &[crate::model::AttentionHead],
) -> Vec<f64> {
    let mut out = vec![0.0; seq * d_model];
    for head in heads {
        // q = x wq, k = x wk, v = x wv (all seq x d_k)
        let proj = |wm: &crate::tensor::Matrix| -> Vec<f64> {
            let mut p = vec![0.0; seq * d_k];
            for t in 0..seq {
                for kcol in 0..d_k {
                    let mut acc = 0.0;
                    for m in 0..d_model {
                        acc += x[t * d_model + m] * wm.get(m, kcol);
                    }
                    p[t * d_k + kcol] = acc;
                }
            }
            p
        };
        let q = proj(&head.wq);
        let k = proj(&head.wk);
        let v = proj(&head.wv);
        // scores, softmax rows, context
        let scale = 1.0 / (d_k as f64).sqrt();
        let mut ctx = vec![0.0; seq * d_k];
        let mut row = vec![0.0; seq];
        for t in 0..seq {
            for u in 0..seq {
                let mut acc = 0.0;
                for kk in 0..d_k {
                    acc += q[t * d_k + kk] * k[u * d_k + kk];
                }
                row[u] = acc * scale;
            }
            softmax_in_place(&mut row);
            for kk in 0..d_k {
                let mut acc = 0.0;
                for u in 0..seq {
                    acc += row[u] * v[u * d_k + kk];
                }
                ctx[t * d_k + kk] = acc;
            }
        }
        // out += ctx wo
        for t in 0..seq {
            for m in 0..d_model {
                let mut acc = 0.0;
                for kk in 0..d_k {
                    acc += ctx[t * d_k + kk] * head.wo.get(kk, m);
                }
                out[t * d_model + m] += acc;
            }
        }
    }
    out
}

/// Numerically-stable softmax, sequential sum order (index 0 upward).
pub fn softmax_in_place(z: &mut [f64]) {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

// ---------------------------------------------------------------------------
// Quantized mode
// ---------------------------------------------------------------------------

struct QState {
    codes: Vec<i64>,
    scale: f64,
    bits: u32,
    shape: Vec<usize>,
}

fn eval_quant(model: &NetworkModel, input: &Tensor, q: &ModelQuant) -> Result<Tensor> {
    let mut state = QState {
        codes: match &input.data {
            TensorData::Real(v) => v
                .iter()
                .map(|&x| quantize_uniform(x, q.input_bits, q.input_scale))
                .collect(),
            TensorData::Int { codes, .. } => codes.clone(),
        },
        scale: q.input_scale,
        bits: q.input_bits,
        shape: model.input_shape.clone(),
    };
    for layer in &model.layers {
        let out_shape = layer.output_shape(&state.shape)?;
        state = match layer {
            Layer::FullyConnected { name, weights, bias } => {
                let spec = q.spec_for(name)?;
                let w_scale = uniform_scale(spec, name)?;
                let acc_bits = accumulator_bits(spec.weight_bits, state.bits, weights.cols);
                let mult = requant_multiplier(w_scale, state.scale, spec.act_scale);
                let mut out = Vec::with_capacity(weights.rows);
                for r in 0..weights.rows {
                    let mut acc: i64 = 0;
                    for (cidx, wv) in weights.row(r).iter().enumerate() {
                        let (wc, _) = spec.quantize_weight(*wv);
                        acc += wc * state.codes[cidx];
                    }
                    acc += bias_code(bias[r], w_scale, state.scale, acc_bits);
                    out.push(requant_code(acc, mult, spec.activation_bits));
                }
                QState {
                    codes: out,
                    scale: spec.act_scale,
                    bits: spec.activation_bits,
                    shape: out_shape,
                }
            }
            Layer::Relu { .. } => QState {
                codes: state.codes.iter().map(|&c| c.max(0)).collect(),
                shape: out_shape,
                ..state
            },
            Layer::MaxPool2D { window, stride, .. } => QState {
                codes: pool_map(&state.shape, &out_shape, *window, *stride, |vals| {
                    vals.iter().cloned().fold(i64::MIN, i64::max)
                }, &state.codes),
                shape: out_shape,
                ..state
            },
            Layer::Conv2D { name, .. } => {
                let spec = q.spec_for(name)?;
                let codes = conv_quant(layer, &state, &out_shape, spec)?;
                QState {
                    codes,
                    scale: spec.act_scale,
                    bits: spec.activation_bits,
                    shape: out_shape,
                }
            }
            Layer::MultiHeadAttention {
                name,
                d_model,
                d_k,
                heads,
            } => {
                let spec = q.spec_for(name)?;
                let codes =
                    attention_quant(&state, state.shape[0], *d_model, *d_k, heads, spec)?;
                QState {
                    codes,
                    scale: spec.act_scale,
                    bits: spec.activation_bits,
                    shape: out_shape,
                }
            }
            Layer::BatchNorm { name, .. } => {
                return Err(Error::InvalidQuant(format!(
                    "batchnorm `{name}` cannot run on the integer datapath; \
                     fold it with lower_for_inference first"
                )));
            }
        };
    }
    Tensor::int(state.shape, state.bits, state.codes)
}

fn uniform_scale(spec: &QuantSpec, layer: &str) -> Result<f64> {
    match &spec.weights {
        WeightQuant::Uniform { scale } => Ok(*scale),
        WeightQuant::Codebook { .. } => Err(Error::InvalidQuant(format!(
            "layer `{layer}`: codebook weights are not supported on the integer datapath; \
             use the uniform-symmetric scheme for simulation"
        ))),
    }
}

fn conv_quant(layer: &Layer, state: &QState, out_shape: &[usize], spec: &QuantSpec) -> Result<Vec<i64>> {
    let Layer::Conv2D {
        kernel,
        c_out,
        c_in,
        k_h,
        k_w,
        bias,
        stride,
        padding,
        groups,
        name,
        ..
    } = layer
    else {
        unreachable!()
    };
    let w_scale = uniform_scale(spec, name)?;
    let cig = c_in / groups;
    let cog = c_out / groups;
    let fanin = cig * k_h * k_w;
    let acc_bits = accumulator_bits(spec.weight_bits, state.bits, fanin);
    let mult = requant_multiplier(w_scale, state.scale, spec.act_scale);
    let (h, w) = (state.shape[1], state.shape[2]);
    let (h_out, w_out) = (out_shape[1], out_shape[2]);
    let mut out = vec![0i64; c_out * h_out * w_out];
    for co in 0..*c_out {
        let g = co / cog;
        let b = bias_code(bias[co], w_scale, state.scale, acc_bits);
        for oy in 0..h_out {
            for ox in 0..w_out {
                let mut acc: i64 = 0;
                for ci in 0..cig {
                    let ci_abs = g * cig + ci;
                    for ky in 0..*k_h {
                        for kx in 0..*k_w {
                            let iy = (oy * stride.0 + ky) as isize - padding.0 as isize;
                            let ix = (ox * stride.1 + kx) as isize - padding.1 as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let xi = (ci_abs * h + iy as usize) * w + ix as usize;
                            let ki = ((co * cig + ci) * k_h + ky) * k_w + kx;
                            let (wc, _) = spec.quantize_weight(kernel[ki]);
                            acc += wc * state.codes[xi];
                        }
                    }
                }
                acc += b;
                out[(co * h_out + oy) * w_out + ox] = requant_code(acc, mult, spec.activation_bits);
            }
        }
    }
    Ok(out)
}

/// Quantized multi-head attention boundary semantics.
///
/// Per head: projections and the two activation-by-activation multiplies run
/// as integer MACs with a requantize at each output; softmax runs on the
/// host in f64 over dequantized scores and its probabilities are quantized
/// to the non-negative half of the activation grid (scale `1/qmax`). Head
/// outputs are summed as wide integers and saturated to the activation width.
fn attention_quant(
    state: &QState,
    seq: usize,
    d_model: usize,
    d_k: usize,
    heads: &[crate::model::AttentionHead],
    spec: &QuantSpec,
) -> Result<Vec<i64>> {
    let w_scale = uniform_scale(spec, "attention")?;
    let a_bits = spec.activation_bits;
    let a_scale = spec.act_scale;
    let p_scale = 1.0 / quant::qmax(a_bits) as f64;
    let proj_mult = requant_multiplier(w_scale, state.scale, a_scale);
    let ctx_mult = requant_multiplier(p_scale, a_scale, a_scale);
    let out_mult = requant_multiplier(w_scale, a_scale, a_scale);

    let mut head_sum = vec![0i64; seq * d_model];
    for head in heads {
        let proj = |wm: &crate::tensor::Matrix| -> Vec<i64> {
            let mut p = vec![0i64; seq * d_k];
            for t in 0..seq {
                for kcol in 0..d_k {
                    let mut acc: i64 = 0;
                    for m in 0..d_model {
                        let (wc, _) = spec.quantize_weight(wm.get(m, kcol));
                        acc += wc * state.codes[t * d_model + m];
                    }
                    p[t * d_k + kcol] = requant_code(acc, proj_mult, a_bits);
                }
            }
            p
        };
        let q = proj(&head.wq);
        let k = proj(&head.wk);
        let v = proj(&head.wv);

        let score_scale = a_scale * a_scale / (d_k as f64).sqrt();
        let mut ctx = vec![0i64; seq * d_k];
        let mut row = vec![0.0f64; seq];
        for t in 0..seq {
            for u in 0..seq {
                let mut acc: i64 = 0;
                for kk in 0..d_k {
                    acc += q[t * d_k + kk] * k[u * d_k + kk];
                }
                row[u] = acc as f64 * score_scale;
            }
            softmax_in_place(&mut row);
            let p_codes: Vec<i64> = row
                .iter()
                .map(|&p| quantize_uniform(p, a_bits, p_scale))
                .collect();
            for kk in 0..d_k {
                let mut acc: i64 = 0;
                for u in 0..seq {
                    acc += p_codes[u] * v[u * d_k + kk];
                }
                ctx[t * d_k + kk] = requant_code(acc, ctx_mult, a_bits);
            }
        }

        for t in 0..seq {
            for m in 0..d_model {
                let mut acc: i64 = 0;
                for kk in 0..d_k {
                    let (wc, _) = spec.quantize_weight(head.wo.get(kk, m));
                    acc += wc * ctx[t * d_k + kk];
                }
                head_sum[t * d_model + m] += requant_code(acc, out_mult, a_bits);
            }
        }
    }
    // Saturating head summation on the host.
    let lo = quant::qmin(a_bits);
    let hi = quant::qmax(a_bits);
    Ok(head_sum.iter().map(|&c| c.clamp(lo, hi)).collect())
}
