//! Mask-constrained training for small MLPs.
//!
//! Plain SGD with optional momentum on alternating FC/ReLU stacks, softmax
//! cross-entropy loss. The block mask is re-applied after every optimizer
//! step, so masked positions are exactly zero at all times. Optional
//! quantization-aware training uses straight-through semantics: the forward
//! pass sees grid-projected weights, gradients flow to the real-valued
//! shadow weights, and shadows are projected onto the grid once per epoch.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Layer, NetworkModel};
use crate::pruner::BlockMask;
use crate::quant::QuantSpec;
use crate::tensor::Matrix;

/// Labeled classification samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Quantization-aware training: project weights to this grid.
    pub quant: Option<QuantStub>,
}

/// Width of the QAT grid; scales are refreshed per epoch from the current
/// weight range.
#[derive(Debug, Clone, Copy)]
pub struct QuantStub {
    pub weight_bits: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            learning_rate: 0.1,
            momentum: 0.9,
            batch_size: 16,
            seed: 7,
            quant: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub final_train_accuracy: f64,
    /// Mask-invariance checks performed (one per optimizer step).
    pub mask_checks: u64,
}

struct FcParams {
    w: Matrix,
    b: Vec<f64>,
    vw: Vec<f64>,
    vb: Vec<f64>,
    mask: Option<Vec<bool>>,
    name: String,
}

/// Train an MLP (alternating FullyConnected / ReLU layers) under per-layer
/// block masks. Returns the trained model and a report; masked positions are
/// asserted exactly zero after every step.
pub fn train_structured(
    model: &NetworkModel,
    dataset: &Dataset,
    masks: &BTreeMap<String, BlockMask>,
    cfg: &TrainConfig,
) -> Result<(NetworkModel, TrainReport)> {
    if dataset.is_empty() {
        return Err(Error::InvalidModel("dataset is empty".into()));
    }
    // Extract the FC stack; only FC and ReLU layers are trainable here.
    let mut params: Vec<FcParams> = Vec::new();
    let mut relu_after: Vec<bool> = Vec::new();
    for layer in &model.layers {
        match layer {
            Layer::FullyConnected { name, weights, bias } => {
                let mask = match masks.get(name) {
                    Some(m) => {
                        if m.rows != weights.rows || m.cols != weights.cols {
                            return Err(Error::Mask(format!(
                                "mask for `{name}` is {}x{} but weights are {}x{}",
                                m.rows, m.cols, weights.rows, weights.cols
                            )));
                        }
                        Some(m.mask_matrix())
                    }
                    None => None,
                };
                params.push(FcParams {
                    w: weights.clone(),
                    b: bias.clone(),
                    vw: vec![0.0; weights.rows * weights.cols],
                    vb: vec![0.0; weights.rows],
                    mask,
                    name: name.clone(),
                });
                relu_after.push(false);
            }
            Layer::Relu { .. } => {
                if let Some(last) = relu_after.last_mut() {
                    *last = true;
                } else {
                    return Err(Error::InvalidModel(
                        "trainer does not support a leading activation layer".into(),
                    ));
                }
            }
            other => {
                return Err(Error::InvalidModel(format!(
                    "trainer only handles FC/ReLU stacks, found `{}`",
                    other.name()
                )));
            }
        }
    }

    // Apply masks up front so the invariant holds from step zero.
    for p in params.iter_mut() {
        apply_mask_inplace(p);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut mask_checks = 0u64;

    for epoch in 0..cfg.epochs {
        // QAT: refresh grids from the epoch-start weight range.
        let grids: Vec<Option<f64>> = params
            .iter()
            .map(|p| {
                cfg.quant.map(|q| {
                    let m = p.w.data.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                    if m > 0.0 {
                        m / crate::quant::qmax(q.weight_bits) as f64
                    } else {
                        1.0
                    }
                })
            })
            .collect();

        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut grad_w: Vec<Vec<f64>> = params
                .iter()
                .map(|p| vec![0.0; p.w.rows * p.w.cols])
                .collect();
            let mut grad_b: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.b.len()]).collect();

            for &i in chunk {
                let x = &dataset.inputs[i];
                let label = dataset.labels[i];
                // Forward, caching pre- and post-activations. The forward
                // weights are the (optionally grid-projected) views.
                let mut acts: Vec<Vec<f64>> = vec![x.clone()];
                let mut pre: Vec<Vec<f64>> = Vec::new();
                for (li, p) in params.iter().enumerate() {
                    let wq = forward_weights(p, grids[li], cfg.quant);
                    let mut z = vec![0.0; p.w.rows];
                    let a = acts.last().unwrap();
                    for r in 0..p.w.rows {
                        let mut acc = p.b[r];
                        for c in 0..p.w.cols {
                            acc += wq[r * p.w.cols + c] * a[c];
                        }
                        z[r] = acc;
                    }
                    pre.push(z.clone());
                    if relu_after[li] {
                        for v in z.iter_mut() {
                            *v = v.max(0.0);
                        }
                    }
                    acts.push(z);
                }

                // Softmax cross-entropy at the output. NaN must propagate
                // into the loss so the divergence guard can see it
                // (f64::max would silently drop it).
                let out = acts.last().unwrap();
                let mut probs = out.clone();
                crate::eval::softmax_in_place(&mut probs);
                let p = probs[label];
                epoch_loss += if p.is_nan() { f64::NAN } else { -p.max(1e-300).ln() };

                // Backward.
                let mut delta: Vec<f64> = probs;
                delta[label] -= 1.0;
                for li in (0..params.len()).rev() {
                    let p = &params[li];
                    if relu_after[li] {
                        for (d, z) in delta.iter_mut().zip(&pre[li]) {
                            if *z <= 0.0 {
                                *d = 0.0;
                            }
                        }
                    }
                    let a_in = &acts[li];
                    for r in 0..p.w.rows {
                        grad_b[li][r] += delta[r];
                        for c in 0..p.w.cols {
                            grad_w[li][r * p.w.cols + c] += delta[r] * a_in[c];
                        }
                    }
                    if li > 0 {
                        let wq = forward_weights(p, grids[li], cfg.quant);
                        let mut next = vec![0.0; p.w.cols];
                        for c in 0..p.w.cols {
                            let mut acc = 0.0;
                            for r in 0..p.w.rows {
                                acc += wq[r * p.w.cols + c] * delta[r];
                            }
                            next[c] = acc;
                        }
                        delta = next;
                    }
                }
            }

            // SGD step with momentum on the shadow weights, then re-project
            // onto the mask.
            let scale = cfg.learning_rate / chunk.len() as f64;
            for (li, p) in params.iter_mut().enumerate() {
                for i in 0..p.w.data.len() {
                    p.vw[i] = cfg.momentum * p.vw[i] - scale * grad_w[li][i];
                    p.w.data[i] += p.vw[i];
                }
                for r in 0..p.b.len() {
                    p.vb[r] = cfg.momentum * p.vb[r] - scale * grad_b[li][r];
                    p.b[r] += p.vb[r];
                }
                apply_mask_inplace(p);
                assert_mask_invariant(p)?;
                mask_checks += 1;
            }
        }

        if !epoch_loss.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        epoch_losses.push(epoch_loss / dataset.len() as f64);

        // QAT epoch-end projection of the shadow weights onto the grid.
        if let Some(q) = cfg.quant {
            for (li, p) in params.iter_mut().enumerate() {
                if let Some(scale) = grids[li] {
                    let spec = QuantSpec::uniform(q.weight_bits, 8, scale, 1.0);
                    for v in p.w.data.iter_mut() {
                        let (_, deq) = spec.quantize_weight(*v);
                        *v = deq;
                    }
                    apply_mask_inplace(p);
                    assert_mask_invariant(p)?;
                    mask_checks += 1;
                }
            }
        }
    }

    // Rebuild the model.
    let mut layers = Vec::new();
    let mut pi = 0usize;
    for layer in &model.layers {
        match layer {
            Layer::FullyConnected { .. } => {
                let p = &params[pi];
                layers.push(Layer::FullyConnected {
                    name: p.name.clone(),
                    weights: p.w.clone(),
                    bias: p.b.clone(),
                });
                pi += 1;
            }
            other => layers.push(other.clone()),
        }
    }
    let trained = NetworkModel::new(model.name.clone(), model.input_shape.clone(), layers)?;
    let final_train_accuracy = accuracy(&trained, dataset)?;
    Ok((
        trained,
        TrainReport {
            epoch_losses,
            final_train_accuracy,
            mask_checks,
        },
    ))
}

fn forward_weights(p: &FcParams, grid: Option<f64>, quant: Option<QuantStub>) -> Vec<f64> {
    match (grid, quant) {
        (Some(scale), Some(q)) => {
            let spec = QuantSpec::uniform(q.weight_bits, 8, scale, 1.0);
            p.w.data
                .iter()
                .map(|v| spec.quantize_weight(*v).1)
                .collect()
        }
        _ => p.w.data.clone(),
    }
}

fn apply_mask_inplace(p: &mut FcParams) {
    if let Some(mask) = &p.mask {
        for (v, &keep) in p.w.data.iter_mut().zip(mask) {
            if !keep {
                *v = 0.0;
            }
        }
    }
}

fn assert_mask_invariant(p: &FcParams) -> Result<()> {
    if let Some(mask) = &p.mask {
        for (i, (v, &keep)) in p.w.data.iter().zip(mask).enumerate() {
            if !keep && *v != 0.0 {
                return Err(Error::Mask(format!(
                    "mask invariant violated in `{}` at flat index {i}: {v}",
                    p.name
                )));
            }
        }
    }
    Ok(())
}

/// Classification accuracy of an FC/ReLU model over a dataset.
pub fn accuracy(model: &NetworkModel, dataset: &Dataset) -> Result<f64> {
    let mut hits = 0usize;
    for (x, &label) in dataset.inputs.iter().zip(&dataset.labels) {
        let t = crate::tensor::Tensor::real(vec![x.len()], x.clone())?;
        let y = crate::eval::reference_eval(model, &t, None)?;
        let out = y.as_real()?;
        let pred = out
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        if pred == label {
            hits += 1;
        }
    }
    Ok(hits as f64 / dataset.len() as f64)
}
