//! A small feed-forward classifier over flat parameter vectors: forward
//! pass, cross-entropy loss, per-example gradients, and evaluation.
//!
//! All math is in f64. Parameters are a single flat vector laid out layer by
//! layer (row-major weights, then biases), which is the unit exchanged
//! between agents and hashed into the ledger.

use rand::distr::Uniform;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Dataset, Example};
use crate::error::{Error, Result};
use crate::seed::rng_from;

/// Probabilities are floored at this value before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    pub activation: Activation,
}

/// Shape of one dense layer: `outputs x inputs` weights plus `outputs` biases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub inputs: usize,
    pub outputs: usize,
}

impl LayerShape {
    pub fn param_count(&self) -> usize {
        (self.inputs + 1) * self.outputs
    }
}

impl ModelSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, num_classes: usize) -> Result<Self> {
        if input_dim == 0 || num_classes == 0 || hidden_dims.contains(&0) {
            return Err(Error::Config("all model dimensions must be >= 1".into()));
        }
        Ok(Self {
            input_dim,
            hidden_dims,
            num_classes,
            activation: Activation::Relu,
        })
    }

    pub fn layer_shapes(&self) -> Vec<LayerShape> {
        let mut shapes = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut inputs = self.input_dim;
        for &h in &self.hidden_dims {
            shapes.push(LayerShape { inputs, outputs: h });
            inputs = h;
        }
        shapes.push(LayerShape {
            inputs,
            outputs: self.num_classes,
        });
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes()
            .iter()
            .map(LayerShape::param_count)
            .sum()
    }
}

/// Flat model parameters plus their layer layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    values: Vec<f64>,
    layout: Vec<LayerShape>,
}

impl ParameterVector {
    pub fn from_values(layout: Vec<LayerShape>, values: Vec<f64>) -> Result<Self> {
        let expected: usize = layout.iter().map(LayerShape::param_count).sum();
        if values.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter vector"));
        }
        Ok(Self { values, layout })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn layout(&self) -> &[LayerShape] {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_layout(&self, other: &ParameterVector) -> bool {
        self.layout == other.layout
    }

    pub fn matches_spec(&self, spec: &ModelSpec) -> bool {
        self.layout == spec.layer_shapes()
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Offset of layer `l` within the flat vector.
    fn layer_offset(&self, layer: usize) -> usize {
        self.layout[..layer]
            .iter()
            .map(LayerShape::param_count)
            .sum()
    }

    pub fn weights(&self, layer: usize) -> &[f64] {
        let shape = self.layout[layer];
        let start = self.layer_offset(layer);
        &self.values[start..start + shape.inputs * shape.outputs]
    }

    pub fn biases(&self, layer: usize) -> &[f64] {
        let shape = self.layout[layer];
        let start = self.layer_offset(layer) + shape.inputs * shape.outputs;
        &self.values[start..start + shape.outputs]
    }

    /// Serialize as layout descriptor followed by little-endian f64 values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut bytes = Vec::with_capacity(8 + self.layout.len() * 16 + self.values.len() * 8);
        bytes.extend_from_slice(&(self.layout.len() as u64).to_le_bytes());
        for shape in &self.layout {
            bytes.extend_from_slice(&(shape.inputs as u64).to_le_bytes());
            bytes.extend_from_slice(&(shape.outputs as u64).to_le_bytes());
        }
        for v in &self.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes
    }

    pub fn digest(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update(self.to_bytes());
        hasher.finalize().into()
    }
}

/// The coordinator's initial global parameters: all zeros.
pub fn zero_params(spec: &ModelSpec) -> ParameterVector {
    ParameterVector {
        values: vec![0.0; spec.param_count()],
        layout: spec.layer_shapes(),
    }
}

/// Randomized local initialization: every weight and bias of a layer with
/// fan-in `d` is drawn uniformly from `[-1/sqrt(d), 1/sqrt(d)]`.
pub fn init_params(spec: &ModelSpec, seed: u64) -> ParameterVector {
    let mut rng = rng_from(seed, "init", 0);
    let layout = spec.layer_shapes();
    let mut values = Vec::with_capacity(spec.param_count());
    for shape in &layout {
        let bound = 1.0 / (shape.inputs as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("valid bounds");
        for _ in 0..shape.param_count() {
            values.push(rng.sample(dist));
        }
    }
    ParameterVector { values, layout }
}

fn check_inputs(spec: &ModelSpec, params: &ParameterVector, x: &[f64]) -> Result<()> {
    if x.len() != spec.input_dim {
        return Err(Error::DimensionMismatch {
            expected: spec.input_dim,
            got: x.len(),
        });
    }
    if !params.matches_spec(spec) {
        return Err(Error::LayoutMismatch);
    }
    Ok(())
}

/// Pre-activations of every layer. The last entry holds the logits.
fn layer_pre_activations(params: &ParameterVector, x: &[f64]) -> Vec<Vec<f64>> {
    let mut pre = Vec::with_capacity(params.layout.len());
    let mut activation: Vec<f64> = x.to_vec();
    for layer in 0..params.layout.len() {
        let shape = params.layout[layer];
        let weights = params.weights(layer);
        let biases = params.biases(layer);
        let mut z = vec![0.0; shape.outputs];
        for (o, z_o) in z.iter_mut().enumerate() {
            let row = &weights[o * shape.inputs..(o + 1) * shape.inputs];
            *z_o = biases[o] + row.iter().zip(&activation).map(|(w, a)| w * a).sum::<f64>();
        }
        if layer + 1 < params.layout.len() {
            activation = z.iter().map(|&v| v.max(0.0)).collect();
        }
        pre.push(z);
    }
    pre
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// Class probabilities for a single input.
pub fn forward(spec: &ModelSpec, params: &ParameterVector, x: &[f64]) -> Result<Vec<f64>> {
    check_inputs(spec, params, x)?;
    let pre = layer_pre_activations(params, x);
    Ok(softmax(pre.last().expect("at least one layer")))
}

/// Cross-entropy loss and the per-example gradient, via backprop.
pub fn loss_and_grad(
    spec: &ModelSpec,
    params: &ParameterVector,
    example: &Example,
) -> Result<(f64, ParameterVector)> {
    check_inputs(spec, params, &example.features)?;
    if example.label >= spec.num_classes {
        return Err(Error::Dataset(format!(
            "label {} out of range for {} classes",
            example.label, spec.num_classes
        )));
    }

    let pre = layer_pre_activations(params, &example.features);
    let num_layers = params.layout.len();
    // Post-activation outputs per layer boundary: activations[0] is the input.
    let mut activations: Vec<Vec<f64>> = Vec::with_capacity(num_layers);
    activations.push(example.features.clone());
    for z in pre.iter().take(num_layers - 1) {
        activations.push(z.iter().map(|&v| v.max(0.0)).collect());
    }

    let probs = softmax(&pre[num_layers - 1]);
    let loss = -probs[example.label].max(PROB_FLOOR).ln();

    let mut grad_values = vec![0.0; params.len()];
    // delta starts as dL/dlogits = p - onehot(y).
    let mut delta: Vec<f64> = probs;
    delta[example.label] -= 1.0;

    for layer in (0..num_layers).rev() {
        let shape = params.layout[layer];
        let offset = params.layer_offset(layer);
        let input = &activations[layer];
        for o in 0..shape.outputs {
            let w_row = offset + o * shape.inputs;
            for i in 0..shape.inputs {
                grad_values[w_row + i] = delta[o] * input[i];
            }
            grad_values[offset + shape.inputs * shape.outputs + o] = delta[o];
        }
        if layer > 0 {
            let weights = params.weights(layer);
            let mut prev = vec![0.0; shape.inputs];
            for (i, p) in prev.iter_mut().enumerate() {
                let mut acc = 0.0;
                for o in 0..shape.outputs {
                    acc += weights[o * shape.inputs + i] * delta[o];
                }
                // ReLU gate on the previous layer's pre-activation.
                *p = if pre[layer - 1][i] > 0.0 { acc } else { 0.0 };
            }
            delta = prev;
        }
    }

    let grad = ParameterVector {
        values: grad_values,
        layout: params.layout.clone(),
    };
    Ok((loss, grad))
}

/// Fraction of argmax-correct predictions, ties broken by lowest class index.
pub fn evaluate(spec: &ModelSpec, params: &ParameterVector, test: &Dataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Dataset(
            "cannot evaluate on an empty test set".into(),
        ));
    }
    let mut correct = 0usize;
    for ex in &test.examples {
        check_inputs(spec, params, &ex.features)?;
        let pre = layer_pre_activations(params, &ex.features);
        let logits = pre.last().expect("at least one layer");
        let mut best = 0usize;
        for (c, &z) in logits.iter().enumerate() {
            if z > logits[best] {
                best = c;
            }
        }
        if best == ex.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}
