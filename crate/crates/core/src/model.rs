//! A small tanh MLP featurizer with a linear classification head.
//!
//! `dims = [input, hidden.., embedding, classes]`. Every layer but the last
//! is followed by `tanh`; the output of the last hidden layer is the
//! embedding used for proxy comparisons.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{FeatureVector, Rng};
use crate::SampleId;

/// Probabilities below this are clamped before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

const CHECKPOINT_MAGIC: &str = "dl4nd-checkpoint";
const CHECKPOINT_VERSION: &str = "v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs x inputs`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.outputs)
            .map(|o| {
                let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
                self.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }
}

/// Parameters of the featurizer and head. Also used as the gradient buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    dims: Vec<usize>,
    layers: Vec<Dense>,
}

impl ModelParams {
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        validate_dims(dims)?;
        Ok(Self {
            dims: dims.to_vec(),
            layers: dims.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn embedding_dim(&self) -> usize {
        self.dims[self.dims.len() - 2]
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// All parameters, layer by layer: weights (row-major) then bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn from_flat(dims: &[usize], flat: &[f64]) -> Result<Self> {
        let mut p = Self::zeros(dims)?;
        if flat.len() != p.num_params() {
            return Err(Error::DimensionMismatch {
                expected: p.num_params(),
                actual: flat.len(),
            });
        }
        let mut it = flat.iter().copied();
        for l in &mut p.layers {
            l.weights.iter_mut().chain(l.bias.iter_mut()).for_each(|v| *v = it.next().unwrap());
        }
        Ok(p)
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(l.bias.iter()))
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, other: &ModelParams, alpha: f64) {
        assert_eq!(self.dims, other.dims, "parameter shapes differ");
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.values_mut().for_each(|v| *v *= alpha);
    }

    pub fn norm(&self) -> f64 {
        self.values().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\ndims");
        for d in &self.dims {
            let _ = write!(out, " {d}");
        }
        out.push('\n');
        let row = |out: &mut String, vals: &[f64]| {
            let strs: Vec<String> = vals.iter().map(|v| format!("{v:?}")).collect();
            out.push_str(&strs.join(" "));
            out.push('\n');
        };
        for l in &self.layers {
            for r in l.weights.chunks(l.inputs) {
                row(&mut out, r);
            }
            row(&mut out, &l.bias);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let mut next = |what: &str| -> Result<(usize, &str)> {
            lines.next().ok_or_else(|| Error::Parse {
                record: usize::MAX,
                message: format!("checkpoint truncated before {what}"),
            })
        };
        let (_, header) = next("header")?;
        if header.trim() != format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}") {
            return Err(Error::Parse {
                record: 0,
                message: format!("unsupported checkpoint header `{header}`"),
            });
        }
        let (n, dims_line) = next("dims")?;
        let dims = dims_line
            .strip_prefix("dims")
            .ok_or_else(|| Error::Parse { record: n, message: "expected `dims`".into() })?
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::Parse { record: n, message: "bad layer dim".into() })?;
        let mut params = ModelParams::zeros(&dims)?;
        let mut parse_row = |expected: usize, out: &mut [f64]| -> Result<()> {
            let (n, line) = next("parameter row")?;
            let vals = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::Parse { record: n, message: "bad parameter value".into() })?;
            if vals.len() != expected {
                return Err(Error::Parse {
                    record: n,
                    message: format!("expected {expected} values, found {}", vals.len()),
                });
            }
            out.copy_from_slice(&vals);
            Ok(())
        };
        for l in &mut params.layers {
            let inputs = l.inputs;
            for r in l.weights.chunks_mut(inputs) {
                parse_row(inputs, r)?;
            }
            let outputs = l.outputs;
            parse_row(outputs, &mut l.bias)?;
        }
        if !params.is_finite() {
            return Err(Error::Parse {
                record: 0,
                message: "checkpoint contains non-finite parameters".into(),
            });
        }
        Ok(params)
    }
}

fn validate_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::InvalidSpec("layer dims need at least an input and an output".into()));
    }
    if dims.contains(&0) {
        return Err(Error::InvalidSpec("layer dims must be positive".into()));
    }
    Ok(())
}

/// Glorot-uniform weights, zero biases.
pub fn init_params(dims: &[usize], seed: u64) -> Result<ModelParams> {
    let mut params = ModelParams::zeros(dims)?;
    let mut rng = Rng::new(seed);
    for l in &mut params.layers {
        let bound = (6.0 / (l.inputs + l.outputs) as f64).sqrt();
        for w in &mut l.weights {
            *w = rng.uniform(-bound, bound);
        }
    }
    Ok(params)
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    std::fs::write(path, params.to_text()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ModelParams::from_text(&text)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardResult {
    pub embedding: FeatureVector,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    /// Cross-entropy of `probs` against the given label, in nats.
    pub loss: f64,
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn cross_entropy(probs: &[f64], label: usize) -> f64 {
    -probs[label].max(PROB_FLOOR).ln()
}

/// Activations of every layer; `acts[0]` is the input, the last is the logits.
struct Trace {
    acts: Vec<Vec<f64>>,
}

impl Trace {
    fn logits(&self) -> &[f64] {
        self.acts.last().unwrap()
    }

    fn embedding(&self) -> &[f64] {
        &self.acts[self.acts.len() - 2]
    }
}

fn trace(params: &ModelParams, x: &[f64]) -> Result<Trace> {
    if x.len() != params.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: params.input_dim(),
            actual: x.len(),
        });
    }
    let last = params.layers.len() - 1;
    let mut acts = Vec::with_capacity(params.layers.len() + 1);
    acts.push(x.to_vec());
    for (i, layer) in params.layers.iter().enumerate() {
        let mut z = layer.apply(acts.last().unwrap());
        if i < last {
            z.iter_mut().for_each(|v| *v = v.tanh());
        }
        acts.push(z);
    }
    Ok(Trace { acts })
}

fn check_label(params: &ModelParams, label: usize) -> Result<()> {
    if label >= params.num_classes() {
        return Err(Error::LabelOutOfRange {
            label,
            num_classes: params.num_classes(),
        });
    }
    Ok(())
}

pub fn forward(params: &ModelParams, x: &FeatureVector, label: usize) -> Result<ForwardResult> {
    check_label(params, label)?;
    let t = trace(params, x.as_slice())?;
    let probs = softmax(t.logits());
    let loss = cross_entropy(&probs, label);
    Ok(ForwardResult {
        embedding: FeatureVector::new(t.embedding().to_vec())?,
        logits: t.logits().to_vec(),
        probs,
        loss,
    })
}

pub fn predict(params: &ModelParams, x: &FeatureVector) -> Result<usize> {
    let t = trace(params, x.as_slice())?;
    Ok(argmax(t.logits()))
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// One training example as seen by the gradient routine.
#[derive(Debug, Clone, Copy)]
pub struct BatchItem<'a> {
    pub id: SampleId,
    pub x: &'a [f64],
    pub label: usize,
}

/// A differentiable per-sample term over the predicted distribution.
///
/// `apply` receives the sample's batch slot, id and softmax output, and
/// returns the term's contribution to the batch loss together with its
/// gradient with respect to the logits. Contributions are summed, so
/// implementations do their own `1/|B|` scaling.
pub trait LogitPenalty {
    fn apply(&mut self, slot: usize, id: SampleId, probs: &[f64]) -> (f64, Vec<f64>);
}

/// No extra terms.
pub struct NoPenalty;

impl LogitPenalty for NoPenalty {
    fn apply(&mut self, _slot: usize, _id: SampleId, probs: &[f64]) -> (f64, Vec<f64>) {
        (0.0, vec![0.0; probs.len()])
    }
}

#[derive(Debug, Clone)]
pub struct BatchGradients {
    /// Cross-entropy per batch item, in batch order.
    pub losses: Vec<f64>,
    /// Mean cross-entropy plus the summed penalty contributions.
    pub total_loss: f64,
    pub grads: ModelParams,
}

/// Per-sample losses and the gradient of the batch objective.
pub fn batch_gradients(
    params: &ModelParams,
    batch: &[BatchItem<'_>],
    penalty: &mut dyn LogitPenalty,
) -> Result<BatchGradients> {
    if batch.is_empty() {
        return Err(Error::EmptyGroup("gradient of an empty batch".into()));
    }
    let inv_b = 1.0 / batch.len() as f64;
    let mut grads = ModelParams::zeros(&params.dims)?;
    let mut losses = Vec::with_capacity(batch.len());
    let mut total = 0.0;

    for (slot, item) in batch.iter().enumerate() {
        check_label(params, item.label)?;
        let t = trace(params, item.x)?;
        let probs = softmax(t.logits());
        let ce = cross_entropy(&probs, item.label);
        let (extra, extra_grad) = penalty.apply(slot, item.id, &probs);
        if !ce.is_finite() || !extra.is_finite() || probs.iter().any(|p| !p.is_finite()) {
            return Err(Error::NumericOverflow { sample: item.id });
        }
        losses.push(ce);
        total += ce * inv_b + extra;

        let mut delta: Vec<f64> = probs.iter().map(|p| p * inv_b).collect();
        if probs[item.label] >= PROB_FLOOR {
            delta[item.label] -= inv_b;
        } else {
            // Clamped region: the loss is locally constant.
            delta.iter_mut().for_each(|d| *d = 0.0);
        }
        for (d, g) in delta.iter_mut().zip(&extra_grad) {
            *d += g;
        }
        backprop(params, &t, delta, &mut grads);
    }

    if !total.is_finite() || !grads.is_finite() {
        return Err(Error::NumericOverflow { sample: batch[0].id });
    }
    Ok(BatchGradients {
        losses,
        total_loss: total,
        grads,
    })
}

fn backprop(params: &ModelParams, t: &Trace, mut delta: Vec<f64>, grads: &mut ModelParams) {
    for li in (0..params.layers.len()).rev() {
        let layer = &params.layers[li];
        let input = &t.acts[li];
        let g = &mut grads.layers[li];
        for o in 0..layer.outputs {
            let d = delta[o];
            g.bias[o] += d;
            let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
            for (gw, a) in row.iter_mut().zip(input) {
                *gw += d * a;
            }
        }
        if li == 0 {
            break;
        }
        let mut prev = vec![0.0; layer.inputs];
        for o in 0..layer.outputs {
            let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
            for (p, w) in prev.iter_mut().zip(row) {
                *p += w * delta[o];
            }
        }
        // tanh'(z) = 1 - tanh(z)^2, and input holds tanh(z).
        for (p, a) in prev.iter_mut().zip(input) {
            *p *= 1.0 - a * a;
        }
        delta = prev;
    }
}

/// Embedding of every sample, keyed by id.
pub fn extract_features(params: &ModelParams, dataset: &Dataset) -> Result<BTreeMap<SampleId, FeatureVector>> {
    dataset
        .samples()
        .iter()
        .map(|s| {
            let t = trace(params, s.features.as_slice())?;
            Ok((s.id, FeatureVector::new(t.embedding().to_vec())?))
        })
        .collect()
}

/// Per-sample cross-entropy against the current (noisy) labels and the
/// embeddings, from a single forward pass.
pub fn loss_and_features(
    params: &ModelParams,
    dataset: &Dataset,
) -> Result<(BTreeMap<SampleId, f64>, BTreeMap<SampleId, FeatureVector>)> {
    let mut losses = BTreeMap::new();
    let mut feats = BTreeMap::new();
    for s in dataset.samples() {
        let r = forward(params, &s.features, s.noisy_label)?;
        if !r.loss.is_finite() {
            return Err(Error::NumericOverflow { sample: s.id });
        }
        losses.insert(s.id, r.loss);
        feats.insert(s.id, r.embedding);
    }
    Ok((losses, feats))
}

/// Accuracy of the model's predictions against true labels.
pub fn accuracy(params: &ModelParams, dataset: &Dataset) -> Result<f64> {
    if !dataset.has_true_labels() {
        return Err(Error::MetricUnavailable("dataset has no true labels".into()));
    }
    if dataset.is_empty() {
        return Err(Error::MetricUnavailable("empty evaluation set".into()));
    }
    let mut correct = 0usize;
    for s in dataset.samples() {
        if Some(predict(params, &s.features)?) == s.true_label {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fv(v: Vec<f64>) -> FeatureVector {
        FeatureVector::new(v).unwrap()
    }

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let a = init_params(&[16, 32, 16, 10], 5).unwrap();
        let b = init_params(&[16, 32, 16, 10], 5).unwrap();
        assert_eq!(a, b);
        assert!(a.layers().iter().all(|l| l.bias.iter().all(|&v| v == 0.0)));
        assert_ne!(a, init_params(&[16, 32, 16, 10], 6).unwrap());
    }

    #[test]
    fn parameter_count() {
        let p = init_params(&[16, 32, 16, 10], 0).unwrap();
        assert_eq!(p.num_params(), 16 * 32 + 32 + 32 * 16 + 16 + 16 * 10 + 10);
        assert_eq!(p.num_params(), 1242);
    }

    #[test]
    fn invalid_dims_rejected() {
        assert!(init_params(&[], 0).is_err());
        assert!(init_params(&[4], 0).is_err());
        assert!(init_params(&[4, 0, 2], 0).is_err());
    }

    #[test]
    fn zero_head_gives_uniform_probs() {
        let mut p = init_params(&[3, 5, 4], 1).unwrap();
        let head = p.layers_mut().last_mut().unwrap();
        head.weights.iter_mut().for_each(|w| *w = 0.0);
        let r = forward(&p, &fv(vec![0.3, -1.0, 2.0]), 2).unwrap();
        assert!(r.probs.iter().all(|&q| (q - 0.25).abs() < 1e-15));
        assert!((r.loss - 4f64.ln()).abs() < 1e-12);
        assert_eq!(r.embedding.dim(), 5);
    }

    #[test]
    fn confident_correct_loss_vanishes() {
        let mut p = ModelParams::zeros(&[2, 3]).unwrap();
        p.layers_mut()[0].bias = vec![50.0, 0.0, 0.0];
        let r = forward(&p, &fv(vec![1.0, 1.0]), 0).unwrap();
        assert!(r.loss < 1e-20);
        let x = [1.0, 1.0];
        let g = batch_gradients(&p, &[BatchItem { id: 0, x: &x, label: 0 }], &mut NoPenalty).unwrap();
        assert!(g.grads.norm() < 1e-20);
    }

    #[test]
    fn saturated_wrong_class_loss_is_clamped() {
        let mut p = ModelParams::zeros(&[2, 2]).unwrap();
        p.layers_mut()[0].bias = vec![100.0, 0.0];
        let r = forward(&p, &fv(vec![0.0, 0.0]), 1).unwrap();
        assert!((r.loss + PROB_FLOOR.ln()).abs() < 1e-9);
    }

    #[test]
    fn label_out_of_range() {
        let p = init_params(&[2, 3, 4], 0).unwrap();
        assert!(matches!(
            forward(&p, &fv(vec![1.0, 2.0]), 4).unwrap_err(),
            Error::LabelOutOfRange { .. }
        ));
    }

    #[test]
    fn duplicate_batch_item_leaves_gradient_unchanged() {
        let p = init_params(&[3, 6, 4, 3], 2).unwrap();
        let x = [0.5, -0.2, 1.5];
        let one = [BatchItem { id: 1, x: &x, label: 2 }];
        let two = [one[0], one[0]];
        let g1 = batch_gradients(&p, &one, &mut NoPenalty).unwrap();
        let g2 = batch_gradients(&p, &two, &mut NoPenalty).unwrap();
        for (a, b) in g1.grads.to_flat().iter().zip(g2.grads.to_flat()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn overflow_names_the_sample() {
        let mut p = init_params(&[2, 3, 2], 0).unwrap();
        p.layers_mut()[1].weights[0] = f64::INFINITY;
        let x = [1.0, 1.0];
        let err = batch_gradients(&p, &[BatchItem { id: 77, x: &x, label: 0 }], &mut NoPenalty).unwrap_err();
        assert!(matches!(err, Error::NumericOverflow { sample: 77 }));
    }

    #[test]
    fn features_match_forward_embeddings() {
        let spec = crate::datagen::DomainSpec {
            samples_per_cell: 2,
            ..Default::default()
        };
        let ds = crate::datagen::generate(&spec).unwrap();
        let p = init_params(&[16, 12, 8, 10], 3).unwrap();
        let feats = extract_features(&p, &ds).unwrap();
        assert_eq!(feats.len(), ds.len());
        for s in ds.samples() {
            assert_eq!(feats[&s.id], forward(&p, &s.features, 0).unwrap().embedding);
        }
        assert_eq!(feats, extract_features(&p, &ds).unwrap());
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let p = init_params(&[16, 32, 16, 10], 9).unwrap();
        assert_eq!(ModelParams::from_text(&p.to_text()).unwrap(), p);
        let mut bad = p.to_text();
        bad.truncate(bad.len() / 2);
        assert!(ModelParams::from_text(&bad).is_err());
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution_and_shift_invariant(
            logits in prop::collection::vec(-30.0f64..30.0, 2..12), shift in -50.0f64..50.0
        ) {
            let p = softmax(&logits);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let shifted: Vec<f64> = logits.iter().map(|z| z + shift).collect();
            for (a, b) in p.iter().zip(softmax(&shifted)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn flat_round_trip(seed in any::<u64>()) {
            let p = init_params(&[4, 5, 3], seed).unwrap();
            prop_assert_eq!(ModelParams::from_flat(p.dims(), &p.to_flat()).unwrap(), p);
        }
    }
}
