//! Minibatch SGD training with optional early-learning regularization (ELR)
//! and stochastic weight averaging (SWAD), plus the two-phase refinement
//! pipeline: warm up, split losses, relabel from cross-domain proxies,
//! then resume training on the refined labels.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::loss_split::{fit_gmm, split, GmmConfig, GmmParams, LossSplit};
use crate::model::{batch_gradients, cross_entropy, init_params, BatchItem, LogitPenalty, ModelParams};
use crate::numerics::{FeatureVector, Rng};
use crate::relabel::{build_proxies, relabel, ProxyTable, RelabelOutcome};
use crate::SampleId;

/// Upper bound on `<p, t>` inside the ELR log term.
pub const ELR_CLAMP: f64 = 1.0 - 1e-6;
/// Batch losses above this abort the run.
pub const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularizer {
    Erm,
    ErmElr,
}

/// When to run the refinement pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineTrigger {
    /// At `refine_step`.
    Fixed,
    /// Probe the loss mixture every `probe_interval` steps and refine once
    /// the gap between its means stops growing; `refine_step` is the latest
    /// allowed step.
    GapPeak { probe_interval: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub refine_step: usize,
    pub refine_trigger: RefineTrigger,
    pub refine_passes: usize,
    /// L2-normalize embeddings before averaging them into proxies.
    pub normalize_proxies: bool,
    pub regularizer: Regularizer,
    pub elr_beta: f64,
    pub elr_lambda: f64,
    pub swad: bool,
    /// Inclusive 1-based step window; `None` means the last quarter of the
    /// steps after `refine_step`.
    pub swad_window: Option<(usize, usize)>,
    pub gmm: GmmConfig,
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 2000,
            batch_size: 128,
            learning_rate: 0.05,
            refine_step: 400,
            refine_trigger: RefineTrigger::Fixed,
            refine_passes: 1,
            normalize_proxies: false,
            regularizer: Regularizer::Erm,
            elr_beta: 0.7,
            elr_lambda: 3.0,
            swad: false,
            swad_window: None,
            gmm: GmmConfig::default(),
            hidden: vec![32],
            embedding_dim: 16,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Layer sizes for a given input dimension and class count.
    pub fn layer_dims(&self, input_dim: usize, num_classes: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        dims.extend(&self.hidden);
        dims.push(self.embedding_dim);
        dims.push(num_classes);
        dims
    }

    /// Inclusive SWAD window.
    pub fn resolved_swad_window(&self) -> (usize, usize) {
        self.swad_window.unwrap_or_else(|| {
            let tail = self.total_steps.saturating_sub(self.refine_step);
            let len = (tail / 4).max(1);
            (self.total_steps.saturating_sub(len) + 1, self.total_steps)
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(Error::config(format!("train.{key}"), msg));
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be positive");
        }
        if !(0.0..1.0).contains(&self.elr_beta) {
            return bad("elr_beta", "must lie in [0, 1)");
        }
        if !(self.elr_lambda >= 0.0 && self.elr_lambda.is_finite()) {
            return bad("elr_lambda", "must be non-negative");
        }
        if self.embedding_dim == 0 || self.hidden.contains(&0) {
            return bad("hidden", "layer widths must be positive");
        }
        if self.refine_passes == 0 {
            return bad("refine_passes", "must be at least 1");
        }
        if let RefineTrigger::GapPeak { probe_interval: 0 } = self.refine_trigger {
            return bad("probe_interval", "must be positive");
        }
        if !(0.0..=1.0).contains(&self.gmm.threshold) {
            return bad("gmm_threshold", "must lie in [0, 1]");
        }
        if self.swad {
            let (s, e) = self.resolved_swad_window();
            if s == 0 || s > e || e > self.total_steps {
                return bad("swad_start", "window must satisfy 1 <= start <= end <= total_steps");
            }
        }
        Ok(())
    }

    pub fn validate_pipeline(&self) -> Result<()> {
        self.validate()?;
        if self.refine_step == 0 || self.refine_step >= self.total_steps {
            return Err(Error::config("train.refine_step", "must satisfy 0 < refine_step < total_steps"));
        }
        Ok(())
    }
}

/// Temporal-ensemble targets `t_i`, one per sample, zero until first visited.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ElrState {
    targets: BTreeMap<SampleId, Vec<f64>>,
}

impl ElrState {
    pub fn target(&self, id: SampleId) -> Option<&[f64]> {
        self.targets.get(&id).map(Vec::as_slice)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElrTerms {
    pub target: Vec<f64>,
    pub loss: f64,
    /// Gradient of `loss` with respect to the logits (target held fixed).
    pub logit_grad: Vec<f64>,
}

/// One sample's ELR contribution: `t = beta * t + (1 - beta) * p`, then
/// `lambda * ln(1 - <p, t>) / batch_len` with `<p, t>` clamped below 1.
pub fn elr_step_terms(probs: &[f64], target: &[f64], beta: f64, lambda: f64, batch_len: usize) -> ElrTerms {
    let target: Vec<f64> = target.iter().zip(probs).map(|(t, p)| beta * t + (1.0 - beta) * p).collect();
    let (loss, logit_grad) = elr_term(probs, &target, lambda, batch_len);
    ElrTerms { target, loss, logit_grad }
}

/// ELR loss for a fixed target and its gradient with respect to the logits.
pub fn elr_term(probs: &[f64], target: &[f64], lambda: f64, batch_len: usize) -> (f64, Vec<f64>) {
    let inner: f64 = probs.iter().zip(target).map(|(p, t)| p * t).sum();
    let clamped = inner.min(ELR_CLAMP);
    let scale = lambda / batch_len as f64;
    let loss = scale * (1.0 - clamped).ln();
    // d<p,t>/dz_k = p_k (t_k - <p,t>); zero inside the clamp.
    let logit_grad = if inner < ELR_CLAMP && lambda != 0.0 {
        probs
            .iter()
            .zip(target)
            .map(|(p, t)| -scale * p * (t - inner) / (1.0 - inner))
            .collect()
    } else {
        vec![0.0; probs.len()]
    };
    (loss, logit_grad)
}

/// Updates targets in place while contributing the ELR term.
struct ElrPenalty<'a> {
    state: &'a mut ElrState,
    beta: f64,
    lambda: f64,
    batch_len: usize,
}

impl LogitPenalty for ElrPenalty<'_> {
    fn apply(&mut self, _slot: usize, id: SampleId, probs: &[f64]) -> (f64, Vec<f64>) {
        let prev = self.state.targets.entry(id).or_insert_with(|| vec![0.0; probs.len()]);
        let terms = elr_step_terms(probs, prev, self.beta, self.lambda, self.batch_len);
        *prev = terms.target;
        (terms.loss, terms.logit_grad)
    }
}

/// Running sum of parameter checkpoints.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SwadState {
    sum: Option<ModelParams>,
    count: usize,
}

impl SwadState {
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn accumulate(&mut self, params: &ModelParams) {
        match &mut self.sum {
            Some(sum) => sum.add_scaled(params, 1.0),
            None => self.sum = Some(params.clone()),
        }
        self.count += 1;
    }

    /// Coordinate-wise mean of the accumulated checkpoints.
    pub fn finalize(&self) -> Result<ModelParams> {
        let sum = self
            .sum
            .as_ref()
            .ok_or_else(|| Error::EmptyGroup("no checkpoints accumulated for averaging".into()))?;
        let n = self.count as f64;
        let flat: Vec<f64> = sum.to_flat().iter().map(|x| x / n).collect();
        ModelParams::from_flat(sum.dims(), &flat)
    }
}

/// Per-sample state captured before relabeling.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub losses: BTreeMap<SampleId, f64>,
    pub probs: BTreeMap<SampleId, Vec<f64>>,
    pub features: BTreeMap<SampleId, FeatureVector>,
}

impl Snapshot {
    pub fn capture(params: &ModelParams, dataset: &Dataset) -> Result<Self> {
        let mut snap = Snapshot {
            losses: BTreeMap::new(),
            probs: BTreeMap::new(),
            features: BTreeMap::new(),
        };
        for s in dataset.samples() {
            let r = crate::model::forward(params, &s.features, s.noisy_label)?;
            if !r.loss.is_finite() {
                return Err(Error::NumericOverflow { sample: s.id });
            }
            snap.losses.insert(s.id, r.loss);
            snap.probs.insert(s.id, r.probs);
            snap.features.insert(s.id, r.embedding);
        }
        Ok(snap)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub step: usize,
    pub gmm: Option<GmmParams>,
    /// Why relabeling was skipped, when it was.
    pub fallback: Option<String>,
    pub split: LossSplit,
    pub proxies: Option<ProxyTable>,
    pub outcome: RelabelOutcome,
    pub snapshot: Snapshot,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    /// SWAD average when averaging was enabled, else the last iterate.
    pub params: ModelParams,
    pub loss_history: Vec<f64>,
    pub refinement: Option<Refinement>,
    /// Labels after refinement, keyed by sample id.
    pub refined_labels: Option<BTreeMap<SampleId, usize>>,
    pub swad_checkpoints: usize,
}

/// Resumable training state; one run is one `Trainer`.
pub struct Trainer<'a> {
    config: &'a TrainConfig,
    params: ModelParams,
    rng: Rng,
    step: usize,
    order: Vec<usize>,
    cursor: usize,
    elr: ElrState,
    swad: SwadState,
    loss_history: Vec<f64>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: &'a TrainConfig, dataset: &Dataset, params: ModelParams) -> Result<Self> {
        config.validate()?;
        if dataset.is_empty() {
            return Err(Error::InvalidSpec("cannot train on an empty dataset".into()));
        }
        if params.input_dim() != dataset.dim() || params.num_classes() != dataset.num_classes() {
            return Err(Error::InvalidSpec("model shape does not match dataset".into()));
        }
        Ok(Self {
            config,
            params,
            rng: Rng::new(config.seed).child(0xBA7C),
            step: 0,
            order: (0..dataset.len()).collect(),
            cursor: dataset.len(),
            elr: ElrState::default(),
            swad: SwadState::default(),
            loss_history: Vec::new(),
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn elr_state(&self) -> &ElrState {
        &self.elr
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let n = self.order.len();
        let size = size.min(n);
        let mut batch = Vec::with_capacity(size);
        while batch.len() < size {
            if self.cursor >= n {
                self.rng.shuffle(&mut self.order);
                self.cursor = 0;
            }
            batch.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        batch
    }

    /// Runs SGD until `end_step` steps have been taken in total. `dataset`
    /// must hold the same samples, in the same order, on every call.
    pub fn run_until(&mut self, dataset: &Dataset, end_step: usize) -> Result<()> {
        assert_eq!(dataset.len(), self.order.len(), "dataset changed size between phases");
        let swad_window = self.config.resolved_swad_window();
        let samples = dataset.samples();
        while self.step < end_step {
            let idx = self.next_batch(self.config.batch_size);
            let batch: Vec<BatchItem<'_>> = idx
                .iter()
                .map(|&i| BatchItem {
                    id: samples[i].id,
                    x: samples[i].features.as_slice(),
                    label: samples[i].noisy_label,
                })
                .collect();
            let step_no = self.step + 1;
            let result = match self.config.regularizer {
                Regularizer::Erm => batch_gradients(&self.params, &batch, &mut crate::model::NoPenalty),
                Regularizer::ErmElr => {
                    let mut penalty = ElrPenalty {
                        state: &mut self.elr,
                        beta: self.config.elr_beta,
                        lambda: self.config.elr_lambda,
                        batch_len: batch.len(),
                    };
                    batch_gradients(&self.params, &batch, &mut penalty)
                }
            };
            let g = match result {
                Ok(g) => g,
                Err(Error::NumericOverflow { .. }) => {
                    return Err(Error::Diverged { step: step_no, loss: f64::NAN })
                }
                Err(e) => return Err(e),
            };
            if !g.total_loss.is_finite() || g.total_loss > DIVERGENCE_LOSS {
                return Err(Error::Diverged { step: step_no, loss: g.total_loss });
            }
            self.params.add_scaled(&g.grads, -self.config.learning_rate);
            if !self.params.is_finite() {
                return Err(Error::Diverged { step: step_no, loss: g.total_loss });
            }
            self.loss_history.push(g.total_loss);
            self.step = step_no;
            if self.config.swad && (swad_window.0..=swad_window.1).contains(&step_no) {
                self.swad.accumulate(&self.params);
            }
        }
        Ok(())
    }

    pub fn finish(self, refinement: Option<Refinement>) -> Result<RunArtifacts> {
        let params = if self.config.swad && self.swad.count() > 0 {
            self.swad.finalize()?
        } else {
            self.params
        };
        let refined_labels = refinement.as_ref().map(|r| r.outcome.assignment());
        Ok(RunArtifacts {
            params,
            loss_history: self.loss_history,
            refinement,
            refined_labels,
            swad_checkpoints: self.swad.count(),
        })
    }
}

/// Plain training on the dataset's noisy labels.
pub fn train(config: &TrainConfig, dataset: &Dataset, initial: ModelParams) -> Result<RunArtifacts> {
    let mut trainer = Trainer::new(config, dataset, initial)?;
    trainer.run_until(dataset, config.total_steps)?;
    trainer.finish(None)
}

/// Split, build proxies and relabel from a fixed snapshot. Each extra pass
/// re-splits using the snapshot's predictions scored against the labels
/// produced by the previous pass.
pub fn refine_labels(snapshot: Snapshot, dataset: &Dataset, config: &TrainConfig, step: usize) -> Result<Refinement> {
    let mut current = dataset.clone();
    let mut losses = snapshot.losses.clone();
    let mut last: Option<(Option<GmmParams>, LossSplit, Option<ProxyTable>, RelabelOutcome)> = None;
    let mut fallback = None;

    for pass in 0..config.refine_passes {
        if pass > 0 {
            losses = current
                .samples()
                .iter()
                .map(|s| (s.id, cross_entropy(&snapshot.probs[&s.id], s.noisy_label)))
                .collect();
        }
        let gmm = match fit_gmm(&losses, &config.gmm) {
            Ok(g) => g,
            Err(Error::DegenerateFit(why)) => {
                fallback = Some(format!("degenerate loss mixture: {why}"));
                break;
            }
            Err(e) => return Err(e),
        };
        let loss_split = split(&losses, &gmm, config.gmm.threshold);
        if loss_split.low_ids.is_empty() {
            fallback = Some("no low-loss samples".into());
            break;
        }
        let proxies = build_proxies(&snapshot.features, &current, &loss_split.low_ids, config.normalize_proxies)?;
        let mut outcome = relabel(&snapshot.features, &current, &loss_split, &proxies)?;
        current = current.relabeled(&outcome.assignment())?;
        if pass > 0 {
            // Summaries compare against the original labels.
            if let Some((_, _, _, first)) = &last {
                outcome.summary.label_accuracy_before = first.summary.label_accuracy_before;
            }
            for r in &mut outcome.records {
                r.old_label = dataset.get(r.id).unwrap().noisy_label;
            }
        }
        last = Some((Some(gmm), loss_split, Some(proxies), outcome));
    }

    let (gmm, loss_split, proxies, outcome) = match last {
        Some(l) => l,
        None => (
            None,
            LossSplit::all_low(dataset.ids()),
            None,
            RelabelOutcome::unchanged(dataset),
        ),
    };
    Ok(Refinement {
        step,
        gmm,
        fallback,
        split: loss_split,
        proxies,
        outcome,
        snapshot,
    })
}

fn gap_peak_step(trainer: &mut Trainer<'_>, dataset: &Dataset, config: &TrainConfig, probe: usize) -> Result<()> {
    let mut best_gap = f64::NEG_INFINITY;
    while trainer.step() < config.refine_step {
        let next = (trainer.step() + probe).min(config.refine_step);
        trainer.run_until(dataset, next)?;
        if next == config.refine_step {
            break;
        }
        let snap = Snapshot::capture(trainer.params(), dataset)?;
        let Ok(gmm) = fit_gmm(&snap.losses, &config.gmm) else { continue };
        let gap = gmm.means[1] - gmm.means[0];
        if gap < best_gap {
            break;
        }
        best_gap = gap;
    }
    Ok(())
}

/// Warmup to the refinement step, relabel once from the snapshot, then
/// resume training on the refined labels.
pub fn run_nag_pipeline(config: &TrainConfig, dataset: &Dataset) -> Result<RunArtifacts> {
    config.validate_pipeline()?;
    let dims = config.layer_dims(dataset.dim(), dataset.num_classes());
    let initial = init_params(&dims, Rng::new(config.seed).child(0x1417).seed())?;
    let mut trainer = Trainer::new(config, dataset, initial)?;

    match config.refine_trigger {
        RefineTrigger::Fixed => trainer.run_until(dataset, config.refine_step)?,
        RefineTrigger::GapPeak { probe_interval } => gap_peak_step(&mut trainer, dataset, config, probe_interval)?,
    }
    let snapshot = Snapshot::capture(trainer.params(), dataset)?;
    let refinement = refine_labels(snapshot, dataset, config, trainer.step())?;
    let refined = dataset.relabeled(&refinement.outcome.assignment())?;

    trainer.run_until(&refined, config.total_steps)?;
    trainer.finish(Some(refinement))
}

/// `train` with the model initialized from `config.seed`.
pub fn train_from_seed(config: &TrainConfig, dataset: &Dataset) -> Result<RunArtifacts> {
    let dims = config.layer_dims(dataset.dim(), dataset.num_classes());
    let initial = init_params(&dims, Rng::new(config.seed).child(0x1417).seed())?;
    train(config, dataset, initial)
}

/// Ids of the low-loss set in a refinement, or every id when none ran.
pub fn low_loss_ids(artifacts: &RunArtifacts, dataset: &Dataset) -> BTreeSet<SampleId> {
    match &artifacts.refinement {
        Some(r) => r.split.low_ids.clone(),
        None => dataset.ids().collect(),
    }
}
