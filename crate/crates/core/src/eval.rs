//! Leave-one-domain-out evaluation, noise sweeps, domain-balance
//! diagnostics and report emission.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{generate, inject_pairwise_noise, Dataset, DomainSpec, NoiseSpec};
use crate::loss_split::GmmParams;
use crate::model::accuracy;
use crate::numerics::{derive_seed, mean, std_dev, Rng};
use crate::relabel::{label_accuracy, separability_rate};
use crate::trainer::{low_loss_ids, run_nag_pipeline, train_from_seed, Regularizer, RunArtifacts, TrainConfig};
use crate::{Error, Result, SampleId};

pub const REPORT_FORMAT_VERSION: u32 = 1;

/// Marker written in tabular output for metrics that cannot be computed.
pub const UNAVAILABLE: &str = "unavailable";

/// A training recipe: ERM with optional ELR, label refinement and weight
/// averaging. Written as `erm`, `erm+elr`, `erm+dl4nd+swad`, ...
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Method {
    pub elr: bool,
    pub dl4nd: bool,
    pub swad: bool,
}

impl Method {
    pub const ERM: Method = Method {
        elr: false,
        dl4nd: false,
        swad: false,
    };
    pub const DL4ND: Method = Method {
        elr: false,
        dl4nd: true,
        swad: false,
    };

    /// `base` with this method's regularizer and averaging switched in.
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            regularizer: if self.elr { Regularizer::ErmElr } else { Regularizer::Erm },
            swad: self.swad,
            ..base.clone()
        }
    }

    pub fn run(&self, base: &TrainConfig, dataset: &Dataset) -> Result<RunArtifacts> {
        let config = self.apply(base);
        if self.dl4nd {
            run_nag_pipeline(&config, dataset)
        } else {
            train_from_seed(&config, dataset)
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("erm")?;
        for (on, tag) in [(self.elr, "elr"), (self.dl4nd, "dl4nd"), (self.swad, "swad")] {
            if on {
                write!(f, "+{tag}")?;
            }
        }
        Ok(())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let mut parts = s.trim().split('+').map(str::trim);
        if parts.next() != Some("erm") {
            return Err(format!("method `{s}` must start with `erm`"));
        }
        let mut m = Method::ERM;
        for p in parts {
            let flag = match p {
                "elr" => &mut m.elr,
                "dl4nd" => &mut m.dl4nd,
                "swad" => &mut m.swad,
                other => return Err(format!("unknown method component `{other}` in `{s}`")),
            };
            if *flag {
                return Err(format!("duplicate component `{p}` in `{s}`"));
            }
            *flag = true;
        }
        Ok(m)
    }
}

impl TryFrom<String> for Method {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        s.parse()
    }
}

impl From<Method> for String {
    fn from(m: Method) -> String {
        m.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeldOut {
    All,
    Domains(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub domain: DomainSpec,
    /// Pairs and seed for noise injection; `ratio` is used by
    /// [`leave_one_out`], `ratios` by [`noise_sweep`].
    pub noise: NoiseSpec,
    pub ratios: Vec<f64>,
    pub train: TrainConfig,
    pub methods: Vec<Method>,
    pub held_out: HeldOut,
    /// One repetition per seed. Data, noise and training seeds of a
    /// repetition are derived from it together with the section seeds.
    pub seeds: Vec<u64>,
    /// Fraction of each training domain held out for ID accuracy.
    pub id_fraction: f64,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            domain: DomainSpec::default(),
            noise: NoiseSpec::default(),
            ratios: vec![0.0, 0.2, 0.4],
            train: TrainConfig::default(),
            methods: vec![Method::ERM, Method::DL4ND],
            held_out: HeldOut::All,
            seeds: vec![0, 1, 2, 3, 4],
            id_fraction: 0.2,
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        self.domain.validate()?;
        self.noise.validate(self.domain.num_classes)?;
        self.train.validate_pipeline()?;
        if self.seeds.is_empty() {
            return Err(Error::config("eval.seeds", "at least one seed is required"));
        }
        if self.methods.is_empty() {
            return Err(Error::config("eval.methods", "at least one method is required"));
        }
        if !(self.id_fraction > 0.0 && self.id_fraction < 1.0) {
            return Err(Error::config("eval.id_fraction", "must lie in (0, 1)"));
        }
        if let HeldOut::Domains(d) = &self.held_out {
            if d.is_empty() {
                return Err(Error::config("eval.held_out", "empty domain list"));
            }
            if let Some(bad) = d.iter().find(|&&k| k >= self.domain.num_domains) {
                return Err(Error::config(
                    "eval.held_out",
                    format!("domain {bad} out of range for {} domains", self.domain.num_domains),
                ));
            }
        }
        Ok(())
    }

    fn folds(&self) -> Vec<usize> {
        match &self.held_out {
            HeldOut::All => (0..self.domain.num_domains).collect(),
            HeldOut::Domains(d) => d.clone(),
        }
    }

    pub fn data_seed(&self, seed: u64) -> u64 {
        derive_seed(self.domain.seed, seed)
    }

    pub fn noise_seed(&self, seed: u64) -> u64 {
        derive_seed(self.noise.seed, seed)
    }

    /// Shared by every method and ratio so comparisons are paired.
    pub fn train_seed(&self, seed: u64, fold: usize) -> u64 {
        derive_seed(derive_seed(self.train.seed, seed), fold as u64)
    }

    /// Clean and noisy datasets of one repetition.
    pub fn datasets(&self, seed: u64, ratio: f64) -> Result<(Dataset, Dataset)> {
        let clean = generate(&DomainSpec {
            seed: self.data_seed(seed),
            ..self.domain.clone()
        })?;
        let noisy = inject_pairwise_noise(
            &clean,
            &NoiseSpec {
                ratio,
                seed: self.noise_seed(seed),
                ..self.noise.clone()
            },
        )?;
        Ok((clean, noisy))
    }
}

/// Ids held out from each domain for ID testing: a seeded per-domain
/// `fraction` of that domain's samples.
pub fn id_test_ids(dataset: &Dataset, fraction: f64, seed: u64) -> BTreeSet<SampleId> {
    let mut out = BTreeSet::new();
    for d in 0..dataset.num_domains() {
        let mut ids: Vec<SampleId> = dataset.samples().iter().filter(|s| s.domain == d).map(|s| s.id).collect();
        Rng::new(derive_seed(seed, d as u64)).shuffle(&mut ids);
        let take = (fraction * ids.len() as f64).round() as usize;
        out.extend(ids.into_iter().take(take));
    }
    out
}

/// Train, ID-test and OOD-test sets for holding out `domain`.
pub struct FoldData {
    pub train: Dataset,
    pub id_test: Dataset,
    pub ood_test: Dataset,
}

pub fn fold_data(dataset: &Dataset, domain: usize, id_ids: &BTreeSet<SampleId>) -> Result<FoldData> {
    let train = dataset.filter(|s| s.domain != domain && !id_ids.contains(&s.id));
    if let Some(s) = train.samples().iter().find(|s| s.domain == domain) {
        return Err(Error::Protocol(format!("sample {} of held-out domain {domain} in training set", s.id)));
    }
    Ok(FoldData {
        train,
        id_test: dataset.filter(|s| s.domain != domain && id_ids.contains(&s.id)),
        ood_test: dataset.filter(|s| s.domain == domain),
    })
}

/// Per-class share of selected samples in each domain, next to the same
/// table for all samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainBalance {
    /// `[class][domain]`; `None` for classes with nothing selected.
    pub selected: Vec<Option<Vec<f64>>>,
    pub baseline: Vec<Option<Vec<f64>>>,
    /// Mean over classes present in both tables of the L1 distance between
    /// the two rows.
    pub l1_gap: f64,
}

fn proportions(dataset: &Dataset, keep: impl Fn(SampleId) -> bool) -> Vec<Option<Vec<f64>>> {
    let (c, m) = (dataset.num_classes(), dataset.num_domains());
    let mut counts = vec![vec![0usize; m]; c];
    for s in dataset.samples().iter().filter(|s| keep(s.id)) {
        counts[s.noisy_label][s.domain] += 1;
    }
    counts
        .into_iter()
        .map(|row| {
            let total: usize = row.iter().sum();
            (total > 0).then(|| row.iter().map(|&n| n as f64 / total as f64).collect())
        })
        .collect()
}

/// Domain proportions per (noisy) class of `selected` within `dataset`.
pub fn domain_balance(selected: &BTreeSet<SampleId>, dataset: &Dataset) -> Result<DomainBalance> {
    if let Some(id) = selected.iter().find(|&&id| dataset.get(id).is_none()) {
        return Err(Error::InvalidSpec(format!("selected id {id} not in dataset")));
    }
    let sel = proportions(dataset, |id| selected.contains(&id));
    let base = proportions(dataset, |_| true);
    let gaps: Vec<f64> = sel
        .iter()
        .zip(&base)
        .filter_map(|(a, b)| Some(a.as_ref()?.iter().zip(b.as_ref()?).map(|(x, y)| (x - y).abs()).sum()))
        .collect();
    Ok(DomainBalance {
        selected: sel,
        baseline: base,
        l1_gap: if gaps.is_empty() { 0.0 } else { mean(&gaps) },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmSummary {
    pub means: [f64; 2],
    pub variances: [f64; 2],
    pub weights: [f64; 2],
    pub iterations: usize,
}

impl From<&GmmParams> for GmmSummary {
    fn from(g: &GmmParams) -> Self {
        Self {
            means: g.means,
            variances: g.variances,
            weights: g.weights,
            iterations: g.iterations_used,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub method: Method,
    pub noise_ratio: f64,
    pub seed: u64,
    pub held_out_domain: usize,
    pub id_accuracy: Option<f64>,
    pub ood_accuracy: Option<f64>,
    pub label_accuracy_before: Option<f64>,
    pub label_accuracy_after: Option<f64>,
    pub relabeled: usize,
    pub abstained: usize,
    pub gmm: Option<GmmSummary>,
    pub separability_rate: Option<f64>,
    pub domain_balance: Option<DomainBalance>,
    pub train_checksum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricStats {
    /// Mean over seeds of the per-seed fold means.
    pub mean: f64,
    /// Standard deviation of the per-seed fold means.
    pub std_seeds: f64,
    /// Mean over seeds of the within-seed standard deviation across folds.
    pub std_folds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: Method,
    pub noise_ratio: f64,
    pub id_accuracy: Option<MetricStats>,
    pub ood_accuracy: Option<MetricStats>,
    pub label_accuracy_before: Option<MetricStats>,
    pub label_accuracy_after: Option<MetricStats>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportKind {
    LeaveOneOut,
    NoiseSweep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub format_version: u32,
    pub kind: ReportKind,
    pub config: ExperimentSpec,
    pub folds: Vec<FoldResult>,
    pub aggregates: Vec<Aggregate>,
}

impl Report {
    pub fn new(kind: ReportKind, config: ExperimentSpec, folds: Vec<FoldResult>) -> Self {
        let aggregates = aggregate(&folds);
        Self {
            format_version: REPORT_FORMAT_VERSION,
            kind,
            config,
            folds,
            aggregates,
        }
    }

    pub fn aggregate_for(&self, method: Method, ratio: f64) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.method == method && a.noise_ratio == ratio)
    }

    /// Per-seed fold means of one metric for one (method, ratio) group,
    /// ordered by seed.
    pub fn seed_means(&self, method: Method, ratio: f64, metric: fn(&FoldResult) -> Option<f64>) -> Vec<(u64, f64)> {
        let mut by_seed: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
        for f in self.folds.iter().filter(|f| f.method == method && f.noise_ratio == ratio) {
            if let Some(v) = metric(f) {
                by_seed.entry(f.seed).or_default().push(v);
            }
        }
        by_seed.into_iter().map(|(s, v)| (s, mean(&v))).collect()
    }
}

fn metric_stats(folds: &[&FoldResult], metric: fn(&FoldResult) -> Option<f64>) -> Option<MetricStats> {
    let mut by_seed: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for f in folds {
        by_seed.entry(f.seed).or_default().push(metric(f)?);
    }
    let seed_means: Vec<f64> = by_seed.values().map(|v| mean(v)).collect();
    let fold_stds: Vec<f64> = by_seed.values().map(|v| std_dev(v)).collect();
    Some(MetricStats {
        mean: mean(&seed_means),
        std_seeds: std_dev(&seed_means),
        std_folds: mean(&fold_stds),
    })
}

/// Groups by (method, ratio) in order of first appearance.
pub fn aggregate(folds: &[FoldResult]) -> Vec<Aggregate> {
    let mut keys: Vec<(Method, f64)> = Vec::new();
    for f in folds {
        if !keys.contains(&(f.method, f.noise_ratio)) {
            keys.push((f.method, f.noise_ratio));
        }
    }
    keys.into_iter()
        .map(|(method, ratio)| {
            let group: Vec<&FoldResult> = folds
                .iter()
                .filter(|f| f.method == method && f.noise_ratio == ratio)
                .collect();
            Aggregate {
                method,
                noise_ratio: ratio,
                id_accuracy: metric_stats(&group, |f| f.id_accuracy),
                ood_accuracy: metric_stats(&group, |f| f.ood_accuracy),
                label_accuracy_before: metric_stats(&group, |f| f.label_accuracy_before),
                label_accuracy_after: metric_stats(&group, |f| f.label_accuracy_after),
            }
        })
        .collect()
}

fn optional(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::MetricUnavailable(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Runs one method on one fold and collects its metrics.
pub fn evaluate_fold(
    spec: &ExperimentSpec,
    method: Method,
    noisy: &Dataset,
    ratio: f64,
    seed: u64,
    domain: usize,
) -> Result<FoldResult> {
    let id_ids = id_test_ids(noisy, spec.id_fraction, derive_seed(spec.data_seed(seed), 0x1D));
    let fold = fold_data(noisy, domain, &id_ids)?;
    let base = TrainConfig {
        seed: spec.train_seed(seed, domain),
        ..spec.train.clone()
    };
    let run = method.run(&base, &fold.train)?;

    let before = optional(label_accuracy(&fold.train.noisy_labels(), &fold.train))?;
    let (after, relabeled, abstained, gmm, sep, balance) = match &run.refinement {
        Some(r) => {
            let sep = match &r.proxies {
                Some(p) => optional(separability_rate(&r.snapshot.features, &fold.train, p, true))?,
                None => None,
            };
            let balance = domain_balance(&low_loss_ids(&run, &fold.train), &fold.train)?;
            (
                r.outcome.summary.label_accuracy_after,
                r.outcome.summary.relabeled,
                r.outcome.summary.abstained,
                r.gmm.as_ref().map(GmmSummary::from),
                sep,
                Some(balance),
            )
        }
        None => (before, 0, 0, None, None, None),
    };
    Ok(FoldResult {
        method,
        noise_ratio: ratio,
        seed,
        held_out_domain: domain,
        id_accuracy: optional(accuracy(&run.params, &fold.id_test))?,
        ood_accuracy: optional(accuracy(&run.params, &fold.ood_test))?,
        label_accuracy_before: before,
        label_accuracy_after: after,
        relabeled,
        abstained,
        gmm,
        separability_rate: sep,
        domain_balance: balance,
        train_checksum: fold.train.checksum(),
    })
}

fn run_grid(spec: &ExperimentSpec, ratios: &[f64]) -> Result<Vec<FoldResult>> {
    spec.validate()?;
    if spec.domain.num_domains < 2 {
        return Err(Error::Protocol("leave-one-domain-out needs at least two domains".into()));
    }
    let mut data = BTreeMap::new();
    for (ri, &ratio) in ratios.iter().enumerate() {
        for &seed in &spec.seeds {
            data.insert((ri, seed), spec.datasets(seed, ratio)?.1);
        }
    }
    let mut jobs = Vec::new();
    for (ri, &ratio) in ratios.iter().enumerate() {
        for &method in &spec.methods {
            for &seed in &spec.seeds {
                for domain in spec.folds() {
                    jobs.push((ri, ratio, method, seed, domain));
                }
            }
        }
    }
    jobs.par_iter()
        .map(|&(ri, ratio, method, seed, domain)| evaluate_fold(spec, method, &data[&(ri, seed)], ratio, seed, domain))
        .collect()
}

/// Every method on every held-out domain and seed at `spec.noise.ratio`.
pub fn leave_one_out(spec: &ExperimentSpec) -> Result<Report> {
    let folds = run_grid(spec, &[spec.noise.ratio])?;
    Ok(Report::new(ReportKind::LeaveOneOut, spec.clone(), folds))
}

/// [`leave_one_out`] at every ratio in `spec.ratios`, with the same seeds
/// (and so the same clean data and training seeds) at each ratio.
pub fn noise_sweep(spec: &ExperimentSpec) -> Result<Report> {
    if spec.ratios.is_empty() {
        return Err(Error::config("eval.ratios", "at least one ratio is required"));
    }
    if let Some(r) = spec.ratios.iter().find(|r| !(0.0..0.5).contains(*r)) {
        return Err(Error::config("eval.ratios", format!("ratio {r} outside [0, 0.5)")));
    }
    let folds = run_grid(spec, &spec.ratios)?;
    Ok(Report::new(ReportKind::NoiseSweep, spec.clone(), folds))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Structured,
    Tabular,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "structured" | "json" => Ok(ReportFormat::Structured),
            "tabular" | "csv" => Ok(ReportFormat::Tabular),
            other => Err(format!("unknown report format `{other}` (structured|tabular)")),
        }
    }
}

/// Column order of the tabular report.
pub const TABULAR_COLUMNS: [&str; 16] = [
    "method",
    "noise_ratio",
    "seed",
    "held_out_domain",
    "id_accuracy",
    "ood_accuracy",
    "label_accuracy_before",
    "label_accuracy_after",
    "relabeled",
    "abstained",
    "gmm_mean_low",
    "gmm_mean_high",
    "gmm_weight_low",
    "separability_rate",
    "domain_balance_l1_gap",
    "train_checksum",
];

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| UNAVAILABLE.to_string(), |x| format!("{x:?}"))
}

pub fn to_tabular(report: &Report) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(TABULAR_COLUMNS).unwrap();
    for f in &report.folds {
        w.write_record([
            f.method.to_string(),
            format!("{:?}", f.noise_ratio),
            f.seed.to_string(),
            f.held_out_domain.to_string(),
            cell(f.id_accuracy),
            cell(f.ood_accuracy),
            cell(f.label_accuracy_before),
            cell(f.label_accuracy_after),
            f.relabeled.to_string(),
            f.abstained.to_string(),
            cell(f.gmm.as_ref().map(|g| g.means[0])),
            cell(f.gmm.as_ref().map(|g| g.means[1])),
            cell(f.gmm.as_ref().map(|g| g.weights[0])),
            cell(f.separability_rate),
            cell(f.domain_balance.as_ref().map(|b| b.l1_gap)),
            f.train_checksum.clone(),
        ])
        .unwrap();
    }
    String::from_utf8(w.into_inner().unwrap()).unwrap()
}

pub fn to_structured(report: &Report) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

pub fn from_structured(text: &str) -> Result<Report> {
    serde_json::from_str(text).map_err(|e| Error::Parse {
        record: e.line(),
        message: e.to_string(),
    })
}

pub fn emit_report(report: &Report, path: &Path, format: ReportFormat) -> Result<()> {
    let text = match format {
        ReportFormat::Structured => to_structured(report),
        ReportFormat::Tabular => to_tabular(report),
    };
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
