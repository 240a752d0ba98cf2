//! Cross-domain noise detection and relabeling.
//!
//! Low-loss samples are grouped by (label, domain) and averaged into
//! proxies. A high-loss sample from domain `i` is compared against every
//! class's proxies from the *other* domains; the class with the smallest
//! mean cosine distance becomes its label. Proxies from the sample's own
//! domain never participate, so spurious within-domain similarity cannot
//! decide the label.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::loss_split::LossSplit;
use crate::numerics::{cosine_distance, group_mean, quantile_sorted, FeatureVector};
use crate::SampleId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proxy {
    pub mean: FeatureVector,
    pub count: usize,
}

/// Mean low-loss embedding per (class, domain) cell. Cells without any
/// low-loss member are absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyTable {
    pub num_classes: usize,
    pub num_domains: usize,
    cells: BTreeMap<(usize, usize), Proxy>,
}

impl ProxyTable {
    pub fn get(&self, class: usize, domain: usize) -> Option<&Proxy> {
        self.cells.get(&(class, domain))
    }

    pub fn cells(&self) -> impl Iterator<Item = (&(usize, usize), &Proxy)> {
        self.cells.iter()
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Replaces a cell's mean. Used by the own-domain exclusion checks.
    pub fn set_mean(&mut self, class: usize, domain: usize, mean: FeatureVector) {
        if let Some(p) = self.cells.get_mut(&(class, domain)) {
            p.mean = mean;
        }
    }
}

/// Builds proxies from the embeddings of `low_ids`, grouped by noisy label
/// and domain. With `normalize`, embeddings are scaled to unit length first.
pub fn build_proxies(
    features: &BTreeMap<SampleId, FeatureVector>,
    dataset: &Dataset,
    low_ids: &BTreeSet<SampleId>,
    normalize: bool,
) -> Result<ProxyTable> {
    if low_ids.is_empty() {
        return Err(Error::EmptyProxies);
    }
    let mut groups: BTreeMap<(usize, usize), Vec<FeatureVector>> = BTreeMap::new();
    for &id in low_ids {
        let s = dataset
            .get(id)
            .ok_or_else(|| Error::InvalidSpec(format!("low-loss id {id} not in dataset")))?;
        let f = features
            .get(&id)
            .ok_or_else(|| Error::InvalidSpec(format!("no embedding for sample {id}")))?;
        let f = if normalize { f.normalized()? } else { f.clone() };
        groups.entry((s.noisy_label, s.domain)).or_default().push(f);
    }
    let cells = groups
        .into_iter()
        .map(|(key, members)| {
            let mean = group_mean(&members)?;
            Ok((key, Proxy { mean, count: members.len() }))
        })
        .collect::<Result<_>>()?;
    Ok(ProxyTable {
        num_classes: dataset.num_classes(),
        num_domains: dataset.num_domains(),
        cells,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossDomainDistance {
    pub distance: f64,
    pub domains_used: usize,
}

/// Mean cosine distance from `embedding` to the class-`class` proxies of
/// every domain other than `own_domain`. `None` when no other domain has a
/// proxy for the class.
pub fn cross_domain_class_distance(
    embedding: &FeatureVector,
    own_domain: usize,
    class: usize,
    proxies: &ProxyTable,
) -> Result<Option<CrossDomainDistance>> {
    let mut sum = 0.0;
    let mut used = 0;
    for domain in (0..proxies.num_domains).filter(|&d| d != own_domain) {
        if let Some(p) = proxies.get(class, domain) {
            sum += cosine_distance(embedding, &p.mean)?;
            used += 1;
        }
    }
    Ok((used > 0).then(|| CrossDomainDistance {
        distance: sum / used as f64,
        domains_used: used,
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Kept,
    Relabeled,
    Abstained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelabelRecord {
    pub id: SampleId,
    pub old_label: usize,
    pub new_label: usize,
    /// Cross-domain distance per class (`None` where unavailable). Empty for
    /// low-loss samples, which are not evaluated.
    pub class_distances: Vec<Option<f64>>,
    pub domains_used: usize,
    pub decision: Decision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelabelSummary {
    pub label_accuracy_before: Option<f64>,
    pub label_accuracy_after: Option<f64>,
    pub relabeled: usize,
    pub abstained: usize,
    pub evaluated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelabelOutcome {
    pub records: Vec<RelabelRecord>,
    pub summary: RelabelSummary,
}

impl RelabelOutcome {
    /// New label per sample id.
    pub fn assignment(&self) -> BTreeMap<SampleId, usize> {
        self.records.iter().map(|r| (r.id, r.new_label)).collect()
    }

    /// Outcome for a pass that relabels nothing.
    pub fn unchanged(dataset: &Dataset) -> Self {
        let records: Vec<RelabelRecord> = dataset
            .samples()
            .iter()
            .map(|s| RelabelRecord {
                id: s.id,
                old_label: s.noisy_label,
                new_label: s.noisy_label,
                class_distances: Vec::new(),
                domains_used: 0,
                decision: Decision::Kept,
            })
            .collect();
        let acc = label_accuracy(&dataset.noisy_labels(), dataset).ok();
        Self {
            records,
            summary: RelabelSummary {
                label_accuracy_before: acc,
                label_accuracy_after: acc,
                relabeled: 0,
                abstained: 0,
                evaluated: 0,
            },
        }
    }
}

/// Keeps low-loss labels and moves each high-loss sample to the class with
/// the smallest cross-domain distance (ties to the lowest class index).
/// Samples with no cross-domain evidence for any class keep their label and
/// are marked abstained.
pub fn relabel(
    features: &BTreeMap<SampleId, FeatureVector>,
    dataset: &Dataset,
    split: &LossSplit,
    proxies: &ProxyTable,
) -> Result<RelabelOutcome> {
    let mut records = Vec::with_capacity(dataset.len());
    let (mut relabeled, mut abstained, mut evaluated) = (0, 0, 0);
    for s in dataset.samples() {
        if !split.high_ids.contains(&s.id) {
            records.push(RelabelRecord {
                id: s.id,
                old_label: s.noisy_label,
                new_label: s.noisy_label,
                class_distances: Vec::new(),
                domains_used: 0,
                decision: Decision::Kept,
            });
            continue;
        }
        evaluated += 1;
        let emb = features
            .get(&s.id)
            .ok_or_else(|| Error::InvalidSpec(format!("no embedding for sample {}", s.id)))?;
        let mut distances = Vec::with_capacity(dataset.num_classes());
        let mut best: Option<(usize, CrossDomainDistance)> = None;
        for class in 0..dataset.num_classes() {
            let d = cross_domain_class_distance(emb, s.domain, class, proxies)?;
            distances.push(d.map(|d| d.distance));
            if let Some(d) = d {
                if best.is_none_or(|(_, b)| d.distance < b.distance) {
                    best = Some((class, d));
                }
            }
        }
        let (new_label, domains_used, decision) = match best {
            None => {
                abstained += 1;
                (s.noisy_label, 0, Decision::Abstained)
            }
            Some((c, d)) if c != s.noisy_label => {
                relabeled += 1;
                (c, d.domains_used, Decision::Relabeled)
            }
            Some((c, d)) => (c, d.domains_used, Decision::Kept),
        };
        records.push(RelabelRecord {
            id: s.id,
            old_label: s.noisy_label,
            new_label,
            class_distances: distances,
            domains_used,
            decision,
        });
    }
    let mut outcome = RelabelOutcome {
        records,
        summary: RelabelSummary {
            label_accuracy_before: None,
            label_accuracy_after: None,
            relabeled,
            abstained,
            evaluated,
        },
    };
    if dataset.has_true_labels() {
        outcome.summary.label_accuracy_before = Some(label_accuracy(&dataset.noisy_labels(), dataset)?);
        outcome.summary.label_accuracy_after = Some(label_accuracy(&outcome.assignment(), dataset)?);
    }
    Ok(outcome)
}

/// Fraction of samples whose own class is strictly closer (cross-domain)
/// than every other class that has cross-domain proxies. Samples whose own
/// class has no cross-domain proxy count as not separable.
pub fn separability_rate(
    features: &BTreeMap<SampleId, FeatureVector>,
    dataset: &Dataset,
    proxies: &ProxyTable,
    use_true_labels: bool,
) -> Result<f64> {
    if proxies.is_empty() {
        return Err(Error::EmptyProxies);
    }
    if use_true_labels && !dataset.has_true_labels() {
        return Err(Error::MetricUnavailable("dataset has no true labels".into()));
    }
    if dataset.is_empty() {
        return Ok(0.0);
    }
    let mut ok = 0usize;
    for s in dataset.samples() {
        let label = if use_true_labels { s.true_label.unwrap() } else { s.noisy_label };
        let emb = features
            .get(&s.id)
            .ok_or_else(|| Error::InvalidSpec(format!("no embedding for sample {}", s.id)))?;
        let Some(own) = cross_domain_class_distance(emb, s.domain, label, proxies)? else {
            continue;
        };
        let mut separable = true;
        for other in (0..dataset.num_classes()).filter(|&c| c != label) {
            if let Some(d) = cross_domain_class_distance(emb, s.domain, other, proxies)? {
                if d.distance <= own.distance {
                    separable = false;
                    break;
                }
            }
        }
        if separable {
            ok += 1;
        }
    }
    Ok(ok as f64 / dataset.len() as f64)
}

/// Fraction of samples whose assigned label equals the true label.
pub fn label_accuracy(assignment: &BTreeMap<SampleId, usize>, dataset: &Dataset) -> Result<f64> {
    if !dataset.has_true_labels() {
        return Err(Error::MetricUnavailable("dataset has no true labels".into()));
    }
    if dataset.is_empty() {
        return Err(Error::MetricUnavailable("empty dataset".into()));
    }
    let correct = dataset
        .samples()
        .iter()
        .filter(|s| {
            let assigned = assignment.get(&s.id).copied().unwrap_or(s.noisy_label);
            Some(assigned) == s.true_label
        })
        .count();
    Ok(correct as f64 / dataset.len() as f64)
}

/// Which samples define the (class, domain) group means.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanSource {
    All,
    LowLossOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Some(Self {
            count: v.len(),
            min: v[0],
            q1: quantile_sorted(&v, 0.25),
            median: quantile_sorted(&v, 0.5),
            q3: quantile_sorted(&v, 0.75),
            max: v[v.len() - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    pub class: usize,
    pub domain: usize,
    /// Distances of the cell's members to the cell mean.
    pub summary: Summary,
}

/// Class-pair comparison in the style of a box plot: how far samples of
/// `class_a` sit from `class_b`'s same-domain group mean, versus from their
/// own class's group means in other domains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairStats {
    pub class_a: usize,
    pub class_b: usize,
    pub cross_class: Option<Summary>,
    pub cross_domain: Option<Summary>,
    /// `min(cross_class) < max(cross_domain)`.
    pub overlap: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceStats {
    pub mean_source: MeanSource,
    pub cells: Vec<CellStats>,
    pub pairs: Vec<PairStats>,
    /// Groups with no member under the chosen mean source.
    pub omitted_groups: Vec<(usize, usize)>,
}

/// Distance distributions relative to (noisy label, domain) group means.
/// With [`MeanSource::LowLossOnly`], means use only `low_ids`.
pub fn distance_stats(
    features: &BTreeMap<SampleId, FeatureVector>,
    dataset: &Dataset,
    mean_source: MeanSource,
    low_ids: Option<&BTreeSet<SampleId>>,
    pairs: &[(usize, usize)],
) -> Result<DistanceStats> {
    let (c, m) = (dataset.num_classes(), dataset.num_domains());
    let mut members: BTreeMap<(usize, usize), Vec<&FeatureVector>> = BTreeMap::new();
    for s in dataset.samples() {
        let include = match mean_source {
            MeanSource::All => true,
            MeanSource::LowLossOnly => low_ids
                .ok_or_else(|| Error::InvalidSpec("low-loss mean source needs low-loss ids".into()))?
                .contains(&s.id),
        };
        if include {
            let f = features
                .get(&s.id)
                .ok_or_else(|| Error::InvalidSpec(format!("no embedding for sample {}", s.id)))?;
            members.entry((s.noisy_label, s.domain)).or_default().push(f);
        }
    }
    let means: BTreeMap<(usize, usize), FeatureVector> = members
        .iter()
        .map(|(&k, v)| Ok((k, group_mean(v.iter().copied())?)))
        .collect::<Result<_>>()?;
    let present: BTreeSet<(usize, usize)> = dataset.samples().iter().map(|s| (s.noisy_label, s.domain)).collect();
    let omitted_groups: Vec<(usize, usize)> = present.iter().filter(|k| !means.contains_key(k)).copied().collect();

    // Zero-norm embeddings (or means) make cosine distance undefined; such
    // pairs are treated as coincident.
    let dist = |a: &FeatureVector, b: &FeatureVector| -> Result<f64> {
        match cosine_distance(a, b) {
            Ok(d) => Ok(d),
            Err(Error::DegenerateInput(_)) => Ok(0.0),
            Err(e) => Err(e),
        }
    };

    let mut cells = Vec::new();
    for class in 0..c {
        for domain in 0..m {
            let Some(mean) = means.get(&(class, domain)) else { continue };
            let d: Vec<f64> = dataset
                .samples()
                .iter()
                .filter(|s| s.noisy_label == class && s.domain == domain)
                .map(|s| dist(&features[&s.id], mean))
                .collect::<Result<_>>()?;
            if let Some(summary) = Summary::of(&d) {
                cells.push(CellStats { class, domain, summary });
            }
        }
    }

    let mut pair_stats = Vec::new();
    for &(a, b) in pairs {
        if a >= c || b >= c {
            return Err(Error::LabelOutOfRange { label: a.max(b), num_classes: c });
        }
        let mut cross_class = Vec::new();
        let mut cross_domain = Vec::new();
        for s in dataset.samples().iter().filter(|s| s.noisy_label == a) {
            let f = &features[&s.id];
            if let Some(mb) = means.get(&(b, s.domain)) {
                cross_class.push(dist(f, mb)?);
            }
            for k in (0..m).filter(|&k| k != s.domain) {
                if let Some(ma) = means.get(&(a, k)) {
                    cross_domain.push(dist(f, ma)?);
                }
            }
        }
        let cc = Summary::of(&cross_class);
        let cd = Summary::of(&cross_domain);
        let overlap = matches!((&cc, &cd), (Some(x), Some(y)) if x.min < y.max);
        pair_stats.push(PairStats {
            class_a: a,
            class_b: b,
            cross_class: cc,
            cross_domain: cd,
            overlap,
        });
    }

    Ok(DistanceStats {
        mean_source,
        cells,
        pairs: pair_stats,
        omitted_groups,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::Sample;

    fn fv(v: &[f64]) -> FeatureVector {
        FeatureVector::new(v.to_vec()).unwrap()
    }

    fn sample(id: SampleId, domain: usize, label: usize, truth: usize, f: &[f64]) -> Sample {
        Sample {
            id,
            features: fv(f),
            domain,
            noisy_label: label,
            true_label: Some(truth),
        }
    }

    fn feats(ds: &Dataset) -> BTreeMap<SampleId, FeatureVector> {
        ds.samples().iter().map(|s| (s.id, s.features.clone())).collect()
    }

    fn split_of(ds: &Dataset, high: &[SampleId]) -> LossSplit {
        let high_ids: BTreeSet<SampleId> = high.iter().copied().collect();
        LossSplit {
            low_ids: ds.ids().filter(|i| !high_ids.contains(i)).collect(),
            high_ids,
            posterior: BTreeMap::new(),
        }
    }

    #[test]
    fn proxies_are_cell_means_and_absent_cells_stay_absent() {
        let ds = Dataset::new(
            vec![
                sample(0, 0, 0, 0, &[0.0, 0.0]),
                sample(1, 0, 0, 0, &[2.0, 2.0]),
                sample(2, 1, 1, 1, &[1.0, -1.0]),
                sample(3, 1, 0, 0, &[5.0, 5.0]),
            ],
            2,
            2,
            2,
        )
        .unwrap();
        let low: BTreeSet<SampleId> = [0, 1, 2].into();
        let table = build_proxies(&feats(&ds), &ds, &low, false).unwrap();
        assert_eq!(table.get(0, 0).unwrap().mean, fv(&[1.0, 1.0]));
        assert_eq!(table.get(0, 0).unwrap().count, 2);
        assert_eq!(table.get(1, 1).unwrap().mean, fv(&[1.0, -1.0]));
        assert!(table.get(0, 1).is_none());
        assert!(table.get(1, 0).is_none());
        assert!(matches!(
            build_proxies(&feats(&ds), &ds, &BTreeSet::new(), false).unwrap_err(),
            Error::EmptyProxies
        ));
    }

    #[test]
    fn cross_domain_distance_basics() {
        let ds = Dataset::new(
            vec![sample(0, 0, 0, 0, &[1.0, 0.0]), sample(1, 1, 0, 0, &[1.0, 1.0])],
            2,
            2,
            2,
        )
        .unwrap();
        let table = build_proxies(&feats(&ds), &ds, &[0, 1].into(), false).unwrap();
        let d = cross_domain_class_distance(&fv(&[1.0, 1.0]), 0, 0, &table).unwrap().unwrap();
        assert!(d.distance.abs() < 1e-15);
        assert_eq!(d.domains_used, 1);
        assert!(cross_domain_class_distance(&fv(&[1.0, 1.0]), 0, 1, &table).unwrap().is_none());
    }

    // Oracle: place unit vectors at prescribed angles, so cosine distances
    // are exactly 1 - cos(angle).
    #[test]
    fn cross_domain_distance_averages_domains() {
        let targets = [0.1, 0.2, 0.3];
        let mut samples = vec![sample(0, 0, 1, 1, &[1.0, 0.0])];
        for (k, &d) in targets.iter().enumerate() {
            let angle = (1.0f64 - d).acos();
            samples.push(sample(k as SampleId + 1, k + 1, 0, 0, &[angle.cos(), angle.sin()]));
        }
        let ds = Dataset::new(samples, 2, 4, 2).unwrap();
        let table = build_proxies(&feats(&ds), &ds, &[1, 2, 3].into(), false).unwrap();
        let d = cross_domain_class_distance(&fv(&[1.0, 0.0]), 0, 0, &table).unwrap().unwrap();
        assert_eq!(d.domains_used, 3);
        assert!((d.distance - 0.2).abs() < 1e-12);
    }

    fn three_domain_fixture() -> Dataset {
        // class c lives along axis c in every domain; sample 9 is a class-3
        // point mislabeled as 0.
        let mut samples = Vec::new();
        let mut id = 0;
        for domain in 0..3 {
            for class in 0..4 {
                let mut f = vec![0.05; 4];
                f[class] = 1.0 + 0.1 * domain as f64;
                samples.push(sample(id, domain, class, class, &f));
                id += 1;
            }
        }
        samples.push(sample(id, 0, 0, 3, &[0.0, 0.0, 0.1, 1.0]));
        Dataset::new(samples, 4, 3, 4).unwrap()
    }

    #[test]
    fn relabel_moves_high_loss_sample_to_nearest_cross_domain_class() {
        let ds = three_domain_fixture();
        let split = split_of(&ds, &[12]);
        let f = feats(&ds);
        let table = build_proxies(&f, &ds, &split.low_ids, false).unwrap();
        let out = relabel(&f, &ds, &split, &table).unwrap();
        let rec = out.records.iter().find(|r| r.id == 12).unwrap();
        assert_eq!(rec.decision, Decision::Relabeled);
        assert_eq!(rec.new_label, 3);
        assert_eq!(rec.domains_used, 2);
        assert_eq!(out.summary.relabeled, 1);
        assert_eq!(out.summary.label_accuracy_after, Some(1.0));
        assert!(out.records.iter().filter(|r| r.id != 12).all(|r| r.decision == Decision::Kept));
    }

    #[test]
    fn relabel_prefers_exact_proxy_match() {
        let ds = three_domain_fixture();
        let f = feats(&ds);
        let split = split_of(&ds, &[12]);
        let table = build_proxies(&f, &ds, &split.low_ids, false).unwrap();
        // Put the sample exactly on the class-3 proxies of domains 1 and 2
        // (which are parallel), so the class-3 distance is zero.
        let mut f2 = f.clone();
        f2.insert(12, table.get(3, 1).unwrap().mean.clone());
        let out = relabel(&f2, &ds, &split, &table).unwrap();
        assert_eq!(out.assignment()[&12], 3);
    }

    #[test]
    fn single_domain_abstains() {
        let ds = Dataset::new(
            vec![
                sample(0, 0, 0, 0, &[1.0, 0.0]),
                sample(1, 0, 1, 1, &[0.0, 1.0]),
                sample(2, 0, 0, 1, &[0.1, 1.0]),
            ],
            2,
            1,
            2,
        )
        .unwrap();
        let f = feats(&ds);
        let split = split_of(&ds, &[2]);
        let table = build_proxies(&f, &ds, &split.low_ids, false).unwrap();
        let out = relabel(&f, &ds, &split, &table).unwrap();
        assert_eq!(out.records[2].decision, Decision::Abstained);
        assert_eq!(out.records[2].new_label, 0);
        assert_eq!(out.summary.abstained, 1);
    }

    #[test]
    fn ties_go_to_lowest_class() {
        // Sample equidistant from class 0 and class 1 proxies in domain 1.
        let ds = Dataset::new(
            vec![
                sample(0, 1, 0, 0, &[1.0, 0.0]),
                sample(1, 1, 1, 1, &[0.0, 1.0]),
                sample(2, 0, 1, 0, &[1.0, 1.0]),
            ],
            2,
            2,
            2,
        )
        .unwrap();
        let f = feats(&ds);
        let split = split_of(&ds, &[2]);
        let table = build_proxies(&f, &ds, &split.low_ids, false).unwrap();
        let out = relabel(&f, &ds, &split, &table).unwrap();
        assert_eq!(out.records[2].new_label, 0);
        // Strict inequality: the tie does not count as separable.
        let one = ds.filter(|s| s.id == 2);
        assert_eq!(separability_rate(&f, &one, &table, false).unwrap(), 0.0);
    }

    #[test]
    fn separability_is_perfect_at_proxies() {
        let ds = three_domain_fixture().filter(|s| s.id != 12);
        let f = feats(&ds);
        let table = build_proxies(&f, &ds, &ds.ids().collect(), false).unwrap();
        assert_eq!(separability_rate(&f, &ds, &table, true).unwrap(), 1.0);
    }

    #[test]
    fn label_accuracy_counts() {
        let ds = three_domain_fixture();
        let truth: BTreeMap<SampleId, usize> = ds.samples().iter().map(|s| (s.id, s.true_label.unwrap())).collect();
        assert_eq!(label_accuracy(&truth, &ds).unwrap(), 1.0);
        let n = ds.len() as f64;
        assert!((label_accuracy(&ds.noisy_labels(), &ds).unwrap() - (n - 1.0) / n).abs() < 1e-15);

        let blind_samples = ds
            .samples()
            .iter()
            .map(|s| Sample { true_label: None, ..s.clone() })
            .collect();
        let blind = Dataset::new(blind_samples, 4, 3, 4).unwrap();
        assert!(matches!(label_accuracy(&truth, &blind).unwrap_err(), Error::MetricUnavailable(_)));
    }

    #[test]
    fn identical_embeddings_have_zero_distances_and_no_overlap() {
        let mut samples = Vec::new();
        for id in 0..8 {
            samples.push(sample(id, (id % 2) as usize, (id / 4) as usize, 0, &[1.0, 2.0]));
        }
        let ds = Dataset::new(samples, 2, 2, 2).unwrap();
        let st = distance_stats(&feats(&ds), &ds, MeanSource::All, None, &[(0, 1)]).unwrap();
        assert!(st.cells.iter().all(|c| c.summary.max.abs() < 1e-12));
        assert!(!st.pairs[0].overlap);
    }

    // Exhaustive oracle: compute every sample-to-mean distance directly.
    #[test]
    fn far_classes_do_not_overlap() {
        let mut samples = Vec::new();
        let mut id = 0;
        for domain in 0..3 {
            let tilt = 0.05 * domain as f64;
            for j in 0..5 {
                let eps = 0.01 * j as f64;
                samples.push(sample(id, domain, 0, 0, &[1.0, tilt + eps]));
                samples.push(sample(id + 1, domain, 1, 1, &[tilt + eps, -1.0]));
                id += 2;
            }
        }
        let ds = Dataset::new(samples, 2, 3, 2).unwrap();
        let f = feats(&ds);
        let st = distance_stats(&f, &ds, MeanSource::All, None, &[(0, 1)]).unwrap();
        let pair = &st.pairs[0];
        assert!(!pair.overlap);

        let mean_of = |c: usize, d: usize| {
            group_mean(ds.samples().iter().filter(|s| s.noisy_label == c && s.domain == d).map(|s| &s.features)).unwrap()
        };
        let mut min_cross = f64::INFINITY;
        let mut max_dom = 0.0f64;
        for s in ds.samples().iter().filter(|s| s.noisy_label == 0) {
            min_cross = min_cross.min(cosine_distance(&s.features, &mean_of(1, s.domain)).unwrap());
            for k in (0..3).filter(|&k| k != s.domain) {
                max_dom = max_dom.max(cosine_distance(&s.features, &mean_of(0, k)).unwrap());
            }
        }
        assert!((pair.cross_class.as_ref().unwrap().min - min_cross).abs() < 1e-12);
        assert!((pair.cross_domain.as_ref().unwrap().max - max_dom).abs() < 1e-12);
        assert!(min_cross > max_dom);
    }

    #[test]
    fn low_loss_mean_source_records_omitted_groups() {
        let ds = three_domain_fixture();
        let low: BTreeSet<SampleId> = ds.ids().filter(|&i| i != 0).collect();
        let st = distance_stats(&feats(&ds), &ds, MeanSource::LowLossOnly, Some(&low), &[]).unwrap();
        // cell (0, 0) still has sample 12 as a low-loss member; nothing omitted
        assert!(st.omitted_groups.is_empty());
        let low: BTreeSet<SampleId> = ds.ids().filter(|&i| i != 0 && i != 12).collect();
        let st = distance_stats(&feats(&ds), &ds, MeanSource::LowLossOnly, Some(&low), &[]).unwrap();
        assert_eq!(st.omitted_groups, vec![(0, 0)]);
    }

    #[test]
    fn summary_quartiles_are_ordered() {
        let s = Summary::of(&[3.0, 1.0, 2.0, 5.0, 4.0]).unwrap();
        assert_eq!((s.min, s.q1, s.median, s.q3, s.max), (1.0, 2.0, 3.0, 4.0, 5.0));
        assert!(Summary::of(&[]).is_none());
    }
}
