//! Synthetic multi-domain classification data and asymmetric label noise.
//!
//! Each class gets a prototype; each domain rotates every consecutive pair
//! of coordinates by its own angle and adds a translation. Samples are the
//! transformed prototype plus isotropic Gaussian jitter.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{FeatureVector, Rng};
use crate::SampleId;

/// Metadata flag set when a noise ratio of 0.5 or more was injected.
pub const FLAG_HIGH_NOISE_RATIO: &str = "high-noise-ratio";

const FORMAT_MAGIC: &str = "dl4nd-dataset";
const FORMAT_VERSION: &str = "v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: SampleId,
    pub features: FeatureVector,
    pub domain: usize,
    pub noisy_label: usize,
    /// Held out from training; `None` when the source file had no such column.
    pub true_label: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    num_classes: usize,
    num_domains: usize,
    dim: usize,
    flags: BTreeSet<String>,
}

impl Dataset {
    /// Validates and wraps `samples`. Either every sample carries a true
    /// label or none does.
    pub fn new(samples: Vec<Sample>, num_classes: usize, num_domains: usize, dim: usize) -> Result<Self> {
        if num_classes == 0 || num_domains == 0 || dim == 0 {
            return Err(Error::InvalidSpec("classes, domains and dim must be positive".into()));
        }
        let mut ids = BTreeSet::new();
        for (i, s) in samples.iter().enumerate() {
            let bad = |message: String| Error::Parse { record: i, message };
            if !ids.insert(s.id) {
                return Err(bad(format!("duplicate sample id {}", s.id)));
            }
            if s.domain >= num_domains {
                return Err(bad(format!("domain {} >= {num_domains}", s.domain)));
            }
            if s.noisy_label >= num_classes || s.true_label.is_some_and(|t| t >= num_classes) {
                return Err(bad(format!("label out of range for {num_classes} classes")));
            }
            if s.features.dim() != dim {
                return Err(bad(format!("feature dim {} != {dim}", s.features.dim())));
            }
        }
        if let Some(first) = samples.first() {
            let has = first.true_label.is_some();
            if samples.iter().any(|s| s.true_label.is_some() != has) {
                return Err(Error::InvalidSpec("true labels present on only some samples".into()));
            }
        }
        Ok(Self {
            samples,
            num_classes,
            num_domains,
            dim,
            flags: BTreeSet::new(),
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_domains(&self) -> usize {
        self.num_domains
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn flags(&self) -> &BTreeSet<String> {
        &self.flags
    }

    pub fn set_flag(&mut self, flag: &str) {
        self.flags.insert(flag.to_string());
    }

    /// False when the dataset was loaded without true labels; accuracy
    /// metrics are unavailable then.
    pub fn has_true_labels(&self) -> bool {
        self.samples.first().is_some_and(|s| s.true_label.is_some())
    }

    pub fn get(&self, id: SampleId) -> Option<&Sample> {
        // Ids are usually positional; fall back to a scan otherwise.
        match self.samples.get(id as usize) {
            Some(s) if s.id == id => Some(s),
            _ => self.samples.iter().find(|s| s.id == id),
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = SampleId> + '_ {
        self.samples.iter().map(|s| s.id)
    }

    /// Samples per domain (`n_i`).
    pub fn domain_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_domains];
        for s in &self.samples {
            counts[s.domain] += 1;
        }
        counts
    }

    /// Sample count per (noisy class, domain) cell, row-major by class.
    pub fn cell_counts(&self) -> Vec<Vec<usize>> {
        let mut counts = vec![vec![0; self.num_domains]; self.num_classes];
        for s in &self.samples {
            counts[s.noisy_label][s.domain] += 1;
        }
        counts
    }

    /// Keeps samples matching `keep`; class/domain counts and flags carry over.
    pub fn filter(&self, mut keep: impl FnMut(&Sample) -> bool) -> Dataset {
        Dataset {
            samples: self.samples.iter().filter(|s| keep(s)).cloned().collect(),
            num_classes: self.num_classes,
            num_domains: self.num_domains,
            dim: self.dim,
            flags: self.flags.clone(),
        }
    }

    pub fn noisy_labels(&self) -> BTreeMap<SampleId, usize> {
        self.samples.iter().map(|s| (s.id, s.noisy_label)).collect()
    }

    /// Copy with noisy labels replaced where `labels` has an entry.
    pub fn relabeled(&self, labels: &BTreeMap<SampleId, usize>) -> Result<Dataset> {
        let mut out = self.clone();
        for s in &mut out.samples {
            if let Some(&l) = labels.get(&s.id) {
                if l >= self.num_classes {
                    return Err(Error::LabelOutOfRange {
                        label: l,
                        num_classes: self.num_classes,
                    });
                }
                s.noisy_label = l;
            }
        }
        Ok(out)
    }

    /// Copy with every label (noisy and true) replaced by `f(sample)`.
    pub fn map_labels(&self, mut f: impl FnMut(&Sample) -> usize) -> Dataset {
        let mut out = self.clone();
        for s in &mut out.samples {
            let l = f(s);
            s.noisy_label = l;
            if s.true_label.is_some() {
                s.true_label = Some(l);
            }
        }
        out
    }

    /// Hex SHA-256 over the serialized file form.
    pub fn checksum(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().take(16).fold(String::new(), |mut acc, b| {
            let _ = write!(acc, "{b:02x}");
            acc
        })
    }

    pub fn to_text(&self) -> String {
        let with_true = self.has_true_labels() || self.samples.is_empty();
        let mut out = format!(
            "{FORMAT_MAGIC} {FORMAT_VERSION} classes={} domains={} dim={} true_labels={}",
            self.num_classes,
            self.num_domains,
            self.dim,
            if with_true { "yes" } else { "no" }
        );
        if !self.flags.is_empty() {
            let flags: Vec<&str> = self.flags.iter().map(String::as_str).collect();
            let _ = write!(out, " flags={}", flags.join(","));
        }
        out.push('\n');
        for s in &self.samples {
            let _ = write!(out, "{},{},{}", s.id, s.domain, s.noisy_label);
            if let Some(t) = s.true_label {
                let _ = write!(out, ",{t}");
            }
            for v in s.features.as_slice() {
                // `{:?}` prints the shortest representation that parses back exactly.
                let _ = write!(out, ",{v:?}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Dataset> {
        let mut lines = text.lines();
        let header = lines.next().ok_or(Error::Parse {
            record: 0,
            message: "empty file".into(),
        })?;
        let header_err = |message: String| Error::Parse { record: 0, message };
        let mut tokens = header.split_whitespace();
        if tokens.next() != Some(FORMAT_MAGIC) {
            return Err(header_err("missing dataset header".into()));
        }
        match tokens.next() {
            Some(FORMAT_VERSION) => {}
            other => return Err(header_err(format!("unsupported format version {other:?}"))),
        }
        let mut fields = BTreeMap::new();
        for tok in tokens {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| header_err(format!("malformed header field `{tok}`")))?;
            fields.insert(k, v);
        }
        let num = |key: &str| -> Result<usize> {
            fields
                .get(key)
                .ok_or_else(|| header_err(format!("header lacks `{key}`")))?
                .parse()
                .map_err(|_| header_err(format!("header `{key}` is not an integer")))
        };
        let (classes, domains, dim) = (num("classes")?, num("domains")?, num("dim")?);
        let with_true = match fields.get("true_labels").copied().unwrap_or("yes") {
            "yes" => true,
            "no" => false,
            other => return Err(header_err(format!("true_labels must be yes|no, got `{other}`"))),
        };
        let lead = if with_true { 4 } else { 3 };

        let mut samples = Vec::new();
        for (idx, line) in lines.enumerate() {
            let record = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse { record, message };
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if cols.len() != lead + dim {
                return Err(err(format!("expected {} columns, found {}", lead + dim, cols.len())));
            }
            let int = |i: usize, name: &str| -> Result<u64> {
                cols[i].parse().map_err(|_| err(format!("bad {name} `{}`", cols[i])))
            };
            let id = int(0, "id")?;
            let domain = int(1, "domain")? as usize;
            let noisy_label = int(2, "noisy_label")? as usize;
            let true_label = if with_true { Some(int(3, "true_label")? as usize) } else { None };
            if domain >= domains {
                return Err(err(format!("domain {domain} >= {domains}")));
            }
            if noisy_label >= classes || true_label.is_some_and(|t| t >= classes) {
                return Err(err(format!("label out of range for {classes} classes")));
            }
            let values = cols[lead..]
                .iter()
                .map(|c| c.parse::<f64>().map_err(|_| err(format!("bad feature `{c}`"))))
                .collect::<Result<Vec<_>>>()?;
            let features = FeatureVector::new(values).map_err(|e| err(e.to_string()))?;
            samples.push(Sample {
                id,
                features,
                domain,
                noisy_label,
                true_label,
            });
        }
        let mut ds = Dataset::new(samples, classes, domains, dim)?;
        if let Some(flags) = fields.get("flags") {
            for f in flags.split(',').filter(|f| !f.is_empty()) {
                ds.set_flag(f);
            }
        }
        Ok(ds)
    }
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, dataset.to_text()).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Dataset::from_text(&text)
}

/// Geometry of a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub num_classes: usize,
    pub num_domains: usize,
    pub samples_per_cell: usize,
    pub feature_dim: usize,
    /// Minimum Euclidean distance between class prototypes.
    pub class_separation: f64,
    /// Per-domain rotation in degrees; `None` means 15 degrees per domain index.
    pub domain_angles_deg: Option<Vec<f64>>,
    /// Norm of each domain's random translation.
    pub domain_translation: f64,
    pub cluster_noise_sigma: f64,
    pub seed: u64,
}

impl Default for DomainSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            num_domains: 4,
            samples_per_cell: 30,
            feature_dim: 16,
            class_separation: 5.0,
            domain_angles_deg: None,
            domain_translation: 1.0,
            cluster_noise_sigma: 0.5,
            seed: 0,
        }
    }
}

impl DomainSpec {
    pub fn angles_deg(&self) -> Vec<f64> {
        match &self.domain_angles_deg {
            Some(a) => a.clone(),
            None => (0..self.num_domains).map(|i| 15.0 * i as f64).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, m: &str| Err(Error::config(format!("data.{key}"), m));
        if self.num_classes < 2 {
            return bad("num_classes", "must be at least 2");
        }
        if self.num_domains == 0 {
            return bad("num_domains", "must be positive");
        }
        if self.samples_per_cell == 0 {
            return bad("samples_per_cell", "must be positive");
        }
        if self.feature_dim < 2 {
            return bad("feature_dim", "must be at least 2 for domain rotations");
        }
        if !(self.class_separation > 0.0 && self.class_separation.is_finite()) {
            return bad("class_separation", "must be positive");
        }
        if !(self.cluster_noise_sigma >= 0.0 && self.cluster_noise_sigma.is_finite()) {
            return bad("cluster_noise_sigma", "must be non-negative");
        }
        if !(self.domain_translation >= 0.0 && self.domain_translation.is_finite()) {
            return bad("domain_translation", "must be non-negative");
        }
        if let Some(a) = &self.domain_angles_deg {
            if a.len() != self.num_domains {
                return bad("domain_angles_deg", "must list one angle per domain");
            }
            if a.iter().any(|x| !x.is_finite()) {
                return bad("domain_angles_deg", "angles must be finite");
            }
        }
        Ok(())
    }
}

fn random_direction(rng: &mut Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Prototypes on a sphere of radius `separation`, pushed apart pairwise until
/// every pair is at least `separation` apart.
pub(crate) fn class_prototypes(rng: &mut Rng, classes: usize, dim: usize, separation: f64) -> Result<Vec<Vec<f64>>> {
    let mut protos: Vec<Vec<f64>> = (0..classes)
        .map(|_| random_direction(rng, dim).into_iter().map(|x| x * separation).collect())
        .collect();
    for _ in 0..10_000 {
        let mut moved = false;
        for a in 0..classes {
            for b in (a + 1)..classes {
                let d = euclid(&protos[a], &protos[b]);
                if d >= separation {
                    continue;
                }
                moved = true;
                let dir: Vec<f64> = if d > 1e-12 {
                    protos[a].iter().zip(&protos[b]).map(|(x, y)| (x - y) / d).collect()
                } else {
                    random_direction(rng, dim)
                };
                let push = 0.5 * (separation - d) * 1.01;
                for k in 0..dim {
                    protos[a][k] += push * dir[k];
                    protos[b][k] -= push * dir[k];
                }
            }
        }
        if !moved {
            return Ok(protos);
        }
    }
    Err(Error::InvalidSpec("could not place class prototypes at the requested separation".into()))
}

/// Rotates each consecutive coordinate pair by `angle_deg`.
pub(crate) fn rotate_blocks(v: &[f64], angle_deg: f64) -> Vec<f64> {
    let (s, c) = angle_deg.to_radians().sin_cos();
    let mut out = v.to_vec();
    for k in 0..v.len() / 2 {
        let (x, y) = (v[2 * k], v[2 * k + 1]);
        out[2 * k] = c * x - s * y;
        out[2 * k + 1] = s * x + c * y;
    }
    out
}

/// Generates a clean dataset (`noisy_label == true_label`), ordered by
/// domain, then class, then draw index. Ids are positions.
pub fn generate(spec: &DomainSpec) -> Result<Dataset> {
    spec.validate()?;
    let root = Rng::new(spec.seed);
    let mut proto_rng = root.child(1);
    let mut shift_rng = root.child(2);
    let mut jitter_rng = root.child(3);

    let dim = spec.feature_dim;
    let protos = class_prototypes(&mut proto_rng, spec.num_classes, dim, spec.class_separation)?;
    let angles = spec.angles_deg();

    let mut samples = Vec::with_capacity(spec.num_classes * spec.num_domains * spec.samples_per_cell);
    for (domain, &angle) in angles.iter().enumerate() {
        let shift: Vec<f64> = random_direction(&mut shift_rng, dim)
            .into_iter()
            .map(|x| x * spec.domain_translation)
            .collect();
        for (class, proto) in protos.iter().enumerate() {
            let center: Vec<f64> = rotate_blocks(proto, angle).iter().zip(&shift).map(|(p, t)| p + t).collect();
            for _ in 0..spec.samples_per_cell {
                let values = center
                    .iter()
                    .map(|c| c + spec.cluster_noise_sigma * jitter_rng.normal())
                    .collect();
                samples.push(Sample {
                    id: samples.len() as SampleId,
                    features: FeatureVector::new(values)?,
                    domain,
                    noisy_label: class,
                    true_label: Some(class),
                });
            }
        }
    }
    Dataset::new(samples, spec.num_classes, spec.num_domains, dim)
}

/// Directed flip pairs `(from, to)` for ten-class rotated digits.
pub const ROTATED_DIGIT_PAIRS: [(usize, usize); 8] = [(0, 6), (1, 7), (3, 5), (4, 9), (5, 3), (6, 0), (7, 1), (9, 4)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Directed `(from, to)` flips; each source class at most once.
    pub pairs: Vec<(usize, usize)>,
    pub ratio: f64,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            pairs: ROTATED_DIGIT_PAIRS.to_vec(),
            ratio: 0.3,
            seed: 0,
        }
    }
}

impl NoiseSpec {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if !(0.0..1.0).contains(&self.ratio) {
            return Err(Error::config("noise.ratio", format!("{} outside [0, 1)", self.ratio)));
        }
        let mut sources = BTreeSet::new();
        for &(a, b) in &self.pairs {
            if a == b {
                return Err(Error::config("noise.pairs", format!("pair ({a}, {b}) flips a class to itself")));
            }
            if a >= num_classes || b >= num_classes {
                return Err(Error::config(
                    "noise.pairs",
                    format!("pair ({a}, {b}) references a class >= {num_classes}"),
                ));
            }
            if !sources.insert(a) {
                return Err(Error::config("noise.pairs", format!("class {a} is the source of more than one pair")));
            }
        }
        Ok(())
    }
}

/// Flips labels along the directed pairs. Only `noisy_label` changes; one
/// Bernoulli draw is consumed per eligible sample, in dataset order.
pub fn inject_pairwise_noise(dataset: &Dataset, spec: &NoiseSpec) -> Result<Dataset> {
    spec.validate(dataset.num_classes())?;
    let targets: BTreeMap<usize, usize> = spec.pairs.iter().copied().collect();
    let mut rng = Rng::new(spec.seed);
    let mut out = dataset.clone();
    for s in &mut out.samples {
        let source = s.true_label.unwrap_or(s.noisy_label);
        if let Some(&to) = targets.get(&source) {
            if rng.bernoulli(spec.ratio) {
                s.noisy_label = to;
            }
        }
    }
    if spec.ratio >= 0.5 {
        out.set_flag(FLAG_HIGH_NOISE_RATIO);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::group_mean;

    fn small_spec() -> DomainSpec {
        DomainSpec {
            samples_per_cell: 30,
            ..DomainSpec::default()
        }
    }

    #[test]
    fn default_generation_counts() {
        let ds = generate(&small_spec()).unwrap();
        assert_eq!(ds.len(), 1200);
        let cells = ds.cell_counts();
        assert_eq!(cells.len(), 10);
        assert!(cells.iter().flatten().all(|&c| c == 30));
        assert_eq!(ds.domain_counts(), vec![300; 4]);
        assert!(ds.samples().iter().all(|s| s.true_label == Some(s.noisy_label)));
    }

    #[test]
    fn zero_jitter_collapses_cells() {
        let ds = generate(&DomainSpec {
            cluster_noise_sigma: 0.0,
            samples_per_cell: 5,
            ..DomainSpec::default()
        })
        .unwrap();
        for chunk in ds.samples().chunks(5) {
            assert!(chunk.iter().all(|s| s.features == chunk[0].features));
        }
    }

    #[test]
    fn rejects_one_dimensional_features() {
        let err = generate(&DomainSpec {
            feature_dim: 1,
            ..DomainSpec::default()
        })
        .unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "data.feature_dim"));
    }

    #[test]
    fn prototypes_respect_separation() {
        let mut rng = Rng::new(3);
        let p = class_prototypes(&mut rng, 10, 4, 4.0).unwrap();
        for a in 0..10 {
            for b in (a + 1)..10 {
                assert!(euclid(&p[a], &p[b]) >= 4.0);
            }
        }
    }

    #[test]
    fn regeneration_is_bit_identical() {
        let a = generate(&small_spec()).unwrap();
        let b = generate(&small_spec()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.checksum(), b.checksum());
    }

    // Brute-force oracle: nearest (class, same domain) empirical cell mean.
    #[test]
    fn clean_data_is_nearest_prototype_separable() {
        for seed in 0..3 {
            let ds = generate(&DomainSpec { seed, ..small_spec() }).unwrap();
            let mut means = BTreeMap::new();
            for c in 0..ds.num_classes() {
                for d in 0..ds.num_domains() {
                    let members: Vec<&FeatureVector> = ds
                        .samples()
                        .iter()
                        .filter(|s| s.noisy_label == c && s.domain == d)
                        .map(|s| &s.features)
                        .collect();
                    means.insert((c, d), group_mean(members).unwrap());
                }
            }
            let correct = ds
                .samples()
                .iter()
                .filter(|s| {
                    let best = (0..ds.num_classes())
                        .min_by(|&a, &b| {
                            let da = euclid(s.features.as_slice(), means[&(a, s.domain)].as_slice());
                            let db = euclid(s.features.as_slice(), means[&(b, s.domain)].as_slice());
                            da.total_cmp(&db)
                        })
                        .unwrap();
                    best == s.noisy_label
                })
                .count();
            let acc = correct as f64 / ds.len() as f64;
            assert!(acc >= 0.99, "seed {seed}: nearest-prototype accuracy {acc}");
        }
    }

    // Raw inputs: distance to own-class mean < distance to own-domain mean.
    #[test]
    fn clean_data_satisfies_class_over_domain_closeness() {
        let ds = generate(&small_spec()).unwrap();
        let class_mean: Vec<FeatureVector> = (0..ds.num_classes())
            .map(|c| group_mean(ds.samples().iter().filter(|s| s.noisy_label == c).map(|s| &s.features)).unwrap())
            .collect();
        let domain_mean: Vec<FeatureVector> = (0..ds.num_domains())
            .map(|d| group_mean(ds.samples().iter().filter(|s| s.domain == d).map(|s| &s.features)).unwrap())
            .collect();
        let ok = ds
            .samples()
            .iter()
            .filter(|s| {
                euclid(s.features.as_slice(), class_mean[s.noisy_label].as_slice())
                    < euclid(s.features.as_slice(), domain_mean[s.domain].as_slice())
            })
            .count();
        assert!(ok as f64 / ds.len() as f64 >= 0.95);
    }

    #[test]
    fn zero_ratio_is_a_no_op() {
        let ds = generate(&small_spec()).unwrap();
        let noisy = inject_pairwise_noise(&ds, &NoiseSpec { ratio: 0.0, ..NoiseSpec::default() }).unwrap();
        assert_eq!(noisy, ds);
    }

    #[test]
    fn rotated_digit_pairs_give_expected_label_accuracy() {
        let mut accs = Vec::new();
        for seed in 0..20 {
            let ds = generate(&DomainSpec { seed, ..small_spec() }).unwrap();
            let noisy = inject_pairwise_noise(&ds, &NoiseSpec { seed, ..NoiseSpec::default() }).unwrap();
            let agree = noisy.samples().iter().filter(|s| Some(s.noisy_label) == s.true_label).count();
            accs.push(agree as f64 / noisy.len() as f64);
        }
        // 1 - 0.3 * 8/10
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!((mean - 0.76).abs() < 0.01, "mean label accuracy {mean}");
    }

    #[test]
    fn single_pair_flip_count_matches_replayed_draws() {
        let samples: Vec<Sample> = (0..1000)
            .map(|i| Sample {
                id: i,
                features: FeatureVector::new(vec![1.0, 0.0]).unwrap(),
                domain: 0,
                noisy_label: 0,
                true_label: Some(0),
            })
            .collect();
        let ds = Dataset::new(samples, 2, 1, 2).unwrap();
        let spec = NoiseSpec {
            pairs: vec![(0, 1)],
            ratio: 0.3,
            seed: 11,
        };
        let noisy = inject_pairwise_noise(&ds, &spec).unwrap();
        let flipped = noisy.samples().iter().filter(|s| s.noisy_label == 1).count();

        let mut replay = Rng::new(11);
        let expected = (0..1000).filter(|_| replay.next_f64() < 0.3).count();
        assert_eq!(flipped, expected);
        // three binomial standard deviations: sqrt(1000 * 0.3 * 0.7) ~ 14.5
        assert!((flipped as i64 - 300).abs() <= 44, "flipped {flipped}");
    }

    #[test]
    fn noise_preserves_everything_but_noisy_labels() {
        let ds = generate(&small_spec()).unwrap();
        let noisy = inject_pairwise_noise(&ds, &NoiseSpec::default()).unwrap();
        for (a, b) in ds.samples().iter().zip(noisy.samples()) {
            assert_eq!((a.id, &a.features, a.domain, a.true_label), (b.id, &b.features, b.domain, b.true_label));
        }
        assert!(noisy.flags().is_empty());
    }

    #[test]
    fn high_ratio_sets_warning_flag() {
        let ds = generate(&small_spec()).unwrap();
        let noisy = inject_pairwise_noise(&ds, &NoiseSpec { ratio: 0.6, ..NoiseSpec::default() }).unwrap();
        assert!(noisy.flags().contains(FLAG_HIGH_NOISE_RATIO));
    }

    #[test]
    fn invalid_noise_specs_are_rejected() {
        let ds = generate(&small_spec()).unwrap();
        for spec in [
            NoiseSpec { pairs: vec![(2, 2)], ..NoiseSpec::default() },
            NoiseSpec { pairs: vec![(0, 10)], ..NoiseSpec::default() },
            NoiseSpec { pairs: vec![(0, 1), (0, 2)], ..NoiseSpec::default() },
            NoiseSpec { ratio: 1.0, ..NoiseSpec::default() },
        ] {
            assert!(inject_pairwise_noise(&ds, &spec).is_err());
        }
    }

    #[test]
    fn text_round_trip_is_exact() {
        let ds = generate(&DomainSpec { samples_per_cell: 3, ..DomainSpec::default() }).unwrap();
        let mut noisy = inject_pairwise_noise(&ds, &NoiseSpec { ratio: 0.6, ..NoiseSpec::default() }).unwrap();
        noisy.set_flag("custom");
        assert_eq!(Dataset::from_text(&noisy.to_text()).unwrap(), noisy);
    }

    #[test]
    fn load_rejects_out_of_range_domain() {
        let text = "dl4nd-dataset v1 classes=2 domains=2 dim=2 true_labels=yes\n0,0,1,1,0.5,0.5\n1,2,0,0,1.0,0.0\n";
        match Dataset::from_text(text).unwrap_err() {
            Error::Parse { record, .. } => assert_eq!(record, 2),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn load_without_true_labels_disables_metrics() {
        let text = "dl4nd-dataset v1 classes=2 domains=1 dim=2 true_labels=no\n0,0,1,0.5,0.5\n1,0,0,1.0,0.0\n";
        let ds = Dataset::from_text(text).unwrap();
        assert!(!ds.has_true_labels());
        assert_eq!(ds.len(), 2);
        assert_eq!(Dataset::from_text(&ds.to_text()).unwrap(), ds);
    }

    #[test]
    fn load_reports_bad_feature_record() {
        let text = "dl4nd-dataset v1 classes=2 domains=1 dim=2 true_labels=yes\n0,0,1,1,abc,0.5\n";
        assert!(matches!(Dataset::from_text(text).unwrap_err(), Error::Parse { record: 1, .. }));
    }
}
