//! Two-component 1-D Gaussian mixture over per-sample losses, used to
//! separate presumed-clean (low-loss) from suspect (high-loss) samples.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::quantile_sorted;
use crate::SampleId;

pub const VARIANCE_FLOOR: f64 = 1e-8;
/// Slack allowed on the EM log-likelihood ascent check.
pub const LL_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmConfig {
    pub max_iters: usize,
    pub tol: f64,
    /// Minimum posterior of the low-loss component for a sample to count as low-loss.
    pub threshold: f64,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tol: 1e-6,
            threshold: 0.5,
        }
    }
}

/// Component 0 always has the smaller mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmParams {
    pub means: [f64; 2],
    pub variances: [f64; 2],
    pub weights: [f64; 2],
    pub log_likelihood: f64,
    pub iterations_used: usize,
    /// Log-likelihood before each EM update, then at the final parameters.
    pub ll_trace: Vec<f64>,
}

impl GmmParams {
    /// Initial parameters: means at the 10th and 90th percentiles, equal
    /// weights, shared variance equal to the overall variance.
    pub fn initial(values: &[f64]) -> Self {
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len() as f64;
        let mean = sorted.iter().sum::<f64>() / n;
        let var = (sorted.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).max(VARIANCE_FLOOR);
        Self {
            means: [quantile_sorted(&sorted, 0.1), quantile_sorted(&sorted, 0.9)],
            variances: [var, var],
            weights: [0.5, 0.5],
            log_likelihood: f64::NEG_INFINITY,
            iterations_used: 0,
            ll_trace: Vec::new(),
        }
    }

    fn log_joint(&self, x: f64) -> [f64; 2] {
        let lj = |k: usize| {
            let v = self.variances[k];
            self.weights[k].ln() - 0.5 * (std::f64::consts::TAU * v).ln() - (x - self.means[k]).powi(2) / (2.0 * v)
        };
        [lj(0), lj(1)]
    }

    /// Posterior probability of each component for loss `x`.
    pub fn responsibilities(&self, x: f64) -> [f64; 2] {
        let [a, b] = self.log_joint(x);
        let m = a.max(b);
        if m == f64::NEG_INFINITY {
            return [0.5, 0.5];
        }
        let (ea, eb) = ((a - m).exp(), (b - m).exp());
        [ea / (ea + eb), eb / (ea + eb)]
    }

    pub fn log_likelihood_of(&self, values: &[f64]) -> f64 {
        values
            .iter()
            .map(|&x| {
                let [a, b] = self.log_joint(x);
                let m = a.max(b);
                m + ((a - m).exp() + (b - m).exp()).ln()
            })
            .sum()
    }

    /// Posterior of the low-loss component.
    pub fn low_posterior(&self, x: f64) -> f64 {
        self.responsibilities(x)[0]
    }
}

/// One EM update. Sums run over `values` in the given order.
pub fn em_step(gmm: &GmmParams, values: &[f64]) -> GmmParams {
    let mut nk = [0.0; 2];
    let mut sx = [0.0; 2];
    let resp: Vec<[f64; 2]> = values.iter().map(|&x| gmm.responsibilities(x)).collect();
    for (r, &x) in resp.iter().zip(values) {
        for k in 0..2 {
            nk[k] += r[k];
            sx[k] += r[k] * x;
        }
    }
    let n = values.len() as f64;
    let mut next = gmm.clone();
    for k in 0..2 {
        if nk[k] <= f64::MIN_POSITIVE {
            // Empty component keeps its location; weight collapses to zero.
            next.weights[k] = 0.0;
            continue;
        }
        let mu = sx[k] / nk[k];
        let sq: f64 = resp.iter().zip(values).map(|(r, &x)| r[k] * (x - mu) * (x - mu)).sum();
        next.means[k] = mu;
        next.variances[k] = (sq / nk[k]).max(VARIANCE_FLOOR);
        next.weights[k] = nk[k] / n;
    }
    next
}

/// Fits the mixture by EM. Input order does not matter: values are sorted
/// before any summation.
pub fn fit_gmm(losses: &BTreeMap<SampleId, f64>, config: &GmmConfig) -> Result<GmmParams> {
    let mut values: Vec<f64> = losses.values().copied().collect();
    fit_gmm_values(&mut values, config)
}

pub(crate) fn fit_gmm_values(values: &mut [f64], config: &GmmConfig) -> Result<GmmParams> {
    if values.len() < 4 {
        return Err(Error::InvalidSpec(format!(
            "mixture fit needs at least 4 losses, got {}",
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidSpec("losses must be finite and non-negative".into()));
    }
    values.sort_by(f64::total_cmp);
    let (lo, hi) = (values[0], values[values.len() - 1]);
    if hi - lo <= 1e-12 * hi.abs().max(1.0) {
        return Err(Error::DegenerateFit("all losses are identical".into()));
    }

    let mut gmm = GmmParams::initial(values);
    let mut ll = gmm.log_likelihood_of(values);
    let mut trace = vec![ll];
    let mut iters = 0;
    while iters < config.max_iters {
        let next = em_step(&gmm, values);
        let next_ll = next.log_likelihood_of(values);
        iters += 1;
        debug_assert!(next_ll >= ll - LL_SLACK * ll.abs().max(1.0), "EM decreased log-likelihood");
        trace.push(next_ll);
        let delta = (next_ll - ll).abs();
        gmm = next;
        ll = next_ll;
        if delta < config.tol {
            break;
        }
    }

    if gmm.means[0] > gmm.means[1] {
        gmm.means.swap(0, 1);
        gmm.variances.swap(0, 1);
        gmm.weights.swap(0, 1);
    }
    if gmm.weights.iter().any(|&w| w <= 0.0) {
        return Err(Error::DegenerateFit("a mixture component is empty".into()));
    }
    if (gmm.means[1] - gmm.means[0]) <= 1e-6 * gmm.means[1].abs().max(1.0) {
        return Err(Error::DegenerateFit("mixture components coincide".into()));
    }
    gmm.log_likelihood = ll;
    gmm.iterations_used = iters;
    gmm.ll_trace = trace;
    Ok(gmm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSplit {
    pub low_ids: BTreeSet<SampleId>,
    pub high_ids: BTreeSet<SampleId>,
    /// Posterior of the low-loss component per sample.
    pub posterior: BTreeMap<SampleId, f64>,
}

impl LossSplit {
    /// Every sample low-loss; used when the mixture fit is degenerate.
    pub fn all_low(ids: impl IntoIterator<Item = SampleId>) -> Self {
        let low_ids: BTreeSet<SampleId> = ids.into_iter().collect();
        Self {
            posterior: low_ids.iter().map(|&id| (id, 1.0)).collect(),
            low_ids,
            high_ids: BTreeSet::new(),
        }
    }
}

/// Low-loss iff the low component's posterior is at least `threshold`.
pub fn split(losses: &BTreeMap<SampleId, f64>, gmm: &GmmParams, threshold: f64) -> LossSplit {
    let mut out = LossSplit {
        low_ids: BTreeSet::new(),
        high_ids: BTreeSet::new(),
        posterior: BTreeMap::new(),
    };
    for (&id, &loss) in losses {
        let p = gmm.low_posterior(loss);
        out.posterior.insert(id, p);
        if p >= threshold {
            out.low_ids.insert(id);
        } else {
            out.high_ids.insert(id);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    fn as_map(values: &[f64]) -> BTreeMap<SampleId, f64> {
        values.iter().enumerate().map(|(i, &v)| (i as SampleId, v)).collect()
    }

    fn two_clusters(seed: u64) -> Vec<f64> {
        let mut rng = Rng::new(seed);
        let mut v: Vec<f64> = (0..500).map(|_| 0.1 + 0.05 * rng.normal()).collect();
        v.extend((0..500).map(|_| 2.0 + 0.05 * rng.normal()));
        v.iter().map(|x: &f64| x.abs()).collect()
    }

    #[test]
    fn recovers_generating_mixture() {
        let gmm = fit_gmm(&as_map(&two_clusters(1)), &GmmConfig::default()).unwrap();
        assert!((gmm.means[0] - 0.1).abs() < 0.05);
        assert!((gmm.means[1] - 2.0).abs() < 0.05);
        assert!((gmm.weights[0] - 0.5).abs() < 0.05);
        assert!((gmm.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(gmm.iterations_used < 20);
    }

    #[test]
    fn log_likelihood_never_decreases() {
        for seed in 0..5 {
            let gmm = fit_gmm(&as_map(&two_clusters(seed)), &GmmConfig::default()).unwrap();
            for w in gmm.ll_trace.windows(2) {
                assert!(w[1] >= w[0] - LL_SLACK * w[0].abs().max(1.0));
            }
        }
    }

    #[test]
    fn identical_losses_are_degenerate() {
        let err = fit_gmm(&as_map(&[0.7; 40]), &GmmConfig::default()).unwrap_err();
        assert!(matches!(err, Error::DegenerateFit(_)));
    }

    #[test]
    fn too_few_or_invalid_losses_rejected() {
        assert!(fit_gmm(&as_map(&[0.1, 0.2, 0.3]), &GmmConfig::default()).is_err());
        assert!(fit_gmm(&as_map(&[0.1, 0.2, -0.3, 1.0]), &GmmConfig::default()).is_err());
    }

    // Hand oracle: with equal weights and shared variance v the low-component
    // posterior is 1 / (1 + exp(((x - m0)^2 - (x - m1)^2) / (2 v))).
    #[test]
    fn first_iteration_responsibilities_match_closed_form() {
        let values = [0.1, 0.2, 1.9, 2.0];
        let init = GmmParams::initial(&values);
        let (m0, m1, v) = (0.13, 1.97, 0.8125);
        assert!((init.means[0] - m0).abs() < 1e-12);
        assert!((init.means[1] - m1).abs() < 1e-12);
        assert!((init.variances[0] - v).abs() < 1e-12);
        for &x in &values {
            let expected = 1.0 / (1.0 + (((x - m0) * (x - m0) - (x - m1) * (x - m1)) / (2.0 * v)).exp());
            let r = init.responsibilities(x);
            assert!((r[0] - expected).abs() < 1e-9);
            assert!((r[0] + r[1] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn split_edges() {
        let losses = as_map(&two_clusters(2));
        let gmm = fit_gmm(&losses, &GmmConfig::default()).unwrap();
        let probe: BTreeMap<SampleId, f64> = [(0, gmm.means[0]), (1, gmm.means[1] + 50.0)].into();
        let s = split(&probe, &gmm, 0.5);
        assert!(s.low_ids.contains(&0));
        assert!(s.high_ids.contains(&1));

        let all = split(&losses, &gmm, 0.0);
        assert_eq!(all.low_ids.len(), losses.len());
        assert!(all.high_ids.is_empty());
    }

    #[test]
    fn split_partitions_ids() {
        let losses = as_map(&two_clusters(3));
        let gmm = fit_gmm(&losses, &GmmConfig::default()).unwrap();
        let s = split(&losses, &gmm, 0.5);
        assert!(s.low_ids.is_disjoint(&s.high_ids));
        assert_eq!(s.low_ids.len() + s.high_ids.len(), losses.len());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn fit_is_order_invariant(seed in any::<u64>(), shuffle_seed in any::<u64>()) {
            let values = two_clusters(seed);
            let mut shuffled = values.clone();
            Rng::new(shuffle_seed).shuffle(&mut shuffled);
            let a = fit_gmm(&as_map(&values), &GmmConfig::default()).unwrap();
            let b = fit_gmm(&as_map(&shuffled), &GmmConfig::default()).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
