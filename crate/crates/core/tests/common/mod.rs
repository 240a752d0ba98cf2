#![allow(dead_code)]

use dl4nd::model::{batch_gradients, init_params, BatchItem, LogitPenalty, ModelParams, NoPenalty};
use dl4nd::numerics::Rng;
use dl4nd::trainer::elr_term;
use dl4nd::SampleId;

pub const FD_EPS: f64 = 1e-5;

/// ELR term against fixed per-slot targets.
pub struct FixedElr {
    pub targets: Vec<Vec<f64>>,
    pub lambda: f64,
}

impl LogitPenalty for FixedElr {
    fn apply(&mut self, slot: usize, _id: SampleId, probs: &[f64]) -> (f64, Vec<f64>) {
        elr_term(probs, &self.targets[slot], self.lambda, self.targets.len())
    }
}

pub struct Draw {
    pub params: ModelParams,
    pub xs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub targets: Vec<Vec<f64>>,
}

pub fn random_draw(seed: u64) -> Draw {
    let mut rng = Rng::new(seed);
    let dims = [6, 8, 5, 4];
    let mut flat = init_params(&dims, seed).unwrap().to_flat();
    for w in &mut flat {
        *w += 0.3 * rng.normal();
    }
    let params = ModelParams::from_flat(&dims, &flat).unwrap();
    let batch = 5;
    let xs = (0..batch).map(|_| (0..dims[0]).map(|_| rng.normal()).collect()).collect();
    let labels = (0..batch).map(|_| rng.below(dims[3])).collect();
    let targets = (0..batch)
        .map(|_| {
            let raw: Vec<f64> = (0..dims[3]).map(|_| rng.uniform(0.05, 1.0)).collect();
            let s: f64 = raw.iter().sum();
            raw.iter().map(|r| r / s).collect()
        })
        .collect();
    Draw {
        params,
        xs,
        labels,
        targets,
    }
}

pub fn objective(d: &Draw, params: &ModelParams, elr: bool) -> (f64, ModelParams) {
    let batch: Vec<BatchItem<'_>> = d
        .xs
        .iter()
        .zip(&d.labels)
        .enumerate()
        .map(|(i, (x, &label))| BatchItem {
            id: i as u64,
            x,
            label,
        })
        .collect();
    let g = if elr {
        let mut p = FixedElr {
            targets: d.targets.clone(),
            lambda: 3.0,
        };
        batch_gradients(params, &batch, &mut p).unwrap()
    } else {
        batch_gradients(params, &batch, &mut NoPenalty).unwrap()
    };
    (g.total_loss, g.grads)
}

/// Largest relative error, over weight and bias blocks of every layer,
/// between the analytic gradient and central differences.
pub fn gradient_check(seed: u64, elr: bool) -> f64 {
    let d = random_draw(seed);
    let (_, analytic) = objective(&d, &d.params, elr);
    let dims = d.params.dims().to_vec();
    let base = d.params.to_flat();
    let mut numeric = vec![0.0; base.len()];
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += FD_EPS;
        let mut minus = base.clone();
        minus[i] -= FD_EPS;
        let fp = objective(&d, &ModelParams::from_flat(&dims, &plus).unwrap(), elr).0;
        let fm = objective(&d, &ModelParams::from_flat(&dims, &minus).unwrap(), elr).0;
        numeric[i] = (fp - fm) / (2.0 * FD_EPS);
    }
    let numeric = ModelParams::from_flat(&dims, &numeric).unwrap();
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.layers().iter().zip(numeric.layers()) {
        for (ba, bn) in [(&a.weights, &n.weights), (&a.bias, &n.bias)] {
            let diff: f64 = ba.iter().zip(bn.iter()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let scale = norm(ba).max(norm(bn)).max(1e-12);
            worst = worst.max(diff / scale);
        }
    }
    worst
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
