//! Flat `section.key = value` configuration shared by every command.
//!
//! Lines are `key = value`; `#` starts a comment. Lists are comma-separated,
//! noise pairs are written `a:b`. Later assignments win, so applying a file
//! and then `--set` overrides gives default < file < flag precedence.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::eval::{ExperimentSpec, HeldOut, Method};
use crate::trainer::RefineTrigger;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub experiment: ExperimentSpec,
    /// Method used by `train`.
    pub method: Method,
    /// Probe interval of the gap-peak trigger, kept while the trigger is fixed.
    pub probe_interval: usize,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            experiment: ExperimentSpec::default(),
            method: Method::DL4ND,
            probe_interval: 50,
        }
    }
}

/// Every accepted key, in the order used by [`Config::entries`].
pub const KEYS: [&str; 36] = [
    "data.num_classes",
    "data.num_domains",
    "data.samples_per_cell",
    "data.feature_dim",
    "data.class_separation",
    "data.domain_angles_deg",
    "data.domain_translation",
    "data.cluster_noise_sigma",
    "data.seed",
    "noise.pairs",
    "noise.ratio",
    "noise.seed",
    "train.method",
    "train.total_steps",
    "train.batch_size",
    "train.learning_rate",
    "train.refine_step",
    "train.refine_trigger",
    "train.probe_interval",
    "train.refine_passes",
    "train.normalize_proxies",
    "train.elr_beta",
    "train.elr_lambda",
    "train.swad_window",
    "train.gmm_max_iters",
    "train.gmm_tol",
    "train.gmm_threshold",
    "train.hidden",
    "train.embedding_dim",
    "train.seed",
    "eval.methods",
    "eval.ratios",
    "eval.held_out",
    "eval.seeds",
    "eval.id_fraction",
    "eval.format_version",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v)).collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn float(x: f64) -> String {
    format!("{x:?}")
}

impl Config {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let e = &mut self.experiment;
        let v = value.trim();
        match key {
            "data.num_classes" => e.domain.num_classes = parse(key, v)?,
            "data.num_domains" => e.domain.num_domains = parse(key, v)?,
            "data.samples_per_cell" => e.domain.samples_per_cell = parse(key, v)?,
            "data.feature_dim" => e.domain.feature_dim = parse(key, v)?,
            "data.class_separation" => e.domain.class_separation = parse(key, v)?,
            "data.domain_angles_deg" => {
                e.domain.domain_angles_deg = if v == "auto" { None } else { Some(parse_list(key, v)?) }
            }
            "data.domain_translation" => e.domain.domain_translation = parse(key, v)?,
            "data.cluster_noise_sigma" => e.domain.cluster_noise_sigma = parse(key, v)?,
            "data.seed" => e.domain.seed = parse(key, v)?,
            "noise.pairs" => {
                let mut pairs = Vec::new();
                for p in v.split(',').filter(|p| !p.trim().is_empty()) {
                    let (a, b) = p
                        .split_once(':')
                        .ok_or_else(|| Error::config(key, format!("pair `{p}` is not `a:b`")))?;
                    pairs.push((parse(key, a)?, parse(key, b)?));
                }
                e.noise.pairs = pairs;
            }
            "noise.ratio" => e.noise.ratio = parse(key, v)?,
            "noise.seed" => e.noise.seed = parse(key, v)?,
            "train.method" => self.method = v.parse().map_err(|m: String| Error::config(key, m))?,
            "train.total_steps" => e.train.total_steps = parse(key, v)?,
            "train.batch_size" => e.train.batch_size = parse(key, v)?,
            "train.learning_rate" => e.train.learning_rate = parse(key, v)?,
            "train.refine_step" => e.train.refine_step = parse(key, v)?,
            "train.refine_trigger" => {
                e.train.refine_trigger = match v {
                    "fixed" => RefineTrigger::Fixed,
                    "gap_peak" => RefineTrigger::GapPeak {
                        probe_interval: self.probe_interval,
                    },
                    _ => return Err(Error::config(key, format!("`{v}` is not fixed|gap_peak"))),
                }
            }
            "train.probe_interval" => {
                self.probe_interval = parse(key, v)?;
                if let RefineTrigger::GapPeak { probe_interval } = &mut e.train.refine_trigger {
                    *probe_interval = self.probe_interval;
                }
            }
            "train.refine_passes" => e.train.refine_passes = parse(key, v)?,
            "train.normalize_proxies" => e.train.normalize_proxies = parse(key, v)?,
            "train.elr_beta" => e.train.elr_beta = parse(key, v)?,
            "train.elr_lambda" => e.train.elr_lambda = parse(key, v)?,
            "train.swad_window" => {
                e.train.swad_window = if v == "auto" {
                    None
                } else {
                    let (a, b) = v
                        .split_once(':')
                        .ok_or_else(|| Error::config(key, "expected `auto` or `start:end`"))?;
                    Some((parse(key, a)?, parse(key, b)?))
                }
            }
            "train.gmm_max_iters" => e.train.gmm.max_iters = parse(key, v)?,
            "train.gmm_tol" => e.train.gmm.tol = parse(key, v)?,
            "train.gmm_threshold" => e.train.gmm.threshold = parse(key, v)?,
            "train.hidden" => e.train.hidden = parse_list(key, v)?,
            "train.embedding_dim" => e.train.embedding_dim = parse(key, v)?,
            "train.seed" => e.train.seed = parse(key, v)?,
            "eval.methods" => {
                e.methods = v
                    .split(',')
                    .map(|m| m.parse().map_err(|msg: String| Error::config(key, msg)))
                    .collect::<Result<_>>()?
            }
            "eval.ratios" => e.ratios = parse_list(key, v)?,
            "eval.held_out" => {
                e.held_out = if v == "all" {
                    HeldOut::All
                } else {
                    HeldOut::Domains(parse_list(key, v)?)
                }
            }
            "eval.seeds" => e.seeds = parse_list(key, v)?,
            "eval.id_fraction" => e.id_fraction = parse(key, v)?,
            "eval.format_version" => {
                let fv: u32 = parse(key, v)?;
                if fv != crate::eval::REPORT_FORMAT_VERSION {
                    return Err(Error::config(key, format!("unsupported version {fv}")));
                }
            }
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Parses an assignment of the form `key=value`.
    pub fn set_assignment(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(assignment.trim(), "expected key=value"))?;
        self.set(k.trim(), v)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for line in text.lines() {
            let line = line.split('#').next().unwrap().trim();
            if !line.is_empty() {
                self.set_assignment(line)?;
            }
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text)
    }

    /// Uses `seed` for data generation, noise injection and training.
    pub fn set_seed(&mut self, seed: u64) {
        self.experiment.domain.seed = seed;
        self.experiment.noise.seed = seed;
        self.experiment.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.experiment.validate()?;
        if self.probe_interval == 0 {
            return Err(Error::config("train.probe_interval", "must be positive"));
        }
        Ok(())
    }

    /// Fully resolved `(key, value)` pairs; [`Config::apply_text`] on
    /// their rendering reproduces this config.
    pub fn entries(&self) -> Vec<(String, String)> {
        let e = &self.experiment;
        let t = &e.train;
        let values = [
            e.domain.num_classes.to_string(),
            e.domain.num_domains.to_string(),
            e.domain.samples_per_cell.to_string(),
            e.domain.feature_dim.to_string(),
            float(e.domain.class_separation),
            match &e.domain.domain_angles_deg {
                None => "auto".into(),
                Some(a) => a.iter().map(|x| float(*x)).collect::<Vec<_>>().join(","),
            },
            float(e.domain.domain_translation),
            float(e.domain.cluster_noise_sigma),
            e.domain.seed.to_string(),
            e.noise.pairs.iter().map(|(a, b)| format!("{a}:{b}")).collect::<Vec<_>>().join(","),
            float(e.noise.ratio),
            e.noise.seed.to_string(),
            self.method.to_string(),
            t.total_steps.to_string(),
            t.batch_size.to_string(),
            float(t.learning_rate),
            t.refine_step.to_string(),
            match t.refine_trigger {
                RefineTrigger::Fixed => "fixed".into(),
                RefineTrigger::GapPeak { .. } => "gap_peak".into(),
            },
            self.probe_interval.to_string(),
            t.refine_passes.to_string(),
            t.normalize_proxies.to_string(),
            float(t.elr_beta),
            float(t.elr_lambda),
            match t.swad_window {
                None => "auto".into(),
                Some((a, b)) => format!("{a}:{b}"),
            },
            t.gmm.max_iters.to_string(),
            float(t.gmm.tol),
            float(t.gmm.threshold),
            join(&t.hidden),
            t.embedding_dim.to_string(),
            t.seed.to_string(),
            join(&e.methods),
            e.ratios.iter().map(|x| float(*x)).collect::<Vec<_>>().join(","),
            match &e.held_out {
                HeldOut::All => "all".into(),
                HeldOut::Domains(d) => join(d),
            },
            join(&e.seeds),
            float(e.id_fraction),
            crate::eval::REPORT_FORMAT_VERSION.to_string(),
        ];
        KEYS.iter().map(|k| k.to_string()).zip(values).collect()
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
