//! Command-line front end: `dl4nd <command> [--config FILE] [--set k=v]...`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::Config;
use crate::datagen::{load_dataset, save_dataset, Dataset};
use crate::eval::{self, GmmSummary, Method, ReportFormat, REPORT_FORMAT_VERSION};
use crate::loss_split::{fit_gmm, split, LossSplit};
use crate::model::{accuracy, load_checkpoint, save_checkpoint};
use crate::relabel::{distance_stats, DistanceStats, MeanSource, RelabelRecord, RelabelSummary};
use crate::trainer::{refine_labels, Snapshot};
use crate::{Error, Result, SampleId};

#[derive(Debug, Parser)]
#[command(name = "dl4nd", version, about = "Cross-domain label-noise refinement and experiment harness")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Override one key; repeatable, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,

    /// Seed for data generation, noise injection and training.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output file (stdout when omitted; required by `train`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Report format: structured (JSON) or tabular (CSV).
    #[arg(long, global = true, default_value = "structured")]
    pub format: String,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a noisy synthetic dataset.
    Gen,
    /// Train with `train.method` and write a checkpoint plus a run report.
    Train {
        /// Dataset file; generated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Run report path (default: `<out>.report.json`).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Split, build proxies and relabel using a trained checkpoint.
    Refine {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Leave-one-domain-out evaluation of every method in `eval.methods`.
    Eval,
    /// Leave-one-domain-out evaluation at every ratio in `eval.ratios`.
    Sweep,
    /// Distance distributions around (class, domain) group means.
    Distances {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "low-loss")]
        mean_source: MeanSourceArg,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MeanSourceArg {
    All,
    LowLoss,
}

pub fn resolve_config(cli: &Cli) -> Result<Config> {
    let mut config = Config::default();
    if let Some(path) = &cli.config {
        config.apply_file(path)?;
    }
    if let Some(seed) = cli.seed {
        config.set_seed(seed);
    }
    for a in &cli.set {
        config.set_assignment(a)?;
    }
    config.validate()?;
    Ok(config)
}

fn format_of(cli: &Cli) -> Result<ReportFormat> {
    cli.format.parse().map_err(|m: String| Error::config("--format", m))
}

fn write_output(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| Error::io("<stdout>", e)),
    }
}

fn json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

fn csv_text(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).unwrap();
    for r in rows {
        w.write_record(r).unwrap();
    }
    String::from_utf8(w.into_inner().unwrap()).unwrap()
}

fn config_echo(config: &Config) -> BTreeMap<String, String> {
    config.entries().into_iter().collect()
}

fn dataset_for(config: &Config, path: Option<&Path>) -> Result<Dataset> {
    match path {
        Some(p) => load_dataset(p),
        None => {
            let e = &config.experiment;
            let clean = crate::datagen::generate(&e.domain)?;
            crate::datagen::inject_pairwise_noise(&clean, &e.noise)
        }
    }
}

#[derive(Debug, Serialize)]
struct RefinementReport {
    step: usize,
    gmm: Option<GmmSummary>,
    fallback: Option<String>,
    low_loss: usize,
    high_loss: usize,
    summary: RelabelSummary,
}

#[derive(Debug, Serialize)]
struct TrainReport {
    format_version: u32,
    command: &'static str,
    config: BTreeMap<String, String>,
    method: Method,
    dataset_checksum: String,
    steps: usize,
    final_loss: Option<f64>,
    swad_checkpoints: usize,
    /// Accuracy against the true labels, when the dataset has them.
    train_accuracy: Option<f64>,
    refinement: Option<RefinementReport>,
}

#[derive(Debug, Serialize)]
struct RefineReport {
    format_version: u32,
    command: &'static str,
    config: BTreeMap<String, String>,
    dataset_checksum: String,
    refinement: RefinementReport,
    relabeled_fraction: f64,
    records: Vec<RelabelRecord>,
}

#[derive(Debug, Serialize)]
struct DistancesReport {
    format_version: u32,
    command: &'static str,
    config: BTreeMap<String, String>,
    dataset_checksum: String,
    stats: DistanceStats,
}

fn cmd_gen(cli: &Cli, config: &Config) -> Result<()> {
    let ds = dataset_for(config, None)?;
    match &cli.out {
        Some(p) => save_dataset(&ds, p),
        None => write_output(None, &ds.to_text()),
    }
}

fn cmd_train(cli: &Cli, config: &Config, data: Option<&Path>, report: Option<&Path>) -> Result<()> {
    let out = cli
        .out
        .as_deref()
        .ok_or_else(|| Error::config("--out", "train needs a checkpoint path"))?;
    let ds = dataset_for(config, data)?;
    let run = config.method.run(&config.experiment.train, &ds)?;
    save_checkpoint(&run.params, out)?;
    let rep = TrainReport {
        format_version: REPORT_FORMAT_VERSION,
        command: "train",
        config: config_echo(config),
        method: config.method,
        dataset_checksum: ds.checksum(),
        steps: run.loss_history.len(),
        final_loss: run.loss_history.last().copied(),
        swad_checkpoints: run.swad_checkpoints,
        train_accuracy: accuracy(&run.params, &ds).ok(),
        refinement: run.refinement.as_ref().map(|r| RefinementReport {
            step: r.step,
            gmm: r.gmm.as_ref().map(GmmSummary::from),
            fallback: r.fallback.clone(),
            low_loss: r.split.low_ids.len(),
            high_loss: r.split.high_ids.len(),
            summary: r.outcome.summary.clone(),
        }),
    };
    let report_path = report
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from(format!("{}.report.json", out.display())));
    write_output(Some(&report_path), &json(&rep))
}

fn cmd_refine(cli: &Cli, config: &Config, checkpoint: &Path, data: Option<&Path>) -> Result<()> {
    let params = load_checkpoint(checkpoint)?;
    let ds = dataset_for(config, data)?;
    let snapshot = Snapshot::capture(&params, &ds)?;
    let r = refine_labels(snapshot, &ds, &config.experiment.train, 0)?;
    let records = r.outcome.records.clone();
    let rep = RefineReport {
        format_version: REPORT_FORMAT_VERSION,
        command: "refine",
        config: config_echo(config),
        dataset_checksum: ds.checksum(),
        relabeled_fraction: r.outcome.summary.relabeled as f64 / ds.len() as f64,
        refinement: RefinementReport {
            step: r.step,
            gmm: r.gmm.as_ref().map(GmmSummary::from),
            fallback: r.fallback.clone(),
            low_loss: r.split.low_ids.len(),
            high_loss: r.split.high_ids.len(),
            summary: r.outcome.summary.clone(),
        },
        records,
    };
    let text = match format_of(cli)? {
        ReportFormat::Structured => json(&rep),
        ReportFormat::Tabular => csv_text(
            &["id", "old_label", "new_label", "decision", "domains_used"],
            rep.records.iter().map(|r| {
                vec![
                    r.id.to_string(),
                    r.old_label.to_string(),
                    r.new_label.to_string(),
                    format!("{:?}", r.decision).to_lowercase(),
                    r.domains_used.to_string(),
                ]
            }),
        ),
    };
    write_output(cli.out.as_deref(), &text)
}

fn emit(cli: &Cli, report: &eval::Report) -> Result<()> {
    let format = format_of(cli)?;
    match &cli.out {
        Some(p) => eval::emit_report(report, p, format),
        None => write_output(
            None,
            &match format {
                ReportFormat::Structured => eval::to_structured(report),
                ReportFormat::Tabular => eval::to_tabular(report),
            },
        ),
    }
}

fn summary_cells(s: &Option<crate::relabel::Summary>) -> Vec<String> {
    match s {
        Some(s) => vec![
            s.count.to_string(),
            format!("{:?}", s.min),
            format!("{:?}", s.q1),
            format!("{:?}", s.median),
            format!("{:?}", s.q3),
            format!("{:?}", s.max),
        ],
        None => std::iter::once("0".to_string())
            .chain(std::iter::repeat(eval::UNAVAILABLE.to_string()).take(5))
            .collect(),
    }
}

fn cmd_distances(cli: &Cli, config: &Config, checkpoint: &Path, data: Option<&Path>, source: MeanSourceArg) -> Result<()> {
    let params = load_checkpoint(checkpoint)?;
    let ds = dataset_for(config, data)?;
    let snapshot = Snapshot::capture(&params, &ds)?;
    let low: Option<std::collections::BTreeSet<SampleId>> = match source {
        MeanSourceArg::All => None,
        MeanSourceArg::LowLoss => {
            let gmm_cfg = &config.experiment.train.gmm;
            let s = match fit_gmm(&snapshot.losses, gmm_cfg) {
                Ok(g) => split(&snapshot.losses, &g, gmm_cfg.threshold),
                Err(Error::DegenerateFit(_)) => LossSplit::all_low(ds.ids()),
                Err(e) => return Err(e),
            };
            Some(s.low_ids)
        }
    };
    let mean_source = if low.is_some() { MeanSource::LowLossOnly } else { MeanSource::All };
    let mut pairs: Vec<(usize, usize)> = config
        .experiment
        .noise
        .pairs
        .iter()
        .map(|&(a, b)| (a.min(b), a.max(b)))
        .collect();
    pairs.sort_unstable();
    pairs.dedup();
    let stats = distance_stats(&snapshot.features, &ds, mean_source, low.as_ref(), &pairs)?;
    let text = match format_of(cli)? {
        ReportFormat::Structured => json(&DistancesReport {
            format_version: REPORT_FORMAT_VERSION,
            command: "distances",
            config: config_echo(config),
            dataset_checksum: ds.checksum(),
            stats,
        }),
        ReportFormat::Tabular => {
            let mut rows = Vec::new();
            for c in &stats.cells {
                let mut r = vec!["cell".into(), c.class.to_string(), c.domain.to_string()];
                r.extend(summary_cells(&Some(c.summary.clone())));
                rows.push(r);
            }
            for p in &stats.pairs {
                for (kind, s) in [("cross_class", &p.cross_class), ("cross_domain", &p.cross_domain)] {
                    let mut r = vec![kind.into(), p.class_a.to_string(), p.class_b.to_string()];
                    r.extend(summary_cells(s));
                    rows.push(r);
                }
            }
            csv_text(&["kind", "a", "b", "count", "min", "q1", "median", "q3", "max"], rows)
        }
    };
    write_output(cli.out.as_deref(), &text)
}

pub fn run(cli: &Cli) -> Result<()> {
    let config = resolve_config(cli)?;
    format_of(cli)?;
    match &cli.command {
        Command::Gen => cmd_gen(cli, &config),
        Command::Train { data, report } => cmd_train(cli, &config, data.as_deref(), report.as_deref()),
        Command::Refine { checkpoint, data } => cmd_refine(cli, &config, checkpoint, data.as_deref()),
        Command::Eval => emit(cli, &eval::leave_one_out(&config.experiment)?),
        Command::Sweep => emit(cli, &eval::noise_sweep(&config.experiment)?),
        Command::Distances {
            checkpoint,
            data,
            mean_source,
        } => cmd_distances(cli, &config, checkpoint, data.as_deref(), *mean_source),
    }
}

/// Process exit status for an error: 2 for configuration problems, 1 for
/// everything else.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } => 2,
        _ => 1,
    }
}

/// One-line JSON description of an error, for stderr.
pub fn error_line(err: &Error) -> String {
    let value = match err {
        Error::Config { key, message } => serde_json::json!({
            "error": "config",
            "key": key,
            "message": message,
        }),
        other => serde_json::json!({
            "error": "runtime",
            "message": other.to_string(),
        }),
    };
    value.to_string()
}
