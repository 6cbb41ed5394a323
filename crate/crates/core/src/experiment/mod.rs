//! Config-driven runs: dataset construction, the round loop, and the
//! `rounds.csv` / `summary.json` artifacts.

mod config;
mod report;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::datasets::{load_idx, noniid_split, synth_blobs, Dataset};
use crate::detrng::{derive_key, RngStream};
use crate::error::{Error, Result};
use crate::federation::{FederatedData, RoundRecord, Simulation};
use crate::nn::ArchSpec;

pub use config::{ConfigError, DataSource, ExperimentConfig};
pub use report::{
    compare, reference_configurations, verify_accounting, verify_config_accounting, AccountingReport, ReferenceCheck,
};

/// Relative output paths are resolved under this directory when it is set.
pub const OUTPUT_ROOT_ENV: &str = "EVOFED_OUTPUT_ROOT";

pub const ROUNDS_FILE: &str = "rounds.csv";
pub const SUMMARY_FILE: &str = "summary.json";

/// Accuracy levels reported in the bytes-to-target table.
pub const TARGETS: [f64; 6] = [0.5, 0.6, 0.7, 0.8, 0.9, 0.95];

const TAG_DATA: u64 = 0xDA7A;
const TAG_SPLIT: u64 = 0x5917;
const TAG_SHARD: u64 = 0x5A4D;
const TAG_SUBSET: u64 = 0x5B5E;

/// One line of `rounds.csv`. Byte columns are cumulative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRow {
    pub t: u32,
    pub accuracy: Option<f64>,
    pub loss: Option<f64>,
    pub uplink_bytes_total: u64,
    pub downlink_bytes_total: u64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetHit {
    pub target: f64,
    /// First evaluated round reaching the target.
    pub round: Option<u32>,
    pub uplink_bytes: Option<u64>,
    pub total_bytes: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: String,
    pub param_count: usize,
    pub rounds: u32,
    pub final_accuracy: f64,
    pub max_accuracy: f64,
    pub final_loss: f64,
    pub total_uplink_bytes: u64,
    pub total_downlink_bytes: u64,
    pub bytes_to_target: Vec<TargetHit>,
    pub config: BTreeMap<String, String>,
    pub code_version: String,
    pub notes: Vec<String>,
}

/// Builds the architecture and per-client shards described by `cfg`.
pub fn build_data(cfg: &ExperimentConfig) -> Result<FederatedData> {
    let (train, test) = match &cfg.data {
        DataSource::Blobs {
            samples,
            dim,
            classes,
            spread,
            test_fraction,
        } => {
            let all = synth_blobs(derive_key(cfg.seed, TAG_DATA), *samples, *dim, *classes, *spread)?;
            let (train, test) = all.split_holdout(*test_fraction, derive_key(cfg.seed, TAG_SPLIT))?;
            (train, test)
        }
        DataSource::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            subset,
        } => {
            let mut train = load_idx(train_images, train_labels)?;
            let test = load_idx(test_images, test_labels)?;
            if *subset > 0 && *subset < train.len() {
                let mut rng = RngStream::new(derive_key(cfg.seed, TAG_SUBSET));
                let mut picked = rng.permutation(train.len());
                picked.truncate(*subset);
                picked.sort_unstable();
                train = train.subset(&picked)?;
            }
            if train.dim() != test.dim() {
                return Err(Error::DimensionMismatch {
                    context: "test image size",
                    expected: train.dim(),
                    actual: test.dim(),
                });
            }
            (train, test)
        }
    };
    let (train, test) = if cfg.center {
        let means = train.feature_means();
        (train.centered(&means)?, test.centered(&means)?)
    } else {
        (train, test)
    };
    let classes = train.classes().max(test.classes());
    let arch = Arc::new(ArchSpec::mlp(train.dim(), &cfg.hidden, classes, cfg.activation)?);
    cfg.validate_for_params(arch.param_count())?;
    let plan = noniid_split(
        &train,
        cfg.clients,
        cfg.classes_per_client,
        derive_key(cfg.seed, TAG_SHARD),
    )?;
    let shards = plan
        .materialize(&train)?
        .into_iter()
        .map(Arc::new)
        .collect::<Vec<Arc<Dataset>>>();
    Ok(FederatedData {
        arch,
        shards,
        train: Arc::new(train),
        test: Arc::new(test),
    })
}

/// `path` itself when absolute, else under `$EVOFED_OUTPUT_ROOT` if set.
pub fn resolve_output(path: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if path.is_relative() && !root.is_empty() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

pub fn rows_from_records(records: &[RoundRecord]) -> Vec<RoundRow> {
    let (mut up, mut down) = (0u64, 0u64);
    records
        .iter()
        .map(|r| {
            up += r.uplink_total();
            down += r.downlink_bytes;
            RoundRow {
                t: r.round,
                accuracy: r.accuracy,
                loss: r.loss,
                uplink_bytes_total: up,
                downlink_bytes_total: down,
                wall_ms: r.wall_ms,
            }
        })
        .collect()
}

pub fn summarize(cfg: &ExperimentConfig, param_count: usize, rows: &[RoundRow]) -> RunSummary {
    let evaluated: Vec<&RoundRow> = rows.iter().filter(|r| r.accuracy.is_some()).collect();
    let last = rows.last();
    let bytes_to_target = TARGETS
        .iter()
        .map(|&target| {
            let hit = evaluated.iter().find(|r| r.accuracy.unwrap_or(0.0) >= target);
            TargetHit {
                target,
                round: hit.map(|r| r.t),
                uplink_bytes: hit.map(|r| r.uplink_bytes_total),
                total_bytes: hit.map(|r| r.uplink_bytes_total + r.downlink_bytes_total),
            }
        })
        .collect();
    let mut notes = vec!["byte columns are cumulative; uplink counts encoded payload bytes only".to_string()];
    if cfg.method.exchanges_fitness() {
        notes.push("the final round includes the download that resynchronizes every client".to_string());
    }
    RunSummary {
        method: cfg.method.name().to_string(),
        param_count,
        rounds: cfg.rounds,
        final_accuracy: evaluated.last().and_then(|r| r.accuracy).unwrap_or(0.0),
        max_accuracy: evaluated.iter().filter_map(|r| r.accuracy).fold(0.0, f64::max),
        final_loss: evaluated.last().and_then(|r| r.loss).unwrap_or(f64::NAN),
        total_uplink_bytes: last.map_or(0, |r| r.uplink_bytes_total),
        total_downlink_bytes: last.map_or(0, |r| r.downlink_bytes_total),
        bytes_to_target,
        config: cfg.echo(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        notes,
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_rounds(path: &Path, rows: &[RoundRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "t",
        "accuracy",
        "loss",
        "uplink_bytes_total",
        "downlink_bytes_total",
        "wall_ms",
    ])?;
    for r in rows {
        w.write_record([
            r.t.to_string(),
            fmt_opt(r.accuracy),
            fmt_opt(r.loss),
            r.uplink_bytes_total.to_string(),
            r.downlink_bytes_total.to_string(),
            format!("{:.3}", r.wall_ms),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_rounds(path: &Path) -> Result<Vec<RoundRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let parse_f = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse()
                    .map(Some)
                    .map_err(|_| Error::invalid("rounds.csv", format!("bad number `{s}` in {}", path.display())))
            }
        };
        let parse_u = |s: &str| -> Result<u64> {
            s.parse()
                .map_err(|_| Error::invalid("rounds.csv", format!("bad integer `{s}` in {}", path.display())))
        };
        rows.push(RoundRow {
            t: parse_u(field(0))? as u32,
            accuracy: parse_f(field(1))?,
            loss: parse_f(field(2))?,
            uplink_bytes_total: parse_u(field(3))?,
            downlink_bytes_total: parse_u(field(4))?,
            wall_ms: parse_f(field(5))?.unwrap_or(0.0),
        });
    }
    Ok(rows)
}

pub fn read_summary(dir: &Path) -> Result<RunSummary> {
    let path = dir.join(SUMMARY_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub output: PathBuf,
    pub rows: Vec<RoundRow>,
    pub summary: RunSummary,
}

/// Runs `cfg` and writes its artifacts to `output` (or the configured path).
/// `threads` overrides the configured worker count.
pub fn run_experiment(cfg: &ExperimentConfig, output: Option<&Path>, threads: Option<usize>) -> Result<RunOutcome> {
    cfg.validate()?;
    let data = build_data(cfg)?;
    let param_count = data.arch.param_count();
    let threads = threads.unwrap_or(cfg.threads);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::invalid("threads", e.to_string()))?;
    let records =
        pool.install(|| -> Result<Vec<RoundRecord>> { Ok(Simulation::new(cfg.federation(), data)?.run()?.0) })?;
    let rows = rows_from_records(&records);
    let summary = summarize(cfg, param_count, &rows);

    let out = resolve_output(output.unwrap_or(&cfg.output));
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write_rounds(&out.join(ROUNDS_FILE), &rows)?;
    let summary_path = out.join(SUMMARY_FILE);
    let json = serde_json::to_string_pretty(&summary)?;
    std::fs::write(&summary_path, json + "\n").map_err(|e| Error::io(&summary_path, e))?;
    Ok(RunOutcome {
        output: out,
        rows,
        summary,
    })
}

pub fn run_config_file(path: &Path, output: Option<&Path>, threads: Option<usize>) -> Result<RunOutcome> {
    run_experiment(&ExperimentConfig::from_file(path)?, output, threads)
}
