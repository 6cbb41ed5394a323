use std::fmt;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{build_data, read_rounds, read_summary, ExperimentConfig, RoundRow, ROUNDS_FILE};
use crate::baselines::sparse_keep_count;
use crate::error::{Error, Result};
use crate::federation::Method;
use crate::fitness_codec::{byte_size, CodecScheme};

/// Per-message uplink size against sending the model as f32.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AccountingReport {
    pub param_count: usize,
    pub scheme: String,
    pub message_bytes: usize,
    pub model_bytes: usize,
    /// `1 - message_bytes / model_bytes`.
    pub compression: f64,
    /// Set when the message is no smaller than the model.
    pub degenerate: bool,
}

impl AccountingReport {
    fn new(param_count: usize, scheme: String, message_bytes: usize) -> Self {
        let model_bytes = 4 * param_count;
        let compression = 1.0 - message_bytes as f64 / model_bytes as f64;
        Self {
            param_count,
            scheme,
            message_bytes,
            model_bytes,
            compression,
            degenerate: compression <= 0.0,
        }
    }
}

impl fmt::Display for AccountingReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: {} params, message {} B vs model {} B, compression {:.4}%",
            self.scheme,
            self.param_count,
            self.message_bytes,
            self.model_bytes,
            self.compression * 100.0
        )?;
        if self.degenerate {
            write!(f, " (degenerate: no saving)")?;
        }
        Ok(())
    }
}

/// Fitness-message accounting for `N` members, `K` partitions and `scheme`.
pub fn verify_accounting(
    param_count: usize,
    population: usize,
    partitions: usize,
    scheme: CodecScheme,
) -> Result<AccountingReport> {
    if param_count == 0 {
        return Err(Error::invalid("param_count", "must be >= 1"));
    }
    if partitions == 0 || partitions > param_count {
        return Err(Error::invalid("partitions", "must be in [1, param_count]"));
    }
    scheme.validate(population)?;
    Ok(AccountingReport::new(
        param_count,
        format!("{scheme} N={population} K={partitions}"),
        byte_size(scheme, population, partitions),
    ))
}

/// Accounting for whatever the configured method uploads per client.
pub fn verify_config_accounting(cfg: &ExperimentConfig) -> Result<AccountingReport> {
    let data = build_data(cfg)?;
    let p = data.arch.param_count();
    match cfg.method {
        Method::Evofed | Method::PlainEs => verify_accounting(p, cfg.population, cfg.partitions, cfg.codec),
        Method::Fedavg => Ok(AccountingReport::new(p, "fedavg".into(), 4 * p)),
        Method::FedSparse => Ok(AccountingReport::new(
            p,
            format!("fed-sparse rate={}", cfg.sparse_rate),
            8 * sparse_keep_count(p, cfg.sparse_rate),
        )),
        Method::FedQuant => {
            let layers = data.arch.layer_ranges().len();
            Ok(AccountingReport::new(
                p,
                format!("fed-quant bits={}", cfg.quant_bits),
                (p * cfg.quant_bits as usize).div_ceil(8) + 8 * layers,
            ))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReferenceCheck {
    pub label: &'static str,
    pub claimed_compression: f64,
    pub report: AccountingReport,
    pub reproduced: bool,
}

/// Published compression figures for two reference model sizes.
pub fn reference_configurations() -> Result<Vec<ReferenceCheck>> {
    let cases = [
        ("FMNIST CNN, 11k params, N=128, K=1", 11_000, 128, 1, 0.988),
        ("CIFAR-10 CNN, 2.3M params, N=32, K=50", 2_300_000, 32, 50, 0.997),
    ];
    cases
        .into_iter()
        .map(|(label, p, n, k, claimed)| {
            let report = verify_accounting(p, n, k, CodecScheme::Raw32)?;
            Ok(ReferenceCheck {
                label,
                claimed_compression: claimed,
                reproduced: report.compression >= claimed,
                report,
            })
        })
        .collect()
}

struct Run {
    label: String,
    rows: Vec<RoundRow>,
}

fn load_run(dir: &Path) -> Result<Run> {
    // Checked first so a missing summary is reported against the directory.
    read_summary(dir)?;
    let rows = read_rounds(&dir.join(ROUNDS_FILE))?;
    let label = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    Ok(Run { label, rows })
}

/// Writes one row per round with accuracy and cumulative bytes of every run.
pub fn compare(dirs: &[PathBuf], out: &Path) -> Result<()> {
    if dirs.len() < 2 {
        return Err(Error::invalid(
            "dirs",
            format!("need at least two run directories, got {}", dirs.len()),
        ));
    }
    let mut runs = dirs.iter().map(|d| load_run(d)).collect::<Result<Vec<_>>>()?;
    for i in 0..runs.len() {
        let dupes = runs[..i].iter().filter(|r| r.label == runs[i].label).count();
        if dupes > 0 {
            runs[i].label = format!("{}#{}", runs[i].label, dupes + 1);
        }
    }
    let mut w = csv::Writer::from_path(out)?;
    let mut header = vec!["t".to_string()];
    for r in &runs {
        header.push(format!("{}:accuracy", r.label));
        header.push(format!("{}:uplink_bytes_total", r.label));
        header.push(format!("{}:downlink_bytes_total", r.label));
    }
    w.write_record(&header)?;
    let longest = runs.iter().map(|r| r.rows.len()).max().unwrap_or(0);
    for i in 0..longest {
        let t = runs.iter().find_map(|r| r.rows.get(i)).map_or(i as u32, |row| row.t);
        let mut line = vec![t.to_string()];
        for r in &runs {
            match r.rows.get(i) {
                Some(row) => {
                    line.push(row.accuracy.map(|a| a.to_string()).unwrap_or_default());
                    line.push(row.uplink_bytes_total.to_string());
                    line.push(row.downlink_bytes_total.to_string());
                }
                None => line.extend([String::new(), String::new(), String::new()]),
            }
        }
        w.write_record(&line)?;
    }
    w.flush().map_err(|e| Error::io(out, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_sizes_reproduce() {
        for check in reference_configurations().unwrap() {
            assert!(check.reproduced, "{}: {}", check.label, check.report);
        }
    }

    #[test]
    fn tiny_model_is_degenerate() {
        let r = verify_accounting(10, 64, 1, CodecScheme::Raw32).unwrap();
        assert!(r.degenerate);
        assert!(r.to_string().contains("degenerate"));
    }
}
