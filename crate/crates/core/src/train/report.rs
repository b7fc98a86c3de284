//! Metrics records and report rendering.
//!
//! The records file is line-oriented: a timestamp header (the only
//! non-deterministic line), config echo lines, a CSV header, then one row
//! per (fold, epoch, split).

use std::collections::BTreeMap;
use std::path::Path;

use super::RunReport;
use crate::error::{Error, Result};

pub const METRICS_HEADER_PREFIX: &str = "# lfds-metrics v1";

pub fn metrics_file_name(dataset: &str, head: &str, seed: u64) -> String {
    format!("{dataset}_{head}_{seed}.metrics")
}

/// Machine-readable records. Everything after the first line is a pure
/// function of the run.
pub fn render_metrics(report: &RunReport, timestamp: &str) -> String {
    let mut out = String::new();
    out.push_str(&format!("{METRICS_HEADER_PREFIX} generated_at={timestamp}\n"));
    for (k, v) in &report.config_echo {
        out.push_str(&format!("# config {k}={v}\n"));
    }
    out.push_str("fold,epoch,split,loss,accuracy,lr,penalty\n");
    for fold in &report.folds {
        for r in &fold.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                fold.fold, r.epoch, r.split, r.loss, r.accuracy, r.lr, r.penalty
            ));
        }
    }
    out
}

/// Human-readable run summary in the style of an accuracy table row.
pub fn render_text(report: &RunReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("dataset: {}\n", report.dataset_name));
    out.push_str(&format!("head: {}\n", report.head_name));
    out.push_str(&format!("seed: {}\n", report.seed));
    out.push_str(&format!("folds: {}\n", report.folds.len()));
    out.push_str(&format!("wall_secs: {:.1}\n", report.wall_secs));
    for (k, v) in &report.config_echo {
        out.push_str(&format!("config {k}={v}\n"));
    }
    out.push_str("\nfold  test_accuracy\n");
    for f in &report.folds {
        out.push_str(&format!("{:>4}  {:.4}\n", f.fold, f.test_accuracy));
    }
    out.push_str(&format!(
        "\naccuracy: {:.1} ± {:.1} (mean ± sample std over folds, percent)\n",
        report.mean_accuracy() * 100.0,
        report.std_accuracy() * 100.0
    ));
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub fold: usize,
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
    pub penalty: f64,
}

#[derive(Debug, Clone)]
pub struct MetricsFile {
    pub config: BTreeMap<String, String>,
    pub rows: Vec<MetricsRow>,
}

impl MetricsFile {
    pub fn dataset(&self) -> &str {
        self.config.get("data").map(|s| s.as_str()).unwrap_or("?")
    }

    pub fn head(&self) -> &str {
        self.config
            .get("head.kind")
            .map(|s| s.as_str())
            .unwrap_or("?")
    }

    /// Final test accuracy per fold, in fold order.
    pub fn fold_accuracies(&self) -> Vec<f64> {
        let mut last: BTreeMap<usize, f64> = BTreeMap::new();
        for r in &self.rows {
            if r.split == "test" {
                last.insert(r.fold, r.accuracy);
            }
        }
        last.into_values().collect()
    }
}

pub fn parse_metrics(path: &Path) -> Result<MetricsFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let fname = path.display().to_string();
    let mut config = BTreeMap::new();
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.starts_with(METRICS_HEADER_PREFIX) || line == "fold,epoch,split,loss,accuracy,lr,penalty" {
            continue;
        }
        if let Some(rest) = line.strip_prefix("# config ") {
            if let Some((k, v)) = rest.split_once('=') {
                config.insert(k.to_string(), v.to_string());
            }
            continue;
        }
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 7 {
            return Err(Error::Format {
                file: fname,
                line: idx + 1,
                msg: format!("expected 7 fields, got {}", parts.len()),
            });
        }
        let err = |what: &str| Error::Format {
            file: path.display().to_string(),
            line: idx + 1,
            msg: format!("bad {what}"),
        };
        rows.push(MetricsRow {
            fold: parts[0].parse().map_err(|_| err("fold"))?,
            epoch: parts[1].parse().map_err(|_| err("epoch"))?,
            split: parts[2].to_string(),
            loss: parts[3].parse().map_err(|_| err("loss"))?,
            accuracy: parts[4].parse().map_err(|_| err("accuracy"))?,
            lr: parts[5].parse().map_err(|_| err("lr"))?,
            penalty: parts[6].parse().map_err(|_| err("penalty"))?,
        });
    }
    Ok(MetricsFile { config, rows })
}

/// Aggregated accuracy table: one row per head, one column per dataset,
/// cells `mean ± std` over folds.
pub struct ReportTable {
    pub datasets: Vec<String>,
    pub heads: Vec<String>,
    /// (head index, dataset index) -> (mean, std, folds)
    pub cells: BTreeMap<(usize, usize), (f64, f64, usize)>,
}

pub fn render_table(files: &[MetricsFile]) -> ReportTable {
    let mut datasets: Vec<String> = Vec::new();
    let mut heads: Vec<String> = Vec::new();
    let mut cells = BTreeMap::new();
    for f in files {
        let ds = f.dataset().to_string();
        let head = f.head().to_string();
        let di = datasets.iter().position(|d| *d == ds).unwrap_or_else(|| {
            datasets.push(ds);
            datasets.len() - 1
        });
        let hi = heads.iter().position(|h| *h == head).unwrap_or_else(|| {
            heads.push(head);
            heads.len() - 1
        });
        let accs = f.fold_accuracies();
        let n = accs.len();
        if n == 0 {
            continue;
        }
        let mean = accs.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        cells.insert((hi, di), (mean, std, n));
    }
    ReportTable {
        datasets,
        heads,
        cells,
    }
}

impl ReportTable {
    /// Text layout mirroring an accuracy-comparison table; std is the
    /// sample standard deviation over folds, in percent.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<16}", "head"));
        for d in &self.datasets {
            out.push_str(&format!("  {d:>18}"));
        }
        out.push('\n');
        for (hi, h) in self.heads.iter().enumerate() {
            out.push_str(&format!("{h:<16}"));
            for di in 0..self.datasets.len() {
                match self.cells.get(&(hi, di)) {
                    Some((mean, std, _)) => out.push_str(&format!(
                        "  {:>18}",
                        format!("{:.1} ± {:.1}", mean * 100.0, std * 100.0)
                    )),
                    None => out.push_str(&format!("  {:>18}", "-")),
                }
            }
            out.push('\n');
        }
        out
    }
}
