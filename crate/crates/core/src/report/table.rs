//! Result rows in the layout of a pruning results table, plus run manifests.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::accounting::{count_flops, count_params, human_count};
use super::checkpoint::sha256_hex;
use super::config::RunConfig;
use crate::error::{Error, FormatError, Result};
use crate::nn::NetworkSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub method: String,
    /// Surviving filters per prunable layer, e.g. `2-8-77`.
    pub filters: String,
    pub flops: usize,
    pub params: usize,
    pub baseline_flops: usize,
    pub baseline_params: usize,
    pub top1_error_before: f64,
    pub top1_error_after: f64,
    pub latency_baseline_ms: f64,
    pub latency_pruned_ms: f64,
    pub speedup: f64,
    pub batch_size: usize,
    pub threads: usize,
    /// Outer iterations per solved layer, e.g. `4/4/2`.
    pub solver_iterations: String,
    pub solver_converged: bool,
}

impl PruneReport {
    /// Fills the accounting columns from the two specs. Latency and error
    /// columns start at zero.
    pub fn new(method: impl Into<String>, baseline: &NetworkSpec, pruned: &NetworkSpec, prunable: &[&str]) -> Result<Self> {
        Ok(Self {
            method: method.into(),
            filters: filter_string(pruned, prunable)?,
            flops: count_flops(pruned)?,
            params: count_params(pruned)?,
            baseline_flops: count_flops(baseline)?,
            baseline_params: count_params(baseline)?,
            top1_error_before: 0.0,
            top1_error_after: 0.0,
            latency_baseline_ms: 0.0,
            latency_pruned_ms: 0.0,
            speedup: 1.0,
            batch_size: 0,
            threads: 0,
            solver_iterations: String::new(),
            solver_converged: true,
        })
    }

    pub fn set_latency(&mut self, baseline: &super::LatencyStats, pruned: &super::LatencyStats) {
        self.latency_baseline_ms = baseline.median_ms;
        self.latency_pruned_ms = pruned.median_ms;
        self.speedup = pruned.speedup_over(baseline);
        self.batch_size = pruned.batch_size;
        self.threads = pruned.threads;
    }

    /// Checks the accounting columns against `pruned` and the speedup
    /// against the two latencies.
    pub fn verify(&self, baseline: &NetworkSpec, pruned: &NetworkSpec) -> Result<()> {
        let mismatch = |what: &str| Err(Error::Format(FormatError::ShapeMismatch(format!("report {what} disagrees"))));
        if self.flops != count_flops(pruned)? || self.baseline_flops != count_flops(baseline)? {
            return mismatch("FLOPs");
        }
        if self.params != count_params(pruned)? || self.baseline_params != count_params(baseline)? {
            return mismatch("parameter count");
        }
        if self.latency_pruned_ms > 0.0 {
            let expected = self.latency_baseline_ms / self.latency_pruned_ms;
            if (self.speedup - expected).abs() > 1e-9 * expected.max(1.0) {
                return mismatch("speedup");
            }
        }
        Ok(())
    }
}

/// `a-b-c` widths of the named layers.
pub fn filter_string(spec: &NetworkSpec, layers: &[&str]) -> Result<String> {
    let widths = layers
        .iter()
        .map(|name| {
            let i = spec.index_of(name)?;
            Ok(spec.width(i).unwrap_or(0).to_string())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(widths.join("-"))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(FormatError::Csv(e.to_string()))
}

/// Any serializable rows as CSV with a header line.
pub fn to_csv_string<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| csv_err(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn from_csv_str<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .map(|r| r.map_err(csv_err))
        .collect()
}

pub fn write_csv<T: Serialize>(rows: &[T], path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_csv_string(rows)?)?;
    Ok(())
}

/// Aligned plain-text table, one row per report.
pub fn to_text(reports: &[PruneReport]) -> String {
    let header = ["Method", "#Filter/Node", "FLOPs", "#Param.", "CPU (ms)", "Speedup", "Top-1 Err.", "Err. Inc."];
    let rows: Vec<[String; 8]> = reports
        .iter()
        .map(|r| {
            [
                r.method.clone(),
                r.filters.clone(),
                human_count(r.flops),
                human_count(r.params),
                format!("{:.2}", r.latency_pruned_ms),
                format!("{:.2}x", r.speedup),
                format!("{:.2}%", 100.0 * r.top1_error_after),
                format!("{:+.2}%", 100.0 * (r.top1_error_after - r.top1_error_before)),
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let mut line = |cells: &[&str]| {
        let padded: Vec<String> = cells.iter().zip(widths).map(|(c, w)| format!("{c:<w$}")).collect();
        let _ = writeln!(out, "{}", padded.join("  ").trim_end());
    };
    line(&header);
    for row in &rows {
        line(&row.iter().map(String::as_str).collect::<Vec<_>>());
    }
    out
}

/// Everything needed to rerun a command and check its output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub config: RunConfig,
    pub checkpoint: String,
    pub checkpoint_sha256: String,
}

impl RunManifest {
    /// Hashes the checkpoint file as it is on disk now.
    pub fn new(command: impl Into<String>, config: &RunConfig, checkpoint: impl AsRef<Path>) -> Result<Self> {
        let path = checkpoint.as_ref();
        Ok(Self {
            command: command.into(),
            seed: config.seed,
            config: config.clone(),
            checkpoint: path.display().to_string(),
            checkpoint_sha256: sha256_hex(&std::fs::read(path)?),
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(FormatError::Header(e.to_string())))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}
