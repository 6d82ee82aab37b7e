//! Benchmark tables: CSV with full precision, Markdown in the familiar
//! `mean ± ci` percent layout.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::classifier::TrainConfig;
use crate::ensembles::MethodSpec;

pub const CSV_HEADER: &str = "dataset,method,ways,shots,mean,ci95,episodes,seed,config_fingerprint";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("report has no rows")]
    EmptyReport,
    #[error("row {row}: {reason}")]
    InvalidRow { row: usize, reason: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("unexpected csv header {0:?}")]
    BadHeader(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub dataset: String,
    pub method: String,
    pub ways: usize,
    pub shots: usize,
    pub mean: f64,
    pub ci95: f64,
    pub episodes: usize,
    pub seed: u64,
    pub config_fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub rows: Vec<ReportRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Markdown,
}

/// First 16 hex digits of SHA-256 over the JSON of `(config, method)`.
pub fn config_fingerprint(config: &TrainConfig, method: &MethodSpec) -> String {
    let json = serde_json::to_string(&(config, method)).expect("config serializes");
    let digest = Sha256::digest(json.as_bytes());
    hex::encode(&digest[..8])
}

/// `0.689, 0.009` renders as `68.9 ± 0.9`.
pub fn percent_cell(mean: f64, ci95: f64) -> String {
    format!("{:.1} ± {:.1}", mean * 100.0, ci95 * 100.0)
}

impl BenchmarkReport {
    pub fn push(&mut self, row: ReportRow) {
        self.rows.push(row);
    }

    fn check(&self) -> Result<(), ReportError> {
        if self.rows.is_empty() {
            return Err(ReportError::EmptyReport);
        }
        for (i, r) in self.rows.iter().enumerate() {
            let reason = if !(0.0..=1.0).contains(&r.mean) {
                "mean outside [0, 1]"
            } else if !(r.ci95 >= 0.0 && r.ci95.is_finite()) {
                "ci95 must be finite and non-negative"
            } else {
                continue;
            };
            return Err(ReportError::InvalidRow {
                row: i,
                reason: reason.into(),
            });
        }
        Ok(())
    }

    pub fn emit(&self, format: Format) -> Result<String, ReportError> {
        match format {
            Format::Csv => self.to_csv(),
            Format::Markdown => self.to_markdown(),
        }
    }

    pub fn to_csv(&self) -> Result<String, ReportError> {
        self.check()?;
        let mut writer = csv::WriterBuilder::new().has_headers(true).from_writer(Vec::new());
        for row in &self.rows {
            writer.serialize(row)?;
        }
        let bytes = writer.into_inner().map_err(|e| csv::Error::from(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self, ReportError> {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let header = reader.headers()?.iter().collect::<Vec<_>>().join(",");
        if header != CSV_HEADER {
            return Err(ReportError::BadHeader(header));
        }
        let rows = reader.deserialize().collect::<Result<Vec<ReportRow>, _>>()?;
        Ok(Self { rows })
    }

    /// One line per row, columns in CSV order, accuracy as a percent cell.
    pub fn to_markdown(&self) -> Result<String, ReportError> {
        self.check()?;
        let mut out = String::new();
        out.push_str("| dataset | method | ways | shots | accuracy (%) | episodes | seed | config |\n");
        out.push_str("|---|---|---:|---:|---:|---:|---:|---|\n");
        for r in &self.rows {
            writeln!(
                out,
                "| {} | {} | {} | {} | {} | {} | {} | {} |",
                r.dataset,
                r.method,
                r.ways,
                r.shots,
                percent_cell(r.mean, r.ci95),
                r.episodes,
                r.seed,
                r.config_fingerprint
            )
            .unwrap();
        }
        Ok(out)
    }

    /// Methods as rows and datasets as columns, one table per (ways, shots).
    pub fn to_markdown_grid(&self) -> Result<String, ReportError> {
        self.check()?;
        let settings: BTreeSet<(usize, usize)> = self.rows.iter().map(|r| (r.ways, r.shots)).collect();
        let mut datasets: Vec<&str> = Vec::new();
        let mut methods: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !datasets.contains(&r.dataset.as_str()) {
                datasets.push(&r.dataset);
            }
            if !methods.contains(&r.method.as_str()) {
                methods.push(&r.method);
            }
        }
        let mut out = String::new();
        for (ways, shots) in settings {
            writeln!(out, "**{ways}-way, {shots}-shot**\n").unwrap();
            writeln!(out, "| method | {} |", datasets.join(" | ")).unwrap();
            writeln!(out, "|---|{}", "---:|".repeat(datasets.len())).unwrap();
            for method in &methods {
                let cells: Vec<String> = datasets
                    .iter()
                    .map(|d| {
                        self.rows
                            .iter()
                            .find(|r| r.ways == ways && r.shots == shots && r.method == *method && r.dataset == *d)
                            .map_or_else(|| "-".to_string(), |r| percent_cell(r.mean, r.ci95))
                    })
                    .collect();
                if cells.iter().any(|c| c != "-") {
                    writeln!(out, "| {method} | {} |", cells.join(" | ")).unwrap();
                }
            }
            out.push('\n');
        }
        Ok(out)
    }
}
