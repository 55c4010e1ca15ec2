//! Monte-Carlo aggregates and their export.
//!
//! NI unit: each proposal, response or unsolicited notice between an MU and
//! an ES is one interaction. ES↔CS traffic is wired and not counted.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::auction::{Interaction, Link};
use crate::error::{config_err, MarketError, Result};
use crate::futures::RiskEntry;

pub const CSV_COLUMNS: [&str; 11] = [
    "mechanism",
    "runs",
    "seed",
    "sw_mean",
    "sw_stderr",
    "ni_mean",
    "rt_ms",
    "ptct_mean_ms",
    "mu_util",
    "es_util",
    "cs_util",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mechanism: String,
    pub runs: usize,
    pub seed: u64,
    pub sw_mean: f64,
    pub sw_stderr: f64,
    /// Per transaction; futures traffic is amortized over the runs.
    pub ni_mean: f64,
    pub rt_ms: f64,
    pub ptct_mean_ms: f64,
    pub mu_util: f64,
    pub es_util: f64,
    pub cs_util: f64,
    /// Largest per-transaction relative gap between the two SW computations.
    pub sw_identity_gap: f64,
    pub contracts: usize,
    pub risk_table: Vec<RiskEntry>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
}

impl std::str::FromStr for Format {
    type Err = MarketError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(config_err(format!("unknown report format `{other}`"))),
        }
    }
}

impl Format {
    /// From a file extension; CSV unless it ends in `.json`.
    pub fn for_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Format::Json,
            _ => Format::Csv,
        }
    }
}

/// MU↔ES messages in `log`.
pub fn count_interactions(log: &[Interaction]) -> u64 {
    log.iter().filter(|e| e.link == Link::MuEs).count() as u64
}

/// `x` rounded to 6 significant digits.
pub fn sig6(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.5e}").parse().expect("formatted float parses")
}

impl MetricsReport {
    /// Every float rounded to 6 significant digits: what export writes.
    pub fn rounded(&self) -> Self {
        let mut r = self.clone();
        for x in [
            &mut r.sw_mean,
            &mut r.sw_stderr,
            &mut r.ni_mean,
            &mut r.rt_ms,
            &mut r.ptct_mean_ms,
            &mut r.mu_util,
            &mut r.es_util,
            &mut r.cs_util,
            &mut r.sw_identity_gap,
        ] {
            *x = sig6(*x);
        }
        for e in &mut r.risk_table {
            e.value = sig6(e.value);
            e.threshold = sig6(e.threshold);
        }
        r
    }

    fn csv_row(&self) -> Vec<String> {
        let r = self.rounded();
        vec![
            r.mechanism.clone(),
            r.runs.to_string(),
            r.seed.to_string(),
            r.sw_mean.to_string(),
            r.sw_stderr.to_string(),
            r.ni_mean.to_string(),
            r.rt_ms.to_string(),
            r.ptct_mean_ms.to_string(),
            r.mu_util.to_string(),
            r.es_util.to_string(),
            r.cs_util.to_string(),
        ]
    }
}

/// Renders reports as CSV (one row each) or as a JSON array.
pub fn render_reports(reports: &[MetricsReport], format: Format) -> Result<String> {
    match format {
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let io = |e: csv::Error| MarketError::Io(std::io::Error::other(e));
            w.write_record(CSV_COLUMNS).map_err(io)?;
            for r in reports {
                w.write_record(r.csv_row()).map_err(io)?;
            }
            let bytes = w.into_inner().map_err(|e| MarketError::Io(std::io::Error::other(e.to_string())))?;
            Ok(String::from_utf8(bytes).expect("csv is utf-8"))
        }
        Format::Json => {
            let rounded: Vec<MetricsReport> = reports.iter().map(|r| r.rounded()).collect();
            let mut s = serde_json::to_string_pretty(&rounded).map_err(|e| MarketError::Invariant(e.to_string()))?;
            s.push('\n');
            Ok(s)
        }
    }
}

pub fn export_report(report: &MetricsReport, path: &Path, format: Format) -> Result<()> {
    export_reports(std::slice::from_ref(report), path, format)
}

pub fn export_reports(reports: &[MetricsReport], path: &Path, format: Format) -> Result<()> {
    std::fs::write(path, render_reports(reports, format)?)?;
    Ok(())
}

/// Inverse of [`render_reports`]. CSV carries no risk table, identity gap or contract count.
pub fn parse_reports(text: &str, format: Format) -> Result<Vec<MetricsReport>> {
    match format {
        Format::Json => serde_json::from_str(text).map_err(|e| config_err(format!("bad report json: {e}"))),
        Format::Csv => {
            let mut rd = csv::Reader::from_reader(text.as_bytes());
            let header = rd.headers().map_err(|e| config_err(e.to_string()))?.clone();
            if header.iter().ne(CSV_COLUMNS) {
                return Err(config_err("unexpected report columns"));
            }
            let mut out = Vec::new();
            for rec in rd.records() {
                let rec = rec.map_err(|e| config_err(e.to_string()))?;
                let f = |i: usize| -> Result<f64> {
                    rec[i].parse().map_err(|_| config_err(format!("bad number `{}` in column {}", &rec[i], CSV_COLUMNS[i])))
                };
                out.push(MetricsReport {
                    mechanism: rec[0].to_string(),
                    runs: rec[1].parse().map_err(|_| config_err("bad runs"))?,
                    seed: rec[2].parse().map_err(|_| config_err("bad seed"))?,
                    sw_mean: f(3)?,
                    sw_stderr: f(4)?,
                    ni_mean: f(5)?,
                    rt_ms: f(6)?,
                    ptct_mean_ms: f(7)?,
                    mu_util: f(8)?,
                    es_util: f(9)?,
                    cs_util: f(10)?,
                    sw_identity_gap: 0.0,
                    contracts: 0,
                    risk_table: Vec::new(),
                });
            }
            Ok(out)
        }
    }
}

/// Risk table as pretty JSON.
pub fn risk_table_json(report: &MetricsReport) -> String {
    format!("{}\n", serde_json::to_string_pretty(&report.rounded().risk_table).expect("serializable"))
}
