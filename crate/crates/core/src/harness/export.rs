//! Result files. CSV holds the per-step records; JSON holds metrics, timing
//! and the configuration that produced them. Floats are written with 17
//! significant digits so a round trip is exact.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{DceeError, Result};
use crate::harness::config::{ControllerKind, ScenarioConfig};
use crate::harness::run::{Metrics, RunResult, StepRecord, TimingStats};

pub const CSV_HEADER: [&str; 10] = [
    "t",
    "v",
    "u",
    "v_star_true",
    "gamma_mean_est",
    "exploit",
    "explore",
    "reward_meas",
    "solve_time_ns",
    "iterations",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    #[default]
    Csv,
    Json,
}

impl ExportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ExportFormat::Csv => "csv",
            ExportFormat::Json => "json",
        }
    }
}

impl fmt::Display for ExportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.extension())
    }
}

impl FromStr for ExportFormat {
    type Err = DceeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ExportFormat::Csv),
            "json" => Ok(ExportFormat::Json),
            other => Err(DceeError::InvalidInput(format!("unknown format {other:?}, expected csv or json"))),
        }
    }
}

/// JSON document written for a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub controller: ControllerKind,
    pub steps: usize,
    pub metrics: Metrics,
    pub timing: TimingStats,
    pub fallbacks: usize,
    pub config: ScenarioConfig,
}

impl From<&RunResult> for RunSummary {
    fn from(r: &RunResult) -> Self {
        RunSummary {
            controller: r.controller,
            steps: r.records.len(),
            metrics: r.metrics,
            timing: r.timing,
            fallbacks: r.fallbacks,
            config: r.config.clone(),
        }
    }
}

fn float(x: f64) -> String {
    format!("{x:.16e}")
}

fn record_fields(r: &StepRecord) -> [String; 10] {
    [
        float(r.t),
        float(r.v),
        float(r.u),
        float(r.v_star_true),
        float(r.gamma_mean_est),
        float(r.exploit),
        float(r.explore),
        float(r.reward_meas),
        r.solve_time_ns.to_string(),
        r.iterations.to_string(),
    ]
}

/// The CSV document as a string.
pub fn to_csv_string(records: &[StepRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| DceeError::InvalidInput(format!("csv encoding: {e}"));
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in records {
        w.write_record(record_fields(r)).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| DceeError::InvalidInput(format!("csv encoding: {e}")))?;
    String::from_utf8(bytes).map_err(|e| DceeError::InvalidInput(e.to_string()))
}

/// Write `result` to `path`. Nothing is written for an empty run.
pub fn export(result: &RunResult, path: &Path, format: ExportFormat) -> Result<()> {
    if result.records.is_empty() {
        return Err(DceeError::InvalidInput("refusing to export a run without records".into()));
    }
    let body = match format {
        ExportFormat::Csv => to_csv_string(&result.records)?,
        ExportFormat::Json => {
            let mut s = serde_json::to_string_pretty(&RunSummary::from(result))
                .map_err(|e| DceeError::InvalidInput(format!("json encoding: {e}")))?;
            s.push('\n');
            s
        }
    };
    fs::write(path, body).map_err(|e| DceeError::io(path, e))
}

/// Parse records back from a CSV file written by [`export`].
pub fn read_csv(path: &Path) -> Result<Vec<StepRecord>> {
    let parse_err = |message: String| DceeError::Parse { path: path.to_path_buf(), message };
    let text = fs::read_to_string(path).map_err(|e| DceeError::io(path, e))?;
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| parse_err(e.to_string()))?;
    if header.iter().ne(CSV_HEADER) {
        return Err(parse_err(format!("unexpected header {header:?}")));
    }
    let mut records = Vec::new();
    for (line, row) in reader.records().enumerate() {
        let row = row.map_err(|e| parse_err(e.to_string()))?;
        let field = |i: usize| row.get(i).unwrap_or("");
        let f = |i: usize| -> Result<f64> {
            field(i).parse().map_err(|e| parse_err(format!("row {}, column {}: {e}", line + 1, CSV_HEADER[i])))
        };
        let n = |i: usize| -> Result<u64> {
            field(i).parse().map_err(|e| parse_err(format!("row {}, column {}: {e}", line + 1, CSV_HEADER[i])))
        };
        records.push(StepRecord {
            t: f(0)?,
            v: f(1)?,
            u: f(2)?,
            v_star_true: f(3)?,
            gamma_mean_est: f(4)?,
            exploit: f(5)?,
            explore: f(6)?,
            reward_meas: f(7)?,
            solve_time_ns: n(8)?,
            iterations: n(9)? as usize,
        });
    }
    Ok(records)
}

pub fn read_summary(path: &Path) -> Result<RunSummary> {
    let text = fs::read_to_string(path).map_err(|e| DceeError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| DceeError::Parse { path: path.to_path_buf(), message: e.to_string() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::run::run_closed_loop;

    fn short_run() -> RunResult {
        let cfg = ScenarioConfig { horizon_s: 3.0, ..ScenarioConfig::default() };
        run_closed_loop(&cfg).unwrap()
    }

    #[test]
    fn header_is_exact() {
        let s = to_csv_string(&[]).unwrap();
        assert_eq!(s, "t,v,u,v_star_true,gamma_mean_est,exploit,explore,reward_meas,solve_time_ns,iterations\n");
    }

    #[test]
    fn floats_carry_seventeen_digits() {
        assert_eq!(float(0.1), "1.0000000000000001e-1");
        assert_eq!(float(1.0 / 3.0).parse::<f64>().unwrap(), 1.0 / 3.0);
        assert_eq!(float(f64::NAN), "NaN");
    }

    #[test]
    fn csv_and_json_round_trip() {
        let r = short_run();
        let dir = tempfile::tempdir().unwrap();
        let csv_path = dir.path().join("run.csv");
        let json_path = dir.path().join("run.json");
        export(&r, &csv_path, ExportFormat::Csv).unwrap();
        export(&r, &json_path, ExportFormat::Json).unwrap();
        assert_eq!(read_csv(&csv_path).unwrap(), r.records);
        let summary = read_summary(&json_path).unwrap();
        assert_eq!(summary, RunSummary::from(&r));
    }

    #[test]
    fn empty_run_writes_nothing() {
        let mut r = short_run();
        r.records.clear();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        assert!(export(&r, &path, ExportFormat::Csv).is_err());
        assert!(!path.exists());
    }

    #[test]
    fn io_errors_name_the_path() {
        let r = short_run();
        let path = Path::new("/nonexistent-dir/run.csv");
        let err = export(&r, path, ExportFormat::Csv).unwrap_err();
        assert!(err.to_string().contains("/nonexistent-dir/run.csv"), "{err}");
        assert!(read_csv(path).unwrap_err().to_string().contains("nonexistent-dir"));
    }

    #[test]
    fn format_parsing() {
        assert_eq!("json".parse::<ExportFormat>().unwrap(), ExportFormat::Json);
        assert!("xml".parse::<ExportFormat>().is_err());
    }
}
