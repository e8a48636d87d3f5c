//! Scenario reports and their JSON/CSV emission. Floats are written with 17 significant
//! digits so both formats carry the same values.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::ser::Serialize;
use serde::Deserialize;
use serde_json::ser::{Formatter, PrettyFormatter};

use crate::error::{Error, Result};
use crate::path::{LadderReport, Rung};

/// Ladder CSV columns, in order.
pub const LADDER_COLUMNS: [&str; 5] = ["h", "energy", "drift_energy", "covariance_gap", "third_moment"];
/// Check CSV columns, in order.
pub const CHECK_COLUMNS: [&str; 4] = ["name", "passed", "value", "threshold"];

/// One machine-checkable assertion of a scenario.
#[derive(Clone, Debug, PartialEq, serde::Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    #[serde(deserialize_with = "crate::nullable::deserialize")]
    pub value: f64,
    #[serde(deserialize_with = "crate::nullable::deserialize")]
    pub threshold: f64,
    pub detail: String,
}

impl Check {
    /// value ≤ threshold.
    pub fn at_most(name: &str, value: f64, threshold: f64, detail: impl Into<String>) -> Self {
        Self {
            name: name.to_string(),
            passed: value <= threshold,
            value,
            threshold,
            detail: detail.into(),
        }
    }

    /// value ≥ threshold.
    pub fn at_least(name: &str, value: f64, threshold: f64, detail: impl Into<String>) -> Self {
        Self {
            name: name.to_string(),
            passed: value >= threshold,
            value,
            threshold,
            detail: detail.into(),
        }
    }

    /// A boolean outcome with an associated number.
    pub fn holds(name: &str, passed: bool, value: f64, detail: impl Into<String>) -> Self {
        Self {
            name: name.to_string(),
            passed,
            value,
            threshold: f64::NAN,
            detail: detail.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, Deserialize)]
pub struct LabeledLadder {
    pub label: String,
    pub ladder: LadderReport,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, Deserialize)]
pub struct ScenarioReport {
    pub scenario: String,
    pub passed: bool,
    pub checks: Vec<Check>,
    pub ladders: Vec<LabeledLadder>,
    #[serde(deserialize_with = "crate::nullable::map")]
    pub values: BTreeMap<String, f64>,
}

impl ScenarioReport {
    pub fn new(scenario: &str) -> Self {
        Self {
            scenario: scenario.to_string(),
            passed: true,
            checks: Vec::new(),
            ladders: Vec::new(),
            values: BTreeMap::new(),
        }
    }

    pub fn check(&mut self, check: Check) {
        self.passed &= check.passed;
        self.checks.push(check);
    }

    pub fn value(&mut self, key: &str, value: f64) {
        self.values.insert(key.to_string(), value);
    }

    pub fn ladder(&mut self, label: &str, ladder: &LadderReport) {
        self.ladders.push(LabeledLadder {
            label: label.to_string(),
            ladder: ladder.clone(),
        });
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

/// Pretty JSON formatter printing floats as `{:.16e}`.
struct Precise<'a>(PrettyFormatter<'a>);

impl Formatter for Precise<'_> {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{}", float(value))
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, value as f64)
    }

    fn begin_array<W: ?Sized + Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.0.begin_array(writer)
    }

    fn end_array<W: ?Sized + Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.0.end_array(writer)
    }

    fn begin_array_value<W: ?Sized + Write>(&mut self, writer: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(writer, first)
    }

    fn end_array_value<W: ?Sized + Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.0.end_array_value(writer)
    }

    fn begin_object<W: ?Sized + Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.0.begin_object(writer)
    }

    fn end_object<W: ?Sized + Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.0.end_object(writer)
    }

    fn begin_object_key<W: ?Sized + Write>(&mut self, writer: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(writer, first)
    }

    fn begin_object_value<W: ?Sized + Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.0.begin_object_value(writer)
    }

    fn end_object_value<W: ?Sized + Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.0.end_object_value(writer)
    }
}

/// 17 significant digits; non-finite values use their Rust spelling (CSV only — JSON
/// writes them as null).
pub fn float(value: f64) -> String {
    if value.is_finite() {
        format!("{value:.16e}")
    } else {
        format!("{value}")
    }
}

/// Pretty JSON with 17-significant-digit floats and a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, Precise(PrettyFormatter::new()));
    value.serialize(&mut ser).map_err(|source| Error::Json {
        context: "report serialization".to_string(),
        source,
    })?;
    out.push(b'\n');
    Ok(out)
}

fn io_error(path: &Path) -> impl FnOnce(io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create(path: &Path) -> Result<fs::File> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_error(path))?;
    }
    fs::File::create(path).map_err(io_error(path))
}

/// CSV with a `# columns: …` comment line followed by the header row.
pub fn write_csv(path: &Path, columns: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut file = create(path)?;
    writeln!(file, "# columns: {}", columns.join(", ")).map_err(io_error(path))?;
    let mut writer = csv::Writer::from_writer(file);
    writer.write_record(columns)?;
    for row in rows {
        writer.write_record(row)?;
    }
    writer.flush().map_err(io_error(path))?;
    Ok(())
}

pub fn ladder_rows(rungs: &[Rung]) -> Vec<Vec<String>> {
    rungs
        .iter()
        .map(|r| {
            [r.h, r.energy, r.drift_energy, r.covariance_gap, r.third_moment]
                .iter()
                .map(|&v| float(v))
                .collect()
        })
        .collect()
}

fn check_rows(checks: &[Check]) -> Vec<Vec<String>> {
    checks
        .iter()
        .map(|c| vec![c.name.clone(), c.passed.to_string(), float(c.value), float(c.threshold)])
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

/// Writes a report into `dir`; returns the files written.
pub fn emit_report(dir: &Path, report: &ScenarioReport, format: ReportFormat) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    match format {
        ReportFormat::Json => {
            let path = dir.join(format!("{}.json", report.scenario));
            create(&path)?
                .write_all(&to_json(report)?)
                .map_err(io_error(&path))?;
            written.push(path);
        }
        ReportFormat::Csv => {
            let path = dir.join(format!("{}_checks.csv", report.scenario));
            write_csv(&path, &CHECK_COLUMNS, &check_rows(&report.checks))?;
            written.push(path);
            for ladder in &report.ladders {
                let path = dir.join(format!("{}_{}_ladder.csv", report.scenario, ladder.label));
                write_csv(&path, &LADDER_COLUMNS, &ladder_rows(&ladder.ladder.rungs))?;
                written.push(path);
            }
        }
    }
    Ok(written)
}

/// Reads every scenario report (`*.json`) in `dir`, sorted by scenario name.
pub fn read_reports(dir: &Path) -> Result<Vec<ScenarioReport>> {
    let entries = fs::read_dir(dir).map_err(io_error(dir))?;
    let mut reports = Vec::new();
    for entry in entries {
        let path = entry.map_err(io_error(dir))?.path();
        if path.extension().is_some_and(|e| e == "json") {
            let text = fs::read_to_string(&path).map_err(io_error(&path))?;
            // Other JSON files (measures, summaries) are skipped.
            if let Ok(report) = serde_json::from_str::<ScenarioReport>(&text) {
                reports.push(report);
            }
        }
    }
    reports.sort_by(|a, b| a.scenario.cmp(&b.scenario));
    Ok(reports)
}
