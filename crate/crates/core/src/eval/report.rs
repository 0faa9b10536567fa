use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const REPORT_HEADER: [&str; 7] = [
    "dataset",
    "model",
    "strategy",
    "test_eer_percent",
    "backward_ms_per_step",
    "params_total",
    "params_trainable",
];

/// Rendering of an absent report field.
pub const ABSENT: &str = "/";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Baseline,
    DropinUnfrozen,
    DropinFrozen,
    Lora,
    Plasticity,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Baseline,
        Strategy::DropinUnfrozen,
        Strategy::DropinFrozen,
        Strategy::Lora,
        Strategy::Plasticity,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Baseline => "baseline",
            Strategy::DropinUnfrozen => "dropin_unfrozen",
            Strategy::DropinFrozen => "dropin_frozen",
            Strategy::Lora => "lora",
            Strategy::Plasticity => "plasticity",
        }
    }

    pub fn is_dropin(self) -> bool {
        matches!(self, Strategy::DropinFrozen | Strategy::DropinUnfrozen)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown strategy `{s}`")))
    }
}

/// One epoch of a training curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Training phase the epoch belongs to (`train`, `pretrain`, `stage1`, ...).
    pub stage: String,
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_eer: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub dataset: String,
    pub model: String,
    pub strategy: Strategy,
    pub test_eer_percent: f64,
    pub backward_ms_per_step: Option<f64>,
    pub params_total: usize,
    pub params_trainable: Option<usize>,
    /// Epochs of training consumed by the whole run.
    pub total_epochs: usize,
    pub curves: Vec<CurvePoint>,
}

impl RunReport {
    pub fn validate(&self) -> Result<()> {
        let plasticity = self.strategy == Strategy::Plasticity;
        if plasticity != self.backward_ms_per_step.is_none()
            || plasticity != self.params_trainable.is_none()
        {
            return Err(Error::invalid(format!(
                "{} report: backward time and trainable count must be {}",
                self.strategy,
                if plasticity { "absent" } else { "present" }
            )));
        }
        if !self.test_eer_percent.is_finite() {
            return Err(Error::invalid("test EER must be finite"));
        }
        Ok(())
    }

    /// The CSV cells in header order.
    pub fn csv_fields(&self) -> [String; 7] {
        [
            self.dataset.clone(),
            self.model.clone(),
            self.strategy.to_string(),
            self.test_eer_percent.to_string(),
            opt(self.backward_ms_per_step),
            self.params_total.to_string(),
            opt(self.params_trainable),
        ]
    }
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(|| ABSENT.to_string(), |x| x.to_string())
}

fn parse_opt<T: FromStr>(s: &str, col: &str) -> Result<Option<T>> {
    if s == ABSENT {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| Error::invalid(format!("bad value `{s}` in column {col}")))
}

/// Path of the JSON-lines sidecar that accompanies a report CSV.
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("curves.jsonl")
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

fn append(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .and_then(|mut f| f.write_all(bytes))
        .map_err(|e| Error::io(path, e))
}

/// Appends a row (writing the header first if the file is new or empty) and the
/// full report, curves included, as one line of the sidecar.
pub fn emit_report(report: &RunReport, path: &Path) -> Result<()> {
    report.validate()?;
    let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    if fresh {
        w.write_record(REPORT_HEADER).map_err(|e| csv_err(path, e))?;
    }
    w.write_record(report.csv_fields()).map_err(|e| csv_err(path, e))?;
    let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
    append(path, &bytes)?;
    let mut line = serde_json::to_vec(report)?;
    line.push(b'\n');
    append(&sidecar_path(path), &line)
}

/// Parses the CSV rows of a report file. Fields not stored in the CSV
/// (`total_epochs`, `curves`) are taken from the sidecar when it holds one line
/// per row, and left empty otherwise.
pub fn read_reports(path: &Path) -> Result<Vec<RunReport>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.iter().ne(REPORT_HEADER) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("unexpected header {:?}", header.iter().collect::<Vec<_>>()),
        });
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let num = |i: usize| -> Result<f64> {
            rec[i]
                .parse()
                .map_err(|_| Error::invalid(format!("bad value `{}` in column {}", &rec[i], REPORT_HEADER[i])))
        };
        out.push(RunReport {
            dataset: rec[0].to_string(),
            model: rec[1].to_string(),
            strategy: rec[2].parse()?,
            test_eer_percent: num(3)?,
            backward_ms_per_step: parse_opt(&rec[4], REPORT_HEADER[4])?,
            params_total: num(5)? as usize,
            params_trainable: parse_opt(&rec[6], REPORT_HEADER[6])?,
            total_epochs: 0,
            curves: Vec::new(),
        });
    }
    if let Ok(text) = fs::read_to_string(sidecar_path(path)) {
        let full: Vec<RunReport> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        if full.len() == out.len() {
            for (row, f) in out.iter_mut().zip(full) {
                row.total_epochs = f.total_epochs;
                row.curves = f.curves;
            }
        }
    }
    Ok(out)
}
