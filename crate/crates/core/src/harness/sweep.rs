use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::run::run_experiment;
use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};
use crate::eval::{RunReport, Strategy, ABSENT, REPORT_HEADER};
use crate::layers::ModelGraph;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationEntry {
    pub layer: usize,
    pub layer_name: String,
    pub seed: u64,
    pub total_epochs: usize,
    pub test_eer_percent: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub base: ExperimentConfig,
    pub entries: Vec<AblationEntry>,
}

impl AblationResult {
    /// Max minus min test EER (percentage points) over successful entries.
    pub fn spread(&self) -> Option<f64> {
        let eers: Vec<f64> = self.entries.iter().filter_map(|e| e.test_eer_percent).collect();
        if eers.is_empty() {
            return None;
        }
        let hi = eers.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = eers.iter().copied().fold(f64::INFINITY, f64::min);
        Some(hi - lo)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,layer_name,seed,total_epochs,test_eer_percent,error\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.layer,
                e.layer_name,
                e.seed,
                e.total_epochs,
                e.test_eer_percent.map_or_else(|| ABSENT.to_string(), |v| v.to_string()),
                e.error.as_deref().unwrap_or("").replace([',', '\n'], " ")
            ));
        }
        out
    }
}

/// Runs the dropin experiment once per expandable layer with only that layer
/// selected. Failing entries are recorded and the sweep continues.
pub fn ablation_sweep(config: &ExperimentConfig) -> Result<AblationResult> {
    if !config.strategy.is_dropin() {
        return Err(Error::Config {
            key: "strategy".into(),
            msg: format!("sweep needs a dropin strategy, got {}", config.strategy),
        });
    }
    config.validate()?;
    let model = ModelGraph::from_spec(&config.model, config.data.freq_bins, config.data.time_frames)?;
    let mut entries = Vec::new();
    for layer in model.expandable_indices() {
        let mut cfg = config.clone();
        cfg.dropin.layers = vec![layer];
        cfg.output_dir = config.output_dir.as_ref().map(|d| d.join(format!("layer{layer}")));
        let res = run_experiment(&cfg);
        entries.push(AblationEntry {
            layer,
            layer_name: model.layers[layer].name().to_string(),
            seed: cfg.seed,
            total_epochs: cfg.total_epochs(),
            test_eer_percent: res.as_ref().ok().map(|o| o.report.test_eer_percent),
            error: res.err().map(|e| e.to_string()),
        });
    }
    let result = AblationResult {
        base: config.clone(),
        entries,
    };
    if let Some(dir) = &config.output_dir {
        write_atomic(&dir.join("ablation.csv"), result.to_csv().as_bytes())?;
    }
    Ok(result)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub report: RunReport,
    /// `(baseline − strategy) / baseline`, as a fraction; `None` without a
    /// baseline row or when the baseline EER is zero.
    pub relative_eer_change: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn header() -> String {
        let mut h = REPORT_HEADER.join(",");
        h.push_str(",total_epochs,relative_eer_change_percent");
        h
    }

    pub fn to_csv(&self) -> String {
        let mut out = Self::header();
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.report.csv_fields().join(","));
            out.push_str(&format!(
                ",{},{}\n",
                row.report.total_epochs,
                row.relative_eer_change
                    .map_or_else(|| ABSENT.to_string(), |r| (100.0 * r).to_string())
            ));
        }
        out
    }
}

/// `(baseline − value) / baseline`; `None` when the baseline is zero.
pub fn relative_change(baseline: f64, value: f64) -> Option<f64> {
    (baseline != 0.0).then(|| (baseline - value) / baseline)
}

/// Checks that the configs can be compared: same data and model, equal
/// epoch budgets.
pub fn check_comparable(configs: &[ExperimentConfig]) -> Result<()> {
    let first = configs.first().ok_or_else(|| Error::invalid("no configs to compare"))?;
    for c in configs {
        if c.data != first.data {
            return Err(Error::invalid(format!(
                "{} config uses a different data spec than {}",
                c.strategy, first.strategy
            )));
        }
        if c.model != first.model {
            return Err(Error::invalid(format!(
                "{} config uses a different model spec than {}",
                c.strategy, first.strategy
            )));
        }
    }
    let budgets: Vec<String> = configs
        .iter()
        .map(|c| format!("{}={}", c.strategy, c.total_epochs()))
        .collect();
    if configs.iter().any(|c| c.total_epochs() != first.total_epochs()) {
        return Err(Error::invalid(format!(
            "unequal epoch budgets: {}",
            budgets.join(", ")
        )));
    }
    Ok(())
}

/// Runs every config and tabulates the reports in strategy order.
pub fn compare_strategies(configs: &[ExperimentConfig]) -> Result<ComparisonTable> {
    check_comparable(configs)?;
    let mut sorted: Vec<&ExperimentConfig> = configs.iter().collect();
    sorted.sort_by_key(|c| c.strategy);
    let mut reports = Vec::with_capacity(sorted.len());
    for c in sorted {
        reports.push(run_experiment(c)?.report);
    }
    Ok(tabulate(reports))
}

/// Builds the comparison rows from finished reports.
pub fn tabulate(reports: Vec<RunReport>) -> ComparisonTable {
    let base = reports
        .iter()
        .find(|r| r.strategy == Strategy::Baseline)
        .map(|r| r.test_eer_percent);
    ComparisonTable {
        rows: reports
            .into_iter()
            .map(|report| ComparisonRow {
                relative_eer_change: base.and_then(|b| relative_change(b, report.test_eer_percent)),
                report,
            })
            .collect(),
    }
}

/// One config per strategy derived from `base`, with budgets equalised to
/// `3 × plasticity.epochs_per_stage`: the baseline trains the whole budget and
/// the dropin and LoRA runs keep `pretrain_epochs` (capped at the budget) and
/// train the remainder.
pub fn all_strategies(base: &ExperimentConfig) -> Vec<ExperimentConfig> {
    let budget = 3 * base.plasticity.epochs_per_stage;
    Strategy::ALL
        .into_iter()
        .map(|s| {
            let mut c = base.clone();
            c.strategy = s;
            match s {
                Strategy::Baseline => {
                    c.pretrain_epochs = 0;
                    c.epochs = budget;
                }
                Strategy::Plasticity => {}
                _ => {
                    c.pretrain_epochs = base.pretrain_epochs.min(budget);
                    c.epochs = budget - c.pretrain_epochs;
                }
            }
            c.output_dir = base.output_dir.as_ref().map(|d| d.join(s.as_str()));
            c
        })
        .collect()
}

/// Writes a comparison CSV.
pub fn write_comparison(path: &Path, table: &ComparisonTable) -> Result<()> {
    write_atomic(path, table.to_csv().as_bytes())
}
