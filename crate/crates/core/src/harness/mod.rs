//! Experiment configuration and orchestration: single runs of each strategy,
//! the per-layer ablation sweep and multi-strategy comparison.

mod config;
mod run;
mod sweep;

pub use config::{
    load_config, parse_config, parse_config_str, parse_config_with, toy_cnn, DropinSettings, ExperimentConfig,
    LoraSettings, PlasticitySettings, TimingSettings,
};
pub use run::{default_lora_targets, dropin_plan, report_path, run_experiment, RunOutcome, FINAL_CHECKPOINT, REPORT_FILE};
pub use sweep::{
    ablation_sweep, all_strategies, check_comparable, compare_strategies, relative_change, tabulate, write_comparison,
    AblationEntry, AblationResult, ComparisonRow, ComparisonTable,
};
