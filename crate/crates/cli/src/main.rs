use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use dropin_core::checkpoint::load_checkpoint;
use dropin_core::data::{dump_dataset, generate};
use dropin_core::eval::{gradcam, write_matrix, REPORT_HEADER};
use dropin_core::harness::{
    ablation_sweep, all_strategies, compare_strategies, load_config, run_experiment, write_comparison,
    ExperimentConfig, FINAL_CHECKPOINT,
};
use dropin_core::Error;

#[derive(Parser)]
#[command(name = "dropin", version, about = "Neuron growth, plasticity and baseline experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Override a config key, e.g. `--set data.artifact_strength=0.25`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig, Error> {
        load_config(&self.config, &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and print its report row.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory (overrides `output_dir`).
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Single-layer dropin for every expandable layer.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Run several strategies under one epoch budget and tabulate them.
    Compare {
        /// One config per strategy.
        #[arg(required = true)]
        configs: Vec<PathBuf>,
        /// Derive all five strategies from the single config given.
        #[arg(long)]
        all_strategies: bool,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Comparison CSV to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Grad-CAM heatmap of a conv layer for one test example.
    Gradcam {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Run directory holding the reported checkpoint.
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        layer: usize,
        #[arg(long, default_value_t = 1)]
        class: usize,
        /// Index into the test split.
        #[arg(long, default_value_t = 0)]
        example: usize,
        /// Plain-text matrix output.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the configured synthetic dataset to a tensor container.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(category: &str) -> u8 {
    match category {
        "config" => 3,
        "io" => 4,
        "format" => 5,
        "numeric" => 6,
        "shape" => 7,
        "invalid-argument" => 8,
        "missing-param" => 9,
        "graph" => 10,
        _ => 1,
    }
}

fn print_row(fields: &[String]) {
    println!("{}", fields.join(","));
}

fn with_out_dir(mut cfg: ExperimentConfig, out_dir: &Option<PathBuf>) -> ExperimentConfig {
    if out_dir.is_some() {
        cfg.output_dir = out_dir.clone();
    }
    cfg
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run { cfg, out_dir } => {
            let config = with_out_dir(cfg.load()?, &out_dir);
            let out = run_experiment(&config)?;
            println!("{}", REPORT_HEADER.join(","));
            print_row(&out.report.csv_fields());
        }
        Command::Sweep { cfg, out_dir } => {
            let config = with_out_dir(cfg.load()?, &out_dir);
            let res = ablation_sweep(&config)?;
            print!("{}", res.to_csv());
            if let Some(s) = res.spread() {
                eprintln!("EER spread across layers: {s:.3} percentage points");
            }
        }
        Command::Compare {
            configs,
            all_strategies: expand,
            overrides,
            out,
        } => {
            let mut loaded = configs
                .iter()
                .map(|p| load_config(p, &overrides))
                .collect::<Result<Vec<_>, _>>()?;
            if expand {
                if loaded.len() != 1 {
                    bail!("--all-strategies takes exactly one config");
                }
                loaded = all_strategies(&loaded[0]);
            }
            let table = compare_strategies(&loaded)?;
            write_comparison(&out, &table)?;
            print!("{}", table.to_csv());
        }
        Command::Gradcam {
            cfg,
            run_dir,
            layer,
            class,
            example,
            out,
        } => {
            let config = cfg.load()?;
            let ck = load_checkpoint(&run_dir, FINAL_CHECKPOINT)?;
            let data = generate(&config.data)?;
            let ex = data
                .test
                .get(example)
                .with_context(|| format!("test split has {} examples", data.test.len()))?;
            let heat = gradcam(&ck.model, &ck.params, &ex.features, layer, class)?;
            write_matrix(&out, &heat)?;
            eprintln!(
                "heatmap {}x{} for test example {example} ({:?}) written to {}",
                heat.shape()[0],
                heat.shape()[1],
                ex.label,
                display(&out)
            );
        }
        Command::GenData { cfg, out } => {
            let config = cfg.load()?;
            let data = generate(&config.data)?;
            dump_dataset(&out, &data)?;
            eprintln!(
                "wrote {}/{}/{} examples to {}",
                data.train.len(),
                data.dev.len(),
                data.test.len(),
                display(&out)
            );
        }
    }
    Ok(())
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let category = e.downcast_ref::<Error>().map_or("other", Error::category);
            eprintln!("error[{category}]: {e:#}");
            ExitCode::from(exit_code(category))
        }
    }
}
