use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use labelfuse::backbone::load_checkpoint;
use labelfuse::data::{generate_two_moon, two_moon_annotator_labels, write_two_moon_csv, TwoMoonConfig};
use labelfuse::harness::{
    export_heatmap_grid, run_experiment, run_sweep, thread_count, write_heatmap_csv, DatasetSpec,
    ExperimentConfig, GridSpec, HeatmapModel, HeatmapQuantity, Method, SweepAxis,
};
use labelfuse::{Error, Result};

#[derive(Parser)]
#[command(name = "labelfuse", version, about = "Train and compare label-fusion methods")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's output directory.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Run the config once per (value, method) pair and write a table.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// epsilon, lambda or M.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        values: Vec<f64>,
        /// Comma-separated methods; defaults to the config's method.
        #[arg(long, value_delimiter = ',')]
        methods: Vec<String>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Evaluate a saved TwoMoon model over a grid and write `x,y,value` rows.
    Heatmap {
        /// The config the model was trained with (supplies the annotator rules and mode).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// prediction, weight[r] or confusion_diag[r] (1-based r).
        #[arg(long)]
        quantity: String,
        #[arg(long, default_value_t = 101)]
        resolution: usize,
        #[arg(long, num_args = 2, default_values_t = [-2.0, 2.0], allow_negative_numbers = true)]
        x_range: Vec<f64>,
        #[arg(long, num_args = 2, default_values_t = [-1.5, 1.5], allow_negative_numbers = true)]
        y_range: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a generated TwoMoon set as `x,y,golden,ant1,ant2`.
    Twomoon {
        #[arg(long, default_value_t = 20_000)]
        n: usize,
        #[arg(long, default_value_t = 0.1)]
        noise_sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: &Path, output_dir: Option<PathBuf>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_path(path)?;
    cfg.apply_env();
    if output_dir.is_some() {
        cfg.output_dir = output_dir;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, output_dir } => {
            let cfg = load_config(&config, output_dir)?;
            let out = run_experiment(&cfg)?;
            let r = &out.report;
            let summary = serde_json::json!({
                "method": r.method,
                "mode": r.mode,
                "selected_epoch": r.selected_epoch,
                "test_accuracy": r.test_accuracy,
                "corruption_rates": r.corruption_rates,
                "wall_clock_seconds": r.wall_clock_seconds,
            });
            println!("{summary}");
        }
        Command::Sweep {
            config,
            axis,
            values,
            methods,
            output_dir,
        } => {
            let cfg = load_config(&config, output_dir)?;
            let axis: SweepAxis = axis.parse()?;
            let methods = if methods.is_empty() {
                vec![cfg.method]
            } else {
                methods.iter().map(|m| m.parse()).collect::<Result<Vec<Method>>>()?
            };
            let table = run_sweep(&cfg, axis, &values, &methods, thread_count())?;
            for cell in &table.cells {
                let line = match &cell.result {
                    Ok(r) => serde_json::json!({
                        axis.name(): cell.value,
                        "method": cell.method.to_string(),
                        "test_accuracy": r.test_accuracy,
                    }),
                    Err(e) => serde_json::json!({
                        axis.name(): cell.value,
                        "method": cell.method.to_string(),
                        "error": e.kind(),
                        "message": e.to_string(),
                    }),
                };
                println!("{line}");
            }
        }
        Command::Heatmap {
            config,
            checkpoint,
            quantity,
            resolution,
            x_range,
            y_range,
            out,
        } => {
            let cfg = ExperimentConfig::from_path(&config)?;
            let moon = match cfg.dataset {
                DatasetSpec::TwoMoon { upper_label, y_threshold, .. } => TwoMoonConfig {
                    upper_label,
                    y_threshold,
                    ..Default::default()
                },
                DatasetSpec::Mnist { .. } => {
                    return Err(Error::InvalidArgument("heatmaps are defined for twomoon models only".into()))
                }
            };
            let (params, basis) = load_checkpoint(&checkpoint)?;
            let model = HeatmapModel {
                params: &params,
                basis: basis.as_ref(),
                frozen: cfg.mode.frozen(),
            };
            let grid = GridSpec {
                x_range: (x_range[0], x_range[1]),
                y_range: (y_range[0], y_range[1]),
                resolution,
            };
            let rule = |r: usize, x: f64, y: f64| two_moon_annotator_labels(&moon, x, y)[r.min(1)];
            let rows = export_heatmap_grid(model, grid, quantity.parse::<HeatmapQuantity>()?, &rule)?;
            write_heatmap_csv(&out, &rows)?;
        }
        Command::Twomoon {
            n,
            noise_sigma,
            seed,
            out,
        } => {
            let ds = generate_two_moon(&TwoMoonConfig {
                n,
                noise_sigma,
                seed,
                ..Default::default()
            })?;
            write_two_moon_csv(&out, &ds)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({"error": e.kind(), "message": e.to_string()});
            eprintln!("{line}");
            ExitCode::from(1)
        }
    }
}
