use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use lcgc::container::{dataset_csv, dataset_to_container, save_checkpoint};
use lcgc::data::synthesize;
use lcgc::debias::BaselineColor;
use lcgc::experiment::{
    ablate_baseline_colors, ablate_components, default_lambda_grid, output_root, run, sweep_lambda,
    write_atomic, write_run_set, write_table, ExperimentConfig, TableRow,
};

#[derive(Parser)]
#[command(name = "lcgc", about = "Class-imbalanced semi-supervised learning lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed of a config and write per-seed artifacts.
    Train { config: PathBuf },
    /// One run set per λ value.
    SweepLambda {
        config: PathBuf,
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
    /// One run set per baseline color.
    AblateBaseline {
        config: PathBuf,
        #[arg(long, value_delimiter = ',')]
        colors: Option<Vec<String>>,
    },
    /// Refinement and threshold ablations.
    AblateComponents { config: PathBuf },
    /// Write the synthesized dataset to a binary container or CSV.
    ExportDataset {
        config: PathBuf,
        output: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Bin)]
        format: Format,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Bin,
    Csv,
}

fn run_dir(cfg: &ExperimentConfig) -> PathBuf {
    output_root(cfg).join(&cfg.name)
}

fn print_table(rows: &[TableRow]) {
    for r in rows {
        match (&r.aggregate.bacc, &r.aggregate.gm) {
            (Some(b), Some(g)) => println!(
                "{:<32} bACC {:.4} ± {:.4}  GM {:.4} ± {:.4}  ({} ok, {} failed)",
                r.variant, b.mean, b.stderr, g.mean, g.stderr, r.aggregate.succeeded, r.aggregate.failed
            ),
            _ => println!("{:<32} all seeds failed", r.variant),
        }
    }
}

fn table_status(rows: &[TableRow]) -> ExitCode {
    if rows.iter().all(|r| r.aggregate.succeeded == 0) {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

fn execute(command: Command) -> lcgc::Result<ExitCode> {
    match command {
        Command::Train { config } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let dir = run_dir(&cfg);
            let set = run(&cfg)?;
            write_run_set(&set, &dir)?;
            for o in &set.outcomes {
                match (&o.record, &o.model) {
                    (Some(r), Some(m)) => {
                        save_checkpoint(m, Some(o.seed), &dir.join(format!("seed-{}", o.seed)).join("model.lcgc"))?;
                        println!(
                            "seed {:>4}: bACC {:.4}  GM {:.4}  ({:.1}s)",
                            o.seed, r.evaluation.bacc, r.evaluation.gm, o.wall_time_secs
                        );
                    }
                    _ => eprintln!("seed {:>4}: failed: {}", o.seed, o.error.as_deref().unwrap_or("unknown")),
                }
            }
            if let (Some(b), Some(g)) = (&set.aggregate.bacc, &set.aggregate.gm) {
                println!("mean bACC {:.4} ± {:.4}  GM {:.4} ± {:.4}", b.mean, b.stderr, g.mean, g.stderr);
            }
            println!("artifacts in {}", dir.display());
            Ok(if set.all_failed() { ExitCode::FAILURE } else { ExitCode::SUCCESS })
        }
        Command::SweepLambda { config, values } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let dir = run_dir(&cfg);
            let grid = values.unwrap_or_else(default_lambda_grid);
            let rows = sweep_lambda(&cfg, &grid, Some(&dir))?;
            write_table(&rows, &dir.join("sweep_lambda.csv"))?;
            print_table(&rows);
            Ok(table_status(&rows))
        }
        Command::AblateBaseline { config, colors } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let dir = run_dir(&cfg);
            let colors = match colors {
                Some(names) => names.iter().map(|n| n.trim().parse()).collect::<lcgc::Result<Vec<_>>>()?,
                None => BaselineColor::ALL.to_vec(),
            };
            let rows = ablate_baseline_colors(&cfg, &colors, Some(&dir))?;
            write_table(&rows, &dir.join("ablate_baseline.csv"))?;
            print_table(&rows);
            Ok(table_status(&rows))
        }
        Command::AblateComponents { config } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let dir = run_dir(&cfg);
            let rows = ablate_components(&cfg, Some(&dir))?;
            write_table(&rows, &dir.join("ablate_components.csv"))?;
            print_table(&rows);
            Ok(table_status(&rows))
        }
        Command::ExportDataset { config, output, format } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let data = synthesize(&cfg.dataset)?;
            match format {
                Format::Bin => dataset_to_container(&data)?.write(&output)?,
                Format::Csv => write_atomic(Path::new(&output), dataset_csv(&data).as_bytes())?,
            }
            println!("wrote {}", output.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
