use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use resbench::experiment::{
    emit_results, run_benchmark, run_ipc_suite, BenchMode, ExperimentConfig, OutputFormat,
    ResultsTable,
};
use resbench::topology::TopologyKind;

#[derive(Parser)]
#[command(name = "resbench", version, about = "Reservoir topology benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Subcommand)]
enum Command {
    /// Open-loop one-step forecasting, Watts-Strogatz kinds at p = 1.
    BenchOpen,
    /// Closed-loop forecasting and valid prediction time, Watts-Strogatz kinds at p = 1.
    BenchClosed,
    /// Information processing capacity per kind.
    Ipc,
    /// Open- and closed-loop scores over the full rewiring grid.
    SweepP,
    /// Sweep plus capacity suite in one table.
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Args)]
struct Common {
    /// TOML config; unset keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Members per cell (applies to both suites).
    #[arg(long, global = true)]
    ensemble: Option<usize>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value = "csv")]
    format: Format,
    /// Worker threads, 0 for all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// 128 nodes, 10 members, capacity up to degree 3 with 100k inputs.
    #[arg(long, global = true)]
    desk_scale: bool,
    /// Restrict to these kinds (labels such as R-A, WS-S).
    #[arg(long, global = true, value_delimiter = ',')]
    kinds: Option<Vec<TopologyKind>>,
}

fn resolve(common: &Common) -> resbench::Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::from_toml_file(path)?,
        None => ExperimentConfig::default(),
    };
    if common.desk_scale {
        cfg.apply_desk_scale();
    }
    if let Some(seed) = common.seed {
        cfg.base_seed = seed;
    }
    if let Some(n) = common.ensemble {
        cfg.ensemble_size = n;
        cfg.ipc_ensemble_size = n;
    }
    if let Some(t) = common.threads {
        cfg.threads = t;
    }
    if let Some(out) = &common.out {
        cfg.output = Some(out.clone());
    }
    if let Some(kinds) = &common.kinds {
        cfg.kinds = kinds.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> resbench::Result<()> {
    let mut cfg = resolve(&cli.common)?;
    let table = match cli.command {
        Command::BenchOpen | Command::BenchClosed => {
            cfg.ws_p_grid = vec![1.0];
            let mode = if matches!(cli.command, Command::BenchOpen) {
                BenchMode::Open
            } else {
                BenchMode::Closed
            };
            run_benchmark(&cfg, mode)?
        }
        Command::Ipc => run_ipc_suite(&cfg)?,
        Command::SweepP => run_benchmark(&cfg, BenchMode::Both)?,
        Command::All => {
            let mut table: ResultsTable = run_benchmark(&cfg, BenchMode::Both)?;
            table.extend(run_ipc_suite(&cfg)?)?;
            table
        }
    };
    let format = match cli.common.format {
        Format::Csv => OutputFormat::Csv,
        Format::Json => OutputFormat::Json,
    };
    let out = cfg.output.clone().unwrap_or_else(|| {
        PathBuf::from(match format {
            OutputFormat::Csv => "results.csv",
            OutputFormat::Json => "results.json",
        })
    });
    emit_results(&table, &out, format, Some(&cfg))?;
    for a in &table.aggregates {
        let p = a.p.map(|p| format!(" p={p}")).unwrap_or_default();
        println!(
            "{:5} {:5}{p:7} {:13} median={:.4e} mad={:.3e} n={}",
            a.suite.to_string(),
            a.kind.label(),
            a.metric,
            a.median,
            a.mad,
            a.n
        );
    }
    let failed = table.rows.iter().filter(|r| r.status != "ok").count();
    if failed > 0 {
        eprintln!("{failed} member(s) failed; see the status column");
    }
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
