use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use heatkernel::cli_runner::config::SUITES;
use heatkernel::cli_runner::{emit, run_suite, suite_criteria, ExperimentConfig, CRITERIA};
use heatkernel::error::{Error, Result};

#[derive(Parser)]
#[command(name = "heatkernel", version, about = "Verification suites for parametrix heat kernels and anticipating mild solutions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a suite and write report.json plus plot CSVs.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        suite: String,
        /// Falls back to `run.out_dir` in the config.
        #[arg(long, env = "HEATKERNEL_OUT_DIR")]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// 0 uses the hardware parallelism.
        #[arg(long, env = "HEATKERNEL_WORKERS")]
        workers: Option<usize>,
    },
    /// Parse and validate a config, then print it with all defaults filled in.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    ListSuites,
}

fn run(config: PathBuf, suite: String, out: Option<PathBuf>, seed: Option<u64>, workers: Option<usize>) -> Result<bool> {
    let mut cfg = ExperimentConfig::load(&config)?;
    cfg.suite = suite;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let out = out
        .or_else(|| cfg.run.out_dir.as_ref().map(PathBuf::from))
        .ok_or_else(|| Error::config("out_dir", "no output directory: pass --out, set HEATKERNEL_OUT_DIR or run.out_dir"))?;
    let workers = workers.unwrap_or(cfg.run.workers);
    if workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
            .map_err(|e| Error::config("workers", e.to_string()))?;
    }
    let output = run_suite(&cfg, |r, secs| {
        println!("{}", r.summary_line());
        eprintln!("    ({secs:.1} s)");
    })?;
    for path in emit(&output.report, &output.plots, &out)? {
        eprintln!("wrote {}", path.display());
    }
    // wall-clock times live beside the report so that the report itself is reproducible
    let timing: Vec<serde_json::Value> = output.timing.iter().map(|(id, s)| serde_json::json!({ "criterion": id, "seconds": s })).collect();
    std::fs::write(out.join("timing.json"), serde_json::to_string_pretty(&timing)? + "\n")?;
    let failing = output.report.failing();
    for c in &failing {
        eprintln!("criterion {} failed: {}", c.id, c.title);
    }
    Ok(failing.is_empty())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, suite, out, seed, workers } => run(config, suite, out, seed, workers),
        Command::Validate { config } => ExperimentConfig::load(&config).and_then(|cfg| {
            let (lo, hi) = heatkernel::mild_solution::AlphaParams::interval(1, cfg.model.p, cfg.model.q)?;
            print!("{}", cfg.to_toml()?);
            eprintln!("valid; α interval ({lo:.6}, {hi:.6}), config hash {}", cfg.hash()?);
            Ok(true)
        }),
        Command::ListSuites => {
            for s in SUITES {
                let ids = suite_criteria(s).expect("listed suites exist");
                let names: Vec<&str> = ids.iter().map(|&i| CRITERIA[i as usize - 1].1).collect();
                println!("{s:<22}{}", names.join(", "));
            }
            Ok(true)
        }
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
