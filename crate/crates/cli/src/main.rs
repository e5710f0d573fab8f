//! `crepe` — run replica-exchange or SMC control experiments over analytic
//! diffusion models, verify the built-in oracle suites, resume from
//! checkpoints, and recompute metrics from stored samples.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crepe_core::experiment::{
    report_run, resume_run, run_experiment, ExperimentConfig, RunMode,
};
use crepe_core::verify::{run_suite, SUITES};
use crepe_core::Error;

/// Default output root when neither `--out` nor `CREPE_OUT_ROOT` is set.
const DEFAULT_OUT_ROOT: &str = "runs";

#[derive(Parser)]
#[command(name = "crepe", version, about = "Inference-time diffusion control by replica exchange")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output root directory (default: $CREPE_OUT_ROOT or ./runs).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Cap engine parallelism; never changes results.
    #[arg(long)]
    workers: Option<usize>,
    /// Override leaf config fields by dotted path, e.g.
    /// --set engine.iterations=1000 --set task.beta=2.5
    #[arg(long = "set", value_name = "PATH=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run a replica-exchange experiment.
    Run(RunArgs),
    /// Run the SMC baseline on the same config.
    Smc(RunArgs),
    /// Run a verification suite ("all" runs every suite).
    Verify {
        #[arg(long)]
        suite: String,
    },
    /// Continue a checkpointed run for additional iterations.
    Resume {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        iterations: u64,
    },
    /// Recompute metrics and plot-ready tables from a stored run directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

fn apply_override(value: &mut serde_json::Value, path: &str, raw: &str) -> anyhow::Result<()> {
    let parts: Vec<&str> = path.split('.').collect();
    let (leaf, branches) = parts
        .split_last()
        .ok_or_else(|| anyhow::anyhow!("empty override path"))?;
    let mut cursor = value;
    for part in branches {
        let obj = cursor
            .as_object_mut()
            .ok_or_else(|| anyhow::anyhow!("config path '{path}' does not address an object"))?;
        cursor = obj
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    let obj = cursor
        .as_object_mut()
        .ok_or_else(|| anyhow::anyhow!("config path '{path}' does not address an object"))?;
    let parsed =
        serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    obj.insert(leaf.to_string(), parsed);
    Ok(())
}

fn load_config(args: &RunArgs) -> anyhow::Result<ExperimentConfig> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| anyhow::anyhow!("reading {}: {e}", args.config.display()))?;
    let mut value: serde_json::Value = serde_json::from_str(&text)?;
    for ov in &args.overrides {
        let (path, raw) = ov
            .split_once('=')
            .ok_or_else(|| anyhow::anyhow!("override '{ov}' is not PATH=VALUE"))?;
        apply_override(&mut value, path, raw)?;
    }
    let mut cfg = ExperimentConfig::from_json(&value.to_string())?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(workers) = args.workers {
        cfg.engine.workers = workers;
        if let Some(smc) = cfg.smc.as_mut() {
            smc.workers = workers;
        }
    }
    Ok(cfg)
}

fn out_root(args: &RunArgs) -> PathBuf {
    args.out.clone().unwrap_or_else(|| {
        std::env::var("CREPE_OUT_ROOT")
            .map(PathBuf::from)
            .unwrap_or_else(|_| PathBuf::from(DEFAULT_OUT_ROOT))
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run_cmd(args, RunMode::Pt),
        Command::Smc(args) => run_cmd(args, RunMode::Smc),
        Command::Verify { suite } => verify_cmd(&suite),
        Command::Resume {
            checkpoint,
            iterations,
        } => resume_run(&checkpoint, iterations)
            .map(|out| {
                println!("resumed run written to {}", out.dir.display());
                print_report_summary(&out.report);
            })
            .map_err(anyhow::Error::from),
        Command::Report { dir } => report_run(&dir)
            .map(|report| {
                println!("metrics recomputed under {}", dir.display());
                print_report_summary(&report);
            })
            .map_err(anyhow::Error::from),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            let code = err
                .downcast_ref::<Error>()
                .map(Error::exit_code)
                .unwrap_or(2);
            ExitCode::from(code as u8)
        }
    }
}

fn run_cmd(args: RunArgs, mode: RunMode) -> anyhow::Result<()> {
    let cfg = load_config(&args)?;
    let root = out_root(&args);
    let out = run_experiment(&cfg, mode, &root)?;
    println!(
        "{} run '{}' finished; outputs in {}",
        match mode {
            RunMode::Pt => "replica-exchange",
            RunMode::Smc => "smc",
        },
        cfg.name,
        out.dir.display()
    );
    print_report_summary(&out.report);
    Ok(())
}

fn print_report_summary(report: &crepe_core::metrics::MetricReport) {
    println!(
        "samples {}  nfe {}  wall {:.2}s",
        report.samples, report.nfe, report.wall_time_s
    );
    if let Some(tvd) = report.tvd {
        println!("tvd {tvd:.4}");
    }
    if let Some(w2) = report.w2 {
        println!("w2 {w2:.4}");
    }
    if let Some((lo, hi)) = report.mode_occupancy {
        println!("mode occupancy {lo:.3}/{hi:.3}");
    }
    if let Some(st) = &report.stitch {
        println!(
            "stitch success {:.3} (first quartile {:.3}, last {:.3}), pass-through {:.3}",
            st.success_overall,
            st.success_first_quartile,
            st.success_last_quartile,
            st.pass_through_overall
        );
    }
    if let Some(rt) = report.round_trips {
        println!("round trips {rt}");
    }
    if let Some(acc) = &report.swap_acceptance {
        if !acc.is_empty() {
            let mean = acc.iter().sum::<f64>() / acc.len() as f64;
            println!("mean swap acceptance {mean:.3}");
        }
    }
    if let Some(ess) = &report.ess_trace {
        if let Some(last) = ess.last() {
            println!("final normalised ess {last:.3}");
        }
    }
}

fn verify_cmd(suite: &str) -> anyhow::Result<()> {
    let names: Vec<&str> = if suite == "all" {
        SUITES.to_vec()
    } else {
        vec![suite]
    };
    let mut all_pass = true;
    for name in names {
        let report = run_suite(name)?;
        report.print();
        all_pass &= report.passed;
    }
    if !all_pass {
        anyhow::bail!("at least one verification suite failed");
    }
    Ok(())
}
