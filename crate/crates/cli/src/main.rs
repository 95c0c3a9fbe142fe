use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde_json::{json, Value};

use impm_core::fill::fill_points;
use impm_core::metrics::{
    ablation_report, bmf_series, drift_report, gate, plausibility_report, stability_frontier,
    GateResult, STANDARD_MULTIPLIERS,
};
use impm_core::trace::{read_points, read_trace, write_points, write_trace};
use impm_core::{run_simulation, ForcingMode, Method, SimConfig, Trace};

/// Default output root when `--out` is omitted.
const OUT_ENV: &str = "IMPM_OUT";

#[derive(Parser)]
#[command(
    name = "impm",
    version,
    about = "Implicit and explicit MPM simulation with trace metrics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one simulation and write its trace.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "implicit")]
        method: Method,
        #[arg(long, default_value_t = 1)]
        dt_multiplier: u32,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one simulation per multiplier and summarize the stability gate.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "implicit")]
        method: Method,
        /// Comma-separated multipliers.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        multipliers: Option<Vec<u32>>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Concurrent runs; 0 uses every core.
        #[arg(long, default_value_t = 0)]
        jobs: usize,
    },
    /// Compute metrics for a trace, with drift against `--ref` if given.
    Metrics {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
        /// Optional per-frame CSV series.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Compare an implicit solver variant against the default settings.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        no_line_search: bool,
        /// Fixed forcing term instead of the adaptive one.
        #[arg(long, value_name = "ETA")]
        fixed_forcing: Option<f64>,
        #[arg(long, default_value_t = 1)]
        dt_multiplier: u32,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fill the interior of a hollow point set.
    Fill {
        #[arg(long)]
        points: PathBuf,
        #[arg(long)]
        resolution: usize,
        #[arg(long, default_value_t = 1.0)]
        grid_lim: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Error kinds mapped to exit codes.
enum Failure {
    Usage(anyhow::Error),
    Aborted(String),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Usage(e.into())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Aborted(reason)) => {
            eprintln!("run aborted: {reason}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Simulate {
            config,
            method,
            dt_multiplier,
            out,
        } => simulate(&config, method, dt_multiplier, out),
        Command::Sweep {
            config,
            method,
            multipliers,
            out,
            jobs,
        } => sweep(&config, method, multipliers, out, jobs),
        Command::Metrics {
            trace,
            reference,
            report,
            csv,
        } => metrics(&trace, reference.as_deref(), &report, csv.as_deref()),
        Command::Ablate {
            config,
            no_line_search,
            fixed_forcing,
            dt_multiplier,
            out,
        } => ablate(&config, no_line_search, fixed_forcing, dt_multiplier, out),
        Command::Fill {
            points,
            resolution,
            grid_lim,
            out,
        } => fill(&points, resolution, grid_lim, &out),
    }
}

fn output_dir(out: Option<PathBuf>, name: &str) -> PathBuf {
    out.unwrap_or_else(|| {
        std::env::var_os(OUT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("out"))
            .join(name)
    })
}

fn load_config(path: &Path, k: u32) -> anyhow::Result<SimConfig> {
    let mut config =
        SimConfig::load(path).with_context(|| format!("loading config {}", path.display()))?;
    if k < 1 {
        bail!("--dt-multiplier must be >= 1");
    }
    config.time.dt_multiplier = k;
    Ok(config)
}

fn write_json(path: &Path, value: &Value) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn simulate(path: &Path, method: Method, k: u32, out: Option<PathBuf>) -> Result<(), Failure> {
    let config = load_config(path, k)?;
    let dir = output_dir(out, &format!("{}_{method}_k{k}", config.scene));
    let trace = run_simulation(&config, method)?;
    write_trace(&trace, &dir)?;
    log::info!("wrote {} frames to {}", trace.frame_count(), dir.display());
    if trace.meta.aborted {
        return Err(Failure::Aborted(
            trace.meta.abort_reason.unwrap_or_default(),
        ));
    }
    Ok(())
}

fn sweep(
    path: &Path,
    method: Method,
    multipliers: Option<Vec<u32>>,
    out: Option<PathBuf>,
    jobs: usize,
) -> Result<(), Failure> {
    let ks = multipliers.unwrap_or_else(|| STANDARD_MULTIPLIERS.to_vec());
    if ks.is_empty() {
        return Err(anyhow::anyhow!("empty multiplier list").into());
    }
    let configs = ks
        .iter()
        .map(|&k| load_config(path, k))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let dir = output_dir(out, &format!("{}_{method}_sweep", configs[0].scene));
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?;
    let gated: Vec<(u32, GateResult)> = pool.install(|| {
        configs
            .par_iter()
            .map(|config| -> anyhow::Result<(u32, GateResult)> {
                let k = config.time.dt_multiplier;
                let trace = run_simulation(config, method)?;
                write_trace(&trace, &dir.join(format!("k{k}")))?;
                Ok((k, gate(&trace)?))
            })
            .collect::<anyhow::Result<Vec<_>>>()
    })?;
    let report = stability_frontier(&gated)?;
    write_json(&dir.join("stability.json"), &serde_json::to_value(&report)?)?;
    std::fs::write(dir.join("stability.csv"), report.to_csv())?;
    println!("k_max={} fail={:.1}%", report.k_max, report.fail_percent);
    Ok(())
}

fn metrics(
    trace_dir: &Path,
    reference: Option<&Path>,
    report_path: &Path,
    csv: Option<&Path>,
) -> Result<(), Failure> {
    let trace = read_trace(trace_dir)?;
    let plausibility = plausibility_report(&trace)?;
    let mut report = json!({
        "trace": trace_dir,
        "multiplier": trace.meta.multiplier,
        "method": trace.meta.method,
        "frames": trace.frame_count(),
        "aborted": trace.meta.aborted,
        "bmf": bmf_series(&trace)?,
        "gate": gate(&trace)?,
        "plausibility": plausibility,
    });
    if let Some(ref_dir) = reference {
        let reference = read_trace(ref_dir)?;
        let drift = drift_report(&trace, &reference, &ref_dir.display().to_string())?;
        report["drift"] = serde_json::to_value(drift)?;
    }
    write_json(report_path, &report)?;
    if let Some(csv) = csv {
        std::fs::write(csv, plausibility.to_csv())
            .with_context(|| format!("writing {}", csv.display()))?;
    }
    Ok(())
}

fn ablate(
    path: &Path,
    no_line_search: bool,
    fixed_forcing: Option<f64>,
    k: u32,
    out: Option<PathBuf>,
) -> Result<(), Failure> {
    let base = load_config(path, k)?;
    let mut variant = base.clone();
    if no_line_search {
        variant.solver.line_search_enabled = false;
    }
    if let Some(eta) = fixed_forcing {
        variant.solver.forcing_mode = ForcingMode::Fixed;
        variant.solver.fixed_eta = eta;
    }
    variant.validate()?;
    let dir = output_dir(out, &format!("{}_ablation_k{k}", base.scene));
    let (base_trace, variant_trace): (anyhow::Result<Trace>, anyhow::Result<Trace>) = rayon::join(
        || Ok(run_simulation(&base, Method::Implicit)?),
        || Ok(run_simulation(&variant, Method::Implicit)?),
    );
    let (base_trace, variant_trace) = (base_trace?, variant_trace?);
    write_trace(&base_trace, &dir.join("base"))?;
    write_trace(&variant_trace, &dir.join("variant"))?;
    let report = ablation_report(&variant_trace.telemetry, &base_trace.telemetry)?;
    write_json(
        &dir.join("ablation.json"),
        &json!({
            "no_line_search": no_line_search,
            "fixed_forcing": fixed_forcing,
            "multiplier": k,
            "report": report,
        }),
    )?;
    println!(
        "success={:.1}% speedup={:.3} rel_end={}",
        report.success_rate,
        report.speedup,
        report.rel_end.map_or("--".into(), |r| format!("{r:.3e}"))
    );
    Ok(())
}

fn fill(points: &Path, resolution: usize, grid_lim: f64, out: &Path) -> Result<(), Failure> {
    let input = read_points(points)?;
    let filled = fill_points(&input, grid_lim, resolution)?;
    if filled.is_empty() {
        log::warn!("no interior found; input may be solid or not closed");
    }
    write_points(out, &filled)?;
    println!("{} interior points", filled.len());
    Ok(())
}
