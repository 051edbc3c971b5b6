use clap::{Parser, Subcommand};
use czflow_cli::presets::{execute_preset, summarize, PresetKind};
use czflow_cli::report::{
    write_json, write_metrics_csv, write_sweep_csv, write_trace_csv, REPORT_SCHEMA_VERSION,
};
use czflow_cli::scenario::{parse_scenario, scenario_hash};
use czflow_cli::HarnessError;
use czflow_core::audit::audit_trace;
use czflow_core::sim_engine::run;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "czflow", version, about = "Merging control-zone network simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario file and write trace/metrics/report files.
    Run {
        /// Scenario file (TOML; see docs/scenario.md).
        scenario: PathBuf,
        /// Override the scenario's RNG seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the scenario's step size (s).
        #[arg(long)]
        dt: Option<f64>,
        /// Fixed-headway arrivals instead of Poisson draws.
        #[arg(long)]
        deterministic_arrivals: bool,
        /// Output directory.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run a named experiment preset over a seed batch.
    Preset {
        /// One of: vm_sweep, fixed_vs_none, feedback_vs_fixed_vs_none,
        /// varying_traffic.
        name: String,
        /// Number of seeds.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// First seed of the batch.
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Override the preset step size (s).
        #[arg(long)]
        dt: Option<f64>,
        /// Fixed-headway arrivals instead of Poisson draws.
        #[arg(long)]
        deterministic_arrivals: bool,
        /// Output directory.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

#[derive(serde::Serialize)]
struct RunReport {
    schema_version: &'static str,
    scenario_hash: String,
    seed: u64,
    arrivals_generated: usize,
    network_exits: usize,
    in_system_at_end: usize,
    held_at_end: usize,
    metrics: czflow_core::MetricsRecord,
    audit: czflow_core::audit::AuditReport,
}

fn cmd_run(
    scenario: &PathBuf,
    seed: Option<u64>,
    dt: Option<f64>,
    deterministic: bool,
    out: &PathBuf,
) -> Result<(), HarnessError> {
    let mut config = parse_scenario(scenario)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    if let Some(dt) = dt {
        config.dt = dt;
    }
    if deterministic {
        config.deterministic_arrivals = true;
    }
    config.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
    let output = run(&config).map_err(|e| HarnessError::Config(e.to_string()))?;
    // Audit with the sampled-data slack floor (u_max − u_min)·dt/2.
    let span = config
        .zones
        .iter()
        .map(|z| z.u_max - z.u_min)
        .fold(0.0f64, f64::max);
    let floor = span * config.dt / 2.0;
    let audit = audit_trace(&output.trace, &output.events, &config, -floor, -floor);
    write_trace_csv(&out.join("trace.csv"), &output.trace)?;
    write_metrics_csv(&out.join("metrics.csv"), &[(config.seed, &output.metrics.per_cav_zone)])?;
    write_json(
        &out.join("report.json"),
        &RunReport {
            schema_version: REPORT_SCHEMA_VERSION,
            scenario_hash: scenario_hash(&config),
            seed: config.seed,
            arrivals_generated: output.arrivals_generated,
            network_exits: output.network_exits,
            in_system_at_end: output.in_system_at_end,
            held_at_end: output.held_at_end,
            metrics: output.metrics,
            audit,
        },
    )?;
    println!(
        "wrote {} (exits: {}, audit clean: {})",
        out.display(),
        audit.merge_crossings_checked,
        audit.clean()
    );
    Ok(())
}

fn cmd_preset(
    name: &str,
    n_seeds: u64,
    first_seed: u64,
    dt: Option<f64>,
    deterministic: bool,
    out: &PathBuf,
) -> Result<(), HarnessError> {
    let kind: PresetKind = name.parse()?;
    let seeds: Vec<u64> = (0..n_seeds).map(|i| first_seed + i).collect();
    let runs = execute_preset(kind, &seeds, dt, deterministic)?;
    let report = summarize(&runs);
    let dir = out.join(kind.name());
    for (variant, per_seed) in runs.variants.iter().zip(&runs.metrics) {
        let rows: Vec<(u64, &[czflow_core::CavZoneMetrics])> = seeds
            .iter()
            .zip(per_seed)
            .map(|(s, m)| (*s, m.per_cav_zone.as_slice()))
            .collect();
        write_metrics_csv(&dir.join(format!("metrics_{}.csv", variant.name)), &rows)?;
    }
    if let Some(sweep) = &report.sweep {
        write_sweep_csv(&dir.join("sweep_curve.csv"), &sweep.points)?;
    }
    write_json(&dir.join("report.json"), &report)?;
    for v in &report.variants {
        println!(
            "{:<28} total_obj {:8.3}  fem_count {:6.1}  fem_time {:6.3}s  infeasible {:4.1}",
            v.name, v.total_obj_weighted, v.fem_count, v.fem_time_avg, v.infeasible_count
        );
    }
    if let Some(sweep) = &report.sweep {
        println!("quadratic-fit argmin of total objective: {:.2} m/s", sweep.fit.argmin);
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { scenario, seed, dt, deterministic_arrivals, out } => {
            cmd_run(scenario, *seed, *dt, *deterministic_arrivals, out)
        }
        Command::Preset { name, seeds, seed, dt, deterministic_arrivals, out } => {
            cmd_preset(name, *seeds, *seed, *dt, *deterministic_arrivals, out)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ HarnessError::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e @ HarnessError::Runtime(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}
