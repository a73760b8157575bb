//! Command-line driver: closed-loop scenario runs, metric reports,
//! a priori complexity bounds, and the randomized property campaign.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tbm_core::bundle::Trajectory;
use tbm_core::certificate::{
    complexity_bounds, estimate_lipschitz, penalized_objective, BoundReport, SampleDomain,
};
use tbm_core::io::{
    self, compute_metrics, emit_plots, load_scenario, parse_controller, read_trace, write_trace,
    ScenarioConfig, TraceRow,
};
use tbm_core::orchestrator::{closed_loop, ControllerKind, MonitorSetup, ScenarioRuntime};
use tbm_core::plant::equilibrium_torques;
use tbm_core::problem::R2RProblem;
use tbm_core::verify::run_property_campaign;
use tbm_core::Error;

#[derive(Parser)]
#[command(
    name = "tbm",
    version,
    about = "Derivative-free trajectory bundle control for multi-zone web transport"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a closed-loop scenario and write trace, metrics, plots, and
    /// bound reports under the output directory.
    Run {
        /// Scenario definition (JSON).
        #[arg(long)]
        scenario: PathBuf,
        /// Controller: atbm | tbm-fixed | lqr (overrides the scenario file).
        #[arg(long)]
        controller: String,
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
        /// Override the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Log per-iteration certificate inequality monitors.
        #[arg(long)]
        monitors: bool,
        /// Dump every convex subproblem as JSON under <out>/subproblems/.
        #[arg(long)]
        dump_subproblems: bool,
    },
    /// Recompute the metrics report from a trace CSV.
    Report {
        /// Trace CSV produced by `run`.
        #[arg(long)]
        trace: PathBuf,
        /// Scenario file for bounds and event times; defaults are used
        /// when omitted.
        #[arg(long)]
        scenario: Option<PathBuf>,
    },
    /// Print the a priori complexity bound report for a scenario.
    Bounds {
        #[arg(long)]
        scenario: PathBuf,
    },
    /// Run the randomized property campaign and print the pass/fail matrix.
    Verify {
        #[arg(long, default_value_t = 2024)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        instances: usize,
    },
}

const EXIT_VALIDATION: u8 = 2;
const EXIT_SOLVER: u8 = 3;

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::SolverFailure { .. } => EXIT_SOLVER,
        _ => EXIT_VALIDATION,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn dispatch(command: Command) -> Result<ExitCode, Error> {
    match command {
        Command::Run {
            scenario,
            controller,
            out,
            seed,
            monitors,
            dump_subproblems,
        } => cmd_run(&scenario, &controller, &out, seed, monitors, dump_subproblems),
        Command::Report { trace, scenario } => cmd_report(&trace, scenario.as_deref()),
        Command::Bounds { scenario } => cmd_bounds(&scenario),
        Command::Verify { seed, instances } => cmd_verify(seed, instances),
    }
}

/// The t = 0 window problem plus its reference state and equilibrium
/// torques, used for Lipschitz sampling and a priori bounds.
fn start_problem(rt: &ScenarioRuntime) -> Result<(R2RProblem, DVector<f64>, DVector<f64>), Error> {
    let x0 = rt.reference_state(0)?;
    let u_eq = equilibrium_torques(&x0, &rt.plant)?;
    let problem = R2RProblem::new(
        rt.plant.clone(),
        rt.weights.clone(),
        rt.bounds,
        rt.band,
        rt.tension_refs[..rt.horizon].to_vec(),
        rt.upstreams[..rt.horizon].to_vec(),
        vec![u_eq.clone(); rt.horizon],
    )?;
    Ok((problem, x0, u_eq))
}

const LIPSCHITZ_PAIRS: usize = 400;

fn a_priori_bounds(rt: &ScenarioRuntime) -> Result<(MonitorSetup, BoundReport), Error> {
    let (problem, x0, u_eq) = start_problem(rt)?;
    let domain = SampleDomain::centered(&x0, &u_eq, rt.adapt.delta_max);
    let mut rng = ChaCha8Rng::seed_from_u64(rt.seed ^ 0x6C62_272E_07BB_0142);
    let estimates = estimate_lipschitz(&problem, &domain, LIPSCHITZ_PAIRS, &mut rng)?;
    let z_start = Trajectory {
        states: vec![x0.clone(); rt.horizon],
        controls: vec![u_eq; rt.horizon],
    };
    let phi_capped = penalized_objective(
        &z_start,
        rt.adapt.mu_max,
        &rt.adapt.gamma_max,
        &problem,
        Some(&x0),
    );
    let report = complexity_bounds(
        &rt.adapt,
        &estimates,
        rt.horizon,
        phi_capped,
        0.0,
        rt.adapt.delta_max,
        "a-priori-zero",
    );
    let setup = MonitorSetup {
        estimates,
        delta_bar: report.delta_bar,
    };
    Ok((setup, report))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

fn cmd_run(
    scenario_path: &Path,
    controller: &str,
    out: &Path,
    seed: Option<u64>,
    monitors: bool,
    dump_subproblems: bool,
) -> Result<ExitCode, Error> {
    let kind = parse_controller(controller)?;
    let mut config = load_scenario(scenario_path)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    config.controller = controller.to_string();
    let rt = config.to_runtime()?;
    std::fs::create_dir_all(out)?;

    let is_bundle_controller = kind != ControllerKind::Lqr;
    let monitor_setup = if is_bundle_controller {
        let (setup, report) = a_priori_bounds(&rt)?;
        write_json(&out.join("bound_report.json"), &report)?;
        monitors.then_some(setup)
    } else {
        None
    };
    let dump_dir = (dump_subproblems && is_bundle_controller).then(|| out.join("subproblems"));

    let trace = closed_loop(kind, &rt, monitor_setup.as_ref(), dump_dir.as_deref())?;

    let csv_path = out.join("trace.csv");
    write_trace(&trace, rt.plant.n, &csv_path)?;
    if monitors {
        write_json(&out.join("monitors.json"), &trace.monitors)?;
    }
    let rows = read_trace(&csv_path)?;
    if !rows.is_empty() {
        let metrics = compute_metrics(&rows, &config)?;
        write_json(&out.join("metrics.json"), &metrics)?;
        emit_plots(&rows, &out.join("trace"))?;
        println!("{}", serde_json::to_string_pretty(&metrics)?);
    }
    if let Some(failure) = &trace.failure {
        eprintln!("run truncated: {failure}");
        return Ok(ExitCode::from(EXIT_SOLVER));
    }
    println!(
        "wrote {} steps to {}",
        trace.steps.len(),
        csv_path.display()
    );
    Ok(ExitCode::SUCCESS)
}

/// Fallback config when `report` is invoked without a scenario file:
/// default bounds, no scheduled events.
fn report_config(rows: &[TraceRow]) -> ScenarioConfig {
    let n = rows.first().map_or(1, |r| r.tensions.len());
    let initial_tensions = rows
        .first()
        .map_or(vec![30.0; n], |r| r.tension_refs.clone());
    ScenarioConfig {
        schema_version: io::SCHEMA_VERSION,
        seed: 0,
        duration_s: rows.last().map_or(1.0, |r| r.time_s + 0.01).max(0.01),
        controller: "atbm".to_string(),
        horizon: 2,
        max_outer_iterations: 30,
        plant: tbm_core::PlantParams::default_line(n),
        adapt: tbm_core::AdaptConfig::default(),
        weights: tbm_core::Weights::default_line(n),
        bounds: tbm_core::Bounds::default(),
        soft_band: tbm_core::SoftBand::default(),
        initial_tensions,
        tension_events: vec![],
        initial_upstream: 0.01,
        upstream_events: vec![],
    }
}

fn cmd_report(trace: &Path, scenario: Option<&Path>) -> Result<ExitCode, Error> {
    let rows = read_trace(trace)?;
    let config = match scenario {
        Some(path) => load_scenario(path)?,
        None => report_config(&rows),
    };
    let metrics = compute_metrics(&rows, &config)?;
    println!("{}", serde_json::to_string_pretty(&metrics)?);
    Ok(ExitCode::SUCCESS)
}

fn cmd_bounds(scenario: &Path) -> Result<ExitCode, Error> {
    let config = load_scenario(scenario)?;
    let rt = config.to_runtime()?;
    let (_, report) = a_priori_bounds(&rt)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(seed: u64, instances: usize) -> Result<ExitCode, Error> {
    let report = run_property_campaign(seed, instances)?;
    for check in &report.checks {
        let verdict = if check.failed == 0 { "PASS" } else { "FAIL" };
        println!(
            "{verdict} {:<32} passed {:>3}  failed {:>3}",
            check.name, check.passed, check.failed
        );
        if let Some(repro) = &check.first_failure {
            println!("     first failure: {repro}");
        }
    }
    if report.all_passed() {
        println!("campaign: all checks passed ({instances} instances, seed {seed})");
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("campaign: invariant failures detected");
        Ok(ExitCode::FAILURE)
    }
}
