//! Command-line front end for the Lagrangian DLSS solver: runs experiments,
//! emits plot-ready tables, and verifies the structural properties and
//! a-priori estimates of finished trajectories.
//!
//! Exit codes: 0 when everything requested passed, 3 when the run finished
//! but a verification check or an order band failed, 1 on configuration or
//! solver errors (with a machine-readable `error.json` in the run directory),
//! 2 on bad command lines (clap).

// flag guards are written `!(x > 0.0)` on purpose: they must catch NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use dlss::analysis::{
    self, builtin_spatial_consistency, builtin_temporal_consistency, consistency_residual,
    consistency_study, ConsistencyAxis, ConvergenceStudy, EntropyDecay, EstimateReport, OrderFit,
    SmoothMap,
};
use dlss::datum::Datum;
use dlss::functionals::MetricWorkspace;
use dlss::grid::{self, Domain, LagrangianState, MassGrid};
use dlss::io;
use dlss::solver::{self, Schedule, SolverConfig, Trajectory};

/// Acceptance band for second-order (spatial) refinement slopes.
const SPATIAL_BAND: (f64, f64) = (1.7, 2.3);
/// Acceptance band for first-order (temporal) refinement slopes.
const TEMPORAL_BAND: (f64, f64) = (0.8, 1.2);
/// Defect-norm ceiling for the stationary consistency map.
const STATIONARY_TOL: f64 = 1e-12;
/// Node-placement ratio for geometric clustering around density jumps.
const CLUSTER_RATIO: f64 = 0.7;

const CONFIG_SCHEMA: &str = "dlss.config.v1";
const ERROR_SCHEMA: &str = "dlss.error.v1";

#[derive(Parser)]
#[command(
    name = "dlss",
    version,
    about = "Lagrangian minimizing-movement solver for a fourth-order diffusion equation",
    long_about = "Solves du/dt + (u (sqrt(u)_xx / sqrt(u))_x)_x = 0 on an interval by moving \
                  mass points, one implicit minimization per time step. Positivity and mass are \
                  exact by construction; entropy and Fisher information decay are verified, not \
                  assumed. All numeric flags accept scientific notation (1e-6)."
)]
struct Cli {
    /// Worker threads for study cells (default: one per core)
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one trajectory; write logs, snapshots, and a verification report
    Run(RunArgs),
    /// Self-convergence study over a mesh or time-step ladder
    Convergence(ConvergenceArgs),
    /// Truncation-defect ladders against closed-form smooth deformations
    Consistency(ConsistencyArgs),
    /// Discontinuous datum: adaptive ramp run plus error-vs-mesh table
    Discontinuous(DiscontinuousArgs),
    /// Re-run the verification suite on a stored trajectory file
    Verify(VerifyArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum DatumKind {
    /// eps + cos^16(pi x) on [0, 1]
    Cos16,
    /// two unit plateaus with a 1e-3 well between x = 1/3 and x = 2/3
    Discontinuous,
    /// constant density one on [0, 1]
    Uniform,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum GridKind {
    /// equal mass per cell; nodes placed by the inverse distribution function
    Uniform,
    /// equidistant physical nodes; cell masses absorb the datum
    Cdf,
}

#[derive(Args)]
struct RunArgs {
    /// Number of mass cells
    #[arg(long = "K", default_value_t = 200)]
    k: usize,
    /// Fixed time step
    #[arg(long, default_value_t = 1e-6)]
    tau: f64,
    /// Final time (default: the last snapshot)
    #[arg(long = "t-end")]
    t_end: Option<f64>,
    /// Initial density
    #[arg(long, value_enum, default_value_t = DatumKind::Cos16)]
    datum: DatumKind,
    /// Smoothing offset of the cos16 datum
    #[arg(long, default_value_t = 1e-3)]
    epsilon: f64,
    /// Mass grid layout
    #[arg(long, value_enum, default_value_t = GridKind::Uniform)]
    grid: GridKind,
    /// Output directory
    #[arg(long, default_value = "out/run")]
    out: PathBuf,
    /// Snapshot times, comma separated (default: 0,1e-6,1e-5,1e-4,1e-3)
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    snapshots: Option<Vec<f64>>,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum StudyAxis {
    /// mesh ladder at fixed step, against a finer-mesh reference
    Space,
    /// step ladder at fixed mesh, against a finer-step reference
    Time,
}

#[derive(Args)]
struct ConvergenceArgs {
    /// Refinement axis
    #[arg(long, value_enum)]
    axis: StudyAxis,
    /// Ladder levels: cell counts (space) or time steps (time), comma separated
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    levels: Option<Vec<f64>>,
    /// space: reference cell count (default 400); time: fixed cell count (default 800)
    #[arg(long = "K")]
    k: Option<usize>,
    /// space: fixed time step (default 1e-8); time: reference step (default 1e-8)
    #[arg(long)]
    tau: Option<f64>,
    /// Comparison time (default: space 5e-6, time 1e-5)
    #[arg(long = "t-end")]
    t_end: Option<f64>,
    /// Initial density
    #[arg(long, value_enum, default_value_t = DatumKind::Cos16)]
    datum: DatumKind,
    /// Smoothing offset of the cos16 datum
    #[arg(long, default_value_t = 1e-3)]
    epsilon: f64,
    /// Output directory
    #[arg(long, default_value = "out/convergence")]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum MapKind {
    /// both built-in ladders (wave in space, damped wave in time)
    Both,
    /// frozen sinusoidal deformation, mesh ladder
    Wave,
    /// exponentially relaxing deformation, step ladder
    DampedWave,
    /// identity deformation: every defect must vanish
    Stationary,
}

#[derive(Args)]
struct ConsistencyArgs {
    /// Analytic deformation to test against
    #[arg(long, value_enum, default_value_t = MapKind::Both)]
    map: MapKind,
    /// Ladder levels: cell counts (wave, stationary) or steps (damped-wave)
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    levels: Option<Vec<f64>>,
    /// Cell count for the damped-wave step ladder
    #[arg(long = "K", default_value_t = 1024)]
    k: usize,
    /// Fixed step for the mesh ladders
    #[arg(long, default_value_t = 1e-3)]
    tau: f64,
    /// Evaluation time along the deformation
    #[arg(long = "t-end")]
    t_end: Option<f64>,
    /// Output directory
    #[arg(long, default_value = "out/consistency")]
    out: PathBuf,
}

#[derive(Args)]
struct DiscontinuousArgs {
    /// Number of mass cells for the showcase run
    #[arg(long = "K", default_value_t = 200)]
    k: usize,
    /// Initial step of the geometric ramp
    #[arg(long, default_value_t = 1e-13)]
    tau: f64,
    /// Final time of the showcase run
    #[arg(long = "t-end", default_value_t = 1e-3)]
    t_end: f64,
    /// Fraction of interior nodes clustered around the two jumps
    #[arg(long = "cluster-fraction", default_value_t = 0.5)]
    cluster_fraction: f64,
    /// Clustering radius around each jump
    #[arg(long = "cluster-radius", default_value_t = 0.05)]
    cluster_radius: f64,
    /// Snapshot times (default: 0 plus 1e-13,1e-11,...,1e-3)
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    snapshots: Option<Vec<f64>>,
    /// Mesh ladder of the error study against the fixed-grid reference
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    levels: Option<Vec<usize>>,
    /// Horizon of the error study
    #[arg(long = "study-t-end", default_value_t = 1e-8)]
    study_t_end: f64,
    /// Cells of the fixed-grid reference (must be at least twice the finest level)
    #[arg(long = "ref-cells", default_value_t = 400)]
    ref_cells: usize,
    /// Step of the fixed-grid reference
    #[arg(long = "ref-tau", default_value_t = 1e-12)]
    ref_tau: f64,
    /// Output directory
    #[arg(long, default_value = "out/discontinuous")]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    /// Stored trajectory (dlss.trajectory.v1 JSON)
    trajectory: PathBuf,
    /// Output directory
    #[arg(long, default_value = "out/verify")]
    out: PathBuf,
}

// ---------------------------------------------------------------------------
// Outcome plumbing
// ---------------------------------------------------------------------------

/// What a finished command reports: did every requested check pass?
struct Outcome {
    checks_passed: bool,
}

impl Outcome {
    fn checked(ok: bool) -> Self {
        Self { checks_passed: ok }
    }
}

#[derive(Serialize)]
struct ErrorRecord {
    schema: &'static str,
    command: String,
    message: String,
}

fn write_error_json(out: &Path, command: &str, err: &anyhow::Error) {
    let record = ErrorRecord {
        schema: ERROR_SCHEMA,
        command: command.to_string(),
        message: format!("{err:#}"),
    };
    if fs::create_dir_all(out).is_ok() {
        let _ = io::write_json_pretty(&out.join("error.json"), &record);
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: cannot configure {n} worker threads: {e}");
            return ExitCode::from(1);
        }
    }

    let (name, out_dir) = match &cli.command {
        Command::Run(a) => ("run", a.out.clone()),
        Command::Convergence(a) => ("convergence", a.out.clone()),
        Command::Consistency(a) => ("consistency", a.out.clone()),
        Command::Discontinuous(a) => ("discontinuous", a.out.clone()),
        Command::Verify(a) => ("verify", a.out.clone()),
    };

    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Convergence(args) => cmd_convergence(args),
        Command::Consistency(args) => cmd_consistency(args),
        Command::Discontinuous(args) => cmd_discontinuous(args),
        Command::Verify(args) => cmd_verify(args),
    };

    match result {
        Ok(outcome) if outcome.checks_passed => ExitCode::SUCCESS,
        Ok(_) => {
            eprintln!("{name}: finished, but at least one check failed");
            ExitCode::from(3)
        }
        Err(err) => {
            eprintln!("{name}: error: {err:#}");
            write_error_json(&out_dir, name, &err);
            ExitCode::from(1)
        }
    }
}

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

fn make_datum(kind: DatumKind, epsilon: f64) -> Result<Datum> {
    match kind {
        DatumKind::Cos16 => {
            if !(epsilon > 0.0) {
                bail!("--epsilon must be positive, got {epsilon}");
            }
            Ok(Datum::Cos16 { epsilon })
        }
        DatumKind::Discontinuous => Ok(Datum::Discontinuous),
        DatumKind::Uniform => Ok(Datum::Uniform {
            domain: Domain::new(0.0, 1.0, 1.0)?,
        }),
    }
}

fn prepare_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))
}

/// Ladder levels given as cell counts must be whole numbers of at least 2.
fn usize_levels(levels: &[f64]) -> Result<Vec<usize>> {
    levels
        .iter()
        .map(|&l| {
            if l.fract() != 0.0 || !(2.0..=1e9).contains(&l) {
                bail!("cell counts must be whole numbers of at least 2, got {l}");
            }
            Ok(l as usize)
        })
        .collect()
}

fn write_config<T: Serialize>(out: &Path, resolved: &T) -> Result<()> {
    #[derive(Serialize)]
    struct ConfigRecord<'a, T: Serialize> {
        schema: &'static str,
        #[serde(flatten)]
        resolved: &'a T,
    }
    io::write_json_pretty(
        &out.join("config.json"),
        &ConfigRecord {
            schema: CONFIG_SCHEMA,
            resolved,
        },
    )?;
    Ok(())
}

/// Deterministic time label for snapshot file names: `0`, `1e-6`, `5e-4`, ...
fn time_label(t: f64) -> String {
    if t == 0.0 {
        "0".to_string()
    } else {
        format!("{t:e}")
    }
}

fn print_reports(reports: &[EstimateReport]) {
    for r in reports {
        let verdict = if r.satisfied { "ok  " } else { "FAIL" };
        println!("  {verdict} {:<28} lhs={:<24e} rhs={:e}", r.name, r.lhs, r.rhs);
    }
}

fn in_band(slope: f64, band: (f64, f64)) -> bool {
    band.0 <= slope && slope <= band.1
}

fn print_study(study: &ConvergenceStudy, axis_label: &str) {
    for cell in &study.cells {
        match (&cell.error, &cell.failure) {
            (Some(e), _) => println!("  {axis_label}={:<12e} error={e:e}", cell.parameter),
            (None, Some(msg)) => {
                println!("  {axis_label}={:<12e} failed: {msg}", cell.parameter)
            }
            (None, None) => unreachable!("study cell without error or failure"),
        }
    }
    println!(
        "  fitted slope {:.4} (r^2 = {:.6})",
        study.fit.slope, study.fit.r_squared
    );
}

fn study_rows(study: &ConvergenceStudy) -> Vec<(f64, Option<f64>)> {
    study
        .cells
        .iter()
        .map(|c| (c.parameter, c.error))
        .collect()
}

/// Write the error table of a study as CSV plus a gnuplot twin holding the
/// successful cells.
fn write_study_tables(
    out: &Path,
    stem: &str,
    axis_label: &str,
    study: &ConvergenceStudy,
) -> Result<()> {
    io::write_convergence_csv(
        &out.join(format!("{stem}.csv")),
        axis_label,
        &study_rows(study),
        study.fit.slope,
    )?;
    let rows: Vec<Vec<f64>> = study
        .cells
        .iter()
        .filter_map(|c| c.error.map(|e| vec![c.parameter, e]))
        .collect();
    io::write_gnuplot_table(
        &out.join(format!("{stem}.dat")),
        &[axis_label, "error"],
        &rows,
    )?;
    Ok(())
}

/// Snapshot emission: every requested time is mapped to the nearest stored
/// state (ties to the earlier one); the manifest records the mapping.
fn write_snapshots(
    out: &Path,
    traj: &Trajectory,
    requested: &[f64],
    log_scale: bool,
) -> Result<()> {
    let times = traj.times();
    let mut manifest: Vec<Vec<f64>> = Vec::new();
    for &t in requested {
        let idx = times
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| {
                let (da, db) = ((*a - t).abs(), (*b - t).abs());
                da.partial_cmp(&db).unwrap()
            })
            .map(|(i, _)| i)
            .expect("trajectory has at least the initial state");
        let label = time_label(t);
        let state = &traj.states()[idx];
        if log_scale {
            write_log_snapshot(
                &out.join(format!("snapshot_{label}.csv")),
                &out.join(format!("snapshot_{label}.dat")),
                traj.grid(),
                state,
            )?;
        } else {
            io::write_state_csv(&out.join(format!("snapshot_{label}.csv")), traj.grid(), state)?;
            io::write_state_gnuplot(
                &out.join(format!("snapshot_{label}.dat")),
                traj.grid(),
                state,
            )?;
        }
        manifest.push(vec![t, times[idx], idx as f64]);
    }
    io::write_csv_table(
        &out.join("snapshots.csv"),
        &["requested_t", "actual_t", "step"],
        &manifest,
    )?;
    Ok(())
}

/// Snapshot with an extra log10 density column, for data spanning decades.
fn write_log_snapshot(
    csv_path: &Path,
    dat_path: &Path,
    grid: &MassGrid,
    state: &LagrangianState,
) -> Result<()> {
    let nodal = grid::density_nodal(grid, state)?;
    let rows: Vec<Vec<f64>> = (0..=grid.num_cells())
        .map(|j| {
            let z = nodal.values()[j];
            vec![grid.node(j), state.node(j), z, z.log10()]
        })
        .collect();
    let header = ["xi", "x", "z", "log10z"];
    io::write_csv_table(csv_path, &header, &rows)?;
    io::write_gnuplot_table(dat_path, &header, &rows)?;
    Ok(())
}

/// Run a schedule and keep the partial trajectory around for the error report.
fn run_solver(
    grid: &MassGrid,
    state: &LagrangianState,
    schedule: Schedule,
    config: &SolverConfig,
) -> Result<Trajectory> {
    solver::run(grid, state, schedule, config).map_err(|f| {
        anyhow::anyhow!(
            "solver stopped after {} steps at t = {:e}: {}",
            f.partial.num_steps(),
            f.partial.final_time(),
            f.source
        )
    })
}

/// Everything `run` and `discontinuous` share once the trajectory exists:
/// logs, particle paths, snapshots, restart file, verification report.
fn emit_run_artifacts(
    out: &Path,
    traj: &Trajectory,
    snapshots: &[f64],
    log_scale: bool,
) -> Result<bool> {
    io::write_lagrangian_log_csv(&out.join("trajectory_log.csv"), traj)?;
    io::write_trajectory_json(&out.join("trajectory.json"), traj)?;
    io::write_particle_trajectories_csv(&out.join("particles.csv"), traj)?;
    io::write_particle_trajectories_gnuplot(&out.join("particles.dat"), traj)?;
    write_snapshots(out, traj, snapshots, log_scale)?;
    io::write_restart_json(
        &out.join("restart.json"),
        traj.grid(),
        traj.final_state(),
        traj.final_time(),
    )?;

    let mut reports = analysis::structural_reports(traj)?;
    if traj.grid().is_uniform() {
        reports.extend(analysis::check_dissipation_estimates(traj)?);
    } else {
        println!("  (a-priori estimate suite skipped: non-uniform mass grid)");
    }
    print_reports(&reports);
    let all = io::write_verification_json(&out.join("verification.json"), reports)?;
    Ok(all)
}

// ---------------------------------------------------------------------------
// run
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct RunConfig {
    command: &'static str,
    datum: DatumKind,
    epsilon: f64,
    k: usize,
    grid: GridKind,
    tau: f64,
    steps: usize,
    t_end: f64,
    snapshots: Vec<f64>,
    out: PathBuf,
}

fn cmd_run(args: RunArgs) -> Result<Outcome> {
    let datum = make_datum(args.datum, args.epsilon)?;
    if args.k < 2 {
        bail!("--K must be at least 2, got {}", args.k);
    }
    if !(args.tau > 0.0) {
        bail!("--tau must be positive, got {}", args.tau);
    }
    let snapshots = args
        .snapshots
        .unwrap_or_else(|| vec![0.0, 1e-6, 1e-5, 1e-4, 1e-3]);
    if snapshots.iter().any(|&t| t < 0.0) {
        bail!("snapshot times must be nonnegative");
    }
    let latest = snapshots.iter().cloned().fold(0.0, f64::max);
    let t_end = args.t_end.unwrap_or(latest);
    if t_end < latest {
        bail!("--t-end {t_end:e} lies before the last snapshot {latest:e}");
    }
    let steps = ((t_end / args.tau).round() as usize).max(1);

    prepare_out(&args.out)?;
    let config = RunConfig {
        command: "run",
        datum: args.datum,
        epsilon: args.epsilon,
        k: args.k,
        grid: args.grid,
        tau: args.tau,
        steps,
        t_end: steps as f64 * args.tau,
        snapshots: snapshots.clone(),
        out: args.out.clone(),
    };
    write_config(&args.out, &config)?;

    let (grid, state) = match args.grid {
        GridKind::Uniform => datum.uniform_setup(args.k)?,
        GridKind::Cdf => datum.adapted_setup(args.k)?,
    };
    println!(
        "run: {:?} datum, K={}, tau={:e}, {} steps to t={:e}",
        args.datum, args.k, args.tau, steps, config.t_end
    );
    let traj = run_solver(
        &grid,
        &state,
        Schedule::Fixed {
            tau: args.tau,
            steps,
        },
        &SolverConfig::default(),
    )?;
    println!(
        "  finished: {} accepted steps, {} rejected",
        traj.num_steps(),
        traj.rejected_steps()
    );

    let all = emit_run_artifacts(&args.out, &traj, &snapshots, false)?;
    println!(
        "run: verification {}",
        if all { "passed" } else { "FAILED" }
    );
    Ok(Outcome::checked(all))
}

// ---------------------------------------------------------------------------
// convergence
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct ConvergenceConfig {
    command: &'static str,
    axis: StudyAxis,
    datum: DatumKind,
    epsilon: f64,
    levels: Vec<f64>,
    k: usize,
    tau: f64,
    t_end: f64,
    band: (f64, f64),
    out: PathBuf,
}

fn cmd_convergence(args: ConvergenceArgs) -> Result<Outcome> {
    let datum = make_datum(args.datum, args.epsilon)?;
    let (levels, k, tau, t_end, band, axis_label) = match args.axis {
        StudyAxis::Space => (
            args.levels.unwrap_or_else(|| vec![25.0, 50.0, 100.0, 200.0]),
            args.k.unwrap_or(400),
            args.tau.unwrap_or(1e-8),
            args.t_end.unwrap_or(5e-6),
            SPATIAL_BAND,
            "delta",
        ),
        StudyAxis::Time => (
            args.levels
                .unwrap_or_else(|| vec![1e-5, 5e-6, 1e-6, 5e-7, 1e-7]),
            args.k.unwrap_or(800),
            args.tau.unwrap_or(1e-8),
            args.t_end.unwrap_or(1e-5),
            TEMPORAL_BAND,
            "tau",
        ),
    };
    if levels.len() < 3 {
        bail!(
            "an order fit needs at least 3 ladder levels, got {}",
            levels.len()
        );
    }

    match args.axis {
        StudyAxis::Space => {
            let finest = levels.iter().cloned().fold(0.0, f64::max) as usize;
            if k < 2 * finest {
                bail!(
                    "reference mesh K={k} must be at least twice the finest level {finest}"
                );
            }
        }
        StudyAxis::Time => {
            let finest = levels.iter().cloned().fold(f64::INFINITY, f64::min);
            if tau > finest / 2.0 {
                bail!(
                    "reference step tau={tau:e} must be at most half the finest level {finest:e}"
                );
            }
        }
    }

    prepare_out(&args.out)?;
    write_config(
        &args.out,
        &ConvergenceConfig {
            command: "convergence",
            axis: args.axis,
            datum: args.datum,
            epsilon: args.epsilon,
            levels: levels.clone(),
            k,
            tau,
            t_end,
            band,
            out: args.out.clone(),
        },
    )?;

    let solver_config = SolverConfig::default();
    let study = match args.axis {
        StudyAxis::Space => {
            let ks = usize_levels(&levels)?;
            println!(
                "convergence (space): K in {ks:?}, tau={tau:e}, T={t_end:e}, reference K={k}"
            );
            analysis::spatial_study(&datum, &ks, tau, t_end, k, &solver_config)?
        }
        StudyAxis::Time => {
            println!(
                "convergence (time): tau in {levels:?}, K={k}, T={t_end:e}, reference tau={tau:e}"
            );
            analysis::temporal_study(&datum, k, &levels, t_end, tau, &solver_config)?
        }
    };

    print_study(&study, axis_label);
    write_study_tables(&args.out, "errors", axis_label, &study)?;
    io::write_json_pretty(&args.out.join("study.json"), &study)?;

    let ok = in_band(study.fit.slope, band);
    println!(
        "convergence: slope {:.4} {} band [{}, {}]",
        study.fit.slope,
        if ok { "within" } else { "OUTSIDE" },
        band.0,
        band.1
    );
    Ok(Outcome::checked(ok))
}

// ---------------------------------------------------------------------------
// consistency
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct ConsistencyConfig {
    command: &'static str,
    map: MapKind,
    levels: Option<Vec<f64>>,
    k: usize,
    tau: f64,
    t_end: Option<f64>,
    out: PathBuf,
}

#[derive(Serialize)]
struct ConsistencySummary<'a> {
    spatial: Option<&'a OrderFit>,
    temporal: Option<&'a OrderFit>,
    spatial_band: (f64, f64),
    temporal_band: (f64, f64),
}

fn report_order(kind: &str, fit: &OrderFit, band: (f64, f64)) -> bool {
    let ok = in_band(fit.slope, band);
    println!(
        "consistency ({kind}): order {:.4} (r^2 = {:.6}) {} band [{}, {}]",
        fit.slope,
        fit.r_squared,
        if ok { "within" } else { "OUTSIDE" },
        band.0,
        band.1
    );
    ok
}

fn cmd_consistency(args: ConsistencyArgs) -> Result<Outcome> {
    prepare_out(&args.out)?;
    write_config(
        &args.out,
        &ConsistencyConfig {
            command: "consistency",
            map: args.map,
            levels: args.levels.clone(),
            k: args.k,
            tau: args.tau,
            t_end: args.t_end,
            out: args.out.clone(),
        },
    )?;

    let mut spatial: Option<OrderFit> = None;
    let mut temporal: Option<OrderFit> = None;
    let mut ok = true;

    match args.map {
        MapKind::Both => {
            let s = builtin_spatial_consistency()?;
            let t = builtin_temporal_consistency()?;
            ok &= report_order("spatial", &s, SPATIAL_BAND);
            ok &= report_order("temporal", &t, TEMPORAL_BAND);
            spatial = Some(s);
            temporal = Some(t);
        }
        MapKind::Wave => {
            let ks = usize_levels(
                &args
                    .levels
                    .unwrap_or_else(|| vec![16.0, 32.0, 64.0, 128.0, 256.0]),
            )?;
            let fit = consistency_study(
                &SmoothMap::damped_wave(0.3, 0.0),
                &ConsistencyAxis::Spatial {
                    ks,
                    tau: args.tau,
                    t: args.t_end.unwrap_or(0.0),
                },
            )?;
            ok &= report_order("spatial", &fit, SPATIAL_BAND);
            spatial = Some(fit);
        }
        MapKind::DampedWave => {
            let taus = args
                .levels
                .unwrap_or_else(|| vec![2.5e-3, 1.25e-3, 6.25e-4, 3.125e-4, 1.5625e-4]);
            let fit = consistency_study(
                &SmoothMap::damped_wave(0.3, 30.0),
                &ConsistencyAxis::Temporal {
                    k: args.k,
                    taus,
                    t: args.t_end.unwrap_or(0.05),
                },
            )?;
            ok &= report_order("temporal", &fit, TEMPORAL_BAND);
            temporal = Some(fit);
        }
        MapKind::Stationary => {
            let map = SmoothMap::stationary(Domain::new(0.0, 1.0, 1.0)?);
            let ks = usize_levels(&args.levels.unwrap_or_else(|| vec![8.0, 32.0, 128.0]))?;
            let t = args.t_end.unwrap_or(0.0);
            let mut rows = Vec::new();
            let mut worst = 0.0f64;
            for &k in &ks {
                let r = consistency_residual(&map, k, args.tau, t)?;
                let grid = MassGrid::uniform(k, map.domain().mass())?;
                let norm = MetricWorkspace::new(&grid).norm(&r);
                println!("  K={k:<6} defect norm {norm:e}");
                worst = worst.max(norm);
                rows.push(vec![k as f64, norm]);
            }
            io::write_csv_table(&args.out.join("defects.csv"), &["K", "defect"], &rows)?;
            ok = worst <= STATIONARY_TOL;
            println!(
                "consistency (stationary): worst defect {worst:e} {} {STATIONARY_TOL:e}",
                if ok { "<=" } else { "EXCEEDS" }
            );
        }
    }

    if let Some(fit) = &spatial {
        io::write_convergence_csv(
            &args.out.join("spatial.csv"),
            "delta",
            &fit.abscissae
                .iter()
                .zip(&fit.errors)
                .map(|(&a, &e)| (a, Some(e)))
                .collect::<Vec<_>>(),
            fit.slope,
        )?;
    }
    if let Some(fit) = &temporal {
        io::write_convergence_csv(
            &args.out.join("temporal.csv"),
            "tau",
            &fit.abscissae
                .iter()
                .zip(&fit.errors)
                .map(|(&a, &e)| (a, Some(e)))
                .collect::<Vec<_>>(),
            fit.slope,
        )?;
    }
    io::write_json_pretty(
        &args.out.join("consistency.json"),
        &ConsistencySummary {
            spatial: spatial.as_ref(),
            temporal: temporal.as_ref(),
            spatial_band: SPATIAL_BAND,
            temporal_band: TEMPORAL_BAND,
        },
    )?;
    Ok(Outcome::checked(ok))
}

// ---------------------------------------------------------------------------
// discontinuous
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct DiscontinuousConfig {
    command: &'static str,
    k: usize,
    tau0: f64,
    growth: f64,
    tau_max: f64,
    t_end: f64,
    cluster_fraction: f64,
    cluster_radius: f64,
    cluster_ratio: f64,
    snapshots: Vec<f64>,
    levels: Vec<usize>,
    study_t_end: f64,
    ref_cells: usize,
    ref_tau: f64,
    out: PathBuf,
}

/// Node ladder for the discontinuous datum: a configurable fraction of the
/// interior nodes is placed in geometric progressions closing in on the two
/// jumps; the rest is spread uniformly over the three plateau segments.
fn clustered_nodes(k: usize, jumps: &[f64], radius: f64, fraction: f64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&fraction) {
        bail!("--cluster-fraction must lie in [0, 1), got {fraction}");
    }
    if !(radius > 0.0) || radius >= 1.0 / 6.0 {
        bail!("--cluster-radius must lie in (0, 1/6), got {radius}");
    }
    let interior = k - 1;
    let per_side = (fraction * interior as f64 / (2.0 * jumps.len() as f64)) as usize;
    if per_side == 0 {
        // too few nodes to cluster: plain equidistant layout
        return Ok((0..=k).map(|i| i as f64 / k as f64).collect());
    }
    let uniform_total = interior - 2 * jumps.len() * per_side;

    // plateau segments between the clustering windows
    let mut edges = vec![0.0];
    for &j in jumps {
        edges.push(j - radius);
        edges.push(j + radius);
    }
    edges.push(1.0);
    let segments: Vec<(f64, f64)> = edges.chunks(2).map(|c| (c[0], c[1])).collect();
    let total_len: f64 = segments.iter().map(|(a, b)| b - a).sum();

    // proportional split of the uniform nodes, remainder to the last segment
    let mut counts: Vec<usize> = segments
        .iter()
        .map(|(a, b)| (uniform_total as f64 * (b - a) / total_len).floor() as usize)
        .collect();
    let assigned: usize = counts.iter().sum();
    *counts.last_mut().unwrap() += uniform_total - assigned;

    let mut nodes = vec![0.0];
    for (i, (&(a, b), &count)) in segments.iter().zip(&counts).enumerate() {
        // uniform interior nodes of this plateau segment (ends are window
        // edges or domain endpoints, added elsewhere)
        for m in 1..=count {
            nodes.push(a + (b - a) * m as f64 / (count + 1) as f64);
        }
        if i < jumps.len() {
            let j = jumps[i];
            // descending offsets on the left flank: j - r, j - r q, ...
            for p in 0..per_side {
                nodes.push(j - radius * CLUSTER_RATIO.powi(p as i32));
            }
            // ascending on the right flank, innermost first
            for p in (0..per_side).rev() {
                nodes.push(j + radius * CLUSTER_RATIO.powi(p as i32));
            }
        }
    }
    nodes.push(1.0);
    if nodes.len() != k + 1 {
        bail!(
            "internal node count mismatch: built {} nodes for K={k}",
            nodes.len()
        );
    }
    for w in nodes.windows(2) {
        if !(w[1] > w[0]) {
            bail!("clustered nodes are not strictly increasing near {}", w[0]);
        }
    }
    Ok(nodes)
}

fn cmd_discontinuous(args: DiscontinuousArgs) -> Result<Outcome> {
    let datum = Datum::Discontinuous;
    if args.k < 8 {
        bail!("--K must be at least 8 for the clustered layout, got {}", args.k);
    }
    if !(args.tau > 0.0) || !(args.t_end > args.tau) {
        bail!(
            "need 0 < tau < t-end, got tau={:e}, t-end={:e}",
            args.tau,
            args.t_end
        );
    }
    let levels = args.levels.unwrap_or_else(|| vec![25, 50, 100, 200]);
    let finest = *levels.iter().max().unwrap();
    if args.ref_cells < 2 * finest {
        bail!(
            "reference grid of {} cells must be at least twice the finest level {finest}",
            args.ref_cells
        );
    }
    let snapshots = args
        .snapshots
        .unwrap_or_else(|| vec![0.0, 1e-13, 1e-11, 1e-9, 1e-7, 1e-5, 1e-3]);
    if snapshots.iter().any(|&t| t < 0.0) {
        bail!("snapshot times must be nonnegative");
    }
    let latest = snapshots.iter().cloned().fold(0.0, f64::max);
    if args.t_end < latest {
        bail!(
            "--t-end {:e} lies before the last snapshot {latest:e}",
            args.t_end
        );
    }
    let growth = 1.1;
    let tau_max = args.t_end / 100.0;

    prepare_out(&args.out)?;
    write_config(
        &args.out,
        &DiscontinuousConfig {
            command: "discontinuous",
            k: args.k,
            tau0: args.tau,
            growth,
            tau_max,
            t_end: args.t_end,
            cluster_fraction: args.cluster_fraction,
            cluster_radius: args.cluster_radius,
            cluster_ratio: CLUSTER_RATIO,
            snapshots: snapshots.clone(),
            levels: levels.clone(),
            study_t_end: args.study_t_end,
            ref_cells: args.ref_cells,
            ref_tau: args.ref_tau,
            out: args.out.clone(),
        },
    )?;

    let jumps = [1.0 / 3.0, 2.0 / 3.0];
    let (grid, state) = if args.cluster_fraction > 0.0 {
        let nodes = clustered_nodes(args.k, &jumps, args.cluster_radius, args.cluster_fraction)?;
        datum.adapted_setup_at(&nodes)?
    } else {
        datum.adapted_setup(args.k)?
    };

    println!(
        "discontinuous: K={}, ramp tau {:e} -> {:e} (growth {growth}), t-end {:e}",
        args.k, args.tau, tau_max, args.t_end
    );
    let traj = run_solver(
        &grid,
        &state,
        solver::adaptive_schedule(args.t_end, args.tau, growth, tau_max),
        &SolverConfig::default(),
    )?;
    println!(
        "  finished: {} accepted steps, {} rejected",
        traj.num_steps(),
        traj.rejected_steps()
    );
    let run_ok = emit_run_artifacts(&args.out, &traj, &snapshots, true)?;

    println!(
        "discontinuous: error study K in {levels:?} at T={:e} against {} reference cells",
        args.study_t_end, args.ref_cells
    );
    let study = analysis::eulerian_study(
        &datum,
        &levels,
        args.study_t_end,
        args.tau,
        growth,
        tau_max.min(1e-10),
        args.ref_cells,
        args.ref_tau,
        &SolverConfig::default(),
    )?;
    print_study(&study, "delta");
    write_study_tables(&args.out, "errors", "delta", &study)?;
    io::write_json_pretty(&args.out.join("study.json"), &study)?;

    let errors: Vec<f64> = study.cells.iter().filter_map(|c| c.error).collect();
    let decreasing = errors.len() == study.cells.len()
        && errors.windows(2).all(|w| w[1] < w[0]);
    // the ladder is finest-first in delta after fit ordering: cells are in
    // the caller's order (coarse to fine), so errors must fall along it
    println!(
        "discontinuous: errors {} along refinement (decay rate {:.4})",
        if decreasing { "decrease" } else { "DO NOT decrease" },
        study.fit.slope
    );
    Ok(Outcome::checked(run_ok && decreasing))
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct VerifyConfig {
    command: &'static str,
    trajectory: PathBuf,
    out: PathBuf,
}

fn cmd_verify(args: VerifyArgs) -> Result<Outcome> {
    prepare_out(&args.out)?;
    write_config(
        &args.out,
        &VerifyConfig {
            command: "verify",
            trajectory: args.trajectory.clone(),
            out: args.out.clone(),
        },
    )?;

    let traj = io::read_trajectory_json(&args.trajectory)
        .with_context(|| format!("cannot load {}", args.trajectory.display()))?;
    println!(
        "verify: {} states on [{:e}, {:e}], K={}",
        traj.states().len(),
        traj.times().first().unwrap(),
        traj.final_time(),
        traj.grid().num_cells()
    );

    let mut reports = analysis::structural_reports(&traj)?;
    if traj.grid().is_uniform() {
        reports.extend(analysis::check_dissipation_estimates(&traj)?);
        if traj.num_steps() > 0 {
            match analysis::entropy_decay_fit(&traj)? {
                EntropyDecay::Fit {
                    rate,
                    r_squared,
                    per_step,
                } => {
                    println!(
                        "  entropy decay rate {rate:.4e} (r^2 = {r_squared:.6})"
                    );
                    reports.push(per_step);
                }
                EntropyDecay::Degenerate { first_flat_step } => {
                    println!(
                        "  entropy reached its floor at step {first_flat_step}; no rate fitted"
                    );
                }
            }
        }
    } else {
        println!("  (a-priori estimate suite skipped: non-uniform mass grid)");
    }
    print_reports(&reports);
    let all = io::write_verification_json(&args.out.join("verification.json"), reports)?;
    println!("verify: {}", if all { "passed" } else { "FAILED" });
    Ok(Outcome::checked(all))
}

// ---------------------------------------------------------------------------
