//! CSV/JSON serialization of states, grids, and trajectory logs.
//!
//! Formats are versioned through a `schema` field; readers reject anything
//! they do not recognize. CSV tables are export-oriented (plotting tools),
//! the JSON records are the round-trip formats, and the restart record
//! encodes every float as its bit pattern so resumed runs are exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::EstimateReport;
use crate::functionals;
use crate::grid::{self, Domain, GridError, LagrangianState, MassGrid};
use crate::reference::ReferenceTrajectory;
use crate::solver::{SolverError, StepReport, Trajectory};

pub const STATE_SCHEMA: &str = "dlss.state.v1";
pub const TRAJECTORY_SCHEMA: &str = "dlss.trajectory.v1";
pub const RESTART_SCHEMA: &str = "dlss.restart.v1";
pub const VERIFICATION_SCHEMA: &str = "dlss.verification.v1";

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("unsupported schema {found:?} (expected {expected:?})")]
    SchemaMismatch { expected: String, found: String },
    #[error("malformed hex-encoded float {0:?}")]
    BadHexFloat(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("stored record is inconsistent: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// Which scheme produced a trajectory artifact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeId {
    Lagrangian,
    Reference,
}

impl SchemeId {
    pub fn as_str(self) -> &'static str {
        match self {
            SchemeId::Lagrangian => "lagrangian",
            SchemeId::Reference => "reference",
        }
    }
}

fn check_schema(expected: &str, found: &str) -> Result<(), IoError> {
    if expected == found {
        Ok(())
    } else {
        Err(IoError::SchemaMismatch {
            expected: expected.to_string(),
            found: found.to_string(),
        })
    }
}

fn to_hex(x: f64) -> String {
    format!("{:#018x}", x.to_bits())
}

fn from_hex(s: &str) -> Result<f64, IoError> {
    let digits = s
        .strip_prefix("0x")
        .ok_or_else(|| IoError::BadHexFloat(s.to_string()))?;
    u64::from_str_radix(digits, 16)
        .map(f64::from_bits)
        .map_err(|_| IoError::BadHexFloat(s.to_string()))
}

/// Pretty-printed JSON with a trailing newline. Callers bring their own
/// record types; everything in this module goes through it.
pub fn write_json_pretty<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, IoError> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

// ---------------------------------------------------------------------------
// Domain record
// ---------------------------------------------------------------------------

/// Plain serializable form of a [`Domain`]; conversion back re-validates.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DomainRecord {
    pub a: f64,
    pub b: f64,
    pub mass: f64,
}

impl From<Domain> for DomainRecord {
    fn from(d: Domain) -> Self {
        Self {
            a: d.a(),
            b: d.b(),
            mass: d.mass(),
        }
    }
}

impl TryFrom<DomainRecord> for Domain {
    type Error = GridError;

    fn try_from(r: DomainRecord) -> Result<Self, GridError> {
        Domain::new(r.a, r.b, r.mass)
    }
}

// ---------------------------------------------------------------------------
// Generic tables (CSV and gnuplot-style whitespace data)
// ---------------------------------------------------------------------------

/// Write a numeric table as CSV with the given header.
pub fn write_csv_table(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> Result<(), IoError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Write a numeric table as whitespace-separated data with a `#` comment
/// header, directly loadable by gnuplot.
pub fn write_gnuplot_table(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "# {}", header.join(" "))?;
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", cells.join(" "))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// State snapshots
// ---------------------------------------------------------------------------

/// Rows of the state table: mass coordinate, node position, nodal density.
fn state_rows(grid: &MassGrid, state: &LagrangianState) -> Result<Vec<Vec<f64>>, IoError> {
    let nodal = grid::density_nodal(grid, state)?;
    let k = grid.num_cells();
    Ok((0..=k)
        .map(|j| vec![grid.node(j), state.node(j), nodal.values()[j]])
        .collect())
}

/// State snapshot as CSV (`node,xi,x,z`).
pub fn write_state_csv(path: &Path, grid: &MassGrid, state: &LagrangianState) -> Result<(), IoError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["node", "xi", "x", "z"])?;
    for (j, row) in state_rows(grid, state)?.iter().enumerate() {
        w.write_record(
            std::iter::once(j.to_string()).chain(row.iter().map(|v| v.to_string())),
        )?;
    }
    w.flush()?;
    Ok(())
}

/// State snapshot as gnuplot-style data (`xi x z` columns).
pub fn write_state_gnuplot(
    path: &Path,
    grid: &MassGrid,
    state: &LagrangianState,
) -> Result<(), IoError> {
    write_gnuplot_table(path, &["xi", "x", "z"], &state_rows(grid, state)?)
}

/// JSON snapshot of a state together with its grid and domain.
#[derive(Debug, Serialize, Deserialize)]
pub struct StateRecord {
    pub schema: String,
    pub domain: DomainRecord,
    pub uniform: bool,
    pub xi: Vec<f64>,
    pub x: Vec<f64>,
    pub z: Vec<f64>,
}

impl StateRecord {
    pub fn new(grid: &MassGrid, state: &LagrangianState) -> Result<Self, IoError> {
        let k = grid.num_cells();
        let nodal = grid::density_nodal(grid, state)?;
        Ok(Self {
            schema: STATE_SCHEMA.to_string(),
            domain: state.domain().into(),
            uniform: grid.is_uniform(),
            xi: (0..=k).map(|j| grid.node(j)).collect(),
            x: (0..=k).map(|j| state.node(j)).collect(),
            z: nodal.values().to_vec(),
        })
    }

    pub fn restore(&self) -> Result<(MassGrid, LagrangianState), IoError> {
        check_schema(STATE_SCHEMA, &self.schema)?;
        let domain = Domain::try_from(self.domain)?;
        let grid = MassGrid::from_nodes(self.xi.clone(), self.uniform)?;
        if self.x.len() != self.xi.len() {
            return Err(IoError::Inconsistent(
                "node and mass coordinate counts differ".into(),
            ));
        }
        let interior = self.x[1..self.x.len() - 1].to_vec();
        let state = LagrangianState::new(domain, interior)?;
        state.matches(&grid)?;
        Ok((grid, state))
    }
}

pub fn write_state_json(
    path: &Path,
    grid: &MassGrid,
    state: &LagrangianState,
) -> Result<(), IoError> {
    write_json_pretty(path, &StateRecord::new(grid, state)?)
}

pub fn read_state_json(path: &Path) -> Result<(MassGrid, LagrangianState), IoError> {
    read_json::<StateRecord>(path)?.restore()
}

// ---------------------------------------------------------------------------
// Trajectory logs (one record per accepted step)
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct LogRow<'a> {
    scheme: &'a str,
    n: usize,
    t: f64,
    tau: Option<f64>,
    entropy: f64,
    fisher: Option<f64>,
    newton_iters: Option<usize>,
    residual: Option<f64>,
}

/// Scalar log of a Lagrangian run: row 0 carries the initial functionals,
/// then one row per accepted step.
pub fn write_lagrangian_log_csv(path: &Path, traj: &Trajectory) -> Result<(), IoError> {
    let mut w = csv::Writer::from_path(path)?;
    let (h0, f0) = match traj.reports().first() {
        Some(r) => (r.entropy_before, r.fisher_before),
        None => (
            functionals::entropy(traj.grid(), &traj.states()[0])
                .map_err(|e| IoError::Inconsistent(e.to_string()))?,
            functionals::fisher(traj.grid(), &traj.states()[0])
                .map_err(|e| IoError::Inconsistent(e.to_string()))?,
        ),
    };
    w.serialize(LogRow {
        scheme: SchemeId::Lagrangian.as_str(),
        n: 0,
        t: 0.0,
        tau: None,
        entropy: h0,
        fisher: Some(f0),
        newton_iters: None,
        residual: None,
    })?;
    for (n, r) in traj.reports().iter().enumerate() {
        w.serialize(LogRow {
            scheme: SchemeId::Lagrangian.as_str(),
            n: n + 1,
            t: traj.times()[n + 1],
            tau: Some(r.tau_used),
            entropy: r.entropy_after,
            fisher: Some(r.fisher_after),
            newton_iters: Some(r.newton_iters),
            residual: Some(r.final_residual),
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Scalar log of a fixed-grid reference run, same schema as the Lagrangian
/// log; the columns the reference scheme does not track stay empty.
pub fn write_reference_log_csv(path: &Path, traj: &ReferenceTrajectory) -> Result<(), IoError> {
    let mut w = csv::Writer::from_path(path)?;
    for (n, field) in traj.fields.iter().enumerate() {
        w.serialize(LogRow {
            scheme: SchemeId::Reference.as_str(),
            n,
            t: traj.times[n],
            tau: if n == 0 { None } else { Some(traj.taus[n - 1]) },
            entropy: field.entropy(),
            fisher: None,
            newton_iters: None,
            residual: None,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Node positions over time (`t, x0, ..., xK`), one row per stored state.
pub fn particle_trajectory_table(traj: &Trajectory) -> (Vec<String>, Vec<Vec<f64>>) {
    let k = traj.grid().num_cells();
    let header: Vec<String> = std::iter::once("t".to_string())
        .chain((0..=k).map(|j| format!("x{j}")))
        .collect();
    let rows = traj
        .times()
        .iter()
        .zip(traj.states())
        .map(|(&t, s)| {
            std::iter::once(t)
                .chain((0..=k).map(|j| s.node(j)))
                .collect()
        })
        .collect();
    (header, rows)
}

pub fn write_particle_trajectories_csv(path: &Path, traj: &Trajectory) -> Result<(), IoError> {
    let (header, rows) = particle_trajectory_table(traj);
    let named: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    write_csv_table(path, &named, &rows)
}

pub fn write_particle_trajectories_gnuplot(path: &Path, traj: &Trajectory) -> Result<(), IoError> {
    let (header, rows) = particle_trajectory_table(traj);
    let named: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    write_gnuplot_table(path, &named, &rows)
}

// ---------------------------------------------------------------------------
// Full trajectory record (re-analysis input)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub tau: f64,
    pub newton_iters: usize,
    pub residual: f64,
    pub entropy_before: f64,
    pub entropy_after: f64,
    pub fisher_before: f64,
    pub fisher_after: f64,
    pub fallback: bool,
}

impl From<&StepReport> for StepRecord {
    fn from(r: &StepReport) -> Self {
        Self {
            tau: r.tau_used,
            newton_iters: r.newton_iters,
            residual: r.final_residual,
            entropy_before: r.entropy_before,
            entropy_after: r.entropy_after,
            fisher_before: r.fisher_before,
            fisher_after: r.fisher_after,
            fallback: r.fallback_taken,
        }
    }
}

impl From<&StepRecord> for StepReport {
    fn from(r: &StepRecord) -> Self {
        Self {
            newton_iters: r.newton_iters,
            final_residual: r.residual,
            tau_used: r.tau,
            entropy_before: r.entropy_before,
            entropy_after: r.entropy_after,
            fisher_before: r.fisher_before,
            fisher_after: r.fisher_after,
            fallback_taken: r.fallback,
        }
    }
}

/// Complete trajectory: grid, every state, times, and per-step diagnostics.
/// This is what the offline verification path consumes.
#[derive(Debug, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub schema: String,
    pub scheme: SchemeId,
    pub domain: DomainRecord,
    pub uniform: bool,
    pub xi: Vec<f64>,
    pub times: Vec<f64>,
    /// Interior node positions of each stored state.
    pub states: Vec<Vec<f64>>,
    pub reports: Vec<StepRecord>,
}

impl TrajectoryRecord {
    pub fn new(traj: &Trajectory) -> Self {
        let grid = traj.grid();
        let k = grid.num_cells();
        Self {
            schema: TRAJECTORY_SCHEMA.to_string(),
            scheme: SchemeId::Lagrangian,
            domain: traj.states()[0].domain().into(),
            uniform: grid.is_uniform(),
            xi: (0..=k).map(|j| grid.node(j)).collect(),
            times: traj.times().to_vec(),
            states: traj
                .states()
                .iter()
                .map(|s| s.interior().to_vec())
                .collect(),
            reports: traj.reports().iter().map(StepRecord::from).collect(),
        }
    }

    pub fn restore(&self) -> Result<Trajectory, IoError> {
        check_schema(TRAJECTORY_SCHEMA, &self.schema)?;
        let domain = Domain::try_from(self.domain)?;
        let grid = MassGrid::from_nodes(self.xi.clone(), self.uniform)?;
        let states = self
            .states
            .iter()
            .map(|interior| LagrangianState::new(domain, interior.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        let reports = self.reports.iter().map(StepReport::from).collect();
        Ok(Trajectory::from_parts(
            grid,
            states,
            self.times.clone(),
            reports,
        )?)
    }
}

pub fn write_trajectory_json(path: &Path, traj: &Trajectory) -> Result<(), IoError> {
    write_json_pretty(path, &TrajectoryRecord::new(traj))
}

pub fn read_trajectory_json(path: &Path) -> Result<Trajectory, IoError> {
    read_json::<TrajectoryRecord>(path)?.restore()
}

// ---------------------------------------------------------------------------
// Restart record (bit-exact)
// ---------------------------------------------------------------------------

/// Last state of a run with every float hex-encoded by bit pattern, so a
/// resumed run starts from exactly the doubles the producing run held.
#[derive(Debug, Serialize, Deserialize)]
pub struct RestartRecord {
    pub schema: String,
    pub time: String,
    pub domain_a: String,
    pub domain_b: String,
    pub domain_mass: String,
    pub uniform: bool,
    pub xi: Vec<String>,
    pub x_interior: Vec<String>,
}

impl RestartRecord {
    pub fn new(grid: &MassGrid, state: &LagrangianState, time: f64) -> Self {
        let domain = state.domain();
        Self {
            schema: RESTART_SCHEMA.to_string(),
            time: to_hex(time),
            domain_a: to_hex(domain.a()),
            domain_b: to_hex(domain.b()),
            domain_mass: to_hex(domain.mass()),
            uniform: grid.is_uniform(),
            xi: (0..=grid.num_cells()).map(|j| to_hex(grid.node(j))).collect(),
            x_interior: state.interior().iter().map(|&x| to_hex(x)).collect(),
        }
    }

    pub fn restore(&self) -> Result<(MassGrid, LagrangianState, f64), IoError> {
        check_schema(RESTART_SCHEMA, &self.schema)?;
        let domain = Domain::new(
            from_hex(&self.domain_a)?,
            from_hex(&self.domain_b)?,
            from_hex(&self.domain_mass)?,
        )?;
        let xi = self
            .xi
            .iter()
            .map(|s| from_hex(s))
            .collect::<Result<Vec<_>, _>>()?;
        let grid = MassGrid::from_nodes(xi, self.uniform)?;
        let interior = self
            .x_interior
            .iter()
            .map(|s| from_hex(s))
            .collect::<Result<Vec<_>, _>>()?;
        let state = LagrangianState::new(domain, interior)?;
        state.matches(&grid)?;
        Ok((grid, state, from_hex(&self.time)?))
    }
}

pub fn write_restart_json(
    path: &Path,
    grid: &MassGrid,
    state: &LagrangianState,
    time: f64,
) -> Result<(), IoError> {
    write_json_pretty(path, &RestartRecord::new(grid, state, time))
}

pub fn read_restart_json(path: &Path) -> Result<(MassGrid, LagrangianState, f64), IoError> {
    read_json::<RestartRecord>(path)?.restore()
}

// ---------------------------------------------------------------------------
// Verification report and convergence tables
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
pub struct VerificationRecord {
    pub schema: String,
    pub all_satisfied: bool,
    pub reports: Vec<EstimateReport>,
}

impl VerificationRecord {
    pub fn new(reports: Vec<EstimateReport>) -> Self {
        Self {
            schema: VERIFICATION_SCHEMA.to_string(),
            all_satisfied: reports.iter().all(|r| r.satisfied),
            reports,
        }
    }
}

pub fn write_verification_json(path: &Path, reports: Vec<EstimateReport>) -> Result<bool, IoError> {
    let record = VerificationRecord::new(reports);
    write_json_pretty(path, &record)?;
    Ok(record.all_satisfied)
}

/// Error table of a convergence or consistency study. `axis_label` names the
/// refinement column (`K` or `tau`); cells without an error (failed runs)
/// leave the column empty; the fitted slope is repeated on every row.
pub fn write_convergence_csv(
    path: &Path,
    axis_label: &str,
    rows: &[(f64, Option<f64>)],
    slope: f64,
) -> Result<(), IoError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([axis_label, "error", "slope"])?;
    for &(param, error) in rows {
        w.write_record([
            param.to_string(),
            error.map(|e| e.to_string()).unwrap_or_default(),
            slope.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
