//! Implicit minimizing-movement steps and trajectory orchestration.
//!
//! One step from anchor `y` with step size `tau` solves the optimality
//! condition of the proximal problem `min_x |x - y|_d^2 / (2 tau) + F(x)`,
//!
//!     (x - y) / tau + grad_d F(x) = 0,
//!
//! by damped Newton with the anchor as initial guess. The iteration runs in
//! the scaled displacement `u = (x - y) / tau`, so `x = y + tau u` is formed
//! without any ill-conditioned division and stationary anchors are exact
//! fixed points bit for bit. The Newton matrix `D + tau d2F` (with `D` the
//! diagonal of dual masses) is symmetric pentadiagonal and is factored by the
//! banded LU in O(K) per iteration.
//!
//! Failures escalate through a ladder controlled by [`FallbackPolicy`]:
//! halve `tau` (keeping the landing times of a fixed schedule by taking both
//! halves), then minimize the proximal objective directly by a safeguarded
//! gradient method, then report a structured error carrying the partial
//! trajectory.

use thiserror::Error;

use crate::band::BandError;
use crate::functionals::{
    self, fisher, fisher_gradient_from_weights, FunctionalError, MetricWorkspace,
};
use crate::grid::{self, GridError, LagrangianState, MassGrid};
use crate::kahan::KahanSum;

const MAX_BISECTIONS: usize = 40;
const MAX_MINIMIZE_ITERS: usize = 20_000;
/// A stall is forgiven when the residual is within this multiple of the
/// rounding-noise bound of the gradient evaluation (see
/// [`gradient_noise_floor`]).
const FP_NOISE_SAFETY: f64 = 8.0;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("newton iteration stalled after {iters} iterations (residual {residual:.3e}, tol {tol:.3e}, tau {tau:.3e})")]
    NewtonStalled {
        iters: usize,
        residual: f64,
        tol: f64,
        tau: f64,
    },
    #[error("no admissible damped update above step fraction {lambda_floor:.1e} (residual {residual:.3e}, tau {tau:.3e})")]
    NoDescent {
        lambda_floor: f64,
        residual: f64,
        tau: f64,
    },
    #[error("proximal minimization stalled (residual {residual:.3e}, tau {tau:.3e})")]
    MinimizeStalled { residual: f64, tau: f64 },
    #[error("invalid solver configuration: {0}")]
    BadConfig(String),
    #[error("invalid time step {tau:.3e}")]
    BadTau { tau: f64 },
    #[error(transparent)]
    Linear(#[from] BandError),
    #[error(transparent)]
    Functional(#[from] FunctionalError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// What to do when a Newton step fails.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FallbackPolicy {
    /// Halve `tau` (down to `tau_min`) and, if that bottoms out, minimize the
    /// proximal objective directly before giving up.
    #[default]
    HalveTau,
    /// Skip the step-size ladder and go straight to direct minimization.
    MinimizeDirectly,
    /// Surface the first failure.
    Fail,
}

#[derive(Debug, Clone, Copy)]
pub struct SolverConfig {
    /// Absolute threshold on the weighted residual norm.
    pub newton_tol: f64,
    /// Relative part of the threshold: convergence is declared at
    /// `newton_tol + newton_tol_rel * |r0|_d`. When that target sits below
    /// the rounding noise of the gradient evaluation, the iteration instead
    /// stops at the noise floor (see [`gradient_noise_floor`]).
    pub newton_tol_rel: f64,
    pub max_newton_iters: usize,
    /// Backtracking shrink factor, in (0, 1).
    pub damping_shrink: f64,
    /// Smallest admissible step fraction before the iteration gives up.
    pub damping_min_fraction: f64,
    pub tau_min: f64,
    pub tau_max: f64,
    pub fallback_policy: FallbackPolicy,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            newton_tol: 1e-9,
            newton_tol_rel: 1e-8,
            max_newton_iters: 50,
            damping_shrink: 0.5,
            damping_min_fraction: 1e-6,
            tau_min: 1e-15,
            tau_max: 1.0,
            fallback_policy: FallbackPolicy::HalveTau,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        if !(self.newton_tol > 0.0) || !(self.newton_tol_rel >= 0.0) {
            return Err(SolverError::BadConfig("newton tolerances must be positive".into()));
        }
        if !(self.damping_shrink > 0.0 && self.damping_shrink < 1.0) {
            return Err(SolverError::BadConfig("damping shrink must lie in (0, 1)".into()));
        }
        if !(self.damping_min_fraction > 0.0 && self.damping_min_fraction < 1.0) {
            return Err(SolverError::BadConfig("damping floor must lie in (0, 1)".into()));
        }
        if !(self.tau_min > 0.0 && self.tau_min <= self.tau_max) {
            return Err(SolverError::BadConfig("need 0 < tau_min <= tau_max".into()));
        }
        Ok(())
    }
}

/// Per-step diagnostics. `fallback_taken` marks steps produced by direct
/// minimization instead of a converged Newton iteration.
#[derive(Debug, Clone, Copy)]
pub struct StepReport {
    pub newton_iters: usize,
    pub final_residual: f64,
    pub tau_used: f64,
    pub entropy_before: f64,
    pub entropy_after: f64,
    pub fisher_before: f64,
    pub fisher_after: f64,
    pub fallback_taken: bool,
}

/// A completed (possibly partial) run: `states[0]` is the initial state and
/// `states[n]` the result of step `n`, reached at `times[n]`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    grid: MassGrid,
    times: Vec<f64>,
    states: Vec<LagrangianState>,
    reports: Vec<StepReport>,
    rejected_steps: usize,
    clock: KahanSum,
}

impl Trajectory {
    fn new(grid: MassGrid, initial: LagrangianState) -> Self {
        Self {
            grid,
            times: vec![0.0],
            states: vec![initial],
            reports: Vec::new(),
            rejected_steps: 0,
            clock: KahanSum::new(),
        }
    }

    fn push(&mut self, state: LagrangianState, report: StepReport) {
        self.clock.add(report.tau_used);
        self.times.push(self.clock.value());
        self.states.push(state);
        self.reports.push(report);
    }

    /// Rebuild a trajectory from stored parts, e.g. to re-analyze a logged
    /// run. Requires one more state than reports, times starting at zero and
    /// strictly increasing, and every state on the given grid.
    pub fn from_parts(
        grid: MassGrid,
        states: Vec<LagrangianState>,
        times: Vec<f64>,
        reports: Vec<StepReport>,
    ) -> Result<Self, SolverError> {
        if states.is_empty() || times.len() != states.len() || reports.len() + 1 != states.len() {
            return Err(SolverError::BadConfig(
                "trajectory parts have mismatched lengths".into(),
            ));
        }
        if times[0] != 0.0 {
            return Err(SolverError::BadConfig(
                "stored trajectories must start at t = 0".into(),
            ));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(SolverError::BadConfig(
                "stored times must be strictly increasing".into(),
            ));
        }
        for s in &states {
            s.matches(&grid)?;
        }
        let mut clock = KahanSum::new();
        clock.add(*times.last().unwrap());
        Ok(Self {
            grid,
            times,
            states,
            reports,
            rejected_steps: 0,
            clock,
        })
    }

    pub fn grid(&self) -> &MassGrid {
        &self.grid
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn states(&self) -> &[LagrangianState] {
        &self.states
    }

    pub fn reports(&self) -> &[StepReport] {
        &self.reports
    }

    pub fn num_steps(&self) -> usize {
        self.reports.len()
    }

    /// Steps rejected and retried with a smaller `tau` (adaptive runs).
    pub fn rejected_steps(&self) -> usize {
        self.rejected_steps
    }

    pub fn final_state(&self) -> &LagrangianState {
        self.states.last().unwrap()
    }

    pub fn final_time(&self) -> f64 {
        *self.times.last().unwrap()
    }
}

/// A run that stopped early; carries everything computed so far.
#[derive(Debug, Error)]
#[error("run failed after {} steps at t = {:.6e}: {source}", partial.num_steps(), partial.final_time())]
pub struct RunFailure {
    pub partial: Trajectory,
    #[source]
    pub source: SolverError,
}

/// Time-step schedule for [`run`].
#[derive(Debug, Clone, Copy)]
pub enum Schedule {
    /// `steps` steps of size `tau` (failed steps are bisected in place, so
    /// the landing times are preserved).
    Fixed { tau: f64, steps: usize },
    /// Geometric ramp: start at `tau0`, multiply by `growth` after every
    /// accepted step, clamp to `tau_max`, halve on rejection, stop at `t_end`.
    Adaptive {
        tau0: f64,
        growth: f64,
        tau_max: f64,
        t_end: f64,
    },
}

/// Geometric ramp schedule (see [`Schedule::Adaptive`]).
pub fn adaptive_schedule(t_end: f64, tau0: f64, growth: f64, tau_max: f64) -> Schedule {
    Schedule::Adaptive {
        tau0,
        growth,
        tau_max,
        t_end,
    }
}

/// Optimality-condition residual `(x - x_prev)/tau + grad_d F(x)`; zero
/// exactly at scheme solutions.
pub fn residual(
    grid: &MassGrid,
    x: &LagrangianState,
    x_prev: &LagrangianState,
    tau: f64,
) -> Result<Vec<f64>, SolverError> {
    x.matches(grid)?;
    x_prev.matches(grid)?;
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(SolverError::BadTau { tau });
    }
    let g = functionals::fisher_gradient(grid, x)?;
    Ok(x
        .interior()
        .iter()
        .zip(x_prev.interior())
        .zip(g)
        .map(|((xi, yi), gi)| (xi - yi) / tau + gi)
        .collect())
}

/// Residual in the scaled displacement variable: `u + grad_d F(y + tau u)`.
fn displacement_residual(
    grid: &MassGrid,
    state: &LagrangianState,
    u: &[f64],
) -> Result<Vec<f64>, SolverError> {
    let z = grid::weights(grid, state)?;
    let g = fisher_gradient_from_weights(grid, &z);
    Ok(u.iter().zip(g).map(|(ui, gi)| ui + gi).collect())
}

fn state_from_displacement(
    anchor: &LagrangianState,
    tau: f64,
    u: &[f64],
) -> Result<LagrangianState, GridError> {
    let x: Vec<f64> = anchor
        .interior()
        .iter()
        .zip(u)
        .map(|(yi, ui)| yi + tau * ui)
        .collect();
    LagrangianState::new(anchor.domain(), x)
}

/// Rounding-noise bound for the computed metric gradient, in the weighted
/// norm. Node positions carry O(eps |x_j|) representation error, which the
/// gradient amplifies by its Jacobian; the entrywise bound `eps |H| |x|`
/// overestimates the response to a worst-case one-ulp dither (measured
/// dithers come in 10-40x below it). Residual norms at this level are
/// numerically indistinguishable from zero, so stalls there count as
/// converged.
fn gradient_noise_floor(
    grid: &MassGrid,
    metric: &MetricWorkspace,
    state: &LagrangianState,
) -> Result<f64, SolverError> {
    let h = functionals::fisher_hessian(grid, state)?;
    let x = state.interior();
    let dm = metric.weights();
    let n = x.len();
    let mut v = vec![0.0; n];
    for i in 0..n {
        let mut acc = 0.0;
        for j in i.saturating_sub(2)..(i + 3).min(n) {
            acc += h.get(i, j).abs() * x[j].abs();
        }
        v[i] = f64::EPSILON * acc / dm[i];
    }
    Ok(metric.norm(&v))
}

/// One implicit step by damped Newton from the anchor.
pub fn newton_step(
    grid: &MassGrid,
    x_prev: &LagrangianState,
    tau: f64,
    config: &SolverConfig,
) -> Result<(LagrangianState, StepReport), SolverError> {
    x_prev.matches(grid)?;
    if !(tau > 0.0 && tau.is_finite() && tau <= config.tau_max) {
        return Err(SolverError::BadTau { tau });
    }
    let metric = MetricWorkspace::new(grid);
    let entropy_before = functionals::entropy(grid, x_prev)?;
    let fisher_before = fisher(grid, x_prev)?;

    let n = x_prev.num_interior();
    let mut u = vec![0.0; n];
    let mut state = x_prev.clone();
    let mut r = displacement_residual(grid, &state, &u)?;
    let mut rnorm = metric.norm(&r);
    let tol = config.newton_tol + config.newton_tol_rel * rnorm;
    let noise = FP_NOISE_SAFETY * gradient_noise_floor(grid, &metric, x_prev)?;
    let mut iters = 0;

    // an anchor gradient below its own rounding noise already minimizes to
    // working precision; iterating would only chase noise off the fixed point
    'newton: while rnorm > tol && (iters > 0 || rnorm > noise) {
        if iters >= config.max_newton_iters {
            if rnorm <= noise {
                break 'newton;
            }
            return Err(SolverError::NewtonStalled {
                iters,
                residual: rnorm,
                tol,
                tau,
            });
        }
        // plain form of the linearized system: (D + tau d2F) du = -D r
        let mut a = functionals::fisher_hessian(grid, &state)?;
        a.scale(tau);
        let dm = metric.weights();
        let mut rhs = vec![0.0; n];
        for j in 0..n {
            a.add(j, j, dm[j]);
            rhs[j] = -dm[j] * r[j];
        }
        let du = a.factor()?.solve(&rhs);

        let mut lambda = 1.0;
        loop {
            let cand_u: Vec<f64> = u.iter().zip(&du).map(|(ui, di)| ui + lambda * di).collect();
            if let Ok(cand_state) = state_from_displacement(x_prev, tau, &cand_u) {
                let cand_r = displacement_residual(grid, &cand_state, &cand_u)?;
                let cand_norm = metric.norm(&cand_r);
                if cand_norm <= 0.99 * rnorm || cand_norm <= tol {
                    u = cand_u;
                    state = cand_state;
                    r = cand_r;
                    rnorm = cand_norm;
                    break;
                }
            }
            lambda *= config.damping_shrink;
            if lambda < config.damping_min_fraction {
                if rnorm <= noise {
                    // no damped update improves on rounding noise: converged
                    break 'newton;
                }
                return Err(SolverError::NoDescent {
                    lambda_floor: config.damping_min_fraction,
                    residual: rnorm,
                    tau,
                });
            }
        }
        iters += 1;
    }

    let entropy_after = functionals::entropy(grid, &state)?;
    let fisher_after = fisher(grid, &state)?;
    Ok((
        state,
        StepReport {
            newton_iters: iters,
            final_residual: rnorm,
            tau_used: tau,
            entropy_before,
            entropy_after,
            fisher_before,
            fisher_after,
            fallback_taken: false,
        },
    ))
}

/// Direct minimization of the proximal objective by gradient descent with
/// Barzilai-Borwein steps and a monotonicity-guarded Armijo backtrack.
/// Never returns a state with larger objective than the anchor.
pub fn minimize_yosida(
    grid: &MassGrid,
    x_prev: &LagrangianState,
    tau: f64,
    config: &SolverConfig,
) -> Result<(LagrangianState, StepReport), SolverError> {
    x_prev.matches(grid)?;
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(SolverError::BadTau { tau });
    }
    let metric = MetricWorkspace::new(grid);
    let entropy_before = functionals::entropy(grid, x_prev)?;
    let fisher_before = fisher(grid, x_prev)?;

    let n = x_prev.num_interior();
    let mut u = vec![0.0; n];
    let mut state = x_prev.clone();
    let mut obj = functionals::yosida(grid, &state, x_prev, tau)?;
    let mut r = displacement_residual(grid, &state, &u)?;
    let mut rnorm = metric.norm(&r);
    let tol = (config.newton_tol + config.newton_tol_rel * rnorm)
        .max(FP_NOISE_SAFETY * gradient_noise_floor(grid, &metric, x_prev)?);
    // the metric gradient of the objective in x-units is tau * r in u-units;
    // the natural first step length in u is then O(1)
    let mut step = 1.0;
    let mut iters = 0;

    while rnorm > tol && iters < MAX_MINIMIZE_ITERS {
        let mut lambda = step;
        let mut accepted = false;
        for _ in 0..60 {
            let cand_u: Vec<f64> = u.iter().zip(&r).map(|(ui, ri)| ui - lambda * ri).collect();
            if let Ok(cand_state) = state_from_displacement(x_prev, tau, &cand_u) {
                let cand_obj = functionals::yosida(grid, &cand_state, x_prev, tau)?;
                // Armijo decrease in x-units: grad = r, direction = -r
                if cand_obj <= obj - 1e-4 * lambda * tau * metric.norm_sq(&r) {
                    let cand_r = displacement_residual(grid, &cand_state, &cand_u)?;
                    // Barzilai-Borwein step from the accepted move
                    let s: Vec<f64> = cand_u.iter().zip(&u).map(|(a, b)| a - b).collect();
                    let yv: Vec<f64> = cand_r.iter().zip(&r).map(|(a, b)| a - b).collect();
                    let sy = metric.inner(&s, &yv);
                    step = if sy > 0.0 {
                        (metric.norm_sq(&s) / sy).clamp(1e-8, 1e8)
                    } else {
                        (lambda * 2.0).min(1e8)
                    };
                    u = cand_u;
                    state = cand_state;
                    obj = cand_obj;
                    r = cand_r;
                    rnorm = metric.norm(&r);
                    accepted = true;
                    break;
                }
            }
            lambda *= 0.5;
        }
        if !accepted {
            if iters == 0 && rnorm > tol {
                return Err(SolverError::MinimizeStalled {
                    residual: rnorm,
                    tau,
                });
            }
            break; // no further decrease possible; return the best point found
        }
        iters += 1;
    }

    let entropy_after = functionals::entropy(grid, &state)?;
    let fisher_after = fisher(grid, &state)?;
    Ok((
        state,
        StepReport {
            newton_iters: iters,
            final_residual: rnorm,
            tau_used: tau,
            entropy_before,
            entropy_after,
            fisher_before,
            fisher_after,
            fallback_taken: true,
        },
    ))
}

/// Advance one schedule slot of size `tau`, applying the fallback ladder.
/// Bisected slots append several reports; the landing time is unchanged.
fn advance_slot(
    grid: &MassGrid,
    traj: &mut Trajectory,
    tau: f64,
    config: &SolverConfig,
    depth: usize,
) -> Result<(), SolverError> {
    let anchor = traj.final_state().clone();
    match newton_step(grid, &anchor, tau, config) {
        Ok((state, report)) => {
            traj.push(state, report);
            Ok(())
        }
        Err(err) => match config.fallback_policy {
            FallbackPolicy::Fail => Err(err),
            FallbackPolicy::HalveTau if 0.5 * tau >= config.tau_min && depth < MAX_BISECTIONS => {
                traj.rejected_steps += 1;
                advance_slot(grid, traj, 0.5 * tau, config, depth + 1)?;
                advance_slot(grid, traj, 0.5 * tau, config, depth + 1)
            }
            FallbackPolicy::HalveTau | FallbackPolicy::MinimizeDirectly => {
                let (state, report) = minimize_yosida(grid, &anchor, tau, config)?;
                traj.push(state, report);
                Ok(())
            }
        },
    }
}

/// Run a whole schedule from the initial state.
// the error intentionally carries the partial trajectory, hence its size
#[allow(clippy::result_large_err)]
pub fn run(
    grid: &MassGrid,
    initial: &LagrangianState,
    schedule: Schedule,
    config: &SolverConfig,
) -> Result<Trajectory, RunFailure> {
    let mut traj = Trajectory::new(grid.clone(), initial.clone());
    if let Err(source) = config.validate() {
        return Err(RunFailure { partial: traj, source });
    }
    if let Err(source) = initial.matches(grid).map_err(SolverError::from) {
        return Err(RunFailure { partial: traj, source });
    }

    match schedule {
        Schedule::Fixed { tau, steps } => {
            for _ in 0..steps {
                if let Err(source) = advance_slot(grid, &mut traj, tau, config, 0) {
                    return Err(RunFailure { partial: traj, source });
                }
            }
        }
        Schedule::Adaptive {
            tau0,
            growth,
            tau_max,
            t_end,
        } => {
            if !(tau0 > 0.0 && growth >= 1.0 && tau_max >= tau0 && t_end > 0.0) {
                return Err(RunFailure {
                    partial: traj,
                    source: SolverError::BadConfig(
                        "adaptive schedule needs tau0 > 0, growth >= 1, tau_max >= tau0, t_end > 0"
                            .into(),
                    ),
                });
            }
            let mut tau_nom = tau0;
            loop {
                let t = traj.final_time();
                let remaining = t_end - t;
                if remaining <= 1e-12 * t_end {
                    break;
                }
                let tau_try = tau_nom.min(remaining);
                let anchor = traj.final_state().clone();
                match newton_step(grid, &anchor, tau_try, config) {
                    Ok((state, report)) => {
                        traj.push(state, report);
                        tau_nom = (tau_nom * growth).min(tau_max);
                    }
                    Err(err) => {
                        if config.fallback_policy == FallbackPolicy::Fail {
                            return Err(RunFailure {
                                partial: traj,
                                source: err,
                            });
                        }
                        traj.rejected_steps += 1;
                        if 0.5 * tau_nom >= config.tau_min
                            && config.fallback_policy == FallbackPolicy::HalveTau
                        {
                            tau_nom *= 0.5;
                        } else {
                            match minimize_yosida(grid, &anchor, tau_try, config) {
                                Ok((state, report)) => {
                                    traj.push(state, report);
                                    tau_nom = (tau_nom * growth).min(tau_max);
                                }
                                Err(source) => {
                                    return Err(RunFailure {
                                        partial: traj,
                                        source,
                                    })
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(traj)
}
