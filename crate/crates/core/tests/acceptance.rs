//! Acceptance suite: one test per release criterion, each emitting a single
//! `ACCEPTANCE cNN name: PASS/FAIL (...)` line with the measured quantities.
//! Tolerances and budgets are pinned here and nowhere else.

// positivity guards are written `!(a > b)` on purpose: they must catch NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod common;

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use dlss::analysis::{
    self, builtin_spatial_consistency, builtin_temporal_consistency, EntropyDecay,
};
use dlss::datum::Datum;
use dlss::functionals::{self, SymTridiag};
use dlss::grid::{self, LagrangianState};
use dlss::solver::{self, Schedule, SolverConfig, Trajectory};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const REL_MASS_TOL: f64 = 1e-12;
const REL_MONOTONE_SLACK: f64 = 1e-10;
const ORACLE_REL_TOL: f64 = 1e-5;
const SPATIAL_BAND: (f64, f64) = (1.7, 2.3);
const TEMPORAL_BAND: (f64, f64) = (0.8, 1.2);
const METRIC_REL_SLACK: f64 = 1e-12;

fn verdict(id: &str, name: &str, pass: bool, detail: &str) {
    let status = if pass { "PASS" } else { "FAIL" };
    println!("ACCEPTANCE {id} {name}: {status} ({detail})");
    assert!(pass, "{id} {name}: {detail}");
}

fn within(elapsed: Duration, budget: Duration) -> bool {
    elapsed <= budget
}

/// The trajectory shared by the structural, estimate, and decay criteria:
/// the smooth high-power cosine datum, 50 cells, 500 fixed steps of 1e-7.
fn smooth_run() -> &'static Trajectory {
    static RUN: OnceLock<Trajectory> = OnceLock::new();
    RUN.get_or_init(|| {
        let datum = Datum::Cos16 { epsilon: 1e-3 };
        let (grid, state) = datum.uniform_setup(50).unwrap();
        solver::run(
            &grid,
            &state,
            Schedule::Fixed {
                tau: 1e-7,
                steps: 500,
            },
            &SolverConfig::default(),
        )
        .unwrap()
    })
}

/// Positivity (strictly increasing nodes), relative mass defect of the
/// reconstructed density, and per-step monotonicity of entropy and Fisher
/// information. Returns worst-case numbers for the verdict line.
fn structural_checks(traj: &Trajectory) -> (bool, String) {
    let grid = traj.grid();
    let mass = grid.mass();
    let mut monotone = true;
    let mut worst_mass: f64 = 0.0;
    for state in traj.states() {
        for j in 0..grid.num_cells() {
            if !(state.node(j + 1) > state.node(j)) {
                monotone = false;
            }
        }
        let m = grid::density_pc(grid, state).unwrap().mass();
        worst_mass = worst_mass.max(((m - mass) / mass).abs());
    }
    let mut h_ok = true;
    let mut f_ok = true;
    for r in traj.reports() {
        if r.entropy_after > r.entropy_before + REL_MONOTONE_SLACK * r.entropy_before.abs() {
            h_ok = false;
        }
        if r.fisher_after > r.fisher_before + REL_MONOTONE_SLACK * r.fisher_before.abs() {
            f_ok = false;
        }
    }
    let pass = monotone && worst_mass <= REL_MASS_TOL && h_ok && f_ok;
    let detail = format!(
        "monotone={monotone}, mass defect {worst_mass:.2e} <= {REL_MASS_TOL:.0e}, \
         entropy monotone={h_ok}, fisher monotone={f_ok}"
    );
    (pass, detail)
}

#[test]
fn c01_structural_suite() {
    let start = Instant::now();
    let traj = smooth_run();
    let (pass, detail) = structural_checks(traj);
    let elapsed = start.elapsed();
    let in_budget = within(elapsed, Duration::from_secs(10));
    verdict(
        "c01",
        "structural_suite",
        pass && in_budget,
        &format!("{detail}, {:.2} s < 10 s", elapsed.as_secs_f64()),
    );
}

#[test]
fn c02_apriori_estimates() {
    let traj = smooth_run();
    let start = Instant::now();
    let reports = analysis::check_dissipation_estimates(traj).unwrap();
    let elapsed = start.elapsed();
    let failures: Vec<&str> = reports
        .iter()
        .filter(|r| !r.satisfied)
        .map(|r| r.name.as_str())
        .collect();
    let min_slack = reports
        .iter()
        .map(|r| r.slack / r.rhs.abs().max(f64::MIN_POSITIVE))
        .fold(f64::INFINITY, f64::min);
    let in_budget = within(elapsed, Duration::from_secs(5));
    verdict(
        "c02",
        "apriori_estimates",
        failures.is_empty() && in_budget,
        &format!(
            "{} estimates, failures {:?}, min relative slack {:.2e}, {:.2} s < 5 s",
            reports.len(),
            failures,
            min_slack,
            elapsed.as_secs_f64()
        ),
    );
}

fn rel_err(approx: &[f64], exact: &[f64]) -> f64 {
    let diff: f64 = approx
        .iter()
        .zip(exact)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let norm: f64 = exact.iter().map(|b| b * b).sum();
    (diff / norm.max(1e-300)).sqrt()
}

fn shifted(state: &LagrangianState, j: usize, h: f64) -> LagrangianState {
    let mut interior = state.interior().to_vec();
    interior[j] += h;
    LagrangianState::new(state.domain(), interior).unwrap()
}

fn fd_gradient(
    f: impl Fn(&LagrangianState) -> f64,
    state: &LagrangianState,
    h: f64,
) -> Vec<f64> {
    (0..state.num_interior())
        .map(|j| (f(&shifted(state, j, h)) - f(&shifted(state, j, -h))) / (2.0 * h))
        .collect()
}

fn fd_jacobian(
    g: impl Fn(&LagrangianState) -> Vec<f64>,
    state: &LagrangianState,
    h: f64,
) -> Vec<Vec<f64>> {
    (0..state.num_interior())
        .map(|j| {
            let hi = g(&shifted(state, j, h));
            let lo = g(&shifted(state, j, -h));
            hi.iter().zip(&lo).map(|(a, b)| (a - b) / (2.0 * h)).collect()
        })
        .collect()
}

fn tridiag_columns(m: &SymTridiag, n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            m.matvec(&e)
        })
        .collect()
}

#[test]
fn c03_gradient_hessian_oracles() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xacce97);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let k = rng.random_range(2..=12usize);
        let (grid, state) = common::random_uniform_state(&mut rng, k);
        let min_gap = (0..k)
            .map(|c| state.node(c + 1) - state.node(c))
            .fold(f64::INFINITY, f64::min);
        let h = 6e-6 * min_gap;
        let n = k - 1;

        let grad_h = functionals::entropy_gradient(&grid, &state).unwrap();
        let fd_h = fd_gradient(|s| functionals::entropy(&grid, s).unwrap(), &state, h);
        worst = worst.max(rel_err(&fd_h, &grad_h));

        // the Fisher gradient is metric; rescale the plain difference
        // quotient by the dual node masses before comparing
        let grad_f = functionals::fisher_gradient(&grid, &state).unwrap();
        let fd_f: Vec<f64> =
            fd_gradient(|s| functionals::fisher(&grid, s).unwrap(), &state, h)
                .iter()
                .enumerate()
                .map(|(j, v)| v / grid.delta_node(j + 1))
                .collect();
        worst = worst.max(rel_err(&fd_f, &grad_f));

        let hess_h = functionals::entropy_hessian(&grid, &state).unwrap();
        let cols = tridiag_columns(&hess_h, n);
        let fd_cols = fd_jacobian(
            |s| functionals::entropy_gradient(&grid, s).unwrap(),
            &state,
            h,
        );
        let flat: Vec<f64> = cols.iter().flatten().copied().collect();
        let fd_flat: Vec<f64> = fd_cols.iter().flatten().copied().collect();
        worst = worst.max(rel_err(&fd_flat, &flat));

        let hess_f = functionals::fisher_hessian(&grid, &state).unwrap();
        let cols: Vec<Vec<f64>> = (0..n)
            .map(|j| {
                let mut e = vec![0.0; n];
                e[j] = 1.0;
                hess_f.matvec(&e)
            })
            .collect();
        // plain gradient of the Fisher information, to match its plain Hessian
        let fd_cols = fd_jacobian(
            |s| {
                functionals::fisher_gradient(&grid, s)
                    .unwrap()
                    .iter()
                    .enumerate()
                    .map(|(j, v)| v * grid.delta_node(j + 1))
                    .collect()
            },
            &state,
            h,
        );
        let flat: Vec<f64> = cols.iter().flatten().copied().collect();
        let fd_flat: Vec<f64> = fd_cols.iter().flatten().copied().collect();
        worst = worst.max(rel_err(&fd_flat, &flat));
    }
    let elapsed = start.elapsed();
    let in_budget = within(elapsed, Duration::from_secs(5));
    verdict(
        "c03",
        "gradient_hessian_oracles",
        worst <= ORACLE_REL_TOL && in_budget,
        &format!(
            "worst relative deviation {worst:.2e} <= {ORACLE_REL_TOL:.0e} over 100 states, {:.2} s < 5 s",
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn c04_spatial_order() {
    let start = Instant::now();
    let datum = Datum::Cos16 { epsilon: 1e-3 };
    let study = analysis::spatial_study(
        &datum,
        &[25, 50, 100, 200],
        1e-8,
        5e-6,
        400,
        &SolverConfig::default(),
    )
    .unwrap();
    let elapsed = start.elapsed();
    let slope = study.fit.slope;
    let pass = (SPATIAL_BAND.0..=SPATIAL_BAND.1).contains(&slope)
        && within(elapsed, Duration::from_secs(1800));
    verdict(
        "c04",
        "spatial_order",
        pass,
        &format!(
            "slope {slope:.3} in [{}, {}], errors {:?}, {:.1} s < 1800 s",
            SPATIAL_BAND.0,
            SPATIAL_BAND.1,
            study.fit.errors,
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn c05_temporal_order() {
    let start = Instant::now();
    let datum = Datum::Cos16 { epsilon: 1e-3 };
    let study = analysis::temporal_study(
        &datum,
        200,
        &[1e-5, 5e-6, 1e-6, 5e-7, 1e-7],
        1e-5,
        1e-8,
        &SolverConfig::default(),
    )
    .unwrap();
    let elapsed = start.elapsed();
    let slope = study.fit.slope;
    let pass = (TEMPORAL_BAND.0..=TEMPORAL_BAND.1).contains(&slope)
        && within(elapsed, Duration::from_secs(900));
    verdict(
        "c05",
        "temporal_order",
        pass,
        &format!(
            "slope {slope:.3} in [{}, {}], errors {:?}, {:.1} s < 900 s",
            TEMPORAL_BAND.0,
            TEMPORAL_BAND.1,
            study.fit.errors,
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn c06_consistency_orders() {
    let start = Instant::now();
    let spatial = builtin_spatial_consistency().unwrap();
    let temporal = builtin_temporal_consistency().unwrap();
    let elapsed = start.elapsed();
    let pass = (SPATIAL_BAND.0..=SPATIAL_BAND.1).contains(&spatial.slope)
        && (TEMPORAL_BAND.0..=TEMPORAL_BAND.1).contains(&temporal.slope)
        && within(elapsed, Duration::from_secs(60));
    verdict(
        "c06",
        "consistency_orders",
        pass,
        &format!(
            "spatial slope {:.3} in [{}, {}], temporal slope {:.3} in [{}, {}], {:.1} s < 60 s",
            spatial.slope,
            SPATIAL_BAND.0,
            SPATIAL_BAND.1,
            temporal.slope,
            TEMPORAL_BAND.0,
            TEMPORAL_BAND.1,
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn c07_entropy_decay_per_step() {
    let traj = smooth_run();
    match analysis::entropy_decay_fit(traj).unwrap() {
        EntropyDecay::Fit { rate, per_step, .. } => verdict(
            "c07",
            "entropy_decay_per_step",
            per_step.satisfied,
            &format!(
                "tightest step: lhs {:.12e} <= rhs {:.12e}, fitted rate {rate:.3}",
                per_step.lhs, per_step.rhs
            ),
        ),
        EntropyDecay::Degenerate { first_flat_step } => verdict(
            "c07",
            "entropy_decay_per_step",
            false,
            &format!("trajectory degenerated to flat at step {first_flat_step}"),
        ),
    }
}

#[test]
fn c08_metric_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xacce98);
    let mut failures = 0usize;
    let mut worst_ratio_lo = f64::INFINITY;
    let mut worst_ratio_hi: f64 = 0.0;
    for _ in 0..200 {
        let k = rng.random_range(2..=20usize);
        let (grid, s0) = common::random_uniform_state(&mut rng, k);
        let s1 = common::random_state_on(&mut rng, s0.domain(), k);
        let wd = functionals::w_delta(&grid, &s0, &s1).unwrap();
        let w = functionals::wasserstein_exact(
            &grid::density_pc(&grid, &s0).unwrap(),
            &grid::density_pc(&grid, &s1).unwrap(),
        )
        .unwrap();
        let (w2, wd2) = (w * w, wd * wd);
        let lower_ok = wd2 / 6.0 <= w2 * (1.0 + METRIC_REL_SLACK);
        let upper_ok = w2 <= wd2 * (1.0 + METRIC_REL_SLACK);
        if !(lower_ok && upper_ok) {
            failures += 1;
        }
        if wd2 > 0.0 {
            worst_ratio_lo = worst_ratio_lo.min(w2 / wd2);
            worst_ratio_hi = worst_ratio_hi.max(w2 / wd2);
        }
    }
    verdict(
        "c08",
        "metric_equivalence",
        failures == 0,
        &format!(
            "0 of 200 pairs outside 1/6 <= W^2/Wd^2 <= 1; observed range [{worst_ratio_lo:.4}, {worst_ratio_hi:.4}], failures {failures}"
        ),
    );
}

#[test]
fn c09_interpolation_inequalities() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xacce99);
    let mut failures: Vec<String> = Vec::new();
    let mut min_slack = f64::INFINITY;
    for i in 0..100 {
        let k = rng.random_range(2..=12usize);
        let (grid, state) = common::random_uniform_state(&mut rng, k);
        for r in analysis::check_state_inequalities(&grid, &state).unwrap() {
            if !r.satisfied {
                failures.push(format!("state {i}: {}", r.name));
            }
            min_slack = min_slack.min(r.slack / r.rhs.abs().max(f64::MIN_POSITIVE));
        }
    }
    verdict(
        "c09",
        "interpolation_inequalities",
        failures.is_empty(),
        &format!(
            "7 inequalities on 100 states, failures {:?}, min relative slack {min_slack:.2e}",
            failures
        ),
    );
}

#[test]
fn c10_discontinuous_data() {
    let start = Instant::now();
    let datum = Datum::Discontinuous;
    let config = SolverConfig::default();

    // main run: 100 cells, geometric step ramp from 1e-13 up to the 1e-10
    // cap, landing exactly on T = 1e-9
    let (grid, state) = datum.uniform_setup(100).unwrap();
    let schedule = solver::adaptive_schedule(1e-9, 1e-13, 1.1, 1e-10);
    let traj = solver::run(&grid, &state, schedule, &config).unwrap();
    let (structural_ok, structural_detail) = structural_checks(&traj);
    let reports = analysis::check_dissipation_estimates(&traj).unwrap();
    let estimate_failures: Vec<&str> = reports
        .iter()
        .filter(|r| !r.satisfied)
        .map(|r| r.name.as_str())
        .collect();

    // error against a fine fixed-grid reference, over a mesh ladder
    let study = analysis::eulerian_study(
        &datum,
        &[25, 50, 100],
        1e-8,
        1e-13,
        1.1,
        1e-10,
        400,
        1e-12,
        &config,
    )
    .unwrap();
    let errors: Vec<f64> = study.cells.iter().map(|c| c.error.unwrap()).collect();
    let decreasing = errors.windows(2).all(|w| w[1] < w[0]);

    let elapsed = start.elapsed();
    let pass = structural_ok
        && estimate_failures.is_empty()
        && decreasing
        && within(elapsed, Duration::from_secs(1800));
    verdict(
        "c10",
        "discontinuous_data",
        pass,
        &format!(
            "{structural_detail}; estimate failures {:?}; errors {:?} decreasing={decreasing}, observed rate {:.2} (reported, not enforced); {:.1} s < 1800 s",
            estimate_failures,
            errors,
            study.fit.slope,
            elapsed.as_secs_f64()
        ),
    );
}
