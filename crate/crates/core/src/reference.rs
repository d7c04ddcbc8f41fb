//! Semi-implicit Eulerian finite-difference scheme on a fixed spatial grid,
//! used to cross-validate the Lagrangian solver.
//!
//! With `D2` the standard central second difference (homogeneous Neumann
//! boundaries via mirrored ghost cells), one step solves
//!
//!     (u_next - u) / tau = -D2 ( u D2 ln(u_next) )
//!
//! for `u_next`. Writing `v = ln u_next` keeps positivity structurally: the
//! Newton iteration runs on `G(v) = (e^v - u)/tau + L v` with
//! `L = D2 diag(u) D2` symmetric positive semidefinite, so the Jacobian
//! `diag(e^v)/tau + L` is symmetric positive definite and pentadiagonal.
//! Column sums of `D2` vanish, hence the scheme conserves mass exactly up to
//! the Newton tolerance.

use thiserror::Error;

use crate::band::{BandError, BandMatrix};
use crate::datum::{Datum, DatumError};
use crate::grid::{DensityPc, Domain};
use crate::kahan::KahanSum;

#[derive(Debug, Error)]
pub enum ReferenceError {
    #[error("field values must be strictly positive (cell {index})")]
    NonPositive { index: usize },
    #[error("need at least two cells")]
    TooFewCells,
    #[error("invalid time step {tau:.3e}")]
    BadTau { tau: f64 },
    #[error("newton iteration stalled after {iters} iterations (residual {residual:.3e})")]
    NewtonStalled { iters: usize, residual: f64 },
    #[error("time step underflow at t = {t:.6e}: tau {tau:.3e} below {tau_min:.3e}")]
    TauUnderflow { t: f64, tau: f64, tau_min: f64 },
    #[error(transparent)]
    Linear(#[from] BandError),
    #[error(transparent)]
    Datum(#[from] DatumError),
}

/// Cell-centered positive density on a uniform Eulerian mesh.
#[derive(Debug, Clone)]
pub struct EulerianField {
    domain: Domain,
    h: f64,
    values: Vec<f64>,
}

impl EulerianField {
    pub fn new(domain: Domain, values: Vec<f64>) -> Result<Self, ReferenceError> {
        if values.len() < 2 {
            return Err(ReferenceError::TooFewCells);
        }
        if let Some(index) = values.iter().position(|&u| !(u > 0.0) || !u.is_finite()) {
            return Err(ReferenceError::NonPositive { index });
        }
        let h = domain.length() / values.len() as f64;
        Ok(Self { domain, h, values })
    }

    /// Cell averages of a datum, via differences of its distribution
    /// function, so the discrete mass telescopes to the datum mass.
    pub fn from_datum(datum: &Datum, cells: usize) -> Result<Self, ReferenceError> {
        if cells < 2 {
            return Err(ReferenceError::TooFewCells);
        }
        let domain = datum.domain();
        let (a, len) = (domain.a(), domain.length());
        let h = len / cells as f64;
        let values = (0..cells)
            .map(|j| {
                let lo = a + len * (j as f64 / cells as f64);
                let hi = a + len * ((j + 1) as f64 / cells as f64);
                (datum.cdf(hi) - datum.cdf(lo)) / h
            })
            .collect();
        Self::new(domain, values)
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn num_cells(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mass(&self) -> f64 {
        let mut acc = KahanSum::new();
        for &u in &self.values {
            acc.add(u * self.h);
        }
        acc.value()
    }

    /// Discrete entropy with the same offset convention as the Lagrangian
    /// side: zero for the flat field.
    pub fn entropy(&self) -> f64 {
        let m = self.mass();
        let mut acc = KahanSum::new();
        for &u in &self.values {
            acc.add(self.h * u * u.ln());
        }
        acc.value() - m * (m / self.domain.length()).ln()
    }

    /// Piecewise constant view, for exact comparisons against Lagrangian
    /// densities on merged breakpoints.
    pub fn density_pc(&self) -> DensityPc {
        let n = self.values.len();
        let (a, len) = (self.domain.a(), self.domain.length());
        let breaks = (0..=n)
            .map(|j| a + len * (j as f64 / n as f64))
            .collect();
        DensityPc::from_parts(breaks, self.values.clone())
    }

    /// Central second difference with mirrored ghost cells.
    fn d2(&self, w: &[f64]) -> Vec<f64> {
        let n = w.len();
        let h2 = self.h * self.h;
        (0..n)
            .map(|j| {
                let wm = if j == 0 { w[0] } else { w[j - 1] };
                let wp = if j + 1 == n { w[n - 1] } else { w[j + 1] };
                (wm - 2.0 * w[j] + wp) / h2
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ReferenceConfig {
    pub newton_tol: f64,
    pub newton_tol_rel: f64,
    pub max_newton_iters: usize,
    pub tau_min: f64,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        Self {
            newton_tol: 1e-11,
            newton_tol_rel: 1e-11,
            max_newton_iters: 50,
            tau_min: 1e-18,
        }
    }
}

/// `sqrt(sum h g^2)`: mesh-independent residual norm.
fn weighted_norm(h: f64, g: &[f64]) -> f64 {
    let mut acc = KahanSum::new();
    for &v in g {
        acc.add(h * v * v);
    }
    acc.value().sqrt()
}

/// One semi-implicit step; rejects (with a structured error) if Newton fails.
pub fn semi_implicit_step(
    field: &EulerianField,
    tau: f64,
    config: &ReferenceConfig,
) -> Result<EulerianField, ReferenceError> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(ReferenceError::BadTau { tau });
    }
    let n = field.values.len();
    let u_prev = &field.values;
    let mut v: Vec<f64> = u_prev.iter().map(|u| u.ln()).collect();

    let residual = |v: &[f64]| -> Vec<f64> {
        let lv = field.d2(v);
        let flux: Vec<f64> = lv.iter().zip(u_prev.iter()).map(|(lv, u)| u * lv).collect();
        let dlv = field.d2(&flux);
        (0..n)
            .map(|j| (v[j].exp() - u_prev[j]) / tau + dlv[j])
            .collect()
    };

    let mut g = residual(&v);
    let mut gnorm = weighted_norm(field.h, &g);
    // the difference quotient (e^v - u)/tau cannot be evaluated below the
    // rounding of u divided by tau; fold that floor into the target
    let fp_floor = 8.0 * f64::EPSILON * weighted_norm(field.h, u_prev) / tau;
    let tol = config.newton_tol + config.newton_tol_rel * gnorm + fp_floor;
    let mut iters = 0;
    while gnorm > tol {
        if iters >= config.max_newton_iters {
            return Err(ReferenceError::NewtonStalled {
                iters,
                residual: gnorm,
            });
        }
        // Jacobian diag(e^v)/tau + D2 diag(u_prev) D2, bandwidth 2
        let mut jac = BandMatrix::new(n, 2, 2);
        let h2 = field.h * field.h;
        // rows of D2 with mirrored ghosts: row j couples j-1, j, j+1
        let row = |j: usize| -> [(usize, f64); 3] {
            let mut r = [(j, -2.0 / h2), (j, 0.0), (j, 0.0)];
            let mut m = 1;
            if j > 0 {
                r[m] = (j - 1, 1.0 / h2);
                m += 1;
            } else {
                r[0].1 += 1.0 / h2;
            }
            if j + 1 < n {
                r[m] = (j + 1, 1.0 / h2);
            } else {
                r[0].1 += 1.0 / h2;
            }
            r
        };
        for i in 0..n {
            jac.add(i, i, v[i].exp() / tau);
        }
        // L = D2 diag(u) D2: accumulate (row i of D2) * u_k * (row k of D2)
        for k in 0..n {
            let rk = row(k);
            for &(i, ci) in &rk {
                if ci == 0.0 {
                    continue;
                }
                for &(j, cj) in &rk {
                    if cj == 0.0 {
                        continue;
                    }
                    jac.add(i, j, ci * u_prev[k] * cj);
                }
            }
        }
        let rhs: Vec<f64> = g.iter().map(|&x| -x).collect();
        let dv = jac.factor()?.solve(&rhs);

        let mut lambda = 1.0;
        loop {
            let cand: Vec<f64> = v.iter().zip(&dv).map(|(a, d)| a + lambda * d).collect();
            let cand_g = residual(&cand);
            let cand_norm = weighted_norm(field.h, &cand_g);
            if cand_norm <= 0.99 * gnorm || cand_norm <= tol {
                v = cand;
                g = cand_g;
                gnorm = cand_norm;
                break;
            }
            lambda *= 0.5;
            if lambda < 1e-6 {
                return Err(ReferenceError::NewtonStalled {
                    iters,
                    residual: gnorm,
                });
            }
        }
        iters += 1;
    }

    let values: Vec<f64> = v.iter().map(|x| x.exp()).collect();
    EulerianField::new(field.domain, values)
}

/// Fixed-step run with halve-on-failure and geometric regrowth toward the
/// nominal step; lands on `t_end` exactly up to accumulation rounding.
#[derive(Debug, Clone)]
pub struct ReferenceTrajectory {
    pub times: Vec<f64>,
    pub fields: Vec<EulerianField>,
    pub taus: Vec<f64>,
    pub rejected_steps: usize,
}

pub fn run_reference(
    initial: &EulerianField,
    tau: f64,
    t_end: f64,
    config: &ReferenceConfig,
) -> Result<ReferenceTrajectory, ReferenceError> {
    if !(tau > 0.0 && t_end > 0.0) {
        return Err(ReferenceError::BadTau { tau });
    }
    let mut traj = ReferenceTrajectory {
        times: vec![0.0],
        fields: vec![initial.clone()],
        taus: Vec::new(),
        rejected_steps: 0,
    };
    let mut clock = KahanSum::new();
    let mut tau_cur = tau;
    loop {
        let t = clock.value();
        let remaining = t_end - t;
        if remaining <= 1e-12 * t_end {
            break;
        }
        let tau_try = tau_cur.min(remaining);
        match semi_implicit_step(traj.fields.last().unwrap(), tau_try, config) {
            Ok(next) => {
                clock.add(tau_try);
                traj.times.push(clock.value());
                traj.fields.push(next);
                traj.taus.push(tau_try);
                tau_cur = (tau_cur * 2.0).min(tau);
            }
            Err(err) => {
                traj.rejected_steps += 1;
                tau_cur *= 0.5;
                if tau_cur < config.tau_min {
                    return Err(match err {
                        ReferenceError::NewtonStalled { .. } | ReferenceError::NonPositive { .. } => {
                            ReferenceError::TauUnderflow {
                                t,
                                tau: tau_cur,
                                tau_min: config.tau_min,
                            }
                        }
                        other => other,
                    });
                }
            }
        }
    }
    Ok(traj)
}
