//! Built-in initial data and the cumulative mass machinery used to place
//! nodes: adaptive Simpson quadrature for smooth data, exact piecewise
//! formulas for the discontinuous one, and bisection for inverse CDFs.

use thiserror::Error;

use crate::grid::{Domain, GridError, LagrangianState, MassGrid};

#[derive(Debug, Error)]
pub enum DatumError {
    #[error("sampled datum needs at least two strictly increasing points")]
    BadSample,
    #[error("datum must be strictly positive, found {value} at x={x}")]
    NonPositive { x: f64, value: f64 },
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Initial density on `[a, b]`.
#[derive(Debug, Clone)]
pub enum Datum {
    /// `eps + cos^16(pi x)` on `[0, 1]`.
    Cos16 { epsilon: f64 },
    /// `1` on `[0, 1/3] u [2/3, 1]`, `1e-3` in between.
    Discontinuous,
    /// Constant density `mass / (b - a)`.
    Uniform { domain: Domain },
    /// Piecewise linear interpolation of user samples `(x_i, u_i)`.
    Sampled { xs: Vec<f64>, us: Vec<f64> },
}

/// Relative quadrature target for cumulative masses.
const CDF_TOL_REL: f64 = 1e-12;

impl Datum {
    pub fn sampled(xs: Vec<f64>, us: Vec<f64>) -> Result<Self, DatumError> {
        if xs.len() < 2 || xs.len() != us.len() {
            return Err(DatumError::BadSample);
        }
        for i in 0..xs.len() - 1 {
            if !(xs[i + 1] > xs[i]) {
                return Err(DatumError::BadSample);
            }
        }
        for (&x, &u) in xs.iter().zip(&us) {
            if !(u > 0.0) {
                return Err(DatumError::NonPositive { x, value: u });
            }
        }
        Ok(Self::Sampled { xs, us })
    }

    pub fn a(&self) -> f64 {
        match self {
            Datum::Cos16 { .. } | Datum::Discontinuous => 0.0,
            Datum::Uniform { domain } => domain.a(),
            Datum::Sampled { xs, .. } => xs[0],
        }
    }

    pub fn b(&self) -> f64 {
        match self {
            Datum::Cos16 { .. } | Datum::Discontinuous => 1.0,
            Datum::Uniform { domain } => domain.b(),
            Datum::Sampled { xs, .. } => *xs.last().unwrap(),
        }
    }

    /// Pointwise density value.
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Datum::Cos16 { epsilon } => epsilon + (std::f64::consts::PI * x).cos().powi(16),
            Datum::Discontinuous => {
                if x > 1.0 / 3.0 && x < 2.0 / 3.0 {
                    1e-3
                } else {
                    1.0
                }
            }
            Datum::Uniform { domain } => domain.mass() / domain.length(),
            Datum::Sampled { xs, us } => {
                let n = xs.len();
                let i = match xs.binary_search_by(|p| p.partial_cmp(&x).unwrap()) {
                    Ok(i) => return us[i.min(n - 1)],
                    Err(0) => 0,
                    Err(i) => (i - 1).min(n - 2),
                };
                let t = (x - xs[i]) / (xs[i + 1] - xs[i]);
                us[i] + t * (us[i + 1] - us[i])
            }
        }
    }

    /// Total mass `int_a^b u0`.
    pub fn mass(&self) -> f64 {
        match self {
            Datum::Cos16 { .. } => self.cdf(1.0),
            Datum::Discontinuous => 2.0 / 3.0 + 1e-3 / 3.0,
            Datum::Uniform { domain } => domain.mass(),
            Datum::Sampled { xs, .. } => self.cdf(*xs.last().unwrap()),
        }
    }

    pub fn domain(&self) -> Domain {
        Domain::new(self.a(), self.b(), self.mass()).expect("datum defines a valid domain")
    }

    /// Cumulative mass `U0(x) = int_a^x u0`. Exact for the piecewise data,
    /// adaptive Simpson for the smooth ones.
    pub fn cdf(&self, x: f64) -> f64 {
        match self {
            Datum::Cos16 { epsilon } => {
                let f = |t: f64| epsilon + (std::f64::consts::PI * t).cos().powi(16);
                adaptive_simpson(&f, 0.0, x, CDF_TOL_REL * (1.0_f64).max(x.abs()))
            }
            Datum::Discontinuous => {
                let x1 = 1.0 / 3.0;
                let x2 = 2.0 / 3.0;
                if x <= x1 {
                    x
                } else if x <= x2 {
                    x1 + 1e-3 * (x - x1)
                } else {
                    x1 + 1e-3 * (x2 - x1) + (x - x2)
                }
            }
            Datum::Uniform { domain } => (x - domain.a()) * domain.mass() / domain.length(),
            Datum::Sampled { xs, us } => {
                // exact trapezoid accumulation of the interpolant
                let mut acc = 0.0;
                for i in 0..xs.len() - 1 {
                    let (x0, x1) = (xs[i], xs[i + 1]);
                    if x <= x0 {
                        break;
                    }
                    let hi = x.min(x1);
                    let u_hi = us[i] + (us[i + 1] - us[i]) * (hi - x0) / (x1 - x0);
                    acc += 0.5 * (hi - x0) * (us[i] + u_hi);
                }
                acc
            }
        }
    }

    /// Inverse of the cumulative mass function by bisection.
    pub fn inverse_cdf(&self, xi: f64) -> f64 {
        let (mut lo, mut hi) = (self.a(), self.b());
        if xi <= 0.0 {
            return lo;
        }
        if xi >= self.mass() {
            return hi;
        }
        // 60 bisections bring the bracket below 1e-15 of the interval
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if self.cdf(mid) < xi {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    /// Uniform mass grid plus the state that carries this datum on it:
    /// node `k` sits at `U0^{-1}(k M / K)`.
    pub fn uniform_setup(&self, k: usize) -> Result<(MassGrid, LagrangianState), DatumError> {
        let grid = MassGrid::uniform(k, self.mass())?;
        let domain = self.domain();
        let interior = (1..k).map(|i| self.inverse_cdf(grid.node(i))).collect();
        let state = LagrangianState::new(domain, interior)?;
        Ok((grid, state))
    }

    /// CDF-adapted grid through given physical nodes (equidistant by default):
    /// the mass grid absorbs the datum, the state keeps the nodes themselves.
    pub fn adapted_setup_at(
        &self,
        x_nodes: &[f64],
    ) -> Result<(MassGrid, LagrangianState), DatumError> {
        let grid = MassGrid::from_cdf(|x| self.cdf(x), x_nodes, self.mass())?;
        let domain = self.domain();
        let interior = x_nodes[1..x_nodes.len() - 1].to_vec();
        let state = LagrangianState::new(domain, interior)?;
        Ok((grid, state))
    }

    /// CDF-adapted grid on `k` equidistant physical nodes.
    pub fn adapted_setup(&self, k: usize) -> Result<(MassGrid, LagrangianState), DatumError> {
        let (a, b) = (self.a(), self.b());
        let nodes: Vec<f64> = (0..=k)
            .map(|i| a + (b - a) * (i as f64 / k as f64))
            .collect();
        self.adapted_setup_at(&nodes)
    }
}

/// Adaptive composite Simpson quadrature: panels are split until the
/// Richardson error estimate `|S2 - S| / 15` clears the tolerance.
pub fn adaptive_simpson(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    fn simpson(a: f64, fa: f64, b: f64, fb: f64, fm: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }
    #[allow(clippy::too_many_arguments)] // cached endpoint/midpoint values
    fn recurse(
        f: &impl Fn(f64) -> f64,
        a: f64,
        fa: f64,
        b: f64,
        fb: f64,
        fm: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = simpson(a, fa, m, fm, flm);
        let right = simpson(m, fm, b, fb, frm);
        let err = left + right - whole;
        if depth == 0 || err.abs() <= 15.0 * tol {
            return left + right + err / 15.0;
        }
        recurse(f, a, fa, m, fm, flm, left, 0.5 * tol, depth - 1)
            + recurse(f, m, fm, b, fb, frm, right, 0.5 * tol, depth - 1)
    }
    let fa = f(a);
    let fb = f(b);
    let fm = f(0.5 * (a + b));
    let whole = simpson(a, fa, b, fb, fm);
    recurse(f, a, fa, b, fb, fm, whole, tol, 40)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::weights;

    /// Oracle: plain composite Simpson at a fixed panel count.
    fn simpson_panels(f: &impl Fn(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
        let h = (b - a) / panels as f64;
        let mut acc = f(a) + f(b);
        for i in 1..panels {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * f(a + i as f64 * h);
        }
        acc * h / 3.0
    }

    #[test]
    fn cos16_mass_matches_quadrature_oracle_and_closed_form() {
        let datum = Datum::Cos16 { epsilon: 1e-3 };
        let f = |x: f64| 1e-3 + (std::f64::consts::PI * x).cos().powi(16);
        let oracle = simpson_panels(&f, 0.0, 1.0, 10_000);
        let m = datum.mass();
        assert!((m - oracle).abs() < 1e-10, "mass {m} vs oracle {oracle}");
        // int cos^16(pi x) dx on [0,1] is binom(16,8)/2^16 = 12870/65536
        let exact = 1e-3 + 12870.0 / 65536.0;
        assert!((m - exact).abs() < 1e-12, "mass {m} vs exact {exact}");
    }

    #[test]
    fn uniform_grid_delta_from_cos16_mass() {
        let datum = Datum::Cos16 { epsilon: 1e-3 };
        let grid = MassGrid::uniform(200, datum.mass()).unwrap();
        assert!((grid.delta_mean() - datum.mass() / 200.0).abs() < 1e-18);
    }

    #[test]
    fn cos16_adapted_grid_is_symmetric() {
        let datum = Datum::Cos16 { epsilon: 1e-3 };
        let (grid, state) = datum.adapted_setup(4).unwrap();
        // equidistant physical nodes
        assert_eq!(state.interior(), &[0.25, 0.5, 0.75]);
        // symmetry of the datum puts half the mass left of x = 1/2
        let m = grid.mass();
        assert!((grid.node(2) - 0.5 * m).abs() < 1e-10 * m);
        // strictly increasing by construction
        for i in 0..grid.num_cells() {
            assert!(grid.delta_cell(i) > 0.0);
        }
    }

    #[test]
    fn discontinuous_cdf_is_exact_piecewise_linear() {
        let datum = Datum::Discontinuous;
        assert_eq!(datum.mass(), (2.0 + 1e-3) / 3.0);
        assert_eq!(datum.cdf(1.0 / 3.0), 1.0 / 3.0);
        // each piece is exactly linear, so wide difference quotients recover
        // the slopes to rounding: 1e-3 inside the well, 1 outside
        let lhs = (datum.cdf(0.6) - datum.cdf(0.4)) / 0.2;
        assert!((lhs - 1e-3).abs() < 1e-12, "well slope {lhs}");
        let rhs = (datum.cdf(0.95) - datum.cdf(0.75)) / 0.2;
        assert!((rhs - 1.0).abs() < 1e-12, "outer slope {rhs}");
    }

    #[test]
    fn discontinuous_adapted_grid_increases() {
        let datum = Datum::Discontinuous;
        let (grid, _state) = datum.adapted_setup(30).unwrap();
        for i in 0..grid.num_cells() {
            assert!(grid.delta_cell(i) > 0.0, "cell {i} collapsed");
        }
        // cells inside the well carry little mass
        let mid_cell = grid.delta_cell(15);
        let edge_cell = grid.delta_cell(0);
        assert!(mid_cell < 0.01 * edge_cell);
    }

    #[test]
    fn uniform_setup_reproduces_datum_density() {
        let datum = Datum::Discontinuous;
        let (grid, state) = datum.uniform_setup(60).unwrap();
        let z = weights(&grid, &state).unwrap();
        // weights approximate the density: near 1 at the first cell,
        // near 1e-3 in the middle of the well
        assert!((z.cell(0) - 1.0).abs() < 1e-6);
        let mid = datum.inverse_cdf(0.5 * datum.mass());
        assert!(mid > 1.0 / 3.0 && mid < 2.0 / 3.0);
    }

    #[test]
    fn inverse_cdf_inverts() {
        let datum = Datum::Cos16 { epsilon: 1e-3 };
        let m = datum.mass();
        for frac in [0.1, 0.25, 0.5, 0.9] {
            let xi = frac * m;
            let x = datum.inverse_cdf(xi);
            assert!((datum.cdf(x) - xi).abs() < 1e-12 * m);
        }
    }

    #[test]
    fn sampled_datum_round_trip() {
        let datum = Datum::sampled(vec![0.0, 0.5, 1.0], vec![1.0, 2.0, 1.0]).unwrap();
        assert!((datum.mass() - 1.5).abs() < 1e-15);
        assert_eq!(datum.eval(0.25), 1.5);
        assert!(Datum::sampled(vec![0.0, 0.0], vec![1.0, 1.0]).is_err());
        assert!(Datum::sampled(vec![0.0, 1.0], vec![1.0, -1.0]).is_err());
    }
}
