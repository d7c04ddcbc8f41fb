//! Discrete entropy and Fisher information with their gradients and
//! Hessians, the weighted metric, and Wasserstein-type distances.
//!
//! With weights `z_c = delta_c / (x_{c+1} - x_c)` the two functionals are
//!
//!     H(x) = sum_c delta_c ln z_c - H0,      H0 = M ln(M / (b - a)),
//!     F(x) = (1/2) sum_k delta_k g_k^2,      g_k = (z_k - z_{k-1}) / delta_k,
//!
//! where `delta_k` is the dual mass around interior node `k` and `g` vanishes
//! at the boundary nodes (the mirror convention makes the boundary difference
//! exactly zero, so no ghost cell width ever enters). `F` is half the squared
//! metric norm of the entropy gradient; that identity is what makes the
//! minimizing-movement scheme dissipate both functionals at once.
//!
//! All derivative formulas below come from differentiating these sums exactly
//! through `dz_c/dx_j = -(z_c^2 / delta_c) (e_{c+1} - e_c)_j`; the uniform-grid
//! specialization is kept as an independent code path for regression tests.

use thiserror::Error;

use crate::band::BandMatrix;
use crate::grid::{self, DensityPc, GridError, LagrangianState, MassGrid, Weights};
use crate::kahan::KahanSum;

#[derive(Debug, Error)]
pub enum FunctionalError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("densities carry different masses ({m0} vs {m1})")]
    MassMismatch { m0: f64, m1: f64 },
}

/// Inner products and norms weighted by the dual cell masses `delta_k`.
#[derive(Debug, Clone)]
pub struct MetricWorkspace {
    dm: Vec<f64>,
}

impl MetricWorkspace {
    pub fn new(grid: &MassGrid) -> Self {
        let dm = (1..grid.num_cells()).map(|k| grid.delta_node(k)).collect();
        Self { dm }
    }

    pub fn dim(&self) -> usize {
        self.dm.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.dm
    }

    pub fn inner(&self, u: &[f64], v: &[f64]) -> f64 {
        debug_assert_eq!(u.len(), self.dm.len());
        debug_assert_eq!(v.len(), self.dm.len());
        let mut acc = KahanSum::new();
        for j in 0..self.dm.len() {
            acc.add(self.dm[j] * u[j] * v[j]);
        }
        acc.value()
    }

    pub fn norm_sq(&self, v: &[f64]) -> f64 {
        self.inner(v, v)
    }

    pub fn norm(&self, v: &[f64]) -> f64 {
        self.norm_sq(v).sqrt()
    }

    /// Distance between two states in the weighted metric.
    pub fn distance(&self, s0: &LagrangianState, s1: &LagrangianState) -> f64 {
        let x0 = s0.interior();
        let x1 = s1.interior();
        debug_assert_eq!(x0.len(), self.dm.len());
        let mut acc = KahanSum::new();
        for j in 0..self.dm.len() {
            let d = x1[j] - x0[j];
            acc.add(self.dm[j] * d * d);
        }
        acc.value().sqrt()
    }
}

/// Offset making the entropy of the flat state zero.
pub fn entropy_offset(grid: &MassGrid, state: &LagrangianState) -> f64 {
    let m = grid.mass();
    m * (m / state.domain().length()).ln()
}

/// Discrete entropy `sum_c delta_c ln z_c - H0`; zero exactly on flat states,
/// positive otherwise.
pub fn entropy(grid: &MassGrid, state: &LagrangianState) -> Result<f64, FunctionalError> {
    let z = grid::weights(grid, state)?;
    Ok(entropy_from_weights(grid, &z) - entropy_offset(grid, state))
}

fn entropy_from_weights(grid: &MassGrid, z: &Weights) -> f64 {
    let mut acc = KahanSum::new();
    for c in 0..z.len() {
        acc.add(grid.delta_cell(c) * z.cell(c).ln());
    }
    acc.value()
}

/// Integral mean of `ln` over an affine segment from `p` to `q`:
/// `int_0^1 ln(p (1-t) + q t) dt = (q ln q - p ln p)/(q - p) - 1`.
fn ln_segment_mean(p: f64, q: f64) -> f64 {
    let m = 0.5 * (p + q);
    let s = 0.5 * (q - p);
    if s.abs() <= 1e-8 * m {
        // series around the midpoint avoids the 0/0 cancellation
        m.ln() - s * s / (6.0 * m * m)
    } else {
        (q * q.ln() - p * p.ln()) / (q - p) - 1.0
    }
}

/// Entropy of the piecewise affine reconstruction, evaluated in mass
/// coordinates by the closed form above (no numerical quadrature). On uniform
/// grids it dominates the piecewise constant entropy segment by segment.
pub fn entropy_pl(grid: &MassGrid, state: &LagrangianState) -> Result<f64, FunctionalError> {
    let z = grid::weights(grid, state)?;
    let k = grid.num_cells();
    let mut acc = KahanSum::new();
    acc.add(0.5 * grid.delta_cell(0) * z.cell(0).ln());
    for node in 1..k {
        acc.add(grid.delta_node(node) * ln_segment_mean(z.cell(node - 1), z.cell(node)));
    }
    acc.add(0.5 * grid.delta_cell(k - 1) * z.cell(k - 1).ln());
    Ok(acc.value() - entropy_offset(grid, state))
}

/// Metric gradient components of the entropy at the nodes, with the boundary
/// values pinned to zero. Entry `k` (for `k = 0..=K`) is
/// `(z_k - z_{k-1}) / delta_k`.
fn node_slopes(grid: &MassGrid, z: &Weights) -> Vec<f64> {
    let k = grid.num_cells();
    let mut g = vec![0.0; k + 1];
    for node in 1..k {
        g[node] = (z.cell(node) - z.cell(node - 1)) / grid.delta_node(node);
    }
    g
}

/// Plain gradient of the entropy: `dH/dx_k = z_k - z_{k-1}`. Independent of
/// the grid spacing; divide by `delta_k` for the metric gradient.
pub fn entropy_gradient(grid: &MassGrid, state: &LagrangianState) -> Result<Vec<f64>, FunctionalError> {
    let z = grid::weights(grid, state)?;
    let k = grid.num_cells();
    Ok((1..k).map(|node| z.cell(node) - z.cell(node - 1)).collect())
}

/// Symmetric tridiagonal matrix (plain second derivatives of the entropy).
#[derive(Debug, Clone)]
pub struct SymTridiag {
    pub diag: Vec<f64>,
    pub off: Vec<f64>,
}

impl SymTridiag {
    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    pub fn quadratic_form(&self, v: &[f64]) -> f64 {
        let mut acc = KahanSum::new();
        for j in 0..self.diag.len() {
            acc.add(self.diag[j] * v[j] * v[j]);
        }
        for j in 0..self.off.len() {
            acc.add(2.0 * self.off[j] * v[j] * v[j + 1]);
        }
        acc.value()
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        let n = self.diag.len();
        let mut y = vec![0.0; n];
        for j in 0..n {
            y[j] = self.diag[j] * v[j];
            if j > 0 {
                y[j] += self.off[j - 1] * v[j - 1];
            }
            if j + 1 < n {
                y[j] += self.off[j] * v[j + 1];
            }
        }
        y
    }
}

/// Hessian of the entropy: positive semidefinite, tridiagonal; the quadratic
/// form of a constant shift reduces to the two boundary terms.
pub fn entropy_hessian(grid: &MassGrid, state: &LagrangianState) -> Result<SymTridiag, FunctionalError> {
    let z = grid::weights(grid, state)?;
    let k = grid.num_cells();
    let w = |c: usize| z.cell(c) * z.cell(c) / grid.delta_cell(c);
    let diag = (1..k).map(|node| w(node) + w(node - 1)).collect();
    let off = (1..k - 1).map(|node| -w(node)).collect();
    Ok(SymTridiag { diag, off })
}

/// Discrete Fisher information `(1/2) sum_k delta_k g_k^2`.
pub fn fisher(grid: &MassGrid, state: &LagrangianState) -> Result<f64, FunctionalError> {
    let z = grid::weights(grid, state)?;
    let k = grid.num_cells();
    let mut acc = KahanSum::new();
    for node in 1..k {
        let d = z.cell(node) - z.cell(node - 1);
        acc.add(0.5 * d * d / grid.delta_node(node));
    }
    Ok(acc.value())
}

/// Metric gradient of the Fisher information, from exact differentiation of
/// the general (non-uniform) sum. The boundary slopes `g_0 = g_K = 0` absorb
/// the mirror convention.
pub fn fisher_gradient(grid: &MassGrid, state: &LagrangianState) -> Result<Vec<f64>, FunctionalError> {
    let z = grid::weights(grid, state)?;
    Ok(fisher_gradient_from_weights(grid, &z))
}

pub(crate) fn fisher_gradient_from_weights(grid: &MassGrid, z: &Weights) -> Vec<f64> {
    let k = grid.num_cells();
    let g = node_slopes(grid, z);
    let w = |c: usize| z.cell(c) * z.cell(c) / grid.delta_cell(c);
    (1..k)
        .map(|node| {
            let plain = w(node) * (g[node] - g[node + 1]) + w(node - 1) * (g[node] - g[node - 1]);
            plain / grid.delta_node(node)
        })
        .collect()
}

/// Uniform-grid specialization of [`fisher_gradient`] written directly from
/// the second-difference form of the scheme; kept as an independent path so
/// the general formula can be regression-tested against it.
pub fn fisher_gradient_uniform(grid: &MassGrid, state: &LagrangianState) -> Result<Vec<f64>, FunctionalError> {
    let z = grid::weights(grid, state)?;
    let k = grid.num_cells();
    let delta = grid.delta_mean();
    let d3 = delta * delta * delta;
    Ok((1..k)
        .map(|node| {
            let zm2 = z.ghost(node as isize - 2);
            let zm = z.cell(node - 1);
            let zc = z.cell(node);
            let zp = z.ghost(node as isize + 1);
            -(zc * zc * (zp - 2.0 * zc + zm) - zm * zm * (zc - 2.0 * zm + zm2)) / d3
        })
        .collect())
}

/// Plain Hessian of the Fisher information: pentadiagonal, assembled from the
/// per-cell difference vectors `d_c = e_{c+1} - e_c` (boundary entries drop
/// out). Term one is the Gauss-Newton part `sum_k delta_k (dg_k)(dg_k)^T`,
/// term two carries the curvature of the weights.
pub fn fisher_hessian(grid: &MassGrid, state: &LagrangianState) -> Result<BandMatrix, FunctionalError> {
    let z = grid::weights(grid, state)?;
    let k = grid.num_cells();
    let n = k - 1;
    let g = node_slopes(grid, &z);
    let mut h = BandMatrix::new(n, 2, 2);

    // entries of d_c restricted to the interior unknowns
    let entries = |c: usize| {
        let mut e: [(usize, f64); 2] = [(usize::MAX, 0.0); 2];
        let mut m = 0;
        if c < n {
            e[m] = (c, 1.0);
            m += 1;
        }
        if c >= 1 {
            e[m] = (c - 1, -1.0);
            m += 1;
        }
        (e, m)
    };
    let add_outer = |h: &mut BandMatrix, coef: f64, c1: usize, c2: usize| {
        if coef == 0.0 {
            return;
        }
        let (e1, m1) = entries(c1);
        let (e2, m2) = entries(c2);
        for &(s1, v1) in &e1[..m1] {
            for &(s2, v2) in &e2[..m2] {
                h.add(s1, s2, coef * v1 * v2);
            }
        }
    };

    for node in 1..k {
        let dn = grid.delta_node(node);
        let a = z.cell(node) * z.cell(node) / grid.delta_cell(node);
        let b = z.cell(node - 1) * z.cell(node - 1) / grid.delta_cell(node - 1);
        // delta_k (dg_k)(dg_k)^T with dg_k = (b d_{k-1} - a d_k) / delta_k
        add_outer(&mut h, b * b / dn, node - 1, node - 1);
        add_outer(&mut h, -a * b / dn, node - 1, node);
        add_outer(&mut h, -a * b / dn, node, node - 1);
        add_outer(&mut h, a * a / dn, node, node);
        // delta_k g_k d2g_k, with d2z_c = (2 z_c^3 / delta_c^2) d_c d_c^T
        let gk = g[node];
        if gk != 0.0 {
            let zc = z.cell(node);
            let zm = z.cell(node - 1);
            let dc = grid.delta_cell(node);
            let dm = grid.delta_cell(node - 1);
            add_outer(&mut h, gk * 2.0 * zc * zc * zc / (dc * dc), node, node);
            add_outer(&mut h, -gk * 2.0 * zm * zm * zm / (dm * dm), node - 1, node - 1);
        }
    }
    Ok(h)
}

/// Yosida-regularized objective whose minimizer is the implicit step:
/// `|x - anchor|_d^2 / (2 tau) + F(x)`.
pub fn yosida(
    grid: &MassGrid,
    state: &LagrangianState,
    anchor: &LagrangianState,
    tau: f64,
) -> Result<f64, FunctionalError> {
    let metric = MetricWorkspace::new(grid);
    let d = metric.distance(anchor, state);
    Ok(d * d / (2.0 * tau) + fisher(grid, state)?)
}

/// Distance of two states in the weighted metric (same grid).
pub fn w_delta(grid: &MassGrid, s0: &LagrangianState, s1: &LagrangianState) -> Result<f64, FunctionalError> {
    s0.matches(grid)?;
    s1.matches(grid)?;
    Ok(MetricWorkspace::new(grid).distance(s0, s1))
}

/// Piecewise linear inverse distribution function of a piecewise constant
/// density: knots `(cumulative mass, breakpoint)`.
struct InverseCdf {
    mass: Vec<f64>,
    x: Vec<f64>,
}

impl InverseCdf {
    fn of(d: &DensityPc) -> Self {
        let breaks = d.breakpoints();
        let vals = d.values();
        let mut mass = Vec::with_capacity(breaks.len());
        let mut acc = KahanSum::new();
        mass.push(0.0);
        for c in 0..vals.len() {
            acc.add(vals[c] * (breaks[c + 1] - breaks[c]));
            mass.push(acc.value());
        }
        Self { mass, x: breaks.to_vec() }
    }

    fn eval(&self, xi: f64) -> f64 {
        let n = self.mass.len();
        if xi <= self.mass[0] {
            return self.x[0];
        }
        if xi >= self.mass[n - 1] {
            return self.x[n - 1];
        }
        let i = match self.mass.binary_search_by(|p| p.partial_cmp(&xi).unwrap()) {
            Ok(i) => return self.x[i],
            Err(i) => i - 1,
        };
        let t = (xi - self.mass[i]) / (self.mass[i + 1] - self.mass[i]);
        self.x[i] + t * (self.x[i + 1] - self.x[i])
    }
}

/// Exact quadratic Wasserstein distance between two piecewise constant
/// densities of equal mass: the L2 distance of their inverse distribution
/// functions, integrated segment by segment on the merged mass breakpoints
/// (the difference is affine there, so the integral is closed-form).
pub fn wasserstein_exact(d0: &DensityPc, d1: &DensityPc) -> Result<f64, FunctionalError> {
    let m0 = d0.mass();
    let m1 = d1.mass();
    if (m0 - m1).abs() > 1e-12 * m0.abs().max(m1.abs()) {
        return Err(FunctionalError::MassMismatch { m0, m1 });
    }
    let inv0 = InverseCdf::of(d0);
    let inv1 = InverseCdf::of(d1);
    let mut knots: Vec<f64> = inv0.mass.iter().chain(inv1.mass.iter()).copied().collect();
    knots.sort_by(|a, b| a.partial_cmp(b).unwrap());
    knots.dedup();
    let mut acc = KahanSum::new();
    let mut prev = knots[0];
    let mut d_prev = inv0.eval(prev) - inv1.eval(prev);
    for &next in &knots[1..] {
        if next <= prev {
            continue;
        }
        let d_next = inv0.eval(next) - inv1.eval(next);
        let w = next - prev;
        acc.add(w / 3.0 * (d_prev * d_prev + d_prev * d_next + d_next * d_next));
        prev = next;
        d_prev = d_next;
    }
    Ok(acc.value().max(0.0).sqrt())
}
