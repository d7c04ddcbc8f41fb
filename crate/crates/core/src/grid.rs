//! Mass grids, monotone node states, and density reconstructions.
//!
//! A state is the vector of interior node positions `a < x_1 < ... < x_{K-1} < b`
//! of the inverse distribution function sampled on a grid of the mass space
//! `[0, M]`. Cell `c` (for `c = 0..K`) carries mass `delta_c` and has weight
//! `z_c = delta_c / (x_{c+1} - x_c)`, the piecewise constant density value.
//! Everything downstream (functionals, solver, analysis) works on these
//! objects, so the constructors here enforce the invariants once and for all:
//! strictly increasing mass grids, strictly monotone states with a degeneracy
//! floor, and exact mass bookkeeping.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kahan::KahanSum;

/// Gap floor: states with a node gap at or below `1e-14 * (b - a)` are
/// rejected as degenerate rather than fed to the solver.
pub const GAP_FLOOR_REL: f64 = 1e-14;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("domain requires a < b and positive mass, got a={a}, b={b}, mass={mass}")]
    InvalidDomain { a: f64, b: f64, mass: f64 },
    #[error("mass grid needs at least 2 cells, got {k}")]
    TooFewCells { k: usize },
    #[error("mass grid not strictly increasing at index {index}")]
    GridNotIncreasing { index: usize },
    #[error("state violates monotonicity at node gap {index} (gap {gap:.3e} <= floor {floor:.3e})")]
    Degenerate { index: usize, gap: f64, floor: f64 },
    #[error("state has {nodes} interior nodes but the grid has {cells} cells (needs cells - 1)")]
    DimensionMismatch { cells: usize, nodes: usize },
    #[error("cdf values not strictly increasing at node {index}")]
    CdfNotIncreasing { index: usize },
    #[error("mass coordinate {value} outside [0, {mass}]")]
    OutOfMassRange { value: f64, mass: f64 },
}

/// Physical interval `[a, b]` together with the total mass it carries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    a: f64,
    b: f64,
    mass: f64,
}

impl Domain {
    pub fn new(a: f64, b: f64, mass: f64) -> Result<Self, GridError> {
        if !(a.is_finite() && b.is_finite() && mass.is_finite()) || a >= b || mass <= 0.0 {
            return Err(GridError::InvalidDomain { a, b, mass });
        }
        Ok(Self { a, b, mass })
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    pub fn length(&self) -> f64 {
        self.b - self.a
    }

    pub fn mass(&self) -> f64 {
        self.mass
    }
}

/// Partition `0 = xi_0 < xi_1 < ... < xi_K = M` of mass space.
#[derive(Debug, Clone, PartialEq)]
pub struct MassGrid {
    xi: Vec<f64>,
    uniform: bool,
}

impl MassGrid {
    /// Equidistant partition into `k` cells of mass `M / k` each.
    pub fn uniform(k: usize, mass: f64) -> Result<Self, GridError> {
        if k < 2 {
            return Err(GridError::TooFewCells { k });
        }
        if !(mass.is_finite()) || mass <= 0.0 {
            return Err(GridError::InvalidDomain { a: 0.0, b: 1.0, mass });
        }
        // xi_K = mass exactly because k/k rounds to 1.0.
        let xi = (0..=k).map(|i| mass * (i as f64 / k as f64)).collect();
        Ok(Self { xi, uniform: true })
    }

    /// Grid adapted to an initial datum: `xi_k = cdf(x_k)` for given physical
    /// nodes. The cdf must be the cumulative mass function of the datum with
    /// `cdf(x_0) = 0` and `cdf(x_K) = M` up to quadrature error; endpoints are
    /// pinned exactly.
    pub fn from_cdf(cdf: impl Fn(f64) -> f64, x_nodes: &[f64], mass: f64) -> Result<Self, GridError> {
        let k = x_nodes.len().saturating_sub(1);
        if k < 2 {
            return Err(GridError::TooFewCells { k });
        }
        let mut xi: Vec<f64> = x_nodes.iter().map(|&x| cdf(x)).collect();
        xi[0] = 0.0;
        xi[k] = mass;
        for i in 0..k {
            if !(xi[i + 1] > xi[i]) {
                return Err(GridError::CdfNotIncreasing { index: i + 1 });
            }
        }
        Ok(Self { xi, uniform: false })
    }

    /// Rebuild from raw node values (deserialization path).
    pub fn from_nodes(xi: Vec<f64>, uniform: bool) -> Result<Self, GridError> {
        if xi.len() < 3 {
            return Err(GridError::TooFewCells { k: xi.len().saturating_sub(1) });
        }
        for i in 0..xi.len() - 1 {
            if !(xi[i + 1] > xi[i]) {
                return Err(GridError::GridNotIncreasing { index: i + 1 });
            }
        }
        Ok(Self { xi, uniform })
    }

    pub fn num_cells(&self) -> usize {
        self.xi.len() - 1
    }

    pub fn mass(&self) -> f64 {
        *self.xi.last().unwrap()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.xi
    }

    pub fn node(&self, k: usize) -> f64 {
        self.xi[k]
    }

    /// Mass of cell `c` (between nodes `c` and `c+1`).
    pub fn delta_cell(&self, c: usize) -> f64 {
        self.xi[c + 1] - self.xi[c]
    }

    /// Dual mass around interior node `k` in `1..K`: half the span of the
    /// two adjacent cells. This is the weight of the discrete metric.
    pub fn delta_node(&self, k: usize) -> f64 {
        0.5 * (self.xi[k + 1] - self.xi[k - 1])
    }

    /// Mean cell mass `M / K`; on uniform grids this is the cell mass.
    pub fn delta_mean(&self) -> f64 {
        self.mass() / self.num_cells() as f64
    }

    pub fn is_uniform(&self) -> bool {
        self.uniform
    }

    pub fn min_cell(&self) -> f64 {
        (0..self.num_cells())
            .map(|c| self.delta_cell(c))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Monotone vector of interior node positions.
#[derive(Debug, Clone, PartialEq)]
pub struct LagrangianState {
    domain: Domain,
    interior: Vec<f64>,
}

impl LagrangianState {
    pub fn new(domain: Domain, interior: Vec<f64>) -> Result<Self, GridError> {
        let floor = GAP_FLOOR_REL * domain.length();
        let k = interior.len() + 1;
        for i in 0..=k - 1 {
            let lo = if i == 0 { domain.a() } else { interior[i - 1] };
            let hi = if i == k - 1 { domain.b() } else { interior[i] };
            let gap = hi - lo;
            if !(gap > floor) {
                return Err(GridError::Degenerate { index: i, gap, floor });
            }
        }
        Ok(Self { domain, interior })
    }

    /// State with constant density `M / (b - a)` on the given grid.
    pub fn flat(domain: Domain, grid: &MassGrid) -> Self {
        let scale = domain.length() / grid.mass();
        let interior = (1..grid.num_cells())
            .map(|k| domain.a() + scale * grid.node(k))
            .collect();
        Self { domain, interior }
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn interior(&self) -> &[f64] {
        &self.interior
    }

    pub fn num_interior(&self) -> usize {
        self.interior.len()
    }

    /// Node position including the pinned boundary nodes: `node(0) = a`,
    /// `node(K) = b`.
    pub fn node(&self, k: usize) -> f64 {
        if k == 0 {
            self.domain.a()
        } else if k == self.interior.len() + 1 {
            self.domain.b()
        } else {
            self.interior[k - 1]
        }
    }

    pub fn matches(&self, grid: &MassGrid) -> Result<(), GridError> {
        if self.interior.len() + 1 != grid.num_cells() {
            return Err(GridError::DimensionMismatch {
                cells: grid.num_cells(),
                nodes: self.interior.len(),
            });
        }
        Ok(())
    }
}

/// Per-cell density weights `z_c = delta_c / (x_{c+1} - x_c)`.
///
/// The stored vector has length exactly `K`; the scheme's mirror convention
/// `z_{-1} = z_0`, `z_K = z_{K-1}` is exposed through [`Weights::ghost`]
/// instead of padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    z: Vec<f64>,
}

impl Weights {
    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    pub fn cell(&self, c: usize) -> f64 {
        self.z[c]
    }

    pub fn values(&self) -> &[f64] {
        &self.z
    }

    /// Weight with the mirror convention applied at both ends.
    pub fn ghost(&self, c: isize) -> f64 {
        if c < 0 {
            self.z[0]
        } else if c as usize >= self.z.len() {
            self.z[self.z.len() - 1]
        } else {
            self.z[c as usize]
        }
    }

    pub fn min(&self) -> f64 {
        self.z.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.z.iter().copied().fold(0.0, f64::max)
    }
}

/// Weight vector of a state on a grid.
pub fn weights(grid: &MassGrid, state: &LagrangianState) -> Result<Weights, GridError> {
    state.matches(grid)?;
    let k = grid.num_cells();
    let z = (0..k)
        .map(|c| grid.delta_cell(c) / (state.node(c + 1) - state.node(c)))
        .collect();
    Ok(Weights { z })
}

/// Piecewise constant function on a breakpoint partition (density values per cell).
#[derive(Debug, Clone, PartialEq)]
pub struct DensityPc {
    breaks: Vec<f64>,
    values: Vec<f64>,
}

impl DensityPc {
    /// Assemble from raw parts: `breaks` strictly increasing, one value per
    /// cell (`breaks.len() == values.len() + 1`).
    pub fn from_parts(breaks: Vec<f64>, values: Vec<f64>) -> Self {
        assert_eq!(breaks.len(), values.len() + 1);
        debug_assert!(breaks.windows(2).all(|w| w[1] > w[0]));
        Self { breaks, values }
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breaks
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn eval(&self, x: f64) -> f64 {
        let n = self.values.len();
        let i = match self.breaks.binary_search_by(|p| p.partial_cmp(&x).unwrap()) {
            Ok(i) => i.min(n - 1),
            Err(0) => 0,
            Err(i) => (i - 1).min(n - 1),
        };
        self.values[i]
    }

    /// Total mass, exact cell sum.
    pub fn mass(&self) -> f64 {
        let mut acc = KahanSum::new();
        for c in 0..self.values.len() {
            acc.add(self.values[c] * (self.breaks[c + 1] - self.breaks[c]));
        }
        acc.value()
    }

    /// Cumulative mass up to `x` (piecewise linear, strictly increasing).
    pub fn cdf(&self, x: f64) -> f64 {
        let mut acc = KahanSum::new();
        for c in 0..self.values.len() {
            let lo = self.breaks[c];
            let hi = self.breaks[c + 1];
            if x <= lo {
                break;
            }
            acc.add(self.values[c] * (x.min(hi) - lo));
        }
        acc.value()
    }
}

/// Piecewise linear function given by breakpoints and nodal values.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityPl {
    breaks: Vec<f64>,
    values: Vec<f64>,
}

impl DensityPl {
    pub fn new(breaks: Vec<f64>, values: Vec<f64>) -> Self {
        assert_eq!(breaks.len(), values.len());
        assert!(breaks.len() >= 2);
        Self { breaks, values }
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breaks
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn piece(&self, x: f64) -> usize {
        let n = self.breaks.len();
        match self.breaks.binary_search_by(|p| p.partial_cmp(&x).unwrap()) {
            Ok(i) => i.min(n - 2),
            Err(0) => 0,
            Err(i) => (i - 1).min(n - 2),
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let i = self.piece(x);
        let (x0, x1) = (self.breaks[i], self.breaks[i + 1]);
        let (v0, v1) = (self.values[i], self.values[i + 1]);
        v0 + (v1 - v0) * (x - x0) / (x1 - x0)
    }

    /// One-sided slope of the piece containing `x` (right piece at breakpoints).
    pub fn slope_at(&self, x: f64) -> f64 {
        let i = self.piece(x);
        self.slope(i)
    }

    pub fn num_pieces(&self) -> usize {
        self.breaks.len() - 1
    }

    pub fn slope(&self, piece: usize) -> f64 {
        (self.values[piece + 1] - self.values[piece]) / (self.breaks[piece + 1] - self.breaks[piece])
    }

    /// Exact integral (trapezoid per affine piece).
    pub fn mass(&self) -> f64 {
        let mut acc = KahanSum::new();
        for i in 0..self.num_pieces() {
            let w = self.breaks[i + 1] - self.breaks[i];
            acc.add(0.5 * w * (self.values[i] + self.values[i + 1]));
        }
        acc.value()
    }
}

/// Piecewise constant density carried by a state: value `z_c` between
/// consecutive nodes.
pub fn density_pc(grid: &MassGrid, state: &LagrangianState) -> Result<DensityPc, GridError> {
    let z = weights(grid, state)?;
    let k = grid.num_cells();
    let breaks = (0..=k).map(|i| state.node(i)).collect();
    Ok(DensityPc { breaks, values: z.z })
}

/// Piecewise affine density on the doubled grid: cell midpoints keep their
/// weight, nodes average the neighbouring weights, boundary segments stay flat.
pub fn density_pl(grid: &MassGrid, state: &LagrangianState) -> Result<DensityPl, GridError> {
    let z = weights(grid, state)?;
    let k = grid.num_cells();
    let mut breaks = Vec::with_capacity(2 * k + 1);
    let mut values = Vec::with_capacity(2 * k + 1);
    breaks.push(state.node(0));
    values.push(z.cell(0));
    for c in 0..k {
        breaks.push(0.5 * (state.node(c) + state.node(c + 1)));
        values.push(z.cell(c));
        if c + 1 < k {
            breaks.push(state.node(c + 1));
            values.push(0.5 * (z.cell(c) + z.cell(c + 1)));
        }
    }
    breaks.push(state.node(k));
    values.push(z.cell(k - 1));
    Ok(DensityPl { breaks, values })
}

/// Piecewise affine density interpolating the averaged weights at the nodes
/// themselves (single grid): the comparison interpolant of the convergence
/// experiments.
pub fn density_nodal(grid: &MassGrid, state: &LagrangianState) -> Result<DensityPl, GridError> {
    let z = weights(grid, state)?;
    let k = grid.num_cells();
    let mut breaks = Vec::with_capacity(k + 1);
    let mut values = Vec::with_capacity(k + 1);
    for i in 0..=k {
        breaks.push(state.node(i));
        let v = if i == 0 {
            z.cell(0)
        } else if i == k {
            z.cell(k - 1)
        } else {
            0.5 * (z.cell(i - 1) + z.cell(i))
        };
        values.push(v);
    }
    Ok(DensityPl { breaks, values })
}

/// Evaluate the piecewise linear Lagrangian map `X` at a mass coordinate.
pub fn eval_lagrangian(grid: &MassGrid, state: &LagrangianState, xi: f64) -> Result<f64, GridError> {
    state.matches(grid)?;
    let m = grid.mass();
    if !((-1e-12 * m..=m * (1.0 + 1e-12)).contains(&xi)) {
        return Err(GridError::OutOfMassRange { value: xi, mass: m });
    }
    let xi = xi.clamp(0.0, m);
    let nodes = grid.nodes();
    let i = match nodes.binary_search_by(|p| p.partial_cmp(&xi).unwrap()) {
        Ok(i) => return Ok(state.node(i)),
        Err(0) => 0,
        Err(i) => (i - 1).min(nodes.len() - 2),
    };
    let t = (xi - nodes[i]) / (nodes[i + 1] - nodes[i]);
    Ok(state.node(i) + t * (state.node(i + 1) - state.node(i)))
}
