//! Helpers shared by the integration test binaries.
#![allow(dead_code)]

use dlss::{Domain, LagrangianState, MassGrid};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Random domain, uniform mass grid with `k` cells, and a strictly monotone
/// state on it whose cell widths stay a bounded fraction of the domain.
pub fn random_uniform_state(rng: &mut ChaCha8Rng, k: usize) -> (MassGrid, LagrangianState) {
    let a = rng.random_range(-1.0..1.0);
    let length = rng.random_range(0.5..2.0);
    let mass = rng.random_range(0.5..2.0);
    let domain = Domain::new(a, a + length, mass).unwrap();
    let grid = MassGrid::uniform(k, mass).unwrap();
    let state = random_state_on(rng, domain, k);
    (grid, state)
}

/// A second state on the same domain/grid (for metric comparisons).
pub fn random_state_on(rng: &mut ChaCha8Rng, domain: Domain, k: usize) -> LagrangianState {
    let length = domain.length();
    let mut gaps: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = gaps.iter().sum();
    for g in &mut gaps {
        *g *= length / total;
    }
    let mut interior = Vec::with_capacity(k - 1);
    let mut x = domain.a();
    for g in gaps.iter().take(k - 1) {
        x += g;
        interior.push(x);
    }
    LagrangianState::new(domain, interior).unwrap()
}
