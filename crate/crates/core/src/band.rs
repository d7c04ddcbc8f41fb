//! Banded linear algebra: LU factorization with partial pivoting.
//!
//! The Newton systems of both schemes are pentadiagonal (the discrete Fisher
//! information couples each node to its four neighbours), so a dense solve
//! would waste O(K^3) work per iteration. Storage follows the usual band
//! layout: row `i` keeps columns `i-kl ..= i+kl+ku`, the extra `kl` upper
//! slots hold fill-in produced by row swaps.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BandError {
    #[error("matrix is singular to working precision at column {col}")]
    Singular { col: usize },
}

/// Band matrix with `kl` sub- and `ku` super-diagonals.
#[derive(Debug, Clone)]
pub struct BandMatrix {
    n: usize,
    kl: usize,
    ku: usize,
    width: usize,
    rows: Vec<f64>,
}

impl BandMatrix {
    pub fn new(n: usize, kl: usize, ku: usize) -> Self {
        assert!(n > 0);
        let width = 2 * kl + ku + 1;
        Self {
            n,
            kl,
            ku,
            width,
            rows: vec![0.0; n * width],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    fn slot(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < self.n && j < self.n);
        let off = j as isize - i as isize + self.kl as isize;
        debug_assert!(off >= 0 && (off as usize) < self.width, "({i},{j}) outside band");
        i * self.width + off as usize
    }

    /// True if `(i, j)` lies in the declared band (not counting pivot fill).
    pub fn in_band(&self, i: usize, j: usize) -> bool {
        let d = j as isize - i as isize;
        -(self.kl as isize) <= d && d <= self.ku as isize
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if self.in_band(i, j) {
            self.rows[self.slot(i, j)]
        } else {
            0.0
        }
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        assert!(self.in_band(i, j), "({i},{j}) outside band");
        let s = self.slot(i, j);
        self.rows[s] = v;
    }

    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        assert!(self.in_band(i, j), "({i},{j}) outside band");
        let s = self.slot(i, j);
        self.rows[s] += v;
    }

    /// Multiply every stored entry by `factor`.
    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.rows {
            *v *= factor;
        }
    }

    /// `A x` using only the declared band. Meaningful before factorization.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            let lo = i.saturating_sub(self.kl);
            let hi = (i + self.ku).min(self.n - 1);
            let mut acc = 0.0;
            for j in lo..=hi {
                acc += self.rows[self.slot(i, j)] * x[j];
            }
            y[i] = acc;
        }
        y
    }

    /// In-place LU with partial pivoting. Row swaps may fill the extra
    /// `kl` super-diagonal slots; multipliers land in the sub-diagonal slots.
    pub fn factor(mut self) -> Result<BandLu, BandError> {
        let n = self.n;
        let kl = self.kl;
        let ku = self.ku;
        let mut piv = vec![0usize; n];
        for j in 0..n {
            let last = (j + kl).min(n - 1);
            let mut p = j;
            let mut best = self.rows[self.slot(j, j)].abs();
            for i in (j + 1)..=last {
                let v = self.rows[self.slot(i, j)].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if best == 0.0 || !best.is_finite() {
                return Err(BandError::Singular { col: j });
            }
            piv[j] = p;
            let hi = (j + kl + ku).min(n - 1);
            if p != j {
                for c in j..=hi {
                    let a = self.slot(j, c);
                    let b = self.slot(p, c);
                    self.rows.swap(a, b);
                }
            }
            let pivot = self.rows[self.slot(j, j)];
            for i in (j + 1)..=last {
                let m = self.rows[self.slot(i, j)] / pivot;
                let s = self.slot(i, j);
                self.rows[s] = m;
                if m != 0.0 {
                    for c in (j + 1)..=hi {
                        let from = self.slot(j, c);
                        let to = self.slot(i, c);
                        self.rows[to] -= m * self.rows[from];
                    }
                }
            }
        }
        Ok(BandLu { mat: self, piv })
    }
}

/// Factored band matrix; solves by forward elimination plus back substitution.
#[derive(Debug, Clone)]
pub struct BandLu {
    mat: BandMatrix,
    piv: Vec<usize>,
}

impl BandLu {
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.mat.n;
        let kl = self.mat.kl;
        let ku = self.mat.ku;
        assert_eq!(b.len(), n);
        for j in 0..n {
            let p = self.piv[j];
            if p != j {
                b.swap(j, p);
            }
            let last = (j + kl).min(n - 1);
            for i in (j + 1)..=last {
                b[i] -= self.mat.rows[self.mat.slot(i, j)] * b[j];
            }
        }
        for i in (0..n).rev() {
            let hi = (i + kl + ku).min(n - 1);
            let mut acc = b[i];
            for c in (i + 1)..=hi {
                acc -= self.mat.rows[self.mat.slot(i, c)] * b[c];
            }
            b[i] = acc / self.mat.rows[self.mat.slot(i, i)];
        }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }
}
