//! Compensated (Neumaier) summation.
//!
//! The functionals and norms below sum many terms of wildly different
//! magnitude (weights scale like K, their differences like 1/K), so plain
//! accumulation loses digits that the estimate checks need back.

/// Running compensated sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, value: f64) {
        let t = self.sum + value;
        if self.sum.abs() >= value.abs() {
            self.comp += (self.sum - t) + value;
        } else {
            self.comp += (value - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Compensated sum of an iterator of terms.
pub fn sum<I: IntoIterator<Item = f64>>(terms: I) -> f64 {
    let mut acc = KahanSum::new();
    for t in terms {
        acc.add(t);
    }
    acc.value()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_cancellation() {
        // 1 + 1e-16 repeated: naive summation stays at 1, compensation keeps the tail.
        let mut s = KahanSum::new();
        s.add(1.0);
        for _ in 0..1000 {
            s.add(1e-16);
        }
        let err = (s.value() - (1.0 + 1000.0 * 1e-16)).abs();
        assert!(err < 1e-18, "compensated sum off by {err}");
    }

    #[test]
    fn matches_exact_on_mixed_signs() {
        let terms = [1e10, 3.25, -1e10, 0.125];
        assert_eq!(sum(terms.iter().copied()), 3.375);
    }
}
