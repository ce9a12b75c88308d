//! Compensated (Neumaier) summation.
//!
//! Pair sums in the AUC estimators and the Monte Carlo oracle accumulate
//! millions of terms; compensated accumulation keeps them reproducible to
//! the tolerances the test suite pins (1e-12 against brute-force oracles).

use crate::scalar::Scalar;

/// Running compensated sum.
#[derive(Debug, Clone, Copy)]
pub struct KahanSum<F> {
    sum: F,
    compensation: F,
}

impl<F: Scalar> Default for KahanSum<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> KahanSum<F> {
    pub fn new() -> Self {
        Self { sum: F::zero(), compensation: F::zero() }
    }

    #[inline]
    pub fn add(&mut self, value: F) {
        let t = self.sum + value;
        // Neumaier's branch keeps the correction valid when |value| > |sum|.
        if self.sum.abs() >= value.abs() {
            self.compensation += (self.sum - t) + value;
        } else {
            self.compensation += (value - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn total(&self) -> F {
        self.sum + self.compensation
    }
}

/// Compensated sum of an iterator.
pub fn kahan_sum<F: Scalar, I: IntoIterator<Item = F>>(values: I) -> F {
    let mut acc = KahanSum::new();
    for v in values {
        acc.add(v);
    }
    acc.total()
}
