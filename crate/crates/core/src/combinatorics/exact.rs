//! Arbitrary-precision twins of the floating-point weight tables.
//!
//! These are verification oracles: they re-derive every weight as an exact
//! ratio of big-integer binomial coefficients, independently of the log-space
//! path. Intended for tests at `n + m <= 64`; not part of the runtime
//! pipeline.

use std::collections::BTreeMap;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Zero};

/// Exact binomial coefficient `C(b, a)`; zero when `a > b`.
pub fn binom(b: u64, a: u64) -> BigInt {
    if a > b {
        return BigInt::zero();
    }
    let a = a.min(b - a);
    let mut result = BigInt::one();
    for j in 1..=a {
        result = result * BigInt::from(b - a + j) / BigInt::from(j);
    }
    result
}

/// Exact rational weights `w_1..w_{n+1}` of the batch conformal p-value.
pub fn rank_weights(n: usize, m: usize, eta: usize) -> Vec<BigRational> {
    assert!(n >= 1 && m >= 1 && (1..=m).contains(&eta));
    let denom = binom((n + m) as u64, m as u64);
    (1..=(n + 1))
        .map(|i| {
            let numer = binom((i + eta - 2) as u64, (eta - 1) as u64)
                * binom((n + m + 1 - i - eta) as u64, (m - eta) as u64);
            BigRational::new(numer, denom.clone())
        })
        .collect()
}

/// Exact rational two-quantile weights, keyed by the offset `t`.
pub fn two_quantile_weights(
    n: usize,
    m: usize,
    eta1: usize,
    eta2: usize,
    eta_tilde1: usize,
    eta_tilde2: usize,
) -> BTreeMap<i64, BigRational> {
    assert!((1..eta2).contains(&eta1) && eta2 <= m);
    assert!(eta_tilde1 <= eta_tilde2 && eta_tilde2 <= n);
    let denom = binom((n + m) as u64, m as u64);
    let mut weights = BTreeMap::new();
    for r1 in eta1..=(n + eta1) {
        for r2 in (r1 + eta2 - eta1)..=(n + eta2) {
            let numer = binom((r1 - 1) as u64, (eta1 - 1) as u64)
                * binom((r2 - r1 - 1) as u64, (eta2 - eta1 - 1) as u64)
                * binom((n + m - r2) as u64, (m - eta2) as u64);
            if numer.is_zero() {
                continue;
            }
            let t1 = r1 as i64 - eta1 as i64 - eta_tilde1 as i64 + 1;
            let t2 = r2 as i64 - eta2 as i64 - eta_tilde2 as i64 + 1;
            let w = BigRational::new(numer, denom.clone());
            *weights
                .entry(t1.max(t2))
                .or_insert_with(BigRational::zero) += w;
        }
    }
    weights
}

/// Exact batch conformal p-value for a combined rank offset
/// `r = R_eta - eta + 1` in `[1..n+1]`: the tail mass `sum_{i >= r} w_i`.
pub fn batch_pvalue_at_rank(weights: &[BigRational], r: usize) -> BigRational {
    weights[r - 1..].iter().sum()
}
