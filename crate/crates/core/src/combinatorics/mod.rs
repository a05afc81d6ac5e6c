//! Binomial-coefficient weight tables for batch conformal p-values.
//!
//! The weights are ratios of binomial coefficients evaluated in natural-log
//! space and exponentiated per term, which keeps them finite and accurate for
//! reference sizes in the thousands. [`exact`] holds a parallel
//! arbitrary-precision implementation used as a ground-truth oracle in tests.

pub mod exact;

use crate::error::{Error, Result};

/// Natural log of the binomial coefficient `C(b, a)`.
///
/// Evaluated as a Kahan-compensated sum of `ln((b - a' + j) / j)` terms with
/// `a' = min(a, b - a)`; every term is at least `ln 2`, so no cancellation
/// occurs and the relative error stays below 1e-12 for `b <= 10^6`.
pub fn log_binom(b: u64, a: u64) -> Result<f64> {
    if a > b {
        return Err(Error::Domain(format!("log_binom: a = {a} exceeds b = {b}")));
    }
    let a = a.min(b - a);
    let c = b - a;
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for j in 1..=a {
        let term = (((c + j) as f64) / (j as f64)).ln();
        let y = term - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    Ok(sum)
}

/// The weights `w_1..w_{n+1}` of the batch conformal p-value for a given
/// reference size `n`, comparison size `m`, and comparison rank `eta`.
///
/// `w_i` is the probability that the `eta`-th smallest of `m` exchangeable
/// test scores lands just above the `(i-1)`-th reference order statistic;
/// equivalently the pmf of `R_eta - eta + 1` where `R_eta` is the combined
/// rank of the `eta`-th smallest comparison score.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightTable {
    n: usize,
    m: usize,
    eta: usize,
    /// `weights[i - 1]` holds `w_i` for `i` in `[1..n+1]`.
    weights: Vec<f64>,
    /// `suffix[i - 1]` holds `w_i + w_{i+1} + ... + w_{n+1}`, built
    /// right-to-left so that `suffix[i-1] - suffix[i] == weights[i-1]`
    /// bit-exactly.
    suffix: Vec<f64>,
}

impl WeightTable {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn eta(&self) -> usize {
        self.eta
    }

    /// `w_i` for `i` in `[1..n+1]`.
    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i - 1]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Tail sum `w_i + ... + w_{n+1}`; `i` past `n+1` yields 0.
    pub fn tail_sum(&self, i: usize) -> f64 {
        if i <= 1 {
            self.suffix[0]
        } else if i > self.n + 1 {
            0.0
        } else {
            self.suffix[i - 1]
        }
    }

    /// Total mass, summed in ascending magnitude order.
    pub fn total(&self) -> f64 {
        let mut sorted = self.weights.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("weights are finite"));
        sorted.iter().sum()
    }
}

/// Builds the [`WeightTable`] for `(n, m, eta)`.
///
/// Requires `n >= 1`, `m >= 1`, and `1 <= eta <= m`.
pub fn rank_weights(n: usize, m: usize, eta: usize) -> Result<WeightTable> {
    if n < 1 || m < 1 {
        return Err(Error::Domain(format!(
            "rank_weights: need n >= 1 and m >= 1, got n = {n}, m = {m}"
        )));
    }
    if eta < 1 || eta > m {
        return Err(Error::Domain(format!(
            "rank_weights: eta = {eta} outside [1..{m}]"
        )));
    }
    let log_denom = log_binom((n + m) as u64, m as u64)?;
    let mut weights = Vec::with_capacity(n + 1);
    for i in 1..=(n + 1) {
        let lw = log_binom((i + eta - 2) as u64, (eta - 1) as u64)?
            + log_binom((n + m + 1 - i - eta) as u64, (m - eta) as u64)?
            - log_denom;
        weights.push(lw.exp());
    }
    let mut suffix = vec![0.0; n + 1];
    suffix[n] = weights[n];
    for i in (0..n).rev() {
        suffix[i] = weights[i] + suffix[i + 1];
    }
    Ok(WeightTable {
        n,
        m,
        eta,
        weights,
        suffix,
    })
}

/// Weights `w_t` of the two-quantile p-value: the pmf of
/// `T = max(R_{eta1} - eta1 - etaTilde1 + 1, R_{eta2} - eta2 - etaTilde2 + 1)`
/// over the uniform distribution of the ordered comparison ranks.
///
/// The table spans the full support `t` in `[1 - etaTilde1 ..= n + 1 - etaTilde1]`,
/// so the weights always sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoQuantileWeightTable {
    n: usize,
    m: usize,
    eta1: usize,
    eta2: usize,
    eta_tilde1: usize,
    eta_tilde2: usize,
    t_min: i64,
    /// `weights[k]` holds `w_{t_min + k}`.
    weights: Vec<f64>,
    suffix: Vec<f64>,
}

impl TwoQuantileWeightTable {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn eta1(&self) -> usize {
        self.eta1
    }

    pub fn eta2(&self) -> usize {
        self.eta2
    }

    pub fn eta_tilde1(&self) -> usize {
        self.eta_tilde1
    }

    pub fn eta_tilde2(&self) -> usize {
        self.eta_tilde2
    }

    /// Smallest offset in the support.
    pub fn t_min(&self) -> i64 {
        self.t_min
    }

    /// Largest offset in the support.
    pub fn t_max(&self) -> i64 {
        self.t_min + self.weights.len() as i64 - 1
    }

    /// `w_t`; offsets outside the support carry zero mass.
    pub fn weight(&self, t: i64) -> f64 {
        if t < self.t_min || t > self.t_max() {
            0.0
        } else {
            self.weights[(t - self.t_min) as usize]
        }
    }

    /// Iterates `(t, w_t)` over the support.
    pub fn iter(&self) -> impl Iterator<Item = (i64, f64)> + '_ {
        self.weights
            .iter()
            .enumerate()
            .map(|(k, w)| (self.t_min + k as i64, *w))
    }

    /// Tail sum `sum_{t' >= t} w_{t'}`.
    pub fn tail_sum(&self, t: i64) -> f64 {
        if t <= self.t_min {
            self.suffix[0]
        } else if t > self.t_max() {
            0.0
        } else {
            self.suffix[(t - self.t_min) as usize]
        }
    }

    /// Total mass, summed in ascending magnitude order.
    pub fn total(&self) -> f64 {
        let mut sorted = self.weights.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("weights are finite"));
        sorted.iter().sum()
    }
}

/// Builds the [`TwoQuantileWeightTable`] for comparison ranks
/// `eta1 < eta2` and scaled reference ranks `etaTilde1 <= etaTilde2`.
///
/// Each `w_t` is a double sum over pairs `(t_1, t_2)` with
/// `max(t_1, t_2) = t` of the three-binomial joint probability of
/// `(R_{eta1}, R_{eta2}) = (eta1 + etaTilde1 + t_1 - 1, eta2 + etaTilde2 + t_2 - 1)`,
/// restricted to rank pairs inside `[1..n+m]`.
pub fn two_quantile_weights(
    n: usize,
    m: usize,
    eta1: usize,
    eta2: usize,
    eta_tilde1: usize,
    eta_tilde2: usize,
) -> Result<TwoQuantileWeightTable> {
    if n < 1 || m < 1 {
        return Err(Error::Domain(format!(
            "two_quantile_weights: need n >= 1 and m >= 1, got n = {n}, m = {m}"
        )));
    }
    if eta1 < 1 || eta1 >= eta2 || eta2 > m {
        return Err(Error::Domain(format!(
            "two_quantile_weights: need 1 <= eta1 < eta2 <= m, got eta1 = {eta1}, eta2 = {eta2}, m = {m}"
        )));
    }
    if eta_tilde1 > eta_tilde2 || eta_tilde2 > n {
        return Err(Error::Domain(format!(
            "two_quantile_weights: need 0 <= etaTilde1 <= etaTilde2 <= n, got {eta_tilde1}, {eta_tilde2}, n = {n}"
        )));
    }
    let t_min = 1 - eta_tilde1 as i64;
    let t_max = (n + 1) as i64 - eta_tilde1 as i64;
    let mut weights = vec![0.0f64; (t_max - t_min + 1) as usize];
    let log_denom = log_binom((n + m) as u64, m as u64)?;
    // r1 = R_{eta1} needs eta1-1 ranks below it, r2 = R_{eta2} needs
    // eta2-eta1-1 strictly between and m-eta2 above.
    for r1 in eta1..=(n + eta1) {
        let lb1 = log_binom((r1 - 1) as u64, (eta1 - 1) as u64)?;
        let r2_lo = r1 + (eta2 - eta1);
        let r2_hi = n + eta2;
        for r2 in r2_lo..=r2_hi {
            let lw = lb1
                + log_binom((r2 - r1 - 1) as u64, (eta2 - eta1 - 1) as u64)?
                + log_binom((n + m - r2) as u64, (m - eta2) as u64)?
                - log_denom;
            let t1 = r1 as i64 - eta1 as i64 - eta_tilde1 as i64 + 1;
            let t2 = r2 as i64 - eta2 as i64 - eta_tilde2 as i64 + 1;
            let t = t1.max(t2);
            weights[(t - t_min) as usize] += lw.exp();
        }
    }
    let len = weights.len();
    let mut suffix = vec![0.0; len];
    suffix[len - 1] = weights[len - 1];
    for k in (0..len - 1).rev() {
        suffix[k] = weights[k] + suffix[k + 1];
    }
    Ok(TwoQuantileWeightTable {
        n,
        m,
        eta1,
        eta2,
        eta_tilde1,
        eta_tilde2,
        t_min,
        weights,
        suffix,
    })
}

/// Scales a comparison rank `eta` in `[1..m]` to the reference sample of size
/// `n`, rounding `eta * n / m` to the nearest integer with exact halves
/// rounded down.
pub fn scaled_rank(eta: usize, m: usize, n: usize) -> Result<usize> {
    if m < 1 || eta < 1 || eta > m {
        return Err(Error::Domain(format!(
            "scaled_rank: eta = {eta} outside [1..{m}]"
        )));
    }
    let num = eta * n;
    let q = num / m;
    let r = num % m;
    Ok(if 2 * r > m { q + 1 } else { q })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use num_traits::ToPrimitive;
    use proptest::prelude::*;

    #[test]
    fn log_binom_small_case() {
        assert_relative_eq!(log_binom(4, 2).unwrap(), 6.0f64.ln(), max_relative = 1e-14);
    }

    #[test]
    fn log_binom_identity_cases() {
        for n in [0u64, 1, 7, 1000, 123_456] {
            assert_eq!(log_binom(n, 0).unwrap(), 0.0);
            assert_eq!(log_binom(n, n).unwrap(), 0.0);
        }
    }

    #[test]
    fn log_binom_matches_big_integer_oracle() {
        for (b, a) in [(50u64, 25u64), (100, 3), (200, 117), (1000, 500), (1_000_000, 12)] {
            let exact = exact::binom(b, a);
            let expected = exact.to_f64().unwrap().ln();
            assert_relative_eq!(log_binom(b, a).unwrap(), expected, max_relative = 1e-12);
        }
    }

    #[test]
    fn log_binom_is_accurate_at_the_million_scale() {
        // C(10^6, 1000) overflows f64, so take the exact logarithm from the
        // big integer's top bits: ln x = ln(mantissa) + shift * ln 2.
        let (b, a) = (1_000_000u64, 1000u64);
        let exact = exact::binom(b, a);
        let bits = exact.bits();
        let shift = bits.saturating_sub(53);
        let mantissa = (exact >> shift).to_f64().unwrap();
        let expected = mantissa.ln() + shift as f64 * std::f64::consts::LN_2;
        assert_relative_eq!(log_binom(b, a).unwrap(), expected, max_relative = 1e-12);
    }

    #[test]
    fn log_binom_rejects_a_above_b() {
        assert!(log_binom(3, 4).is_err());
    }

    #[test]
    fn rank_weights_single_comparison_point_is_uniform() {
        let table = rank_weights(3, 1, 1).unwrap();
        for i in 1..=4 {
            assert_relative_eq!(table.weight(i), 0.25, max_relative = 1e-13);
        }
    }

    #[test]
    fn rank_weights_eta_one_m_one_uniform_for_all_n() {
        for n in 1..=200 {
            let table = rank_weights(n, 1, 1).unwrap();
            let expected = 1.0 / (n as f64 + 1.0);
            for i in 1..=(n + 1) {
                // Every entry is the same exponential, so uniformity is exact.
                assert_eq!(table.weight(i), table.weight(1));
                assert_relative_eq!(table.weight(i), expected, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn rank_weights_matches_exact_rationals() {
        for (n, m, eta) in [(5usize, 3usize, 2usize), (10, 4, 4), (40, 20, 7), (200, 20, 10)] {
            let table = rank_weights(n, m, eta).unwrap();
            let exact = exact::rank_weights(n, m, eta);
            for i in 1..=(n + 1) {
                let expected = exact[i - 1].to_f64().unwrap();
                assert_relative_eq!(table.weight(i), expected, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn rank_weights_rejects_eta_out_of_range() {
        assert!(rank_weights(5, 3, 0).is_err());
        assert!(rank_weights(5, 3, 4).is_err());
    }

    #[test]
    fn two_quantile_weights_match_exact_rationals() {
        let table = two_quantile_weights(6, 3, 1, 2, 2, 4).unwrap();
        let exact = exact::two_quantile_weights(6, 3, 1, 2, 2, 4);
        for (t, w) in table.iter() {
            let expected = exact.get(&t).map_or(0.0, |r| r.to_f64().unwrap());
            assert_relative_eq!(w, expected, epsilon = 1e-14, max_relative = 1e-12);
        }
        assert_relative_eq!(table.total(), 1.0, max_relative = 1e-12);
    }

    #[test]
    fn two_quantile_rejects_equal_ranks() {
        assert!(two_quantile_weights(6, 3, 2, 2, 2, 4).is_err());
    }

    #[test]
    fn two_quantile_rejects_reversed_scaled_ranks() {
        assert!(two_quantile_weights(6, 3, 1, 2, 4, 2).is_err());
    }

    #[test]
    fn scaled_rank_rounds_half_down() {
        assert_eq!(scaled_rank(1, 2, 3).unwrap(), 1); // round(1.5) = 1
        assert_eq!(scaled_rank(2, 4, 4).unwrap(), 2); // integer product
        assert_eq!(scaled_rank(3, 4, 10).unwrap(), 7); // round(7.5) = 7
        assert_eq!(scaled_rank(2, 3, 5).unwrap(), 3); // round(10/3) = 3
    }

    proptest! {
        #[test]
        fn rank_weight_mass_is_one(n in 1usize..=200, m in 1usize..=20, eta_seed in 0usize..20) {
            let eta = eta_seed % m + 1;
            let table = rank_weights(n, m, eta).unwrap();
            prop_assert!((table.total() - 1.0).abs() <= 1e-12);
            prop_assert!(table.weights().iter().all(|w| *w >= 0.0));
        }

        #[test]
        fn two_quantile_mass_is_one(
            n in 1usize..=200,
            m in 2usize..=20,
            eta_seed in 0usize..20,
            gap_seed in 0usize..20,
        ) {
            let eta1 = eta_seed % (m - 1) + 1;
            let eta2 = eta1 + gap_seed % (m - eta1) + 1;
            let et1 = scaled_rank(eta1, m, n).unwrap();
            let et2 = scaled_rank(eta2, m, n).unwrap();
            let table = two_quantile_weights(n, m, eta1, eta2, et1, et2).unwrap();
            prop_assert!((table.total() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn suffix_step_property(n in 1usize..=80, m in 1usize..=12, eta_seed in 0usize..12) {
            let eta = eta_seed % m + 1;
            let table = rank_weights(n, m, eta).unwrap();
            for i in 1..=(n + 1) {
                // Stepping the rank by one changes the tail by w_i, up to one
                // rounding of the suffix addition; the rational twin carries
                // the exact identity.
                let step = table.tail_sum(i) - table.tail_sum(i + 1);
                prop_assert!((step - table.weight(i)).abs() <= 1e-15);
            }
        }
    }
}
