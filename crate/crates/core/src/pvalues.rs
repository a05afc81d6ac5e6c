//! The p-value constructions: batch conformal, two-quantile, subsampling
//! conformal, randomized permutation, rank-sum, and the two-sample z-test.
//!
//! Orientation is one-sided throughout: score functions are chosen so that
//! larger comparison scores are evidence against the null, and two-sided
//! behavior is obtained through score design rather than p-value doubling.
//! Every randomized construction takes an explicit seed and is deterministic
//! given it.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::ser::SerializeSeq;
use serde::{Deserialize, Serialize, Serializer};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::combinatorics::{
    rank_weights, scaled_rank, two_quantile_weights, TwoQuantileWeightTable, WeightTable,
};
use crate::error::{Error, Result};

/// Which construction produced a p-value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    BatchConformal,
    MultiQuantile,
    Subsampling,
    Partitioned,
    Permutation,
    RankSum,
    ZTest,
    TTest,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Method::BatchConformal => "batch",
            Method::MultiQuantile => "multiquantile",
            Method::Subsampling => "subsampling",
            Method::Partitioned => "partitioned",
            Method::Permutation => "permutation",
            Method::RankSum => "ranksum",
            Method::ZTest => "ztest",
            Method::TTest => "ttest",
        };
        f.write_str(name)
    }
}

/// The comparison rank(s) a p-value was computed at, when applicable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EtaUsed {
    None,
    Rank(usize),
    RankPair(usize, usize),
}

impl Serialize for EtaUsed {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            EtaUsed::None => serializer.serialize_none(),
            EtaUsed::Rank(r) => serializer.serialize_u64(*r as u64),
            EtaUsed::RankPair(r1, r2) => {
                let mut seq = serializer.serialize_seq(Some(2))?;
                seq.serialize_element(r1)?;
                seq.serialize_element(r2)?;
                seq.end()
            }
        }
    }
}

/// One computed p-value, with the statistic it was based on.
#[derive(Debug, Clone, Serialize)]
pub struct PValueRecord {
    pub group_id: String,
    pub method: Method,
    pub eta_used: EtaUsed,
    pub statistic: f64,
    pub p: f64,
}

fn check_sorted(scores: &[f64], what: &str) -> Result<()> {
    if scores.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidInput(format!("{what} must be sorted ascending")));
    }
    Ok(())
}

fn check_distinct(ref_scores: &[f64], cmp_scores: &[f64]) -> Result<()> {
    let mut all: Vec<f64> = ref_scores.iter().chain(cmp_scores).copied().collect();
    if all.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidInput("scores contain NaN".into()));
    }
    all.sort_unstable_by(f64::total_cmp);
    if all.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidInput(
            "scores are not all distinct; apply a tie-breaking policy first".into(),
        ));
    }
    Ok(())
}

fn kth_smallest(values: &[f64], k: usize) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    sorted[k - 1]
}

/// Batch conformal p-value: the tail mass of the rank-weight table at the
/// combined rank of the `eta`-th smallest comparison score.
///
/// `ref_scores` must be sorted ascending and all scores distinct across the
/// union. Small p-values indicate that the `eta/m` quantile of the comparison
/// scores is unusually large relative to the reference scores.
pub fn batch_conformal_pvalue(
    ref_scores: &[f64],
    cmp_scores: &[f64],
    eta: usize,
) -> Result<PValueRecord> {
    let table = rank_weights(ref_scores.len(), cmp_scores.len(), eta)?;
    batch_conformal_pvalue_with_table(ref_scores, cmp_scores, &table)
}

/// As [`batch_conformal_pvalue`], with a precomputed [`WeightTable`]; groups
/// of equal size can share tables within a detection run.
pub fn batch_conformal_pvalue_with_table(
    ref_scores: &[f64],
    cmp_scores: &[f64],
    table: &WeightTable,
) -> Result<PValueRecord> {
    if table.n() != ref_scores.len() || table.m() != cmp_scores.len() {
        return Err(Error::Mismatch(format!(
            "weight table built for (n, m) = ({}, {}); got ({}, {})",
            table.n(),
            table.m(),
            ref_scores.len(),
            cmp_scores.len()
        )));
    }
    check_sorted(ref_scores, "reference scores")?;
    check_distinct(ref_scores, cmp_scores)?;
    let n = ref_scores.len();
    let statistic = kth_smallest(cmp_scores, table.eta());
    // With distinct scores, statistic <= S_(i) holds exactly for i past the
    // count of reference scores below it.
    let below = ref_scores.partition_point(|s| *s < statistic);
    let p = table.tail_sum(below + 1);
    let p = p.max(table.weight(n + 1)).min(1.0);
    Ok(PValueRecord {
        group_id: String::new(),
        method: Method::BatchConformal,
        eta_used: EtaUsed::Rank(table.eta()),
        statistic,
        p,
    })
}

/// Two-quantile p-value: rejects when either the `eta1`-th or the `eta2`-th
/// smallest comparison score is large relative to the correspondingly scaled
/// reference order statistics.
///
/// The reference order statistic `S_(j)` is taken as positive infinity for
/// `j > n`. The recorded statistic is the combined rank offset
/// `T = max(R_{eta1} - eta1 - etaTilde1 + 1, R_{eta2} - eta2 - etaTilde2 + 1)`.
pub fn multi_quantile_pvalue(
    ref_scores: &[f64],
    cmp_scores: &[f64],
    eta1: usize,
    eta2: usize,
) -> Result<PValueRecord> {
    let n = ref_scores.len();
    let m = cmp_scores.len();
    let et1 = scaled_rank(eta1, m, n)?;
    let et2 = scaled_rank(eta2, m, n)?;
    let table = two_quantile_weights(n, m, eta1, eta2, et1, et2)?;
    multi_quantile_pvalue_with_table(ref_scores, cmp_scores, &table)
}

/// As [`multi_quantile_pvalue`], with a precomputed [`TwoQuantileWeightTable`]
/// (which fixes both comparison ranks and the scaled reference ranks).
pub fn multi_quantile_pvalue_with_table(
    ref_scores: &[f64],
    cmp_scores: &[f64],
    table: &TwoQuantileWeightTable,
) -> Result<PValueRecord> {
    if table.n() != ref_scores.len() || table.m() != cmp_scores.len() {
        return Err(Error::Mismatch(format!(
            "two-quantile table built for (n, m) = ({}, {}); got ({}, {})",
            table.n(),
            table.m(),
            ref_scores.len(),
            cmp_scores.len()
        )));
    }
    check_sorted(ref_scores, "reference scores")?;
    check_distinct(ref_scores, cmp_scores)?;
    let (eta1, eta2) = (table.eta1(), table.eta2());
    let (et1, et2) = (table.eta_tilde1(), table.eta_tilde2());
    let stat1 = kth_smallest(cmp_scores, eta1);
    let stat2 = kth_smallest(cmp_scores, eta2);
    let t1 = (ref_scores.partition_point(|s| *s < stat1) + 1) as i64 - et1 as i64;
    let t2 = (ref_scores.partition_point(|s| *s < stat2) + 1) as i64 - et2 as i64;
    let t = t1.max(t2);
    let p = table.tail_sum(t);
    let p = p.max(table.weight(table.t_max())).min(1.0);
    Ok(PValueRecord {
        group_id: String::new(),
        method: Method::MultiQuantile,
        eta_used: EtaUsed::RankPair(eta1, eta2),
        statistic: t as f64,
        p,
    })
}

/// Subsampling conformal p-value: a standard conformal p-value computed from
/// one uniformly drawn comparison point.
pub fn subsampling_pvalue(
    ref_scores: &[f64],
    cmp_scores: &[f64],
    seed: u64,
) -> Result<PValueRecord> {
    if cmp_scores.is_empty() || ref_scores.is_empty() {
        return Err(Error::InvalidInput(
            "subsampling_pvalue: empty reference or comparison sample".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let i_star = rng.gen_range(0..cmp_scores.len());
    let selected = cmp_scores[i_star];
    let count = ref_scores.iter().filter(|s| selected <= **s).count();
    let p = (count + 1) as f64 / (ref_scores.len() + 1) as f64;
    Ok(PValueRecord {
        group_id: String::new(),
        method: Method::Subsampling,
        eta_used: EtaUsed::Rank(i_star + 1),
        statistic: selected,
        p,
    })
}

/// Test statistic for the randomized permutation test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PermutationStatistic {
    /// Absolute difference of sample means.
    MeanDiff,
    /// Absolute difference of the `tau`-th empirical quantiles.
    QuantileDiff(f64),
}

/// Left-continuous empirical quantile: the smallest value whose empirical CDF
/// reaches `tau`. `sorted` must be ascending and nonempty.
pub(crate) fn empirical_quantile_sorted(sorted: &[f64], tau: f64) -> f64 {
    let len = sorted.len();
    // Guard against 0.8 * 30 evaluating marginally above 24.
    let k = ((tau * len as f64) - 1e-9).ceil().max(1.0) as usize;
    sorted[k.min(len) - 1]
}

fn permutation_statistic(
    stat: PermutationStatistic,
    ref_part: &[f64],
    cmp_part: &[f64],
) -> f64 {
    match stat {
        PermutationStatistic::MeanDiff => {
            let ref_mean = ref_part.iter().sum::<f64>() / ref_part.len() as f64;
            let cmp_mean = cmp_part.iter().sum::<f64>() / cmp_part.len() as f64;
            (cmp_mean - ref_mean).abs()
        }
        PermutationStatistic::QuantileDiff(tau) => {
            let mut a = ref_part.to_vec();
            let mut b = cmp_part.to_vec();
            a.sort_unstable_by(f64::total_cmp);
            b.sort_unstable_by(f64::total_cmp);
            (empirical_quantile_sorted(&b, tau) - empirical_quantile_sorted(&a, tau)).abs()
        }
    }
}

/// Randomized permutation p-value over `permutations` uniformly drawn
/// permutations of the pooled sample; the first `n` positions of `pooled`
/// are the reference observations.
///
/// The permutations act on a canonical (block-sorted) ordering of the data,
/// so with a fixed seed the p-value is invariant to relabeling within the
/// reference block and within the comparison block. The smallest achievable
/// p-value is `1 / (permutations + 1)`.
pub fn permutation_pvalue(
    pooled: &[f64],
    n: usize,
    statistic: PermutationStatistic,
    permutations: usize,
    seed: u64,
) -> Result<PValueRecord> {
    if permutations < 1 {
        return Err(Error::Domain("permutation_pvalue: need at least one permutation".into()));
    }
    if n < 1 || pooled.len() <= n {
        return Err(Error::InvalidInput(format!(
            "permutation_pvalue: need 1 <= n < pooled length, got n = {n}, length = {}",
            pooled.len()
        )));
    }
    if let PermutationStatistic::QuantileDiff(tau) = statistic {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::Domain(format!(
                "permutation_pvalue: quantile level tau = {tau} outside (0, 1)"
            )));
        }
    }
    let observed = permutation_statistic(statistic, &pooled[..n], &pooled[n..]);
    let mut canonical = pooled.to_vec();
    canonical[..n].sort_unstable_by(f64::total_cmp);
    canonical[n..].sort_unstable_by(f64::total_cmp);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut at_least = 0usize;
    for _ in 0..permutations {
        canonical.shuffle(&mut rng);
        if permutation_statistic(statistic, &canonical[..n], &canonical[n..]) >= observed {
            at_least += 1;
        }
    }
    let p = (1 + at_least) as f64 / (permutations + 1) as f64;
    Ok(PValueRecord {
        group_id: String::new(),
        method: Method::Permutation,
        eta_used: EtaUsed::None,
        statistic: observed,
        p,
    })
}

/// How the rank-sum null distribution is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RankSumMode {
    Exact,
    NormalApprox,
}

/// Exact null distribution of the Mann-Whitney count
/// `U = #{(i, j) : comparison_j > reference_i}` for distinct observations.
///
/// Built by a counting recursion expressed with probability weights; bounded
/// to `n * m <= 10_000`. Reusable across calls with equal sample sizes.
#[derive(Debug, Clone)]
pub struct MannWhitneyDistribution {
    n: usize,
    m: usize,
    pmf: Vec<f64>,
    suffix: Vec<f64>,
}

impl MannWhitneyDistribution {
    pub fn new(n: usize, m: usize) -> Result<Self> {
        if n < 1 || m < 1 {
            return Err(Error::InvalidInput(format!(
                "MannWhitneyDistribution: need n, m >= 1, got ({n}, {m})"
            )));
        }
        if n * m > 10_000 {
            return Err(Error::SizeBound(format!(
                "exact rank-sum distribution limited to n*m <= 10000, got {}; use normal-approx mode",
                n * m
            )));
        }
        let cells = n * m + 1;
        let mut dp: Vec<Vec<f64>> = vec![vec![0.0; cells]; m + 1];
        for row in dp.iter_mut() {
            row[0] = 1.0;
        }
        for i in 1..=n {
            for j in 1..=m {
                let (left, right) = dp.split_at_mut(j);
                let prev = &left[j - 1];
                let cur = &mut right[0];
                let p_ref = i as f64 / (i + j) as f64;
                let p_cmp = j as f64 / (i + j) as f64;
                // Largest remaining point is a reference draw (U unchanged,
                // one fewer reference) or a comparison draw (it beats all i
                // reference points).
                for u in (0..cells).rev() {
                    let shifted = if u >= i { prev[u - i] } else { 0.0 };
                    cur[u] = p_ref * cur[u] + p_cmp * shifted;
                }
            }
        }
        let pmf = dp.pop().expect("m + 1 rows");
        let mut suffix = vec![0.0; cells];
        suffix[cells - 1] = pmf[cells - 1];
        for u in (0..cells - 1).rev() {
            suffix[u] = pmf[u] + suffix[u + 1];
        }
        Ok(Self { n, m, pmf, suffix })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn pmf(&self) -> &[f64] {
        &self.pmf
    }

    /// `P(U >= u)`.
    pub fn tail_prob(&self, u: usize) -> f64 {
        if u >= self.suffix.len() {
            0.0
        } else {
            self.suffix[u]
        }
    }
}

fn mann_whitney_count(ref_scores: &[f64], cmp_scores: &[f64]) -> usize {
    let mut sorted_ref = ref_scores.to_vec();
    sorted_ref.sort_unstable_by(f64::total_cmp);
    cmp_scores
        .iter()
        .map(|c| sorted_ref.partition_point(|r| r < c))
        .sum()
}

/// One-sided rank-sum (Mann-Whitney) p-value; small values indicate the
/// comparison observations tend to exceed the reference observations.
///
/// Exact mode evaluates the tail of the exact `U` distribution and requires
/// `n * m <= 10_000`; normal-approximation mode uses mean `nm/2`, variance
/// `nm(n+m+1)/12`, and a continuity correction.
pub fn ranksum_pvalue(
    ref_scores: &[f64],
    cmp_scores: &[f64],
    mode: RankSumMode,
) -> Result<PValueRecord> {
    match mode {
        RankSumMode::Exact => {
            let dist = MannWhitneyDistribution::new(ref_scores.len(), cmp_scores.len())?;
            ranksum_pvalue_with_distribution(ref_scores, cmp_scores, &dist)
        }
        RankSumMode::NormalApprox => {
            if ref_scores.is_empty() || cmp_scores.is_empty() {
                return Err(Error::InvalidInput("ranksum_pvalue: empty sample".into()));
            }
            check_distinct(ref_scores, cmp_scores)?;
            let n = ref_scores.len() as f64;
            let m = cmp_scores.len() as f64;
            let u = mann_whitney_count(ref_scores, cmp_scores);
            let mean = n * m / 2.0;
            let sd = (n * m * (n + m + 1.0) / 12.0).sqrt();
            let normal = Normal::new(0.0, 1.0).expect("standard normal");
            let p = normal.cdf((mean - u as f64 + 0.5) / sd);
            Ok(PValueRecord {
                group_id: String::new(),
                method: Method::RankSum,
                eta_used: EtaUsed::None,
                statistic: u as f64,
                p: p.clamp(f64::MIN_POSITIVE, 1.0),
            })
        }
    }
}

/// As [`ranksum_pvalue`] in exact mode, with a precomputed null distribution.
pub fn ranksum_pvalue_with_distribution(
    ref_scores: &[f64],
    cmp_scores: &[f64],
    dist: &MannWhitneyDistribution,
) -> Result<PValueRecord> {
    if dist.n() != ref_scores.len() || dist.m() != cmp_scores.len() {
        return Err(Error::Mismatch(format!(
            "rank-sum distribution built for (n, m) = ({}, {}); got ({}, {})",
            dist.n(),
            dist.m(),
            ref_scores.len(),
            cmp_scores.len()
        )));
    }
    check_distinct(ref_scores, cmp_scores)?;
    let u = mann_whitney_count(ref_scores, cmp_scores);
    let p = dist.tail_prob(u).min(1.0);
    Ok(PValueRecord {
        group_id: String::new(),
        method: Method::RankSum,
        eta_used: EtaUsed::None,
        statistic: u as f64,
        p,
    })
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// One-sided two-sample z-test p-value with known standard deviation `sigma`:
/// `p = Phi((mean_ref - mean_cmp) / (sigma * sqrt(1/n + 1/m)))`.
pub fn ztest_pvalue(ref_values: &[f64], cmp_values: &[f64], sigma: f64) -> Result<PValueRecord> {
    if ref_values.is_empty() || cmp_values.is_empty() {
        return Err(Error::InvalidInput("ztest_pvalue: empty sample".into()));
    }
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::Domain(format!("ztest_pvalue: sigma = {sigma} must be positive")));
    }
    let n = ref_values.len() as f64;
    let m = cmp_values.len() as f64;
    let z = (mean(ref_values) - mean(cmp_values)) / (sigma * (1.0 / n + 1.0 / m).sqrt());
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(PValueRecord {
        group_id: String::new(),
        method: Method::ZTest,
        eta_used: EtaUsed::None,
        statistic: z,
        p: normal.cdf(z).clamp(f64::MIN_POSITIVE, 1.0),
    })
}

/// As [`ztest_pvalue`] with `sigma` replaced by the pooled sample standard
/// deviation of the two samples.
pub fn ztest_pvalue_pooled_sd(ref_values: &[f64], cmp_values: &[f64]) -> Result<PValueRecord> {
    if ref_values.len() + cmp_values.len() < 3 {
        return Err(Error::InvalidInput(
            "ztest_pvalue_pooled_sd: need at least three observations in total".into(),
        ));
    }
    let ref_mean = mean(ref_values);
    let cmp_mean = mean(cmp_values);
    let ss: f64 = ref_values.iter().map(|v| (v - ref_mean).powi(2)).sum::<f64>()
        + cmp_values.iter().map(|v| (v - cmp_mean).powi(2)).sum::<f64>();
    let pooled_sd = (ss / (ref_values.len() + cmp_values.len() - 2) as f64).sqrt();
    if pooled_sd.is_nan() || pooled_sd <= 0.0 {
        return Err(Error::InvalidInput(
            "ztest_pvalue_pooled_sd: pooled sample standard deviation is zero".into(),
        ));
    }
    let mut record = ztest_pvalue(ref_values, cmp_values, pooled_sd)?;
    record.method = Method::TTest;
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn batch_reduces_to_standard_conformal() {
        // Test score above all three references: p = w_4 = 1/4.
        let record = batch_conformal_pvalue(&[1.0, 2.0, 3.0], &[4.0], 1).unwrap();
        assert_relative_eq!(record.p, 0.25, max_relative = 1e-13);
        assert_eq!(record.eta_used, EtaUsed::Rank(1));
        assert_relative_eq!(record.statistic, 4.0);
    }

    #[test]
    fn batch_pvalue_is_one_when_test_quantile_below_all_references() {
        let record = batch_conformal_pvalue(&[1.0, 2.0, 3.0, 4.0, 5.0], &[0.1, 0.5, 0.7], 2).unwrap();
        assert_relative_eq!(record.p, 1.0, max_relative = 1e-12);
    }

    #[test]
    fn batch_matches_standard_conformal_formula_at_m_one() {
        let refs: Vec<f64> = (1..=9).map(|i| i as f64).collect();
        for cmp in [0.5, 3.5, 6.5, 9.5] {
            let record = batch_conformal_pvalue(&refs, &[cmp], 1).unwrap();
            let count = refs.iter().filter(|s| cmp <= **s).count();
            let expected = (count + 1) as f64 / (refs.len() + 1) as f64;
            assert_relative_eq!(record.p, expected, max_relative = 1e-13);
        }
    }

    #[test]
    fn batch_rejects_duplicate_scores() {
        assert!(batch_conformal_pvalue(&[1.0, 2.0, 3.0], &[2.0], 1).is_err());
    }

    #[test]
    fn batch_rejects_nan_scores() {
        assert!(batch_conformal_pvalue(&[1.0, 2.0, 3.0], &[f64::NAN], 1).is_err());
    }

    #[test]
    fn batch_rejects_unsorted_reference() {
        assert!(batch_conformal_pvalue(&[2.0, 1.0, 3.0], &[4.0], 1).is_err());
    }

    #[test]
    fn batch_rejects_eta_out_of_range() {
        assert!(batch_conformal_pvalue(&[1.0, 2.0], &[3.0], 2).is_err());
    }

    #[test]
    fn multi_quantile_is_one_when_both_quantiles_low() {
        let refs: Vec<f64> = (1..=6).map(|i| i as f64).collect();
        let record = multi_quantile_pvalue(&refs, &[0.1, 0.2, 0.3], 1, 2).unwrap();
        assert_relative_eq!(record.p, 1.0, max_relative = 1e-12);
    }

    #[test]
    fn multi_quantile_rejects_bad_rank_order() {
        let refs: Vec<f64> = (1..=6).map(|i| i as f64).collect();
        assert!(multi_quantile_pvalue(&refs, &[7.0, 8.0, 9.0], 2, 2).is_err());
        assert!(multi_quantile_pvalue(&refs, &[7.0, 8.0, 9.0], 2, 1).is_err());
    }

    #[test]
    fn multi_quantile_upper_tail_shift_never_increases_p() {
        let refs: Vec<f64> = (1..=6).map(|i| i as f64).collect();
        let base = multi_quantile_pvalue(&refs, &[2.5, 3.5, 4.5], 1, 2).unwrap();
        // Shift only scores above the eta1-th order statistic upward.
        let shifted = multi_quantile_pvalue(&refs, &[2.5, 5.5, 6.5], 1, 2).unwrap();
        assert!(shifted.p <= base.p + 1e-15);
    }

    #[test]
    fn subsampling_matches_hand_computed_extremes() {
        // Selected score above all references: (0 + 1) / 4.
        let high = subsampling_pvalue(&[1.0, 2.0, 3.0], &[9.0], 42).unwrap();
        assert_relative_eq!(high.p, 0.25);
        // Selected score below all references: (3 + 1) / 4.
        let low = subsampling_pvalue(&[1.0, 2.0, 3.0], &[0.5], 42).unwrap();
        assert_relative_eq!(low.p, 1.0);
    }

    #[test]
    fn subsampling_is_deterministic_given_seed() {
        let cmp: Vec<f64> = (0..20).map(|i| i as f64 * 0.37).collect();
        let refs: Vec<f64> = (0..15).map(|i| i as f64 * 0.53 + 0.1).collect();
        let a = subsampling_pvalue(&refs, &cmp, 7).unwrap();
        let b = subsampling_pvalue(&refs, &cmp, 7).unwrap();
        assert_eq!(a.p, b.p);
        assert_eq!(a.eta_used, b.eta_used);
    }

    #[test]
    fn permutation_constant_statistic_gives_p_one() {
        // Mean difference of identical halves is zero for every permutation,
        // and ties count as >=.
        let pooled = vec![1.0; 8];
        let record =
            permutation_pvalue(&pooled, 4, PermutationStatistic::MeanDiff, 25, 3).unwrap();
        assert_relative_eq!(record.p, 1.0);
    }

    #[test]
    fn permutation_smallest_p_is_one_over_l_plus_one() {
        let pooled: Vec<f64> = (0..12).map(|i| if i < 6 { i as f64 } else { 100.0 + i as f64 }).collect();
        let record =
            permutation_pvalue(&pooled, 6, PermutationStatistic::MeanDiff, 199, 11).unwrap();
        assert!(record.p >= 1.0 / 200.0);
        let floor = 1.0 / 200.0;
        assert!(record.p <= floor * 3.0, "extreme separation should sit near the floor");
    }

    #[test]
    fn permutation_is_deterministic_given_seed() {
        let pooled: Vec<f64> = (0..20).map(|i| (i as f64).sin()).collect();
        let a = permutation_pvalue(&pooled, 10, PermutationStatistic::QuantileDiff(0.8), 99, 5)
            .unwrap();
        let b = permutation_pvalue(&pooled, 10, PermutationStatistic::QuantileDiff(0.8), 99, 5)
            .unwrap();
        assert_eq!(a.p, b.p);
    }

    #[test]
    fn permutation_rejects_bad_quantile_level() {
        let pooled = vec![1.0, 2.0, 3.0, 4.0];
        assert!(
            permutation_pvalue(&pooled, 2, PermutationStatistic::QuantileDiff(1.0), 10, 0).is_err()
        );
    }

    #[test]
    fn permutation_is_invariant_to_relabeling_within_blocks() {
        let pooled = vec![3.0, 1.0, 4.0, 1.5, 9.0, 2.6, 5.3, 5.8];
        let mut relabeled = pooled.clone();
        relabeled[..4].reverse();
        relabeled[4..].rotate_left(1);
        for statistic in [
            PermutationStatistic::MeanDiff,
            PermutationStatistic::QuantileDiff(0.6),
        ] {
            let a = permutation_pvalue(&pooled, 4, statistic, 149, 21).unwrap();
            let b = permutation_pvalue(&relabeled, 4, statistic, 149, 21).unwrap();
            assert_eq!(a.p, b.p);
        }
    }

    #[test]
    fn empirical_quantile_uses_left_continuous_convention() {
        let sorted = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(empirical_quantile_sorted(&sorted, 0.2), 1.0);
        assert_eq!(empirical_quantile_sorted(&sorted, 0.5), 3.0);
        assert_eq!(empirical_quantile_sorted(&sorted, 0.8), 4.0);
        assert_eq!(empirical_quantile_sorted(&sorted, 0.81), 5.0);
        // 0.8 * 30 must resolve to rank 24, not 25.
        let thirty: Vec<f64> = (1..=30).map(|i| i as f64).collect();
        assert_eq!(empirical_quantile_sorted(&thirty, 0.8), 24.0);
    }

    #[test]
    fn ranksum_extreme_separation_small_sample() {
        // All comparison scores above all references, n = m = 3: p = 1/20.
        let record =
            ranksum_pvalue(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], RankSumMode::Exact).unwrap();
        assert_relative_eq!(record.p, 1.0 / 20.0, max_relative = 1e-12);
        assert_relative_eq!(record.statistic, 9.0);
    }

    #[test]
    fn ranksum_single_points() {
        let record = ranksum_pvalue(&[1.0], &[2.0], RankSumMode::Exact).unwrap();
        assert_relative_eq!(record.p, 0.5, max_relative = 1e-14);
    }

    #[test]
    fn ranksum_exact_and_normal_agree_for_large_samples() {
        let refs: Vec<f64> = (0..100).map(|i| (i as f64 * 0.701).sin() + 0.01 * i as f64).collect();
        let cmps: Vec<f64> =
            (0..100).map(|i| (i as f64 * 0.313).cos() + 0.011 * i as f64 + 0.2).collect();
        let exact = ranksum_pvalue(&refs, &cmps, RankSumMode::Exact).unwrap();
        let approx = ranksum_pvalue(&refs, &cmps, RankSumMode::NormalApprox).unwrap();
        assert!((exact.p - approx.p).abs() < 0.01);
    }

    #[test]
    fn ranksum_exact_rejects_oversized_samples() {
        let refs = vec![0.0; 101];
        let cmps = vec![1.0; 100];
        let err = MannWhitneyDistribution::new(refs.len(), cmps.len()).unwrap_err();
        assert!(err.to_string().contains("normal-approx"));
    }

    #[test]
    fn ztest_equal_means_gives_half() {
        let record = ztest_pvalue(&[1.0, 2.0, 3.0], &[0.0, 2.0, 4.0], 1.5).unwrap();
        assert_relative_eq!(record.p, 0.5, max_relative = 1e-12);
    }

    #[test]
    fn ztest_unit_z_score() {
        // mean_ref - mean_cmp = sigma * sqrt(1/n + 1/m) forces z = 1.
        let sigma = 2.0;
        let n = 4usize;
        let m = 2usize;
        let shift = sigma * (1.0 / n as f64 + 1.0 / m as f64).sqrt();
        let refs = vec![shift; n];
        let cmps = vec![0.0; m];
        let record = ztest_pvalue(&refs, &cmps, sigma).unwrap();
        assert_relative_eq!(record.p, 0.8413447460685429, max_relative = 1e-9);
    }

    #[test]
    fn ztest_rejects_empty_and_bad_sigma() {
        assert!(ztest_pvalue(&[], &[1.0], 1.0).is_err());
        assert!(ztest_pvalue(&[1.0], &[1.0], 0.0).is_err());
    }

    proptest! {
        #[test]
        fn batch_pvalue_monotone_in_comparison_scores(
            seed in 0u64..1000,
            bump_idx in 0usize..5,
        ) {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut refs: Vec<f64> = (0..12).map(|_| rng.gen::<f64>()).collect();
            refs.sort_unstable_by(f64::total_cmp);
            let cmps: Vec<f64> = (0..5).map(|_| rng.gen::<f64>() + 0.001).collect();
            let base = batch_conformal_pvalue(&refs, &cmps, 3).unwrap();
            let mut bumped = cmps.clone();
            bumped[bump_idx] += 1.5;
            let higher = batch_conformal_pvalue(&refs, &bumped, 3).unwrap();
            // Increasing any comparison score never increases the p-value...
            prop_assert!(higher.p <= base.p + 1e-15);
            let mut ref_bumped = refs.clone();
            ref_bumped[6] += 2.0;
            ref_bumped.sort_unstable_by(f64::total_cmp);
            let easier = batch_conformal_pvalue(&ref_bumped, &cmps, 3).unwrap();
            // ...and increasing any reference score never decreases it.
            prop_assert!(easier.p >= base.p - 1e-15);
        }

        #[test]
        fn clamped_to_unit_interval(seed in 0u64..500) {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut refs: Vec<f64> = (0..8).map(|_| rng.gen::<f64>()).collect();
            refs.sort_unstable_by(f64::total_cmp);
            let cmps: Vec<f64> = (0..4).map(|_| rng.gen::<f64>() * 3.0 - 1.0).collect();
            for eta in 1..=4 {
                let record = batch_conformal_pvalue(&refs, &cmps, eta).unwrap();
                prop_assert!(record.p > 0.0 && record.p <= 1.0);
            }
        }
    }
}
