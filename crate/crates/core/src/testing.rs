//! Benjamini-Hochberg selection, end-to-end detection, FDR/power metrics,
//! and enumeration oracles for the rank-distribution properties the
//! method relies on.
//!
//! `batch_detect` is the main pipeline: score the data, compute one batch
//! conformal p-value per comparison group against the shared reference, and
//! select groups by the Benjamini-Hochberg step-up rule. The p-values are
//! positively regression dependent across groups, so the selection controls
//! the false discovery rate at `K0 * alpha / K` as long as the comparison
//! groups are independent of each other (an assumption the library cannot
//! check from data).

use std::collections::hash_map::Entry;
use std::collections::{BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::combinatorics::rank_weights;
use crate::error::{Error, Result};
use crate::pvalues::{batch_conformal_pvalue_with_table, Method, PValueRecord};
use crate::scores::{apply_scores, SampleGroup, ScoreSpec, TiePolicy};

/// Outcome of the Benjamini-Hochberg procedure.
///
/// `rejected` holds positions into the input p-value vector. When `k_star`
/// is zero nothing is rejected and `threshold` is `None`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BhOutcome {
    pub alpha: f64,
    pub k_star: usize,
    pub threshold: Option<f64>,
    pub rejected: BTreeSet<usize>,
    pub sorted_pvalues: Vec<f64>,
}

/// Step-up selection: `k* = max{k : p_(k) <= k * alpha / M}`, rejecting every
/// hypothesis with `p <= p_(k*)` (so tied p-values are rejected together).
pub fn bh_procedure(pvalues: &[f64], alpha: f64) -> Result<BhOutcome> {
    if pvalues.is_empty() {
        return Err(Error::InvalidInput("bh_procedure: empty p-value vector".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Domain(format!("bh_procedure: alpha = {alpha} outside (0, 1)")));
    }
    if pvalues.iter().any(|p| !(*p > 0.0 && *p <= 1.0)) {
        return Err(Error::InvalidInput(
            "bh_procedure: every p-value must lie in (0, 1]".into(),
        ));
    }
    let m = pvalues.len();
    let mut sorted = pvalues.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    let mut k_star = 0usize;
    for (idx, p) in sorted.iter().enumerate() {
        let k = idx + 1;
        if *p <= k as f64 * alpha / m as f64 {
            k_star = k;
        }
    }
    let threshold = (k_star >= 1).then(|| sorted[k_star - 1]);
    let rejected: BTreeSet<usize> = match threshold {
        Some(thr) => pvalues
            .iter()
            .enumerate()
            .filter(|(_, p)| **p <= thr)
            .map(|(i, _)| i)
            .collect(),
        None => BTreeSet::new(),
    };
    Ok(BhOutcome {
        alpha,
        k_star,
        threshold,
        rejected,
        sorted_pvalues: sorted,
    })
}

/// Ground-truth null/non-null flags per comparison group.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthLabels {
    pub is_null: Vec<bool>,
}

impl TruthLabels {
    pub fn new(is_null: Vec<bool>) -> Self {
        Self { is_null }
    }

    pub fn all_null(groups: usize) -> Self {
        Self {
            is_null: vec![true; groups],
        }
    }

    pub fn num_nonnull(&self) -> usize {
        self.is_null.iter().filter(|b| !**b).count()
    }
}

/// Realized false discovery proportion and power of one selection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricRecord {
    /// `V / max(R, 1)`.
    pub fdp: f64,
    /// Fraction of non-null groups rejected; zero when there are none.
    pub power: f64,
    /// `V`: rejected true nulls.
    pub false_discoveries: usize,
    /// `R`: total rejections.
    pub rejections: usize,
}

/// Scores a [`BhOutcome`] against ground truth.
pub fn evaluate(outcome: &BhOutcome, truth: &TruthLabels) -> Result<MetricRecord> {
    let m = outcome.sorted_pvalues.len();
    if truth.is_null.len() != m {
        return Err(Error::Mismatch(format!(
            "truth labels cover {} groups but the outcome has {m}",
            truth.is_null.len()
        )));
    }
    let rejections = outcome.rejected.len();
    let false_discoveries = outcome
        .rejected
        .iter()
        .filter(|&&k| truth.is_null[k])
        .count();
    let nonnull = truth.num_nonnull();
    let true_discoveries = rejections - false_discoveries;
    Ok(MetricRecord {
        fdp: false_discoveries as f64 / (rejections.max(1)) as f64,
        power: if nonnull == 0 {
            0.0
        } else {
            true_discoveries as f64 / nonnull as f64
        },
        false_discoveries,
        rejections,
    })
}

/// Per-group rule mapping a comparison sample size to the rank `eta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", content = "value", rename_all = "kebab-case")]
pub enum QuantileSpec {
    /// A fixed explicit rank, required to satisfy `1 <= eta <= n_k`.
    Rank(usize),
    /// `eta = ceil(q * n_k)` for a quantile level `q` in `(0, 1]`.
    QuantileCeil(f64),
    /// `eta = floor(q * n_k)`, which must stay at least 1.
    QuantileFloor(f64),
}

impl QuantileSpec {
    /// Resolves the rank for a group of size `m`.
    pub fn resolve(&self, m: usize) -> Result<usize> {
        if m < 1 {
            return Err(Error::Domain("quantile rule: empty comparison group".into()));
        }
        match self {
            QuantileSpec::Rank(eta) => {
                if *eta < 1 || *eta > m {
                    Err(Error::Domain(format!("explicit rank {eta} outside [1..{m}]")))
                } else {
                    Ok(*eta)
                }
            }
            QuantileSpec::QuantileCeil(q) => {
                if !(*q > 0.0 && *q <= 1.0) {
                    return Err(Error::Domain(format!("quantile level {q} outside (0, 1]")));
                }
                // The 1e-9 slack keeps exact products like 0.8 * 30 from
                // ceiling to the next rank.
                Ok(((q * m as f64 - 1e-9).ceil().max(1.0) as usize).min(m))
            }
            QuantileSpec::QuantileFloor(q) => {
                if !(*q > 0.0 && *q <= 1.0) {
                    return Err(Error::Domain(format!("quantile level {q} outside (0, 1]")));
                }
                let eta = ((q * m as f64 + 1e-9).floor() as usize).min(m);
                if eta < 1 {
                    Err(Error::Domain(format!(
                        "floor rule with q = {q} gives rank 0 for group size {m}; the weights need eta >= 1"
                    )))
                } else {
                    Ok(eta)
                }
            }
        }
    }
}

/// A detection run: per-group p-value records (in input group order) plus the
/// Benjamini-Hochberg outcome whose `rejected` set indexes the records.
#[derive(Debug, Clone, Serialize)]
pub struct Detection {
    pub records: Vec<PValueRecord>,
    pub bh: BhOutcome,
}

impl Detection {
    /// Identifiers of the rejected groups, in input order.
    pub fn rejected_ids(&self) -> Vec<String> {
        self.bh
            .rejected
            .iter()
            .map(|&k| self.records[k].group_id.clone())
            .collect()
    }
}

/// Distribution-shift detection with batch conformal p-values: scores the
/// data, computes one p-value per comparison group against the shared
/// reference, and applies the Benjamini-Hochberg procedure at level `alpha`.
///
/// Weight tables are cached per `(n, m, eta)` within the run; the per-group
/// loop runs in parallel with output ordering fixed by the input order.
pub fn batch_detect(
    reference: &SampleGroup,
    groups: &[SampleGroup],
    spec: &ScoreSpec,
    quantile_spec: &QuantileSpec,
    alpha: f64,
    tie_policy: TiePolicy,
    seed: u64,
) -> Result<Detection> {
    if groups.is_empty() {
        return Err(Error::InvalidInput("batch_detect: no comparison groups".into()));
    }
    let set = apply_scores(spec, &reference.observations, groups, tie_policy, seed)?;
    let n = set.reference.len();
    let mut tables = HashMap::new();
    let mut etas = Vec::with_capacity(groups.len());
    for group in &set.groups {
        let m = group.scores.len();
        let eta = quantile_spec.resolve(m)?;
        if let Entry::Vacant(slot) = tables.entry((m, eta)) {
            slot.insert(rank_weights(n, m, eta)?);
        }
        etas.push((m, eta));
    }
    let mut records: Vec<PValueRecord> = set
        .groups
        .par_iter()
        .zip(etas.par_iter())
        .map(|(group, key)| {
            let mut record =
                batch_conformal_pvalue_with_table(&set.reference, &group.scores, &tables[key])?;
            record.group_id = group.id.clone();
            Ok(record)
        })
        .collect::<Result<_>>()?;
    let pvalues: Vec<f64> = records.iter().map(|r| r.p).collect();
    let bh = bh_procedure(&pvalues, alpha)?;
    records.shrink_to_fit();
    Ok(Detection { records, bh })
}

/// Baseline that splits the reference into `K` disjoint chunks (sizes
/// differing by at most one) and tests each group against its own chunk
/// only, making the p-values independent across groups at the cost of much
/// smaller effective reference samples.
pub fn partitioned_detect(
    reference: &SampleGroup,
    groups: &[SampleGroup],
    spec: &ScoreSpec,
    quantile_spec: &QuantileSpec,
    alpha: f64,
    tie_policy: TiePolicy,
    seed: u64,
) -> Result<Detection> {
    let k = groups.len();
    if k == 0 {
        return Err(Error::InvalidInput("partitioned_detect: no comparison groups".into()));
    }
    let n = reference.len();
    if n < k {
        return Err(Error::InvalidInput(format!(
            "partitioned_detect: reference size {n} is smaller than the number of groups {k}"
        )));
    }
    let mut records: Vec<PValueRecord> = groups
        .par_iter()
        .enumerate()
        .map(|(idx, group)| {
            let start = idx * n / k;
            let end = (idx + 1) * n / k;
            let chunk = &reference.observations[start..end];
            let set = apply_scores(
                spec,
                chunk,
                std::slice::from_ref(group),
                tie_policy,
                crate::seeding::mix(seed, 1, idx as u64),
            )?;
            let m = set.groups[0].scores.len();
            let eta = quantile_spec.resolve(m)?;
            let table = rank_weights(set.reference.len(), m, eta)?;
            let mut record = batch_conformal_pvalue_with_table(
                &set.reference,
                &set.groups[0].scores,
                &table,
            )?;
            record.group_id = group.id.clone();
            record.method = Method::Partitioned;
            Ok(record)
        })
        .collect::<Result<_>>()?;
    let pvalues: Vec<f64> = records.iter().map(|r| r.p).collect();
    let bh = bh_procedure(&pvalues, alpha)?;
    records.shrink_to_fit();
    Ok(Detection { records, bh })
}

/// One group of a two-arm (control/treated) dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoArmGroup {
    pub id: String,
    pub control: Vec<f64>,
    pub treated: Vec<f64>,
}

/// Treatment-effect comparison through empirical-CDF scores: each group's
/// treated outcomes are scored by that group's own control-arm empirical CDF,
/// the reference group's treated outcomes by the reference control CDF, and
/// the scored values feed the batch conformal detection.
///
/// Conditional on the control arms, a group is null when its scored treated
/// outcomes are distributed like the reference's, which captures equality of
/// the within-group treatment response distributions.
pub fn two_arm_detect(
    reference: &TwoArmGroup,
    groups: &[TwoArmGroup],
    quantile_spec: &QuantileSpec,
    alpha: f64,
    tie_policy: TiePolicy,
    seed: u64,
) -> Result<Detection> {
    use crate::scores::{empirical_cdf_score, GroupScores, Observation};

    if groups.is_empty() {
        return Err(Error::InvalidInput("two_arm_detect: no comparison groups".into()));
    }
    let score_arm = |control: &[f64], treated: &[f64], id: &str| -> Result<Vec<f64>> {
        if treated.is_empty() {
            return Err(Error::InvalidInput(format!(
                "two_arm_detect: group '{id}' has an empty treated arm"
            )));
        }
        let spec = empirical_cdf_score(control)
            .map_err(|_| Error::InvalidInput(format!("two_arm_detect: group '{id}' has an empty control arm")))?;
        treated
            .iter()
            .map(|y| spec.apply(&Observation::scalar(*y)))
            .collect()
    };
    let ref_scores = score_arm(&reference.control, &reference.treated, &reference.id)?;
    let mut group_scores = Vec::with_capacity(groups.len());
    for group in groups {
        group_scores.push(GroupScores {
            id: group.id.clone(),
            scores: score_arm(&group.control, &group.treated, &group.id)?,
        });
    }
    let set = crate::scores::resolve_ties(ref_scores, group_scores, tie_policy, seed)?;
    let n = set.reference.len();
    let mut tables = HashMap::new();
    let mut records = Vec::with_capacity(set.groups.len());
    for group in &set.groups {
        let m = group.scores.len();
        let eta = quantile_spec.resolve(m)?;
        if let Entry::Vacant(slot) = tables.entry((m, eta)) {
            slot.insert(rank_weights(n, m, eta)?);
        }
        let mut record =
            batch_conformal_pvalue_with_table(&set.reference, &group.scores, &tables[&(m, eta)])?;
        record.group_id = group.id.clone();
        records.push(record);
    }
    let pvalues: Vec<f64> = records.iter().map(|r| r.p).collect();
    let bh = bh_procedure(&pvalues, alpha)?;
    Ok(Detection { records, bh })
}

fn binom_u128(b: u64, a: u64) -> Option<u128> {
    if a > b {
        return Some(0);
    }
    let a = a.min(b - a);
    let mut result: u128 = 1;
    for j in 1..=a {
        result = result.checked_mul((b - a + j) as u128)? / j as u128;
    }
    Some(result)
}

/// Exhaustive enumeration of the ordered rank vectors
/// `1 <= r_1 < ... < r_m <= n + m`, each carrying mass `1 / C(n+m, m)`.
///
/// Under exchangeability this is exactly the distribution of the ordered
/// combined ranks of the comparison scores, so the oracle serves as ground
/// truth for every rank-based construction. Bounded to `C(n+m, m) <= 10^7`.
#[derive(Debug, Clone)]
pub struct RankDistributionOracle {
    n: usize,
    m: usize,
    flat: Vec<u32>,
}

/// Builds the oracle for `(n, m)`.
pub fn rank_distribution_oracle(n: usize, m: usize) -> Result<RankDistributionOracle> {
    if n < 1 || m < 1 {
        return Err(Error::InvalidInput(
            "rank_distribution_oracle: need n, m >= 1".into(),
        ));
    }
    binom_u128((n + m) as u64, m as u64)
        .filter(|c| *c <= 10_000_000)
        .ok_or_else(|| {
            Error::SizeBound(format!(
                "rank_distribution_oracle: C({}, {m}) exceeds 10^7",
                n + m
            ))
        })?;
    let mut flat = Vec::new();
    let top = (n + m) as u32;
    let mut current: Vec<u32> = (1..=m as u32).collect();
    loop {
        flat.extend_from_slice(&current);
        // Advance to the next combination in lexicographic order.
        let mut idx = m;
        loop {
            if idx == 0 {
                return Ok(RankDistributionOracle { n, m, flat });
            }
            idx -= 1;
            let limit = top - (m as u32 - 1 - idx as u32);
            if current[idx] < limit {
                current[idx] += 1;
                for j in idx + 1..m {
                    current[j] = current[j - 1] + 1;
                }
                break;
            }
        }
    }
}

impl RankDistributionOracle {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Number of enumerated rank vectors, `C(n+m, m)`.
    pub fn total(&self) -> usize {
        self.flat.len() / self.m
    }

    /// Mass of each vector, `1 / C(n+m, m)`.
    pub fn mass(&self) -> f64 {
        1.0 / self.total() as f64
    }

    /// Iterates the ordered rank vectors in lexicographic order.
    pub fn iter(&self) -> impl Iterator<Item = &[u32]> {
        self.flat.chunks_exact(self.m)
    }

    /// Lexicographic position of an ordered rank vector, if present.
    pub fn position(&self, ranks: &[u32]) -> Option<usize> {
        if ranks.len() != self.m {
            return None;
        }
        let total = self.total();
        let mut lo = 0usize;
        let mut hi = total;
        while lo < hi {
            let mid = (lo + hi) / 2;
            let probe = &self.flat[mid * self.m..(mid + 1) * self.m];
            if probe < ranks {
                lo = mid + 1;
            } else {
                hi = mid;
            }
        }
        (lo < total && &self.flat[lo * self.m..(lo + 1) * self.m] == ranks).then_some(lo)
    }

    /// Counts of `R_t = r` over the enumeration, indexed by `r - 1`.
    pub fn marginal_counts(&self, t: usize) -> Result<Vec<u64>> {
        if t < 1 || t > self.m {
            return Err(Error::Domain(format!(
                "marginal_counts: t = {t} outside [1..{}]",
                self.m
            )));
        }
        let mut counts = vec![0u64; self.n + self.m];
        for ranks in self.iter() {
            counts[ranks[t - 1] as usize - 1] += 1;
        }
        Ok(counts)
    }
}

/// Result of checking the rank stochastic-order relations at position `t`.
///
/// `violations` counts exact conditional-probability comparisons (by integer
/// cross-multiplication) that break the claimed monotonicity; the gap fields
/// report the largest absolute deviation of the enumerated conditionals from
/// the closed form and from the conditional-independence product form.
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticOrderReport {
    pub n: usize,
    pub m: usize,
    pub t: usize,
    pub violations: usize,
    pub max_closed_form_gap: f64,
    pub max_factorization_gap: f64,
}

/// Verifies, by exhaustive enumeration, that conditional on `R_t = q`:
/// the lower neighbor rank `R_{t-1}` is stochastically decreasing in `q`,
/// the upper neighbor rank `R_{t+1}` is stochastically increasing in `q`,
/// `(R_{t-1}, R_{t+1})` are conditionally independent given `R_t`, and the
/// lower conditional matches its closed form
/// `sum_{l<=r} C(l-1, t-2) / sum_{l<=q-1} C(l-1, t-2)`.
pub fn stochastic_order_check(n: usize, m: usize, t: usize) -> Result<StochasticOrderReport> {
    if t < 2 || t > m {
        return Err(Error::Domain(format!(
            "stochastic_order_check: t = {t} outside [2..{m}]"
        )));
    }
    if n + m > 128 {
        return Err(Error::SizeBound(format!(
            "stochastic_order_check: n + m = {} exceeds 128 (joint-count tables grow cubically)",
            n + m
        )));
    }
    let oracle = rank_distribution_oracle(n, m)?;
    let s = n + m;
    let has_upper = t < m;

    let mut cnt_t = vec![0u64; s + 1];
    let mut cnt_lower = vec![vec![0u64; s + 1]; s + 1]; // [q][l]
    let mut cnt_upper = vec![vec![0u64; s + 1]; s + 1]; // [q][v]
    let mut cnt_joint = vec![0u64; (s + 1) * (s + 1) * (s + 1)]; // [q][l][v]
    for ranks in oracle.iter() {
        let q = ranks[t - 1] as usize;
        cnt_t[q] += 1;
        let l = ranks[t - 2] as usize;
        cnt_lower[q][l] += 1;
        if has_upper {
            let v = ranks[t] as usize;
            cnt_upper[q][v] += 1;
            cnt_joint[(q * (s + 1) + l) * (s + 1) + v] += 1;
        }
    }

    let mut violations = 0usize;
    // lower_cum[q][r] = #(R_{t-1} <= r, R_t = q);
    // upper_cum[q][r] = #(R_{t+1} >= r, R_t = q).
    let mut lower_cum = vec![vec![0u64; s + 1]; s + 1];
    let mut upper_cum = vec![vec![0u64; s + 2]; s + 1];
    for q in 1..=s {
        for r in 1..=s {
            lower_cum[q][r] = lower_cum[q][r - 1] + cnt_lower[q][r];
        }
        for r in (1..=s).rev() {
            upper_cum[q][r] = upper_cum[q][r + 1] + cnt_upper[q][r];
        }
    }
    let support: Vec<usize> = (1..=s).filter(|&q| cnt_t[q] > 0).collect();
    for (i, &q) in support.iter().enumerate() {
        for &qp in &support[i..] {
            for r in 1..=s {
                // P(R_{t-1} <= r | R_t = q) >= P(R_{t-1} <= r | R_t = q').
                let lhs = lower_cum[q][r] as u128 * cnt_t[qp] as u128;
                let rhs = lower_cum[qp][r] as u128 * cnt_t[q] as u128;
                if lhs < rhs {
                    violations += 1;
                }
                if has_upper {
                    // P(R_{t+1} >= r | R_t = q) <= P(R_{t+1} >= r | R_t = q').
                    let lhs = upper_cum[q][r] as u128 * cnt_t[qp] as u128;
                    let rhs = upper_cum[qp][r] as u128 * cnt_t[q] as u128;
                    if lhs > rhs {
                        violations += 1;
                    }
                }
            }
        }
    }

    let mut max_closed_form_gap = 0.0f64;
    for &q in &support {
        let denom: u128 = (1..q)
            .map(|l| binom_u128((l - 1) as u64, (t - 2) as u64).expect("small binomial"))
            .sum();
        if denom == 0 {
            continue;
        }
        let mut numer: u128 = 0;
        #[allow(clippy::needless_range_loop)]
        for r in 1..q {
            numer += binom_u128((r - 1) as u64, (t - 2) as u64).expect("small binomial");
            let closed_form = numer as f64 / denom as f64;
            let enumerated = lower_cum[q][r] as f64 / cnt_t[q] as f64;
            max_closed_form_gap = max_closed_form_gap.max((closed_form - enumerated).abs());
        }
    }

    let mut max_factorization_gap = 0.0f64;
    if has_upper {
        for &q in &support {
            let total = cnt_t[q] as f64;
            for l in 1..q {
                for v in (q + 1)..=s {
                    let joint = cnt_joint[(q * (s + 1) + l) * (s + 1) + v] as f64 / total;
                    let product =
                        (cnt_lower[q][l] as f64 / total) * (cnt_upper[q][v] as f64 / total);
                    max_factorization_gap = max_factorization_gap.max((joint - product).abs());
                }
            }
        }
    }

    Ok(StochasticOrderReport {
        n,
        m,
        t,
        violations,
        max_closed_form_gap,
        max_factorization_gap,
    })
}
