//! Score-function construction and tie-breaking.
//!
//! A score function maps an observation to a real nonconformity value,
//! oriented so that larger scores indicate departure from the reference law.
//! Scores must be fitted on data disjoint from the inference data (a training
//! split or a control arm); detection validity holds for any such score, so
//! the menu here trades power, not correctness.
//!
//! Conditional means and quantiles are estimated by k-nearest-neighbor
//! regression (configurable `k`), which keeps the fitted artifacts small and
//! deterministic.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pvalues::empirical_quantile_sorted;

/// One data point: an optional feature vector and an outcome vector of
/// dimension at least one.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub features: Vec<f64>,
    pub outcome: Vec<f64>,
}

impl Observation {
    pub fn new(features: Vec<f64>, outcome: Vec<f64>) -> Self {
        Self { features, outcome }
    }

    /// A featureless scalar observation.
    pub fn scalar(value: f64) -> Self {
        Self {
            features: Vec::new(),
            outcome: vec![value],
        }
    }
}

/// One dataset (reference or comparison): an identifier plus observations.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGroup {
    pub id: String,
    pub observations: Vec<Observation>,
}

impl SampleGroup {
    pub fn new(id: impl Into<String>, observations: Vec<Observation>) -> Self {
        Self {
            id: id.into(),
            observations,
        }
    }

    /// Builds a featureless scalar group from raw values.
    pub fn from_values(id: impl Into<String>, values: &[f64]) -> Self {
        Self {
            id: id.into(),
            observations: values.iter().map(|v| Observation::scalar(*v)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }
}

/// The score-function menu.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreKind {
    /// `s(y) = y` for scalar outcomes; detects upward shifts.
    Identity,
    /// `s(y) = -y`; detects downward shifts.
    NegatedIdentity,
    /// `s(x, y) = |y - mu(x)|`; two-sided for scalar outcomes.
    AbsResidual,
    /// Conformalized quantile-regression score
    /// `s(x, y) = max(q_lo(x) - y, y - q_hi(x))`.
    Cqr,
    /// Squared Mahalanobis norm of the componentwise residual vector.
    Mahalanobis,
    /// Mahalanobis score with sequentially conditioned residuals
    /// (component `j` predicted from the features and the previously
    /// ordered components).
    SequentialMahalanobis,
    /// Empirical CDF of a stored control sample, for treatment-effect
    /// comparisons.
    EmpiricalCdf,
}

/// Center estimator used where a location fit is required.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CenterKind {
    Mean,
    Median,
}

/// Options for [`fit_score`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Neighbor count for k-NN regression.
    pub knn_k: usize,
    /// Location estimator for featureless absolute-residual scores. The
    /// Mahalanobis scores always center at the componentwise mean, which is
    /// what the sample covariance is taken around.
    pub center: CenterKind,
    /// Miscoverage level of the CQR interval; quantiles are fitted at
    /// `cqr_alpha / 2` and `1 - cqr_alpha / 2`.
    pub cqr_alpha: f64,
    /// Explicit ridge term added to the residual covariance before
    /// inversion. When unset, a ridge of `1e-8 * trace / p` is applied
    /// automatically if the condition number exceeds 1e12.
    pub ridge: Option<f64>,
    /// Component ordering for [`ScoreKind::SequentialMahalanobis`];
    /// defaults to natural order.
    pub ordering: Option<Vec<usize>>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            knn_k: 10,
            center: CenterKind::Median,
            cqr_alpha: 0.1,
            ridge: None,
            ordering: None,
        }
    }
}

#[derive(Debug, Clone)]
struct KnnRegressor {
    inputs: Vec<Vec<f64>>,
    targets: Vec<f64>,
    k: usize,
}

impl KnnRegressor {
    fn new(inputs: Vec<Vec<f64>>, targets: Vec<f64>, k: usize) -> Self {
        let k = k.clamp(1, targets.len());
        Self { inputs, targets, k }
    }

    fn neighbor_targets(&self, x: &[f64], exclude: Option<usize>) -> Vec<f64> {
        let mut order: Vec<(f64, usize)> = self
            .inputs
            .iter()
            .enumerate()
            .filter(|(i, _)| Some(*i) != exclude)
            .map(|(i, input)| {
                let d2: f64 = input.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
                (d2, i)
            })
            .collect();
        order.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        order
            .iter()
            .take(self.k)
            .map(|(_, i)| self.targets[*i])
            .collect()
    }

    fn predict_mean(&self, x: &[f64], exclude: Option<usize>) -> f64 {
        let neighbors = self.neighbor_targets(x, exclude);
        neighbors.iter().sum::<f64>() / neighbors.len() as f64
    }

    fn predict_quantile(&self, x: &[f64], tau: f64) -> f64 {
        let mut neighbors = self.neighbor_targets(x, None);
        neighbors.sort_unstable_by(f64::total_cmp);
        empirical_quantile_sorted(&neighbors, tau)
    }
}

/// A fitted conditional-mean estimator.
#[derive(Debug, Clone)]
enum MeanEstimator {
    Constant(f64),
    Knn(KnnRegressor),
}

impl MeanEstimator {
    fn predict(&self, x: &[f64]) -> f64 {
        match self {
            MeanEstimator::Constant(c) => *c,
            MeanEstimator::Knn(knn) => knn.predict_mean(x, None),
        }
    }

    fn predict_loo(&self, x: &[f64], index: usize) -> f64 {
        match self {
            MeanEstimator::Constant(c) => *c,
            MeanEstimator::Knn(knn) => {
                if knn.targets.len() > 1 {
                    knn.predict_mean(x, Some(index))
                } else {
                    knn.predict_mean(x, None)
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
enum QuantileEstimator {
    Constant(f64),
    Knn { knn: KnnRegressor, tau: f64 },
}

impl QuantileEstimator {
    fn predict(&self, x: &[f64]) -> f64 {
        match self {
            QuantileEstimator::Constant(c) => *c,
            QuantileEstimator::Knn { knn, tau } => knn.predict_quantile(x, *tau),
        }
    }
}

#[derive(Debug, Clone)]
struct MahalanobisSpec {
    /// One estimator per residual slot.
    mu: Vec<MeanEstimator>,
    /// Inverse of the (possibly ridged) residual covariance.
    precision: nalgebra::DMatrix<f64>,
    /// `ordering[j]` is the outcome component predicted at slot `j`; slot
    /// `j`'s input is the features followed by the outcomes at
    /// `ordering[..j]` when `conditioned` is set.
    ordering: Vec<usize>,
    conditioned: bool,
    feature_dim: usize,
    outcome_dim: usize,
}

impl MahalanobisSpec {
    fn slot_input(&self, obs: &Observation, slot: usize) -> Vec<f64> {
        let mut input = obs.features.clone();
        if self.conditioned {
            for &component in &self.ordering[..slot] {
                input.push(obs.outcome[component]);
            }
        }
        input
    }

    fn score(&self, obs: &Observation) -> f64 {
        let residuals: Vec<f64> = (0..self.outcome_dim)
            .map(|slot| {
                let input = self.slot_input(obs, slot);
                obs.outcome[self.ordering[slot]] - self.mu[slot].predict(&input)
            })
            .collect();
        let r = nalgebra::DVector::from_vec(residuals);
        (r.transpose() * &self.precision * &r)[(0, 0)]
    }
}

/// A fitted score function. Immutable after construction; [`ScoreSpec::apply`]
/// is a pure function of the observation.
#[derive(Debug, Clone)]
pub struct ScoreSpec {
    kind: ScoreKind,
    detail: SpecDetail,
}

#[derive(Debug, Clone)]
enum SpecDetail {
    Plain {
        negate: bool,
    },
    AbsResidual {
        mu: MeanEstimator,
    },
    Cqr {
        q_lo: QuantileEstimator,
        q_hi: QuantileEstimator,
    },
    Mahalanobis(Box<MahalanobisSpec>),
    EmpiricalCdf {
        sorted_controls: Vec<f64>,
    },
}

impl ScoreSpec {
    pub fn kind(&self) -> ScoreKind {
        self.kind
    }

    /// Evaluates the score. Errors on dimension mismatch with the fitted
    /// artifacts.
    pub fn apply(&self, obs: &Observation) -> Result<f64> {
        match &self.detail {
            SpecDetail::Plain { negate } => {
                let y = scalar_outcome(obs)?;
                Ok(if *negate { -y } else { y })
            }
            SpecDetail::AbsResidual { mu } => {
                let y = scalar_outcome(obs)?;
                Ok((y - mu.predict(&obs.features)).abs())
            }
            SpecDetail::Cqr { q_lo, q_hi } => {
                let y = scalar_outcome(obs)?;
                let lo = q_lo.predict(&obs.features);
                let hi = q_hi.predict(&obs.features);
                Ok((lo - y).max(y - hi))
            }
            SpecDetail::Mahalanobis(spec) => {
                if obs.outcome.len() != spec.outcome_dim || obs.features.len() != spec.feature_dim {
                    return Err(Error::Mismatch(format!(
                        "score fitted for feature dim {} and outcome dim {}; observation has ({}, {})",
                        spec.feature_dim,
                        spec.outcome_dim,
                        obs.features.len(),
                        obs.outcome.len()
                    )));
                }
                Ok(spec.score(obs))
            }
            SpecDetail::EmpiricalCdf { sorted_controls } => {
                let y = scalar_outcome(obs)?;
                let count = sorted_controls.partition_point(|v| *v <= y);
                Ok(count as f64 / sorted_controls.len() as f64)
            }
        }
    }
}

fn scalar_outcome(obs: &Observation) -> Result<f64> {
    if obs.outcome.len() != 1 {
        return Err(Error::Mismatch(format!(
            "score expects a scalar outcome, got dimension {}",
            obs.outcome.len()
        )));
    }
    Ok(obs.outcome[0])
}

fn center_of(values: &[f64], center: CenterKind) -> f64 {
    match center {
        CenterKind::Mean => values.iter().sum::<f64>() / values.len() as f64,
        CenterKind::Median => {
            let mut sorted = values.to_vec();
            sorted.sort_unstable_by(f64::total_cmp);
            empirical_quantile_sorted(&sorted, 0.5)
        }
    }
}

fn check_uniform_dims(training: &[Observation]) -> Result<(usize, usize)> {
    let feature_dim = training[0].features.len();
    let outcome_dim = training[0].outcome.len();
    for obs in training {
        if obs.features.len() != feature_dim || obs.outcome.len() != outcome_dim {
            return Err(Error::Mismatch(
                "training observations have inconsistent dimensions".into(),
            ));
        }
    }
    Ok((feature_dim, outcome_dim))
}

fn scalar_targets(training: &[Observation]) -> Result<Vec<f64>> {
    training.iter().map(scalar_outcome).collect()
}

fn mean_estimator(training: &[Observation], k: usize, center: CenterKind) -> Result<MeanEstimator> {
    let targets = scalar_targets(training)?;
    if training[0].features.is_empty() {
        Ok(MeanEstimator::Constant(center_of(&targets, center)))
    } else {
        let inputs = training.iter().map(|o| o.features.clone()).collect();
        Ok(MeanEstimator::Knn(KnnRegressor::new(inputs, targets, k)))
    }
}

fn quantile_estimator(training: &[Observation], k: usize, tau: f64) -> Result<QuantileEstimator> {
    let targets = scalar_targets(training)?;
    if training[0].features.is_empty() {
        let mut sorted = targets;
        sorted.sort_unstable_by(f64::total_cmp);
        Ok(QuantileEstimator::Constant(empirical_quantile_sorted(
            &sorted, tau,
        )))
    } else {
        let inputs = training.iter().map(|o| o.features.clone()).collect();
        Ok(QuantileEstimator::Knn {
            knn: KnnRegressor::new(inputs, targets, k),
            tau,
        })
    }
}

fn invert_covariance(
    mut cov: nalgebra::DMatrix<f64>,
    ridge: Option<f64>,
) -> Result<nalgebra::DMatrix<f64>> {
    let p = cov.nrows();
    let lambda = match ridge {
        Some(l) => l,
        None => {
            let eigenvalues = cov.clone().symmetric_eigenvalues();
            let max_ev = eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let min_ev = eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
            if min_ev > 0.0 && max_ev / min_ev <= 1e12 {
                0.0
            } else {
                1e-8 * cov.trace() / p as f64
            }
        }
    };
    for i in 0..p {
        cov[(i, i)] += lambda;
    }
    cov.cholesky().map(|c| c.inverse()).ok_or_else(|| {
        Error::SingularCovariance(
            "residual covariance is not positive definite even after ridging".into(),
        )
    })
}

fn fit_mahalanobis(
    training: &[Observation],
    options: &FitOptions,
    sequential: bool,
) -> Result<MahalanobisSpec> {
    let (feature_dim, outcome_dim) = check_uniform_dims(training)?;
    if training.len() <= outcome_dim {
        return Err(Error::InvalidInput(format!(
            "need more training rows ({}) than outcome dimensions ({}) to estimate the residual covariance",
            training.len(),
            outcome_dim
        )));
    }
    let ordering: Vec<usize> = match (&options.ordering, sequential) {
        (Some(order), true) => {
            let mut seen = vec![false; outcome_dim];
            if order.len() != outcome_dim
                || order
                    .iter()
                    .any(|&c| c >= outcome_dim || std::mem::replace(&mut seen[c], true))
            {
                return Err(Error::InvalidInput(format!(
                    "ordering {order:?} is not a permutation of 0..{outcome_dim}"
                )));
            }
            order.clone()
        }
        _ => (0..outcome_dim).collect(),
    };

    let mut mu = Vec::with_capacity(outcome_dim);
    for slot in 0..outcome_dim {
        let component = ordering[slot];
        let mut inputs = Vec::with_capacity(training.len());
        let mut targets = Vec::with_capacity(training.len());
        for obs in training {
            let mut input = obs.features.clone();
            if sequential {
                for &c in &ordering[..slot] {
                    input.push(obs.outcome[c]);
                }
            }
            inputs.push(input);
            targets.push(obs.outcome[component]);
        }
        if inputs[0].is_empty() {
            mu.push(MeanEstimator::Constant(center_of(&targets, CenterKind::Mean)));
        } else {
            mu.push(MeanEstimator::Knn(KnnRegressor::new(
                inputs,
                targets,
                options.knn_k,
            )));
        }
    }

    let spec = MahalanobisSpec {
        mu,
        precision: nalgebra::DMatrix::identity(outcome_dim, outcome_dim),
        ordering,
        conditioned: sequential,
        feature_dim,
        outcome_dim,
    };

    // Leave-one-out residuals on the training split keep the covariance from
    // shrinking toward zero when each point is its own nearest neighbor.
    let mut residual_rows = Vec::with_capacity(training.len());
    for (index, obs) in training.iter().enumerate() {
        let row: Vec<f64> = (0..outcome_dim)
            .map(|slot| {
                let input = spec.slot_input(obs, slot);
                obs.outcome[spec.ordering[slot]] - spec.mu[slot].predict_loo(&input, index)
            })
            .collect();
        residual_rows.push(row);
    }
    let n = residual_rows.len();
    let means: Vec<f64> = (0..outcome_dim)
        .map(|j| residual_rows.iter().map(|r| r[j]).sum::<f64>() / n as f64)
        .collect();
    let mut cov = nalgebra::DMatrix::zeros(outcome_dim, outcome_dim);
    for row in &residual_rows {
        for i in 0..outcome_dim {
            for j in 0..outcome_dim {
                cov[(i, j)] += (row[i] - means[i]) * (row[j] - means[j]);
            }
        }
    }
    cov /= (n - 1) as f64;
    let precision = invert_covariance(cov, options.ridge)?;
    Ok(MahalanobisSpec { precision, ..spec })
}

/// Fits a score function of the requested kind on training data that must be
/// disjoint from the inference data.
pub fn fit_score(
    kind: ScoreKind,
    training: &[Observation],
    options: &FitOptions,
) -> Result<ScoreSpec> {
    if training.is_empty() && !matches!(kind, ScoreKind::Identity | ScoreKind::NegatedIdentity) {
        return Err(Error::InvalidInput("fit_score: empty training data".into()));
    }
    let detail = match kind {
        ScoreKind::Identity => SpecDetail::Plain { negate: false },
        ScoreKind::NegatedIdentity => SpecDetail::Plain { negate: true },
        ScoreKind::AbsResidual => SpecDetail::AbsResidual {
            mu: mean_estimator(training, options.knn_k, options.center)?,
        },
        ScoreKind::Cqr => {
            if !(options.cqr_alpha > 0.0 && options.cqr_alpha < 1.0) {
                return Err(Error::Domain(format!(
                    "cqr_alpha = {} outside (0, 1)",
                    options.cqr_alpha
                )));
            }
            SpecDetail::Cqr {
                q_lo: quantile_estimator(training, options.knn_k, options.cqr_alpha / 2.0)?,
                q_hi: quantile_estimator(training, options.knn_k, 1.0 - options.cqr_alpha / 2.0)?,
            }
        }
        ScoreKind::Mahalanobis => {
            SpecDetail::Mahalanobis(Box::new(fit_mahalanobis(training, options, false)?))
        }
        ScoreKind::SequentialMahalanobis => {
            SpecDetail::Mahalanobis(Box::new(fit_mahalanobis(training, options, true)?))
        }
        ScoreKind::EmpiricalCdf => {
            let values = scalar_targets(training)?;
            return empirical_cdf_score(&values);
        }
    };
    Ok(ScoreSpec { kind, detail })
}

/// Score spec mapping an outcome `y` to the fraction of stored control
/// outcomes at or below `y`.
pub fn empirical_cdf_score(control_outcomes: &[f64]) -> Result<ScoreSpec> {
    if control_outcomes.is_empty() {
        return Err(Error::InvalidInput(
            "empirical_cdf_score: empty control arm".into(),
        ));
    }
    let mut sorted_controls = control_outcomes.to_vec();
    sorted_controls.sort_unstable_by(f64::total_cmp);
    Ok(ScoreSpec {
        kind: ScoreKind::EmpiricalCdf,
        detail: SpecDetail::EmpiricalCdf { sorted_controls },
    })
}

/// How exact ties among scores are resolved before rank-based inference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "kebab-case")]
pub enum TiePolicy {
    /// No adjustment; duplicated scores are an error.
    None,
    /// Additive Gaussian noise with standard deviation
    /// `sd_scale * IQR(all scores)`, shared across the reference and every
    /// comparison group so tie resolution is consistent across groups.
    Noise { sd_scale: f64 },
    /// Replace scores by their global ranks, breaking exact ties uniformly
    /// at random.
    UniformRank,
}

impl Default for TiePolicy {
    fn default() -> Self {
        TiePolicy::Noise { sd_scale: 1e-10 }
    }
}

/// Scores of one comparison group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupScores {
    pub id: String,
    pub scores: Vec<f64>,
}

/// Sorted reference scores plus per-group comparison scores, all distinct
/// after tie-breaking.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    /// Reference scores, ascending.
    pub reference: Vec<f64>,
    /// Comparison scores per group, in input group order.
    pub groups: Vec<GroupScores>,
    /// The tie policy that produced this set.
    pub tie_policy: TiePolicy,
    /// The seed the tie policy consumed.
    pub seed: u64,
}

fn all_distinct(values: &[f64]) -> bool {
    let mut sorted = values.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    sorted.windows(2).all(|w| w[0] != w[1])
}

fn apply_noise(values: &mut [f64], sd: f64, rng: &mut ChaCha8Rng) {
    let normal = Normal::new(0.0, sd).expect("positive noise sd");
    for v in values.iter_mut() {
        *v += normal.sample(rng);
    }
}

/// Computes scores for the reference and every comparison group and resolves
/// ties per `tie_policy`. Deterministic given the seed.
pub fn apply_scores(
    spec: &ScoreSpec,
    reference: &[Observation],
    groups: &[SampleGroup],
    tie_policy: TiePolicy,
    seed: u64,
) -> Result<ScoreSet> {
    if reference.is_empty() {
        return Err(Error::InvalidInput("apply_scores: empty reference data".into()));
    }
    let ref_scores: Vec<f64> = reference
        .iter()
        .map(|o| spec.apply(o))
        .collect::<Result<_>>()?;
    let mut group_scores: Vec<GroupScores> = Vec::with_capacity(groups.len());
    for group in groups {
        if group.is_empty() {
            return Err(Error::InvalidInput(format!(
                "apply_scores: group '{}' is empty",
                group.id
            )));
        }
        let scores: Vec<f64> = group
            .observations
            .iter()
            .map(|o| spec.apply(o))
            .collect::<Result<_>>()?;
        group_scores.push(GroupScores {
            id: group.id.clone(),
            scores,
        });
    }
    resolve_ties(ref_scores, group_scores, tie_policy, seed)
}

/// Applies the tie policy to already-computed scores, then sorts the
/// reference. Shared by [`apply_scores`] and pipelines that score each group
/// with its own fitted spec.
pub(crate) fn resolve_ties(
    mut ref_scores: Vec<f64>,
    mut group_scores: Vec<GroupScores>,
    tie_policy: TiePolicy,
    seed: u64,
) -> Result<ScoreSet> {
    let mut all: Vec<f64> = ref_scores.clone();
    for g in &group_scores {
        all.extend_from_slice(&g.scores);
    }

    match tie_policy {
        TiePolicy::None => {
            if !all_distinct(&all) {
                return Err(Error::InvalidInput(
                    "scores contain exact ties and the tie policy is disabled".into(),
                ));
            }
        }
        TiePolicy::Noise { sd_scale } => {
            if sd_scale.is_nan() || sd_scale <= 0.0 {
                return Err(Error::Domain(format!(
                    "noise sd_scale = {sd_scale} must be positive"
                )));
            }
            let mut sorted = all.clone();
            sorted.sort_unstable_by(f64::total_cmp);
            let iqr = empirical_quantile_sorted(&sorted, 0.75)
                - empirical_quantile_sorted(&sorted, 0.25);
            let median = empirical_quantile_sorted(&sorted, 0.5);
            let sd = if iqr > 0.0 {
                sd_scale * iqr
            } else {
                sd_scale * (1.0 + median.abs())
            };
            for attempt in 0..8u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(attempt));
                let mut noisy_ref = ref_scores.clone();
                apply_noise(&mut noisy_ref, sd, &mut rng);
                let mut noisy_groups = group_scores.clone();
                for g in noisy_groups.iter_mut() {
                    apply_noise(&mut g.scores, sd, &mut rng);
                }
                let mut combined = noisy_ref.clone();
                for g in &noisy_groups {
                    combined.extend_from_slice(&g.scores);
                }
                if all_distinct(&combined) {
                    noisy_ref.sort_unstable_by(f64::total_cmp);
                    return Ok(ScoreSet {
                        reference: noisy_ref,
                        groups: noisy_groups,
                        tie_policy,
                        seed,
                    });
                }
            }
            return Err(Error::InvalidInput(
                "tie-breaking noise failed to separate the scores".into(),
            ));
        }
        TiePolicy::UniformRank => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let jitter: Vec<u64> = (0..all.len()).map(|_| rng.gen()).collect();
            let mut order: Vec<usize> = (0..all.len()).collect();
            order.sort_unstable_by(|&a, &b| {
                all[a].total_cmp(&all[b]).then(jitter[a].cmp(&jitter[b]))
            });
            let mut ranks = vec![0.0f64; all.len()];
            for (rank, idx) in order.iter().enumerate() {
                ranks[*idx] = (rank + 1) as f64;
            }
            let ref_len = ref_scores.len();
            ref_scores.copy_from_slice(&ranks[..ref_len]);
            let mut offset = ref_len;
            for g in group_scores.iter_mut() {
                let len = g.scores.len();
                g.scores.copy_from_slice(&ranks[offset..offset + len]);
                offset += len;
            }
        }
    }

    ref_scores.sort_unstable_by(f64::total_cmp);
    Ok(ScoreSet {
        reference: ref_scores,
        groups: group_scores,
        tie_policy,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn scalars(values: &[f64]) -> Vec<Observation> {
        values.iter().map(|v| Observation::scalar(*v)).collect()
    }

    #[test]
    fn identity_score_passes_outcomes_through() {
        let spec = fit_score(ScoreKind::Identity, &[], &FitOptions::default()).unwrap();
        let set = apply_scores(
            &spec,
            &scalars(&[2.0, 1.0, 3.0]),
            &[SampleGroup::from_values("g1", &[2.5])],
            TiePolicy::None,
            0,
        )
        .unwrap();
        assert_eq!(set.reference, vec![1.0, 2.0, 3.0]);
        assert_eq!(set.groups[0].scores, vec![2.5]);
        assert_eq!(set.groups[0].id, "g1");
    }

    #[test]
    fn negated_identity_flips_order() {
        let spec = fit_score(ScoreKind::NegatedIdentity, &[], &FitOptions::default()).unwrap();
        assert_eq!(spec.apply(&Observation::scalar(4.0)).unwrap(), -4.0);
    }

    #[test]
    fn duplicate_scores_error_without_tie_policy() {
        let spec = fit_score(ScoreKind::Identity, &[], &FitOptions::default()).unwrap();
        let result = apply_scores(&spec, &scalars(&[1.0, 1.0]), &[], TiePolicy::None, 0);
        assert!(result.is_err());
    }

    #[test]
    fn noise_policy_separates_duplicates() {
        let spec = fit_score(ScoreKind::Identity, &[], &FitOptions::default()).unwrap();
        let set = apply_scores(
            &spec,
            &scalars(&[1.0, 1.0, 1.0, 2.0]),
            &[SampleGroup::from_values("g1", &[1.0, 2.0])],
            TiePolicy::default(),
            7,
        )
        .unwrap();
        let mut combined = set.reference.clone();
        combined.extend(set.groups[0].scores.iter());
        assert!(all_distinct(&combined));
    }

    #[test]
    fn noise_policy_is_deterministic_given_seed() {
        let spec = fit_score(ScoreKind::Identity, &[], &FitOptions::default()).unwrap();
        let make = || {
            apply_scores(
                &spec,
                &scalars(&[1.0, 1.0, 5.0]),
                &[SampleGroup::from_values("g1", &[1.0, 3.0])],
                TiePolicy::default(),
                99,
            )
            .unwrap()
        };
        assert_eq!(make(), make());
    }

    #[test]
    fn uniform_rank_policy_yields_distinct_ranks() {
        let spec = fit_score(ScoreKind::Identity, &[], &FitOptions::default()).unwrap();
        let set = apply_scores(
            &spec,
            &scalars(&[1.0, 1.0, 1.0]),
            &[SampleGroup::from_values("g1", &[1.0, 1.0])],
            TiePolicy::UniformRank,
            3,
        )
        .unwrap();
        let mut combined = set.reference.clone();
        combined.extend(set.groups[0].scores.iter());
        combined.sort_unstable_by(f64::total_cmp);
        assert_eq!(combined, vec![1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn small_noise_preserves_values_of_separated_inputs() {
        let spec = fit_score(ScoreKind::Identity, &[], &FitOptions::default()).unwrap();
        let values = [0.0, 0.002, 0.01, 0.5, 1.0];
        let set = apply_scores(
            &spec,
            &scalars(&values),
            &[],
            TiePolicy::Noise { sd_scale: 1e-9 },
            11,
        )
        .unwrap();
        // Min gap 1e-3 dwarfs the noise, so the sorted order matches.
        for (orig, noisy) in values.iter().zip(&set.reference) {
            assert!((orig - noisy).abs() < 1e-4);
        }
    }

    #[test]
    fn mahalanobis_with_identity_covariance_is_squared_norm() {
        // Four symmetric points with componentwise mean zero and sample
        // covariance exactly the identity.
        let a = (1.5f64).sqrt();
        let training = vec![
            Observation::new(vec![], vec![a, 0.0]),
            Observation::new(vec![], vec![-a, 0.0]),
            Observation::new(vec![], vec![0.0, a]),
            Observation::new(vec![], vec![0.0, -a]),
        ];
        let spec = fit_score(ScoreKind::Mahalanobis, &training, &FitOptions::default()).unwrap();
        let y = Observation::new(vec![], vec![0.6, -0.8]);
        assert_relative_eq!(spec.apply(&y).unwrap(), 1.0, max_relative = 1e-10);
        let z = Observation::new(vec![], vec![2.0, 1.0]);
        assert_relative_eq!(spec.apply(&z).unwrap(), 5.0, max_relative = 1e-10);
    }

    #[test]
    fn sequential_ordering_changes_the_conditioning() {
        // y2 = 2 * y1 on the training data, so conditioning on y1 with k = 1
        // tracks y2 exactly while the unconditioned estimate cannot.
        let training: Vec<Observation> = (0..8)
            .map(|i| {
                let y1 = i as f64;
                Observation::new(vec![i as f64 / 10.0], vec![y1, 2.0 * y1])
            })
            .collect();
        let options = FitOptions {
            knn_k: 1,
            ..FitOptions::default()
        };
        let sequential =
            fit_score(ScoreKind::SequentialMahalanobis, &training, &options).unwrap();
        let plain = fit_score(ScoreKind::Mahalanobis, &training, &options).unwrap();
        let probe = Observation::new(vec![0.35], vec![3.5, 7.0]);
        let sequential_score = sequential.apply(&probe).unwrap();
        let plain_score = plain.apply(&probe).unwrap();
        assert!(sequential_score.is_finite() && plain_score.is_finite());
        assert_ne!(sequential_score, plain_score);
    }

    #[test]
    fn reversed_ordering_reuses_estimator_slots() {
        let training: Vec<Observation> = (0..10)
            .map(|i| {
                let y1 = i as f64;
                Observation::new(vec![i as f64 / 10.0], vec![y1, y1 * y1 / 10.0])
            })
            .collect();
        let natural = fit_score(
            ScoreKind::SequentialMahalanobis,
            &training,
            &FitOptions {
                knn_k: 2,
                ordering: Some(vec![0, 1]),
                ..FitOptions::default()
            },
        )
        .unwrap();
        let reversed = fit_score(
            ScoreKind::SequentialMahalanobis,
            &training,
            &FitOptions {
                knn_k: 2,
                ordering: Some(vec![1, 0]),
                ..FitOptions::default()
            },
        )
        .unwrap();
        let probe = Observation::new(vec![0.55], vec![5.5, 3.2]);
        assert_ne!(natural.apply(&probe).unwrap(), reversed.apply(&probe).unwrap());
    }

    #[test]
    fn sequential_rejects_non_permutation_ordering() {
        let training = vec![
            Observation::new(vec![], vec![1.0, 2.0]),
            Observation::new(vec![], vec![2.0, 1.0]),
            Observation::new(vec![], vec![0.0, 0.5]),
        ];
        let options = FitOptions {
            ordering: Some(vec![0, 0]),
            ..FitOptions::default()
        };
        assert!(fit_score(ScoreKind::SequentialMahalanobis, &training, &options).is_err());
    }

    #[test]
    fn degenerate_covariance_errors_and_ridge_recovers() {
        let training = vec![
            Observation::new(vec![], vec![1.0, 1.0]),
            Observation::new(vec![], vec![1.0, 1.0]),
            Observation::new(vec![], vec![1.0, 1.0]),
        ];
        let err = fit_score(ScoreKind::Mahalanobis, &training, &FitOptions::default());
        assert!(matches!(err, Err(Error::SingularCovariance(_))));
        let options = FitOptions {
            ridge: Some(1e-6),
            ..FitOptions::default()
        };
        assert!(fit_score(ScoreKind::Mahalanobis, &training, &options).is_ok());
    }

    #[test]
    fn too_few_rows_for_covariance_is_an_error() {
        let training = vec![Observation::new(vec![], vec![1.0, 2.0])];
        assert!(fit_score(ScoreKind::Mahalanobis, &training, &FitOptions::default()).is_err());
    }

    #[test]
    fn cqr_score_is_nonpositive_exactly_inside_the_interval() {
        let values: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let training = scalars(&values);
        let options = FitOptions {
            cqr_alpha: 0.2,
            ..FitOptions::default()
        };
        let spec = fit_score(ScoreKind::Cqr, &training, &options).unwrap();
        let lo = empirical_quantile_sorted(&values, 0.1);
        let hi = empirical_quantile_sorted(&values, 0.9);
        for y in [-1.0, lo, (lo + hi) / 2.0, hi, 10.0] {
            let s = spec.apply(&Observation::scalar(y)).unwrap();
            assert_eq!(s <= 0.0, (lo..=hi).contains(&y), "y = {y}, s = {s}");
        }
    }

    #[test]
    fn empirical_cdf_midpoint_and_boundaries() {
        let spec = empirical_cdf_score(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_relative_eq!(spec.apply(&Observation::scalar(2.5)).unwrap(), 0.5);
        assert_relative_eq!(spec.apply(&Observation::scalar(0.0)).unwrap(), 0.0);
        assert_relative_eq!(spec.apply(&Observation::scalar(4.0)).unwrap(), 1.0);
        assert_relative_eq!(spec.apply(&Observation::scalar(9.0)).unwrap(), 1.0);
    }

    #[test]
    fn empirical_cdf_rejects_empty_control_arm() {
        assert!(empirical_cdf_score(&[]).is_err());
    }

    #[test]
    fn abs_residual_featureless_uses_the_requested_center() {
        let training = scalars(&[0.0, 0.0, 0.0, 10.0]);
        let median_spec =
            fit_score(ScoreKind::AbsResidual, &training, &FitOptions::default()).unwrap();
        assert_relative_eq!(median_spec.apply(&Observation::scalar(1.0)).unwrap(), 1.0);
        let mean_spec = fit_score(
            ScoreKind::AbsResidual,
            &training,
            &FitOptions {
                center: CenterKind::Mean,
                ..FitOptions::default()
            },
        )
        .unwrap();
        assert_relative_eq!(mean_spec.apply(&Observation::scalar(1.0)).unwrap(), 1.5);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let training = vec![
            Observation::new(vec![1.0], vec![1.0, 2.0]),
            Observation::new(vec![2.0], vec![2.0, 1.0]),
            Observation::new(vec![3.0], vec![0.0, 0.5]),
        ];
        let spec = fit_score(ScoreKind::Mahalanobis, &training, &FitOptions::default()).unwrap();
        let bad = Observation::new(vec![1.0, 2.0], vec![1.0, 2.0]);
        assert!(spec.apply(&bad).is_err());
    }

    proptest! {
        #[test]
        fn empirical_cdf_scores_lie_in_unit_interval_and_are_monotone(
            seed in 0u64..500,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let controls: Vec<f64> = (0..20).map(|_| rng.gen::<f64>() * 10.0).collect();
            let spec = empirical_cdf_score(&controls).unwrap();
            let mut probes: Vec<f64> = (0..15).map(|_| rng.gen::<f64>() * 12.0 - 1.0).collect();
            probes.sort_unstable_by(f64::total_cmp);
            let mut last = 0.0;
            for y in probes {
                let s = spec.apply(&Observation::scalar(y)).unwrap();
                prop_assert!((0.0..=1.0).contains(&s));
                prop_assert!(s >= last);
                last = s;
            }
        }

        #[test]
        fn identity_scores_preserve_outcome_order(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let values: Vec<f64> = (0..12).map(|_| rng.gen::<f64>()).collect();
            let spec = fit_score(ScoreKind::Identity, &[], &FitOptions::default()).unwrap();
            let scores: Vec<f64> = values
                .iter()
                .map(|v| spec.apply(&Observation::scalar(*v)).unwrap())
                .collect();
            prop_assert_eq!(scores, values);
        }
    }
}
