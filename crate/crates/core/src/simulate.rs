//! Seeded Monte Carlo experiments measuring FDR and power of the detection
//! methods on synthetic data.
//!
//! A [`Scenario`] is a complete, serializable experiment description: data
//! samplers, group-size rule, null proportion, score choice, quantile rule,
//! alpha grid, replicate count, and master seed. Group sizes and truth
//! assignments are drawn once from the scenario seed; replicate `r`'s data
//! depends only on `(seed, r)`, never on execution order or worker count, so
//! a rerun with any parallelism produces byte-identical results.

use std::collections::hash_map::Entry;
use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Cauchy, Distribution, Gamma, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::combinatorics::{
    rank_weights, scaled_rank, two_quantile_weights, TwoQuantileWeightTable, WeightTable,
};
use crate::error::{Error, Result};
use crate::pvalues::{
    batch_conformal_pvalue_with_table, multi_quantile_pvalue_with_table, permutation_pvalue,
    ranksum_pvalue_with_distribution, subsampling_pvalue, ztest_pvalue, ztest_pvalue_pooled_sd,
    MannWhitneyDistribution, PermutationStatistic,
};
use crate::scores::{
    fit_score, FitOptions, Observation, SampleGroup, ScoreKind, ScoreSpec, TiePolicy,
};
use crate::seeding::mix;
use crate::testing::{
    bh_procedure, evaluate, partitioned_detect, QuantileSpec, TruthLabels, TwoArmGroup,
};

const STREAM_SIZES: u64 = 0;
const STREAM_DATA: u64 = 2;
const STREAM_TIES: u64 = 3;
const STREAM_COEFFS: u64 = 4;
const STREAM_TRAIN: u64 = 5;
const STREAM_METHOD_BASE: u64 = 16;

/// Data-generating family of a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Family {
    /// Null `N(mean, sd^2)`; alternatives shift the mean by `delta` and may
    /// change the standard deviation to `sd_alt`.
    Normal {
        mean: f64,
        sd: f64,
        delta: f64,
        #[serde(default)]
        sd_alt: Option<f64>,
    },
    /// Null `0.5 Cauchy(0,1) + 0.5 Unif[-1,1]`; alternatives add a location
    /// shift `delta`.
    CauchyUniformMix { delta: f64 },
    /// Ten uniform features with a five-dimensional outcome: a correlated
    /// Gaussian block, a Gamma component, and a Beta component. Group-level
    /// shift strength `t` takes integer levels; `t_counts[i]` groups get
    /// level `i + 1` and the remaining groups are null (`t = 0`).
    Multivariate {
        train_size: usize,
        t_counts: Vec<usize>,
        /// Interpret the Gamma parameter 2 as a rate instead of a scale.
        #[serde(default)]
        gamma_rate: bool,
    },
}

/// How per-group sample sizes are drawn (once per scenario seed).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case")]
pub enum GroupSizeRule {
    Fixed { size: usize },
    Uniform { lo: usize, hi: usize },
    PoissonPlus { base: usize, mean: f64 },
}

/// Score function used by the conformal methods of a scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreChoice {
    Identity,
    NegatedIdentity,
    /// Componentwise-residual Mahalanobis score.
    ResidualMahalanobis,
    /// Sequentially conditioned residuals in natural component order.
    SequentialResiduals,
    /// Sequentially conditioned residuals in reversed component order (a
    /// deliberately mis-specified conditioning).
    ReversedSequentialResiduals,
}

/// A detection method evaluated inside the Monte Carlo loop.
///
/// The two-sample baselines (z-test, pooled-SD z-test, permutation,
/// rank-sum) operate on the same score scale as the conformal methods, which
/// for identity scores is the raw outcome scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum MethodChoice {
    /// Batch conformal p-values at the scenario's quantile rule.
    #[serde(rename = "batch")]
    Batch,
    /// Two-quantile p-values with ceil-resolved ranks at levels `q1 < q2`.
    #[serde(rename = "multiquantile")]
    MultiQuantile { q1: f64, q2: f64 },
    /// Single-point conformal p-values.
    #[serde(rename = "subsampling")]
    Subsampling,
    /// Batch conformal against a disjoint reference chunk per group.
    #[serde(rename = "partitioned")]
    Partitioned,
    /// Two-sample z-test with known sigma.
    #[serde(rename = "ztest-oracle")]
    ZTestOracle { sigma: f64 },
    /// Two-sample z-test with pooled-sample-SD estimate.
    #[serde(rename = "ttest")]
    TTest,
    /// Randomized permutation test.
    #[serde(rename = "permutation")]
    Permutation {
        statistic: PermutationStatistic,
        permutations: usize,
    },
    /// One-sided rank-sum test, exact via the counting recursion.
    #[serde(rename = "ranksum")]
    RankSum,
}

impl MethodChoice {
    /// Stable label used in result rows.
    pub fn label(&self) -> String {
        match self {
            MethodChoice::Batch => "batch".into(),
            MethodChoice::MultiQuantile { q1, q2 } => format!("multiquantile-{q1}-{q2}"),
            MethodChoice::Subsampling => "subsampling".into(),
            MethodChoice::Partitioned => "partitioned".into(),
            MethodChoice::ZTestOracle { .. } => "ztest-oracle".into(),
            MethodChoice::TTest => "ttest".into(),
            MethodChoice::Permutation { statistic, .. } => match statistic {
                PermutationStatistic::MeanDiff => "permutation-mean".into(),
                PermutationStatistic::QuantileDiff(tau) => format!("permutation-q{tau}"),
            },
            MethodChoice::RankSum => "ranksum".into(),
        }
    }
}

fn default_methods() -> Vec<MethodChoice> {
    vec![MethodChoice::Batch]
}

fn default_score() -> ScoreChoice {
    ScoreChoice::Identity
}

fn default_knn_k() -> usize {
    10
}

fn default_tie_policy() -> TiePolicy {
    TiePolicy::default()
}

/// A complete simulation experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub family: Family,
    /// Reference sample size (the calibration-set size for the multivariate
    /// family, which draws its training set separately).
    pub n: usize,
    /// Number of comparison groups.
    pub groups: usize,
    pub group_sizes: GroupSizeRule,
    /// Fraction of groups that are null; the first `round(p * K)` groups.
    pub null_proportion: f64,
    #[serde(default = "default_score")]
    pub score: ScoreChoice,
    #[serde(default = "default_knn_k")]
    pub knn_k: usize,
    pub quantile: QuantileSpec,
    pub alphas: Vec<f64>,
    pub replicates: usize,
    pub seed: u64,
    #[serde(default = "default_tie_policy")]
    pub tie_policy: TiePolicy,
    #[serde(default = "default_methods")]
    pub methods: Vec<MethodChoice>,
}

impl Scenario {
    fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::InvalidInput("scenario: empty name".into()));
        }
        if self.n < 1 || self.groups < 1 || self.replicates < 1 {
            return Err(Error::InvalidInput(
                "scenario: n, groups, and replicates must be at least 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.null_proportion) {
            return Err(Error::InvalidInput(format!(
                "scenario: null_proportion = {} outside [0, 1]",
                self.null_proportion
            )));
        }
        if self.alphas.is_empty() || self.alphas.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
            return Err(Error::InvalidInput(
                "scenario: alphas must be a nonempty list inside (0, 1)".into(),
            ));
        }
        match &self.family {
            Family::Normal { sd, sd_alt, .. } => {
                if sd.is_nan() || *sd <= 0.0 || sd_alt.is_some_and(|s| s.is_nan() || s <= 0.0) {
                    return Err(Error::InvalidInput("scenario: sd must be positive".into()));
                }
            }
            Family::CauchyUniformMix { .. } => {}
            Family::Multivariate {
                train_size,
                t_counts,
                ..
            } => {
                if *train_size < 6 {
                    return Err(Error::InvalidInput(
                        "scenario: multivariate train_size must exceed the outcome dimension"
                            .into(),
                    ));
                }
                let shifted: usize = t_counts.iter().sum();
                if shifted > self.groups {
                    return Err(Error::InvalidInput(format!(
                        "scenario: t_counts allocate {shifted} groups but only {} exist",
                        self.groups
                    )));
                }
                let nulls = self.groups - shifted;
                let implied = nulls as f64 / self.groups as f64;
                if (implied - self.null_proportion).abs() > 1e-9 {
                    return Err(Error::InvalidInput(format!(
                        "scenario: null_proportion = {} but t_counts imply {implied}",
                        self.null_proportion
                    )));
                }
                if !matches!(
                    self.score,
                    ScoreChoice::ResidualMahalanobis
                        | ScoreChoice::SequentialResiduals
                        | ScoreChoice::ReversedSequentialResiduals
                ) {
                    return Err(Error::InvalidInput(
                        "scenario: the multivariate family needs a residual-based score".into(),
                    ));
                }
            }
        }
        if matches!(
            self.family,
            Family::Normal { .. } | Family::CauchyUniformMix { .. }
        ) && !matches!(
            self.score,
            ScoreChoice::Identity | ScoreChoice::NegatedIdentity
        ) {
            return Err(Error::InvalidInput(
                "scenario: univariate families support identity scores only".into(),
            ));
        }
        Ok(())
    }

    /// Per-group sample sizes, a function of the scenario seed only.
    pub fn group_sizes(&self) -> Result<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed, STREAM_SIZES, 0));
        (0..self.groups)
            .map(|_| match self.group_sizes {
                GroupSizeRule::Fixed { size } => {
                    if size < 1 {
                        Err(Error::InvalidInput("group size must be at least 1".into()))
                    } else {
                        Ok(size)
                    }
                }
                GroupSizeRule::Uniform { lo, hi } => {
                    if lo < 1 || hi < lo {
                        Err(Error::InvalidInput(format!(
                            "uniform group-size rule needs 1 <= lo <= hi, got [{lo}, {hi}]"
                        )))
                    } else {
                        Ok(rng.gen_range(lo..=hi))
                    }
                }
                GroupSizeRule::PoissonPlus { base, mean } => {
                    let poisson = Poisson::new(mean).map_err(|_| {
                        Error::InvalidInput(format!("Poisson mean {mean} must be positive"))
                    })?;
                    Ok(base + poisson.sample(&mut rng) as usize)
                }
            })
            .collect()
    }

    /// Null/non-null assignment; the first `round(p_null * K)` groups are
    /// null. For the multivariate family the `t_counts` allocation follows
    /// the null block in level order.
    pub fn truth(&self) -> TruthLabels {
        let nulls = match &self.family {
            Family::Multivariate { t_counts, .. } => self.groups - t_counts.iter().sum::<usize>(),
            _ => (self.null_proportion * self.groups as f64).round() as usize,
        };
        let mut is_null = vec![false; self.groups];
        for flag in is_null.iter_mut().take(nulls.min(self.groups)) {
            *flag = true;
        }
        TruthLabels::new(is_null)
    }

    /// Shift level per group for the multivariate family (0 = null).
    fn t_levels(&self) -> Vec<u32> {
        match &self.family {
            Family::Multivariate { t_counts, .. } => {
                let nulls = self.groups - t_counts.iter().sum::<usize>();
                let mut levels = vec![0u32; nulls];
                for (i, count) in t_counts.iter().enumerate() {
                    levels.extend(std::iter::repeat_n(i as u32 + 1, *count));
                }
                levels
            }
            _ => self
                .truth()
                .is_null
                .iter()
                .map(|null| if *null { 0 } else { 1 })
                .collect(),
        }
    }
}

fn sample_univariate(family: &Family, null: bool, count: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match family {
        Family::Normal {
            mean,
            sd,
            delta,
            sd_alt,
        } => {
            let (mu, sigma) = if null {
                (*mean, *sd)
            } else {
                (*mean + *delta, sd_alt.unwrap_or(*sd))
            };
            let normal = Normal::new(mu, sigma).expect("validated sd");
            (0..count).map(|_| normal.sample(rng)).collect()
        }
        Family::CauchyUniformMix { delta } => {
            let cauchy = Cauchy::new(0.0, 1.0).expect("unit Cauchy");
            let shift = if null { 0.0 } else { *delta };
            (0..count)
                .map(|_| {
                    let draw = if rng.gen_bool(0.5) {
                        cauchy.sample(rng)
                    } else {
                        rng.gen_range(-1.0..1.0)
                    };
                    draw + shift
                })
                .collect()
        }
        Family::Multivariate { .. } => unreachable!("validated: univariate sampler"),
    }
}

/// Generates one replicate of a univariate scenario. Group sizes come from
/// the scenario seed; the draws come from `(seed, replicate)`.
pub fn gen_univariate(
    scenario: &Scenario,
    replicate: usize,
) -> Result<(SampleGroup, Vec<SampleGroup>, TruthLabels)> {
    scenario.validate()?;
    if matches!(scenario.family, Family::Multivariate { .. }) {
        return Err(Error::InvalidInput(
            "gen_univariate: scenario has a multivariate family".into(),
        ));
    }
    let sizes = scenario.group_sizes()?;
    let truth = scenario.truth();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(scenario.seed, STREAM_DATA, replicate as u64));
    let reference = SampleGroup::from_values(
        "reference",
        &sample_univariate(&scenario.family, true, scenario.n, &mut rng),
    );
    let groups = sizes
        .iter()
        .enumerate()
        .map(|(k, size)| {
            SampleGroup::from_values(
                format!("group-{:03}", k + 1),
                &sample_univariate(&scenario.family, truth.is_null[k], *size, &mut rng),
            )
        })
        .collect();
    Ok((reference, groups, truth))
}

struct MultivariateCoefficients {
    beta1: [[f64; 3]; 10],
    beta2: [f64; 10],
    beta3: [f64; 10],
    chol: nalgebra::Matrix3<f64>,
}

fn multivariate_coefficients(seed: u64) -> MultivariateCoefficients {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, STREAM_COEFFS, 0));
    let mut beta1 = [[0.0; 3]; 10];
    for row in beta1.iter_mut() {
        for b in row.iter_mut() {
            *b = rng.gen::<f64>();
        }
    }
    let mut beta2 = [0.0; 10];
    let mut beta3 = [0.0; 10];
    for b in beta2.iter_mut() {
        *b = rng.gen::<f64>();
    }
    for b in beta3.iter_mut() {
        *b = rng.gen::<f64>();
    }
    // Covariance 2 - |i - j| on the Gaussian block.
    let sigma = nalgebra::Matrix3::new(2.0, 1.0, 0.0, 1.0, 2.0, 1.0, 0.0, 1.0, 2.0);
    let chol = sigma.cholesky().expect("positive definite").l();
    MultivariateCoefficients {
        beta1,
        beta2,
        beta3,
        chol,
    }
}

fn sample_multivariate_row(
    coeffs: &MultivariateCoefficients,
    t: u32,
    gamma_rate: bool,
    rng: &mut ChaCha8Rng,
) -> Observation {
    let standard = Normal::new(0.0, 1.0).expect("standard normal");
    loop {
        let x: Vec<f64> = (0..10).map(|_| rng.gen::<f64>()).collect();
        let b2x: f64 = coeffs.beta2.iter().zip(&x).map(|(b, v)| b * v).sum();
        let b3x: f64 = coeffs.beta3.iter().zip(&x).map(|(b, v)| b * v).sum();
        let shift = t as f64 * b2x.abs().powi(2);
        let mut mu = [0.0f64; 3];
        for (j, m) in mu.iter_mut().enumerate() {
            *m = coeffs
                .beta1
                .iter()
                .zip(&x)
                .map(|(row, v)| row[j] * v)
                .sum::<f64>()
                + shift;
        }
        let z = nalgebra::Vector3::new(
            standard.sample(rng),
            standard.sample(rng),
            standard.sample(rng),
        );
        let gauss = nalgebra::Vector3::new(mu[0], mu[1], mu[2]) + coeffs.chol * z;
        let (y1, y2, y3) = (gauss[0], gauss[1], gauss[2]);
        let gamma_shape = (t as f64 * b3x.abs() + y1 * y1 + y2 * y2) / 2.0;
        let beta_a = y1.abs();
        let beta_b = y2.abs() + y3.abs() / 2.0;
        // Zero parameters have probability zero but can occur in floating
        // point; redraw the row.
        if gamma_shape <= 0.0 || beta_a <= 0.0 || beta_b <= 0.0 {
            continue;
        }
        let gamma_scale = if gamma_rate { 0.5 } else { 2.0 };
        let y4 = Gamma::new(gamma_shape, gamma_scale)
            .expect("positive shape and scale")
            .sample(rng);
        let y5 = Beta::new(beta_a, beta_b)
            .expect("positive Beta parameters")
            .sample(rng);
        return Observation::new(x, vec![y1, y2, y3, y4, y5]);
    }
}

/// Generates one replicate of the multivariate scenario: a fresh training
/// split, the reference (calibration) set, the comparison groups, and truth.
pub fn gen_multivariate(
    scenario: &Scenario,
    replicate: usize,
) -> Result<(Vec<Observation>, SampleGroup, Vec<SampleGroup>, TruthLabels)> {
    scenario.validate()?;
    let (train_size, gamma_rate) = match &scenario.family {
        Family::Multivariate {
            train_size,
            gamma_rate,
            ..
        } => (*train_size, *gamma_rate),
        _ => {
            return Err(Error::InvalidInput(
                "gen_multivariate: scenario family is univariate".into(),
            ))
        }
    };
    let coeffs = multivariate_coefficients(scenario.seed);
    let sizes = scenario.group_sizes()?;
    let truth = scenario.truth();
    let levels = scenario.t_levels();

    let mut train_rng =
        ChaCha8Rng::seed_from_u64(mix(scenario.seed, STREAM_TRAIN, replicate as u64));
    let training: Vec<Observation> = (0..train_size)
        .map(|_| sample_multivariate_row(&coeffs, 0, gamma_rate, &mut train_rng))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(mix(scenario.seed, STREAM_DATA, replicate as u64));
    let reference = SampleGroup::new(
        "reference",
        (0..scenario.n)
            .map(|_| sample_multivariate_row(&coeffs, 0, gamma_rate, &mut rng))
            .collect::<Vec<_>>(),
    );
    let groups: Vec<SampleGroup> = sizes
        .iter()
        .zip(&levels)
        .enumerate()
        .map(|(k, (size, t))| {
            SampleGroup::new(
                format!("group-{:03}", k + 1),
                (0..*size)
                    .map(|_| sample_multivariate_row(&coeffs, *t, gamma_rate, &mut rng))
                    .collect::<Vec<_>>(),
            )
        })
        .collect();
    Ok((training, reference, groups, truth))
}

/// One aggregated result row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimRow {
    pub scenario: String,
    pub method: String,
    pub alpha: f64,
    pub fdr: f64,
    pub fdr_se: f64,
    pub power: f64,
    pub power_se: f64,
    pub replicates: usize,
    pub warning: String,
}

/// Aggregated Monte Carlo results for one scenario.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimResult {
    pub rows: Vec<SimRow>,
}

impl SimResult {
    /// Renders the result as CSV with a fixed column set
    /// (`scenario,method,alpha,fdr,fdr_se,power,power_se,replicates,warning`).
    pub fn to_csv_string(&self) -> String {
        let mut out =
            String::from("scenario,method,alpha,fdr,fdr_se,power,power_se,replicates,warning\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                row.scenario,
                row.method,
                row.alpha,
                row.fdr,
                row.fdr_se,
                row.power,
                row.power_se,
                row.replicates,
                row.warning
            ));
        }
        out
    }

    pub fn row(&self, method: &str, alpha: f64) -> Option<&SimRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.alpha == alpha)
    }
}

struct Precomputed {
    batch_tables: HashMap<(usize, usize), WeightTable>,
    two_q_tables: HashMap<(usize, usize, usize), TwoQuantileWeightTable>,
    ranksum: HashMap<usize, MannWhitneyDistribution>,
}

fn precompute(
    scenario: &Scenario,
    methods: &[MethodChoice],
    sizes: &[usize],
) -> Result<Precomputed> {
    let n = scenario.n;
    let mut pre = Precomputed {
        batch_tables: HashMap::new(),
        two_q_tables: HashMap::new(),
        ranksum: HashMap::new(),
    };
    for method in methods {
        match method {
            MethodChoice::Batch => {
                for &m in sizes {
                    let eta = scenario.quantile.resolve(m)?;
                    if let Entry::Vacant(slot) = pre.batch_tables.entry((m, eta)) {
                        slot.insert(rank_weights(n, m, eta)?);
                    }
                }
            }
            MethodChoice::MultiQuantile { q1, q2 } => {
                for &m in sizes {
                    let eta1 = QuantileSpec::QuantileCeil(*q1).resolve(m)?;
                    let eta2 = QuantileSpec::QuantileCeil(*q2).resolve(m)?;
                    if eta1 >= eta2 {
                        return Err(Error::InvalidInput(format!(
                            "multiquantile levels ({q1}, {q2}) resolve to equal ranks for group size {m}"
                        )));
                    }
                    if let Entry::Vacant(slot) = pre.two_q_tables.entry((m, eta1, eta2)) {
                        let et1 = scaled_rank(eta1, m, n)?;
                        let et2 = scaled_rank(eta2, m, n)?;
                        slot.insert(two_quantile_weights(n, m, eta1, eta2, et1, et2)?);
                    }
                }
            }
            MethodChoice::RankSum => {
                for &m in sizes {
                    if n * m <= 10_000 {
                        if let Entry::Vacant(slot) = pre.ranksum.entry(m) {
                            slot.insert(MannWhitneyDistribution::new(n, m)?);
                        }
                    }
                }
            }
            _ => {}
        }
    }
    Ok(pre)
}

fn build_score_spec(scenario: &Scenario, training: &[Observation]) -> Result<ScoreSpec> {
    let options = FitOptions {
        knn_k: scenario.knn_k,
        ..FitOptions::default()
    };
    match scenario.score {
        ScoreChoice::Identity => fit_score(ScoreKind::Identity, training, &options),
        ScoreChoice::NegatedIdentity => fit_score(ScoreKind::NegatedIdentity, training, &options),
        ScoreChoice::ResidualMahalanobis => fit_score(ScoreKind::Mahalanobis, training, &options),
        ScoreChoice::SequentialResiduals => {
            fit_score(ScoreKind::SequentialMahalanobis, training, &options)
        }
        ScoreChoice::ReversedSequentialResiduals => {
            let dim = training
                .first()
                .map(|o| o.outcome.len())
                .unwrap_or_default();
            let options = FitOptions {
                ordering: Some((0..dim).rev().collect()),
                ..options
            };
            fit_score(ScoreKind::SequentialMahalanobis, training, &options)
        }
    }
}

/// Per-replicate metrics: `per_method[mi][ai] = (fdp, power)`.
type ReplicateMetrics = Vec<Vec<(f64, f64)>>;

fn run_replicate(
    scenario: &Scenario,
    methods: &[MethodChoice],
    pre: &Precomputed,
    replicate: usize,
) -> Result<ReplicateMetrics> {
    let multivariate = matches!(scenario.family, Family::Multivariate { .. });
    let (training, reference, groups, truth) = if multivariate {
        gen_multivariate(scenario, replicate)?
    } else {
        let (reference, groups, truth) = gen_univariate(scenario, replicate)?;
        (Vec::new(), reference, groups, truth)
    };
    let spec = build_score_spec(scenario, &training)?;
    let set = crate::scores::apply_scores(
        &spec,
        &reference.observations,
        &groups,
        scenario.tie_policy,
        mix(scenario.seed, STREAM_TIES, replicate as u64),
    )?;
    let k = groups.len();

    let mut metrics = Vec::with_capacity(methods.len());
    for (mi, method) in methods.iter().enumerate() {
        let pvalues: Vec<f64> = match method {
            MethodChoice::Batch => set
                .groups
                .iter()
                .map(|g| {
                    let eta = scenario.quantile.resolve(g.scores.len())?;
                    let table = &pre.batch_tables[&(g.scores.len(), eta)];
                    Ok(batch_conformal_pvalue_with_table(&set.reference, &g.scores, table)?.p)
                })
                .collect::<Result<_>>()?,
            MethodChoice::MultiQuantile { q1, q2 } => set
                .groups
                .iter()
                .map(|g| {
                    let m = g.scores.len();
                    let eta1 = QuantileSpec::QuantileCeil(*q1).resolve(m)?;
                    let eta2 = QuantileSpec::QuantileCeil(*q2).resolve(m)?;
                    let table = &pre.two_q_tables[&(m, eta1, eta2)];
                    Ok(multi_quantile_pvalue_with_table(&set.reference, &g.scores, table)?.p)
                })
                .collect::<Result<_>>()?,
            MethodChoice::Subsampling => set
                .groups
                .iter()
                .enumerate()
                .map(|(gi, g)| {
                    let seed = mix(
                        scenario.seed,
                        STREAM_METHOD_BASE + mi as u64,
                        (replicate * k + gi) as u64,
                    );
                    Ok(subsampling_pvalue(&set.reference, &g.scores, seed)?.p)
                })
                .collect::<Result<_>>()?,
            MethodChoice::Partitioned => {
                let detection = partitioned_detect(
                    &reference,
                    &groups,
                    &spec,
                    &scenario.quantile,
                    scenario.alphas[0],
                    scenario.tie_policy,
                    mix(
                        scenario.seed,
                        STREAM_METHOD_BASE + mi as u64,
                        replicate as u64,
                    ),
                )?;
                detection.records.iter().map(|r| r.p).collect()
            }
            MethodChoice::ZTestOracle { sigma } => set
                .groups
                .iter()
                .map(|g| Ok(ztest_pvalue(&set.reference, &g.scores, *sigma)?.p))
                .collect::<Result<_>>()?,
            MethodChoice::TTest => set
                .groups
                .iter()
                .map(|g| Ok(ztest_pvalue_pooled_sd(&set.reference, &g.scores)?.p))
                .collect::<Result<_>>()?,
            MethodChoice::Permutation {
                statistic,
                permutations,
            } => set
                .groups
                .iter()
                .enumerate()
                .map(|(gi, g)| {
                    let mut pooled = set.reference.clone();
                    pooled.extend_from_slice(&g.scores);
                    let seed = mix(
                        scenario.seed,
                        STREAM_METHOD_BASE + mi as u64,
                        (replicate * k + gi) as u64,
                    );
                    Ok(permutation_pvalue(
                        &pooled,
                        set.reference.len(),
                        *statistic,
                        *permutations,
                        seed,
                    )?
                    .p)
                })
                .collect::<Result<_>>()?,
            MethodChoice::RankSum => set
                .groups
                .iter()
                .map(|g| {
                    let dist = pre.ranksum.get(&g.scores.len()).ok_or_else(|| {
                        Error::SizeBound(format!(
                            "rank-sum exact distribution unavailable for n*m = {}",
                            set.reference.len() * g.scores.len()
                        ))
                    })?;
                    Ok(ranksum_pvalue_with_distribution(&set.reference, &g.scores, dist)?.p)
                })
                .collect::<Result<_>>()?,
        };
        let mut per_alpha = Vec::with_capacity(scenario.alphas.len());
        for &alpha in &scenario.alphas {
            let outcome = bh_procedure(&pvalues, alpha)?;
            let record = evaluate(&outcome, &truth)?;
            per_alpha.push((record.fdp, record.power));
        }
        metrics.push(per_alpha);
    }
    Ok(metrics)
}

/// Runs the scenario's Monte Carlo experiment for the given methods.
///
/// Replicates are independent work units executed in parallel; aggregation
/// folds them in replicate order, so the result is identical for any worker
/// count.
pub fn run_monte_carlo(scenario: &Scenario, methods: &[MethodChoice]) -> Result<SimResult> {
    scenario.validate()?;
    if methods.is_empty() {
        return Err(Error::InvalidInput("run_monte_carlo: no methods selected".into()));
    }
    let sizes = scenario.group_sizes()?;
    let mut distinct = sizes.clone();
    distinct.sort_unstable();
    distinct.dedup();
    let pre = precompute(scenario, methods, &distinct)?;

    let all_metrics: Vec<ReplicateMetrics> = (0..scenario.replicates)
        .into_par_iter()
        .map(|r| run_replicate(scenario, methods, &pre, r))
        .collect::<Result<_>>()?;

    let reps = scenario.replicates;
    let warning = if reps < 2 {
        "se-undefined-single-replicate".to_string()
    } else {
        String::new()
    };
    let mut rows = Vec::new();
    for (mi, method) in methods.iter().enumerate() {
        for (ai, &alpha) in scenario.alphas.iter().enumerate() {
            let fdps: Vec<f64> = all_metrics.iter().map(|m| m[mi][ai].0).collect();
            let powers: Vec<f64> = all_metrics.iter().map(|m| m[mi][ai].1).collect();
            let (fdr, fdr_se) = mean_and_se(&fdps);
            let (power, power_se) = mean_and_se(&powers);
            rows.push(SimRow {
                scenario: scenario.name.clone(),
                method: method.label(),
                alpha,
                fdr,
                fdr_se,
                power,
                power_se,
                replicates: reps,
                warning: warning.clone(),
            });
        }
    }
    Ok(SimResult { rows })
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Synthetic two-arm fixture for the treatment-effect pipeline.
///
/// Every group (including the reference) gets a standard-normal control arm
/// of the same size. Treated outcomes are drawn by resampling the group's
/// own realized control values, which makes the finite-population null of
/// the empirical-CDF pipeline hold exactly: conditional on the control arms,
/// every group's scored treated outcomes are uniform on the same score grid.
/// Groups listed in `shifted` add the location `shift` to their treated
/// outcomes.
pub fn gen_two_arm_fixture(
    groups: usize,
    control_size: usize,
    treated_size: usize,
    shifted: &[usize],
    shift: f64,
    seed: u64,
) -> Result<(TwoArmGroup, Vec<TwoArmGroup>, TruthLabels)> {
    if groups < 1 || control_size < 1 || treated_size < 1 {
        return Err(Error::InvalidInput(
            "gen_two_arm_fixture: need at least one group and nonempty arms".into(),
        ));
    }
    if shifted.iter().any(|&g| g >= groups) {
        return Err(Error::InvalidInput(
            "gen_two_arm_fixture: shifted index out of range".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, STREAM_DATA, 0));
    let standard = Normal::new(0.0, 1.0).expect("standard normal");
    let mut make_group = |id: String, loc: f64| -> TwoArmGroup {
        let control: Vec<f64> = (0..control_size).map(|_| standard.sample(&mut rng)).collect();
        let treated: Vec<f64> = (0..treated_size)
            .map(|_| control[rng.gen_range(0..control_size)] + loc)
            .collect();
        TwoArmGroup {
            id,
            control,
            treated,
        }
    };
    let reference = make_group("reference".into(), 0.0);
    let mut out = Vec::with_capacity(groups);
    let mut is_null = vec![true; groups];
    for (g, null_flag) in is_null.iter_mut().enumerate() {
        let loc = if shifted.contains(&g) {
            *null_flag = false;
            shift
        } else {
            0.0
        };
        out.push(make_group(format!("group-{:03}", g + 1), loc));
    }
    Ok((reference, out, TruthLabels::new(is_null)))
}
