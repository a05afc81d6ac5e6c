//! Seeded Monte Carlo validity checks for the sampling-based constructions:
//! null rejection rates stay within three standard errors of the target
//! level, z-test p-values are uniform under the null, and the two-arm
//! pipeline is super-uniform when treated and control arms are exchangeable.

use batch_conformal::pvalues::{permutation_pvalue, ztest_pvalue, PermutationStatistic};
use batch_conformal::scores::TiePolicy;
use batch_conformal::simulate::{
    gen_two_arm_fixture, run_monte_carlo, Family, GroupSizeRule, MethodChoice, Scenario,
    ScoreChoice,
};
use batch_conformal::testing::{evaluate, two_arm_detect, QuantileSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[test]
fn ztest_pvalues_are_uniform_under_the_null() {
    let sigma = 3.0;
    let (n, nk) = (100usize, 40usize);
    let reps = 10_000usize;
    let normal = Normal::new(0.0, sigma).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(314159);
    let mut pvalues = Vec::with_capacity(reps);
    for _ in 0..reps {
        let reference: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
        let comparison: Vec<f64> = (0..nk).map(|_| normal.sample(&mut rng)).collect();
        pvalues.push(ztest_pvalue(&reference, &comparison, sigma).unwrap().p);
    }
    pvalues.sort_unstable_by(f64::total_cmp);
    // Kolmogorov-Smirnov statistic against Unif(0, 1), asymptotic critical
    // value at level 0.01.
    let mut d = 0.0f64;
    for (i, p) in pvalues.iter().enumerate() {
        d = d.max((p - i as f64 / reps as f64).abs());
        d = d.max((p - (i + 1) as f64 / reps as f64).abs());
    }
    let critical = 1.628 / (reps as f64).sqrt();
    assert!(d <= critical, "KS statistic {d} exceeds {critical}");
}

#[test]
fn permutation_test_holds_level_under_the_null() {
    let (n, m, permutations) = (10usize, 10usize, 199usize);
    let reps = 10_000usize;
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(271828);
    let mut rejections = 0usize;
    for r in 0..reps {
        let pooled: Vec<f64> = (0..n + m).map(|_| normal.sample(&mut rng)).collect();
        let record = permutation_pvalue(
            &pooled,
            n,
            PermutationStatistic::MeanDiff,
            permutations,
            rng.gen(),
        )
        .unwrap();
        if record.p <= 0.05 {
            rejections += 1;
        }
        let _ = r;
    }
    let rate = rejections as f64 / reps as f64;
    let band = 3.0 * (0.05f64 * 0.95 / reps as f64).sqrt();
    assert!(rate <= 0.05 + band, "null rejection rate {rate}");
}

#[test]
fn partitioned_detection_controls_fdr_under_independence() {
    let scenario = Scenario {
        name: "partitioned-null".into(),
        family: Family::Normal {
            mean: 0.0,
            sd: 3.0,
            delta: 0.0,
            sd_alt: None,
        },
        n: 100,
        groups: 10,
        group_sizes: GroupSizeRule::Uniform { lo: 20, hi: 30 },
        null_proportion: 1.0,
        score: ScoreChoice::Identity,
        knn_k: 10,
        quantile: QuantileSpec::QuantileCeil(0.5),
        alphas: vec![0.1],
        replicates: 500,
        seed: 99,
        tie_policy: TiePolicy::default(),
        methods: vec![MethodChoice::Partitioned],
    };
    let result = run_monte_carlo(&scenario, &[MethodChoice::Partitioned]).unwrap();
    let row = result.row("partitioned", 0.1).unwrap();
    assert!(
        row.fdr <= 0.1 + 3.0 * row.fdr_se,
        "partitioned FDR {} (SE {})",
        row.fdr,
        row.fdr_se
    );
}

#[test]
fn two_arm_pipeline_is_valid_under_exchangeable_arms() {
    // All groups null: treated and control draws share one distribution and
    // every control arm has the same size, so the scored treated outcomes
    // are exchangeable with the reference's.
    let reps = 500usize;
    let alpha = 0.1;
    let mut fdps = Vec::with_capacity(reps);
    for r in 0..reps {
        let (reference, groups, truth) =
            gen_two_arm_fixture(8, 40, 25, &[], 0.0, 1000 + r as u64).unwrap();
        let detection = two_arm_detect(
            &reference,
            &groups,
            &QuantileSpec::QuantileCeil(0.5),
            alpha,
            TiePolicy::default(),
            r as u64,
        )
        .unwrap();
        fdps.push(evaluate(&detection.bh, &truth).unwrap().fdp);
    }
    let fdr = fdps.iter().sum::<f64>() / reps as f64;
    let sd = (fdps.iter().map(|f| (f - fdr).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
    let se = sd / (reps as f64).sqrt();
    assert!(fdr <= alpha + 3.0 * se, "two-arm null FDR {fdr} (SE {se})");
}
