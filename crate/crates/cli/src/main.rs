//! Command-line front end for batch conformal distribution-shift detection:
//! run detection on CSV data, run simulation scenarios, or compute a single
//! p-value.
//!
//! Exit codes: 0 success (rejections are data, not errors), 2 I/O or parse
//! failure, 3 configuration failure.

mod ingest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use batch_conformal::pvalues::{
    batch_conformal_pvalue, multi_quantile_pvalue, permutation_pvalue, ranksum_pvalue,
    subsampling_pvalue, ztest_pvalue, PValueRecord, PermutationStatistic, RankSumMode,
};
use batch_conformal::scores::{
    fit_score, FitOptions, Observation, SampleGroup, ScoreKind, TiePolicy,
};
use batch_conformal::simulate::{run_monte_carlo, Scenario};
use batch_conformal::testing::{batch_detect, two_arm_detect, Detection, QuantileSpec, TwoArmGroup};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ingest::{ColumnSpec, IngestError};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::Serialize;

const SEED_ENV: &str = "BATCH_CONFORMAL_SEED";
const TRAIN_SPLIT_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Parser)]
#[command(
    name = "batch-conformal",
    version,
    about = "Detect comparison groups whose distribution differs from a reference, with FDR control"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run detection on CSV data and emit a JSON report.
    Detect(DetectArgs),
    /// Run a simulation scenario and emit a CSV of FDR/power estimates.
    Simulate(SimulateArgs),
    /// Compute a single p-value for one reference/comparison pair.
    Pvalue(PvalueArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ScoreArg {
    Identity,
    NegatedIdentity,
    AbsResidual,
    Cqr,
    Mahalanobis,
    SequentialMahalanobis,
    EmpiricalCdf,
}

impl From<ScoreArg> for ScoreKind {
    fn from(value: ScoreArg) -> Self {
        match value {
            ScoreArg::Identity => ScoreKind::Identity,
            ScoreArg::NegatedIdentity => ScoreKind::NegatedIdentity,
            ScoreArg::AbsResidual => ScoreKind::AbsResidual,
            ScoreArg::Cqr => ScoreKind::Cqr,
            ScoreArg::Mahalanobis => ScoreKind::Mahalanobis,
            ScoreArg::SequentialMahalanobis => ScoreKind::SequentialMahalanobis,
            ScoreArg::EmpiricalCdf => ScoreKind::EmpiricalCdf,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TieArg {
    Noise,
    UniformRank,
    None,
}

#[derive(Args)]
struct DetectArgs {
    /// Reference dataset (one CSV). With --data, name the reference group
    /// via --reference-id instead.
    #[arg(long, conflicts_with = "data")]
    reference: Option<PathBuf>,

    /// Comparison dataset, repeatable (one CSV per group).
    #[arg(long = "group", conflicts_with = "data")]
    groups: Vec<PathBuf>,

    /// Long-format CSV holding every group (requires --reference-id).
    #[arg(long, requires = "reference_id")]
    data: Option<PathBuf>,

    /// Group identifier of the reference inside --data.
    #[arg(long)]
    reference_id: Option<String>,

    /// Column holding the group identifier in long format.
    #[arg(long, default_value = "group")]
    group_column: String,

    /// Column holding the outcome values.
    #[arg(long, default_value = "value")]
    value_column: String,

    /// Comma-separated feature columns for fitted scores.
    #[arg(long, value_delimiter = ',')]
    feature_columns: Vec<String>,

    /// Column holding the control/treated arm label (empirical-cdf score).
    #[arg(long, default_value = "arm")]
    arm_column: String,

    /// Score function.
    #[arg(long, value_enum, default_value = "identity")]
    score: ScoreArg,

    /// Fraction of the reference data used to fit the score (fitted scores
    /// only); the rest becomes the calibration reference.
    #[arg(long, default_value_t = 0.5)]
    train_fraction: f64,

    /// Quantile rule: rank:<eta>, q-ceil:<level>, or q-floor:<level>.
    #[arg(long, default_value = "q-ceil:0.5", value_parser = parse_quantile)]
    quantile: QuantileSpec,

    /// Target FDR level.
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,

    /// Tie-breaking policy for scores.
    #[arg(long, value_enum, default_value = "noise")]
    tie: TieArg,

    /// Noise scale (times the score IQR) for the noise tie policy.
    #[arg(long, default_value_t = 1e-10)]
    noise_scale: f64,

    /// Master seed; overrides the BATCH_CONFORMAL_SEED environment variable.
    #[arg(long)]
    seed: Option<u64>,

    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario description (JSON).
    #[arg(long)]
    scenario: PathBuf,

    /// Write the CSV here instead of stdout.
    #[arg(long)]
    output: Option<PathBuf>,

    /// Worker threads for the replicate loop (0 = all cores). The output is
    /// byte-identical for any worker count.
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Batch,
    Multiquantile,
    Subsample,
    Permutation,
    Ranksum,
    Ztest,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum RankSumModeArg {
    Exact,
    NormalApprox,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PermStatArg {
    MeanDiff,
    QuantileDiff,
}

#[derive(Args)]
struct PvalueArgs {
    /// Which p-value construction to run.
    #[arg(long, value_enum)]
    method: MethodArg,

    /// Reference sample CSV.
    #[arg(long = "ref")]
    reference: PathBuf,

    /// Comparison sample CSV.
    #[arg(long = "cmp")]
    comparison: PathBuf,

    /// Column holding the values.
    #[arg(long, default_value = "value")]
    value_column: String,

    /// Comparison rank (batch).
    #[arg(long)]
    eta: Option<usize>,

    /// Quantile level resolved by the ceil rule (batch alternative to --eta).
    #[arg(long)]
    q: Option<f64>,

    /// Lower comparison rank (multiquantile).
    #[arg(long)]
    eta1: Option<usize>,

    /// Upper comparison rank (multiquantile).
    #[arg(long)]
    eta2: Option<usize>,

    /// Permutation test statistic.
    #[arg(long, value_enum)]
    statistic: Option<PermStatArg>,

    /// Quantile level of the quantile-diff permutation statistic.
    #[arg(long)]
    tau: Option<f64>,

    /// Number of random permutations (permutation).
    #[arg(long, short = 'L')]
    permutations: Option<usize>,

    /// Known standard deviation (ztest).
    #[arg(long)]
    sigma: Option<f64>,

    /// Rank-sum evaluation mode.
    #[arg(long, value_enum)]
    mode: Option<RankSumModeArg>,

    /// Seed for randomized methods; overrides BATCH_CONFORMAL_SEED.
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_quantile(raw: &str) -> Result<QuantileSpec, String> {
    let (rule, value) = raw
        .split_once(':')
        .ok_or_else(|| format!("expected rule:value, got '{raw}'"))?;
    match rule {
        "rank" => value
            .parse::<usize>()
            .map(QuantileSpec::Rank)
            .map_err(|_| format!("bad rank '{value}'")),
        "q-ceil" => value
            .parse::<f64>()
            .map(QuantileSpec::QuantileCeil)
            .map_err(|_| format!("bad level '{value}'")),
        "q-floor" => value
            .parse::<f64>()
            .map(QuantileSpec::QuantileFloor)
            .map_err(|_| format!("bad level '{value}'")),
        other => Err(format!("unknown rule '{other}' (use rank, q-ceil, or q-floor)")),
    }
}

enum Failure {
    /// I/O or parse failure: exit 2.
    Io(String),
    /// Configuration failure: exit 3.
    Config(String),
}

impl From<IngestError> for Failure {
    fn from(err: IngestError) -> Self {
        Failure::Io(err.0)
    }
}

fn config_err(err: batch_conformal::Error) -> Failure {
    Failure::Config(err.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Detect(args) => cmd_detect(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Pvalue(args) => cmd_pvalue(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Io(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}

fn resolve_seed(flag: Option<u64>) -> Result<u64, Failure> {
    if let Some(seed) = flag {
        return Ok(seed);
    }
    match std::env::var(SEED_ENV) {
        Ok(raw) => raw
            .parse::<u64>()
            .map_err(|_| Failure::Config(format!("{SEED_ENV}='{raw}' is not a valid seed"))),
        Err(_) => Ok(0),
    }
}

fn tie_policy(tie: TieArg, noise_scale: f64) -> TiePolicy {
    match tie {
        TieArg::Noise => TiePolicy::Noise {
            sd_scale: noise_scale,
        },
        TieArg::UniformRank => TiePolicy::UniformRank,
        TieArg::None => TiePolicy::None,
    }
}

fn write_output(output: Option<&Path>, content: &str) -> Result<(), Failure> {
    match output {
        Some(path) => std::fs::write(path, content)
            .map_err(|e| Failure::Io(format!("{}: {e}", path.display()))),
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct DetectConfigEcho {
    score: ScoreKind,
    quantile: QuantileSpec,
    alpha: f64,
    tie_policy: TiePolicy,
    seed: u64,
    train_fraction: f64,
    value_column: String,
    feature_columns: Vec<String>,
    reference: String,
    groups: Vec<String>,
}

#[derive(Serialize)]
struct BhReport {
    alpha: f64,
    k_star: usize,
    threshold: Option<f64>,
    rejected: Vec<String>,
}

#[derive(Serialize)]
struct DetectReport {
    config: DetectConfigEcho,
    pvalues: Vec<PValueRecord>,
    bh: BhReport,
    version: String,
}

fn detection_report(config: DetectConfigEcho, detection: Detection) -> DetectReport {
    let rejected = detection.rejected_ids();
    DetectReport {
        config,
        bh: BhReport {
            alpha: detection.bh.alpha,
            k_star: detection.bh.k_star,
            threshold: detection.bh.threshold,
            rejected,
        },
        pvalues: detection.records,
        version: env!("CARGO_PKG_VERSION").to_string(),
    }
}

fn cmd_detect(args: DetectArgs) -> Result<(), Failure> {
    if !(args.alpha > 0.0 && args.alpha < 1.0) {
        return Err(Failure::Config(format!("alpha = {} outside (0, 1)", args.alpha)));
    }
    if !(args.train_fraction > 0.0 && args.train_fraction < 1.0) {
        return Err(Failure::Config(format!(
            "train-fraction = {} outside (0, 1)",
            args.train_fraction
        )));
    }
    let seed = resolve_seed(args.seed)?;
    let tie = tie_policy(args.tie, args.noise_scale);
    let columns = ColumnSpec {
        value_column: args.value_column.clone(),
        feature_columns: args.feature_columns.clone(),
        group_column: args.group_column.clone(),
        arm_column: args.arm_column.clone(),
    };

    let (reference_label, group_labels, detection) = if args.score == ScoreArg::EmpiricalCdf {
        let (reference, groups) = load_two_arm(&args, &columns)?;
        let detection = two_arm_detect(&reference, &groups, &args.quantile, args.alpha, tie, seed)
            .map_err(config_err)?;
        (
            reference.id.clone(),
            groups.iter().map(|g| g.id.clone()).collect::<Vec<_>>(),
            detection,
        )
    } else {
        let (reference, groups) = load_groups(&args, &columns)?;
        let kind = ScoreKind::from(args.score);
        let needs_fit = matches!(
            kind,
            ScoreKind::AbsResidual
                | ScoreKind::Cqr
                | ScoreKind::Mahalanobis
                | ScoreKind::SequentialMahalanobis
        );
        let (training, calibration): (Vec<Observation>, Vec<Observation>) = if needs_fit {
            split_reference(&reference.observations, args.train_fraction, seed)
        } else {
            (Vec::new(), reference.observations.clone())
        };
        let spec = fit_score(kind, &training, &FitOptions::default()).map_err(config_err)?;
        let calibration_group = SampleGroup::new(reference.id.clone(), calibration);
        let detection = batch_detect(
            &calibration_group,
            &groups,
            &spec,
            &args.quantile,
            args.alpha,
            tie,
            seed,
        )
        .map_err(config_err)?;
        (
            reference.id.clone(),
            groups.iter().map(|g| g.id.clone()).collect::<Vec<_>>(),
            detection,
        )
    };

    let config = DetectConfigEcho {
        score: ScoreKind::from(args.score),
        quantile: args.quantile,
        alpha: args.alpha,
        tie_policy: tie,
        seed,
        train_fraction: args.train_fraction,
        value_column: args.value_column.clone(),
        feature_columns: args.feature_columns.clone(),
        reference: reference_label,
        groups: group_labels,
    };
    let report = detection_report(config, detection);
    let mut rendered = serde_json::to_string_pretty(&report)
        .map_err(|e| Failure::Io(format!("serializing report: {e}")))?;
    rendered.push('\n');
    write_output(args.output.as_deref(), &rendered)
}

/// Seeded random split of the reference into (training, calibration).
fn split_reference(
    observations: &[Observation],
    train_fraction: f64,
    seed: u64,
) -> (Vec<Observation>, Vec<Observation>) {
    let mut indices: Vec<usize> = (0..observations.len()).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ TRAIN_SPLIT_SALT);
    indices.shuffle(&mut rng);
    let cut = ((observations.len() as f64) * train_fraction).floor() as usize;
    let train: Vec<Observation> = indices[..cut]
        .iter()
        .map(|&i| observations[i].clone())
        .collect();
    let calib: Vec<Observation> = indices[cut..]
        .iter()
        .map(|&i| observations[i].clone())
        .collect();
    (train, calib)
}

fn load_groups(
    args: &DetectArgs,
    columns: &ColumnSpec,
) -> Result<(SampleGroup, Vec<SampleGroup>), Failure> {
    if let Some(data) = &args.data {
        let reference_id = args
            .reference_id
            .as_ref()
            .expect("clap enforces reference_id with data");
        let mut groups = ingest::read_long_format(data, columns)?;
        let idx = groups
            .iter()
            .position(|g| &g.id == reference_id)
            .ok_or_else(|| {
                Failure::Config(format!("reference group '{reference_id}' not found in data"))
            })?;
        let reference = groups.remove(idx);
        if groups.is_empty() {
            return Err(Failure::Config("no comparison groups in data".into()));
        }
        Ok((reference, groups))
    } else {
        let reference_path = args
            .reference
            .as_ref()
            .ok_or_else(|| Failure::Config("either --reference or --data is required".into()))?;
        if args.groups.is_empty() {
            return Err(Failure::Config("at least one --group file is required".into()));
        }
        let reference = ingest::read_group_file(reference_path, columns)?;
        let groups = args
            .groups
            .iter()
            .map(|p| ingest::read_group_file(p, columns))
            .collect::<Result<Vec<_>, _>>()?;
        Ok((reference, groups))
    }
}

fn load_two_arm(
    args: &DetectArgs,
    columns: &ColumnSpec,
) -> Result<(TwoArmGroup, Vec<TwoArmGroup>), Failure> {
    if let Some(data) = &args.data {
        let reference_id = args
            .reference_id
            .as_ref()
            .expect("clap enforces reference_id with data");
        let mut groups = ingest::read_two_arm_long(data, columns)?;
        let idx = groups
            .iter()
            .position(|g| &g.id == reference_id)
            .ok_or_else(|| {
                Failure::Config(format!("reference group '{reference_id}' not found in data"))
            })?;
        let reference = groups.remove(idx);
        if groups.is_empty() {
            return Err(Failure::Config("no comparison groups in data".into()));
        }
        Ok((reference, groups))
    } else {
        let reference_path = args
            .reference
            .as_ref()
            .ok_or_else(|| Failure::Config("either --reference or --data is required".into()))?;
        if args.groups.is_empty() {
            return Err(Failure::Config("at least one --group file is required".into()));
        }
        let reference = ingest::read_two_arm_file(reference_path, columns)?;
        let groups = args
            .groups
            .iter()
            .map(|p| ingest::read_two_arm_file(p, columns))
            .collect::<Result<Vec<_>, _>>()?;
        Ok((reference, groups))
    }
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), Failure> {
    let raw = std::fs::read_to_string(&args.scenario)
        .map_err(|e| Failure::Io(format!("{}: {e}", args.scenario.display())))?;
    let scenario: Scenario = serde_json::from_str(&raw).map_err(|e| {
        Failure::Config(format!("{}: invalid scenario: {e}", args.scenario.display()))
    })?;
    let methods = scenario.methods.clone();
    let run = || run_monte_carlo(&scenario, &methods);
    let result = if args.workers == 0 {
        run()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(args.workers)
            .build()
            .map_err(|e| Failure::Config(format!("worker pool: {e}")))?
            .install(run)
    }
    .map_err(config_err)?;
    write_output(args.output.as_deref(), &result.to_csv_string())
}

fn cmd_pvalue(args: PvalueArgs) -> Result<(), Failure> {
    // Flags must match the method; a mismatch is a configuration error.
    let reject_flag = |present: bool, flag: &str, method: &str| -> Result<(), Failure> {
        if present {
            Err(Failure::Config(format!(
                "--{flag} is not valid for method '{method}'"
            )))
        } else {
            Ok(())
        }
    };
    let seed = resolve_seed(args.seed)?;
    let reference = ingest::read_values(&args.reference, &args.value_column)?;
    let comparison = ingest::read_values(&args.comparison, &args.value_column)?;

    let record: PValueRecord = match args.method {
        MethodArg::Batch => {
            reject_flag(args.eta1.is_some(), "eta1", "batch")?;
            reject_flag(args.eta2.is_some(), "eta2", "batch")?;
            reject_flag(args.sigma.is_some(), "sigma", "batch")?;
            reject_flag(args.permutations.is_some(), "permutations", "batch")?;
            reject_flag(args.mode.is_some(), "mode", "batch")?;
            reject_flag(args.statistic.is_some(), "statistic", "batch")?;
            reject_flag(args.tau.is_some(), "tau", "batch")?;
            let eta = match (args.eta, args.q) {
                (Some(eta), None) => eta,
                (None, Some(q)) => QuantileSpec::QuantileCeil(q)
                    .resolve(comparison.len())
                    .map_err(config_err)?,
                (None, None) => return Err(Failure::Config("batch needs --eta or --q".into())),
                (Some(_), Some(_)) => {
                    return Err(Failure::Config("give only one of --eta and --q".into()))
                }
            };
            let mut sorted = reference;
            sorted.sort_unstable_by(f64::total_cmp);
            batch_conformal_pvalue(&sorted, &comparison, eta).map_err(config_err)?
        }
        MethodArg::Multiquantile => {
            reject_flag(args.eta.is_some(), "eta", "multiquantile")?;
            reject_flag(args.q.is_some(), "q", "multiquantile")?;
            reject_flag(args.sigma.is_some(), "sigma", "multiquantile")?;
            reject_flag(args.permutations.is_some(), "permutations", "multiquantile")?;
            reject_flag(args.mode.is_some(), "mode", "multiquantile")?;
            reject_flag(args.statistic.is_some(), "statistic", "multiquantile")?;
            reject_flag(args.tau.is_some(), "tau", "multiquantile")?;
            let (Some(eta1), Some(eta2)) = (args.eta1, args.eta2) else {
                return Err(Failure::Config("multiquantile needs --eta1 and --eta2".into()));
            };
            let mut sorted = reference;
            sorted.sort_unstable_by(f64::total_cmp);
            multi_quantile_pvalue(&sorted, &comparison, eta1, eta2).map_err(config_err)?
        }
        MethodArg::Subsample => {
            reject_flag(args.eta.is_some(), "eta", "subsample")?;
            reject_flag(args.eta1.is_some(), "eta1", "subsample")?;
            reject_flag(args.eta2.is_some(), "eta2", "subsample")?;
            reject_flag(args.q.is_some(), "q", "subsample")?;
            reject_flag(args.sigma.is_some(), "sigma", "subsample")?;
            reject_flag(args.mode.is_some(), "mode", "subsample")?;
            reject_flag(args.statistic.is_some(), "statistic", "subsample")?;
            reject_flag(args.tau.is_some(), "tau", "subsample")?;
            subsampling_pvalue(&reference, &comparison, seed).map_err(config_err)?
        }
        MethodArg::Permutation => {
            reject_flag(args.eta.is_some(), "eta", "permutation")?;
            reject_flag(args.eta1.is_some(), "eta1", "permutation")?;
            reject_flag(args.eta2.is_some(), "eta2", "permutation")?;
            reject_flag(args.q.is_some(), "q", "permutation")?;
            reject_flag(args.sigma.is_some(), "sigma", "permutation")?;
            reject_flag(args.mode.is_some(), "mode", "permutation")?;
            let statistic = match (args.statistic.unwrap_or(PermStatArg::MeanDiff), args.tau) {
                (PermStatArg::MeanDiff, None) => PermutationStatistic::MeanDiff,
                (PermStatArg::MeanDiff, Some(_)) => {
                    return Err(Failure::Config(
                        "--tau requires --statistic quantile-diff".into(),
                    ))
                }
                (PermStatArg::QuantileDiff, Some(tau)) => PermutationStatistic::QuantileDiff(tau),
                (PermStatArg::QuantileDiff, None) => {
                    return Err(Failure::Config("quantile-diff needs --tau".into()))
                }
            };
            let permutations = args.permutations.unwrap_or(999);
            let mut pooled = reference;
            let n = pooled.len();
            pooled.extend_from_slice(&comparison);
            permutation_pvalue(&pooled, n, statistic, permutations, seed).map_err(config_err)?
        }
        MethodArg::Ranksum => {
            reject_flag(args.eta.is_some(), "eta", "ranksum")?;
            reject_flag(args.eta1.is_some(), "eta1", "ranksum")?;
            reject_flag(args.eta2.is_some(), "eta2", "ranksum")?;
            reject_flag(args.q.is_some(), "q", "ranksum")?;
            reject_flag(args.sigma.is_some(), "sigma", "ranksum")?;
            reject_flag(args.permutations.is_some(), "permutations", "ranksum")?;
            reject_flag(args.statistic.is_some(), "statistic", "ranksum")?;
            reject_flag(args.tau.is_some(), "tau", "ranksum")?;
            let mode = match args.mode.unwrap_or(RankSumModeArg::Exact) {
                RankSumModeArg::Exact => RankSumMode::Exact,
                RankSumModeArg::NormalApprox => RankSumMode::NormalApprox,
            };
            ranksum_pvalue(&reference, &comparison, mode).map_err(config_err)?
        }
        MethodArg::Ztest => {
            reject_flag(args.eta.is_some(), "eta", "ztest")?;
            reject_flag(args.eta1.is_some(), "eta1", "ztest")?;
            reject_flag(args.eta2.is_some(), "eta2", "ztest")?;
            reject_flag(args.q.is_some(), "q", "ztest")?;
            reject_flag(args.permutations.is_some(), "permutations", "ztest")?;
            reject_flag(args.mode.is_some(), "mode", "ztest")?;
            reject_flag(args.statistic.is_some(), "statistic", "ztest")?;
            reject_flag(args.tau.is_some(), "tau", "ztest")?;
            let sigma = args
                .sigma
                .ok_or_else(|| Failure::Config("ztest needs --sigma".into()))?;
            ztest_pvalue(&reference, &comparison, sigma).map_err(config_err)?
        }
    };
    let line = serde_json::to_string(&record)
        .map_err(|e| Failure::Io(format!("serializing record: {e}")))?;
    println!("{line}");
    Ok(())
}
