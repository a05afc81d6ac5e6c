//! Distribution-free identification of comparison groups whose distribution
//! differs from a reference distribution, with exact false discovery rate
//! control.
//!
//! The central object is the *batch conformal p-value*: a weighted
//! order-statistic p-value that rejects when a chosen quantile of the
//! comparison scores is unusually large relative to a shared reference
//! sample. The weights are hypergeometric-type binomial ratios computed in
//! log space ([`combinatorics`]), the p-values and their baselines live in
//! [`pvalues`], Benjamini-Hochberg selection and the end-to-end detection
//! pipeline in [`testing`], score-function construction in [`scores`], and
//! seeded Monte Carlo experiments in [`simulate`].
//!
//! All randomized operations take explicit seeds and are deterministic given
//! them; detection and simulation results do not depend on worker count.
//!
//! ```
//! use batch_conformal::scores::{fit_score, FitOptions, SampleGroup, ScoreKind, TiePolicy};
//! use batch_conformal::testing::{batch_detect, QuantileSpec};
//!
//! let reference = SampleGroup::from_values("reference", &[0.1, 0.9, 0.4, 0.6, 0.2, 0.8]);
//! let shifted = SampleGroup::from_values("shifted", &[1.1, 1.3, 1.2]);
//! let score = fit_score(ScoreKind::Identity, &[], &FitOptions::default()).unwrap();
//! let detection = batch_detect(
//!     &reference,
//!     &[shifted],
//!     &score,
//!     &QuantileSpec::QuantileCeil(0.5),
//!     0.2,
//!     TiePolicy::None,
//!     0,
//! )
//! .unwrap();
//! assert_eq!(detection.rejected_ids(), vec!["shifted".to_string()]);
//! ```

pub mod combinatorics;
pub mod error;
pub mod pvalues;
pub mod scores;
mod seeding;
pub mod simulate;
pub mod testing;

pub use error::{Error, Result};
