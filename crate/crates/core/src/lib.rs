//! Design, monitoring, and analysis of two-arm group sequential trials with
//! continuous outcomes where un-adjusted (ANOVA) and covariate-adjusted
//! (ANCOVA) analyses may be mixed across stages.
//!
//! Switching analysis methods mid-trial changes the correlation structure of
//! the standardized test statistics, so rejection boundaries and adjusted
//! inference must be computed from the joint Gaussian law of the statistics
//! actually tested, rather than by recursive integration over independent
//! increments. The crate is organized around that pipeline:
//!
//! - [`mvn`]: probabilities of axis-aligned regions under a multivariate
//!   Gaussian with arbitrary correlation.
//! - [`covariance`]: joint correlation of cumulative ANOVA/ANCOVA statistics
//!   across stages for a given analysis schedule.
//! - [`estimators`]: ANOVA/ANCOVA least-squares fits, influence-function
//!   variances, and the variance-ratio estimate.
//! - [`boundaries`]: design-time boundaries and sequential alpha-spending
//!   boundaries that account for covariate adjustment.
//! - [`inference`]: adjusted p-values, confidence intervals, and
//!   median-unbiased estimates under stage-wise and sample-mean orderings.
//! - [`simulation`]: seeded Monte Carlo engine for operating characteristics.

pub mod boundaries;
pub mod covariance;
pub mod error;
pub mod estimators;
pub mod inference;
pub mod mvn;
pub mod norm;
pub mod simulation;

pub use error::{Error, Result};
