//! TOML run configuration. Every command reads one section of a single
//! document; unknown keys are rejected so a typo cannot silently change a
//! run.

use seqcov::boundaries::SpendingFunction;
use seqcov::covariance::Method;
use seqcov::inference::Ordering;
use seqcov::simulation::Scenario;
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub design: Option<DesignConfig>,
    pub spend: Option<SpendConfig>,
    pub analyze: Option<AnalyzeConfig>,
    pub simulate: Option<SimulateConfig>,
}

fn default_seed() -> u64 {
    1
}

fn default_level() -> f64 {
    0.95
}

fn default_ordering() -> Ordering {
    Ordering::StageWise
}

/// Boundary design: a full stage plan with a method per stage.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignConfig {
    pub alpha: f64,
    /// Cumulative per-stage sample sizes.
    pub stages: Vec<u64>,
    pub spending: SpendingFunction,
    /// Adjusted-to-unadjusted sd ratio used for mixed-method designs.
    #[serde(default = "one")]
    pub rho: f64,
    /// Analysis method per stage; defaults to ANOVA throughout.
    pub methods: Option<Vec<Method>>,
    /// Monitor with ANOVA but plan an adjusted final analysis.
    #[serde(default)]
    pub hybrid_final: bool,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

/// One observed interim look for incremental alpha spending.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Look {
    /// Observed information fraction in (0, 1].
    pub t: f64,
    pub method: Method,
    /// Estimated sd ratio at this look.
    #[serde(default = "one")]
    pub rho: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpendConfig {
    pub alpha: f64,
    pub spending: SpendingFunction,
    pub looks: Vec<Look>,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeConfig {
    /// Subject-level CSV (`y,a,x1..xp,stage`), relative to the config file.
    pub data: String,
    /// Cumulative per-stage sample sizes of the design.
    pub stages: Vec<u64>,
    pub alpha: f64,
    /// Used to reconstruct the monitored boundaries when explicit bounds are
    /// not given.
    pub spending: SpendingFunction,
    /// Explicit boundaries override the spending reconstruction.
    pub lower: Option<Vec<f64>>,
    pub upper: Option<Vec<f64>>,
    /// ANOVA monitoring with an adjusted final analysis at the stop stage.
    #[serde(default)]
    pub hybrid: bool,
    /// Analysis method when not hybrid.
    pub method: Option<Method>,
    #[serde(default = "default_ordering")]
    pub ordering: Ordering,
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

/// One simulated table cell; produces one result row per scenario.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cell {
    pub delta: f64,
    pub rho: f64,
    /// Total sample size, split equally across stages.
    pub n: u64,
    pub scenarios: Vec<Scenario>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub reps: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub alpha: f64,
    pub spending: SpendingFunction,
    /// Number of equally spaced stages.
    pub stages: usize,
    /// Covariate count.
    pub p: usize,
    #[serde(default = "default_ordering")]
    pub ordering: Ordering,
    #[serde(default = "default_level")]
    pub level: f64,
    pub cells: Vec<Cell>,
}

impl RunConfig {
    pub fn load(path: &std::path::Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::validation(format!("cannot read config {}: {e}", path.display()))
        })?;
        toml::from_str(&text)
            .map_err(|e| CliError::validation(format!("invalid config {}: {e}", path.display())))
    }

}
