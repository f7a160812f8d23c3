//! Seeded Monte Carlo engine for operating characteristics of group
//! sequential designs that mix un-adjusted and covariate-adjusted analyses.
//!
//! Outcomes are generated as `y = delta * a + gamma * sum(x) + eps` with
//! `a = +/-1` equiprobable, independent standard normal covariates, and
//! `eps ~ N(0, rho^2)`, so the un-adjusted residual variance is 1 and the
//! adjusted-to-unadjusted sd ratio is exactly `rho`. Five conduct scenarios
//! are supported: consistent ANOVA or ANCOVA with design-time boundaries,
//! and ANOVA monitoring with a final ANCOVA where the boundaries are left
//! alone, designed with known `rho`, or inflated at the final stage using
//! the estimated ratio. Each replicate yields a Wald analysis plus two
//! ordering-adjusted analyses (ignoring and accounting for the method
//! switch).

use crate::boundaries::{
    design_boundaries, BoundaryShape, BoundarySet, SpendingFunction, SpendingState, StageBoundary,
};
use crate::covariance::{AnalysisSchedule, Method, StagePlan};
use crate::error::{Error, Result};
use crate::estimators::{
    estimate_rho, fit_ancova, fit_anova, standardized_stat, FitResult, SubjectRecord,
};
use crate::inference::{analyze_path, Ordering, StatisticPath};
use crate::norm::{phi_bar, phi_inv};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Data-generating parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// True treatment effect (half the difference between arm means).
    pub delta: f64,
    /// True ratio of adjusted to un-adjusted residual sd.
    pub rho: f64,
    /// Number of independent standard normal covariates.
    pub num_covariates: usize,
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::InvalidParameter {
                name: "rho",
                value: self.rho,
                constraint: "0 < rho <= 1",
            });
        }
        if self.num_covariates == 0 {
            return Err(Error::Simulation(
                "at least one covariate is required".into(),
            ));
        }
        if !self.delta.is_finite() {
            return Err(Error::InvalidParameter {
                name: "delta",
                value: self.delta,
                constraint: "finite",
            });
        }
        Ok(())
    }

    /// Common covariate coefficient making `Var[x' gamma] = 1 - rho^2`.
    pub fn gamma(&self) -> f64 {
        ((1.0 - self.rho * self.rho) / self.num_covariates as f64).sqrt()
    }

    /// Residual sd of the adjusted analysis (the un-adjusted sd is 1).
    pub fn sigma(&self) -> f64 {
        self.rho
    }
}

/// One full trial's worth of subjects, ordered by stage.
pub fn generate_trial(
    cfg: &GeneratorConfig,
    plan: &StagePlan,
    rng: &mut impl Rng,
) -> Vec<SubjectRecord> {
    let gamma = cfg.gamma();
    let sigma = cfg.sigma();
    let n_total = plan.final_n() as usize;
    let mut out = Vec::with_capacity(n_total);
    let mut stage = 1usize;
    for i in 0..n_total {
        while (i as u64) >= plan.cumulative_n(stage) {
            stage += 1;
        }
        let arm = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let covariates: Vec<f64> = (0..cfg.num_covariates)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        let eps: f64 = rng.sample::<f64, _>(StandardNormal) * sigma;
        let y = cfg.delta * arm + gamma * covariates.iter().sum::<f64>() + eps;
        out.push(SubjectRecord {
            y,
            arm,
            covariates,
            stage,
        });
    }
    out
}

/// How the trial is monitored and how its boundaries are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    /// Un-adjusted analysis at every stage, design-time boundaries.
    #[serde(rename = "a-i")]
    AnovaOnly,
    /// Adjusted analysis at every stage, design-time boundaries.
    #[serde(rename = "a-ii")]
    AncovaOnly,
    /// Un-adjusted monitoring, adjusted final analysis, no boundary change.
    #[serde(rename = "b-i")]
    HybridNoAdjust,
    /// Boundaries designed up front using the known sd ratio.
    #[serde(rename = "b-ii")]
    HybridKnownRho,
    /// Final boundary inflated at the last stage using the estimated ratio.
    #[serde(rename = "b-iii")]
    HybridInflateFinal,
}

impl Scenario {
    pub fn is_hybrid(self) -> bool {
        matches!(
            self,
            Scenario::HybridNoAdjust | Scenario::HybridKnownRho | Scenario::HybridInflateFinal
        )
    }

    /// Method whose statistic is compared to the boundaries at interim looks.
    pub fn monitoring_method(self) -> Method {
        if self == Scenario::AncovaOnly {
            Method::Ancova
        } else {
            Method::Anova
        }
    }

    /// Method whose statistic drives final estimation and inference.
    pub fn estimation_method(self) -> Method {
        if self == Scenario::AnovaOnly {
            Method::Anova
        } else {
            Method::Ancova
        }
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Scenario::AnovaOnly => "a-i",
            Scenario::AncovaOnly => "a-ii",
            Scenario::HybridNoAdjust => "b-i",
            Scenario::HybridKnownRho => "b-ii",
            Scenario::HybridInflateFinal => "b-iii",
        };
        write!(f, "{s}")
    }
}

/// Full specification of one simulated trial configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub scenario: Scenario,
    pub plan: StagePlan,
    pub alpha: f64,
    pub spending: SpendingFunction,
    pub ordering: Ordering,
    /// Confidence level for all intervals.
    pub level: f64,
}

impl ScenarioSpec {
    fn shape(&self) -> BoundaryShape {
        match self.spending {
            SpendingFunction::PocockApprox => BoundaryShape::PocockFlat,
            SpendingFunction::ObfApprox => BoundaryShape::ObfSqrtDecay,
        }
    }
}

const SOLVE_TOL: f64 = 1e-7;

/// Precomputed, data-independent parts of a scenario: all boundaries that do
/// not depend on an estimated sd ratio.
#[derive(Debug, Clone)]
pub struct ScenarioEngine {
    /// Monitored boundaries; the final entry is a placeholder for
    /// scenarios whose last boundary is solved per replicate.
    bounds: Vec<(f64, f64)>,
    /// Spending state with all interim stages applied, for per-replicate
    /// final-boundary solves.
    pending_final: Option<SpendingState>,
}

impl ScenarioEngine {
    pub fn build(cfg: &GeneratorConfig, spec: &ScenarioSpec) -> Result<Self> {
        cfg.validate()?;
        if !(spec.level > 0.0 && spec.level < 1.0) {
            return Err(Error::InvalidParameter {
                name: "level",
                value: spec.level,
                constraint: "0 < level < 1",
            });
        }
        let k_max = spec.plan.num_stages();
        let design = |schedule: AnalysisSchedule, rho: f64| -> Result<Vec<(f64, f64)>> {
            let set = design_boundaries(
                &spec.plan,
                &schedule,
                rho,
                spec.alpha,
                spec.shape(),
                1e-6,
                1,
            )?;
            Ok(set.stages.iter().map(|s| (s.lower, s.upper)).collect())
        };
        // interim spending boundaries at sd ratio 1 (no adjustment)
        let spend_interim = || -> Result<SpendingState> {
            let mut st = SpendingState::new(spec.alpha, spec.spending, SOLVE_TOL, 1)?;
            for k in 1..k_max {
                st.next_boundary(spec.plan.info_fraction(k), Method::Anova, 1.0)?;
            }
            Ok(st)
        };
        match spec.scenario {
            Scenario::AnovaOnly => Ok(Self {
                bounds: design(AnalysisSchedule::uniform(k_max, Method::Anova), 1.0)?,
                pending_final: None,
            }),
            Scenario::AncovaOnly => Ok(Self {
                bounds: design(AnalysisSchedule::uniform(k_max, Method::Ancova), 1.0)?,
                pending_final: None,
            }),
            Scenario::HybridKnownRho => Ok(Self {
                bounds: design(
                    AnalysisSchedule {
                        methods: vec![Method::Anova; k_max],
                        hybrid_final: true,
                    },
                    cfg.rho,
                )?,
                pending_final: None,
            }),
            Scenario::HybridNoAdjust => {
                let mut st = spend_interim()?;
                let last = st.next_boundary(1.0, Method::Anova, 1.0)?;
                let mut bounds: Vec<(f64, f64)> = st.stages()[..k_max - 1]
                    .iter()
                    .map(|s| (s.lower, s.upper))
                    .collect();
                bounds.push((last.lower, last.upper));
                Ok(Self {
                    bounds,
                    pending_final: None,
                })
            }
            Scenario::HybridInflateFinal => {
                let st = spend_interim()?;
                let mut bounds: Vec<(f64, f64)> = st
                    .stages()
                    .iter()
                    .map(|s| (s.lower, s.upper))
                    .collect();
                bounds.push((f64::NEG_INFINITY, f64::INFINITY));
                Ok(Self {
                    bounds,
                    pending_final: Some(st),
                })
            }
        }
    }

    /// Boundary table actually used for monitoring (final entry may be a
    /// placeholder until solved).
    pub fn boundary_set(&self, spec: &ScenarioSpec) -> BoundarySet {
        BoundarySet {
            alpha: spec.alpha,
            stages: self
                .bounds
                .iter()
                .enumerate()
                .map(|(i, &(lower, upper))| StageBoundary {
                    stage: i + 1,
                    t_star: spec.plan.info_fraction(i + 1),
                    method: spec.scenario.monitoring_method(),
                    lower,
                    upper,
                    alpha_increment: f64::NAN,
                    alpha_cum: f64::NAN,
                })
                .collect(),
        }
    }
}

/// One analysis outcome (point estimate, interval, p-value).
#[derive(Debug, Clone, Copy, Serialize)]
pub struct EstimateSummary {
    pub estimate: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub p_value: f64,
    /// True when the adjusted solve failed; the other fields are NaN.
    pub failed: bool,
}

impl EstimateSummary {
    fn failed() -> Self {
        Self {
            estimate: f64::NAN,
            ci_lower: f64::NAN,
            ci_upper: f64::NAN,
            p_value: f64::NAN,
            failed: true,
        }
    }
}

/// Result of one simulated trial.
#[derive(Debug, Clone, Serialize)]
pub struct TrialResult {
    pub stop_stage: usize,
    pub rejected: bool,
    /// Monitored statistic at the stopping stage.
    pub z_monitored: f64,
    /// Estimation statistic at the stopping stage.
    pub z_final: f64,
    pub rho_hat: f64,
    /// Final boundary actually applied (solved per replicate in the
    /// inflate-final scenario).
    pub final_upper: f64,
    /// Wald analysis with no sequential adjustment.
    pub simple: EstimateSummary,
    /// Ordering-adjusted analysis ignoring the method switch.
    pub gs: EstimateSummary,
    /// Ordering-adjusted analysis accounting for the method switch.
    pub gs_adjust: EstimateSummary,
}

fn fit_pair(data: &[SubjectRecord]) -> Result<(FitResult, FitResult)> {
    Ok((fit_anova(data)?, fit_ancova(data)?))
}

/// Runs one trial end to end with a dedicated RNG seed.
pub fn run_trial(
    cfg: &GeneratorConfig,
    spec: &ScenarioSpec,
    engine: &ScenarioEngine,
    seed: u64,
) -> Result<TrialResult> {
    run_trial_inner(cfg, spec, engine, seed, true)
}

fn run_trial_inner(
    cfg: &GeneratorConfig,
    spec: &ScenarioSpec,
    engine: &ScenarioEngine,
    seed: u64,
    with_estimates: bool,
) -> Result<TrialResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = generate_trial(cfg, &spec.plan, &mut rng);
    let k_max = spec.plan.num_stages();
    let monitor = spec.scenario.monitoring_method();

    let mut interim_z: Vec<f64> = Vec::with_capacity(k_max - 1);
    let mut stop_stage = k_max;
    let mut crossed_early = false;
    let mut z_monitored = f64::NAN;

    for k in 1..k_max {
        let cum = &data[..spec.plan.cumulative_n(k) as usize];
        let fit = match monitor {
            Method::Anova => fit_anova(cum)?,
            Method::Ancova => fit_ancova(cum)?,
        };
        let z = standardized_stat(&fit);
        let (lo, hi) = engine.bounds[k - 1];
        if z <= lo || z >= hi {
            stop_stage = k;
            crossed_early = true;
            z_monitored = z;
            break;
        }
        interim_z.push(z);
    }

    let cum = &data[..spec.plan.cumulative_n(stop_stage) as usize];
    let (anova, ancova) = fit_pair(cum)?;
    let rho_hat = estimate_rho(&ancova, &anova)?.rho;
    let est_fit = match spec.scenario.estimation_method() {
        Method::Anova => &anova,
        Method::Ancova => &ancova,
    };
    let z_final = standardized_stat(est_fit);
    if !crossed_early {
        z_monitored = match monitor {
            Method::Anova => standardized_stat(&anova),
            Method::Ancova => standardized_stat(&ancova),
        };
    }

    // resolve the final boundary and the rejection decision
    let mut bounds = engine.bounds.clone();
    let rejected = if crossed_early {
        true
    } else {
        if let Some(state) = &engine.pending_final {
            let mut st = state.clone();
            let last = st.next_boundary(1.0, Method::Ancova, rho_hat)?;
            bounds[k_max - 1] = (last.lower, last.upper);
        }
        let (lo, hi) = bounds[k_max - 1];
        z_final <= lo || z_final >= hi
    };
    let final_upper = bounds[k_max - 1].1;

    if !with_estimates {
        return Ok(TrialResult {
            stop_stage,
            rejected,
            z_monitored,
            z_final,
            rho_hat,
            final_upper,
            simple: EstimateSummary::failed(),
            gs: EstimateSummary::failed(),
            gs_adjust: EstimateSummary::failed(),
        });
    }

    // Wald analysis on the final fit
    let z_crit = phi_inv(1.0 - (1.0 - spec.level) / 2.0);
    let se = est_fit.se();
    let simple = EstimateSummary {
        estimate: est_fit.delta_hat,
        ci_lower: est_fit.delta_hat - z_crit * se,
        ci_upper: est_fit.delta_hat + z_crit * se,
        p_value: (2.0 * phi_bar(z_final.abs())).min(1.0),
        failed: false,
    };

    let (lower, upper): (Vec<f64>, Vec<f64>) = bounds.iter().copied().unzip();
    let analyze = |path: &StatisticPath| -> EstimateSummary {
        match analyze_path(path, spec.ordering, spec.level, SOLVE_TOL, seed) {
            Ok(r) => EstimateSummary {
                estimate: r.estimate,
                ci_lower: r.ci_lower,
                ci_upper: r.ci_upper,
                p_value: r.p_value,
                failed: false,
            },
            Err(_) => EstimateSummary::failed(),
        }
    };

    // sequential adjustment that pretends one method was used throughout:
    // the consistent-analysis tail formula evaluated at the statistic
    // actually used for estimation
    let gs_path = StatisticPath {
        plan: spec.plan.clone(),
        methods: vec![spec.scenario.estimation_method(); k_max],
        hybrid_final: false,
        lower: lower.clone(),
        upper: upper.clone(),
        stop_stage,
        interim_z: interim_z.clone(),
        z_obs: z_final,
        rho: 1.0,
        sigma_tilde: est_fit.sd,
    };
    let gs = analyze(&gs_path);

    // sequential adjustment accounting for the method switch
    let gs_adjust = if spec.scenario.is_hybrid() {
        let path = StatisticPath {
            plan: spec.plan.clone(),
            methods: vec![Method::Anova; k_max],
            hybrid_final: true,
            lower,
            upper,
            stop_stage,
            interim_z,
            z_obs: z_final,
            rho: rho_hat,
            sigma_tilde: anova.sd,
        };
        analyze(&path)
    } else {
        gs
    };

    Ok(TrialResult {
        stop_stage,
        rejected,
        z_monitored,
        z_final,
        rho_hat,
        final_upper,
        simple,
        gs,
        gs_adjust,
    })
}

/// SplitMix64 step for decorrelated per-replicate seeds.
fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base.wrapping_add((index + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn run_all(
    cfg: &GeneratorConfig,
    spec: &ScenarioSpec,
    reps: usize,
    seed: u64,
    parallel: bool,
    with_estimates: bool,
) -> Result<Vec<TrialResult>> {
    if reps == 0 {
        return Err(Error::Simulation("at least one replicate required".into()));
    }
    let engine = ScenarioEngine::build(cfg, spec)?;
    #[cfg(feature = "parallel")]
    if parallel {
        return (0..reps as u64)
            .into_par_iter()
            .map(|i| run_trial_inner(cfg, spec, &engine, derive_seed(seed, i), with_estimates))
            .collect();
    }
    let _ = parallel;
    (0..reps as u64)
        .map(|i| run_trial_inner(cfg, spec, &engine, derive_seed(seed, i), with_estimates))
        .collect()
}

/// Runs `reps` independent trials (data-parallel when the `parallel`
/// feature is enabled). Results are identical regardless of thread count.
pub fn run_replicates(
    cfg: &GeneratorConfig,
    spec: &ScenarioSpec,
    reps: usize,
    seed: u64,
) -> Result<Vec<TrialResult>> {
    run_all(cfg, spec, reps, seed, true, true)
}

/// Single-threaded variant, for benchmarking and small runs.
pub fn run_replicates_seq(
    cfg: &GeneratorConfig,
    spec: &ScenarioSpec,
    reps: usize,
    seed: u64,
) -> Result<Vec<TrialResult>> {
    run_all(cfg, spec, reps, seed, false, true)
}

/// Monitoring and rejection decisions only: skips the per-replicate
/// estimator solves, which dominate the cost of full replicates. Estimate
/// fields in the results are marked failed. Seeds align with
/// [`run_replicates`], so rejection outcomes pair one-to-one.
pub fn run_replicates_rejection_only(
    cfg: &GeneratorConfig,
    spec: &ScenarioSpec,
    reps: usize,
    seed: u64,
) -> Result<Vec<TrialResult>> {
    run_all(cfg, spec, reps, seed, true, false)
}

/// Aggregated operating characteristics of one estimator.
#[derive(Debug, Clone, Serialize)]
pub struct EstimatorReport {
    pub name: &'static str,
    /// Share of intervals containing the true effect.
    pub coverage: f64,
    pub coverage_se: f64,
    /// Median of `(estimate - delta) * 100`.
    pub median_scaled_bias: f64,
    pub mean_scaled_bias: f64,
    pub n_failed: usize,
}

/// Aggregated operating characteristics of a scenario run.
#[derive(Debug, Clone, Serialize)]
pub struct SimReport {
    pub scenario: Scenario,
    pub delta: f64,
    pub rho: f64,
    pub n_total: u64,
    pub n_reps: usize,
    pub reject_rate: f64,
    pub reject_se: f64,
    /// Replicates stopping at each stage (1-based).
    pub stop_counts: Vec<usize>,
    pub simple: EstimatorReport,
    pub gs: EstimatorReport,
    pub gs_adjust: EstimatorReport,
}

fn summarize(
    name: &'static str,
    delta: f64,
    picks: impl Iterator<Item = EstimateSummary>,
) -> EstimatorReport {
    let mut biases: Vec<f64> = Vec::new();
    let mut covered = 0usize;
    let mut n_failed = 0usize;
    for s in picks {
        if s.failed {
            n_failed += 1;
            continue;
        }
        biases.push((s.estimate - delta) * 100.0);
        if s.ci_lower <= delta && delta <= s.ci_upper {
            covered += 1;
        }
    }
    let n = biases.len();
    if n == 0 {
        return EstimatorReport {
            name,
            coverage: f64::NAN,
            coverage_se: f64::NAN,
            median_scaled_bias: f64::NAN,
            mean_scaled_bias: f64::NAN,
            n_failed,
        };
    }
    let coverage = covered as f64 / n as f64;
    let mean = biases.iter().sum::<f64>() / n as f64;
    biases.sort_by(|a, b| a.total_cmp(b));
    let median = if n % 2 == 1 {
        biases[n / 2]
    } else {
        0.5 * (biases[n / 2 - 1] + biases[n / 2])
    };
    EstimatorReport {
        name,
        coverage,
        coverage_se: (coverage * (1.0 - coverage) / n as f64).sqrt(),
        median_scaled_bias: median,
        mean_scaled_bias: mean,
        n_failed,
    }
}

/// Aggregates replicate-level results into a scenario report.
pub fn aggregate(
    cfg: &GeneratorConfig,
    spec: &ScenarioSpec,
    results: &[TrialResult],
) -> SimReport {
    let n = results.len();
    let rejected = results.iter().filter(|r| r.rejected).count();
    let reject_rate = rejected as f64 / n as f64;
    let mut stop_counts = vec![0usize; spec.plan.num_stages()];
    for r in results {
        stop_counts[r.stop_stage - 1] += 1;
    }
    SimReport {
        scenario: spec.scenario,
        delta: cfg.delta,
        rho: cfg.rho,
        n_total: spec.plan.final_n(),
        n_reps: n,
        reject_rate,
        reject_se: (reject_rate * (1.0 - reject_rate) / n as f64).sqrt(),
        stop_counts,
        simple: summarize("simple", cfg.delta, results.iter().map(|r| r.simple)),
        gs: summarize("gs", cfg.delta, results.iter().map(|r| r.gs)),
        gs_adjust: summarize(
            "gs-adjust",
            cfg.delta,
            results.iter().map(|r| r.gs_adjust),
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn cfg(delta: f64, rho: f64) -> GeneratorConfig {
        GeneratorConfig {
            delta,
            rho,
            num_covariates: 1,
        }
    }

    fn spec(scenario: Scenario, n: u64, k: usize) -> ScenarioSpec {
        let step = n / k as u64;
        ScenarioSpec {
            scenario,
            plan: StagePlan::new((1..=k as u64).map(|i| i * step).collect()).unwrap(),
            alpha: 0.05,
            spending: SpendingFunction::PocockApprox,
            ordering: Ordering::StageWise,
            level: 0.95,
        }
    }

    #[test]
    fn generator_moments() {
        let c = cfg(0.3, 0.5);
        assert_abs_diff_eq!(c.gamma(), (0.75f64).sqrt(), epsilon = 1e-15);
        let plan = StagePlan::new(vec![50_000]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = generate_trial(&c, &plan, &mut rng);
        let (anova, ancova) = fit_pair(&data).unwrap();
        assert_abs_diff_eq!(anova.delta_hat, 0.3, epsilon = 0.02);
        assert_abs_diff_eq!(ancova.delta_hat, 0.3, epsilon = 0.01);
        assert_abs_diff_eq!(anova.sd, 1.0, epsilon = 0.02);
        assert_abs_diff_eq!(ancova.sd, 0.5, epsilon = 0.01);
        let rho_hat = estimate_rho(&ancova, &anova).unwrap();
        assert_abs_diff_eq!(rho_hat.rho, 0.5, epsilon = 0.01);
    }

    #[test]
    fn stage_assignment_follows_plan() {
        let plan = StagePlan::new(vec![10, 25, 40]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = generate_trial(&cfg(0.0, 0.5), &plan, &mut rng);
        assert_eq!(data.len(), 40);
        assert_eq!(data.iter().filter(|r| r.stage == 1).count(), 10);
        assert_eq!(data.iter().filter(|r| r.stage == 2).count(), 15);
        assert_eq!(data.iter().filter(|r| r.stage == 3).count(), 15);
    }

    #[test]
    fn replicates_are_deterministic_and_parallel_consistent() {
        let c = cfg(0.1, 0.5);
        let s = spec(Scenario::HybridInflateFinal, 300, 2);
        let a = run_replicates(&c, &s, 20, 77).unwrap();
        let b = run_replicates_seq(&c, &s, 20, 77).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.stop_stage, y.stop_stage);
            assert_eq!(x.rejected, y.rejected);
            assert_eq!(x.z_final.to_bits(), y.z_final.to_bits());
            assert_eq!(
                x.gs_adjust.estimate.to_bits(),
                y.gs_adjust.estimate.to_bits()
            );
        }
    }

    #[test]
    fn hybrid_variants_stop_at_same_stage() {
        let c = cfg(0.0, 0.25);
        let s1 = spec(Scenario::HybridNoAdjust, 400, 2);
        let s3 = spec(Scenario::HybridInflateFinal, 400, 2);
        let r1 = run_replicates(&c, &s1, 300, 5).unwrap();
        let r3 = run_replicates(&c, &s3, 300, 5).unwrap();
        let mut some_rejection_differs = false;
        for (a, b) in r1.iter().zip(&r3) {
            assert_eq!(a.stop_stage, b.stop_stage);
            assert_eq!(a.z_final.to_bits(), b.z_final.to_bits());
            if a.rejected != b.rejected {
                some_rejection_differs = true;
                // only the final boundary differs, so only full-length
                // trials can disagree
                assert_eq!(a.stop_stage, 2);
                assert!(b.final_upper > a.final_upper);
            }
        }
        assert!(some_rejection_differs, "inflation should change some calls");
    }

    #[test]
    fn inflated_final_boundary_grows_as_rho_falls() {
        let s = spec(Scenario::HybridInflateFinal, 400, 2);
        let r_high = run_replicates(&cfg(0.0, 0.9), &s, 50, 11).unwrap();
        let r_low = run_replicates(&cfg(0.0, 0.3), &s, 50, 11).unwrap();
        let mean_u = |rs: &[TrialResult]| {
            let xs: Vec<f64> = rs
                .iter()
                .filter(|r| r.stop_stage == 2 && r.final_upper.is_finite())
                .map(|r| r.final_upper)
                .collect();
            xs.iter().sum::<f64>() / xs.len() as f64
        };
        assert!(mean_u(&r_low) > mean_u(&r_high) + 0.05);
    }

    #[test]
    fn degenerate_rho_one_scenarios_agree_on_rejection_rate() {
        // with rho = 1 the adjusted and un-adjusted analyses estimate the
        // same statistic asymptotically; rejection rates should be close
        let c = cfg(0.0, 1.0);
        let reps = 2000;
        let rates: Vec<f64> = [
            Scenario::AnovaOnly,
            Scenario::HybridNoAdjust,
            Scenario::HybridInflateFinal,
        ]
        .iter()
        .map(|&sc| {
            let r = run_replicates(&c, &spec(sc, 600, 2), reps, 21).unwrap();
            aggregate(&c, &spec(sc, 600, 2), &r).reject_rate
        })
        .collect();
        for w in rates.windows(2) {
            assert_abs_diff_eq!(w[0], w[1], epsilon = 0.02);
        }
    }

    #[test]
    fn aggregate_counts_and_ses() {
        let c = cfg(0.1, 0.5);
        let s = spec(Scenario::HybridInflateFinal, 300, 2);
        let results = run_replicates(&c, &s, 200, 9).unwrap();
        let report = aggregate(&c, &s, &results);
        assert_eq!(report.n_reps, 200);
        assert_eq!(report.stop_counts.iter().sum::<usize>(), 200);
        assert!(report.reject_se > 0.0 || report.reject_rate == 0.0 || report.reject_rate == 1.0);
        for est in [&report.simple, &report.gs, &report.gs_adjust] {
            assert!(est.n_failed < 20, "{}: too many failures", est.name);
            assert!(est.coverage >= 0.0 && est.coverage <= 1.0);
        }
    }

    #[test]
    fn null_simple_coverage_is_nominal() {
        let c = cfg(0.0, 0.5);
        let s = spec(Scenario::HybridNoAdjust, 500, 2);
        let results = run_replicates(&c, &s, 2000, 31).unwrap();
        let report = aggregate(&c, &s, &results);
        // Wald intervals at the stopping stage are close to nominal under
        // the null at moderate n
        assert_abs_diff_eq!(report.simple.coverage, 0.95, epsilon = 0.02);
        assert_abs_diff_eq!(report.gs_adjust.coverage, 0.95, epsilon = 0.02);
    }

    #[test]
    fn validation_errors() {
        let mut c = cfg(0.0, 0.5);
        c.rho = 0.0;
        assert!(c.validate().is_err());
        let c2 = GeneratorConfig {
            delta: 0.0,
            rho: 0.5,
            num_covariates: 0,
        };
        assert!(c2.validate().is_err());
        let s = spec(Scenario::AnovaOnly, 300, 2);
        assert!(run_replicates(&cfg(0.0, 0.5), &s, 0, 1).is_err());
        let mut bad = s;
        bad.level = 1.5;
        assert!(run_replicates(&cfg(0.0, 0.5), &bad, 5, 1).is_err());
    }
}
