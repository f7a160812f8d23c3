//! Joint distribution of cumulative standardized test statistics across
//! stages when each stage may use an un-adjusted (ANOVA) or covariate-
//! adjusted (ANCOVA) analysis.
//!
//! With cumulative information fractions `t_k = n_k / n_K` the correlation
//! between the statistics at stages `k <= k'` is `sqrt(t_k / t_k')` when both
//! use the same method, and `rho * sqrt(t_k / t_k')` when the methods differ,
//! where `rho = sigma / sigma_tilde` is the ratio of the ANCOVA to the ANOVA
//! residual standard deviation (`rho = 1` means the covariates explain
//! nothing). Under a treatment effect `delta` the statistic at stage `k` has
//! mean `delta * sqrt(n_k) / sd`, with `sd` the standard deviation of the
//! method used at that stage.

use crate::error::{Error, Result};
use crate::mvn::CorrelationMatrix;
use serde::{Deserialize, Serialize};

/// Maximum number of stages (paired with the statistic limit in [`crate::mvn`]).
pub const MAX_STAGES: usize = 8;

/// Analysis method for one stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Anova,
    Ancova,
}

impl Method {
    /// Residual standard deviation of this method's estimator.
    #[inline]
    pub fn sd(self, sigma: f64, sigma_tilde: f64) -> f64 {
        match self {
            Method::Anova => sigma_tilde,
            Method::Ancova => sigma,
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Method::Anova => write!(f, "anova"),
            Method::Ancova => write!(f, "ancova"),
        }
    }
}

/// One coordinate of the joint statistic vector: the cumulative statistic of
/// `method` computed on data through `stage` (1-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StatLabel {
    pub stage: usize,
    pub method: Method,
}

/// Cumulative total sample sizes at each planned analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    cumulative_n: Vec<u64>,
}

impl StagePlan {
    pub fn new(cumulative_n: Vec<u64>) -> Result<Self> {
        if cumulative_n.is_empty() || cumulative_n.len() > MAX_STAGES {
            return Err(Error::InvalidPlan(format!(
                "number of stages must be in 1..={MAX_STAGES}, got {}",
                cumulative_n.len()
            )));
        }
        if cumulative_n[0] == 0 {
            return Err(Error::InvalidPlan("stage sample sizes must be positive".into()));
        }
        for w in cumulative_n.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::InvalidPlan(format!(
                    "cumulative sample sizes must be strictly increasing, got {} then {}",
                    w[0], w[1]
                )));
            }
        }
        Ok(Self { cumulative_n })
    }

    #[inline]
    pub fn num_stages(&self) -> usize {
        self.cumulative_n.len()
    }

    /// Cumulative total sample size through stage `k` (1-based).
    #[inline]
    pub fn cumulative_n(&self, stage: usize) -> u64 {
        self.cumulative_n[stage - 1]
    }

    #[inline]
    pub fn final_n(&self) -> u64 {
        *self.cumulative_n.last().unwrap()
    }

    /// Information fraction `t_k = n_k / n_K` (1-based stage).
    #[inline]
    pub fn info_fraction(&self, stage: usize) -> f64 {
        self.cumulative_n(stage) as f64 / self.final_n() as f64
    }

    pub fn info_fractions(&self) -> Vec<f64> {
        (1..=self.num_stages()).map(|k| self.info_fraction(k)).collect()
    }
}

/// Which method is monitored at each stage, and whether an early stop
/// triggers an additional covariate-adjusted analysis of the stopping-stage
/// data (the "hybrid" final analysis).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSchedule {
    pub methods: Vec<Method>,
    #[serde(default)]
    pub hybrid_final: bool,
}

impl AnalysisSchedule {
    pub fn uniform(num_stages: usize, method: Method) -> Self {
        Self {
            methods: vec![method; num_stages],
            hybrid_final: false,
        }
    }

    pub fn validate(&self, plan: &StagePlan) -> Result<()> {
        if self.methods.len() != plan.num_stages() {
            return Err(Error::InvalidSchedule(format!(
                "schedule has {} methods for {} stages",
                self.methods.len(),
                plan.num_stages()
            )));
        }
        if self.hybrid_final && self.methods.iter().all(|&m| m == Method::Ancova) {
            return Err(Error::InvalidSchedule(
                "hybrid final analysis requires at least one unadjusted monitoring stage".into(),
            ));
        }
        Ok(())
    }
}

/// Statistic labels needed to analyze a trial under `schedule`.
///
/// Without a hybrid final analysis this is one label per stage. With
/// `hybrid_final` and a stop at stage `k` (`hybrid_stop = Some(k)`), the
/// covariate-adjusted statistic at the stopping stage is appended after the
/// monitored statistic of that stage. `hybrid_stop = None` yields the
/// design-time labels: monitored statistics at stages `1..K-1` plus the
/// adjusted statistic at stage `K`.
pub fn select_schedule(
    plan: &StagePlan,
    schedule: &AnalysisSchedule,
    hybrid_stop: Option<usize>,
) -> Result<Vec<StatLabel>> {
    schedule.validate(plan)?;
    let k_max = plan.num_stages();
    if let Some(stop) = hybrid_stop {
        if !schedule.hybrid_final {
            return Err(Error::InvalidSchedule(
                "hybrid stop stage supplied for a non-hybrid schedule".into(),
            ));
        }
        if stop == 0 || stop > k_max {
            return Err(Error::InvalidSchedule(format!(
                "stop stage {stop} outside 1..={k_max}"
            )));
        }
        let mut labels: Vec<StatLabel> = (1..=stop)
            .map(|k| StatLabel {
                stage: k,
                method: schedule.methods[k - 1],
            })
            .collect();
        if schedule.methods[stop - 1] != Method::Ancova {
            labels.push(StatLabel {
                stage: stop,
                method: Method::Ancova,
            });
        }
        return Ok(labels);
    }
    let mut labels: Vec<StatLabel> = (1..=k_max)
        .map(|k| StatLabel {
            stage: k,
            method: schedule.methods[k - 1],
        })
        .collect();
    if schedule.hybrid_final {
        labels.last_mut().unwrap().method = Method::Ancova;
    }
    Ok(labels)
}

/// Joint correlation of a labeled vector of cumulative statistics.
#[derive(Debug, Clone)]
pub struct JointCovariance {
    pub labels: Vec<StatLabel>,
    pub corr: CorrelationMatrix,
}

fn check_rho(rho: f64) -> Result<()> {
    if !(1e-6..=1.0).contains(&rho) {
        return Err(Error::InvalidParameter {
            name: "rho",
            value: rho,
            constraint: "1e-6 <= rho <= 1",
        });
    }
    Ok(())
}

/// Correlation matrix of the statistics named by `labels` under variance
/// ratio `rho = sigma / sigma_tilde`.
pub fn full_joint(plan: &StagePlan, labels: &[StatLabel], rho: f64) -> Result<JointCovariance> {
    check_rho(rho)?;
    if labels.is_empty() {
        return Err(Error::InvalidSchedule("no statistic labels".into()));
    }
    for l in labels {
        if l.stage == 0 || l.stage > plan.num_stages() {
            return Err(Error::InvalidSchedule(format!(
                "label stage {} outside 1..={}",
                l.stage,
                plan.num_stages()
            )));
        }
    }
    let t: Vec<f64> = labels.iter().map(|l| plan.info_fraction(l.stage)).collect();
    let corr = CorrelationMatrix::from_fn(labels.len(), |i, j| {
        let time = (t[i].min(t[j]) / t[i].max(t[j])).sqrt();
        let method = if labels[i].method == labels[j].method {
            1.0
        } else {
            rho
        };
        time * method
    })?;
    Ok(JointCovariance {
        labels: labels.to_vec(),
        corr,
    })
}

/// Mean of each labeled statistic under treatment effect `delta`, where
/// `sigma_tilde` / `sigma` are the ANOVA / ANCOVA standard deviations.
pub fn mean_shift(
    plan: &StagePlan,
    labels: &[StatLabel],
    delta: f64,
    sigma: f64,
    sigma_tilde: f64,
) -> Result<Vec<f64>> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidParameter {
            name: "sigma",
            value: sigma,
            constraint: "sigma > 0",
        });
    }
    if sigma_tilde < sigma {
        return Err(Error::InvalidParameter {
            name: "sigma_tilde",
            value: sigma_tilde,
            constraint: "sigma_tilde >= sigma",
        });
    }
    labels
        .iter()
        .map(|l| {
            if l.stage == 0 || l.stage > plan.num_stages() {
                return Err(Error::InvalidSchedule(format!(
                    "label stage {} outside 1..={}",
                    l.stage,
                    plan.num_stages()
                )));
            }
            let n = plan.cumulative_n(l.stage) as f64;
            Ok(delta * n.sqrt() / l.method.sd(sigma, sigma_tilde))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn plan2() -> StagePlan {
        StagePlan::new(vec![500, 1000]).unwrap()
    }

    #[test]
    fn plan_validation() {
        assert!(StagePlan::new(vec![]).is_err());
        assert!(StagePlan::new(vec![100, 100]).is_err());
        assert!(StagePlan::new(vec![200, 100]).is_err());
        assert!(StagePlan::new(vec![0, 100]).is_err());
        assert!(StagePlan::new(vec![1; 9]).is_err());
        let p = StagePlan::new(vec![250, 500, 1000]).unwrap();
        assert_eq!(p.info_fractions(), vec![0.25, 0.5, 1.0]);
    }

    #[test]
    fn same_method_correlation_is_sqrt_info_ratio() {
        let plan = StagePlan::new(vec![300, 600, 900]).unwrap();
        let labels: Vec<StatLabel> = (1..=3)
            .map(|stage| StatLabel {
                stage,
                method: Method::Anova,
            })
            .collect();
        let j = full_joint(&plan, &labels, 0.5).unwrap();
        for a in 0..3usize {
            for b in 0..3usize {
                let (lo, hi) = (a.min(b) + 1, a.max(b) + 1);
                let expect = (plan.info_fraction(lo) / plan.info_fraction(hi)).sqrt();
                assert_abs_diff_eq!(j.corr.get(a, b), expect, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn mixed_method_pairs_scale_by_rho() {
        let plan = plan2();
        let rho = 0.6;
        let labels = [
            StatLabel { stage: 1, method: Method::Anova },
            StatLabel { stage: 1, method: Method::Ancova },
            StatLabel { stage: 2, method: Method::Anova },
            StatLabel { stage: 2, method: Method::Ancova },
        ];
        let j = full_joint(&plan, &labels, rho).unwrap();
        let s = 0.5f64.sqrt();
        // same stage, different method
        assert_abs_diff_eq!(j.corr.get(0, 1), rho, epsilon = 1e-14);
        assert_abs_diff_eq!(j.corr.get(2, 3), rho, epsilon = 1e-14);
        // different stage, same method
        assert_abs_diff_eq!(j.corr.get(0, 2), s, epsilon = 1e-14);
        assert_abs_diff_eq!(j.corr.get(1, 3), s, epsilon = 1e-14);
        // different stage and method
        assert_abs_diff_eq!(j.corr.get(0, 3), rho * s, epsilon = 1e-14);
        assert_abs_diff_eq!(j.corr.get(1, 2), rho * s, epsilon = 1e-14);
    }

    #[test]
    fn empirical_correlation_matches() {
        // Build the statistics directly from per-subject contribution pairs
        // with Var = [[st^2, s^2], [s^2, s^2]] and compare the empirical
        // correlations of the standardized cumulative sums to the formula.
        let sigma = 0.6f64;
        let sigma_tilde = 1.0f64;
        let rho = sigma / sigma_tilde;
        let plan = plan2();
        let n1 = plan.cumulative_n(1) as usize;
        let n2 = plan.cumulative_n(2) as usize;
        let reps = 200_000;
        let mut rng = ChaCha8Rng::seed_from_u64(99);

        // contribution = (phi, phi_c); phi = phi_c + extra, Var(phi_c) = s^2,
        // Var(extra) = st^2 - s^2, independent => Cov(phi, phi_c) = s^2.
        let extra_sd = (sigma_tilde * sigma_tilde - sigma * sigma).sqrt();
        let mut stats = vec![[0.0f64; 4]; reps];
        for row in stats.iter_mut() {
            let mut sum_u = 0.0;
            let mut sum_c = 0.0;
            for i in 0..n2 {
                let e: f64 = rng.sample::<f64, _>(StandardNormal) * sigma;
                let x: f64 = rng.sample::<f64, _>(StandardNormal) * extra_sd;
                sum_c += e;
                sum_u += e + x;
                if i + 1 == n1 {
                    row[0] = sum_u / (sigma_tilde * (n1 as f64).sqrt());
                    row[1] = sum_c / (sigma * (n1 as f64).sqrt());
                }
            }
            row[2] = sum_u / (sigma_tilde * (n2 as f64).sqrt());
            row[3] = sum_c / (sigma * (n2 as f64).sqrt());
        }

        let labels = [
            StatLabel { stage: 1, method: Method::Anova },
            StatLabel { stage: 1, method: Method::Ancova },
            StatLabel { stage: 2, method: Method::Anova },
            StatLabel { stage: 2, method: Method::Ancova },
        ];
        let j = full_joint(&plan, &labels, rho).unwrap();
        for a in 0..4 {
            for b in (a + 1)..4 {
                let mean_a: f64 = stats.iter().map(|r| r[a]).sum::<f64>() / reps as f64;
                let mean_b: f64 = stats.iter().map(|r| r[b]).sum::<f64>() / reps as f64;
                let mut cov = 0.0;
                let mut va = 0.0;
                let mut vb = 0.0;
                for r in &stats {
                    cov += (r[a] - mean_a) * (r[b] - mean_b);
                    va += (r[a] - mean_a).powi(2);
                    vb += (r[b] - mean_b).powi(2);
                }
                let emp = cov / (va * vb).sqrt();
                assert_abs_diff_eq!(emp, j.corr.get(a, b), epsilon = 0.01);
            }
        }
    }

    #[test]
    fn hybrid_schedule_labels() {
        let plan = plan2();
        let schedule = AnalysisSchedule {
            methods: vec![Method::Anova, Method::Anova],
            hybrid_final: true,
        };
        let stopped = select_schedule(&plan, &schedule, Some(1)).unwrap();
        assert_eq!(
            stopped,
            vec![
                StatLabel { stage: 1, method: Method::Anova },
                StatLabel { stage: 1, method: Method::Ancova },
            ]
        );
        let design = select_schedule(&plan, &schedule, None).unwrap();
        assert_eq!(
            design,
            vec![
                StatLabel { stage: 1, method: Method::Anova },
                StatLabel { stage: 2, method: Method::Ancova },
            ]
        );
        // stopping at the last stage replaces, not duplicates, when the
        // monitored method is already adjusted
        let schedule2 = AnalysisSchedule {
            methods: vec![Method::Anova, Method::Ancova],
            hybrid_final: true,
        };
        let at_final = select_schedule(&plan, &schedule2, Some(2)).unwrap();
        assert_eq!(at_final.len(), 2);
        assert_eq!(at_final[1], StatLabel { stage: 2, method: Method::Ancova });
    }

    #[test]
    fn schedule_validation() {
        let plan = plan2();
        let bad_len = AnalysisSchedule::uniform(3, Method::Anova);
        assert!(bad_len.validate(&plan).is_err());
        let all_adjusted_hybrid = AnalysisSchedule {
            methods: vec![Method::Ancova, Method::Ancova],
            hybrid_final: true,
        };
        assert!(all_adjusted_hybrid.validate(&plan).is_err());
        let schedule = AnalysisSchedule::uniform(2, Method::Anova);
        assert!(select_schedule(&plan, &schedule, Some(1)).is_err());
    }

    #[test]
    fn mean_shift_uses_method_sd() {
        let plan = plan2();
        let labels = [
            StatLabel { stage: 1, method: Method::Anova },
            StatLabel { stage: 2, method: Method::Ancova },
        ];
        let shift = mean_shift(&plan, &labels, 0.1, 0.5, 1.0).unwrap();
        assert_abs_diff_eq!(shift[0], 0.1 * 500f64.sqrt() / 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(shift[1], 0.1 * 1000f64.sqrt() / 0.5, epsilon = 1e-14);
        assert!(mean_shift(&plan, &labels, 0.1, 1.0, 0.5).is_err());
        assert!(mean_shift(&plan, &labels, 0.1, 0.0, 1.0).is_err());
    }

    #[test]
    fn rho_bounds_enforced() {
        let plan = plan2();
        let labels = [StatLabel { stage: 1, method: Method::Anova }];
        assert!(full_joint(&plan, &labels, 0.0).is_err());
        assert!(full_joint(&plan, &labels, 1.1).is_err());
        assert!(full_joint(&plan, &labels, 1.0).is_ok());
    }
}
