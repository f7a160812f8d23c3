//! Rejection boundaries for group sequential monitoring: design-time
//! constants for a fixed boundary shape, and sequential alpha-spending
//! boundaries recomputed as stages are observed.
//!
//! Both paths evaluate crossing probabilities under the joint law of the
//! monitored statistics (see [`crate::covariance`]), so they remain exact
//! when the analysis method changes between stages. The total two-sided
//! rejection probability telescopes to `1 - P(all stages inside)`, which
//! lets every solver iteration cost a single rectangle probability.

use crate::covariance::{mean_shift, select_schedule, AnalysisSchedule, Method, StagePlan};
use crate::error::{Error, Result};
use crate::mvn::{CorrelationMatrix, Integrator, StageGate};
use crate::norm::phi_inv;
use serde::{Deserialize, Serialize};

/// Upper boundary value treated as "cannot reject at this stage".
pub const UNREACHABLE: f64 = f64::INFINITY;

const C_LO: f64 = 0.5;
const C_HI: f64 = 10.0;
const U_HI: f64 = 10.0;
const SOLVE_TOL: f64 = 1e-6;
const MIN_INCREMENT: f64 = 1e-12;

/// Design-time boundary shape as a function of the information fraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundaryShape {
    /// Constant critical value at every stage.
    PocockFlat,
    /// Critical value `c / sqrt(t_k)`, steep early and near `c` at the end.
    ObfSqrtDecay,
}

impl BoundaryShape {
    #[inline]
    fn factor(self, t: f64) -> f64 {
        match self {
            BoundaryShape::PocockFlat => 1.0,
            BoundaryShape::ObfSqrtDecay => 1.0 / t.sqrt(),
        }
    }
}

/// Alpha-spending function `alpha*(t)`; both reach `alpha` at `t = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpendingFunction {
    /// `alpha * ln(1 + (e - 1) t)`, approximating flat boundaries.
    PocockApprox,
    /// `2 (1 - Phi(z_{alpha/2} / sqrt(t)))`, approximating `1/sqrt(t)` decay.
    ObfApprox,
}

/// Cumulative alpha spent by time fraction `t` under `f` at level `alpha`.
pub fn spend_alpha(f: SpendingFunction, alpha: f64, t: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidParameter {
            name: "t",
            value: t,
            constraint: "0 <= t <= 1",
        });
    }
    if t == 0.0 {
        return Ok(0.0);
    }
    Ok(match f {
        SpendingFunction::PocockApprox => {
            alpha * (1.0 + (std::f64::consts::E - 1.0) * t).ln()
        }
        SpendingFunction::ObfApprox => {
            let z = phi_inv(1.0 - alpha / 2.0);
            2.0 * crate::norm::phi_bar(z / t.sqrt())
        }
    })
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 0.5) {
        return Err(Error::InvalidParameter {
            name: "alpha",
            value: alpha,
            constraint: "0 < alpha < 0.5",
        });
    }
    Ok(())
}

/// One stage of a boundary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageBoundary {
    pub stage: usize,
    pub t_star: f64,
    pub method: Method,
    pub lower: f64,
    pub upper: f64,
    pub alpha_increment: f64,
    pub alpha_cum: f64,
}

/// Full boundary table at overall two-sided level `alpha`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundarySet {
    pub alpha: f64,
    pub stages: Vec<StageBoundary>,
}

impl BoundarySet {
    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// Stage gates on a joint vector with one statistic per stage, in order.
    pub fn gates(&self) -> Vec<StageGate> {
        self.stages
            .iter()
            .enumerate()
            .map(|(i, s)| StageGate {
                stat_index: i,
                lower: s.lower,
                upper: s.upper,
            })
            .collect()
    }

    /// CSV rendering with header
    /// `stage,t_star,method,lower,upper,alpha_spent_increment,alpha_spent_cum`.
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("stage,t_star,method,lower,upper,alpha_spent_increment,alpha_spent_cum\n");
        for s in &self.stages {
            out.push_str(&format!(
                "{},{:.7},{},{},{},{:.7e},{:.7e}\n",
                s.stage,
                s.t_star,
                s.method,
                fmt_bound(s.lower),
                fmt_bound(s.upper),
                s.alpha_increment,
                s.alpha_cum
            ));
        }
        out
    }
}

fn fmt_bound(b: f64) -> String {
    if b == f64::INFINITY {
        "inf".into()
    } else if b == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{b:.7}")
    }
}

/// Correlation of the monitored statistics at fractions `t` with methods
/// `methods` and variance ratio `rho`.
fn monitor_corr(t: &[f64], methods: &[Method], rho: f64) -> Result<CorrelationMatrix> {
    CorrelationMatrix::from_fn(t.len(), |i, j| {
        let time = (t[i].min(t[j]) / t[i].max(t[j])).sqrt();
        if methods[i] == methods[j] {
            time
        } else {
            time * rho
        }
    })
}

/// `P(|Z_k| < u_k for all k)` for symmetric bounds `u`.
fn inside_prob(integ: &Integrator, u: &[f64], tol: f64, seed: u64) -> f64 {
    let lower: Vec<f64> = u.iter().map(|&x| -x).collect();
    integ.prob(&lower, u, tol, seed)
}

/// Boundary constant and table for a planned design: finds `c` such that the
/// symmetric boundaries `c * shape(t_k)` spend exactly `alpha` over the
/// monitored statistics of `schedule` at variance ratio `rho`.
pub fn design_boundaries(
    plan: &StagePlan,
    schedule: &AnalysisSchedule,
    rho: f64,
    alpha: f64,
    shape: BoundaryShape,
    tol: f64,
    seed: u64,
) -> Result<BoundarySet> {
    check_alpha(alpha)?;
    let labels = select_schedule(plan, schedule, None)?;
    let t: Vec<f64> = labels.iter().map(|l| plan.info_fraction(l.stage)).collect();
    let methods: Vec<Method> = labels.iter().map(|l| l.method).collect();
    let corr = monitor_corr(&t, &methods, rho)?;
    let integ = Integrator::prepare(&corr)?;
    let prob_tol = (tol / 10.0).clamp(1e-9, 1e-2);

    let bounds_at = |c: f64| -> Vec<f64> { t.iter().map(|&tk| c * shape.factor(tk)).collect() };
    let reject_at = |c: f64| 1.0 - inside_prob(&integ, &bounds_at(c), prob_tol, seed);

    let f_lo = reject_at(C_LO) - alpha;
    let f_hi = reject_at(C_HI) - alpha;
    if !(f_lo > 0.0 && f_hi < 0.0) {
        return Err(Error::BracketFailure {
            context: "design boundary constant",
            lo: C_LO,
            hi: C_HI,
            f_lo,
            f_hi,
        });
    }
    let mut lo = C_LO;
    let mut hi = C_HI;
    while hi - lo > SOLVE_TOL {
        let mid = 0.5 * (lo + hi);
        if reject_at(mid) - alpha > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let c = 0.5 * (lo + hi);

    let u = bounds_at(c);
    let mut stages = Vec::with_capacity(t.len());
    let mut prev_inside = 1.0;
    for k in 0..t.len() {
        let sub =
            Integrator::prepare(&corr.principal_submatrix(&(0..=k).collect::<Vec<_>>())?)?;
        let inside = inside_prob(&sub, &u[..=k], prob_tol, seed);
        stages.push(StageBoundary {
            stage: k + 1,
            t_star: t[k],
            method: methods[k],
            lower: -u[k],
            upper: u[k],
            alpha_increment: (prev_inside - inside).max(0.0),
            alpha_cum: 1.0 - inside,
        });
        prev_inside = inside;
    }
    Ok(BoundarySet { alpha, stages })
}

/// Sequential alpha-spending state. Stages are appended as they are
/// observed; each boundary is solved against the joint law of all monitored
/// statistics so far, using the current variance-ratio estimate for
/// mixed-method correlations.
#[derive(Debug, Clone)]
pub struct SpendingState {
    alpha: f64,
    spending: SpendingFunction,
    tol: f64,
    seed: u64,
    t: Vec<f64>,
    methods: Vec<Method>,
    upper: Vec<f64>,
    stages: Vec<StageBoundary>,
}

impl SpendingState {
    pub fn new(alpha: f64, spending: SpendingFunction, tol: f64, seed: u64) -> Result<Self> {
        check_alpha(alpha)?;
        if !(1e-9..=1e-2).contains(&tol) {
            return Err(Error::InvalidParameter {
                name: "tol",
                value: tol,
                constraint: "1e-9 <= tol <= 1e-2",
            });
        }
        Ok(Self {
            alpha,
            spending,
            tol,
            seed,
            t: Vec::new(),
            methods: Vec::new(),
            upper: Vec::new(),
            stages: Vec::new(),
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn stages(&self) -> &[StageBoundary] {
        &self.stages
    }

    pub fn boundary_set(&self) -> BoundarySet {
        BoundarySet {
            alpha: self.alpha,
            stages: self.stages.clone(),
        }
    }

    /// Cumulative alpha targeted so far.
    fn spent(&self) -> f64 {
        self.stages.last().map_or(0.0, |s| s.alpha_cum)
    }

    /// Solves the symmetric boundary for the next analysis at information
    /// fraction `t` using `method`, spending `alpha*(t) - alpha*(t_prev)`.
    /// Returns an unreachable (+/- infinite) boundary when the increment is
    /// exhausted.
    pub fn next_boundary(&mut self, t: f64, method: Method, rho: f64) -> Result<StageBoundary> {
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::InvalidParameter {
                name: "t",
                value: t,
                constraint: "0 < t <= 1",
            });
        }
        if let Some(&prev) = self.t.last() {
            if t <= prev {
                return Err(Error::Spending(format!(
                    "information fraction must increase, got {t} after {prev}"
                )));
            }
        }
        let target = spend_alpha(self.spending, self.alpha, t)?;
        let increment = target - self.spent();
        let stage = self.stages.len() + 1;

        let boundary = if increment <= MIN_INCREMENT {
            StageBoundary {
                stage,
                t_star: t,
                method,
                lower: -UNREACHABLE,
                upper: UNREACHABLE,
                alpha_increment: 0.0,
                alpha_cum: self.spent(),
            }
        } else if self.stages.is_empty() {
            let u = phi_inv(1.0 - target / 2.0);
            StageBoundary {
                stage,
                t_star: t,
                method,
                lower: -u,
                upper: u,
                alpha_increment: target,
                alpha_cum: target,
            }
        } else {
            let mut ts = self.t.clone();
            let mut ms = self.methods.clone();
            ts.push(t);
            ms.push(method);
            let corr = monitor_corr(&ts, &ms, rho)?;
            let k = ts.len() - 1;
            let prev =
                Integrator::prepare(&corr.principal_submatrix(&(0..k).collect::<Vec<_>>())?)?;
            let integ = Integrator::prepare(&corr)?;
            let prev_inside = inside_prob(&prev, &self.upper, self.tol, self.seed);

            let mut u_all = self.upper.clone();
            u_all.push(0.0);
            let mut cross_at = |u: f64| -> f64 {
                u_all[k] = u;
                prev_inside - inside_prob(&integ, &u_all, self.tol, self.seed)
            };

            let f_hi = cross_at(U_HI) - increment;
            if f_hi > 0.0 {
                return Err(Error::BracketFailure {
                    context: "spending boundary",
                    lo: 0.0,
                    hi: U_HI,
                    f_lo: prev_inside - increment,
                    f_hi,
                });
            }
            let mut lo = 0.0;
            let mut hi = U_HI;
            while hi - lo > SOLVE_TOL {
                let mid = 0.5 * (lo + hi);
                if cross_at(mid) - increment > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let u = 0.5 * (lo + hi);
            StageBoundary {
                stage,
                t_star: t,
                method,
                lower: -u,
                upper: u,
                alpha_increment: increment,
                alpha_cum: target,
            }
        };

        self.t.push(t);
        self.methods.push(method);
        self.upper.push(boundary.upper);
        self.stages.push(boundary.clone());
        Ok(boundary)
    }
}

/// Probability that a design rejects at any stage under treatment effect
/// `delta` (power when `delta != 0`, size when `delta = 0`).
pub fn reject_prob_under(
    plan: &StagePlan,
    schedule: &AnalysisSchedule,
    set: &BoundarySet,
    rho: f64,
    delta: f64,
    sigma: f64,
    sigma_tilde: f64,
    tol: f64,
    seed: u64,
) -> Result<f64> {
    let labels = select_schedule(plan, schedule, None)?;
    if labels.len() != set.num_stages() {
        return Err(Error::DimensionMismatch {
            context: "boundary stages",
            got: set.num_stages(),
            expected: labels.len(),
        });
    }
    let joint = crate::covariance::full_joint(plan, &labels, rho)?;
    let means = mean_shift(plan, &labels, delta, sigma, sigma_tilde)?;
    crate::mvn::union_reject_prob_shifted(&joint.corr, &set.gates(), Some(&means), tol, seed)
}
