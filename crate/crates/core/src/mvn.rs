//! Probabilities of axis-aligned rectangles under a zero-mean multivariate
//! Gaussian with arbitrary positive-semidefinite correlation.
//!
//! Boundary and inference computations in this crate cannot rely on the
//! independent-increments recursion that classic group sequential software
//! uses, because mixing ANOVA and ANCOVA statistics within a stage breaks
//! the increment structure. All probabilities are therefore evaluated
//! directly on the joint correlation matrix:
//!
//! - dimension 1: univariate normal CDF differences (exact),
//! - dimension 2: Drezner-Genz quadrature for the bivariate CDF (exact to
//!   ~1e-15; the quasi-Monte Carlo path is too slow for the millions of
//!   bivariate terms evaluated by simulation-scale inference),
//! - dimension >= 3: Cholesky reduction to sequential conditional univariate
//!   CDFs integrated with a randomized Richtmyer lattice (8 shifts, point
//!   count doubled until the estimated error is below tolerance).

use crate::error::{Error, Result};
use crate::norm::{dnorm, phi, phi_inv};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Largest supported dimension (covers 8 stages with paired statistics).
pub const MAX_DIM: usize = 16;

/// Bounds beyond this many standard deviations are treated as infinite.
pub const TAIL_LIMIT: f64 = 8.5;

const SYMMETRY_TOL: f64 = 1e-12;
const DIAG_TOL: f64 = 1e-12;
const CHOL_JITTER: f64 = 1e-10;
const PIVOT_FLOOR: f64 = -1e-8;
const SHIFTS: usize = 8;
const MAX_POINTS: usize = 1 << 22;
const FIRST_BATCH: usize = 128;

/// Symmetric positive-semidefinite matrix with unit diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    dim: usize,
    entries: Vec<f64>,
}

impl CorrelationMatrix {
    /// Validates symmetry, unit diagonal, and positive semidefiniteness.
    pub fn new(dim: usize, entries: Vec<f64>) -> Result<Self> {
        if dim == 0 || dim > MAX_DIM {
            return Err(Error::DimensionTooLarge { dim, max: MAX_DIM });
        }
        if entries.len() != dim * dim {
            return Err(Error::DimensionMismatch {
                context: "correlation entries",
                got: entries.len(),
                expected: dim * dim,
            });
        }
        for i in 0..dim {
            let d = entries[i * dim + i];
            if (d - 1.0).abs() > DIAG_TOL {
                return Err(Error::NotUnitDiagonal { index: i, value: d });
            }
            for j in (i + 1)..dim {
                let delta = (entries[i * dim + j] - entries[j * dim + i]).abs();
                if delta > SYMMETRY_TOL {
                    return Err(Error::NotSymmetric { row: i, col: j, delta });
                }
            }
        }
        let m = Self { dim, entries };
        // PSD check is the Cholesky itself.
        m.cholesky()?;
        Ok(m)
    }

    pub fn identity(dim: usize) -> Self {
        let mut entries = vec![0.0; dim * dim];
        for i in 0..dim {
            entries[i * dim + i] = 1.0;
        }
        Self { dim, entries }
    }

    pub fn from_fn(dim: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let mut entries = vec![0.0; dim * dim];
        for i in 0..dim {
            for j in 0..dim {
                entries[i * dim + j] = f(i, j);
            }
        }
        Self::new(dim, entries)
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.dim + j]
    }

    /// Principal submatrix on the given (distinct) indices, in order.
    pub fn principal_submatrix(&self, indices: &[usize]) -> Result<Self> {
        let k = indices.len();
        for &i in indices {
            if i >= self.dim {
                return Err(Error::DimensionMismatch {
                    context: "submatrix index",
                    got: i,
                    expected: self.dim,
                });
            }
        }
        let mut entries = vec![0.0; k * k];
        for (a, &i) in indices.iter().enumerate() {
            for (b, &j) in indices.iter().enumerate() {
                entries[a * k + b] = self.get(i, j);
            }
        }
        Ok(Self { dim: k, entries })
    }

    /// Lower-triangular Cholesky factor, with diagonal jitter up to
    /// `1e-10` applied when the matrix is semidefinite to working precision.
    pub fn cholesky(&self) -> Result<CholeskyFactor> {
        match cholesky_attempt(self.dim, &self.entries, 0.0) {
            Ok(lower) => Ok(CholeskyFactor {
                dim: self.dim,
                lower,
                jitter: 0.0,
            }),
            Err(_) => match cholesky_attempt(self.dim, &self.entries, CHOL_JITTER) {
                Ok(lower) => Ok(CholeskyFactor {
                    dim: self.dim,
                    lower,
                    jitter: CHOL_JITTER,
                }),
                Err(e) => Err(e),
            },
        }
    }
}

fn cholesky_attempt(dim: usize, entries: &[f64], jitter: f64) -> Result<Vec<f64>> {
    let mut lower = vec![0.0; dim * dim];
    for i in 0..dim {
        for j in 0..=i {
            let mut s = entries[i * dim + j];
            if i == j {
                s += jitter;
            }
            for k in 0..j {
                s -= lower[i * dim + k] * lower[j * dim + k];
            }
            if i == j {
                if s < PIVOT_FLOOR {
                    return Err(Error::NotPositiveSemidefinite { index: i, pivot: s });
                }
                lower[i * dim + i] = s.max(0.0).sqrt();
            } else {
                let d = lower[j * dim + j];
                lower[i * dim + j] = if d > 0.0 { s / d } else { 0.0 };
            }
        }
    }
    Ok(lower)
}

/// Lower-triangular factor `L` with `L Lᵀ` reproducing the input matrix.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    dim: usize,
    lower: Vec<f64>,
    /// Diagonal jitter that was required (0 for strictly definite input).
    pub jitter: f64,
}

impl CholeskyFactor {
    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.lower[i * self.dim + j]
    }
}

/// Axis-aligned integration region; `None`-like infinities are plain
/// `f64::INFINITY` / `NEG_INFINITY`.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthantRegion {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl OrthantRegion {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::DimensionMismatch {
                context: "region bounds",
                got: upper.len(),
                expected: lower.len(),
            });
        }
        for (i, (&lo, &hi)) in lower.iter().zip(&upper).enumerate() {
            if !(lo < hi) {
                return Err(Error::EmptyRegion {
                    index: i,
                    lower: lo,
                    upper: hi,
                });
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn whole_space(dim: usize) -> Self {
        Self {
            lower: vec![f64::NEG_INFINITY; dim],
            upper: vec![f64::INFINITY; dim],
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.lower.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }
}

fn check_tol(tol: f64) -> Result<()> {
    if !(1e-9..=1e-2).contains(&tol) {
        return Err(Error::InvalidParameter {
            name: "tol",
            value: tol,
            constraint: "1e-9 <= tol <= 1e-2",
        });
    }
    Ok(())
}

/// `P(lower < Z < upper)` for `Z ~ N(0, corr)`, absolute error target `tol`.
///
/// Deterministic for a fixed `(corr, region, tol, seed)` tuple.
pub fn rect_prob(
    corr: &CorrelationMatrix,
    region: &OrthantRegion,
    tol: f64,
    seed: u64,
) -> Result<f64> {
    check_tol(tol)?;
    if region.len() != corr.dim() {
        return Err(Error::DimensionMismatch {
            context: "region",
            got: region.len(),
            expected: corr.dim(),
        });
    }
    Ok(Integrator::prepare(corr)?.prob(region.lower(), region.upper(), tol, seed))
}

/// Reusable rectangle-probability evaluator for one correlation matrix.
///
/// Preparation picks the cheapest exact route: univariate and bivariate
/// closed forms, deterministic recursive integration when the coordinates
/// form a Gaussian Markov chain (which all cross-stage statistic vectors in
/// this crate do, because the analysis method switches at most once), and
/// quasi-Monte Carlo otherwise.
#[derive(Debug, Clone)]
pub struct Integrator {
    dim: usize,
    kind: IntegratorKind,
}

#[derive(Debug, Clone)]
enum IntegratorKind {
    Univariate,
    Bivariate { r: f64 },
    Markov { links: Vec<f64>, order: usize },
    Qmc { chol: CholeskyFactor },
}

impl Integrator {
    pub fn prepare(corr: &CorrelationMatrix) -> Result<Self> {
        let dim = corr.dim();
        let kind = if dim == 1 {
            IntegratorKind::Univariate
        } else if dim == 2 {
            IntegratorKind::Bivariate { r: corr.get(0, 1) }
        } else if let Some(links) = markov_links(corr) {
            // conditional sd of each non-degenerate link; very narrow
            // kernels defeat the quadrature grid, so fall back to QMC
            let s_min = links
                .iter()
                .filter(|r| r.abs() < 1.0 - DEGENERATE_LINK)
                .map(|r| (1.0 - r * r).sqrt())
                .fold(f64::INFINITY, f64::min);
            if s_min >= 0.03 || s_min.is_infinite() {
                let order = if s_min < 0.45 { 384 } else { 128 };
                IntegratorKind::Markov { links, order }
            } else {
                IntegratorKind::Qmc {
                    chol: corr.cholesky()?,
                }
            }
        } else {
            IntegratorKind::Qmc {
                chol: corr.cholesky()?,
            }
        };
        Ok(Self { dim, kind })
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// True when evaluation is deterministic (no Monte Carlo error).
    pub fn is_exact(&self) -> bool {
        !matches!(self.kind, IntegratorKind::Qmc { .. })
    }

    /// `P(lower < Z < upper)`; `tol` and `seed` only affect the QMC route.
    pub fn prob(&self, lower: &[f64], upper: &[f64], tol: f64, seed: u64) -> f64 {
        debug_assert_eq!(self.dim, lower.len());
        debug_assert_eq!(self.dim, upper.len());
        match &self.kind {
            IntegratorKind::Univariate => {
                (phi(clamp_tail(upper[0])) - phi(clamp_tail(lower[0]))).max(0.0)
            }
            IntegratorKind::Bivariate { r } => {
                bvn_rect(lower[0], upper[0], lower[1], upper[1], *r)
            }
            IntegratorKind::Markov { links, order } => {
                // loose tolerances (root-finding probes) get by with half
                // the quadrature nodes, which halves the dominant cost
                let order = if tol >= 1e-8 { order / 2 } else { *order };
                markov_prob(links, lower, upper, order)
            }
            IntegratorKind::Qmc { chol } => qmc_prob(chol, lower, upper, tol, seed).0,
        }
    }
}

const DEGENERATE_LINK: f64 = 1e-12;

/// Consecutive correlations if the matrix is consistent with a Gaussian
/// Markov chain (`corr[i][j] = prod of links i..j`), else `None`.
fn markov_links(corr: &CorrelationMatrix) -> Option<Vec<f64>> {
    let dim = corr.dim();
    let links: Vec<f64> = (0..dim - 1).map(|i| corr.get(i, i + 1)).collect();
    for i in 0..dim {
        for j in (i + 2)..dim {
            let prod: f64 = links[i..j].iter().product();
            if (corr.get(i, j) - prod).abs() > 1e-9 {
                return None;
            }
        }
    }
    Some(links)
}

/// Rectangle probability of a unit-variance Gaussian Markov chain with
/// consecutive correlations `links`, by propagating the joint density along
/// the chain with Gauss-Legendre quadrature. Links at +/-1 merge adjacent
/// coordinates by intersecting their (possibly reflected) bounds.
fn markov_prob(links: &[f64], lower: &[f64], upper: &[f64], order: usize) -> f64 {
    let mut lo = vec![clamp_tail(lower[0])];
    let mut hi = vec![clamp_tail(upper[0])];
    let mut rs: Vec<f64> = Vec::with_capacity(links.len());
    for (i, &r) in links.iter().enumerate() {
        let li = clamp_tail(lower[i + 1]);
        let ui = clamp_tail(upper[i + 1]);
        if r >= 1.0 - DEGENERATE_LINK {
            let last = lo.len() - 1;
            lo[last] = lo[last].max(li);
            hi[last] = hi[last].min(ui);
        } else if r <= -(1.0 - DEGENERATE_LINK) {
            let last = lo.len() - 1;
            lo[last] = lo[last].max(-ui);
            hi[last] = hi[last].min(-li);
        } else {
            rs.push(r);
            lo.push(li);
            hi.push(ui);
        }
    }
    if lo.iter().zip(&hi).any(|(&l, &h)| l >= h) {
        return 0.0;
    }
    if lo.len() == 1 {
        return (phi(hi[0]) - phi(lo[0])).max(0.0);
    }

    let (nodes, weights) = gauss_legendre(order);
    let map = |l: f64, h: f64| -> (Vec<f64>, f64) {
        let mid = 0.5 * (l + h);
        let half = 0.5 * (h - l);
        (nodes.iter().map(|&t| mid + half * t).collect(), half)
    };

    // v holds density times quadrature weight at each node of the current stage
    let (x0, half0) = map(lo[0], hi[0]);
    let mut v: Vec<f64> = x0
        .iter()
        .zip(weights)
        .map(|(&x, &w)| dnorm(x) * w * half0)
        .collect();
    let mut x_prev = x0;
    for (k, &r) in rs.iter().enumerate() {
        let s = (1.0 - r * r).sqrt();
        let (x_next, half) = map(lo[k + 1], hi[k + 1]);
        let mut v_next = vec![0.0f64; order];
        for (h, &y) in x_next.iter().enumerate() {
            let mut acc = 0.0;
            for (g, &x) in x_prev.iter().enumerate() {
                acc += v[g] * dnorm((y - r * x) / s);
            }
            v_next[h] = acc / s * weights[h] * half;
        }
        v = v_next;
        x_prev = x_next;
    }
    v.iter().sum::<f64>().clamp(0.0, 1.0)
}

use std::sync::OnceLock;

static GL_64: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
static GL_128: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
static GL_192: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
static GL_384: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();

/// Gauss-Legendre nodes and weights on [-1, 1], cached per order.
fn gauss_legendre(order: usize) -> (&'static [f64], &'static [f64]) {
    let cell = match order {
        64 => &GL_64,
        128 => &GL_128,
        192 => &GL_192,
        384 => &GL_384,
        _ => unreachable!("unsupported quadrature order {order}"),
    };
    let (x, w) = cell.get_or_init(|| compute_gauss_legendre(order));
    (x, w)
}

fn compute_gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0f64; n];
    let mut w = vec![0.0f64; n];
    let m = (n + 1) / 2;
    for i in 0..m {
        // Newton iteration from the Chebyshev-based initial guess
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        loop {
            let mut p0 = 1.0f64;
            let mut p1 = 0.0f64;
            for j in 0..n {
                let p2 = p1;
                p1 = p0;
                p0 = (((2 * j + 1) as f64) * z * p1 - (j as f64) * p2) / ((j + 1) as f64);
            }
            let dp = (n as f64) * (z * p0 - p1) / (z * z - 1.0);
            let z1 = z;
            z -= p0 / dp;
            if (z - z1).abs() < 1e-15 {
                x[i] = -z;
                x[n - 1 - i] = z;
                let wi = 2.0 / ((1.0 - z * z) * dp * dp);
                w[i] = wi;
                w[n - 1 - i] = wi;
                break;
            }
        }
    }
    (x, w)
}

/// Same as [`rect_prob`] but reusing a precomputed Cholesky factor and raw
/// bound slices. Hot path for boundary solves and inference root searches.
pub fn rect_prob_chol(chol: &CholeskyFactor, lower: &[f64], upper: &[f64], tol: f64, seed: u64) -> f64 {
    debug_assert_eq!(chol.dim(), lower.len());
    debug_assert_eq!(chol.dim(), upper.len());
    match chol.dim() {
        1 => (phi(clamp_tail(upper[0])) - phi(clamp_tail(lower[0]))).max(0.0),
        2 => {
            let r = chol.get(1, 0) * chol.get(0, 0);
            bvn_rect(lower[0], upper[0], lower[1], upper[1], r)
        }
        _ => qmc_prob(chol, lower, upper, tol, seed).0,
    }
}

#[inline]
fn clamp_tail(x: f64) -> f64 {
    x.clamp(-TAIL_LIMIT, TAIL_LIMIT)
}

/// A per-stage two-sided rejection gate on one statistic of the joint vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageGate {
    /// Index of the statistic tested at this stage within the correlation matrix.
    pub stat_index: usize,
    pub lower: f64,
    pub upper: f64,
}

/// Total rejection probability of a group sequential gate sequence:
/// sum over stages of P(cross at stage k, continue through stages 1..k-1).
///
/// Two-sided crossings are split into their upper and lower tails; an
/// infinite bound contributes nothing (alpha exhausted at that stage).
pub fn union_reject_prob(
    corr: &CorrelationMatrix,
    gates: &[StageGate],
    tol: f64,
    seed: u64,
) -> Result<f64> {
    union_reject_prob_shifted(corr, gates, None, tol, seed)
}

/// [`union_reject_prob`] under a mean-shifted Gaussian (for power); `means`
/// holds one mean per statistic in `corr`.
pub fn union_reject_prob_shifted(
    corr: &CorrelationMatrix,
    gates: &[StageGate],
    means: Option<&[f64]>,
    tol: f64,
    seed: u64,
) -> Result<f64> {
    check_tol(tol)?;
    if gates.is_empty() {
        return Err(Error::InvalidPlan("no stage gates supplied".into()));
    }
    if let Some(m) = means {
        if m.len() != corr.dim() {
            return Err(Error::DimensionMismatch {
                context: "means",
                got: m.len(),
                expected: corr.dim(),
            });
        }
    }
    for w in gates.windows(2) {
        if w[1].stat_index <= w[0].stat_index {
            return Err(Error::InvalidPlan(format!(
                "stage statistic indices must be strictly increasing, got {} then {}",
                w[0].stat_index, w[1].stat_index
            )));
        }
    }
    for g in gates {
        if g.stat_index >= corr.dim() {
            return Err(Error::DimensionMismatch {
                context: "gate statistic index",
                got: g.stat_index,
                expected: corr.dim(),
            });
        }
        if !(g.lower < g.upper) {
            return Err(Error::EmptyRegion {
                index: g.stat_index,
                lower: g.lower,
                upper: g.upper,
            });
        }
    }

    let shift = |g: &StageGate| means.map_or(0.0, |m| m[g.stat_index]);
    let mut total = 0.0;
    for (k, gate) in gates.iter().enumerate() {
        let indices: Vec<usize> = gates[..=k].iter().map(|g| g.stat_index).collect();
        let sub = corr.principal_submatrix(&indices)?;
        let integ = Integrator::prepare(&sub)?;
        let mut lower: Vec<f64> = gates[..k].iter().map(|g| g.lower - shift(g)).collect();
        let mut upper: Vec<f64> = gates[..k].iter().map(|g| g.upper - shift(g)).collect();
        // upper tail crossing
        if gate.upper.is_finite() {
            lower.push(gate.upper - shift(gate));
            upper.push(f64::INFINITY);
            total += integ.prob(&lower, &upper, tol, seed ^ (k as u64) << 32);
            lower.pop();
            upper.pop();
        }
        // lower tail crossing
        if gate.lower.is_finite() {
            lower.push(f64::NEG_INFINITY);
            upper.push(gate.lower - shift(gate));
            total += integ.prob(&lower, &upper, tol, seed ^ (k as u64) << 33);
        }
    }
    Ok(total.clamp(0.0, 1.0))
}

// ---------------------------------------------------------------------------
// Quasi-Monte Carlo integration (Genz sequential conditioning)
// ---------------------------------------------------------------------------

const SQRT_PRIMES: [f64; 15] = [
    1.4142135623730951, // 2
    1.7320508075688772, // 3
    2.23606797749979,   // 5
    2.6457513110645907, // 7
    3.3166247903554,    // 11
    3.605551275463989,  // 13
    4.123105625617661,  // 17
    4.358898943540674,  // 19
    4.795831523312719,  // 23
    5.385164807134504,  // 29
    5.5677643628300215, // 31
    6.082762530298219,  // 37
    6.4031242374328485, // 41
    6.557438524302,     // 43
    6.855654600401044,  // 47
];

fn qmc_prob(chol: &CholeskyFactor, lower: &[f64], upper: &[f64], tol: f64, seed: u64) -> (f64, f64) {
    let dim = chol.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shifts: Vec<Vec<f64>> = (0..SHIFTS)
        .map(|_| (0..dim - 1).map(|_| rng.gen::<f64>()).collect())
        .collect();

    let mut sums = [0.0f64; SHIFTS];
    let mut n_done: usize = 0;
    let mut batch = FIRST_BATCH;
    let per_shift_cap = MAX_POINTS / SHIFTS;
    let mut w = vec![0.0f64; dim - 1];

    loop {
        for (s, shift) in shifts.iter().enumerate() {
            let mut acc = 0.0;
            for k in n_done..(n_done + batch) {
                let kf = (k + 1) as f64;
                for j in 0..dim - 1 {
                    let v = (kf * SQRT_PRIMES[j] + shift[j]).fract();
                    // baker's transform for symmetry
                    w[j] = (2.0 * v - 1.0).abs();
                }
                acc += sample_value(chol, lower, upper, &w);
            }
            sums[s] += acc;
        }
        n_done += batch;

        let means: Vec<f64> = sums.iter().map(|s| s / n_done as f64).collect();
        let mean = means.iter().sum::<f64>() / SHIFTS as f64;
        let var = means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (SHIFTS - 1) as f64;
        let err = 3.0 * (var / SHIFTS as f64).sqrt();
        if err <= tol || n_done >= per_shift_cap {
            return (mean.clamp(0.0, 1.0), err);
        }
        batch = n_done; // double total sample size each round
    }
}

#[inline]
fn sample_value(chol: &CholeskyFactor, lower: &[f64], upper: &[f64], w: &[f64]) -> f64 {
    let dim = chol.dim();
    let mut y = [0.0f64; MAX_DIM];
    let l0 = chol.get(0, 0);
    let mut d = bound_cdf(lower[0], l0);
    let mut e = bound_cdf(upper[0], l0);
    let mut f = (e - d).max(0.0);
    for i in 1..dim {
        let u = (d + w[i - 1] * (e - d)).clamp(1e-16, 1.0 - 1e-16);
        y[i - 1] = phi_inv(u);
        let mut s = 0.0;
        for j in 0..i {
            s += chol.get(i, j) * y[j];
        }
        let lii = chol.get(i, i);
        d = shifted_cdf(lower[i], s, lii);
        e = shifted_cdf(upper[i], s, lii);
        if e < d {
            e = d;
        }
        f *= e - d;
        if f == 0.0 {
            return 0.0;
        }
    }
    f
}

#[inline]
fn bound_cdf(b: f64, scale: f64) -> f64 {
    if b <= -TAIL_LIMIT * scale.max(1e-12) {
        0.0
    } else if b >= TAIL_LIMIT * scale.max(1e-12) {
        1.0
    } else {
        phi(b / scale)
    }
}

#[inline]
fn shifted_cdf(b: f64, offset: f64, scale: f64) -> f64 {
    if b == f64::NEG_INFINITY {
        return 0.0;
    }
    if b == f64::INFINITY {
        return 1.0;
    }
    if scale <= 1e-12 {
        // degenerate conditional: point mass at the offset
        return if b >= offset { 1.0 } else { 0.0 };
    }
    let z = (b - offset) / scale;
    if z <= -TAIL_LIMIT {
        0.0
    } else if z >= TAIL_LIMIT {
        1.0
    } else {
        phi(z)
    }
}

// ---------------------------------------------------------------------------
// Bivariate normal (Drezner-Genz quadrature)
// ---------------------------------------------------------------------------

/// `P(lx < X < ux, ly < Y < uy)` for standard bivariate normal with
/// correlation `r`, by inclusion-exclusion over the upper-tail CDF.
fn bvn_rect(lx: f64, ux: f64, ly: f64, uy: f64, r: f64) -> f64 {
    let p = bvn_upper(lx, ly, r) - bvn_upper(lx, uy, r) - bvn_upper(ux, ly, r)
        + bvn_upper(ux, uy, r);
    p.clamp(0.0, 1.0)
}

/// `P(X > h, Y > k)` for standard bivariate normal with correlation `r`.
/// Drezner & Genz (2004) Gauss-Legendre scheme, |error| < 5e-16.
pub fn bvn_upper(h: f64, k: f64, r: f64) -> f64 {
    if h == f64::INFINITY || k == f64::INFINITY {
        return 0.0;
    }
    let h = clamp_tail(h);
    let k = clamp_tail(k);

    const W6: [f64; 3] = [0.1713244923791705, 0.3607615730481384, 0.4679139345726904];
    const X6: [f64; 3] = [0.9324695142031522, 0.6612093864662647, 0.2386191860831970];
    const W12: [f64; 6] = [
        0.04717533638651177,
        0.1069393259953183,
        0.1600783285433464,
        0.2031674267230659,
        0.2334925365383547,
        0.2491470458134029,
    ];
    const X12: [f64; 6] = [
        0.9815606342467191,
        0.9041172563704750,
        0.7699026741943050,
        0.5873179542866171,
        0.3678314989981802,
        0.1252334085114692,
    ];
    const W20: [f64; 10] = [
        0.01761400713915212,
        0.04060142980038694,
        0.06267204833410906,
        0.08327674157670475,
        0.1019301198172404,
        0.1181945319615184,
        0.1316886384491766,
        0.1420961093183821,
        0.1491729864726037,
        0.1527533871307259,
    ];
    const X20: [f64; 10] = [
        0.9931285991850949,
        0.9639719272779138,
        0.9122344282513259,
        0.8391169718222188,
        0.7463319064601508,
        0.6360536807265150,
        0.5108670019508271,
        0.3737060887154196,
        0.2277858511416451,
        0.07652652113349732,
    ];

    let (w, x): (&[f64], &[f64]) = if r.abs() < 0.3 {
        (&W6, &X6)
    } else if r.abs() < 0.75 {
        (&W12, &X12)
    } else {
        (&W20, &X20)
    };

    let two_pi = std::f64::consts::TAU;
    let h = h;
    let mut k = k;
    let mut bvn = 0.0;
    if r.abs() < 0.925 {
        let hk = h * k;
        let hs = (h * h + k * k) / 2.0;
        let asr = r.asin();
        for i in 0..w.len() {
            for sign in [-1.0, 1.0] {
                let sn = (asr * (sign * x[i] + 1.0) / 2.0).sin();
                bvn += w[i] * ((sn * hk - hs) / (1.0 - sn * sn)).exp();
            }
        }
        bvn = bvn * asr / (2.0 * two_pi);
        bvn + phi(-h) * phi(-k)
    } else {
        if r < 0.0 {
            k = -k;
        }
        let hk = h * k * r.signum();
        if r.abs() < 1.0 {
            let asq = (1.0 - r) * (1.0 + r);
            let a = asq.sqrt();
            let bs = (h - k) * (h - k);
            let c = (4.0 - hk) / 8.0;
            let d = (12.0 - hk) / 16.0;
            let asr = -(bs / asq + hk) / 2.0;
            if asr > -100.0 {
                bvn = a * asr.exp() * (1.0 - c * (bs - asq) * (1.0 - d * bs / 5.0) / 3.0
                    + c * d * asq * asq / 5.0);
            }
            if -hk < 100.0 {
                let b = bs.sqrt();
                bvn -= (-hk / 2.0).exp()
                    * (two_pi).sqrt()
                    * phi(-b / a)
                    * b
                    * (1.0 - c * bs * (1.0 - d * bs / 5.0) / 3.0);
            }
            let a_half = a / 2.0;
            for i in 0..w.len() {
                for sign in [-1.0, 1.0] {
                    let xs = (a_half * (sign * x[i] + 1.0)).powi(2);
                    let rs = (1.0 - xs).sqrt();
                    let asr1 = -(bs / xs + hk) / 2.0;
                    if asr1 > -100.0 {
                        bvn += a_half
                            * w[i]
                            * asr1.exp()
                            * ((-hk * (1.0 - rs) / (2.0 * (1.0 + rs))).exp() / rs
                                - (1.0 + c * xs * (1.0 + d * xs)));
                    }
                }
            }
            bvn = -bvn / two_pi;
        }
        if r > 0.0 {
            bvn + phi(-h.max(k))
        } else {
            let mut out = -bvn;
            if k > h {
                out += phi(k) - phi(h);
            }
            out.max(0.0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn corr2(r: f64) -> CorrelationMatrix {
        CorrelationMatrix::new(2, vec![1.0, r, r, 1.0]).unwrap()
    }

    #[test]
    fn univariate_reduces_to_cdf() {
        let c = CorrelationMatrix::identity(1);
        let region = OrthantRegion::new(vec![-1.959964], vec![1.959964]).unwrap();
        let p = rect_prob(&c, &region, 1e-6, 7).unwrap();
        assert_abs_diff_eq!(p, 0.95, epsilon = 1e-6);
    }

    #[test]
    fn independent_quadrant() {
        let region = OrthantRegion::new(vec![f64::NEG_INFINITY; 2], vec![0.0, 0.0]).unwrap();
        let p = rect_prob(&corr2(0.0), &region, 1e-6, 7).unwrap();
        assert_abs_diff_eq!(p, 0.25, epsilon = 1e-9);
    }

    #[test]
    fn orthant_closed_form() {
        // P(X<0, Y<0) = 1/4 + asin(rho) / (2 pi)
        for rho in [-0.9f64, -0.5, 0.0, 0.3, 0.5, 0.8, 0.95] {
            let region = OrthantRegion::new(vec![f64::NEG_INFINITY; 2], vec![0.0, 0.0]).unwrap();
            let expect = 0.25 + rho.asin() / std::f64::consts::TAU;
            let p = rect_prob(&corr2(rho), &region, 1e-6, 7).unwrap();
            assert_abs_diff_eq!(p, expect, epsilon = 1e-10);
        }
    }

    #[test]
    fn trivariate_independent_factors() {
        let c = CorrelationMatrix::identity(3);
        let region =
            OrthantRegion::new(vec![f64::NEG_INFINITY; 3], vec![0.0, 1.0, -0.5]).unwrap();
        let expect = 0.5 * phi(1.0) * phi(-0.5);
        let p = rect_prob(&c, &region, 1e-6, 3).unwrap();
        assert_abs_diff_eq!(p, expect, epsilon = 5e-6);
    }

    #[test]
    fn whole_space_is_one() {
        for dim in [1usize, 2, 3, 5] {
            let c = CorrelationMatrix::from_fn(dim, |i, j| if i == j { 1.0 } else { 0.4 }).unwrap();
            let p = rect_prob(&c, &OrthantRegion::whole_space(dim), 1e-5, 11).unwrap();
            assert_abs_diff_eq!(p, 1.0, epsilon = 1e-5);
        }
    }

    #[test]
    fn deterministic_replay() {
        let c = CorrelationMatrix::from_fn(4, |i, j| if i == j { 1.0 } else { 0.35 }).unwrap();
        let region = OrthantRegion::new(vec![-1.0; 4], vec![2.0; 4]).unwrap();
        let a = rect_prob(&c, &region, 1e-5, 42).unwrap();
        let b = rect_prob(&c, &region, 1e-5, 42).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn cholesky_closed_form_2x2() {
        let f = corr2(0.6).cholesky().unwrap();
        assert_abs_diff_eq!(f.get(0, 0), 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(f.get(1, 0), 0.6, epsilon = 1e-14);
        assert_abs_diff_eq!(f.get(1, 1), 0.8, epsilon = 1e-14);
        assert_eq!(f.jitter, 0.0);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let m = CorrelationMatrix {
            dim: 2,
            entries: vec![1.0, 1.5, 1.5, 1.0],
        };
        assert!(matches!(
            m.cholesky(),
            Err(Error::NotPositiveSemidefinite { .. })
        ));
    }

    #[test]
    fn validation_errors() {
        assert!(matches!(
            CorrelationMatrix::new(2, vec![1.0, 0.2, 0.3, 1.0]),
            Err(Error::NotSymmetric { .. })
        ));
        assert!(matches!(
            CorrelationMatrix::new(2, vec![2.0, 0.0, 0.0, 1.0]),
            Err(Error::NotUnitDiagonal { .. })
        ));
        assert!(matches!(
            CorrelationMatrix::new(17, vec![0.0; 17 * 17]),
            Err(Error::DimensionTooLarge { .. })
        ));
        assert!(OrthantRegion::new(vec![1.0], vec![1.0]).is_err());
    }

    #[test]
    fn markov_recursion_matches_qmc() {
        // chain with links sqrt(t_k / t_{k+1}) plus a mixed-method final link
        let t = [0.25f64, 0.5, 0.75, 1.0];
        let rho = 0.5;
        let corr = CorrelationMatrix::from_fn(4, |i, j| {
            let time = (t[i.min(j)] / t[i.max(j)]).sqrt();
            if (i == 3) != (j == 3) {
                time * rho
            } else {
                time
            }
        })
        .unwrap();
        let integ = Integrator::prepare(&corr).unwrap();
        assert!(integ.is_exact());
        let lower = vec![-2.0, -2.2, -2.4, 1.0];
        let upper = vec![2.0, 2.2, 2.4, f64::INFINITY];
        let fast = integ.prob(&lower, &upper, 1e-6, 7);
        let slow = qmc_prob(&corr.cholesky().unwrap(), &lower, &upper, 1e-6, 7).0;
        assert_abs_diff_eq!(fast, slow, epsilon = 3e-6);
    }

    #[test]
    fn markov_recursion_independent_product() {
        let corr = CorrelationMatrix::identity(5);
        let integ = Integrator::prepare(&corr).unwrap();
        assert!(integ.is_exact());
        let lower = vec![-1.0, -2.0, f64::NEG_INFINITY, 0.0, -0.5];
        let upper = vec![1.0, 0.5, 1.5, f64::INFINITY, 2.5];
        let expect: f64 = lower
            .iter()
            .zip(&upper)
            .map(|(&l, &u)| phi(u.min(TAIL_LIMIT)) - phi(l.max(-TAIL_LIMIT)))
            .product();
        assert_abs_diff_eq!(integ.prob(&lower, &upper, 1e-6, 7), expect, epsilon = 1e-10);
    }

    #[test]
    fn markov_degenerate_link_merges_bounds() {
        // perfectly correlated pair behaves as a single coordinate with
        // intersected bounds
        let t = [0.5f64, 1.0, 1.0];
        let corr = CorrelationMatrix::from_fn(3, |i, j| (t[i.min(j)] / t[i.max(j)]).sqrt()).unwrap();
        let integ = Integrator::prepare(&corr).unwrap();
        let p = integ.prob(&[-2.0, -1.0, -3.0], &[2.0, 3.0, 1.5], 1e-6, 7);
        let expect = bvn_rect(-2.0, 2.0, -1.0, 1.5, 0.5f64.sqrt());
        assert_abs_diff_eq!(p, expect, epsilon = 1e-9);
        // and an empty intersection kills the probability
        let p0 = integ.prob(&[-2.0, 2.0, -3.0], &[2.0, 3.0, 1.0], 1e-6, 7);
        assert_eq!(p0, 0.0);
    }

    #[test]
    fn non_markov_matrix_uses_qmc() {
        let corr = CorrelationMatrix::from_fn(3, |i, j| if i == j { 1.0 } else { 0.4 }).unwrap();
        let integ = Integrator::prepare(&corr).unwrap();
        assert!(!integ.is_exact());
    }

    #[test]
    fn union_single_stage_two_sided() {
        let c = CorrelationMatrix::identity(1);
        let gates = [StageGate {
            stat_index: 0,
            lower: -1.959964,
            upper: 1.959964,
        }];
        let p = union_reject_prob(&c, &gates, 1e-6, 5).unwrap();
        assert_abs_diff_eq!(p, 0.05, epsilon = 1e-6);
    }

    #[test]
    fn union_infinite_bounds_reject_nothing() {
        let c = corr2(0.7071067811865476);
        let gates = [
            StageGate {
                stat_index: 0,
                lower: f64::NEG_INFINITY,
                upper: f64::INFINITY,
            },
            StageGate {
                stat_index: 1,
                lower: f64::NEG_INFINITY,
                upper: f64::INFINITY,
            },
        ];
        let p = union_reject_prob(&c, &gates, 1e-6, 5).unwrap();
        assert_abs_diff_eq!(p, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn union_plus_continuation_is_one() {
        let c = corr2(0.7071067811865476);
        let u = 2.178;
        let gates = [
            StageGate {
                stat_index: 0,
                lower: -u,
                upper: u,
            },
            StageGate {
                stat_index: 1,
                lower: -u,
                upper: u,
            },
        ];
        let reject = union_reject_prob(&c, &gates, 1e-6, 5).unwrap();
        let cont = rect_prob(
            &c,
            &OrthantRegion::new(vec![-u, -u], vec![u, u]).unwrap(),
            1e-6,
            5,
        )
        .unwrap();
        assert_abs_diff_eq!(reject + cont, 1.0, epsilon = 2e-6);
    }

    #[test]
    fn union_rejects_bad_gate_order() {
        let c = corr2(0.5);
        let gates = [
            StageGate {
                stat_index: 1,
                lower: -2.0,
                upper: 2.0,
            },
            StageGate {
                stat_index: 0,
                lower: -2.0,
                upper: 2.0,
            },
        ];
        assert!(union_reject_prob(&c, &gates, 1e-4, 1).is_err());
    }
}
