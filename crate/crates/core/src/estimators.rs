//! Stage-wise treatment effect estimators: the un-adjusted difference in
//! means (ANOVA) and the covariate-adjusted least-squares fit (ANCOVA),
//! plus the variance-ratio estimate linking the two.
//!
//! Treatment is coded `a = -1/+1`, so the effect `delta` is half the
//! difference between arm means and both fits estimate the same target.
//! Residual variances are unbiased (`n - 2` and `n - p - 2` denominators),
//! and the standardized monitoring statistic is `delta_hat * sqrt(n) / sd`.

use crate::covariance::Method;
use crate::error::{Error, Result};

/// One enrolled subject. `arm` is -1 or +1; `stage` is the 1-based stage in
/// which the subject's outcome becomes available.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub y: f64,
    pub arm: f64,
    pub covariates: Vec<f64>,
    pub stage: usize,
}

/// A fitted treatment effect with its residual standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub method: Method,
    /// Subjects used in the fit.
    pub n: usize,
    /// Covariates used (0 for the un-adjusted fit).
    pub p: usize,
    pub delta_hat: f64,
    /// Residual standard deviation (unbiased variance estimate).
    pub sd: f64,
}

impl FitResult {
    /// Standard error of `delta_hat` under 1:1 allocation.
    #[inline]
    pub fn se(&self) -> f64 {
        self.sd / (self.n as f64).sqrt()
    }
}

/// Standardized monitoring statistic `delta_hat * sqrt(n) / sd`.
#[inline]
pub fn standardized_stat(fit: &FitResult) -> f64 {
    fit.delta_hat * (fit.n as f64).sqrt() / fit.sd
}

/// Estimated ratio of adjusted to un-adjusted residual standard deviation,
/// clamped to the valid correlation range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RhoEstimate {
    pub rho: f64,
    /// True when the raw ratio fell outside [1e-6, 1] and was clamped.
    pub clamped: bool,
}

/// `rho_hat = sd_ancova / sd_anova`, clamped to [1e-6, 1].
pub fn estimate_rho(ancova: &FitResult, anova: &FitResult) -> Result<RhoEstimate> {
    if anova.sd <= 0.0 || ancova.sd <= 0.0 {
        return Err(Error::InvalidParameter {
            name: "sd",
            value: anova.sd.min(ancova.sd),
            constraint: "residual sd > 0",
        });
    }
    let raw = ancova.sd / anova.sd;
    let rho = raw.clamp(1e-6, 1.0);
    Ok(RhoEstimate {
        rho,
        clamped: raw != rho,
    })
}

fn check_arms(data: &[SubjectRecord]) -> Result<(usize, usize)> {
    let mut n_pos = 0usize;
    let mut n_neg = 0usize;
    for (i, r) in data.iter().enumerate() {
        if r.arm == 1.0 {
            n_pos += 1;
        } else if r.arm == -1.0 {
            n_neg += 1;
        } else {
            return Err(Error::Data(format!(
                "record {i}: arm must be -1 or +1, got {}",
                r.arm
            )));
        }
        if !r.y.is_finite() {
            return Err(Error::Data(format!("record {i}: outcome is not finite")));
        }
    }
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Data(format!(
            "both arms must be represented (got {n_pos} treated, {n_neg} control)"
        )));
    }
    Ok((n_pos, n_neg))
}

/// Un-adjusted fit: `delta_hat = (mean_treated - mean_control) / 2`, residual
/// variance pooled within arms with denominator `n - 2`.
pub fn fit_anova(data: &[SubjectRecord]) -> Result<FitResult> {
    let (n_pos, n_neg) = check_arms(data)?;
    let n = data.len();
    if n < 3 {
        return Err(Error::Data(format!(
            "need at least 3 subjects for a residual variance, got {n}"
        )));
    }
    let mut sum_pos = 0.0;
    let mut sum_neg = 0.0;
    for r in data {
        if r.arm == 1.0 {
            sum_pos += r.y;
        } else {
            sum_neg += r.y;
        }
    }
    let mean_pos = sum_pos / n_pos as f64;
    let mean_neg = sum_neg / n_neg as f64;
    let mut rss = 0.0;
    for r in data {
        let m = if r.arm == 1.0 { mean_pos } else { mean_neg };
        rss += (r.y - m) * (r.y - m);
    }
    let var = rss / (n - 2) as f64;
    Ok(FitResult {
        method: Method::Anova,
        n,
        p: 0,
        delta_hat: (mean_pos - mean_neg) / 2.0,
        sd: var.sqrt(),
    })
}

/// Covariate-adjusted fit: least squares of `y` on intercept, arm, and the
/// mean-centered covariates; residual variance denominator `n - p - 2`.
pub fn fit_ancova(data: &[SubjectRecord]) -> Result<FitResult> {
    check_arms(data)?;
    let n = data.len();
    let p = data[0].covariates.len();
    if p == 0 {
        return Err(Error::Data(
            "covariate-adjusted fit requires at least one covariate".into(),
        ));
    }
    for (i, r) in data.iter().enumerate() {
        if r.covariates.len() != p {
            return Err(Error::Data(format!(
                "record {i}: {} covariates, expected {p}",
                r.covariates.len()
            )));
        }
        if r.covariates.iter().any(|x| !x.is_finite()) {
            return Err(Error::Data(format!("record {i}: covariate is not finite")));
        }
    }
    let dim = p + 2;
    if n < dim + 1 {
        return Err(Error::Data(format!(
            "need at least {} subjects to fit {p} covariates, got {n}",
            dim + 1
        )));
    }

    let mut means = vec![0.0f64; p];
    for r in data {
        for (m, &x) in means.iter_mut().zip(&r.covariates) {
            *m += x;
        }
    }
    for m in &mut means {
        *m /= n as f64;
    }

    // normal equations on [1, a, x - x_bar]
    let mut xtx = vec![0.0f64; dim * dim];
    let mut xty = vec![0.0f64; dim];
    let mut row = vec![0.0f64; dim];
    for r in data {
        row[0] = 1.0;
        row[1] = r.arm;
        for j in 0..p {
            row[2 + j] = r.covariates[j] - means[j];
        }
        for i in 0..dim {
            for j in 0..=i {
                xtx[i * dim + j] += row[i] * row[j];
            }
            xty[i] += row[i] * r.y;
        }
    }
    for i in 0..dim {
        for j in (i + 1)..dim {
            xtx[i * dim + j] = xtx[j * dim + i];
        }
    }

    let beta = solve_spd(dim, &xtx, &xty, |col| column_name(col))?;

    let mut rss = 0.0;
    for r in data {
        let mut fitted = beta[0] + beta[1] * r.arm;
        for j in 0..p {
            fitted += beta[2 + j] * (r.covariates[j] - means[j]);
        }
        rss += (r.y - fitted) * (r.y - fitted);
    }
    let var = rss / (n - p - 2) as f64;
    Ok(FitResult {
        method: Method::Ancova,
        n,
        p,
        delta_hat: beta[1],
        sd: var.sqrt(),
    })
}

fn column_name(col: usize) -> String {
    match col {
        0 => "intercept".into(),
        1 => "a".into(),
        j => format!("x{}", j - 1),
    }
}

/// Cholesky solve of a symmetric positive-definite system, reporting the
/// offending column on rank deficiency.
fn solve_spd(
    dim: usize,
    a: &[f64],
    b: &[f64],
    name: impl Fn(usize) -> String,
) -> Result<Vec<f64>> {
    let mut l = vec![0.0f64; dim * dim];
    for i in 0..dim {
        for j in 0..=i {
            let mut s = a[i * dim + j];
            for k in 0..j {
                s -= l[i * dim + k] * l[j * dim + k];
            }
            if i == j {
                let scale = a[i * dim + i].max(1.0);
                if s <= scale * 1e-12 {
                    return Err(Error::RankDeficient {
                        column: i,
                        name: name(i),
                    });
                }
                l[i * dim + i] = s.sqrt();
            } else {
                l[i * dim + j] = s / l[j * dim + j];
            }
        }
    }
    // forward then backward substitution
    let mut z = vec![0.0f64; dim];
    for i in 0..dim {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * dim + k] * z[k];
        }
        z[i] = s / l[i * dim + i];
    }
    let mut x = vec![0.0f64; dim];
    for i in (0..dim).rev() {
        let mut s = z[i];
        for k in (i + 1)..dim {
            s -= l[k * dim + i] * x[k];
        }
        x[i] = s / l[i * dim + i];
    }
    Ok(x)
}

/// Parsed dataset plus notes about coercions applied while reading it.
#[derive(Debug, Clone)]
pub struct ParsedData {
    pub records: Vec<SubjectRecord>,
    /// True when the arm column used `0/1` coding and `0` was mapped to `-1`.
    pub arm_zero_coded: bool,
}

/// Parses subject data in `y,a,x1,...,xp,stage` CSV form. Arm coding may be
/// `-1/1` or `0/1`; a `0` arm is mapped to `-1`.
pub fn parse_csv(text: &str) -> Result<ParsedData> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Data("empty data file".into()))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() < 3 || cols[0] != "y" || cols[1] != "a" || *cols.last().unwrap() != "stage" {
        return Err(Error::Data(format!(
            "header must be y,a,x1,...,xp,stage; got {header:?}"
        )));
    }
    let p = cols.len() - 3;
    for (j, c) in cols[2..2 + p].iter().enumerate() {
        let expect = format!("x{}", j + 1);
        if *c != expect {
            return Err(Error::Data(format!(
                "covariate column {} is named {c:?}, expected {expect:?}",
                j + 3
            )));
        }
    }

    let mut out = Vec::new();
    let mut saw_zero = false;
    let mut saw_neg = false;
    for (lineno, line) in lines {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != cols.len() {
            return Err(Error::Data(format!(
                "line {}: {} fields, expected {}",
                lineno + 1,
                fields.len(),
                cols.len()
            )));
        }
        let num = |idx: usize| -> Result<f64> {
            fields[idx].parse::<f64>().map_err(|_| {
                Error::Data(format!(
                    "line {}: cannot parse {:?} in column {:?}",
                    lineno + 1,
                    fields[idx],
                    cols[idx]
                ))
            })
        };
        let y = num(0)?;
        let mut arm = num(1)?;
        if arm == 0.0 {
            saw_zero = true;
            arm = -1.0;
        } else if arm == -1.0 {
            saw_neg = true;
        } else if arm != 1.0 {
            return Err(Error::Data(format!(
                "line {}: arm must be -1/1 or 0/1, got {}",
                lineno + 1,
                fields[1]
            )));
        }
        if saw_zero && saw_neg {
            return Err(Error::Data(
                "arm column mixes 0/1 and -1/1 codings".into(),
            ));
        }
        let covariates = (2..2 + p).map(num).collect::<Result<Vec<f64>>>()?;
        let stage = fields[cols.len() - 1].parse::<usize>().map_err(|_| {
            Error::Data(format!(
                "line {}: stage must be a positive integer, got {:?}",
                lineno + 1,
                fields[cols.len() - 1]
            ))
        })?;
        if stage == 0 {
            return Err(Error::Data(format!("line {}: stage must be >= 1", lineno + 1)));
        }
        out.push(SubjectRecord {
            y,
            arm,
            covariates,
            stage,
        });
    }
    if out.is_empty() {
        return Err(Error::Data("no data rows".into()));
    }
    Ok(ParsedData {
        records: out,
        arm_zero_coded: saw_zero,
    })
}
