//! Command implementations: each takes a validated config section, writes
//! its output files, and returns the human-readable summary that `main`
//! prints.

use std::fmt::Write as _;
use std::path::Path;

use seqcov::boundaries::{design_boundaries, BoundaryShape, SpendingFunction, SpendingState};
use seqcov::covariance::{AnalysisSchedule, Method, StagePlan};
use seqcov::estimators::{
    estimate_rho, fit_ancova, fit_anova, parse_csv, standardized_stat, FitResult, SubjectRecord,
};
use seqcov::inference::{analyze_path, InferenceResult, StatisticPath};
use seqcov::mvn::{bvn_upper, rect_prob, CorrelationMatrix, OrthantRegion};
use seqcov::norm::{phi, phi_inv};
use seqcov::simulation::{aggregate, run_replicates, GeneratorConfig, ScenarioSpec, SimReport};
use serde_json::json;

use crate::config::{AnalyzeConfig, DesignConfig, SimulateConfig, SpendConfig};
use crate::CliError;

/// Formats a float with 7 significant digits for human-readable output.
pub fn sig7(x: f64) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    if x == 0.0 {
        return "0".into();
    }
    let mag = x.abs().log10().floor() as i32;
    if !(-3..7).contains(&mag) {
        return format!("{x:.6e}");
    }
    let decimals = (6 - mag).max(0) as usize;
    format!("{x:.decimals$}")
}

fn shape_for(spending: SpendingFunction) -> BoundaryShape {
    match spending {
        SpendingFunction::PocockApprox => BoundaryShape::PocockFlat,
        SpendingFunction::ObfApprox => BoundaryShape::ObfSqrtDecay,
    }
}

fn write_out(out_dir: &Path, name: &str, content: &str) -> Result<(), CliError> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::validation(format!("cannot create {}: {e}", out_dir.display())))?;
    let path = out_dir.join(name);
    std::fs::write(&path, content)
        .map_err(|e| CliError::validation(format!("cannot write {}: {e}", path.display())))
}

pub fn cmd_design(cfg: &DesignConfig, out_dir: &Path) -> Result<String, CliError> {
    let plan = StagePlan::new(cfg.stages.clone())?;
    let k = plan.num_stages();
    let schedule = AnalysisSchedule {
        methods: cfg
            .methods
            .clone()
            .unwrap_or_else(|| vec![Method::Anova; k]),
        hybrid_final: cfg.hybrid_final,
    };
    if schedule.methods.len() != k {
        return Err(CliError::validation(format!(
            "methods has {} entries but the plan has {k} stages",
            schedule.methods.len()
        )));
    }
    let set = design_boundaries(
        &plan,
        &schedule,
        cfg.rho,
        cfg.alpha,
        shape_for(cfg.spending),
        1e-6,
        cfg.seed,
    )?;
    write_out(out_dir, "boundaries.csv", &set.to_csv())?;
    let spent = set.stages.last().map(|s| s.alpha_cum).unwrap_or(0.0);
    let mut s = String::new();
    let _ = writeln!(s, "design: {k} stages, alpha = {}", sig7(cfg.alpha));
    for b in &set.stages {
        let _ = writeln!(
            s,
            "  stage {} (t = {}, {}): [{}, {}]  alpha spent {}",
            b.stage,
            sig7(b.t_star),
            b.method,
            sig7(b.lower),
            sig7(b.upper),
            sig7(b.alpha_cum),
        );
    }
    let _ = writeln!(
        s,
        "total alpha spent {} (target {}, residual {})",
        sig7(spent),
        sig7(cfg.alpha),
        sig7(cfg.alpha - spent),
    );
    let _ = writeln!(s, "wrote {}", out_dir.join("boundaries.csv").display());
    Ok(s)
}

pub fn cmd_spend(cfg: &SpendConfig, out_dir: &Path) -> Result<String, CliError> {
    let mut state = SpendingState::new(cfg.alpha, cfg.spending, 1e-7, cfg.seed)?;
    let mut s = String::new();
    let _ = writeln!(s, "alpha spending: alpha = {}", sig7(cfg.alpha));
    for look in &cfg.looks {
        let b = state.next_boundary(look.t, look.method, look.rho)?;
        let _ = writeln!(
            s,
            "  look t = {} ({}, rho = {}): [{}, {}]  spent {} of {}",
            sig7(b.t_star),
            b.method,
            sig7(look.rho),
            sig7(b.lower),
            sig7(b.upper),
            sig7(b.alpha_cum),
            sig7(cfg.alpha),
        );
    }
    write_out(out_dir, "boundaries.csv", &state.boundary_set().to_csv())?;
    let _ = writeln!(s, "wrote {}", out_dir.join("boundaries.csv").display());
    Ok(s)
}

fn fit_by(method: Method, data: &[SubjectRecord]) -> seqcov::Result<FitResult> {
    match method {
        Method::Anova => fit_anova(data),
        Method::Ancova => fit_ancova(data),
    }
}

fn report_block(s: &mut String, name: &str, r: &InferenceResult) {
    let _ = writeln!(s, "{name}:");
    let _ = writeln!(s, "  estimate      {}", sig7(r.estimate));
    let _ = writeln!(
        s,
        "  {}% CI        [{}, {}]",
        r.level * 100.0,
        sig7(r.ci_lower),
        sig7(r.ci_upper)
    );
    let _ = writeln!(s, "  p-value       {}", sig7(r.p_value));
    let _ = writeln!(s, "  naive         {}", sig7(r.naive_estimate));
}

pub fn cmd_analyze(
    cfg: &AnalyzeConfig,
    config_dir: &Path,
    out_dir: &Path,
) -> Result<String, CliError> {
    let data_path = config_dir.join(&cfg.data);
    let text = std::fs::read_to_string(&data_path).map_err(|e| {
        CliError::validation(format!("cannot read data {}: {e}", data_path.display()))
    })?;
    let parsed = parse_csv(&text)?;
    let data = parsed.records;
    let plan = StagePlan::new(cfg.stages.clone())?;
    let k_max = plan.num_stages();

    // observed stop stage and enrollment check against the plan
    let stop = data.iter().map(|r| r.stage).max().unwrap_or(0);
    if stop == 0 || stop > k_max {
        return Err(CliError::validation(format!(
            "data stages run to {stop}, but the plan has {k_max} stages"
        )));
    }
    let mut sorted = data;
    sorted.sort_by_key(|r| r.stage);
    for k in 1..=stop {
        let have = sorted.iter().filter(|r| r.stage <= k).count() as u64;
        let want = plan.cumulative_n(k);
        if have != want {
            return Err(CliError::validation(format!(
                "stage {k}: cumulative enrollment {have} does not match the plan ({want})"
            )));
        }
    }

    // single-stage data has no interim monitoring, so the hybrid flag is moot
    let hybrid = cfg.hybrid && k_max > 1;
    let monitor = if hybrid {
        Method::Anova
    } else if cfg.hybrid {
        Method::Ancova
    } else {
        cfg.method.unwrap_or(Method::Anova)
    };
    let est_method = if hybrid { Method::Ancova } else { monitor };

    // boundaries: explicit, or reconstructed from the spending function at
    // sd ratio 1 (standard un-adjusted monitoring practice)
    let (lower, upper) = match (&cfg.lower, &cfg.upper) {
        (Some(lo), Some(hi)) => {
            if lo.len() != k_max || hi.len() != k_max {
                return Err(CliError::validation(format!(
                    "explicit boundaries must have {k_max} entries"
                )));
            }
            (lo.clone(), hi.clone())
        }
        (None, None) => {
            let mut st = SpendingState::new(cfg.alpha, cfg.spending, 1e-7, cfg.seed)?;
            let mut lo = Vec::with_capacity(k_max);
            let mut hi = Vec::with_capacity(k_max);
            for k in 1..=k_max {
                let b = st.next_boundary(plan.info_fraction(k), Method::Anova, 1.0)?;
                lo.push(b.lower);
                hi.push(b.upper);
            }
            (lo, hi)
        }
        _ => {
            return Err(CliError::validation(
                "lower and upper must be given together".into(),
            ))
        }
    };

    // fit the monitored statistic stage by stage
    let mut interim_z = Vec::with_capacity(stop - 1);
    for k in 1..stop {
        let cum = &sorted[..plan.cumulative_n(k) as usize];
        interim_z.push(standardized_stat(&fit_by(monitor, cum)?));
    }
    let cum = &sorted[..plan.cumulative_n(stop) as usize];
    let anova = fit_anova(cum)?;
    let ancova = fit_ancova(cum)?;
    let rho_hat = estimate_rho(&ancova, &anova)?;
    let est_fit = match est_method {
        Method::Anova => &anova,
        Method::Ancova => &ancova,
    };
    let z_obs = standardized_stat(est_fit);
    let z_monitored = standardized_stat(match monitor {
        Method::Anova => &anova,
        Method::Ancova => &ancova,
    });

    // Wald analysis
    let z_crit = phi_inv(1.0 - (1.0 - cfg.level) / 2.0);
    let se = est_fit.se();
    let simple_ci = (est_fit.delta_hat - z_crit * se, est_fit.delta_hat + z_crit * se);
    let simple_p = (2.0 * (1.0 - phi(z_obs.abs()))).min(1.0);

    let gs_path = StatisticPath {
        plan: plan.clone(),
        methods: vec![est_method; k_max],
        hybrid_final: false,
        lower: lower.clone(),
        upper: upper.clone(),
        stop_stage: stop,
        interim_z: interim_z.clone(),
        z_obs,
        rho: 1.0,
        sigma_tilde: est_fit.sd,
    };
    let gs = analyze_path(&gs_path, cfg.ordering, cfg.level, 1e-7, cfg.seed)?;
    let gs_adjust = if hybrid {
        let path = StatisticPath {
            plan: plan.clone(),
            methods: vec![Method::Anova; k_max],
            hybrid_final: true,
            lower: lower.clone(),
            upper: upper.clone(),
            stop_stage: stop,
            interim_z: interim_z.clone(),
            z_obs,
            rho: rho_hat.rho,
            sigma_tilde: anova.sd,
        };
        analyze_path(&path, cfg.ordering, cfg.level, 1e-7, cfg.seed)?
    } else {
        gs.clone()
    };

    let mut s = String::new();
    let _ = writeln!(s, "analysis of {}", data_path.display());
    if parsed.arm_zero_coded {
        let _ = writeln!(s, "note: arm column used 0/1 coding; 0 mapped to -1");
    }
    let _ = writeln!(
        s,
        "design: {k_max} stages, alpha = {}, ordering = {:?}",
        sig7(cfg.alpha),
        cfg.ordering
    );
    let _ = writeln!(s, "observed path:");
    for k in 1..=stop {
        let z = if k < stop { interim_z[k - 1] } else { z_monitored };
        let _ = writeln!(
            s,
            "  stage {k} (t = {}, {}): z = {}  bounds [{}, {}]",
            sig7(plan.info_fraction(k)),
            monitor,
            sig7(z),
            sig7(lower[k - 1]),
            sig7(upper[k - 1]),
        );
    }
    let _ = writeln!(
        s,
        "stopped at stage {stop} of {k_max}; estimation method {est_method}; z = {}",
        sig7(z_obs)
    );
    let _ = writeln!(
        s,
        "sd ratio estimate rho = {}{}",
        sig7(rho_hat.rho),
        if rho_hat.clamped { " (clamped)" } else { "" }
    );
    let _ = writeln!(s);
    let _ = writeln!(s, "simple (Wald):");
    let _ = writeln!(s, "  estimate      {}", sig7(est_fit.delta_hat));
    let _ = writeln!(
        s,
        "  {}% CI        [{}, {}]",
        cfg.level * 100.0,
        sig7(simple_ci.0),
        sig7(simple_ci.1)
    );
    let _ = writeln!(s, "  p-value       {}", sig7(simple_p));
    report_block(&mut s, "gs (sequential, single-method covariance)", &gs);
    report_block(&mut s, "gs-adjust (sequential, mixed-method covariance)", &gs_adjust);
    let _ = writeln!(s, "audit (mixed-method analysis):");
    for t in &gs_adjust.audit {
        let _ = writeln!(
            s,
            "  dim {}  P0 = {}  {}",
            t.dim,
            sig7(t.prob_null),
            t.description
        );
    }

    let report = json!({
        "data": cfg.data,
        "arm_zero_coded": parsed.arm_zero_coded,
        "stop_stage": stop,
        "num_stages": k_max,
        "monitor_method": format!("{monitor}"),
        "estimation_method": format!("{est_method}"),
        "interim_z": interim_z,
        "z_obs": z_obs,
        "rho_hat": rho_hat.rho,
        "rho_clamped": rho_hat.clamped,
        "lower": lower,
        "upper": upper,
        "simple": {
            "estimate": est_fit.delta_hat,
            "ci_lower": simple_ci.0,
            "ci_upper": simple_ci.1,
            "p_value": simple_p,
            "level": cfg.level,
        },
        "gs": gs,
        "gs_adjust": gs_adjust,
    });
    write_out(out_dir, "analysis.txt", &s)?;
    write_out(
        out_dir,
        "report.json",
        &serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    Ok(s)
}

fn equal_plan(n: u64, stages: usize) -> Result<StagePlan, CliError> {
    if stages == 0 || n < stages as u64 {
        return Err(CliError::validation(format!(
            "cannot split n = {n} into {stages} stages"
        )));
    }
    let cum: Vec<u64> = (1..=stages as u64)
        .map(|k| (n as f64 * k as f64 / stages as f64).round() as u64)
        .collect();
    Ok(StagePlan::new(cum)?)
}

const RESULT_COLUMNS: &str = "delta,rho,n,scenario,reps,reject_rate,reject_se,\
simple_median_bias,simple_mean_bias,simple_coverage,simple_coverage_se,\
gs_median_bias,gs_mean_bias,gs_coverage,gs_coverage_se,\
gs_adjust_median_bias,gs_adjust_mean_bias,gs_adjust_coverage,gs_adjust_coverage_se,\
n_failed";

fn result_row(r: &SimReport) -> String {
    let ests = [&r.simple, &r.gs, &r.gs_adjust];
    let mut row = format!(
        "{},{},{},{},{},{:.6e},{:.6e}",
        r.delta, r.rho, r.n_total, r.scenario, r.n_reps, r.reject_rate, r.reject_se
    );
    for e in ests {
        let _ = write!(
            row,
            ",{:.6e},{:.6e},{:.6e},{:.6e}",
            e.median_scaled_bias, e.mean_scaled_bias, e.coverage, e.coverage_se
        );
    }
    let failed: usize = ests.iter().map(|e| e.n_failed).sum();
    let _ = write!(row, ",{failed}");
    row
}

pub fn cmd_simulate(
    cfg: &SimulateConfig,
    seed_override: Option<u64>,
    out_dir: &Path,
) -> Result<String, CliError> {
    if cfg.reps < 100 {
        return Err(CliError::validation(format!(
            "reps must be at least 100, got {}",
            cfg.reps
        )));
    }
    let seed = seed_override.unwrap_or(cfg.seed);
    let mut csv = String::from(RESULT_COLUMNS);
    csv.push('\n');
    let mut reports: Vec<SimReport> = Vec::new();
    let mut s = String::new();
    for cell in &cfg.cells {
        let plan = equal_plan(cell.n, cfg.stages)?;
        let gen = GeneratorConfig {
            delta: cell.delta,
            rho: cell.rho,
            num_covariates: cfg.p,
        };
        for &scenario in &cell.scenarios {
            let spec = ScenarioSpec {
                scenario,
                plan: plan.clone(),
                alpha: cfg.alpha,
                spending: cfg.spending,
                ordering: cfg.ordering,
                level: cfg.level,
            };
            let results = run_replicates(&gen, &spec, cfg.reps, seed)?;
            let report = aggregate(&gen, &spec, &results);
            let _ = writeln!(
                s,
                "delta = {}, rho = {}, n = {}, {}: reject {} (se {}), gs-adjust coverage {}",
                sig7(cell.delta),
                sig7(cell.rho),
                cell.n,
                scenario,
                sig7(report.reject_rate),
                sig7(report.reject_se),
                sig7(report.gs_adjust.coverage),
            );
            csv.push_str(&result_row(&report));
            csv.push('\n');
            reports.push(report);
        }
    }
    write_out(out_dir, "results.csv", &csv)?;
    write_out(
        out_dir,
        "report.json",
        &serde_json::to_string_pretty(&json!({ "seed": seed, "reps": cfg.reps, "cells": reports }))
            .expect("report serializes"),
    )?;
    let _ = writeln!(s, "wrote {}", out_dir.join("results.csv").display());
    Ok(s)
}

/// Quick numerical self-checks of the rectangle-probability engine against
/// closed forms.
pub fn cmd_selftest() -> Result<String, CliError> {
    let mut s = String::new();
    let mut ok = true;
    let mut check = |name: &str, got: f64, want: f64, tol: f64| {
        let pass = (got - want).abs() <= tol;
        ok &= pass;
        let _ = writeln!(
            s,
            "{} - {name} (got {}, want {}, tol {tol:.0e})",
            if pass { "ok  " } else { "FAIL" },
            sig7(got),
            sig7(want),
        );
    };

    let c1 = CorrelationMatrix::identity(1);
    let p = rect_prob(
        &c1,
        &OrthantRegion::new(vec![-1.96], vec![1.96]).unwrap(),
        1e-8,
        1,
    )
    .unwrap();
    check("univariate interval", p, phi(1.96) - phi(-1.96), 1e-12);

    for &rho in &[-0.8, 0.0, 0.5, 0.95] {
        let want = 0.25 + (rho as f64).asin() / (2.0 * std::f64::consts::PI);
        check(
            &format!("bivariate orthant rho = {rho}"),
            bvn_upper(0.0, 0.0, rho),
            want,
            1e-14,
        );
    }

    // independent trivariate cube: exact product reference
    let c3 = CorrelationMatrix::identity(3);
    let region = OrthantRegion::new(vec![-2.0; 3], vec![2.0; 3]).unwrap();
    let cube = rect_prob(&c3, &region, 1e-8, 7).unwrap();
    let edge = phi(2.0) - phi(-2.0);
    check("trivariate independent cube", cube, edge * edge * edge, 1e-10);

    // three-stage monitoring correlation: deterministic replay
    let t: [f64; 3] = [1.0 / 3.0, 2.0 / 3.0, 1.0];
    let chain = CorrelationMatrix::from_fn(3, |i, j| (t[i.min(j)] / t[i.max(j)]).sqrt()).unwrap();
    let a = rect_prob(&chain, &region, 1e-8, 7).unwrap();
    let b = rect_prob(&chain, &region, 1e-8, 1234).unwrap();
    check("trivariate chain determinism", a, b, 1e-13);

    let u1 = phi_inv(1.0 - seqcov::boundaries::spend_alpha(
        SpendingFunction::PocockApprox,
        0.05,
        0.5,
    )
    .unwrap()
        / 2.0);
    check("first-look spending constant", u1, 2.1570, 5e-4);

    if ok {
        let _ = writeln!(s, "selftest passed");
        Ok(s)
    } else {
        Err(CliError {
            code: 3,
            message: format!("{s}selftest FAILED"),
        })
    }
}
