//! Acceptance criteria 1-8, one PASS/FAIL line each.
//!
//! Criterion 6 runs the 20-replication smoke profile by default. Set
//! `HDBLP_FULL_STUDY=1` to run the full 200-replication study here, or
//! `HDBLP_STUDY_RECORDS=<path>` to score records written by `hdblp study`.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use common::*;
use hdblp::dgp::{generate_dataset, DgpConfig};
use hdblp::estimators::EstimatorKind;
use hdblp::harness::{read_records_jsonl, run_study, summarize, summary_row, Param, StudyConfig, SummaryRow};
use hdblp::market::UtilityCache;
use hdblp::nuisance::{fit_full, make_folds, FoldMode, LambdaMode, NuisanceConfig};
use hdblp::orthogonal::{MarketMoment, MomentSystem};
use hdblp::shares::*;
use hdblp::sparse_reg::*;
use nalgebra::{DMatrix, DVector};

type Outcome = std::result::Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn sup(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn inversion_fidelity() -> Outcome {
    let start = Instant::now();
    let q = QuadratureRule::default();
    let opts = InversionOptions::default();
    let mut r = rng(101);
    let mut worst = 0.0_f64;
    for _ in 0..1000 {
        let (y, p, sigma) = random_instance(&mut r);
        let s = compute_shares(&y, &p, sigma, &q).map_err(|e| e.to_string())?;
        let inv = invert_shares(&s, &p, sigma, &q, &opts).map_err(|e| e.to_string())?;
        let err: Vec<f64> = inv.y.as_slice().iter().zip(&y).map(|(a, b)| a - b).collect();
        worst = worst.max(sup(&err));
    }
    let mut strict = 0;
    for _ in 0..100 {
        let (y, p, sigma) = random_instance(&mut r);
        let s = compute_shares(&y, &p, sigma, &q).unwrap();
        let a: Vec<f64> = y.iter().map(|v| v + uniform(&mut r, -3.0, 3.0)).collect();
        let b: Vec<f64> = y.iter().map(|v| v + uniform(&mut r, -3.0, 3.0)).collect();
        let ta = contraction_step(&a, &s, &p, sigma, &q).unwrap();
        let tb = contraction_step(&b, &s, &p, sigma, &q).unwrap();
        let before = sup(&a.iter().zip(&b).map(|(x, w)| x - w).collect::<Vec<_>>());
        let after = sup(&ta.iter().zip(&tb).map(|(x, w)| x - w).collect::<Vec<_>>());
        if after < before {
            strict += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst <= 1e-8 && strict == 100 && secs < 5.0,
        format!("max round-trip error {worst:.2e} (<= 1e-8), strict contraction {strict}/100, {secs:.2}s (< 5s)"),
    )
}

fn logit_agreement() -> Outcome {
    let q = QuadratureRule::default();
    let opts = InversionOptions::default();
    let mut r = rng(102);
    let mut worst = 0.0_f64;
    for _ in 0..100 {
        let (y, p, _) = random_instance(&mut r);
        let s = compute_shares(&y, &p, 0.0, &q).unwrap();
        let expect = logit(&y);
        for (a, b) in s.as_slice().iter().zip(&expect) {
            worst = worst.max((a - b).abs());
        }
        let s0 = 1.0 - expect.iter().sum::<f64>();
        let exact = ShareVector::new(expect.clone()).unwrap();
        let inv = invert_shares(&exact, &p, 0.0, &q, &opts).unwrap();
        for (a, b) in inv.y.as_slice().iter().zip(&expect) {
            worst = worst.max((a - (b / s0).ln()).abs());
        }
        let jac = share_jacobian_y(&y, &p, 0.0, &q).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let delta = if i == j { expect[i] } else { 0.0 };
                worst = worst.max((jac[(i, j)] - (delta - expect[i] * expect[j])).abs());
            }
        }
    }
    check(worst <= 1e-12, format!("max deviation from closed-form logit {worst:.2e} (<= 1e-12)"))
}

fn derivative_checks() -> Outcome {
    let q = QuadratureRule::default();
    let opts = InversionOptions::default();
    let mut r = rng(103);
    let (mut jac_worst, mut dy_worst) = (0.0_f64, 0.0_f64);
    for _ in 0..100 {
        let (y, p, sigma) = random_instance(&mut r);
        let jac = share_jacobian_y(&y, &p, sigma, &q).unwrap();
        let h = 1e-6;
        for j in 0..4 {
            let mut up = y.clone();
            let mut dn = y.clone();
            up[j] += h;
            dn[j] -= h;
            let su = compute_shares(&up, &p, sigma, &q).unwrap();
            let sd = compute_shares(&dn, &p, sigma, &q).unwrap();
            for i in 0..4 {
                let fd = (su.as_slice()[i] - sd.as_slice()[i]) / (2.0 * h);
                jac_worst = jac_worst.max((jac[(i, j)] - fd).abs() / fd.abs().max(1e-3));
            }
        }
        let s = compute_shares(&y, &p, sigma, &q).unwrap();
        let analytic = dy_dsigma(&s, &p, sigma, &q, &opts).unwrap();
        let h = 1e-5;
        let yu = invert_shares(&s, &p, sigma + h, &q, &opts).unwrap();
        let yd = invert_shares(&s, &p, sigma - h, &q, &opts).unwrap();
        for j in 0..4 {
            let fd = (yu.y.as_slice()[j] - yd.y.as_slice()[j]) / (2.0 * h);
            dy_worst = dy_worst.max((analytic[j] - fd).abs() / fd.abs().max(1e-2));
        }
    }
    check(
        jac_worst <= 1e-5 && dy_worst <= 1e-5,
        format!("max relative error: share Jacobian {jac_worst:.2e}, dy/dsigma {dy_worst:.2e} (<= 1e-5)"),
    )
}

fn solver_oracles() -> Outcome {
    let mut r = rng(104);
    let mut ls_worst = 0.0_f64;
    let mut kkt_worst = 0.0_f64;
    for _ in 0..20 {
        let (n, d) = (30, 8);
        let x = DMatrix::from_fn(n, d, |_, _| normal(&mut r));
        let y = DVector::from_fn(n, |_, _| normal(&mut r));
        let prob = DesignProblem::new(x.clone(), y.clone()).unwrap();
        let ols = (x.transpose() * &x).cholesky().unwrap().solve(&(x.transpose() * &y));
        let sol = lasso(&prob, 0.0, 1e-12).unwrap();
        ls_worst = ls_worst.max((sol.coef - ols).amax());
        for frac in [0.5, 0.1, 0.01] {
            let sol = lasso(&prob, frac * prob.lambda_max(), 1e-9).unwrap();
            kkt_worst = kkt_worst.max(prob.kkt_violation(&sol.coef, sol.lambda));
        }
    }
    // High-dimensional path: more columns than rows.
    for _ in 0..5 {
        let x = DMatrix::from_fn(60, 150, |_, _| normal(&mut r));
        let y = DVector::from_fn(60, |_, _| normal(&mut r));
        let prob = DesignProblem::new(x, y).unwrap();
        for lambda in geometric_grid(prob.lambda_max(), 1e-2, 10) {
            let sol = lasso(&prob, lambda, 1e-9).unwrap();
            kkt_worst = kkt_worst.max(prob.kkt_violation(&sol.coef, sol.lambda));
        }
    }
    let mut grid_ok = 0;
    let pts: Vec<f64> = (0..=40).map(|i| -2.0 + 0.1 * i as f64).collect();
    for _ in 0..20 {
        let b = DMatrix::from_fn(6, 3, |_, _| uniform(&mut r, -1.0, 1.0));
        let c = DVector::from_fn(6, |_, _| uniform(&mut r, -1.0, 1.0));
        let lambda = uniform(&mut r, 0.01, 0.5);
        let sol = linf_l1_solve(&b, &c, lambda).unwrap();
        let mut grid_best = f64::INFINITY;
        for &g0 in &pts {
            for &g1 in &pts {
                for &g2 in &pts {
                    let g = DVector::from_vec(vec![g0, g1, g2]);
                    grid_best = grid_best.min(linf_l1_objective(&b, &c, lambda, &g));
                }
            }
        }
        // Objective is Lipschitz in sup-norm with constant max row sum + 3 lambda,
        // so the grid optimum is within half a grid step of that bound.
        let lip = b.abs().column_sum().amax().max(b.abs().row_sum().amax()) + 3.0 * lambda;
        let inside = sol.gamma.amax() <= 2.0;
        if sol.objective <= grid_best + 1e-12 && (!inside || grid_best - sol.objective <= 0.05 * lip) {
            grid_ok += 1;
        }
    }
    check(
        ls_worst <= 1e-8 && kkt_worst <= 1e-9 && grid_ok == 20,
        format!(
            "lambda=0 vs least squares {ls_worst:.2e} (<= 1e-8), max KKT violation {kkt_worst:.2e} (<= 1e-9), l-inf+l1 vs grid {grid_ok}/20"
        ),
    )
}

fn numerical_orthogonality() -> Outcome {
    let cfg = DgpConfig {
        markets: 5000,
        seed: 105,
        ..Default::default()
    };
    let data = generate_dataset(&cfg).unwrap();
    let record = &data.truth.as_ref().unwrap().record;
    let quad = cfg.quadrature().unwrap();
    let cache = UtilityCache::new(&data.markets, &quad, InversionOptions::default());
    let plan = make_folds(5000, 6, FoldMode::Contiguous, 0).unwrap();
    let (dx, dz) = (cfg.dim_x, cfg.dim_z);
    let eps = 1e-3;
    let mut r = rng(105);

    let orthogonal_mean = |delta: &DVector<f64>, big: &DMatrix<f64>, e: f64| -> DVector<f64> {
        let fits: Vec<_> = (0..6)
            .map(|l| {
                let mut f = true_fit(record, Some(l));
                f.beta_hat += delta * e;
                f.pi_hat += big * e;
                f
            })
            .collect();
        MomentSystem::orthogonal(&cache, &plan, &fits)
            .unwrap()
            .mean_moment(cfg.sigma, cfg.alpha)
            .unwrap()
    };
    let plain_mean = |delta: &DVector<f64>, e: f64| -> DVector<f64> {
        let beta = record.beta_vector() + delta * e;
        let parts = data
            .markets
            .iter()
            .map(|m| {
                let mut h = DMatrix::zeros(m.products(), dx + dz);
                h.columns_mut(0, dx).copy_from(&m.x);
                h.columns_mut(dx, dz).copy_from(&m.z);
                MarketMoment {
                    instruments: h,
                    offset: &m.x * &beta,
                }
            })
            .collect();
        MomentSystem::new(&cache, parts)
            .unwrap()
            .mean_moment(cfg.sigma, cfg.alpha)
            .unwrap()
    };

    let (mut orth_worst, mut plain_least) = (0.0_f64, f64::INFINITY);
    for _ in 0..5 {
        let (delta, big) = random_direction(&mut r, dx, dz);
        let d = (orthogonal_mean(&delta, &big, eps) - orthogonal_mean(&delta, &big, -eps)) / (2.0 * eps);
        orth_worst = orth_worst.max(d.amax());
        let unit = &delta / delta.norm();
        let d = (plain_mean(&unit, eps) - plain_mean(&unit, -eps)) / (2.0 * eps);
        plain_least = plain_least.min(d.amax());
    }
    check(
        orth_worst <= 1e-2 && plain_least >= 10.0 * orth_worst,
        format!(
            "orthogonal Gateaux derivative {orth_worst:.2e} (<= 1e-2 per unit direction), non-orthogonal {plain_least:.2e} ({:.0}x, >= 10x)",
            plain_least / orth_worst
        ),
    )
}

fn rate(rows: &[SummaryRow], kind: EstimatorKind, param: Param) -> f64 {
    summary_row(rows, kind, param).map_or(f64::NAN, |r| r.rej_rate)
}

/// Bands for the full 200-replication study; returns the failed bands.
fn full_study_bands(rows: &[SummaryRow]) -> Vec<String> {
    use EstimatorKind::*;
    let mut failed = Vec::new();
    let mut band = |name: String, value: f64, lo: f64, hi: f64| {
        if !(value >= lo && value <= hi) {
            failed.push(format!("{name} = {value:.3} not in [{lo}, {hi}]"));
        }
    };
    for param in [Param::Sigma, Param::Alpha] {
        let p = param.name();
        for kind in [NeymanOrthogonal, NeymanOrthogonalOpt] {
            band(format!("{kind} rej({p})"), rate(rows, kind, param), 0.01, 0.12);
        }
        for kind in [Oracle1, Oracle2] {
            band(format!("{kind} rej({p})"), rate(rows, kind, param), 0.01, 0.11);
        }
        let bias = summary_row(rows, NeymanOrthogonal, param).map_or(f64::NAN, |r| r.bias);
        band(format!("NeymanOrthogonal |bias({p})|"), bias.abs(), 0.0, 0.15);
        let rmse = |k| summary_row(rows, k, param).map_or(f64::NAN, |r: &SummaryRow| r.rmse);
        let gap = rmse(NeymanOrthogonal) - rmse(Preliminary);
        band(format!("rmse(NeymanOrthogonal) - rmse(Preliminary) ({p})"), gap, 1e-300, f64::INFINITY);
    }
    band("NonOrthogonal rej(sigma)".into(), rate(rows, NonOrthogonal, Param::Sigma), 0.30, 1.0);
    band("NonOrthogonal rej(alpha)".into(), rate(rows, NonOrthogonal, Param::Alpha), 0.70, 1.0);
    band("Preliminary rej(sigma)".into(), rate(rows, Preliminary, Param::Sigma), 0.45, 1.0);
    band("Preliminary rej(alpha)".into(), rate(rows, Preliminary, Param::Alpha), 0.85, 1.0);
    let pb = summary_row(rows, Preliminary, Param::Alpha).map_or(f64::NAN, |r| r.bias);
    band("Preliminary bias(alpha)".into(), pb, 0.10, 0.25);
    failed
}

fn study_reproduction() -> Outcome {
    use EstimatorKind::*;
    let full_rows = if let Ok(path) = std::env::var("HDBLP_STUDY_RECORDS") {
        let records = read_records_jsonl(Path::new(&path)).map_err(|e| e.to_string())?;
        Some((summarize(&records).map_err(|e| e.to_string())?, records.len()))
    } else if std::env::var("HDBLP_FULL_STUDY").is_ok_and(|v| v == "1") {
        let result = run_study(&StudyConfig::default()).map_err(|e| e.to_string())?;
        Some((summarize(&result.records).map_err(|e| e.to_string())?, result.records.len()))
    } else {
        None
    };
    if let Some((rows, reps)) = full_rows {
        let failed = full_study_bands(&rows);
        return check(
            failed.is_empty() && reps == 200,
            if failed.is_empty() {
                format!("full study ({reps} replications): all bands hold")
            } else {
                format!("full study ({reps} replications): {}", failed.join("; "))
            },
        );
    }
    let cfg = StudyConfig {
        replications: 20,
        estimators: vec![NonOrthogonal, NeymanOrthogonal],
        ..Default::default()
    };
    let result = run_study(&cfg).map_err(|e| e.to_string())?;
    let rows = summarize(&result.records).map_err(|e| e.to_string())?;
    let mut detail = Vec::new();
    let mut ok = true;
    for param in [Param::Sigma, Param::Alpha] {
        let (a, b) = (rate(&rows, NonOrthogonal, param), rate(&rows, NeymanOrthogonal, param));
        ok &= a > b;
        detail.push(format!("rej({}) NonOrthogonal {a:.2} vs NeymanOrthogonal {b:.2}", param.name()));
    }
    check(ok, format!("smoke profile (20 replications): {}", detail.join(", ")))
}

fn rate_sanity() -> Outcome {
    let mut beta_medians = Vec::new();
    let mut pi_medians = Vec::new();
    for t in [50, 100, 200] {
        let (mut beta_err, mut pi_err) = (Vec::new(), Vec::new());
        for seed in 0..20 {
            let cfg = DgpConfig {
                markets: t,
                seed: 7000 + seed,
                ..Default::default()
            };
            let data = generate_dataset(&cfg).unwrap();
            let record = &data.truth.as_ref().unwrap().record;
            let quad = cfg.quadrature().unwrap();
            let cache = UtilityCache::new(&data.markets, &quad, InversionOptions::default());
            let ncfg = NuisanceConfig {
                lambda_mode: LambdaMode::Theoretical,
                ..Default::default()
            };
            let fit = fit_full(&cache, &ncfg.penalties(), &ncfg).map_err(|e| e.to_string())?;
            beta_err.push((&fit.beta_hat - record.beta_vector()).norm());
            pi_err.push((&fit.pi_hat - record.pi_matrix()).norm());
        }
        beta_medians.push(median(beta_err));
        pi_medians.push(median(pi_err));
    }
    let decreasing = |m: &[f64]| m.windows(2).all(|w| w[1] < w[0]);
    let fmt = |m: &[f64]| m.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(" > ");
    check(
        decreasing(&beta_medians) && decreasing(&pi_medians),
        format!(
            "median |beta^ - beta0| {}, median |Pi^ - Pi0| {} over T = 50, 100, 200",
            fmt(&beta_medians),
            fmt(&pi_medians)
        ),
    )
}

fn dgp_statistics() -> Outcome {
    let cfg = DgpConfig {
        markets: 125_000,
        dim_x: 9,
        seed: 108,
        ..Default::default()
    };
    let data = generate_dataset(&cfg).unwrap();
    let shocks = &data.truth.as_ref().unwrap().shocks;
    let draws: Vec<f64> = shocks
        .iter()
        .flat_map(|s| s.eps_z.iter().flat_map(|e| [(e[2] / 0.86).exp(), (e[3] / 0.86).exp()]))
        .collect();
    let (mean, se) = mean_and_se(&draws);
    let exp_ok = (mean - 1.175201).abs() < 3.0 * se;

    let mut var_ok = true;
    let mut worst_z = 0.0_f64;
    for k in 1..cfg.dim_x {
        let v: Vec<f64> = data.markets.iter().flat_map(|m| m.x.column(k).iter().copied().collect::<Vec<_>>()).collect();
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let sq: Vec<f64> = v.iter().map(|x| (x - m).powi(2)).collect();
        let (var, se) = mean_and_se(&sq);
        worst_z = worst_z.max((var - 1.0).abs() / se);
        var_ok &= (var - 1.0).abs() < 3.0 * se;
    }

    let p: Vec<f64> = data.markets.iter().flat_map(|m| m.p.clone()).collect();
    let xi: Vec<f64> = shocks.iter().flat_map(|s| s.xi.clone()).collect();
    let n = p.len() as f64;
    let (mp, mx) = (p.iter().sum::<f64>() / n, xi.iter().sum::<f64>() / n);
    let cov = p.iter().zip(&xi).map(|(a, b)| (a - mp) * (b - mx)).sum::<f64>() / n;
    let vp = p.iter().map(|a| (a - mp).powi(2)).sum::<f64>() / n;
    let vx = xi.iter().map(|b| (b - mx).powi(2)).sum::<f64>() / n;
    let corr = cov / (vp * vx).sqrt();
    let corr_se = (1.0 - corr * corr) / (n - 1.0).sqrt();
    check(
        exp_ok && var_ok && corr > 3.0 * corr_se,
        format!(
            "E[e^eta] = {mean:.6} +- {se:.1e} (target 1.175201), max |Var(x_k) - 1| / se = {worst_z:.2}, corr(p, xi) = {corr:.3} (se {corr_se:.1e})"
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("inversion fidelity", inversion_fidelity),
        ("sigma = 0 logit agreement", logit_agreement),
        ("derivative checks", derivative_checks),
        ("solver oracles", solver_oracles),
        ("numerical orthogonality", numerical_orthogonality),
        ("study reproduction", study_reproduction),
        ("rate sanity", rate_sanity),
        ("DGP statistics", dgp_statistics),
    ];
    let filter: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failures = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !filter.is_empty() && !filter.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("criterion {n} ({name}): PASS [{secs:.1}s] {d}"),
            Err(d) => {
                failures += 1;
                println!("criterion {n} ({name}): FAIL [{secs:.1}s] {d}");
            }
        }
    }
    if failures > 0 {
        std::process::exit(1);
    }
}
