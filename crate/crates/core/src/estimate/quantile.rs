use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use super::{coefficient_table, fit_stats, matrix_rows, EstimateReport, MethodInfo, PRICE};
use crate::error::{Error, Result};
use crate::linalg::{dependent_columns, gram, hstack, select_rows};
use crate::panel::{Design, NEST_TERM};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantileOptions {
    /// Smoothing floor on `|residual|` in the reweighting.
    pub min_smoothing: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for QuantileOptions {
    fn default() -> Self {
        Self {
            min_smoothing: 1e-6,
            tol: 1e-8,
            max_iter: 20_000,
        }
    }
}

/// `sum_i rho_tau(u_i)` with `rho_tau(u) = u (tau - 1{u < 0})`.
pub fn pinball_loss(u: &[f64], tau: f64) -> f64 {
    u.iter()
        .map(|&r| if r < 0.0 { r * (tau - 1.0) } else { r * tau })
        .sum()
}

fn psi(r: f64, tau: f64) -> f64 {
    if r < 0.0 {
        tau - 1.0
    } else {
        tau
    }
}

fn residuals(y: &DVector<f64>, x: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    y - x * b
}

/// Weighted least squares `argmin sum w_i (y_i - x_i b)^2`.
fn wls(y: &DVector<f64>, x: &DMatrix<f64>, w: &[f64]) -> Option<DVector<f64>> {
    let xw = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] * w[i]);
    let a = xw.tr_mul(x);
    let rhs = xw.tr_mul(y);
    a.cholesky().map(|c| c.solve(&rhs))
}

fn irls(y: &DVector<f64>, x: &DMatrix<f64>, tau: f64, opts: &QuantileOptions) -> (DVector<f64>, usize, bool) {
    let ones = vec![1.0; y.len()];
    let mut b = wls(y, x, &ones).unwrap_or_else(|| DVector::zeros(x.ncols()));
    let scale = {
        let r = residuals(y, x, &b);
        (r.norm_squared() / r.len().max(1) as f64).sqrt().max(1e-12)
    };
    let mut eps = (0.1 * scale).max(opts.min_smoothing);
    let mut total = 0;
    loop {
        let mut converged = false;
        for _ in 0..500 {
            if total >= opts.max_iter {
                return (b, total, false);
            }
            total += 1;
            let r = residuals(y, x, &b);
            let w: Vec<f64> = r.iter().map(|&u| psi(u, tau).abs() / u.abs().max(eps)).collect();
            let Some(next) = wls(y, x, &w) else {
                return (b, total, false);
            };
            let change = (&next - &b).amax();
            b = next;
            if change < opts.tol {
                converged = true;
                break;
            }
        }
        if eps <= opts.min_smoothing {
            return (b, total, converged);
        }
        eps = (eps * 0.1).max(opts.min_smoothing);
    }
}

/// Exact vertex through the rows in `basis`, if it is non-singular.
fn vertex(y: &DVector<f64>, x: &DMatrix<f64>, basis: &[usize]) -> Option<DVector<f64>> {
    let xb = select_rows(x, basis);
    let yb = DVector::from_iterator(basis.len(), basis.iter().map(|&i| y[i]));
    xb.lu().solve(&yb)
}

/// Subgradient optimality of a vertex: the basis multipliers must lie in
/// `[tau - 1, tau]`.
fn vertex_optimal(y: &DVector<f64>, x: &DMatrix<f64>, b: &DVector<f64>, basis: &[usize], tau: f64) -> bool {
    let r = residuals(y, x, b);
    let k = x.ncols();
    let mut g = DVector::zeros(k);
    for i in 0..x.nrows() {
        if basis.contains(&i) {
            continue;
        }
        g -= x.row(i).transpose() * psi(r[i], tau);
    }
    let xb = select_rows(x, basis);
    match xb.transpose().lu().solve(&g) {
        Some(a) => a.iter().all(|&v| v >= tau - 1.0 - 1e-9 && v <= tau + 1e-9),
        None => false,
    }
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut idx: Vec<usize> = (0..k).collect();
    if k > n {
        return out;
    }
    loop {
        out.push(idx.clone());
        let mut i = k;
        while i > 0 && idx[i - 1] == n - k + i - 1 {
            i -= 1;
        }
        if i == 0 {
            return out;
        }
        idx[i - 1] += 1;
        for j in i..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Moves the smoothed solution onto an exact vertex of the piecewise-linear
/// objective when one nearby is verifiably optimal, otherwise descends from
/// the best nearby vertex by basis exchange.
fn polish(y: &DVector<f64>, x: &DMatrix<f64>, b: DVector<f64>, tau: f64) -> (DVector<f64>, bool) {
    let k = x.ncols();
    let n = y.len();
    if k == 0 || n < k {
        return (b, false);
    }
    let r = residuals(y, x, &b);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| r[i].abs().total_cmp(&r[j].abs()));
    let pool = (k + 2).min(n);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for combo in combinations(pool, k) {
        let basis: Vec<usize> = combo.iter().map(|&c| order[c]).collect();
        let Some(v) = vertex(y, x, &basis) else { continue };
        if vertex_optimal(y, x, &v, &basis, tau) {
            return (v, true);
        }
        let obj = pinball_loss(residuals(y, x, &v).as_slice(), tau);
        if best.as_ref().is_none_or(|(o, _)| obj < *o) {
            best = Some((obj, basis));
        }
    }
    match best.and_then(|(_, basis)| exchange_descent(y, x, basis, tau, 50 * n)) {
        Some(v) => (v, true),
        None => (b, false),
    }
}

/// Rate of change of `rho_tau(r + c t)` at `t = 0+`.
fn rho_rate(r: f64, c: f64, tau: f64, zero: f64) -> f64 {
    if r > zero || (r.abs() <= zero && c > 0.0) {
        tau * c
    } else {
        (tau - 1.0) * c
    }
}

/// Simplex-style descent over vertices: releases the basis row whose edge
/// has the most negative directional derivative and walks to the minimizing
/// breakpoint along that edge. Returns the vertex once no edge descends.
fn exchange_descent(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    mut basis: Vec<usize>,
    tau: f64,
    max_steps: usize,
) -> Option<DVector<f64>> {
    let n = y.len();
    let k = x.ncols();
    let mut b = vertex(y, x, &basis)?;
    for _ in 0..max_steps {
        let inv = select_rows(x, &basis).try_inverse()?;
        let xd = x * &inv;
        let r = residuals(y, x, &b);
        let zero = 1e-11 * r.amax().max(1.0);
        let mut in_basis = vec![false; n];
        basis.iter().for_each(|&i| in_basis[i] = true);
        let mut best: Option<(f64, usize, f64)> = None;
        for m in 0..k {
            for s in [1.0, -1.0] {
                let mut slope = rho_rate(0.0, -s, tau, zero);
                for i in (0..n).filter(|&i| !in_basis[i]) {
                    slope += rho_rate(r[i], -s * xd[(i, m)], tau, zero);
                }
                if slope < -1e-10 && best.is_none_or(|(bs, _, _)| slope < bs) {
                    best = Some((slope, m, s));
                }
            }
        }
        let Some((mut slope, m, s)) = best else {
            return Some(b);
        };
        let mut breaks: Vec<(f64, usize, f64)> = (0..n)
            .filter(|&i| !in_basis[i] && r[i].abs() > zero)
            .filter_map(|i| {
                let c = -s * xd[(i, m)];
                let t = -r[i] / c;
                (c != 0.0 && t > 0.0).then_some((t, i, c.abs()))
            })
            .collect();
        breaks.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut entering = None;
        for (_, i, c) in breaks {
            slope += c;
            if slope >= -1e-10 {
                entering = Some(i);
                break;
            }
        }
        basis[m] = entering?;
        b = vertex(y, x, &basis)?;
    }
    None
}

fn sample_quantile(y: &[f64], tau: f64) -> f64 {
    let mut v = y.to_vec();
    v.sort_by(f64::total_cmp);
    let idx = ((tau * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1;
    v[idx]
}

/// Powell kernel sandwich with a Hall-Sheather bandwidth.
fn powell_vcov(x: &DMatrix<f64>, r: &DVector<f64>, tau: f64) -> DMatrix<f64> {
    let n = r.len();
    let k = x.ncols();
    let nan = || DMatrix::from_element(k, k, f64::NAN);
    if n <= k {
        return nan();
    }
    let normal = Normal::standard();
    let nf = n as f64;
    let z_a = normal.inverse_cdf(0.975);
    let z_t = normal.inverse_cdf(tau);
    let hn = nf.powf(-1.0 / 3.0)
        * z_a.powf(2.0 / 3.0)
        * (1.5 * normal.pdf(z_t).powi(2) / (2.0 * z_t * z_t + 1.0)).powf(1.0 / 3.0);
    let lo = (tau - hn).max(1e-6);
    let hi = (tau + hn).min(1.0 - 1e-6);
    let mean = r.mean();
    let sd = (r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nf - 1.0)).sqrt();
    let iqr = sample_quantile(r.as_slice(), 0.75) - sample_quantile(r.as_slice(), 0.25);
    let kappa = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let h = kappa * (normal.inverse_cdf(hi) - normal.inverse_cdf(lo));
    if !(h > 0.0) {
        return nan();
    }
    let inside = DMatrix::from_fn(n, k, |i, j| if r[i].abs() <= h { x[(i, j)] } else { 0.0 });
    let hmat = inside.tr_mul(x) / (2.0 * nf * h);
    let scored = DMatrix::from_fn(n, k, |i, j| x[(i, j)] * psi(r[i], tau));
    let jmat = gram(&scored) / nf;
    match hmat.try_inverse() {
        Some(hi) => &hi * jmat * &hi / nf,
        None => nan(),
    }
}

/// Quantile regression of `design.y` on `design.x` (fixed effects enter as
/// dummy columns).
pub fn fit_quantile(design: &Design, tau: f64, opts: &QuantileOptions) -> Result<EstimateReport> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::config(format!("quantile {tau} outside (0, 1)")));
    }
    let k = design.x.ncols();
    let mut x = design.x.clone();
    let mut dummy_dof = 0;
    for (d, fe) in design.fixed_effects.iter().enumerate() {
        let skip_first = d > 0 || design.labels.iter().any(|l| l == crate::panel::INTERCEPT);
        let first = usize::from(skip_first);
        let dummies = DMatrix::from_fn(design.nobs(), fe.levels - first, |i, j| {
            (fe.codes[i] == j + first) as u8 as f64
        });
        dummy_dof += dummies.ncols();
        x = hstack(&x, &dummies);
    }
    let dep = dependent_columns(&x);
    if !dep.is_empty() {
        return Err(Error::RankDeficient {
            columns: dep
                .iter()
                .map(|&j| design.labels.get(j).cloned().unwrap_or_else(|| format!("fixed effect #{}", j - k)))
                .collect(),
        });
    }
    let y = &design.y;
    let (b_irls, iterations, converged) = irls(y, &x, tau, opts);
    let (b, exact) = polish(y, &x, b_irls, tau);
    let u = residuals(y, &x, &b);
    let objective = pinball_loss(u.as_slice(), tau);
    if !converged && !exact {
        return Err(Error::NonConvergence {
            solver: "quantile regression",
            iterations,
            last: objective,
        });
    }
    let full_v = powell_vcov(&x, &u, tau);
    let v = full_v.view((0, 0), (k, k)).into_owned();
    let bk = b.rows(0, k).into_owned();
    let df = y.len().saturating_sub(x.ncols()).max(1);
    let coefficients = coefficient_table(&design.labels, &bk, &v, df);
    let q = sample_quantile(y.as_slice(), tau);
    let null: Vec<f64> = y.iter().map(|v| v - q).collect();
    let null_obj = pinball_loss(&null, tau);
    let mut fit = fit_stats(y, &u, k, dummy_dof, true);
    fit.pseudo_r_squared = Some(if null_obj > 0.0 { 1.0 - objective / null_obj } else { f64::NAN });
    fit.objective = Some(objective);
    let alpha = design.column(PRICE).map(|j| -bk[j]);
    let sigma = design.column(NEST_TERM).map(|j| bk[j]);
    let sigma_flag = sigma
        .filter(|s| !(0.0..1.0).contains(s))
        .map(|s| format!("nest coefficient {s:.4} outside [0, 1)"));
    let mut warnings = design.warnings.clone();
    warnings.extend(sigma_flag.clone());
    Ok(EstimateReport {
        coefficients,
        alpha,
        sigma,
        sigma_flag,
        vcov: matrix_rows(&v),
        residuals: u.iter().copied().collect(),
        rows: design.rows.clone(),
        fit,
        method: MethodInfo {
            estimator: format!("quantile({tau})"),
            fixed_effects: design.fixed_effects.iter().map(|f| f.name.clone()).collect(),
            covariance: "powell kernel sandwich".into(),
            dropped_missing: design.dropped_missing,
            tau: Some(tau),
            iterations: Some(iterations),
            ..Default::default()
        },
        first_stage: Vec::new(),
        warnings,
    })
}
