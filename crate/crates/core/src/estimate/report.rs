use std::fmt::Write;

use super::EstimateReport;

/// Significance stars at the 0.05, 0.01 and 0.001 levels.
pub fn stars(p: f64) -> &'static str {
    if p < 0.001 {
        "***"
    } else if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else {
        ""
    }
}

/// Aligned plain-text coefficient table: estimate with stars, standard error
/// in parentheses underneath, then fit statistics.
pub fn render_table(report: &EstimateReport) -> String {
    let width = report
        .coefficients
        .iter()
        .map(|c| c.label.len())
        .chain(["Gaussian log-likelihood".len()])
        .max()
        .unwrap_or(0);
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>16}", "", report.method.estimator);
    let _ = writeln!(out, "{}", "-".repeat(width + 18));
    for c in &report.coefficients {
        let est = format!("{:.4}{}", c.estimate, stars(c.p_value));
        let _ = writeln!(out, "{:<width$}  {:>16}", c.label, est);
        let _ = writeln!(out, "{:<width$}  {:>16}", "", format!("({:.4})", c.std_error));
    }
    let _ = writeln!(out, "{}", "-".repeat(width + 18));
    let f = &report.fit;
    let mut rows = vec![("N".to_string(), f.nobs.to_string())];
    if let Some(pr2) = f.pseudo_r_squared {
        rows.push(("Pseudo R-squared".into(), format!("{pr2:.4}")));
    } else {
        rows.push(("Adjusted R-squared".into(), format!("{:.4}", f.adj_r_squared)));
        rows.push(("Gaussian log-likelihood".into(), format!("{:.2}", f.gaussian_log_likelihood)));
    }
    if let Some(a) = report.alpha {
        rows.push(("alpha".into(), format!("{a:.4}")));
    }
    if !report.method.fixed_effects.is_empty() {
        rows.push(("Fixed effects".into(), report.method.fixed_effects.join(", ")));
    }
    rows.push(("Covariance".into(), report.method.covariance.clone()));
    for fs in &report.first_stage {
        rows.push((format!("First-stage F ({})", fs.endogenous), format!("{:.2}", fs.f_stat)));
    }
    for (k, v) in rows {
        let pad = (width + 16).saturating_sub(k.len()).max(v.len());
        let _ = writeln!(out, "{k}  {v:>pad$}");
    }
    let _ = writeln!(out, "Significance levels: * p<0.05, ** p<0.01, *** p<0.001");
    for w in &report.warnings {
        let _ = writeln!(out, "warning: {w}");
    }
    out
}
