//! Instrument-validity statistics, placebo (permutation) tests and
//! chronological holdout evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::estimate::{meat, prepare, AbsorbOptions, EstimateReport, Instruments, ModelKind, ModelSpec, Vcov};
use crate::linalg::{gram, hstack, inv_spd, residualize, select_columns, sym_eigen_desc, sym_pow};
use crate::panel::{build_design, compute_shares, Design, MarketPanel};

// ---------------------------------------------------------------------------
// IV diagnostics
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChiSquareTest {
    pub statistic: f64,
    pub dof: usize,
    /// `None` when the test has no degrees of freedom.
    pub p_value: Option<f64>,
}

impl ChiSquareTest {
    fn new(statistic: f64, dof: usize) -> Self {
        let p_value = (dof > 0).then(|| chi2_sf(statistic, dof));
        Self { statistic, dof, p_value }
    }
}

fn chi2_sf(x: f64, dof: usize) -> f64 {
    let d = ChiSquared::new(dof as f64).expect("positive dof");
    (1.0 - d.cdf(x.max(0.0))).clamp(0.0, 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankTest {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
    /// `statistic / #excluded instruments`, comparable to Cragg-Donald.
    pub wald_f: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FirstStageF {
    pub endogenous: String,
    pub f_stat: f64,
    pub df_num: usize,
    pub df_den: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticalValue {
    pub label: String,
    pub value: f64,
}

/// Weak-instrument critical values for the Cragg-Donald statistic.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StockYogo {
    pub relative_bias: Vec<CriticalValue>,
    pub size: Vec<CriticalValue>,
    pub note: Option<String>,
}

// (endogenous, excluded) -> values at 5/10/20/30% relative bias and
// 10/15/20/25% maximal size.
const SY_BIAS: &[(usize, usize, [f64; 4])] = &[
    (1, 3, [13.91, 9.08, 6.46, 5.39]),
    (1, 4, [16.85, 10.27, 6.71, 5.34]),
    (1, 5, [18.37, 10.83, 6.77, 5.25]),
];
const SY_SIZE: &[(usize, usize, [f64; 4])] = &[
    (1, 1, [16.38, 8.96, 6.66, 5.53]),
    (1, 2, [19.93, 11.59, 8.75, 7.25]),
    (1, 3, [22.30, 12.83, 9.54, 7.80]),
    (1, 4, [24.58, 13.96, 10.26, 8.31]),
    (1, 5, [26.87, 15.09, 10.98, 8.84]),
    (2, 2, [7.03, 4.58, 3.95, 3.63]),
    (2, 3, [13.43, 8.18, 5.88, 4.84]),
];

pub fn stock_yogo(endogenous: usize, excluded: usize) -> StockYogo {
    let find = |table: &[(usize, usize, [f64; 4])], labels: [&str; 4]| {
        table
            .iter()
            .find(|(k, l, _)| *k == endogenous && *l == excluded)
            .map(|(_, _, v)| {
                labels
                    .iter()
                    .zip(v)
                    .map(|(label, value)| CriticalValue {
                        label: label.to_string(),
                        value: *value,
                    })
                    .collect()
            })
            .unwrap_or_default()
    };
    let relative_bias: Vec<CriticalValue> = find(SY_BIAS, ["5% relative bias", "10% relative bias", "20% relative bias", "30% relative bias"]);
    let size: Vec<CriticalValue> = find(SY_SIZE, ["10% maximal IV size", "15% maximal IV size", "20% maximal IV size", "25% maximal IV size"]);
    let note = (relative_bias.is_empty() && size.is_empty()).then(|| "no tabulated value".to_string());
    StockYogo {
        relative_bias,
        size,
        note,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticThresholds {
    pub min_first_stage_f: Option<f64>,
    pub min_cragg_donald: Option<f64>,
    pub min_kleibergen_paap_f: Option<f64>,
    /// Overidentification tests fail when their p-value falls below this.
    pub overid_alpha: Option<f64>,
}

impl Default for DiagnosticThresholds {
    fn default() -> Self {
        Self {
            min_first_stage_f: Some(10.0),
            min_cragg_donald: None,
            min_kleibergen_paap_f: None,
            overid_alpha: Some(0.05),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub check: String,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub nobs: usize,
    pub endogenous: Vec<String>,
    pub instruments: Vec<String>,
    pub covariance: String,
    pub first_stage_f: Vec<FirstStageF>,
    pub cragg_donald: f64,
    pub kleibergen_paap_rk: RankTest,
    pub hansen_j: ChiSquareTest,
    pub sargan: ChiSquareTest,
    pub stock_yogo: StockYogo,
    pub verdicts: Vec<Verdict>,
}

impl DiagnosticsReport {
    pub fn passed(&self) -> bool {
        self.verdicts.iter().all(|v| v.pass)
    }
}

/// Cluster or heteroskedasticity-robust sum of outer products of the rows of
/// `scores`, with the finite-sample factor used for coefficient covariances.
fn robust_scores(scores: &DMatrix<f64>, vcov: &Vcov, k: usize, dof_fe: usize, dof_fe_cluster: usize) -> DMatrix<f64> {
    let n = scores.nrows() as f64;
    let ones = DVector::from_element(scores.nrows(), 1.0);
    match vcov {
        Vcov::Cluster { codes, .. } => {
            let g = codes.iter().copied().max().map_or(0, |m| m + 1) as f64;
            meat(scores, &ones, vcov) * (g / (g - 1.0) * (n - 1.0) / (n - (k + dof_fe_cluster) as f64))
        }
        _ => meat(scores, &ones, &Vcov::Robust) * (n / (n - (k + dof_fe) as f64)),
    }
}

/// Weak-identification and overidentification statistics for an IV model
/// on the same sample (after the same listwise deletion and absorption) as
/// [`crate::estimate::fit_iv`].
pub fn iv_diagnostics(
    design: &Design,
    endogenous: &[String],
    instruments: &Instruments,
    vcov: &Vcov,
    absorb: &AbsorbOptions,
    thresholds: &DiagnosticThresholds,
) -> Result<DiagnosticsReport> {
    let endo_idx = endogenous
        .iter()
        .map(|e| {
            design
                .column(e)
                .ok_or_else(|| Error::formula(format!("endogenous column `{e}` is not in the design")))
        })
        .collect::<Result<Vec<_>>>()?;
    let k = endo_idx.len();
    let l = instruments.labels.len();
    if k == 0 || l < k {
        return Err(Error::Identification {
            instruments: l,
            endogenous: k,
        });
    }
    let p = prepare(design, Some(&instruments.values), vcov, absorb)?;
    let n = p.y.len();
    let exo_idx: Vec<usize> = (0..design.labels.len()).filter(|j| !endo_idx.contains(j)).collect();
    let exo = select_columns(&p.x, &exo_idx);
    let ze_raw = p.z.clone().expect("instruments prepared");
    let kz = exo.ncols() + l;
    let collinear = || Error::CollinearInstruments {
        columns: instruments.labels.clone(),
    };
    let ze = residualize(&exo, &ze_raw).ok_or_else(collinear)?;
    let xe = residualize(&exo, &select_columns(&p.x, &endo_idx)).ok_or_else(collinear)?;
    let df = n.saturating_sub(kz + p.dof_fe).max(1);

    let zz = gram(&ze);
    let q = inv_spd(&zz).ok_or_else(collinear)?;
    let pi = &q * ze.tr_mul(&xe);
    let v = &xe - &ze * &pi;
    let svv = gram(&v) / df as f64;
    let explained = pi.transpose() * &zz * &pi;

    let first_stage_f = (0..k)
        .map(|a| FirstStageF {
            endogenous: endogenous[a].clone(),
            f_stat: (explained[(a, a)] / l as f64) / svv[(a, a)],
            df_num: l,
            df_den: df,
        })
        .collect();

    let svv_isqrt = sym_pow(&svv, -0.5);
    let cd_mat = &svv_isqrt * &explained * &svv_isqrt / l as f64;
    let (cd_vals, _) = sym_eigen_desc(&cd_mat);
    let cragg_donald = *cd_vals.last().expect("one endogenous regressor");

    // Kleibergen-Paap: rank test on Theta = F Pi G' with the robust
    // covariance of vec(Pi).
    let f = sym_pow(&zz, 0.5);
    let g = svv_isqrt.clone();
    let vpi = match &p.vcov {
        Vcov::Homoskedastic => svv.kronecker(&q),
        other => {
            let scores = DMatrix::from_fn(n, k * l, |i, c| ze[(i, c % l)] * v[(i, c / l)]);
            let qk = DMatrix::identity(k, k).kronecker(&q);
            &qk * robust_scores(&scores, other, kz, p.dof_fe, p.dof_fe_cluster) * &qk
        }
    };
    let theta = &f * &pi * g.transpose();
    let gf = g.kronecker(&f);
    let w = &gf * vpi * gf.transpose();
    let (_, left) = sym_eigen_desc(&(&theta * theta.transpose()));
    let (_, right) = sym_eigen_desc(&(theta.transpose() * &theta));
    let a_perp = left.columns(k - 1, l - k + 1).into_owned();
    let b_perp = right.columns(k - 1, 1).into_owned();
    let proj = b_perp.transpose().kronecker(&a_perp.transpose());
    let lambda = &proj * DVector::from_column_slice(theta.as_slice());
    let omega = &proj * w * proj.transpose();
    let rk = match inv_spd(&omega) {
        Some(oi) => (lambda.transpose() * oi * &lambda)[(0, 0)],
        None => f64::NAN,
    };
    let rk_dof = l - k + 1;
    let kleibergen_paap_rk = RankTest {
        statistic: rk,
        dof: rk_dof,
        p_value: chi2_sf(rk, rk_dof),
        wald_f: rk / l as f64,
    };

    // Overidentification on the full instrument set.
    let z = hstack(&exo, &ze_raw);
    let zinv = inv_spd(&gram(&z)).ok_or_else(collinear)?;
    let zx = z.tr_mul(&p.x);
    let zy = z.tr_mul(&p.y);
    let a1 = zx.transpose() * &zinv;
    let b1 = inv_spd(&(&a1 * &zx))
        .ok_or_else(|| Error::RankDeficient {
            columns: endogenous.to_vec(),
        })?
        * (&a1 * &zy);
    let u1 = &p.y - &p.x * &b1;
    let zu1 = z.tr_mul(&u1);
    let overid = l - k;
    let sargan = ChiSquareTest::new((zu1.transpose() * &zinv * &zu1)[(0, 0)] / (u1.norm_squared() / n as f64), overid);
    let s = match &p.vcov {
        Vcov::Cluster { .. } => meat(&z, &u1, &p.vcov),
        _ => meat(&z, &u1, &Vcov::Robust),
    };
    let wgt = inv_spd(&s).ok_or_else(collinear)?;
    let a2 = zx.transpose() * &wgt;
    let b2 = inv_spd(&(&a2 * &zx))
        .ok_or_else(|| Error::RankDeficient {
            columns: endogenous.to_vec(),
        })?
        * (&a2 * &zy);
    let g2 = z.tr_mul(&(&p.y - &p.x * &b2));
    let hansen_j = ChiSquareTest::new((g2.transpose() * &wgt * &g2)[(0, 0)], overid);

    let mut report = DiagnosticsReport {
        nobs: n,
        endogenous: endogenous.to_vec(),
        instruments: instruments.labels.clone(),
        covariance: p.vcov.label(),
        first_stage_f,
        cragg_donald,
        kleibergen_paap_rk,
        hansen_j,
        sargan,
        stock_yogo: stock_yogo(k, l),
        verdicts: Vec::new(),
    };
    report.verdicts = verdicts(&report, thresholds);
    Ok(report)
}

fn verdicts(r: &DiagnosticsReport, t: &DiagnosticThresholds) -> Vec<Verdict> {
    let mut out = Vec::new();
    let at_least = |check: String, value: f64, threshold: f64| Verdict {
        check,
        value,
        threshold,
        pass: value >= threshold,
    };
    if let Some(min) = t.min_first_stage_f {
        for fs in &r.first_stage_f {
            out.push(at_least(format!("first_stage_f[{}]", fs.endogenous), fs.f_stat, min));
        }
    }
    if let Some(min) = t.min_cragg_donald {
        out.push(at_least("cragg_donald".into(), r.cragg_donald, min));
    }
    if let Some(min) = t.min_kleibergen_paap_f {
        out.push(at_least("kleibergen_paap_f".into(), r.kleibergen_paap_rk.wald_f, min));
    }
    if let Some(alpha) = t.overid_alpha {
        if let Some(p) = r.hansen_j.p_value {
            out.push(at_least("hansen_j_p".into(), p, alpha));
        }
    }
    out
}

fn fmt_p(p: Option<f64>) -> String {
    p.map_or_else(|| "NA".to_string(), |v| format!("{v:.4}"))
}

pub fn render_diagnostics(r: &DiagnosticsReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "IV diagnostics (N = {}, covariance: {})", r.nobs, r.covariance);
    let kp = &r.kleibergen_paap_rk;
    let mut rows: Vec<(String, String, String)> = r
        .first_stage_f
        .iter()
        .map(|fs| {
            (
                format!("first-stage F [{}]", fs.endogenous),
                format!("{:.3}", fs.f_stat),
                format!("({}, {})", fs.df_num, fs.df_den),
            )
        })
        .collect();
    rows.push(("Cragg-Donald Wald F".into(), format!("{:.3}", r.cragg_donald), String::new()));
    rows.push((
        "Kleibergen-Paap rk".into(),
        format!("{:.3}", kp.statistic),
        format!("dof {}  p {:.4}  (Wald F {:.3})", kp.dof, kp.p_value, kp.wald_f),
    ));
    rows.push((
        "Hansen J".into(),
        format!("{:.4}", r.hansen_j.statistic),
        format!("dof {}  p {}", r.hansen_j.dof, fmt_p(r.hansen_j.p_value)),
    ));
    rows.push((
        "Sargan".into(),
        format!("{:.4}", r.sargan.statistic),
        format!("dof {}  p {}", r.sargan.dof, fmt_p(r.sargan.p_value)),
    ));
    let width = rows.iter().map(|(k, _, _)| k.len()).max().unwrap_or(0);
    for (k, v, extra) in rows {
        let line = format!("  {k:<width$}  {v:>12}  {extra}");
        let _ = writeln!(s, "{}", line.trim_end());
    }
    if let Some(note) = &r.stock_yogo.note {
        let _ = writeln!(s, "  Stock-Yogo: {note}");
    }
    for cv in r.stock_yogo.relative_bias.iter().chain(&r.stock_yogo.size) {
        let _ = writeln!(s, "  Stock-Yogo {:<22} {:>8.2}", cv.label, cv.value);
    }
    for v in &r.verdicts {
        let _ = writeln!(
            s,
            "  [{}] {} = {:.4} (threshold {})",
            if v.pass { "ok" } else { "FAIL" },
            v.check,
            v.value,
            v.threshold
        );
    }
    s
}

// ---------------------------------------------------------------------------
// Placebo tests
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlaceboMode {
    /// Permute across alternatives within each (market, period).
    ShuffleAlternatives,
    /// Permute across periods within each (market, alternative).
    ShufflePeriods,
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaceboCoef {
    pub label: String,
    pub estimate: f64,
    pub std_error: f64,
    pub t_stat: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaceboRun {
    pub seed: u64,
    pub coefficients: Vec<PlaceboCoef>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedSeed {
    pub seed: u64,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaceboReport {
    pub mode: PlaceboMode,
    pub columns: Vec<String>,
    pub baseline: Option<Vec<PlaceboCoef>>,
    pub runs: Vec<PlaceboRun>,
    pub skipped: Vec<SkippedSeed>,
    /// Share of completed seeds with `|t| >= 1.96`, per coefficient.
    pub rejection_rate: BTreeMap<String, f64>,
}

fn mentions(label: &str, columns: &[String]) -> bool {
    label.split(':').any(|part| columns.iter().any(|c| c == part))
}

fn tracked(report: &EstimateReport, columns: &[String]) -> Vec<PlaceboCoef> {
    report
        .coefficients
        .iter()
        .filter(|c| mentions(&c.label, columns))
        .map(|c| PlaceboCoef {
            label: c.label.clone(),
            estimate: c.estimate,
            std_error: c.std_error,
            t_stat: c.t_stat,
        })
        .collect()
}

fn permutation_groups(panel: &MarketPanel, mode: PlaceboMode) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<(String, String), Vec<usize>> = BTreeMap::new();
    for (i, k) in panel.keys.iter().enumerate() {
        let key = match mode {
            PlaceboMode::ShufflePeriods => (k.market.clone(), k.alt.clone()),
            _ => (k.market.clone(), k.period.to_string()),
        };
        groups.entry(key).or_default().push(i);
    }
    groups.into_values().collect()
}

/// Panel with the listed columns permuted under `mode`, driven by `seed`.
pub fn permute_columns(panel: &MarketPanel, columns: &[String], mode: PlaceboMode, seed: u64) -> Result<MarketPanel> {
    let mut out = panel.clone();
    if mode == PlaceboMode::Identity {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups = permutation_groups(panel, mode);
    for name in columns {
        let src = panel.numeric(name)?;
        let col = out.columns.get_mut(name).ok_or_else(|| Error::MissingColumn { column: name.clone() })?;
        for g in &groups {
            let mut perm = g.clone();
            perm.shuffle(&mut rng);
            for (&dst, &from) in g.iter().zip(&perm) {
                col.values[dst] = src[from];
            }
        }
    }
    Ok(out)
}

/// Re-estimates `spec` once per seed with the recommendation columns
/// permuted. `columns` defaults to the panel's recommendation columns used
/// by `spec`.
pub fn placebo_test(
    panel: &MarketPanel,
    spec: &ModelSpec,
    mode: PlaceboMode,
    seeds: &[u64],
    columns: Option<&[String]>,
) -> Result<PlaceboReport> {
    let d = spec.design_spec();
    let used: Vec<&String> = d.regressors.iter().chain(d.interactions.iter().flatten()).collect();
    let columns: Vec<String> = match columns {
        Some(c) => c.to_vec(),
        None => panel
            .recommendation_columns()
            .into_iter()
            .filter(|c| used.contains(&c))
            .collect(),
    };
    if columns.is_empty() {
        return Err(Error::config("placebo test needs at least one recommendation column in the model"));
    }
    let mut report = PlaceboReport {
        mode,
        columns: columns.clone(),
        baseline: None,
        runs: Vec::new(),
        skipped: Vec::new(),
        rejection_rate: BTreeMap::new(),
    };
    for c in &columns {
        if panel.numeric(c)?.iter().all(|&v| v == 0.0) {
            let reason = format!("column `{c}` is all zero; permutation is degenerate");
            report.skipped = seeds
                .iter()
                .map(|&seed| SkippedSeed {
                    seed,
                    reason: reason.clone(),
                })
                .collect();
            return Ok(report);
        }
    }
    let shares = compute_shares(panel, spec.zero_policy)?;
    let fit = |p: &MarketPanel| -> Result<EstimateReport> {
        let design = build_design(p, &shares, &d)?;
        spec.fit_design(p, &design)
    };
    let baseline = fit(panel)?;
    report.baseline = Some(tracked(&baseline, &columns));
    let results: Vec<std::result::Result<PlaceboRun, SkippedSeed>> = seeds
        .par_iter()
        .map(|&seed| {
            permute_columns(panel, &columns, mode, seed)
                .and_then(|p| fit(&p))
                .map(|r| PlaceboRun {
                    seed,
                    coefficients: tracked(&r, &columns),
                })
                .map_err(|e| SkippedSeed {
                    seed,
                    reason: e.to_string(),
                })
        })
        .collect();
    for r in results {
        match r {
            Ok(run) => report.runs.push(run),
            Err(s) => report.skipped.push(s),
        }
    }
    if !report.runs.is_empty() {
        for c in report.baseline.iter().flatten() {
            let rejections = report
                .runs
                .iter()
                .filter(|run| run.coefficients.iter().any(|x| x.label == c.label && x.t_stat.abs() >= 1.96))
                .count();
            report
                .rejection_rate
                .insert(c.label.clone(), rejections as f64 / report.runs.len() as f64);
        }
    }
    Ok(report)
}

pub fn render_placebo(r: &PlaceboReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "Placebo test ({:?}): {} runs, {} skipped",
        r.mode,
        r.runs.len(),
        r.skipped.len()
    );
    for c in r.baseline.iter().flatten() {
        let _ = writeln!(
            s,
            "  {:<24} baseline t = {:>9.3}   rejection rate {:.3}",
            c.label,
            c.t_stat,
            r.rejection_rate.get(&c.label).copied().unwrap_or(f64::NAN)
        );
    }
    for k in &r.skipped {
        let _ = writeln!(s, "  skipped seed {}: {}", k.seed, k.reason);
    }
    s
}

// ---------------------------------------------------------------------------
// Holdout evaluation
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    pub rmse: f64,
    pub mse: f64,
    pub mad: f64,
    /// Mean absolute percentage error as a fraction.
    pub mape: f64,
    pub mape_excluded: usize,
}

pub fn metrics(predicted: &[f64], actual: &[f64]) -> Metrics {
    let n = predicted.len();
    let err: Vec<f64> = predicted.iter().zip(actual).map(|(p, a)| p - a).collect();
    let mse = err.iter().map(|e| e * e).sum::<f64>() / n as f64;
    let mad = err.iter().map(|e| e.abs()).sum::<f64>() / n as f64;
    let kept: Vec<f64> = err
        .iter()
        .zip(actual)
        .filter(|(_, a)| a.abs() > 1e-8)
        .map(|(e, a)| (e / a).abs())
        .collect();
    Metrics {
        n,
        rmse: mse.sqrt(),
        mse,
        mad,
        mape: kept.iter().sum::<f64>() / kept.len() as f64,
        mape_excluded: n - kept.len(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub model: String,
    pub sample: String,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HoldoutReport {
    pub target: String,
    pub fraction: f64,
    pub train_periods: Vec<i64>,
    pub test_periods: Vec<i64>,
    pub rows: Vec<MetricRow>,
    /// Test observations whose fixed-effect level never appears in training.
    pub unseen_levels: usize,
    pub fit: EstimateReport,
}

impl HoldoutReport {
    pub fn row(&self, model: &str, sample: &str) -> Option<&Metrics> {
        self.rows
            .iter()
            .find(|r| r.model == model && r.sample == sample)
            .map(|r| &r.metrics)
    }
}

/// Fixed-effect levels from residuals by Gauss-Seidel sweeps.
fn recover_effects(resid: &[f64], fes: &[crate::panel::FixedEffect], tol: f64, max_iter: usize) -> Vec<Vec<f64>> {
    let mut effects: Vec<Vec<f64>> = fes.iter().map(|f| vec![0.0; f.levels]).collect();
    for _ in 0..max_iter {
        let mut change: f64 = 0.0;
        for d in 0..fes.len() {
            let mut sum = vec![0.0; fes[d].levels];
            let mut cnt = vec![0usize; fes[d].levels];
            for (i, r) in resid.iter().enumerate() {
                let others: f64 = (0..fes.len()).filter(|&o| o != d).map(|o| effects[o][fes[o].codes[i]]).sum();
                sum[fes[d].codes[i]] += r - others;
                cnt[fes[d].codes[i]] += 1;
            }
            for g in 0..fes[d].levels {
                let new = sum[g] / cnt[g] as f64;
                change = change.max((new - effects[d][g]).abs());
                effects[d][g] = new;
            }
        }
        if change < tol || fes.len() <= 1 {
            break;
        }
    }
    effects
}

/// Fits on the earliest `fraction` of periods and predicts the mean utility
/// of the remaining periods. The baseline predicts each alternative's
/// training mean.
pub fn holdout_eval(panel: &MarketPanel, spec: &ModelSpec, fraction: f64) -> Result<HoldoutReport> {
    if spec.kind == ModelKind::Quantile {
        return Err(Error::config("holdout evaluation supports logit and nested models"));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Split(format!("fraction {fraction} must lie in (0, 1)")));
    }
    let periods = panel.periods();
    let n_train = ((fraction * periods.len() as f64) + 1e-9).floor() as usize;
    if n_train < 2 || periods.len() - n_train < 2 {
        return Err(Error::Split(format!(
            "{} periods split at {fraction} leave {n_train} training and {} test periods; need at least 2 each",
            periods.len(),
            periods.len() - n_train
        )));
    }
    let cutoff = periods[n_train - 1];
    let (_, design) = spec.build(panel)?;
    let is_train: Vec<bool> = design.rows.iter().map(|&r| panel.keys[r].period <= cutoff).collect();
    let train = design.retain(&is_train);
    let test_idx: Vec<usize> = (0..design.nobs()).filter(|&i| !is_train[i]).collect();
    if test_idx.is_empty() {
        return Err(Error::Split("test set is empty".into()));
    }
    let fit = spec.fit_design(panel, &train)?;
    let beta = DVector::from_vec(fit.estimates());
    let xb_train = &train.x * &beta;
    let resid: Vec<f64> = (0..train.nobs()).map(|i| train.y[i] - xb_train[i]).collect();
    let effects = recover_effects(&resid, &train.fixed_effects, spec.absorb.tol, spec.absorb.max_iter);

    let mut level_maps = Vec::new();
    for fe in &train.fixed_effects {
        let labels = panel.categorical(&fe.name)?;
        let map: BTreeMap<String, usize> = train
            .rows
            .iter()
            .zip(&fe.codes)
            .map(|(&r, &c)| (labels[r].clone(), c))
            .collect();
        level_maps.push((labels, map));
    }
    let fe_part = |row: usize, unseen: &mut usize| -> f64 {
        let mut total = 0.0;
        for (d, (labels, map)) in level_maps.iter().enumerate() {
            match map.get(&labels[row]) {
                Some(&c) => total += effects[d][c],
                None => *unseen += 1,
            }
        }
        total
    };

    let mut unseen = 0;
    let mut ignore = 0;
    let pred_train: Vec<f64> = (0..train.nobs())
        .map(|i| xb_train[i] + fe_part(train.rows[i], &mut ignore))
        .collect();
    let actual_train: Vec<f64> = train.y.iter().copied().collect();
    let pred_test: Vec<f64> = test_idx
        .iter()
        .map(|&i| {
            let xb: f64 = design.x.row(i).iter().zip(beta.iter()).map(|(a, b)| a * b).sum();
            xb + fe_part(design.rows[i], &mut unseen)
        })
        .collect();
    let actual_test: Vec<f64> = test_idx.iter().map(|&i| design.y[i]).collect();

    let mut alt_sum: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for (i, &r) in train.rows.iter().enumerate() {
        let e = alt_sum.entry(panel.keys[r].alt.as_str()).or_default();
        e.0 += train.y[i];
        e.1 += 1;
    }
    let overall = actual_train.iter().sum::<f64>() / actual_train.len() as f64;
    let baseline = |row: usize| alt_sum.get(panel.keys[row].alt.as_str()).map_or(overall, |(s, c)| s / *c as f64);
    let base_train: Vec<f64> = train.rows.iter().map(|&r| baseline(r)).collect();
    let base_test: Vec<f64> = test_idx.iter().map(|&i| baseline(design.rows[i])).collect();

    let row = |model: &str, sample: &str, m: Metrics| MetricRow {
        model: model.into(),
        sample: sample.into(),
        metrics: m,
    };
    Ok(HoldoutReport {
        target: "delta".into(),
        fraction,
        train_periods: periods[..n_train].to_vec(),
        test_periods: periods[n_train..].to_vec(),
        rows: vec![
            row("model", "in_sample", metrics(&pred_train, &actual_train)),
            row("model", "out_of_sample", metrics(&pred_test, &actual_test)),
            row("baseline", "in_sample", metrics(&base_train, &actual_train)),
            row("baseline", "out_of_sample", metrics(&base_test, &actual_test)),
        ],
        unseen_levels: unseen,
        fit,
    })
}

pub fn render_holdout(r: &HoldoutReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "Holdout on {} (train periods {}..={}, test periods {}..={})",
        r.target,
        r.train_periods.first().unwrap_or(&0),
        r.train_periods.last().unwrap_or(&0),
        r.test_periods.first().unwrap_or(&0),
        r.test_periods.last().unwrap_or(&0)
    );
    let _ = writeln!(s, "  {:<10} {:<14} {:>8} {:>10} {:>10} {:>10} {:>10}", "model", "sample", "N", "RMSE", "MSE", "MAD", "MAPE");
    for row in &r.rows {
        let m = &row.metrics;
        let _ = writeln!(
            s,
            "  {:<10} {:<14} {:>8} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
            row.model, row.sample, m.n, m.rmse, m.mse, m.mad, m.mape
        );
    }
    if r.unseen_levels > 0 {
        let _ = writeln!(s, "  {} test fixed-effect levels unseen in training", r.unseen_levels);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimate::fit_iv;
    use crate::estimate::IvMethod;
    use crate::panel::{DesignSpec, FixedEffect};
    use crate::synth::{generate_panel, SimDims, SyntheticTruth};
    use rand_distr::{Distribution, StandardNormal};

    fn iv_design(n: usize, seed: u64, l: usize) -> (Design, Instruments) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || -> f64 { StandardNormal.sample(&mut rng) };
        let z: Vec<Vec<f64>> = (0..n).map(|_| (0..l).map(|_| draw()).collect()).collect();
        let w: Vec<f64> = (0..n).map(|_| draw()).collect();
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let e = draw();
            let v = 0.5 * e + draw();
            let xi = z[i].iter().sum::<f64>() * 0.4 + 0.3 * w[i] + v;
            x.push(xi);
            y.push(1.0 + 2.0 * xi - w[i] + e);
        }
        let design = Design {
            y: DVector::from_vec(y),
            x: DMatrix::from_fn(n, 3, |i, j| match j {
                0 => 1.0,
                1 => x[i],
                _ => w[i],
            }),
            labels: vec!["const".into(), "x".into(), "w".into()],
            rows: (0..n).collect(),
            fixed_effects: Vec::new(),
            dropped_missing: 0,
            warnings: Vec::new(),
        };
        let instruments = Instruments {
            labels: (0..l).map(|j| format!("z{j}")).collect(),
            values: DMatrix::from_fn(n, l, |i, j| z[i][j]),
        };
        (design, instruments)
    }

    fn endo() -> Vec<String> {
        vec!["x".into()]
    }

    #[test]
    fn exactly_identified_has_zero_j() {
        let (d, z) = iv_design(300, 1, 1);
        let r = iv_diagnostics(&d, &endo(), &z, &Vcov::Robust, &AbsorbOptions::default(), &Default::default()).unwrap();
        assert_eq!(r.hansen_j.dof, 0);
        assert!(r.hansen_j.statistic.abs() < 1e-8, "{}", r.hansen_j.statistic);
        assert!(r.hansen_j.p_value.is_none());
        assert!(r.sargan.statistic.abs() < 1e-8);
    }

    #[test]
    fn cragg_donald_equals_first_stage_f_single_instrument() {
        let (d, z) = iv_design(400, 2, 1);
        let r = iv_diagnostics(&d, &endo(), &z, &Vcov::Robust, &AbsorbOptions::default(), &Default::default()).unwrap();
        assert!((r.cragg_donald - r.first_stage_f[0].f_stat).abs() < 1e-8 * r.cragg_donald.max(1.0));
        let fit = fit_iv(&d, &endo(), &z, IvMethod::TwoSls, &Vcov::Robust, &AbsorbOptions::default()).unwrap();
        assert!((fit.first_stage[0].f_stat - r.first_stage_f[0].f_stat).abs() < 1e-8 * r.cragg_donald);
    }

    #[test]
    fn kleibergen_paap_homoskedastic_matches_cragg_donald() {
        for l in [1, 3] {
            let (d, z) = iv_design(500, 3, l);
            let r = iv_diagnostics(&d, &endo(), &z, &Vcov::Homoskedastic, &AbsorbOptions::default(), &Default::default()).unwrap();
            assert!((r.kleibergen_paap_rk.wald_f - r.cragg_donald).abs() < 1e-8 * r.cragg_donald, "{l}");
            assert_eq!(r.kleibergen_paap_rk.dof, l);
            let robust = iv_diagnostics(&d, &endo(), &z, &Vcov::Robust, &AbsorbOptions::default(), &Default::default()).unwrap();
            assert!((robust.kleibergen_paap_rk.wald_f / r.cragg_donald - 1.0).abs() < 0.3);
        }
    }

    #[test]
    fn sargan_is_n_r_squared() {
        let (d, z) = iv_design(300, 4, 3);
        let r = iv_diagnostics(&d, &endo(), &z, &Vcov::Robust, &AbsorbOptions::default(), &Default::default()).unwrap();
        let fit = fit_iv(&d, &endo(), &z, IvMethod::TwoSls, &Vcov::Robust, &AbsorbOptions::default()).unwrap();
        let u = DMatrix::from_column_slice(300, 1, &fit.residuals);
        let full = hstack(&select_columns(&d.x, &[0, 2]), &z.values);
        let e = residualize(&full, &u).unwrap();
        let tss = u.norm_squared();
        let n_r2 = 300.0 * (1.0 - e.norm_squared() / tss);
        assert!((r.sargan.statistic - n_r2).abs() < 1e-8, "{} vs {n_r2}", r.sargan.statistic);
        assert_eq!(r.sargan.dof, 2);
    }

    #[test]
    fn two_endogenous_rank_test_dof() {
        let (mut d, z) = iv_design(400, 5, 4);
        d.labels[2] = "x2".into();
        let endo = vec!["x".to_string(), "x2".to_string()];
        let r = iv_diagnostics(&d, &endo, &z, &Vcov::Robust, &AbsorbOptions::default(), &Default::default()).unwrap();
        assert_eq!(r.kleibergen_paap_rk.dof, 3);
        assert_eq!(r.hansen_j.dof, 2);
        assert_eq!(r.first_stage_f.len(), 2);
        assert!(r.cragg_donald <= r.first_stage_f.iter().map(|f| f.f_stat).fold(f64::INFINITY, f64::min) + 1e-9);
    }

    #[test]
    fn under_identified_rejected() {
        let (mut d, z) = iv_design(100, 6, 1);
        d.labels[2] = "x2".into();
        let endo = vec!["x".to_string(), "x2".to_string()];
        let err = iv_diagnostics(&d, &endo, &z, &Vcov::Robust, &AbsorbOptions::default(), &Default::default()).unwrap_err();
        assert!(matches!(err, Error::Identification { .. }));
    }

    #[test]
    fn misaligned_instruments_rejected() {
        let (d, z) = iv_design(100, 7, 1);
        let short = Instruments {
            labels: z.labels.clone(),
            values: z.values.rows(0, 50).into_owned(),
        };
        let err = iv_diagnostics(&d, &endo(), &short, &Vcov::Robust, &AbsorbOptions::default(), &Default::default()).unwrap_err();
        assert!(matches!(err, Error::Misalignment(_)));
    }

    #[test]
    fn stock_yogo_lookup() {
        let t = stock_yogo(1, 1);
        assert_eq!(t.size[0].value, 16.38);
        assert!(t.relative_bias.is_empty());
        assert_eq!(stock_yogo(3, 7).note.as_deref(), Some("no tabulated value"));
    }

    #[test]
    fn metric_arithmetic() {
        let m = metrics(&[1.0, 2.0], &[1.0, 4.0]);
        assert!((m.rmse - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(m.mse, 2.0);
        assert_eq!(m.mad, 1.0);
        assert_eq!(m.mape, 0.25);
        let z = metrics(&[1.0, 2.0], &[0.0, 4.0]);
        assert_eq!(z.mape_excluded, 1);
        assert_eq!(z.mape, 0.5);
    }

    #[test]
    fn gauss_seidel_recovers_two_way_effects() {
        let a = [0.5, -1.0, 2.0];
        let b = [0.0, 3.0];
        let mut codes_a = Vec::new();
        let mut codes_b = Vec::new();
        let mut r = Vec::new();
        for i in 0..3 {
            for j in 0..2 {
                if (i, j) == (2, 0) {
                    continue;
                }
                codes_a.push(i);
                codes_b.push(j);
                r.push(a[i] + b[j]);
            }
        }
        let fes = vec![
            FixedEffect { name: "a".into(), codes: codes_a.clone(), levels: 3 },
            FixedEffect { name: "b".into(), codes: codes_b.clone(), levels: 2 },
        ];
        let e = recover_effects(&r, &fes, 1e-13, 100_000);
        for i in 0..r.len() {
            assert!((e[0][codes_a[i]] + e[1][codes_b[i]] - r[i]).abs() < 1e-10);
        }
    }

    fn sim_spec() -> (MarketPanel, ModelSpec) {
        let truth = SyntheticTruth {
            theta_rec: vec![1.5],
            xi_sd: 0.3,
            ..Default::default()
        };
        let sim = generate_panel(
            &truth,
            SimDims {
                markets: 3,
                alternatives: 8,
                periods: 10,
            },
        )
        .unwrap();
        let spec = ModelSpec {
            design: DesignSpec {
                regressors: vec!["x1".into(), "price".into(), "rec_trending".into()],
                fixed_effects: vec!["alt".into()],
                ..Default::default()
            },
            ..Default::default()
        };
        (sim.panel, spec)
    }

    #[test]
    fn identity_placebo_reproduces_baseline() {
        let (panel, spec) = sim_spec();
        let r = placebo_test(&panel, &spec, PlaceboMode::Identity, &[1, 2], None).unwrap();
        assert_eq!(r.columns, vec!["rec_trending".to_string()]);
        for run in &r.runs {
            assert_eq!(Some(&run.coefficients), r.baseline.as_ref());
        }
    }

    #[test]
    fn zero_column_skips_every_seed() {
        let (mut panel, spec) = sim_spec();
        let n = panel.len();
        panel.columns.get_mut("rec_trending").unwrap().values = vec![0.0; n];
        let r = placebo_test(&panel, &spec, PlaceboMode::ShuffleAlternatives, &[1, 2, 3], None).unwrap();
        assert!(r.runs.is_empty());
        assert_eq!(r.skipped.len(), 3);
        assert!(r.skipped[0].reason.contains("all zero"));
    }

    #[test]
    fn permutations_stay_within_groups() {
        let (panel, _) = sim_spec();
        let cols = vec!["rec_trending".to_string()];
        for mode in [PlaceboMode::ShuffleAlternatives, PlaceboMode::ShufflePeriods] {
            let p = permute_columns(&panel, &cols, mode, 9).unwrap();
            for g in permutation_groups(&panel, mode) {
                let mut a: Vec<f64> = g.iter().map(|&i| panel.columns["rec_trending"].values[i]).collect();
                let mut b: Vec<f64> = g.iter().map(|&i| p.columns["rec_trending"].values[i]).collect();
                a.sort_by(f64::total_cmp);
                b.sort_by(f64::total_cmp);
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn holdout_ignores_test_rows() {
        let (panel, spec) = sim_spec();
        let a = holdout_eval(&panel, &spec, 0.8).unwrap();
        let mut perturbed = panel.clone();
        for (i, k) in panel.keys.iter().enumerate() {
            if k.period > *a.train_periods.last().unwrap() {
                perturbed.quantity[i] *= 0.5;
                perturbed.price[i] += 100.0;
            }
        }
        let b = holdout_eval(&perturbed, &spec, 0.8).unwrap();
        assert_eq!(a.fit, b.fit);
        assert_eq!(a.row("model", "in_sample"), b.row("model", "in_sample"));
        assert_ne!(a.row("model", "out_of_sample"), b.row("model", "out_of_sample"));
        for row in &a.rows {
            assert!((row.metrics.mse - row.metrics.rmse.powi(2)).abs() < 1e-12);
            assert!(row.metrics.mad <= row.metrics.rmse + 1e-15);
        }
    }

    #[test]
    fn holdout_split_needs_two_periods_each_side() {
        let (panel, spec) = sim_spec();
        assert!(matches!(holdout_eval(&panel, &spec, 0.95), Err(Error::Split(_))));
        assert!(matches!(holdout_eval(&panel, &spec, 1.0), Err(Error::Split(_))));
    }
}
