//! Linear estimators for the inverted-share equation: fixed-effect
//! absorption, OLS, 2SLS and two-step GMM, and quantile regression.

mod absorb;
mod quantile;
mod report;
mod rivals;
mod spec;

pub use absorb::{absorb_fixed_effects, absorb_matrix, AbsorbReport};
pub use quantile::{fit_quantile, pinball_loss, QuantileOptions};
pub use report::{render_table, stars};
pub use rivals::{rival_instrument, RivalScope, RivalStat};
pub use spec::{fit_model, ModelKind, ModelSpec};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::linalg::{dependent_columns, gram, hstack, inv_spd, select_columns};
use crate::panel::{Design, FixedEffect, NEST_TERM};

pub const PRICE: &str = "price";

/// Covariance estimator for the coefficient standard errors.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Vcov {
    Homoskedastic,
    /// HC1.
    #[default]
    Robust,
    Cluster {
        name: String,
        /// One code per design row.
        #[serde(skip)]
        codes: Vec<usize>,
    },
}

impl Vcov {
    pub fn label(&self) -> String {
        match self {
            Vcov::Homoskedastic => "homoskedastic".into(),
            Vcov::Robust => "robust (HC1)".into(),
            Vcov::Cluster { name, .. } => format!("cluster ({name})"),
        }
    }

    pub fn cluster_name(&self) -> Option<&str> {
        match self {
            Vcov::Cluster { name, .. } => Some(name),
            _ => None,
        }
    }

    fn retain(&self, idx: &[usize]) -> Vcov {
        match self {
            Vcov::Cluster { name, codes } => Vcov::Cluster {
                name: name.clone(),
                codes: idx.iter().map(|&i| codes[i]).collect(),
            },
            other => other.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AbsorbOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for AbsorbOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 10_000,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IvMethod {
    #[default]
    #[serde(rename = "2sls")]
    TwoSls,
    Gmm2step,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub label: String,
    pub estimate: f64,
    pub std_error: f64,
    pub t_stat: f64,
    pub p_value: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitStats {
    pub nobs: usize,
    pub df_resid: usize,
    pub r_squared: f64,
    pub adj_r_squared: f64,
    /// Gaussian log-likelihood of the residuals.
    pub gaussian_log_likelihood: f64,
    pub rss: f64,
    /// Koenker-Machado pseudo R-squared (quantile fits only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pseudo_r_squared: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub objective: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MethodInfo {
    pub estimator: String,
    pub fixed_effects: Vec<String>,
    pub absorb: AbsorbReport,
    pub endogenous: Vec<String>,
    pub instruments: Vec<String>,
    pub covariance: String,
    pub cluster: Option<String>,
    pub clusters: Option<usize>,
    pub weighting_rounds: usize,
    pub dropped_missing: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FirstStage {
    pub endogenous: String,
    pub coefficients: Vec<Coefficient>,
    /// Homoskedastic F on the excluded instruments.
    pub f_stat: f64,
    pub df_num: usize,
    pub df_den: usize,
    pub partial_r_squared: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub coefficients: Vec<Coefficient>,
    /// Minus the price coefficient.
    pub alpha: Option<f64>,
    pub sigma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_flag: Option<String>,
    pub vcov: Vec<Vec<f64>>,
    pub residuals: Vec<f64>,
    /// Panel observation per residual.
    pub rows: Vec<usize>,
    pub fit: FitStats,
    pub method: MethodInfo,
    pub first_stage: Vec<FirstStage>,
    pub warnings: Vec<String>,
}

impl EstimateReport {
    pub fn coefficient(&self, label: &str) -> Option<&Coefficient> {
        self.coefficients.iter().find(|c| c.label == label)
    }

    /// Estimates other than price and the nest term.
    pub fn beta(&self) -> Vec<(String, f64)> {
        self.coefficients
            .iter()
            .filter(|c| c.label != PRICE && c.label != NEST_TERM)
            .map(|c| (c.label.clone(), c.estimate))
            .collect()
    }

    pub fn estimates(&self) -> Vec<f64> {
        self.coefficients.iter().map(|c| c.estimate).collect()
    }

    /// Normal-approximation confidence interval.
    pub fn conf_int(&self, label: &str, level: f64) -> Option<(f64, f64)> {
        let c = self.coefficient(label)?;
        let z = statrs::distribution::Normal::standard().inverse_cdf(0.5 + level / 2.0);
        Some((c.estimate - z * c.std_error, c.estimate + z * c.std_error))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Demeaned data ready for the matrix estimators.
pub(crate) struct Prepared {
    pub(crate) y: DVector<f64>,
    pub(crate) x: DMatrix<f64>,
    pub(crate) z: Option<DMatrix<f64>>,
    absorb: AbsorbReport,
    pub(crate) vcov: Vcov,
    pub(crate) dof_fe: usize,
    pub(crate) dof_fe_cluster: usize,
    pub(crate) clusters: Option<usize>,
    rows: Vec<usize>,
    dropped: usize,
}

fn nested_in(fe: &FixedEffect, cluster: &[usize]) -> bool {
    let mut owner = vec![usize::MAX; fe.levels];
    for (&g, &c) in fe.codes.iter().zip(cluster) {
        if owner[g] == usize::MAX {
            owner[g] = c;
        } else if owner[g] != c {
            return false;
        }
    }
    true
}

pub(crate) fn prepare(
    design: &Design,
    excluded: Option<&DMatrix<f64>>,
    vcov: &Vcov,
    absorb: &AbsorbOptions,
) -> Result<Prepared> {
    let n = design.nobs();
    if let Vcov::Cluster { codes, .. } = vcov {
        if codes.len() != n {
            return Err(Error::Misalignment(format!(
                "{} cluster codes for {n} design rows",
                codes.len()
            )));
        }
    }
    let (design, vcov, excluded) = match excluded {
        Some(z) => {
            if z.nrows() != n {
                return Err(Error::Misalignment(format!(
                    "{} instrument rows for {n} design rows",
                    z.nrows()
                )));
            }
            let keep: Vec<bool> = (0..n).map(|i| z.row(i).iter().all(|v| v.is_finite())).collect();
            let idx: Vec<usize> = (0..n).filter(|&i| keep[i]).collect();
            (
                design.retain(&keep),
                vcov.retain(&idx),
                Some(crate::linalg::select_rows(z, &idx)),
            )
        }
        None => (design.clone(), vcov.clone(), None),
    };
    let kx = design.x.ncols();
    let mut m = hstack(
        &DMatrix::from_column_slice(design.nobs(), 1, design.y.as_slice()),
        &design.x,
    );
    if let Some(z) = &excluded {
        m = hstack(&m, z);
    }
    let report = absorb_matrix(&mut m, &design.fixed_effects, absorb.tol, absorb.max_iter)?;
    let y = m.column(0).into_owned();
    let x = m.columns(1, kx).into_owned();
    let z = excluded.map(|z| m.columns(1 + kx, z.ncols()).into_owned());
    let dof_fe = report.absorbed_dof;
    let (dof_fe_cluster, clusters) = match &vcov {
        Vcov::Cluster { codes, .. } => {
            let g = codes.iter().copied().max().map_or(0, |m| m + 1);
            let free: Vec<&FixedEffect> = design
                .fixed_effects
                .iter()
                .filter(|fe| !nested_in(fe, codes))
                .collect();
            let dof = if free.is_empty() {
                0
            } else {
                free.iter().map(|f| f.levels).sum::<usize>() + 1 - free.len()
            };
            (dof, Some(g))
        }
        _ => (dof_fe, None),
    };
    Ok(Prepared {
        y,
        x,
        z,
        absorb: report,
        vcov,
        dof_fe,
        dof_fe_cluster,
        clusters,
        rows: design.rows.clone(),
        dropped: design.dropped_missing,
    })
}

/// `sum_i s_i s_i' u_i^2`, or its clustered analog.
pub(crate) fn meat(scores: &DMatrix<f64>, u: &DVector<f64>, vcov: &Vcov) -> DMatrix<f64> {
    let k = scores.ncols();
    match vcov {
        Vcov::Cluster { codes, .. } => {
            let g = codes.iter().copied().max().map_or(0, |m| m + 1);
            let mut sums = DMatrix::zeros(g, k);
            for i in 0..scores.nrows() {
                for j in 0..k {
                    sums[(codes[i], j)] += scores[(i, j)] * u[i];
                }
            }
            gram(&sums)
        }
        _ => {
            let weighted = DMatrix::from_fn(scores.nrows(), k, |i, j| scores[(i, j)] * u[i]);
            gram(&weighted)
        }
    }
}

fn student_p(t: f64, df: usize) -> f64 {
    if !t.is_finite() {
        return f64::NAN;
    }
    let dist = StudentsT::new(0.0, 1.0, df.max(1) as f64).expect("valid t distribution");
    2.0 * (1.0 - dist.cdf(t.abs()))
}

fn coefficient_table(labels: &[String], b: &DVector<f64>, v: &DMatrix<f64>, df: usize) -> Vec<Coefficient> {
    labels
        .iter()
        .enumerate()
        .map(|(j, label)| {
            let se = v[(j, j)].max(0.0).sqrt();
            let t = b[j] / se;
            Coefficient {
                label: label.clone(),
                estimate: b[j],
                std_error: se,
                t_stat: t,
                p_value: student_p(t, df),
            }
        })
        .collect()
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

struct Sandwich {
    v: DMatrix<f64>,
    df: usize,
}

/// Sandwich covariance `bread * meat * bread` with the usual finite-sample
/// scaling for the requested estimator.
fn sandwich(p: &Prepared, bread: &DMatrix<f64>, scores: &DMatrix<f64>, u: &DVector<f64>) -> Sandwich {
    let n = u.len();
    let k = scores.ncols();
    let df_resid = n.saturating_sub(k + p.dof_fe).max(1);
    match &p.vcov {
        Vcov::Homoskedastic => {
            let s2 = u.norm_squared() / df_resid as f64;
            Sandwich {
                v: bread * s2,
                df: df_resid,
            }
        }
        Vcov::Robust => {
            let c = n as f64 / df_resid as f64;
            Sandwich {
                v: bread * meat(scores, u, &p.vcov) * bread * c,
                df: df_resid,
            }
        }
        Vcov::Cluster { .. } => {
            let g = p.clusters.unwrap_or(1) as f64;
            let kk = (k + p.dof_fe_cluster) as f64;
            let c = g / (g - 1.0) * (n as f64 - 1.0) / (n as f64 - kk);
            Sandwich {
                v: bread * meat(scores, u, &p.vcov) * bread * c,
                df: (g as usize).saturating_sub(1).max(1),
            }
        }
    }
}

fn fit_stats(y: &DVector<f64>, u: &DVector<f64>, k: usize, dof_fe: usize, centered: bool) -> FitStats {
    let n = y.len();
    let rss = u.norm_squared();
    let tss = if centered || dof_fe > 0 {
        let m = y.mean();
        y.iter().map(|v| (v - m).powi(2)).sum::<f64>()
    } else {
        y.norm_squared()
    };
    let r2 = if tss > 0.0 { 1.0 - rss / tss } else { f64::NAN };
    let df_resid = n.saturating_sub(k + dof_fe);
    let adj = if df_resid > 0 && n > 1 {
        1.0 - (1.0 - r2) * (n as f64 - 1.0) / df_resid as f64
    } else {
        f64::NAN
    };
    let nf = n as f64;
    FitStats {
        nobs: n,
        df_resid,
        r_squared: r2,
        adj_r_squared: adj,
        gaussian_log_likelihood: -nf / 2.0 * ((2.0 * std::f64::consts::PI).ln() + (rss / nf).ln() + 1.0),
        rss,
        pseudo_r_squared: None,
        objective: None,
    }
}

fn finish(
    labels: &[String],
    b: DVector<f64>,
    v: Sandwich,
    residuals: DVector<f64>,
    y: &DVector<f64>,
    p: &Prepared,
    design: &Design,
    method: MethodInfo,
) -> EstimateReport {
    let k = labels.len();
    let centered = labels.iter().any(|l| l == crate::panel::INTERCEPT);
    let coefficients = coefficient_table(labels, &b, &v.v, v.df);
    let alpha = labels.iter().position(|l| l == PRICE).map(|j| -b[j]);
    let sigma = labels.iter().position(|l| l == NEST_TERM).map(|j| b[j]);
    let sigma_flag = sigma
        .filter(|s| !(0.0..1.0).contains(s))
        .map(|s| format!("nest coefficient {s:.4} outside [0, 1)"));
    let mut warnings = design.warnings.clone();
    if let Some(f) = &sigma_flag {
        warnings.push(f.clone());
    }
    EstimateReport {
        coefficients,
        alpha,
        sigma,
        sigma_flag,
        vcov: matrix_rows(&v.v),
        residuals: residuals.iter().copied().collect(),
        rows: p.rows.clone(),
        fit: fit_stats(y, &residuals, k, p.dof_fe, centered),
        method,
        first_stage: Vec::new(),
        warnings,
    }
}

fn base_method(estimator: &str, design: &Design, p: &Prepared) -> MethodInfo {
    MethodInfo {
        estimator: estimator.into(),
        fixed_effects: design.fixed_effects.iter().map(|f| f.name.clone()).collect(),
        absorb: p.absorb.clone(),
        covariance: p.vcov.label(),
        cluster: p.vcov.cluster_name().map(String::from),
        clusters: p.clusters,
        dropped_missing: p.dropped,
        ..Default::default()
    }
}

fn rank_check(x: &DMatrix<f64>, labels: &[String]) -> Result<()> {
    let dep = dependent_columns(x);
    if dep.is_empty() {
        Ok(())
    } else {
        Err(Error::RankDeficient {
            columns: dep.iter().map(|&j| labels[j].clone()).collect(),
        })
    }
}

/// Least squares of `design.y` on `design.x` after absorbing the design's
/// fixed effects.
pub fn fit_ols(design: &Design, vcov: &Vcov, absorb: &AbsorbOptions) -> Result<EstimateReport> {
    let p = prepare(design, None, vcov, absorb)?;
    rank_check(&p.x, &design.labels)?;
    let xtx_inv = inv_spd(&gram(&p.x)).ok_or_else(|| Error::RankDeficient {
        columns: design.labels.clone(),
    })?;
    let b = &xtx_inv * p.x.tr_mul(&p.y);
    let u = &p.y - &p.x * &b;
    let v = sandwich(&p, &xtx_inv, &p.x, &u);
    let method = base_method("ols", design, &p);
    Ok(finish(&design.labels, b, v, u.clone(), &p.y, &p, design, method))
}

/// Excluded instruments aligned with the design rows (`NaN` = missing).
#[derive(Clone, Debug, PartialEq)]
pub struct Instruments {
    pub labels: Vec<String>,
    pub values: DMatrix<f64>,
}

fn ols_coef(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let inv = inv_spd(&gram(x))?;
    Some(inv * x.tr_mul(y))
}

/// Instrumental-variables fit. The columns named in `endogenous` are
/// instrumented by `instruments` together with the remaining (exogenous)
/// design columns.
pub fn fit_iv(
    design: &Design,
    endogenous: &[String],
    instruments: &Instruments,
    method: IvMethod,
    vcov: &Vcov,
    absorb: &AbsorbOptions,
) -> Result<EstimateReport> {
    let endo_idx = endogenous
        .iter()
        .map(|e| {
            design
                .column(e)
                .ok_or_else(|| Error::formula(format!("endogenous column `{e}` is not in the design")))
        })
        .collect::<Result<Vec<_>>>()?;
    if instruments.labels.len() < endogenous.len() {
        return Err(Error::Identification {
            instruments: instruments.labels.len(),
            endogenous: endogenous.len(),
        });
    }
    let p = prepare(design, Some(&instruments.values), vcov, absorb)?;
    rank_check(&p.x, &design.labels)?;
    let exo_idx: Vec<usize> = (0..design.labels.len()).filter(|j| !endo_idx.contains(j)).collect();
    let excluded = p.z.as_ref().expect("instruments prepared");
    let z = hstack(&select_columns(&p.x, &exo_idx), excluded);
    let z_labels: Vec<String> = exo_idx
        .iter()
        .map(|&j| design.labels[j].clone())
        .chain(instruments.labels.iter().cloned())
        .collect();
    let dep = dependent_columns(&z);
    if !dep.is_empty() {
        return Err(Error::CollinearInstruments {
            columns: dep.iter().map(|&j| z_labels[j].clone()).collect(),
        });
    }
    let ztz_inv = inv_spd(&gram(&z)).ok_or_else(|| Error::CollinearInstruments {
        columns: z_labels.clone(),
    })?;
    let zx = z.tr_mul(&p.x);
    let zy = z.tr_mul(&p.y);
    let xhat = &z * (&ztz_inv * &zx);
    let bread = inv_spd(&gram(&xhat)).ok_or_else(|| Error::RankDeficient {
        columns: endogenous.to_vec(),
    })?;
    let b1 = &bread * xhat.tr_mul(&p.y);
    let u1 = &p.y - &p.x * &b1;
    let (b, u, v, rounds) = match method {
        IvMethod::TwoSls => {
            let v = sandwich(&p, &bread, &xhat, &u1);
            (b1, u1, v, 1)
        }
        IvMethod::Gmm2step => {
            let s = match p.vcov {
                Vcov::Homoskedastic => gram(&z) * (u1.norm_squared() / u1.len() as f64),
                _ => meat(&z, &u1, &p.vcov),
            };
            let w = inv_spd(&s).ok_or_else(|| Error::CollinearInstruments {
                columns: z_labels.clone(),
            })?;
            let a = zx.transpose() * &w;
            let avar = inv_spd(&(&a * &zx)).ok_or_else(|| Error::RankDeficient {
                columns: endogenous.to_vec(),
            })?;
            let b2 = &avar * (&a * &zy);
            let u2 = &p.y - &p.x * &b2;
            let n = u2.len() as f64;
            let k = p.x.ncols();
            let c = match &p.vcov {
                Vcov::Homoskedastic => 1.0,
                Vcov::Robust => n / (n - (k + p.dof_fe) as f64),
                Vcov::Cluster { .. } => {
                    let g = p.clusters.unwrap_or(1) as f64;
                    g / (g - 1.0) * (n - 1.0) / (n - (k + p.dof_fe_cluster) as f64)
                }
            };
            let df = match p.vcov {
                Vcov::Cluster { .. } => p.clusters.unwrap_or(2) - 1,
                _ => (u2.len()).saturating_sub(k + p.dof_fe).max(1),
            };
            (b2, u2, Sandwich { v: avar * c, df }, 2)
        }
    };
    let mut info = base_method(
        match method {
            IvMethod::TwoSls => "2sls",
            IvMethod::Gmm2step => "gmm2step",
        },
        design,
        &p,
    );
    info.endogenous = endogenous.to_vec();
    info.instruments = instruments.labels.clone();
    info.weighting_rounds = rounds;
    let mut report = finish(&design.labels, b, v, u, &p.y, &p, design, info);
    report.first_stage = first_stages(&p, &endo_idx, &exo_idx, &z, &z_labels, design)?;
    Ok(report)
}

fn first_stages(
    p: &Prepared,
    endo_idx: &[usize],
    exo_idx: &[usize],
    z: &DMatrix<f64>,
    z_labels: &[String],
    design: &Design,
) -> Result<Vec<FirstStage>> {
    let n = z.nrows();
    let kz = z.ncols();
    let l = kz - exo_idx.len();
    let exo = select_columns(&p.x, exo_idx);
    let ztz_inv = inv_spd(&gram(z)).expect("instrument gram checked");
    endo_idx
        .iter()
        .map(|&j| {
            let target = p.x.column(j).into_owned();
            let coef = &ztz_inv * z.tr_mul(&target);
            let u = &target - z * &coef;
            let rss_u = u.norm_squared();
            let u_r = match ols_coef(&exo, &DMatrix::from_column_slice(n, 1, target.as_slice())) {
                Some(c) if exo.ncols() > 0 => &target - &exo * c.column(0),
                _ => target.clone(),
            };
            let rss_r = u_r.norm_squared();
            let df_den = n.saturating_sub(kz + p.dof_fe).max(1);
            let f_stat = ((rss_r - rss_u) / l as f64) / (rss_u / df_den as f64);
            let v = sandwich(p, &ztz_inv, z, &u);
            Ok(FirstStage {
                endogenous: design.labels[j].clone(),
                coefficients: coefficient_table(z_labels, &coef, &v.v, v.df),
                f_stat,
                df_num: l,
                df_den,
                partial_r_squared: if rss_r > 0.0 { 1.0 - rss_u / rss_r } else { f64::NAN },
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn design(y: Vec<f64>, cols: Vec<(&str, Vec<f64>)>, fes: Vec<(&str, Vec<usize>)>) -> Design {
        let n = y.len();
        let labels = cols.iter().map(|(l, _)| l.to_string()).collect();
        let x = DMatrix::from_fn(n, cols.len(), |i, j| cols[j].1[i]);
        Design {
            y: DVector::from_vec(y),
            x,
            labels,
            rows: (0..n).collect(),
            fixed_effects: fes
                .into_iter()
                .map(|(name, codes)| {
                    let levels = codes.iter().max().unwrap() + 1;
                    FixedEffect {
                        name: name.into(),
                        codes,
                        levels,
                    }
                })
                .collect(),
            dropped_missing: 0,
            warnings: Vec::new(),
        }
    }

    fn normals(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    #[test]
    fn exact_fit() {
        let x = vec![1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let d = design(y, vec![("x", x)], vec![]);
        let r = fit_ols(&d, &Vcov::Robust, &AbsorbOptions::default()).unwrap();
        assert!((r.coefficients[0].estimate - 2.0).abs() < 1e-12);
        assert!(r.residuals.iter().all(|u| u.abs() < 1e-12));
    }

    #[test]
    fn noisy_slope_near_one() {
        let x = normals(10_000, 1);
        let e = normals(10_000, 2);
        let y: Vec<f64> = x.iter().zip(&e).map(|(a, b)| a + b).collect();
        let d = design(y, vec![("x", x)], vec![]);
        let b = fit_ols(&d, &Vcov::Robust, &AbsorbOptions::default()).unwrap().coefficients[0].estimate;
        assert!((0.97..=1.03).contains(&b), "{b}");
    }

    #[test]
    fn intercept_only_is_mean() {
        let y = vec![1.0, 5.0, 6.0];
        let d = design(y, vec![("const", vec![1.0; 3])], vec![]);
        let r = fit_ols(&d, &Vcov::Homoskedastic, &AbsorbOptions::default()).unwrap();
        assert!((r.coefficients[0].estimate - 4.0).abs() < 1e-12);
    }

    #[test]
    fn rank_deficiency_names_columns() {
        let a = vec![1.0, 2.0, 3.0, 5.0];
        let b: Vec<f64> = a.iter().map(|v| 3.0 * v).collect();
        let d = design(vec![1.0, 0.0, 2.0, 1.0], vec![("a", a), ("b", b)], vec![]);
        match fit_ols(&d, &Vcov::Robust, &AbsorbOptions::default()) {
            Err(Error::RankDeficient { columns }) => assert_eq!(columns.len(), 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn frisch_waugh_matches_dummies() {
        let n = 60;
        let x = normals(n, 3);
        let e = normals(n, 4);
        let a: Vec<usize> = (0..n).map(|i| i % 4).collect();
        let b: Vec<usize> = (0..n).map(|i| (i * 7 / 3) % 5).collect();
        let y: Vec<f64> = (0..n)
            .map(|i| 0.7 * x[i] + a[i] as f64 - 0.3 * b[i] as f64 + e[i])
            .collect();
        let absorbed = design(y.clone(), vec![("x", x.clone())], vec![("a", a.clone()), ("b", b.clone())]);
        let r1 = fit_ols(&absorbed, &Vcov::Robust, &AbsorbOptions { tol: 1e-14, max_iter: 100_000 }).unwrap();
        let mut cols = vec![("x", x)];
        let names = ["a1", "a2", "a3", "b1", "b2", "b3", "b4"];
        for lvl in 1..4 {
            cols.push((names[lvl - 1], a.iter().map(|&g| (g == lvl) as u8 as f64).collect()));
        }
        for lvl in 1..5 {
            cols.push((names[2 + lvl], b.iter().map(|&g| (g == lvl) as u8 as f64).collect()));
        }
        cols.push(("const", vec![1.0; n]));
        let r2 = fit_ols(&design(y, cols, vec![]), &Vcov::Robust, &AbsorbOptions::default()).unwrap();
        assert!((r1.coefficients[0].estimate - r2.coefficients[0].estimate).abs() < 1e-8);
        for (u1, u2) in r1.residuals.iter().zip(&r2.residuals) {
            assert!((u1 - u2).abs() < 1e-8);
        }
        assert!((r1.coefficients[0].std_error - r2.coefficients[0].std_error).abs() < 1e-8);
    }

    #[test]
    fn ols_residuals_orthogonal() {
        let x1 = normals(200, 5);
        let x2 = normals(200, 6);
        let y: Vec<f64> = normals(200, 7).iter().zip(&x1).map(|(e, a)| e + a).collect();
        let d = design(y, vec![("const", vec![1.0; 200]), ("a", x1), ("b", x2)], vec![]);
        let r = fit_ols(&d, &Vcov::Robust, &AbsorbOptions::default()).unwrap();
        let u = DVector::from_vec(r.residuals.clone());
        assert!((d.x.tr_mul(&u)).amax() < 1e-8);
    }

    #[test]
    fn iv_with_self_instruments_is_ols() {
        let x = normals(100, 8);
        let y: Vec<f64> = normals(100, 9).iter().zip(&x).map(|(e, a)| e + 2.0 * a).collect();
        let d = design(y, vec![("const", vec![1.0; 100]), ("x", x.clone())], vec![]);
        let ols = fit_ols(&d, &Vcov::Robust, &AbsorbOptions::default()).unwrap();
        let inst = Instruments {
            labels: vec!["z".into()],
            values: DMatrix::from_column_slice(100, 1, &x),
        };
        let iv = fit_iv(&d, &["x".into()], &inst, IvMethod::TwoSls, &Vcov::Robust, &AbsorbOptions::default()).unwrap();
        for (a, b) in ols.estimates().iter().zip(iv.estimates()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn just_identified_closed_form_and_orthogonality() {
        let n = 300;
        let z = normals(n, 10);
        let v = normals(n, 11);
        let e = normals(n, 12);
        let x: Vec<f64> = (0..n).map(|i| z[i] + v[i] + 0.5 * e[i]).collect();
        let y: Vec<f64> = (0..n).map(|i| 1.0 - x[i] + e[i]).collect();
        let d = design(y.clone(), vec![("const", vec![1.0; n]), ("x", x.clone())], vec![]);
        let inst = Instruments {
            labels: vec!["z".into()],
            values: DMatrix::from_column_slice(n, 1, &z),
        };
        for method in [IvMethod::TwoSls, IvMethod::Gmm2step] {
            let iv = fit_iv(&d, &["x".into()], &inst, method, &Vcov::Robust, &AbsorbOptions::default()).unwrap();
            let zm = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { z[i] });
            let closed = (zm.tr_mul(&d.x)).try_inverse().unwrap() * zm.tr_mul(&d.y);
            for (a, b) in iv.estimates().iter().zip(closed.iter()) {
                assert!((a - b).abs() < 1e-10);
            }
            let u = DVector::from_vec(iv.residuals.clone());
            assert!((zm.tr_mul(&u) / n as f64).amax() < 1e-8);
        }
    }

    #[test]
    fn under_identified_and_missing_instruments() {
        let x = normals(20, 13);
        let d = design(normals(20, 14), vec![("x", x.clone()), ("w", normals(20, 15))], vec![]);
        let one = Instruments {
            labels: vec!["z".into()],
            values: DMatrix::from_column_slice(20, 1, &normals(20, 16)),
        };
        let err = fit_iv(&d, &["x".into(), "w".into()], &one, IvMethod::TwoSls, &Vcov::Robust, &AbsorbOptions::default());
        assert!(matches!(err, Err(Error::Identification { instruments: 1, endogenous: 2 })));
        let mut zv = normals(20, 17);
        zv[3] = f64::NAN;
        zv[9] = f64::NAN;
        let inst = Instruments {
            labels: vec!["z".into()],
            values: DMatrix::from_column_slice(20, 1, &zv),
        };
        let r = fit_iv(&d, &["x".into()], &inst, IvMethod::TwoSls, &Vcov::Robust, &AbsorbOptions::default()).unwrap();
        assert_eq!(r.method.dropped_missing, 2);
        assert_eq!(r.fit.nobs, 18);
    }

    #[test]
    fn collinear_instruments_named() {
        let x = normals(30, 18);
        let z1 = normals(30, 19);
        let z2: Vec<f64> = z1.iter().map(|v| -2.0 * v).collect();
        let d = design(normals(30, 20), vec![("x", x)], vec![]);
        let inst = Instruments {
            labels: vec!["z1".into(), "z2".into()],
            values: DMatrix::from_fn(30, 2, |i, j| if j == 0 { z1[i] } else { z2[i] }),
        };
        let err = fit_iv(&d, &["x".into()], &inst, IvMethod::TwoSls, &Vcov::Robust, &AbsorbOptions::default());
        assert!(matches!(err, Err(Error::CollinearInstruments { .. })));
    }

    #[test]
    fn alpha_is_negated_price_coefficient_and_sigma_flagged() {
        let p = normals(50, 21);
        let s = normals(50, 22);
        let y: Vec<f64> = (0..50).map(|i| -0.8 * p[i] + 1.3 * s[i]).collect();
        let d = design(y, vec![("price", p), (NEST_TERM, s)], vec![]);
        let r = fit_ols(&d, &Vcov::Robust, &AbsorbOptions::default()).unwrap();
        assert!((r.alpha.unwrap() - 0.8).abs() < 1e-10);
        assert_eq!(r.alpha.unwrap(), -r.coefficient(PRICE).unwrap().estimate);
        assert!(r.sigma_flag.is_some());
    }

    #[test]
    fn cluster_correction_factor() {
        let n = 40;
        let x = normals(n, 23);
        let y = normals(n, 24);
        let codes: Vec<usize> = (0..n).map(|i| i / 4).collect();
        let d = design(y, vec![("x", x.clone())], vec![]);
        let vc = Vcov::Cluster { name: "g".into(), codes: codes.clone() };
        let r = fit_ols(&d, &vc, &AbsorbOptions::default()).unwrap();
        let b = r.coefficients[0].estimate;
        let xtx: f64 = x.iter().map(|v| v * v).sum();
        let mut sums = [0.0; 10];
        for i in 0..n {
            sums[codes[i]] += x[i] * (d.y[i] - b * x[i]);
        }
        let meat: f64 = sums.iter().map(|s| s * s).sum();
        let c = 10.0 / 9.0 * 39.0 / 39.0;
        let expected = (meat / (xtx * xtx) * c).sqrt();
        assert!((r.coefficients[0].std_error - expected).abs() < 1e-12);
    }
}
