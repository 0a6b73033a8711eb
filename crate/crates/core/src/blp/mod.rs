//! Forward choice models (logit, nested logit, random-coefficients logit),
//! share inversion by contraction with SQUAREM acceleration, random
//! coefficients GMM and elasticities.

mod draws;
mod elasticity;
mod gmm;

pub use draws::{halton, DrawScheme, Draws};
pub use elasticity::{
    aggregate_elasticities, elasticities, finite_difference_elasticity, own_elasticities,
    ElasticityScope, ElasticitySummary, ElasticityTable, ElasticityTarget,
};
pub use gmm::{fit_blp, gmm_objective, BlpCheckpoint, BlpFit, BlpOptions, BlpProblem};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::Cell;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomCoefficients {
    /// Standard deviation of the normal taste shock on each random-coefficient
    /// column.
    pub sigmas: Vec<f64>,
    pub draws: usize,
    #[serde(default)]
    pub scheme: DrawScheme,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChoiceModelConfig {
    Logit,
    NestedLogit { sigma: f64 },
    RandomCoefficients(RandomCoefficients),
}

impl ChoiceModelConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            ChoiceModelConfig::Logit => Ok(()),
            ChoiceModelConfig::NestedLogit { sigma } => {
                if (0.0..1.0).contains(sigma) {
                    Ok(())
                } else {
                    Err(Error::config(format!("nest parameter {sigma} outside [0, 1)")))
                }
            }
            ChoiceModelConfig::RandomCoefficients(rc) => {
                if rc.draws < 1 {
                    return Err(Error::config("random coefficients need at least one draw"));
                }
                if rc.sigmas.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
                    return Err(Error::config("random-coefficient sds must be >= 0"));
                }
                Ok(())
            }
        }
    }
}

/// Precomputed `exp(mu_ij - max_j mu_ij)` for one cell.
struct RcCache {
    /// `max_j mu_ij` per draw.
    mu_max: Vec<f64>,
    /// `count x J`, row-major.
    emu: Vec<f64>,
}

/// A forward demand model bound to per-observation nest codes and
/// random-coefficient characteristics.
#[derive(Clone, Debug, PartialEq)]
pub struct ChoiceModel {
    pub config: ChoiceModelConfig,
    /// Nest code per observation (nested logit only).
    pub nests: Vec<usize>,
    /// Random-coefficient characteristics, one row per observation.
    pub rc_x: DMatrix<f64>,
    pub draws: Option<Draws>,
}

impl ChoiceModel {
    pub fn logit() -> Self {
        Self {
            config: ChoiceModelConfig::Logit,
            nests: Vec::new(),
            rc_x: DMatrix::zeros(0, 0),
            draws: None,
        }
    }

    pub fn nested(sigma: f64, nests: Vec<usize>) -> Result<Self> {
        Self::new(ChoiceModelConfig::NestedLogit { sigma }, nests, DMatrix::zeros(0, 0))
    }

    pub fn new(config: ChoiceModelConfig, nests: Vec<usize>, rc_x: DMatrix<f64>) -> Result<Self> {
        config.validate()?;
        let draws = match &config {
            ChoiceModelConfig::RandomCoefficients(rc) => {
                if rc.sigmas.len() != rc_x.ncols() {
                    return Err(Error::config(format!(
                        "{} random-coefficient sds for {} columns",
                        rc.sigmas.len(),
                        rc_x.ncols()
                    )));
                }
                Some(Draws::generate(rc.draws, rc.sigmas.len(), rc.scheme, rc.seed))
            }
            _ => None,
        };
        Ok(Self {
            config,
            nests,
            rc_x,
            draws,
        })
    }

    /// Same model with different random-coefficient sds, reusing the draws.
    pub fn with_sigmas(&self, sigmas: &[f64]) -> Result<Self> {
        let mut out = self.clone();
        match &mut out.config {
            ChoiceModelConfig::RandomCoefficients(rc) => {
                if sigmas.len() != rc.sigmas.len() {
                    return Err(Error::config("sigma length mismatch"));
                }
                rc.sigmas = sigmas.to_vec();
            }
            _ => return Err(Error::config("not a random-coefficients model")),
        }
        out.config.validate()?;
        Ok(out)
    }

    /// Damping of the contraction step; nested logit needs `1 - sigma`.
    fn damping(&self) -> f64 {
        match self.config {
            ChoiceModelConfig::NestedLogit { sigma } => 1.0 - sigma,
            _ => 1.0,
        }
    }

    fn rc_cache(&self, rows: &[usize]) -> Option<RcCache> {
        let ChoiceModelConfig::RandomCoefficients(rc) = &self.config else {
            return None;
        };
        let draws = self.draws.as_ref().expect("draws exist for random coefficients");
        let j = rows.len();
        let mut mu_max = Vec::with_capacity(draws.count);
        let mut emu = Vec::with_capacity(draws.count * j);
        let mut mu = vec![0.0; j];
        for i in 0..draws.count {
            let nu = draws.row(i);
            let mut m = f64::NEG_INFINITY;
            for (slot, &r) in mu.iter_mut().zip(rows) {
                let mut v = 0.0;
                for d in 0..rc.sigmas.len() {
                    v += rc.sigmas[d] * nu[d] * self.rc_x[(r, d)];
                }
                *slot = v;
                m = m.max(v);
            }
            if j == 0 {
                m = 0.0;
            }
            mu_max.push(m);
            emu.extend(mu.iter().map(|v| (v - m).exp()));
        }
        Some(RcCache { mu_max, emu })
    }

    /// Shares of the alternatives in `rows` given their mean utilities;
    /// writes into `out` and returns the outside share, or `None` on a
    /// non-finite result.
    fn cell_shares_cached(
        &self,
        rows: &[usize],
        delta: &[f64],
        cache: Option<&RcCache>,
        out: &mut [f64],
    ) -> Option<f64> {
        let j = rows.len();
        let logit = match self.config {
            ChoiceModelConfig::Logit => true,
            ChoiceModelConfig::NestedLogit { sigma } => sigma == 0.0,
            _ => false,
        };
        let outside = match &self.config {
            _ if logit => {
                let m = delta.iter().cloned().fold(0.0, f64::max);
                let mut denom = (-m).exp();
                for (o, &d) in out.iter_mut().zip(delta) {
                    *o = (d - m).exp();
                    denom += *o;
                }
                out.iter_mut().for_each(|o| *o /= denom);
                (-m).exp() / denom
            }
            ChoiceModelConfig::NestedLogit { sigma } => {
                let lambda = 1.0 - sigma;
                // per nest: max of delta/lambda and sum of exp(delta/lambda - max)
                let mut groups: Vec<(usize, f64, f64)> = Vec::new();
                let mut slot = vec![0usize; j];
                for (k, &r) in rows.iter().enumerate() {
                    let code = self.nests[r];
                    let a = delta[k] / lambda;
                    match groups.iter().position(|g| g.0 == code) {
                        Some(p) => {
                            groups[p].1 = groups[p].1.max(a);
                            slot[k] = p;
                        }
                        None => {
                            slot[k] = groups.len();
                            groups.push((code, a, 0.0));
                        }
                    }
                }
                for k in 0..j {
                    let g = &mut groups[slot[k]];
                    out[k] = (delta[k] / lambda - g.1).exp();
                    g.2 += out[k];
                }
                // inclusive values lambda * ln D_g
                let iv: Vec<f64> = groups.iter().map(|g| lambda * (g.1 + g.2.ln())).collect();
                let m = iv.iter().cloned().fold(0.0, f64::max);
                let denom_scaled = (-m).exp() + iv.iter().map(|v| (v - m).exp()).sum::<f64>();
                let ln_denom = m + denom_scaled.ln();
                for k in 0..j {
                    let g = &groups[slot[k]];
                    out[k] = out[k] / g.2 * (iv[slot[k]] - ln_denom).exp();
                }
                (-ln_denom).exp()
            }
            ChoiceModelConfig::Logit => unreachable!(),
            ChoiceModelConfig::RandomCoefficients(_) => {
                let cache = cache.expect("cache for random coefficients");
                let count = cache.mu_max.len();
                let md = delta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let md = if j == 0 { 0.0 } else { md };
                let ed: Vec<f64> = delta.iter().map(|d| (d - md).exp()).collect();
                out.iter_mut().for_each(|o| *o = 0.0);
                let mut outside = 0.0;
                let w = 1.0 / count as f64;
                let mut num = vec![0.0; j];
                for i in 0..count {
                    let c = md + cache.mu_max[i];
                    let top = c.max(0.0);
                    let scale = (c - top).exp();
                    let out_term = (-top).exp();
                    let emu = &cache.emu[i * j..(i + 1) * j];
                    let mut denom = out_term;
                    for k in 0..j {
                        num[k] = ed[k] * emu[k] * scale;
                        denom += num[k];
                    }
                    for k in 0..j {
                        out[k] += w * num[k] / denom;
                    }
                    outside += w * out_term / denom;
                }
                outside
            }
        };
        (outside.is_finite() && outside > 0.0 && out.iter().all(|s| s.is_finite() && *s > 0.0))
            .then_some(outside)
    }

    /// Shares and outside share for one cell.
    pub fn cell_shares(&self, rows: &[usize], delta: &[f64]) -> Option<(Vec<f64>, f64)> {
        let cache = self.rc_cache(rows);
        let mut out = vec![0.0; rows.len()];
        let s0 = self.cell_shares_cached(rows, delta, cache.as_ref(), &mut out)?;
        Some((out, s0))
    }

    /// Per-draw choice probabilities `count x J` for one cell (random
    /// coefficients only).
    pub fn cell_draw_shares(&self, rows: &[usize], delta: &[f64]) -> Option<Vec<f64>> {
        let cache = self.rc_cache(rows)?;
        let j = rows.len();
        let count = cache.mu_max.len();
        let md = delta.iter().cloned().fold(0.0, f64::max);
        let mut probs = Vec::with_capacity(count * j);
        for i in 0..count {
            let c = md + cache.mu_max[i];
            let top = c.max(0.0);
            let scale = (c - top).exp();
            let emu = &cache.emu[i * j..(i + 1) * j];
            let num: Vec<f64> = (0..j).map(|k| (delta[k] - md).exp() * emu[k] * scale).collect();
            let denom = (-top).exp() + num.iter().sum::<f64>();
            probs.extend(num.iter().map(|n| n / denom));
        }
        Some(probs)
    }
}

/// Predicted shares for every observation covered by `cells`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictedShares {
    /// Indexed like `delta` (by observation).
    pub shares: Vec<f64>,
    /// One per cell.
    pub outside: Vec<f64>,
}

/// Forward model: shares per observation given mean utilities per observation.
pub fn predict_shares(model: &ChoiceModel, cells: &[Cell], delta: &[f64]) -> Result<PredictedShares> {
    let per_cell: Vec<Result<(Vec<f64>, f64)>> = cells
        .par_iter()
        .map(|cell| {
            let d: Vec<f64> = cell.rows.iter().map(|&r| delta[r]).collect();
            model.cell_shares(&cell.rows, &d).ok_or_else(|| Error::NonFinite {
                market: cell.market.clone(),
                period: cell.period,
            })
        })
        .collect();
    let mut shares = vec![f64::NAN; delta.len()];
    let mut outside = Vec::with_capacity(cells.len());
    for (cell, res) in cells.iter().zip(per_cell) {
        let (s, s0) = res?;
        for (&r, v) in cell.rows.iter().zip(s) {
            shares[r] = v;
        }
        outside.push(s0);
    }
    Ok(PredictedShares { shares, outside })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Acceleration {
    None,
    #[default]
    Squarem,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InversionOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub accelerate: Acceleration,
}

impl Default for InversionOptions {
    fn default() -> Self {
        Self {
            tol: 1e-12,
            max_iter: 10_000,
            accelerate: Acceleration::Squarem,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellInversion {
    pub delta: Vec<f64>,
    /// Plain steps or SQUAREM cycles.
    pub iterations: usize,
    pub f_evals: usize,
    pub residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Inversion {
    pub delta: Vec<f64>,
    pub iterations: Vec<usize>,
    pub f_evals: usize,
    pub max_residual: f64,
}

/// One SQUAREM extrapolation: `alpha = -|r| / |v|` (capped at -1) and
/// `delta - 2 alpha r + alpha^2 v`.
pub fn squarem_step(delta: &[f64], r: &[f64], v: &[f64]) -> (f64, Vec<f64>) {
    let nr = r.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let alpha = if nv > 0.0 { (-nr / nv).min(-1.0) } else { -1.0 };
    let next = delta
        .iter()
        .zip(r)
        .zip(v)
        .map(|((d, r), v)| d - 2.0 * alpha * r + alpha * alpha * v)
        .collect();
    (alpha, next)
}

fn sup_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Solves `ln s_obs = ln s(delta)` for one cell. `start` defaults to the
/// plain-logit inversion `ln s - ln s0`.
pub fn invert_cell(
    model: &ChoiceModel,
    rows: &[usize],
    s_obs: &[f64],
    start: Option<&[f64]>,
    opts: &InversionOptions,
) -> std::result::Result<CellInversion, (usize, f64)> {
    let j = rows.len();
    let ln_obs: Vec<f64> = s_obs.iter().map(|s| s.ln()).collect();
    let s0_obs = 1.0 - s_obs.iter().sum::<f64>();
    let mut delta: Vec<f64> = match start {
        Some(s) => s.to_vec(),
        None => ln_obs.iter().map(|l| l - s0_obs.ln()).collect(),
    };
    let cache = model.rc_cache(rows);
    let damp = model.damping();
    let mut pred = vec![0.0; j];
    let mut f_evals = 0usize;
    let mut map = |d: &[f64], f_evals: &mut usize| -> Option<Vec<f64>> {
        *f_evals += 1;
        model.cell_shares_cached(rows, d, cache.as_ref(), &mut pred)?;
        Some(
            (0..j)
                .map(|k| d[k] + damp * (ln_obs[k] - pred[k].ln()))
                .collect(),
        )
    };
    let mut iterations = 0usize;
    let mut last_residual = f64::INFINITY;
    while iterations < opts.max_iter {
        iterations += 1;
        let Some(d1) = map(&delta, &mut f_evals) else {
            return Err((iterations, f64::NAN));
        };
        let res1 = sup_dist(&d1, &delta);
        if res1 < opts.tol {
            return Ok(CellInversion {
                delta: d1,
                iterations,
                f_evals,
                residual: res1,
            });
        }
        if opts.accelerate == Acceleration::None {
            delta = d1;
            last_residual = res1;
            continue;
        }
        let Some(d2) = map(&d1, &mut f_evals) else {
            return Err((iterations, f64::NAN));
        };
        let res2 = sup_dist(&d2, &d1);
        if res2 < opts.tol {
            return Ok(CellInversion {
                delta: d2,
                iterations,
                f_evals,
                residual: res2,
            });
        }
        let r: Vec<f64> = (0..j).map(|k| d1[k] - delta[k]).collect();
        let v: Vec<f64> = (0..j).map(|k| d2[k] - 2.0 * d1[k] + delta[k]).collect();
        let (_, extrapolated) = squarem_step(&delta, &r, &v);
        let stabilized = if extrapolated.iter().all(|x| x.is_finite()) {
            map(&extrapolated, &mut f_evals).map(|d3| {
                let res3 = sup_dist(&d3, &extrapolated);
                (d3, res3)
            })
        } else {
            None
        };
        match stabilized {
            Some((d3, res3)) if res3 < res2 => {
                if res3 < opts.tol {
                    return Ok(CellInversion {
                        delta: d3,
                        iterations,
                        f_evals,
                        residual: res3,
                    });
                }
                delta = d3;
                last_residual = res3;
            }
            _ => {
                delta = d2;
                last_residual = res2;
            }
        }
    }
    Err((iterations, last_residual))
}

/// Inverts observed shares cell by cell. `s_obs` and `start` are indexed by
/// observation like the rows in `cells`.
pub fn invert_shares(
    model: &ChoiceModel,
    cells: &[Cell],
    s_obs: &[f64],
    start: Option<&[f64]>,
    opts: &InversionOptions,
) -> Result<Inversion> {
    let results: Vec<Result<CellInversion>> = cells
        .par_iter()
        .map(|cell| {
            let s: Vec<f64> = cell.rows.iter().map(|&r| s_obs[r]).collect();
            let st: Option<Vec<f64>> = start.map(|d| cell.rows.iter().map(|&r| d[r]).collect());
            let total: f64 = s.iter().sum();
            if s.iter().any(|&x| !(x > 0.0)) || !(total < 1.0) {
                return Err(Error::domain(format!(
                    "observed shares in market {} period {} are not strictly inside the simplex",
                    cell.market, cell.period
                )));
            }
            invert_cell(model, &cell.rows, &s, st.as_deref(), opts).map_err(|(it, res)| {
                if res.is_nan() {
                    Error::NonFinite {
                        market: cell.market.clone(),
                        period: cell.period,
                    }
                } else {
                    Error::NonConvergence {
                        solver: "share inversion",
                        iterations: it,
                        last: res,
                    }
                }
            })
        })
        .collect();
    let mut delta = vec![f64::NAN; s_obs.len()];
    let mut iterations = Vec::with_capacity(cells.len());
    let mut f_evals = 0;
    let mut max_residual: f64 = 0.0;
    for (cell, res) in cells.iter().zip(results) {
        let inv = res?;
        for (&r, d) in cell.rows.iter().zip(&inv.delta) {
            delta[r] = *d;
        }
        iterations.push(inv.iterations);
        f_evals += inv.f_evals;
        max_residual = max_residual.max(inv.residual);
    }
    Ok(Inversion {
        delta,
        iterations,
        f_evals,
        max_residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(rows: Vec<usize>) -> Cell {
        Cell {
            market: "m".into(),
            period: 0,
            rows,
        }
    }

    #[test]
    fn symmetric_logit_thirds() {
        let m = ChoiceModel::logit();
        let (s, s0) = m.cell_shares(&[0, 1], &[0.0, 0.0]).unwrap();
        assert!((s[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((s[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!((s0 - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn nested_with_zero_sigma_is_logit() {
        let delta = [0.3, -1.2, 0.8, -0.1];
        let nested = ChoiceModel::nested(0.0, vec![0, 0, 1, 1]).unwrap();
        let (a, a0) = nested.cell_shares(&[0, 1, 2, 3], &delta).unwrap();
        let (b, b0) = ChoiceModel::logit().cell_shares(&[0, 1, 2, 3], &delta).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((a0 - b0).abs() < 1e-12);
    }

    #[test]
    fn sigma_at_one_is_rejected() {
        assert!(matches!(ChoiceModel::nested(1.0, vec![0]), Err(Error::Config(_))));
    }

    #[test]
    fn extreme_utilities_stay_finite() {
        let m = ChoiceModel::logit();
        let (s, s0) = m.cell_shares(&[0, 1], &[700.0, 650.0]).unwrap();
        assert!(s0 > 0.0 && s0 < 1e-200);
        assert!((s[0] + s[1] + s0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn squarem_step_arithmetic() {
        let (alpha, next) = squarem_step(&[0.0, 0.0], &[0.1, 0.0], &[-0.05, 0.0]);
        assert_eq!(alpha, -2.0);
        assert!((next[0] - 0.2).abs() < 1e-15);
        assert_eq!(next[1], 0.0);
    }

    #[test]
    fn logit_inversion_recovers_truth() {
        let truth = [-1.0, 0.5, -2.5, 0.0, 1.2];
        let m = ChoiceModel::logit();
        let rows: Vec<usize> = (0..5).collect();
        let (s, _) = m.cell_shares(&rows, &truth).unwrap();
        for accelerate in [Acceleration::None, Acceleration::Squarem] {
            let start = vec![0.0; 5];
            let opts = InversionOptions {
                accelerate,
                ..Default::default()
            };
            let inv = invert_shares(&m, &[cell(rows.clone())], &s, Some(&start), &opts).unwrap();
            for (d, t) in inv.delta.iter().zip(&truth) {
                assert!((d - t).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn nested_inversion_recovers_truth() {
        let truth = [-1.0, 0.5, -2.5, 0.0, 1.2, -0.4];
        let m = ChoiceModel::nested(0.6, vec![0, 0, 1, 1, 1, 2]).unwrap();
        let rows: Vec<usize> = (0..6).collect();
        let (s, _) = m.cell_shares(&rows, &truth).unwrap();
        let inv = invert_shares(&m, &[cell(rows)], &s, None, &InversionOptions::default()).unwrap();
        for (d, t) in inv.delta.iter().zip(&truth) {
            assert!((d - t).abs() < 1e-10);
        }
    }

    #[test]
    fn max_iter_exhaustion_reports_residual() {
        let m = ChoiceModel::logit();
        let rows = vec![0, 1];
        let (s, _) = m.cell_shares(&rows, &[2.0, -3.0]).unwrap();
        let opts = InversionOptions {
            max_iter: 1,
            accelerate: Acceleration::None,
            ..Default::default()
        };
        let start = [0.0, 0.0];
        let err = invert_shares(&m, &[cell(rows)], &s, Some(&start), &opts).unwrap_err();
        assert!(matches!(err, Error::NonConvergence { iterations: 1, .. }));
    }
}
