use serde::{Deserialize, Serialize};

use super::{ChoiceModel, ChoiceModelConfig};
use crate::error::{Error, Result};
use crate::estimate::EstimateReport;
use crate::panel::Cell;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElasticityScope {
    #[default]
    Own,
    Aggregate,
}

/// The covariate whose elasticity is wanted, aligned with the observations
/// indexed by the cells.
#[derive(Clone, Debug, PartialEq)]
pub struct ElasticityTarget {
    pub name: String,
    pub x: Vec<f64>,
    /// Marginal mean utility of `x` per observation (interaction terms
    /// included).
    pub slope: Vec<f64>,
    /// Index of `x` among the random-coefficient columns, if it has one.
    pub rc_dim: Option<usize>,
}

impl ElasticityTarget {
    /// Slope of `name` from a linear fit: its own coefficient plus every
    /// `name:other` / `other:name` interaction times `other`.
    pub fn from_report(
        report: &EstimateReport,
        name: &str,
        x: Vec<f64>,
        column: impl Fn(&str) -> Result<Vec<f64>>,
    ) -> Result<Self> {
        let mut found = false;
        let mut slope = vec![0.0; x.len()];
        for c in &report.coefficients {
            if c.label == name {
                found = true;
                slope.iter_mut().for_each(|s| *s += c.estimate);
            } else if let Some((a, b)) = c.label.split_once(':') {
                let other = if a == name {
                    b
                } else if b == name {
                    a
                } else {
                    continue;
                };
                found = true;
                let v = column(other)?;
                for (s, o) in slope.iter_mut().zip(v) {
                    *s += c.estimate * o;
                }
            }
        }
        if !found {
            return Err(Error::formula(format!("elasticity target `{name}` has no fitted coefficient")));
        }
        Ok(Self {
            name: name.into(),
            x,
            slope,
            rc_dim: None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElasticityTable {
    pub target: String,
    pub obs: Vec<usize>,
    pub x: Vec<f64>,
    pub share: Vec<f64>,
    pub elasticity: Vec<f64>,
}

/// Averages over recommended (`x > 0`) and all alternatives, unweighted and
/// share-weighted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElasticitySummary {
    pub target: String,
    pub recommended_mean: f64,
    pub recommended_share_weighted: f64,
    pub all_mean: f64,
    pub all_share_weighted: f64,
    pub n_recommended: usize,
    pub n_all: usize,
}

fn within_nest_shares(model: &ChoiceModel, rows: &[usize], s: &[f64]) -> Vec<f64> {
    rows.iter()
        .enumerate()
        .map(|(k, &r)| {
            let total: f64 = rows
                .iter()
                .enumerate()
                .filter(|(_, &q)| model.nests[q] == model.nests[r])
                .map(|(m, _)| s[m])
                .sum();
            s[k] / total
        })
        .collect()
}

fn cell_elasticities(model: &ChoiceModel, rows: &[usize], delta: &[f64], target: &ElasticityTarget) -> Option<(Vec<f64>, Vec<f64>)> {
    let (s, _) = model.cell_shares(rows, delta)?;
    let out = match &model.config {
        ChoiceModelConfig::Logit => rows
            .iter()
            .enumerate()
            .map(|(k, &r)| target.slope[r] * target.x[r] * (1.0 - s[k]))
            .collect(),
        ChoiceModelConfig::NestedLogit { sigma } => {
            let within = within_nest_shares(model, rows, &s);
            let l = 1.0 - sigma;
            rows.iter()
                .enumerate()
                .map(|(k, &r)| target.slope[r] * target.x[r] * (1.0 / l - sigma / l * within[k] - s[k]))
                .collect()
        }
        ChoiceModelConfig::RandomCoefficients(rc) => {
            let probs = model.cell_draw_shares(rows, delta)?;
            let draws = model.draws.as_ref()?;
            let j = rows.len();
            let mut deriv = vec![0.0; j];
            for i in 0..draws.count {
                let shock = target.rc_dim.map_or(0.0, |d| rc.sigmas[d] * draws.row(i)[d]);
                for (k, &r) in rows.iter().enumerate() {
                    let p = probs[i * j + k];
                    deriv[k] += (target.slope[r] + shock) * p * (1.0 - p);
                }
            }
            rows.iter()
                .enumerate()
                .map(|(k, &r)| deriv[k] / draws.count as f64 * target.x[r] / s[k])
                .collect()
        }
    };
    Some((out, s))
}

/// Own elasticities of demand with respect to `target.x` for every
/// observation in `cells`.
pub fn own_elasticities(model: &ChoiceModel, cells: &[Cell], delta: &[f64], target: &ElasticityTarget) -> Result<ElasticityTable> {
    let mut table = ElasticityTable {
        target: target.name.clone(),
        obs: Vec::new(),
        x: Vec::new(),
        share: Vec::new(),
        elasticity: Vec::new(),
    };
    for cell in cells {
        let d: Vec<f64> = cell.rows.iter().map(|&r| delta[r]).collect();
        let (e, s) = cell_elasticities(model, &cell.rows, &d, target).ok_or_else(|| Error::NonFinite {
            market: cell.market.clone(),
            period: cell.period,
        })?;
        for (k, &r) in cell.rows.iter().enumerate() {
            table.obs.push(r);
            table.x.push(target.x[r]);
            table.share.push(s[k]);
            table.elasticity.push(e[k]);
        }
    }
    Ok(table)
}

pub fn aggregate_elasticities(table: &ElasticityTable) -> ElasticitySummary {
    let avg = |pick: &dyn Fn(usize) -> bool| {
        let idx: Vec<usize> = (0..table.obs.len()).filter(|&i| pick(i)).collect();
        let n = idx.len();
        let mean = idx.iter().map(|&i| table.elasticity[i]).sum::<f64>() / n as f64;
        let wsum: f64 = idx.iter().map(|&i| table.share[i]).sum();
        let weighted = idx.iter().map(|&i| table.share[i] * table.elasticity[i]).sum::<f64>() / wsum;
        (mean, weighted, n)
    };
    let (rm, rw, rn) = avg(&|i| table.x[i] > 0.0);
    let (am, aw, an) = avg(&|_| true);
    ElasticitySummary {
        target: table.target.clone(),
        recommended_mean: rm,
        recommended_share_weighted: rw,
        all_mean: am,
        all_share_weighted: aw,
        n_recommended: rn,
        n_all: an,
    }
}

/// Own elasticities plus, for [`ElasticityScope::Aggregate`], the summary.
pub fn elasticities(
    model: &ChoiceModel,
    cells: &[Cell],
    delta: &[f64],
    target: &ElasticityTarget,
    scope: ElasticityScope,
) -> Result<(ElasticityTable, Option<ElasticitySummary>)> {
    let table = own_elasticities(model, cells, delta, target)?;
    let summary = (scope == ElasticityScope::Aggregate).then(|| aggregate_elasticities(&table));
    Ok((table, summary))
}

/// Central finite difference of the forward model: perturbs `x` of row
/// `rows[k]` (and its random-coefficient column) by a relative step.
pub fn finite_difference_elasticity(
    model: &ChoiceModel,
    rows: &[usize],
    delta: &[f64],
    target: &ElasticityTarget,
    k: usize,
) -> Option<f64> {
    let r = rows[k];
    let x = target.x[r];
    let h = 1e-5 * x.abs().max(1.0);
    let share_at = |step: f64| -> Option<f64> {
        let mut m = model.clone();
        if let Some(d) = target.rc_dim {
            m.rc_x[(r, d)] += step;
        }
        let mut d = delta.to_vec();
        d[k] += target.slope[r] * step;
        m.cell_shares(rows, &d).map(|(s, _)| s[k])
    };
    let (s, _) = model.cell_shares(rows, delta)?;
    let up = share_at(h)?;
    let dn = share_at(-h)?;
    Some((up - dn) / (2.0 * h) * x / s[k])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blp::{DrawScheme, RandomCoefficients};
    use nalgebra::DMatrix;

    fn target(x: Vec<f64>, slope: f64, rc_dim: Option<usize>) -> ElasticityTarget {
        let n = x.len();
        ElasticityTarget {
            name: "x".into(),
            x,
            slope: vec![slope; n],
            rc_dim,
        }
    }

    fn cell(n: usize) -> Cell {
        Cell {
            market: "m".into(),
            period: 0,
            rows: (0..n).collect(),
        }
    }

    #[test]
    fn logit_formula_value() {
        // solve for delta giving s = 0.05 for the first alternative
        let s = [0.05, 0.15];
        let s0 = 0.8f64;
        let delta: Vec<f64> = s.iter().map(|v: &f64| v.ln() - s0.ln()).collect();
        let t = target(vec![0.1, 0.3], 1.5, None);
        let table = own_elasticities(&ChoiceModel::logit(), &[cell(2)], &delta, &t).unwrap();
        assert!((table.elasticity[0] - 0.1425).abs() < 1e-12);
    }

    #[test]
    fn nested_zero_sigma_is_logit_exactly() {
        let delta = vec![0.2, -0.4, 1.0];
        let t = target(vec![0.5, 1.0, 2.0], 0.7, None);
        let a = own_elasticities(&ChoiceModel::logit(), &[cell(3)], &delta, &t).unwrap();
        let nested = ChoiceModel::nested(0.0, vec![0, 0, 1]).unwrap();
        let b = own_elasticities(&nested, &[cell(3)], &delta, &t).unwrap();
        assert_eq!(a.elasticity, b.elasticity);
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-6 * a.abs().max(b.abs()).max(1e-12)
    }

    #[test]
    fn analytic_matches_finite_differences() {
        let delta = vec![-1.0, 0.3, -0.2, 0.9];
        let x = vec![0.4, 0.0, 1.2, 0.7];
        let t = target(x.clone(), 1.1, None);
        let nested = ChoiceModel::nested(0.55, vec![0, 1, 0, 1]).unwrap();
        let rc = ChoiceModel::new(
            ChoiceModelConfig::RandomCoefficients(RandomCoefficients {
                sigmas: vec![0.8],
                draws: 50,
                scheme: DrawScheme::Halton,
                seed: 2,
            }),
            Vec::new(),
            DMatrix::from_column_slice(4, 1, &x),
        )
        .unwrap();
        for (model, rc_dim) in [(ChoiceModel::logit(), None), (nested, None), (rc, Some(0))] {
            let t = ElasticityTarget { rc_dim, ..t.clone() };
            let table = own_elasticities(&model, &[cell(4)], &delta, &t).unwrap();
            for k in 0..4 {
                let fd = finite_difference_elasticity(&model, &cell(4).rows, &delta, &t, k).unwrap();
                assert!(close(table.elasticity[k], fd), "{:?} {k}: {} vs {fd}", model.config, table.elasticity[k]);
            }
        }
    }

    #[test]
    fn aggregates_split_recommended() {
        let table = ElasticityTable {
            target: "x".into(),
            obs: vec![0, 1, 2],
            x: vec![1.0, 0.0, 1.0],
            share: vec![0.1, 0.2, 0.3],
            elasticity: vec![0.5, 0.0, 0.7],
        };
        let s = aggregate_elasticities(&table);
        assert!((s.recommended_mean - 0.6).abs() < 1e-12);
        assert!((s.all_mean - 0.4).abs() < 1e-12);
        assert!((s.recommended_share_weighted - (0.05 + 0.21) / 0.4).abs() < 1e-12);
        assert_eq!(s.n_recommended, 2);
    }
}
