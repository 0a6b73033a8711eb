use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::FixedEffect;

/// What happened while sweeping out the fixed effects.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AbsorbReport {
    pub dimensions: Vec<String>,
    pub levels: Vec<usize>,
    /// Levels with a single observation, per dimension.
    pub singletons: Vec<usize>,
    pub sweeps: usize,
    pub max_group_mean: f64,
    /// Degrees of freedom used up by the absorbed levels.
    pub absorbed_dof: usize,
}

fn group_means(m: &DMatrix<f64>, fe: &FixedEffect, counts: &[f64]) -> DMatrix<f64> {
    let mut sums = DMatrix::zeros(fe.levels, m.ncols());
    for c in 0..m.ncols() {
        let col = m.column(c);
        for (i, &g) in fe.codes.iter().enumerate() {
            sums[(g, c)] += col[i];
        }
    }
    for g in 0..fe.levels {
        for c in 0..m.ncols() {
            sums[(g, c)] /= counts[g];
        }
    }
    sums
}

/// Demeans every column of `m` along all fixed-effect dimensions by
/// alternating projections, in place.
pub fn absorb_matrix(
    m: &mut DMatrix<f64>,
    fixed_effects: &[FixedEffect],
    tol: f64,
    max_iter: usize,
) -> Result<AbsorbReport> {
    let mut report = AbsorbReport {
        dimensions: fixed_effects.iter().map(|f| f.name.clone()).collect(),
        levels: fixed_effects.iter().map(|f| f.levels).collect(),
        ..Default::default()
    };
    if fixed_effects.is_empty() {
        return Ok(report);
    }
    let counts: Vec<Vec<f64>> = fixed_effects
        .iter()
        .map(|fe| {
            let mut c = vec![0.0; fe.levels];
            for &g in &fe.codes {
                c[g] += 1.0;
            }
            c
        })
        .collect();
    report.singletons = counts
        .iter()
        .map(|c| c.iter().filter(|&&n| n == 1.0).count())
        .collect();
    report.absorbed_dof = fixed_effects.iter().map(|f| f.levels).sum::<usize>() + 1
        - fixed_effects.len();
    let max_abs = |means: &DMatrix<f64>| means.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    loop {
        if report.sweeps >= max_iter {
            return Err(Error::AbsorptionNonConvergence {
                iterations: report.sweeps,
                residual: report.max_group_mean,
            });
        }
        report.sweeps += 1;
        for (fe, cnt) in fixed_effects.iter().zip(&counts) {
            let means = group_means(m, fe, cnt);
            for c in 0..m.ncols() {
                for (i, &g) in fe.codes.iter().enumerate() {
                    m[(i, c)] -= means[(g, c)];
                }
            }
        }
        if fixed_effects.len() == 1 {
            report.max_group_mean = max_abs(&group_means(m, &fixed_effects[0], &counts[0]));
            return Ok(report);
        }
        report.max_group_mean = fixed_effects
            .iter()
            .zip(&counts)
            .map(|(fe, cnt)| max_abs(&group_means(m, fe, cnt)))
            .fold(0.0, f64::max);
        if report.max_group_mean < tol {
            return Ok(report);
        }
    }
}

/// Same as [`absorb_matrix`] but for a response vector and a regressor
/// matrix together.
pub fn absorb_fixed_effects(
    y: &nalgebra::DVector<f64>,
    x: &DMatrix<f64>,
    fixed_effects: &[FixedEffect],
    tol: f64,
    max_iter: usize,
) -> Result<(nalgebra::DVector<f64>, DMatrix<f64>, AbsorbReport)> {
    let mut m = crate::linalg::hstack(&DMatrix::from_column_slice(y.len(), 1, y.as_slice()), x);
    let report = absorb_matrix(&mut m, fixed_effects, tol, max_iter)?;
    let y = m.column(0).into_owned();
    let x = m.columns(1, x.ncols()).into_owned();
    Ok((y, x, report))
}
