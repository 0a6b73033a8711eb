//! Random-coefficients GMM: simplex search over the taste-shock standard
//! deviations with the linear parameters concentrated out by IV.

use std::collections::BTreeMap;
use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{invert_shares, ChoiceModel, ChoiceModelConfig, DrawScheme, InversionOptions, RandomCoefficients};
use crate::error::{Error, Result};
use crate::estimate::{
    absorb_matrix, fit_iv, AbsorbOptions, Coefficient, EstimateReport, Instruments, IvMethod, Vcov,
};
use crate::linalg::{dependent_columns, gram, hstack, inv_spd, select_columns, select_rows};
use crate::panel::{Cell, Design, MarketPanel, ShareTable};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlpOptions {
    pub draws: usize,
    pub scheme: DrawScheme,
    pub seed: u64,
    /// Starting standard deviations (one per random-coefficient column).
    pub start: Vec<f64>,
    pub initial_step: f64,
    pub max_evals: usize,
    /// Spread of objective values across the simplex at convergence.
    pub objective_tol: f64,
    /// Spread of the simplex vertices at convergence.
    pub parameter_tol: f64,
    pub inversion: InversionOptions,
    pub two_step: bool,
    pub allow_unbalanced: bool,
    pub checkpoint: Option<PathBuf>,
}

impl Default for BlpOptions {
    fn default() -> Self {
        Self {
            draws: 200,
            scheme: DrawScheme::Halton,
            seed: 0,
            start: Vec::new(),
            initial_step: 0.5,
            max_evals: 400,
            objective_tol: 1e-6,
            parameter_tol: 1e-5,
            inversion: InversionOptions::default(),
            two_step: true,
            allow_unbalanced: false,
            checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BlpCheckpoint {
    pub stage: usize,
    pub sigma_iterates: Vec<Vec<f64>>,
    pub objective_trace: Vec<f64>,
    /// Contraction evaluations spent in each objective evaluation.
    pub inner_evaluations: Vec<usize>,
    pub rejected: Vec<(Vec<f64>, String)>,
    pub best_sigma: Vec<f64>,
    pub best_objective: f64,
}

impl BlpCheckpoint {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Everything the outer loop needs, restricted to the estimation sample.
#[derive(Clone, Debug)]
pub struct BlpProblem {
    pub cells: Vec<Cell>,
    /// Alternative id per sample row.
    pub alts: Vec<String>,
    pub shares: Vec<f64>,
    pub design: Design,
    pub endogenous: Vec<String>,
    pub instruments: Instruments,
    pub rc_labels: Vec<String>,
    pub rc_x: DMatrix<f64>,
    pub vcov: Vcov,
    pub absorb: AbsorbOptions,
}

impl BlpProblem {
    /// Builds the problem from a design on the panel. Rows with missing
    /// instruments or random-coefficient columns are dropped.
    pub fn from_panel(
        panel: &MarketPanel,
        shares: &ShareTable,
        design: &Design,
        endogenous: &[String],
        instruments: &Instruments,
        rc_columns: &[String],
        vcov: &Vcov,
    ) -> Result<Self> {
        let rc_all = design.panel_columns(panel, rc_columns)?;
        let n = design.nobs();
        let keep: Vec<bool> = (0..n)
            .map(|i| {
                instruments.values.row(i).iter().all(|v| v.is_finite())
                    && rc_all.row(i).iter().all(|v| v.is_finite())
            })
            .collect();
        let idx: Vec<usize> = (0..n).filter(|&i| keep[i]).collect();
        let design = design.retain(&keep);
        let share_of: BTreeMap<usize, f64> = shares.rows.iter().map(|r| (r.obs, r.share)).collect();
        let obs_shares = design.rows.iter().map(|r| share_of[r]).collect();
        let mut by_cell: BTreeMap<(String, i64), Vec<usize>> = BTreeMap::new();
        for (local, &obs) in design.rows.iter().enumerate() {
            let k = &panel.keys[obs];
            by_cell.entry((k.market.clone(), k.period)).or_default().push(local);
        }
        let cells = by_cell
            .into_iter()
            .map(|((market, period), rows)| Cell { market, period, rows })
            .collect();
        let vcov = match vcov {
            Vcov::Cluster { name, codes } => Vcov::Cluster {
                name: name.clone(),
                codes: crate::panel::factorize(&idx.iter().map(|&i| codes[i]).collect::<Vec<_>>()).0,
            },
            other => other.clone(),
        };
        let alts = design.rows.iter().map(|&r| panel.keys[r].alt.clone()).collect();
        Ok(Self {
            cells,
            alts,
            shares: obs_shares,
            endogenous: endogenous.to_vec(),
            instruments: Instruments {
                labels: instruments.labels.clone(),
                values: select_rows(&instruments.values, &idx),
            },
            rc_labels: rc_columns.to_vec(),
            rc_x: select_rows(&rc_all, &idx),
            design,
            vcov,
            absorb: AbsorbOptions::default(),
        })
    }

    /// The design with `y` replaced by the given mean utilities.
    pub fn design_with_y(&self, delta: &[f64]) -> Design {
        let mut d = self.design.clone();
        d.y = DVector::from_column_slice(delta);
        d
    }

    /// Same set of alternatives in every period of each market.
    pub fn balanced(&self) -> bool {
        let mut sets: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for cell in &self.cells {
            let mut alts: Vec<&str> = cell.rows.iter().map(|&r| self.alts[r].as_str()).collect();
            alts.sort();
            match sets.get(cell.market.as_str()) {
                Some(prev) if *prev != alts => return false,
                Some(_) => {}
                None => {
                    sets.insert(cell.market.as_str(), alts);
                }
            }
        }
        true
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BlpFit {
    pub sigma: Vec<f64>,
    pub sigma_se: Vec<f64>,
    pub rc_labels: Vec<String>,
    /// Linear parameters at the optimum with joint GMM standard errors.
    pub report: EstimateReport,
    pub objective: f64,
    pub converged: bool,
    pub evaluations: usize,
    pub delta: Vec<f64>,
    /// Final GMM weighting matrix.
    pub weight: Vec<Vec<f64>>,
    pub checkpoint: BlpCheckpoint,
}

impl BlpFit {
    pub fn weight_matrix(&self) -> DMatrix<f64> {
        let k = self.weight.len();
        DMatrix::from_fn(k, k, |i, j| self.weight[i][j])
    }

    pub fn sigma_coefficients(&self) -> Vec<Coefficient> {
        self.rc_labels
            .iter()
            .zip(self.sigma.iter().zip(&self.sigma_se))
            .map(|(l, (s, se))| {
                let t = s / se;
                Coefficient {
                    label: format!("sigma:{l}"),
                    estimate: *s,
                    std_error: *se,
                    t_stat: t,
                    p_value: normal_p(t),
                }
            })
            .collect()
    }
}

/// Demeaned linear pieces that do not depend on the random coefficients.
struct Linear {
    x: DMatrix<f64>,
    z: DMatrix<f64>,
}

struct Evaluator<'a> {
    problem: &'a BlpProblem,
    base: ChoiceModel,
    linear: Linear,
    weight: DMatrix<f64>,
    warm: Option<Vec<f64>>,
    inversion: InversionOptions,
    log: BlpCheckpoint,
}

struct Point {
    objective: f64,
    delta: Vec<f64>,
    xi: DVector<f64>,
    beta: DVector<f64>,
}

impl<'a> Evaluator<'a> {
    fn model(&self, sigma: &[f64]) -> Result<ChoiceModel> {
        self.base.with_sigmas(sigma)
    }

    fn delta(&mut self, sigma: &[f64]) -> Result<(Vec<f64>, usize)> {
        let model = self.model(sigma)?;
        let inv = invert_shares(
            &model,
            &self.problem.cells,
            &self.problem.shares,
            self.warm.as_deref(),
            &self.inversion,
        )?;
        Ok((inv.delta, inv.f_evals))
    }

    fn demean(&self, delta: &[f64]) -> Result<DVector<f64>> {
        let mut m = DMatrix::from_column_slice(delta.len(), 1, delta);
        absorb_matrix(
            &mut m,
            &self.problem.design.fixed_effects,
            self.problem.absorb.tol,
            self.problem.absorb.max_iter,
        )?;
        Ok(m.column(0).into_owned())
    }

    fn concentrate(&self, delta: &[f64]) -> Result<Point> {
        let y = self.demean(delta)?;
        let zx = self.linear.z.tr_mul(&self.linear.x);
        let zy = self.linear.z.tr_mul(&y);
        let a = zx.transpose() * &self.weight;
        let lhs = &a * &zx;
        let beta = inv_spd(&lhs)
            .ok_or_else(|| Error::RankDeficient {
                columns: self.problem.design.labels.clone(),
            })?
            * (&a * &zy);
        let xi = &y - &self.linear.x * &beta;
        let g = self.linear.z.tr_mul(&xi);
        let objective = (g.transpose() * &self.weight * &g)[(0, 0)];
        Ok(Point {
            objective,
            delta: delta.to_vec(),
            xi,
            beta,
        })
    }

    fn evaluate(&mut self, sigma: &[f64]) -> f64 {
        let result = self.delta(sigma).and_then(|(d, evals)| Ok((self.concentrate(&d)?, evals)));
        match result {
            Ok((p, evals)) if p.objective.is_finite() => {
                self.warm = Some(p.delta);
                self.log.sigma_iterates.push(sigma.to_vec());
                self.log.objective_trace.push(p.objective);
                self.log.inner_evaluations.push(evals);
                if p.objective < self.log.best_objective || self.log.best_sigma.is_empty() {
                    self.log.best_objective = p.objective;
                    self.log.best_sigma = sigma.to_vec();
                }
                p.objective
            }
            Ok(_) => {
                self.log.rejected.push((sigma.to_vec(), "non-finite objective".into()));
                f64::INFINITY
            }
            Err(e) => {
                self.log.rejected.push((sigma.to_vec(), e.to_string()));
                f64::INFINITY
            }
        }
    }
}

struct SimplexResult {
    best: Vec<f64>,
    value: f64,
    evaluations: usize,
    converged: bool,
}

/// Nelder-Mead on `f(|theta|)`.
fn nelder_mead(
    f: &mut dyn FnMut(&[f64]) -> f64,
    start: &[f64],
    step: f64,
    max_evals: usize,
    ftol: f64,
    xtol: f64,
) -> SimplexResult {
    let d = start.len();
    let abs = |v: &[f64]| v.iter().map(|x| x.abs()).collect::<Vec<f64>>();
    let mut evals = 0;
    let mut call = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        f(&abs(x))
    };
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(d + 1);
    let v0 = call(start, &mut evals);
    simplex.push((start.to_vec(), v0));
    for i in 0..d {
        let mut x = start.to_vec();
        x[i] += if x[i] - step >= 0.0 { -step } else { step };
        let v = call(&x, &mut evals);
        simplex.push((x, v));
    }
    let mut converged = false;
    while evals < max_evals {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let fspread = simplex[d].1 - simplex[0].1;
        let xspread = simplex
            .iter()
            .skip(1)
            .flat_map(|(x, _)| x.iter().zip(&simplex[0].0).map(|(a, b)| (a.abs() - b.abs()).abs()))
            .fold(0.0, f64::max);
        if fspread.is_finite() && fspread < ftol && xspread < xtol {
            converged = true;
            break;
        }
        let centroid: Vec<f64> = (0..d)
            .map(|j| simplex[..d].iter().map(|(x, _)| x[j]).sum::<f64>() / d as f64)
            .collect();
        let along = |t: f64| -> Vec<f64> {
            (0..d)
                .map(|j| centroid[j] + t * (simplex[d].0[j] - centroid[j]))
                .collect()
        };
        let xr = along(-1.0);
        let fr = call(&xr, &mut evals);
        if fr < simplex[0].1 {
            let xe = along(-2.0);
            let fe = call(&xe, &mut evals);
            simplex[d] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[d - 1].1 {
            simplex[d] = (xr, fr);
        } else {
            let (xc, fc) = if fr < simplex[d].1 {
                let xc = along(-0.5);
                let fc = call(&xc, &mut evals);
                (xc, fc)
            } else {
                let xc = along(0.5);
                let fc = call(&xc, &mut evals);
                (xc, fc)
            };
            if fc < simplex[d].1.min(fr) {
                simplex[d] = (xc, fc);
            } else {
                let best = simplex[0].0.clone();
                for item in simplex.iter_mut().skip(1) {
                    let x: Vec<f64> = item.0.iter().zip(&best).map(|(a, b)| b + 0.5 * (a - b)).collect();
                    let v = call(&x, &mut evals);
                    *item = (x, v);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    SimplexResult {
        best: abs(&simplex[0].0),
        value: simplex[0].1,
        evaluations: evals,
        converged,
    }
}

fn moment_cov(z: &DMatrix<f64>, xi: &DVector<f64>, vcov: &Vcov) -> DMatrix<f64> {
    match vcov {
        Vcov::Cluster { codes, .. } => {
            let g = codes.iter().copied().max().map_or(0, |m| m + 1);
            let mut sums = DMatrix::zeros(g, z.ncols());
            for i in 0..z.nrows() {
                for j in 0..z.ncols() {
                    sums[(codes[i], j)] += z[(i, j)] * xi[i];
                }
            }
            gram(&sums)
        }
        Vcov::Homoskedastic => gram(z) * (xi.norm_squared() / xi.len() as f64),
        Vcov::Robust => {
            let w = DMatrix::from_fn(z.nrows(), z.ncols(), |i, j| z[(i, j)] * xi[i]);
            gram(&w)
        }
    }
}

fn evaluator<'a>(problem: &'a BlpProblem, opts: &BlpOptions) -> Result<(Evaluator<'a>, Vec<String>)> {
    let dims = problem.rc_labels.len();
    let endo_idx = problem
        .endogenous
        .iter()
        .map(|e| {
            problem
                .design
                .column(e)
                .ok_or_else(|| Error::formula(format!("endogenous column `{e}` is not in the design")))
        })
        .collect::<Result<Vec<_>>>()?;
    if problem.instruments.labels.len() < endo_idx.len() + dims {
        return Err(Error::Identification {
            instruments: problem.instruments.labels.len(),
            endogenous: endo_idx.len() + dims,
        });
    }
    let kx = problem.design.x.ncols();
    let mut m = hstack(&problem.design.x, &problem.instruments.values);
    absorb_matrix(&mut m, &problem.design.fixed_effects, problem.absorb.tol, problem.absorb.max_iter)?;
    let x = m.columns(0, kx).into_owned();
    let exo: Vec<usize> = (0..kx).filter(|j| !endo_idx.contains(j)).collect();
    let z = hstack(&select_columns(&x, &exo), &m.columns(kx, problem.instruments.labels.len()).into_owned());
    let z_labels: Vec<String> = exo
        .iter()
        .map(|&j| problem.design.labels[j].clone())
        .chain(problem.instruments.labels.iter().cloned())
        .collect();
    let dep = dependent_columns(&z);
    if !dep.is_empty() {
        return Err(Error::CollinearInstruments {
            columns: dep.iter().map(|&j| z_labels[j].clone()).collect(),
        });
    }
    let w1 = inv_spd(&gram(&z)).ok_or_else(|| Error::CollinearInstruments { columns: z_labels.clone() })?;
    let config = ChoiceModelConfig::RandomCoefficients(RandomCoefficients {
        sigmas: vec![0.0; dims],
        draws: opts.draws,
        scheme: opts.scheme,
        seed: opts.seed,
    });
    let base = ChoiceModel::new(config, Vec::new(), problem.rc_x.clone())?;
    let ev = Evaluator {
        problem,
        base,
        linear: Linear { x, z },
        weight: w1,
        warm: None,
        inversion: opts.inversion,
        log: BlpCheckpoint {
            best_objective: f64::INFINITY,
            ..Default::default()
        },
    };
    Ok((ev, z_labels))
}

/// GMM objective at `sigma` under `weight` (default `(Z'Z)^-1`), with the
/// same draws `fit_blp` would use for these options.
pub fn gmm_objective(
    problem: &BlpProblem,
    opts: &BlpOptions,
    sigma: &[f64],
    weight: Option<&DMatrix<f64>>,
) -> Result<f64> {
    let (mut ev, _) = evaluator(problem, opts)?;
    if let Some(w) = weight {
        ev.weight = w.clone();
    }
    let (delta, _) = ev.delta(sigma)?;
    Ok(ev.concentrate(&delta)?.objective)
}

/// Random-coefficients GMM. Returns the best point found even when the
/// budget runs out (with `converged = false`).
pub fn fit_blp(problem: &BlpProblem, opts: &BlpOptions) -> Result<BlpFit> {
    let dims = problem.rc_labels.len();
    if dims == 0 {
        return Err(Error::config("no random-coefficient columns"));
    }
    if !opts.allow_unbalanced && !problem.balanced() {
        return Err(Error::config(
            "random-coefficients GMM needs a balanced panel (set allow_unbalanced to override)",
        ));
    }
    let (mut ev, z_labels) = evaluator(problem, opts)?;
    let kx = problem.design.x.ncols();
    let start = if opts.start.is_empty() { vec![1.0; dims] } else { opts.start.clone() };
    if start.len() != dims {
        return Err(Error::config(format!("{} starting values for {dims} random coefficients", start.len())));
    }
    let checkpoint_path = opts.checkpoint.clone();
    let run_stage = |ev: &mut Evaluator, start: &[f64], stage: usize| -> Result<SimplexResult> {
        ev.log.stage = stage;
        ev.log.best_objective = f64::INFINITY;
        ev.log.best_sigma.clear();
        let res = nelder_mead(
            &mut |s: &[f64]| ev.evaluate(s),
            start,
            opts.initial_step,
            opts.max_evals,
            opts.objective_tol,
            opts.parameter_tol,
        );
        if let Some(path) = &checkpoint_path {
            std::fs::write(path, serde_json::to_string_pretty(&ev.log)?)?;
        }
        Ok(res)
    };
    let mut result = run_stage(&mut ev, &start, 1)?;
    let mut evaluations = result.evaluations;
    if !result.value.is_finite() {
        return Err(Error::NonConvergence {
            solver: "random-coefficients GMM",
            iterations: evaluations,
            last: result.value,
        });
    }
    if opts.two_step {
        ev.warm = None;
        let (d, _) = ev.delta(&result.best)?;
        let p = ev.concentrate(&d)?;
        let s = moment_cov(&ev.linear.z, &p.xi, &problem.vcov);
        ev.weight = inv_spd(&s).ok_or_else(|| Error::CollinearInstruments { columns: z_labels.clone() })?;
        let first_best = result.best.clone();
        result = run_stage(&mut ev, &first_best, 2)?;
        evaluations += result.evaluations;
    }
    let sigma = result.best.clone();
    ev.warm = None;
    let tight = InversionOptions {
        tol: opts.inversion.tol,
        ..opts.inversion
    };
    ev.inversion = tight;
    let (delta, _) = ev.delta(&sigma)?;
    let point = ev.concentrate(&delta)?;

    // joint covariance of (beta, sigma) from numerical delta derivatives
    let n = delta.len();
    let mut jac = DMatrix::zeros(n, dims);
    let h = 1e-4;
    for d in 0..dims {
        let mut up = sigma.clone();
        let mut dn = sigma.clone();
        up[d] += h;
        dn[d] = (dn[d] - h).max(0.0);
        let width = up[d] - dn[d];
        ev.warm = Some(delta.clone());
        let (du, _) = ev.delta(&up)?;
        ev.warm = Some(delta.clone());
        let (dd, _) = ev.delta(&dn)?;
        let diff: Vec<f64> = du.iter().zip(&dd).map(|(a, b)| (a - b) / width).collect();
        let demeaned = ev.demean(&diff)?;
        jac.set_column(d, &demeaned);
    }
    let zmat = &ev.linear.z;
    let dmat = hstack(&(-zmat.tr_mul(&ev.linear.x)), &zmat.tr_mul(&jac));
    let s = moment_cov(zmat, &point.xi, &problem.vcov);
    let nobs = n as f64;
    let k_all = (kx + dims) as f64;
    let dof_fe = if problem.design.fixed_effects.is_empty() {
        0.0
    } else {
        (problem.design.fixed_effects.iter().map(|f| f.levels).sum::<usize>() + 1
            - problem.design.fixed_effects.len()) as f64
    };
    let c = nobs / (nobs - k_all - dof_fe);
    let w = &ev.weight;
    let bread = (dmat.transpose() * w * &dmat).try_inverse();
    let joint = bread.map(|b| &b * (dmat.transpose() * w * &s * w * &dmat) * &b * c);
    let joint = joint.unwrap_or_else(|| DMatrix::from_element(kx + dims, kx + dims, f64::NAN));

    let mut report = fit_iv(
        &problem.design_with_y(&delta),
        &problem.endogenous,
        &problem.instruments,
        if opts.two_step { IvMethod::Gmm2step } else { IvMethod::TwoSls },
        &problem.vcov,
        &problem.absorb,
    )?;
    for (j, coef) in report.coefficients.iter_mut().enumerate() {
        coef.estimate = point.beta[j];
        coef.std_error = joint[(j, j)].max(0.0).sqrt();
        coef.t_stat = coef.estimate / coef.std_error;
        coef.p_value = normal_p(coef.t_stat);
    }
    report.residuals = point.xi.iter().copied().collect();
    report.alpha = problem.design.column(crate::estimate::PRICE).map(|j| -point.beta[j]);
    report.sigma = problem.design.column(crate::panel::NEST_TERM).map(|j| point.beta[j]);
    report.vcov = (0..kx + dims).map(|i| joint.row(i).iter().copied().collect()).collect();
    report.method.estimator = "blp".into();
    report.fit.objective = Some(point.objective);
    let sigma_se = (0..dims).map(|d| joint[(kx + d, kx + d)].max(0.0).sqrt()).collect();
    Ok(BlpFit {
        sigma,
        sigma_se,
        rc_labels: problem.rc_labels.clone(),
        report,
        objective: point.objective,
        converged: result.converged,
        evaluations,
        delta,
        weight: (0..ev.weight.nrows()).map(|i| ev.weight.row(i).iter().copied().collect()).collect(),
        checkpoint: ev.log,
    })
}

fn normal_p(t: f64) -> f64 {
    if !t.is_finite() {
        return f64::NAN;
    }
    statrs::function::erf::erfc(t.abs() / std::f64::consts::SQRT_2)
}
