//! Python bindings for `sharelens`.
//!
//! Configuration arguments accept either a dict or a JSON string with the
//! same field names as the Rust structs; omitted arguments use defaults.
//! Reports come back as plain dicts and lists.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

use sharelens::blp::{invert_cell, ChoiceModel, InversionOptions};
use sharelens::embed::{panel_isolation, EmbeddingConfig, IsolationScope};
use sharelens::estimate::{fit_model, rival_instrument, ModelSpec, RivalScope, RivalStat};
use sharelens::panel::{compute_shares, ColumnRole, load_panel, MarketPanel, MarketSizeSource, PanelSchema, ZeroPolicy};
use sharelens::synth::{generate_panel, SimDims, SyntheticTruth};
use sharelens::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Formula(_) | Error::MissingColumn { .. } | Error::Domain(_) => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn from_py<T: DeserializeOwned + Default>(obj: Option<&Bound<'_, PyAny>>) -> PyResult<T> {
    let Some(obj) = obj else {
        return Ok(T::default());
    };
    if obj.is_none() {
        return Ok(T::default());
    }
    let text: String = match obj.extract::<String>() {
        Ok(s) => s,
        Err(_) => obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?,
    };
    parse_json(&text)
}

fn parse_json<T: DeserializeOwned>(text: &str) -> PyResult<T> {
    serde_json::from_str(text).map_err(json_err)
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(json_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn cell_model(n: usize, nests: Option<Vec<usize>>, sigma: f64) -> PyResult<ChoiceModel> {
    match nests {
        None if sigma == 0.0 => Ok(ChoiceModel::logit()),
        None => ChoiceModel::nested(sigma, vec![0; n]).map_err(py_err),
        Some(g) if g.len() == n => ChoiceModel::nested(sigma, g).map_err(py_err),
        Some(g) => Err(PyValueError::new_err(format!("{} nest labels for {n} alternatives", g.len()))),
    }
}

/// Angle between two vectors divided by pi, in `[0, 1]`.
#[pyfunction]
fn angular_distance(u: Vec<f64>, v: Vec<f64>) -> PyResult<f64> {
    sharelens::embed::angular_distance(&u, &v).map_err(py_err)
}

/// Inside shares and the outside share of one market for mean utilities
/// `delta`, optionally nested with integer nest labels and parameter `sigma`.
#[pyfunction]
#[pyo3(signature = (delta, nests=None, sigma=0.0))]
fn predict_shares(delta: Vec<f64>, nests: Option<Vec<usize>>, sigma: f64) -> PyResult<(Vec<f64>, f64)> {
    let model = cell_model(delta.len(), nests, sigma)?;
    let rows: Vec<usize> = (0..delta.len()).collect();
    model
        .cell_shares(&rows, &delta)
        .ok_or_else(|| PyValueError::new_err("shares are not finite for this delta"))
}

/// Mean utilities that reproduce the observed inside shares of one market.
#[pyfunction]
#[pyo3(signature = (shares, nests=None, sigma=0.0, tol=1e-12))]
fn invert_shares(shares: Vec<f64>, nests: Option<Vec<usize>>, sigma: f64, tol: f64) -> PyResult<Vec<f64>> {
    if shares.iter().any(|&s| s <= 0.0) || shares.iter().sum::<f64>() >= 1.0 {
        return Err(PyValueError::new_err("inside shares must be positive and sum below one"));
    }
    let model = cell_model(shares.len(), nests, sigma)?;
    let rows: Vec<usize> = (0..shares.len()).collect();
    let opts = InversionOptions { tol, ..Default::default() };
    invert_cell(&model, &rows, &shares, None, &opts)
        .map(|inv| inv.delta)
        .map_err(|(iters, residual)| {
            PyRuntimeError::new_err(format!("inversion stopped after {iters} iterations with residual {residual:.3e}"))
        })
}

/// Draws a synthetic panel. Returns the panel and a dict with the truth,
/// unobserved quality, mean utilities and true isolation.
#[pyfunction]
#[pyo3(signature = (markets, alternatives, periods, truth=None))]
fn simulate<'py>(
    py: Python<'py>,
    markets: usize,
    alternatives: usize,
    periods: usize,
    truth: Option<&Bound<'py, PyAny>>,
) -> PyResult<(Panel, Bound<'py, PyAny>)> {
    let truth: SyntheticTruth = from_py(truth)?;
    let sim = generate_panel(
        &truth,
        SimDims {
            markets,
            alternatives,
            periods,
        },
    )
    .map_err(py_err)?;
    let info = to_py(py, &sim)?;
    Ok((Panel { inner: sim.panel }, info))
}

/// A long-format market panel.
#[pyclass(module = "sharelens_py", skip_from_py_object)]
#[derive(Clone)]
struct Panel {
    inner: MarketPanel,
}

#[pymethods]
impl Panel {
    /// Reads a CSV panel. Returns the panel and the ingest report.
    #[staticmethod]
    fn read_csv<'py>(
        py: Python<'py>,
        path: PathBuf,
        schema: &Bound<'py, PyAny>,
        market_size: &Bound<'py, PyAny>,
    ) -> PyResult<(Panel, Bound<'py, PyAny>)> {
        let schema: PanelSchema = parse_json(&json_text(schema)?)?;
        let size: MarketSizeSource = parse_json(&json_text(market_size)?)?;
        let (inner, report) = load_panel(path, &schema, &size).map_err(py_err)?;
        Ok((Panel { inner }, to_py(py, &report)?))
    }

    /// Writes the panel as CSV and returns the schema and market-size
    /// settings that read it back.
    fn write_csv<'py>(&self, py: Python<'py>, path: PathBuf) -> PyResult<(Bound<'py, PyAny>, Bound<'py, PyAny>)> {
        let file = std::fs::File::create(&path).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        self.inner.write_csv(file).map_err(py_err)?;
        let (schema, size) = self.inner.csv_schema();
        Ok((to_py(py, &schema)?, to_py(py, &size)?))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// `(market, alternative, period)` for every row.
    fn keys(&self) -> Vec<(String, String, i64)> {
        self.inner
            .keys
            .iter()
            .map(|k| (k.market.clone(), k.alt.clone(), k.period))
            .collect()
    }

    fn column_names(&self) -> Vec<String> {
        let mut names = vec!["quantity".to_string(), "price".to_string()];
        names.extend(self.inner.columns.keys().cloned());
        names
    }

    fn column(&self, name: &str) -> PyResult<Vec<f64>> {
        self.inner.numeric(name).map_err(py_err)
    }

    #[pyo3(signature = (zero_policy=None))]
    fn shares<'py>(&self, py: Python<'py>, zero_policy: Option<&Bound<'py, PyAny>>) -> PyResult<Bound<'py, PyAny>> {
        let policy: ZeroPolicy = from_py(zero_policy)?;
        let table = compute_shares(&self.inner, policy).map_err(py_err)?;
        to_py(py, &table)
    }

    /// Fits a model spec. Returns one report per quantile, or a single
    /// report for the other kinds.
    fn fit<'py>(&self, py: Python<'py>, spec: &Bound<'py, PyAny>) -> PyResult<Bound<'py, PyAny>> {
        let spec: ModelSpec = from_py(Some(spec))?;
        let reports = fit_model(&self.inner, &spec).map_err(py_err)?;
        to_py(py, &reports)
    }

    /// Trains review embeddings and returns a copy of the panel with the
    /// isolation instrument columns attached.
    #[pyo3(signature = (embedding=None, scope=None))]
    fn with_isolation(&self, embedding: Option<&Bound<'_, PyAny>>, scope: Option<&Bound<'_, PyAny>>) -> PyResult<Panel> {
        let config: EmbeddingConfig = from_py(embedding)?;
        config.validate().map_err(py_err)?;
        let scope: IsolationScope = from_py(scope)?;
        let (_, set) = panel_isolation(&self.inner, &config, None, scope).map_err(py_err)?;
        let mut inner = self.inner.clone();
        set.attach(&mut inner).map_err(py_err)?;
        Ok(Panel { inner })
    }

    /// Adds rival-characteristic instruments for each column and returns the
    /// new panel with the names of the added columns.
    #[pyo3(signature = (columns, scope="market", stat="sum"))]
    fn with_rivals(&self, columns: Vec<String>, scope: &str, stat: &str) -> PyResult<(Panel, Vec<String>)> {
        let scope: RivalScope = parse_json(&format!("\"{scope}\""))?;
        let stat: RivalStat = parse_json(&format!("\"{stat}\""))?;
        let mut inner = self.inner.clone();
        let mut names = Vec::new();
        for c in &columns {
            let (name, values) = rival_instrument(&inner, c, scope, stat).map_err(py_err)?;
            inner.set_column(&name, ColumnRole::Derived, values).map_err(py_err)?;
            names.push(name);
        }
        Ok((Panel { inner }, names))
    }

    fn __repr__(&self) -> String {
        format!(
            "Panel(rows={}, markets={}, periods={})",
            self.inner.len(),
            self.inner.market_size.len(),
            self.inner.periods().len()
        )
    }
}

fn json_text(obj: &Bound<'_, PyAny>) -> PyResult<String> {
    match obj.extract::<String>() {
        Ok(s) => Ok(s),
        Err(_) => obj.py().import("json")?.call_method1("dumps", (obj,))?.extract(),
    }
}

#[pymodule]
fn sharelens_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", sharelens::VERSION)?;
    m.add_function(wrap_pyfunction!(angular_distance, m)?)?;
    m.add_function(wrap_pyfunction!(predict_shares, m)?)?;
    m.add_function(wrap_pyfunction!(invert_shares, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_class::<Panel>()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logit_cell_model_round_trips() {
        let model = cell_model(3, None, 0.0).unwrap();
        let delta = [0.2, -0.4, 1.0];
        let (s, s0) = model.cell_shares(&[0, 1, 2], &delta).unwrap();
        assert!((s.iter().sum::<f64>() + s0 - 1.0).abs() < 1e-12);
        let back = invert_cell(&model, &[0, 1, 2], &s, None, &InversionOptions::default()).unwrap();
        for (a, b) in back.delta.iter().zip(delta) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn nest_label_count_is_checked() {
        assert!(cell_model(3, Some(vec![0, 1]), 0.3).is_err());
        assert!(cell_model(3, Some(vec![0, 1, 1]), 0.3).is_ok());
    }
}
