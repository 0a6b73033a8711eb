use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sharelens::blp::{BlpOptions, ElasticityScope};
use sharelens::diagnostics::{DiagnosticThresholds, PlaceboMode};
use sharelens::embed::{EmbeddingConfig, IsolationScope};
use sharelens::estimate::{ModelSpec, RivalScope, RivalStat};
use sharelens::panel::{MarketSizeSource, PanelSchema, Transform};
use sharelens::synth::{SimDims, SyntheticTruth};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub data: Option<DataConfig>,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub embedding: EmbeddingConfig,
    #[serde(default)]
    pub instruments: InstrumentConfig,
    #[serde(default)]
    pub blp: BlpConfig,
    #[serde(default)]
    pub elasticities: ElasticityConfig,
    #[serde(default)]
    pub diagnostics: DiagnosticThresholds,
    #[serde(default)]
    pub placebo: PlaceboConfig,
    #[serde(default)]
    pub holdout: HoldoutConfig,
    #[serde(default)]
    pub simulate: SimulateConfig,
}

fn default_seed() -> u64 {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub panel: PathBuf,
    #[serde(default)]
    pub reviews: Option<PathBuf>,
    /// Pre-trained word vectors in text format.
    #[serde(default)]
    pub word_vectors: Option<PathBuf>,
    pub schema: PanelSchema,
    pub market_size: MarketSizeSource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RivalColumn {
    pub column: String,
    #[serde(default = "default_rival_scope")]
    pub scope: RivalScope,
    #[serde(default = "default_rival_stat")]
    pub stat: RivalStat,
}

fn default_rival_scope() -> RivalScope {
    RivalScope::Market
}

fn default_rival_stat() -> RivalStat {
    RivalStat::Sum
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LaggedColumn {
    pub column: String,
    pub transform: Transform,
    #[serde(default = "default_lag")]
    pub lag: usize,
    #[serde(default)]
    pub group: Option<String>,
}

fn default_lag() -> usize {
    1
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InstrumentConfig {
    /// Train embeddings and add isolation columns. When unset, isolation is
    /// computed only if the model refers to an isolation column.
    pub isolation: Option<bool>,
    pub scope: IsolationScope,
    pub rivals: Vec<RivalColumn>,
    pub lagged: Vec<LaggedColumn>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlpConfig {
    pub rc_columns: Vec<String>,
    pub options: BlpOptions,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElasticityModel {
    /// Logit or nested logit, following `model.kind`.
    #[default]
    Linear,
    Blp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ElasticityConfig {
    /// Defaults to the panel's first recommendation column, else `price`.
    pub target: Option<String>,
    pub model: ElasticityModel,
    pub scope: ElasticityScope,
}

impl Default for ElasticityConfig {
    fn default() -> Self {
        Self {
            target: None,
            model: ElasticityModel::Linear,
            scope: ElasticityScope::Aggregate,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlaceboConfig {
    pub modes: Vec<PlaceboMode>,
    pub seeds: u64,
    pub columns: Option<Vec<String>>,
}

impl Default for PlaceboConfig {
    fn default() -> Self {
        Self {
            modes: vec![PlaceboMode::ShuffleAlternatives, PlaceboMode::ShufflePeriods],
            seeds: 100,
            columns: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HoldoutConfig {
    pub fraction: f64,
}

impl Default for HoldoutConfig {
    fn default() -> Self {
        Self { fraction: 0.7 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    pub markets: usize,
    pub alternatives: usize,
    pub periods: usize,
    pub truth: SyntheticTruth,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            markets: 5,
            alternatives: 10,
            periods: 10,
            truth: SyntheticTruth::default(),
        }
    }
}

impl SimulateConfig {
    pub fn dims(&self) -> SimDims {
        SimDims {
            markets: self.markets,
            alternatives: self.alternatives,
            periods: self.periods,
        }
    }
}

/// Parses a `key=value` override. The value is read as a TOML value when it
/// parses as one and as a bare string otherwise.
pub fn parse_override(arg: &str) -> Result<(Vec<String>, toml::Value), CliError> {
    let (key, raw) = arg
        .split_once('=')
        .ok_or_else(|| CliError::Validation(format!("override `{arg}` is not of the form key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(|s| s.trim().to_string()).collect();
    if path.iter().any(String::is_empty) {
        return Err(CliError::Validation(format!("override key `{key}` has an empty segment")));
    }
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    Ok((path, value))
}

fn set_path(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<(), CliError> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for (depth, seg) in parents.iter().enumerate() {
        let entry = cur
            .entry(seg.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| {
            CliError::Validation(format!("override key `{}` is not a table", path[..=depth].join(".")))
        })?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

/// Resolves relative data paths against `base`.
fn rebase(config: &mut PipelineConfig, base: &Path) {
    let fix = |p: &mut PathBuf| {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    };
    if let Some(d) = config.data.as_mut() {
        fix(&mut d.panel);
        d.reviews.as_mut().map(fix);
        d.word_vectors.as_mut().map(fix);
    }
    if let Some(p) = config.blp.options.checkpoint.as_mut() {
        fix(p);
    }
}

/// Reads `path`, applies the overrides and validates the result.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<PipelineConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
    let mut table: toml::Table =
        toml::from_str(&text).map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())))?;
    for o in overrides {
        let (key, value) = parse_override(o)?;
        set_path(&mut table, &key, value)?;
    }
    let mut config: PipelineConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Validation(format!("config {}: {}", path.display(), e.message())))?;
    rebase(&mut config, path.parent().unwrap_or(Path::new(".")));
    config.model.validate().map_err(|e| CliError::Validation(format!("model: {e}")))?;
    config
        .embedding
        .validate()
        .map_err(|e| CliError::Validation(format!("embedding: {e}")))?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_parse_typed_values() {
        let (k, v) = parse_override("model.taus=[0.25, 0.5]").unwrap();
        assert_eq!(k, ["model", "taus"]);
        assert_eq!(v.as_array().unwrap().len(), 2);
        assert_eq!(parse_override("model.kind=nested").unwrap().1.as_str(), Some("nested"));
        assert_eq!(parse_override("seed=7").unwrap().1.as_integer(), Some(7));
        assert!(parse_override("seed").is_err());
    }

    #[test]
    fn unknown_keys_are_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "[model]\nnestt = true\n").unwrap();
        let err = load_config(&path, &[]).unwrap_err();
        assert!(err.to_string().contains("nestt"), "{err}");
        std::fs::write(&path, "seed = 3\n").unwrap();
        let err = load_config(&path, &["model.design.regresors=[\"x\"]".into()]).unwrap_err();
        assert!(err.to_string().contains("regresors"), "{err}");
    }

    #[test]
    fn overrides_win_over_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "seed = 3\n[model]\nkind = \"logit\"\n").unwrap();
        let c = load_config(&path, &["model.kind=nested".into(), "holdout.fraction=0.5".into()]).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.model.kind, sharelens::estimate::ModelKind::Nested);
        assert_eq!(c.holdout.fraction, 0.5);
    }
}
