//! Long-format market panels: ingestion, market shares, design matrices and
//! lagged/standardized covariates.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Integer day index.
pub type Period = i64;

pub const NEST_TERM: &str = "ln_within_share";
pub const TREND_TERM: &str = "trend";
pub const INTERCEPT: &str = "const";

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ObsKey {
    pub market: String,
    pub alt: String,
    pub period: Period,
}

impl ObsKey {
    pub fn new(market: impl Into<String>, alt: impl Into<String>, period: Period) -> Self {
        Self {
            market: market.into(),
            alt: alt.into(),
            period,
        }
    }
}

impl fmt::Display for ObsKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "(market={}, alt={}, period={})",
            self.market, self.alt, self.period
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnRole {
    Characteristic,
    Context,
    Recommendation,
    Derived,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NumericColumn {
    pub role: ColumnRole,
    /// `NaN` marks a missing value.
    pub values: Vec<f64>,
}

/// One user-generated review; the JSONL wire format uses exactly these fields.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Review {
    pub alt_id: String,
    pub period: Period,
    pub text: String,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizePolicy {
    /// Largest value of the size column ever observed in the market.
    #[default]
    MaxActiveUsers,
    Population,
    Households,
}

/// Where the per-market size `M_r` comes from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketSizeSource {
    pub policy: SizePolicy,
    pub column: String,
}

/// Observations in long format, one row per `(market, alternative, period)`.
///
/// Fields are public so callers can derive new columns; [`MarketPanel::validate`]
/// re-checks the invariants and is run by every constructor in this crate.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MarketPanel {
    pub keys: Vec<ObsKey>,
    pub quantity: Vec<f64>,
    pub price: Vec<f64>,
    pub nest: Vec<String>,
    pub category: Vec<String>,
    pub ranking: Vec<Option<f64>>,
    pub columns: BTreeMap<String, NumericColumn>,
    pub market_size: BTreeMap<String, f64>,
    pub size_policy: SizePolicy,
    pub reviews: Vec<Review>,
}

/// A `(market, period)` cell and its rows, sorted by alternative id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Cell {
    pub market: String,
    pub period: Period,
    pub rows: Vec<usize>,
}

/// A single observation, used to assemble panels in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub key: ObsKey,
    pub quantity: f64,
    pub price: f64,
    pub nest: String,
    pub category: Option<String>,
    pub ranking: Option<f64>,
    pub values: BTreeMap<String, f64>,
}

impl MarketPanel {
    /// Builds a panel from observations. Every observation must carry the same
    /// set of named values as declared in `roles`.
    pub fn from_observations(
        roles: &BTreeMap<String, ColumnRole>,
        observations: Vec<Observation>,
        market_size: BTreeMap<String, f64>,
        size_policy: SizePolicy,
    ) -> Result<Self> {
        let mut panel = MarketPanel {
            market_size,
            size_policy,
            ..Default::default()
        };
        for (name, role) in roles {
            panel.columns.insert(
                name.clone(),
                NumericColumn {
                    role: *role,
                    values: Vec::with_capacity(observations.len()),
                },
            );
        }
        for obs in observations {
            for (name, col) in panel.columns.iter_mut() {
                let v = obs.values.get(name).copied().ok_or_else(|| Error::InvalidObservation {
                    key: obs.key.clone(),
                    reason: format!("missing value for column `{name}`"),
                })?;
                col.values.push(v);
            }
            panel.category.push(obs.category.unwrap_or_else(|| obs.nest.clone()));
            panel.keys.push(obs.key);
            panel.quantity.push(obs.quantity);
            panel.price.push(obs.price);
            panel.nest.push(obs.nest);
            panel.ranking.push(obs.ranking);
        }
        panel.validate()?;
        Ok(panel)
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Checks all panel invariants.
    pub fn validate(&self) -> Result<()> {
        let n = self.keys.len();
        let lens = [
            self.quantity.len(),
            self.price.len(),
            self.nest.len(),
            self.category.len(),
            self.ranking.len(),
        ];
        if lens.iter().any(|&l| l != n) || self.columns.values().any(|c| c.values.len() != n) {
            return Err(Error::Misalignment("panel columns have unequal lengths".into()));
        }
        let mut seen = BTreeSet::new();
        for key in &self.keys {
            if !seen.insert(key) {
                return Err(Error::DuplicateKey(key.clone()));
            }
        }
        for i in 0..n {
            let key = &self.keys[i];
            let bad = |reason: String| Error::InvalidObservation {
                key: key.clone(),
                reason,
            };
            if !(self.quantity[i].is_finite() && self.quantity[i] >= 0.0) {
                return Err(bad(format!("quantity {} is negative or non-finite", self.quantity[i])));
            }
            if !self.price[i].is_finite() {
                return Err(bad("price is non-finite".into()));
            }
            if let Some(r) = self.ranking[i] {
                if !(r.is_finite() && r >= 0.0) {
                    return Err(bad(format!("ranking {r} is negative or non-finite")));
                }
            }
            for (name, col) in &self.columns {
                if col.role == ColumnRole::Recommendation {
                    let v = col.values[i];
                    if !(0.0..=1.0).contains(&v) {
                        return Err(bad(format!("recommendation `{name}` = {v} outside [0, 1]")));
                    }
                }
            }
        }
        let mut nest_of: HashMap<&str, &str> = HashMap::new();
        for (key, nest) in self.keys.iter().zip(&self.nest) {
            if let Some(prev) = nest_of.insert(&key.alt, nest) {
                if prev != nest {
                    return Err(Error::NestConflict {
                        alt: key.alt.clone(),
                        first: prev.to_string(),
                        second: nest.clone(),
                    });
                }
            }
        }
        for cell in self.cells() {
            let size = match self.market_size.get(&cell.market) {
                Some(&m) if m.is_finite() && m > 0.0 => m,
                _ => {
                    return Err(Error::config(format!(
                        "market {} has no positive market size",
                        cell.market
                    )))
                }
            };
            let total: f64 = cell.rows.iter().map(|&i| self.quantity[i]).sum();
            if total > size {
                return Err(Error::Consistency {
                    market: cell.market,
                    period: cell.period,
                    total,
                    size,
                });
            }
        }
        Ok(())
    }

    /// `(market, period)` cells in lexicographic order.
    pub fn cells(&self) -> Vec<Cell> {
        let mut map: BTreeMap<(&str, Period), Vec<usize>> = BTreeMap::new();
        for (i, key) in self.keys.iter().enumerate() {
            map.entry((key.market.as_str(), key.period)).or_default().push(i);
        }
        map.into_iter()
            .map(|((market, period), mut rows)| {
                rows.sort_by(|&a, &b| self.keys[a].alt.cmp(&self.keys[b].alt));
                Cell {
                    market: market.to_string(),
                    period,
                    rows,
                }
            })
            .collect()
    }

    pub fn periods(&self) -> Vec<Period> {
        let set: BTreeSet<Period> = self.keys.iter().map(|k| k.period).collect();
        set.into_iter().collect()
    }

    pub fn recommendation_columns(&self) -> Vec<String> {
        self.columns
            .iter()
            .filter(|(_, c)| c.role == ColumnRole::Recommendation)
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// Numeric column by name; `NaN` marks missing values.
    pub fn numeric(&self, name: &str) -> Result<Vec<f64>> {
        match name {
            "price" => Ok(self.price.clone()),
            "quantity" => Ok(self.quantity.clone()),
            "ranking" => Ok(self.ranking.iter().map(|r| r.unwrap_or(f64::NAN)).collect()),
            "period" | TREND_TERM => Ok(self.keys.iter().map(|k| k.period as f64).collect()),
            _ => self
                .columns
                .get(name)
                .map(|c| c.values.clone())
                .ok_or_else(|| Error::MissingColumn {
                    column: name.to_string(),
                }),
        }
    }

    /// Categorical key by name. `a*b` joins several keys into one.
    pub fn categorical(&self, name: &str) -> Result<Vec<String>> {
        let parts: Vec<&str> = name.split('*').map(str::trim).collect();
        if parts.len() > 1 {
            let cols = parts
                .iter()
                .map(|p| self.categorical(p))
                .collect::<Result<Vec<_>>>()?;
            return Ok((0..self.len())
                .map(|i| {
                    cols.iter()
                        .map(|c| c[i].as_str())
                        .collect::<Vec<_>>()
                        .join("\u{1f}")
                })
                .collect());
        }
        match name {
            "market" => Ok(self.keys.iter().map(|k| k.market.clone()).collect()),
            "alt" => Ok(self.keys.iter().map(|k| k.alt.clone()).collect()),
            "period" => Ok(self.keys.iter().map(|k| k.period.to_string()).collect()),
            "nest" => Ok(self.nest.clone()),
            "category" => Ok(self.category.clone()),
            _ => Err(Error::MissingColumn {
                column: name.to_string(),
            }),
        }
    }

    /// Dense integer codes for a categorical key, in first-appearance order.
    pub fn codes(&self, name: &str) -> Result<(Vec<usize>, usize)> {
        Ok(factorize(&self.categorical(name)?))
    }

    /// Inserts or replaces a numeric column.
    pub fn set_column(&mut self, name: &str, role: ColumnRole, values: Vec<f64>) -> Result<()> {
        if values.len() != self.len() {
            return Err(Error::Misalignment(format!(
                "column `{name}` has {} values for {} observations",
                values.len(),
                self.len()
            )));
        }
        self.columns
            .insert(name.to_string(), NumericColumn { role, values });
        Ok(())
    }

    /// Panel restricted to `rows` (in the given order). Reviews are kept.
    pub fn subset(&self, rows: &[usize]) -> MarketPanel {
        let pick = |v: &Vec<String>| rows.iter().map(|&i| v[i].clone()).collect();
        MarketPanel {
            keys: rows.iter().map(|&i| self.keys[i].clone()).collect(),
            quantity: rows.iter().map(|&i| self.quantity[i]).collect(),
            price: rows.iter().map(|&i| self.price[i]).collect(),
            nest: pick(&self.nest),
            category: pick(&self.category),
            ranking: rows.iter().map(|&i| self.ranking[i]).collect(),
            columns: self
                .columns
                .iter()
                .map(|(n, c)| {
                    (
                        n.clone(),
                        NumericColumn {
                            role: c.role,
                            values: rows.iter().map(|&i| c.values[i]).collect(),
                        },
                    )
                })
                .collect(),
            market_size: self.market_size.clone(),
            size_policy: self.size_policy,
            reviews: self.reviews.clone(),
        }
    }

    /// Schema matching the layout written by [`MarketPanel::write_csv`].
    pub fn csv_schema(&self) -> (PanelSchema, MarketSizeSource) {
        let by_role = |role: ColumnRole| {
            self.columns
                .iter()
                .filter(|(_, c)| c.role == role)
                .map(|(n, _)| n.clone())
                .collect::<Vec<_>>()
        };
        let mut characteristics = by_role(ColumnRole::Characteristic);
        characteristics.extend(by_role(ColumnRole::Derived));
        (
            PanelSchema {
                market: "market".into(),
                alt: "alt".into(),
                period: "period".into(),
                quantity: "quantity".into(),
                price: "price".into(),
                nest: "nest".into(),
                category: Some("category".into()),
                ranking: Some("ranking".into()),
                characteristics,
                context: by_role(ColumnRole::Context),
                recommendations: by_role(ColumnRole::Recommendation),
            },
            MarketSizeSource {
                policy: self.size_policy,
                column: "market_size".into(),
            },
        )
    }

    /// Writes the panel as a long-format CSV readable by [`load_panel`] with
    /// the schema from [`MarketPanel::csv_schema`].
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = [
            "market",
            "alt",
            "period",
            "quantity",
            "price",
            "nest",
            "category",
            "ranking",
            "market_size",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        header.extend(self.columns.keys().cloned());
        w.write_record(&header)?;
        for i in 0..self.len() {
            let k = &self.keys[i];
            let mut rec = vec![
                k.market.clone(),
                k.alt.clone(),
                k.period.to_string(),
                self.quantity[i].to_string(),
                self.price[i].to_string(),
                self.nest[i].clone(),
                self.category[i].clone(),
                self.ranking[i].map(|r| r.to_string()).unwrap_or_default(),
                self.market_size[&k.market].to_string(),
            ];
            rec.extend(self.columns.values().map(|c| fmt_value(c.values[i])));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn fmt_value(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        v.to_string()
    }
}

/// Dense integer codes in first-appearance order.
pub fn factorize<T: std::hash::Hash + Eq + Clone>(values: &[T]) -> (Vec<usize>, usize) {
    let mut map: HashMap<T, usize> = HashMap::new();
    let codes = values
        .iter()
        .map(|v| {
            let next = map.len();
            *map.entry(v.clone()).or_insert(next)
        })
        .collect();
    (codes, map.len())
}

// ---------------------------------------------------------------------------
// Ingestion
// ---------------------------------------------------------------------------

/// Maps logical fields onto CSV header names.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PanelSchema {
    pub market: String,
    pub alt: String,
    pub period: String,
    pub quantity: String,
    pub price: String,
    pub nest: String,
    #[serde(default)]
    pub category: Option<String>,
    #[serde(default)]
    pub ranking: Option<String>,
    #[serde(default)]
    pub characteristics: Vec<String>,
    #[serde(default)]
    pub context: Vec<String>,
    #[serde(default)]
    pub recommendations: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectedRow {
    /// 1-based line number in the file, header being line 1.
    pub line: u64,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub rows_read: usize,
    pub rows_accepted: usize,
    pub rejected: Vec<RejectedRow>,
    pub markets: usize,
    pub periods: usize,
    pub size_policy: SizePolicy,
}

/// Reads a long-format CSV panel.
pub fn load_panel(
    path: impl AsRef<Path>,
    schema: &PanelSchema,
    size: &MarketSizeSource,
) -> Result<(MarketPanel, IngestReport)> {
    let file = std::fs::File::open(path)?;
    read_panel(file, schema, size)
}

pub fn read_panel<R: std::io::Read>(
    reader: R,
    schema: &PanelSchema,
    size: &MarketSizeSource,
) -> Result<(MarketPanel, IngestReport)> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn {
                column: name.to_string(),
            })
    };
    let i_market = find(&schema.market)?;
    let i_alt = find(&schema.alt)?;
    let i_period = find(&schema.period)?;
    let i_q = find(&schema.quantity)?;
    let i_price = find(&schema.price)?;
    let i_nest = find(&schema.nest)?;
    let i_cat = schema.category.as_deref().map(find).transpose()?;
    let i_rank = schema.ranking.as_deref().map(find).transpose()?;
    let i_size = find(&size.column)?;
    let mut numeric: Vec<(String, ColumnRole, usize)> = Vec::new();
    for (names, role) in [
        (&schema.characteristics, ColumnRole::Characteristic),
        (&schema.context, ColumnRole::Context),
        (&schema.recommendations, ColumnRole::Recommendation),
    ] {
        for n in names {
            numeric.push((n.clone(), role, find(n)?));
        }
    }

    let mut roles = BTreeMap::new();
    for (n, r, _) in &numeric {
        roles.insert(n.clone(), *r);
    }
    let mut observations = Vec::new();
    let mut sizes: BTreeMap<String, f64> = BTreeMap::new();
    let mut rejected = Vec::new();
    let mut rows_read = 0;

    for (idx, record) in rdr.records().enumerate() {
        rows_read += 1;
        let line = idx as u64 + 2;
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                rejected.push(RejectedRow {
                    line,
                    reason: format!("malformed record: {e}"),
                });
                continue;
            }
        };
        let parsed = (|| -> std::result::Result<(Observation, f64), String> {
            let get = |i: usize| record.get(i).unwrap_or("");
            let num = |i: usize, what: &str| -> std::result::Result<f64, String> {
                let s = get(i);
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| format!("{what}: cannot parse `{s}` as a finite number"))
            };
            let market = get(i_market).to_string();
            let alt = get(i_alt).to_string();
            if market.is_empty() || alt.is_empty() {
                return Err("empty market or alternative id".into());
            }
            let period: Period = get(i_period)
                .parse()
                .map_err(|_| format!("period: cannot parse `{}` as an integer", get(i_period)))?;
            let quantity = num(i_q, &schema.quantity)?;
            if quantity < 0.0 {
                return Err(format!("negative quantity {quantity}"));
            }
            let price = num(i_price, &schema.price)?;
            let m = num(i_size, &size.column)?;
            if m <= 0.0 {
                return Err(format!("non-positive market size {m}"));
            }
            let nest = get(i_nest).to_string();
            if nest.is_empty() {
                return Err("empty nest id".into());
            }
            let category = i_cat.map(|i| get(i).to_string()).filter(|c| !c.is_empty());
            let ranking = match i_rank {
                Some(i) if !get(i).is_empty() => {
                    let r = num(i, "ranking")?;
                    if r < 0.0 {
                        return Err(format!("negative ranking {r}"));
                    }
                    Some(r)
                }
                _ => None,
            };
            let mut values = BTreeMap::new();
            for (name, role, i) in &numeric {
                let v = num(*i, name)?;
                if *role == ColumnRole::Recommendation && !(0.0..=1.0).contains(&v) {
                    return Err(format!("recommendation `{name}` = {v} outside [0, 1]"));
                }
                values.insert(name.clone(), v);
            }
            Ok((
                Observation {
                    key: ObsKey::new(market, alt, period),
                    quantity,
                    price,
                    nest,
                    category,
                    ranking,
                    values,
                },
                m,
            ))
        })();
        match parsed {
            Ok((obs, m)) => {
                match sizes.get_mut(&obs.key.market) {
                    None => {
                        sizes.insert(obs.key.market.clone(), m);
                    }
                    Some(prev) => match size.policy {
                        SizePolicy::MaxActiveUsers => *prev = prev.max(m),
                        SizePolicy::Population | SizePolicy::Households => {
                            if *prev != m {
                                return Err(Error::MarketSizeConflict {
                                    market: obs.key.market.clone(),
                                    first: *prev,
                                    second: m,
                                });
                            }
                        }
                    },
                }
                observations.push(obs);
            }
            Err(reason) => rejected.push(RejectedRow { line, reason }),
        }
    }
    let rows_accepted = observations.len();
    let panel = MarketPanel::from_observations(&roles, observations, sizes, size.policy)?;
    let report = IngestReport {
        rows_read,
        rows_accepted,
        rejected,
        markets: panel.market_size.len(),
        periods: panel.periods().len(),
        size_policy: size.policy,
    };
    Ok((panel, report))
}

/// Reads reviews from JSONL with fields `{alt_id, period, text}`.
pub fn load_reviews(path: impl AsRef<Path>) -> Result<Vec<Review>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in file.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

pub fn write_reviews<W: Write>(reviews: &[Review], mut writer: W) -> Result<()> {
    for r in reviews {
        serde_json::to_writer(&mut writer, r)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Market shares
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroPolicy {
    /// Zero-quantity observations are excluded and listed.
    #[default]
    Drop,
    /// Zero quantities are replaced by the given value.
    Epsilon(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShareRow {
    /// Index into the panel's observations.
    pub obs: usize,
    pub key: ObsKey,
    pub share: f64,
    pub outside_share: f64,
    pub within_group_share: f64,
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NestCell {
    pub market: String,
    pub nest: String,
    pub period: Period,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShareTable {
    pub rows: Vec<ShareRow>,
    pub dropped: Vec<ObsKey>,
    pub removed_nests: Vec<NestCell>,
    pub zero_policy: ZeroPolicy,
}

impl ShareTable {
    /// Map from panel observation index to share-row index.
    pub fn index(&self, n_obs: usize) -> Vec<Option<usize>> {
        let mut idx = vec![None; n_obs];
        for (r, row) in self.rows.iter().enumerate() {
            idx[row.obs] = Some(r);
        }
        idx
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "market",
            "alt",
            "period",
            "share",
            "outside_share",
            "within_group_share",
            "delta",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.key.market.clone(),
                r.key.alt.clone(),
                r.key.period.to_string(),
                r.share.to_string(),
                r.outside_share.to_string(),
                r.within_group_share.to_string(),
                r.delta.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Market shares `q / M`, the outside share, within-nest shares, and the
/// logit inversion `ln s - ln s0`.
pub fn compute_shares(panel: &MarketPanel, zero_policy: ZeroPolicy) -> Result<ShareTable> {
    if let ZeroPolicy::Epsilon(e) = zero_policy {
        if !(e > 0.0 && e.is_finite()) {
            return Err(Error::config(format!("epsilon must be positive, got {e}")));
        }
    }
    let mut rows = Vec::with_capacity(panel.len());
    let mut dropped = Vec::new();
    let mut removed_nests = Vec::new();
    for cell in panel.cells() {
        let m = panel.market_size[&cell.market];
        let mut kept = Vec::with_capacity(cell.rows.len());
        for &i in &cell.rows {
            let q = panel.quantity[i];
            match zero_policy {
                ZeroPolicy::Drop if q == 0.0 => dropped.push(panel.keys[i].clone()),
                ZeroPolicy::Epsilon(e) if q == 0.0 => kept.push((i, e)),
                _ => kept.push((i, q)),
            }
        }
        if matches!(zero_policy, ZeroPolicy::Drop) {
            let all: BTreeSet<&str> = cell.rows.iter().map(|&i| panel.nest[i].as_str()).collect();
            let live: BTreeSet<&str> = kept.iter().map(|&(i, _)| panel.nest[i].as_str()).collect();
            for nest in all.difference(&live) {
                removed_nests.push(NestCell {
                    market: cell.market.clone(),
                    nest: nest.to_string(),
                    period: cell.period,
                });
            }
        }
        let shares: Vec<f64> = kept.iter().map(|&(_, q)| q / m).collect();
        let inside: f64 = shares.iter().sum();
        let outside = 1.0 - inside;
        if !(outside > 0.0) {
            return Err(Error::OutsideShare {
                market: cell.market.clone(),
                period: cell.period,
                outside,
            });
        }
        let mut nest_total: HashMap<&str, f64> = HashMap::new();
        for (&(i, _), &s) in kept.iter().zip(&shares) {
            *nest_total.entry(panel.nest[i].as_str()).or_default() += s;
        }
        for (&(i, _), &s) in kept.iter().zip(&shares) {
            rows.push(ShareRow {
                obs: i,
                key: panel.keys[i].clone(),
                share: s,
                outside_share: outside,
                within_group_share: s / nest_total[panel.nest[i].as_str()],
                delta: s.ln() - outside.ln(),
            });
        }
    }
    Ok(ShareTable {
        rows,
        dropped,
        removed_nests,
        zero_policy,
    })
}

// ---------------------------------------------------------------------------
// Design matrices
// ---------------------------------------------------------------------------

/// Regression formula for the inverted-share equation.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DesignSpec {
    pub regressors: Vec<String>,
    /// Pairs multiplied elementwise, labelled `a:b`.
    pub interactions: Vec<[String; 2]>,
    /// Categorical keys absorbed as fixed effects (`a*b` for crossed keys).
    pub fixed_effects: Vec<String>,
    pub time_trend: bool,
    pub nest_term: bool,
    /// Defaults to "only when there are no fixed effects".
    pub intercept: Option<bool>,
}

impl DesignSpec {
    pub fn with_intercept(&self) -> bool {
        self.intercept.unwrap_or(self.fixed_effects.is_empty())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FixedEffect {
    pub name: String,
    pub codes: Vec<usize>,
    pub levels: usize,
}

/// `y = delta`, the regressor matrix and the rows it covers.
#[derive(Clone, Debug, PartialEq)]
pub struct Design {
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    pub labels: Vec<String>,
    /// Panel observation index of each design row.
    pub rows: Vec<usize>,
    pub fixed_effects: Vec<FixedEffect>,
    pub dropped_missing: usize,
    pub warnings: Vec<String>,
}

impl Design {
    pub fn column(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn nobs(&self) -> usize {
        self.rows.len()
    }

    /// Integer codes of a categorical key aligned with the design rows.
    pub fn codes(&self, panel: &MarketPanel, key: &str) -> Result<Vec<usize>> {
        let all = panel.categorical(key)?;
        let picked: Vec<String> = self.rows.iter().map(|&i| all[i].clone()).collect();
        Ok(factorize(&picked).0)
    }

    /// Numeric panel columns aligned with the design rows (`NaN` = missing).
    pub fn panel_columns(&self, panel: &MarketPanel, names: &[String]) -> Result<DMatrix<f64>> {
        let cols = names
            .iter()
            .map(|n| panel.numeric(n))
            .collect::<Result<Vec<_>>>()?;
        Ok(DMatrix::from_fn(self.rows.len(), names.len(), |i, j| {
            cols[j][self.rows[i]]
        }))
    }

    /// Keeps only the rows where `keep` is true.
    pub fn retain(&self, keep: &[bool]) -> Design {
        let idx: Vec<usize> = (0..self.nobs()).filter(|&i| keep[i]).collect();
        Design {
            y: crate::linalg::select_entries(&self.y, &idx),
            x: crate::linalg::select_rows(&self.x, &idx),
            labels: self.labels.clone(),
            rows: idx.iter().map(|&i| self.rows[i]).collect(),
            fixed_effects: self
                .fixed_effects
                .iter()
                .map(|fe| {
                    let picked: Vec<usize> = idx.iter().map(|&i| fe.codes[i]).collect();
                    let (codes, levels) = factorize(&picked);
                    FixedEffect {
                        name: fe.name.clone(),
                        codes,
                        levels,
                    }
                })
                .collect(),
            dropped_missing: self.dropped_missing + (self.nobs() - idx.len()),
            warnings: self.warnings.clone(),
        }
    }
}

/// Builds `y = delta` and the regressor matrix in declared order: intercept
/// (if any), regressors, interactions, the nest term, then the time trend.
/// Rows with a missing value in any referenced column are dropped.
pub fn build_design(panel: &MarketPanel, shares: &ShareTable, spec: &DesignSpec) -> Result<Design> {
    let mut labels = Vec::new();
    let mut cols: Vec<Vec<f64>> = Vec::new();
    let fetch = |name: &str| {
        panel.numeric(name).map_err(|_| Error::formula(format!("unknown column `{name}`")))
    };
    if spec.with_intercept() {
        labels.push(INTERCEPT.to_string());
        cols.push(vec![1.0; panel.len()]);
    }
    for r in &spec.regressors {
        labels.push(r.clone());
        cols.push(fetch(r)?);
    }
    for [a, b] in &spec.interactions {
        let va = fetch(a)?;
        let vb = fetch(b)?;
        labels.push(format!("{a}:{b}"));
        cols.push(va.iter().zip(&vb).map(|(x, y)| x * y).collect());
    }
    let mut fe_names = Vec::new();
    for fe in &spec.fixed_effects {
        panel
            .categorical(fe)
            .map_err(|_| Error::formula(format!("unknown fixed-effect key `{fe}`")))?;
        fe_names.push(fe.clone());
    }

    let mut nest_col = vec![f64::NAN; panel.len()];
    let mut y_full = vec![f64::NAN; panel.len()];
    for row in &shares.rows {
        y_full[row.obs] = row.delta;
        nest_col[row.obs] = row.within_group_share.ln();
    }
    if spec.nest_term {
        labels.push(NEST_TERM.to_string());
        cols.push(nest_col);
    }
    if spec.time_trend {
        labels.push(TREND_TERM.to_string());
        cols.push(panel.keys.iter().map(|k| k.period as f64).collect());
    }

    let mut rows = Vec::new();
    let mut dropped_missing = 0;
    for row in &shares.rows {
        let i = row.obs;
        if cols.iter().all(|c| c[i].is_finite()) {
            rows.push(i);
        } else {
            dropped_missing += 1;
        }
    }
    rows.sort_unstable();
    let y = DVector::from_iterator(rows.len(), rows.iter().map(|&i| y_full[i]));
    let x = DMatrix::from_fn(rows.len(), cols.len(), |r, c| cols[c][rows[r]]);
    let fixed_effects = fe_names
        .iter()
        .map(|name| {
            let all = panel.categorical(name)?;
            let picked: Vec<String> = rows.iter().map(|&i| all[i].clone()).collect();
            let (codes, levels) = factorize(&picked);
            Ok(FixedEffect {
                name: name.clone(),
                codes,
                levels,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut warnings = Vec::new();
    if !fixed_effects.is_empty() {
        for (j, label) in labels.iter().enumerate() {
            let col = x.column(j);
            if !col.is_empty() && col.iter().all(|&v| v == col[0]) {
                warnings.push(format!(
                    "column `{label}` is constant and collinear with the absorbed fixed effects"
                ));
            }
        }
    }
    Ok(Design {
        y,
        x,
        labels,
        rows,
        fixed_effects,
        dropped_missing,
        warnings,
    })
}

// ---------------------------------------------------------------------------
// Lagged, standardized covariates
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    /// Period-over-period percentage change, z-scored within (group, period).
    PctChangeThenZscore,
    /// Raw value z-scored within (group, period); group defaults to category.
    ZscoreWithinCategory,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DerivedColumn {
    pub name: String,
    /// Aligned with panel observations; `NaN` = missing.
    pub values: Vec<f64>,
}

pub fn derived_name(var: &str, transform: Transform, lag: usize) -> String {
    match transform {
        Transform::PctChangeThenZscore => format!("lag{lag}_zpct_{var}"),
        Transform::ZscoreWithinCategory => format!("lag{lag}_zcat_{var}"),
    }
}

/// `(x_t - x_{t-1}) / x_{t-1}` per (market, alternative); `NaN` without history
/// or when `x_{t-1} = 0`.
pub fn pct_changes(panel: &MarketPanel, x: &[f64]) -> Vec<f64> {
    let mut at: HashMap<(&str, &str, Period), usize> = HashMap::with_capacity(panel.len());
    for (i, k) in panel.keys.iter().enumerate() {
        at.insert((&k.market, &k.alt, k.period), i);
    }
    panel
        .keys
        .iter()
        .enumerate()
        .map(|(i, k)| match at.get(&(k.market.as_str(), k.alt.as_str(), k.period - 1)) {
            Some(&p) if x[p] != 0.0 && x[p].is_finite() && x[i].is_finite() => (x[i] - x[p]) / x[p],
            _ => f64::NAN,
        })
        .collect()
}

/// Lag `lag` periods of a standardized transform of `var`. The previous
/// period of `t` is `t - 1`; missing history yields `NaN`. A group with zero
/// dispersion standardizes to 0.
pub fn lag_and_standardize(
    panel: &MarketPanel,
    var: &str,
    transform: Transform,
    group: Option<&str>,
    lag: usize,
) -> Result<DerivedColumn> {
    if lag == 0 {
        return Err(Error::config("lag must be at least 1"));
    }
    let x = panel.numeric(var)?;
    let n = panel.len();
    let mut at: HashMap<(&str, &str, Period), usize> = HashMap::with_capacity(n);
    for (i, k) in panel.keys.iter().enumerate() {
        at.insert((&k.market, &k.alt, k.period), i);
    }
    let prev = |i: usize, back: i64| {
        let k = &panel.keys[i];
        at.get(&(k.market.as_str(), k.alt.as_str(), k.period - back)).copied()
    };

    let raw: Vec<f64> = match transform {
        Transform::PctChangeThenZscore => pct_changes(panel, &x),
        Transform::ZscoreWithinCategory => x,
    };

    let group_key = group.unwrap_or(match transform {
        Transform::PctChangeThenZscore => "market",
        Transform::ZscoreWithinCategory => "category",
    });
    let groups = panel.categorical(group_key)?;
    let mut stats: HashMap<(&str, Period), (f64, f64, usize)> = HashMap::new();
    for i in 0..n {
        if raw[i].is_finite() {
            let e = stats
                .entry((groups[i].as_str(), panel.keys[i].period))
                .or_insert((0.0, 0.0, 0));
            e.0 += raw[i];
            e.2 += 1;
        }
    }
    for e in stats.values_mut() {
        e.0 /= e.2 as f64;
    }
    for i in 0..n {
        if raw[i].is_finite() {
            let e = stats
                .get_mut(&(groups[i].as_str(), panel.keys[i].period))
                .expect("group seen");
            e.1 += (raw[i] - e.0).powi(2);
        }
    }
    let z: Vec<f64> = (0..n)
        .map(|i| {
            if !raw[i].is_finite() {
                return f64::NAN;
            }
            let (mean, ss, count) = stats[&(groups[i].as_str(), panel.keys[i].period)];
            let sd = (ss / count as f64).sqrt();
            if sd <= 1e-12 * mean.abs().max(1.0) {
                0.0
            } else {
                (raw[i] - mean) / sd
            }
        })
        .collect();

    let values = (0..n)
        .map(|i| prev(i, lag as i64).map_or(f64::NAN, |p| z[p]))
        .collect();
    Ok(DerivedColumn {
        name: derived_name(var, transform, lag),
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> (PanelSchema, MarketSizeSource) {
        (
            PanelSchema {
                market: "city".into(),
                alt: "venue".into(),
                period: "day".into(),
                quantity: "visits".into(),
                price: "price".into(),
                nest: "nest".into(),
                category: None,
                ranking: None,
                characteristics: vec!["rating".into()],
                context: vec![],
                recommendations: vec!["trending".into()],
            },
            MarketSizeSource {
                policy: SizePolicy::Population,
                column: "pop".into(),
            },
        )
    }

    fn csv_panel() -> String {
        let mut s = String::from("city,venue,day,visits,price,nest,rating,trending,pop\n");
        for m in 0..2 {
            for a in 0..3 {
                for d in 0..4 {
                    s.push_str(&format!(
                        "m{m},v{m}{a},{d},{},2,n{},{},0.5,1000\n",
                        10 + a + d,
                        a % 2,
                        3.5
                    ));
                }
            }
        }
        s
    }

    #[test]
    fn ingests_full_panel() {
        let (schema, size) = schema();
        let (panel, report) = read_panel(csv_panel().as_bytes(), &schema, &size).unwrap();
        assert_eq!(panel.len(), 24);
        assert_eq!(report.rows_accepted, 24);
        assert!(report.rejected.is_empty());
        assert_eq!(report.markets, 2);
        assert_eq!(report.periods, 4);
    }

    #[test]
    fn negative_quantity_row_is_rejected() {
        let (schema, size) = schema();
        let mut data = csv_panel();
        data.push_str("m0,v09,0,-1,2,n0,3,0.5,1000\n");
        let (panel, report) = read_panel(data.as_bytes(), &schema, &size).unwrap();
        assert_eq!(panel.len(), 24);
        assert_eq!(report.rejected.len(), 1);
        assert_eq!(report.rejected[0].line, 26);
        assert!(report.rejected[0].reason.contains("negative quantity"));
    }

    #[test]
    fn missing_column_is_named() {
        let (mut schema, size) = schema();
        schema.characteristics.push("stars".into());
        let err = read_panel(csv_panel().as_bytes(), &schema, &size).unwrap_err();
        assert!(matches!(err, Error::MissingColumn { ref column } if column == "stars"));
    }

    #[test]
    fn duplicate_key_is_reported() {
        let (schema, size) = schema();
        let mut data = csv_panel();
        data.push_str("m0,v00,0,1,2,n0,3,0.5,1000\n");
        let err = read_panel(data.as_bytes(), &schema, &size).unwrap_err();
        assert!(matches!(err, Error::DuplicateKey(ref k) if *k == ObsKey::new("m0", "v00", 0)));
    }

    #[test]
    fn quantity_above_market_size_is_inconsistent() {
        let (schema, size) = schema();
        let data = "city,venue,day,visits,price,nest,rating,trending,pop\n\
                    a,x,1,600,1,n,1,0,1000\n\
                    a,y,1,401,1,n,1,0,1000\n";
        let err = read_panel(data.as_bytes(), &schema, &size).unwrap_err();
        match err {
            Error::Consistency {
                market,
                period,
                total,
                size,
            } => {
                assert_eq!((market.as_str(), period), ("a", 1));
                assert_eq!((total, size), (1001.0, 1000.0));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn max_active_users_takes_market_maximum() {
        let (schema, mut size) = schema();
        size.policy = SizePolicy::MaxActiveUsers;
        let data = "city,venue,day,visits,price,nest,rating,trending,pop\n\
                    a,x,1,6,1,n,1,0,100\n\
                    a,x,2,4,1,n,1,0,250\n";
        let (panel, _) = read_panel(data.as_bytes(), &schema, &size).unwrap();
        assert_eq!(panel.market_size["a"], 250.0);
    }

    fn tiny_panel(q: &[f64], nests: &[&str], m: f64) -> MarketPanel {
        let obs = q
            .iter()
            .enumerate()
            .map(|(j, &q)| Observation {
                key: ObsKey::new("r", format!("j{j}"), 1),
                quantity: q,
                price: 1.0 + j as f64,
                nest: nests[j].to_string(),
                category: None,
                ranking: None,
                values: BTreeMap::new(),
            })
            .collect();
        MarketPanel::from_observations(
            &BTreeMap::new(),
            obs,
            BTreeMap::from([("r".to_string(), m)]),
            SizePolicy::Population,
        )
        .unwrap()
    }

    #[test]
    fn shares_and_within_group_shares() {
        let panel = tiny_panel(&[50.0, 30.0], &["g", "g"], 1000.0);
        let t = compute_shares(&panel, ZeroPolicy::Drop).unwrap();
        assert!((t.rows[0].share - 0.05).abs() < 1e-15);
        assert!((t.rows[1].share - 0.03).abs() < 1e-15);
        assert!((t.rows[0].outside_share - 0.92).abs() < 1e-15);
        assert!((t.rows[0].within_group_share - 0.625).abs() < 1e-12);
        assert!((t.rows[1].within_group_share - 0.375).abs() < 1e-12);
    }

    #[test]
    fn delta_is_log_share_ratio() {
        let panel = tiny_panel(&[200.0, 300.0], &["a", "b"], 1000.0);
        let t = compute_shares(&panel, ZeroPolicy::Drop).unwrap();
        assert!((t.rows[0].outside_share - 0.5).abs() < 1e-15);
        assert!((t.rows[0].delta - (-0.916_290_731_874_155)).abs() < 1e-12);
    }

    #[test]
    fn zero_quantity_drop_and_epsilon() {
        let panel = tiny_panel(&[0.0, 30.0, 0.0], &["a", "b", "b"], 1000.0);
        let t = compute_shares(&panel, ZeroPolicy::Drop).unwrap();
        assert_eq!(t.rows.len(), 1);
        assert_eq!(t.dropped.len(), 2);
        assert_eq!(t.removed_nests.len(), 1);
        assert_eq!(t.removed_nests[0].nest, "a");
        let e = compute_shares(&panel, ZeroPolicy::Epsilon(0.5)).unwrap();
        assert_eq!(e.rows.len(), 3);
        assert!((e.rows[0].share - 0.0005).abs() < 1e-15);
        assert!(e.rows.iter().all(|r| r.delta.is_finite()));
    }

    #[test]
    fn full_market_has_no_outside_share() {
        let panel = tiny_panel(&[500.0, 500.0], &["a", "a"], 1000.0);
        assert!(matches!(
            compute_shares(&panel, ZeroPolicy::Drop),
            Err(Error::OutsideShare { .. })
        ));
    }

    fn design_panel() -> MarketPanel {
        let roles = BTreeMap::from([
            ("rating".to_string(), ColumnRole::Characteristic),
            ("trending".to_string(), ColumnRole::Recommendation),
        ]);
        let obs = (0..3)
            .map(|j| Observation {
                key: ObsKey::new("r", format!("j{j}"), 1),
                quantity: 10.0 * (j + 1) as f64,
                price: 2.0,
                nest: if j < 2 { "a".into() } else { "b".into() },
                category: None,
                ranking: None,
                values: BTreeMap::from([
                    ("rating".to_string(), 3.0 + j as f64),
                    ("trending".to_string(), 0.5),
                ]),
            })
            .collect();
        MarketPanel::from_observations(
            &roles,
            obs,
            BTreeMap::from([("r".to_string(), 1000.0)]),
            SizePolicy::Population,
        )
        .unwrap()
    }

    #[test]
    fn design_columns_follow_declared_order() {
        let panel = design_panel();
        let shares = compute_shares(&panel, ZeroPolicy::Drop).unwrap();
        let spec = DesignSpec {
            regressors: vec!["price".into(), "rating".into()],
            intercept: Some(false),
            ..Default::default()
        };
        let d = build_design(&panel, &shares, &spec).unwrap();
        assert_eq!(d.labels, vec!["price", "rating"]);
        assert_eq!(d.x.ncols(), 2);
        assert_eq!(d.x[(1, 1)], 4.0);
    }

    #[test]
    fn interaction_and_nest_term() {
        let panel = design_panel();
        let shares = compute_shares(&panel, ZeroPolicy::Drop).unwrap();
        let spec = DesignSpec {
            interactions: vec![["trending".into(), "price".into()]],
            nest_term: true,
            intercept: Some(false),
            ..Default::default()
        };
        let d = build_design(&panel, &shares, &spec).unwrap();
        assert_eq!(d.labels, vec!["trending:price", NEST_TERM]);
        assert_eq!(d.x[(0, 0)], 1.0);
        for (r, row) in shares.rows.iter().enumerate() {
            assert_eq!(d.x[(r, 1)], row.within_group_share.ln());
        }
    }

    #[test]
    fn unknown_column_is_a_formula_error() {
        let panel = design_panel();
        let shares = compute_shares(&panel, ZeroPolicy::Drop).unwrap();
        let spec = DesignSpec {
            regressors: vec!["stars".into()],
            ..Default::default()
        };
        assert!(matches!(build_design(&panel, &shares, &spec), Err(Error::Formula(_))));
    }

    #[test]
    fn constant_column_with_fe_warns() {
        let panel = design_panel();
        let shares = compute_shares(&panel, ZeroPolicy::Drop).unwrap();
        let spec = DesignSpec {
            regressors: vec!["price".into(), "rating".into()],
            fixed_effects: vec!["market".into()],
            ..Default::default()
        };
        let d = build_design(&panel, &shares, &spec).unwrap();
        assert_eq!(d.warnings.len(), 1);
        assert!(d.warnings[0].contains("price"));
    }

    fn series_panel(values: &[f64], start: Period) -> MarketPanel {
        let roles = BTreeMap::from([("photos".to_string(), ColumnRole::Characteristic)]);
        let obs = values
            .iter()
            .enumerate()
            .flat_map(|(t, &v)| {
                (0..2).map(move |j| Observation {
                    key: ObsKey::new("r", format!("j{j}"), start + t as Period),
                    quantity: 1.0,
                    price: 1.0,
                    nest: "n".into(),
                    category: None,
                    ranking: None,
                    values: BTreeMap::from([("photos".to_string(), v * (j + 1) as f64 + j as f64)]),
                })
            })
            .collect();
        MarketPanel::from_observations(
            &roles,
            obs,
            BTreeMap::from([("r".to_string(), 100.0)]),
            SizePolicy::Population,
        )
        .unwrap()
    }

    #[test]
    fn pct_change_before_standardizing() {
        let panel = series_panel(&[100.0, 110.0, 130.0], 0);
        let x = panel.numeric("photos").unwrap();
        let pct = pct_changes(&panel, &x);
        let row = panel.keys.iter().position(|k| k.alt == "j0" && k.period == 1).unwrap();
        assert!((pct[row] - 0.10).abs() < 1e-15);
        let first = panel.keys.iter().position(|k| k.alt == "j0" && k.period == 0).unwrap();
        assert!(pct[first].is_nan());
        let col = lag_and_standardize(&panel, "photos", Transform::PctChangeThenZscore, None, 1)
            .unwrap();
        assert_eq!(col.name, "lag1_zpct_photos");
    }

    #[test]
    fn constant_group_standardizes_to_zero() {
        let panel = series_panel(&[5.0, 5.0, 5.0], 0);
        let col = lag_and_standardize(&panel, "photos", Transform::ZscoreWithinCategory, Some("alt"), 1)
            .unwrap();
        let finite: Vec<f64> = col.values.iter().copied().filter(|v| v.is_finite()).collect();
        assert_eq!(finite.len(), 4);
        assert!(finite.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_period_lag_is_missing() {
        let panel = series_panel(&[5.0], 0);
        let col = lag_and_standardize(&panel, "photos", Transform::ZscoreWithinCategory, None, 1)
            .unwrap();
        assert!(col.values.iter().all(|v| v.is_nan()));
    }

    #[test]
    fn lags_are_invariant_to_period_shift() {
        let a = series_panel(&[100.0, 120.0, 90.0, 95.0], 0);
        let b = series_panel(&[100.0, 120.0, 90.0, 95.0], 1000);
        for t in [Transform::PctChangeThenZscore, Transform::ZscoreWithinCategory] {
            let ca = lag_and_standardize(&a, "photos", t, None, 1).unwrap();
            let cb = lag_and_standardize(&b, "photos", t, None, 1).unwrap();
            for (x, y) in ca.values.iter().zip(&cb.values) {
                assert!(x.to_bits() == y.to_bits());
            }
        }
    }
}
