use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::panel::MarketPanel;

/// Which rivals of an alternative enter its instrument.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RivalScope {
    Market,
    Nest,
    Category,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RivalStat {
    Sum,
    Mean,
    Count,
}

impl RivalStat {
    fn tag(self) -> &'static str {
        match self {
            RivalStat::Sum => "sum",
            RivalStat::Mean => "mean",
            RivalStat::Count => "count",
        }
    }
}

impl RivalScope {
    fn tag(self) -> &'static str {
        match self {
            RivalScope::Market => "market",
            RivalScope::Nest => "nest",
            RivalScope::Category => "category",
        }
    }
}

/// Sum, mean or count of `column` over the other alternatives sharing the
/// observation's market, period and (optionally) nest or category. Rows
/// without rivals get `NaN` for the mean. Returns the derived column name
/// and values aligned with the panel rows.
pub fn rival_instrument(
    panel: &MarketPanel,
    column: &str,
    scope: RivalScope,
    stat: RivalStat,
) -> Result<(String, Vec<f64>)> {
    let x = panel.numeric(column)?;
    let group: Vec<&str> = match scope {
        RivalScope::Market => vec![""; panel.len()],
        RivalScope::Nest => panel.nest.iter().map(String::as_str).collect(),
        RivalScope::Category => panel.category.iter().map(String::as_str).collect(),
    };
    let mut totals: HashMap<(&str, i64, &str), (f64, usize)> = HashMap::new();
    for (i, key) in panel.keys.iter().enumerate() {
        if x[i].is_finite() {
            let e = totals.entry((key.market.as_str(), key.period, group[i])).or_default();
            e.0 += x[i];
            e.1 += 1;
        }
    }
    let values = panel
        .keys
        .iter()
        .enumerate()
        .map(|(i, key)| {
            let (sum, count) = totals[&(key.market.as_str(), key.period, group[i])];
            let (sum, count) = if x[i].is_finite() { (sum - x[i], count - 1) } else { (sum, count) };
            match stat {
                RivalStat::Sum => sum,
                RivalStat::Count => count as f64,
                RivalStat::Mean if count > 0 => sum / count as f64,
                RivalStat::Mean => f64::NAN,
            }
        })
        .collect();
    Ok((format!("rival_{}_{}_{}", stat.tag(), column, scope.tag()), values))
}
