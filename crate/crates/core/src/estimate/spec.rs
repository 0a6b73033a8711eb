use serde::{Deserialize, Serialize};

use super::{fit_iv, fit_ols, fit_quantile, AbsorbOptions, EstimateReport, Instruments, IvMethod, QuantileOptions, Vcov};
use crate::error::{Error, Result};
use crate::panel::{build_design, compute_shares, Design, DesignSpec, MarketPanel, ShareTable, ZeroPolicy};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[default]
    Logit,
    Nested,
    Quantile,
}

/// Everything needed to go from a panel to an estimate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub design: DesignSpec,
    pub endogenous: Vec<String>,
    pub instruments: Vec<String>,
    pub iv_method: IvMethod,
    pub vcov: Vcov,
    pub taus: Vec<f64>,
    pub zero_policy: ZeroPolicy,
    pub absorb: AbsorbOptions,
    pub quantile: QuantileOptions,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            kind: ModelKind::Logit,
            design: DesignSpec::default(),
            endogenous: Vec::new(),
            instruments: Vec::new(),
            iv_method: IvMethod::TwoSls,
            vcov: Vcov::Robust,
            taus: vec![0.5],
            zero_policy: ZeroPolicy::Drop,
            absorb: AbsorbOptions::default(),
            quantile: QuantileOptions::default(),
        }
    }
}

impl ModelSpec {
    /// The design spec with the nest term switched on for nested models.
    pub fn design_spec(&self) -> DesignSpec {
        let mut d = self.design.clone();
        if self.kind == ModelKind::Nested {
            d.nest_term = true;
        }
        d
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == ModelKind::Quantile {
            if self.taus.is_empty() {
                return Err(Error::config("quantile model needs at least one tau"));
            }
            if !self.endogenous.is_empty() {
                return Err(Error::config("quantile model does not support endogenous regressors"));
            }
        }
        if self.endogenous.is_empty() != self.instruments.is_empty() {
            return Err(Error::config("endogenous and instruments must be given together"));
        }
        Ok(())
    }

    pub fn is_iv(&self) -> bool {
        !self.endogenous.is_empty()
    }

    /// Shares and design for `panel`.
    pub fn build(&self, panel: &MarketPanel) -> Result<(ShareTable, Design)> {
        let shares = compute_shares(panel, self.zero_policy)?;
        let design = build_design(panel, &shares, &self.design_spec())?;
        Ok((shares, design))
    }

    /// Covariance choice with cluster codes aligned to `design`.
    pub fn vcov_for(&self, panel: &MarketPanel, design: &Design) -> Result<Vcov> {
        Ok(match &self.vcov {
            Vcov::Cluster { name, .. } => Vcov::Cluster {
                name: name.clone(),
                codes: design.codes(panel, name)?,
            },
            other => other.clone(),
        })
    }

    pub fn instruments_for(&self, panel: &MarketPanel, design: &Design) -> Result<Instruments> {
        Ok(Instruments {
            labels: self.instruments.clone(),
            values: design.panel_columns(panel, &self.instruments)?,
        })
    }

    /// Fits a prepared design; quantile models use the first tau.
    pub fn fit_design(&self, panel: &MarketPanel, design: &Design) -> Result<EstimateReport> {
        self.validate()?;
        match self.kind {
            ModelKind::Quantile => fit_quantile(design, self.taus[0], &self.quantile),
            _ if self.is_iv() => fit_iv(
                design,
                &self.endogenous,
                &self.instruments_for(panel, design)?,
                self.iv_method,
                &self.vcov_for(panel, design)?,
                &self.absorb,
            ),
            _ => fit_ols(design, &self.vcov_for(panel, design)?, &self.absorb),
        }
    }
}

/// One report per tau for quantile models, otherwise a single report.
pub fn fit_model(panel: &MarketPanel, spec: &ModelSpec) -> Result<Vec<EstimateReport>> {
    spec.validate()?;
    let (_, design) = spec.build(panel)?;
    if spec.kind == ModelKind::Quantile {
        return spec
            .taus
            .iter()
            .map(|&tau| fit_quantile(&design, tau, &spec.quantile))
            .collect();
    }
    Ok(vec![spec.fit_design(panel, &design)?])
}
