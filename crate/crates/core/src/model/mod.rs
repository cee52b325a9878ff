//! Penalised additive model for hourly sap flux density.
//!
//! The default structure regresses flux on its own lag, linear temperature
//! and humidity, a smooth of radiation, a VPD smooth varying with radiation,
//! and a flexible VPD interaction with one daily covariate.

mod design;
mod fit;
mod fitted;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::BasisError;
use crate::series::{channel, AlignedFrame};

pub use design::{build_design, Covariates, Design, FrameRow, PenaltyComponent, RealizedTerm};
pub use fit::{evaluate_at, fit_penalized, lambda_grid, FitOptions, PenalizedFit};
pub use fitted::{FittedModel, RollingPrediction, MODEL_SCHEMA_VERSION};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("channel `{0}` is absent or entirely missing")]
    MissingChannel(String),
    #[error("{rows} complete rows for {cols} design columns (need {needed})")]
    InsufficientData { rows: usize, cols: usize, needed: usize },
    #[error("penalised normal equations are not positive definite")]
    SingularSystem,
    #[error("covariate `{name}` missing at {timestamp}")]
    MissingCovariate { name: String, timestamp: String },
    #[error("serialized model schema {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("invalid model spec: {0}")]
    BadSpec(String),
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error("model json: {0}")]
    Json(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Anything that can iterate one-step predictions over a frame window.
pub trait Forecaster: Send + Sync + fmt::Debug {
    /// Number of past responses needed to seed a window.
    fn max_lag(&self) -> usize;

    /// Predict `len` rows from `from`; `y_init` holds the preceding
    /// responses, most recent last.
    fn rolling_predict(&self, frame: &AlignedFrame, from: usize, len: usize, y_init: &[f64]) -> Result<RollingPrediction>;
}

/// A named covariate, optionally lagged by whole steps.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Covariate {
    pub name: String,
    #[serde(default)]
    pub lag: usize,
}

impl Covariate {
    pub fn new(name: impl Into<String>) -> Self {
        Self { name: name.into(), lag: 0 }
    }

    pub fn lagged(name: impl Into<String>, lag: usize) -> Self {
        Self { name: name.into(), lag }
    }
}

impl fmt::Display for Covariate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.lag == 0 {
            write!(f, "{}", self.name)
        } else {
            write!(f, "{}[t-{}]", self.name, self.lag)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Constraint {
    None,
    #[default]
    SumToZero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TermKind {
    Linear { input: Covariate },
    /// Unpenalised product `x * y`.
    Interaction { x: Covariate, y: Covariate },
    Smooth { input: Covariate, k: usize },
    /// `s(smooth) * by`
    VaryingCoeff { smooth: Covariate, by: Covariate, k: usize },
    Tensor { x: Covariate, y: Covariate, kx: usize, ky: usize, separable: bool },
    /// Smooth of `input` with a separate curve per level of the integer-coded
    /// `factor` column.
    ByFactor { input: Covariate, factor: Covariate, k: usize, num_categories: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermDef {
    #[serde(flatten)]
    pub kind: TermKind,
    #[serde(default)]
    pub constraint: Constraint,
}

impl TermDef {
    pub fn linear(input: Covariate) -> Self {
        Self { kind: TermKind::Linear { input }, constraint: Constraint::None }
    }

    pub fn interaction(x: Covariate, y: Covariate) -> Self {
        Self { kind: TermKind::Interaction { x, y }, constraint: Constraint::None }
    }

    pub fn smooth(input: Covariate, k: usize) -> Self {
        Self { kind: TermKind::Smooth { input, k }, constraint: Constraint::SumToZero }
    }

    pub fn varying(smooth: Covariate, by: Covariate, k: usize) -> Self {
        Self { kind: TermKind::VaryingCoeff { smooth, by, k }, constraint: Constraint::SumToZero }
    }

    pub fn tensor(x: Covariate, y: Covariate, kx: usize, ky: usize) -> Self {
        Self { kind: TermKind::Tensor { x, y, kx, ky, separable: false }, constraint: Constraint::SumToZero }
    }

    pub fn by_factor(input: Covariate, factor: Covariate, k: usize, num_categories: usize) -> Self {
        Self {
            kind: TermKind::ByFactor { input, factor, k, num_categories },
            constraint: Constraint::SumToZero,
        }
    }

    pub fn inputs(&self) -> Vec<&Covariate> {
        match &self.kind {
            TermKind::Linear { input } | TermKind::Smooth { input, .. } => vec![input],
            TermKind::Interaction { x, y } | TermKind::Tensor { x, y, .. } => vec![x, y],
            TermKind::VaryingCoeff { smooth, by, .. } => vec![smooth, by],
            TermKind::ByFactor { input, factor, .. } => vec![input, factor],
        }
    }

    pub fn label(&self) -> String {
        match &self.kind {
            TermKind::Linear { input } => input.to_string(),
            TermKind::Interaction { x, y } => format!("{x}:{y}"),
            TermKind::Smooth { input, .. } => format!("s({input})"),
            TermKind::VaryingCoeff { smooth, by, .. } => format!("s({smooth})*{by}"),
            TermKind::Tensor { x, y, .. } => format!("te({x},{y})"),
            TermKind::ByFactor { input, factor, .. } => format!("s({input}):{factor}"),
        }
    }
}

/// Candidate daily covariates for the flexible interaction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlexibleCovariate {
    DailyMaxTemp,
    DailyMinHumidity,
    DailyMeanSoil,
}

impl FlexibleCovariate {
    pub const ALL: [FlexibleCovariate; 3] =
        [Self::DailyMaxTemp, Self::DailyMinHumidity, Self::DailyMeanSoil];

    pub fn column(self) -> &'static str {
        match self {
            Self::DailyMaxTemp => channel::DAILY_MAX_TEMP,
            Self::DailyMinHumidity => channel::DAILY_MIN_HUMIDITY,
            Self::DailyMeanSoil => channel::DAILY_MEAN_SOIL,
        }
    }

    pub fn from_column(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.column() == name)
    }
}

/// Shape of the flexible `s3(V, X)` term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlexibleShape {
    #[default]
    Tensor,
    /// `s(X) * V`
    VaryingCoeff,
    /// `V * X`
    Simple,
}

/// Declarative model structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub response: String,
    /// Lags of the response used as linear regressors.
    pub response_lags: Vec<usize>,
    pub terms: Vec<TermDef>,
    /// Informational tag of the flexible covariate the terms were built with.
    #[serde(default)]
    pub flexible_covariate: Option<FlexibleCovariate>,
    #[serde(default = "default_degree")]
    pub degree: usize,
    #[serde(default = "default_penalty_order")]
    pub penalty_order: usize,
}

fn default_degree() -> usize {
    3
}

fn default_penalty_order() -> usize {
    2
}

/// Options for [`ModelSpec::standard`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StandardOptions {
    pub k_radiation: usize,
    pub k_vpd: usize,
    pub k_tensor: usize,
    /// 0 uses current radiation, 1 uses the previous hour's.
    pub radiation_lag: usize,
    pub shape: FlexibleShape,
}

impl Default for StandardOptions {
    fn default() -> Self {
        Self { k_radiation: 10, k_vpd: 10, k_tensor: 6, radiation_lag: 0, shape: FlexibleShape::Tensor }
    }
}

impl ModelSpec {
    /// `Y ~ Y[t-1] + T + H + s(R) + s(V)*R + s3(V, X)`.
    pub fn standard(response: impl Into<String>, flexible: FlexibleCovariate, opts: &StandardOptions) -> Self {
        let r = Covariate::lagged(channel::RADIATION, opts.radiation_lag);
        let v = Covariate::new(channel::VPD);
        let x = Covariate::new(flexible.column());
        let flexible_term = match opts.shape {
            FlexibleShape::Tensor => TermDef::tensor(v.clone(), x, opts.k_tensor, opts.k_tensor),
            FlexibleShape::VaryingCoeff => TermDef::varying(x, v.clone(), opts.k_tensor),
            FlexibleShape::Simple => TermDef::interaction(v.clone(), x),
        };
        Self {
            response: response.into(),
            response_lags: vec![1],
            terms: vec![
                TermDef::linear(Covariate::new(channel::TEMPERATURE)),
                TermDef::linear(Covariate::new(channel::HUMIDITY)),
                TermDef::smooth(r.clone(), opts.k_radiation),
                TermDef::varying(v.clone(), r, opts.k_vpd),
                flexible_term,
            ],
            flexible_covariate: Some(flexible),
            degree: 3,
            penalty_order: 2,
        }
    }

    pub fn max_lag(&self) -> usize {
        self.response_lags.iter().copied().max().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let mut lags = self.response_lags.clone();
        lags.sort_unstable();
        lags.dedup();
        if lags.len() != self.response_lags.len() || lags.first() == Some(&0) {
            return Err(ModelError::BadSpec("response lags must be distinct and >= 1".into()));
        }
        if self.penalty_order == 0 {
            return Err(ModelError::BadSpec("penalty order must be >= 1".into()));
        }
        for t in &self.terms {
            let k = match &t.kind {
                TermKind::Smooth { k, .. } | TermKind::VaryingCoeff { k, .. } | TermKind::ByFactor { k, .. } => *k,
                TermKind::Tensor { kx, ky, .. } => (*kx).min(*ky),
                _ => continue,
            };
            if k <= self.degree || k <= self.penalty_order {
                return Err(ModelError::BadSpec(format!(
                    "term {} has basis size {k}, too small for degree {} / penalty order {}",
                    t.label(),
                    self.degree,
                    self.penalty_order
                )));
            }
            if let TermKind::ByFactor { num_categories: 0, .. } = t.kind {
                return Err(ModelError::BadSpec("by-factor term needs at least one category".into()));
            }
        }
        Ok(())
    }
}
