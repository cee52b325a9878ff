use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::design::{build_design, Covariates, Design, FrameRow, RealizedTerm};
use super::fit::{fit_penalized, FitOptions, PenalizedFit};
use super::{Covariate, Forecaster, ModelError, ModelSpec, Result};
use crate::series::{AlignedFrame, TimeSeries};

pub const MODEL_SCHEMA_VERSION: u32 = 1;

/// A fitted additive model: everything needed to predict on new data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub schema_version: u32,
    pub spec: ModelSpec,
    pub terms: Vec<RealizedTerm>,
    pub term_columns: Vec<(usize, usize)>,
    pub column_labels: Vec<String>,
    pub coefficients: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub edf: f64,
    pub sigma2: f64,
    pub rss: f64,
    pub deviance_explained: f64,
    pub n_obs: usize,
    /// Training range per covariate, keyed by its display label.
    pub training_range: BTreeMap<String, (f64, f64)>,
    pub training_span: (DateTime<Utc>, DateTime<Utc>),
    #[serde(default)]
    pub warnings: Vec<String>,
}

/// Output of [`FittedModel::rolling_predict`].
#[derive(Debug, Clone, PartialEq)]
pub struct RollingPrediction {
    pub values: TimeSeries,
    /// Covariate values clamped into the training range over the window.
    pub clamp_count: usize,
}

impl FittedModel {
    pub fn fit(spec: &ModelSpec, frame: &AlignedFrame, opts: &FitOptions) -> Result<Self> {
        let design = build_design(spec, frame, opts.min_rows_per_column)?;
        let fit = fit_penalized(&design, opts)?;
        Ok(Self::from_parts(spec, &design, fit))
    }

    pub fn from_parts(spec: &ModelSpec, design: &Design, fit: PenalizedFit) -> Self {
        let mut training_range = BTreeMap::new();
        for t in &design.terms {
            for (c, r) in t.def.inputs().into_iter().zip(&t.ranges) {
                training_range.insert(c.to_string(), *r);
            }
        }
        Self {
            schema_version: MODEL_SCHEMA_VERSION,
            spec: spec.clone(),
            terms: design.terms.clone(),
            term_columns: design.term_columns.clone(),
            column_labels: design.column_labels.clone(),
            coefficients: fit.coefficients,
            lambdas: fit.lambdas,
            edf: fit.edf,
            sigma2: fit.sigma2,
            rss: fit.rss,
            deviance_explained: fit.deviance_explained,
            n_obs: design.nrows(),
            training_range,
            training_span: (
                *design.timestamps.first().expect("non-empty design"),
                *design.timestamps.last().expect("non-empty design"),
            ),
            warnings: fit.warnings,
        }
    }

    pub fn intercept(&self) -> f64 {
        self.coefficients[0]
    }

    /// Coefficients of the response lags, in `spec.response_lags` order.
    pub fn lag_coefficients(&self) -> &[f64] {
        &self.coefficients[1..1 + self.spec.response_lags.len()]
    }

    /// Contribution of term `ti` at the given input values.
    pub fn term_value(&self, ti: usize, inputs: &[f64]) -> Result<f64> {
        let mut clamps = 0;
        let row = self.terms[ti].row(inputs, &mut clamps)?;
        let (a, b) = self.term_columns[ti];
        Ok(row.iter().zip(&self.coefficients[a..b]).map(|(x, c)| x * c).sum())
    }

    /// Sum of all term contributions (no intercept or lags), with the number
    /// of clamped inputs.
    pub fn covariate_part(&self, cov: &impl Covariates) -> Result<(f64, usize)> {
        let mut clamps = 0;
        let mut acc = 0.0;
        let mut vals = Vec::with_capacity(2);
        for (term, &(a, b)) in self.terms.iter().zip(&self.term_columns) {
            vals.clear();
            for c in term.def.inputs() {
                vals.push(cov.value(c).ok_or_else(|| missing(c, cov))?);
            }
            let row = term.row(&vals, &mut clamps)?;
            acc += row.iter().zip(&self.coefficients[a..b]).map(|(x, c)| x * c).sum::<f64>();
        }
        Ok((acc, clamps))
    }

    /// Linear predictor before flooring. `history` holds past responses,
    /// most recent last, and must cover the largest lag.
    pub fn linear_predictor(&self, cov: &impl Covariates, history: &[f64]) -> Result<f64> {
        let (part, _) = self.covariate_part(cov)?;
        Ok(self.combine(part, history))
    }

    fn combine(&self, covariate_part: f64, history: &[f64]) -> f64 {
        let mut eta = self.intercept() + covariate_part;
        for (&lag, c) in self.spec.response_lags.iter().zip(self.lag_coefficients()) {
            eta += c * history[history.len() - lag];
        }
        eta
    }

    /// One-step prediction floored at zero.
    pub fn predict_one_step(&self, cov: &impl Covariates, y_prev: f64) -> Result<f64> {
        self.predict_with_history(cov, &[y_prev])
    }

    pub fn predict_with_history(&self, cov: &impl Covariates, history: &[f64]) -> Result<f64> {
        if history.len() < self.spec.max_lag() {
            return Err(ModelError::BadSpec(format!(
                "need {} past responses, got {}",
                self.spec.max_lag(),
                history.len()
            )));
        }
        Ok(self.linear_predictor(cov, history)?.max(0.0))
    }

    /// Iterate one-step predictions over `len` rows starting at `from`,
    /// feeding each prediction back as the next lagged response. `y_init`
    /// holds the responses preceding `from`, most recent last.
    pub fn rolling_predict(&self, frame: &AlignedFrame, from: usize, len: usize, y_init: &[f64]) -> Result<RollingPrediction> {
        let max_lag = self.spec.max_lag();
        if y_init.len() < max_lag {
            return Err(ModelError::BadSpec(format!("need {max_lag} initial responses, got {}", y_init.len())));
        }
        let mut history: Vec<f64> = y_init[y_init.len() - max_lag..].to_vec();
        let mut out = Vec::with_capacity(len);
        let mut clamp_count = 0;
        for row in from..from + len {
            let (part, clamps) = self.covariate_part(&FrameRow { frame, row })?;
            clamp_count += clamps;
            let y = self.combine(part, &history).max(0.0);
            out.push(Some(y));
            if max_lag > 0 {
                history.remove(0);
                history.push(y);
            }
        }
        let values = TimeSeries::new(frame.timestamp(from), frame.step_secs(), out, "prediction")
            .expect("frame index is regular");
        Ok(RollingPrediction { values, clamp_count })
    }

    /// In-sample fitted values (observed lags, no flooring) wherever the
    /// response, its lags and all covariates are present.
    pub fn fitted_values(&self, frame: &AlignedFrame) -> TimeSeries {
        let response = Covariate::new(self.spec.response.clone());
        let values = (0..frame.len())
            .map(|row| {
                let at = FrameRow { frame, row };
                let history: Option<Vec<f64>> = (1..=self.spec.max_lag())
                    .rev()
                    .map(|l| at.value(&Covariate::lagged(response.name.clone(), l)))
                    .collect();
                at.value(&response)?;
                self.linear_predictor(&at, &history?).ok()
            })
            .collect();
        TimeSeries::new(frame.start(), frame.step_secs(), values, "fitted").expect("frame index is regular")
    }

    /// Observed minus fitted; missing where either is unavailable.
    pub fn residuals(&self, frame: &AlignedFrame) -> TimeSeries {
        let fitted = self.fitted_values(frame);
        let observed = frame.column(&self.spec.response).expect("response column");
        let values = observed
            .iter()
            .zip(fitted.values())
            .map(|(o, f)| Some((*o)? - (*f)?))
            .collect();
        TimeSeries::new(frame.start(), frame.step_secs(), values, "residual").expect("frame index is regular")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: serde_json::Value = serde_json::from_str(text).map_err(|e| ModelError::Json(e.to_string()))?;
        let found = raw.get("schema_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != MODEL_SCHEMA_VERSION {
            return Err(ModelError::VersionMismatch { found, expected: MODEL_SCHEMA_VERSION });
        }
        serde_json::from_value(raw).map_err(|e| ModelError::Json(e.to_string()))
    }
}

impl Forecaster for FittedModel {
    fn max_lag(&self) -> usize {
        self.spec.max_lag()
    }

    fn rolling_predict(&self, frame: &AlignedFrame, from: usize, len: usize, y_init: &[f64]) -> Result<RollingPrediction> {
        FittedModel::rolling_predict(self, frame, from, len, y_init)
    }
}

fn missing(c: &Covariate, cov: &impl Covariates) -> ModelError {
    ModelError::MissingCovariate { name: c.to_string(), timestamp: cov.location() }
}
