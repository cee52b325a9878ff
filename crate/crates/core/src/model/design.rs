use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{Constraint, Covariate, ModelError, ModelSpec, Result, TermDef, TermKind};
use crate::basis::{self, BasisDef, BasisError, SumToZero};
use crate::series::AlignedFrame;

/// Source of covariate values for one time point.
pub trait Covariates {
    fn value(&self, c: &Covariate) -> Option<f64>;

    /// Human-readable location used in error messages.
    fn location(&self) -> String {
        String::from("<row>")
    }
}

/// Row `row` of a frame; lagged covariates read earlier rows.
#[derive(Debug, Clone, Copy)]
pub struct FrameRow<'a> {
    pub frame: &'a AlignedFrame,
    pub row: usize,
}

impl Covariates for FrameRow<'_> {
    fn value(&self, c: &Covariate) -> Option<f64> {
        let i = self.row.checked_sub(c.lag)?;
        self.frame.value(&c.name, i)
    }

    fn location(&self) -> String {
        self.frame.timestamp(self.row).to_rfc3339()
    }
}

impl Covariates for BTreeMap<Covariate, f64> {
    fn value(&self, c: &Covariate) -> Option<f64> {
        self.get(c).copied()
    }
}

/// A term with its data-dependent pieces fixed: input ranges, knots and the
/// identifiability transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealizedTerm {
    pub def: TermDef,
    /// Training range of each input, in `def.inputs()` order.
    pub ranges: Vec<(f64, f64)>,
    pub bases: Vec<BasisDef>,
    pub transform: Option<SumToZero>,
}

impl RealizedTerm {
    fn raw_cols(&self) -> usize {
        raw_width(&self.def)
    }

    pub fn ncols(&self) -> usize {
        self.raw_cols() - usize::from(self.transform.is_some())
    }

    pub fn label(&self) -> String {
        self.def.label()
    }

    pub fn is_penalized(&self) -> bool {
        !self.bases.is_empty()
    }

    fn clamp_input(&self, idx: usize, v: f64, clamps: &mut usize) -> f64 {
        let (lo, hi) = self.ranges[idx];
        if v < lo || v > hi {
            *clamps += 1;
            v.clamp(lo, hi)
        } else {
            v
        }
    }

    /// Unconstrained basis row from input values (in `def.inputs()` order).
    pub fn raw_row(&self, vals: &[f64], clamps: &mut usize) -> std::result::Result<Vec<f64>, BasisError> {
        Ok(match &self.def.kind {
            TermKind::Linear { .. } => vec![self.clamp_input(0, vals[0], clamps)],
            TermKind::Interaction { .. } => {
                vec![self.clamp_input(0, vals[0], clamps) * self.clamp_input(1, vals[1], clamps)]
            }
            TermKind::Smooth { .. } => self.bases[0].row(self.clamp_input(0, vals[0], clamps)),
            TermKind::VaryingCoeff { .. } => {
                let b = self.bases[0].row(self.clamp_input(0, vals[0], clamps));
                basis::varying_coeff_row(&b, self.clamp_input(1, vals[1], clamps))
            }
            TermKind::Tensor { .. } => {
                let bx = self.bases[0].row(self.clamp_input(0, vals[0], clamps));
                let by = self.bases[1].row(self.clamp_input(1, vals[1], clamps));
                basis::tensor_row(&bx, &by)
            }
            TermKind::ByFactor { num_categories, .. } => {
                let b = self.bases[0].row(self.clamp_input(0, vals[0], clamps));
                let code = vals[1];
                if code < 0.0 || code.fract() != 0.0 {
                    return Err(BasisError::BadCategory { category: usize::MAX, num_categories: *num_categories });
                }
                basis::by_factor_row(&b, code as usize, *num_categories)?
            }
        })
    }

    pub fn row(&self, vals: &[f64], clamps: &mut usize) -> std::result::Result<Vec<f64>, BasisError> {
        let raw = self.raw_row(vals, clamps)?;
        Ok(match &self.transform {
            Some(t) => t.constrain_row(&raw),
            None => raw,
        })
    }

    /// Penalty matrices in raw coordinates, one per smoothing parameter.
    fn raw_penalties(&self, order: usize, separable: bool) -> std::result::Result<Vec<DMatrix<f64>>, BasisError> {
        Ok(match &self.def.kind {
            TermKind::Linear { .. } | TermKind::Interaction { .. } => vec![],
            TermKind::Smooth { k, .. } | TermKind::VaryingCoeff { k, .. } => {
                vec![basis::difference_penalty(*k, order)?.matrix]
            }
            TermKind::Tensor { kx, ky, .. } => {
                let sx = basis::difference_penalty(*kx, order)?.matrix;
                let sy = basis::difference_penalty(*ky, order)?.matrix;
                let (px, py) = basis::tensor_penalties(&sx, &sy);
                if separable {
                    vec![px, py]
                } else {
                    vec![px + py]
                }
            }
            TermKind::ByFactor { k, num_categories, .. } => {
                let s = basis::difference_penalty(*k, order)?.matrix;
                let eye = DMatrix::<f64>::identity(*num_categories, *num_categories);
                vec![eye.kronecker(&s)]
            }
        })
    }
}

/// One smoothing parameter's penalty, already mapped to constrained
/// coordinates and rescaled to the magnitude of its design block.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyComponent {
    pub term: usize,
    pub offset: usize,
    pub matrix: DMatrix<f64>,
    pub scale: f64,
}

/// Design matrix with its response, penalties and row bookkeeping.
#[derive(Debug, Clone)]
pub struct Design {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub penalties: Vec<PenaltyComponent>,
    /// Frame rows kept (complete response, lags and covariates).
    pub rows: Vec<usize>,
    pub timestamps: Vec<DateTime<Utc>>,
    pub terms: Vec<RealizedTerm>,
    /// Column range of each term.
    pub term_columns: Vec<(usize, usize)>,
    pub column_labels: Vec<String>,
    pub num_lags: usize,
}

impl Design {
    pub fn nrows(&self) -> usize {
        self.x.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.x.ncols()
    }
}

fn raw_width(def: &TermDef) -> usize {
    match &def.kind {
        TermKind::Linear { .. } | TermKind::Interaction { .. } => 1,
        TermKind::Smooth { k, .. } | TermKind::VaryingCoeff { k, .. } => *k,
        TermKind::Tensor { kx, ky, .. } => kx * ky,
        TermKind::ByFactor { k, num_categories, .. } => k * num_categories,
    }
}

fn constrained_width(def: &TermDef) -> usize {
    let raw = raw_width(def);
    raw - usize::from(def.constraint == Constraint::SumToZero && raw > 1)
}

fn frame_value(frame: &AlignedFrame, c: &Covariate, row: usize) -> Option<f64> {
    FrameRow { frame, row }.value(c)
}

/// Assemble the design for `spec` from `frame`.
///
/// Columns are ordered intercept, response lags, then the `ModelSpec` terms.
/// Rows with any missing regressor or response are dropped.
pub fn build_design(spec: &ModelSpec, frame: &AlignedFrame, min_rows_per_column: f64) -> Result<Design> {
    spec.validate()?;
    let response = Covariate::new(spec.response.clone());
    let mut channels: Vec<&Covariate> = vec![&response];
    for t in &spec.terms {
        channels.extend(t.inputs());
    }
    for c in &channels {
        let present = frame.has(&c.name) && (0..frame.len()).any(|i| frame.value(&c.name, i).is_some());
        if !present {
            return Err(ModelError::MissingChannel(c.name.clone()));
        }
    }

    let lag_covs: Vec<Covariate> =
        spec.response_lags.iter().map(|&l| Covariate::lagged(spec.response.clone(), l)).collect();
    let rows: Vec<usize> = (0..frame.len())
        .filter(|&i| {
            frame_value(frame, &response, i).is_some()
                && lag_covs.iter().all(|c| frame_value(frame, c, i).is_some())
                && channels.iter().all(|c| frame_value(frame, c, i).is_some())
        })
        .collect();

    let ncols = 1 + lag_covs.len() + spec.terms.iter().map(constrained_width).sum::<usize>();
    let needed = ((min_rows_per_column * ncols as f64).ceil() as usize).max(ncols + 1);
    if rows.len() < needed {
        return Err(ModelError::InsufficientData { rows: rows.len(), cols: ncols, needed });
    }

    let mut terms = Vec::with_capacity(spec.terms.len());
    for def in &spec.terms {
        let inputs = def.inputs();
        let ranges: Vec<(f64, f64)> = inputs
            .iter()
            .map(|c| {
                rows.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                    let v = frame_value(frame, c, i).expect("complete row");
                    (lo.min(v), hi.max(v))
                })
            })
            .collect();
        let basis_for = |idx: usize, k: usize| BasisDef::uniform(ranges[idx].0, ranges[idx].1, k, spec.degree);
        let bases = match &def.kind {
            TermKind::Linear { .. } | TermKind::Interaction { .. } => vec![],
            TermKind::Smooth { k, .. } | TermKind::VaryingCoeff { k, .. } | TermKind::ByFactor { k, .. } => {
                vec![basis_for(0, *k)?]
            }
            TermKind::Tensor { kx, ky, .. } => vec![basis_for(0, *kx)?, basis_for(1, *ky)?],
        };
        terms.push(RealizedTerm { def: def.clone(), ranges, bases, transform: None });
    }

    let n = rows.len();
    let mut blocks: Vec<DMatrix<f64>> = Vec::with_capacity(terms.len());
    for term in terms.iter_mut() {
        let inputs: Vec<Covariate> = term.def.inputs().into_iter().cloned().collect();
        let width = term.raw_cols();
        let mut block = DMatrix::zeros(n, width);
        let mut clamps = 0;
        let mut vals = vec![0.0; inputs.len()];
        for (r, &i) in rows.iter().enumerate() {
            for (v, c) in vals.iter_mut().zip(&inputs) {
                *v = frame_value(frame, c, i).expect("complete row");
            }
            let row = term.raw_row(&vals, &mut clamps)?;
            for (j, v) in row.into_iter().enumerate() {
                block[(r, j)] = v;
            }
        }
        if term.def.constraint == Constraint::SumToZero && width > 1 {
            let (constrained, t) = basis::apply_sum_to_zero(&block)?;
            term.transform = Some(t);
            block = constrained;
        }
        blocks.push(block);
    }

    let ncols = 1 + lag_covs.len() + blocks.iter().map(|b| b.ncols()).sum::<usize>();
    let mut x = DMatrix::zeros(n, ncols);
    let mut y = DVector::zeros(n);
    let mut labels = vec!["(intercept)".to_string()];
    labels.extend(lag_covs.iter().map(|c| c.to_string()));
    for (r, &i) in rows.iter().enumerate() {
        x[(r, 0)] = 1.0;
        y[r] = frame_value(frame, &response, i).expect("complete row");
        for (j, c) in lag_covs.iter().enumerate() {
            x[(r, 1 + j)] = frame_value(frame, c, i).expect("complete row");
        }
    }
    let mut offset = 1 + lag_covs.len();
    let mut term_columns = Vec::with_capacity(terms.len());
    let mut penalties = Vec::new();
    for (ti, (term, block)) in terms.iter().zip(&blocks).enumerate() {
        let w = block.ncols();
        x.view_mut((0, offset), (n, w)).copy_from(block);
        term_columns.push((offset, offset + w));
        if w == 1 && !term.is_penalized() {
            labels.push(term.label());
        } else {
            labels.extend((1..=w).map(|j| format!("{}.{j}", term.label())));
        }
        let separable = matches!(term.def.kind, TermKind::Tensor { separable: true, .. });
        let xtx_norm = (block.transpose() * block).norm();
        for s in term.raw_penalties(spec.penalty_order, separable)? {
            let s = match &term.transform {
                Some(t) => t.constrain_penalty(&s),
                None => s,
            };
            let s_norm = s.norm();
            let scale = if s_norm > 0.0 && xtx_norm > 0.0 { xtx_norm / s_norm } else { 1.0 };
            penalties.push(PenaltyComponent { term: ti, offset, matrix: s * scale, scale });
        }
        offset += w;
    }

    Ok(Design {
        x,
        y,
        penalties,
        timestamps: rows.iter().map(|&i| frame.timestamp(i)).collect(),
        rows,
        terms,
        term_columns,
        column_labels: labels,
        num_lags: lag_covs.len(),
    })
}
