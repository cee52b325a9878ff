//! Ensemble weighting, averaging, spread and calibrated intervals.
//!
//! Member predictions are passed as a `T × M` matrix: one row per time
//! point, one column per member.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats;

/// A member whose MSE falls below this is treated as exact.
pub const ZERO_MSE: f64 = 1e-12;
/// Shortest weight-training window, in rows.
pub const MIN_WEIGHT_ROWS: usize = 24;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnsembleError {
    #[error("penalised regression produced no positive weight")]
    AllZeroWeights,
    #[error("ensemble spread is zero over the window; gamma undefined")]
    ZeroSpread,
    #[error("weight window has {found} rows, need at least {needed}")]
    TooShort { needed: usize, found: usize },
    #[error("{what}: expected {expected}, got {found}")]
    ShapeMismatch { what: &'static str, expected: usize, found: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

pub type Result<T> = std::result::Result<T, EnsembleError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Penalty {
    Ridge,
    Lasso,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightScheme {
    Equal,
    #[default]
    ReciprocalMse,
    /// Regress observations on member predictions (no intercept), clip
    /// negative coefficients and renormalise. Ridge minimises
    /// `|y - Pw|²/T + s·|w|²`, lasso `|y - Pw|²/(2T) + s·|w|₁`.
    PenalizedRegression { penalty: Penalty, strength: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub values: Vec<f64>,
    pub warnings: Vec<String>,
}

fn check_window(preds: &DMatrix<f64>, obs: &[f64]) -> Result<()> {
    if preds.nrows() != obs.len() {
        return Err(EnsembleError::ShapeMismatch { what: "observation rows", expected: preds.nrows(), found: obs.len() });
    }
    if preds.ncols() == 0 {
        return Err(EnsembleError::ShapeMismatch { what: "members", expected: 1, found: 0 });
    }
    if obs.len() < MIN_WEIGHT_ROWS {
        return Err(EnsembleError::TooShort { needed: MIN_WEIGHT_ROWS, found: obs.len() });
    }
    if obs.iter().any(|v| !v.is_finite()) {
        return Err(EnsembleError::NonFinite("observations"));
    }
    if preds.iter().any(|v| !v.is_finite()) {
        return Err(EnsembleError::NonFinite("member predictions"));
    }
    Ok(())
}

/// Mean squared error of each member over the window.
pub fn member_mse(preds: &DMatrix<f64>, obs: &[f64]) -> Vec<f64> {
    preds
        .column_iter()
        .map(|c| c.iter().zip(obs).map(|(p, o)| (p - o) * (p - o)).sum::<f64>() / obs.len() as f64)
        .collect()
}

pub fn compute_weights(scheme: &WeightScheme, preds: &DMatrix<f64>, obs: &[f64]) -> Result<Weights> {
    check_window(preds, obs)?;
    let m = preds.ncols();
    if let WeightScheme::Equal = scheme {
        return Ok(Weights { values: vec![1.0 / m as f64; m], warnings: vec![] });
    }
    let mse = member_mse(preds, obs);
    if let Some(exact) = mse.iter().position(|&e| e < ZERO_MSE) {
        let mut values = vec![0.0; m];
        values[exact] = 1.0;
        return Ok(Weights {
            values,
            warnings: vec![format!("member {exact} reproduces the observations (MSE < {ZERO_MSE:e}); it takes all weight")],
        });
    }
    let raw = match *scheme {
        WeightScheme::Equal => unreachable!(),
        WeightScheme::ReciprocalMse => mse.iter().map(|e| 1.0 / e).collect(),
        WeightScheme::PenalizedRegression { penalty, strength } => {
            if !(strength >= 0.0) {
                return Err(EnsembleError::InvalidParameter(format!("penalty strength {strength} must be >= 0")));
            }
            match penalty {
                Penalty::Ridge => ridge(preds, obs, strength),
                Penalty::Lasso => lasso(preds, obs, strength),
            }
        }
    };
    let clipped: Vec<f64> = raw.iter().map(|&w: &f64| if w.is_finite() { w.max(0.0) } else { 0.0 }).collect();
    let total: f64 = clipped.iter().sum();
    if !(total > 0.0) {
        return Err(EnsembleError::AllZeroWeights);
    }
    let mut warnings = vec![];
    if raw.iter().any(|&w| w < 0.0) {
        warnings.push("negative regression weights clipped to zero".into());
    }
    Ok(Weights { values: clipped.iter().map(|w| w / total).collect(), warnings })
}

fn ridge(preds: &DMatrix<f64>, obs: &[f64], strength: f64) -> Vec<f64> {
    let t = obs.len() as f64;
    let y = DVector::from_column_slice(obs);
    let mut a = preds.transpose() * preds / t;
    for i in 0..a.nrows() {
        a[(i, i)] += strength;
    }
    let b = preds.transpose() * y / t;
    match a.clone().cholesky() {
        Some(c) => c.solve(&b).iter().copied().collect(),
        // collinear members without a penalty: minimum-norm solution
        None => a.svd(true, true).solve(&b, 1e-12).map(|w| w.iter().copied().collect()).unwrap_or_else(|_| vec![0.0; preds.ncols()]),
    }
}

fn lasso(preds: &DMatrix<f64>, obs: &[f64], strength: f64) -> Vec<f64> {
    let t = obs.len() as f64;
    let m = preds.ncols();
    let norms: Vec<f64> = preds.column_iter().map(|c| c.norm_squared() / t).collect();
    let mut w = vec![0.0; m];
    let mut resid: Vec<f64> = obs.to_vec();
    for _ in 0..10_000 {
        let mut change = 0.0f64;
        for j in 0..m {
            if norms[j] == 0.0 {
                continue;
            }
            let col = preds.column(j);
            let rho = col.iter().zip(&resid).map(|(p, r)| p * r).sum::<f64>() / t + norms[j] * w[j];
            let new = soft_threshold(rho, strength) / norms[j];
            let delta = new - w[j];
            if delta != 0.0 {
                for (r, p) in resid.iter_mut().zip(col.iter()) {
                    *r -= delta * p;
                }
                change = change.max(delta.abs());
                w[j] = new;
            }
        }
        if change < 1e-12 {
            break;
        }
    }
    w
}

fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// `Σ w_m Ŷᵐ`
pub fn ensemble_mean(weights: &[f64], row: &[f64]) -> f64 {
    weights.iter().zip(row).map(|(w, y)| w * y).sum()
}

/// `√(Σ w_m (Ŷᵐ − Ŷ)²)`
pub fn spread(weights: &[f64], row: &[f64], mean: f64) -> f64 {
    weights.iter().zip(row).map(|(w, y)| w * (y - mean) * (y - mean)).sum::<f64>().max(0.0).sqrt()
}

/// Row-wise average over initial-condition ensembles (`per_init[i][t]`).
pub fn standard_tree(per_init: &[Vec<f64>]) -> Vec<f64> {
    let Some(first) = per_init.first() else { return vec![] };
    let n = per_init.len() as f64;
    (0..first.len()).map(|t| per_init.iter().map(|s| s[t]).sum::<f64>() / n).collect()
}

/// Ensemble means and spreads for every row of `preds`.
pub fn summarize(weights: &[f64], preds: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
    let mut means = Vec::with_capacity(preds.nrows());
    let mut spreads = Vec::with_capacity(preds.nrows());
    let mut row = vec![0.0; preds.ncols()];
    for t in 0..preds.nrows() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = preds[(t, j)];
        }
        let mean = ensemble_mean(weights, &row);
        means.push(mean);
        spreads.push(spread(weights, &row, mean));
    }
    (means, spreads)
}

/// Weighted member error sum `Σ_t Σ_m w_m (Ŷ_tᵐ − Y_t)²`.
pub fn weighted_error(weights: &[f64], preds: &DMatrix<f64>, obs: &[f64]) -> f64 {
    let mut total = 0.0;
    for t in 0..preds.nrows() {
        for (m, w) in weights.iter().enumerate() {
            let e = preds[(t, m)] - obs[t];
            total += w * e * e;
        }
    }
    total
}

/// `γ = √(Σ_t Σ_m w_m (Ŷ_tᵐ − Y_t)² / Σ_t S_t²)`
pub fn gamma_scale(weights: &[f64], preds: &DMatrix<f64>, obs: &[f64], spreads: &[f64]) -> Result<f64> {
    let denom: f64 = spreads.iter().map(|s| s * s).sum();
    if !(denom > f64::MIN_POSITIVE) {
        return Err(EnsembleError::ZeroSpread);
    }
    Ok((weighted_error(weights, preds, obs) / denom).sqrt())
}

/// Error scaling fitted on a training window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaFit {
    pub gamma: f64,
    /// Constant spread used in place of `S_t` when the ensemble spread
    /// collapsed: residual SD of the highest-weight member.
    pub surrogate: Option<f64>,
}

impl GammaFit {
    /// Spread to scale at forecast time.
    pub fn effective_spread(&self, s: f64) -> f64 {
        self.surrogate.unwrap_or(s)
    }
}

/// `γ` on the window, falling back to the best member's residual SD when
/// the spread is zero throughout.
pub fn fit_gamma(weights: &[f64], preds: &DMatrix<f64>, obs: &[f64]) -> Result<GammaFit> {
    let (_, spreads) = summarize(weights, preds);
    match gamma_scale(weights, preds, obs, &spreads) {
        Ok(gamma) => Ok(GammaFit { gamma, surrogate: None }),
        Err(EnsembleError::ZeroSpread) => {
            let best = weights
                .iter()
                .enumerate()
                .fold(0, |b, (i, &w)| if w > weights[b] { i } else { b });
            let resid: Vec<f64> = preds.column(best).iter().zip(obs).map(|(p, o)| o - p).collect();
            let sd = stats::variance(&resid).sqrt();
            if !(sd > 0.0) {
                // perfect member: zero-width intervals
                return Ok(GammaFit { gamma: 1.0, surrogate: Some(0.0) });
            }
            let surrogate = vec![sd; obs.len()];
            Ok(GammaFit { gamma: gamma_scale(weights, preds, obs, &surrogate)?, surrogate: Some(sd) })
        }
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// `z · γ · S_t` before flooring the lower bound.
    pub half_width: Vec<f64>,
}

/// `mean ± z_{(1+level)/2} · γ · S_t`, lower bound floored at 0.
pub fn interval(mean: &[f64], spreads: &[f64], gamma: f64, level: f64) -> Result<Interval> {
    if !(gamma >= 0.0) {
        return Err(EnsembleError::InvalidParameter(format!("gamma {gamma} must be >= 0")));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(EnsembleError::InvalidParameter(format!("level {level} outside (0, 1)")));
    }
    let z = stats::normal_critical(level);
    let half_width: Vec<f64> = spreads.iter().map(|s| z * gamma * s).collect();
    Ok(Interval {
        lower: mean.iter().zip(&half_width).map(|(m, h)| (m - h).max(0.0)).collect(),
        upper: mean.iter().zip(&half_width).map(|(m, h)| m + h).collect(),
        half_width,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn matrix(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, f)
    }

    fn simplex(w: &[f64]) -> bool {
        w.iter().all(|&x| x >= 0.0) && (w.iter().sum::<f64>() - 1.0).abs() < 1e-12
    }

    #[test]
    fn equal_weights() {
        let p = matrix(24, 4, |t, m| (t + m) as f64);
        let obs = vec![1.0; 24];
        assert_eq!(compute_weights(&WeightScheme::Equal, &p, &obs).unwrap().values, vec![0.25; 4]);
    }

    #[test]
    fn reciprocal_mse_example() {
        // constant offsets 1, √2, 2 give MSEs 1, 2, 4
        let offsets = [1.0, 2f64.sqrt(), 2.0];
        let obs: Vec<f64> = (0..48).map(|t| t as f64).collect();
        let p = matrix(48, 3, |t, m| obs[t] + offsets[m]);
        let w = compute_weights(&WeightScheme::ReciprocalMse, &p, &obs).unwrap().values;
        for (a, b) in w.iter().zip([4.0 / 7.0, 2.0 / 7.0, 1.0 / 7.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_member_takes_all_weight() {
        let obs: Vec<f64> = (0..30).map(|t| (t as f64 * 0.3).sin() + 2.0).collect();
        let p = matrix(30, 3, |t, m| if m == 1 { obs[t] } else { obs[t] + 0.5 * (m as f64 + 1.0) * ((t % 3) as f64 - 1.0) });
        for scheme in [
            WeightScheme::ReciprocalMse,
            WeightScheme::PenalizedRegression { penalty: Penalty::Ridge, strength: 0.0 },
            WeightScheme::PenalizedRegression { penalty: Penalty::Lasso, strength: 0.0 },
        ] {
            let w = compute_weights(&scheme, &p, &obs).unwrap();
            assert_eq!(w.values, vec![0.0, 1.0, 0.0]);
            assert_eq!(w.warnings.len(), 1);
        }
    }

    #[test]
    fn ridge_recovers_indicator_without_short_circuit() {
        // member 2 matches up to tiny noise, above the ZeroMse threshold
        let obs: Vec<f64> = (0..60).map(|t| (t as f64 * 0.2).sin() * 3.0 + 4.0).collect();
        let p = matrix(60, 3, |t, m| match m {
            1 => obs[t] + 1e-5 * ((t * 7 % 5) as f64 - 2.0),
            0 => obs[t] * 0.5 + 1.0,
            _ => (t as f64 * 0.05).cos() + 3.0,
        });
        let w = compute_weights(&WeightScheme::PenalizedRegression { penalty: Penalty::Ridge, strength: 1e-12 }, &p, &obs)
            .unwrap()
            .values;
        assert!(w[1] > 1.0 - 1e-4, "{w:?}");
    }

    #[test]
    fn lasso_matches_closed_form_single_member() {
        // one member: w = S(pᵀy/T, s) / (pᵀp/T)
        let obs: Vec<f64> = (0..40).map(|t| 1.0 + (t % 4) as f64).collect();
        let p = matrix(40, 1, |t, _| 0.5 + (t % 5) as f64);
        let t = 40.0;
        let pty: f64 = (0..40).map(|i| p[(i, 0)] * obs[i]).sum::<f64>() / t;
        let ptp: f64 = (0..40).map(|i| p[(i, 0)] * p[(i, 0)]).sum::<f64>() / t;
        let w = lasso(&p, &obs, 0.3);
        assert!((w[0] - (pty - 0.3) / ptp).abs() < 1e-12);
        let r = ridge(&p, &obs, 0.3);
        assert!((r[0] - pty / (ptp + 0.3)).abs() < 1e-12);
    }

    #[test]
    fn all_negative_regression_fails() {
        let obs: Vec<f64> = (0..30).map(|t| t as f64).collect();
        let p = matrix(30, 2, |t, _| -(t as f64) - 1.0);
        let scheme = WeightScheme::PenalizedRegression { penalty: Penalty::Ridge, strength: 0.1 };
        assert_eq!(compute_weights(&scheme, &p, &obs), Err(EnsembleError::AllZeroWeights));
    }

    #[test]
    fn short_window_rejected() {
        let p = matrix(10, 2, |_, _| 1.0);
        assert!(matches!(compute_weights(&WeightScheme::Equal, &p, &[1.0; 10]), Err(EnsembleError::TooShort { .. })));
    }

    #[test]
    fn mean_examples() {
        assert_eq!(ensemble_mean(&[0.25, 0.75], &[0.0, 4.0]), 3.0);
        assert_eq!(ensemble_mean(&[0.2, 0.3, 0.5], &[7.0, 7.0, 7.0]), 7.0);
        assert!((ensemble_mean(&[1.0 / 3.0; 3], &[1.0, 2.0, 6.0]) - 3.0).abs() < 1e-15);
    }

    #[test]
    fn standard_tree_examples() {
        assert_eq!(standard_tree(&[vec![3.0], vec![5.0]]), vec![4.0]);
        assert_eq!(standard_tree(&[vec![1.0, 2.0]]), vec![1.0, 2.0]);
        // equals the stacked ensemble with weights w/n
        let w = [0.2, 0.8];
        let inits = [[1.0, 5.0], [2.0, 3.0], [9.0, 4.0]];
        let per_init: Vec<Vec<f64>> = inits.iter().map(|r| vec![ensemble_mean(&w, r)]).collect();
        let stacked_w: Vec<f64> = (0..3).flat_map(|_| w.iter().map(|x| x / 3.0)).collect();
        let stacked: Vec<f64> = inits.iter().flatten().copied().collect();
        assert!((standard_tree(&per_init)[0] - ensemble_mean(&stacked_w, &stacked)).abs() < 1e-12);
    }

    #[test]
    fn spread_examples() {
        assert_eq!(spread(&[0.5, 0.5], &[2.0, 4.0], 3.0), 1.0);
        assert_eq!(spread(&[0.3, 0.7], &[5.0, 5.0], 5.0), 0.0);
        assert_eq!(spread(&[1.0, 0.0], &[7.0, 100.0], 7.0), 0.0);
    }

    #[test]
    fn gamma_examples() {
        let obs: Vec<f64> = (0..24).map(|t| 5.0 + t as f64).collect();
        let p = matrix(24, 2, |t, m| if m == 0 { obs[t] - 1.0 } else { obs[t] + 1.0 });
        let w = [0.5, 0.5];
        let (_, s) = summarize(&w, &p);
        assert!((gamma_scale(&w, &p, &obs, &s).unwrap() - 1.0).abs() < 1e-15);
        let single = matrix(24, 1, |t, _| obs[t] + 0.5);
        let (_, s1) = summarize(&[1.0], &single);
        assert_eq!(gamma_scale(&[1.0], &single, &obs, &s1), Err(EnsembleError::ZeroSpread));
    }

    #[test]
    fn gamma_fallback_uses_best_member_residual_sd() {
        let obs: Vec<f64> = (0..48).map(|t| (t as f64 * 0.4).sin() + 3.0).collect();
        let p = matrix(48, 1, |t, _| obs[t] + if t % 2 == 0 { 0.3 } else { -0.1 });
        let g = fit_gamma(&[1.0], &p, &obs).unwrap();
        let sd = 0.2; // residuals alternate -0.3 / +0.1
        assert!((g.surrogate.unwrap() - sd).abs() < 1e-12);
        let rms = ((0.09 + 0.01) / 2.0f64).sqrt();
        assert!((g.gamma - rms / sd).abs() < 1e-12);
    }

    #[test]
    fn interval_examples() {
        let i = interval(&[10.0], &[1.0], 1.0, 0.95).unwrap();
        assert!((i.half_width[0] - 1.959964).abs() < 1e-4);
        let i = interval(&[10.0], &[2.0], 0.5, 0.5).unwrap();
        assert!((i.half_width[0] - 0.67449).abs() < 1e-4);
        let i = interval(&[4.0], &[0.0], 2.0, 0.95).unwrap();
        assert_eq!((i.lower[0], i.upper[0]), (4.0, 4.0));
        let i = interval(&[0.5], &[1.0], 1.0, 0.95).unwrap();
        assert_eq!(i.lower[0], 0.0);
        assert!(interval(&[1.0], &[1.0], 1.0, 1.0).is_err());
    }

    fn window() -> impl Strategy<Value = (DMatrix<f64>, Vec<f64>)> {
        (1usize..6, 24usize..60).prop_flat_map(|(m, t)| {
            (prop::collection::vec(-5.0f64..5.0, m * t), prop::collection::vec(-5.0f64..5.0, t))
                .prop_map(move |(p, o)| (DMatrix::from_vec(t, m, p), o))
        })
    }

    proptest! {
        #[test]
        fn weights_on_simplex((p, obs) in window(), strength in 0.0f64..2.0) {
            for scheme in [
                WeightScheme::Equal,
                WeightScheme::ReciprocalMse,
                WeightScheme::PenalizedRegression { penalty: Penalty::Ridge, strength },
                WeightScheme::PenalizedRegression { penalty: Penalty::Lasso, strength },
            ] {
                match compute_weights(&scheme, &p, &obs) {
                    Ok(w) => prop_assert!(simplex(&w.values), "{scheme:?} {:?}", w.values),
                    Err(EnsembleError::AllZeroWeights) => {
                        let regression = matches!(scheme, WeightScheme::PenalizedRegression { .. });
                        prop_assert!(regression);
                    }
                    Err(e) => prop_assert!(false, "{e}"),
                }
            }
        }

        #[test]
        fn mean_permutation_invariant(w in prop::collection::vec(0.0f64..1.0, 2..8), seed in 0u64..1000) {
            let y: Vec<f64> = (0..w.len()).map(|i| ((i as u64 * 31 + seed) % 17) as f64).collect();
            let mut idx: Vec<usize> = (0..w.len()).collect();
            idx.rotate_left((seed as usize) % w.len());
            idx.swap(0, w.len() - 1);
            let pw: Vec<f64> = idx.iter().map(|&i| w[i]).collect();
            let py: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
            prop_assert!((ensemble_mean(&w, &y) - ensemble_mean(&pw, &py)).abs() < 1e-12);
        }

        #[test]
        fn spread_weighted_variance_identity(raw in prop::collection::vec(0.01f64..1.0, 1..8), ys in prop::collection::vec(-10.0f64..10.0, 8)) {
            let total: f64 = raw.iter().sum();
            let w: Vec<f64> = raw.iter().map(|x| x / total).collect();
            let y = &ys[..w.len()];
            let mean = ensemble_mean(&w, y);
            let s = spread(&w, y, mean);
            let second: f64 = w.iter().zip(y).map(|(a, b)| a * b * b).sum();
            prop_assert!((s * s - (second - mean * mean)).abs() < 1e-10);
        }

        #[test]
        fn gamma_self_calibrates((p, obs) in window()) {
            prop_assume!(p.ncols() > 1);
            let w = compute_weights(&WeightScheme::ReciprocalMse, &p, &obs).unwrap().values;
            let (_, s) = summarize(&w, &p);
            let g = gamma_scale(&w, &p, &obs, &s).unwrap();
            let lhs: f64 = s.iter().map(|v| (g * v).powi(2)).sum();
            let rhs = weighted_error(&w, &p, &obs);
            prop_assert!((lhs - rhs).abs() <= 1e-10 * rhs.max(1.0));
        }

        #[test]
        fn reciprocal_invariant_to_mse_scaling((p, obs) in window(), c in 0.1f64..10.0) {
            // scaling all errors by √c scales every MSE by c
            let k = c.sqrt();
            let scaled = DMatrix::from_fn(p.nrows(), p.ncols(), |t, m| obs[t] + k * (p[(t, m)] - obs[t]));
            let a = compute_weights(&WeightScheme::ReciprocalMse, &p, &obs).unwrap().values;
            let b = compute_weights(&WeightScheme::ReciprocalMse, &scaled, &obs).unwrap().values;
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-10);
            }
        }
    }
}
