use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{Design, ModelError, Result};

/// `10^-4 .. 10^6` in half-decade steps (21 points).
pub fn lambda_grid() -> Vec<f64> {
    (0..21).map(|i| 10f64.powf(-4.0 + 0.5 * i as f64)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Candidate smoothing parameters, ascending.
    pub grid: Vec<f64>,
    /// Coordinate-wise passes over the penalty components.
    pub sweeps: usize,
    /// Starting smoothing parameters (warm start); must match the number of
    /// penalty components to be used.
    pub initial: Option<Vec<f64>>,
    pub min_rows_per_column: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { grid: lambda_grid(), sweeps: 2, initial: None, min_rows_per_column: 10.0 }
    }
}

/// Solution of the penalised least-squares problem at the selected lambdas.
#[derive(Debug, Clone, PartialEq)]
pub struct PenalizedFit {
    pub coefficients: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub edf: f64,
    pub rss: f64,
    pub tss: f64,
    pub gcv: f64,
    pub sigma2: f64,
    pub deviance_explained: f64,
    pub fitted: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Normal-equation pieces reused across lambda evaluations.
pub(crate) struct Gram<'a> {
    design: &'a Design,
    xtx: DMatrix<f64>,
    xty: DVector<f64>,
}

pub(crate) struct Evaluation {
    pub beta: DVector<f64>,
    pub edf: f64,
    pub rss: f64,
    pub gcv: f64,
}

impl<'a> Gram<'a> {
    pub fn new(design: &'a Design) -> Self {
        let xt = design.x.transpose();
        Self { design, xtx: &xt * &design.x, xty: &xt * &design.y }
    }

    pub fn evaluate(&self, lambdas: &[f64]) -> Result<Evaluation> {
        let mut a = self.xtx.clone();
        for (p, &lambda) in self.design.penalties.iter().zip(lambdas) {
            let w = p.matrix.nrows();
            let mut view = a.view_mut((p.offset, p.offset), (w, w));
            view += &p.matrix * lambda;
        }
        let chol = a.cholesky().ok_or(ModelError::SingularSystem)?;
        let beta = chol.solve(&self.xty);
        if beta.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::SingularSystem);
        }
        let edf = chol.solve(&self.xtx).trace();
        let resid = &self.design.y - &self.design.x * &beta;
        let rss = resid.norm_squared();
        let n = self.design.nrows() as f64;
        let denom = (n - edf).max(f64::EPSILON);
        Ok(Evaluation { beta, edf, rss, gcv: n * rss / (denom * denom) })
    }
}

/// Minimise `|y - X b|^2 + sum_j lambda_j b' S_j b`, choosing each lambda by
/// coordinate-wise GCV search over `opts.grid`.
pub fn fit_penalized(design: &Design, opts: &FitOptions) -> Result<PenalizedFit> {
    let gram = Gram::new(design);
    let m = design.penalties.len();
    let mut lambdas = match &opts.initial {
        Some(init) if init.len() == m => init.clone(),
        _ => vec![1.0; m],
    };
    let n = design.nrows() as f64;
    let ybar = design.y.mean();
    let tss: f64 = design.y.iter().map(|v| (v - ybar) * (v - ybar)).sum();
    // GCV values closer than this are ties; ties go to the larger lambda
    let tie = 1e-12 * (tss / n).max(f64::MIN_POSITIVE);

    let mut warnings = Vec::new();
    let mut best = gram.evaluate(&lambdas)?;
    if m > 0 && !opts.grid.is_empty() {
        for _ in 0..opts.sweeps.max(1) {
            for j in 0..m {
                let mut trial = lambdas.clone();
                let mut chosen: Option<(f64, Evaluation)> = None;
                for &g in &opts.grid {
                    trial[j] = g;
                    let Ok(e) = gram.evaluate(&trial) else { continue };
                    let better = match &chosen {
                        None => true,
                        Some((_, c)) => e.gcv <= c.gcv * (1.0 + 1e-9) + tie,
                    };
                    if better {
                        chosen = Some((g, e));
                    }
                }
                let (g, e) = chosen.ok_or(ModelError::SingularSystem)?;
                lambdas[j] = g;
                best = e;
            }
        }
        let (lo, hi) = (opts.grid[0], opts.grid[opts.grid.len() - 1]);
        for (j, &l) in lambdas.iter().enumerate() {
            if l == lo || l == hi {
                warnings.push(format!("smoothing parameter {j} on grid boundary ({l:e})"));
            }
        }
    }

    let fitted = &design.x * &best.beta;
    let edf = best.edf;
    Ok(PenalizedFit {
        coefficients: best.beta.iter().copied().collect(),
        lambdas,
        edf,
        rss: best.rss,
        tss,
        gcv: best.gcv,
        sigma2: best.rss / (n - edf).max(f64::EPSILON),
        deviance_explained: if tss > 0.0 { (1.0 - best.rss / tss).clamp(0.0, 1.0) } else { 1.0 },
        fitted: fitted.iter().copied().collect(),
        warnings,
    })
}

/// Effective degrees of freedom and GCV at fixed lambdas.
pub fn evaluate_at(design: &Design, lambdas: &[f64]) -> Result<(f64, f64)> {
    let e = Gram::new(design).evaluate(lambdas)?;
    Ok((e.edf, e.gcv))
}
