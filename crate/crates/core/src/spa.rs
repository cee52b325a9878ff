//! Superior predictive ability test with a day-block stationary bootstrap
//! and autocovariances pooled across trees.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SPA_SCHEMA_VERSION: u32 = 1;
pub const OMEGA_FLOOR: f64 = 1e-12;
pub const MIN_REPLICATES: usize = 200;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpaError {
    #[error("series length {0} is not a whole number of days")]
    NotWholeDays(usize),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("lag {tau} is not below the series length {n}")]
    LagTooLarge { tau: usize, n: usize },
    #[error("at least {MIN_REPLICATES} bootstrap replicates are required, got {0}")]
    TooFewReplicates(usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("non-finite loss differential for tree {tree}, competitor {k}, hour {t}")]
    NonFinite { tree: usize, k: usize, t: usize },
}

pub type Result<T> = std::result::Result<T, SpaError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    #[default]
    SquaredError,
    AbsoluteError,
}

impl Loss {
    pub fn eval(self, obs: f64, pred: f64) -> f64 {
        match self {
            Loss::SquaredError => (obs - pred).powi(2),
            Loss::AbsoluteError => (obs - pred).abs(),
        }
    }
}

/// `d_kt = L(Y_t, Ŷ_0t) − L(Y_t, Ŷ_kt)` as an n×m matrix for one tree.
/// Positive entries mean competitor k beat the benchmark.
pub fn loss_diffs(bench: &[f64], competitors: &[Vec<f64>], obs: &[f64], loss: Loss) -> Result<DMatrix<f64>> {
    let n = obs.len();
    if bench.len() != n {
        return Err(SpaError::LengthMismatch(format!("benchmark has {} values, observations {n}", bench.len())));
    }
    if competitors.is_empty() {
        return Err(SpaError::LengthMismatch("no competitors".into()));
    }
    for (k, c) in competitors.iter().enumerate() {
        if c.len() != n {
            return Err(SpaError::LengthMismatch(format!("competitor {k} has {} values, observations {n}", c.len())));
        }
    }
    Ok(DMatrix::from_fn(n, competitors.len(), |t, k| loss.eval(obs[t], bench[t]) - loss.eval(obs[t], competitors[k][t])))
}

/// Loss differentials for every tree, all on a shared hourly index.
#[derive(Debug, Clone, PartialEq)]
pub struct LossDiffPanel {
    trees: Vec<DMatrix<f64>>,
    pub loss: Loss,
}

impl LossDiffPanel {
    pub fn new(trees: Vec<DMatrix<f64>>, loss: Loss) -> Result<Self> {
        let first = trees.first().ok_or_else(|| SpaError::LengthMismatch("no trees".into()))?;
        let (n, m) = first.shape();
        if n == 0 || n % 24 != 0 {
            return Err(SpaError::NotWholeDays(n));
        }
        if m == 0 {
            return Err(SpaError::LengthMismatch("no competitors".into()));
        }
        for (i, d) in trees.iter().enumerate() {
            if d.shape() != (n, m) {
                return Err(SpaError::LengthMismatch(format!("tree {i} has shape {:?}, expected {:?}", d.shape(), (n, m))));
            }
            if let Some(pos) = d.iter().position(|v| !v.is_finite()) {
                return Err(SpaError::NonFinite { tree: i, k: pos / n, t: pos % n });
            }
        }
        Ok(Self { trees, loss })
    }

    pub fn n(&self) -> usize {
        self.trees[0].nrows()
    }

    pub fn competitors(&self) -> usize {
        self.trees[0].ncols()
    }

    pub fn days(&self) -> usize {
        self.n() / 24
    }

    pub fn trees(&self) -> &[DMatrix<f64>] {
        &self.trees
    }

    /// Pooled mean `d̄_k`: the average over trees of each tree's mean.
    pub fn dbar(&self) -> Vec<f64> {
        (0..self.competitors())
            .map(|k| self.trees.iter().map(|d| d.column(k).mean()).sum::<f64>() / self.trees.len() as f64)
            .collect()
    }
}

/// `γ̂_k(τ)` averaged over trees, 1/n divisor.
pub fn pooled_autocov(panel: &LossDiffPanel, k: usize, tau: usize) -> Result<f64> {
    let n = panel.n();
    if tau >= n {
        return Err(SpaError::LagTooLarge { tau, n });
    }
    if k >= panel.competitors() {
        return Err(SpaError::InvalidParameter(format!("competitor {k} out of range")));
    }
    let total: f64 = panel
        .trees
        .iter()
        .map(|d| {
            let col = d.column(k);
            let mean = col.mean();
            (0..n - tau).map(|t| (col[t] - mean) * (col[t + tau] - mean)).sum::<f64>() / n as f64
        })
        .sum();
    Ok(total / panel.trees.len() as f64)
}

/// `κ(n, τ) = (n−τ)/n·(1−q)^τ + τ/n·(1−q)^(n−τ)`.
pub fn kappa(n: usize, tau: usize, q: f64) -> f64 {
    let (nf, tf) = (n as f64, tau as f64);
    (nf - tf) / nf * (1.0 - q).powf(tf) + tf / nf * (1.0 - q).powf(nf - tf)
}

/// Geometric parameter for hourly data when blocks average `p_star_days` days.
pub fn q_from_pstar(p_star_days: f64) -> f64 {
    1.0 / (p_star_days * 24.0)
}

/// FFT autocovariance workspace for a fixed length, reused across replicates.
struct OmegaPlan {
    n: usize,
    weights: Vec<f64>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    buf: Vec<Complex<f64>>,
    scratch: Vec<Complex<f64>>,
}

impl OmegaPlan {
    fn new(n: usize, q: f64) -> Self {
        let len = 2 * n;
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(len);
        let inv = planner.plan_fft_inverse(len);
        let scratch_len = fwd.get_inplace_scratch_len().max(inv.get_inplace_scratch_len());
        let mut weights: Vec<f64> = (0..n).map(|tau| 2.0 * kappa(n, tau, q)).collect();
        weights[0] = 1.0;
        Self { n, weights, fwd, inv, buf: vec![Complex::default(); len], scratch: vec![Complex::default(); scratch_len] }
    }

    /// Unnormalised `Σ_t (x_t − x̄)(x_{t+τ} − x̄)` for every τ, in `buf[τ].re · len`.
    fn autocov_sums(&mut self, x: impl Iterator<Item = f64> + Clone) {
        let mean = x.clone().sum::<f64>() / self.n as f64;
        for (slot, v) in self.buf.iter_mut().zip(x) {
            *slot = Complex::new(v - mean, 0.0);
        }
        for slot in &mut self.buf[self.n..] {
            *slot = Complex::default();
        }
        self.fwd.process_with_scratch(&mut self.buf, &mut self.scratch);
        for v in &mut self.buf {
            *v = Complex::new(v.norm_sqr(), 0.0);
        }
        self.inv.process_with_scratch(&mut self.buf, &mut self.scratch);
    }

    /// `ω̂²` contribution of one series: `γ(0) + 2Σκ(τ)γ(τ)`.
    fn omega2(&mut self, x: impl Iterator<Item = f64> + Clone) -> f64 {
        self.autocov_sums(x);
        let norm = (self.n * self.buf.len()) as f64;
        self.weights.iter().zip(&self.buf).map(|(w, c)| w * c.re).sum::<f64>() / norm
    }
}

fn floor_omega(omega2: f64) -> f64 {
    omega2.max(OMEGA_FLOOR).sqrt()
}

/// `ω̂_k = √max(γ̂_k(0) + 2Σ κ(n,τ) γ̂_k(τ), ε)` with pooled autocovariances.
pub fn omega(panel: &LossDiffPanel, k: usize, q: f64) -> Result<f64> {
    if k >= panel.competitors() {
        return Err(SpaError::InvalidParameter(format!("competitor {k} out of range")));
    }
    Ok(omegas(panel, q)?[k])
}

/// `ω̂_k` for every competitor.
pub fn omegas(panel: &LossDiffPanel, q: f64) -> Result<Vec<f64>> {
    check_q(q)?;
    let mut plan = OmegaPlan::new(panel.n(), q);
    Ok(omegas_with(&mut plan, panel.trees.iter().map(|d| DayView { d, map: None }).collect::<Vec<_>>().as_slice()))
}

fn check_q(q: f64) -> Result<()> {
    if !(q > 0.0 && q < 1.0) {
        return Err(SpaError::InvalidParameter(format!("q = {q} must lie in (0, 1)")));
    }
    Ok(())
}

/// A tree's loss matrix, optionally read through a day resampling map.
struct DayView<'a> {
    d: &'a DMatrix<f64>,
    map: Option<&'a DayMap>,
}

impl DayView<'_> {
    fn column(&self, k: usize) -> impl Iterator<Item = f64> + Clone + '_ {
        let col = self.d.column(k);
        let n = self.d.nrows();
        (0..n).map(move |t| col[self.map.map_or(t, |m| m.source_hour(t))])
    }
}

fn omegas_with(plan: &mut OmegaPlan, views: &[DayView]) -> Vec<f64> {
    let m = views[0].d.ncols();
    (0..m)
        .map(|k| {
            let total: f64 = views.iter().map(|v| plan.omega2(v.column(k))).sum();
            floor_omega(total / views.len() as f64)
        })
        .collect()
}

/// `T = max{max_k √n·d̄_k/ω̂_k, 0}`.
pub fn spa_statistic(dbar: &[f64], omegas: &[f64], n: usize) -> f64 {
    let root_n = (n as f64).sqrt();
    dbar.iter().zip(omegas).map(|(d, w)| root_n * d / w).fold(0.0, f64::max)
}

/// Source day for each day of a resampled series.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DayMap {
    pub days: Vec<usize>,
}

impl DayMap {
    pub fn identity(days: usize) -> Self {
        Self { days: (0..days).collect() }
    }

    /// Concatenate blocks `(start_day, len_days)`, wrapping past the last
    /// day and truncating the final block at `days`.
    pub fn from_blocks(days: usize, blocks: &[(usize, usize)]) -> Self {
        let mut out = Vec::with_capacity(days);
        'fill: for &(start, len) in blocks {
            for j in 0..len {
                if out.len() == days {
                    break 'fill;
                }
                out.push((start + j) % days);
            }
        }
        Self { days: out }
    }

    pub fn source_hour(&self, t: usize) -> usize {
        self.days[t / 24] * 24 + t % 24
    }

    /// Hourly positions where a new block begins.
    pub fn splice_points(&self) -> Vec<usize> {
        let n_days = self.days.len();
        (0..n_days)
            .filter(|&i| i == 0 || self.days[i] != (self.days[i - 1] + 1) % n_days.max(1))
            .map(|i| i * 24)
            .collect()
    }

    /// Apply to a panel, resampling every tree and competitor jointly.
    pub fn apply(&self, panel: &LossDiffPanel) -> LossDiffPanel {
        let n = panel.n();
        let trees = panel.trees.iter().map(|d| DMatrix::from_fn(n, d.ncols(), |t, k| d[(self.source_hour(t), k)])).collect();
        LossDiffPanel { trees, loss: panel.loss }
    }
}

/// Random block structure of one replicate: uniform start days, geometric
/// lengths in days with mean `p_star_days`.
pub fn draw_day_map(days: usize, p_star_days: f64, rng: &mut impl Rng) -> Result<DayMap> {
    if days == 0 {
        return Err(SpaError::NotWholeDays(0));
    }
    if !(p_star_days >= 1.0 && p_star_days.is_finite()) {
        return Err(SpaError::InvalidParameter(format!("p_star_days = {p_star_days} must be at least 1")));
    }
    let geom = Geometric::new(1.0 / p_star_days).map_err(|e| SpaError::InvalidParameter(e.to_string()))?;
    let mut blocks = vec![];
    let mut filled = 0;
    while filled < days {
        let start = rng.gen_range(0..days);
        let len = (geom.sample(rng) as usize).saturating_add(1);
        blocks.push((start, len));
        filled = filled.saturating_add(len);
    }
    Ok(DayMap::from_blocks(days, &blocks))
}

fn replicate_rng(seed: u64, b: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(b as u64);
    rng
}

/// `B` day maps; replicate `b` draws from its own stream of `seed`.
pub fn day_block_bootstrap(panel: &LossDiffPanel, p_star_days: f64, replicates: usize, seed: u64) -> Result<Vec<DayMap>> {
    (0..replicates).map(|b| draw_day_map(panel.days(), p_star_days, &mut replicate_rng(seed, b))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaResult {
    pub schema_version: u32,
    pub statistic: f64,
    pub p_value: f64,
    pub omegas: Vec<f64>,
    pub dbar: Vec<f64>,
    pub n: usize,
    pub trees: usize,
    pub replicates: usize,
    pub p_star_days: f64,
    pub q: f64,
    pub seed: u64,
    pub loss: Loss,
}

/// Consistent recentering `g(d̄) = d̄·1{√n·d̄/ω̂ ≥ −√(2 ln ln n)}`.
pub fn recentering(dbar: f64, omega: f64, n: usize) -> f64 {
    let nf = n as f64;
    let threshold = -(2.0 * nf.ln().ln()).sqrt();
    if nf.sqrt() * dbar / omega >= threshold {
        dbar
    } else {
        0.0
    }
}

/// SPA p-value from `replicates` day-block bootstrap replicates. The
/// bootstrap statistic recomputes `ω̂` on every replicate.
pub fn spa_pvalue(panel: &LossDiffPanel, p_star_days: f64, replicates: usize, seed: u64) -> Result<SpaResult> {
    if replicates < MIN_REPLICATES {
        return Err(SpaError::TooFewReplicates(replicates));
    }
    let q = q_from_pstar(p_star_days);
    check_q(q)?;
    let n = panel.n();
    let mut plan = OmegaPlan::new(n, q);
    let base: Vec<DayView> = panel.trees.iter().map(|d| DayView { d, map: None }).collect();
    let omegas = omegas_with(&mut plan, &base);
    let dbar = panel.dbar();
    let statistic = spa_statistic(&dbar, &omegas, n);
    let centre: Vec<f64> = dbar.iter().zip(&omegas).map(|(d, w)| recentering(*d, *w, n)).collect();

    let mut exceed = 0usize;
    for b in 0..replicates {
        let map = draw_day_map(panel.days(), p_star_days, &mut replicate_rng(seed, b))?;
        let views: Vec<DayView> = panel.trees.iter().map(|d| DayView { d, map: Some(&map) }).collect();
        let star_omegas = omegas_with(&mut plan, &views);
        let star: Vec<f64> = (0..panel.competitors())
            .map(|k| {
                let mean = views.iter().map(|v| v.column(k).sum::<f64>() / n as f64).sum::<f64>() / views.len() as f64;
                mean - centre[k]
            })
            .collect();
        if spa_statistic(&star, &star_omegas, n) >= statistic {
            exceed += 1;
        }
    }
    Ok(SpaResult {
        schema_version: SPA_SCHEMA_VERSION,
        statistic,
        p_value: exceed as f64 / replicates as f64,
        omegas,
        dbar,
        n,
        trees: panel.trees.len(),
        replicates,
        p_star_days,
        q,
        seed,
        loss: panel.loss,
    })
}
