//! Rolling ensemble forecasting of group water-use.
//!
//! At each window start `t` the driver (re)fits one member per tree and
//! flexible covariate on data before `t`, scores every member against every
//! tree over the trailing weight window, forecasts the next window from each
//! tree's last observation, averages the per-tree ensembles into the standard
//! tree and converts to daily water-use with uncertainty bands.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use chrono::{DateTime, NaiveDate, Utc};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ensemble::{self, EnsembleError, GammaFit, WeightScheme};
use crate::model::{FitOptions, FittedModel, FlexibleCovariate, Forecaster, ModelError, ModelSpec, StandardOptions};
use crate::series::{day_of, AlignedFrame, SeriesError, TimeSeries};
use crate::stats;
use crate::wateruse::{self, TreeRecord, WaterUseError};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RollingError {
    #[error("frame covers {found_days:.2} days, need at least {needed_days} (initial + one window)")]
    InsufficientHistory { needed_days: usize, found_days: f64 },
    #[error("invalid rolling configuration: {0}")]
    InvalidConfig(String),
    #[error("tree `{0}` has no flux column")]
    MissingTree(String),
    #[error("no ensemble member is usable for the window starting {0}")]
    NoMembers(DateTime<Utc>),
    #[error("no tree has an observation to seed the window starting {0}")]
    NoInitialCondition(DateTime<Utc>),
    #[error("scale must be positive and finite")]
    ScaleMissing,
    #[error("no historical observation for day-of-year {doy} hour {hour} of tree `{tree}`")]
    InitUnavailable { tree: String, doy: u32, hour: u32 },
    #[error("report and observations do not overlap")]
    NoOverlap,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    WaterUse(#[from] WaterUseError),
    #[error(transparent)]
    Series(#[from] SeriesError),
}

pub type Result<T> = std::result::Result<T, RollingError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Refit every member at each window start.
    #[default]
    Refit,
    /// Fit members once on the initial period and keep them.
    FrozenMembers,
}

/// How hourly errors combine into a daily water-use standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DailyErrorModel {
    /// Hourly errors independent: `A*·Δ·√Σ(γS)²`.
    #[default]
    Independent,
    /// Hourly errors fully correlated within a day: `A*·Δ·Σ γS`.
    Correlated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RollingConfig {
    pub initial_days: usize,
    pub window_days: usize,
    pub weight_window_days: usize,
    pub model_types: Vec<FlexibleCovariate>,
    pub weight_scheme: WeightScheme,
    pub interval_level: f64,
    pub mode: Mode,
    pub model: StandardOptions,
    /// Complete rows required per design column when fitting members.
    pub min_rows_per_column: f64,
    pub daily_error: DailyErrorModel,
}

impl Default for RollingConfig {
    fn default() -> Self {
        Self {
            initial_days: 14,
            window_days: 7,
            weight_window_days: 14,
            model_types: FlexibleCovariate::ALL.to_vec(),
            weight_scheme: WeightScheme::ReciprocalMse,
            interval_level: 0.95,
            mode: Mode::Refit,
            model: StandardOptions::default(),
            min_rows_per_column: 5.0,
            daily_error: DailyErrorModel::Independent,
        }
    }
}

impl RollingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(RollingError::InvalidConfig(m.into()));
        if self.window_days < 1 {
            return bad("window_days must be >= 1");
        }
        if self.weight_window_days < 1 || self.weight_window_days > self.initial_days {
            return bad("weight_window_days must satisfy 1 <= weight_window_days <= initial_days");
        }
        if self.model_types.is_empty() {
            return bad("model_types must name at least one flexible covariate");
        }
        if !(self.interval_level > 0.0 && self.interval_level < 1.0) {
            return bad("interval_level must lie in (0, 1)");
        }
        if !(self.min_rows_per_column > 0.0) {
            return bad("min_rows_per_column must be > 0");
        }
        if let WeightScheme::PenalizedRegression { strength, .. } = self.weight_scheme {
            if !(strength >= 0.0) {
                return bad("penalty strength must be >= 0");
            }
        }
        Ok(())
    }
}

/// One ensemble element: a model of one tree's flux.
#[derive(Clone)]
pub struct Member {
    pub id: String,
    /// Tree whose data the member was trained on.
    pub tree: String,
    pub model: Arc<dyn Forecaster>,
}

impl fmt::Debug for Member {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Member").field("id", &self.id).field("tree", &self.tree).finish()
    }
}

impl Member {
    pub fn new(id: impl Into<String>, tree: impl Into<String>, model: Arc<dyn Forecaster>) -> Self {
        Self { id: id.into(), tree: tree.into(), model }
    }

    /// Member named `<tree>/<flexible covariate>` after the model's spec.
    pub fn from_fitted(model: FittedModel) -> Self {
        let tree = model.spec.response.clone();
        let kind = model.spec.flexible_covariate.map_or("custom", |f| f.column());
        Self { id: member_id(&tree, kind), tree, model: Arc::new(model) }
    }
}

pub fn member_id(tree: &str, kind: &str) -> String {
    format!("{tree}/{kind}")
}

/// Per-window bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowRecord {
    pub start: DateTime<Utc>,
    pub start_row: usize,
    pub len: usize,
    pub member_ids: Vec<String>,
    /// Weight per member; excluded members hold exactly 0.
    pub weights: Vec<f64>,
    pub excluded: Vec<String>,
    pub gamma: f64,
    /// Constant spread used when the ensemble spread collapsed.
    pub spread_surrogate: Option<f64>,
    /// Covariate values clamped to training ranges, summed over members and
    /// initial conditions.
    pub clamp_count: usize,
    /// Per-init ensemble means over the window, keyed by init tree.
    pub per_init: BTreeMap<String, Vec<f64>>,
    pub warnings: Vec<String>,
}

/// Hourly standard-tree forecast over the evaluation span.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HourlyForecast {
    pub timestamps: Vec<DateTime<Utc>>,
    pub prediction: Vec<f64>,
    /// Spread actually scaled by γ (surrogate when the ensemble collapsed).
    pub spread: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub half_width: Vec<f64>,
    /// `γ·S_t`, the hourly error standard deviation.
    pub error_sd: Vec<f64>,
    /// Mean observed flux over the trees, when any tree is observed.
    pub observed: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DailyForecast {
    pub days: Vec<NaiveDate>,
    pub predicted_liters: Vec<f64>,
    pub lower_liters: Vec<f64>,
    pub upper_liters: Vec<f64>,
    pub sd_liters: Vec<f64>,
    /// Fully correlated bound `A*·Δ·Σ γS_t`, reported whatever `daily_error` is.
    pub sd_correlated_liters: Vec<f64>,
    /// Group water-use from observed flux where every hour is observed.
    pub observed_liters: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RollingReport {
    pub schema_version: u32,
    pub config: RollingConfig,
    pub trees: Vec<String>,
    /// `A* = Σ N_i A_i`, cm².
    pub total_area_cm2: f64,
    /// Multiplier applied to member outputs (1 unless normalised).
    pub scale: f64,
    pub windows: Vec<WindowRecord>,
    pub hourly: HourlyForecast,
    pub daily: DailyForecast,
}

/// Where members come from at each window.
enum MemberSource<'a> {
    Refit,
    Fixed(&'a [Member]),
}

/// Source of the responses used to seed rolling predictions.
type Seed<'a> = dyn Fn(usize, usize) -> Result<Option<f64>> + 'a;

struct Engine<'a> {
    frame: &'a AlignedFrame,
    trees: &'a [TreeRecord],
    config: &'a RollingConfig,
    /// `seed(tree_index, row)`: response of that tree at that row.
    seed: &'a Seed<'a>,
    scale: f64,
}

fn frame_days(frame: &AlignedFrame) -> f64 {
    frame.len() as f64 / frame.rows_per_day() as f64
}

fn check_inputs(frame: &AlignedFrame, trees: &[TreeRecord], config: &RollingConfig) -> Result<()> {
    config.validate()?;
    if trees.is_empty() {
        return Err(RollingError::InvalidConfig("at least one tree is required".into()));
    }
    for t in trees {
        if !frame.has(&t.id) {
            return Err(RollingError::MissingTree(t.id.clone()));
        }
        t.sapwood_area()?;
    }
    let needed = config.initial_days + config.window_days;
    if frame.len() < needed * frame.rows_per_day() {
        return Err(RollingError::InsufficientHistory { needed_days: needed, found_days: frame_days(frame) });
    }
    Ok(())
}

/// Fitted members, their selected smoothing parameters and the failures.
pub struct MemberFits {
    pub members: Vec<Member>,
    pub models: Vec<FittedModel>,
    pub failures: Vec<(String, ModelError)>,
}

/// Fit one member per (tree, flexible covariate) on `train`, warm-starting
/// smoothing parameters from `warm` by member id.
pub fn fit_members(
    train: &AlignedFrame,
    trees: &[TreeRecord],
    config: &RollingConfig,
    warm: &BTreeMap<String, Vec<f64>>,
) -> MemberFits {
    let mut models = Vec::new();
    let mut members = Vec::new();
    let mut failures = Vec::new();
    for tree in trees {
        for &kind in &config.model_types {
            let id = member_id(&tree.id, kind.column());
            let spec = ModelSpec::standard(tree.id.clone(), kind, &config.model);
            let opts = FitOptions {
                initial: warm.get(&id).cloned(),
                min_rows_per_column: config.min_rows_per_column,
                ..FitOptions::default()
            };
            match FittedModel::fit(&spec, train, &opts) {
                Ok(m) => {
                    members.push(Member { id, tree: tree.id.clone(), model: Arc::new(m.clone()) });
                    models.push(m);
                }
                Err(e) => failures.push((id, e)),
            }
        }
    }
    MemberFits { members, models, failures }
}

impl Engine<'_> {
    fn rows_per_day(&self) -> usize {
        self.frame.rows_per_day()
    }

    fn seed_history(&self, tree: usize, row: usize, lag: usize) -> Result<Option<Vec<f64>>> {
        if row < lag {
            return Ok(None);
        }
        let mut h = Vec::with_capacity(lag);
        for r in row - lag..row {
            match (self.seed)(tree, r)? {
                Some(v) => h.push(v),
                None => return Ok(None),
            }
        }
        Ok(Some(h))
    }

    fn observed(&self, tree: usize, row: usize) -> Option<f64> {
        self.frame.value(&self.trees[tree].id, row)
    }

    fn run(&self, source: MemberSource) -> Result<RollingReport> {
        let cfg = self.config;
        let rpd = self.rows_per_day();
        let first = cfg.initial_days * rpd;
        let step = cfg.window_days * rpd;
        let n_trees = self.trees.len();
        let mut windows = Vec::new();
        let mut hourly = HourlyForecast {
            timestamps: vec![],
            prediction: vec![],
            spread: vec![],
            lower: vec![],
            upper: vec![],
            half_width: vec![],
            error_sd: vec![],
            observed: vec![],
        };
        let mut warm: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut frozen: Option<Vec<Member>> = None;

        let mut t = first;
        while t < self.frame.len() {
            let len = step.min(self.frame.len() - t);
            let start = self.frame.timestamp(t);
            let mut warnings = Vec::new();

            let members: Vec<Member> = match (&source, cfg.mode) {
                (MemberSource::Fixed(m), _) => m.to_vec(),
                (MemberSource::Refit, Mode::FrozenMembers) if frozen.is_some() => frozen.clone().unwrap(),
                (MemberSource::Refit, mode) => {
                    let train = self.frame.window(0, t);
                    let fits = fit_members(&train, self.trees, cfg, &warm);
                    for (id, e) in fits.failures {
                        warnings.push(format!("member {id} excluded: {e}"));
                    }
                    for (m, f) in fits.members.iter().zip(&fits.models) {
                        warm.insert(m.id.clone(), f.lambdas.clone());
                    }
                    let fitted = fits.members;
                    if mode == Mode::FrozenMembers {
                        frozen = Some(fitted.clone());
                    }
                    fitted
                }
            };
            let member_ids: Vec<String> = match (&source, cfg.mode) {
                (MemberSource::Refit, _) => self
                    .trees
                    .iter()
                    .flat_map(|tr| cfg.model_types.iter().map(move |k| member_id(&tr.id, k.column())))
                    .collect(),
                (MemberSource::Fixed(m), _) => m.iter().map(|m| m.id.clone()).collect(),
            };
            let max_lag = members.iter().map(|m| m.model.max_lag()).max().unwrap_or(1);

            // forecasts per member and init tree
            let mut active: Vec<usize> = Vec::new();
            let mut forecasts: Vec<Vec<Option<Vec<f64>>>> = Vec::new();
            let mut clamp_count = 0;
            let inits: Vec<Option<Vec<f64>>> =
                (0..n_trees).map(|i| self.seed_history(i, t, max_lag)).collect::<Result<_>>()?;
            if inits.iter().all(Option::is_none) {
                return Err(RollingError::NoInitialCondition(start));
            }
            'member: for (mi, m) in members.iter().enumerate() {
                let mut per_init = Vec::with_capacity(n_trees);
                let mut clamps = 0;
                for init in &inits {
                    match init {
                        Some(h) => match m.model.rolling_predict(self.frame, t, len, h) {
                            Ok(p) => {
                                clamps += p.clamp_count;
                                per_init.push(Some(p.values.observed()));
                            }
                            Err(e) => {
                                warnings.push(format!("member {} excluded: {e}", m.id));
                                continue 'member;
                            }
                        },
                        None => per_init.push(None),
                    }
                }
                clamp_count += clamps;
                active.push(mi);
                forecasts.push(per_init);
            }

            // score members on the trailing weight window, stacked over inits
            let w_rows = cfg.weight_window_days * rpd;
            let w_start = t.saturating_sub(w_rows).max(max_lag);
            let w_len = t - w_start;
            let mut scored: Vec<(usize, Vec<Vec<Option<f64>>>)> = Vec::new();
            let w_inits: Vec<Option<Vec<f64>>> =
                (0..n_trees).map(|i| self.seed_history(i, w_start, max_lag)).collect::<Result<_>>()?;
            'score: for (ai, &mi) in active.iter().enumerate() {
                let m = &members[mi];
                let mut per_init = Vec::with_capacity(n_trees);
                for init in &w_inits {
                    match init {
                        Some(h) => match m.model.rolling_predict(self.frame, w_start, w_len, h) {
                            Ok(p) => per_init.push(p.values.values().to_vec()),
                            Err(e) => {
                                warnings.push(format!("member {} excluded: {e}", m.id));
                                continue 'score;
                            }
                        },
                        None => per_init.push(vec![None; w_len]),
                    }
                }
                scored.push((ai, per_init));
            }
            if scored.is_empty() {
                return Err(RollingError::NoMembers(start));
            }
            let mut rows: Vec<(usize, usize)> = Vec::new();
            for i in 0..n_trees {
                if w_inits[i].is_none() {
                    continue;
                }
                for r in 0..w_len {
                    if self.observed(i, w_start + r).is_some() {
                        rows.push((i, r));
                    }
                }
            }
            let preds = DMatrix::from_fn(rows.len(), scored.len(), |k, j| {
                let (i, r) = rows[k];
                scored[j].1[i][r].expect("full window prediction")
            });
            let obs: Vec<f64> = rows.iter().map(|&(i, r)| self.observed(i, w_start + r).unwrap()).collect();
            let (weights, gamma) = match ensemble::compute_weights(&cfg.weight_scheme, &preds, &obs) {
                Ok(w) => {
                    warnings.extend(w.warnings.iter().cloned());
                    let g = ensemble::fit_gamma(&w.values, &preds, &obs)?;
                    if g.surrogate.is_some() {
                        warnings.push("ensemble spread collapsed; using best member residual SD".into());
                    }
                    (w.values, g)
                }
                Err(EnsembleError::TooShort { found, .. }) => {
                    warnings.push(format!("only {found} observed rows in weight window; equal weights, unit gamma"));
                    (vec![1.0 / scored.len() as f64; scored.len()], GammaFit { gamma: 1.0, surrogate: None })
                }
                Err(e) => return Err(e.into()),
            };

            // standard tree and pooled spread over all inits and members
            let used: Vec<usize> = (0..n_trees).filter(|&i| inits[i].is_some()).collect();
            let n_used = used.len() as f64;
            let mut per_init_means: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for &i in &used {
                let mean = (0..len)
                    .map(|h| {
                        scored
                            .iter()
                            .zip(&weights)
                            .map(|((ai, _), w)| w * forecasts[*ai][i].as_ref().unwrap()[h])
                            .sum::<f64>()
                    })
                    .collect();
                per_init_means.insert(self.trees[i].id.clone(), mean);
            }
            let stacked: Vec<Vec<f64>> = used.iter().map(|&i| per_init_means[&self.trees[i].id].clone()).collect();
            let standard = ensemble::standard_tree(&stacked);
            let z = stats::normal_critical(cfg.interval_level);
            for h in 0..len {
                let mut s2 = 0.0;
                for &i in &used {
                    for ((ai, _), w) in scored.iter().zip(&weights) {
                        let d = forecasts[*ai][i].as_ref().unwrap()[h] - standard[h];
                        s2 += w / n_used * d * d;
                    }
                }
                let s = gamma.effective_spread(s2.sqrt()) * self.scale;
                let pred = standard[h] * self.scale;
                let sd = gamma.gamma * s;
                hourly.timestamps.push(self.frame.timestamp(t + h));
                hourly.prediction.push(pred);
                hourly.spread.push(s);
                hourly.error_sd.push(sd);
                hourly.half_width.push(z * sd);
                hourly.lower.push((pred - z * sd).max(0.0));
                hourly.upper.push(pred + z * sd);
                let obs: Vec<f64> = (0..n_trees).filter_map(|i| self.observed(i, t + h)).collect();
                hourly.observed.push((!obs.is_empty()).then(|| self.scale * obs.iter().sum::<f64>() / obs.len() as f64));
            }

            let mut full_weights = vec![0.0; member_ids.len()];
            for ((ai, _), w) in scored.iter().zip(&weights) {
                let id = &members[active[*ai]].id;
                if let Some(k) = member_ids.iter().position(|x| x == id) {
                    full_weights[k] = *w;
                }
            }
            let excluded = member_ids
                .iter()
                .zip(&full_weights)
                .filter(|(id, _)| !scored.iter().any(|(ai, _)| &members[active[*ai]].id == *id))
                .map(|(id, _)| id.clone())
                .collect();
            windows.push(WindowRecord {
                start,
                start_row: t,
                len,
                member_ids,
                weights: full_weights,
                excluded,
                gamma: gamma.gamma,
                spread_surrogate: gamma.surrogate.map(|s| s * self.scale),
                clamp_count,
                per_init: per_init_means
                    .into_iter()
                    .map(|(k, v)| (k, v.into_iter().map(|x| x * self.scale).collect()))
                    .collect(),
                warnings,
            });
            t += len;
        }

        let total_area = wateruse::group_area(self.trees)?;
        let daily = daily_forecast(&hourly, self.frame.step_secs(), total_area, cfg)?;
        Ok(RollingReport {
            schema_version: REPORT_SCHEMA_VERSION,
            config: cfg.clone(),
            trees: self.trees.iter().map(|t| t.id.clone()).collect(),
            total_area_cm2: total_area,
            scale: self.scale,
            windows,
            hourly,
            daily,
        })
    }
}

fn hourly_series(h: &HourlyForecast, step: i64, values: Vec<Option<f64>>) -> Result<TimeSeries> {
    Ok(TimeSeries::new(h.timestamps[0], step, values, "")?)
}

fn daily_forecast(h: &HourlyForecast, step: i64, area: f64, cfg: &RollingConfig) -> Result<DailyForecast> {
    if h.timestamps.is_empty() {
        return Ok(DailyForecast {
            days: vec![],
            predicted_liters: vec![],
            lower_liters: vec![],
            upper_liters: vec![],
            sd_liters: vec![],
            sd_correlated_liters: vec![],
            observed_liters: vec![],
        });
    }
    let pred = wateruse::water_use(&hourly_series(h, step, h.prediction.iter().map(|v| Some(*v)).collect())?, area);
    let err = wateruse::propagate_error(area, &hourly_series(h, step, h.error_sd.iter().map(|v| Some(*v)).collect())?);
    let obs = wateruse::water_use(&hourly_series(h, step, h.observed.clone())?, area);
    let z = stats::normal_critical(cfg.interval_level);
    let sd: Vec<f64> = match cfg.daily_error {
        DailyErrorModel::Independent => err.sd_independent.clone(),
        DailyErrorModel::Correlated => err.sd_correlated.clone(),
    };
    Ok(DailyForecast {
        days: pred.days.clone(),
        predicted_liters: pred.liters(),
        lower_liters: pred.cm3.iter().zip(&sd).map(|(p, s)| ((p - z * s) / 1000.0).max(0.0)).collect(),
        upper_liters: pred.cm3.iter().zip(&sd).map(|(p, s)| (p + z * s) / 1000.0).collect(),
        sd_liters: sd.iter().map(|s| s / 1000.0).collect(),
        sd_correlated_liters: err.sd_correlated.iter().map(|s| s / 1000.0).collect(),
        observed_liters: pred.days.iter().map(|d| obs.get(*d).map(|v| v / 1000.0)).collect(),
    })
}

/// Algorithm: rolling refit (or frozen) ensemble over `frame`, whose tree
/// columns are named by `trees[i].id`.
pub fn run_rolling(frame: &AlignedFrame, trees: &[TreeRecord], config: &RollingConfig) -> Result<RollingReport> {
    check_inputs(frame, trees, config)?;
    let seed = |i: usize, r: usize| Ok(frame.value(&trees[i].id, r));
    Engine { frame, trees, config, seed: &seed, scale: 1.0 }.run(MemberSource::Refit)
}

/// Rolling forecast with a fixed, caller-supplied member set.
pub fn run_with_members(
    frame: &AlignedFrame,
    trees: &[TreeRecord],
    members: &[Member],
    config: &RollingConfig,
) -> Result<RollingReport> {
    check_inputs(frame, trees, config)?;
    if members.is_empty() {
        return Err(RollingError::NoMembers(frame.start()));
    }
    let seed = |i: usize, r: usize| Ok(frame.value(&trees[i].id, r));
    Engine { frame, trees, config, seed: &seed, scale: 1.0 }.run(MemberSource::Fixed(members))
}

/// Common 0.95-quantile scale of a season: the quantile of the mean flux
/// over trees.
pub fn season_scale(frame: &AlignedFrame, trees: &[TreeRecord], q: f64) -> Result<f64> {
    let mean: Vec<f64> = (0..frame.len())
        .filter_map(|r| {
            let obs: Vec<f64> = trees.iter().filter_map(|t| frame.value(&t.id, r)).collect();
            (!obs.is_empty()).then(|| obs.iter().sum::<f64>() / obs.len() as f64)
        })
        .collect();
    if mean.is_empty() {
        return Err(RollingError::ScaleMissing);
    }
    let scale = stats::quantile(&mean, q);
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(RollingError::ScaleMissing);
    }
    Ok(scale)
}

/// Divide every tree column by `scale`.
pub fn normalize_trees(frame: &AlignedFrame, trees: &[TreeRecord], scale: f64) -> Result<AlignedFrame> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(RollingError::ScaleMissing);
    }
    let mut out = frame.clone();
    for t in trees {
        let col = frame.column(&t.id).ok_or_else(|| RollingError::MissingTree(t.id.clone()))?;
        let unit = frame.unit(&t.id).unwrap_or("").to_string();
        out.insert_column(&t.id, col.iter().map(|v| v.map(|x| x / scale)).collect(), &unit)?;
    }
    Ok(out)
}

/// Frozen members trained on a normalised historical season predict a new
/// season. Members and the weight window use normalised flux; forecasts are
/// seeded from `history` at the same day-of-year and hour, and outputs are
/// multiplied by `scale` (the target season's known scale).
pub fn run_cross_season(
    members: &[Member],
    history: &AlignedFrame,
    target: &AlignedFrame,
    trees: &[TreeRecord],
    scale: f64,
    config: &RollingConfig,
) -> Result<RollingReport> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(RollingError::ScaleMissing);
    }
    check_inputs(target, trees, config)?;
    if members.is_empty() {
        return Err(RollingError::NoMembers(target.start()));
    }
    let index: BTreeMap<(u32, u32), usize> = (0..history.len())
        .map(|r| {
            use chrono::{Datelike, Timelike};
            let ts = history.timestamp(r);
            ((ts.ordinal(), ts.hour()), r)
        })
        .collect();
    let seed = |i: usize, r: usize| -> Result<Option<f64>> {
        use chrono::{Datelike, Timelike};
        let ts = target.timestamp(r);
        let key = (ts.ordinal(), ts.hour());
        let tree = &trees[i].id;
        let row = index.get(&key).ok_or_else(|| RollingError::InitUnavailable { tree: tree.clone(), doy: key.0, hour: key.1 })?;
        Ok(history.value(tree, *row))
    };
    Engine { frame: target, trees, config, seed: &seed, scale }.run(MemberSource::Fixed(members))
}

/// Table-style accuracy summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub hourly_mse: f64,
    pub hourly_count: usize,
    /// Median daily water-use half-interval, liters.
    pub median_half_ci_liters: f64,
    /// Daily percentage-error quantiles at 0.1, 0.5, 0.9.
    pub pct_error_quantiles: [f64; 3],
    pub daily_mse_liters: f64,
    pub days_evaluated: usize,
    pub zero_observed_days: usize,
    /// Fraction of evaluated days whose observation lies in the band.
    pub coverage: f64,
}

/// Percentage error `|pred − obs| / obs × 100`; `None` when `obs` is 0.
pub fn pct_error(pred: f64, obs: f64) -> Option<f64> {
    (obs != 0.0).then(|| (pred - obs).abs() / obs.abs() * 100.0)
}

/// Compare a report to observed hourly flux and daily water-use (liters).
pub fn evaluate(
    report: &RollingReport,
    observed_flux: &TimeSeries,
    observed_daily: &BTreeMap<NaiveDate, f64>,
) -> Result<Metrics> {
    let mut sq = 0.0;
    let mut count = 0;
    for (ts, p) in report.hourly.timestamps.iter().zip(&report.hourly.prediction) {
        if let Some(o) = observed_flux.index_of(*ts).and_then(|i| observed_flux.get(i)) {
            sq += (p - o) * (p - o);
            count += 1;
        }
    }
    let mut pct = Vec::new();
    let mut half = Vec::new();
    let mut dsq = 0.0;
    let mut zero = 0;
    let mut covered = 0;
    let mut days = 0;
    for (k, day) in report.daily.days.iter().enumerate() {
        let Some(&obs) = observed_daily.get(day) else { continue };
        days += 1;
        let pred = report.daily.predicted_liters[k];
        dsq += (pred - obs) * (pred - obs);
        half.push((report.daily.upper_liters[k] - pred).max(0.0));
        if report.daily.lower_liters[k] <= obs && obs <= report.daily.upper_liters[k] {
            covered += 1;
        }
        match pct_error(pred, obs) {
            Some(e) => pct.push(e),
            None => zero += 1,
        }
    }
    if count == 0 && days == 0 {
        return Err(RollingError::NoOverlap);
    }
    let q = |p| if pct.is_empty() { f64::NAN } else { stats::quantile(&pct, p) };
    Ok(Metrics {
        hourly_mse: if count > 0 { sq / count as f64 } else { f64::NAN },
        hourly_count: count,
        median_half_ci_liters: if half.is_empty() { f64::NAN } else { stats::median(&half) },
        pct_error_quantiles: [q(0.1), q(0.5), q(0.9)],
        daily_mse_liters: if days > 0 { dsq / days as f64 } else { f64::NAN },
        days_evaluated: days,
        zero_observed_days: zero,
        coverage: if days > 0 { covered as f64 / days as f64 } else { f64::NAN },
    })
}

impl RollingReport {
    /// Observed standard-tree flux carried in the report.
    pub fn observed_flux(&self) -> Option<TimeSeries> {
        let first = *self.hourly.timestamps.first()?;
        let step = self.hourly.timestamps.get(1).map_or(3600, |t| (*t - first).num_seconds());
        TimeSeries::new(first, step, self.hourly.observed.clone(), "").ok()
    }

    /// Observed daily water-use carried in the report, liters.
    pub fn observed_daily(&self) -> BTreeMap<NaiveDate, f64> {
        self.daily
            .days
            .iter()
            .zip(&self.daily.observed_liters)
            .filter_map(|(d, o)| Some((*d, (*o)?)))
            .collect()
    }

    /// Metrics against the observations embedded in the report.
    pub fn self_evaluate(&self) -> Result<Metrics> {
        let flux = self.observed_flux().ok_or(RollingError::NoOverlap)?;
        evaluate(self, &flux, &self.observed_daily())
    }

    pub fn day_of_row(&self, k: usize) -> NaiveDate {
        day_of(self.hourly.timestamps[k])
    }
}
