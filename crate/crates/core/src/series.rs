//! Regular time series, frame alignment and daily aggregation.
//!
//! Timestamps are UTC and days start at 00:00 UTC. Missing observations are
//! carried as `None` and never imputed.

use std::collections::BTreeMap;

use chrono::{DateTime, Duration, NaiveDate, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats;

pub const SECONDS_PER_DAY: i64 = 86_400;
pub const SECONDS_PER_HOUR: i64 = 3_600;

/// Standard hourly channel names.
pub mod channel {
    pub const TEMPERATURE: &str = "temperature";
    pub const HUMIDITY: &str = "humidity";
    pub const RADIATION: &str = "radiation";
    pub const VPD: &str = "vpd";
    pub const SOIL_MOISTURE: &str = "soil_moisture";

    pub const DAILY_MAX_TEMP: &str = "daily_max_temp";
    pub const DAILY_MIN_HUMIDITY: &str = "daily_min_humidity";
    pub const DAILY_MEAN_SOIL: &str = "daily_mean_soil";

    pub const WEATHER: [&str; 5] = [TEMPERATURE, HUMIDITY, RADIATION, VPD, SOIL_MOISTURE];
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SeriesError {
    #[error("series spans do not overlap")]
    EmptyOverlap,
    #[error("mixed sampling steps: {0} s vs {1} s")]
    MixedStep(i64, i64),
    #[error("step of {0} s must be positive and divide 24 h")]
    InvalidStep(i64),
    #[error("start {0} is not aligned to the sampling step")]
    Misaligned(DateTime<Utc>),
    #[error("lag {lag} is not smaller than series length {len}")]
    LagTooLarge { lag: usize, len: usize },
    #[error("constant slice at lag {0}; correlation undefined")]
    DegenerateVariance(i64),
    #[error("need at least {needed} observed values, found {found}")]
    InsufficientData { needed: usize, found: usize },
    #[error("quantile scale {0} is not positive")]
    NonPositiveScale(f64),
    #[error("column `{0}` has {1} rows, frame has {2}")]
    LengthMismatch(String, usize, usize),
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
}

pub type Result<T> = std::result::Result<T, SeriesError>;

fn validate_step(step_secs: i64) -> Result<()> {
    if step_secs <= 0 || SECONDS_PER_DAY % step_secs != 0 {
        return Err(SeriesError::InvalidStep(step_secs));
    }
    Ok(())
}

/// Calendar day (UTC) containing `ts`.
pub fn day_of(ts: DateTime<Utc>) -> NaiveDate {
    ts.date_naive()
}

/// A regularly sampled series with optional values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    start: DateTime<Utc>,
    step_secs: i64,
    values: Vec<Option<f64>>,
    unit: String,
}

impl TimeSeries {
    pub fn new(
        start: DateTime<Utc>,
        step_secs: i64,
        values: Vec<Option<f64>>,
        unit: impl Into<String>,
    ) -> Result<Self> {
        validate_step(step_secs)?;
        if start.timestamp().rem_euclid(step_secs) != 0 || start.timestamp_subsec_nanos() != 0 {
            return Err(SeriesError::Misaligned(start));
        }
        Ok(Self { start, step_secs, values, unit: unit.into() })
    }

    pub fn hourly(start: DateTime<Utc>, values: Vec<Option<f64>>, unit: impl Into<String>) -> Result<Self> {
        Self::new(start, SECONDS_PER_HOUR, values, unit)
    }

    /// Hourly series with every value observed.
    pub fn hourly_dense(start: DateTime<Utc>, values: &[f64], unit: impl Into<String>) -> Result<Self> {
        Self::hourly(start, values.iter().copied().map(Some).collect(), unit)
    }

    pub fn start(&self) -> DateTime<Utc> {
        self.start
    }

    pub fn step_secs(&self) -> i64 {
        self.step_secs
    }

    /// Step length in hours.
    pub fn step_hours(&self) -> f64 {
        self.step_secs as f64 / SECONDS_PER_HOUR as f64
    }

    pub fn unit(&self) -> &str {
        &self.unit
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[Option<f64>] {
        &self.values
    }

    pub fn get(&self, i: usize) -> Option<f64> {
        self.values.get(i).copied().flatten()
    }

    pub fn timestamp(&self, i: usize) -> DateTime<Utc> {
        self.start + Duration::seconds(self.step_secs * i as i64)
    }

    /// Exclusive end of the span.
    pub fn end(&self) -> DateTime<Utc> {
        self.timestamp(self.len())
    }

    pub fn index_of(&self, ts: DateTime<Utc>) -> Option<usize> {
        let offset = (ts - self.start).num_seconds();
        if offset < 0 || offset % self.step_secs != 0 {
            return None;
        }
        let i = (offset / self.step_secs) as usize;
        (i < self.len()).then_some(i)
    }

    pub fn observed(&self) -> Vec<f64> {
        self.values.iter().flatten().copied().collect()
    }

    pub fn missing_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_none()).count()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> TimeSeries {
        TimeSeries {
            values: self.values.iter().map(|v| v.map(&f)).collect(),
            ..self.clone()
        }
    }

    pub fn with_unit(mut self, unit: impl Into<String>) -> Self {
        self.unit = unit.into();
        self
    }

    /// Rows `from..to` as a new series.
    pub fn slice(&self, from: usize, to: usize) -> TimeSeries {
        TimeSeries {
            start: self.timestamp(from),
            step_secs: self.step_secs,
            values: self.values[from..to].to_vec(),
            unit: self.unit.clone(),
        }
    }

    /// Value at `t` equals the input at `t - k`; the first `k` entries are missing.
    pub fn lag(&self, k: usize) -> Result<TimeSeries> {
        if k >= self.len() {
            return Err(SeriesError::LagTooLarge { lag: k, len: self.len() });
        }
        let mut values = vec![None; k];
        values.extend_from_slice(&self.values[..self.len() - k]);
        Ok(TimeSeries { values, ..self.clone() })
    }

    /// Rescale by the empirical `q`-quantile (type 7) of the observed values.
    pub fn quantile_normalize(&self, q: f64) -> Result<(TimeSeries, f64)> {
        let obs = self.observed();
        if obs.len() < 20 {
            return Err(SeriesError::InsufficientData { needed: 20, found: obs.len() });
        }
        let scale = stats::quantile(&obs, q);
        if !(scale > 0.0) {
            return Err(SeriesError::NonPositiveScale(scale));
        }
        Ok((self.map(|v| v / scale), scale))
    }

    pub fn daily_aggregate(&self, stat: DailyStat) -> DailySeries {
        let first = day_of(self.start);
        let mut buckets: Vec<Vec<f64>> = Vec::new();
        for (i, v) in self.values.iter().enumerate() {
            let day = (day_of(self.timestamp(i)) - first).num_days() as usize;
            if buckets.len() <= day {
                buckets.resize_with(day + 1, Vec::new);
            }
            if let Some(v) = v {
                buckets[day].push(*v);
            }
        }
        let values = buckets
            .iter()
            .map(|b| {
                if b.is_empty() {
                    return None;
                }
                Some(match stat {
                    DailyStat::Max => b.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                    DailyStat::Min => b.iter().copied().fold(f64::INFINITY, f64::min),
                    DailyStat::Mean => stats::mean(b),
                    DailyStat::Sum => b.iter().sum(),
                })
            })
            .collect();
        DailySeries { first_day: first, values }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DailyStat {
    Max,
    Min,
    Mean,
    Sum,
}

/// One value per calendar day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DailySeries {
    pub first_day: NaiveDate,
    pub values: Vec<Option<f64>>,
}

impl DailySeries {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn day(&self, i: usize) -> NaiveDate {
        self.first_day + Duration::days(i as i64)
    }

    pub fn on(&self, date: NaiveDate) -> Option<f64> {
        let i = (date - self.first_day).num_days();
        if i < 0 {
            return None;
        }
        self.values.get(i as usize).copied().flatten()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NaiveDate, Option<f64>)> + '_ {
        self.values.iter().enumerate().map(|(i, v)| (self.day(i), *v))
    }
}

/// Sample Pearson correlation of `(x[t + tau], y[t])` for `tau = -max_lag..=max_lag`.
///
/// Both series must share start and step. Entry `max_lag + tau` holds lag `tau`.
pub fn cross_correlation(x: &TimeSeries, y: &TimeSeries, max_lag: usize) -> Result<Vec<f64>> {
    if x.step_secs != y.step_secs {
        return Err(SeriesError::MixedStep(x.step_secs, y.step_secs));
    }
    if x.start != y.start || x.len() != y.len() {
        return Err(SeriesError::LengthMismatch("y".into(), y.len(), x.len()));
    }
    let n = x.len() as i64;
    let valid = x.values.iter().zip(&y.values).filter(|(a, b)| a.is_some() && b.is_some()).count();
    let needed = (3 * max_lag).max(3);
    if valid < needed {
        return Err(SeriesError::InsufficientData { needed, found: valid });
    }
    let lag = max_lag as i64;
    let mut out = Vec::with_capacity(2 * max_lag + 1);
    for tau in -lag..=lag {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for t in 0..n {
            let s = t + tau;
            if s < 0 || s >= n {
                continue;
            }
            if let (Some(a), Some(b)) = (x.values[s as usize], y.values[t as usize]) {
                xs.push(a);
                ys.push(b);
            }
        }
        if xs.len() < 2 {
            return Err(SeriesError::InsufficientData { needed: 2, found: xs.len() });
        }
        out.push(stats::pearson(&xs, &ys).ok_or(SeriesError::DegenerateVariance(tau))?);
    }
    Ok(out)
}

/// Hourly columns sharing one index, plus day-indexed covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedFrame {
    start: DateTime<Utc>,
    step_secs: i64,
    len: usize,
    columns: BTreeMap<String, Vec<Option<f64>>>,
    units: BTreeMap<String, String>,
    daily: BTreeMap<String, DailySeries>,
}

impl AlignedFrame {
    /// Frame over the intersection of the input spans.
    pub fn align<'a, I>(inputs: I) -> Result<AlignedFrame>
    where
        I: IntoIterator<Item = (&'a str, &'a TimeSeries)>,
    {
        let inputs: Vec<_> = inputs.into_iter().collect();
        let Some((_, first)) = inputs.first() else {
            return Err(SeriesError::EmptyOverlap);
        };
        let step = first.step_secs;
        let mut start = first.start;
        let mut end = first.end();
        for (_, s) in &inputs {
            if s.step_secs != step {
                return Err(SeriesError::MixedStep(step, s.step_secs));
            }
            start = start.max(s.start);
            end = end.min(s.end());
        }
        if end <= start {
            return Err(SeriesError::EmptyOverlap);
        }
        // every start is step-aligned, so the intersection is too
        let len = ((end - start).num_seconds() / step) as usize;
        let mut frame = AlignedFrame {
            start,
            step_secs: step,
            len,
            columns: BTreeMap::new(),
            units: BTreeMap::new(),
            daily: BTreeMap::new(),
        };
        for (name, s) in inputs {
            let from = s.index_of(start).expect("intersection inside span");
            frame.columns.insert(name.to_string(), s.values[from..from + len].to_vec());
            frame.units.insert(name.to_string(), s.unit.clone());
        }
        Ok(frame)
    }

    pub fn start(&self) -> DateTime<Utc> {
        self.start
    }

    pub fn step_secs(&self) -> i64 {
        self.step_secs
    }

    pub fn step_hours(&self) -> f64 {
        self.step_secs as f64 / SECONDS_PER_HOUR as f64
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn timestamp(&self, i: usize) -> DateTime<Utc> {
        self.start + Duration::seconds(self.step_secs * i as i64)
    }

    pub fn index_of(&self, ts: DateTime<Utc>) -> Option<usize> {
        let offset = (ts - self.start).num_seconds();
        if offset < 0 || offset % self.step_secs != 0 {
            return None;
        }
        let i = (offset / self.step_secs) as usize;
        (i < self.len).then_some(i)
    }

    /// Rows per day at this frame's step.
    pub fn rows_per_day(&self) -> usize {
        (SECONDS_PER_DAY / self.step_secs) as usize
    }

    pub fn column_names(&self) -> impl Iterator<Item = &str> {
        self.columns.keys().map(String::as_str)
    }

    pub fn column(&self, name: &str) -> Option<&[Option<f64>]> {
        self.columns.get(name).map(Vec::as_slice)
    }

    pub fn unit(&self, name: &str) -> Option<&str> {
        self.units.get(name).map(String::as_str)
    }

    pub fn series(&self, name: &str) -> Result<TimeSeries> {
        let values = self.columns.get(name).ok_or_else(|| SeriesError::UnknownColumn(name.into()))?;
        Ok(TimeSeries {
            start: self.start,
            step_secs: self.step_secs,
            values: values.clone(),
            unit: self.units.get(name).cloned().unwrap_or_default(),
        })
    }

    /// All hourly columns as series, in name order.
    pub fn to_series(&self) -> Vec<(String, TimeSeries)> {
        self.columns
            .keys()
            .map(|k| (k.clone(), self.series(k).expect("own column")))
            .collect()
    }

    pub fn insert_column(&mut self, name: &str, values: Vec<Option<f64>>, unit: &str) -> Result<()> {
        if values.len() != self.len {
            return Err(SeriesError::LengthMismatch(name.into(), values.len(), self.len));
        }
        self.columns.insert(name.to_string(), values);
        self.units.insert(name.to_string(), unit.to_string());
        Ok(())
    }

    /// Rows where at least one hourly column is missing.
    pub fn incomplete_rows(&self) -> Vec<bool> {
        (0..self.len)
            .map(|i| self.columns.values().any(|c| c[i].is_none()))
            .collect()
    }

    /// Aggregate an hourly column by day and store it as a daily covariate.
    pub fn add_daily_covariate(&mut self, name: &str, source: &str, stat: DailyStat) -> Result<()> {
        let daily = self.series(source)?.daily_aggregate(stat);
        self.daily.insert(name.to_string(), daily);
        Ok(())
    }

    pub fn insert_daily(&mut self, name: &str, daily: DailySeries) {
        self.daily.insert(name.to_string(), daily);
    }

    /// Derive the three standard daily covariates from whichever source
    /// channels are present.
    pub fn with_standard_daily_covariates(mut self) -> Self {
        let specs = [
            (channel::DAILY_MAX_TEMP, channel::TEMPERATURE, DailyStat::Max),
            (channel::DAILY_MIN_HUMIDITY, channel::HUMIDITY, DailyStat::Min),
            (channel::DAILY_MEAN_SOIL, channel::SOIL_MOISTURE, DailyStat::Mean),
        ];
        for (name, source, stat) in specs {
            if self.columns.contains_key(source) {
                self.add_daily_covariate(name, source, stat).expect("source present");
            }
        }
        self
    }

    pub fn daily(&self, name: &str) -> Option<&DailySeries> {
        self.daily.get(name)
    }

    pub fn daily_names(&self) -> impl Iterator<Item = &str> {
        self.daily.keys().map(String::as_str)
    }

    /// Value of a covariate at row `i`: an hourly column, or a daily
    /// covariate broadcast over the hours of its day.
    pub fn value(&self, name: &str, i: usize) -> Option<f64> {
        if let Some(c) = self.columns.get(name) {
            return c.get(i).copied().flatten();
        }
        self.daily.get(name)?.on(day_of(self.timestamp(i)))
    }

    pub fn has(&self, name: &str) -> bool {
        self.columns.contains_key(name) || self.daily.contains_key(name)
    }

    /// Rows `from..to` as a new frame. Daily covariates keep only the days
    /// the window touches.
    pub fn window(&self, from: usize, to: usize) -> AlignedFrame {
        let start = self.timestamp(from);
        let last_day = day_of(self.timestamp(to.max(from + 1) - 1));
        let daily = self
            .daily
            .iter()
            .map(|(k, d)| {
                let values = (0..=(last_day - day_of(start)).num_days())
                    .map(|j| d.on(day_of(start) + Duration::days(j)))
                    .collect();
                (k.clone(), DailySeries { first_day: day_of(start), values })
            })
            .collect();
        AlignedFrame {
            start,
            step_secs: self.step_secs,
            len: to - from,
            columns: self.columns.iter().map(|(k, v)| (k.clone(), v[from..to].to_vec())).collect(),
            units: self.units.clone(),
            daily,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t0() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2022, 7, 1, 0, 0, 0).unwrap()
    }

    fn dense(start: DateTime<Utc>, v: &[f64]) -> TimeSeries {
        TimeSeries::hourly_dense(start, v, "x").unwrap()
    }

    #[test]
    fn align_identical_spans() {
        let a = dense(t0(), &[1.0; 48]);
        let b = dense(t0(), &[2.0; 48]);
        let f = AlignedFrame::align([("a", &a), ("b", &b)]).unwrap();
        assert_eq!(f.len(), 48);
        assert_eq!(f.start(), t0());
        assert_eq!(f.column("b").unwrap()[47], Some(2.0));
    }

    #[test]
    fn align_intersects_spans() {
        let a = dense(t0(), &[1.0; 240]);
        let b = dense(t0() + Duration::days(4), &[2.0; 264]);
        let f = AlignedFrame::align([("a", &a), ("b", &b)]).unwrap();
        assert_eq!(f.start(), t0() + Duration::days(4));
        assert_eq!(f.len(), 6 * 24);
    }

    #[test]
    fn align_rejects_mixed_step_and_disjoint() {
        let a = dense(t0(), &[1.0; 24]);
        let b = TimeSeries::new(t0(), 1800, vec![Some(1.0); 48], "x").unwrap();
        assert!(matches!(AlignedFrame::align([("a", &a), ("b", &b)]), Err(SeriesError::MixedStep(..))));
        let c = dense(t0() + Duration::days(2), &[1.0; 24]);
        assert_eq!(AlignedFrame::align([("a", &a), ("c", &c)]), Err(SeriesError::EmptyOverlap));
    }

    #[test]
    fn align_flags_missing_rows_without_dropping() {
        let a = TimeSeries::hourly(t0(), vec![Some(1.0), None, Some(3.0)], "x").unwrap();
        let b = dense(t0(), &[1.0, 2.0, 3.0]);
        let f = AlignedFrame::align([("a", &a), ("b", &b)]).unwrap();
        assert_eq!(f.len(), 3);
        assert_eq!(f.incomplete_rows(), vec![false, true, false]);
    }

    #[test]
    fn align_is_idempotent() {
        let a = dense(t0(), &[1.0; 50]);
        let b = dense(t0() + Duration::hours(3), &[2.0; 30]);
        let f = AlignedFrame::align([("a", &a), ("b", &b)]).unwrap();
        let parts = f.to_series();
        let g = AlignedFrame::align(parts.iter().map(|(n, s)| (n.as_str(), s))).unwrap();
        assert_eq!(f, g);
    }

    #[test]
    fn step_must_divide_a_day() {
        assert!(matches!(TimeSeries::new(t0(), 7 * 3600, vec![], "x"), Err(SeriesError::InvalidStep(_))));
    }

    #[test]
    fn daily_max_and_mean() {
        let v: Vec<f64> = (0..24).map(f64::from).collect();
        let s = dense(t0(), &v);
        assert_eq!(s.daily_aggregate(DailyStat::Max).values, vec![Some(23.0)]);
        let s = dense(t0(), &[2.0; 24]);
        assert_eq!(s.daily_aggregate(DailyStat::Mean).values, vec![Some(2.0)]);
    }

    #[test]
    fn daily_min_matches_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let v: Vec<f64> = (0..48).map(|_| rng.gen::<f64>()).collect();
        let d = dense(t0(), &v).daily_aggregate(DailyStat::Min);
        for day in 0..2 {
            let mut m = f64::INFINITY;
            for h in 0..24 {
                if v[day * 24 + h] < m {
                    m = v[day * 24 + h];
                }
            }
            assert_eq!(d.values[day], Some(m));
        }
    }

    #[test]
    fn daily_all_missing_is_missing() {
        let mut v = vec![Some(1.0); 24];
        v.extend(vec![None; 24]);
        let s = TimeSeries::hourly(t0(), v, "x").unwrap();
        assert_eq!(s.daily_aggregate(DailyStat::Sum).values, vec![Some(24.0), None]);
    }

    #[test]
    fn lag_examples() {
        let s = dense(t0(), &[1.0, 2.0, 3.0]);
        assert_eq!(s.lag(1).unwrap().values(), &[None, Some(1.0), Some(2.0)]);
        assert_eq!(s.lag(1).unwrap().lag(1).unwrap(), s.lag(2).unwrap());
        assert!(matches!(s.lag(3), Err(SeriesError::LagTooLarge { .. })));
        let c = dense(t0(), &[4.0; 6]).lag(2).unwrap();
        assert_eq!(c.values(), &[None, None, Some(4.0), Some(4.0), Some(4.0), Some(4.0)]);
    }

    #[test]
    fn ccf_shifted_copy_peaks_at_plus_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y: Vec<f64> = (0..200).map(|_| rng.gen::<f64>()).collect();
        let ys = dense(t0(), &y);
        let xs = ys.lag(1).unwrap();
        let c = cross_correlation(&xs, &ys, 5).unwrap();
        assert!((c[5 + 1] - 1.0).abs() < 1e-12);
        let same = cross_correlation(&ys, &ys, 5).unwrap();
        assert!((same[5] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ccf_antisymmetry_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Vec<f64> = (0..100).map(|_| rng.gen::<f64>()).collect();
        let y: Vec<f64> = (0..100).map(|_| rng.gen::<f64>()).collect();
        let (xs, ys) = (dense(t0(), &x), dense(t0(), &y));
        let a = cross_correlation(&xs, &ys, 4).unwrap();
        let b = cross_correlation(&ys, &xs, 4).unwrap();
        for k in 0..9 {
            assert_eq!(a[k], b[8 - k]);
            assert!((-1.0..=1.0).contains(&a[k]));
        }
        let flat = dense(t0(), &[1.0; 100]);
        assert!(matches!(cross_correlation(&flat, &ys, 2), Err(SeriesError::DegenerateVariance(_))));
        let short = dense(t0(), &x[..10]);
        assert!(matches!(cross_correlation(&short, &short, 4), Err(SeriesError::InsufficientData { .. })));
    }

    #[test]
    fn white_noise_ccf_is_small() {
        // Monte Carlo: fraction of seeds where every |ccf| < 0.1 must be >= 0.95
        let mut ok = 0;
        let runs = 100;
        for seed in 0..runs {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let x: Vec<f64> = (0..1000).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
            let y: Vec<f64> = (0..1000).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
            let c = cross_correlation(&dense(t0(), &x), &dense(t0(), &y), 3).unwrap();
            if c.iter().all(|v| v.abs() < 0.1) {
                ok += 1;
            }
        }
        assert!(ok as f64 / runs as f64 >= 0.95, "{ok}/{runs}");
    }

    #[test]
    fn quantile_normalize_examples() {
        let v: Vec<f64> = (0..=100).map(|i| i as f64 / 25.0).collect(); // q95 of 0..4 grid = 3.8
        let s = dense(t0(), &v);
        let (n, scale) = s.quantile_normalize(0.95).unwrap();
        assert!((scale - 3.8).abs() < 1e-12);
        assert!((stats::quantile(&n.observed(), 0.95) - 1.0).abs() < 1e-12);
        let ones = dense(t0(), &[1.0; 30]);
        let (n, scale) = ones.quantile_normalize(0.95).unwrap();
        assert_eq!(scale, 1.0);
        assert_eq!(n, ones);
        assert!(matches!(dense(t0(), &[0.0; 30]).quantile_normalize(0.95), Err(SeriesError::NonPositiveScale(_))));
        assert!(matches!(dense(t0(), &[1.0; 5]).quantile_normalize(0.95), Err(SeriesError::InsufficientData { .. })));
    }

    #[test]
    fn quantile_normalize_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v: Vec<f64> = (0..137).map(|_| rng.gen_range(0.1..10.0)).collect();
        let (n, scale) = dense(t0(), &v).quantile_normalize(0.95).unwrap();
        let mut sorted = v.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let h = 136.0 * 0.95;
        let lo = h as usize;
        let oracle = sorted[lo] + (h - lo as f64) * (sorted[lo + 1] - sorted[lo]);
        assert!((scale - oracle).abs() < 1e-12);
        for (a, b) in n.observed().iter().zip(&v) {
            assert!((a * scale - b).abs() < 1e-12);
        }
    }

    #[test]
    fn daily_covariate_broadcast() {
        let mut v: Vec<f64> = (0..24).map(f64::from).collect();
        v.extend((0..24).map(|h| 100.0 + h as f64));
        let s = dense(t0(), &v);
        let mut f = AlignedFrame::align([(channel::TEMPERATURE, &s)]).unwrap().with_standard_daily_covariates();
        assert_eq!(f.value(channel::DAILY_MAX_TEMP, 3), Some(23.0));
        assert_eq!(f.value(channel::DAILY_MAX_TEMP, 30), Some(123.0));
        let w = f.window(24, 48);
        assert_eq!(w.value(channel::DAILY_MAX_TEMP, 0), Some(123.0));
        assert_eq!(w.daily(channel::DAILY_MAX_TEMP).unwrap().len(), 1);
        f.insert_column("extra", vec![None; 48], "x").unwrap();
        assert!(f.insert_column("bad", vec![None; 3], "x").is_err());
    }
}
