//! Sapwood geometry and conversion of sap flux density to water-use.
//!
//! Units: flux in cm³·cm⁻²·h⁻¹, lengths in cm, areas in cm², water-use in
//! cm³ (liters = cm³ / 1000).

use std::collections::BTreeMap;
use std::f64::consts::PI;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::series::{day_of, TimeSeries};

/// Outer-ring sensor only at or below this stem radius (cm); averaged inner
/// and outer flux above it.
pub const DEFAULT_SENSOR_THRESHOLD_CM: f64 = 3.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WaterUseError {
    #[error("bark depth {bark} cm reaches the stem radius {radius} cm")]
    BarkExceedsRadius { bark: f64, radius: f64 },
    #[error("sensor radii must satisfy 0 < r1 < r2 (got {0}, {1})")]
    BadRadii(f64, f64),
    #[error("flux series have different steps or spans")]
    StepMismatch,
}

pub type Result<T> = std::result::Result<T, WaterUseError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeRecord {
    pub id: String,
    #[serde(default)]
    pub species: String,
    #[serde(default)]
    pub size_class: String,
    /// Stem circumference at 1 m.
    pub circumference_cm: f64,
    pub bark_depth_cm: f64,
    /// Inner and outer sensor radii `(r1, r2)`.
    #[serde(default)]
    pub sensor_radii: Option<(f64, f64)>,
    /// Number of trees in the group this record stands for.
    #[serde(default = "one")]
    pub count: u32,
}

fn one() -> u32 {
    1
}

impl TreeRecord {
    /// Stem radius inside the bark.
    pub fn sapwood_radius(&self) -> f64 {
        self.circumference_cm / (2.0 * PI) - self.bark_depth_cm
    }

    pub fn sapwood_area(&self) -> Result<f64> {
        sapwood_area(self.circumference_cm, self.bark_depth_cm)
    }

    pub fn validate(&self) -> Result<()> {
        self.sapwood_area()?;
        if let Some((r1, r2)) = self.sensor_radii {
            two_ring_areas(r1, r2)?;
            if (r2 - self.sapwood_radius()).abs() > 1e-6 * r2.max(1.0) {
                return Err(WaterUseError::BadRadii(r1, r2));
            }
        }
        Ok(())
    }
}

/// `A = π (c / 2π − d)²`
pub fn sapwood_area(circumference: f64, bark_depth: f64) -> Result<f64> {
    let radius = circumference / (2.0 * PI) - bark_depth;
    if !(radius > 0.0) {
        return Err(WaterUseError::BarkExceedsRadius { bark: bark_depth, radius: circumference / (2.0 * PI) });
    }
    Ok(PI * radius * radius)
}

/// Inner disc and outer ring areas for sensors at radii `r1 < r2`.
pub fn two_ring_areas(r1: f64, r2: f64) -> Result<(f64, f64)> {
    if !(r1 > 0.0 && r1 < r2) {
        return Err(WaterUseError::BadRadii(r1, r2));
    }
    Ok((PI * r1 * r1, PI * (r2 * r2 - r1 * r1)))
}

/// Total sapwood area of the group, each record weighted by its count.
pub fn group_area(trees: &[TreeRecord]) -> Result<f64> {
    trees.iter().map(|t| Ok(t.sapwood_area()? * f64::from(t.count))).sum()
}

/// Per-day totals over complete days.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DailyWaterUse {
    pub days: Vec<NaiveDate>,
    pub cm3: Vec<f64>,
    /// Days touched by the input but not fully observed.
    pub partial_days: Vec<NaiveDate>,
}

impl DailyWaterUse {
    pub fn liters(&self) -> Vec<f64> {
        self.cm3.iter().map(|v| v / 1000.0).collect()
    }

    pub fn get(&self, day: NaiveDate) -> Option<f64> {
        self.days.iter().position(|d| *d == day).map(|i| self.cm3[i])
    }
}

/// Sum `f(t) · Δ` per calendar day, keeping only days with every step observed.
fn daily_integral(series: &TimeSeries, f: impl Fn(usize) -> Option<f64>) -> DailyWaterUse {
    let per_day = (crate::series::SECONDS_PER_DAY / series.step_secs()) as usize;
    let delta = series.step_hours();
    let mut acc: BTreeMap<NaiveDate, (f64, usize)> = BTreeMap::new();
    let mut touched: BTreeMap<NaiveDate, ()> = BTreeMap::new();
    for i in 0..series.len() {
        let day = day_of(series.timestamp(i));
        touched.insert(day, ());
        if let Some(v) = f(i) {
            let e = acc.entry(day).or_insert((0.0, 0));
            e.0 += v * delta;
            e.1 += 1;
        }
    }
    let mut out = DailyWaterUse { days: vec![], cm3: vec![], partial_days: vec![] };
    for day in touched.into_keys() {
        match acc.get(&day) {
            Some(&(total, count)) if count == per_day => {
                out.days.push(day);
                out.cm3.push(total);
            }
            _ => out.partial_days.push(day),
        }
    }
    out
}

/// Single-sensor water-use: `Σ_t A · Y_t · Δ` per day.
pub fn water_use(flux: &TimeSeries, area: f64) -> DailyWaterUse {
    daily_integral(flux, |i| flux.get(i).map(|y| area * y))
}

fn check_pair(a: &TimeSeries, b: &TimeSeries) -> Result<()> {
    if a.step_secs() != b.step_secs() || a.start() != b.start() || a.len() != b.len() {
        return Err(WaterUseError::StepMismatch);
    }
    Ok(())
}

/// Two-sensor water-use: `Σ_t (A1 · Y_inner + A2 · Y_outer) · Δ` per day.
pub fn water_use_two_sensor(inner: &TimeSeries, outer: &TimeSeries, r1: f64, r2: f64) -> Result<DailyWaterUse> {
    check_pair(inner, outer)?;
    let (a1, a2) = two_ring_areas(r1, r2)?;
    Ok(daily_integral(inner, |i| Some(a1 * inner.get(i)? + a2 * outer.get(i)?)))
}

/// Averaged-sensor water-use: `Σ_t A · (Y_inner + Y_outer) / 2 · Δ` per day.
pub fn water_use_averaged(inner: &TimeSeries, outer: &TimeSeries, area: f64) -> Result<DailyWaterUse> {
    check_pair(inner, outer)?;
    Ok(daily_integral(inner, |i| Some(area * (inner.get(i)? + outer.get(i)?) / 2.0)))
}

/// Apply the sensor selection rule for one tree: outer sensor only when the
/// sapwood radius is at most `threshold_cm`, otherwise the inner/outer average.
pub fn water_use_for_tree(
    tree: &TreeRecord,
    inner: Option<&TimeSeries>,
    outer: &TimeSeries,
    threshold_cm: f64,
) -> Result<DailyWaterUse> {
    let area = tree.sapwood_area()?;
    match inner {
        Some(inner) if tree.sapwood_radius() > threshold_cm => water_use_averaged(inner, outer, area),
        _ => Ok(water_use(outer, area)),
    }
}

/// Daily water-use uncertainty from hourly flux standard deviations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DailyError {
    pub days: Vec<NaiveDate>,
    /// `A* · Δ · sqrt(Σ_t sd_t²)`, hourly errors independent.
    pub sd_independent: Vec<f64>,
    /// `A* · Δ · Σ_t sd_t`, hourly errors fully correlated.
    pub sd_correlated: Vec<f64>,
}

pub fn propagate_error(total_area: f64, hourly_sd: &TimeSeries) -> DailyError {
    let sq = daily_integral(hourly_sd, |i| hourly_sd.get(i).map(|s| s * s));
    let lin = daily_integral(hourly_sd, |i| hourly_sd.get(i));
    let delta = hourly_sd.step_hours();
    DailyError {
        days: sq.days.clone(),
        // daily_integral already multiplied the squares by Δ once
        sd_independent: sq.cm3.iter().map(|s| total_area * (s * delta).sqrt()).collect(),
        sd_correlated: lin.cm3.iter().map(|s| total_area * s).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::series::DailyStat;
    use chrono::{TimeZone, Utc};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t0() -> chrono::DateTime<Utc> {
        Utc.with_ymd_and_hms(2023, 6, 1, 0, 0, 0).unwrap()
    }

    #[test]
    fn sapwood_area_examples() {
        assert!((sapwood_area(20.0 * PI, 0.0).unwrap() - PI * 100.0).abs() < 1e-9);
        assert!((sapwood_area(12.0 * PI, 1.0).unwrap() - PI * 25.0).abs() < 1e-9);
        assert!(matches!(sapwood_area(12.0 * PI, 6.0), Err(WaterUseError::BarkExceedsRadius { .. })));
    }

    #[test]
    fn ring_areas() {
        let (a1, a2) = two_ring_areas(2.0, 4.0).unwrap();
        assert!((a1 - 4.0 * PI).abs() < 1e-12);
        assert!((a2 - 12.0 * PI).abs() < 1e-12);
        assert!((a1 + a2 - 16.0 * PI).abs() < 1e-12);
        assert!(matches!(two_ring_areas(3.0, 3.0), Err(WaterUseError::BadRadii(..))));
    }

    #[test]
    fn constant_flux_day() {
        let y = TimeSeries::hourly_dense(t0(), &[2.0; 24], "flux").unwrap();
        let w = water_use(&y, 100.0);
        assert_eq!(w.cm3, vec![4800.0]);
        assert_eq!(w.liters(), vec![4.8]);
    }

    #[test]
    fn two_sensor_identity_when_fluxes_equal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v: Vec<f64> = (0..48).map(|_| rng.gen_range(0.0..5.0)).collect();
        let y = TimeSeries::hourly_dense(t0(), &v, "flux").unwrap();
        let two = water_use_two_sensor(&y, &y, 2.0, 4.0).unwrap();
        let single = water_use(&y, PI * 16.0);
        for (a, b) in two.cm3.iter().zip(&single.cm3) {
            assert!((a - b).abs() < 1e-9 * b.abs().max(1.0));
        }
        let avg = water_use_averaged(&y, &y, PI * 16.0).unwrap();
        assert_eq!(avg, single);
    }

    #[test]
    fn random_day_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let v: Vec<f64> = (0..24).map(|_| rng.gen_range(0.0..8.0)).collect();
        let y = TimeSeries::hourly_dense(t0(), &v, "flux").unwrap();
        let area = 37.5;
        let mut oracle = 0.0;
        for h in 0..24 {
            oracle += area * v[h] * 1.0;
        }
        assert!((water_use(&y, area).cm3[0] - oracle).abs() < 1e-9);
        // matches the daily sum aggregate times one hour
        let s = y.daily_aggregate(DailyStat::Sum).values[0].unwrap();
        assert!((water_use(&y, area).cm3[0] - area * s).abs() < 1e-9);
    }

    #[test]
    fn partial_days_excluded() {
        let mut v = vec![Some(1.0); 30];
        v[3] = None;
        let y = TimeSeries::hourly(t0(), v, "flux").unwrap();
        let w = water_use(&y, 1.0);
        assert!(w.days.is_empty());
        assert_eq!(w.partial_days.len(), 2);
    }

    #[test]
    fn mismatched_series() {
        let a = TimeSeries::hourly_dense(t0(), &[1.0; 24], "flux").unwrap();
        let b = TimeSeries::hourly_dense(t0(), &[1.0; 23], "flux").unwrap();
        assert_eq!(water_use_two_sensor(&a, &b, 1.0, 2.0), Err(WaterUseError::StepMismatch));
    }

    #[test]
    fn sensor_rule() {
        let inner = TimeSeries::hourly_dense(t0(), &[1.0; 24], "flux").unwrap();
        let outer = TimeSeries::hourly_dense(t0(), &[3.0; 24], "flux").unwrap();
        let small = TreeRecord {
            id: "a".into(),
            species: String::new(),
            size_class: String::new(),
            circumference_cm: 2.0 * PI * 3.2,
            bark_depth_cm: 0.2,
            sensor_radii: Some((1.0, 3.0)),
            count: 1,
        };
        small.validate().unwrap();
        let area = small.sapwood_area().unwrap();
        let w = water_use_for_tree(&small, Some(&inner), &outer, DEFAULT_SENSOR_THRESHOLD_CM).unwrap();
        assert!((w.cm3[0] - area * 3.0 * 24.0).abs() < 1e-9);
        let large = TreeRecord { circumference_cm: 2.0 * PI * 5.2, sensor_radii: Some((2.0, 5.0)), ..small };
        let area = large.sapwood_area().unwrap();
        let w = water_use_for_tree(&large, Some(&inner), &outer, DEFAULT_SENSOR_THRESHOLD_CM).unwrap();
        assert!((w.cm3[0] - area * 2.0 * 24.0).abs() < 1e-9);
    }

    #[test]
    fn error_propagation() {
        let zero = TimeSeries::hourly_dense(t0(), &[0.0; 24], "sd").unwrap();
        assert_eq!(propagate_error(1.0, &zero).sd_independent, vec![0.0]);
        let ones = TimeSeries::hourly_dense(t0(), &[1.0; 24], "sd").unwrap();
        let e = propagate_error(1.0, &ones);
        assert!((e.sd_independent[0] - 24f64.sqrt()).abs() < 1e-12);
        assert!((e.sd_correlated[0] - 24.0).abs() < 1e-12);
        let e2 = propagate_error(2.0, &ones);
        assert!((e2.sd_independent[0] - 2.0 * e.sd_independent[0]).abs() < 1e-12);
    }

    #[test]
    fn linearity_superposition() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let a: Vec<f64> = (0..72).map(|_| rng.gen_range(0.0..6.0)).collect();
            let b: Vec<f64> = (0..72).map(|_| rng.gen_range(0.0..6.0)).collect();
            let (ka, kb, area) = (rng.gen_range(0.1..3.0), rng.gen_range(0.1..3.0), rng.gen_range(10.0..500.0));
            let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| ka * x + kb * y).collect();
            let wa = water_use(&TimeSeries::hourly_dense(t0(), &a, "").unwrap(), area);
            let wb = water_use(&TimeSeries::hourly_dense(t0(), &b, "").unwrap(), area);
            let wm = water_use(&TimeSeries::hourly_dense(t0(), &mix, "").unwrap(), area);
            for d in 0..3 {
                let lhs = wm.cm3[d];
                let rhs = ka * wa.cm3[d] + kb * wb.cm3[d];
                assert!((lhs - rhs).abs() <= 1e-10 * rhs.abs().max(1.0));
                assert!(lhs >= 0.0);
            }
            let w2 = water_use(&TimeSeries::hourly_dense(t0(), &a, "").unwrap(), 2.0 * area);
            assert!((w2.cm3[0] - 2.0 * wa.cm3[0]).abs() <= 1e-10 * wa.cm3[0].max(1.0));
        }
    }
}
