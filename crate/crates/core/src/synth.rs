//! Seeded generator of hourly weather and multi-tree sap flux with known
//! ground truth.
//!
//! Weather channels: temperature (°C), relative humidity (%), global
//! radiation (W/m²), VPD (kPa, Tetens), volumetric soil moisture. Hours are
//! treated as local solar time.

use std::f64::consts::PI;

use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{FlexibleCovariate, Forecaster, ModelError, Result as ModelResult, RollingPrediction};
use crate::series::{channel, day_of, AlignedFrame, TimeSeries};
use crate::wateruse::TreeRecord;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid scenario: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, SynthError>;

/// Saturation vapour pressure deficit from temperature and relative humidity.
pub fn tetens_vpd(temperature: f64, humidity: f64) -> f64 {
    let es = 0.6108 * (17.27 * temperature / (temperature + 237.3)).exp();
    (es * (1.0 - humidity / 100.0)).max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeatherParams {
    pub temp_mean: f64,
    /// Linear seasonal drift, °C per day.
    pub temp_drift: f64,
    /// Half peak-to-trough diurnal range.
    pub temp_amplitude: f64,
    /// SD of the AR(1) day-to-day temperature anomaly.
    pub temp_day_sd: f64,
    pub temp_noise_sd: f64,
    pub radiation_peak: f64,
    pub sunrise_hour: f64,
    pub sunset_hour: f64,
    pub humidity_mean: f64,
    /// Humidity drop per °C above the day's base temperature.
    pub humidity_temp_slope: f64,
    pub humidity_day_sd: f64,
    pub humidity_noise_sd: f64,
    pub soil_initial: f64,
    /// Exponential drying rate per day.
    pub soil_drying_rate: f64,
    pub rain_probability: f64,
    /// Soil moisture right after a rain event.
    pub soil_rain_level: f64,
}

impl Default for WeatherParams {
    fn default() -> Self {
        Self {
            temp_mean: 17.0,
            temp_drift: 0.03,
            temp_amplitude: 6.0,
            temp_day_sd: 2.5,
            temp_noise_sd: 0.3,
            radiation_peak: 800.0,
            sunrise_hour: 6.0,
            sunset_hour: 18.0,
            humidity_mean: 72.0,
            humidity_temp_slope: 3.0,
            humidity_day_sd: 6.0,
            humidity_noise_sd: 2.0,
            soil_initial: 0.32,
            soil_drying_rate: 0.05,
            rain_probability: 0.12,
            soil_rain_level: 0.38,
        }
    }
}

/// How the drivers combine into sap flux.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseForm {
    /// `a·[g(R) + f(V)·R + e(V, X)]`, inside the fitted model class.
    #[default]
    Additive,
    /// `a·f(V)·g(R)·env(X)`, multiplicative in the drivers.
    Product,
}

/// Gains shared by all trees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResponseParams {
    pub radiation_gain: f64,
    /// Multiplies `V/(V+v_half)·R/1000`.
    pub vpd_gain: f64,
    /// Multiplies `V²·m(X)` in the additive form.
    pub env_gain: f64,
    pub product_gain: f64,
    /// Half-width of the `m(X)` modulation around 1.
    pub env_strength: f64,
}

impl Default for ResponseParams {
    fn default() -> Self {
        Self { radiation_gain: 3.0, vpd_gain: 3.0, env_gain: 0.15, product_gain: 10.0, env_strength: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeParams {
    pub record: TreeRecord,
    pub amplitude: f64,
    /// Coefficient on the previous hour's flux.
    pub rho: f64,
    /// Radiation at half saturation (W/m²).
    pub r_half: f64,
    /// VPD at half saturation (kPa).
    pub v_half: f64,
}

/// Days `start_day..=end_day` (1-based) with suppressed response and hotter,
/// drier weather.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeatwaveWindow {
    pub start_day: usize,
    pub end_day: usize,
    /// Multiplier on the driver response, in (0, 1].
    pub suppression: f64,
    #[serde(default)]
    pub temp_boost: f64,
    #[serde(default)]
    pub humidity_drop: f64,
}

impl HeatwaveWindow {
    fn contains(&self, day: usize) -> bool {
        (self.start_day..=self.end_day).contains(&(day + 1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub days: usize,
    pub start: DateTime<Utc>,
    pub seed: u64,
    pub noise_sd: f64,
    #[serde(default)]
    pub form: ResponseForm,
    /// Daily covariate driving the envelope.
    pub flexible: FlexibleCovariate,
    #[serde(default)]
    pub weather: WeatherParams,
    #[serde(default)]
    pub response: ResponseParams,
    pub trees: Vec<TreeParams>,
    #[serde(default)]
    pub heatwaves: Vec<HeatwaveWindow>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            days: 90,
            start: Utc.with_ymd_and_hms(2022, 6, 1, 0, 0, 0).unwrap(),
            seed: 1,
            noise_sd: 0.1,
            form: ResponseForm::Additive,
            flexible: FlexibleCovariate::DailyMeanSoil,
            weather: WeatherParams::default(),
            response: ResponseParams::default(),
            trees: default_trees(5),
            heatwaves: vec![],
        }
    }
}

/// `n` trees with mildly varying parameters and geometry.
pub fn default_trees(n: usize) -> Vec<TreeParams> {
    const AMP: [f64; 5] = [1.0, 0.85, 1.15, 0.95, 1.1];
    const RHO: [f64; 5] = [0.5, 0.45, 0.55, 0.5, 0.4];
    const R_HALF: [f64; 5] = [300.0, 350.0, 250.0, 320.0, 280.0];
    const V_HALF: [f64; 5] = [1.0, 1.2, 0.8, 1.1, 0.9];
    const GIRTH: [f64; 5] = [19.0, 17.0, 25.0, 21.0, 30.0];
    (0..n)
        .map(|i| {
            let j = i % 5;
            let girth = GIRTH[j] + (i / 5) as f64;
            TreeParams {
                record: TreeRecord {
                    id: format!("tree_{}", i + 1),
                    species: "synthetic".into(),
                    size_class: format!("{}-{}", girth.floor(), girth.floor() + 2.0),
                    circumference_cm: girth,
                    bark_depth_cm: 0.3,
                    sensor_radii: None,
                    count: 1,
                },
                amplitude: AMP[j],
                rho: RHO[j],
                r_half: R_HALF[j],
                v_half: V_HALF[j],
            }
        })
        .collect()
}

/// Ground truth for one tree. Component series already include the
/// amplitude and the heatwave multiplier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeTruth {
    pub id: String,
    /// `a·κ·g(R)` (additive form) or the full product forcing.
    pub radiation_part: Vec<f64>,
    /// `a·κ·f(V)·R` (additive form), zero in product form.
    pub vpd_radiation_part: Vec<f64>,
    /// `a·κ·e(V, X)` (additive form), zero in product form.
    pub env_part: Vec<f64>,
    /// Heatwave multiplier per hour.
    pub suppression: Vec<f64>,
    /// Conditional mean before noise and flooring: forcing + ρ·Y[t-1].
    pub mean: Vec<f64>,
}

pub struct SyntheticField {
    /// Weather, one column per tree and the standard daily covariates.
    pub frame: AlignedFrame,
    pub trees: Vec<TreeRecord>,
    pub truth: Vec<TreeTruth>,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        if self.days == 0 {
            return bad("days must be >= 1".into());
        }
        if !(self.noise_sd >= 0.0) {
            return bad("noise_sd must be >= 0".into());
        }
        if self.weather.sunset_hour <= self.weather.sunrise_hour {
            return bad("sunset must follow sunrise".into());
        }
        for t in &self.trees {
            if !(t.amplitude > 0.0) {
                return bad(format!("tree {} amplitude must be > 0", t.record.id));
            }
            if !(t.r_half > 0.0 && t.v_half > 0.0) {
                return bad(format!("tree {} half-saturation constants must be > 0", t.record.id));
            }
            if !(t.rho.abs() < 1.0) {
                return bad(format!("tree {} rho must lie in (-1, 1)", t.record.id));
            }
        }
        for h in &self.heatwaves {
            if h.start_day < 1 || h.end_day < h.start_day || h.end_day > self.days {
                return bad(format!("heatwave {}..={} outside [1, {}]", h.start_day, h.end_day, self.days));
            }
            if !(h.suppression > 0.0 && h.suppression <= 1.0) {
                return bad("heatwave suppression must lie in (0, 1]".into());
            }
        }
        Ok(())
    }

    fn heatwave(&self, day: usize) -> Option<&HeatwaveWindow> {
        self.heatwaves.iter().find(|h| h.contains(day))
    }

    /// Heatwave multiplier on day `day` (0-based from the scenario start).
    pub fn suppression(&self, day: usize) -> f64 {
        self.heatwave(day).map_or(1.0, |h| h.suppression)
    }

    /// Driver response split into its radiation, VPD·radiation and envelope
    /// parts (the product form puts everything in the first).
    pub fn forcing(&self, tree: &TreeParams, r: f64, v: f64, x: f64, kappa: f64) -> (f64, f64, f64) {
        let scale = tree.amplitude * kappa;
        match self.form {
            ResponseForm::Additive => (
                scale * self.radiation_response(tree, r),
                scale * self.vpd_coefficient(tree, v) * r,
                scale * self.env_response(v, x),
            ),
            ResponseForm::Product => {
                let p = self.response.product_gain * (v / (v + tree.v_half)) * (r / (r + tree.r_half));
                (scale * p * self.env_modulation(x), 0.0, 0.0)
            }
        }
    }

    /// `m(X)`: smooth modulation of the response by the daily covariate.
    pub fn env_modulation(&self, x: f64) -> f64 {
        let (mid, scale, sign) = match self.flexible {
            FlexibleCovariate::DailyMaxTemp => (24.0, 4.0, 1.0),
            FlexibleCovariate::DailyMinHumidity => (45.0, 10.0, -1.0),
            FlexibleCovariate::DailyMeanSoil => (0.25, 0.07, 1.0),
        };
        1.0 + self.response.env_strength * (sign * (x - mid) / scale).tanh()
    }

    /// Unit-amplitude `g(R)` of a tree.
    pub fn radiation_response(&self, tree: &TreeParams, r: f64) -> f64 {
        self.response.radiation_gain * r / (r + tree.r_half)
    }

    /// Unit-amplitude coefficient `f(V)` multiplying R.
    pub fn vpd_coefficient(&self, tree: &TreeParams, v: f64) -> f64 {
        self.response.vpd_gain * v / (v + tree.v_half) / 1000.0
    }

    /// Unit-amplitude `e(V, X)`.
    pub fn env_response(&self, v: f64, x: f64) -> f64 {
        self.response.env_gain * v * v * self.env_modulation(x)
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Hourly weather channels plus the standard daily covariates.
pub fn gen_weather(config: &ScenarioConfig) -> Result<AlignedFrame> {
    config.validate()?;
    let w = &config.weather;
    let mut rng = rng_for(config.seed, 0);
    let n = config.days * 24;
    let (mut temp, mut hum, mut rad, mut vpd, mut soil) =
        (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    let phi: f64 = 0.7;
    let innov = (1.0 - phi * phi).sqrt();
    let (mut t_anom, mut h_anom, mut cloud_anom) = (0.0, 0.0, 0.0);
    let mut moisture = w.soil_initial;
    let day_len = w.sunset_hour - w.sunrise_hour;
    for day in 0..config.days {
        t_anom = phi * t_anom + w.temp_day_sd * innov * normal(&mut rng);
        h_anom = phi * h_anom + w.humidity_day_sd * innov * normal(&mut rng);
        cloud_anom = phi * cloud_anom + 0.15 * innov * normal(&mut rng);
        let cloud = (0.8 + cloud_anom).clamp(0.25, 1.0);
        if day > 0 {
            if rng.gen::<f64>() < w.rain_probability {
                moisture = w.soil_rain_level;
            } else {
                moisture *= (-w.soil_drying_rate).exp();
            }
        }
        let (boost, drop) = config.heatwave(day).map_or((0.0, 0.0), |h| (h.temp_boost, h.humidity_drop));
        let base = w.temp_mean + w.temp_drift * day as f64 + t_anom + boost;
        for hour in 0..24 {
            let h = hour as f64;
            let t = base + w.temp_amplitude * (2.0 * PI * (h - 9.0) / 24.0).sin() + w.temp_noise_sd * normal(&mut rng);
            let solar = if h > w.sunrise_hour && h < w.sunset_hour {
                (PI * (h - w.sunrise_hour) / day_len).sin()
            } else {
                0.0
            };
            let jitter = 1.0 + 0.05 * normal(&mut rng);
            let r = (w.radiation_peak * cloud * solar * jitter).max(0.0);
            let rh = (w.humidity_mean + h_anom - drop - w.humidity_temp_slope * (t - base)
                + w.humidity_noise_sd * normal(&mut rng))
            .clamp(5.0, 100.0);
            temp.push(t);
            hum.push(rh);
            rad.push(r);
            vpd.push(tetens_vpd(t, rh));
            soil.push(moisture);
        }
    }
    let series = |v: &[f64], unit: &str| TimeSeries::hourly_dense(config.start, v, unit).expect("hourly index");
    let columns = [
        (channel::TEMPERATURE, series(&temp, "degC")),
        (channel::HUMIDITY, series(&hum, "%")),
        (channel::RADIATION, series(&rad, "W/m2")),
        (channel::VPD, series(&vpd, "kPa")),
        (channel::SOIL_MOISTURE, series(&soil, "m3/m3")),
    ];
    let frame = AlignedFrame::align(columns.iter().map(|(k, s)| (*k, s))).expect("shared index");
    Ok(frame.with_standard_daily_covariates())
}

/// Sap flux of one tree driven by `weather`. `stream` selects the noise
/// stream so trees are independent of each other's presence.
pub fn gen_sapflux(weather: &AlignedFrame, tree: &TreeParams, config: &ScenarioConfig, stream: u64) -> (TimeSeries, TreeTruth) {
    let mut rng = rng_for(config.seed, stream);
    let n = weather.len();
    let mut truth = TreeTruth {
        id: tree.record.id.clone(),
        radiation_part: Vec::with_capacity(n),
        vpd_radiation_part: Vec::with_capacity(n),
        env_part: Vec::with_capacity(n),
        suppression: Vec::with_capacity(n),
        mean: Vec::with_capacity(n),
    };
    let mut out = Vec::with_capacity(n);
    let mut prev = 0.0;
    let first_day = day_of(weather.start());
    for i in 0..n {
        let get = |name: &str| weather.value(name, i).expect("complete weather");
        let (r, v, x) = (get(channel::RADIATION), get(channel::VPD), get(config.flexible.column()));
        let day = (day_of(weather.timestamp(i)) - first_day).num_days() as usize;
        let kappa = config.suppression(day);
        let (g, fr, e) = config.forcing(tree, r, v, x, kappa);
        let mean = g + fr + e + tree.rho * prev;
        let y = (mean + config.noise_sd * normal(&mut rng)).max(0.0);
        truth.radiation_part.push(g);
        truth.vpd_radiation_part.push(fr);
        truth.env_part.push(e);
        truth.suppression.push(kappa);
        truth.mean.push(mean);
        out.push(y);
        prev = y;
    }
    let series = TimeSeries::hourly_dense(weather.start(), &out, "cm3/cm2/h").expect("hourly index");
    (series, truth)
}

/// Weather plus every tree, with trees added as frame columns named by id.
pub fn generate(config: &ScenarioConfig) -> Result<SyntheticField> {
    let mut frame = gen_weather(config)?;
    let mut truth = Vec::with_capacity(config.trees.len());
    for (i, tree) in config.trees.iter().enumerate() {
        let (series, t) = gen_sapflux(&frame, tree, config, 1 + i as u64);
        frame
            .insert_column(&tree.record.id, series.values().to_vec(), series.unit())
            .expect("same index");
        truth.push(t);
    }
    Ok(SyntheticField { frame, trees: config.trees.iter().map(|t| t.record.clone()).collect(), truth })
}

/// The noise-free generating mechanism of one tree, usable as an ensemble
/// member.
#[derive(Debug, Clone)]
pub struct OracleModel {
    pub config: ScenarioConfig,
    pub tree: TreeParams,
}

impl Forecaster for OracleModel {
    fn max_lag(&self) -> usize {
        1
    }

    fn rolling_predict(&self, frame: &AlignedFrame, from: usize, len: usize, y_init: &[f64]) -> ModelResult<RollingPrediction> {
        let mut prev = *y_init.last().ok_or_else(|| ModelError::BadSpec("need 1 initial response".into()))?;
        let first_day = day_of(self.config.start);
        let mut out = Vec::with_capacity(len);
        for i in from..from + len {
            let get = |name: &str| {
                frame.value(name, i).ok_or_else(|| ModelError::MissingCovariate {
                    name: name.to_string(),
                    timestamp: frame.timestamp(i).to_rfc3339(),
                })
            };
            let (r, v, x) = (get(channel::RADIATION)?, get(channel::VPD)?, get(self.config.flexible.column())?);
            let day = (day_of(frame.timestamp(i)) - first_day).num_days();
            let kappa = usize::try_from(day).map_or(1.0, |d| self.config.suppression(d));
            let (g, fr, e) = self.config.forcing(&self.tree, r, v, x, kappa);
            prev = (g + fr + e + self.tree.rho * prev).max(0.0);
            out.push(Some(prev));
        }
        let values = TimeSeries::new(frame.timestamp(from), frame.step_secs(), out, "prediction").expect("regular index");
        Ok(RollingPrediction { values, clamp_count: 0 })
    }
}

/// A second season with fresh weather and noise, starting `offset_days`
/// after the first.
pub fn season_twin(config: &ScenarioConfig, offset_days: i64, seed: u64) -> ScenarioConfig {
    ScenarioConfig { start: config.start + Duration::days(offset_days), seed, ..config.clone() }
}
