//! Subcommand definitions and their runs.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{DateTime, Duration, NaiveDate, Timelike, Utc};
use sapflux_core::changepoint::{self, CostKind, PeltOptions, Segmentation};
use sapflux_core::io::{self, HourlyTable};
use sapflux_core::model::{FlexibleCovariate, StandardOptions};
use sapflux_core::rolling::{self, RollingConfig, RollingError, RollingReport};
use sapflux_core::series::{AlignedFrame, TimeSeries, SECONDS_PER_DAY};
use sapflux_core::spa::{self, LossDiffPanel, Loss};
use sapflux_core::stats;
use sapflux_core::synth::{self, ScenarioConfig};
use sapflux_core::wateruse::{self, TreeRecord};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::config::{self, ConfigError, PathKey, Paths};
use crate::error::CliError;
use crate::manifest::{Manifest, RunFiles};
use crate::svg::{Chart, Line};

pub const OUTPUT_SCHEMA_VERSION: u32 = 1;

/// A flag mirroring a config key.
#[derive(Debug, Clone, Copy)]
pub struct Flag {
    pub long: &'static str,
    pub key: &'static str,
    pub help: &'static str,
    /// A single value is taken as a one-element list.
    pub list: bool,
}

pub struct SubSpec {
    pub name: &'static str,
    pub about: &'static str,
    pub paths: &'static [PathKey],
    pub flags: &'static [Flag],
    pub defaults: fn() -> Value,
}

const fn input(key: &'static str, help: &'static str) -> PathKey {
    PathKey { key, required: true, multi: false, output: false, help }
}

const OUT: PathKey = PathKey { key: "out", required: true, multi: false, output: true, help: "output directory" };

const fn flag(long: &'static str, key: &'static str, help: &'static str) -> Flag {
    Flag { long, key, help, list: false }
}

const fn list_flag(long: &'static str, key: &'static str, help: &'static str) -> Flag {
    Flag { long, key, help, list: true }
}

const ROLLING_FLAGS: &[Flag] = &[
    flag("initial-days", "initial_days", "days in the initial training period"),
    flag("window-days", "window_days", "days per forecast window"),
    flag("weight-window-days", "weight_window_days", "days used to score members"),
    list_flag("model-types", "model_types", "flexible covariates, comma separated"),
    flag("weight-scheme", "weight_scheme", "equal | reciprocal_mse | JSON object"),
    flag("interval-level", "interval_level", "nominal interval coverage"),
    flag("mode", "mode", "refit | frozen_members"),
    flag("min-rows-per-column", "min_rows_per_column", "complete rows per design column"),
    flag("daily-error", "daily_error", "independent | correlated"),
];

const CROSS_FLAGS: &[Flag] = &[
    flag("initial-days", "initial_days", "days in the initial weighting period"),
    flag("window-days", "window_days", "days per forecast window"),
    flag("weight-window-days", "weight_window_days", "days used to score members"),
    list_flag("model-types", "model_types", "flexible covariates, comma separated"),
    flag("weight-scheme", "weight_scheme", "equal | reciprocal_mse | JSON object"),
    flag("interval-level", "interval_level", "nominal interval coverage"),
    flag("min-rows-per-column", "min_rows_per_column", "complete rows per design column"),
    flag("daily-error", "daily_error", "independent | correlated"),
    flag("scale", "scale", "known flux scale of the target season"),
    flag("scale-quantile", "scale_quantile", "quantile used to estimate season scales"),
];

pub const SUBCOMMANDS: &[SubSpec] = &[
    SubSpec {
        name: "simulate",
        about: "Generate a synthetic weather and sap flux scenario",
        paths: &[OUT],
        flags: &[
            flag("days", "days", "scenario length in days"),
            flag("seed", "seed", "random seed"),
            flag("start", "start", "first timestamp, RFC 3339"),
            flag("noise-sd", "noise_sd", "observation noise SD"),
            flag("form", "form", "additive | product"),
            flag("flexible", "flexible", "daily covariate driving the envelope"),
            flag("tree-count", "tree_count", "replace `trees` with this many default trees"),
            flag("heatwaves", "heatwaves", "JSON array of suppression windows"),
        ],
        defaults: || to_value(&ScenarioConfig::default()),
    },
    SubSpec {
        name: "fit",
        about: "Fit one additive model per tree and flexible covariate",
        paths: &[input("frame", "hourly frame CSV"), input("trees", "tree records JSON"), OUT],
        flags: &[
            list_flag("model-types", "model_types", "flexible covariates, comma separated"),
            flag("min-rows-per-column", "min_rows_per_column", "complete rows per design column"),
            flag("fit-days", "fit_days", "fit on the first N days only"),
        ],
        defaults: || to_value(&FitParams::default()),
    },
    SubSpec {
        name: "roll",
        about: "Rolling-origin ensemble forecast of daily water-use",
        paths: &[input("frame", "hourly frame CSV"), input("trees", "tree records JSON"), OUT],
        flags: ROLLING_FLAGS,
        defaults: || to_value(&RollingConfig::default()),
    },
    SubSpec {
        name: "cross-season",
        about: "Forecast a new season with members frozen on a historical one",
        paths: &[
            input("history", "historical season frame CSV"),
            input("target", "target season frame CSV"),
            input("trees", "tree records JSON"),
            OUT,
        ],
        flags: CROSS_FLAGS,
        defaults: || cross_defaults(),
    },
    SubSpec {
        name: "wateruse",
        about: "Daily water-use from measured flux",
        paths: &[input("flux", "hourly flux CSV"), input("trees", "tree records JSON"), OUT],
        flags: &[flag("threshold-cm", "threshold_cm", "sapwood radius up to which only the outer sensor is used")],
        defaults: || to_value(&WaterUseParams::default()),
    },
    SubSpec {
        name: "spa",
        about: "Superior predictive ability test against a benchmark forecast",
        paths: &[
            input("benchmark", "benchmark forecast CSV"),
            PathKey { key: "competitor", required: true, multi: true, output: false, help: "competitor forecast CSV (repeatable)" },
            PathKey { key: "observed", required: false, multi: false, output: false, help: "observed flux CSV" },
            OUT,
        ],
        flags: &[
            flag("loss", "loss", "squared_error | absolute_error"),
            flag("p-star-days", "p_star_days", "mean bootstrap block length in days"),
            flag("replicates", "replicates", "bootstrap replicates"),
            flag("seed", "seed", "bootstrap seed"),
            list_flag("columns", "columns", "tree columns to compare, comma separated"),
        ],
        defaults: || to_value(&SpaParams::default()),
    },
    SubSpec {
        name: "changepoint",
        about: "Penalised changepoint segmentation of a residual series",
        paths: &[input("input", "hourly CSV holding the series"), OUT],
        flags: &[
            flag("column", "column", "series column; `residual` falls back to observed - prediction"),
            flag("penalty", "penalty", "fixed penalty (default 3 ln n)"),
            flag("penalty-range", "penalty_range", "penalty range lo,hi for a penalty sweep"),
            flag("count", "count", "select the segmentation with this many changepoints"),
            flag("min-seg-len", "min_seg_len", "minimum segment length"),
            flag("cost", "cost", "mean_variance | mean"),
        ],
        defaults: || to_value(&ChangepointParams::default()),
    },
    SubSpec {
        name: "report",
        about: "SVG plots and a summary of a roll or cross-season run",
        paths: &[input("run", "output directory of a roll or cross-season run"), OUT],
        flags: &[flag("title", "title", "plot title prefix")],
        defaults: || to_value(&ReportParams::default()),
    },
];

pub fn spec(name: &str) -> Option<&'static SubSpec> {
    SUBCOMMANDS.iter().find(|s| s.name == name)
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("config serializes")
}

fn to_map<T: Serialize>(v: &T) -> Map<String, Value> {
    match to_value(v) {
        Value::Object(m) => m,
        _ => Map::new(),
    }
}

fn cross_defaults() -> Value {
    let mut m = to_map(&RollingConfig::default());
    m.remove("mode");
    m.insert("scale".into(), Value::Null);
    m.insert("scale_quantile".into(), json!(DEFAULT_SCALE_QUANTILE));
    Value::Object(m)
}

const DEFAULT_SCALE_QUANTILE: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitParams {
    pub model_types: Vec<FlexibleCovariate>,
    pub model: StandardOptions,
    pub min_rows_per_column: f64,
    pub fit_days: Option<usize>,
}

impl Default for FitParams {
    fn default() -> Self {
        let r = RollingConfig::default();
        Self { model_types: r.model_types, model: r.model, min_rows_per_column: r.min_rows_per_column, fit_days: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WaterUseParams {
    pub threshold_cm: f64,
}

impl Default for WaterUseParams {
    fn default() -> Self {
        Self { threshold_cm: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpaParams {
    pub loss: Loss,
    pub p_star_days: f64,
    pub replicates: usize,
    pub seed: u64,
    pub columns: Option<Vec<String>>,
}

impl Default for SpaParams {
    fn default() -> Self {
        Self { loss: Loss::SquaredError, p_star_days: 3.0, replicates: 1000, seed: 1, columns: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChangepointParams {
    pub column: String,
    pub penalty: Option<f64>,
    pub penalty_range: Option<(f64, f64)>,
    pub count: Option<usize>,
    pub min_seg_len: usize,
    pub cost: CostKind,
}

impl Default for ChangepointParams {
    fn default() -> Self {
        let o = PeltOptions::default();
        Self { column: "residual".into(), penalty: None, penalty_range: None, count: None, min_seg_len: o.min_seg_len, cost: o.cost }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportParams {
    pub title: String,
}

impl Default for ReportParams {
    fn default() -> Self {
        Self { title: "Standard tree".into() }
    }
}

/// Run a subcommand from a merged configuration map.
pub fn execute(name: &str, mut map: Map<String, Value>) -> Result<Manifest, CliError> {
    let spec = spec(name).ok_or_else(|| CliError::Validation(format!("unknown subcommand `{name}`")))?;
    let cwd = std::env::current_dir().map_err(|e| CliError::file(Path::new("."), e))?;
    let paths = config::take_paths(&mut map, spec.paths, &cwd)?;
    let out = paths.one("out").expect("out is required").to_path_buf();
    let mut files = RunFiles::new(&out)?;
    let (params, seed) = match name {
        "simulate" => simulate(map, &mut files)?,
        "fit" => fit(map, &paths, &mut files)?,
        "roll" => roll(map, &paths, &mut files)?,
        "cross-season" => cross_season(map, &paths, &mut files)?,
        "wateruse" => water_use(map, &paths, &mut files)?,
        "spa" => spa_test(map, &paths, &mut files)?,
        "changepoint" => changepoints(map, &paths, &mut files)?,
        "report" => report(map, &paths, &mut files)?,
        _ => unreachable!(),
    };
    let mut echo = paths.to_json(spec.paths);
    echo.extend(params);
    files.finish(name, echo, seed)
}

/// Re-execute a manifest, optionally into another directory.
pub fn rerun(manifest_path: &Path, out: Option<&Path>) -> Result<Manifest, CliError> {
    let m = Manifest::read(manifest_path)?;
    m.verify_inputs()?;
    let mut config = m.config.clone();
    if let Some(out) = out {
        config.insert("out".into(), Value::String(out.display().to_string()));
    }
    execute(&m.subcommand, config)
}

fn read_frame(files: &mut RunFiles, key: &str, path: &Path) -> Result<AlignedFrame, CliError> {
    let bytes = files.read(key, path)?;
    let frame = io::read_frame(bytes.as_slice()).map_err(|e| CliError::csv(path, e))?;
    Ok(frame.with_standard_daily_covariates())
}

fn read_table(files: &mut RunFiles, key: &str, path: &Path) -> Result<HourlyTable, CliError> {
    let bytes = files.read(key, path)?;
    io::read_hourly_table(bytes.as_slice()).map_err(|e| CliError::csv(path, e))
}

fn read_trees(files: &mut RunFiles, path: &Path) -> Result<Vec<TreeRecord>, CliError> {
    let bytes = files.read("trees", path)?;
    let mut de = serde_json::Deserializer::from_slice(&bytes);
    let trees: Vec<TreeRecord> = serde_path_to_error::deserialize(&mut de).map_err(|e| CliError::file(path, format!("at `{}`: {}", e.path(), e.inner())))?;
    if trees.is_empty() {
        return Err(CliError::Validation(format!("{}: no tree records", path.display())));
    }
    Ok(trees)
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> io::Result<()>) -> Result<Vec<u8>, CliError> {
    let mut buf = vec![];
    f(&mut buf).map_err(|e| CliError::Validation(e.to_string()))?;
    Ok(buf)
}

/// Rolling config from flag-style values, with range checks that name the key.
fn rolling_config(mut map: Map<String, Value>) -> Result<RollingConfig, CliError> {
    if let Some(Value::String(s)) = map.get("weight_scheme") {
        let kind = s.clone();
        map.insert("weight_scheme".into(), json!({ "kind": kind }));
    }
    let cfg: RollingConfig = config::deserialize(map, "")?;
    cfg.validate().map_err(range_error)?;
    Ok(cfg)
}

fn range_error(e: RollingError) -> CliError {
    match e {
        RollingError::InvalidConfig(msg) => {
            let key = msg.split_whitespace().next().unwrap_or("").to_string();
            CliError::Config(ConfigError::Range { key, message: msg })
        }
        other => other.into(),
    }
}

fn simulate(mut map: Map<String, Value>, files: &mut RunFiles) -> Result<(Map<String, Value>, Option<u64>), CliError> {
    let tree_count: Option<usize> = config::take(&mut map, "tree_count")?;
    let mut cfg: ScenarioConfig = config::deserialize(map, "")?;
    if let Some(n) = tree_count {
        cfg.trees = synth::default_trees(n);
    }
    cfg.validate()?;
    let field = synth::generate(&cfg)?;
    files.write("frame.csv", &csv_bytes(|b| io::write_frame(&field.frame, b))?)?;
    files.write_json("trees.json", &field.trees)?;
    files.write("truth.csv", &csv_bytes(|b| io::write_truth(&field.frame, &field.truth, b))?)?;
    files.write_json("scenario.json", &cfg)?;
    Ok((to_map(&cfg), Some(cfg.seed)))
}

#[derive(Serialize)]
struct MemberSummary {
    id: String,
    tree: String,
    file: String,
    n_obs: usize,
    edf: f64,
    sigma2: f64,
    deviance_explained: f64,
    lambdas: Vec<f64>,
    warnings: Vec<String>,
}

fn fit(map: Map<String, Value>, paths: &Paths, files: &mut RunFiles) -> Result<(Map<String, Value>, Option<u64>), CliError> {
    let params: FitParams = config::deserialize(map, "")?;
    let rolling = RollingConfig {
        model_types: params.model_types.clone(),
        model: params.model.clone(),
        min_rows_per_column: params.min_rows_per_column,
        ..RollingConfig::default()
    };
    rolling.validate().map_err(range_error)?;
    let mut frame = read_frame(files, "frame", paths.one("frame").unwrap())?;
    let trees = read_trees(files, paths.one("trees").unwrap())?;
    if let Some(days) = params.fit_days {
        let rows = days * frame.rows_per_day();
        if days == 0 || rows > frame.len() {
            return Err(ConfigError::Range { key: "fit_days".into(), message: format!("{days} days requested, frame has {} rows", frame.len()) }.into());
        }
        frame = frame.window(0, rows);
    }
    for t in &trees {
        if !frame.has(&t.id) {
            return Err(RollingError::MissingTree(t.id.clone()).into());
        }
    }
    let fits = rolling::fit_members(&frame, &trees, &rolling, &BTreeMap::new());
    if fits.models.is_empty() {
        let detail: Vec<String> = fits.failures.iter().map(|(id, e)| format!("{id}: {e}")).collect();
        return Err(CliError::Numeric(format!("no model could be fitted ({})", detail.join("; "))));
    }
    let mut summaries = vec![];
    let mut residuals: Vec<(String, TimeSeries)> = vec![];
    for (member, model) in fits.members.iter().zip(&fits.models) {
        let file = format!("models/{}.json", member.id.replace('/', "__"));
        files.write(&file, model.to_json().as_bytes())?;
        summaries.push(MemberSummary {
            id: member.id.clone(),
            tree: member.tree.clone(),
            file,
            n_obs: model.n_obs,
            edf: model.edf,
            sigma2: model.sigma2,
            deviance_explained: model.deviance_explained,
            lambdas: model.lambdas.clone(),
            warnings: model.warnings.clone(),
        });
        residuals.push((member.id.clone(), model.residuals(&frame)));
    }
    let failures: Vec<Value> = fits.failures.iter().map(|(id, e)| json!({"id": id, "error": e.to_string()})).collect();
    files.write_json("fit_summary.json", &json!({"schema_version": OUTPUT_SCHEMA_VERSION, "members": summaries, "failures": failures}))?;
    let table = AlignedFrame::align(residuals.iter().map(|(n, s)| (n.as_str(), s)))?;
    files.write("residuals.csv", &csv_bytes(|b| io::write_frame(&table, b))?)?;
    Ok((to_map(&params), None))
}

fn write_run_outputs(report: &RollingReport, files: &mut RunFiles) -> Result<(), CliError> {
    files.write("report.csv", &csv_bytes(|b| io::write_report(&report.hourly, b))?)?;
    files.write("wateruse.csv", &csv_bytes(|b| io::write_wateruse(&report.daily, b))?)?;
    files.write("weights.csv", &csv_bytes(|b| io::write_weights(&report.windows, b))?)?;
    files.write_json("run.json", report)?;
    let metrics = report.self_evaluate().ok();
    files.write_json("metrics.json", &json!({"schema_version": OUTPUT_SCHEMA_VERSION, "metrics": metrics}))?;
    Ok(())
}

fn roll(map: Map<String, Value>, paths: &Paths, files: &mut RunFiles) -> Result<(Map<String, Value>, Option<u64>), CliError> {
    let cfg = rolling_config(map)?;
    let frame = read_frame(files, "frame", paths.one("frame").unwrap())?;
    let trees = read_trees(files, paths.one("trees").unwrap())?;
    let report = rolling::run_rolling(&frame, &trees, &cfg)?;
    write_run_outputs(&report, files)?;
    Ok((to_map(&cfg), None))
}

fn cross_season(mut map: Map<String, Value>, paths: &Paths, files: &mut RunFiles) -> Result<(Map<String, Value>, Option<u64>), CliError> {
    let scale: Option<f64> = config::take(&mut map, "scale")?;
    let q: f64 = config::take(&mut map, "scale_quantile")?.unwrap_or(DEFAULT_SCALE_QUANTILE);
    if !(q > 0.0 && q <= 1.0) {
        return Err(ConfigError::Range { key: "scale_quantile".into(), message: "must lie in (0, 1]".into() }.into());
    }
    if let Some(s) = scale {
        if !(s > 0.0 && s.is_finite()) {
            return Err(ConfigError::Range { key: "scale".into(), message: "must be positive".into() }.into());
        }
    }
    if map.contains_key("mode") {
        return Err(ConfigError::UnknownKey("mode".into()).into());
    }
    let cfg = RollingConfig { mode: rolling::Mode::FrozenMembers, ..rolling_config(map)? };
    let history = read_frame(files, "history", paths.one("history").unwrap())?;
    let target = read_frame(files, "target", paths.one("target").unwrap())?;
    let trees = read_trees(files, paths.one("trees").unwrap())?;

    let history_scale = rolling::season_scale(&history, &trees, q)?;
    let target_scale = match scale {
        Some(s) => s,
        None => rolling::season_scale(&target, &trees, q)?,
    };
    let history_n = rolling::normalize_trees(&history, &trees, history_scale)?;
    let target_n = rolling::normalize_trees(&target, &trees, target_scale)?;
    let fits = rolling::fit_members(&history_n, &trees, &cfg, &BTreeMap::new());
    if fits.members.is_empty() {
        let detail: Vec<String> = fits.failures.iter().map(|(id, e)| format!("{id}: {e}")).collect();
        return Err(CliError::Numeric(format!("no member could be fitted on the history ({})", detail.join("; "))));
    }
    let report = rolling::run_cross_season(&fits.members, &history_n, &target_n, &trees, target_scale, &cfg)?;
    write_run_outputs(&report, files)?;
    files.write_json(
        "scales.json",
        &json!({"schema_version": OUTPUT_SCHEMA_VERSION, "history_scale": history_scale, "target_scale": target_scale, "quantile": q}),
    )?;
    let mut echo = to_map(&cfg);
    echo.remove("mode");
    echo.insert("scale".into(), scale.map_or(Value::Null, |s| json!(s)));
    echo.insert("scale_quantile".into(), json!(q));
    Ok((echo, None))
}

#[derive(Serialize)]
struct TreeDayRow<'a> {
    date: NaiveDate,
    tree: &'a str,
    count: u32,
    liters: f64,
    group_liters: f64,
}

fn water_use(map: Map<String, Value>, paths: &Paths, files: &mut RunFiles) -> Result<(Map<String, Value>, Option<u64>), CliError> {
    let params: WaterUseParams = config::deserialize(map, "")?;
    if !(params.threshold_cm >= 0.0) {
        return Err(ConfigError::Range { key: "threshold_cm".into(), message: "must be >= 0".into() }.into());
    }
    let flux_path = paths.one("flux").unwrap();
    let table = read_table(files, "flux", flux_path)?;
    let trees = read_trees(files, paths.one("trees").unwrap())?;
    let mut per_tree = vec![];
    for t in &trees {
        let inner_name = format!("{}_inner", t.id);
        let outer_name = format!("{}_outer", t.id);
        let daily = if table.column(&outer_name).is_some() {
            let outer = table.series(&outer_name).map_err(|e| CliError::csv(flux_path, e))?;
            let inner = match table.column(&inner_name) {
                Some(_) => Some(table.series(&inner_name).map_err(|e| CliError::csv(flux_path, e))?),
                None => None,
            };
            wateruse::water_use_for_tree(t, inner.as_ref(), &outer, params.threshold_cm)?
        } else {
            let s = table.series(&t.id).map_err(|e| CliError::csv(flux_path, e))?;
            wateruse::water_use(&s, t.sapwood_area()?)
        };
        per_tree.push(daily);
    }
    let mut rows = vec![];
    let mut totals: BTreeMap<NaiveDate, (f64, usize)> = BTreeMap::new();
    for (t, d) in trees.iter().zip(&per_tree) {
        for (day, cm3) in d.days.iter().zip(&d.cm3) {
            let liters = cm3 / 1000.0;
            let group = liters * f64::from(t.count);
            rows.push(TreeDayRow { date: *day, tree: &t.id, count: t.count, liters, group_liters: group });
            let e = totals.entry(*day).or_insert((0.0, 0));
            e.0 += group;
            e.1 += 1;
        }
    }
    rows.sort_by(|a, b| a.date.cmp(&b.date).then(a.tree.cmp(b.tree)));
    let mut w = csv::Writer::from_writer(vec![]);
    for r in &rows {
        w.serialize(r).map_err(|e| CliError::Validation(e.to_string()))?;
    }
    files.write("wateruse_trees.csv", &w.into_inner().map_err(|e| CliError::Validation(e.to_string()))?)?;

    let mut w = csv::Writer::from_writer(vec![]);
    w.write_record(["date", "total_liters"]).map_err(|e| CliError::Validation(e.to_string()))?;
    for (day, (total, n)) in &totals {
        if *n == trees.len() {
            w.write_record([day.to_string(), total.to_string()]).map_err(|e| CliError::Validation(e.to_string()))?;
        }
    }
    files.write("wateruse_total.csv", &w.into_inner().map_err(|e| CliError::Validation(e.to_string()))?)?;
    let partial: BTreeMap<&str, Vec<NaiveDate>> = trees.iter().zip(&per_tree).map(|(t, d)| (t.id.as_str(), d.partial_days.clone())).collect();
    files.write_json("wateruse.json", &json!({"schema_version": OUTPUT_SCHEMA_VERSION, "partial_days": partial}))?;
    Ok((to_map(&params), None))
}

/// Hourly columns of several tables over their common span.
struct Aligned {
    start: DateTime<Utc>,
    len: usize,
}

fn common_span(tables: &[(&Path, &HourlyTable)]) -> Result<Aligned, CliError> {
    let step = tables[0].1.step_secs;
    for (p, t) in tables {
        if t.step_secs != step {
            return Err(CliError::Validation(format!("{}: step {} s differs from {} s", p.display(), t.step_secs, step)));
        }
    }
    let start = tables.iter().map(|(_, t)| t.start).max().unwrap();
    let end = tables.iter().map(|(_, t)| t.start + Duration::seconds(step * t.len() as i64)).min().unwrap();
    if end <= start {
        return Err(CliError::Validation("input tables do not overlap".into()));
    }
    // first midnight at or after the common start
    let secs = start.timestamp().rem_euclid(SECONDS_PER_DAY);
    let start = if secs == 0 { start } else { start + Duration::seconds(SECONDS_PER_DAY - secs) };
    let len = if end > start { ((end - start).num_seconds() / step) as usize } else { 0 };
    Ok(Aligned { start, len })
}

fn column_at<'a>(path: &Path, t: &'a HourlyTable, name: &str, from: DateTime<Utc>) -> Result<&'a [Option<f64>], CliError> {
    let col = t.column(name).ok_or_else(|| CliError::csv(path, io::IoError::MissingColumn(name.into())))?;
    let off = ((from - t.start).num_seconds() / t.step_secs) as usize;
    Ok(&col[off..])
}

fn spa_test(map: Map<String, Value>, paths: &Paths, files: &mut RunFiles) -> Result<(Map<String, Value>, Option<u64>), CliError> {
    let params: SpaParams = config::deserialize(map, "")?;
    let bench_path = paths.one("benchmark").unwrap().to_path_buf();
    let bench = read_table(files, "benchmark", &bench_path)?;
    let mut comps = vec![];
    for p in paths.many("competitor") {
        comps.push((p.clone(), read_table(files, "competitor", p)?));
    }
    let observed = match paths.one("observed") {
        Some(p) => Some((p.to_path_buf(), read_table(files, "observed", p)?)),
        None => None,
    };

    // (prediction column, observed column) per tree
    let pairs: Vec<(String, String)> = match &params.columns {
        Some(cols) => cols.iter().map(|c| (c.clone(), c.clone())).collect(),
        None if bench.column("prediction").is_some() => vec![("prediction".into(), "observed".into())],
        None => {
            let obs = &observed.as_ref().ok_or(ConfigError::MissingRequired("observed".into()))?.1;
            bench
                .names
                .iter()
                .filter(|n| comps.iter().all(|(_, c)| c.column(n).is_some()) && obs.column(n).is_some())
                .map(|n| (n.clone(), n.clone()))
                .collect()
        }
    };
    if pairs.is_empty() {
        return Err(CliError::Validation("benchmark, competitors and observations share no tree column".into()));
    }
    let (obs_path, obs_table) = match &observed {
        Some((p, t)) => (p.as_path(), t),
        None if params.columns.is_none() => (bench_path.as_path(), &bench),
        None => return Err(ConfigError::MissingRequired("observed".into()).into()),
    };
    let mut all: Vec<(&Path, &HourlyTable)> = vec![(&bench_path, &bench), (obs_path, obs_table)];
    all.extend(comps.iter().map(|(p, t)| (p.as_path(), t)));
    let span = common_span(&all)?;
    let per_day = (SECONDS_PER_DAY / bench.step_secs) as usize;
    let days = span.len / per_day;
    if days == 0 {
        return Err(spa::SpaError::NotWholeDays(span.len).into());
    }

    // gather columns, then keep days observed everywhere
    struct TreeCols<'a> {
        bench: &'a [Option<f64>],
        comps: Vec<&'a [Option<f64>]>,
        obs: &'a [Option<f64>],
    }
    let mut cols = vec![];
    for (pred, obs) in &pairs {
        cols.push(TreeCols {
            bench: column_at(&bench_path, &bench, pred, span.start)?,
            comps: comps.iter().map(|(p, t)| column_at(p, t, pred, span.start)).collect::<Result<_, _>>()?,
            obs: column_at(obs_path, obs_table, obs, span.start)?,
        });
    }
    let complete = |d: usize| {
        (d * per_day..(d + 1) * per_day)
            .all(|i| cols.iter().all(|c| c.bench[i].is_some() && c.obs[i].is_some() && c.comps.iter().all(|x| x[i].is_some())))
    };
    let kept: Vec<usize> = (0..days).filter(|&d| complete(d)).collect();
    if kept.is_empty() {
        return Err(CliError::Validation("no complete day shared by all inputs".into()));
    }
    let rows: Vec<usize> = kept.iter().flat_map(|d| d * per_day..(d + 1) * per_day).collect();
    let pick = |c: &[Option<f64>]| -> Vec<f64> { rows.iter().map(|&i| c[i].unwrap()).collect() };
    let mut mats = vec![];
    for c in &cols {
        let comp_vals: Vec<Vec<f64>> = c.comps.iter().map(|x| pick(x)).collect();
        mats.push(spa::loss_diffs(&pick(c.bench), &comp_vals, &pick(c.obs), params.loss)?);
    }
    let panel = LossDiffPanel::new(mats, params.loss)?;
    let result = spa::spa_pvalue(&panel, params.p_star_days, params.replicates, params.seed)?;
    let dropped: Vec<String> = (0..days)
        .filter(|d| !kept.contains(d))
        .map(|d| (span.start + Duration::days(d as i64)).date_naive().to_string())
        .collect();
    files.write_json(
        "spa.json",
        &json!({
            "schema_version": OUTPUT_SCHEMA_VERSION,
            "result": result,
            "columns": pairs.iter().map(|p| &p.0).collect::<Vec<_>>(),
            "competitors": paths.many("competitor").iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
            "first_day": span.start.date_naive().to_string(),
            "days_used": kept.len(),
            "days_dropped": dropped,
        }),
    )?;
    Ok((to_map(&params), Some(params.seed)))
}

#[derive(Serialize)]
struct SegmentRow {
    run: usize,
    segment: usize,
    start_index: usize,
    end_index: usize,
    start: String,
    end: String,
    mean: f64,
    variance: f64,
}

#[derive(Serialize)]
struct RunOut {
    start_index: usize,
    end_index: usize,
    changepoints: Vec<usize>,
    changepoint_timestamps: Vec<String>,
    segmentation: Segmentation,
    crops: Option<Vec<Value>>,
    fallback: Option<bool>,
}

fn changepoints(map: Map<String, Value>, paths: &Paths, files: &mut RunFiles) -> Result<(Map<String, Value>, Option<u64>), CliError> {
    let params: ChangepointParams = config::deserialize(map, "")?;
    if params.min_seg_len == 0 {
        return Err(ConfigError::Range { key: "min_seg_len".into(), message: "must be >= 1".into() }.into());
    }
    if let Some(p) = params.penalty {
        if !(p >= 0.0 && p.is_finite()) {
            return Err(ConfigError::Range { key: "penalty".into(), message: "must be finite and >= 0".into() }.into());
        }
    }
    let input = paths.one("input").unwrap();
    let table = read_table(files, "input", input)?;
    let series: Vec<Option<f64>> = match table.column(&params.column) {
        Some(c) => c.to_vec(),
        None if params.column == "residual" => {
            let obs = table.column("observed");
            let pred = table.column("prediction");
            match (obs, pred) {
                (Some(o), Some(p)) => o.iter().zip(p).map(|(o, p)| Some((*o)? - (*p)?)).collect(),
                _ => return Err(CliError::csv(input, io::IoError::MissingColumn("residual".into()))),
            }
        }
        None => return Err(CliError::csv(input, io::IoError::MissingColumn(params.column.clone()))),
    };
    let opts = PeltOptions { min_seg_len: params.min_seg_len, cost: params.cost };
    let ts = |i: usize| io::format_timestamp(table.start + Duration::seconds(table.step_secs * i as i64));
    let sweep = params.count.is_some() || params.penalty_range.is_some();

    let mut runs = vec![];
    for (start, end) in changepoint::split_runs(&series) {
        let idx: Vec<usize> = (start..end).filter(|&i| series[i].is_some()).collect();
        let values: Vec<f64> = idx.iter().map(|&i| series[i].unwrap()).collect();
        if values.len() < 2 * opts.min_seg_len {
            continue;
        }
        let (seg, crops, fallback) = if sweep {
            let (lo, hi) = params.penalty_range.unwrap_or_else(|| changepoint::default_penalty_range(values.len()));
            let curve = changepoint::crops_with(&values, lo, hi, &opts)?;
            let table: Vec<Value> = curve
                .entries
                .iter()
                .map(|e| json!({"penalty_lo": e.penalty_lo, "penalty_hi": e.penalty_hi, "num_changepoints": e.num_changepoints, "fit_cost": e.segmentation.fit_cost}))
                .collect();
            match params.count {
                Some(m) => {
                    let sel = changepoint::select_by_count(&curve, m)?;
                    (sel.segmentation, Some(table), Some(sel.fallback))
                }
                None => {
                    // the entry whose penalty interval holds the fixed or default penalty
                    let beta = params.penalty.unwrap_or_else(|| changepoint::default_penalty(values.len())).clamp(lo, hi);
                    let entry = curve
                        .entries
                        .iter()
                        .find(|e| e.penalty_lo <= beta && beta <= e.penalty_hi)
                        .or(curve.entries.last())
                        .ok_or(changepoint::ChangepointError::EmptyCurve)?;
                    (entry.segmentation.clone(), Some(table), None)
                }
            }
        } else {
            let beta = params.penalty.unwrap_or_else(|| changepoint::default_penalty(values.len()));
            (changepoint::pelt_with(&values, beta, &opts)?, None, None)
        };
        let cps: Vec<usize> = seg.changepoints.iter().map(|&c| idx[c]).collect();
        runs.push((idx, RunOut {
            start_index: start,
            end_index: end,
            changepoint_timestamps: cps.iter().map(|&c| ts(c)).collect(),
            changepoints: cps,
            segmentation: seg,
            crops,
            fallback,
        }));
    }

    let mut w = csv::Writer::from_writer(vec![]);
    for (r, (idx, run)) in runs.iter().enumerate() {
        for (k, ((a, b), p)) in run.segmentation.segments(idx.len()).iter().zip(&run.segmentation.segment_params).enumerate() {
            let (s, e) = (idx[*a], idx[*b - 1] + 1);
            w.serialize(SegmentRow { run: r, segment: k, start_index: s, end_index: e, start: ts(s), end: ts(e), mean: p.mean, variance: p.variance })
                .map_err(|e| CliError::Validation(e.to_string()))?;
        }
    }
    files.write("segments.csv", &w.into_inner().map_err(|e| CliError::Validation(e.to_string()))?)?;
    let runs: Vec<RunOut> = runs.into_iter().map(|(_, r)| r).collect();
    files.write_json(
        "changepoints.json",
        &json!({"schema_version": OUTPUT_SCHEMA_VERSION, "column": params.column, "n": series.len(), "runs": runs}),
    )?;
    Ok((to_map(&params), None))
}

fn report(map: Map<String, Value>, paths: &Paths, files: &mut RunFiles) -> Result<(Map<String, Value>, Option<u64>), CliError> {
    let params: ReportParams = config::deserialize(map, "")?;
    let run = paths.one("run").unwrap();
    let hourly_path = run.join("report.csv");
    let daily_path = run.join("wateruse.csv");
    let bytes = files.read("report", &hourly_path)?;
    let hourly = io::read_report(bytes.as_slice()).map_err(|e| CliError::csv(&hourly_path, e))?;
    let bytes = files.read("wateruse", &daily_path)?;
    let daily = io::read_wateruse(bytes.as_slice()).map_err(|e| CliError::csv(&daily_path, e))?;
    if hourly.timestamps.is_empty() || daily.days.is_empty() {
        return Err(CliError::Validation(format!("{}: empty run", run.display())));
    }

    let t0 = hourly.timestamps[0];
    let x: Vec<f64> = hourly.timestamps.iter().map(|t| (*t - t0).num_seconds() as f64 / 3600.0).collect();
    let hourly_ticks: Vec<(f64, String)> = hourly
        .timestamps
        .iter()
        .zip(&x)
        .enumerate()
        .filter(|(_, (t, _))| t.hour() == 0)
        .filter(|(i, _)| (i / 24) % 7 == 0)
        .map(|(_, (t, x))| (*x, t.format("%m-%d").to_string()))
        .collect();
    let chart = Chart {
        title: format!("{}: hourly sap flux", params.title),
        y_label: "flux (cm3 cm-2 h-1)".into(),
        x,
        band: Some((hourly.lower.clone(), hourly.upper.clone())),
        lines: vec![
            Line { name: "observed".into(), color: "#222222", values: hourly.observed.clone(), markers: false },
            Line { name: "predicted".into(), color: "#d62728", values: hourly.prediction.iter().map(|v| Some(*v)).collect(), markers: false },
        ],
        x_ticks: hourly_ticks,
    };
    files.write("hourly.svg", chart.render().as_bytes())?;

    let d0 = daily.days[0];
    let xd: Vec<f64> = daily.days.iter().map(|d| (*d - d0).num_days() as f64).collect();
    let daily_ticks = daily.days.iter().zip(&xd).step_by(7).map(|(d, x)| (*x, d.format("%m-%d").to_string())).collect();
    let chart = Chart {
        title: format!("{}: daily water-use", params.title),
        y_label: "water-use (L)".into(),
        x: xd,
        band: Some((daily.lower_liters.clone(), daily.upper_liters.clone())),
        lines: vec![
            Line { name: "observed".into(), color: "#222222", values: daily.observed_liters.clone(), markers: true },
            Line { name: "predicted".into(), color: "#d62728", values: daily.predicted_liters.iter().map(|v| Some(*v)).collect(), markers: true },
        ],
        x_ticks: daily_ticks,
    };
    files.write("wateruse.svg", chart.render().as_bytes())?;

    let mut pct = vec![];
    let mut sq = vec![];
    let mut covered = 0;
    for k in 0..daily.days.len() {
        let Some(obs) = daily.observed_liters[k] else { continue };
        let pred = daily.predicted_liters[k];
        sq.push((pred - obs).powi(2));
        if daily.lower_liters[k] <= obs && obs <= daily.upper_liters[k] {
            covered += 1;
        }
        if let Some(e) = rolling::pct_error(pred, obs) {
            pct.push(e);
        }
    }
    let q = |p: f64| if pct.is_empty() { None } else { Some(stats::quantile(&pct, p)) };
    let summary = json!({
        "schema_version": OUTPUT_SCHEMA_VERSION,
        "days": daily.days.len(),
        "days_observed": sq.len(),
        "daily_mse_liters": if sq.is_empty() { None } else { Some(stats::mean(&sq)) },
        "pct_error_q10": q(0.1),
        "pct_error_median": q(0.5),
        "pct_error_q90": q(0.9),
        "coverage": if sq.is_empty() { None } else { Some(covered as f64 / sq.len() as f64) },
        "total_predicted_liters": daily.predicted_liters.iter().sum::<f64>(),
    });
    files.write_json("summary.json", &summary)?;
    Ok((to_map(&params), None))
}
