//! CSV codecs for frames and run outputs.
//!
//! Hourly files carry a `timestamp` column in RFC 3339 UTC; an empty cell is
//! a missing value. Frame headers may carry a unit as `name[unit]`.

use std::io::{Read, Write};

use chrono::{DateTime, NaiveDate, Utc};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use thiserror::Error;

use crate::rolling::{DailyForecast, HourlyForecast, WindowRecord};
use crate::series::{AlignedFrame, SeriesError, TimeSeries};
use crate::synth::TreeTruth;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("line {line}: {message}")]
    Csv { line: u64, message: String },
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("line {line}: expected timestamp {expected}, found {found}")]
    Irregular { line: u64, expected: DateTime<Utc>, found: DateTime<Utc> },
    #[error("file has no data rows")]
    Empty,
    #[error(transparent)]
    Series(#[from] SeriesError),
    #[error("write failed: {0}")]
    Write(String),
}

pub type Result<T> = std::result::Result<T, IoError>;

fn csv_err(e: csv::Error) -> IoError {
    let line = e.position().map_or(0, |p| p.line());
    IoError::Csv { line, message: e.to_string() }
}

fn write_err(e: impl std::fmt::Display) -> IoError {
    IoError::Write(e.to_string())
}

pub fn format_timestamp(ts: DateTime<Utc>) -> String {
    ts.format("%Y-%m-%dT%H:%M:%SZ").to_string()
}

pub fn parse_timestamp(s: &str) -> std::result::Result<DateTime<Utc>, String> {
    DateTime::parse_from_rfc3339(s.trim()).map(|t| t.with_timezone(&Utc)).map_err(|e| format!("bad timestamp `{s}`: {e}"))
}

fn parse_cell(s: &str) -> std::result::Result<Option<f64>, String> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(None);
    }
    s.parse::<f64>().map(Some).map_err(|_| format!("bad number `{s}`"))
}

fn split_header(h: &str) -> (String, String) {
    match h.trim().strip_suffix(']').and_then(|x| x.split_once('[')) {
        Some((name, unit)) => (name.trim().to_string(), unit.to_string()),
        None => (h.trim().to_string(), String::new()),
    }
}

/// Hourly columns keyed by header name, with their regular time index.
#[derive(Debug, Clone, PartialEq)]
pub struct HourlyTable {
    pub start: DateTime<Utc>,
    pub step_secs: i64,
    pub names: Vec<String>,
    pub units: Vec<String>,
    pub columns: Vec<Vec<Option<f64>>>,
}

impl HourlyTable {
    pub fn len(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn column(&self, name: &str) -> Option<&[Option<f64>]> {
        self.names.iter().position(|n| n == name).map(|i| self.columns[i].as_slice())
    }

    pub fn series(&self, name: &str) -> Result<TimeSeries> {
        let i = self.names.iter().position(|n| n == name).ok_or_else(|| IoError::MissingColumn(name.into()))?;
        Ok(TimeSeries::new(self.start, self.step_secs, self.columns[i].clone(), self.units[i].clone())?)
    }

    pub fn into_frame(self) -> Result<AlignedFrame> {
        let series: Vec<(String, TimeSeries)> = self.names.iter().map(|n| Ok((n.clone(), self.series(n)?))).collect::<Result<_>>()?;
        Ok(AlignedFrame::align(series.iter().map(|(n, s)| (n.as_str(), s)))?)
    }
}

/// Read a regular hourly table: a `timestamp` column plus numeric columns.
pub fn read_hourly_table(reader: impl Read) -> Result<HourlyTable> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let ts_col = headers.iter().position(|h| h == "timestamp").ok_or_else(|| IoError::MissingColumn("timestamp".into()))?;
    let (names, units): (Vec<String>, Vec<String>) =
        headers.iter().enumerate().filter(|(i, _)| *i != ts_col).map(|(_, h)| split_header(h)).unzip();
    let mut columns = vec![vec![]; names.len()];
    let mut stamps: Vec<DateTime<Utc>> = vec![];
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |message: String| IoError::Csv { line, message };
        let ts = parse_timestamp(rec.get(ts_col).unwrap_or("")).map_err(bad)?;
        if stamps.len() >= 2 {
            let step = stamps[1] - stamps[0];
            let expected = stamps[0] + step * stamps.len() as i32;
            if ts != expected {
                return Err(IoError::Irregular { line, expected, found: ts });
            }
        }
        stamps.push(ts);
        let mut c = 0;
        for (i, cell) in rec.iter().enumerate() {
            if i == ts_col {
                continue;
            }
            columns[c].push(parse_cell(cell).map_err(|m| IoError::Csv { line, message: format!("column `{}`: {m}", names[c]) })?);
            c += 1;
        }
    }
    let start = *stamps.first().ok_or(IoError::Empty)?;
    let step_secs = if stamps.len() >= 2 { (stamps[1] - stamps[0]).num_seconds() } else { crate::series::SECONDS_PER_HOUR };
    Ok(HourlyTable { start, step_secs, names, units, columns })
}

/// Read a frame of hourly channels; daily covariates are not stored in the
/// file and must be derived by the caller.
pub fn read_frame(reader: impl Read) -> Result<AlignedFrame> {
    read_hourly_table(reader)?.into_frame()
}

/// Write every hourly column of `frame`, units in brackets.
pub fn write_frame(frame: &AlignedFrame, writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let names: Vec<&str> = frame.column_names().collect();
    let mut header = vec!["timestamp".to_string()];
    for n in &names {
        let unit = frame.unit(n).unwrap_or("");
        header.push(if unit.is_empty() { n.to_string() } else { format!("{n}[{unit}]") });
    }
    w.write_record(&header).map_err(csv_err)?;
    for r in 0..frame.len() {
        let mut row = vec![format_timestamp(frame.timestamp(r))];
        for n in &names {
            row.push(frame.column(n).and_then(|c| c[r]).map_or(String::new(), |v| v.to_string()));
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(write_err)
}

fn read_rows<T: DeserializeOwned>(reader: impl Read) -> Result<Vec<T>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    rdr.deserialize().map(|r| r.map_err(csv_err)).collect()
}

fn write_rows<T: Serialize>(rows: impl IntoIterator<Item = T>, writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush().map_err(write_err)
}

mod ts_format {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(ts: &DateTime<Utc>, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&format_timestamp(*ts))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<DateTime<Utc>, D::Error> {
        let s = String::deserialize(d)?;
        parse_timestamp(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    #[serde(with = "ts_format")]
    pub timestamp: DateTime<Utc>,
    pub prediction: f64,
    pub spread: f64,
    pub lower: f64,
    pub upper: f64,
    pub half_width: f64,
    pub error_sd: f64,
    pub observed: Option<f64>,
}

pub fn write_report(h: &HourlyForecast, writer: impl Write) -> Result<()> {
    let rows = (0..h.timestamps.len()).map(|i| ReportRow {
        timestamp: h.timestamps[i],
        prediction: h.prediction[i],
        spread: h.spread[i],
        lower: h.lower[i],
        upper: h.upper[i],
        half_width: h.half_width[i],
        error_sd: h.error_sd[i],
        observed: h.observed[i],
    });
    write_rows(rows, writer)
}

pub fn read_report(reader: impl Read) -> Result<HourlyForecast> {
    let rows: Vec<ReportRow> = read_rows(reader)?;
    Ok(HourlyForecast {
        timestamps: rows.iter().map(|r| r.timestamp).collect(),
        prediction: rows.iter().map(|r| r.prediction).collect(),
        spread: rows.iter().map(|r| r.spread).collect(),
        lower: rows.iter().map(|r| r.lower).collect(),
        upper: rows.iter().map(|r| r.upper).collect(),
        half_width: rows.iter().map(|r| r.half_width).collect(),
        error_sd: rows.iter().map(|r| r.error_sd).collect(),
        observed: rows.iter().map(|r| r.observed).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaterUseRow {
    pub date: NaiveDate,
    pub predicted_liters: f64,
    pub lower: f64,
    pub upper: f64,
    pub sd_liters: f64,
    pub sd_correlated_liters: f64,
    pub observed: Option<f64>,
}

pub fn write_wateruse(d: &DailyForecast, writer: impl Write) -> Result<()> {
    let rows = (0..d.days.len()).map(|i| WaterUseRow {
        date: d.days[i],
        predicted_liters: d.predicted_liters[i],
        lower: d.lower_liters[i],
        upper: d.upper_liters[i],
        sd_liters: d.sd_liters[i],
        sd_correlated_liters: d.sd_correlated_liters[i],
        observed: d.observed_liters[i],
    });
    write_rows(rows, writer)
}

pub fn read_wateruse(reader: impl Read) -> Result<DailyForecast> {
    let rows: Vec<WaterUseRow> = read_rows(reader)?;
    Ok(DailyForecast {
        days: rows.iter().map(|r| r.date).collect(),
        predicted_liters: rows.iter().map(|r| r.predicted_liters).collect(),
        lower_liters: rows.iter().map(|r| r.lower).collect(),
        upper_liters: rows.iter().map(|r| r.upper).collect(),
        sd_liters: rows.iter().map(|r| r.sd_liters).collect(),
        sd_correlated_liters: rows.iter().map(|r| r.sd_correlated_liters).collect(),
        observed_liters: rows.iter().map(|r| r.observed).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightRow {
    #[serde(with = "ts_format")]
    pub window_start: DateTime<Utc>,
    pub member_id: String,
    pub weight: f64,
}

pub fn weight_rows(windows: &[WindowRecord]) -> Vec<WeightRow> {
    windows
        .iter()
        .flat_map(|w| {
            w.member_ids.iter().zip(&w.weights).map(|(id, &weight)| WeightRow { window_start: w.start, member_id: id.clone(), weight })
        })
        .collect()
}

pub fn write_weights(windows: &[WindowRecord], writer: impl Write) -> Result<()> {
    write_rows(weight_rows(windows), writer)
}

pub fn read_weights(reader: impl Read) -> Result<Vec<WeightRow>> {
    read_rows(reader)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    #[serde(with = "ts_format")]
    pub timestamp: DateTime<Utc>,
    pub tree: String,
    pub radiation_part: f64,
    pub vpd_radiation_part: f64,
    pub env_part: f64,
    pub suppression: f64,
    pub mean: f64,
}

/// Ground-truth components in long form, one row per tree and hour.
pub fn write_truth(frame: &AlignedFrame, truth: &[TreeTruth], writer: impl Write) -> Result<()> {
    let rows = truth.iter().flat_map(|t| {
        (0..t.mean.len()).map(move |r| TruthRow {
            timestamp: frame.timestamp(r),
            tree: t.id.clone(),
            radiation_part: t.radiation_part[r],
            vpd_radiation_part: t.vpd_radiation_part[r],
            env_part: t.env_part[r],
            suppression: t.suppression[r],
            mean: t.mean[r],
        })
    });
    write_rows(rows, writer)
}

pub fn read_truth(reader: impl Read) -> Result<Vec<TreeTruth>> {
    let rows: Vec<TruthRow> = read_rows(reader)?;
    let mut out: Vec<TreeTruth> = vec![];
    for r in rows {
        if out.last().map_or(true, |t| t.id != r.tree) {
            out.push(TreeTruth {
                id: r.tree.clone(),
                radiation_part: vec![],
                vpd_radiation_part: vec![],
                env_part: vec![],
                suppression: vec![],
                mean: vec![],
            });
        }
        let t = out.last_mut().expect("pushed above");
        t.radiation_part.push(r.radiation_part);
        t.vpd_radiation_part.push(r.vpd_radiation_part);
        t.env_part.push(r.env_part);
        t.suppression.push(r.suppression);
        t.mean.push(r.mean);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rolling::{run_rolling, RollingConfig};
    use crate::synth::{self, ScenarioConfig};
    use proptest::prelude::*;

    fn field() -> synth::SyntheticField {
        synth::generate(&ScenarioConfig { days: 22, trees: synth::default_trees(2), ..Default::default() }).unwrap()
    }

    fn hourly_only(frame: &AlignedFrame) -> AlignedFrame {
        let series = frame.to_series();
        AlignedFrame::align(series.iter().map(|(n, s)| (n.as_str(), s))).unwrap()
    }

    #[test]
    fn frame_round_trip() {
        let f = field();
        let mut frame = hourly_only(&f.frame);
        let mut col = frame.column("tree_1").unwrap().to_vec();
        col[5] = None;
        frame.insert_column("tree_1", col, "cm3/cm2/h").unwrap();
        let mut buf = vec![];
        write_frame(&frame, &mut buf).unwrap();
        let back = read_frame(buf.as_slice()).unwrap();
        assert_eq!(back, frame);
        assert_eq!(back.clone().with_standard_daily_covariates(), frame.with_standard_daily_covariates());
    }

    #[test]
    fn frame_errors_carry_line() {
        let csv = "timestamp,a\n2022-07-01T00:00:00Z,1\n2022-07-01T01:00:00Z,x\n";
        match read_frame(csv.as_bytes()) {
            Err(IoError::Csv { line: 3, message }) => assert!(message.contains("`a`"), "{message}"),
            other => panic!("{other:?}"),
        }
        let gap = "timestamp,a\n2022-07-01T00:00:00Z,1\n2022-07-01T01:00:00Z,2\n2022-07-01T03:00:00Z,2\n";
        assert!(matches!(read_frame(gap.as_bytes()), Err(IoError::Irregular { line: 4, .. })));
        assert!(matches!(read_frame("a,b\n1,2\n".as_bytes()), Err(IoError::MissingColumn(_))));
        assert!(matches!(read_frame("timestamp,a\n".as_bytes()), Err(IoError::Empty)));
    }

    #[test]
    fn empty_cells_are_missing() {
        let csv = "timestamp,vpd[kPa]\n2022-07-01T13:00:00Z,\n2022-07-01T14:00:00Z,1.5\n";
        let frame = read_frame(csv.as_bytes()).unwrap();
        assert_eq!(frame.column("vpd").unwrap(), &[None, Some(1.5)]);
        assert_eq!(frame.unit("vpd"), Some("kPa"));
    }

    #[test]
    fn run_outputs_round_trip() {
        let f = field();
        let report = run_rolling(&f.frame, &f.trees, &RollingConfig { model_types: vec![crate::model::FlexibleCovariate::DailyMeanSoil], ..Default::default() }).unwrap();

        let mut buf = vec![];
        write_report(&report.hourly, &mut buf).unwrap();
        assert_eq!(read_report(buf.as_slice()).unwrap(), report.hourly);

        let mut buf = vec![];
        write_wateruse(&report.daily, &mut buf).unwrap();
        assert_eq!(read_wateruse(buf.as_slice()).unwrap(), report.daily);

        let mut buf = vec![];
        write_weights(&report.windows, &mut buf).unwrap();
        assert_eq!(read_weights(buf.as_slice()).unwrap(), weight_rows(&report.windows));

        let mut buf = vec![];
        write_truth(&f.frame, &f.truth, &mut buf).unwrap();
        assert_eq!(read_truth(buf.as_slice()).unwrap(), f.truth);
    }

    proptest! {
        #[test]
        fn floats_round_trip(values in proptest::collection::vec(proptest::option::of(-1e300f64..1e300), 1..40)) {
            let start = "2022-07-01T00:00:00Z".parse().unwrap();
            let s = TimeSeries::hourly(start, values, "u").unwrap();
            let frame = AlignedFrame::align([("x", &s)]).unwrap();
            let mut buf = vec![];
            write_frame(&frame, &mut buf).unwrap();
            prop_assert_eq!(read_frame(buf.as_slice()).unwrap(), frame);
        }
    }
}
