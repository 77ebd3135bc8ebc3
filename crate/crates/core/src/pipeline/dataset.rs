use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::{Duration, NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sampling frequency of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Frequency {
    Day,
    Hour,
    HalfHour,
}

impl Frequency {
    pub fn step(self) -> Duration {
        match self {
            Frequency::Day => Duration::days(1),
            Frequency::Hour => Duration::hours(1),
            Frequency::HalfHour => Duration::minutes(30),
        }
    }

    fn from_step(step: Duration) -> Option<Self> {
        [Frequency::Day, Frequency::Hour, Frequency::HalfHour]
            .into_iter()
            .find(|f| f.step() == step)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Frequency::Day => "D",
            Frequency::Hour => "H",
            Frequency::HalfHour => "30min",
        }
    }
}

impl fmt::Display for Frequency {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Frequency {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "d" | "1d" | "day" | "daily" => Ok(Frequency::Day),
            "h" | "1h" | "hour" | "hourly" => Ok(Frequency::Hour),
            "30min" | "30t" | "30-min" | "half-hour" => Ok(Frequency::HalfHour),
            other => Err(Error::Config(format!("unknown frequency {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    CsvWide,
    JsonLines,
}

impl FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "csv" | "csv_wide" => Ok(DatasetFormat::CsvWide),
            "jsonl" | "jsonlines" => Ok(DatasetFormat::JsonLines),
            other => Err(Error::Config(format!("unknown dataset format {other:?}"))),
        }
    }
}

const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

pub fn format_timestamp(ts: NaiveDateTime) -> String {
    ts.format(TIMESTAMP_FORMAT).to_string()
}

pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    for fmt in [
        "%Y-%m-%dT%H:%M:%S",
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%d %H:%M",
    ] {
        if let Ok(ts) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(ts);
        }
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
}

/// A regularly sampled multivariate series: `len()` rows of `dim()` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    freq: Frequency,
    start: NaiveDateTime,
    names: Vec<String>,
    values: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn new(freq: Frequency, start: NaiveDateTime, names: Vec<String>, values: Vec<Vec<f64>>) -> Result<Self> {
        if values.is_empty() || names.is_empty() {
            return Err(Error::Ingestion(
                "dataset must have at least one row and one series".into(),
            ));
        }
        let dim = names.len();
        for (row, r) in values.iter().enumerate() {
            if r.len() != dim {
                return Err(Error::Ingestion(format!(
                    "row {row} has {} values, expected {dim}",
                    r.len()
                )));
            }
            if let Some(col) = r.iter().position(|v| !v.is_finite()) {
                return Err(Error::Parse {
                    row,
                    column: col,
                    message: "non-finite value".into(),
                });
            }
        }
        Ok(Dataset {
            freq,
            start,
            names,
            values,
        })
    }

    /// Series named `s0..s{D-1}` starting at 2000-01-01.
    pub fn from_values(freq: Frequency, values: Vec<Vec<f64>>) -> Result<Self> {
        let dim = values.first().map_or(0, Vec::len);
        let start = NaiveDate::from_ymd_opt(2000, 1, 1)
            .and_then(|d| d.and_hms_opt(0, 0, 0))
            .expect("valid date");
        Self::new(freq, start, (0..dim).map(|i| format!("s{i}")).collect(), values)
    }

    pub fn freq(&self) -> Frequency {
        self.freq
    }

    pub fn dim(&self) -> usize {
        self.names.len()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn start(&self) -> NaiveDateTime {
        self.start
    }

    /// Timestamp of row `i`; rows past the end extrapolate at the
    /// dataset frequency.
    pub fn timestamp(&self, i: usize) -> NaiveDateTime {
        self.start + self.freq.step() * i as i32
    }

    pub fn timestamps(&self, range: std::ops::Range<usize>) -> Vec<NaiveDateTime> {
        range.map(|i| self.timestamp(i)).collect()
    }

    /// Rows `range`, as a new dataset.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Result<Self> {
        if range.start >= range.end || range.end > self.len() {
            return Err(Error::Contract(format!(
                "slice {range:?} out of bounds for {} rows",
                self.len()
            )));
        }
        Ok(Dataset {
            freq: self.freq,
            start: self.timestamp(range.start),
            names: self.names.clone(),
            values: self.values[range].to_vec(),
        })
    }

    /// Every value multiplied by `factor[d]` for its series `d`.
    pub fn scaled_by(&self, factor: &[f64]) -> Result<Self> {
        let values = self
            .values
            .iter()
            .map(|r| r.iter().zip(factor).map(|(v, k)| v * k).collect())
            .collect();
        Dataset::new(self.freq, self.start, self.names.clone(), values)
    }

    pub fn write_csv_wide(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(BufWriter::new(file));
        let mut header = vec!["timestamp".to_string()];
        header.extend(self.names.iter().cloned());
        let to_err = |e: csv::Error| Error::Ingestion(format!("{}: {e}", path.display()));
        w.write_record(&header).map_err(to_err)?;
        for (i, row) in self.values.iter().enumerate() {
            let mut rec = vec![format_timestamp(self.timestamp(i))];
            rec.extend(row.iter().map(|v| format!("{v:?}")));
            w.write_record(&rec).map_err(to_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_jsonlines(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for (d, name) in self.names.iter().enumerate() {
            let rec = JsonRecord {
                start: format_timestamp(self.start),
                freq: self.freq.as_str().to_string(),
                item_id: Some(name.clone()),
                values: self.values.iter().map(|r| serde_json::Value::from(r[d])).collect(),
            };
            let line = serde_json::to_string(&rec).expect("serializable");
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Serialize, Deserialize)]
struct JsonRecord {
    start: String,
    freq: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    item_id: Option<String>,
    values: Vec<serde_json::Value>,
}

pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<Dataset> {
    match format {
        DatasetFormat::CsvWide => load_csv_wide(path),
        DatasetFormat::JsonLines => load_jsonlines(path),
    }
}

fn load_csv_wide(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let header = reader
        .headers()
        .map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?
        .clone();
    if header.len() < 2 || !header[0].eq_ignore_ascii_case("timestamp") {
        return Err(Error::Ingestion("csv header must be `timestamp,s0,...,s{D-1}`".into()));
    }
    let names: Vec<String> = header.iter().skip(1).map(String::from).collect();
    let mut stamps = Vec::new();
    let mut values = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Ingestion(format!("row {row}: {e}")))?;
        if rec.len() != header.len() {
            return Err(Error::Ingestion(format!(
                "row {row} has {} fields, expected {}",
                rec.len(),
                header.len()
            )));
        }
        let ts = parse_timestamp(&rec[0]).ok_or_else(|| Error::Parse {
            row,
            column: 0,
            message: format!("invalid timestamp {:?}", &rec[0]),
        })?;
        let vals = rec
            .iter()
            .enumerate()
            .skip(1)
            .map(|(col, cell)| {
                cell.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Parse {
                        row,
                        column: col,
                        message: format!("non-numeric value {cell:?}"),
                    })
            })
            .collect::<Result<Vec<f64>>>()?;
        stamps.push(ts);
        values.push(vals);
    }
    if stamps.is_empty() {
        return Err(Error::Ingestion("csv has no data rows".into()));
    }
    let freq = infer_frequency(&stamps)?;
    Dataset::new(freq, stamps[0], names, values)
}

/// Frequency from the smallest gap; any larger gap is reported as the
/// first missing timestamp.
fn infer_frequency(stamps: &[NaiveDateTime]) -> Result<Frequency> {
    if stamps.len() < 2 {
        return Err(Error::Ingestion("need at least two rows to infer the frequency".into()));
    }
    let mut step = None::<Duration>;
    for (i, w) in stamps.windows(2).enumerate() {
        let d = w[1] - w[0];
        if d <= Duration::zero() {
            return Err(Error::Ingestion(format!(
                "timestamps not strictly increasing at row {}",
                i + 2
            )));
        }
        step = Some(step.map_or(d, |s| s.min(d)));
    }
    let step = step.expect("at least one gap");
    let freq = Frequency::from_step(step).ok_or_else(|| {
        Error::Ingestion(format!(
            "unsupported sampling interval of {} minutes",
            step.num_minutes()
        ))
    })?;
    check_regular(stamps, freq)?;
    Ok(freq)
}

fn check_regular(stamps: &[NaiveDateTime], freq: Frequency) -> Result<()> {
    for w in stamps.windows(2) {
        if w[1] - w[0] != freq.step() {
            return Err(Error::Ingestion(format!(
                "missing timestamp {}",
                format_timestamp(w[0] + freq.step())
            )));
        }
    }
    Ok(())
}

fn load_jsonlines(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut names = Vec::new();
    let mut series: Vec<Vec<f64>> = Vec::new();
    let mut header: Option<(NaiveDateTime, Frequency)> = None;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let row = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            row,
            column: 0,
            message: e.to_string(),
        })?;
        let start = parse_timestamp(&rec.start).ok_or_else(|| Error::Parse {
            row,
            column: 0,
            message: format!("invalid start {:?}", rec.start),
        })?;
        let freq: Frequency = rec.freq.parse()?;
        match header {
            None => header = Some((start, freq)),
            Some(h) if h != (start, freq) => {
                return Err(Error::Ingestion(format!(
                    "entity on line {row} has start/freq different from the first entity"
                )))
            }
            Some(_) => {}
        }
        let vals = rec
            .values
            .iter()
            .enumerate()
            .map(|(col, v)| {
                v.as_f64().filter(|x| x.is_finite()).ok_or_else(|| Error::Parse {
                    row,
                    column: col,
                    message: format!("non-numeric value {v}"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = series.first() {
            if first.len() != vals.len() {
                return Err(Error::Ingestion(format!(
                    "ragged entities: line {row} has {} values, expected {}",
                    vals.len(),
                    first.len()
                )));
            }
        }
        names.push(rec.item_id.unwrap_or_else(|| format!("s{}", series.len())));
        series.push(vals);
    }
    let (start, freq) = header.ok_or_else(|| Error::Ingestion("no entities in file".into()))?;
    let len = series[0].len();
    let values = (0..len).map(|t| series.iter().map(|s| s[t]).collect()).collect();
    Dataset::new(freq, start, names, values)
}
