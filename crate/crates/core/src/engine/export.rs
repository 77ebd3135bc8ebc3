use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::forecast::{quantiles, ForecastSampleSet};
use crate::error::{Error, Result};
use crate::metrics::SampleCube;
use crate::pipeline::format_timestamp;

/// Version of the samples/quantile CSV layouts.
pub const CSV_SCHEMA_VERSION: u32 = 1;

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

/// `window,trajectory,t,entity,value`, one row per sampled value.
pub fn write_samples_csv(path: &Path, sets: &[ForecastSampleSet]) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "window,trajectory,t,entity,value").map_err(io)?;
    for fs in sets {
        let c = &fs.cube;
        for s in 0..c.samples() {
            for t in 0..c.steps() {
                for d in 0..c.dim() {
                    writeln!(w, "{},{s},{t},{d},{:?}", fs.window, c.get(s, t, d)).map_err(io)?;
                }
            }
        }
    }
    w.flush().map_err(io)
}

const SAMPLES_HEADER: [&str; 5] = ["window", "trajectory", "t", "entity", "value"];

/// Reads a file written by [`write_samples_csv`] back into one cube per
/// window, ordered by window index. Every (trajectory, t, entity) cell of
/// every window must appear exactly once.
pub fn read_samples_csv(path: &Path) -> Result<Vec<(usize, SampleCube)>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let header = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    if header.iter().map(str::trim).ne(SAMPLES_HEADER) {
        return Err(Error::Ingestion(format!(
            "{}: expected header {}, found {}",
            path.display(),
            SAMPLES_HEADER.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut rows: Vec<([usize; 4], f64)> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let row = i + 1;
        if rec.len() != 5 {
            return Err(Error::Parse {
                row,
                column: rec.len().min(5),
                message: format!("expected 5 fields, found {}", rec.len()),
            });
        }
        let mut idx = [0usize; 4];
        for (c, slot) in idx.iter_mut().enumerate() {
            *slot = rec[c].trim().parse().map_err(|_| Error::Parse {
                row,
                column: c + 1,
                message: format!("invalid {} index {:?}", SAMPLES_HEADER[c], &rec[c]),
            })?;
        }
        let value: f64 = rec[4]
            .trim()
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| Error::Parse {
                row,
                column: 5,
                message: format!("invalid value {:?}", &rec[4]),
            })?;
        rows.push((idx, value));
    }
    if rows.is_empty() {
        return Err(Error::Ingestion(format!("{}: no samples", path.display())));
    }
    let extent = |k: usize| rows.iter().map(|(i, _)| i[k]).max().unwrap_or(0) + 1;
    let (windows, samples, steps, dim) = (extent(0), extent(1), extent(2), extent(3));
    let per_window = samples * steps * dim;
    let mut data = vec![None; windows * per_window];
    for ([w, s, t, d], v) in rows {
        let slot = &mut data[w * per_window + (s * steps + t) * dim + d];
        if slot.replace(v).is_some() {
            return Err(Error::Ingestion(format!(
                "{}: duplicate sample window {w} trajectory {s} t {t} entity {d}",
                path.display()
            )));
        }
    }
    let mut out = Vec::with_capacity(windows);
    for (w, chunk) in data.chunks(per_window).enumerate() {
        let values: Option<Vec<f64>> = chunk.iter().copied().collect();
        let values = values.ok_or_else(|| {
            Error::Ingestion(format!(
                "{}: window {w} is missing cells of its {samples}x{steps}x{dim} sample grid",
                path.display()
            ))
        })?;
        out.push((w, SampleCube::new(samples, steps, dim, values)?));
    }
    Ok(out)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Ingestion(format!("{}: {other:?}", path.display())),
    }
}

/// `window,t,entity,level,value`, levels in the order given.
pub fn write_quantiles_csv(path: &Path, sets: &[ForecastSampleSet], levels: &[f64]) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "window,t,entity,level,value").map_err(io)?;
    for fs in sets {
        let q = quantiles(fs, levels)?;
        for t in 0..q.steps {
            for d in 0..q.dim {
                for (l, level) in levels.iter().enumerate() {
                    writeln!(w, "{},{t},{d},{level:?},{:?}", fs.window, q.get(t, d, l)).map_err(io)?;
                }
            }
        }
    }
    w.flush().map_err(io)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotBand {
    pub lower_level: f64,
    pub upper_level: f64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotEntity {
    pub entity: usize,
    pub name: String,
    pub median: Vec<f64>,
    pub bands: Vec<PlotBand>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotWindow {
    pub window: usize,
    pub timestamps: Vec<String>,
    pub entities: Vec<PlotEntity>,
}

/// Median and central interval bands per entity, for external plotting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotData {
    pub levels: Vec<f64>,
    pub windows: Vec<PlotWindow>,
}

/// Bands pair each level `q < 0.5` with `1 - q` when both are present.
pub fn plot_data(sets: &[ForecastSampleSet], levels: &[f64], names: &[String]) -> Result<PlotData> {
    let mut pairs = Vec::new();
    for &q in levels.iter().filter(|q| **q < 0.5) {
        if levels.iter().any(|u| (u - (1.0 - q)).abs() < 1e-12) {
            pairs.push((q, 1.0 - q));
        }
    }
    let mut windows = Vec::with_capacity(sets.len());
    for fs in sets {
        let mut wanted = vec![0.5];
        for &(lo, hi) in &pairs {
            wanted.push(lo);
            wanted.push(hi);
        }
        let q = quantiles(fs, &wanted)?;
        let series = |d: usize, l: usize| (0..q.steps).map(|t| q.get(t, d, l)).collect::<Vec<f64>>();
        let entities = (0..q.dim)
            .map(|d| PlotEntity {
                entity: d,
                name: names.get(d).cloned().unwrap_or_else(|| format!("s{d}")),
                median: series(d, 0),
                bands: pairs
                    .iter()
                    .enumerate()
                    .map(|(i, &(lo, hi))| PlotBand {
                        lower_level: lo,
                        upper_level: hi,
                        lower: series(d, 1 + 2 * i),
                        upper: series(d, 2 + 2 * i),
                    })
                    .collect(),
            })
            .collect();
        windows.push(PlotWindow {
            window: fs.window,
            timestamps: fs.timestamps.iter().map(|t| format_timestamp(*t)).collect(),
            entities,
        });
    }
    Ok(PlotData {
        levels: levels.to_vec(),
        windows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::SampleCube;

    fn fs() -> ForecastSampleSet {
        let data = (0..5 * 2 * 2).map(|i| i as f64).collect();
        ForecastSampleSet {
            window: 3,
            start: 10,
            timestamps: vec![],
            divisors: vec![1.0, 1.0],
            cube: SampleCube::new(5, 2, 2, data).unwrap(),
        }
    }

    #[test]
    fn samples_csv_row_count_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        write_samples_csv(&p, &[fs()]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "window,trajectory,t,entity,value");
        assert_eq!(lines.len(), 1 + 20);
        assert_eq!(lines[1], "3,0,0,0,0.0");
    }

    #[test]
    fn samples_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        let mut second = fs();
        second.window = 1;
        let mut first = fs();
        first.window = 0;
        write_samples_csv(&p, &[first.clone(), second]).unwrap();
        let back = read_samples_csv(&p).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].1, first.cube);
    }

    #[test]
    fn samples_csv_gaps_and_bad_cells() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        std::fs::write(&p, "window,trajectory,t,entity,value\n0,0,0,0,1.0\n0,1,0,0,x\n").unwrap();
        assert!(matches!(
            read_samples_csv(&p),
            Err(Error::Parse { row: 2, column: 5, .. })
        ));
        std::fs::write(&p, "window,trajectory,t,entity,value\n0,0,0,0,1.0\n0,1,1,0,2.0\n").unwrap();
        assert!(matches!(read_samples_csv(&p), Err(Error::Ingestion(_))));
    }

    #[test]
    fn plot_median_matches_quantile_column() {
        let levels = [0.05, 0.25, 0.5, 0.75, 0.95];
        let plot = plot_data(&[fs()], &levels, &[]).unwrap();
        let q = quantiles(&fs(), &levels).unwrap();
        let e = &plot.windows[0].entities[1];
        assert_eq!(e.median, vec![q.get(0, 1, 2), q.get(1, 1, 2)]);
        assert_eq!(e.bands.len(), 2);
        assert_eq!(e.bands[0].lower_level, 0.05);
    }
}
