//! Dataset directories: `stations.json`, `air.csv` and `weather.csv`, plus an
//! optional `manifest.json` written by the synthetic generator.
//!
//! Observation files have the header `timestamp,station_id,<variables...>`
//! with hourly ISO-8601 timestamps. Missing rows and empty cells are
//! forward-filled; a station whose first hour is missing is rejected.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{DateTime, Duration, NaiveDateTime, SecondsFormat, Utc};
use ndarray::Array3;

use super::synthetic::Manifest;
use super::Dataset;
use crate::error::{Error, Result};
use crate::geo::{read_stations, write_stations, StationKind};

pub const STATIONS_FILE: &str = "stations.json";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn observations_file(kind: StationKind) -> String {
    format!("{}.csv", kind.as_str())
}

pub fn format_timestamp(ts: DateTime<Utc>) -> String {
    ts.to_rfc3339_opts(SecondsFormat::Secs, true)
}

/// RFC 3339, or a naive `YYYY-MM-DDTHH:MM:SS` read as UTC.
pub fn parse_timestamp(s: &str) -> Result<DateTime<Utc>> {
    let s = s.trim();
    if let Ok(ts) = DateTime::parse_from_rfc3339(s) {
        return Ok(ts.with_timezone(&Utc));
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S"] {
        if let Ok(naive) = NaiveDateTime::parse_from_str(s, fmt) {
            return Ok(naive.and_utc());
        }
    }
    Err(Error::data(format!("unparseable timestamp {s:?}")))
}

/// One kind's observations as CSV text.
pub fn write_observations<W: Write>(ds: &Dataset, kind: StationKind, out: W) -> Result<()> {
    let k = kind.index();
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["timestamp".to_string(), "station_id".to_string()];
    header.extend(ds.variables[k].iter().cloned());
    w.write_record(&header)?;
    let ids = ds.ids(kind);
    for t in 0..ds.steps() {
        let ts = format_timestamp(ds.timestamp(t));
        for (i, id) in ids.iter().enumerate() {
            let mut rec = vec![ts.clone(), id.to_string()];
            rec.extend((0..ds.dim(kind)).map(|v| ds.series[k][[t, i, v]].to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Parsed observation table of one kind before alignment.
#[derive(Debug, Clone)]
pub struct RawObservations {
    pub variables: Vec<String>,
    pub rows: Vec<(DateTime<Utc>, String, Vec<Option<f64>>)>,
}

pub fn read_observations<R: Read>(input: R) -> Result<RawObservations> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let header = r.headers()?.clone();
    if header.len() < 3 || &header[0] != "timestamp" || &header[1] != "station_id" {
        return Err(Error::data(
            "observation header must start with timestamp,station_id and name at least one variable",
        ));
    }
    let variables: Vec<String> = header.iter().skip(2).map(str::to_string).collect();
    let mut rows = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(Error::data(format!(
                "row {} has {} fields, header has {}",
                line + 2,
                rec.len(),
                header.len()
            )));
        }
        let ts = parse_timestamp(&rec[0])?;
        let values = rec
            .iter()
            .skip(2)
            .map(|cell| {
                if cell.is_empty() || cell.eq_ignore_ascii_case("nan") {
                    Ok(None)
                } else {
                    cell.parse::<f64>().map(Some).map_err(|_| {
                        Error::data(format!("row {}: {cell:?} is not a number", line + 2))
                    })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push((ts, rec[1].to_string(), values));
    }
    Ok(RawObservations { variables, rows })
}

/// Place raw rows onto the hourly grid `start..start+steps`, forward-filling gaps.
pub fn align(
    raw: &RawObservations,
    kind: StationKind,
    ids: &[&str],
    start: DateTime<Utc>,
    steps: usize,
) -> Result<Array3<f64>> {
    let dim = raw.variables.len();
    let index: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    let mut grid: Array3<Option<f64>> = Array3::from_elem((steps, ids.len(), dim), None);
    for (ts, id, values) in &raw.rows {
        let &i = index.get(id.as_str()).ok_or_else(|| {
            Error::data(format!("{kind} observations mention unknown station {id:?}"))
        })?;
        let offset = *ts - start;
        if offset.num_seconds() % 3600 != 0 {
            return Err(Error::data(format!("timestamp {ts} is not on the hourly grid")));
        }
        let t = usize::try_from(offset.num_hours())
            .ok()
            .filter(|&t| t < steps)
            .ok_or_else(|| Error::data(format!("timestamp {ts} lies outside the aligned range")))?;
        for (v, value) in values.iter().enumerate() {
            if let Some(x) = value {
                grid[[t, i, v]] = Some(*x);
            }
        }
    }
    let mut out = Array3::zeros((steps, ids.len(), dim));
    for (i, id) in ids.iter().enumerate() {
        for v in 0..dim {
            let mut last = None;
            for t in 0..steps {
                last = grid[[t, i, v]].or(last);
                match last {
                    Some(x) => out[[t, i, v]] = x,
                    None => {
                        return Err(Error::data(format!(
                            "station {id:?} has no {} value at the first timestamp {}",
                            raw.variables[v],
                            format_timestamp(start)
                        )))
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Write `ds` (and optionally its manifest) into `dir`, creating it.
pub fn write_dataset(dir: &Path, ds: &Dataset, manifest: Option<&Manifest>) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_stations(&dir.join(STATIONS_FILE), &ds.stations)?;
    for kind in StationKind::ALL {
        let file = fs::File::create(dir.join(observations_file(kind)))?;
        write_observations(ds, kind, std::io::BufWriter::new(file))?;
    }
    if let Some(m) = manifest {
        let mut text = serde_json::to_string_pretty(m)?;
        text.push('\n');
        fs::write(dir.join(MANIFEST_FILE), text)?;
    }
    Ok(())
}

/// Read a dataset directory written by [`write_dataset`] or by hand.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let stations = read_stations(&dir.join(STATIONS_FILE))?;
    let mut raws = Vec::with_capacity(2);
    for kind in StationKind::ALL {
        let path = dir.join(observations_file(kind));
        let file = fs::File::open(&path)
            .map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))?;
        raws.push(read_observations(std::io::BufReader::new(file))?);
    }
    let times = raws.iter().flat_map(|r| r.rows.iter().map(|row| row.0));
    let (start, end) = times.fold((None, None), |(lo, hi): (Option<DateTime<Utc>>, Option<_>), t| {
        (Some(lo.map_or(t, |l| l.min(t))), Some(hi.map_or(t, |h: DateTime<Utc>| h.max(t))))
    });
    let (start, end) = start
        .zip(end)
        .ok_or_else(|| Error::data("observation files contain no rows"))?;
    let steps = ((end - start).num_hours() + 1) as usize;
    let mut series = Vec::with_capacity(2);
    let mut variables: [Vec<String>; 2] = Default::default();
    for kind in StationKind::ALL {
        let ids: Vec<&str> = stations
            .iter()
            .filter(|s| s.kind == kind)
            .map(|s| s.id.as_str())
            .collect();
        let raw = &raws[kind.index()];
        series.push(align(raw, kind, &ids, start, steps)?);
        variables[kind.index()] = raw.variables.clone();
    }
    let weather = series.pop().expect("two kinds");
    let air = series.pop().expect("two kinds");
    let ds = Dataset {
        stations,
        start,
        variables,
        series: [air, weather],
    };
    ds.validate()?;
    Ok(ds)
}

pub fn read_manifest(dir: &Path) -> Result<Option<Manifest>> {
    let path = dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_str(&fs::read_to_string(path)?)?))
}

/// Timestamp `steps` hours after `start`.
pub fn hours_after(start: DateTime<Utc>, steps: usize) -> DateTime<Utc> {
    start + Duration::hours(steps as i64)
}
