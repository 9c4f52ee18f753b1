//! Datasets, splits, normalization, windowing and forecast metrics.

pub mod io;
pub mod metrics;
pub mod norm;
pub mod synthetic;

use std::ops::Range;

use chrono::{DateTime, Duration, Utc};
use ndarray::{s, Array2, Array3};

use crate::error::{Error, Result};
use crate::geo::{Station, StationKind};
use crate::model::Snapshot;

pub use metrics::{mae, smape, MetricAccumulator, MetricReport};
pub use norm::NormStats;

/// Aligned hourly observations of every station.
///
/// `series[k]` is `[steps × stations of kind k × variables of kind k]`, with
/// stations in the order they appear in `stations`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub stations: Vec<Station>,
    pub start: DateTime<Utc>,
    pub variables: [Vec<String>; 2],
    pub series: [Array3<f64>; 2],
}

impl Dataset {
    pub fn steps(&self) -> usize {
        self.series[0].shape()[0]
    }

    pub fn count(&self, kind: StationKind) -> usize {
        self.series[kind.index()].shape()[1]
    }

    pub fn dim(&self, kind: StationKind) -> usize {
        self.series[kind.index()].shape()[2]
    }

    pub fn context_dim(&self) -> usize {
        self.stations.first().map_or(0, |s| s.context.len())
    }

    pub fn timestamp(&self, step: usize) -> DateTime<Utc> {
        self.start + Duration::hours(step as i64)
    }

    /// Step index of an exact hourly timestamp.
    pub fn step_of(&self, ts: DateTime<Utc>) -> Option<usize> {
        let hours = (ts - self.start).num_hours();
        let step = usize::try_from(hours).ok()?;
        (self.timestamp(step) == ts && step < self.steps()).then_some(step)
    }

    /// Station ids of `kind`, in dataset order.
    pub fn ids(&self, kind: StationKind) -> Vec<&str> {
        self.stations
            .iter()
            .filter(|s| s.kind == kind)
            .map(|s| s.id.as_str())
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        crate::geo::validate_stations(&self.stations)?;
        for kind in StationKind::ALL {
            let k = kind.index();
            let sh = self.series[k].shape();
            let want = self.stations.iter().filter(|s| s.kind == kind).count();
            if sh[1] != want {
                return Err(Error::data(format!(
                    "{kind} series covers {} stations, station list has {want}",
                    sh[1]
                )));
            }
            if sh[2] != self.variables[k].len() {
                return Err(Error::data(format!(
                    "{kind} series has {} variables but {} names",
                    sh[2],
                    self.variables[k].len()
                )));
            }
            if let Some(pos) = self.series[k].iter().position(|x| !x.is_finite()) {
                return Err(Error::data(format!(
                    "{kind} series has a missing or non-finite value at flat position {pos}"
                )));
            }
        }
        if self.series[0].shape()[0] != self.series[1].shape()[0] {
            return Err(Error::data("air and weather series differ in length"));
        }
        Ok(())
    }

    /// Observations of every station of both kinds at `step`.
    pub fn snapshot(&self, step: usize) -> Snapshot {
        [
            self.series[0].slice(s![step, .., ..]).to_owned(),
            self.series[1].slice(s![step, .., ..]).to_owned(),
        ]
    }
}

/// Contiguous chronological train/validation/test ranges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl Split {
    /// 8:1:1 split of `steps` in time order.
    pub fn chronological(steps: usize) -> Split {
        let train_end = steps * 8 / 10;
        let val_end = train_end + steps / 10;
        Split {
            train: 0..train_end,
            val: train_end..val_end,
            test: val_end..steps,
        }
    }

    pub fn range(&self, name: SplitName) -> Range<usize> {
        match name {
            SplitName::Train => self.train.clone(),
            SplitName::Val => self.val.clone(),
            SplitName::Test => self.test.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" | "validation" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            other => Err(Error::config(format!(
                "unknown split {other:?}; expected train, val or test"
            ))),
        }
    }
}

/// A `(history, future)` slice starting at `start`: history covers
/// `start..start+T`, future `start+T..start+T+τ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub start: usize,
    pub history: usize,
    pub horizon: usize,
}

impl Window {
    pub fn history_range(&self) -> Range<usize> {
        self.start..self.start + self.history
    }

    pub fn future_range(&self) -> Range<usize> {
        self.start + self.history..self.start + self.history + self.horizon
    }

    pub fn end(&self) -> usize {
        self.start + self.history + self.horizon
    }
}

/// Every stride-1 window lying entirely inside `range`.
pub fn make_windows(range: Range<usize>, history: usize, horizon: usize) -> Vec<Window> {
    let need = history + horizon;
    if range.len() < need || need == 0 {
        log::warn!(
            "range {:?} holds {} steps, fewer than the {need} a window needs",
            range,
            range.len()
        );
        return Vec::new();
    }
    (range.start..=range.end - need)
        .map(|start| Window {
            start,
            history,
            horizon,
        })
        .collect()
}

/// Several windows stacked along the station axis, ready for the model.
#[derive(Debug, Clone)]
pub struct WindowBatch {
    pub windows: Vec<Window>,
    pub history: Vec<Snapshot>,
    pub future: Vec<Snapshot>,
}

impl WindowBatch {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }
}

fn stack_step(ds: &Dataset, windows: &[Window], offset: usize) -> Snapshot {
    StationKind::ALL.map(|kind| {
        let k = kind.index();
        let (n, dim) = (ds.count(kind), ds.dim(kind));
        let mut out = Array2::zeros((windows.len() * n, dim));
        for (b, w) in windows.iter().enumerate() {
            out.slice_mut(s![b * n..(b + 1) * n, ..])
                .assign(&ds.series[k].slice(s![w.start + offset, .., ..]));
        }
        out
    })
}

/// Stack `windows` (all with the same lengths) of `ds` into one batch.
pub fn assemble(ds: &Dataset, windows: &[Window]) -> Result<WindowBatch> {
    let first = windows
        .first()
        .ok_or_else(|| Error::contract("cannot assemble an empty batch"))?;
    if let Some(w) = windows
        .iter()
        .find(|w| w.history != first.history || w.horizon != first.horizon)
    {
        return Err(Error::contract(format!(
            "window at {} has different lengths from window at {}",
            w.start, first.start
        )));
    }
    if let Some(w) = windows.iter().find(|w| w.end() > ds.steps()) {
        return Err(Error::data(format!(
            "window at {} runs past the end of the data ({} steps)",
            w.start,
            ds.steps()
        )));
    }
    Ok(WindowBatch {
        windows: windows.to_vec(),
        history: (0..first.history).map(|t| stack_step(ds, windows, t)).collect(),
        future: (0..first.horizon)
            .map(|t| stack_step(ds, windows, first.history + t))
            .collect(),
    })
}
