//! MAE and SMAPE on denormalized values.
//!
//! SMAPE uses the half-sum denominator `|ŷ−y| / ((|y|+|ŷ|)/2 + 1e-8)`, so it
//! lies in `[0, 2]` and is 0 when both values are 0.

use ndarray::{ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::StationKind;
use crate::model::Snapshot;

pub const SMAPE_GUARD: f64 = 1e-8;

fn check(pred: &ArrayView2<f64>, target: &ArrayView2<f64>, op: &'static str) -> Result<()> {
    if pred.dim() != target.dim() {
        return Err(Error::Dimension {
            op,
            left: pred.dim(),
            right: target.dim(),
        });
    }
    Ok(())
}

pub fn smape_term(pred: f64, target: f64) -> f64 {
    (pred - target).abs() / ((target.abs() + pred.abs()) / 2.0 + SMAPE_GUARD)
}

/// Per-column mean absolute error of `[rows × variables]` blocks.
pub fn mae(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<Vec<f64>> {
    check(&pred, &target, "mae")?;
    let mut acc = MetricAccumulator::new(pred.ncols());
    acc.add(pred, target)?;
    Ok(acc.mae())
}

/// Per-column SMAPE of `[rows × variables]` blocks.
pub fn smape(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<Vec<f64>> {
    check(&pred, &target, "smape")?;
    let mut acc = MetricAccumulator::new(pred.ncols());
    acc.add(pred, target)?;
    Ok(acc.smape())
}

/// Running per-variable sums of absolute and symmetric-percentage errors.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricAccumulator {
    abs: Vec<f64>,
    sym: Vec<f64>,
    count: usize,
}

impl MetricAccumulator {
    pub fn new(variables: usize) -> Self {
        MetricAccumulator {
            abs: vec![0.0; variables],
            sym: vec![0.0; variables],
            count: 0,
        }
    }

    pub fn add(&mut self, pred: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<()> {
        check(&pred, &target, "metric")?;
        if pred.ncols() != self.abs.len() {
            return Err(Error::contract(format!(
                "accumulator tracks {} variables, block has {}",
                self.abs.len(),
                pred.ncols()
            )));
        }
        for (v, (pc, tc)) in pred.columns().into_iter().zip(target.columns()).enumerate() {
            Zip::from(&pc).and(&tc).for_each(|&p, &t| {
                self.abs[v] += (p - t).abs();
                self.sym[v] += smape_term(p, t);
            });
        }
        self.count += pred.nrows();
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mae(&self) -> Vec<f64> {
        self.abs.iter().map(|s| s / self.count as f64).collect()
    }

    pub fn smape(&self) -> Vec<f64> {
        self.sym.iter().map(|s| s / self.count as f64).collect()
    }

    /// Mean over every element of every variable.
    pub fn mae_overall(&self) -> f64 {
        self.abs.iter().sum::<f64>() / (self.count * self.abs.len()) as f64
    }

    pub fn smape_overall(&self) -> f64 {
        self.sym.iter().sum::<f64>() / (self.count * self.sym.len()) as f64
    }
}

/// Metrics of one variable group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub variables: Vec<String>,
    pub mae: Vec<f64>,
    pub smape: Vec<f64>,
    pub mae_overall: f64,
    pub smape_overall: f64,
}

/// Air and weather metrics of a forecast run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub air: GroupMetrics,
    pub weather: GroupMetrics,
}

impl MetricReport {
    pub fn group(&self, kind: StationKind) -> &GroupMetrics {
        match kind {
            StationKind::Air => &self.air,
            StationKind::Weather => &self.weather,
        }
    }

    /// CSV with one row per variable: `group,variable,mae,smape`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["group", "variable", "mae", "smape"])?;
        for kind in StationKind::ALL {
            let g = self.group(kind);
            for (i, name) in g.variables.iter().enumerate() {
                w.write_record([
                    kind.as_str(),
                    name,
                    &g.mae[i].to_string(),
                    &g.smape[i].to_string(),
                ])?;
            }
            w.write_record([
                kind.as_str(),
                "overall",
                &g.mae_overall.to_string(),
                &g.smape_overall.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::contract(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::contract(e.to_string()))
    }

    pub fn table(&self) -> String {
        let mut out = format!("{:<8} {:<14} {:>12} {:>8}\n", "group", "variable", "MAE", "SMAPE");
        for kind in StationKind::ALL {
            let g = self.group(kind);
            for (i, name) in g.variables.iter().enumerate() {
                out += &format!(
                    "{:<8} {:<14} {:>12.4} {:>8.4}\n",
                    kind.as_str(),
                    name,
                    g.mae[i],
                    g.smape[i]
                );
            }
            out += &format!(
                "{:<8} {:<14} {:>12.4} {:>8.4}\n",
                kind.as_str(),
                "overall",
                g.mae_overall,
                g.smape_overall
            );
        }
        out
    }
}

/// Accumulates both groups over many `(prediction, target)` snapshots.
#[derive(Debug, Clone)]
pub struct ForecastMetrics {
    acc: [MetricAccumulator; 2],
}

impl ForecastMetrics {
    pub fn new(d_air: usize, d_weather: usize) -> Self {
        ForecastMetrics {
            acc: [MetricAccumulator::new(d_air), MetricAccumulator::new(d_weather)],
        }
    }

    pub fn add(&mut self, pred: &Snapshot, target: &Snapshot) -> Result<()> {
        for k in 0..2 {
            self.acc[k].add(pred[k].view(), target[k].view())?;
        }
        Ok(())
    }

    pub fn accumulator(&self, kind: StationKind) -> &MetricAccumulator {
        &self.acc[kind.index()]
    }

    pub fn report(&self, variables: &[Vec<String>; 2]) -> MetricReport {
        let group = |k: usize| GroupMetrics {
            variables: variables[k].clone(),
            mae: self.acc[k].mae(),
            smape: self.acc[k].smape(),
            mae_overall: self.acc[k].mae_overall(),
            smape_overall: self.acc[k].smape_overall(),
        };
        MetricReport {
            air: group(0),
            weather: group(1),
        }
    }
}
