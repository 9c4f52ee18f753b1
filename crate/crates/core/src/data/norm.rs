use std::ops::Range;

use ndarray::{s, Array1, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::geo::StationKind;
use crate::model::Snapshot;

/// Per-variable mean and population standard deviation of each kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [Vec<f64>; 2],
    pub std: [Vec<f64>; 2],
}

impl NormStats {
    /// Fit on the steps in `range` only.
    pub fn fit(ds: &Dataset, range: Range<usize>) -> Result<NormStats> {
        if range.is_empty() || range.end > ds.steps() {
            return Err(Error::data(format!(
                "cannot fit normalization on steps {range:?} of a {}-step dataset",
                ds.steps()
            )));
        }
        let mut mean: [Vec<f64>; 2] = Default::default();
        let mut std: [Vec<f64>; 2] = Default::default();
        for kind in StationKind::ALL {
            let k = kind.index();
            let part = ds.series[k].slice(s![range.clone(), .., ..]);
            let flat = part
                .to_shape((range.len() * ds.count(kind), ds.dim(kind)))
                .map_err(|e| Error::contract(e.to_string()))?;
            let mu = flat.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(0));
            let sd = flat.std_axis(Axis(0), 0.0);
            for (v, &s) in sd.iter().enumerate() {
                if !(s > 0.0) {
                    return Err(Error::validation(format!(
                        "{kind} variable {:?} has zero variance on the training split",
                        ds.variables[k][v]
                    )));
                }
            }
            mean[k] = mu.to_vec();
            std[k] = sd.to_vec();
        }
        Ok(NormStats { mean, std })
    }

    fn check(&self, kind: StationKind, width: usize) -> Result<()> {
        let k = kind.index();
        if self.mean[k].len() != width {
            return Err(Error::data(format!(
                "normalization has {} {kind} variables, data has {width}",
                self.mean[k].len()
            )));
        }
        Ok(())
    }

    /// `(x − μ)/σ` on a `[rows × variables]` block of kind `kind`.
    pub fn apply(&self, kind: StationKind, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check(kind, x.ncols())?;
        let k = kind.index();
        let mu = Array1::from(self.mean[k].clone());
        let sd = Array1::from(self.std[k].clone());
        Ok((x - &mu) / &sd)
    }

    pub fn invert(&self, kind: StationKind, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check(kind, x.ncols())?;
        let k = kind.index();
        let mu = Array1::from(self.mean[k].clone());
        let sd = Array1::from(self.std[k].clone());
        Ok(x * &sd + &mu)
    }

    pub fn apply_snapshot(&self, snap: &Snapshot) -> Result<Snapshot> {
        Ok([
            self.apply(StationKind::Air, &snap[0])?,
            self.apply(StationKind::Weather, &snap[1])?,
        ])
    }

    pub fn invert_snapshot(&self, snap: &Snapshot) -> Result<Snapshot> {
        Ok([
            self.invert(StationKind::Air, &snap[0])?,
            self.invert(StationKind::Weather, &snap[1])?,
        ])
    }

    /// A normalized copy of the whole dataset.
    pub fn apply_dataset(&self, ds: &Dataset) -> Result<Dataset> {
        let mut out = ds.clone();
        for kind in StationKind::ALL {
            let k = kind.index();
            self.check(kind, ds.dim(kind))?;
            out.series[k] = normalize3(&ds.series[k], &self.mean[k], &self.std[k]);
        }
        Ok(out)
    }
}

fn normalize3(x: &Array3<f64>, mean: &[f64], std: &[f64]) -> Array3<f64> {
    let mu = Array1::from(mean.to_vec());
    let sd = Array1::from(std.to_vec());
    (x - &mu) / &sd
}
