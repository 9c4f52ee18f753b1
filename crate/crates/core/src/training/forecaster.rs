use std::ops::Range;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::config::TrainConfig;
use crate::data::metrics::ForecastMetrics;
use crate::data::{assemble, make_windows, Dataset, MetricReport, NormStats, Window};
use crate::error::{Error, Result};
use crate::geo::{build_hsg, HeteroStationGraph, Relation, StationKind};
use crate::model::{AttentionLog, GenVars, Generator, GeneratorConfig, GraphBatch, Snapshot, TeacherForcing};
use crate::tensor::{checkpoint, ParamStore, Tape};

pub const CHECKPOINT_KIND: &str = "hsgcast-forecaster";

/// Everything a checkpoint records besides the parameter tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: String,
    pub train_config: TrainConfig,
    pub generator: GeneratorConfig,
    pub norm: NormStats,
    pub variables: [Vec<String>; 2],
    pub station_ids: Vec<String>,
    #[serde(default)]
    pub epoch: Option<usize>,
}

/// A trained (or freshly initialized) model bound to a station set.
#[derive(Debug, Clone)]
pub struct Forecaster {
    pub config: TrainConfig,
    pub gen_cfg: GeneratorConfig,
    pub graph: HeteroStationGraph,
    pub norm: NormStats,
    pub variables: [Vec<String>; 2],
    pub gen: ParamStore,
    pub disc: ParamStore,
    pub epoch: Option<usize>,
}

/// One exported attention weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub step: usize,
    pub relation: String,
    pub target_id: String,
    pub source_id: String,
    pub weight: f64,
}

impl Forecaster {
    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            kind: CHECKPOINT_KIND.into(),
            train_config: self.config.clone(),
            generator: self.gen_cfg.clone(),
            norm: self.norm.clone(),
            variables: self.variables.clone(),
            station_ids: self.graph.stations().iter().map(|s| s.id.clone()).collect(),
            epoch: self.epoch,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut all = self.gen.clone();
        all.extend(self.disc.clone())?;
        checkpoint::encode(&all, &serde_json::to_value(self.meta())?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    /// Decode a checkpoint and bind it to `ds`, which must describe the same
    /// stations and variables the model was trained on.
    pub fn from_bytes(bytes: &[u8], ds: &Dataset) -> Result<Forecaster> {
        let (params, meta) = checkpoint::decode(bytes)?;
        let meta: CheckpointMeta = serde_json::from_value(meta)?;
        if meta.kind != CHECKPOINT_KIND {
            return Err(Error::data(format!("checkpoint kind {:?} is not a forecaster", meta.kind)));
        }
        let ids: Vec<String> = ds.stations.iter().map(|s| s.id.clone()).collect();
        if ids != meta.station_ids {
            return Err(Error::data(format!(
                "checkpoint stations {:?} differ from dataset stations {:?}",
                meta.station_ids, ids
            )));
        }
        for kind in StationKind::ALL {
            let k = kind.index();
            if meta.variables[k] != ds.variables[k] {
                return Err(Error::data(format!(
                    "checkpoint {kind} variables {:?} differ from dataset {kind} variables {:?}",
                    meta.variables[k], ds.variables[k]
                )));
            }
        }
        let want = meta.train_config.generator_config(ds);
        if want != meta.generator {
            return Err(Error::data(format!(
                "checkpoint generator dimensions {:?} do not fit the dataset, which needs {:?}",
                meta.generator, want
            )));
        }
        let graph = build_hsg(ds.stations.clone(), meta.train_config.epsilon_km)?;
        let f = Forecaster {
            config: meta.train_config,
            gen_cfg: meta.generator,
            graph,
            norm: meta.norm,
            variables: meta.variables,
            gen: params.subset("gen."),
            disc: params.subset("disc."),
            epoch: meta.epoch,
        };
        f.check_params()?;
        Ok(f)
    }

    pub fn load(path: &Path, ds: &Dataset) -> Result<Forecaster> {
        Forecaster::from_bytes(&std::fs::read(path)?, ds)
    }

    fn check_params(&self) -> Result<()> {
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let fresh = crate::model::init_generator(&self.gen_cfg, &mut rng)?;
        for (name, p) in fresh.iter() {
            let got = self.gen.get(name).map_err(|_| {
                Error::data(format!("checkpoint lacks generator parameter {name}"))
            })?;
            if got.value.dim() != p.value.dim() {
                return Err(Error::data(format!(
                    "checkpoint parameter {name} has shape {:?}, the configuration needs {:?}",
                    got.value.dim(),
                    p.value.dim()
                )));
            }
        }
        Ok(())
    }

    /// Normalized forecasts for `windows` of an already-normalized dataset,
    /// computed `chunk` windows at a time. Result is `[window][step]`.
    pub fn forecast_normalized(
        &self,
        norm_ds: &Dataset,
        windows: &[Window],
        chunk: usize,
    ) -> Result<Vec<Vec<Snapshot>>> {
        let mut out = Vec::with_capacity(windows.len());
        for part in windows.chunks(chunk.max(1)) {
            let batch = assemble(norm_ds, part)?;
            let gb = GraphBatch::new(&self.graph, part.len());
            let generator = Generator::new(&self.gen_cfg, &gb);
            let tape = Tape::new();
            let vars = GenVars::load(&tape, &self.gen, &self.gen_cfg)?;
            let horizon = part[0].horizon;
            let preds = generator.forward(
                &tape,
                &vars,
                &batch.history,
                horizon,
                None::<TeacherForcing<'_, ChaCha8Rng>>,
                None,
            )?;
            let values: Vec<Snapshot> = preds
                .iter()
                .map(|p| [tape.value(p[0]).clone(), tape.value(p[1]).clone()])
                .collect();
            for b in 0..part.len() {
                out.push(values.iter().map(|s| split_copy(s, b, &gb)).collect());
            }
        }
        Ok(out)
    }

    /// Physical-unit MAE/SMAPE over every `stride`-th window of `range`.
    pub fn evaluate(&self, ds: &Dataset, range: Range<usize>, stride: usize) -> Result<MetricReport> {
        let norm_ds = self.norm.apply_dataset(ds)?;
        self.evaluate_prepared(ds, &norm_ds, range, stride)
    }

    pub fn evaluate_prepared(
        &self,
        ds: &Dataset,
        norm_ds: &Dataset,
        range: Range<usize>,
        stride: usize,
    ) -> Result<MetricReport> {
        let windows = strided(make_windows(range, self.config.history, self.config.horizon), stride);
        if windows.is_empty() {
            return Err(Error::data("evaluation range holds no complete window"));
        }
        let preds = self.forecast_normalized(norm_ds, &windows, self.config.batch_windows)?;
        let mut metrics = ForecastMetrics::new(ds.dim(StationKind::Air), ds.dim(StationKind::Weather));
        for (w, steps) in windows.iter().zip(&preds) {
            for (s, p) in steps.iter().enumerate() {
                let pred = self.norm.invert_snapshot(p)?;
                let target = ds.snapshot(w.start + w.history + s);
                metrics.add(&pred, &target)?;
            }
        }
        Ok(metrics.report(&ds.variables))
    }

    /// Forecast `horizon` steps after `last`, using the `history` steps
    /// ending at `last` (inclusive). Returns physical-unit snapshots and the
    /// attention weights of every decoder step.
    pub fn predict(
        &self,
        ds: &Dataset,
        last: usize,
        horizon: usize,
    ) -> Result<(Vec<Snapshot>, Vec<AttentionRecord>)> {
        let history = self.config.history;
        if last + 1 < history || last >= ds.steps() {
            return Err(Error::data(format!(
                "forecast origin step {last} needs {history} observed steps and must lie inside the {}-step dataset",
                ds.steps()
            )));
        }
        if horizon == 0 {
            return Err(Error::config("horizon must be at least 1"));
        }
        let norm_ds = self.norm.apply_dataset(ds)?;
        let hist: Vec<Snapshot> = (last + 1 - history..=last).map(|t| norm_ds.snapshot(t)).collect();
        let gb = GraphBatch::new(&self.graph, 1);
        let generator = Generator::new(&self.gen_cfg, &gb);
        let tape = Tape::new();
        let vars = GenVars::load(&tape, &self.gen, &self.gen_cfg)?;
        let mut log = AttentionLog::new();
        let preds = generator.forward(
            &tape,
            &vars,
            &hist,
            horizon,
            None::<TeacherForcing<'_, ChaCha8Rng>>,
            Some(&mut log),
        )?;
        let snaps = preds
            .iter()
            .map(|p| self.norm.invert_snapshot(&[tape.value(p[0]).clone(), tape.value(p[1]).clone()]))
            .collect::<Result<Vec<_>>>()?;
        let records = self.attention_records(&gb, &log, history);
        Ok((snaps, records))
    }

    fn attention_records(&self, gb: &GraphBatch, log: &AttentionLog, history: usize) -> Vec<AttentionRecord> {
        let stations = self.graph.stations();
        let id = |kind: StationKind, row: usize| stations[gb.globals[kind.index()][row]].id.clone();
        let mut out = Vec::new();
        for (step, snaps) in log.iter().filter(|(s, _)| *s > history) {
            for snap in snaps {
                let rel: Relation = snap.relation;
                for &(t, s, w) in &snap.weights {
                    out.push(AttentionRecord {
                        step: step - history,
                        relation: rel.as_str().into(),
                        target_id: id(rel.target(), t),
                        source_id: id(rel.source(), s),
                        weight: w,
                    });
                }
            }
        }
        out
    }

    /// JSON summary used by reports.
    pub fn describe(&self) -> serde_json::Value {
        json!({
            "generator_parameters": self.gen.num_scalars(),
            "discriminator_parameters": self.disc.num_scalars(),
            "stations": self.graph.len(),
            "edges": self.graph.edge_count(),
            "epoch": self.epoch,
        })
    }
}

fn split_copy(s: &Snapshot, b: usize, gb: &GraphBatch) -> Snapshot {
    StationKind::ALL.map(|kind| {
        let k = kind.index();
        let n = gb.counts[k];
        s[k].slice(ndarray::s![b * n..(b + 1) * n, ..]).to_owned()
    })
}

pub fn strided(windows: Vec<Window>, stride: usize) -> Vec<Window> {
    windows.into_iter().step_by(stride.max(1)).collect()
}

/// Repeat-the-last-observation baseline over the same windows as
/// [`Forecaster::evaluate`].
pub fn persistence_report(
    ds: &Dataset,
    range: Range<usize>,
    history: usize,
    horizon: usize,
    stride: usize,
) -> Result<MetricReport> {
    let windows = strided(make_windows(range, history, horizon), stride);
    if windows.is_empty() {
        return Err(Error::data("evaluation range holds no complete window"));
    }
    let mut metrics = ForecastMetrics::new(ds.dim(StationKind::Air), ds.dim(StationKind::Weather));
    for w in &windows {
        let last = ds.snapshot(w.start + w.history - 1);
        for t in w.future_range() {
            metrics.add(&last, &ds.snapshot(t))?;
        }
    }
    Ok(metrics.report(&ds.variables))
}
