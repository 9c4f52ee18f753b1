use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::forecaster::{strided, Forecaster};
use super::step::{StepRecord, Trainer};
use crate::adversarial::init_discriminators;
use crate::data::{assemble, make_windows, Dataset, MetricReport, NormStats, Split, Window};
use crate::error::{Error, Result};
use crate::geo::{build_hsg, HeteroStationGraph, StationKind};
use crate::model::init_generator;
use crate::tensor::ParamStore;

/// Independent random streams derived from one seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    GeneratorInit = 0,
    DiscriminatorInit = 1,
    /// Window shuffling, then teacher-forcing draws, in iteration order.
    Training = 2,
    Noise = 3,
}

pub fn rng_stream(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Diagnostics of an epoch cut short by a non-finite value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbortRecord {
    pub epoch: usize,
    pub iteration: usize,
    pub reason: String,
    pub generator_finite: bool,
    pub discriminator_finite: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub iterations: usize,
    pub teacher_ratio: f64,
    pub mean_predictive_loss: Option<f64>,
    /// Mean over all variables of validation MAE divided by the variable's
    /// training standard deviation; lower is better.
    pub validation_score: f64,
    pub validation: MetricReport,
    pub best: bool,
    pub aborted: bool,
}

/// One line of the training statistics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum StatsRecord {
    Step(StepRecord),
    Epoch(EpochRecord),
    Abort(AbortRecord),
}

/// Everything `fit` needs that is derived from the raw dataset.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub split: Split,
    pub norm: NormStats,
    /// The whole dataset, normalized.
    pub normalized: Dataset,
    /// `normalized` with training noise added to the training range.
    pub train: Dataset,
    pub graph: HeteroStationGraph,
    pub train_windows: Vec<Window>,
}

pub fn prepare(ds: &Dataset, cfg: &TrainConfig) -> Result<Prepared> {
    cfg.validate()?;
    ds.validate()?;
    let split = Split::chronological(ds.steps());
    if split.train.is_empty() {
        return Err(Error::config("the training split is empty"));
    }
    let norm = NormStats::fit(ds, split.train.clone())?;
    let normalized = norm.apply_dataset(ds)?;
    let mut train = normalized.clone();
    if cfg.train_noise_std > 0.0 {
        let mut rng = rng_stream(cfg.seed, Stream::Noise);
        for k in 0..2 {
            let mut part = train.series[k].slice_mut(ndarray::s![split.train.clone(), .., ..]);
            for x in part.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *x += cfg.train_noise_std * z;
            }
        }
    }
    let train_windows = make_windows(split.train.clone(), cfg.history, cfg.horizon);
    if train_windows.is_empty() {
        return Err(Error::config(format!(
            "the training split ({} steps) is shorter than history + horizon ({})",
            split.train.len(),
            cfg.history + cfg.horizon
        )));
    }
    let graph = build_hsg(ds.stations.clone(), cfg.epsilon_km)?;
    Ok(Prepared {
        split,
        norm,
        normalized,
        train,
        graph,
        train_windows,
    })
}

/// Freshly initialized generator and (unless adversarial training is off)
/// discriminator parameters.
pub fn initial_params(ds: &Dataset, cfg: &TrainConfig) -> Result<(ParamStore, ParamStore)> {
    let gen = init_generator(&cfg.generator_config(ds), &mut rng_stream(cfg.seed, Stream::GeneratorInit))?;
    let disc = if cfg.active_discriminators().is_empty() {
        ParamStore::new()
    } else {
        init_discriminators(&cfg.disc_config(ds), &mut rng_stream(cfg.seed, Stream::DiscriminatorInit))?
    };
    Ok((gen, disc))
}

/// Shuffle the training windows and cut them into batches for one epoch.
pub fn epoch_batches<R: Rng>(windows: &[Window], cfg: &TrainConfig, rng: &mut R) -> Vec<Vec<Window>> {
    let mut order = windows.to_vec();
    order.shuffle(rng);
    let mut batches: Vec<Vec<Window>> = order.chunks(cfg.batch_windows).map(<[Window]>::to_vec).collect();
    if let Some(cap) = cfg.max_batches_per_epoch {
        batches.truncate(cap);
    }
    batches
}

pub fn validation_score(report: &MetricReport, norm: &NormStats) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for kind in StationKind::ALL {
        let k = kind.index();
        for (mae, sd) in report.group(kind).mae.iter().zip(&norm.std[k]) {
            total += mae / sd;
            count += 1;
        }
    }
    total / count as f64
}

#[derive(Debug, Clone)]
pub struct FitOutput {
    /// Parameters from the epoch with the best validation score (the
    /// initial parameters when no epoch ran).
    pub best: Forecaster,
    /// Parameters after the last epoch.
    pub last: Forecaster,
    pub stats: Vec<StatsRecord>,
}

/// Train on `ds` (physical units) according to `cfg`. Every statistics
/// record is passed to `sink` as soon as it is produced.
pub fn fit(ds: &Dataset, cfg: &TrainConfig, mut sink: impl FnMut(&StatsRecord)) -> Result<FitOutput> {
    let prep = prepare(ds, cfg)?;
    let (mut gen, mut disc) = initial_params(ds, cfg)?;
    let gen_cfg = cfg.generator_config(ds);
    let snapshot = |gen: &ParamStore, disc: &ParamStore, epoch: Option<usize>| Forecaster {
        config: cfg.clone(),
        gen_cfg: gen_cfg.clone(),
        graph: prep.graph.clone(),
        norm: prep.norm.clone(),
        variables: ds.variables.clone(),
        gen: gen.clone(),
        disc: disc.clone(),
        epoch,
    };
    let mut best = snapshot(&gen, &disc, None);
    let mut best_score = f64::INFINITY;
    let mut stats = Vec::new();
    let mut emit = |r: StatsRecord, stats: &mut Vec<StatsRecord>| {
        sink(&r);
        stats.push(r);
    };

    let mut trainer = Trainer::new(cfg, gen_cfg.clone(), cfg.disc_config(ds), &prep.graph)?;
    let mut rng = rng_stream(cfg.seed, Stream::Training);
    let val_windows = strided(make_windows(prep.split.val.clone(), cfg.history, cfg.horizon), cfg.eval_stride);
    if cfg.epochs > 0 && val_windows.is_empty() {
        return Err(Error::config("the validation split holds no complete window"));
    }

    for epoch in 0..cfg.epochs {
        let ratio = cfg.teacher_ratio(epoch);
        let batches = epoch_batches(&prep.train_windows, cfg, &mut rng);
        let mut loss_sum = 0.0;
        let mut iterations = 0;
        let mut aborted = false;
        for windows in &batches {
            let batch = assemble(&prep.train, windows)?;
            match trainer.train_step(&mut gen, &mut disc, &batch, ratio, epoch, &mut rng) {
                Ok(rec) => {
                    loss_sum += rec.predictive_loss;
                    iterations += 1;
                    emit(StatsRecord::Step(rec), &mut stats);
                }
                Err(Error::NonFinite(reason)) => {
                    log::warn!("epoch {epoch} aborted: {reason}");
                    emit(
                        StatsRecord::Abort(AbortRecord {
                            epoch,
                            iteration: trainer.iterations(),
                            reason,
                            generator_finite: gen.all_finite(),
                            discriminator_finite: disc.all_finite(),
                        }),
                        &mut stats,
                    );
                    aborted = true;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        let current = snapshot(&gen, &disc, Some(epoch));
        let validation = current.evaluate_prepared(ds, &prep.normalized, prep.split.val.clone(), cfg.eval_stride)?;
        let score = validation_score(&validation, &prep.norm);
        let is_best = score.is_finite() && score < best_score;
        if is_best {
            best_score = score;
            best = current;
        }
        log::info!("epoch {epoch}: validation score {score:.4}{}", if is_best { " (best)" } else { "" });
        emit(
            StatsRecord::Epoch(EpochRecord {
                epoch,
                iterations,
                teacher_ratio: ratio,
                mean_predictive_loss: (iterations > 0).then(|| loss_sum / iterations as f64),
                validation_score: score,
                validation,
                best: is_best,
                aborted,
            }),
            &mut stats,
        );
    }
    let last = snapshot(&gen, &disc, cfg.epochs.checked_sub(1));
    Ok(FitOutput { best, last, stats })
}
