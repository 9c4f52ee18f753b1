use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::{Ablation, TrainConfig};
use super::weighting::{adaptive_weights, gamma_with, total_gen_loss};
use crate::adversarial::{disc_loss, gen_adv_loss, DiscConfig, DiscKind, DiscVars, Discriminators};
use crate::data::WindowBatch;
use crate::error::{Error, Result};
use crate::geo::HeteroStationGraph;
use crate::model::{predictive_loss, GenVars, Generator, GeneratorConfig, GraphBatch, Snapshot, TeacherForcing};
use crate::tensor::{clip_grad_norm, sgd_step, ParamStore, Tape, Var};

/// One training iteration's losses and weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub iteration: usize,
    pub windows: usize,
    pub predictive_loss: f64,
    pub total_loss: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub adversarial_loss: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub gamma: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub lambda: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub disc_loss: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub disc_updates: usize,
}

fn is_zero(n: &usize) -> bool {
    *n == 0
}

fn constants(tape: &Tape, snaps: &[Snapshot]) -> Vec<[Var; 2]> {
    snaps
        .iter()
        .map(|s| [tape.constant(s[0].clone()), tape.constant(s[1].clone())])
        .collect()
}

fn ensure_finite(what: &str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} is {value}")))
    }
}

/// Owns the per-run pieces that stay fixed across iterations.
pub struct Trainer<'a> {
    pub cfg: &'a TrainConfig,
    pub gen_cfg: GeneratorConfig,
    pub disc_cfg: DiscConfig,
    pub graph: &'a HeteroStationGraph,
    active: Vec<DiscKind>,
    batches: HashMap<usize, Rc<GraphBatch>>,
    fixed_lambda: Option<Vec<f64>>,
    iteration: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(
        cfg: &'a TrainConfig,
        gen_cfg: GeneratorConfig,
        disc_cfg: DiscConfig,
        graph: &'a HeteroStationGraph,
    ) -> Result<Self> {
        cfg.validate()?;
        gen_cfg.validate()?;
        Ok(Trainer {
            cfg,
            gen_cfg,
            disc_cfg,
            graph,
            active: cfg.active_discriminators(),
            batches: HashMap::new(),
            fixed_lambda: None,
            iteration: 0,
        })
    }

    pub fn active(&self) -> &[DiscKind] {
        &self.active
    }

    pub fn iterations(&self) -> usize {
        self.iteration
    }

    pub fn graph_batch(&mut self, copies: usize) -> Rc<GraphBatch> {
        self.batches
            .entry(copies)
            .or_insert_with(|| Rc::new(GraphBatch::new(self.graph, copies)))
            .clone()
    }

    fn lambda(&mut self, gammas: &[f64]) -> Result<Vec<f64>> {
        if self.cfg.has(Ablation::AvgWeights) {
            return Ok(vec![1.0 / gammas.len() as f64; gammas.len()]);
        }
        if self.cfg.has(Ablation::FixedWeights) {
            if let Some(l) = &self.fixed_lambda {
                return Ok(l.clone());
            }
            let l = adaptive_weights(gammas)?;
            self.fixed_lambda = Some(l.clone());
            return Ok(l);
        }
        adaptive_weights(gammas)
    }

    /// Discriminator updates on detached predictions; returns the last losses.
    fn update_discriminators(
        &self,
        disc: &mut ParamStore,
        discs: &Discriminators<'_>,
        batch: &WindowBatch,
        fake_future: &[Snapshot],
    ) -> Result<(BTreeMap<String, f64>, usize)> {
        let mut losses = BTreeMap::new();
        let mut updates = 0;
        for _ in 0..self.cfg.disc_steps_per_gen_step {
            let tape = Tape::new();
            let history = constants(&tape, &batch.history);
            let real_future = constants(&tape, &batch.future);
            let fake = constants(&tape, fake_future);
            let real_full: Vec<[Var; 2]> = history.iter().chain(&real_future).copied().collect();
            let fake_full: Vec<[Var; 2]> = history.iter().chain(&fake).copied().collect();
            let mut terms = Vec::with_capacity(self.active.len());
            for &kind in &self.active {
                let vars = DiscVars::load(&tape, disc, kind)?;
                let real = discs.score(&tape, &vars, &real_future, &real_full)?;
                let fake = discs.score(&tape, &vars, &fake, &fake_full)?;
                let loss = disc_loss(&tape, &real, &fake)?;
                let value = tape.scalar(loss);
                ensure_finite(&format!("{kind} discriminator loss"), value)?;
                losses.insert(kind.to_string(), value);
                terms.push(loss);
            }
            let mut sum = terms[0];
            for &t in &terms[1..] {
                sum = tape.add(sum, t)?;
            }
            let grads = tape.backward(sum)?;
            disc.accumulate(&tape, &grads);
            if let Some(max) = self.cfg.grad_clip {
                clip_grad_norm(disc, max);
            }
            sgd_step(disc, self.cfg.disc_lr())?;
            updates += 1;
        }
        Ok((losses, updates))
    }

    /// One iteration: generator rollout, discriminator updates, adaptive
    /// weighting and a generator update.
    pub fn train_step<R: Rng>(
        &mut self,
        gen: &mut ParamStore,
        disc: &mut ParamStore,
        batch: &WindowBatch,
        teacher_ratio: f64,
        epoch: usize,
        rng: &mut R,
    ) -> Result<StepRecord> {
        if batch.is_empty() {
            return Err(Error::contract("train_step on an empty batch"));
        }
        let windows = batch.len();
        let graph_batch = self.graph_batch(windows);
        let generator = Generator::new(&self.gen_cfg, &graph_batch);
        let tape = Tape::new();
        let vars = GenVars::load(&tape, gen, &self.gen_cfg)?;
        let teacher = TeacherForcing {
            future: &batch.future,
            ratio: teacher_ratio,
            rng,
        };
        let preds = generator.forward(&tape, &vars, &batch.history, self.cfg.horizon, Some(teacher), None)?;
        let lg = predictive_loss(&tape, &preds, &batch.future)?;
        let lg_value = tape.scalar(lg);
        ensure_finite("predictive loss", lg_value)?;

        let mut record = StepRecord {
            epoch,
            iteration: self.iteration,
            windows,
            predictive_loss: lg_value,
            total_loss: lg_value,
            adversarial_loss: BTreeMap::new(),
            gamma: BTreeMap::new(),
            lambda: BTreeMap::new(),
            disc_loss: BTreeMap::new(),
            disc_updates: 0,
        };

        let mut total = lg;
        if !self.active.is_empty() {
            let discs = Discriminators::new(&self.disc_cfg, self.graph, windows)?;
            let fake_values: Vec<Snapshot> = preds
                .iter()
                .map(|p| [tape.value(p[0]).clone(), tape.value(p[1]).clone()])
                .collect();
            let (losses, updates) = self.update_discriminators(disc, &discs, batch, &fake_values)?;
            record.disc_loss = losses;
            record.disc_updates = updates;

            let history = constants(&tape, &batch.history);
            let real_future = constants(&tape, &batch.future);
            let real_full: Vec<[Var; 2]> = history.iter().chain(&real_future).copied().collect();
            let fake_full: Vec<[Var; 2]> = history.iter().chain(&preds).copied().collect();
            let mut gammas = Vec::with_capacity(self.active.len());
            let mut adv = Vec::with_capacity(self.active.len());
            for &kind in &self.active {
                let dv = DiscVars::load(&tape, disc, kind)?;
                let real = discs.score(&tape, &dv, &real_future, &real_full)?;
                let fake = discs.score(&tape, &dv, &preds, &fake_full)?;
                let g = gamma_with(
                    self.cfg.gamma_mode,
                    tape.value(real.hidden).view(),
                    tape.value(fake.hidden).view(),
                )?;
                ensure_finite(&format!("{kind} gamma"), g)?;
                let a = gen_adv_loss(&tape, &fake)?;
                let a_value = tape.scalar(a);
                ensure_finite(&format!("{kind} adversarial loss"), a_value)?;
                record.gamma.insert(kind.to_string(), g);
                record.adversarial_loss.insert(kind.to_string(), a_value);
                gammas.push(g);
                adv.push(a);
            }
            let lambda = self.lambda(&gammas)?;
            for (&kind, &l) in self.active.iter().zip(&lambda) {
                record.lambda.insert(kind.to_string(), l);
            }
            total = total_gen_loss(&tape, lg, &adv, &lambda)?;
            record.total_loss = tape.scalar(total);
            ensure_finite("total generator loss", record.total_loss)?;
        }

        let grads = tape.backward(total)?;
        gen.accumulate(&tape, &grads);
        if let Some(max) = self.cfg.grad_clip {
            clip_grad_norm(gen, max);
        }
        sgd_step(gen, self.cfg.lr)?;
        if !gen.all_finite() {
            return Err(Error::NonFinite("generator parameters after update".into()));
        }
        self.iteration += 1;
        Ok(record)
    }
}
