use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::TrainConfig;
use super::fit::initial_params;
use super::weighting::total_gen_loss;
use crate::adversarial::{disc_loss, gen_adv_loss, DiscConfig, DiscKind, DiscVars, Discriminators};
use crate::data::synthetic::{generate, SyntheticConfig};
use crate::data::{assemble, make_windows, NormStats, WindowBatch};
use crate::error::{Error, Result};
use crate::geo::{build_hsg, HeteroStationGraph};
use crate::model::{
    predictive_loss, GenVars, Generator, GeneratorConfig, GraphBatch, Snapshot, TeacherForcing,
};
use crate::tensor::{grad_check, GradCheckReport, ParamStore, Tape, Var};

/// Problem size of the finite-difference suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct GradScale {
    pub air_stations: usize,
    pub weather_stations: usize,
    pub history: usize,
    pub horizon: usize,
    pub d: usize,
    pub layers: usize,
}

impl GradScale {
    pub const TINY: GradScale = GradScale {
        air_stations: 3,
        weather_stations: 2,
        history: 4,
        horizon: 2,
        d: 8,
        layers: 2,
    };
    pub const NAMES: [&'static str; 1] = ["tiny"];
}

impl FromStr for GradScale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(GradScale::TINY),
            _ => Err(Error::config(format!(
                "unknown gradcheck scale {s:?}; valid scales: {}",
                GradScale::NAMES.join(", ")
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheck {
    /// Which objective was differentiated and over which parameters.
    pub objective: String,
    pub report: GradCheckReport,
}

/// Everything the suite objectives share.
pub struct GradFixture {
    pub cfg: TrainConfig,
    pub gen_cfg: GeneratorConfig,
    pub disc_cfg: DiscConfig,
    pub graph: HeteroStationGraph,
    pub batch: WindowBatch,
    pub gen: ParamStore,
    pub disc: ParamStore,
}

impl GradFixture {
    pub fn new(scale: &GradScale) -> Result<Self> {
        let synth = SyntheticConfig {
            seed: 7,
            air_stations: scale.air_stations,
            weather_stations: scale.weather_stations,
            steps: scale.history + scale.horizon + 1,
            context_dim: 3,
            box_km: 20.0,
            ..SyntheticConfig::default()
        };
        let (ds, _) = generate(&synth)?;
        let cfg = TrainConfig {
            d: scale.d,
            layers: scale.layers,
            history: scale.history,
            horizon: scale.horizon,
            mlp_hidden: 6,
            head_hidden: 6,
            epsilon_km: 18.0,
            seed: 11,
            ..TrainConfig::default()
        };
        let norm = NormStats::fit(&ds, 0..ds.steps())?;
        let normalized = norm.apply_dataset(&ds)?;
        let windows = make_windows(0..ds.steps(), scale.history, scale.horizon);
        let batch = assemble(&normalized, &windows)?;
        let graph = build_hsg(ds.stations.clone(), cfg.epsilon_km)?;
        let (gen, disc) = initial_params(&ds, &cfg)?;
        Ok(GradFixture {
            gen_cfg: cfg.generator_config(&ds),
            disc_cfg: cfg.disc_config(&ds),
            cfg,
            graph,
            batch,
            gen,
            disc,
        })
    }

    fn rollout(&self, tape: &Tape, gen: &ParamStore, gb: &GraphBatch) -> Result<Vec<[Var; 2]>> {
        let vars = GenVars::load(tape, gen, &self.gen_cfg)?;
        Generator::new(&self.gen_cfg, gb).forward(
            tape,
            &vars,
            &self.batch.history,
            self.cfg.horizon,
            None::<TeacherForcing<'_, ChaCha8Rng>>,
            None,
        )
    }
}

fn constants(tape: &Tape, snaps: &[Snapshot]) -> Vec<[Var; 2]> {
    snaps
        .iter()
        .map(|s| [tape.constant(s[0].clone()), tape.constant(s[1].clone())])
        .collect()
}

/// Central-difference check of every generator and discriminator parameter.
///
/// The generator is checked through the full training objective (predictive
/// loss plus uniformly weighted adversarial losses of all three
/// discriminators); each discriminator through its own loss on real versus
/// detached generated sequences.
pub fn gradient_suite(scale: &GradScale, h: f64) -> Result<Vec<GradientCheck>> {
    let fx = GradFixture::new(scale)?;
    let windows = fx.batch.len();
    let gb = GraphBatch::new(&fx.graph, windows);
    let discs = Discriminators::new(&fx.disc_cfg, &fx.graph, windows)?;
    let lambda = vec![1.0 / 3.0; 3];
    let mut out = Vec::new();

    let report = grad_check(
        |tape: &Tape, gen: &ParamStore| {
            let preds = fx.rollout(tape, gen, &gb)?;
            let lg = predictive_loss(tape, &preds, &fx.batch.future)?;
            let history = constants(tape, &fx.batch.history);
            let fake_full: Vec<[Var; 2]> = history.iter().chain(&preds).copied().collect();
            let mut adv = Vec::new();
            for kind in DiscKind::ALL {
                let dv = DiscVars::load(tape, &fx.disc, kind)?;
                let fake = discs.score(tape, &dv, &preds, &fake_full)?;
                adv.push(gen_adv_loss(tape, &fake)?);
            }
            total_gen_loss(tape, lg, &adv, &lambda)
        },
        &fx.gen,
        h,
    )?;
    out.push(GradientCheck {
        objective: "generator: predictive + adversarial loss".into(),
        report,
    });

    let fake_values: Vec<Snapshot> = {
        let tape = Tape::new();
        let preds = fx.rollout(&tape, &fx.gen, &gb)?;
        preds
            .iter()
            .map(|p| [tape.value(p[0]).clone(), tape.value(p[1]).clone()])
            .collect()
    };
    for kind in DiscKind::ALL {
        let own = fx.disc.subset(&format!("{}.", kind.prefix()));
        let report = grad_check(
            |tape: &Tape, store: &ParamStore| {
                let history = constants(tape, &fx.batch.history);
                let real_future = constants(tape, &fx.batch.future);
                let fake_future = constants(tape, &fake_values);
                let real_full: Vec<[Var; 2]> = history.iter().chain(&real_future).copied().collect();
                let fake_full: Vec<[Var; 2]> = history.iter().chain(&fake_future).copied().collect();
                let dv = DiscVars::load(tape, store, kind)?;
                let real = discs.score(tape, &dv, &real_future, &real_full)?;
                let fake = discs.score(tape, &dv, &fake_future, &fake_full)?;
                disc_loss(tape, &real, &fake)
            },
            &own,
            h,
        )?;
        out.push(GradientCheck {
            objective: format!("{kind} discriminator loss"),
            report,
        });
    }
    Ok(out)
}
