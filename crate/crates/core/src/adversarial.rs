//! Spatial, temporal and city-wide discriminators and their losses.
//!
//! Each discriminator ends in a two-layer perceptron and reports both its
//! logit and the perceptron's hidden layer, which the adaptive weighting in
//! [`crate::training`] compares between real and generated samples.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{HeteroStationGraph, StationKind};
use crate::model::chat::{chat_layer, init_chat_layer, ChatLayerVars};
use crate::model::gru::{gru_step, init_gru, GruVars};
use crate::model::GraphBatch;
use crate::tensor::{ParamStore, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiscKind {
    Spatial,
    Temporal,
    Macro,
}

impl DiscKind {
    pub const ALL: [DiscKind; 3] = [DiscKind::Spatial, DiscKind::Temporal, DiscKind::Macro];

    pub fn as_str(self) -> &'static str {
        match self {
            DiscKind::Spatial => "spatial",
            DiscKind::Temporal => "temporal",
            DiscKind::Macro => "macro",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn prefix(self) -> String {
        format!("disc.{}", self.as_str())
    }
}

impl fmt::Display for DiscKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DiscKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DiscKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown discriminator {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscConfig {
    pub d: usize,
    pub mlp_hidden: usize,
    pub d_air: usize,
    pub d_weather: usize,
    pub c_dim: usize,
    pub leaky_alpha: f64,
    /// Station ids in dataset order; fixes the city-wide input layout.
    pub station_ids: Vec<String>,
    pub air_stations: usize,
    pub weather_stations: usize,
}

impl DiscConfig {
    pub fn obs_dim(&self, kind: StationKind) -> usize {
        match kind {
            StationKind::Air => self.d_air,
            StationKind::Weather => self.d_weather,
        }
    }

    fn city_width(&self) -> usize {
        self.air_stations * self.d_air + self.weather_stations * self.d_weather
    }
}

fn init_mlp<R: Rng>(s: &mut ParamStore, prefix: &str, input: usize, hidden: usize, rng: &mut R) -> Result<()> {
    let b1 = 1.0 / (input as f64).sqrt();
    let b2 = 1.0 / (hidden as f64).sqrt();
    s.insert_uniform(format!("{prefix}.w1"), input, hidden, b1, rng)?;
    s.insert_uniform(format!("{prefix}.b1"), 1, hidden, b1, rng)?;
    s.insert_uniform(format!("{prefix}.w2"), hidden, 1, b2, rng)?;
    s.insert_uniform(format!("{prefix}.b2"), 1, 1, b2, rng)?;
    Ok(())
}

/// Fresh parameters for all three discriminators, under `disc.*`.
pub fn init_discriminators<R: Rng>(cfg: &DiscConfig, rng: &mut R) -> Result<ParamStore> {
    let d = cfg.d;
    let bound = 1.0 / (d as f64).sqrt();
    let mut s = ParamStore::new();

    let p = DiscKind::Spatial.prefix();
    for kind in StationKind::ALL {
        s.insert_uniform(format!("{p}.embed.{kind}"), cfg.obs_dim(kind), d, bound, rng)?;
    }
    init_chat_layer(&mut s, &format!("{p}.chat"), d, cfg.c_dim, rng)?;
    init_mlp(&mut s, &format!("{p}.mlp"), d, cfg.mlp_hidden, rng)?;

    let p = DiscKind::Temporal.prefix();
    for kind in StationKind::ALL {
        s.insert_uniform(format!("{p}.in.{kind}.w"), cfg.obs_dim(kind), d, bound, rng)?;
        s.insert_uniform(format!("{p}.in.{kind}.b"), 1, d, bound, rng)?;
    }
    init_gru(&mut s, &format!("{p}.gru"), d, d, rng)?;
    init_mlp(&mut s, &format!("{p}.mlp"), d, cfg.mlp_hidden, rng)?;

    let p = DiscKind::Macro.prefix();
    let w = cfg.city_width();
    s.insert_uniform(format!("{p}.in.w"), w, d, 1.0 / (w as f64).sqrt(), rng)?;
    s.insert_uniform(format!("{p}.in.b"), 1, d, bound, rng)?;
    init_gru(&mut s, &format!("{p}.gru"), d, d, rng)?;
    init_mlp(&mut s, &format!("{p}.mlp"), d, cfg.mlp_hidden, rng)?;
    Ok(s)
}

#[derive(Debug, Clone, Copy)]
pub struct MlpVars {
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

impl MlpVars {
    fn load(tape: &Tape, store: &ParamStore, prefix: &str) -> Result<Self> {
        let v = |n: &str| store.var(tape, &format!("{prefix}.{n}"));
        Ok(MlpVars {
            w1: v("w1")?,
            b1: v("b1")?,
            w2: v("w2")?,
            b2: v("b2")?,
        })
    }

    fn apply(&self, tape: &Tape, x: Var, alpha: f64) -> Result<DiscOutput> {
        let hidden = tape.leaky_relu(tape.add_row(tape.matmul(x, self.w1)?, self.b1)?, alpha);
        let logits = tape.add_row(tape.matmul(hidden, self.w2)?, self.b2)?;
        Ok(DiscOutput { logits, hidden })
    }
}

/// Logit `[N×1]` and perceptron hidden layer `[N×mlp_hidden]` for `N` samples.
#[derive(Debug, Clone, Copy)]
pub struct DiscOutput {
    pub logits: Var,
    pub hidden: Var,
}

/// Discriminator weights recorded on one tape.
#[derive(Debug, Clone)]
pub enum DiscVars {
    Spatial {
        embed: [Var; 2],
        chat: ChatLayerVars,
        mlp: MlpVars,
    },
    Temporal {
        input: [(Var, Var); 2],
        gru: GruVars,
        mlp: MlpVars,
    },
    Macro {
        input: (Var, Var),
        gru: GruVars,
        mlp: MlpVars,
    },
}

impl DiscVars {
    pub fn load(tape: &Tape, store: &ParamStore, kind: DiscKind) -> Result<Self> {
        let p = kind.prefix();
        let v = |n: &str| store.var(tape, &format!("{p}.{n}"));
        let mlp = MlpVars::load(tape, store, &format!("{p}.mlp"))?;
        Ok(match kind {
            DiscKind::Spatial => DiscVars::Spatial {
                embed: [v("embed.air")?, v("embed.weather")?],
                chat: ChatLayerVars::load(tape, store, &format!("{p}.chat"))?,
                mlp,
            },
            DiscKind::Temporal => DiscVars::Temporal {
                input: [
                    (v("in.air.w")?, v("in.air.b")?),
                    (v("in.weather.w")?, v("in.weather.b")?),
                ],
                gru: GruVars::load(tape, store, &format!("{p}.gru"))?,
                mlp,
            },
            DiscKind::Macro => DiscVars::Macro {
                input: (v("in.w")?, v("in.b")?),
                gru: GruVars::load(tape, store, &format!("{p}.gru"))?,
                mlp,
            },
        })
    }

    pub fn kind(&self) -> DiscKind {
        match self {
            DiscVars::Spatial { .. } => DiscKind::Spatial,
            DiscVars::Temporal { .. } => DiscKind::Temporal,
            DiscVars::Macro { .. } => DiscKind::Macro,
        }
    }
}

/// A batch of `copies` windows over one station graph, seen by the discriminators.
pub struct Discriminators<'a> {
    pub cfg: &'a DiscConfig,
    pub graph: &'a HeteroStationGraph,
    pub windows: usize,
}

impl<'a> Discriminators<'a> {
    pub fn new(cfg: &'a DiscConfig, graph: &'a HeteroStationGraph, windows: usize) -> Result<Self> {
        let ids: Vec<&str> = graph.stations().iter().map(|s| s.id.as_str()).collect();
        if ids != cfg.station_ids.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::data(
                "station ordering differs from the ordering the discriminators were built for",
            ));
        }
        Ok(Discriminators { cfg, graph, windows })
    }

    fn rows(&self, kind: StationKind) -> usize {
        self.windows
            * match kind {
                StationKind::Air => self.cfg.air_stations,
                StationKind::Weather => self.cfg.weather_stations,
            }
    }

    fn check_step(&self, tape: &Tape, step: &[Var; 2], what: &str) -> Result<()> {
        for kind in StationKind::ALL {
            let want = (self.rows(kind), self.cfg.obs_dim(kind));
            let got = tape.shape(step[kind.index()]);
            if got != want {
                return Err(Error::data(format!(
                    "{what}: {kind} input has shape {got:?}, expected {want:?}"
                )));
            }
        }
        Ok(())
    }

    /// Score each future step's city snapshot independently. Samples are
    /// ordered step-major: sample `s·windows + b`.
    pub fn spatial(&self, tape: &Tape, vars: &DiscVars, steps: &[[Var; 2]]) -> Result<DiscOutput> {
        let DiscVars::Spatial { embed, chat, mlp } = vars else {
            return Err(Error::contract("spatial discriminator given other weights"));
        };
        if steps.is_empty() {
            return Err(Error::contract("spatial discriminator needs at least one snapshot"));
        }
        for (s, st) in steps.iter().enumerate() {
            self.check_step(tape, st, &format!("snapshot {s}"))?;
        }
        let copies = steps.len() * self.windows;
        let batch = GraphBatch::new(self.graph, copies);
        let mut x = [steps[0][0], steps[0][1]];
        for k in 0..2 {
            let parts: Vec<Var> = steps.iter().map(|s| s[k]).collect();
            let stacked = tape.concat_rows(&parts)?;
            x[k] = tape.matmul(stacked, embed[k])?;
        }
        let context = [
            tape.constant(batch.context[0].clone()),
            tape.constant(batch.context[1].clone()),
        ];
        let out = chat_layer(tape, chat, &x, &context, &batch, self.cfg.leaky_alpha, None)?;
        let all = tape.concat_rows(&out)?;
        let mut sample = Vec::with_capacity(copies * batch.stations_per_copy());
        for kind in StationKind::ALL {
            let per = batch.counts[kind.index()];
            sample.extend((0..batch.rows(kind)).map(|r| r / per));
        }
        let pooled = tape.scatter_add_rows(all, sample.into(), copies)?;
        let pooled = tape.scale(pooled, 1.0 / batch.stations_per_copy() as f64);
        mlp.apply(tape, pooled, self.cfg.leaky_alpha)
    }

    /// Score every station's sequence. Samples are all air rows then all weather rows.
    pub fn temporal(&self, tape: &Tape, vars: &DiscVars, seq: &[[Var; 2]]) -> Result<DiscOutput> {
        let DiscVars::Temporal { input, gru, mlp } = vars else {
            return Err(Error::contract("temporal discriminator given other weights"));
        };
        if seq.is_empty() {
            return Err(Error::contract("temporal discriminator needs a nonempty sequence"));
        }
        let n = self.rows(StationKind::Air) + self.rows(StationKind::Weather);
        let mut h = tape.constant(Array2::zeros((n, self.cfg.d)));
        for (t, step) in seq.iter().enumerate() {
            self.check_step(tape, step, &format!("sequence step {t}"))?;
            let mut parts = Vec::with_capacity(2);
            for k in 0..2 {
                let (w, b) = input[k];
                parts.push(tape.add_row(tape.matmul(step[k], w)?, b)?);
            }
            let x = tape.concat_rows(&parts)?;
            h = gru_step(tape, gru, h, x)?;
        }
        mlp.apply(tape, h, self.cfg.leaky_alpha)
    }

    /// Column order that lays each window's stations out in dataset order.
    fn city_columns(&self) -> Rc<[usize]> {
        let (m, da, dw) = (self.cfg.air_stations, self.cfg.d_air, self.cfg.d_weather);
        let mut local = [0usize; 2];
        let mut cols = Vec::with_capacity(self.cfg.city_width());
        for s in self.graph.stations() {
            let k = s.kind.index();
            let (base, dim) = match s.kind {
                StationKind::Air => (0, da),
                StationKind::Weather => (m * da, dw),
            };
            cols.extend((0..dim).map(|v| base + local[k] * dim + v));
            local[k] += 1;
        }
        cols.into()
    }

    /// Score each window's whole-city sequence (one sample per window).
    pub fn city(&self, tape: &Tape, vars: &DiscVars, seq: &[[Var; 2]]) -> Result<DiscOutput> {
        let DiscVars::Macro { input, gru, mlp } = vars else {
            return Err(Error::contract("city-wide discriminator given other weights"));
        };
        if seq.is_empty() {
            return Err(Error::contract("city-wide discriminator needs a nonempty sequence"));
        }
        let cols = self.city_columns();
        let b = self.windows;
        let mut h = tape.constant(Array2::zeros((b, self.cfg.d)));
        for (t, step) in seq.iter().enumerate() {
            self.check_step(tape, step, &format!("sequence step {t}"))?;
            let mut parts = Vec::with_capacity(2);
            for kind in StationKind::ALL {
                let k = kind.index();
                let width = self.rows(kind) / b * self.cfg.obs_dim(kind);
                if width > 0 {
                    parts.push(tape.reshape(step[k], b, width)?);
                }
            }
            let flat = tape.concat_cols(&parts)?;
            let ordered = tape.transpose(tape.gather_rows(tape.transpose(flat), cols.clone())?);
            let x = tape.add_row(tape.matmul(ordered, input.0)?, input.1)?;
            h = gru_step(tape, gru, h, x)?;
        }
        mlp.apply(tape, h, self.cfg.leaky_alpha)
    }

    pub fn score(&self, tape: &Tape, vars: &DiscVars, future: &[[Var; 2]], full: &[[Var; 2]]) -> Result<DiscOutput> {
        match vars.kind() {
            DiscKind::Spatial => self.spatial(tape, vars, future),
            DiscKind::Temporal => self.temporal(tape, vars, full),
            DiscKind::Macro => self.city(tape, vars, full),
        }
    }
}

/// Binary cross-entropy with real samples labelled 1 and fake samples 0,
/// averaged over all `2N` samples.
pub fn disc_loss(tape: &Tape, real: &DiscOutput, fake: &DiscOutput) -> Result<Var> {
    let (nr, nf) = (tape.shape(real.logits).0, tape.shape(fake.logits).0);
    if nr == 0 || nf == 0 {
        return Err(Error::contract("discriminator loss on an empty batch"));
    }
    let logits = tape.concat_rows(&[real.logits, fake.logits])?;
    let labels = Array2::from_shape_fn((nr + nf, 1), |(i, _)| if i < nr { 1.0 } else { 0.0 });
    tape.bce_with_logits(logits, Rc::new(labels))
}

/// Non-saturating generator loss: mean of `−ln σ(logit)` over fake samples.
pub fn gen_adv_loss(tape: &Tape, fake: &DiscOutput) -> Result<Var> {
    let n = tape.shape(fake.logits).0;
    if n == 0 {
        return Err(Error::contract("adversarial loss on an empty batch"));
    }
    tape.bce_with_logits(fake.logits, Rc::new(Array2::ones((n, 1))))
}
