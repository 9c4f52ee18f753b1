use std::rc::Rc;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::batch::GraphBatch;
use super::chat::{chat_layer, init_chat_layer, AttentionSnapshot, ChatLayerVars};
use super::gru::{gru_step, init_gru, GruVars};
use crate::error::{Error, Result};
use crate::geo::StationKind;
use crate::tensor::{ParamStore, Tape, Var};

/// Observations of every station at one time step, per kind `[rows × D_k]`.
pub type Snapshot = [Array2<f64>; 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Embedding and GRU width.
    pub d: usize,
    /// Number of stacked attention layers.
    pub layers: usize,
    pub d_air: usize,
    pub d_weather: usize,
    pub c_dim: usize,
    pub head_hidden: usize,
    /// Predict the change from the decoder input instead of the value.
    #[serde(default)]
    pub residual: bool,
    pub leaky_alpha: f64,
}

impl GeneratorConfig {
    pub fn obs_dim(&self, kind: StationKind) -> usize {
        match kind {
            StationKind::Air => self.d_air,
            StationKind::Weather => self.d_weather,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.layers == 0 || self.head_hidden == 0 {
            return Err(Error::config("d, layers and head_hidden must be positive"));
        }
        if self.d_air == 0 || self.d_weather == 0 {
            return Err(Error::config("observation dimensions must be positive"));
        }
        if !(self.leaky_alpha > 0.0 && self.leaky_alpha < 1.0) {
            return Err(Error::config(format!(
                "leaky_alpha must lie in (0, 1), got {}",
                self.leaky_alpha
            )));
        }
        Ok(())
    }
}

/// Fresh generator parameters, uniform in `[-1/√d, 1/√d]`, all under `gen.`.
pub fn init_generator<R: Rng>(cfg: &GeneratorConfig, rng: &mut R) -> Result<ParamStore> {
    cfg.validate()?;
    let mut s = ParamStore::new();
    let d = cfg.d;
    let bound = 1.0 / (d as f64).sqrt();
    for kind in StationKind::ALL {
        s.insert_uniform(format!("gen.embed.{kind}"), cfg.obs_dim(kind), d, bound, rng)?;
    }
    for l in 0..cfg.layers {
        init_chat_layer(&mut s, &format!("gen.chat{l}"), d, cfg.c_dim, rng)?;
    }
    for kind in StationKind::ALL {
        init_gru(&mut s, &format!("gen.gru.{kind}"), d, d, rng)?;
    }
    for kind in StationKind::ALL {
        let p = format!("gen.head.{kind}");
        let h = cfg.head_hidden;
        s.insert_uniform(format!("{p}.w1"), d + cfg.c_dim, h, bound, rng)?;
        s.insert_uniform(format!("{p}.b1"), 1, h, bound, rng)?;
        s.insert_uniform(format!("{p}.w2"), h, cfg.obs_dim(kind), bound, rng)?;
        s.insert_uniform(format!("{p}.b2"), 1, cfg.obs_dim(kind), bound, rng)?;
    }
    Ok(s)
}

#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Generator parameters recorded on one tape.
#[derive(Debug, Clone)]
pub struct GenVars {
    pub embed: [Var; 2],
    pub layers: Vec<ChatLayerVars>,
    pub gru: [GruVars; 2],
    pub head: [HeadVars; 2],
}

impl GenVars {
    pub fn load(tape: &Tape, store: &ParamStore, cfg: &GeneratorConfig) -> Result<Self> {
        let embed = [
            store.var(tape, "gen.embed.air")?,
            store.var(tape, "gen.embed.weather")?,
        ];
        let layers = (0..cfg.layers)
            .map(|l| ChatLayerVars::load(tape, store, &format!("gen.chat{l}")))
            .collect::<Result<Vec<_>>>()?;
        let gru = [
            GruVars::load(tape, store, "gen.gru.air")?,
            GruVars::load(tape, store, "gen.gru.weather")?,
        ];
        let head = StationKind::ALL.map(|kind| -> Result<HeadVars> {
            let p = format!("gen.head.{kind}");
            Ok(HeadVars {
                w1: store.var(tape, &format!("{p}.w1"))?,
                b1: store.var(tape, &format!("{p}.b1"))?,
                w2: store.var(tape, &format!("{p}.w2"))?,
                b2: store.var(tape, &format!("{p}.b2"))?,
            })
        });
        let [h0, h1] = head;
        Ok(GenVars {
            embed,
            layers,
            gru,
            head: [h0?, h1?],
        })
    }
}

/// Hidden state of every station after some number of recurrent steps.
#[derive(Debug, Clone, Copy)]
pub struct ModelState {
    pub hidden: [Var; 2],
    pub step: usize,
}

/// Attention weights of the last attention layer at each rollout step
/// (1-based, counting encoder steps first).
pub type AttentionLog = Vec<(usize, Vec<AttentionSnapshot>)>;

/// Optional ground-truth feeding for the decoder.
pub struct TeacherForcing<'a, R: Rng> {
    pub future: &'a [Snapshot],
    pub ratio: f64,
    pub rng: &'a mut R,
}

/// The recurrent graph generator over one batched station graph.
pub struct Generator<'a> {
    pub cfg: &'a GeneratorConfig,
    pub batch: &'a GraphBatch,
}

impl<'a> Generator<'a> {
    pub fn new(cfg: &'a GeneratorConfig, batch: &'a GraphBatch) -> Self {
        Generator { cfg, batch }
    }

    fn context_vars(&self, tape: &Tape) -> [Var; 2] {
        [
            tape.constant(self.batch.context[0].clone()),
            tape.constant(self.batch.context[1].clone()),
        ]
    }

    pub fn check_snapshot(&self, snap: &Snapshot, what: &str) -> Result<()> {
        for kind in StationKind::ALL {
            let k = kind.index();
            let want = (self.batch.rows(kind), self.cfg.obs_dim(kind));
            let got = (snap[k].nrows(), snap[k].ncols());
            if want != got {
                return Err(Error::data(format!(
                    "{what}: {kind} observations have shape {got:?}, expected {want:?}"
                )));
            }
        }
        Ok(())
    }

    /// Type-specific linear projection `x̃ = x W^ψ` for both kinds.
    pub fn type_transform(&self, tape: &Tape, vars: &GenVars, obs: [Var; 2]) -> Result<[Var; 2]> {
        Ok([
            tape.matmul(obs[0], vars.embed[0])?,
            tape.matmul(obs[1], vars.embed[1])?,
        ])
    }

    /// Embedding followed by every attention layer.
    pub fn spatial(
        &self,
        tape: &Tape,
        vars: &GenVars,
        obs: [Var; 2],
        context: &[Var; 2],
        mut record: Option<&mut Vec<AttentionSnapshot>>,
    ) -> Result<[Var; 2]> {
        let mut x = self.type_transform(tape, vars, obs)?;
        let last = vars.layers.len() - 1;
        for (l, layer) in vars.layers.iter().enumerate() {
            let rec = if l == last { record.as_deref_mut() } else { None };
            x = chat_layer(tape, layer, &x, context, self.batch, self.cfg.leaky_alpha, rec)?;
        }
        Ok(x)
    }

    fn recurrent_step(
        &self,
        tape: &Tape,
        vars: &GenVars,
        state: ModelState,
        obs: [Var; 2],
        context: &[Var; 2],
        log: Option<&mut AttentionLog>,
    ) -> Result<ModelState> {
        let mut snaps = Vec::new();
        let x = self.spatial(
            tape,
            vars,
            obs,
            context,
            log.as_ref().map(|_| &mut snaps),
        )?;
        let hidden = [
            gru_step(tape, &vars.gru[0], state.hidden[0], x[0])?,
            gru_step(tape, &vars.gru[1], state.hidden[1], x[1])?,
        ];
        let step = state.step + 1;
        if let Some(log) = log {
            log.push((step, snaps));
        }
        Ok(ModelState { hidden, step })
    }

    pub fn zero_state(&self, tape: &Tape) -> ModelState {
        ModelState {
            hidden: StationKind::ALL
                .map(|k| tape.constant(Array2::zeros((self.batch.rows(k), self.cfg.d)))),
            step: 0,
        }
    }

    /// Run the encoder over `history` from a zero hidden state.
    pub fn encode(
        &self,
        tape: &Tape,
        vars: &GenVars,
        history: &[Snapshot],
        mut log: Option<&mut AttentionLog>,
    ) -> Result<ModelState> {
        let context = self.context_vars(tape);
        let mut state = self.zero_state(tape);
        for (t, snap) in history.iter().enumerate() {
            self.check_snapshot(snap, &format!("history step {t}"))?;
            let obs = [tape.constant(snap[0].clone()), tape.constant(snap[1].clone())];
            state = self.recurrent_step(tape, vars, state, obs, &context, log.as_deref_mut())?;
        }
        Ok(state)
    }

    /// Kind-specific output head on `[h ‖ c]`, plus `input` when residual.
    pub fn head(
        &self,
        tape: &Tape,
        vars: &GenVars,
        hidden: [Var; 2],
        context: &[Var; 2],
        input: [Var; 2],
    ) -> Result<[Var; 2]> {
        let mut out = hidden;
        for k in 0..2 {
            let hv = &vars.head[k];
            let hc = tape.concat_cols(&[hidden[k], context[k]])?;
            let z = tape.leaky_relu(tape.add_row(tape.matmul(hc, hv.w1)?, hv.b1)?, self.cfg.leaky_alpha);
            out[k] = tape.add_row(tape.matmul(z, hv.w2)?, hv.b2)?;
            if self.cfg.residual {
                out[k] = tape.add(out[k], input[k])?;
            }
        }
        Ok(out)
    }

    /// Autoregressive rollout of `tau` steps from `state`.
    ///
    /// The first decoder input is `last_obs`; afterwards each step consumes
    /// the previous prediction, or, under teacher forcing, the true
    /// observation with probability `ratio` (one uniform draw per step after
    /// the first).
    pub fn decode<R: Rng>(
        &self,
        tape: &Tape,
        vars: &GenVars,
        state: ModelState,
        last_obs: &Snapshot,
        tau: usize,
        mut teacher: Option<TeacherForcing<'_, R>>,
        mut log: Option<&mut AttentionLog>,
    ) -> Result<Vec<[Var; 2]>> {
        if tau == 0 {
            return Err(Error::contract("decoder horizon must be at least 1"));
        }
        self.check_snapshot(last_obs, "last observation")?;
        if let Some(tf) = &teacher {
            if tf.future.len() != tau {
                return Err(Error::contract(format!(
                    "teacher sequence has {} steps, decoder horizon is {tau}",
                    tf.future.len()
                )));
            }
            for (s, snap) in tf.future.iter().enumerate() {
                self.check_snapshot(snap, &format!("teacher step {s}"))?;
            }
        }
        let context = self.context_vars(tape);
        let mut input = [
            tape.constant(last_obs[0].clone()),
            tape.constant(last_obs[1].clone()),
        ];
        let mut state = state;
        let mut preds = Vec::with_capacity(tau);
        for s in 0..tau {
            if s > 0 {
                input = preds[s - 1];
                if let Some(tf) = teacher.as_mut() {
                    let coin: f64 = tf.rng.random();
                    if coin < tf.ratio {
                        let truth = &tf.future[s - 1];
                        input = [tape.constant(truth[0].clone()), tape.constant(truth[1].clone())];
                    }
                }
            }
            state = self.recurrent_step(tape, vars, state, input, &context, log.as_deref_mut())?;
            preds.push(self.head(tape, vars, state.hidden, &context, input)?);
        }
        Ok(preds)
    }

    /// Encode `history` then decode `tau` steps.
    pub fn forward<R: Rng>(
        &self,
        tape: &Tape,
        vars: &GenVars,
        history: &[Snapshot],
        tau: usize,
        teacher: Option<TeacherForcing<'_, R>>,
        mut log: Option<&mut AttentionLog>,
    ) -> Result<Vec<[Var; 2]>> {
        let last = history
            .last()
            .ok_or_else(|| Error::data("history window is empty"))?;
        let state = self.encode(tape, vars, history, log.as_deref_mut())?;
        self.decode(tape, vars, state, last, tau, teacher, log)
    }
}

/// Mean squared error over every station, step and variable.
pub fn predictive_loss(tape: &Tape, preds: &[[Var; 2]], targets: &[Snapshot]) -> Result<Var> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::contract(format!(
            "predictive_loss: {} predicted steps vs {} target steps",
            preds.len(),
            targets.len()
        )));
    }
    let total: usize = targets.iter().map(|t| t[0].len() + t[1].len()).sum();
    let mut terms = Vec::new();
    for (p, t) in preds.iter().zip(targets) {
        for k in 0..2 {
            if t[k].is_empty() {
                if tape.value(p[k]).len() != 0 {
                    return Err(Error::Dimension {
                        op: "predictive_loss",
                        left: tape.shape(p[k]),
                        right: (t[k].nrows(), t[k].ncols()),
                    });
                }
                continue;
            }
            let m = tape.mse(p[k], Rc::new(t[k].clone()))?;
            terms.push(tape.scale(m, t[k].len() as f64 / total as f64));
        }
    }
    let mut loss = terms[0];
    for &t in &terms[1..] {
        loss = tape.add(loss, t)?;
    }
    Ok(loss)
}
