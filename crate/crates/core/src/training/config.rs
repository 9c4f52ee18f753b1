use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adversarial::{DiscConfig, DiscKind};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::geo::StationKind;
use crate::model::GeneratorConfig;

/// A component removed from (or simplified in) the full training scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    NoSpatialDisc,
    NoTemporalDisc,
    NoMacroDisc,
    NoAdversarial,
    /// Weights computed on the first iteration are kept for the whole run.
    FixedWeights,
    /// Every active discriminator gets the same weight.
    AvgWeights,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::NoSpatialDisc,
        Ablation::NoTemporalDisc,
        Ablation::NoMacroDisc,
        Ablation::NoAdversarial,
        Ablation::FixedWeights,
        Ablation::AvgWeights,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::NoSpatialDisc => "no-spatial-disc",
            Ablation::NoTemporalDisc => "no-temporal-disc",
            Ablation::NoMacroDisc => "no-macro-disc",
            Ablation::NoAdversarial => "no-adversarial",
            Ablation::FixedWeights => "fixed-weights",
            Ablation::AvgWeights => "avg-weights",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Ablation::ALL.iter().map(|a| a.as_str()).collect();
                Error::config(format!(
                    "unknown ablation {s:?}; valid names are {}",
                    names.join(", ")
                ))
            })
    }
}

/// How a discriminator's real and fake hidden summaries become γ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GammaMode {
    /// Mean Euclidean distance between `σ(H)` and `σ(Ĥ)`.
    Divergence,
    /// `1 / (1 + distance)`.
    Similarity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub d: usize,
    pub layers: usize,
    pub epsilon_km: f64,
    /// History length `T`.
    pub history: usize,
    /// Forecast horizon `τ`.
    pub horizon: usize,
    pub lr: f64,
    /// Discriminator learning rate; `None` uses `lr`.
    pub disc_lr: Option<f64>,
    /// Cap on the joint gradient norm of each update; `None` disables it.
    pub grad_clip: Option<f64>,
    pub mlp_hidden: usize,
    pub head_hidden: usize,
    /// Add the decoder input to the head output.
    pub residual_head: bool,
    pub leaky_alpha: f64,
    pub epochs: usize,
    pub batch_windows: usize,
    /// Cap on batches per epoch; `None` visits every training window.
    pub max_batches_per_epoch: Option<usize>,
    /// Stride between evaluation windows.
    pub eval_stride: usize,
    pub seed: u64,
    /// Teacher-forcing probability, interpolated linearly over epochs.
    pub teacher_ratio_start: f64,
    pub teacher_ratio_end: f64,
    pub disc_steps_per_gen_step: usize,
    pub gamma_mode: GammaMode,
    pub ablations: Vec<Ablation>,
    /// Std of Gaussian noise added to normalized training observations.
    pub train_noise_std: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            d: 64,
            layers: 2,
            epsilon_km: 15.0,
            history: 72,
            horizon: 48,
            lr: 1e-5,
            disc_lr: None,
            grad_clip: Some(1.0),
            mlp_hidden: 64,
            head_hidden: 64,
            residual_head: true,
            leaky_alpha: 0.2,
            epochs: 10,
            batch_windows: 16,
            max_batches_per_epoch: None,
            eval_stride: 1,
            seed: 0,
            teacher_ratio_start: 0.5,
            teacher_ratio_end: 0.0,
            disc_steps_per_gen_step: 1,
            gamma_mode: GammaMode::Divergence,
            ablations: Vec::new(),
            train_noise_std: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d),
            ("layers", self.layers),
            ("history", self.history),
            ("horizon", self.horizon),
            ("mlp_hidden", self.mlp_hidden),
            ("head_hidden", self.head_hidden),
            ("batch_windows", self.batch_windows),
            ("eval_stride", self.eval_stride),
            ("disc_steps_per_gen_step", self.disc_steps_per_gen_step),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.max_batches_per_epoch == Some(0) {
            return Err(Error::config("max_batches_per_epoch must be positive when set"));
        }
        if !(self.epsilon_km > 0.0) {
            return Err(Error::config("epsilon_km must be positive"));
        }
        if !(self.lr > 0.0) || self.disc_lr.is_some_and(|l| !(l > 0.0)) {
            return Err(Error::config("learning rates must be positive"));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::config("grad_clip must be positive when set"));
        }
        if !(self.leaky_alpha > 0.0 && self.leaky_alpha < 1.0) {
            return Err(Error::config("leaky_alpha must lie in (0, 1)"));
        }
        for (name, r) in [
            ("teacher_ratio_start", self.teacher_ratio_start),
            ("teacher_ratio_end", self.teacher_ratio_end),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::config(format!("{name} must lie in [0, 1], got {r}")));
            }
        }
        if !(self.train_noise_std >= 0.0) {
            return Err(Error::config("train_noise_std must be non-negative"));
        }
        if self.ablations.contains(&Ablation::FixedWeights) && self.ablations.contains(&Ablation::AvgWeights) {
            return Err(Error::config("fixed-weights and avg-weights are mutually exclusive"));
        }
        Ok(())
    }

    pub fn has(&self, a: Ablation) -> bool {
        self.ablations.contains(&a)
    }

    /// Discriminators that take part in training, in canonical order.
    pub fn active_discriminators(&self) -> Vec<DiscKind> {
        if self.has(Ablation::NoAdversarial) {
            return Vec::new();
        }
        DiscKind::ALL
            .into_iter()
            .filter(|k| {
                !self.has(match k {
                    DiscKind::Spatial => Ablation::NoSpatialDisc,
                    DiscKind::Temporal => Ablation::NoTemporalDisc,
                    DiscKind::Macro => Ablation::NoMacroDisc,
                })
            })
            .collect()
    }

    pub fn disc_lr(&self) -> f64 {
        self.disc_lr.unwrap_or(self.lr)
    }

    pub fn teacher_ratio(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.teacher_ratio_start;
        }
        let f = epoch as f64 / (self.epochs - 1) as f64;
        self.teacher_ratio_start + (self.teacher_ratio_end - self.teacher_ratio_start) * f
    }

    pub fn generator_config(&self, ds: &Dataset) -> GeneratorConfig {
        GeneratorConfig {
            d: self.d,
            layers: self.layers,
            d_air: ds.dim(StationKind::Air),
            d_weather: ds.dim(StationKind::Weather),
            c_dim: ds.context_dim(),
            head_hidden: self.head_hidden,
            residual: self.residual_head,
            leaky_alpha: self.leaky_alpha,
        }
    }

    pub fn disc_config(&self, ds: &Dataset) -> DiscConfig {
        DiscConfig {
            d: self.d,
            mlp_hidden: self.mlp_hidden,
            d_air: ds.dim(StationKind::Air),
            d_weather: ds.dim(StationKind::Weather),
            c_dim: ds.context_dim(),
            leaky_alpha: self.leaky_alpha,
            station_ids: ds.stations.iter().map(|s| s.id.clone()).collect(),
            air_stations: ds.count(StationKind::Air),
            weather_stations: ds.count(StationKind::Weather),
        }
    }
}
