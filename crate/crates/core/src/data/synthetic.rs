//! Seeded synthetic city: a box of air and weather stations whose pollutant
//! fields diffuse between nearby sites, are emitted according to each site's
//! context, and are flushed out by a latent regional wind.

use chrono::{DateTime, TimeZone, Utc};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::geo::{haversine_distance, Station, StationKind, EARTH_RADIUS_KM};

pub const AIR_VARIABLES: [&str; 6] = ["pm25", "pm10", "o3", "no2", "so2", "co"];
pub const WEATHER_VARIABLES: [&str; 4] = ["temperature", "humidity", "wind_speed", "pressure"];

/// Every knob of the simulator. Serialized verbatim into the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub air_stations: usize,
    pub weather_stations: usize,
    pub steps: usize,
    pub context_dim: usize,
    pub center_lat: f64,
    pub center_lon: f64,
    pub box_km: f64,
    pub start: DateTime<Utc>,
    /// Steps simulated and discarded before the first recorded one.
    pub burn_in: usize,
    pub period: f64,
    /// Radius within which air stations average each other's fields.
    pub diffusion_radius_km: f64,
    pub diffusion_rho: f64,
    /// Dissipation rate per unit wind speed.
    pub dissipation_kappa: f64,
    pub emission_scale: f64,
    /// Relative amplitude of the daily emission cycle.
    pub emission_daily_amplitude: f64,
    pub air_noise_std: f64,
    pub wind_amplitude: f64,
    pub wind_base_speed: f64,
    pub wind_ar: f64,
    pub wind_noise_std: f64,
    pub weather_regional_ar: f64,
    pub weather_regional_std: f64,
    pub weather_local_ar: f64,
    pub weather_local_std: f64,
    /// Per pollutant: background level and unit scale.
    pub air_background: Vec<f64>,
    pub air_scale: Vec<f64>,
    /// Per weather variable except wind speed: mean, daily amplitude, phase
    /// (in steps) and noise scale.
    pub weather_mean: Vec<f64>,
    pub weather_daily_amplitude: Vec<f64>,
    pub weather_phase: Vec<f64>,
    pub weather_scale: Vec<f64>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            seed: 42,
            air_stations: 8,
            weather_stations: 4,
            steps: 2000,
            context_dim: 8,
            center_lat: 39.9,
            center_lon: 116.4,
            box_km: 40.0,
            start: Utc.with_ymd_and_hms(2018, 1, 1, 0, 0, 0).unwrap(),
            burn_in: 96,
            period: 24.0,
            diffusion_radius_km: 15.0,
            diffusion_rho: 0.3,
            dissipation_kappa: 0.04,
            emission_scale: 0.5,
            emission_daily_amplitude: 0.6,
            air_noise_std: 0.15,
            wind_amplitude: 1.0,
            wind_base_speed: 1.5,
            wind_ar: 0.95,
            wind_noise_std: 0.4,
            weather_regional_ar: 0.9,
            weather_regional_std: 0.3,
            weather_local_ar: 0.7,
            weather_local_std: 0.2,
            air_background: vec![1.0, 1.5, 1.2, 0.8, 0.4, 0.5],
            air_scale: vec![30.0, 40.0, 35.0, 25.0, 15.0, 1.0],
            weather_mean: vec![12.0, 55.0, 0.0, 1013.0],
            weather_daily_amplitude: vec![6.0, -12.0, 0.0, 1.5],
            weather_phase: vec![9.0, 9.0, 0.0, 3.0],
            weather_scale: vec![1.5, 5.0, 0.0, 1.0],
        }
    }
}

/// Coefficients drawn from the seed, recorded next to the configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawnCoefficients {
    /// `[context_dim][pollutant]` non-negative emission loadings.
    pub emission_weights: Vec<Vec<f64>>,
    /// Per-station multiplier on the regional wind speed, air stations first.
    pub wind_site_factor: Vec<f64>,
}

/// Everything needed to regenerate a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub generator: String,
    pub config: SyntheticConfig,
    pub air_variables: Vec<String>,
    pub weather_variables: Vec<String>,
    pub coefficients: DrawnCoefficients,
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.air_stations == 0 || self.weather_stations == 0 {
            return Err(Error::config(format!(
                "the synthetic city needs at least one station of each kind (got {} air, {} weather)",
                self.air_stations, self.weather_stations
            )));
        }
        if self.steps < 2 {
            return Err(Error::config(format!("steps must be at least 2, got {}", self.steps)));
        }
        if self.context_dim == 0 {
            return Err(Error::config("context_dim must be positive"));
        }
        if !(self.box_km > 0.0) || !(self.period > 0.0) || !(self.diffusion_radius_km > 0.0) {
            return Err(Error::config("box_km, period and diffusion_radius_km must be positive"));
        }
        if !(0.0..=1.0).contains(&self.diffusion_rho) {
            return Err(Error::config("diffusion_rho must lie in [0, 1]"));
        }
        let air = AIR_VARIABLES.len();
        let weather = WEATHER_VARIABLES.len();
        if self.air_background.len() != air || self.air_scale.len() != air {
            return Err(Error::config(format!("air_background and air_scale need {air} entries")));
        }
        for v in [
            &self.weather_mean,
            &self.weather_daily_amplitude,
            &self.weather_phase,
            &self.weather_scale,
        ] {
            if v.len() != weather {
                return Err(Error::config(format!("weather coefficient lists need {weather} entries")));
            }
        }
        Ok(())
    }

    /// Require room for at least one `history + horizon` window.
    pub fn require_window(&self, history: usize, horizon: usize) -> Result<()> {
        if self.steps <= history + horizon {
            return Err(Error::config(format!(
                "steps ({}) must exceed history + horizon ({})",
                self.steps,
                history + horizon
            )));
        }
        Ok(())
    }
}

fn place(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let km_per_deg = EARTH_RADIUS_KM * std::f64::consts::PI / 180.0;
    let x = (rng.random::<f64>() - 0.5) * cfg.box_km;
    let y = (rng.random::<f64>() - 0.5) * cfg.box_km;
    let lat = cfg.center_lat + y / km_per_deg;
    let lon = cfg.center_lon + x / (km_per_deg * cfg.center_lat.to_radians().cos());
    (lat, lon)
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn daily(cfg: &SyntheticConfig, t: f64, phase: f64) -> f64 {
    (2.0 * std::f64::consts::PI * (t - phase) / cfg.period).sin()
}

/// Run the simulator. The returned dataset is in physical units.
pub fn generate(cfg: &SyntheticConfig) -> Result<(Dataset, Manifest)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (m, n, c) = (cfg.air_stations, cfg.weather_stations, cfg.context_dim);

    let mut stations = Vec::with_capacity(m + n);
    for (kind, count, tag) in [(StationKind::Air, m, 'A'), (StationKind::Weather, n, 'W')] {
        for i in 0..count {
            let (lat, lon) = place(cfg, &mut rng);
            let context = (0..c).map(|_| rng.random::<f64>()).collect();
            stations.push(Station {
                id: format!("{tag}{i:03}"),
                kind,
                lat,
                lon,
                context,
            });
        }
    }

    let pollutants = AIR_VARIABLES.len();
    let emission_weights: Vec<Vec<f64>> = (0..c)
        .map(|_| (0..pollutants).map(|_| rng.random::<f64>()).collect())
        .collect();
    let wind_site_factor: Vec<f64> = (0..m + n).map(|_| 0.7 + 0.6 * rng.random::<f64>()).collect();

    // Air-station diffusion neighborhoods (self included).
    let mut neighbors = vec![Vec::new(); m];
    for i in 0..m {
        for j in 0..m {
            let a = (stations[i].lat, stations[i].lon);
            let b = (stations[j].lat, stations[j].lon);
            if haversine_distance(a, b)? <= cfg.diffusion_radius_km {
                neighbors[i].push(j);
            }
        }
    }
    // Per-site emission rate of each pollutant, normalized by context width.
    let emission: Array2<f64> = Array2::from_shape_fn((m, pollutants), |(i, v)| {
        let load: f64 = (0..c).map(|k| stations[i].context[k] * emission_weights[k][v]).sum();
        cfg.emission_scale * load / c as f64
    });

    let total = cfg.burn_in + cfg.steps;
    let mut air = Array3::zeros((cfg.steps, m, pollutants));
    let mut weather = Array3::zeros((cfg.steps, n, WEATHER_VARIABLES.len()));

    let mut x = Array2::from_shape_fn((m, pollutants), |(_, v)| cfg.air_background[v]);
    let mut wind = [0.0f64; 2];
    let mut regional = [0.0f64; 4];
    let mut local = Array2::<f64>::zeros((n, 4));
    let wind_std = cfg.wind_noise_std * (1.0 - cfg.wind_ar * cfg.wind_ar).sqrt();
    let reg_std = cfg.weather_regional_std * (1.0 - cfg.weather_regional_ar.powi(2)).sqrt();
    let loc_std = cfg.weather_local_std * (1.0 - cfg.weather_local_ar.powi(2)).sqrt();

    for step in 0..total {
        let t = step as f64;
        for w in wind.iter_mut() {
            *w = cfg.wind_ar * *w + wind_std * normal(&mut rng);
        }
        let regional_speed = cfg.wind_amplitude * (cfg.wind_base_speed + wind[0].hypot(wind[1]));
        for r in regional.iter_mut() {
            *r = cfg.weather_regional_ar * *r + reg_std * normal(&mut rng);
        }
        for l in local.iter_mut() {
            *l = cfg.weather_local_ar * *l + loc_std * normal(&mut rng);
        }

        let cycle = 1.0 + cfg.emission_daily_amplitude * daily(cfg, t, 6.0);
        let mut next = x.clone();
        for i in 0..m {
            let speed = regional_speed * wind_site_factor[i];
            for v in 0..pollutants {
                let mean = neighbors[i].iter().map(|&j| x[[j, v]]).sum::<f64>()
                    / neighbors[i].len() as f64;
                let cur = x[[i, v]];
                let diffused = (1.0 - cfg.diffusion_rho) * cur + cfg.diffusion_rho * mean;
                let flushed = cfg.dissipation_kappa * speed * (cur - cfg.air_background[v]);
                let noise = cfg.air_noise_std * normal(&mut rng);
                next[[i, v]] = diffused + emission[[i, v]] * cycle - flushed + noise;
            }
        }
        x = next;

        if step < cfg.burn_in {
            continue;
        }
        let s = step - cfg.burn_in;
        for i in 0..m {
            for v in 0..pollutants {
                air[[s, i, v]] = cfg.air_scale[v] * x[[i, v]];
            }
        }
        for j in 0..n {
            for v in 0..WEATHER_VARIABLES.len() {
                weather[[s, j, v]] = if WEATHER_VARIABLES[v] == "wind_speed" {
                    (regional_speed * wind_site_factor[m + j] * (1.0 + 0.1 * local[[j, v]])).max(0.0)
                } else {
                    cfg.weather_mean[v]
                        + cfg.weather_daily_amplitude[v] * daily(cfg, t, cfg.weather_phase[v])
                        + cfg.weather_scale[v] * (regional[v] + local[[j, v]])
                };
            }
        }
    }

    let variables = [
        AIR_VARIABLES.iter().map(|s| s.to_string()).collect::<Vec<_>>(),
        WEATHER_VARIABLES.iter().map(|s| s.to_string()).collect::<Vec<_>>(),
    ];
    let manifest = Manifest {
        generator: "synthetic-city/1".into(),
        config: cfg.clone(),
        air_variables: variables[0].clone(),
        weather_variables: variables[1].clone(),
        coefficients: DrawnCoefficients {
            emission_weights,
            wind_site_factor,
        },
    };
    let ds = Dataset {
        stations,
        start: cfg.start,
        variables,
        series: [air, weather],
    };
    ds.validate()?;
    Ok((ds, manifest))
}
