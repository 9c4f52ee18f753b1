//! Heterogeneous station graph: typed directed edges between stations closer
//! than a distance threshold.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EARTH_RADIUS_KM: f64 = 6371.0088;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StationKind {
    Air,
    Weather,
}

impl StationKind {
    pub const ALL: [StationKind; 2] = [StationKind::Air, StationKind::Weather];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StationKind::Air => "air",
            StationKind::Weather => "weather",
        }
    }
}

impl fmt::Display for StationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Edge relation, named source→target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Relation {
    AirToAir,
    WeatherToWeather,
    AirToWeather,
    WeatherToAir,
}

impl Relation {
    /// Fixed order used for attention blocks and their concatenation.
    pub const ALL: [Relation; 4] = [
        Relation::AirToAir,
        Relation::WeatherToWeather,
        Relation::AirToWeather,
        Relation::WeatherToAir,
    ];

    pub fn between(source: StationKind, target: StationKind) -> Relation {
        use StationKind::*;
        match (source, target) {
            (Air, Air) => Relation::AirToAir,
            (Weather, Weather) => Relation::WeatherToWeather,
            (Air, Weather) => Relation::AirToWeather,
            (Weather, Air) => Relation::WeatherToAir,
        }
    }

    pub fn source(self) -> StationKind {
        match self {
            Relation::AirToAir | Relation::AirToWeather => StationKind::Air,
            Relation::WeatherToWeather | Relation::WeatherToAir => StationKind::Weather,
        }
    }

    pub fn target(self) -> StationKind {
        match self {
            Relation::AirToAir | Relation::WeatherToAir => StationKind::Air,
            Relation::WeatherToWeather | Relation::AirToWeather => StationKind::Weather,
        }
    }

    pub fn is_homogeneous(self) -> bool {
        self.source() == self.target()
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Relation::AirToAir => "air->air",
            Relation::WeatherToWeather => "weather->weather",
            Relation::AirToWeather => "air->weather",
            Relation::WeatherToAir => "weather->air",
        }
    }

    /// Short identifier usable inside parameter names.
    pub fn key(self) -> &'static str {
        match self {
            Relation::AirToAir => "aa",
            Relation::WeatherToWeather => "ww",
            Relation::AirToWeather => "aw",
            Relation::WeatherToAir => "wa",
        }
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Relation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Relation::ALL
            .into_iter()
            .find(|r| r.as_str() == s || r.key() == s)
            .ok_or_else(|| {
                Error::contract(format!(
                    "unknown relation {s:?}; expected one of air->air, weather->weather, air->weather, weather->air"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Station {
    pub id: String,
    pub kind: StationKind,
    pub lat: f64,
    pub lon: f64,
    pub context: Vec<f64>,
}

fn check_coords(lat: f64, lon: f64) -> Result<()> {
    if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
        return Err(Error::validation(format!(
            "coordinates out of range: lat={lat}, lon={lon}"
        )));
    }
    Ok(())
}

/// Great-circle distance in kilometres between two `(lat, lon)` points in degrees.
pub fn haversine_distance(a: (f64, f64), b: (f64, f64)) -> Result<f64> {
    check_coords(a.0, a.1)?;
    check_coords(b.0, b.1)?;
    let (p1, p2) = (a.0.to_radians(), b.0.to_radians());
    let dphi = p2 - p1;
    let dlambda = (b.1 - a.1).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dlambda / 2.0).sin().powi(2);
    Ok(2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub source: usize,
    pub km: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeteroStationGraph {
    stations: Vec<Station>,
    epsilon_km: f64,
    /// `adjacency[relation][target]`, sorted by distance then source id.
    adjacency: [Vec<Vec<Neighbor>>; 4],
}

pub fn validate_stations(stations: &[Station]) -> Result<()> {
    let mut seen = HashSet::new();
    for s in stations {
        if !seen.insert(s.id.as_str()) {
            return Err(Error::validation(format!("duplicate station id {:?}", s.id)));
        }
        check_coords(s.lat, s.lon)?;
        if s.context.iter().any(|x| !x.is_finite()) {
            return Err(Error::validation(format!(
                "station {:?} has a non-finite context feature",
                s.id
            )));
        }
    }
    if let Some(first) = stations.first() {
        if let Some(bad) = stations
            .iter()
            .find(|s| s.context.len() != first.context.len())
        {
            return Err(Error::validation(format!(
                "station {:?} has context dimension {} but {:?} has {}",
                bad.id,
                bad.context.len(),
                first.id,
                first.context.len()
            )));
        }
    }
    Ok(())
}

/// Build the graph: an edge `j → i` exists under relation
/// `(kind(j), kind(i))` iff `d(i, j) < ε`, plus a zero-distance self-loop
/// on each station's homogeneous relation.
pub fn build_hsg(stations: Vec<Station>, epsilon_km: f64) -> Result<HeteroStationGraph> {
    if !(epsilon_km > 0.0) || !epsilon_km.is_finite() {
        return Err(Error::config(format!(
            "distance threshold must be positive, got {epsilon_km}"
        )));
    }
    validate_stations(&stations)?;
    for kind in StationKind::ALL {
        if !stations.iter().any(|s| s.kind == kind) {
            log::warn!("station graph has no {kind} stations");
        }
    }

    let n = stations.len();
    let mut adjacency: [Vec<Vec<Neighbor>>; 4] = Default::default();
    for rel in &mut adjacency {
        *rel = vec![Vec::new(); n];
    }
    for (i, target) in stations.iter().enumerate() {
        for (j, source) in stations.iter().enumerate() {
            let rel = Relation::between(source.kind, target.kind);
            let km = if i == j {
                0.0
            } else {
                haversine_distance((target.lat, target.lon), (source.lat, source.lon))?
            };
            if i == j || km < epsilon_km {
                adjacency[rel.index()][i].push(Neighbor { source: j, km });
            }
        }
        for rel in &mut adjacency {
            rel[i].sort_by(|a, b| {
                a.km.total_cmp(&b.km)
                    .then_with(|| stations[a.source].id.cmp(&stations[b.source].id))
            });
        }
    }
    Ok(HeteroStationGraph {
        stations,
        epsilon_km,
        adjacency,
    })
}

impl HeteroStationGraph {
    pub fn stations(&self) -> &[Station] {
        &self.stations
    }

    pub fn epsilon_km(&self) -> f64 {
        self.epsilon_km
    }

    pub fn len(&self) -> usize {
        self.stations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stations.is_empty()
    }

    pub fn context_dim(&self) -> usize {
        self.stations.first().map_or(0, |s| s.context.len())
    }

    /// Global indices of the stations of `kind`, in station order.
    pub fn indices_of(&self, kind: StationKind) -> Vec<usize> {
        self.stations
            .iter()
            .enumerate()
            .filter(|(_, s)| s.kind == kind)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn count(&self, kind: StationKind) -> usize {
        self.stations.iter().filter(|s| s.kind == kind).count()
    }

    pub fn neighbors(&self, i: usize, r: Relation) -> Result<&[Neighbor]> {
        self.adjacency[r.index()]
            .get(i)
            .map(Vec::as_slice)
            .ok_or_else(|| {
                Error::contract(format!(
                    "station index {i} out of range for {} stations",
                    self.stations.len()
                ))
            })
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().flatten().map(Vec::len).sum()
    }

    /// Hop distance between stations ignoring edge types (BFS on the
    /// undirected skeleton). `None` when disconnected.
    pub fn hops(&self, from: usize, to: usize) -> Option<usize> {
        let n = self.len();
        let mut dist = vec![usize::MAX; n];
        let mut queue = std::collections::VecDeque::from([from]);
        dist[from] = 0;
        while let Some(u) = queue.pop_front() {
            for rel in &self.adjacency {
                for nb in &rel[u] {
                    if dist[nb.source] == usize::MAX {
                        dist[nb.source] = dist[u] + 1;
                        queue.push_back(nb.source);
                    }
                }
            }
        }
        (dist[to] != usize::MAX).then_some(dist[to])
    }

    pub fn to_export(&self) -> GraphExport {
        let mut edges = Vec::new();
        for rel in Relation::ALL {
            for (i, list) in self.adjacency[rel.index()].iter().enumerate() {
                for nb in list {
                    edges.push(EdgeRecord {
                        src: self.stations[nb.source].id.clone(),
                        dst: self.stations[i].id.clone(),
                        relation: rel.as_str().to_string(),
                        km: nb.km,
                    });
                }
            }
        }
        GraphExport {
            epsilon_km: self.epsilon_km,
            edges,
        }
    }

    /// Rebuild a graph from an export plus the station list it refers to.
    pub fn from_export(stations: Vec<Station>, export: &GraphExport) -> Result<Self> {
        validate_stations(&stations)?;
        let index: std::collections::HashMap<&str, usize> = stations
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id.as_str(), i))
            .collect();
        let n = stations.len();
        let mut adjacency: [Vec<Vec<Neighbor>>; 4] = Default::default();
        for rel in &mut adjacency {
            *rel = vec![Vec::new(); n];
        }
        for e in &export.edges {
            let rel: Relation = e.relation.parse()?;
            let lookup = |id: &str| {
                index
                    .get(id)
                    .copied()
                    .ok_or_else(|| Error::data(format!("edge refers to unknown station {id:?}")))
            };
            let (src, dst) = (lookup(&e.src)?, lookup(&e.dst)?);
            if stations[src].kind != rel.source() || stations[dst].kind != rel.target() {
                return Err(Error::data(format!(
                    "edge {} -> {} does not match relation {rel}",
                    e.src, e.dst
                )));
            }
            adjacency[rel.index()][dst].push(Neighbor { source: src, km: e.km });
        }
        Ok(HeteroStationGraph {
            stations,
            epsilon_km: export.epsilon_km,
            adjacency,
        })
    }

    /// Same graph with stations reordered: new station `k` is old station `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let stations = perm.iter().map(|&p| self.stations[p].clone()).collect();
        HeteroStationGraph::from_export(stations, &self.to_export())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeRecord {
    pub src: String,
    pub dst: String,
    pub relation: String,
    pub km: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphExport {
    pub epsilon_km: f64,
    pub edges: Vec<EdgeRecord>,
}

pub fn read_stations(path: &Path) -> Result<Vec<Station>> {
    let text = std::fs::read_to_string(path)?;
    let stations: Vec<Station> = serde_json::from_str(&text)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    validate_stations(&stations)?;
    Ok(stations)
}

pub fn write_stations(path: &Path, stations: &[Station]) -> Result<()> {
    let mut text = serde_json::to_string_pretty(stations)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}
