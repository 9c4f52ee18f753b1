//! Station graph replicated over a batch of independent samples.
//!
//! Rows are grouped per station kind. Within a kind, sample `b` occupies rows
//! `b·n_k .. (b+1)·n_k`, in the station order of the underlying graph. Edges
//! never cross samples.

use std::rc::Rc;

use ndarray::Array2;

use crate::geo::{HeteroStationGraph, Relation, StationKind};

#[derive(Debug, Clone)]
pub struct RelationEdges {
    /// Target row (within the target kind) of each edge.
    pub dst: Rc<[usize]>,
    /// Source row (within the source kind) of each edge.
    pub src: Rc<[usize]>,
    /// `d_ij / ε` per edge, `[E×1]`.
    pub dist: Array2<f64>,
}

impl RelationEdges {
    pub fn len(&self) -> usize {
        self.dst.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dst.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct GraphBatch {
    pub copies: usize,
    /// Stations per kind in one copy.
    pub counts: [usize; 2],
    /// Global station index of each local row in one copy, per kind.
    pub globals: [Vec<usize>; 2],
    /// `(kind, local row)` of each global station.
    pub locals: Vec<(StationKind, usize)>,
    /// Context features per kind, `[copies·n_k × C]`.
    pub context: [Array2<f64>; 2],
    pub edges: [RelationEdges; 4],
}

impl GraphBatch {
    pub fn new(graph: &HeteroStationGraph, copies: usize) -> Self {
        let stations = graph.stations();
        let mut globals: [Vec<usize>; 2] = Default::default();
        let mut locals = Vec::with_capacity(stations.len());
        for (g, s) in stations.iter().enumerate() {
            let k = s.kind.index();
            locals.push((s.kind, globals[k].len()));
            globals[k].push(g);
        }
        let counts = [globals[0].len(), globals[1].len()];
        let c_dim = graph.context_dim();
        let context = StationKind::ALL.map(|kind| {
            let k = kind.index();
            Array2::from_shape_fn((copies * counts[k], c_dim), |(row, c)| {
                stations[globals[k][row % counts[k]]].context[c]
            })
        });

        let eps = graph.epsilon_km();
        let edges = Relation::ALL.map(|rel| {
            let (ks, kt) = (rel.source().index(), rel.target().index());
            let mut dst = Vec::new();
            let mut src = Vec::new();
            let mut dist = Vec::new();
            for b in 0..copies {
                for (t_local, &t_global) in globals[kt].iter().enumerate() {
                    let nbrs = graph.neighbors(t_global, rel).expect("index from graph");
                    for nb in nbrs {
                        let s_local = locals[nb.source].1;
                        dst.push(b * counts[kt] + t_local);
                        src.push(b * counts[ks] + s_local);
                        dist.push(nb.km / eps);
                    }
                }
            }
            let e = dist.len();
            RelationEdges {
                dst: dst.into(),
                src: src.into(),
                dist: Array2::from_shape_vec((e, 1), dist).expect("column"),
            }
        });

        GraphBatch {
            copies,
            counts,
            globals,
            locals,
            context,
            edges,
        }
    }

    /// Rows of kind `k` across all copies.
    pub fn rows(&self, kind: StationKind) -> usize {
        self.copies * self.counts[kind.index()]
    }

    pub fn stations_per_copy(&self) -> usize {
        self.counts[0] + self.counts[1]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{build_hsg, Station};

    #[test]
    fn replicated_edges_stay_within_copies() {
        let mk = |id: &str, kind, lat: f64| Station {
            id: id.into(),
            kind,
            lat,
            lon: 0.0,
            context: vec![lat],
        };
        let g = build_hsg(
            vec![
                mk("w0", StationKind::Weather, 0.0),
                mk("a0", StationKind::Air, 0.05),
                mk("a1", StationKind::Air, 0.1),
            ],
            15.0,
        )
        .unwrap();
        let b = GraphBatch::new(&g, 3);
        assert_eq!(b.counts, [2, 1]);
        assert_eq!(b.globals, [vec![1, 2], vec![0]]);
        assert_eq!(b.context[0].nrows(), 6);
        assert_eq!(b.context[0][[3, 0]], 0.1);
        let aa = &b.edges[Relation::AirToAir.index()];
        assert_eq!(aa.len(), 3 * 4);
        for (&d, &s) in aa.dst.iter().zip(aa.src.iter()) {
            assert_eq!(d / 2, s / 2);
        }
        let wa = &b.edges[Relation::WeatherToAir.index()];
        for (&d, &s) in wa.dst.iter().zip(wa.src.iter()) {
            assert_eq!(d / 2, s);
        }
    }
}
