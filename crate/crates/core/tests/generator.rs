use hsgcast_core::geo::{build_hsg, HeteroStationGraph, Relation, Station, StationKind, EARTH_RADIUS_KM};
use hsgcast_core::model::{
    gconv, gru_step, init_chat_layer, init_generator, init_gru, predictive_loss, relation_attention,
    ChatLayerVars, GenVars, Generator, GeneratorConfig, GraphBatch, GruVars, Snapshot, TeacherForcing,
};
use hsgcast_core::tensor::{ParamStore, Tape};
use ndarray::{array, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((r, c), || rng.random_range(-1.0..1.0))
}

fn north(km: f64) -> f64 {
    (km / EARTH_RADIUS_KM).to_degrees()
}

/// Stations on a north-south line, `spacing_km` apart.
fn line(kinds: &[StationKind], spacing_km: f64, c_dim: usize, rng: &mut ChaCha8Rng) -> Vec<Station> {
    kinds
        .iter()
        .enumerate()
        .map(|(i, &kind)| Station {
            id: format!("st{i}"),
            kind,
            lat: 30.0 + north(spacing_km * i as f64),
            lon: 110.0,
            context: (0..c_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
        })
        .collect()
}

fn gen_config(d: usize, layers: usize, c_dim: usize) -> GeneratorConfig {
    GeneratorConfig {
        d,
        layers,
        d_air: 3,
        d_weather: 2,
        c_dim,
        head_hidden: 5,
        residual: true,
        leaky_alpha: 0.2,
    }
}

fn random_history(g: &HeteroStationGraph, cfg: &GeneratorConfig, steps: usize, rng: &mut ChaCha8Rng) -> Vec<Snapshot> {
    (0..steps)
        .map(|_| {
            [
                random(rng, g.count(StationKind::Air), cfg.d_air),
                random(rng, g.count(StationKind::Weather), cfg.d_weather),
            ]
        })
        .collect()
}

fn run(cfg: &GeneratorConfig, g: &HeteroStationGraph, params: &ParamStore, history: &[Snapshot], tau: usize) -> Vec<Snapshot> {
    let gb = GraphBatch::new(g, 1);
    let tape = Tape::new();
    let vars = GenVars::load(&tape, params, cfg).unwrap();
    let preds = Generator::new(cfg, &gb)
        .forward(&tape, &vars, history, tau, None::<TeacherForcing<'_, ChaCha8Rng>>, None)
        .unwrap();
    preds
        .iter()
        .map(|p| [tape.value(p[0]).clone(), tape.value(p[1]).clone()])
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn leaky(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.2 * x
    }
}

#[test]
fn attention_matches_scalar_reimplementation() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    use StationKind::*;
    let stations = line(&[Air, Air, Weather, Air, Weather], 6.0, 2, &mut rng);
    let g = build_hsg(stations, 15.0).unwrap();
    let gb = GraphBatch::new(&g, 1);
    let d = 4;
    let mut store = ParamStore::new();
    init_chat_layer(&mut store, "t", d, 2, &mut rng).unwrap();
    let x = [random(&mut rng, 3, d), random(&mut rng, 2, d)];

    let tape = Tape::new();
    let layer = ChatLayerVars::load(&tape, &store, "t").unwrap();
    let xv = [tape.constant(x[0].clone()), tape.constant(x[1].clone())];
    let cv = [tape.constant(gb.context[0].clone()), tape.constant(gb.context[1].clone())];
    for rel in Relation::ALL {
        let (ks, kt) = (rel.source().index(), rel.target().index());
        let edges = &gb.edges[rel.index()];
        let att = relation_attention(&tape, &layer.attn[rel.index()], xv[kt], xv[ks], cv[kt], cv[ks], edges, gb.rows(rel.target()), 0.2)
            .unwrap();
        let got = tape.value(att).clone();

        let p = format!("t.attn.{}", rel.key());
        let v = |n: &str| store.value(&format!("{p}.{n}")).unwrap().clone();
        let (a_dst, a_src, c_dst, c_src, a_dist) = (v("dst"), v("src"), v("ctx_dst"), v("ctx_src"), v("dist")[[0, 0]]);
        let dot = |row: ndarray::ArrayView1<f64>, w: &Array2<f64>| row.iter().zip(w.column(0)).map(|(a, b)| a * b).sum::<f64>();
        let score: Vec<f64> = (0..edges.len())
            .map(|e| {
                let (t, s) = (edges.dst[e], edges.src[e]);
                leaky(
                    dot(x[kt].row(t), &a_dst)
                        + dot(x[ks].row(s), &a_src)
                        + dot(gb.context[kt].row(t), &c_dst)
                        + dot(gb.context[ks].row(s), &c_src)
                        + a_dist * edges.dist[[e, 0]],
                )
            })
            .collect();
        for t in 0..gb.rows(rel.target()) {
            let group: Vec<usize> = (0..edges.len()).filter(|&e| edges.dst[e] == t).collect();
            let z: f64 = group.iter().map(|&e| score[e].exp()).sum();
            for &e in &group {
                let want = score[e].exp() / z;
                assert!((got[[e, 0]] - want).abs() < 1e-12, "{rel} edge {e}: {} vs {want}", got[[e, 0]]);
            }
        }
    }
}

#[test]
fn single_neighbor_gets_full_weight_and_twins_split_evenly() {
    let tape = Tape::new();
    let scores = tape.constant(array![[0.3], [1.7], [1.7]]);
    let w = tape.segment_softmax(scores, vec![0, 1, 1].into(), 2).unwrap();
    let w = tape.value(w);
    assert_eq!(w[[0, 0]], 1.0);
    assert_eq!(w[[1, 0]], 0.5);
    assert_eq!(w[[2, 0]], 0.5);
}

#[test]
fn gconv_matches_hand_arithmetic() {
    let tape = Tape::new();
    use hsgcast_core::model::RelationEdges;
    let edges = RelationEdges {
        dst: vec![0, 0].into(),
        src: vec![0, 1].into(),
        dist: array![[0.0], [0.5]],
    };
    let x = tape.constant(array![[1.0, -2.0], [3.0, 0.5]]);
    let w = tape.constant(array![[2.0, 0.0], [1.0, -1.0]]);
    let att = tape.constant(array![[0.25], [0.75]]);
    let out = gconv(&tape, w, att, x, &edges, 1, 0.2).unwrap();
    // x·W = [[0, 2], [6.5, -0.5]]; 0.25·[0,2] + 0.75·[6.5,-0.5] = [4.875, 0.125]
    assert_eq!(*tape.value(out), array![[4.875, 0.125]]);

    let zero = tape.constant(Array2::zeros((2, 2)));
    let out = gconv(&tape, w, att, zero, &edges, 1, 0.2).unwrap();
    assert_eq!(*tape.value(out), Array2::<f64>::zeros((1, 2)));

    let neg = tape.constant(array![[-1.0, 0.0], [-1.0, 0.0]]);
    let out = gconv(&tape, tape.constant(Array2::eye(2)), att, neg, &edges, 1, 0.2).unwrap();
    assert!((tape.value(out)[[0, 0]] + 0.2).abs() < 1e-15);
}

fn scalar_gru(store: &ParamStore, prefix: &str, h: &[f64], x: &[f64]) -> Vec<f64> {
    let w = |n: &str| store.value(&format!("{prefix}.{n}")).unwrap().clone();
    let (wr, wz, wh, br, bz, bh) = (w("w_r"), w("w_z"), w("w_h"), w("b_r"), w("b_z"), w("b_h"));
    let d = h.len();
    let hx: Vec<f64> = h.iter().chain(x).copied().collect();
    let affine = |v: &[f64], m: &Array2<f64>, b: &Array2<f64>, j: usize| -> f64 {
        v.iter().enumerate().map(|(i, vi)| vi * m[[i, j]]).sum::<f64>() + b[[0, j]]
    };
    let r: Vec<f64> = (0..d).map(|j| sigmoid(affine(&hx, &wr, &br, j))).collect();
    let z: Vec<f64> = (0..d).map(|j| sigmoid(affine(&hx, &wz, &bz, j))).collect();
    let rhx: Vec<f64> = h.iter().zip(&r).map(|(a, b)| a * b).chain(x.iter().copied()).collect();
    (0..d)
        .map(|j| {
            let cand = affine(&rhx, &wh, &bh, j).tanh();
            (1.0 - z[j]) * h[j] + z[j] * cand
        })
        .collect()
}

#[test]
fn gru_matches_scalar_reimplementation() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (d, input) = (4, 3);
    let mut store = ParamStore::new();
    init_gru(&mut store, "g", input, d, &mut rng).unwrap();
    let h = random(&mut rng, 2, d);
    let x = random(&mut rng, 2, input);
    let tape = Tape::new();
    let cell = GruVars::load(&tape, &store, "g").unwrap();
    let out = gru_step(&tape, &cell, tape.constant(h.clone()), tape.constant(x.clone())).unwrap();
    let out = tape.value(out);
    for r in 0..2 {
        let want = scalar_gru(&store, "g", h.row(r).as_slice().unwrap(), x.row(r).as_slice().unwrap());
        for j in 0..d {
            assert!((out[[r, j]] - want[j]).abs() < 1e-12);
        }
    }
}

#[test]
fn gru_update_gate_limits() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let d = 3;
    let mut store = ParamStore::new();
    init_gru(&mut store, "g", d, d, &mut rng).unwrap();
    let h = random(&mut rng, 1, d);
    let x = random(&mut rng, 1, d);
    let step = |store: &ParamStore| {
        let tape = Tape::new();
        let cell = GruVars::load(&tape, store, "g").unwrap();
        let out = gru_step(&tape, &cell, tape.constant(h.clone()), tape.constant(x.clone())).unwrap();
        let v = tape.value(out).clone();
        v
    };
    store.get_mut("g.b_z").unwrap().value.fill(-50.0);
    let closed = step(&store);
    for j in 0..d {
        assert!((closed[[0, j]] - h[[0, j]]).abs() < 1e-9);
    }
    store.get_mut("g.b_z").unwrap().value.fill(50.0);
    let open = step(&store);
    let mut zeroed = store.clone();
    zeroed.get_mut("g.w_z").unwrap().value.fill(0.0);
    let want = scalar_gru(&zeroed, "g", h.row(0).as_slice().unwrap(), x.row(0).as_slice().unwrap());
    for j in 0..d {
        assert!((open[[0, j]] - want[j]).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gru_output_is_bounded(seed in 0u64..100_000, scale in 0.1f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 4;
        let mut store = ParamStore::new();
        init_gru(&mut store, "g", 3, d, &mut rng).unwrap();
        let h = random(&mut rng, 3, d) * scale;
        let x = random(&mut rng, 3, 3) * scale;
        let tape = Tape::new();
        let cell = GruVars::load(&tape, &store, "g").unwrap();
        let out = gru_step(&tape, &cell, tape.constant(h.clone()), tape.constant(x)).unwrap();
        let out = tape.value(out);
        for ((r, j), v) in out.indexed_iter() {
            prop_assert!(v.abs() <= h[[r, j]].abs().max(1.0) + 1e-15);
        }
    }
}

#[test]
fn zero_inputs_and_zero_gru_biases_keep_the_hidden_state_at_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    use StationKind::*;
    let g = build_hsg(line(&[Air, Weather, Air], 5.0, 2, &mut rng), 15.0).unwrap();
    let cfg = gen_config(4, 2, 2);
    let mut params = init_generator(&cfg, &mut rng).unwrap();
    for kind in ["air", "weather"] {
        for b in ["b_r", "b_z", "b_h"] {
            params.get_mut(&format!("gen.gru.{kind}.{b}")).unwrap().value.fill(0.0);
        }
    }
    let history: Vec<Snapshot> = (0..3).map(|_| [Array2::zeros((2, 3)), Array2::zeros((1, 2))]).collect();
    let gb = GraphBatch::new(&g, 1);
    let tape = Tape::new();
    let vars = GenVars::load(&tape, &params, &cfg).unwrap();
    let state = Generator::new(&cfg, &gb).encode(&tape, &vars, &history, None).unwrap();
    assert_eq!(state.step, 3);
    for k in 0..2 {
        assert!(tape.value(state.hidden[k]).iter().all(|&v| v == 0.0));
    }
}

#[test]
fn prediction_shapes_follow_the_station_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    use StationKind::*;
    let g = build_hsg(line(&[Air, Weather, Air, Air], 5.0, 2, &mut rng), 15.0).unwrap();
    let cfg = gen_config(4, 1, 2);
    let params = init_generator(&cfg, &mut rng).unwrap();
    let history = random_history(&g, &cfg, 2, &mut rng);
    for tau in [1, 3] {
        let preds = run(&cfg, &g, &params, &history, tau);
        assert_eq!(preds.len(), tau);
        for p in &preds {
            assert_eq!(p[0].dim(), (3, 3));
            assert_eq!(p[1].dim(), (1, 2));
        }
    }
}

/// Perturbing one station's observation at any single encoder step moves
/// the one-step forecast exactly at the stations within `layers` hops.
#[test]
fn influence_is_confined_to_the_attention_receptive_field() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    use StationKind::*;
    let kinds = [Air, Weather, Air, Weather, Air, Weather];
    let g = build_hsg(line(&kinds, 10.0, 2, &mut rng), 15.0).unwrap();
    let gb = GraphBatch::new(&g, 1);
    for layers in [1, 2] {
        let cfg = gen_config(5, layers, 2);
        let params = init_generator(&cfg, &mut rng).unwrap();
        let history = random_history(&g, &cfg, 3, &mut rng);
        let base = run(&cfg, &g, &params, &history, 1);
        for t in 0..history.len() {
            let mut moved = history.clone();
            moved[t][0].row_mut(0).mapv_inplace(|v| v + 0.5);
            let pred = run(&cfg, &g, &params, &moved, 1);
            for (i, &(kind, row)) in gb.locals.iter().enumerate() {
                let k = kind.index();
                let delta = (&pred[0][k].row(row) - &base[0][k].row(row)).iter().fold(0.0f64, |m, v| m.max(v.abs()));
                let near = g.hops(0, i).unwrap() <= layers;
                assert_eq!(delta > 1e-12, near, "layers {layers}, step {t}, station {i}: delta {delta}");
            }
        }
    }
}

#[test]
fn relabeling_stations_relabels_forecasts() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    use StationKind::*;
    let kinds = [Air, Weather, Air, Air, Weather];
    let g = build_hsg(line(&kinds, 7.0, 2, &mut rng), 15.0).unwrap();
    let perm = [4, 2, 0, 1, 3];
    let gp = g.permuted(&perm).unwrap();
    let cfg = gen_config(4, 2, 2);
    let params = init_generator(&cfg, &mut rng).unwrap();
    let history = random_history(&g, &cfg, 3, &mut rng);
    let (gb, gbp) = (GraphBatch::new(&g, 1), GraphBatch::new(&gp, 1));
    // row of each original station inside the permuted graph
    let relabel = |snap: &Snapshot| -> Snapshot {
        let mut out = [Array2::zeros(snap[0].dim()), Array2::zeros(snap[1].dim())];
        for (new_i, &old_i) in perm.iter().enumerate() {
            let (kind, old_row) = gb.locals[old_i];
            let new_row = gbp.locals[new_i].1;
            out[kind.index()].row_mut(new_row).assign(&snap[kind.index()].row(old_row));
        }
        out
    };
    let permuted_history: Vec<Snapshot> = history.iter().map(relabel).collect();
    let a = run(&cfg, &g, &params, &history, 2);
    let b = run(&cfg, &gp, &params, &permuted_history, 2);
    for (pa, pb) in a.iter().zip(&b) {
        let want = relabel(pa);
        for k in 0..2 {
            for (x, y) in want[k].iter().zip(pb[k].iter()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn kinds_share_no_parameters_without_cross_edges() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    use StationKind::*;
    let mut stations = line(&[Air, Air, Weather, Weather], 5.0, 2, &mut rng);
    for s in stations.iter_mut().filter(|s| s.kind == Weather) {
        s.lat += north(200.0);
    }
    let g = build_hsg(stations, 15.0).unwrap();
    let cfg = gen_config(4, 2, 2);
    let params = init_generator(&cfg, &mut rng).unwrap();
    let history = random_history(&g, &cfg, 3, &mut rng);
    let base = run(&cfg, &g, &params, &history, 2);
    let mut mutated = params.clone();
    for name in ["gen.embed.air", "gen.gru.air.w_h", "gen.head.air.w2"] {
        mutated.get_mut(name).unwrap().value.mapv_inplace(|v| v * 1.7 + 0.1);
    }
    let after = run(&cfg, &g, &mutated, &history, 2);
    for (a, b) in base.iter().zip(&after) {
        assert_eq!(a[1], b[1]);
        assert_ne!(a[0], b[0]);
    }
}

#[test]
fn full_teacher_forcing_cuts_the_feedback_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    use StationKind::*;
    let g = build_hsg(line(&[Air, Weather, Air], 5.0, 2, &mut rng), 15.0).unwrap();
    let mut cfg = gen_config(4, 1, 2);
    cfg.residual = false;
    let params = init_generator(&cfg, &mut rng).unwrap();
    let history = random_history(&g, &cfg, 3, &mut rng);
    let future = random_history(&g, &cfg, 3, &mut rng);
    let gb = GraphBatch::new(&g, 1);
    let rollout = |params: &ParamStore, ratio: Option<f64>| -> Vec<Snapshot> {
        let tape = Tape::new();
        let vars = GenVars::load(&tape, params, &cfg).unwrap();
        let mut coin = ChaCha8Rng::seed_from_u64(0);
        let teacher = ratio.map(|ratio| TeacherForcing { future: &future, ratio, rng: &mut coin });
        let preds = Generator::new(&cfg, &gb).forward(&tape, &vars, &history, 3, teacher, None).unwrap();
        preds.iter().map(|p| [tape.value(p[0]).clone(), tape.value(p[1]).clone()]).collect()
    };
    let mut shifted = params.clone();
    shifted.get_mut("gen.head.air.b2").unwrap().value.mapv_inplace(|v| v + 0.25);

    let (a, b) = (rollout(&params, Some(1.0)), rollout(&shifted, Some(1.0)));
    for (pa, pb) in a.iter().zip(&b) {
        for (x, y) in pa[0].iter().zip(pb[0].iter()) {
            assert!((y - x - 0.25).abs() < 1e-12);
        }
        assert_eq!(pa[1], pb[1]);
    }
    let (a, b) = (rollout(&params, None), rollout(&shifted, None));
    assert_ne!(a[2][1], b[2][1], "own predictions feed back without teacher forcing");

    assert_eq!(rollout(&params, Some(0.0)), rollout(&params, None));
}

#[test]
fn predictive_loss_cases() {
    let tape = Tape::new();
    let target: Vec<Snapshot> = vec![[array![[1.0, 2.0]], array![[3.0]]], [array![[0.0, -1.0]], array![[2.0]]]];
    let same: Vec<[hsgcast_core::tensor::Var; 2]> = target
        .iter()
        .map(|s| [tape.constant(s[0].clone()), tape.constant(s[1].clone())])
        .collect();
    assert_eq!(tape.scalar(predictive_loss(&tape, &same, &target).unwrap()), 0.0);
    let offset: Vec<_> = target
        .iter()
        .map(|s| [tape.constant(&s[0] + 0.5), tape.constant(&s[1] + 0.5)])
        .collect();
    assert!((tape.scalar(predictive_loss(&tape, &offset, &target).unwrap()) - 0.25).abs() < 1e-15);
    let hand: Vec<_> = vec![[array![[2.0, 2.0]], array![[1.0]]], [array![[0.0, 0.0]], array![[2.0]]]]
        .into_iter()
        .map(|s: Snapshot| [tape.constant(s[0].clone()), tape.constant(s[1].clone())])
        .collect();
    // squared errors 1, 0, 4, 0, 1, 0 over 6 entries
    assert!((tape.scalar(predictive_loss(&tape, &hand, &target).unwrap()) - 1.0).abs() < 1e-15);
    assert!(predictive_loss(&tape, &hand[..1], &target).is_err());
}
