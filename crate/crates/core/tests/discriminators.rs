use hsgcast_core::adversarial::{disc_loss, init_discriminators, DiscConfig, DiscKind, DiscVars, Discriminators};
use hsgcast_core::data::synthetic::{generate, SyntheticConfig};
use hsgcast_core::data::{assemble, make_windows, NormStats, WindowBatch};
use hsgcast_core::geo::{build_hsg, HeteroStationGraph, StationKind};
use hsgcast_core::model::Snapshot;
use hsgcast_core::tensor::{sgd_step, sigmoid, ParamStore, Tape, Var};
use hsgcast_core::training::TrainConfig;
use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Setup {
    cfg: DiscConfig,
    graph: HeteroStationGraph,
    batch: WindowBatch,
    params: ParamStore,
}

fn setup(windows: usize) -> Setup {
    let synth = SyntheticConfig {
        seed: 3,
        air_stations: 4,
        weather_stations: 3,
        steps: 40,
        context_dim: 2,
        box_km: 20.0,
        ..SyntheticConfig::default()
    };
    let (ds, _) = generate(&synth).unwrap();
    let train = TrainConfig { d: 5, mlp_hidden: 4, epsilon_km: 15.0, ..TrainConfig::default() };
    let norm = NormStats::fit(&ds, 0..ds.steps()).unwrap();
    let nds = norm.apply_dataset(&ds).unwrap();
    let w = make_windows(0..ds.steps(), 4, 3);
    let batch = assemble(&nds, &w[..windows]).unwrap();
    let cfg = train.disc_config(&ds);
    let params = init_discriminators(&cfg, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    let graph = build_hsg(ds.stations.clone(), train.epsilon_km).unwrap();
    Setup { cfg, graph, batch, params }
}

fn consts(tape: &Tape, snaps: &[Snapshot]) -> Vec<[Var; 2]> {
    snaps.iter().map(|s| [tape.constant(s[0].clone()), tape.constant(s[1].clone())]).collect()
}

fn full(s: &Setup) -> Vec<Snapshot> {
    s.batch.history.iter().chain(&s.batch.future).cloned().collect()
}

fn logits(s: &Setup, kind: DiscKind, future: &[Snapshot], seq: &[Snapshot]) -> Array2<f64> {
    let tape = Tape::new();
    let discs = Discriminators::new(&s.cfg, &s.graph, future[0][0].nrows() / s.cfg.air_stations).unwrap();
    let vars = DiscVars::load(&tape, &s.params, kind).unwrap();
    let out = discs.score(&tape, &vars, &consts(&tape, future), &consts(&tape, seq)).unwrap();
    let v = tape.value(out.logits).clone();
    v
}

fn reorder_rows(x: &Array2<f64>, order: &[usize]) -> Array2<f64> {
    x.select(Axis(0), order)
}

/// New global order of the stations and, per kind, the old local row each new row reads.
fn permutation(graph: &HeteroStationGraph, perm: &[usize]) -> [Vec<usize>; 2] {
    let mut local = vec![0usize; graph.len()];
    let mut seen = [0usize; 2];
    for (i, st) in graph.stations().iter().enumerate() {
        local[i] = seen[st.kind.index()];
        seen[st.kind.index()] += 1;
    }
    let mut rows = [Vec::new(), Vec::new()];
    for &old in perm {
        rows[graph.stations()[old].kind.index()].push(local[old]);
    }
    rows
}

fn permute_snapshots(snaps: &[Snapshot], rows: &[Vec<usize>; 2]) -> Vec<Snapshot> {
    snaps.iter().map(|s| [reorder_rows(&s[0], &rows[0]), reorder_rows(&s[1], &rows[1])]).collect()
}

fn close(a: &Array2<f64>, b: &Array2<f64>, tol: f64) -> bool {
    a.dim() == b.dim() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn spatial_score_is_invariant_to_station_order() {
    let s = setup(1);
    let perm = [6, 2, 0, 5, 1, 4, 3];
    let rows = permutation(&s.graph, &perm);
    let graph = s.graph.permuted(&perm).unwrap();
    let mut cfg = s.cfg.clone();
    cfg.station_ids = graph.stations().iter().map(|st| st.id.clone()).collect();
    let permuted = Setup {
        cfg,
        graph,
        batch: WindowBatch {
            windows: s.batch.windows.clone(),
            history: permute_snapshots(&s.batch.history, &rows),
            future: permute_snapshots(&s.batch.future, &rows),
        },
        params: s.params.clone(),
    };
    let a = logits(&s, DiscKind::Spatial, &s.batch.future, &full(&s));
    let b = logits(&permuted, DiscKind::Spatial, &permuted.batch.future, &full(&permuted));
    assert!(close(&a, &b, 1e-12), "{a:?} vs {b:?}");
}

#[test]
fn temporal_scores_follow_their_station() {
    let s = setup(1);
    let a = logits(&s, DiscKind::Temporal, &s.batch.future, &full(&s));
    let rows = [vec![2, 0, 3, 1], vec![1, 2, 0]];
    let seq = permute_snapshots(&full(&s), &rows);
    let b = logits(&s, DiscKind::Temporal, &s.batch.future, &seq);
    let m = s.cfg.air_stations;
    let mut order: Vec<usize> = rows[0].clone();
    order.extend(rows[1].iter().map(|r| r + m));
    assert!(close(&reorder_rows(&a, &order), &b, 1e-12));
}

#[test]
fn city_score_depends_on_station_order() {
    let s = setup(1);
    let a = logits(&s, DiscKind::Macro, &s.batch.future, &full(&s));
    let seq = permute_snapshots(&full(&s), &[vec![1, 0, 2, 3], vec![0, 1, 2]]);
    let b = logits(&s, DiscKind::Macro, &s.batch.future, &seq);
    assert!((a[[0, 0]] - b[[0, 0]]).abs() > 1e-9);
}

#[test]
fn sample_counts_per_discriminator() {
    let s = setup(3);
    let (b, tau, t) = (3, s.batch.future.len(), s.batch.history.len() + s.batch.future.len());
    assert_eq!(logits(&s, DiscKind::Spatial, &s.batch.future, &full(&s)).dim(), (tau * b, 1));
    assert_eq!(logits(&s, DiscKind::Temporal, &s.batch.future, &full(&s)).dim(), (7 * b, 1));
    assert_eq!(logits(&s, DiscKind::Macro, &s.batch.future, &full(&s)).dim(), (b, 1));
    assert!(t > tau);
    let short = &full(&s)[..1];
    assert_eq!(logits(&s, DiscKind::Temporal, &s.batch.future, short).dim(), (7 * b, 1));
}

fn matvec(v: &[f64], m: &Array2<f64>, b: &Array2<f64>) -> Vec<f64> {
    (0..m.ncols())
        .map(|j| v.iter().enumerate().map(|(i, x)| x * m[[i, j]]).sum::<f64>() + b[[0, j]])
        .collect()
}

fn scalar_gru(p: &ParamStore, prefix: &str, h: &[f64], x: &[f64]) -> Vec<f64> {
    let w = |n: &str| p.value(&format!("{prefix}.{n}")).unwrap().clone();
    let hx: Vec<f64> = h.iter().chain(x).copied().collect();
    let r: Vec<f64> = matvec(&hx, &w("w_r"), &w("b_r")).into_iter().map(sigmoid).collect();
    let z: Vec<f64> = matvec(&hx, &w("w_z"), &w("b_z")).into_iter().map(sigmoid).collect();
    let rhx: Vec<f64> = h.iter().zip(&r).map(|(a, b)| a * b).chain(x.iter().copied()).collect();
    let cand = matvec(&rhx, &w("w_h"), &w("b_h"));
    (0..h.len()).map(|j| (1.0 - z[j]) * h[j] + z[j] * cand[j].tanh()).collect()
}

#[test]
fn temporal_discriminator_matches_a_scalar_recurrence() {
    let s = setup(1);
    let seq = &full(&s)[..3];
    let out = logits(&s, DiscKind::Temporal, &s.batch.future, seq);
    let p = &s.params;
    let v = |n: &str| p.value(&format!("disc.temporal.{n}")).unwrap().clone();
    let alpha = s.cfg.leaky_alpha;
    for kind in StationKind::ALL {
        let rows = if kind == StationKind::Air { s.cfg.air_stations } else { s.cfg.weather_stations };
        for row in 0..rows {
            let mut h = vec![0.0; s.cfg.d];
            for snap in seq {
                let x = snap[kind.index()].row(row).to_vec();
                let inp = matvec(&x, &v(&format!("in.{kind}.w")), &v(&format!("in.{kind}.b")));
                h = scalar_gru(p, "disc.temporal.gru", &h, &inp);
            }
            let hidden: Vec<f64> = matvec(&h, &v("mlp.w1"), &v("mlp.b1"))
                .into_iter()
                .map(|a| if a > 0.0 { a } else { alpha * a })
                .collect();
            let logit = matvec(&hidden, &v("mlp.w2"), &v("mlp.b2"))[0];
            let sample = row + if kind == StationKind::Air { 0 } else { s.cfg.air_stations };
            assert!((out[[sample, 0]] - logit).abs() < 1e-12, "{kind} row {row}");
        }
    }
}

#[test]
fn discriminator_parameters_are_disjoint() {
    let s = setup(1);
    let subsets: Vec<ParamStore> = DiscKind::ALL.iter().map(|k| s.params.subset(&format!("{}.", k.prefix()))).collect();
    let total: usize = subsets.iter().map(ParamStore::len).sum();
    assert_eq!(total, s.params.len());
    for a in 0..3 {
        for b in a + 1..3 {
            assert!(subsets[a].names().all(|n| !subsets[b].contains(n)));
        }
    }
    // Each discriminator's loss only reaches its own weights.
    let tape = Tape::new();
    let discs = Discriminators::new(&s.cfg, &s.graph, 1).unwrap();
    let fut = consts(&tape, &s.batch.future);
    let seq = consts(&tape, &full(&s));
    let mut store = s.params.clone();
    let vars = DiscVars::load(&tape, &store, DiscKind::Temporal).unwrap();
    let out = discs.score(&tape, &vars, &fut, &seq).unwrap();
    let loss = disc_loss(&tape, &out, &out).unwrap();
    let grads = tape.backward(loss).unwrap();
    store.accumulate(&tape, &grads);
    for (name, p) in store.iter() {
        let touched = p.grad.iter().any(|g| *g != 0.0);
        if !name.starts_with("disc.temporal.") {
            assert!(!touched, "{name}");
        }
    }
}

#[test]
fn training_separates_real_from_distorted_sequences() {
    let s = setup(4);
    let real_full = full(&s);
    let shift = |snaps: &[Snapshot]| -> Vec<Snapshot> {
        snaps.iter().map(|x| [x[0].mapv(|v| -v + 0.5), x[1].mapv(|v| v * 0.3)]).collect()
    };
    let fake_future = shift(&s.batch.future);
    let fake_full: Vec<Snapshot> = s.batch.history.iter().cloned().chain(fake_future.iter().cloned()).collect();
    for kind in DiscKind::ALL {
        let mut store = s.params.subset(&format!("{}.", kind.prefix()));
        let mut losses = Vec::new();
        for _ in 0..150 {
            let tape = Tape::new();
            let discs = Discriminators::new(&s.cfg, &s.graph, 4).unwrap();
            let vars = DiscVars::load(&tape, &store, kind).unwrap();
            let real = discs.score(&tape, &vars, &consts(&tape, &s.batch.future), &consts(&tape, &real_full)).unwrap();
            let fake = discs.score(&tape, &vars, &consts(&tape, &fake_future), &consts(&tape, &fake_full)).unwrap();
            let loss = disc_loss(&tape, &real, &fake).unwrap();
            losses.push(tape.scalar(loss));
            let grads = tape.backward(loss).unwrap();
            store.accumulate(&tape, &grads);
            sgd_step(&mut store, 0.5).unwrap();
        }
        assert!(losses[149] < 0.5 * losses[0], "{kind}: {:?}", (losses[0], losses[149]));
    }
}

#[test]
fn wrong_weights_or_shapes_are_rejected() {
    let s = setup(1);
    let tape = Tape::new();
    let discs = Discriminators::new(&s.cfg, &s.graph, 1).unwrap();
    let vars = DiscVars::load(&tape, &s.params, DiscKind::Macro).unwrap();
    let fut = consts(&tape, &s.batch.future);
    assert!(discs.spatial(&tape, &vars, &fut).is_err());
    let vars = DiscVars::load(&tape, &s.params, DiscKind::Spatial).unwrap();
    let bad = [tape.constant(Array2::zeros((2, 6))), fut[0][1]];
    assert!(discs.spatial(&tape, &vars, &[bad]).is_err());
    assert!(discs.spatial(&tape, &vars, &[]).is_err());
    let mut cfg = s.cfg.clone();
    cfg.station_ids.swap(0, 1);
    assert!(Discriminators::new(&cfg, &s.graph, 1).is_err());
}
