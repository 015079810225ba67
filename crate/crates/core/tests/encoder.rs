//! Encoder outputs against a dense, loop-based re-implementation.

use std::collections::BTreeMap;

use mdgnn_core::encoder::{
    self, encode_snapshot, fusion_name, head_name, input_name, induce_meta_path_graph, EncoderConfig, Fusion,
    MetaPath, PreparedSnapshot,
};
use mdgnn_core::graph::{EdgeRecord, GraphSnapshot, NodeKind, NodeRef, Relation};
use mdgnn_core::model::{Model, ModelConfig};
use mdgnn_core::synth;
use mdgnn_core::{Matrix, ParamStore, Tape};

type Vector = Vec<f64>;

/// Edge instances of one stock pair gathered by walking relation chains.
#[derive(Default, Debug)]
struct Walks {
    constituents: Vec<Vector>,
    instances: usize,
    via: BTreeMap<NodeRef, f64>,
}

fn walk(s: &GraphSnapshot, m: MetaPath) -> BTreeMap<(usize, usize), Walks> {
    let mut out: BTreeMap<(usize, usize), Walks> = BTreeMap::new();
    let mut record = |i: usize, j: usize, parts: Vec<Vector>, via: Vec<NodeRef>| {
        let w = out.entry((i, j)).or_default();
        w.constituents.extend(parts);
        w.instances += 1;
        for v in &via {
            *w.via.entry(*v).or_insert(0.0) += 1.0 / via.len() as f64;
        }
    };
    let all: Vec<&EdgeRecord> = s.edges.iter().collect();
    match m {
        MetaPath::StockStock => {
            for e in all.iter().filter(|e| e.relation == Relation::StockStock) {
                record(e.src.index, e.dst.index, vec![e.features.clone()], vec![]);
                record(e.dst.index, e.src.index, vec![e.features.clone()], vec![]);
            }
        }
        MetaPath::StockBankStock => {
            for a in all.iter().filter(|e| e.relation == Relation::StockBank) {
                for b in all.iter().filter(|e| e.relation == Relation::StockBank) {
                    if a.dst == b.dst && a.src != b.src {
                        record(
                            a.src.index,
                            b.src.index,
                            vec![a.features.clone(), b.features.clone()],
                            vec![a.dst],
                        );
                    }
                }
            }
        }
        MetaPath::StockIndustryIndustryStock => {
            let si: Vec<&&EdgeRecord> = all.iter().filter(|e| e.relation == Relation::StockIndustry).collect();
            for a in &si {
                for b in &si {
                    if a.src == b.src {
                        continue;
                    }
                    if a.dst == b.dst {
                        record(a.src.index, b.src.index, vec![a.features.clone(), b.features.clone()], vec![a.dst]);
                    }
                    for ii in all.iter().filter(|e| e.relation == Relation::IndustryIndustry) {
                        let linked = (ii.src == a.dst && ii.dst == b.dst) || (ii.dst == a.dst && ii.src == b.dst);
                        if linked {
                            record(
                                a.src.index,
                                b.src.index,
                                vec![a.features.clone(), ii.features.clone(), b.features.clone()],
                                vec![a.dst, b.dst],
                            );
                        }
                    }
                }
            }
        }
        MetaPath::Untyped => {
            for typed in MetaPath::TYPED {
                for (k, w) in walk(s, typed) {
                    let e = out.entry(k).or_default();
                    e.constituents.extend(w.constituents);
                    e.instances += w.instances;
                    for (n, x) in w.via {
                        *e.via.entry(n).or_insert(0.0) += x;
                    }
                }
            }
        }
    }
    out
}

fn mean_of(rows: &[Vector]) -> Vector {
    let mut acc = vec![0.0; rows[0].len()];
    for r in rows {
        for (a, v) in acc.iter_mut().zip(r) {
            *a += v;
        }
    }
    acc.iter().map(|a| a / rows.len() as f64).collect()
}

fn toy_day0() -> GraphSnapshot {
    synth::generate(&synth::preset("toy").unwrap()).unwrap().snapshots[0].clone()
}

#[test]
fn induced_edges_match_brute_force_walks_on_toy_day0() {
    let s = toy_day0();
    for m in [
        MetaPath::StockStock,
        MetaPath::StockBankStock,
        MetaPath::StockIndustryIndustryStock,
        MetaPath::Untyped,
    ] {
        let got = induce_meta_path_graph(&s, m);
        let want = walk(&s, m);
        assert_eq!(got.len(), want.len(), "{m}: edge count");
        for e in &got {
            let w = &want[&(e.target, e.neighbor)];
            assert_eq!(e.count, w.instances, "{m} ({}, {}) count", e.target, e.neighbor);
            let mean = mean_of(&w.constituents);
            for (a, b) in e.mean_features.iter().zip(&mean) {
                assert!((a - b).abs() < 1e-12, "{m}: features {a} vs {b}");
            }
            let total: f64 = w.via.values().sum();
            let via: Vec<(NodeRef, f64)> = w.via.iter().map(|(k, v)| (*k, v / total)).collect();
            assert_eq!(e.via.len(), via.len());
            for ((na, wa), (nb, wb)) in e.via.iter().zip(&via) {
                assert_eq!(na, nb);
                assert!((wa - wb).abs() < 1e-12);
            }
        }
    }
}

fn row_times(x: &[f64], w: &Matrix) -> Vector {
    (0..w.cols())
        .map(|c| x.iter().enumerate().map(|(r, v)| v * w.get(r, c)).sum())
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn column(m: &Matrix) -> Vector {
    m.data().to_vec()
}

fn project(p: &ParamStore, kind: NodeKind, features: &Matrix) -> Vec<Vector> {
    let w = p.get(&input_name(kind, "w")).unwrap();
    let b = p.get(&input_name(kind, "b")).unwrap();
    (0..features.rows())
        .map(|r| {
            row_times(features.row(r), w)
                .iter()
                .zip(b.data())
                .map(|(x, y)| x + y)
                .collect()
        })
        .collect()
}

/// Edge-aware attention of one meta-path written out per edge; `None` for
/// stocks without neighbours.
#[allow(clippy::too_many_arguments)]
fn dense_meta_path(
    p: &ParamStore,
    s: &GraphSnapshot,
    m: MetaPath,
    layer: usize,
    heads: usize,
    h: &[Vector],
    banks: &[Vector],
    industries: &[Vector],
) -> Vec<Option<Vector>> {
    let walks = walk(s, m);
    let n = h.len();
    let d = h[0].len();
    let mut out = vec![None; n];
    for (i, slot) in out.iter_mut().enumerate() {
        let nbrs: Vec<(&usize, &Walks)> = walks.iter().filter(|((t, _), _)| *t == i).map(|((_, j), w)| (j, w)).collect();
        if nbrs.is_empty() {
            continue;
        }
        let mut mean = vec![0.0; d];
        for k in 0..heads {
            let get = |part: &str| p.get(&head_name(layer, m, k, part)).unwrap();
            let w = get("w");
            let wh_i = row_times(&h[i], w);
            let mut scores = Vec::new();
            let mut msgs = Vec::new();
            for (&j, walk) in &nbrs {
                let wh_j = row_times(&h[j], w);
                let mut e = mean_of(&walk.constituents);
                e.push(walk.instances as f64);
                let total: f64 = walk.via.values().sum();
                let mut via = vec![0.0; d];
                for (node, x) in &walk.via {
                    let emb = match node.kind {
                        NodeKind::Bank => &banks[node.index],
                        _ => &industries[node.index],
                    };
                    for (v, y) in via.iter_mut().zip(emb) {
                        *v += x / total * y;
                    }
                }
                let edge: Vector = row_times(&e, get("w_edge"))
                    .iter()
                    .zip(row_times(&via, get("w_via")))
                    .map(|(a, b)| a + b)
                    .collect();
                let raw = dot(&column(get("a_src")), &wh_i)
                    + dot(&column(get("a_dst")), &wh_j)
                    + dot(&column(get("a_edge")), &edge);
                scores.push(if raw > 0.0 { raw } else { 0.2 * raw });
                msgs.push(wh_j);
            }
            let top = scores.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = scores.iter().map(|x| (x - top).exp()).sum();
            for (sc, msg) in scores.iter().zip(&msgs) {
                let a = (sc - top).exp() / z;
                for (acc, v) in mean.iter_mut().zip(msg) {
                    *acc += a * v / heads as f64;
                }
            }
        }
        *slot = Some(mean.iter().map(|v| v.tanh()).collect());
    }
    out
}

fn dense_fusion(paths: &[Vec<Option<Vector>>], own: &[Vector], w_fus: &[f64]) -> Vec<Vector> {
    own.iter()
        .enumerate()
        .map(|(i, h)| {
            let avail: Vec<&Vector> = paths.iter().filter_map(|p| p[i].as_ref()).collect();
            if avail.is_empty() {
                return h.iter().map(|v| v.tanh()).collect();
            }
            let scores: Vec<f64> = avail.iter().map(|x| dot(x, w_fus)).collect();
            let top = scores.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = scores.iter().map(|s| (s - top).exp()).sum();
            let mut acc = vec![0.0; h.len()];
            for (s, x) in scores.iter().zip(&avail) {
                for (a, v) in acc.iter_mut().zip(x.iter()) {
                    *a += (s - top).exp() / z * v;
                }
            }
            acc.iter().map(|v| v.tanh()).collect()
        })
        .collect()
}

fn dense_encoder(p: &ParamStore, s: &GraphSnapshot, paths: &[MetaPath], layers: usize, heads: usize) -> Vec<Vector> {
    let mut h = project(p, NodeKind::Stock, &s.stock_features);
    let banks = project(p, NodeKind::Bank, &s.bank_features);
    let industries = project(p, NodeKind::Industry, &s.industry_features);
    for layer in 0..layers {
        let outs: Vec<Vec<Option<Vector>>> = paths
            .iter()
            .map(|&m| dense_meta_path(p, s, m, layer, heads, &h, &banks, &industries))
            .collect();
        h = dense_fusion(&outs, &h, &column(p.get(&fusion_name(layer)).unwrap()));
    }
    h
}

fn tape_encoder(p: &ParamStore, s: &GraphSnapshot, cfg: &EncoderConfig) -> Matrix {
    let snap = PreparedSnapshot::new(s, &cfg.meta_paths).unwrap();
    let mut tape = Tape::new();
    let b = p.bind(&mut tape);
    let enc = encode_snapshot(&mut tape, &b, &snap, cfg).unwrap();
    tape.value(enc.stocks).clone()
}

fn enc_cfg(d_in: usize, d_e: usize, d_h: usize, layers: usize, heads: usize, paths: Vec<MetaPath>) -> EncoderConfig {
    EncoderConfig {
        d_in,
        d_e,
        d_h,
        layers,
        heads,
        leaky_slope: 0.2,
        meta_paths: paths,
        edge_features: true,
        fusion: Fusion::Attention,
    }
}

fn init(cfg: &EncoderConfig, seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    let mut rng = mdgnn_core::rng::substream(seed, "test");
    for (name, rows, cols, fan_in) in encoder::param_shapes(cfg) {
        store.init_uniform(name, rows, cols, fan_in, &mut rng);
    }
    store
}

fn assert_close(got: &Matrix, want: &[Vector], tol: f64) {
    assert_eq!(got.rows(), want.len());
    for (r, row) in want.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            let g = got.get(r, c);
            assert!((g - v).abs() <= tol, "({r}, {c}): {g} vs {v}");
        }
    }
}

#[test]
fn line_graph_matches_dense_oracle() {
    let s = GraphSnapshot {
        day: 0,
        stock_features: Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap(),
        bank_features: Matrix::zeros(1, 2),
        industry_features: Matrix::zeros(1, 2),
        edge_dim: 1,
        edges: vec![
            EdgeRecord::new(Relation::StockStock, 0, 1, vec![0.5]),
            EdgeRecord::new(Relation::StockStock, 1, 2, vec![-1.0]),
        ],
    };
    let cfg = enc_cfg(2, 1, 2, 1, 2, vec![MetaPath::StockStock]);
    let mut p = init(&cfg, 0);
    for (_, m) in p.iter_mut() {
        m.data_mut().fill(1.0);
    }
    assert_close(&tape_encoder(&p, &s, &cfg), &dense_encoder(&p, &s, &cfg.meta_paths, 1, 2), 1e-12);

    let p = init(&cfg, 7);
    assert_close(&tape_encoder(&p, &s, &cfg), &dense_encoder(&p, &s, &cfg.meta_paths, 1, 2), 1e-12);
}

#[test]
fn single_layer_matches_dense_oracle_on_every_meta_path() {
    let s = toy_day0();
    for paths in [
        vec![MetaPath::StockBankStock],
        vec![MetaPath::StockIndustryIndustryStock],
        vec![MetaPath::Untyped],
        MetaPath::TYPED.to_vec(),
    ] {
        let cfg = enc_cfg(s.input_dim(), s.edge_dim, 6, 1, 2, paths.clone());
        let p = init(&cfg, 3);
        assert_close(&tape_encoder(&p, &s, &cfg), &dense_encoder(&p, &s, &paths, 1, 2), 1e-12);
    }
}

#[test]
fn two_layers_match_composed_oracle_on_toy_day0() {
    let s = toy_day0();
    let model = Model::for_graph(
        &ModelConfig {
            d_h: 8,
            ..ModelConfig::default()
        },
        &synth::generate(&synth::preset("toy").unwrap()).unwrap(),
    )
    .unwrap();
    assert_eq!(model.encoder.layers, 2);
    let p = model.init_params(11);
    let want = dense_encoder(&p, &s, &model.encoder.meta_paths, 2, model.encoder.heads);
    assert_close(&tape_encoder(&p, &s, &model.encoder), &want, 1e-12);
}

#[test]
fn fusion_matches_scalar_score_oracle() {
    let n = 3;
    let rows = |seed: f64| -> Matrix {
        Matrix::from_rows(&(0..n).map(|i| vec![(seed * (i + 1) as f64).sin(), (seed + i as f64).cos()]).collect::<Vec<_>>())
            .unwrap()
    };
    let outs = [rows(0.3), rows(1.7), rows(2.9)];
    let w_fus = vec![0.8, -0.4];
    let mut tape = Tape::new();
    let vars: Vec<_> = outs.iter().map(|m| Some(tape.leaf(m.clone()))).collect();
    let own = tape.leaf(Matrix::zeros(n, 2));
    let w = tape.leaf(Matrix::column(w_fus.clone()).unwrap());
    let avail = vec![vec![true; n]; 3];
    let fused = encoder::fuse_relations(&mut tape, &vars, &avail, own, Some(w)).unwrap();

    let per_path: Vec<Vec<Option<Vector>>> = outs
        .iter()
        .map(|m| (0..n).map(|i| Some(m.row(i).to_vec())).collect())
        .collect();
    let own_rows = vec![vec![0.0; 2]; n];
    assert_close(tape.value(fused.embeddings), &dense_fusion(&per_path, &own_rows, &w_fus), 1e-14);
    for i in 0..n {
        let sum: f64 = tape.value(fused.weights).row(i).iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert_eq!(tape.value(fused.weights).get(i, 3), 0.0);
    }
}

#[test]
fn zero_edge_snapshot_is_tanh_chain_of_own_projection() {
    let mut s = toy_day0();
    s.edges.clear();
    let cfg = enc_cfg(s.input_dim(), s.edge_dim, 4, 2, 2, MetaPath::TYPED.to_vec());
    let p = init(&cfg, 5);
    let got = tape_encoder(&p, &s, &cfg);
    let own = project(&p, NodeKind::Stock, &s.stock_features);
    let want: Vec<Vector> = own.iter().map(|r| r.iter().map(|v| v.tanh().tanh()).collect()).collect();
    assert_close(&got, &want, 0.0);
}

#[test]
fn single_neighbour_gets_full_attention() {
    let s = GraphSnapshot {
        day: 0,
        stock_features: Matrix::from_rows(&[vec![0.3, -0.1], vec![2.0, 0.4]]).unwrap(),
        bank_features: Matrix::zeros(1, 2),
        industry_features: Matrix::zeros(1, 2),
        edge_dim: 1,
        edges: vec![EdgeRecord::new(Relation::StockStock, 0, 1, vec![0.2])],
    };
    let cfg = enc_cfg(2, 1, 3, 1, 3, vec![MetaPath::StockStock]);
    let p = init(&cfg, 2);
    let snap = PreparedSnapshot::new(&s, &cfg.meta_paths).unwrap();
    let mut tape = Tape::new();
    let b = p.bind(&mut tape);
    let enc = encode_snapshot(&mut tape, &b, &snap, &cfg).unwrap();
    let out = enc.attention[0][0].as_ref().unwrap();
    for a in &out.attention {
        assert_eq!(tape.value(*a).data(), &[1.0, 1.0]);
    }
}

#[test]
fn identical_neighbours_split_attention_evenly() {
    let s = GraphSnapshot {
        day: 0,
        stock_features: Matrix::from_rows(&[vec![0.3, -0.1], vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap(),
        bank_features: Matrix::zeros(1, 2),
        industry_features: Matrix::zeros(1, 2),
        edge_dim: 1,
        edges: vec![
            EdgeRecord::new(Relation::StockStock, 0, 1, vec![0.2]),
            EdgeRecord::new(Relation::StockStock, 0, 2, vec![0.2]),
        ],
    };
    let cfg = enc_cfg(2, 1, 3, 1, 2, vec![MetaPath::StockStock]);
    let p = init(&cfg, 4);
    let snap = PreparedSnapshot::new(&s, &cfg.meta_paths).unwrap();
    let mut tape = Tape::new();
    let b = p.bind(&mut tape);
    let enc = encode_snapshot(&mut tape, &b, &snap, &cfg).unwrap();
    let out = enc.attention[0][0].as_ref().unwrap();
    for a in &out.attention {
        // edges sorted by (target, neighbour): (0,1), (0,2), (1,0), (2,0)
        assert_eq!(&tape.value(*a).data()[..2], &[0.5, 0.5]);
    }
}
