use mdgnn_core::graph::DynamicGraph;
use mdgnn_core::model::{self, Model, ModelConfig, PreparedData};
use mdgnn_core::synth::{self, MarketConfig};
use mdgnn_core::train::{self, CheckpointMeta, LossKind, TrainConfig};
use mdgnn_core::{Matrix, ParamStore, Tape};

fn tiny_graph() -> DynamicGraph {
    synth::generate(&MarketConfig {
        days: 24,
        min_window: 3,
        ..synth::preset("toy").unwrap()
    })
    .unwrap()
}

fn tiny_model(g: &DynamicGraph) -> Model {
    let cfg = ModelConfig {
        d_h: 4,
        layers: 1,
        heads: 1,
        temporal_heads: 2,
        window: 2,
        ..ModelConfig::default()
    };
    Model::for_graph(&cfg, g).unwrap()
}

fn head_params(w: Vec<f64>, b: f64) -> ParamStore {
    let mut p = ParamStore::new();
    p.insert(model::HEAD_W, Matrix::column(w).unwrap());
    p.insert(model::HEAD_B, Matrix::scalar(b).unwrap());
    p
}

fn run_head(p: &ParamStore, z: Matrix) -> Vec<f64> {
    let mut tape = Tape::new();
    let b = p.bind(&mut tape);
    let z = tape.constant(z);
    let out = model::head(&mut tape, &b, z).unwrap();
    tape.value(out).data().to_vec()
}

#[test]
fn head_matches_hand_computation() {
    let z = Matrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 0.25]]).unwrap();
    assert_eq!(run_head(&head_params(vec![0.0, 0.0], 0.0), z.clone()), vec![0.5, 0.5]);
    assert!(run_head(&head_params(vec![0.0, 0.0], 40.0), z.clone()).iter().all(|p| *p > 1.0 - 1e-12));

    let got = run_head(&head_params(vec![0.3, 0.1], -0.2), z);
    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    let want = [sig(0.3 - 0.2 - 0.2), sig(0.15 + 0.025 - 0.2)];
    for (g, w) in got.iter().zip(want) {
        assert!((g - w).abs() < 1e-15);
    }
}

fn explicit_loss(preds: &[Vec<f64>], data: &PreparedData, days: &[usize], kind: LossKind, scale: f64) -> f64 {
    let (mut total, mut count) = (0.0, 0.0);
    for (p, &d) in preds.iter().zip(days) {
        for (i, y) in data.labels.day(d).into_iter().enumerate() {
            let Some(y) = y else { continue };
            let q = p[i];
            total += match kind {
                LossKind::Bce => {
                    if y > 0.0 {
                        -q.ln()
                    } else {
                        -(1.0 - q).ln()
                    }
                }
                LossKind::Mse => (q - 1.0 / (1.0 + (-y / scale).exp())).powi(2),
            };
            count += 1.0;
        }
    }
    total / count
}

#[test]
fn loss_matches_explicit_loop() {
    let g = tiny_graph();
    let m = tiny_model(&g);
    let data = m.prepare(&g).unwrap();
    let days = [3, 7, 12];
    let n = data.n_stocks();
    let preds: Vec<Vec<f64>> = days
        .iter()
        .map(|&d| (0..n).map(|i| 0.05 + 0.9 * ((i * 7 + d) % 11) as f64 / 10.0).collect())
        .collect();
    for kind in [LossKind::Bce, LossKind::Mse] {
        let mut tape = Tape::new();
        let vars: Vec<_> = preds
            .iter()
            .map(|p| tape.constant(Matrix::column(p.clone()).unwrap()))
            .collect();
        let l = train::loss(&mut tape, &vars, &data, &days, kind, 0.01).unwrap();
        let want = explicit_loss(&preds, &data, &days, kind, 0.01);
        assert!((tape.value(l).item().unwrap() - want).abs() < 1e-12, "{kind:?}");
    }
}

#[test]
fn perfect_predictions_have_near_zero_loss() {
    let g = tiny_graph();
    let data = tiny_model(&g).prepare(&g).unwrap();
    let days = [4, 5];
    let mut tape = Tape::new();
    let vars: Vec<_> = days
        .iter()
        .map(|&d| {
            let p = data
                .labels
                .day(d)
                .iter()
                .map(|y| if y.unwrap_or(0.0) > 0.0 { 1.0 } else { 0.0 })
                .collect();
            tape.constant(Matrix::column(p).unwrap())
        })
        .collect();
    let l = train::loss(&mut tape, &vars, &data, &days, LossKind::Bce, 0.01).unwrap();
    assert!(tape.value(l).item().unwrap() < 1e-10);
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let g = tiny_graph();
    let m = tiny_model(&g);
    let data = m.prepare(&g).unwrap();
    let init = m.init_params(3);
    let cfg = TrainConfig {
        epochs: 3,
        patience: 3,
        lr: 0.0,
        ..TrainConfig::default()
    };
    let out = train::train(&m, &data, init.clone(), 0..14, 14..18, &cfg, 3).unwrap();
    assert_eq!(out.params, init);
    assert_eq!(out.curve.len(), 3);
    assert!(out.curve.windows(2).all(|w| w[0].train_loss == w[1].train_loss));
}

#[test]
fn same_seed_gives_identical_curves() {
    let g = tiny_graph();
    let m = tiny_model(&g);
    let data = m.prepare(&g).unwrap();
    let cfg = TrainConfig {
        epochs: 8,
        patience: 8,
        lr: 0.01,
        batch_days: 4,
        ..TrainConfig::default()
    };
    let run = || train::train(&m, &data, m.init_params(5), 0..14, 14..18, &cfg, 5).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.curve, b.curve);
    assert_eq!(a.params, b.params);
    assert_eq!(a.best_epoch, b.best_epoch);
}

#[test]
fn training_reduces_loss() {
    let g = tiny_graph();
    let m = tiny_model(&g);
    let data = m.prepare(&g).unwrap();
    let cfg = TrainConfig {
        epochs: 30,
        patience: 30,
        lr: 0.01,
        ..TrainConfig::default()
    };
    let out = train::train(&m, &data, m.init_params(1), 0..14, 14..18, &cfg, 1).unwrap();
    let first = out.curve.first().unwrap().train_loss;
    let last = out.curve.last().unwrap().train_loss;
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn overlapping_ranges_are_rejected() {
    let g = tiny_graph();
    let m = tiny_model(&g);
    let data = m.prepare(&g).unwrap();
    let cfg = TrainConfig::default();
    assert!(train::train(&m, &data, m.init_params(0), 0..14, 10..18, &cfg, 0).is_err());
}

#[test]
fn checkpoint_round_trip() {
    let g = tiny_graph();
    let m = tiny_model(&g);
    let params = m.init_params(9);
    let meta = CheckpointMeta {
        config: serde_json::json!({"model": {"d_h": 4}}),
        epoch: 17,
        val_ic: Some(0.125),
    };
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("nested/fold0");
    let (bin, side) = train::save_checkpoint(&stem, &params, &meta).unwrap();
    assert!(bin.exists() && side.exists());
    let (p, back) = train::load_checkpoint(&stem).unwrap();
    assert_eq!(p, params);
    assert_eq!(back, meta);
    m.check_params(&p).unwrap();
}

#[test]
fn three_year_calendar_gives_seven_folds() {
    // Six-month retrain cycle over three years of trading days.
    let s = train::rolling_schedule(120 + 20 + 7 * 120, 120, 20, 120).unwrap();
    assert_eq!(s.folds.len(), 7);
    for f in &s.folds {
        train::leakage_guard(f).unwrap();
    }
    assert_eq!(s.folds.iter().map(|f| f.test.len()).sum::<usize>(), 7 * 120);
}
