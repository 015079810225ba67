use mdgnn_core::temporal::{
    self, alibi_bias, alibi_slopes, assemble_window, attend_day, forward_mask, project_day, temporal_attend,
    TemporalConfig,
};
use mdgnn_core::{Matrix, ParamStore, Tape, MASKED};
use rand::Rng;

fn params(cfg: &TemporalConfig, seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    let mut rng = mdgnn_core::rng::substream(seed, "temporal-test");
    for (name, rows, cols, fan_in) in temporal::param_shapes(cfg) {
        store.init_uniform(name, rows, cols, fan_in, &mut rng);
    }
    store
}

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = mdgnn_core::rng::substream(seed, "matrix");
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Matrix::new(rows, cols, data).unwrap()
}

fn mm(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut s = 0.0;
            for k in 0..a.cols() {
                s += a.get(i, k) * b.get(k, j);
            }
            out.set(i, j, s);
        }
    }
    out
}

/// Causal ALiBi attention written out position by position; rows for
/// invalid query positions are left at zero.
fn dense_window(x: &Matrix, valid: &[bool], p: &ParamStore, cfg: &TemporalConfig) -> (Matrix, Matrix) {
    let q = mm(x, p.get(temporal::QUERY).unwrap());
    let k = mm(x, p.get(temporal::KEY).unwrap());
    let v = mm(x, p.get(temporal::VALUE).unwrap());
    let len = x.rows();
    let mut attn = Matrix::zeros(len, len);
    for slope in alibi_slopes(cfg.heads) {
        for qi in 0..len {
            if !valid[qi] {
                continue;
            }
            let mut scores = Vec::new();
            for j in 0..=qi {
                if !valid[j] {
                    continue;
                }
                let dot: f64 = (0..cfg.d_h).map(|c| q.get(qi, c) * k.get(j, c)).sum();
                scores.push((j, dot / (cfg.d_h as f64).sqrt() - slope * (qi - j) as f64));
            }
            let top = scores.iter().map(|s| s.1).fold(f64::MIN, f64::max);
            let z: f64 = scores.iter().map(|s| (s.1 - top).exp()).sum();
            for (j, s) in scores {
                let a = attn.get(qi, j) + (s - top).exp() / z / cfg.heads as f64;
                attn.set(qi, j, a);
            }
        }
    }
    let out = mm(&mm(&attn, &v), p.get(temporal::OUTPUT).unwrap());
    (out, attn)
}

#[test]
fn four_day_window_matches_dense_oracle() {
    let cfg = TemporalConfig { d_h: 5, heads: 4, window: 3 };
    let p = params(&cfg, 1);
    for (seed, valid) in [
        (10, vec![true; 4]),
        (11, vec![false, true, true, true]),
        (12, vec![false, false, false, true]),
    ] {
        let x = random_matrix(4, cfg.d_h, seed);
        let (want_out, want_attn) = dense_window(&x, &valid, &p, &cfg);
        let mut tape = Tape::new();
        let b = p.bind(&mut tape);
        let w = tape.leaf(x.clone());
        let got = temporal_attend(&mut tape, &b, w, &valid, &cfg).unwrap();
        let outs = tape.value(got.outputs);
        let attn = tape.value(got.attention);
        for r in 0..outs.rows() {
            let q = got.first + r;
            for c in 0..cfg.d_h {
                assert!((outs.get(r, c) - want_out.get(q, c)).abs() < 1e-12);
            }
            for j in 0..4 {
                assert!((attn.get(r, j) - want_attn.get(q, j)).abs() < 1e-12);
            }
        }
        let last = tape.value(got.last);
        for c in 0..cfg.d_h {
            assert!((last.get(0, c) - want_out.get(3, c)).abs() < 1e-12);
        }
    }
}

#[test]
fn batched_day_attention_equals_last_window_row() {
    let cfg = TemporalConfig { d_h: 4, heads: 3, window: 5 };
    let p = params(&cfg, 2);
    let n = 6;
    let daily: Vec<Matrix> = (0..9).map(|d| random_matrix(n, cfg.d_h, 100 + d)).collect();
    for t in [0, 2, 5, 8] {
        let mut tape = Tape::new();
        let b = p.bind(&mut tape);
        let mut days = Vec::new();
        for pos in 0..=cfg.window {
            days.push((t + pos).checked_sub(cfg.window).map(|d| {
                let e = tape.leaf(daily[d].clone());
                project_day(&mut tape, &b, e).unwrap()
            }));
        }
        let z = attend_day(&mut tape, &b, &days, &cfg).unwrap();
        let batched = tape.value(z).clone();
        for i in 0..n {
            let win = assemble_window(&daily, i, t, cfg.window).unwrap();
            let x = tape.leaf(win.rows.clone());
            let out = temporal_attend(&mut tape, &b, x, &win.valid, &cfg).unwrap();
            let last = tape.value(out.last);
            for c in 0..cfg.d_h {
                assert!((batched.get(i, c) - last.get(0, c)).abs() < 1e-12, "t {t} stock {i}");
            }
        }
    }
}

#[test]
fn singleton_window_is_projected_value() {
    let cfg = TemporalConfig { d_h: 3, heads: 2, window: 4 };
    let p = params(&cfg, 3);
    let x = random_matrix(5, 3, 9);
    let valid = [false, false, false, false, true];
    let mut tape = Tape::new();
    let b = p.bind(&mut tape);
    let w = tape.leaf(x.clone());
    let out = temporal_attend(&mut tape, &b, w, &valid, &cfg).unwrap();
    let h = Matrix::new(1, 3, x.row(4).to_vec()).unwrap();
    let want = mm(&mm(&h, p.get(temporal::VALUE).unwrap()), p.get(temporal::OUTPUT).unwrap());
    assert!(tape.value(out.last).max_abs_diff(&want) < 1e-14);
}

#[test]
fn identical_keys_favour_recent_days() {
    let cfg = TemporalConfig { d_h: 3, heads: 4, window: 50 };
    let mut p = params(&cfg, 4);
    p.get_mut(temporal::KEY).unwrap().data_mut().fill(0.0);
    let x = random_matrix(51, 3, 5);
    let valid = vec![true; 51];
    let mut tape = Tape::new();
    let b = p.bind(&mut tape);
    let w = tape.leaf(x);
    let out = temporal_attend(&mut tape, &b, w, &valid, &cfg).unwrap();
    let attn = tape.value(out.attention);
    let row = attn.row(attn.rows() - 1);
    for j in 1..row.len() {
        assert!(row[j] > row[j - 1], "weight must grow toward the query day");
    }
    assert!(row[50] > 5.0 * row[0]);
}

#[test]
fn slopes_bias_and_mask_examples() {
    let s = alibi_slopes(8);
    assert_eq!(s[0], 0.5);
    assert_eq!(s[7], 2f64.powi(-8));
    assert_eq!(alibi_bias(1, 0.7).data(), &[0.0]);
    assert_eq!(alibi_bias(3, 1.0).row(2), &[-2.0, -1.0, 0.0]);
    assert_eq!(forward_mask(2).data(), &[0.0, MASKED, 0.0, 0.0]);
    let m = forward_mask(6);
    for q in 0..6 {
        assert_eq!(m.get(q, q), 0.0);
        for j in q + 1..6 {
            assert_eq!(m.get(q, j), MASKED);
        }
    }
}

#[test]
fn window_assembly_cases() {
    let daily: Vec<Matrix> = (0..12).map(|d| Matrix::filled(2, 1, d as f64)).collect();
    let w = assemble_window(&daily, 0, 0, 3).unwrap();
    assert_eq!(w.valid, vec![false, false, false, true]);
    assert_eq!(w.rows.data(), &[0.0, 0.0, 0.0, 0.0]);

    let w = assemble_window(&daily, 1, 10, 10).unwrap();
    assert!(w.valid.iter().all(|v| *v));
    assert_eq!(w.rows.data(), (0..=10).map(f64::from).collect::<Vec<_>>().as_slice());

    let a = assemble_window(&daily, 0, 10, 4).unwrap();
    let b = assemble_window(&daily, 0, 11, 4).unwrap();
    assert_eq!(&a.rows.data()[1..], &b.rows.data()[..4]);
}
