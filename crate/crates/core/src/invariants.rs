//! Quick self-checks run by `mdgnn check`: gradient agreement, attention
//! normalisation, causality, permutation equivariance and metric examples
//! on the toy market.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use crate::encoder::encode_snapshot;
use crate::error::Result;
use crate::gradcheck::grad_check;
use crate::graph::DynamicGraph;
use crate::metrics::{cumulative_return, daily_ic, information_ratio, precision_at_k, topk_portfolio, DayScores};
use crate::model::{Model, ModelConfig};
use crate::tape::Tape;
use crate::train::{self, LossKind};
use crate::{synth, Matrix};

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn result(name: &'static str, passed: bool, detail: String) -> CheckResult {
    CheckResult { name, passed, detail }
}

fn small_model(g: &DynamicGraph) -> Result<Model> {
    let cfg = ModelConfig {
        d_h: 4,
        layers: 2,
        heads: 2,
        temporal_heads: 2,
        window: 4,
        ..ModelConfig::default()
    };
    Model::for_graph(&cfg, g)
}

fn gradients(g: &DynamicGraph, seed: u64) -> Result<CheckResult> {
    let model = small_model(g)?;
    let data = model.prepare(g)?;
    let days = [4, 6];
    let report = grad_check(
        |tape, b| {
            let pass = model.forward(tape, b, &data, &days)?;
            train::loss(tape, &pass.predictions, &data, &days, LossKind::Bce, 0.01)
        },
        &model.init_params(seed),
        1e-5,
    )?;
    Ok(result(
        "gradient",
        report.max_rel_error <= 1e-4,
        format!("{} entries, max relative error {:.2e}", report.entries_checked, report.max_rel_error),
    ))
}

fn is_distribution(row: &[f64]) -> bool {
    row.iter().all(|v| (0.0..=1.0).contains(v)) && (row.iter().sum::<f64>() - 1.0).abs() <= 1e-9
}

fn attention(g: &DynamicGraph, seed: u64) -> Result<CheckResult> {
    let model = small_model(g)?;
    let data = model.prepare(g)?;
    let params = model.init_params(seed);
    let (mut rows, mut bad) = (0, 0);
    for snap in &data.snapshots {
        let mut tape = Tape::new();
        let b = params.bind(&mut tape);
        let out = encode_snapshot(&mut tape, &b, snap, &model.encoder)?;
        for (layer, weights) in out.attention.iter().zip(&out.fusion_weights) {
            for (path, o) in snap.paths.iter().zip(layer) {
                let Some(o) = o else { continue };
                for alpha in &o.attention {
                    let mut groups = vec![Vec::new(); snap.n_stocks()];
                    for (e, a) in path.edges.iter().zip(tape.value(*alpha).data()) {
                        groups[e.target].push(*a);
                    }
                    for grp in groups.iter().filter(|g| !g.is_empty()) {
                        rows += 1;
                        bad += usize::from(!is_distribution(grp));
                    }
                }
            }
            let w = tape.value(*weights);
            for i in 0..w.rows() {
                rows += 1;
                bad += usize::from(!is_distribution(w.row(i)));
            }
        }
    }
    Ok(result("attention", bad == 0, format!("{rows} rows, {bad} not on the simplex")))
}

fn causality(g: &DynamicGraph, seed: u64) -> Result<CheckResult> {
    let model = small_model(g)?;
    let data = model.prepare(g)?;
    let params = model.init_params(seed);
    let mut rng = crate::rng::substream(seed, "check/causality");
    let mut moved_days = 0;
    let days: Vec<usize> = (0..data.n_days()).step_by(5).collect();
    for &t in &days {
        let base = model.predict(&params, &data, &[t])?;
        let mut later = data.clone();
        for s in later.snapshots.iter_mut().skip(t + 1) {
            s.stock_features.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-5.0..5.0));
        }
        moved_days += usize::from(model.predict(&params, &later, &[t])? != base);
    }
    Ok(result(
        "causality",
        moved_days == 0,
        format!("{} days, {moved_days} changed by later snapshots", days.len()),
    ))
}

fn equivariance(g: &DynamicGraph, seed: u64) -> Result<CheckResult> {
    let model = small_model(g)?;
    let params = model.init_params(seed);
    let snapshot = &g.snapshots[g.n_days() / 2];
    let encode = |s: &crate::graph::GraphSnapshot| -> Result<Matrix> {
        let prepared = crate::encoder::PreparedSnapshot::new(s, &model.encoder.meta_paths)?;
        let mut tape = Tape::new();
        let b = params.bind(&mut tape);
        let out = encode_snapshot(&mut tape, &b, &prepared, &model.encoder)?;
        Ok(tape.value(out.stocks).clone())
    };
    let base = encode(snapshot)?;
    let mut rng = crate::rng::substream(seed, "check/permutation");
    let mut mismatched = 0;
    for _ in 0..10 {
        let mut perm: Vec<usize> = (0..snapshot.n_stocks()).collect();
        perm.shuffle(&mut rng);
        let moved = encode(&snapshot.permute_stocks(&perm)?)?;
        mismatched += usize::from(perm.iter().enumerate().any(|(old, &new)| base.row(old) != moved.row(new)));
    }
    Ok(result("equivariance", mismatched == 0, format!("10 permutations, {mismatched} mismatched")))
}

fn metrics() -> CheckResult {
    let day = |p: &[f64], y: &[f64]| DayScores {
        day: 0,
        predictions: p.to_vec(),
        returns: y.to_vec(),
        valid: vec![true; p.len()],
    };
    let cases = [
        daily_ic(&day(&[1.0, 2.0, 3.0], &[0.1, 0.2, 0.3])) == Some(1.0),
        daily_ic(&day(&[3.0, 2.0, 1.0], &[0.1, 0.2, 0.3])) == Some(-1.0),
        topk_portfolio(&day(&[0.1, 0.3, 0.2], &[0.01, -0.02, 0.04]), 1).map(|t| t.1) == Some(-0.02),
        topk_portfolio(&day(&[0.5, 0.9, 0.9], &[0.0; 3]), 1).map(|t| t.0) == Some(vec![1]),
        cumulative_return(&[0.01, -0.01]) == 1.01 * 0.99 - 1.0,
        information_ratio(&[0.01; 3]).is_none(),
        information_ratio(&[0.01, -0.01]) == Some(0.0),
        precision_at_k(&day(&[0.9, 0.8, 0.1], &[0.01, -0.02, 0.01]), 2) == Some(0.5),
    ];
    let failed = cases.iter().filter(|c| !**c).count();
    result("metrics", failed == 0, format!("{} examples, {failed} failed", cases.len()))
}

/// Runs every check on the toy market generated from `seed`.
pub fn run_all(seed: u64) -> Result<Vec<CheckResult>> {
    let market = synth::MarketConfig {
        seed,
        ..synth::preset("toy")?
    };
    let g = synth::generate(&market)?;
    Ok(vec![
        gradients(&g, seed)?,
        attention(&g, seed)?,
        causality(&g, seed)?,
        equivariance(&g, seed)?,
        metrics(),
    ])
}
