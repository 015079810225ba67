//! Random graphs and models shared by the property and acceptance suites.
#![allow(dead_code)]

use mdgnn_core::encoder::{EncoderConfig, MetaPath, PreparedSnapshot};
use mdgnn_core::graph::{GraphSnapshot, Relation};
use mdgnn_core::model::{Model, ModelConfig};
use mdgnn_core::synth::{self, MarketConfig};
use mdgnn_core::{Matrix, ParamStore};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64, name: &str) -> ChaCha8Rng {
    mdgnn_core::rng::substream(seed, name)
}

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Matrix::new(rows, cols, data).unwrap()
}

/// A toy-market snapshot with a random subset of its edges and fresh
/// random stock features.
pub fn random_snapshot(seed: u64, keep: f64) -> GraphSnapshot {
    let cfg = MarketConfig {
        days: 12,
        min_window: 3,
        seed,
        ..synth::preset("toy").unwrap()
    };
    let g = synth::generate(&cfg).unwrap();
    let mut r = rng(seed, "random-snapshot");
    let mut s = g.snapshots[r.random_range(0..g.snapshots.len())].clone();
    s.edges.retain(|_| r.random::<f64>() < keep);
    let (n, d) = (s.n_stocks(), s.input_dim());
    s.stock_features = random_matrix(&mut r, n, d, 1.0);
    s
}

pub fn encoder_config(s: &GraphSnapshot, layers: usize, heads: usize, d_h: usize) -> EncoderConfig {
    let cfg = ModelConfig {
        d_h,
        layers,
        heads,
        ..ModelConfig::default()
    };
    Model::new(&cfg, s.input_dim(), s.edge_dim).unwrap().encoder
}

/// Encoder parameters drawn from the model initialiser, with the fusion
/// vectors enlarged so fusion weights are far from uniform.
pub fn encoder_params(cfg: &EncoderConfig, seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    let mut r = rng(seed, "encoder-params");
    for (name, rows, cols, fan_in) in mdgnn_core::encoder::param_shapes(cfg) {
        store.init_uniform(name, rows, cols, fan_in, &mut r);
    }
    for (name, m) in store.iter_mut() {
        if name.ends_with("fuse.w") {
            m.data_mut().iter_mut().for_each(|v| *v *= 8.0);
        }
    }
    store
}

pub fn prepare(s: &GraphSnapshot) -> PreparedSnapshot {
    PreparedSnapshot::new(s, &MetaPath::TYPED).unwrap()
}

pub fn has(s: &GraphSnapshot, r: Relation) -> bool {
    s.edge_count(r) > 0
}
