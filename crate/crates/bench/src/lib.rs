//! Benchmark fixtures shared by the criterion targets.

use mdgnn_core::graph::DynamicGraph;
use mdgnn_core::model::{Model, ModelConfig, PreparedData};
use mdgnn_core::synth;

/// A simulated market plus a model sized for it.
pub struct Fixture {
    pub graph: DynamicGraph,
    pub model: Model,
    pub data: PreparedData,
}

pub fn fixture(preset: &str, days: usize, d_h: usize) -> Fixture {
    let market = synth::MarketConfig {
        days,
        ..synth::preset(preset).expect("known preset")
    };
    let graph = synth::generate(&market).expect("valid market");
    let cfg = ModelConfig {
        d_h,
        ..ModelConfig::default()
    };
    let model = Model::for_graph(&cfg, &graph).expect("valid model");
    let data = model.prepare(&graph).expect("prepared");
    Fixture { graph, model, data }
}
