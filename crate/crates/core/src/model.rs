//! Full stock-movement model: intra-day encoder, temporal attention and a
//! sigmoid output head, plus a feature-only MLP control.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::encoder::{self, EncoderConfig, Fusion, MetaPath, PreparedSnapshot};
use crate::error::{Error, Result};
use crate::graph::{DynamicGraph, LabelFrame, RelationSet};
use crate::matrix::Matrix;
use crate::params::{Bindings, ParamStore};
use crate::tape::{Tape, Var};
use crate::temporal::{self, DayProjection, TemporalConfig};

pub const HEAD_W: &str = "head.w";
pub const HEAD_B: &str = "head.b";
pub const MLP_W: &str = "mlp.w";
pub const MLP_B: &str = "mlp.b";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    #[default]
    Mdgnn,
    /// Per-stock features only, no graph or temporal context.
    Mlp,
}

/// Components switched off for ablation studies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub no_edge_features: bool,
    /// Collapse all meta-paths into one untyped neighbourhood.
    pub no_meta_path: bool,
    /// Average meta-paths instead of learning fusion weights.
    pub no_hier_fusion: bool,
    pub no_temporal: bool,
    pub relations: RelationSet,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            no_edge_features: false,
            no_meta_path: false,
            no_hier_fusion: false,
            no_temporal: false,
            relations: RelationSet::ALL,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub d_h: usize,
    pub layers: usize,
    pub heads: usize,
    pub temporal_heads: usize,
    pub window: usize,
    pub leaky_slope: f64,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::Mdgnn,
            d_h: 32,
            layers: 2,
            heads: 2,
            temporal_heads: 4,
            window: 10,
            leaky_slope: 0.2,
            ablation: Ablation::default(),
        }
    }
}

impl ModelConfig {
    /// Meta-paths left after ablation.
    pub fn meta_paths(&self) -> Vec<MetaPath> {
        let kept = self.ablation.relations;
        if self.ablation.no_meta_path {
            return if kept == RelationSet::EMPTY {
                Vec::new()
            } else {
                vec![MetaPath::Untyped]
            };
        }
        MetaPath::TYPED
            .into_iter()
            .filter(|m| m.required().is_subset(kept))
            .collect()
    }
}

/// `sigmoid(z W + b)`: probability of a positive excess return.
pub fn head(tape: &mut Tape, b: &Bindings, z: Var) -> Result<Var> {
    let logits = tape.matmul(z, b.var(HEAD_W)?)?;
    let logits = tape.add_row_bias(logits, b.var(HEAD_B)?)?;
    tape.sigmoid(logits)
}

/// Model dimensions resolved against a dataset.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub encoder: EncoderConfig,
    pub temporal: TemporalConfig,
}

/// Snapshots with meta-paths resolved, plus labels.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub snapshots: Vec<PreparedSnapshot>,
    pub labels: LabelFrame,
}

impl PreparedData {
    pub fn n_days(&self) -> usize {
        self.snapshots.len()
    }

    pub fn n_stocks(&self) -> usize {
        self.snapshots.first().map_or(0, PreparedSnapshot::n_stocks)
    }
}

/// Predictions and inspection handles from one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    /// `n × 1` probabilities per requested day, in request order.
    pub predictions: Vec<Var>,
    /// Per-day encoder fusion weights, one `n × (P + 1)` matrix per layer.
    pub fusion: BTreeMap<usize, Vec<Var>>,
}

impl Model {
    pub fn new(cfg: &ModelConfig, d_in: usize, d_e: usize) -> Result<Self> {
        if cfg.window == 0 && !cfg.ablation.no_temporal && cfg.architecture == Architecture::Mdgnn {
            log::debug!("window 0: temporal attention sees only the current day");
        }
        let encoder = EncoderConfig {
            d_in,
            d_e,
            d_h: cfg.d_h,
            layers: cfg.layers,
            heads: cfg.heads,
            leaky_slope: cfg.leaky_slope,
            meta_paths: cfg.meta_paths(),
            edge_features: !cfg.ablation.no_edge_features,
            fusion: if cfg.ablation.no_hier_fusion {
                Fusion::Mean
            } else {
                Fusion::Attention
            },
        };
        encoder.validate()?;
        let temporal = TemporalConfig {
            d_h: cfg.d_h,
            heads: cfg.temporal_heads,
            window: cfg.window,
        };
        temporal.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            temporal,
        })
    }

    pub fn for_graph(cfg: &ModelConfig, g: &DynamicGraph) -> Result<Self> {
        let first = g
            .snapshots
            .first()
            .ok_or_else(|| Error::Data("dataset has no snapshots".into()))?;
        Self::new(cfg, first.input_dim(), first.edge_dim)
    }

    pub fn uses_temporal(&self) -> bool {
        self.cfg.architecture == Architecture::Mdgnn && !self.cfg.ablation.no_temporal
    }

    /// `(name, rows, cols, fan_in)` for every parameter.
    pub fn param_shapes(&self) -> Vec<(String, usize, usize, usize)> {
        let d_h = self.cfg.d_h;
        let mut out = match self.cfg.architecture {
            Architecture::Mlp => {
                let d_in = self.encoder.d_in;
                vec![
                    (MLP_W.to_string(), d_in, d_h, d_in),
                    (MLP_B.to_string(), 1, d_h, d_in),
                ]
            }
            Architecture::Mdgnn => {
                let mut v = encoder::param_shapes(&self.encoder);
                if self.uses_temporal() {
                    v.extend(temporal::param_shapes(&self.temporal));
                }
                v
            }
        };
        out.push((HEAD_W.to_string(), d_h, 1, d_h));
        out.push((HEAD_B.to_string(), 1, 1, d_h));
        out
    }

    /// Each parameter draws from its own named stream, so variants that share
    /// a parameter name and shape start from identical values.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        for (name, rows, cols, fan_in) in self.param_shapes() {
            let mut rng = crate::rng::substream(seed, &format!("init/{name}"));
            store.init_uniform(name, rows, cols, fan_in, &mut rng);
        }
        store
    }

    /// Checks that `params` has exactly the expected names and shapes.
    pub fn check_params(&self, params: &ParamStore) -> Result<()> {
        let shapes = self.param_shapes();
        for (name, rows, cols, _) in &shapes {
            let m = params.require(name)?;
            if m.shape() != (*rows, *cols) {
                return Err(Error::Contract(format!(
                    "parameter {name} is {:?}, expected {:?}",
                    m.shape(),
                    (rows, cols)
                )));
            }
        }
        if params.len() != shapes.len() {
            return Err(Error::Contract(format!(
                "parameter set has {} entries, model expects {}",
                params.len(),
                shapes.len()
            )));
        }
        Ok(())
    }

    /// Applies the relation subset and resolves meta-paths for every day.
    pub fn prepare(&self, g: &DynamicGraph) -> Result<PreparedData> {
        g.check()?;
        let labels = g.build_labels()?;
        let kept = g.relation_subset(self.cfg.ablation.relations);
        let paths = match self.cfg.architecture {
            Architecture::Mlp => Vec::new(),
            Architecture::Mdgnn => self.encoder.meta_paths.clone(),
        };
        let snapshots = kept
            .snapshots
            .iter()
            .map(|s| PreparedSnapshot::new(s, &paths))
            .collect::<Result<_>>()?;
        Ok(PreparedData { snapshots, labels })
    }

    fn embed_day(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        snap: &PreparedSnapshot,
    ) -> Result<(Var, Vec<Var>)> {
        match self.cfg.architecture {
            Architecture::Mlp => {
                let x = tape.constant(snap.stock_features.clone());
                let h = tape.matmul(x, b.var(MLP_W)?)?;
                let h = tape.add_row_bias(h, b.var(MLP_B)?)?;
                Ok((tape.tanh(h)?, Vec::new()))
            }
            Architecture::Mdgnn => {
                let enc = encoder::encode_snapshot(tape, b, snap, &self.encoder)?;
                Ok((enc.stocks, enc.fusion_weights))
            }
        }
    }

    /// Builds predictions for `days` on `tape`. Day `t` only reads snapshots
    /// `t - window ..= t`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        data: &PreparedData,
        days: &[usize],
    ) -> Result<ForwardPass> {
        let window = if self.uses_temporal() { self.cfg.window } else { 0 };
        let mut embedded: BTreeMap<usize, Var> = BTreeMap::new();
        let mut projected: BTreeMap<usize, DayProjection> = BTreeMap::new();
        let mut fusion = BTreeMap::new();
        let mut predictions = Vec::with_capacity(days.len());
        for &t in days {
            if t >= data.n_days() {
                return Err(Error::Contract(format!(
                    "day {t} outside dataset of {} days",
                    data.n_days()
                )));
            }
            for d in t.saturating_sub(window)..=t {
                if let std::collections::btree_map::Entry::Vacant(e) = embedded.entry(d) {
                    let (h, w) = self.embed_day(tape, b, &data.snapshots[d])?;
                    e.insert(h);
                    fusion.insert(d, w);
                }
            }
            let z = if self.uses_temporal() {
                let mut win = Vec::with_capacity(window + 1);
                for p in 0..=window {
                    let Some(d) = (t + p).checked_sub(window) else {
                        win.push(None);
                        continue;
                    };
                    let proj = match projected.get(&d) {
                        Some(p) => *p,
                        None => {
                            let p = temporal::project_day(tape, b, embedded[&d])?;
                            projected.insert(d, p);
                            p
                        }
                    };
                    win.push(Some(proj));
                }
                temporal::attend_day(tape, b, &win, &self.temporal)
                    .map_err(|e| match e {
                        Error::Numeric(m) => Error::Numeric(format!("temporal day {t}: {m}")),
                        other => other,
                    })?
            } else {
                embedded[&t]
            };
            predictions.push(head(tape, b, z)?);
        }
        Ok(ForwardPass {
            predictions,
            fusion,
        })
    }

    /// Probabilities for `days` as plain vectors.
    pub fn predict(&self, params: &ParamStore, data: &PreparedData, days: &[usize]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let b = params.bind(&mut tape);
        let pass = self.forward(&mut tape, &b, data, days)?;
        Ok(pass
            .predictions
            .iter()
            .map(|v| tape.value(*v).data().to_vec())
            .collect())
    }

    /// Fusion weights as CSV: `day,stock,layer,w_<path>...,w_self`.
    pub fn fusion_weights_csv(&self, params: &ParamStore, data: &PreparedData, days: &[usize]) -> Result<String> {
        let mut header = String::from("day,stock,layer");
        for m in &self.encoder.meta_paths {
            write!(header, ",w_{}", m.id().to_lowercase()).unwrap();
        }
        header.push_str(",w_self\n");
        if self.cfg.architecture == Architecture::Mlp {
            return Ok(header);
        }
        let mut tape = Tape::new();
        let b = params.bind(&mut tape);
        let mut out = header;
        for &d in days {
            let snap = data
                .snapshots
                .get(d)
                .ok_or_else(|| Error::Contract(format!("day {d} outside dataset")))?;
            let enc = encoder::encode_snapshot(&mut tape, &b, snap, &self.encoder)?;
            for (layer, w) in enc.fusion_weights.iter().enumerate() {
                let w: &Matrix = tape.value(*w);
                for i in 0..w.rows() {
                    write!(out, "{d},{i},{layer}").unwrap();
                    for v in w.row(i) {
                        write!(out, ",{v}").unwrap();
                    }
                    out.push('\n');
                }
            }
        }
        Ok(out)
    }
}
