//! Intra-day encoder: meta-path neighbourhoods, edge-aware multi-head
//! attention per meta-path, and softmax fusion across meta-paths.
//!
//! For meta-path `m`, head `k` and induced edge `(i, j)`:
//!
//! ```text
//! score_ij = a_srcᵀ W h_i + a_dstᵀ W h_j + a_edgeᵀ (W_edge e_ij + W_via via_ij)
//! alpha_ij = softmax_{j ∈ N(i)} LeakyReLU(score_ij)
//! h_i,m    = tanh( mean_k Σ_j alpha_ij W h_j )
//! ```
//!
//! `e_ij` is the mean of the constituent edge features with the path-instance
//! count appended, and `via_ij` is the mean input embedding of the
//! intermediate bank/industry nodes. Fusion scores each meta-path output with
//! `w_fusᵀ h_i,m`, softmaxes over the meta-paths available to stock `i`, and
//! applies `tanh` to the weighted sum.

use std::collections::BTreeMap;
use std::fmt;
use std::rc::Rc;

use log::debug;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{GraphSnapshot, NodeKind, NodeRef, Relation, RelationSet};
use crate::matrix::{Matrix, SparseMatrix, MASKED};
use crate::params::Bindings;
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MetaPath {
    #[serde(rename = "SS")]
    StockStock,
    #[serde(rename = "SBS")]
    StockBankStock,
    #[serde(rename = "SIIS")]
    StockIndustryIndustryStock,
    /// Union of the three typed meta-paths treated as one edge set.
    #[serde(rename = "ANY")]
    Untyped,
}

impl MetaPath {
    pub const TYPED: [MetaPath; 3] = [
        MetaPath::StockStock,
        MetaPath::StockBankStock,
        MetaPath::StockIndustryIndustryStock,
    ];

    pub fn id(self) -> &'static str {
        match self {
            MetaPath::StockStock => "SS",
            MetaPath::StockBankStock => "SBS",
            MetaPath::StockIndustryIndustryStock => "SIIS",
            MetaPath::Untyped => "ANY",
        }
    }

    /// Relation chain walked from the source stock.
    pub fn chain(self) -> &'static [Relation] {
        match self {
            MetaPath::StockStock => &[Relation::StockStock],
            MetaPath::StockBankStock => &[Relation::StockBank, Relation::StockBank],
            MetaPath::StockIndustryIndustryStock => &[
                Relation::StockIndustry,
                Relation::IndustryIndustry,
                Relation::StockIndustry,
            ],
            MetaPath::Untyped => &[],
        }
    }

    /// Relations whose removal deletes the meta-path. Industries carry an
    /// implicit identity link, so SIIS survives without explicit II edges.
    pub fn required(self) -> RelationSet {
        match self {
            MetaPath::StockStock => RelationSet::of(&[Relation::StockStock]),
            MetaPath::StockBankStock => RelationSet::of(&[Relation::StockBank]),
            MetaPath::StockIndustryIndustryStock => RelationSet::of(&[Relation::StockIndustry]),
            MetaPath::Untyped => RelationSet::EMPTY,
        }
    }
}

impl fmt::Display for MetaPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

/// One stock-to-stock edge induced by a meta-path (`target` aggregates `neighbor`).
#[derive(Clone, Debug, PartialEq)]
pub struct InducedEdge {
    pub target: usize,
    pub neighbor: usize,
    /// Mean of the constituent edge features.
    pub mean_features: Vec<f64>,
    /// Number of path instances collapsed into this edge.
    pub count: usize,
    /// Intermediate nodes with weights summing to 1 (empty for SS).
    pub via: Vec<(NodeRef, f64)>,
}

impl InducedEdge {
    /// `mean_features ∥ count`.
    pub fn composed_features(&self) -> Vec<f64> {
        let mut f = self.mean_features.clone();
        f.push(self.count as f64);
        f
    }
}

#[derive(Default)]
struct Accum {
    feat_sum: Vec<f64>,
    n_feat: usize,
    count: usize,
    via: BTreeMap<NodeRef, f64>,
}

impl Accum {
    fn instance(&mut self, edge_dim: usize, constituents: &[&[f64]], via: &[NodeRef]) {
        if self.feat_sum.is_empty() {
            self.feat_sum = vec![0.0; edge_dim];
        }
        for f in constituents {
            for (s, v) in self.feat_sum.iter_mut().zip(f.iter()) {
                *s += v;
            }
        }
        self.n_feat += constituents.len();
        self.count += 1;
        for node in via {
            *self.via.entry(*node).or_insert(0.0) += 1.0 / via.len() as f64;
        }
    }

    fn merge(&mut self, other: Accum, edge_dim: usize) {
        if self.feat_sum.is_empty() {
            self.feat_sum = vec![0.0; edge_dim];
        }
        for (s, v) in self.feat_sum.iter_mut().zip(&other.feat_sum) {
            *s += v;
        }
        self.n_feat += other.n_feat;
        self.count += other.count;
        for (k, w) in other.via {
            *self.via.entry(k).or_insert(0.0) += w;
        }
    }

    fn finish(self, target: usize, neighbor: usize) -> InducedEdge {
        let n_feat = self.n_feat.max(1) as f64;
        let via_total: f64 = self.via.values().sum();
        InducedEdge {
            target,
            neighbor,
            mean_features: self.feat_sum.iter().map(|s| s / n_feat).collect(),
            count: self.count,
            via: self
                .via
                .into_iter()
                .map(|(k, w)| (k, w / via_total))
                .collect(),
        }
    }
}

fn accumulate(s: &GraphSnapshot, m: MetaPath) -> BTreeMap<(usize, usize), Accum> {
    let d = s.edge_dim;
    let mut acc: BTreeMap<(usize, usize), Accum> = BTreeMap::new();
    match m {
        MetaPath::StockStock => {
            for e in s.edges_of(Relation::StockStock) {
                let (a, b) = (e.src.index, e.dst.index);
                for key in [(a, b), (b, a)] {
                    acc.entry(key).or_default().instance(d, &[&e.features], &[]);
                }
            }
        }
        MetaPath::StockBankStock => {
            let mut holders: Vec<Vec<(usize, &[f64])>> = vec![Vec::new(); s.n_banks()];
            for e in s.edges_of(Relation::StockBank) {
                holders[e.dst.index].push((e.src.index, &e.features));
            }
            for (b, list) in holders.iter_mut().enumerate() {
                list.sort_by_key(|(i, _)| *i);
                for &(i, fi) in list.iter() {
                    for &(j, fj) in list.iter() {
                        if i != j {
                            acc.entry((i, j))
                                .or_default()
                                .instance(d, &[fi, fj], &[NodeRef::bank(b)]);
                        }
                    }
                }
            }
        }
        MetaPath::StockIndustryIndustryStock => {
            let ni = s.n_industries();
            let mut industries_of: Vec<Vec<(usize, &[f64])>> = vec![Vec::new(); s.n_stocks()];
            let mut members: Vec<Vec<(usize, &[f64])>> = vec![Vec::new(); ni];
            for e in s.edges_of(Relation::StockIndustry) {
                industries_of[e.src.index].push((e.dst.index, &e.features));
                members[e.dst.index].push((e.src.index, &e.features));
            }
            let mut linked: Vec<Vec<(usize, Option<&[f64]>)>> =
                (0..ni).map(|k| vec![(k, None)]).collect();
            for e in s.edges_of(Relation::IndustryIndustry) {
                let (a, b) = (e.src.index, e.dst.index);
                linked[a].push((b, Some(&e.features)));
                linked[b].push((a, Some(&e.features)));
            }
            for l in &mut linked {
                l.sort_by_key(|(k, _)| *k);
            }
            for m in &mut members {
                m.sort_by_key(|(i, _)| *i);
            }
            for (i, inds) in industries_of.iter_mut().enumerate() {
                inds.sort_by_key(|(k, _)| *k);
                for &(a, f_ia) in inds.iter() {
                    for &(b, f_ab) in &linked[a] {
                        for &(j, f_jb) in &members[b] {
                            if i == j {
                                continue;
                            }
                            let via = if a == b {
                                vec![NodeRef::industry(a)]
                            } else {
                                vec![NodeRef::industry(a), NodeRef::industry(b)]
                            };
                            let entry = acc.entry((i, j)).or_default();
                            match f_ab {
                                Some(f_ab) => entry.instance(d, &[f_ia, f_ab, f_jb], &via),
                                None => entry.instance(d, &[f_ia, f_jb], &via),
                            }
                        }
                    }
                }
            }
        }
        MetaPath::Untyped => {
            for typed in MetaPath::TYPED {
                for (key, a) in accumulate(s, typed) {
                    acc.entry(key).or_default().merge(a, d);
                }
            }
        }
    }
    acc
}

/// Stock pairs connected by `m`, sorted by `(target, neighbor)`.
pub fn induce_meta_path_graph(s: &GraphSnapshot, m: MetaPath) -> Vec<InducedEdge> {
    accumulate(s, m)
        .into_iter()
        .map(|((i, j), a)| a.finish(i, j))
        .collect()
}

/// Constant tape inputs for one meta-path on one day.
#[derive(Clone, Debug)]
pub struct PreparedMetaPath {
    pub meta_path: MetaPath,
    pub edges: Vec<InducedEdge>,
    gather_target: Rc<SparseMatrix>,
    gather_neighbor: Rc<SparseMatrix>,
    /// `n × m` sum-by-target operator, also the softmax grouping.
    groups: Rc<SparseMatrix>,
    composed: Rc<Matrix>,
    via_banks: Option<Rc<SparseMatrix>>,
    via_industries: Option<Rc<SparseMatrix>>,
    /// Stocks with at least one neighbour under this meta-path.
    pub available: Vec<bool>,
}

impl PreparedMetaPath {
    pub fn new(s: &GraphSnapshot, meta_path: MetaPath) -> Result<Self> {
        Self::from_edges(s, meta_path, induce_meta_path_graph(s, meta_path))
    }

    pub fn from_edges(s: &GraphSnapshot, meta_path: MetaPath, edges: Vec<InducedEdge>) -> Result<Self> {
        let n = s.n_stocks();
        let targets: Vec<usize> = edges.iter().map(|e| e.target).collect();
        let neighbors: Vec<usize> = edges.iter().map(|e| e.neighbor).collect();
        let mut available = vec![false; n];
        for &t in &targets {
            available[t] = true;
        }
        let composed_rows: Vec<Vec<f64>> = edges.iter().map(InducedEdge::composed_features).collect();
        let composed = if composed_rows.is_empty() {
            Matrix::zeros(0, s.edge_dim + 1)
        } else {
            Matrix::from_rows(&composed_rows)?
        };
        let via_of = |kind: NodeKind, count: usize| -> Result<Option<Rc<SparseMatrix>>> {
            let rows: Vec<Vec<(usize, f64)>> = edges
                .iter()
                .map(|e| {
                    e.via
                        .iter()
                        .filter(|(r, _)| r.kind == kind)
                        .map(|(r, w)| (r.index, *w))
                        .collect()
                })
                .collect();
            if rows.iter().all(Vec::is_empty) {
                return Ok(None);
            }
            Ok(Some(Rc::new(SparseMatrix::from_rows(count, &rows)?)))
        };
        Ok(Self {
            meta_path,
            gather_target: Rc::new(SparseMatrix::selector(n, &targets)?),
            gather_neighbor: Rc::new(SparseMatrix::selector(n, &neighbors)?),
            groups: Rc::new(SparseMatrix::segment_sum(&targets, n)?),
            composed: Rc::new(composed),
            via_banks: via_of(NodeKind::Bank, s.n_banks())?,
            via_industries: via_of(NodeKind::Industry, s.n_industries())?,
            available,
            edges,
        })
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }
}

/// A snapshot with its meta-path neighbourhoods resolved.
#[derive(Clone, Debug)]
pub struct PreparedSnapshot {
    pub day: usize,
    pub stock_features: Matrix,
    pub bank_features: Matrix,
    pub industry_features: Matrix,
    pub paths: Vec<PreparedMetaPath>,
}

impl PreparedSnapshot {
    pub fn new(s: &GraphSnapshot, meta_paths: &[MetaPath]) -> Result<Self> {
        Ok(Self {
            day: s.day,
            stock_features: s.stock_features.clone(),
            bank_features: s.bank_features.clone(),
            industry_features: s.industry_features.clone(),
            paths: meta_paths
                .iter()
                .map(|&m| PreparedMetaPath::new(s, m))
                .collect::<Result<_>>()?,
        })
    }

    pub fn n_stocks(&self) -> usize {
        self.stock_features.rows()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// Learned softmax over meta-path scores.
    Attention,
    /// Equal weights over the available meta-paths.
    Mean,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub d_in: usize,
    pub d_e: usize,
    pub d_h: usize,
    pub layers: usize,
    pub heads: usize,
    pub leaky_slope: f64,
    pub meta_paths: Vec<MetaPath>,
    pub edge_features: bool,
    pub fusion: Fusion,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_h == 0 || self.layers == 0 || self.heads == 0 {
            return Err(Error::Config("d_h, layers and heads must be positive".into()));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config(format!("leaky slope {} outside (0, 1)", self.leaky_slope)));
        }
        Ok(())
    }
}

pub fn input_name(kind: NodeKind, part: &str) -> String {
    let k = match kind {
        NodeKind::Stock => "S",
        NodeKind::Bank => "B",
        NodeKind::Industry => "I",
    };
    format!("enc.in.{k}.{part}")
}

pub fn head_name(layer: usize, m: MetaPath, head: usize, part: &str) -> String {
    format!("enc.l{layer}.{}.h{head}.{part}", m.id())
}

pub fn fusion_name(layer: usize) -> String {
    format!("enc.l{layer}.fuse.w")
}

/// `(name, rows, cols, fan_in)` for every encoder parameter.
pub fn param_shapes(cfg: &EncoderConfig) -> Vec<(String, usize, usize, usize)> {
    let (d_in, d_h) = (cfg.d_in, cfg.d_h);
    let mut out = Vec::new();
    for kind in [NodeKind::Stock, NodeKind::Bank, NodeKind::Industry] {
        out.push((input_name(kind, "w"), d_in, d_h, d_in));
        out.push((input_name(kind, "b"), 1, d_h, d_in));
    }
    for layer in 0..cfg.layers {
        for &m in &cfg.meta_paths {
            for k in 0..cfg.heads {
                out.push((head_name(layer, m, k, "w"), d_h, d_h, d_h));
                out.push((head_name(layer, m, k, "a_src"), d_h, 1, d_h));
                out.push((head_name(layer, m, k, "a_dst"), d_h, 1, d_h));
                if cfg.edge_features {
                    out.push((head_name(layer, m, k, "a_edge"), d_h, 1, d_h));
                    out.push((head_name(layer, m, k, "w_edge"), cfg.d_e + 1, d_h, cfg.d_e + 1));
                    out.push((head_name(layer, m, k, "w_via"), d_h, d_h, d_h));
                }
            }
        }
        if cfg.fusion == Fusion::Attention {
            out.push((fusion_name(layer), d_h, 1, d_h));
        }
    }
    out
}

/// Linear input projection of one node kind.
pub fn project_inputs(
    tape: &mut Tape,
    b: &Bindings,
    kind: NodeKind,
    features: &Matrix,
) -> Result<Var> {
    let x = tape.constant(features.clone());
    let h = tape.matmul(x, b.var(&input_name(kind, "w"))?)?;
    tape.add_row_bias(h, b.var(&input_name(kind, "b"))?)
}

/// Per-meta-path output: stock embeddings plus each head's attention weights.
#[derive(Clone, Debug)]
pub struct MetaPathOutput {
    pub embeddings: Var,
    pub attention: Vec<Var>,
}

/// Embeddings of the three node kinds entering a layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerInputs {
    pub stocks: Var,
    pub banks: Var,
    pub industries: Var,
}

fn with_context(e: Error, ctx: impl FnOnce() -> String) -> Error {
    match e {
        Error::Numeric(msg) => Error::Numeric(format!("{}: {msg}", ctx())),
        other => other,
    }
}

/// Edge-aware multi-head attention over one meta-path's induced edges.
/// Returns `None` when the meta-path has no edges on this day.
pub fn attend_meta_path(
    tape: &mut Tape,
    b: &Bindings,
    inputs: LayerInputs,
    path: &PreparedMetaPath,
    layer: usize,
    cfg: &EncoderConfig,
) -> Result<Option<MetaPathOutput>> {
    if path.n_edges() == 0 {
        return Ok(None);
    }
    let m = path.meta_path;
    let composed = cfg
        .edge_features
        .then(|| tape.constant(path.composed.as_ref().clone()));

    let mut aggregated = Vec::with_capacity(cfg.heads);
    let mut attention = Vec::with_capacity(cfg.heads);
    for k in 0..cfg.heads {
        let run = |tape: &mut Tape| -> Result<(Var, Var)> {
            let w = b.var(&head_name(layer, m, k, "w"))?;
            let wh = tape.matmul(inputs.stocks, w)?;
            let s_src = tape.matmul(wh, b.var(&head_name(layer, m, k, "a_src"))?)?;
            let s_dst = tape.matmul(wh, b.var(&head_name(layer, m, k, "a_dst"))?)?;
            let s_src = tape.spmm(path.gather_target.clone(), s_src)?;
            let s_dst = tape.spmm(path.gather_neighbor.clone(), s_dst)?;
            let mut score = tape.add(s_src, s_dst)?;
            if let Some(c) = composed {
                // The edge projection only feeds a scalar score, so project
                // the attention vector instead of every edge.
                let a_edge = b.var(&head_name(layer, m, k, "a_edge"))?;
                let edge_dir = tape.matmul(b.var(&head_name(layer, m, k, "w_edge"))?, a_edge)?;
                let s_edge = tape.matmul(c, edge_dir)?;
                score = tape.add(score, s_edge)?;
                let via_dir = tape.matmul(b.var(&head_name(layer, m, k, "w_via"))?, a_edge)?;
                for (op, h) in [(&path.via_banks, inputs.banks), (&path.via_industries, inputs.industries)] {
                    if let Some(op) = op {
                        let per_node = tape.matmul(h, via_dir)?;
                        let s_via = tape.spmm(op.clone(), per_node)?;
                        score = tape.add(score, s_via)?;
                    }
                }
            }
            let score = tape.leaky_relu(score, cfg.leaky_slope)?;
            let alpha = tape.segment_softmax(score, path.groups.clone())?;
            let msg = tape.spmm(path.gather_neighbor.clone(), wh)?;
            let msg = tape.scale_rows(msg, alpha)?;
            let agg = tape.spmm(path.groups.clone(), msg)?;
            Ok((agg, alpha))
        };
        let (agg, alpha) = run(tape).map_err(|e| with_context(e, || format!("layer {layer} {m} head {k}")))?;
        aggregated.push(agg);
        attention.push(alpha);
    }
    let mean = tape.mean_over(&aggregated)?;
    let embeddings = tape
        .tanh(mean)
        .map_err(|e| with_context(e, || format!("layer {layer} {m}")))?;
    Ok(Some(MetaPathOutput {
        embeddings,
        attention,
    }))
}

/// Result of fusing meta-path outputs for one layer.
#[derive(Clone, Copy, Debug)]
pub struct Fused {
    pub embeddings: Var,
    /// `n × (P + 1)` weights; the last column is the self fallback used only
    /// by stocks with no meta-path neighbours.
    pub weights: Var,
}

/// Softmax fusion over the meta-path outputs available to each stock.
///
/// `outputs[p]` is `None` for a meta-path without edges; `available[p][i]`
/// says whether stock `i` has neighbours under meta-path `p`. Stocks with no
/// neighbours at all fall back to `tanh(own)`.
pub fn fuse_relations(
    tape: &mut Tape,
    outputs: &[Option<Var>],
    available: &[Vec<bool>],
    own: Var,
    fusion_weight: Option<Var>,
) -> Result<Fused> {
    let n = tape.value(own).rows();
    let p = outputs.len();
    let zeros = tape.constant(Matrix::zeros(n, 1));
    let mut scores = Vec::with_capacity(p + 1);
    let mut mask = Matrix::zeros(n, p + 1);
    let mut isolated = 0;
    for (col, out) in outputs.iter().enumerate() {
        let score = match (out, fusion_weight) {
            (Some(h), Some(w)) => tape.matmul(*h, w)?,
            _ => zeros,
        };
        scores.push(score);
        for i in 0..n {
            if out.is_none() || !available[col][i] {
                mask.set(i, col, MASKED);
            }
        }
    }
    scores.push(zeros);
    for i in 0..n {
        let any = (0..p).any(|col| mask.get(i, col) == 0.0);
        if any {
            mask.set(i, p, MASKED);
        } else {
            isolated += 1;
        }
    }
    if isolated > 0 {
        debug!("{isolated} of {n} stocks have no meta-path neighbours; using own features");
    }
    let scores = tape.concat_cols(&scores)?;
    let weights = tape.softmax_rows(scores, Some(Rc::new(mask)))?;

    let mut terms = Vec::with_capacity(p + 1);
    for (col, out) in outputs.iter().enumerate() {
        if let Some(h) = out {
            let w = tape.select_col(weights, col)?;
            terms.push(tape.scale_rows(*h, w)?);
        }
    }
    if isolated > 0 {
        let w = tape.select_col(weights, p)?;
        terms.push(tape.scale_rows(own, w)?);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    let embeddings = tape.tanh(total)?;
    Ok(Fused { embeddings, weights })
}

/// Encoder output for one day.
#[derive(Clone, Debug)]
pub struct EncodedSnapshot {
    pub stocks: Var,
    /// Fusion weights per layer, `n × (P + 1)`.
    pub fusion_weights: Vec<Var>,
    pub attention: Vec<Vec<Option<MetaPathOutput>>>,
}

/// Stacks `cfg.layers` attention-and-fusion layers over one snapshot.
/// Bank and industry embeddings stay at their input projections.
pub fn encode_snapshot(
    tape: &mut Tape,
    b: &Bindings,
    snap: &PreparedSnapshot,
    cfg: &EncoderConfig,
) -> Result<EncodedSnapshot> {
    let stocks = project_inputs(tape, b, NodeKind::Stock, &snap.stock_features)?;
    let banks = project_inputs(tape, b, NodeKind::Bank, &snap.bank_features)?;
    let industries = project_inputs(tape, b, NodeKind::Industry, &snap.industry_features)?;
    let available: Vec<Vec<bool>> = snap.paths.iter().map(|p| p.available.clone()).collect();

    let mut h = stocks;
    let mut fusion_weights = Vec::with_capacity(cfg.layers);
    let mut attention = Vec::with_capacity(cfg.layers);
    for layer in 0..cfg.layers {
        let inputs = LayerInputs {
            stocks: h,
            banks,
            industries,
        };
        let mut outs = Vec::with_capacity(snap.paths.len());
        for path in &snap.paths {
            outs.push(attend_meta_path(tape, b, inputs, path, layer, cfg)?);
        }
        let embeddings: Vec<Option<Var>> = outs.iter().map(|o| o.as_ref().map(|o| o.embeddings)).collect();
        let w_fus = match cfg.fusion {
            Fusion::Attention => Some(b.var(&fusion_name(layer))?),
            Fusion::Mean => None,
        };
        let fused = fuse_relations(tape, &embeddings, &available, h, w_fus)?;
        h = fused.embeddings;
        fusion_weights.push(fused.weights);
        attention.push(outs);
    }
    Ok(EncodedSnapshot {
        stocks: h,
        fusion_weights,
        attention,
    })
}
