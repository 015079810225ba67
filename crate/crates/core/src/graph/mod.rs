//! Dynamic multi-relational market graph: typed nodes, typed featured
//! edges, daily snapshots, aligned prices and excess-return labels.

mod io;

pub use io::{load, save, BENCHMARK_FILE, PRICES_FILE, SNAPSHOTS_FILE};

use std::collections::{BTreeSet, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Edge feature width used when nothing else says otherwise.
pub const DEFAULT_EDGE_DIM: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NodeKind {
    #[serde(rename = "S")]
    Stock,
    #[serde(rename = "B")]
    Bank,
    #[serde(rename = "I")]
    Industry,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeRef {
    pub kind: NodeKind,
    pub index: usize,
}

impl NodeRef {
    pub fn stock(index: usize) -> Self {
        Self { kind: NodeKind::Stock, index }
    }

    pub fn bank(index: usize) -> Self {
        Self { kind: NodeKind::Bank, index }
    }

    pub fn industry(index: usize) -> Self {
        Self { kind: NodeKind::Industry, index }
    }
}

impl fmt::Display for NodeRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let k = match self.kind {
            NodeKind::Stock => 's',
            NodeKind::Bank => 'b',
            NodeKind::Industry => 'i',
        };
        write!(f, "{k}{}", self.index)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Relation {
    #[serde(rename = "SS")]
    StockStock,
    #[serde(rename = "SB")]
    StockBank,
    #[serde(rename = "SI")]
    StockIndustry,
    #[serde(rename = "II")]
    IndustryIndustry,
}

impl Relation {
    pub const ALL: [Relation; 4] = [
        Relation::StockStock,
        Relation::StockBank,
        Relation::StockIndustry,
        Relation::IndustryIndustry,
    ];

    pub fn code(self) -> &'static str {
        match self {
            Relation::StockStock => "SS",
            Relation::StockBank => "SB",
            Relation::StockIndustry => "SI",
            Relation::IndustryIndustry => "II",
        }
    }

    pub fn parse(code: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.code().eq_ignore_ascii_case(code))
    }

    /// Node kinds at the (src, dst) ends.
    pub fn endpoints(self) -> (NodeKind, NodeKind) {
        match self {
            Relation::StockStock => (NodeKind::Stock, NodeKind::Stock),
            Relation::StockBank => (NodeKind::Stock, NodeKind::Bank),
            Relation::StockIndustry => (NodeKind::Stock, NodeKind::Industry),
            Relation::IndustryIndustry => (NodeKind::Industry, NodeKind::Industry),
        }
    }

    fn homogeneous(self) -> bool {
        let (a, b) = self.endpoints();
        a == b
    }

    fn bit(self) -> u8 {
        1 << (self as u8)
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// Subset of the four relation types.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct RelationSet(u8);

impl RelationSet {
    pub const EMPTY: RelationSet = RelationSet(0);
    pub const ALL: RelationSet = RelationSet(0b1111);

    pub fn of(relations: &[Relation]) -> Self {
        Self(relations.iter().fold(0, |acc, r| acc | r.bit()))
    }

    pub fn contains(self, r: Relation) -> bool {
        self.0 & r.bit() != 0
    }

    pub fn iter(self) -> impl Iterator<Item = Relation> {
        Relation::ALL.into_iter().filter(move |r| self.contains(*r))
    }

    pub fn is_subset(self, other: RelationSet) -> bool {
        self.0 & !other.0 == 0
    }

    /// Parses `"SS,SB"` style lists; `"all"` and `""` are accepted.
    pub fn parse(list: &str) -> Option<Self> {
        let list = list.trim();
        if list.eq_ignore_ascii_case("all") {
            return Some(Self::ALL);
        }
        let mut out = Self::EMPTY;
        for part in list.split([',', '+', ' ']).filter(|p| !p.is_empty()) {
            out.0 |= Relation::parse(part)?.bit();
        }
        Some(out)
    }

    pub fn label(self) -> String {
        let codes: Vec<&str> = self.iter().map(Relation::code).collect();
        if codes.is_empty() {
            "none".into()
        } else {
            codes.join("+")
        }
    }
}

impl fmt::Debug for RelationSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{{}}}", self.label())
    }
}

impl Serialize for RelationSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(self.iter().map(Relation::code))
    }
}

impl<'de> Deserialize<'de> for RelationSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let codes = Vec::<String>::deserialize(d)?;
        let mut out = RelationSet::EMPTY;
        for c in codes {
            let r = Relation::parse(&c)
                .ok_or_else(|| serde::de::Error::custom(format!("unknown relation {c}")))?;
            out.0 |= r.bit();
        }
        Ok(out)
    }
}

/// One undirected typed edge with its feature vector.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeRecord {
    pub relation: Relation,
    pub src: NodeRef,
    pub dst: NodeRef,
    pub features: Vec<f64>,
}

impl EdgeRecord {
    /// Builds an edge between node indices, taking kinds from the relation.
    pub fn new(relation: Relation, src: usize, dst: usize, features: Vec<f64>) -> Self {
        let (sk, dk) = relation.endpoints();
        Self {
            relation,
            src: NodeRef { kind: sk, index: src },
            dst: NodeRef { kind: dk, index: dst },
            features,
        }
    }

    fn key(&self) -> (Relation, NodeRef, NodeRef) {
        if self.relation.homogeneous() && self.dst < self.src {
            (self.relation, self.dst, self.src)
        } else {
            (self.relation, self.src, self.dst)
        }
    }
}

/// One trading day's multi-relational graph.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphSnapshot {
    pub day: usize,
    pub stock_features: Matrix,
    pub bank_features: Matrix,
    pub industry_features: Matrix,
    pub edge_dim: usize,
    pub edges: Vec<EdgeRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    KindMismatch { edge: usize, relation: Relation, src: NodeRef, dst: NodeRef },
    IndexOutOfRange { edge: usize, node: NodeRef },
    DuplicateEdge { edge: usize, relation: Relation, src: NodeRef, dst: NodeRef },
    FeatureLength { edge: usize, expected: usize, found: usize },
    NonFiniteFeature { edge: usize },
    SelfLoop { edge: usize, node: NodeRef },
    InputWidth { kind: NodeKind, expected: usize, found: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::KindMismatch { edge, relation, src, dst } => write!(
                f,
                "edge {edge}: relation/kind mismatch ({relation} between {src} and {dst})"
            ),
            Violation::IndexOutOfRange { edge, node } => {
                write!(f, "edge {edge}: node {node} out of range")
            }
            Violation::DuplicateEdge { edge, relation, src, dst } => {
                write!(f, "edge {edge}: duplicate edge ({relation}, {src}, {dst})")
            }
            Violation::FeatureLength { edge, expected, found } => write!(
                f,
                "edge {edge}: bad feature length {found}, expected {expected}"
            ),
            Violation::NonFiniteFeature { edge } => write!(f, "edge {edge}: non-finite feature"),
            Violation::SelfLoop { edge, node } => write!(f, "edge {edge}: self-loop on {node}"),
            Violation::InputWidth { kind, expected, found } => write!(
                f,
                "{kind:?} features have width {found}, expected {expected}"
            ),
        }
    }
}

impl GraphSnapshot {
    pub fn n_stocks(&self) -> usize {
        self.stock_features.rows()
    }

    pub fn n_banks(&self) -> usize {
        self.bank_features.rows()
    }

    pub fn n_industries(&self) -> usize {
        self.industry_features.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.stock_features.cols()
    }

    pub fn count(&self, kind: NodeKind) -> usize {
        self.features(kind).rows()
    }

    pub fn features(&self, kind: NodeKind) -> &Matrix {
        match kind {
            NodeKind::Stock => &self.stock_features,
            NodeKind::Bank => &self.bank_features,
            NodeKind::Industry => &self.industry_features,
        }
    }

    pub fn edges_of(&self, relation: Relation) -> impl Iterator<Item = &EdgeRecord> {
        self.edges.iter().filter(move |e| e.relation == relation)
    }

    pub fn edge_count(&self, relation: Relation) -> usize {
        self.edges_of(relation).count()
    }

    /// Every violated invariant; empty means the snapshot is well formed.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let d_in = self.input_dim();
        for kind in [NodeKind::Bank, NodeKind::Industry] {
            let m = self.features(kind);
            if m.rows() > 0 && m.cols() != d_in {
                out.push(Violation::InputWidth { kind, expected: d_in, found: m.cols() });
            }
        }
        let mut seen = HashSet::new();
        for (i, e) in self.edges.iter().enumerate() {
            let (sk, dk) = e.relation.endpoints();
            if e.src.kind != sk || e.dst.kind != dk {
                out.push(Violation::KindMismatch {
                    edge: i,
                    relation: e.relation,
                    src: e.src,
                    dst: e.dst,
                });
            }
            for node in [e.src, e.dst] {
                if node.index >= self.count(node.kind) {
                    out.push(Violation::IndexOutOfRange { edge: i, node });
                }
            }
            if e.features.len() != self.edge_dim {
                out.push(Violation::FeatureLength {
                    edge: i,
                    expected: self.edge_dim,
                    found: e.features.len(),
                });
            }
            if e.features.iter().any(|v| !v.is_finite()) {
                out.push(Violation::NonFiniteFeature { edge: i });
            }
            if e.src == e.dst {
                out.push(Violation::SelfLoop { edge: i, node: e.src });
            }
            if !seen.insert(e.key()) {
                out.push(Violation::DuplicateEdge {
                    edge: i,
                    relation: e.relation,
                    src: e.src,
                    dst: e.dst,
                });
            }
        }
        out
    }

    pub fn is_valid(&self) -> bool {
        self.validate().is_empty()
    }

    /// Same snapshot keeping only edges whose relation is in `keep`.
    pub fn relation_subset(&self, keep: RelationSet) -> GraphSnapshot {
        GraphSnapshot {
            edges: self
                .edges
                .iter()
                .filter(|e| keep.contains(e.relation))
                .cloned()
                .collect(),
            ..self.clone()
        }
    }

    /// Applies a stock relabelling: old stock `i` becomes stock `perm[i]`.
    pub fn permute_stocks(&self, perm: &[usize]) -> Result<GraphSnapshot> {
        let n = self.n_stocks();
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Contract("not a permutation of the stock set".into()));
        }
        let mut rows = vec![0; n];
        for (old, &new) in perm.iter().enumerate() {
            rows[new] = old;
        }
        let relabel = |r: NodeRef| match r.kind {
            NodeKind::Stock => NodeRef::stock(perm[r.index]),
            _ => r,
        };
        Ok(GraphSnapshot {
            stock_features: self.stock_features.select_rows(&rows),
            edges: self
                .edges
                .iter()
                .map(|e| EdgeRecord {
                    src: relabel(e.src),
                    dst: relabel(e.dst),
                    ..e.clone()
                })
                .collect(),
            ..self.clone()
        })
    }
}

/// Time-ordered snapshots with aligned closing prices and benchmark returns.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicGraph {
    pub snapshots: Vec<GraphSnapshot>,
    /// `n_stocks × T` closing prices.
    pub prices: Matrix,
    /// Benchmark return for each day `t` (from `t` to `t + 1`).
    pub benchmark: Vec<f64>,
    /// Suspended `(stock, day)` cells; their price is carried forward.
    pub halted: BTreeSet<(usize, usize)>,
}

impl DynamicGraph {
    pub fn n_days(&self) -> usize {
        self.snapshots.len()
    }

    pub fn n_stocks(&self) -> usize {
        self.prices.rows()
    }

    /// Structural checks across days plus every snapshot's own invariants.
    pub fn check(&self) -> Result<()> {
        let t = self.snapshots.len();
        if self.prices.cols() != t || self.benchmark.len() != t {
            return Err(Error::Schema(format!(
                "{t} snapshots but {} price days and {} benchmark days",
                self.prices.cols(),
                self.benchmark.len()
            )));
        }
        let n = self.prices.rows();
        for (k, s) in self.snapshots.iter().enumerate() {
            if k > 0 && s.day <= self.snapshots[k - 1].day {
                return Err(Error::Schema(format!(
                    "snapshot days not strictly increasing at day {}",
                    s.day
                )));
            }
            if s.n_stocks() != n {
                return Err(Error::Schema(format!(
                    "day {} has {} stocks, expected {n}",
                    s.day,
                    s.n_stocks()
                )));
            }
            if let Some(v) = s.validate().first() {
                return Err(Error::Schema(format!("day {}: {v}", s.day)));
            }
        }
        if let Some(pos) = self.prices.data().iter().position(|&p| p <= 0.0) {
            return Err(Error::Data(format!(
                "non-positive price for stock {} on day {}",
                pos / t.max(1),
                pos % t.max(1)
            )));
        }
        Ok(())
    }

    /// Next-day excess return labels.
    pub fn build_labels(&self) -> Result<LabelFrame> {
        let (n, t) = self.prices.shape();
        if t < 2 {
            return Err(Error::Data(format!("need at least 2 days of prices, found {t}")));
        }
        if self.benchmark.len() < t - 1 {
            return Err(Error::Data("benchmark series shorter than price series".into()));
        }
        let mut labels = Matrix::zeros(n, t - 1);
        let mut valid = vec![true; n * (t - 1)];
        for i in 0..n {
            for day in 0..t - 1 {
                let (p0, p1) = (self.prices.get(i, day), self.prices.get(i, day + 1));
                for (p, d) in [(p0, day), (p1, day + 1)] {
                    if p <= 0.0 {
                        return Err(Error::Data(format!(
                            "non-positive price {p} for stock {i} on day {d}"
                        )));
                    }
                }
                if self.halted.contains(&(i, day)) || self.halted.contains(&(i, day + 1)) {
                    valid[i * (t - 1) + day] = false;
                    continue;
                }
                labels.set(i, day, (p1 - p0) / p0 - self.benchmark[day]);
            }
        }
        Ok(LabelFrame { labels, valid })
    }

    pub fn relation_subset(&self, keep: RelationSet) -> DynamicGraph {
        DynamicGraph {
            snapshots: self.snapshots.iter().map(|s| s.relation_subset(keep)).collect(),
            ..self.clone()
        }
    }
}

/// `n_stocks × (T - 1)` excess-return labels with a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelFrame {
    pub labels: Matrix,
    valid: Vec<bool>,
}

impl LabelFrame {
    pub fn n_days(&self) -> usize {
        self.labels.cols()
    }

    pub fn n_stocks(&self) -> usize {
        self.labels.rows()
    }

    pub fn is_valid(&self, stock: usize, day: usize) -> bool {
        day < self.n_days() && self.valid[stock * self.n_days() + day]
    }

    pub fn get(&self, stock: usize, day: usize) -> Option<f64> {
        self.is_valid(stock, day).then(|| self.labels.get(stock, day))
    }

    /// Labels of one day across stocks, `None` where masked.
    pub fn day(&self, day: usize) -> Vec<Option<f64>> {
        (0..self.n_stocks()).map(|i| self.get(i, day)).collect()
    }
}
