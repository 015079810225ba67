//! Config-driven experiments: rolling backtests, ablation tables and
//! hyperparameter sweeps.

use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{self, DynamicGraph, Relation, RelationSet};
use crate::metrics::{Aggregates, BacktestReport, DayScores};
use crate::model::{Ablation, Architecture, Model, ModelConfig};
use crate::params::ParamStore;
use crate::synth::{self, MarketConfig};
use crate::train::{self, EpochStats, Fold, TrainConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Directory written by `generate`; when absent the market is simulated.
    pub path: Option<PathBuf>,
    pub market: MarketConfig,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub train_len: usize,
    pub val_len: usize,
    pub test_len: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            train_len: 20,
            val_len: 5,
            test_len: 14,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Preset the remaining keys are layered over.
    pub preset: String,
    pub seed: u64,
    /// Seeds `seed, seed + 1, ...` used by `ablate` and `sweep`.
    pub seeds: usize,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub schedule: ScheduleConfig,
    /// Portfolio size for top-K return and precision.
    pub metric_k: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::preset("toy").expect("toy preset exists")
    }
}

pub const PRESETS: [&str; 2] = ["toy", "csi100-like"];

impl ExperimentConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let market = synth::preset(name)?;
        Ok(match name {
            "toy" => Self {
                preset: name.into(),
                seed: 0,
                seeds: 5,
                dataset: DatasetConfig { path: None, market },
                model: ModelConfig {
                    d_h: 32,
                    ..ModelConfig::default()
                },
                train: TrainConfig {
                    epochs: 200,
                    patience: 50,
                    ..TrainConfig::default()
                },
                schedule: ScheduleConfig::default(),
                metric_k: 3,
            },
            _ => Self {
                preset: name.into(),
                seed: 0,
                seeds: 5,
                dataset: DatasetConfig { path: None, market },
                model: ModelConfig {
                    d_h: 128,
                    ..ModelConfig::default()
                },
                train: TrainConfig::default(),
                schedule: ScheduleConfig {
                    train_len: 120,
                    val_len: 20,
                    test_len: 60,
                },
                metric_k: 30,
            },
        })
    }

    /// Layers `user` (a JSON document, possibly empty) and dotted `key=value`
    /// overrides over the named preset, then validates.
    pub fn resolve(user: Option<&str>, sets: &[String], seed: Option<u64>) -> Result<Self> {
        let mut doc = match user {
            Some(text) => serde_json::from_str::<Value>(text)
                .map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?,
            None => Value::Object(Map::new()),
        };
        if !doc.is_object() {
            return Err(Error::Config("config must be a JSON object".into()));
        }
        for s in sets {
            let (key, raw) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {s:?} is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut doc, key.trim(), value)?;
        }
        if let Some(seed) = seed {
            doc["seed"] = Value::from(seed);
        }
        let preset = match doc.get("preset") {
            None => "toy".to_string(),
            Some(Value::String(p)) => p.clone(),
            Some(other) => return Err(Error::Config(format!("preset must be a string, got {other}"))),
        };
        if !PRESETS.contains(&preset.as_str()) {
            return Err(Error::Config(format!("unknown preset {preset:?}")));
        }
        let mut base = serde_json::to_value(Self::preset(&preset)?)?;
        merge(&mut base, doc);
        let cfg: Self = serde_json::from_value(base).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.dataset.path.is_none() {
            self.dataset.market.validate()?;
        }
        if self.metric_k == 0 || self.seeds == 0 {
            return Err(Error::Config("metric_k and seeds must be positive".into()));
        }
        let m = &self.model;
        if m.d_h == 0 || m.layers == 0 || m.heads == 0 || m.temporal_heads == 0 {
            return Err(Error::Config("model sizes must be positive".into()));
        }
        let s = &self.schedule;
        if s.train_len < m.window + 2 {
            return Err(Error::Config(format!(
                "train_len {} shorter than window + 2 = {}",
                s.train_len,
                m.window + 2
            )));
        }
        if s.test_len == 0 {
            return Err(Error::Config("test_len must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serialises");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().fold(String::with_capacity(64), |mut s, b| {
            write!(s, "{b:02x}").unwrap();
            s
        })
    }

    /// Market config with the experiment seed applied.
    pub fn market(&self) -> MarketConfig {
        MarketConfig {
            seed: self.seed,
            ..self.dataset.market.clone()
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

fn set_path(doc: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (k, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(Error::Config(format!("bad override key {key:?}")));
        }
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?} descends into a non-object")))?;
        if k + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
    }
    Ok(())
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Loads the dataset directory or simulates the configured market.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<DynamicGraph> {
    match &cfg.dataset.path {
        Some(p) => graph::load(p),
        None => synth::generate(&cfg.market()),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FoldSummary {
    pub fold: Fold,
    pub best_epoch: usize,
    pub best_val_ic: Option<f64>,
    pub curve: Vec<EpochStats>,
}

#[derive(Clone, Debug)]
pub struct BacktestRun {
    pub report: BacktestReport,
    pub folds: Vec<FoldSummary>,
    /// Parameters of the last fold.
    pub params: ParamStore,
}

/// Trains on each rolling fold and scores its test days out of sample.
pub fn run_backtest(cfg: &ExperimentConfig, g: &DynamicGraph) -> Result<BacktestRun> {
    let model = Model::for_graph(&cfg.model, g)?;
    let data = model.prepare(g)?;
    let s = &cfg.schedule;
    let schedule = train::rolling_schedule(data.labels.n_days(), s.train_len, s.val_len, s.test_len)?;
    let mut scored = Vec::new();
    let mut folds = Vec::new();
    let mut last = ParamStore::new();
    for (k, fold) in schedule.folds.iter().enumerate() {
        train::leakage_guard(fold)?;
        let init = model.init_params(cfg.seed);
        let out = train::train(
            &model,
            &data,
            init,
            fold.train.clone(),
            fold.val.clone(),
            &cfg.train,
            cfg.seed,
        )?;
        let days: Vec<usize> = fold.test.clone().collect();
        let preds = model.predict(&out.params, &data, &days)?;
        for (d, p) in days.iter().zip(preds) {
            scored.push((k, DayScores::new(*d, p, &data.labels.day(*d))?));
        }
        log::info!(
            "fold {k}: train {:?} val {:?} test {:?}, best epoch {} val IC {:?}",
            fold.train,
            fold.val,
            fold.test,
            out.best_epoch,
            out.best_val_ic
        );
        folds.push(FoldSummary {
            fold: fold.clone(),
            best_epoch: out.best_epoch,
            best_val_ic: out.best_val_ic,
            curve: out.curve,
        });
        last = out.params;
    }
    Ok(BacktestRun {
        report: BacktestReport::build(cfg.hash(), cfg.metric_k, &scored),
        folds,
        params: last,
    })
}

/// A named modification of the base experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub architecture: Architecture,
    pub ablation: Ablation,
}

impl Variant {
    fn new(name: &str, ablation: Ablation) -> Self {
        Self {
            name: name.into(),
            architecture: Architecture::Mdgnn,
            ablation,
        }
    }

    pub fn apply(&self, cfg: &ExperimentConfig) -> ExperimentConfig {
        let mut c = cfg.clone();
        c.model.architecture = self.architecture;
        c.model.ablation = self.ablation;
        c
    }
}

/// Full model, the four single-component removals and the MLP control.
pub fn component_variants() -> Vec<Variant> {
    let full = Ablation::default();
    vec![
        Variant::new("full", full),
        Variant::new("w/o edge", Ablation { no_edge_features: true, ..full }),
        Variant::new("w/o meta-path", Ablation { no_meta_path: true, ..full }),
        Variant::new("w/o aggregation", Ablation { no_hier_fusion: true, ..full }),
        Variant::new("w/o temporal", Ablation { no_temporal: true, ..full }),
        Variant {
            name: "mlp".into(),
            architecture: Architecture::Mlp,
            ablation: full,
        },
    ]
}

/// The six kept-relation subsets, smallest first; the last is the full model.
pub fn relation_variants() -> Vec<Variant> {
    use Relation::*;
    [
        vec![StockStock],
        vec![StockStock, StockBank],
        vec![StockStock, StockIndustry],
        vec![StockStock, StockIndustry, IndustryIndustry],
        vec![StockStock, StockBank, StockIndustry],
        vec![StockStock, StockBank, StockIndustry, IndustryIndustry],
    ]
    .into_iter()
    .map(|rels| {
        let set = RelationSet::of(&rels);
        Variant::new(
            &set.label(),
            Ablation {
                relations: set,
                ..Ablation::default()
            },
        )
    })
    .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

impl Stat {
    pub fn of(values: &[Option<f64>]) -> Self {
        let v: Vec<f64> = values.iter().flatten().copied().collect();
        if v.is_empty() {
            return Self { mean: None, std: None };
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = (v.len() > 1)
            .then(|| (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
        Self { mean: Some(mean), std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub name: String,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<Aggregates>,
    pub ic: Stat,
    pub ir: Stat,
    pub cr: Stat,
    pub precision: Stat,
}

impl TableRow {
    fn from_runs(name: String, seeds: Vec<u64>, per_seed: Vec<Aggregates>) -> Self {
        let col = |f: fn(&Aggregates) -> Option<f64>| Stat::of(&per_seed.iter().map(f).collect::<Vec<_>>());
        Self {
            ic: col(|a| a.ic),
            ir: col(|a| a.ir),
            cr: col(|a| Some(a.cr)),
            precision: col(|a| a.precision),
            name,
            seeds,
            per_seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub title: String,
    pub k: usize,
    pub rows: Vec<TableRow>,
}

fn fmt_stat(s: &Stat) -> String {
    match (s.mean, s.std) {
        (Some(m), Some(sd)) => format!("{m:.4} ({sd:.4})"),
        (Some(m), None) => format!("{m:.4}"),
        _ => "n/a".into(),
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:?}"))
}

impl Table {
    pub fn row(&self, name: &str) -> Option<&TableRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_markdown(&self) -> String {
        let mut out = format!(
            "### {}\n\n| variant | IC | IR | CR | Prec@{} |\n|---|---|---|---|---|\n",
            self.title, self.k
        );
        for r in &self.rows {
            writeln!(
                out,
                "| {} | {} | {} | {} | {} |",
                r.name,
                fmt_stat(&r.ic),
                fmt_stat(&r.ir),
                fmt_stat(&r.cr),
                fmt_stat(&r.precision)
            )
            .unwrap();
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,ic_mean,ic_std,ir_mean,ir_std,cr_mean,cr_std,prec_mean,prec_std\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.name,
                opt(r.ic.mean),
                opt(r.ic.std),
                opt(r.ir.mean),
                opt(r.ir.std),
                opt(r.cr.mean),
                opt(r.cr.std),
                opt(r.precision.mean),
                opt(r.precision.std)
            )
            .unwrap();
        }
        out
    }
}

pub fn seeds_of(cfg: &ExperimentConfig) -> Vec<u64> {
    (0..cfg.seeds as u64).map(|k| cfg.seed + k).collect()
}

/// Runs every variant on every seed; each seed regenerates its own dataset.
pub fn run_table(cfg: &ExperimentConfig, title: &str, variants: &[Variant]) -> Result<Table> {
    let seeds = seeds_of(cfg);
    let mut per_variant: Vec<Vec<Aggregates>> = vec![Vec::new(); variants.len()];
    for &seed in &seeds {
        let base = cfg.with_seed(seed);
        let g = load_dataset(&base)?;
        for (k, v) in variants.iter().enumerate() {
            let run = run_backtest(&v.apply(&base), &g)?;
            log::info!("{title} / {} / seed {seed}: IC {:?}", v.name, run.report.aggregates.ic);
            per_variant[k].push(run.report.aggregates);
        }
    }
    Ok(Table {
        title: title.into(),
        k: cfg.metric_k,
        rows: variants
            .iter()
            .zip(per_variant)
            .map(|(v, a)| TableRow::from_runs(v.name.clone(), seeds.clone(), a))
            .collect(),
    })
}

/// Component table followed by the relation table.
pub fn run_ablation(cfg: &ExperimentConfig) -> Result<(Table, Table)> {
    Ok((
        run_table(cfg, "components", &component_variants())?,
        run_table(cfg, "relations", &relation_variants())?,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Window,
    Layers,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "window" => Some(Self::Window),
            "layers" => Some(Self::Layers),
            _ => None,
        }
    }

    pub fn values(self) -> &'static [usize] {
        match self {
            SweepAxis::Window => &[2, 5, 10, 15, 20],
            SweepAxis::Layers => &[1, 2, 3, 4],
        }
    }

    pub fn apply(self, cfg: &ExperimentConfig, value: usize) -> ExperimentConfig {
        let mut c = cfg.clone();
        match self {
            SweepAxis::Window => c.model.window = value,
            SweepAxis::Layers => c.model.layers = value,
        }
        c
    }

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Window => "window",
            SweepAxis::Layers => "layers",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: usize,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub cr: Vec<f64>,
    pub ic: Vec<Option<f64>>,
}

/// One row per axis value with CR and IC for every seed.
pub fn run_sweep(cfg: &ExperimentConfig, axis: SweepAxis) -> Result<Vec<SweepRow>> {
    let seeds = seeds_of(cfg);
    let mut rows: Vec<SweepRow> = axis
        .values()
        .iter()
        .map(|&v| SweepRow {
            value: v,
            config_hash: axis.apply(cfg, v).hash(),
            seeds: seeds.clone(),
            cr: Vec::new(),
            ic: Vec::new(),
        })
        .collect();
    for &seed in &seeds {
        let base = cfg.with_seed(seed);
        let g = load_dataset(&base)?;
        for row in &mut rows {
            let run = run_backtest(&axis.apply(&base, row.value), &g)?;
            row.cr.push(run.report.aggregates.cr);
            row.ic.push(run.report.aggregates.ic);
        }
    }
    Ok(rows)
}

/// `axis,value,seed,cr,ic` rows plus per-value means.
pub fn sweep_csv(axis: SweepAxis, rows: &[SweepRow]) -> String {
    let mut out = format!("{},seed,cr,ic\n", axis.name());
    for r in rows {
        for (k, seed) in r.seeds.iter().enumerate() {
            writeln!(out, "{},{seed},{:?},{}", r.value, r.cr[k], opt(r.ic[k])).unwrap();
        }
        let mean_cr = r.cr.iter().sum::<f64>() / r.cr.len().max(1) as f64;
        writeln!(out, "{},mean,{mean_cr:?},{}", r.value, opt(Stat::of(&r.ic).mean)).unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_layer_over_preset() {
        let cfg = ExperimentConfig::resolve(
            Some(r#"{"model": {"d_h": 8}}"#),
            &["train.lr=0.01".into(), "model.ablation.relations=[\"SS\"]".into()],
            Some(7),
        )
        .unwrap();
        assert_eq!(cfg.model.d_h, 8);
        assert_eq!(cfg.model.layers, 2);
        assert_eq!(cfg.train.lr, 0.01);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.model.ablation.relations, RelationSet::of(&[Relation::StockStock]));
        assert_eq!(cfg.metric_k, 3);
    }

    #[test]
    fn bad_configs_are_config_errors() {
        for (doc, sets) in [
            (Some("[1]"), vec![]),
            (Some("{\"model\": {\"dh\": 3}}"), vec![]),
            (None, vec!["train.lr=-1".to_string()]),
            (None, vec!["preset=huge".to_string()]),
            (None, vec!["noequals".to_string()]),
        ] {
            let e = ExperimentConfig::resolve(doc, &sets, None).unwrap_err();
            assert_eq!(e.exit_code(), 2, "{e}");
        }
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        assert_eq!(a.hash(), ExperimentConfig::default().hash());
        assert_ne!(a.hash(), a.with_seed(1).hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn default_sweep_points_match_default_config() {
        let cfg = ExperimentConfig::default();
        assert_eq!(SweepAxis::Window.apply(&cfg, 10), cfg);
        assert_eq!(SweepAxis::Layers.apply(&cfg, 2), cfg);
    }
}
