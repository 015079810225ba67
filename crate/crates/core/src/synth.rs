//! Seeded synthetic market with planted relational structure.
//!
//! Returns follow a linear factor model. Each stock loads on its industry
//! factor, on the flows of the banks holding it the previous day, and on its
//! owner-group factor. All three factors are persistent AR(1) processes, so
//! the current cross-section of related stocks carries information about
//! tomorrow's returns, and averaging over days and neighbours denoises it.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{DynamicGraph, EdgeRecord, GraphSnapshot, Relation};
use crate::matrix::Matrix;
use crate::rng::substream;

const BURN_IN: usize = 50;
const START_PRICE: f64 = 100.0;
const MIN_RETURN: f64 = -0.9;
/// Innovation correlation between industries of the same sector.
const SECTOR_CORRELATION: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarketConfig {
    pub n_stocks: usize,
    pub n_banks: usize,
    pub n_industries: usize,
    pub days: usize,
    pub d_in: usize,
    pub d_e: usize,
    pub industry_beta: f64,
    pub bank_beta: f64,
    pub owner_beta: f64,
    pub noise_sigma: f64,
    /// Stationary standard deviation of every factor process.
    pub factor_sigma: f64,
    pub industry_persistence: f64,
    pub flow_persistence: f64,
    /// Daily probability that a held position is dropped; the add rate
    /// keeps expected holdings constant.
    pub holdings_churn: f64,
    pub holdings_per_bank: f64,
    /// Expected stocks per owner group; same-owner pairs are SS edges.
    pub owner_group_size: usize,
    /// Leading feature dimensions carrying each node's current value.
    pub signal_dims: usize,
    /// Extra noise on every signal dimension, in factor standard deviations.
    pub observation_noise: f64,
    /// Shortest look-back the dataset must support.
    pub min_window: usize,
    pub seed: u64,
}

impl Default for MarketConfig {
    fn default() -> Self {
        Self {
            n_stocks: 10,
            n_banks: 4,
            n_industries: 3,
            days: 40,
            d_in: 42,
            d_e: 4,
            industry_beta: 0.6,
            bank_beta: 0.8,
            owner_beta: 0.3,
            noise_sigma: 0.02,
            factor_sigma: 0.02,
            industry_persistence: 0.9,
            flow_persistence: 0.9,
            holdings_churn: 0.05,
            holdings_per_bank: 3.0,
            owner_group_size: 3,
            signal_dims: 8,
            observation_noise: 0.0,
            min_window: 10,
            seed: 0,
        }
    }
}

impl MarketConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_stocks < 1 || self.n_banks < 1 || self.n_industries < 1 || self.owner_group_size < 1 {
            return bad("node counts and owner_group_size must be at least 1".into());
        }
        if self.days < self.min_window + 2 {
            return bad(format!(
                "days = {} must be at least window + 2 = {}",
                self.days,
                self.min_window + 2
            ));
        }
        for (name, v) in [
            ("industry_beta", self.industry_beta),
            ("bank_beta", self.bank_beta),
            ("owner_beta", self.owner_beta),
            ("noise_sigma", self.noise_sigma),
            ("factor_sigma", self.factor_sigma),
            ("holdings_per_bank", self.holdings_per_bank),
            ("observation_noise", self.observation_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} = {v} must be finite and non-negative"));
            }
        }
        for (name, v) in [
            ("holdings_churn", self.holdings_churn),
            ("industry_persistence", self.industry_persistence),
            ("flow_persistence", self.flow_persistence),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} = {v} must lie in [0, 1]"));
            }
        }
        if self.d_in == 0 || self.signal_dims > self.d_in {
            return bad(format!(
                "signal_dims = {} must not exceed d_in = {} (> 0)",
                self.signal_dims, self.d_in
            ));
        }
        Ok(())
    }
}

/// Named configurations: `"toy"` and `"csi100-like"`.
pub fn preset(name: &str) -> Result<MarketConfig> {
    match name {
        "toy" => Ok(MarketConfig::default()),
        "csi100-like" => Ok(MarketConfig {
            n_stocks: 100,
            n_banks: 196,
            n_industries: 97,
            days: 260,
            holdings_per_bank: 5.0,
            ..MarketConfig::default()
        }),
        other => Err(Error::Config(format!(
            "unknown preset {other:?} (expected \"toy\" or \"csi100-like\")"
        ))),
    }
}

/// Static structure drawn once per dataset.
#[derive(Clone, Debug)]
pub struct MarketStructure {
    pub industry_of: Vec<usize>,
    pub owner_of: Vec<usize>,
    pub sector_of: Vec<usize>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn uniform_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random::<f64>()).collect()
}

/// AR(1) with stationary standard deviation `sigma`, driven by shocks `eps`.
fn ar_step(prev: f64, persistence: f64, sigma: f64, eps: f64) -> f64 {
    persistence * prev + (1.0 - persistence * persistence).sqrt() * sigma * eps
}

struct Factors {
    industry: Vec<f64>,
    flow: Vec<f64>,
    owner: Vec<f64>,
}

/// Generates a dataset; a pure function of `cfg`.
pub fn generate(cfg: &MarketConfig) -> Result<DynamicGraph> {
    generate_with_structure(cfg).map(|(g, _)| g)
}

pub fn generate_with_structure(cfg: &MarketConfig) -> Result<(DynamicGraph, MarketStructure)> {
    cfg.validate()?;
    let rng = &mut substream(cfg.seed, "data");
    let (n, nb, ni) = (cfg.n_stocks, cfg.n_banks, cfg.n_industries);
    let sigma = cfg.factor_sigma;

    let mut order: Vec<usize> = (0..n).collect();
    shuffle(rng, &mut order);
    let mut industry_of = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        industry_of[i] = pos % ni;
    }
    let n_owners = n.div_ceil(cfg.owner_group_size).max(1);
    let owner_of: Vec<usize> = (0..n).map(|_| rng.random_range(0..n_owners)).collect();
    let n_sectors = ni.div_ceil(2);
    let sector_of: Vec<usize> = (0..ni).map(|k| k * n_sectors / ni).collect();

    let mut static_edges = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            if owner_of[a] == owner_of[b] {
                static_edges.push(EdgeRecord::new(Relation::StockStock, a, b, uniform_vec(rng, cfg.d_e)));
            }
        }
    }
    for a in 0..ni {
        for b in a + 1..ni {
            if sector_of[a] == sector_of[b] {
                static_edges.push(EdgeRecord::new(
                    Relation::IndustryIndustry,
                    a,
                    b,
                    uniform_vec(rng, cfg.d_e),
                ));
            }
        }
    }
    let si_features: Vec<Vec<f64>> = (0..n).map(|_| uniform_vec(rng, cfg.d_e)).collect();
    let pair_weight: Vec<f64> = (0..n * nb).map(|_| 0.5 + rng.random::<f64>()).collect();
    let research: Vec<f64> = (0..n * nb).map(|_| f64::from(rng.random_bool(0.3))).collect();

    let hold_p = (cfg.holdings_per_bank / n as f64).clamp(0.0, 1.0);
    let add_p = if hold_p < 1.0 {
        (cfg.holdings_churn * hold_p / (1.0 - hold_p)).min(1.0)
    } else {
        0.0
    };
    let mut held: Vec<Vec<bool>> = (0..nb)
        .map(|_| (0..n).map(|_| rng.random_bool(hold_p)).collect())
        .collect();
    let mut tenure = vec![vec![0usize; n]; nb];

    let mut factors = Factors {
        industry: (0..ni).map(|_| sigma * normal(rng)).collect(),
        flow: (0..nb).map(|_| sigma * normal(rng)).collect(),
        owner: (0..n_owners).map(|_| sigma * normal(rng)).collect(),
    };
    let advance = |rng: &mut ChaCha8Rng, f: &mut Factors| {
        let sector_shock: Vec<f64> = (0..n_sectors).map(|_| normal(rng)).collect();
        for k in 0..ni {
            let eps = SECTOR_CORRELATION.sqrt() * sector_shock[sector_of[k]]
                + (1.0 - SECTOR_CORRELATION).sqrt() * normal(rng);
            f.industry[k] = ar_step(f.industry[k], cfg.industry_persistence, sigma, eps);
        }
        for b in 0..nb {
            let eps = normal(rng);
            f.flow[b] = ar_step(f.flow[b], cfg.flow_persistence, sigma, eps);
        }
        for o in 0..n_owners {
            let eps = normal(rng);
            f.owner[o] = ar_step(f.owner[o], cfg.industry_persistence, sigma, eps);
        }
    };
    let stock_returns = |rng: &mut ChaCha8Rng, f: &Factors, held: &[Vec<bool>]| -> Vec<f64> {
        (0..n)
            .map(|i| {
                let holders: Vec<f64> = (0..nb).filter(|&b| held[b][i]).map(|b| f.flow[b]).collect();
                let bank = if holders.is_empty() {
                    0.0
                } else {
                    holders.iter().sum::<f64>() / holders.len() as f64
                };
                let r = cfg.industry_beta * f.industry[industry_of[i]]
                    + cfg.bank_beta * bank
                    + cfg.owner_beta * f.owner[owner_of[i]]
                    + cfg.noise_sigma * normal(rng);
                r.max(MIN_RETURN)
            })
            .collect()
    };
    let churn = |rng: &mut ChaCha8Rng, held: &mut Vec<Vec<bool>>, tenure: &mut Vec<Vec<usize>>| {
        for b in 0..nb {
            for i in 0..n {
                let flip = if held[b][i] {
                    rng.random_bool(cfg.holdings_churn)
                } else {
                    rng.random_bool(add_p)
                };
                if flip {
                    held[b][i] = !held[b][i];
                    tenure[b][i] = 0;
                } else if held[b][i] {
                    tenure[b][i] += 1;
                }
            }
        }
    };

    let mut returns = vec![0.0; n];
    for _ in 0..BURN_IN {
        advance(rng, &mut factors);
        returns = stock_returns(rng, &factors, &held);
        churn(rng, &mut held, &mut tenure);
    }

    let t_total = cfg.days;
    let mut prices = Matrix::zeros(n, t_total);
    let mut snapshots = Vec::with_capacity(t_total);
    for day in 0..t_total {
        if day > 0 {
            advance(rng, &mut factors);
            returns = stock_returns(rng, &factors, &held);
            churn(rng, &mut held, &mut tenure);
        }
        for i in 0..n {
            let p = if day == 0 {
                START_PRICE
            } else {
                prices.get(i, day - 1) * (1.0 + returns[i])
            };
            prices.set(i, day, p);
        }

        // Dimensions past `signal_dims` are fresh noise every day.
        let signal_rows = |count: usize, value: &dyn Fn(usize) -> f64, rng: &mut ChaCha8Rng| {
            let rows: Vec<Vec<f64>> = (0..count)
                .map(|k| {
                    let mut row: Vec<f64> = (0..cfg.d_in).map(|_| normal(rng)).collect();
                    let v = value(k) / sigma.max(f64::MIN_POSITIVE);
                    for (d, slot) in row.iter_mut().take(cfg.signal_dims).enumerate() {
                        let base = if d == 0 { v } else { v + normal(rng) };
                        *slot = if cfg.observation_noise > 0.0 {
                            base + cfg.observation_noise * normal(rng)
                        } else {
                            base
                        };
                    }
                    row
                })
                .collect();
            rows
        };
        let stock_rows = signal_rows(n, &|i| returns[i], rng);
        let flows = factors.flow.clone();
        let bank_rows = signal_rows(nb, &|b| flows[b], rng);
        let inds = factors.industry.clone();
        let industry_rows = signal_rows(ni, &|k| inds[k], rng);

        let mut edges = static_edges.clone();
        for (i, feat) in si_features.iter().enumerate() {
            edges.push(EdgeRecord::new(Relation::StockIndustry, i, industry_of[i], feat.clone()));
        }
        for b in 0..nb {
            for i in 0..n {
                if held[b][i] {
                    let mut feat = vec![
                        pair_weight[i * nb + b],
                        (tenure[b][i] as f64 / 20.0).min(1.0),
                        f64::from(tenure[b][i] == 0),
                        research[i * nb + b],
                    ];
                    feat.resize(cfg.d_e, 0.5);
                    edges.push(EdgeRecord::new(Relation::StockBank, i, b, feat));
                }
            }
        }
        edges.sort_by_key(|e| (e.relation, e.src, e.dst));

        snapshots.push(GraphSnapshot {
            day,
            stock_features: Matrix::from_rows(&stock_rows)?,
            bank_features: Matrix::from_rows(&bank_rows)?,
            industry_features: Matrix::from_rows(&industry_rows)?,
            edge_dim: cfg.d_e,
            edges,
        });
    }

    let benchmark = (0..t_total)
        .map(|day| {
            if day + 1 == t_total {
                return 0.0;
            }
            (0..n)
                .map(|i| {
                    let p0 = prices.get(i, day);
                    (prices.get(i, day + 1) - p0) / p0
                })
                .sum::<f64>()
                / n as f64
        })
        .collect();

    let g = DynamicGraph {
        snapshots,
        prices,
        benchmark,
        halted: BTreeSet::new(),
    };
    g.check()?;
    Ok((
        g,
        MarketStructure {
            industry_of,
            owner_of,
            sector_of,
        },
    ))
}

fn shuffle(rng: &mut ChaCha8Rng, v: &mut [usize]) {
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
}

/// Per-relation edge tallies of one snapshot.
pub fn edge_counts(s: &GraphSnapshot) -> BTreeMap<Relation, usize> {
    Relation::ALL.into_iter().map(|r| (r, s.edge_count(r))).collect()
}
