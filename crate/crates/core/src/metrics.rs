//! Cross-sectional evaluation metrics and backtest reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One day's predictions and realised excess returns.
#[derive(Clone, Debug, PartialEq)]
pub struct DayScores {
    pub day: usize,
    pub predictions: Vec<f64>,
    pub returns: Vec<f64>,
    pub valid: Vec<bool>,
}

impl DayScores {
    /// Builds a day from per-stock labels, `None` marking invalid stocks.
    pub fn new(day: usize, predictions: Vec<f64>, labels: &[Option<f64>]) -> Result<Self> {
        if predictions.len() != labels.len() {
            return Err(Error::Contract(format!(
                "{} predictions for {} stocks",
                predictions.len(),
                labels.len()
            )));
        }
        Ok(Self {
            day,
            predictions,
            returns: labels.iter().map(|l| l.unwrap_or(0.0)).collect(),
            valid: labels.iter().map(Option::is_some).collect(),
        })
    }

    pub fn valid_indices(&self) -> Vec<usize> {
        (0..self.valid.len()).filter(|&i| self.valid[i]).collect()
    }
}

/// Ranks starting at 1, ties share their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

/// Pearson correlation; `None` when either side is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Spearman rank correlation over valid stocks. `None` with fewer than two
/// valid stocks or constant predictions or returns.
pub fn daily_ic(s: &DayScores) -> Option<f64> {
    let idx = s.valid_indices();
    if idx.len() < 2 {
        return None;
    }
    let p: Vec<f64> = idx.iter().map(|&i| s.predictions[i]).collect();
    let r: Vec<f64> = idx.iter().map(|&i| s.returns[i]).collect();
    pearson(&average_ranks(&p), &average_ranks(&r))
}

/// The `k` highest-scoring valid stocks, ties to the lower index, and their
/// equal-weight mean excess return. `None` with fewer than `k` valid stocks.
pub fn topk_portfolio(s: &DayScores, k: usize) -> Option<(Vec<usize>, f64)> {
    let mut idx = s.valid_indices();
    if k == 0 || idx.len() < k {
        return None;
    }
    idx.sort_by(|&a, &b| s.predictions[b].total_cmp(&s.predictions[a]).then(a.cmp(&b)));
    idx.truncate(k);
    let ret = idx.iter().map(|&i| s.returns[i]).sum::<f64>() / k as f64;
    Some((idx, ret))
}

pub fn cumulative_return(daily: &[f64]) -> f64 {
    daily.iter().fold(1.0, |acc, r| acc * (1.0 + r)) - 1.0
}

/// Mean over sample standard deviation. `None` with fewer than two days or
/// zero spread.
pub fn information_ratio(daily: &[f64]) -> Option<f64> {
    if daily.len() < 2 {
        return None;
    }
    let n = daily.len() as f64;
    let mean = daily.iter().sum::<f64>() / n;
    let var = daily.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        return None;
    }
    Some(mean / var.sqrt())
}

/// Fraction of the top-`k` stocks with positive excess return.
pub fn precision_at_k(s: &DayScores, k: usize) -> Option<f64> {
    let (top, _) = topk_portfolio(s, k)?;
    Some(top.iter().filter(|&&i| s.returns[i] > 0.0).count() as f64 / k as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DayRow {
    pub day: usize,
    pub fold: usize,
    pub ic: Option<f64>,
    pub portfolio_return: Option<f64>,
    pub precision: Option<f64>,
    pub top_k: Vec<usize>,
    pub predictions: Vec<f64>,
    pub returns: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedDay {
    pub day: usize,
    pub metric: String,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub ic: Option<f64>,
    pub ir: Option<f64>,
    pub cr: f64,
    pub precision: Option<f64>,
    pub ic_days: usize,
    pub portfolio_days: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BacktestReport {
    pub config_hash: String,
    pub k: usize,
    pub days: Vec<DayRow>,
    pub skipped: Vec<SkippedDay>,
    pub aggregates: Aggregates,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl BacktestReport {
    /// Scores each `(fold, day)` and aggregates. Degenerate days are left out
    /// of every aggregate of the affected metric and listed in `skipped`.
    pub fn build(config_hash: String, k: usize, days: &[(usize, DayScores)]) -> Self {
        let mut rows = Vec::with_capacity(days.len());
        let mut skipped = Vec::new();
        for (fold, s) in days {
            let ic = daily_ic(s);
            if ic.is_none() {
                log::info!("day {}: IC undefined, skipped", s.day);
                skipped.push(SkippedDay {
                    day: s.day,
                    metric: "ic".into(),
                    reason: "fewer than two valid stocks or constant values".into(),
                });
            }
            let top = topk_portfolio(s, k);
            if top.is_none() {
                log::info!("day {}: fewer than {k} valid stocks, portfolio skipped", s.day);
                skipped.push(SkippedDay {
                    day: s.day,
                    metric: "portfolio".into(),
                    reason: format!("fewer than {k} valid stocks"),
                });
            }
            rows.push(DayRow {
                day: s.day,
                fold: *fold,
                ic,
                portfolio_return: top.as_ref().map(|t| t.1),
                precision: precision_at_k(s, k),
                top_k: top.map(|t| t.0).unwrap_or_default(),
                predictions: s.predictions.clone(),
                returns: s
                    .returns
                    .iter()
                    .zip(&s.valid)
                    .map(|(r, v)| v.then_some(*r))
                    .collect(),
            });
        }
        let ics: Vec<f64> = rows.iter().filter_map(|r| r.ic).collect();
        let rets: Vec<f64> = rows.iter().filter_map(|r| r.portfolio_return).collect();
        let precs: Vec<f64> = rows.iter().filter_map(|r| r.precision).collect();
        let aggregates = Aggregates {
            ic: mean(&ics),
            ir: information_ratio(&rets),
            cr: cumulative_return(&rets),
            precision: mean(&precs),
            ic_days: ics.len(),
            portfolio_days: rets.len(),
        };
        Self {
            config_hash,
            k,
            days: rows,
            skipped,
            aggregates,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// `day,fold,ic,portfolio_return,precision`, empty cells for skipped values.
    pub fn series_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:?}"));
        let mut out = String::from("day,fold,ic,portfolio_return,precision\n");
        for r in &self.days {
            writeln!(
                out,
                "{},{},{},{},{}",
                r.day,
                r.fold,
                cell(r.ic),
                cell(r.portfolio_return),
                cell(r.precision)
            )
            .unwrap();
        }
        out
    }
}
