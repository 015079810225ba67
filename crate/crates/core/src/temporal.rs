//! Causal multi-head self-attention over each stock's last `window + 1`
//! daily embeddings, with linear distance penalties per head.
//!
//! Head `k` adds `-slope_k * (q - j)` to the score of query `q` on key `j`,
//! where `slope_k = 2^(-8k / heads)`. The heads share the query, key and value
//! projections. Their attention matrices are averaged before they are
//! applied to the values.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::matrix::{Matrix, SparseMatrix, MASKED};
use crate::params::Bindings;
use crate::tape::{Tape, Var};

pub const QUERY: &str = "tmp.wq";
pub const KEY: &str = "tmp.wk";
pub const VALUE: &str = "tmp.wv";
pub const OUTPUT: &str = "tmp.wo";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TemporalConfig {
    pub d_h: usize,
    pub heads: usize,
    /// Number of past days each query may look back.
    pub window: usize,
}

impl TemporalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_h == 0 {
            return Err(Error::Config("temporal heads and width must be positive".into()));
        }
        Ok(())
    }
}

/// `(name, rows, cols, fan_in)` for every temporal parameter.
pub fn param_shapes(cfg: &TemporalConfig) -> Vec<(String, usize, usize, usize)> {
    [QUERY, KEY, VALUE, OUTPUT]
        .iter()
        .map(|n| (n.to_string(), cfg.d_h, cfg.d_h, cfg.d_h))
        .collect()
}

pub fn alibi_slopes(heads: usize) -> Vec<f64> {
    (1..=heads)
        .map(|k| 2f64.powf(-8.0 * k as f64 / heads as f64))
        .collect()
}

/// `len × len` distance penalty; entries above the diagonal are zero.
pub fn alibi_bias(len: usize, slope: f64) -> Matrix {
    let mut m = Matrix::zeros(len, len);
    for q in 0..len {
        for j in 0..=q {
            m.set(q, j, -slope * (q - j) as f64);
        }
    }
    m
}

/// `0` where key `j ≤ q`, [`MASKED`] elsewhere.
pub fn forward_mask(len: usize) -> Matrix {
    let mut m = Matrix::zeros(len, len);
    for q in 0..len {
        for j in q + 1..len {
            m.set(q, j, MASKED);
        }
    }
    m
}

/// One stock's embedding window ending on day `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowBatch {
    /// Row `p` holds day `t - window + p`; rows before day 0 are zero.
    pub rows: Matrix,
    pub valid: Vec<bool>,
}

/// Gathers `stock`'s embeddings for days `t - window ..= t` from per-day
/// `n × d` matrices.
pub fn assemble_window(daily: &[Matrix], stock: usize, t: usize, window: usize) -> Result<WindowBatch> {
    let d = daily
        .get(t)
        .ok_or_else(|| Error::Contract(format!("no embeddings for day {t}")))?
        .cols();
    let len = window + 1;
    let mut rows = Matrix::zeros(len, d);
    let mut valid = vec![false; len];
    for p in 0..len {
        let Some(day) = (t + p).checked_sub(window) else {
            continue;
        };
        let e = &daily[day];
        if stock >= e.rows() {
            return Err(Error::Contract(format!("stock {stock} missing on day {day}")));
        }
        rows.row_mut(p).copy_from_slice(e.row(stock));
        valid[p] = true;
    }
    Ok(WindowBatch { rows, valid })
}

/// Attention over one window for every valid query position.
#[derive(Clone, Debug)]
pub struct WindowOutput {
    /// First valid position; `outputs` row `r` is position `first + r`.
    pub first: usize,
    pub outputs: Var,
    /// Head-averaged attention, `(len - first) × len`.
    pub attention: Var,
    /// Output at the newest position, `1 × d`.
    pub last: Var,
}

/// Full causal attention over one window. Valid positions must be a suffix.
pub fn temporal_attend(
    tape: &mut Tape,
    b: &Bindings,
    window: Var,
    valid: &[bool],
    cfg: &TemporalConfig,
) -> Result<WindowOutput> {
    let len = valid.len();
    let first = valid
        .iter()
        .position(|v| *v)
        .ok_or_else(|| Error::Contract("window has no valid days".into()))?;
    if valid[first..].iter().any(|v| !v) {
        return Err(Error::Contract("valid window days must be contiguous to the end".into()));
    }
    let nq = len - first;
    let q = tape.matmul(window, b.var(QUERY)?)?;
    let k = tape.matmul(window, b.var(KEY)?)?;
    let v = tape.matmul(window, b.var(VALUE)?)?;
    let pick: Vec<usize> = (first..len).collect();
    let q = tape.spmm(Rc::new(SparseMatrix::selector(len, &pick)?), q)?;
    let kt = tape.transpose(k)?;
    let raw = tape.matmul(q, kt)?;
    let scores = tape.scale(raw, 1.0 / (cfg.d_h as f64).sqrt())?;

    let mut mask = forward_mask(len).select_rows(&pick);
    for r in 0..nq {
        for j in 0..first {
            mask.set(r, j, MASKED);
        }
    }
    let mask = Rc::new(mask);
    let mut heads = Vec::with_capacity(cfg.heads);
    for slope in alibi_slopes(cfg.heads) {
        let bias = tape.constant(alibi_bias(len, slope).select_rows(&pick));
        let biased = tape.add(scores, bias)?;
        heads.push(tape.softmax_rows(biased, Some(mask.clone()))?);
    }
    let attention = tape.mean_over(&heads)?;
    let mixed = tape.matmul(attention, v)?;
    let outputs = tape.matmul(mixed, b.var(OUTPUT)?)?;
    let last = tape.spmm(Rc::new(SparseMatrix::selector(nq, &[nq - 1])?), outputs)?;
    Ok(WindowOutput {
        first,
        outputs,
        attention,
        last,
    })
}

/// Key and value projections of one day's stock embeddings.
#[derive(Clone, Copy, Debug)]
pub struct DayProjection {
    pub embeddings: Var,
    pub keys: Var,
    pub values: Var,
}

pub fn project_day(tape: &mut Tape, b: &Bindings, embeddings: Var) -> Result<DayProjection> {
    Ok(DayProjection {
        embeddings,
        keys: tape.matmul(embeddings, b.var(KEY)?)?,
        values: tape.matmul(embeddings, b.var(VALUE)?)?,
    })
}

/// Newest-position attention output for every stock at once.
///
/// `days[p]` is the projection of day `t - window + p`, or `None` before
/// day 0. The last entry is the query day. Matches the last row of
/// [`temporal_attend`] applied per stock.
pub fn attend_day(
    tape: &mut Tape,
    b: &Bindings,
    days: &[Option<DayProjection>],
    cfg: &TemporalConfig,
) -> Result<Var> {
    let len = days.len();
    let current = days
        .last()
        .copied()
        .flatten()
        .ok_or_else(|| Error::Contract("query day missing from window".into()))?;
    let n = tape.value(current.embeddings).rows();
    let q = tape.matmul(current.embeddings, b.var(QUERY)?)?;
    let scale = 1.0 / (cfg.d_h as f64).sqrt();

    let mut positions = Vec::new();
    let mut columns = Vec::new();
    for (p, day) in days.iter().enumerate() {
        if let Some(day) = day {
            let dot = tape.row_dot(q, day.keys)?;
            columns.push(tape.scale(dot, scale)?);
            positions.push((p, *day));
        }
    }
    let scores = tape.concat_cols(&columns)?;
    let mut heads = Vec::with_capacity(cfg.heads);
    for slope in alibi_slopes(cfg.heads) {
        let row: Vec<f64> = positions
            .iter()
            .map(|(p, _)| -slope * (len - 1 - p) as f64)
            .collect();
        let mut bias = Matrix::zeros(n, positions.len());
        for i in 0..n {
            bias.row_mut(i).copy_from_slice(&row);
        }
        let bias = tape.constant(bias);
        let biased = tape.add(scores, bias)?;
        heads.push(tape.softmax_rows(biased, None)?);
    }
    let attention = tape.mean_over(&heads)?;
    let mut mixed = None;
    for (col, (_, day)) in positions.iter().enumerate() {
        let w = tape.select_col(attention, col)?;
        let term = tape.scale_rows(day.values, w)?;
        mixed = Some(match mixed {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    tape.matmul(mixed.expect("query day is always present"), b.var(OUTPUT)?)
}
