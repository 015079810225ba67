//! On-disk dataset layout: `snapshots.jsonl`, `prices.csv`, `benchmark.csv`.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DynamicGraph, EdgeRecord, GraphSnapshot, Relation, DEFAULT_EDGE_DIM};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const SNAPSHOTS_FILE: &str = "snapshots.jsonl";
pub const PRICES_FILE: &str = "prices.csv";
pub const BENCHMARK_FILE: &str = "benchmark.csv";

#[derive(Serialize, Deserialize)]
struct SnapshotLine {
    day: usize,
    nodes: NodesLine,
    edges: Vec<EdgeLine>,
}

#[derive(Serialize, Deserialize)]
struct NodesLine {
    #[serde(rename = "S")]
    stocks: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    banks: Vec<Vec<f64>>,
    #[serde(rename = "I")]
    industries: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct EdgeLine {
    rel: Relation,
    src: usize,
    dst: usize,
    feat: Vec<f64>,
}

fn rows_of(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

/// Writes the three dataset files into `dir`, creating it if needed.
pub fn save(g: &DynamicGraph, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;

    let mut jsonl = String::new();
    for s in &g.snapshots {
        let line = SnapshotLine {
            day: s.day,
            nodes: NodesLine {
                stocks: rows_of(&s.stock_features),
                banks: rows_of(&s.bank_features),
                industries: rows_of(&s.industry_features),
            },
            edges: s
                .edges
                .iter()
                .map(|e| EdgeLine {
                    rel: e.relation,
                    src: e.src.index,
                    dst: e.dst.index,
                    feat: e.features.clone(),
                })
                .collect(),
        };
        jsonl.push_str(&serde_json::to_string(&line)?);
        jsonl.push('\n');
    }
    fs::write(dir.join(SNAPSHOTS_FILE), jsonl)?;

    let (n, t) = g.prices.shape();
    let mut csv = String::from("stock");
    for d in 0..t {
        write!(csv, ",day{d}").unwrap();
    }
    csv.push('\n');
    for i in 0..n {
        write!(csv, "{i}").unwrap();
        for d in 0..t {
            if g.halted.contains(&(i, d)) {
                csv.push(',');
            } else {
                write!(csv, ",{:?}", g.prices.get(i, d)).unwrap();
            }
        }
        csv.push('\n');
    }
    fs::write(dir.join(PRICES_FILE), csv)?;

    let mut bench = String::from("day,return\n");
    for (d, r) in g.benchmark.iter().enumerate() {
        writeln!(bench, "{d},{r:?}").unwrap();
    }
    fs::write(dir.join(BENCHMARK_FILE), bench)?;
    Ok(())
}

fn parse_err(file: &str, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        file: file.to_string(),
        line,
        msg: msg.into(),
    }
}

fn parse_f64(file: &str, line: usize, cell: &str) -> Result<f64> {
    let v: f64 = cell
        .trim()
        .parse()
        .map_err(|_| parse_err(file, line, format!("not a number: {cell:?}")))?;
    if !v.is_finite() {
        return Err(parse_err(file, line, format!("non-finite value {cell:?}")));
    }
    Ok(v)
}

fn matrix_from(rows: Vec<Vec<f64>>, width: usize, file: &str, line: usize) -> Result<Matrix> {
    if rows.is_empty() {
        return Ok(Matrix::zeros(0, width));
    }
    Matrix::from_rows(&rows).map_err(|e| parse_err(file, line, e.to_string()))
}

/// Reads a dataset directory written by [`save`] and checks its schema.
fn read_file(dir: &Path, name: &str) -> Result<String> {
    let path = dir.join(name);
    fs::read_to_string(&path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))
}

pub fn load(dir: &Path) -> Result<DynamicGraph> {
    let text = read_file(dir, SNAPSHOTS_FILE)?;
    let mut lines = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let line: SnapshotLine =
            serde_json::from_str(raw).map_err(|e| parse_err(SNAPSHOTS_FILE, k + 1, e.to_string()))?;
        lines.push((k + 1, line));
    }
    let edge_dim = lines
        .iter()
        .flat_map(|(_, l)| l.edges.first())
        .map(|e| e.feat.len())
        .next()
        .unwrap_or(DEFAULT_EDGE_DIM);

    let mut snapshots = Vec::with_capacity(lines.len());
    for (line_no, l) in lines {
        let width = l.nodes.stocks.first().map_or(0, Vec::len);
        let snap = GraphSnapshot {
            day: l.day,
            stock_features: matrix_from(l.nodes.stocks, width, SNAPSHOTS_FILE, line_no)?,
            bank_features: matrix_from(l.nodes.banks, width, SNAPSHOTS_FILE, line_no)?,
            industry_features: matrix_from(l.nodes.industries, width, SNAPSHOTS_FILE, line_no)?,
            edge_dim,
            edges: l
                .edges
                .into_iter()
                .map(|e| EdgeRecord::new(e.rel, e.src, e.dst, e.feat))
                .collect(),
        };
        if let Some(first) = snapshots.first() {
            let first: &GraphSnapshot = first;
            if snap.n_stocks() != first.n_stocks() {
                return Err(Error::Schema(format!(
                    "{SNAPSHOTS_FILE} line {line_no}: day {} has {} stocks, day {} has {}",
                    snap.day,
                    snap.n_stocks(),
                    first.day,
                    first.n_stocks()
                )));
            }
        }
        if let Some(v) = snap.validate().first() {
            return Err(Error::Schema(format!(
                "{SNAPSHOTS_FILE} line {line_no} (day {}): {v}",
                snap.day
            )));
        }
        snapshots.push(snap);
    }

    let (prices, halted) = load_prices(&read_file(dir, PRICES_FILE)?)?;
    let benchmark = load_benchmark(&read_file(dir, BENCHMARK_FILE)?)?;
    let g = DynamicGraph {
        snapshots,
        prices,
        benchmark,
        halted,
    };
    g.check()?;
    Ok(g)
}

fn load_prices(text: &str) -> Result<(Matrix, BTreeSet<(usize, usize)>)> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(PRICES_FILE, 1, "missing header"))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.first().map(|c| c.trim()) != Some("stock") {
        return Err(parse_err(PRICES_FILE, 1, "header must start with \"stock\""));
    }
    let t = cols.len() - 1;
    let mut rows = Vec::new();
    let mut halted = BTreeSet::new();
    for (k, line) in lines {
        let line_no = k + 1;
        let cells: Vec<&str> = line.split(',').collect();
        let stock: usize = cells[0]
            .trim()
            .parse()
            .map_err(|_| parse_err(PRICES_FILE, line_no, format!("bad stock id {:?}", cells[0])))?;
        if cells.len() != t + 1 {
            return Err(parse_err(
                PRICES_FILE,
                line_no,
                format!(
                    "row for stock {stock} has {} prices, expected {t}",
                    cells.len() - 1
                ),
            ));
        }
        if stock != rows.len() {
            return Err(parse_err(
                PRICES_FILE,
                line_no,
                format!("expected stock {}, found {stock}", rows.len()),
            ));
        }
        let mut row = Vec::with_capacity(t);
        for (d, cell) in cells[1..].iter().enumerate() {
            if cell.trim().is_empty() {
                let prev = *row.last().ok_or_else(|| {
                    parse_err(PRICES_FILE, line_no, format!("stock {stock} halted on day 0"))
                })?;
                halted.insert((stock, d));
                row.push(prev);
            } else {
                row.push(parse_f64(PRICES_FILE, line_no, cell)?);
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Ok((Matrix::zeros(0, t), halted));
    }
    Ok((Matrix::from_rows(&rows)?, halted))
}

fn load_benchmark(text: &str) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 2 {
            return Err(parse_err(BENCHMARK_FILE, k + 1, "expected \"day,return\""));
        }
        let day: usize = cells[0]
            .trim()
            .parse()
            .map_err(|_| parse_err(BENCHMARK_FILE, k + 1, "bad day"))?;
        if day != out.len() {
            return Err(parse_err(BENCHMARK_FILE, k + 1, format!("expected day {}", out.len())));
        }
        out.push(parse_f64(BENCHMARK_FILE, k + 1, cells[1])?);
    }
    Ok(out)
}
