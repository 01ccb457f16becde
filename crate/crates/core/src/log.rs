//! Run log rows and their CSV encoding.
//!
//! One server row (client id −1) per round, plus one row per active client
//! in every accounted round. Floats are written with 10 significant digits
//! in exponent form so that files are byte-identical across platforms.
//! Fields that do not apply to a row are left empty.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "round,client_id,I,S,P,R,tau,B,U,epsilon,G,active,loss_N,test_acc";

/// Version of the CSV layout, bumped whenever `CSV_HEADER` changes. The
/// JSON summary records it next to the log.
pub const CSV_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LogRow {
    pub round: usize,
    /// −1 for the server row.
    pub client_id: i64,
    pub importance: Option<f64>,
    pub s: Option<f64>,
    pub p: Option<f64>,
    pub r: Option<f64>,
    /// Client rows: tokens received. Server row: tokens issued this round.
    pub tau: Option<f64>,
    pub cost: Option<f64>,
    pub utility: Option<f64>,
    pub epsilon: Option<f64>,
    pub g: Option<f64>,
    /// Client rows: 1 if still active after the round, else 0. Server row:
    /// number of active clients after the round.
    pub active: usize,
    pub loss_n: Option<f64>,
    pub test_acc: Option<f64>,
}

impl LogRow {
    pub fn is_server(&self) -> bool {
        self.client_id < 0
    }
}

/// `{:.9e}`: ten significant digits.
pub fn format_float(v: f64) -> String {
    format!("{v:.9e}")
}

fn opt(v: Option<f64>) -> String {
    v.map(format_float).unwrap_or_default()
}

pub fn to_csv(rows: &[LogRow]) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.round,
            r.client_id,
            opt(r.importance),
            opt(r.s),
            opt(r.p),
            opt(r.r),
            opt(r.tau),
            opt(r.cost),
            opt(r.utility),
            opt(r.epsilon),
            opt(r.g),
            r.active,
            opt(r.loss_n),
            opt(r.test_acc),
        );
    }
    out
}

fn parse_opt(field: &str, line: usize) -> Result<Option<f64>> {
    if field.is_empty() {
        return Ok(None);
    }
    field
        .parse()
        .map(Some)
        .map_err(|_| Error::Serde(format!("line {line}: bad number {field:?}")))
}

pub fn from_csv(text: &str) -> Result<Vec<LogRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => return Err(Error::Serde(format!("unexpected CSV header {:?}", other.unwrap_or("")))),
    }
    let mut rows = Vec::new();
    for (k, line) in lines.enumerate() {
        let n = k + 2;
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 14 {
            return Err(Error::Serde(format!("line {n}: expected 14 fields, got {}", f.len())));
        }
        let int = |s: &str| -> Result<i64> {
            s.parse()
                .map_err(|_| Error::Serde(format!("line {n}: bad integer {s:?}")))
        };
        rows.push(LogRow {
            round: int(f[0])? as usize,
            client_id: int(f[1])?,
            importance: parse_opt(f[2], n)?,
            s: parse_opt(f[3], n)?,
            p: parse_opt(f[4], n)?,
            r: parse_opt(f[5], n)?,
            tau: parse_opt(f[6], n)?,
            cost: parse_opt(f[7], n)?,
            utility: parse_opt(f[8], n)?,
            epsilon: parse_opt(f[9], n)?,
            g: parse_opt(f[10], n)?,
            active: int(f[11])? as usize,
            loss_n: parse_opt(f[12], n)?,
            test_acc: parse_opt(f[13], n)?,
        });
    }
    Ok(rows)
}

pub fn write_csv(path: &Path, rows: &[LogRow]) -> Result<()> {
    std::fs::write(path, to_csv(rows)).map_err(|e| Error::io(path, e))
}

pub fn read_csv(path: &Path) -> Result<Vec<LogRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_csv(&text)
}

/// Per-client aggregates of a log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientTotals {
    pub client: usize,
    pub rows: usize,
    pub total_tokens: f64,
    pub mean_importance: f64,
    pub final_epsilon: Option<f64>,
    pub last_round: usize,
    pub active: bool,
}

pub fn client_totals(rows: &[LogRow]) -> Vec<ClientTotals> {
    let mut ids: Vec<usize> = rows
        .iter()
        .filter(|r| !r.is_server())
        .map(|r| r.client_id as usize)
        .collect();
    ids.sort_unstable();
    ids.dedup();
    ids.into_iter()
        .map(|c| {
            let mine: Vec<&LogRow> = rows.iter().filter(|r| r.client_id == c as i64).collect();
            let n = mine.len();
            let last = mine.last().expect("client has rows");
            ClientTotals {
                client: c,
                rows: n,
                total_tokens: mine.iter().filter_map(|r| r.tau).sum(),
                mean_importance: mine.iter().filter_map(|r| r.importance).sum::<f64>() / n as f64,
                final_epsilon: last.epsilon,
                last_round: last.round,
                active: last.active == 1,
            }
        })
        .collect()
}

/// Plain-text table summarizing a log.
pub fn render_report(rows: &[LogRow]) -> String {
    let mut out = String::new();
    let server: Vec<&LogRow> = rows.iter().filter(|r| r.is_server()).collect();
    let rounds = server.last().map(|r| r.round).unwrap_or(0);
    let _ = writeln!(out, "rounds: {rounds}");
    if let Some(r) = server.iter().rev().find(|r| r.test_acc.is_some()) {
        let _ = writeln!(
            out,
            "final test accuracy: {:.4} (round {})",
            r.test_acc.unwrap_or(0.0),
            r.round
        );
    }
    if let Some(r) = server.last() {
        let _ = writeln!(out, "active clients at end: {}", r.active);
        if let Some(l) = r.loss_n {
            let _ = writeln!(out, "last training loss: {l:.4}");
        }
    }
    let totals = client_totals(rows);
    if !totals.is_empty() {
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "{:>6} {:>6} {:>12} {:>10} {:>9} {:>7}",
            "client", "rows", "tokens", "mean I", "final eps", "status"
        );
        for t in &totals {
            let _ = writeln!(
                out,
                "{:>6} {:>6} {:>12.3} {:>10.3} {:>9.4} {:>7}",
                t.client,
                t.rows,
                t.total_tokens,
                t.mean_importance,
                t.final_epsilon.unwrap_or(f64::NAN),
                if t.active { "active" } else { "dropped" }
            );
        }
    }
    let acc: Vec<(usize, f64)> = server.iter().filter_map(|r| r.test_acc.map(|a| (r.round, a))).collect();
    if !acc.is_empty() {
        let _ = writeln!(out);
        let _ = writeln!(out, "{:>8} {:>9}", "round", "test acc");
        for (round, a) in acc {
            let _ = writeln!(out, "{round:>8} {a:>9.4}");
        }
    }
    out
}
