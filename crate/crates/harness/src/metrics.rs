use std::collections::BTreeMap;
use std::io::{Read, Write};

use anyhow::Result;
use serde::{Deserialize, Serialize};

/// One episode of one strategy. Times are per-step means in microseconds;
/// suites that do not time steps leave them empty, as do suites without a
/// sliding window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub strategy: String,
    pub n: usize,
    pub d: usize,
    pub episode: usize,
    pub queries: usize,
    pub t_select_us: Option<f64>,
    pub t_update_us: Option<f64>,
    pub window_mean: Option<f64>,
}

pub fn write_rows<W: Write, T: Serialize>(writer: W, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics<R: Read>(reader: R) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_reader(reader);
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

/// Per `(strategy, n)` averages.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub strategy: String,
    pub n: usize,
    pub episodes: usize,
    pub mean_queries: f64,
    /// Mean select + update time per step.
    pub mean_step_us: Option<f64>,
}

pub fn summarise(rows: &[MetricsRow]) -> Vec<Summary> {
    let mut groups: BTreeMap<(String, usize), Vec<&MetricsRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.strategy.clone(), r.n)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((strategy, n), rs)| {
            let k = rs.len() as f64;
            let timed: Vec<f64> = rs.iter().filter_map(|r| Some(r.t_select_us? + r.t_update_us?)).collect();
            Summary {
                strategy,
                n,
                episodes: rs.len(),
                mean_queries: rs.iter().map(|r| r.queries as f64).sum::<f64>() / k,
                mean_step_us: (!timed.is_empty()).then(|| timed.iter().sum::<f64>() / timed.len() as f64),
            }
        })
        .collect()
}
