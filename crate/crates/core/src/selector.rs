//! Picks the (variant, input size) with the best accuracy inside a latency
//! budget, using measured sweep tables only.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::profiler::{SweepRow, SweepTable};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Map50,
    #[default]
    Map50_95,
}

impl Metric {
    pub fn of(self, row: &SweepRow) -> Option<f64> {
        match self {
            Metric::Map50 => row.map50,
            Metric::Map50_95 => row.map50_95,
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Metric::Map50 => "map50",
            Metric::Map50_95 => "map50_95",
        })
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '@'], "_").as_str() {
            "map50" | "map_50" => Ok(Metric::Map50),
            "map50_95" | "map_50_95" => Ok(Metric::Map50_95),
            _ => Err(Error::Parse { context: "metric".into(), reason: format!("unknown metric {s:?}") }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub limit_ms: f64,
    #[serde(default)]
    pub metric: Metric,
}

impl Budget {
    pub fn new(limit_ms: f64, metric: Metric) -> Result<Self> {
        if !(limit_ms.is_finite() && limit_ms > 0.0) {
            return Err(Error::Config(format!("budget must be a positive number of ms, got {limit_ms}")));
        }
        Ok(Self { limit_ms, metric })
    }
}

fn metric_values(table: &SweepTable, metric: Metric) -> Result<Vec<(&SweepRow, f64)>> {
    table
        .rows
        .iter()
        .map(|r| {
            metric
                .of(r)
                .map(|m| (r, m))
                .ok_or_else(|| Error::Data(format!("row {}@{} lacks {metric}", r.variant_name, r.input_size)))
        })
        .collect()
}

/// Orders candidates best first: higher metric, then lower latency, then fewer
/// parameters, then the smaller variant name and input size.
fn preference(a: &(&SweepRow, f64), b: &(&SweepRow, f64)) -> Ordering {
    b.1.total_cmp(&a.1)
        .then(a.0.mean_total_ms.total_cmp(&b.0.mean_total_ms))
        .then_with(|| match (a.0.parameter_count, b.0.parameter_count) {
            (Some(x), Some(y)) => x.cmp(&y),
            _ => Ordering::Equal,
        })
        .then_with(|| a.0.variant_name.cmp(&b.0.variant_name))
        .then(a.0.input_size.cmp(&b.0.input_size))
}

pub fn select_config<'a>(table: &'a SweepTable, budget: &Budget) -> Result<&'a SweepRow> {
    if table.rows.is_empty() {
        return Err(Error::InsufficientData("sweep table has no rows".into()));
    }
    let scored = metric_values(table, budget.metric)?;
    scored
        .iter()
        .filter(|(r, _)| r.mean_total_ms <= budget.limit_ms)
        .min_by(|a, b| preference(a, b))
        .map(|(r, _)| *r)
        .ok_or_else(|| {
            let fastest = table
                .rows
                .iter()
                .min_by(|a, b| a.mean_total_ms.total_cmp(&b.mean_total_ms))
                .expect("table is non-empty");
            Error::InfeasibleBudget {
                limit_ms: budget.limit_ms,
                fastest_variant: fastest.variant_name.clone(),
                fastest_size: fastest.input_size,
                fastest_ms: fastest.mean_total_ms,
            }
        })
}

/// Rows no other row dominates, by ascending latency. Of identical rows the
/// first is kept.
pub fn pareto_frontier(table: &SweepTable, metric: Metric) -> Result<Vec<&SweepRow>> {
    let scored = metric_values(table, metric)?;
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| {
        scored[a].0.mean_total_ms.total_cmp(&scored[b].0.mean_total_ms).then(scored[b].1.total_cmp(&scored[a].1))
    });
    let mut frontier = Vec::new();
    let mut best = f64::NEG_INFINITY;
    for i in order {
        let (row, m) = scored[i];
        if m > best {
            best = m;
            frontier.push(row);
        }
    }
    Ok(frontier)
}
