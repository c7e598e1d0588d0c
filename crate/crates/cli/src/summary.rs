//! Sweep summaries: median and quartiles of terminal metrics per
//! `(method, K)`.

use std::collections::BTreeMap;

use serde::Serialize;

use rws_core::stats::quantile;

use crate::config::Benchmark;
use crate::runner::{CellOutcome, CellStatus};

pub const SUMMARY_FILE: &str = "summary.csv";

/// Numbers are written as-is; a group with any failed cell shows `failed`
/// in place of its statistics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub benchmark: &'static str,
    pub method: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub metric: &'static str,
    pub median: String,
    pub q1: String,
    pub q3: String,
    pub n_seeds: usize,
}

/// One row per `(method, K, metric)`, in config order.
pub fn summarize(benchmark: Benchmark, methods: &[String], ks: &[usize], outcomes: &[CellOutcome]) -> Vec<SummaryRow> {
    let metric_names: &[&'static str] = match benchmark {
        Benchmark::Gmm => &["l2_prior", "l2_posterior", "grad_std", "support_size"],
        Benchmark::Pcfg => &["production_kl", "sleep_loss_proxy"],
    };
    let mut groups: BTreeMap<(&str, usize), Vec<&CellOutcome>> = BTreeMap::new();
    for o in outcomes {
        groups.entry((o.cell.method.as_str(), o.cell.k)).or_default().push(o);
    }
    let mut rows = Vec::new();
    for method in methods {
        for &k in ks {
            let group = groups.get(&(method.as_str(), k)).cloned().unwrap_or_default();
            let failed = group.is_empty() || group.iter().any(|o| o.status == CellStatus::Failed);
            let done: Vec<&&CellOutcome> = group.iter().filter(|o| o.status != CellStatus::Failed).collect();
            for &metric in metric_names {
                let values: Vec<f64> = done
                    .iter()
                    .filter_map(|o| o.terminal.iter().find(|(n, _)| *n == metric).map(|(_, v)| *v))
                    .collect();
                let stat = |p: f64| {
                    if failed {
                        "failed".to_string()
                    } else {
                        quantile(&values, p).map_or_else(|| "failed".to_string(), |v| v.to_string())
                    }
                };
                rows.push(SummaryRow {
                    benchmark: benchmark.name(),
                    method: method.clone(),
                    k,
                    metric,
                    median: stat(0.5),
                    q1: stat(0.25),
                    q3: stat(0.75),
                    n_seeds: values.len(),
                });
            }
        }
    }
    rows
}
