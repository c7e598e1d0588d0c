//! Runs the cells of an experiment and writes their artifacts.

use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use rws_core::gmm::{GmmMethod, GmmMetrics, GmmTrainer};
use rws_core::pcfg::{PcfgMethod, PcfgMetrics, PcfgTrainer};
use rws_core::rng::stream;

use crate::config::{Benchmark, ExperimentConfig};
use crate::io::{csv_bytes, ensure_dir, write_atomic};
use crate::HarnessError;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GmmRow {
    pub iteration: usize,
    pub method: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub seed: u64,
    pub l2_prior: f64,
    pub l2_posterior: f64,
    pub grad_std: f64,
    pub support_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PcfgRow {
    pub iteration: usize,
    pub method: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub seed: u64,
    pub production_kl: f64,
    pub sleep_loss_proxy: f64,
    pub wallclock_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CellStatus {
    Ok,
    /// Stopped at the wall-clock cap; retained.
    Capped,
    Failed,
}

/// One `(method, K, seed)` run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Cell {
    pub method: String,
    pub k: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellOutcome {
    #[serde(flatten)]
    pub cell: Cell,
    pub status: CellStatus,
    pub metrics_file: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Terminal value of each summary metric.
    #[serde(skip)]
    pub terminal: Vec<(&'static str, f64)>,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    version: &'static str,
    benchmark: &'static str,
    config_file: &'static str,
    config_sha256: String,
    runs: &'a [CellOutcome],
}

pub const CONFIG_FILE: &str = "config.toml";
pub const MANIFEST_FILE: &str = "manifest.toml";

pub fn cells(config: &ExperimentConfig) -> Vec<Cell> {
    let mut out = Vec::new();
    for method in &config.methods {
        for &k in &config.ks {
            for &seed in &config.seeds {
                out.push(Cell { method: method.clone(), k, seed });
            }
        }
    }
    out
}

pub fn metrics_file_name(benchmark: Benchmark, cell: &Cell) -> String {
    format!("{}_{}_K{}_seed{}.csv", benchmark.name(), cell.method, cell.k, cell.seed)
}

pub fn posterior_file_name(cell: &Cell) -> String {
    format!("pcfg_{}_K{}_seed{}_posterior.txt", cell.method, cell.k, cell.seed)
}

/// Validates the config, runs every cell (in parallel up to
/// `config.workers`), and writes the config, per-cell files and manifest.
/// Failed cells are reported in the outcomes, not as an `Err`.
pub fn run_experiment(config: &ExperimentConfig, out_dir: &Path) -> Result<Vec<CellOutcome>, HarnessError> {
    config.validate()?;
    ensure_dir(out_dir)?;
    let config_text = config.to_toml()?;
    write_atomic(&out_dir.join(CONFIG_FILE), config_text.as_bytes())?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    let cells = cells(config);
    let outcomes: Vec<CellOutcome> = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| {
                let file = metrics_file_name(config.benchmark, cell);
                let result = match config.benchmark {
                    Benchmark::Gmm => run_gmm_cell(config, cell, out_dir),
                    Benchmark::Pcfg => run_pcfg_cell(config, cell, out_dir),
                };
                match result {
                    Ok((status, terminal)) => {
                        CellOutcome { cell: cell.clone(), status, metrics_file: file, error: None, terminal }
                    }
                    Err(e) => CellOutcome {
                        cell: cell.clone(),
                        status: CellStatus::Failed,
                        metrics_file: file,
                        error: Some(e.to_string()),
                        terminal: Vec::new(),
                    },
                }
            })
            .collect()
    });

    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION"),
        benchmark: config.benchmark.name(),
        config_file: CONFIG_FILE,
        config_sha256: hex_digest(config_text.as_bytes()),
        runs: &outcomes,
    };
    let text = toml::to_string(&manifest).map_err(|e| HarnessError::Config(e.to_string()))?;
    write_atomic(&out_dir.join(MANIFEST_FILE), text.as_bytes())?;
    Ok(outcomes)
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

type CellResult = Result<(CellStatus, Vec<(&'static str, f64)>), HarnessError>;

fn run_gmm_cell(config: &ExperimentConfig, cell: &Cell, out_dir: &Path) -> CellResult {
    let method = GmmMethod::from_str(&cell.method)?;
    let mut trainer = GmmTrainer::new(config.gmm.to_core()?, method, cell.k, cell.seed)?;
    let log = trainer.run(|_| {})?;
    let rows: Vec<GmmRow> = log.iter().map(|m| gmm_row(cell, m)).collect();
    write_atomic(&out_dir.join(metrics_file_name(Benchmark::Gmm, cell)), &csv_bytes(&rows)?)?;
    let last = log.last().ok_or_else(|| HarnessError::Config("empty metrics log".into()))?;
    Ok((
        CellStatus::Ok,
        vec![
            ("l2_prior", last.l2_prior),
            ("l2_posterior", last.l2_posterior),
            ("grad_std", last.grad_std),
            ("support_size", last.support_size as f64),
        ],
    ))
}

fn gmm_row(cell: &Cell, m: &GmmMetrics) -> GmmRow {
    GmmRow {
        iteration: m.iteration,
        method: cell.method.clone(),
        k: cell.k,
        seed: cell.seed,
        l2_prior: m.l2_prior,
        l2_posterior: m.l2_posterior,
        grad_std: m.grad_std,
        support_size: m.support_size,
    }
}

fn run_pcfg_cell(config: &ExperimentConfig, cell: &Cell, out_dir: &Path) -> CellResult {
    let method = PcfgMethod::from_str(&cell.method)?;
    let grammar = config.pcfg.load_grammar()?;
    let mut trainer = PcfgTrainer::new(grammar.clone(), config.pcfg.to_core()?, method, cell.k, cell.seed)?;
    let start = Instant::now();
    let run = trainer.run(|| start.elapsed().as_secs_f64(), |_| {})?;
    let rows: Vec<PcfgRow> = run.log.iter().map(|m| pcfg_row(cell, m)).collect();
    write_atomic(&out_dir.join(metrics_file_name(Benchmark::Pcfg, cell)), &csv_bytes(&rows)?)?;

    let mut dump = String::new();
    let mut rng = stream(cell.seed, cell.k, "pcfg-posterior-dump");
    for sentence in &config.pcfg.posterior_sentences {
        let words: Vec<&str> = sentence.split_whitespace().collect();
        let encoded = grammar.encode_sentence(&words)?;
        dump.push_str(&format!("# {}\n", words.join(" ")));
        for (tree, count) in trainer.net().posterior_samples(&grammar, &encoded, config.pcfg.posterior_samples, &mut rng)? {
            dump.push_str(&format!("{count}\t{}\n", tree.bracketed(&grammar)));
        }
    }
    write_atomic(&out_dir.join(posterior_file_name(cell)), dump.as_bytes())?;

    let last = run.terminal().ok_or_else(|| HarnessError::Config("empty metrics log".into()))?;
    let status = if run.capped { CellStatus::Capped } else { CellStatus::Ok };
    Ok((status, vec![("production_kl", last.production_kl), ("sleep_loss_proxy", last.sleep_loss_proxy)]))
}

fn pcfg_row(cell: &Cell, m: &PcfgMetrics) -> PcfgRow {
    PcfgRow {
        iteration: m.iteration,
        method: cell.method.clone(),
        k: cell.k,
        seed: cell.seed,
        production_kl: m.production_kl,
        sleep_loss_proxy: m.sleep_loss_proxy,
        wallclock_s: m.wallclock_s,
    }
}
