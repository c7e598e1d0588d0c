//! Experiment configuration files.
//!
//! A config is a TOML document:
//!
//! ```toml
//! benchmark = "gmm"            # or "pcfg"
//! methods = ["ws", "ww"]
//! k = [2, 20]
//! seeds = [0, 1, 2, 3, 4]
//! workers = 1                  # sweep cells run in parallel up to this many
//!
//! [gmm]                        # every key optional; defaults in the README
//! iterations = 50000
//!
//! [pcfg]
//! iterations = 4000
//! ```

use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use rws_core::gmm::{ControlVariateKind, GmmConfig, GmmMethod, GmmTrainer, InitMode};
use rws_core::optim::AdamConfig;
use rws_core::pcfg::{Grammar, PcfgConfig, PcfgMethod, DEFAULT_MAX_EXPANSIONS};

use crate::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Benchmark {
    Gmm,
    Pcfg,
}

impl Benchmark {
    pub fn name(self) -> &'static str {
        match self {
            Benchmark::Gmm => "gmm",
            Benchmark::Pcfg => "pcfg",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub benchmark: Benchmark,
    pub methods: Vec<String>,
    #[serde(rename = "k")]
    pub ks: Vec<usize>,
    pub seeds: Vec<u64>,
    #[serde(default = "one")]
    pub workers: usize,
    #[serde(default)]
    pub gmm: GmmSection,
    #[serde(default)]
    pub pcfg: PcfgSection,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GmmSection {
    pub components: usize,
    pub batch_size: usize,
    pub iterations: usize,
    pub cadence: usize,
    pub init: String,
    pub delta: f64,
    pub temperature_start: f64,
    pub temperature_end: f64,
    pub test_set_size: usize,
    pub grad_std_repeats: usize,
    pub support_threshold: f64,
    pub control_variate: String,
    pub learning_rate: f64,
}

impl Default for GmmSection {
    fn default() -> Self {
        let d = GmmConfig::default();
        GmmSection {
            components: d.components,
            batch_size: d.batch_size,
            iterations: d.iterations,
            cadence: d.cadence,
            init: d.init.name().into(),
            delta: d.delta,
            temperature_start: d.temperature_start,
            temperature_end: d.temperature_end,
            test_set_size: d.test_set_size,
            grad_std_repeats: d.grad_std_repeats,
            support_threshold: d.support_threshold,
            control_variate: d.control_variate.name().into(),
            learning_rate: d.adam.lr,
        }
    }
}

impl GmmSection {
    pub fn to_core(&self) -> Result<GmmConfig, HarnessError> {
        let config = GmmConfig {
            components: self.components,
            batch_size: self.batch_size,
            iterations: self.iterations,
            cadence: self.cadence,
            init: InitMode::from_str(&self.init)?,
            delta: self.delta,
            temperature_start: self.temperature_start,
            temperature_end: self.temperature_end,
            test_set_size: self.test_set_size,
            grad_std_repeats: self.grad_std_repeats,
            support_threshold: self.support_threshold,
            control_variate: ControlVariateKind::from_str(&self.control_variate)?,
            adam: adam(self.learning_rate)?,
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PcfgSection {
    /// Grammar file; the bundled astronomers grammar when absent.
    pub grammar: Option<PathBuf>,
    pub batch_size: usize,
    pub iterations: usize,
    pub cadence: usize,
    pub max_expansions: usize,
    pub wallclock_cap_s: f64,
    pub proxy_samples: usize,
    pub corpus_size: Option<usize>,
    pub learning_rate: f64,
    /// Sentences whose proposal samples are dumped after training.
    pub posterior_sentences: Vec<String>,
    pub posterior_samples: usize,
}

impl Default for PcfgSection {
    fn default() -> Self {
        let d = PcfgConfig::default();
        PcfgSection {
            grammar: None,
            batch_size: d.batch_size,
            iterations: d.iterations,
            cadence: d.cadence,
            max_expansions: DEFAULT_MAX_EXPANSIONS,
            wallclock_cap_s: d.wallclock_cap_s,
            proxy_samples: d.proxy_samples,
            corpus_size: d.corpus_size,
            learning_rate: d.adam.lr,
            posterior_sentences: vec!["astronomers saw stars with ears".into()],
            posterior_samples: 100,
        }
    }
}

impl PcfgSection {
    pub fn to_core(&self) -> Result<PcfgConfig, HarnessError> {
        let config = PcfgConfig {
            batch_size: self.batch_size,
            iterations: self.iterations,
            cadence: self.cadence,
            max_expansions: self.max_expansions,
            wallclock_cap_s: self.wallclock_cap_s,
            proxy_samples: self.proxy_samples,
            corpus_size: self.corpus_size,
            adam: adam(self.learning_rate)?,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn load_grammar(&self) -> Result<Grammar, HarnessError> {
        match &self.grammar {
            None => Ok(Grammar::astronomers()),
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io { path: path.clone(), source })?;
                Ok(Grammar::parse(&text)?)
            }
        }
    }
}

fn adam(lr: f64) -> Result<AdamConfig, HarnessError> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(HarnessError::Config(format!("learning rate must be positive, got {lr}")));
    }
    Ok(AdamConfig { lr, ..AdamConfig::default() })
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> Result<String, HarnessError> {
        toml::to_string(self).map_err(|e| HarnessError::Config(e.to_string()))
    }

    /// Checks every field and builds every cell's trainer inputs, so a bad
    /// combination fails before any run starts.
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.methods.is_empty() || self.ks.is_empty() || self.seeds.is_empty() {
            return Err(HarnessError::Config("methods, k and seeds must all be non-empty".into()));
        }
        if self.workers == 0 {
            return Err(HarnessError::Config("workers must be at least 1".into()));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return Err(HarnessError::Config("seeds must be distinct".into()));
        }
        if self.ks.contains(&0) {
            return Err(HarnessError::Config("K must be at least 1".into()));
        }
        match self.benchmark {
            Benchmark::Gmm => {
                let config = self.gmm.to_core()?;
                for m in &self.methods {
                    let method = GmmMethod::from_str(m)?;
                    for &k in &self.ks {
                        GmmTrainer::new(GmmConfig { test_set_size: 1, ..config.clone() }, method, k, 0)?;
                    }
                }
            }
            Benchmark::Pcfg => {
                self.pcfg.to_core()?;
                let grammar = self.pcfg.load_grammar()?;
                for m in &self.methods {
                    let method = PcfgMethod::from_str(m)?;
                    if method == PcfgMethod::Vimco && self.ks.contains(&1) {
                        return Err(HarnessError::Config("vimco needs K >= 2".into()));
                    }
                }
                for s in &self.pcfg.posterior_sentences {
                    grammar.encode_sentence(&s.split_whitespace().collect::<Vec<_>>())?;
                }
            }
        }
        Ok(())
    }
}
