use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use rws_cli::config::{Benchmark, ExperimentConfig, GmmSection, PcfgSection};
use rws_cli::io::{csv_bytes, write_atomic};
use rws_cli::runner::{run_experiment, CellOutcome, CellStatus};
use rws_cli::summary::{summarize, SUMMARY_FILE};
use rws_core::verify::{self, Check};

#[derive(Parser)]
#[command(name = "rws", version, about = "Wake-sleep and score-function estimator benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one Gaussian-mixture run and write its metrics CSV.
    Gmm(GmmArgs),
    /// Train one PCFG run and write its metrics CSV and posterior dump.
    Pcfg(PcfgArgs),
    /// Run the exact-oracle verification suites and print a pass/fail table.
    Check(CheckArgs),
    /// Run every (method, K, seed) cell of a config and summarize terminal metrics.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    method: String,
    #[arg(long = "k", short = 'k')]
    k: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
    /// Base settings; the `[gmm]` or `[pcfg]` section is used and flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    cadence: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
}

#[derive(Args)]
struct GmmArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    components: Option<usize>,
    /// `adverse` or `uniform`.
    #[arg(long)]
    init: Option<String>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    temperature_start: Option<f64>,
    #[arg(long)]
    temperature_end: Option<f64>,
    /// `relax-mlp` or `rebar`.
    #[arg(long)]
    control_variate: Option<String>,
    #[arg(long)]
    test_set_size: Option<usize>,
    #[arg(long)]
    grad_std_repeats: Option<usize>,
    #[arg(long)]
    support_threshold: Option<f64>,
}

#[derive(Args)]
struct PcfgArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Grammar file; defaults to the bundled astronomers grammar.
    #[arg(long)]
    grammar: Option<PathBuf>,
    #[arg(long)]
    max_expansions: Option<usize>,
    /// Wall-clock cap per run, in seconds.
    #[arg(long)]
    wallclock_cap: Option<f64>,
    #[arg(long)]
    proxy_samples: Option<usize>,
    #[arg(long)]
    corpus_size: Option<usize>,
    #[arg(long)]
    posterior_samples: Option<usize>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Suite {
    All,
    Enumeration,
    Relax,
    Snis,
    Properties,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long, value_enum, default_value_t = Suite::All)]
    suite: Suite,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// RELAX gradient draws per observation and control variate.
    #[arg(long, default_value_t = 200_000)]
    relax_draws: usize,
    /// Seeds for the SNIS bias curve.
    #[arg(long, default_value_t = 10)]
    snis_seeds: u64,
    /// Multinomial repetitions per data point for the SNIS bias.
    #[arg(long, default_value_t = 20_000)]
    snis_reps: usize,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Overrides `workers` from the config.
    #[arg(long)]
    workers: Option<usize>,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Gmm(args) => {
            let base = load_base(args.run.config.as_deref())?;
            let mut gmm = base.map(|c| c.gmm).unwrap_or_default();
            apply_gmm(&mut gmm, &args);
            let config = single(Benchmark::Gmm, &args.run, gmm, PcfgSection::default());
            execute(&config, &args.run.out_dir, false)
        }
        Command::Pcfg(args) => {
            let base = load_base(args.run.config.as_deref())?;
            let mut pcfg = base.map(|c| c.pcfg).unwrap_or_default();
            apply_pcfg(&mut pcfg, &args);
            let config = single(Benchmark::Pcfg, &args.run, GmmSection::default(), pcfg);
            execute(&config, &args.run.out_dir, false)
        }
        Command::Sweep(args) => {
            let mut config = load_base(Some(&args.config))?.expect("path given");
            if let Some(w) = args.workers {
                config.workers = w;
            }
            execute(&config, &args.out_dir, true)
        }
        Command::Check(args) => check(&args),
    }
}

fn load_base(path: Option<&Path>) -> Result<Option<ExperimentConfig>> {
    let Some(path) = path else { return Ok(None) };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Some(ExperimentConfig::from_toml(&text).with_context(|| format!("parsing {}", path.display()))?))
}

fn single(benchmark: Benchmark, run: &RunArgs, gmm: GmmSection, pcfg: PcfgSection) -> ExperimentConfig {
    ExperimentConfig { benchmark, methods: vec![run.method.clone()], ks: vec![run.k], seeds: vec![run.seed], workers: 1, gmm, pcfg }
}

fn apply_gmm(s: &mut GmmSection, a: &GmmArgs) {
    let r = &a.run;
    set(&mut s.iterations, r.iterations);
    set(&mut s.cadence, r.cadence);
    set(&mut s.batch_size, r.batch_size);
    set(&mut s.learning_rate, r.learning_rate);
    set(&mut s.components, a.components);
    set(&mut s.init, a.init.clone());
    set(&mut s.delta, a.delta);
    set(&mut s.temperature_start, a.temperature_start);
    set(&mut s.temperature_end, a.temperature_end);
    set(&mut s.control_variate, a.control_variate.clone());
    set(&mut s.test_set_size, a.test_set_size);
    set(&mut s.grad_std_repeats, a.grad_std_repeats);
    set(&mut s.support_threshold, a.support_threshold);
}

fn apply_pcfg(s: &mut PcfgSection, a: &PcfgArgs) {
    let r = &a.run;
    set(&mut s.iterations, r.iterations);
    set(&mut s.cadence, r.cadence);
    set(&mut s.batch_size, r.batch_size);
    set(&mut s.learning_rate, r.learning_rate);
    if a.grammar.is_some() {
        s.grammar = a.grammar.clone();
    }
    set(&mut s.max_expansions, a.max_expansions);
    set(&mut s.wallclock_cap_s, a.wallclock_cap);
    set(&mut s.proxy_samples, a.proxy_samples);
    if a.corpus_size.is_some() {
        s.corpus_size = a.corpus_size;
    }
    set(&mut s.posterior_samples, a.posterior_samples);
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn execute(config: &ExperimentConfig, out_dir: &Path, with_summary: bool) -> Result<bool> {
    let outcomes = run_experiment(config, out_dir)?;
    for o in &outcomes {
        report_cell(o);
    }
    if with_summary {
        let rows = summarize(config.benchmark, &config.methods, &config.ks, &outcomes);
        let path = out_dir.join(SUMMARY_FILE);
        write_atomic(&path, &csv_bytes(&rows)?)?;
        println!("summary: {}", path.display());
    }
    Ok(outcomes.iter().all(|o| o.status != CellStatus::Failed))
}

fn report_cell(o: &CellOutcome) {
    let c = &o.cell;
    match &o.error {
        Some(e) => eprintln!("{} K={} seed={}: failed: {e}", c.method, c.k, c.seed),
        None => {
            let metrics: Vec<String> = o.terminal.iter().map(|(n, v)| format!("{n}={v:.6}")).collect();
            let capped = if o.status == CellStatus::Capped { " (capped)" } else { "" };
            println!("{} K={} seed={}{capped}: {} -> {}", c.method, c.k, c.seed, metrics.join(" "), o.metrics_file);
        }
    }
}

fn check(args: &CheckArgs) -> Result<bool> {
    let wants = |s: Suite| args.suite == Suite::All || args.suite == s;
    let mut rows: Vec<(&str, Check)> = Vec::new();
    if wants(Suite::Enumeration) {
        rows.extend(verify::enumeration_checks()?.into_iter().map(|c| ("enumeration", c)));
    }
    if wants(Suite::Relax) {
        rows.extend(verify::relax_checks(args.relax_draws, args.seed)?.into_iter().map(|c| ("relax", c)));
    }
    if wants(Suite::Snis) {
        let curve = verify::snis_bias_curve(args.snis_seeds, &[1, 10, 100, 1000], 100, args.snis_reps)?;
        for (k, m) in curve.ks.iter().zip(&curve.medians) {
            println!("snis bias median K={k}: {m:.6e}");
        }
        rows.push(("snis", Check::holds("median bias norm strictly decreasing in K", curve.strictly_decreasing())));
    }
    if wants(Suite::Properties) {
        rows.extend(verify::property_checks(args.seed)?.into_iter().map(|c| ("properties", c)));
    }
    println!("{:<6} {:<12} {:<58} {:>12} {:>10}", "status", "suite", "check", "measured", "bound");
    for (suite, c) in &rows {
        let status = if c.passed { "PASS" } else { "FAIL" };
        println!("{status:<6} {suite:<12} {:<58} {:>12.3e} {:>10.1e}", c.name, c.measured, c.tolerance);
    }
    let failed = rows.iter().filter(|(_, c)| !c.passed).count();
    println!("{} checks, {failed} failed", rows.len());
    Ok(failed == 0)
}
