//! Oracle suites shared by the `check` command and the acceptance tests.
//!
//! Every suite returns [`Check`] rows: a measured quantity, the bound it is
//! held to, and whether it passed. Suites never panic on a failed check; they
//! only return `Err` when a computation itself fails.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::diff::{finite_difference_check, Tape, Var};
use crate::dist::{categorical_log_prob, concrete_log_density, gumbel_pack, normal_log_density};
use crate::estimators::{
    reinforce_surrogate, snis_weights, vimco_surrogate, wake_theta_surrogate, ControlVariateNet, ParticleSet,
};
use crate::gmm::{l2_prior, relaxed_log_joint, train_gmm, GmmConfig, GmmMethod, GmmModel, GmmTrainer};
use crate::math;
use crate::optim::{AdamConfig, AdamState};
use crate::pcfg::{levenshtein, sample_tree, Grammar, ParseNet, PcfgConfig, PcfgMethod, PcfgTrainer};
use crate::rng::stream;
use crate::stats;
use crate::toy::{default_proposal, proposal_log_prob, tuples, ToyModel, LATENTS, OBSERVATIONS};
use crate::{Result, Tensor};

/// Finite-difference step used by every gradient check.
pub const FD_STEP: f64 = 1e-5;
/// Relative error allowed between tape and finite-difference gradients.
pub const FD_TOLERANCE: f64 = 1e-4;
/// Absolute error allowed between enumerated and exact expectations.
pub const ENUMERATION_TOLERANCE: f64 = 1e-8;
/// Absolute error allowed on SNIS normalization.
pub const SNIS_TOLERANCE: f64 = 1e-12;

/// One verified quantity.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl Check {
    /// Passes when `measured` is finite and at most `tolerance`.
    pub fn at_most(name: impl Into<String>, measured: f64, tolerance: f64) -> Self {
        Check { name: name.into(), measured, tolerance, passed: measured.is_finite() && measured <= tolerance }
    }

    /// A yes/no property; `measured` is 0 on success and 1 on failure.
    pub fn holds(name: impl Into<String>, ok: bool) -> Self {
        Check { name: name.into(), measured: if ok { 0.0 } else { 1.0 }, tolerance: 0.0, passed: ok }
    }
}

pub fn all_passed(checks: &[Check]) -> bool {
    checks.iter().all(|c| c.passed)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn central_difference<F: FnMut(&Tensor) -> Result<f64>>(mut f: F, at: &Tensor) -> Result<Vec<f64>> {
    let mut probe = at.clone();
    let mut out = Vec::with_capacity(at.len());
    for i in 0..at.len() {
        let base = at.data()[i];
        probe.data_mut()[i] = base + FD_STEP;
        let up = f(&probe)?;
        probe.data_mut()[i] = base - FD_STEP;
        let down = f(&probe)?;
        probe.data_mut()[i] = base;
        out.push((up - down) / (2.0 * FD_STEP));
    }
    Ok(out)
}

fn toy_elbo(model: &ToyModel, phi: &Tensor, x: usize, k: usize) -> Result<f64> {
    let tape = Tape::new();
    let theta = tape.constant(&Tensor::vector(model.prior_logits().to_vec()))?;
    Ok(model.exact_elbo(theta, tape.constant(phi)?, x, k)?.item())
}

/// Exact toy gradient of the K-particle bound in the proposal logits.
fn toy_elbo_gradient(model: &ToyModel, phi: &Tensor, x: usize, k: usize) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let theta = tape.constant(&Tensor::vector(model.prior_logits().to_vec()))?;
    let p = tape.leaf(phi)?;
    let e = model.exact_elbo(theta, p, x, k)?;
    Ok(tape.backward(e)?.wrt(p))
}

/// Score-function estimators against the exact bound gradient, and the
/// enumerated sleep gradient against the exact one, on the toy model with
/// K = 2.
pub fn enumeration_checks() -> Result<Vec<Check>> {
    let model = ToyModel::default();
    let phi = default_proposal();
    let k = 2;
    let mut checks = Vec::new();
    for x in 0..OBSERVATIONS {
        let exact = toy_elbo_gradient(&model, &phi, x, k)?;
        let numeric = central_difference(|p| toy_elbo(&model, p, x, k), &phi)?;
        checks.push(Check::at_most(
            format!("exact bound gradient vs finite differences (x={x})"),
            max_abs_diff(&exact, &numeric),
            ENUMERATION_TOLERANCE,
        ));
        let (_, reinforce) = model.expected_gradient(&phi, x, k, reinforce_surrogate)?;
        checks.push(Check::at_most(
            format!("REINFORCE expectation (x={x})"),
            max_abs_diff(&reinforce, &exact),
            ENUMERATION_TOLERANCE,
        ));
        let (_, vimco) = model.expected_gradient(&phi, x, k, vimco_surrogate)?;
        checks.push(Check::at_most(
            format!("VIMCO expectation (x={x})"),
            max_abs_diff(&vimco, &exact),
            ENUMERATION_TOLERANCE,
        ));
    }

    // Σ_{z,x} p(z, x) ∇(-log q(z|x)), one record per pair.
    let mut enumerated = vec![0.0; phi.len()];
    for x in 0..OBSERVATIONS {
        for z in 0..LATENTS {
            let tape = Tape::new();
            let p = tape.leaf(&phi)?;
            let loss = proposal_log_prob(p, &[z], x)?.neg()?.sum()?;
            let weight = math::exp(model.log_joint(z, x));
            for (e, g) in enumerated.iter_mut().zip(tape.backward(loss)?.wrt(p)) {
                *e += weight * g;
            }
        }
    }
    let exact = {
        let tape = Tape::new();
        let p = tape.leaf(&phi)?;
        let loss = model.exact_sleep_loss(p)?;
        tape.backward(loss)?.wrt(p)
    };
    let numeric = central_difference(
        |p| {
            let tape = Tape::new();
            Ok(model.exact_sleep_loss(tape.constant(p)?)?.item())
        },
        &phi,
    )?;
    checks.push(Check::at_most("sleep loss enumerated gradient", max_abs_diff(&enumerated, &exact), ENUMERATION_TOLERANCE));
    checks.push(Check::at_most("sleep loss exact gradient vs finite differences", max_abs_diff(&exact, &numeric), ENUMERATION_TOLERANCE));
    Ok(checks)
}

/// Largest `|mean - exact| / se` over coordinates of `draws`.
fn worst_z_score(draws: &[Vec<f64>], exact: &[f64]) -> f64 {
    let n = draws.len() as f64;
    let mut worst: f64 = 0.0;
    for (d, &target) in exact.iter().enumerate() {
        let col: Vec<f64> = draws.iter().map(|g| g[d]).collect();
        let se = stats::sample_std(&col) / math::sqrt(n);
        let gap = (stats::mean(&col) - target).abs();
        let z = if se > 0.0 { gap / se } else if gap <= 1e-12 { 0.0 } else { f64::INFINITY };
        worst = worst.max(z);
    }
    worst
}

/// Monte Carlo mean of `draws` RELAX gradients per observation against the
/// exact gradient, for a zero control variate and two random ones. Passes
/// when every coordinate is within 4 standard errors.
pub fn relax_checks(draws: usize, seed: u64) -> Result<Vec<Check>> {
    let model = ToyModel::default();
    let phi = default_proposal();
    let k = 2;
    let mut init = stream(seed, k, "relax-cv-init");
    let mut zero = ControlVariateNet::relax_mlp(1, LATENTS, &mut init);
    let size = zero.params().size();
    zero.params_mut().assign_flat(&vec![0.0; size])?;
    let cvs = [
        ("zero", zero),
        ("random mlp", ControlVariateNet::relax_mlp(1, LATENTS, &mut init)),
        ("random rebar", ControlVariateNet::rebar(init.random_range(0.2..1.5), init.random_range(-1.0..1.0))),
    ];
    let mut checks = Vec::new();
    for (label, cv) in &cvs {
        for x in 0..OBSERVATIONS {
            let exact = toy_elbo_gradient(&model, &phi, x, k)?;
            let mut rng = stream(seed, k, &format!("relax-draws-{label}-{x}"));
            let samples = (0..draws)
                .map(|_| model.relax_phi_gradient(&phi, x, k, cv, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            checks.push(Check::at_most(format!("RELAX {label} cv (x={x}) worst z"), worst_z_score(&samples, &exact), 4.0));
        }
    }
    Ok(checks)
}

/// Median over seeds of the wake-φ SNIS bias norm at each `K`.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasCurve {
    pub ks: Vec<usize>,
    pub medians: Vec<f64>,
    /// Bias norms indexed `[k][seed]`.
    pub norms: Vec<Vec<f64>>,
}

impl BiasCurve {
    pub fn strictly_decreasing(&self) -> bool {
        self.medians.windows(2).all(|w| w[1] < w[0])
    }
}

/// Bias of the wake-φ gradient at the initial GMM state (adverse prior,
/// freshly initialized network) for each seed, on a batch of `batch` points
/// drawn from the true model.
pub fn snis_bias_curve(seeds: u64, ks: &[usize], batch: usize, reps: usize) -> Result<BiasCurve> {
    let mut norms = vec![Vec::new(); ks.len()];
    for seed in 0..seeds {
        let trainer = GmmTrainer::new(GmmConfig::default(), GmmMethod::Ww, 1, seed)?;
        let xs = trainer.truth().sample_batch(batch, &mut stream(seed, 0, "bias-data"));
        for (i, &k) in ks.iter().enumerate() {
            let bias = trainer.wake_phi_bias(&xs, k, reps, &mut stream(seed, k, "bias-counts"))?;
            norms[i].push(math::sqrt(bias.iter().map(|b| b * b).sum()));
        }
    }
    let medians = norms.iter().map(|n| stats::median(n).unwrap_or(f64::NAN)).collect();
    Ok(BiasCurve { ks: ks.to_vec(), medians, norms })
}

type OpProbe = for<'t> fn(Var<'t>) -> Result<Var<'t>>;

/// Contracts any output with fixed pseudo-random weights so every output
/// coordinate reaches the loss.
fn contract<'t>(y: Var<'t>) -> Result<Var<'t>> {
    let n = y.numel();
    let w: Vec<f64> = (0..n).map(|i| 0.3 + 0.7 * math::tanh(1.0 + i as f64 * 0.37)).map(|v| if n > 1 { v } else { 1.0 }).collect();
    y.tape().constant_from(y.shape(), w)?.mul(y)?.sum()
}

fn op_probes() -> Vec<(&'static str, OpProbe)> {
    vec![
        ("add", |p| p.add(p.square()?)),
        ("sub", |p| p.sub(p.tanh()?)),
        ("mul", |p| p.mul(p.exp()?)),
        ("div", |p| p.div(p.square()?.shift(1.0)?)),
        ("scale", |p| p.scale(-1.7)?.tanh()),
        ("neg", |p| p.neg()?.exp()),
        ("shift", |p| p.shift(0.3)?.square()),
        ("square", |p| p.square()),
        ("tanh", |p| p.tanh()),
        ("exp", |p| p.exp()),
        ("log", |p| p.square()?.shift(0.5)?.log()),
        ("matmul", |p| p.reshape(vec![3, 2])?.matmul(p)),
        ("sum", |p| p.sum()?.square()),
        ("mean", |p| p.mean()?.square()),
        ("sum_last", |p| p.sum_last()?.square()),
        ("mean_last", |p| p.mean_last()?.square()),
        ("softmax", |p| p.softmax()),
        ("log_softmax", |p| p.log_softmax()),
        ("log_sum_exp", |p| p.log_sum_exp()?.square()),
        ("gather", |p| p.gather(&[2, 0, 0, 1])?.square()),
        ("concat", |p| Var::concat(&[p, p.tanh()?])),
        ("concat_rows", |p| Var::concat_rows(&[p, p.exp()?])),
        ("select_rows", |p| p.select_rows(&[1, 1, 0])?.square()),
        ("segment_sum", |p| p.reshape(vec![6])?.segment_sum(&[0, 2, 1, 0, 2, 2], 3)?.square()),
        ("reshape", |p| p.reshape(vec![3, 2])?.log_softmax()),
        ("expand_rows", |p| p.select_rows(&[0])?.expand_rows(3)?.tanh()),
    ]
}

/// Tape gradients of every op against central differences at a random point.
pub fn operator_checks<R: Rng + ?Sized>(rng: &mut R) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    for (name, probe) in op_probes() {
        let point = Tensor::new(vec![2, 3], (0..6).map(|_| rng.random_range(-1.5..1.5)).collect())?;
        let err = finite_difference_check(|_, p| contract(probe(p)?), &point, FD_STEP)?;
        checks.push(Check::at_most(format!("op {name} finite differences"), err, FD_TOLERANCE));
    }
    Ok(checks)
}

fn tape_checks<R: Rng + ?Sized>(rng: &mut R) -> Result<Vec<Check>> {
    let x: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
    let (a, b) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
    let grad = |ca: f64, cb: f64| -> Result<Vec<f64>> {
        let tape = Tape::new();
        let v = tape.leaf(&Tensor::vector(x.clone()))?;
        let f = v.log_sum_exp()?;
        let g = v.tanh()?.square()?.sum()?;
        let loss = f.scale(ca)?.add(g.scale(cb)?)?;
        Ok(tape.backward(loss)?.wrt(v))
    };
    let combined = grad(a, b)?;
    let (gf, gg) = (grad(1.0, 0.0)?, grad(0.0, 1.0)?);
    let mixed: Vec<f64> = gf.iter().zip(&gg).map(|(f, g)| a * f + b * g).collect();

    let run = || -> Result<Vec<u64>> {
        let tape = Tape::new();
        let v = tape.leaf(&Tensor::new(vec![2, 3], vec![0.1, -0.7, 1.3, 0.4, 0.0, -2.0])?)?;
        let m = tape.constant(&Tensor::new(vec![3, 2], vec![0.5, -1.0, 0.25, 2.0, -0.3, 0.9])?)?;
        let loss = v.matmul(m)?.tanh()?.log_softmax()?.sum()?;
        Ok(tape.backward(loss)?.wrt(v).iter().map(|g| g.to_bits()).collect())
    };
    // Only the live factor of p * detach(p) carries gradient.
    let point = Tensor::vector(x.clone());
    let detached = {
        let tape = Tape::new();
        let v = tape.leaf(&point)?;
        let y = v.mul(v.detach()?)?.sum()?;
        tape.backward(y)?.wrt(v)
    };
    Ok(vec![
        Check::at_most("detach blocks gradient", max_abs_diff(&detached, &x), 0.0),
        Check::at_most("backward is linear", max_abs_diff(&combined, &mixed), 1e-12),
        Check::holds("independent records give bit-identical gradients", run()? == run()?),
    ])
}

fn distribution_checks<R: Rng + ?Sized>(rng: &mut R) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let logits = Tensor::new(vec![2, 4], (0..8).map(|_| rng.random_range(-2.0..2.0)).collect())?;
    let err = finite_difference_check(|_, p| categorical_log_prob(p, &[3, 1])?.sum(), &logits, FD_STEP)?;
    checks.push(Check::at_most("categorical log-prob finite differences", err, FD_TOLERANCE));
    let total = {
        let tape = Tape::new();
        let row = tape.constant(&Tensor::vector(logits.data()[..4].to_vec()))?;
        categorical_log_prob(row, &[0, 1, 2, 3])?.exp()?.sum()?.item()
    };
    checks.push(Check::at_most("categorical pmf sums to one", (total - 1.0).abs(), 1e-10));

    let point = Tensor::vector(vec![0.3, -1.2, 2.0]);
    let err = finite_difference_check(
        |tape, p| {
            let x = tape.constant(&Tensor::vector(vec![1.0, 0.5, -0.4]))?;
            let var = p.square()?.shift(0.5)?;
            normal_log_density(x, p.scale(0.5)?, var)?.sum()
        },
        &point,
        FD_STEP,
    )?;
    checks.push(Check::at_most("normal log-density finite differences", err, FD_TOLERANCE));

    let log_y = Tensor::new(vec![1, 3], math::log_softmax(&[0.2, -0.4, 1.1]))?;
    let err = finite_difference_check(
        |tape, p| concrete_log_density(p, 0.7, tape.constant(&log_y)?)?.sum(),
        &Tensor::new(vec![1, 3], vec![0.5, -0.1, 0.3])?,
        FD_STEP,
    )?;
    checks.push(Check::at_most("concrete log-density finite differences", err, FD_TOLERANCE));

    // Conditional Gumbels keep the argmax; argmax frequencies follow softmax.
    let row = [0.4, -0.3, 1.0];
    let probs = math::softmax(&row);
    let n = 100_000;
    let mut counts = [0.0; 3];
    let mut argmax_kept = true;
    let mut grng = stream(0, 0, "verify-gumbel");
    for _ in 0..n / 100 {
        let tape = Tape::new();
        let l = tape.constant(&Tensor::vector(row.to_vec()))?;
        let (pack, _) = gumbel_pack(l, 100, &mut grng)?;
        let (g, gc) = (pack.g.value(), pack.g_cond.value());
        for (j, &choice) in pack.choices.iter().enumerate() {
            counts[choice] += 1.0;
            argmax_kept &= math::argmax(&g[j * 3..j * 3 + 3]) == choice && math::argmax(&gc[j * 3..j * 3 + 3]) == choice;
        }
    }
    let worst = (0..3)
        .map(|c| {
            let se = math::sqrt(probs[c] * (1.0 - probs[c]) / n as f64);
            (counts[c] / n as f64 - probs[c]).abs() / se
        })
        .fold(0.0, f64::max);
    checks.push(Check::holds("conditional Gumbels preserve the argmax", argmax_kept));
    checks.push(Check::at_most("Gumbel argmax frequencies (standard errors)", worst, 3.0));
    Ok(checks)
}

fn estimator_checks<R: Rng + ?Sized>(rng: &mut R) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let lw: Vec<f64> = (0..6).map(|_| rng.random_range(-5.0..5.0)).collect();
    let shift = rng.random_range(-500.0..500.0);
    let w = snis_weights(&lw)?;
    let shifted: Vec<f64> = lw.iter().map(|v| v + shift).collect();
    checks.push(Check::at_most("SNIS weights sum to one", (w.iter().sum::<f64>() - 1.0).abs(), SNIS_TOLERANCE));
    checks.push(Check::at_most("SNIS weights shift invariant", max_abs_diff(&w, &snis_weights(&shifted)?), SNIS_TOLERANCE));
    checks.push(Check::holds("SNIS weights non-negative", w.iter().all(|&v| v >= 0.0)));

    let model = ToyModel::default();
    let phi = default_proposal();
    let mut ordered = true;
    for x in 0..OBSERVATIONS {
        let evidence = model.log_marginal(x);
        let mut previous = f64::NEG_INFINITY;
        for k in [1, 2, 5] {
            let e = toy_elbo(&model, &phi, x, k)?;
            ordered &= e <= evidence + 1e-12 && e >= previous - 1e-12;
            previous = e;
        }
    }
    checks.push(Check::holds("bound below evidence and non-decreasing in K", ordered));

    let mut worst: f64 = 0.0;
    for t in tuples(LATENTS, 3) {
        let grad = |reinforce: bool| -> Result<Vec<f64>> {
            let tape = Tape::new();
            let theta = tape.leaf(&Tensor::vector(model.prior_logits().to_vec()))?;
            let p = tape.leaf(&phi)?;
            let ps = ParticleSet::new(model.log_joint_var(theta, &t, 1)?, proposal_log_prob(p, &t, 1)?)?;
            let s = if reinforce { reinforce_surrogate(&ps)? } else { wake_theta_surrogate(&ps)? };
            Ok(tape.backward(s)?.wrt(theta))
        };
        worst = worst.max(max_abs_diff(&grad(true)?, &grad(false)?));
    }
    checks.push(Check::at_most("wake-θ and REINFORCE share the θ-gradient", worst, 1e-10));

    let small = GmmConfig { iterations: 20, cadence: 5, batch_size: 20, test_set_size: 10, grad_std_repeats: 3, delta: 0.0, ..GmmConfig::default() };
    let mut a = GmmTrainer::new(small.clone(), GmmMethod::DeltaWw, 4, 9)?;
    let mut b = GmmTrainer::new(small, GmmMethod::Ww, 4, 9)?;
    let same = a.run(|_| {})? == b.run(|_| {})? && a.net() == b.net() && bit_equal(a.model().theta(), b.model().theta());
    checks.push(Check::holds("defensive mixture at zero reproduces WW", same));
    Ok(checks)
}

fn bit_equal(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn gmm_checks<R: Rng + ?Sized>(rng: &mut R) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let mut worst: f64 = 0.0;
    for c in 2..=50 {
        let theta: Vec<f64> = (0..c).map(|_| rng.random_range(-3.0..3.0)).collect();
        let model = GmmModel::new(theta.clone())?;
        let prior = math::softmax(&theta);
        for _ in 0..3 {
            let x = rng.random_range(-20.0..10.0 * c as f64 + 20.0);
            // Densities relative to the nearest mean keep the linear-space sum finite.
            let nearest = libm::round(x / 10.0).clamp(0.0, c as f64 - 1.0) * 10.0;
            let joint: Vec<f64> = (0..c)
                .map(|k| {
                    let d = x - 10.0 * k as f64;
                    let d0 = x - nearest;
                    prior[k] * math::exp(-(d * d - d0 * d0) / 50.0)
                })
                .collect();
            let z: f64 = joint.iter().sum();
            let brute: Vec<f64> = joint.iter().map(|j| j / z).collect();
            worst = worst.max(max_abs_diff(&model.exact_posterior(x), &brute));
        }
    }
    checks.push(Check::at_most("exact posterior vs brute force, 2 <= C <= 50", worst, 1e-12));

    let a: Vec<f64> = (0..6).map(|_| rng.random_range(-4.0..4.0)).collect();
    let b: Vec<f64> = (0..6).map(|_| rng.random_range(-4.0..4.0)).collect();
    let d = l2_prior(&a, &GmmModel::new(b)?);
    let d_self = l2_prior(&a, &GmmModel::new(a.clone())?);
    checks.push(Check::holds("l2 positive for differing PMFs and zero on a match", d > 0.0 && d_self < 1e-15));

    // The relaxed log-joint must depend on every coordinate of the soft
    // selection, so no hard component index is taken.
    let soft = {
        let tape = Tape::new();
        let s = tape.leaf(&Tensor::new(vec![1, 4], vec![0.1, 0.4, 0.3, 0.2])?)?;
        let prior = tape.constant_from(vec![4, 1], math::softmax(&[0.0, 0.5, -0.5, 1.0]))?;
        let x = tape.constant_from(vec![1, 1], vec![17.0])?;
        let y = relaxed_log_joint(s, prior, x)?.sum()?;
        tape.backward(y)?.wrt(s)
    };
    checks.push(Check::holds("relaxed log-joint uses the whole soft selection", soft.iter().all(|g| g.abs() > 1e-9)));

    let small = GmmConfig { iterations: 12, cadence: 4, batch_size: 20, test_set_size: 10, grad_std_repeats: 3, ..GmmConfig::default() };
    let mut reproducible = true;
    for method in [GmmMethod::Ws, GmmMethod::Vimco, GmmMethod::Concrete] {
        reproducible &= train_gmm(small.clone(), method, 3, 4)? == train_gmm(small.clone(), method, 3, 4)?;
    }
    checks.push(Check::holds("GMM metric logs reproducible", reproducible));
    Ok(checks)
}

fn pcfg_checks<R: Rng + ?Sized>(rng: &mut R) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let g = Grammar::astronomers();
    let probs = g.rule_probs();

    let mut flagged = true;
    let mut finite = true;
    let mut trng = stream(3, 0, "verify-forced");
    for _ in 0..2000 {
        let t = sample_tree(&g, &probs, 3, &mut trng);
        finite &= t.log_prob(&g, &probs)?.is_finite();
        if t.is_forced() {
            flagged &= t.expansions().iter().skip(3).all(|e| e.forced);
        }
    }
    checks.push(Check::holds("tree log-probs finite", finite));
    checks.push(Check::holds("forced expansions flagged", flagged));

    let config = PcfgConfig { iterations: 3, cadence: 1, proxy_samples: 4, ..PcfgConfig::default() };
    let mut on_simplex = true;
    for method in PcfgMethod::ALL {
        let mut trainer = PcfgTrainer::new(g.clone(), config.clone(), method, 2, 0)?;
        for _ in 0..3 {
            trainer.step()?;
            on_simplex &= trainer
                .learned_probs()
                .iter()
                .all(|row| (row.iter().sum::<f64>() - 1.0).abs() < 1e-12 && row.iter().all(|&p| p >= 0.0));
        }
    }
    checks.push(Check::holds("rule probabilities stay on the simplex", on_simplex));

    let net = ParseNet::new(&g, 6, &mut stream(0, 0, "verify-net"));
    let sentences: Vec<Vec<usize>> = ["astronomers saw stars with ears", "stars saw telescopes", "ears"]
        .iter()
        .map(|s| g.encode_sentence(&s.split(' ').collect::<Vec<_>>()))
        .collect::<Result<_>>()?;
    let rows: Vec<usize> = (0..30).map(|i| i % 3).collect();
    let tape = Tape::new();
    let vars = net.params().bind_constant(&tape)?;
    let emb = net.encode(&vars, &sentences)?;
    let proposal = net.propose(&g, &vars, emb, &rows, &mut stream(5, 0, "verify-q"))?;
    let sampled = proposal.log_q.value();
    let mut worst: f64 = 0.0;
    for (i, tree) in proposal.trees.iter().enumerate() {
        let tape = Tape::new();
        let vars = net.params().bind_constant(&tape)?;
        let emb = net.encode(&vars, core::slice::from_ref(&sentences[rows[i]]))?;
        let replay = net.score(&g, &vars, emb, &[0], core::slice::from_ref(tree))?.item();
        worst = worst.max((replay - sampled[i]).abs());
    }
    checks.push(Check::at_most("proposal log q replay", worst, 1e-10));

    let mut metric = true;
    for _ in 0..500 {
        let mut word = || -> Vec<u8> { (0..rng.random_range(0..8)).map(|_| rng.random_range(0..4u8)).collect() };
        let (a, b, c) = (word(), word(), word());
        let ab = levenshtein(&a, &b);
        metric &= ab == levenshtein(&b, &a) && levenshtein(&a, &c) <= ab + levenshtein(&b, &c);
    }
    checks.push(Check::holds("Levenshtein symmetric with triangle inequality", metric));

    let expected = g.expected_rule_usage()?;
    let n = 1_000_000;
    let r = g.num_rules();
    let (mut sum, mut sum_sq, mut counts) = (vec![0.0; r], vec![0.0; r], vec![0.0; r]);
    let mut urng = stream(2, 0, "usage");
    for _ in 0..n {
        counts.iter_mut().for_each(|c| *c = 0.0);
        for e in sample_tree(&g, &probs, usize::MAX, &mut urng).expansions() {
            counts[g.rule_id(e.nonterminal, e.rule)] += 1.0;
        }
        for i in 0..r {
            sum[i] += counts[i];
            sum_sq[i] += counts[i] * counts[i];
        }
    }
    let mut worst: f64 = 0.0;
    for (nt, row) in expected.iter().enumerate() {
        for (rule, &target) in row.iter().enumerate() {
            let i = g.rule_id(nt, rule);
            let mean = sum[i] / n as f64;
            let se = math::sqrt((sum_sq[i] / n as f64 - mean * mean) / n as f64);
            let gap = (mean - target).abs();
            worst = worst.max(if se > 0.0 { gap / se } else if gap < 1e-12 { 0.0 } else { f64::INFINITY });
        }
    }
    checks.push(Check::at_most("rule usage at 1e6 trees (standard errors)", worst, 3.0));
    Ok(checks)
}

fn optimizer_checks<R: Rng + ?Sized>(rng: &mut R) -> Result<Vec<Check>> {
    use crate::nn::ParamGroup;
    let init: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
    let grads: Vec<Vec<f64>> = (0..10).map(|_| (0..6).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let run = |steps: usize| -> Result<Vec<f64>> {
        let mut group = ParamGroup::new(vec![Tensor::vector(init.clone())]);
        let mut state = AdamState::new(&group, AdamConfig::default());
        for g in &grads[..steps] {
            state.step(&mut group, core::slice::from_ref(g))?;
        }
        Ok(group.flatten())
    };
    let first = run(1)?;
    let lr = AdamConfig::default().lr;
    let largest = first.iter().zip(&init).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok(vec![
        Check::holds("Adam deterministic", bit_equal(&run(10)?, &run(10)?)),
        Check::at_most("Adam first-step magnitude over learning rate", largest / lr, 1.0 + 1e-9),
    ])
}

fn rng_checks() -> Vec<Check> {
    use rand::RngCore;
    let draw = |seed, k, purpose: &str| {
        let mut r = stream(seed, k, purpose);
        (r.next_u64(), r.next_u64())
    };
    let purposes = ["init", "data", "particles", "test-set", "bias-counts"];
    let mut distinct = true;
    for (i, a) in purposes.iter().enumerate() {
        for b in &purposes[i + 1..] {
            distinct &= draw(1, 5, a) != draw(1, 5, b);
        }
    }
    vec![
        Check::holds("distinct purposes get distinct streams", distinct && draw(1, 5, "init") != draw(1, 6, "init")),
        Check::holds("streams reproducible", draw(3, 2, "data") == draw(3, 2, "data")),
    ]
}

/// Every invariant suite: tape ops, distributions, estimators, the GMM and
/// PCFG benchmarks, the optimizer and the RNG.
pub fn property_checks(seed: u64) -> Result<Vec<Check>> {
    let mut rng = stream(seed, 0, "verify-properties");
    let mut checks = operator_checks(&mut rng)?;
    checks.extend(tape_checks(&mut rng)?);
    checks.extend(distribution_checks(&mut rng)?);
    checks.extend(estimator_checks(&mut rng)?);
    checks.extend(gmm_checks(&mut rng)?);
    checks.extend(pcfg_checks(&mut rng)?);
    checks.extend(optimizer_checks(&mut rng)?);
    checks.extend(rng_checks());
    Ok(checks)
}
