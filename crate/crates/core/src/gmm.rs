//! Gaussian mixture benchmark.
//!
//! `z ~ Cat(softmax(θ))`, `x | z ~ N(10 z, 25)`. Only the mixture logits are
//! learned; the inference network maps a scalar `x` to `C` logits through a
//! `1-16-C` tanh MLP.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};

use crate::diff::{Tape, Var};
use crate::dist::{concrete_log_density, concrete_sample, gumbel_pack_with_noise, normal_log_density, sample_index, GumbelNoise};
use crate::estimators::{
    defensive_log_probs, grad_std_metric, iwae_elbo, reinforce_surrogate, relax_rho_gradient, relax_surrogate,
    sleep_phi_loss, vimco_surrogate, wake_phi_loss_with_score, wake_theta_surrogate, ControlVariateNet,
    GradientEstimate, ParticleSet, SoftRelaxation,
};
use crate::math;
use crate::nn::{Mlp, ParamGroup};
use crate::optim::{AdamConfig, AdamState};
use crate::rng::{stream, StreamRng};
use crate::{Error, Result, Tensor};

pub const COMPONENT_SPACING: f64 = 10.0;
pub const COMPONENT_VARIANCE: f64 = 25.0;

pub fn component_means(components: usize) -> Vec<f64> {
    (0..components).map(|c| COMPONENT_SPACING * c as f64).collect()
}

fn log_normal(x: f64, mean: f64) -> f64 {
    let d = x - mean;
    -0.5 * d * d / COMPONENT_VARIANCE - 0.5 * (math::LN_2PI + math::ln(COMPONENT_VARIANCE))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    /// `θ_c = -c`: exponentially decreasing mixture weights.
    Adverse,
    /// `θ_c = 0`.
    Uniform,
}

impl InitMode {
    pub fn name(self) -> &'static str {
        match self {
            InitMode::Adverse => "adverse",
            InitMode::Uniform => "uniform",
        }
    }
}

impl FromStr for InitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adverse" => Ok(InitMode::Adverse),
            "uniform" => Ok(InitMode::Uniform),
            other => Err(Error::InvalidArgument(alloc::format!("unknown init mode `{other}`"))),
        }
    }
}

pub fn init_theta(mode: InitMode, components: usize) -> Vec<f64> {
    match mode {
        InitMode::Adverse => (0..components).map(|c| -(c as f64)).collect(),
        InitMode::Uniform => vec![0.0; components],
    }
}

/// Logits of the data-generating prior, proportional to `c + 5`.
pub fn true_theta(components: usize) -> Vec<f64> {
    (0..components).map(|c| math::ln(c as f64 + 5.0)).collect()
}

/// Mixture with learnable logits and fixed means and variances.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    theta: Vec<f64>,
}

impl GmmModel {
    pub fn new(theta: Vec<f64>) -> Result<Self> {
        if theta.len() < 2 {
            return Err(Error::invalid("a mixture needs at least two components"));
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite { op: "gmm_model" });
        }
        Ok(GmmModel { theta })
    }

    pub fn true_model(components: usize) -> Result<Self> {
        GmmModel::new(true_theta(components))
    }

    pub fn components(&self) -> usize {
        self.theta.len()
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn prior(&self) -> Vec<f64> {
        math::softmax(&self.theta)
    }

    pub fn log_likelihood(&self, x: f64, z: usize) -> f64 {
        log_normal(x, COMPONENT_SPACING * z as f64)
    }

    pub fn exact_posterior(&self, x: f64) -> Vec<f64> {
        let log_prior = math::log_softmax(&self.theta);
        let joint: Vec<f64> = log_prior
            .iter()
            .enumerate()
            .map(|(z, lp)| lp + self.log_likelihood(x, z))
            .collect();
        math::softmax(&joint)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, f64) {
        self.sample_pairs(1, rng)[0]
    }

    /// `n` ancestral draws `(z, x)`.
    pub fn sample_pairs<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<(usize, f64)> {
        let prior = self.prior();
        let sd = math::sqrt(COMPONENT_VARIANCE);
        (0..n)
            .map(|_| {
                let z = sample_index(&prior, rng);
                let e: f64 = StandardNormal.sample(rng);
                (z, COMPONENT_SPACING * z as f64 + sd * e)
            })
            .collect()
    }

    pub fn sample_batch<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Vec<f64> {
        self.sample_pairs(batch, rng).into_iter().map(|(_, x)| x).collect()
    }
}

/// `‖softmax(θ) - prior of reference‖₂`.
pub fn l2_prior(theta: &[f64], reference: &GmmModel) -> f64 {
    math::l2_distance(&math::softmax(theta), &reference.prior())
}

/// Mean over the test set of `‖q(·|x) - p_ref(·|x)‖₂`.
pub fn l2_posterior(net: &GmmInferenceNet, reference: &GmmModel, test_set: &[f64]) -> Result<f64> {
    if test_set.is_empty() {
        return Err(Error::invalid("empty test set"));
    }
    let q = net.posteriors(test_set)?;
    let c = net.components();
    let total: f64 = test_set
        .iter()
        .enumerate()
        .map(|(i, &x)| math::l2_distance(&q[i * c..(i + 1) * c], &reference.exact_posterior(x)))
        .sum();
    Ok(total / test_set.len() as f64)
}

/// Indices whose mass exceeds `threshold`.
pub fn branch_support(pmf: &[f64], threshold: f64) -> Vec<usize> {
    pmf.iter()
        .enumerate()
        .filter(|&(_, &p)| p > threshold)
        .map(|(i, _)| i)
        .collect()
}

/// `1-16-C` tanh network producing proposal logits from a scalar observation.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmInferenceNet {
    mlp: Mlp,
    components: usize,
}

impl GmmInferenceNet {
    pub fn new<R: Rng + ?Sized>(components: usize, rng: &mut R) -> Self {
        GmmInferenceNet {
            mlp: Mlp::new(&[1, 16, components], rng),
            components,
        }
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn params(&self) -> &ParamGroup {
        self.mlp.params()
    }

    pub fn params_mut(&mut self) -> &mut ParamGroup {
        self.mlp.params_mut()
    }

    /// Logits `[B, C]` for observations `x` of shape `[B, 1]`.
    pub fn forward<'t>(&self, vars: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>> {
        self.mlp.forward(vars, x)
    }

    /// Row-major `[B, C]` proposal PMFs.
    pub fn posteriors(&self, xs: &[f64]) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let vars = self.params().bind_constant(&tape)?;
        let x = tape.constant_from(vec![xs.len(), 1], xs.to_vec())?;
        Ok(self.forward(&vars, x)?.softmax()?.value().as_ref().clone())
    }
}

/// Monte Carlo mean of the SNIS posterior estimate built from `k` draws of
/// `q` at observation `x`. Only the particle counts `n` matter:
/// `p̂_c ∝ n_c p(c, x) / q(c)`.
pub fn snis_posterior_mean<R: Rng + ?Sized>(
    model: &GmmModel,
    q: &[f64],
    x: f64,
    k: usize,
    reps: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let c = q.len();
    if c != model.components() || k == 0 || reps == 0 {
        return Err(Error::invalid("snis mean needs matching components, K and repetitions"));
    }
    let log_prior = math::log_softmax(model.theta());
    let log_ratio: Vec<f64> = (0..c)
        .map(|z| log_prior[z] + model.log_likelihood(x, z) - math::ln(q[z]))
        .collect();
    let mut mean = vec![0.0; c];
    let mut counts = vec![0u64; c];
    let mut weights = vec![0.0; c];
    for _ in 0..reps {
        multinomial_counts(q, k as u64, &mut counts, rng)?;
        // Normalize against the largest drawn ratio so the weights cannot all underflow.
        let shift = (0..c)
            .filter(|&z| counts[z] > 0)
            .map(|z| log_ratio[z])
            .fold(f64::NEG_INFINITY, f64::max);
        for z in 0..c {
            weights[z] = if counts[z] > 0 { counts[z] as f64 * math::exp(log_ratio[z] - shift) } else { 0.0 };
        }
        let total: f64 = weights.iter().sum();
        for z in 0..c {
            mean[z] += weights[z] / total;
        }
    }
    for m in &mut mean {
        *m /= reps as f64;
    }
    Ok(mean)
}

/// Multinomial draw by sequential conditional binomials.
fn multinomial_counts<R: Rng + ?Sized>(probs: &[f64], n: u64, out: &mut [u64], rng: &mut R) -> Result<()> {
    let mut remaining = n;
    let mut mass = 1.0;
    for (i, &p) in probs.iter().enumerate() {
        if i + 1 == probs.len() {
            out[i] = remaining;
            break;
        }
        let frac = if mass > 0.0 { (p / mass).clamp(0.0, 1.0) } else { 0.0 };
        let draw = Binomial::new(remaining, frac).map_err(|_| Error::invalid("binomial parameters"))?;
        out[i] = draw.sample(rng);
        remaining -= out[i];
        mass -= p;
    }
    Ok(())
}

/// Mixture log-joint at relaxed one-hot rows `s` `[N, C]`:
/// `log(sᵀπ) + log N(x | sᵀμ, sᵀσ²)`. `prior_probs` is `[C, 1]` and
/// `x_rows` is `[N, 1]`. Vertices of the simplex give the discrete log-joint.
pub fn relaxed_log_joint<'t>(s: Var<'t>, prior_probs: Var<'t>, x_rows: Var<'t>) -> Result<Var<'t>> {
    let shape = s.shape();
    if shape.len() != 2 || prior_probs.shape() != [shape[1], 1] || x_rows.shape() != [shape[0], 1] {
        return Err(Error::ShapeMismatch { op: "relaxed_log_joint", lhs: shape, rhs: prior_probs.shape() });
    }
    let (n, c) = (shape[0], shape[1]);
    let tape = s.tape();
    let means = tape.constant_from(vec![c, 1], component_means(c))?;
    let variances = tape.constant_from(vec![c, 1], vec![COMPONENT_VARIANCE; c])?;
    let prior = s.matmul(prior_probs)?.log()?;
    let lik = normal_log_density(x_rows, s.matmul(means)?, s.matmul(variances)?)?;
    prior.add(lik)?.reshape(vec![n])
}

/// Soft evaluation of the mixture used by the RELAX control variates.
pub struct GmmRelaxation<'t> {
    prior_probs: Var<'t>,
    x_rows: Var<'t>,
    x_batch: Var<'t>,
    q_probs_rows: Var<'t>,
    components: usize,
}

impl<'t> GmmRelaxation<'t> {
    /// `q_logits` is `[B, C]`; each row is repeated for `k` particles.
    pub fn new(tape: &'t Tape, theta: &[f64], xs: &[f64], q_logits: Var<'t>, k: usize) -> Result<Self> {
        let c = theta.len();
        let b = xs.len();
        let rows: Vec<usize> = (0..b * k).map(|r| r / k).collect();
        let x_rows: Vec<f64> = rows.iter().map(|&r| xs[r]).collect();
        Ok(GmmRelaxation {
            prior_probs: tape.constant_from(vec![c, 1], math::softmax(theta))?,
            x_rows: tape.constant_from(vec![b * k, 1], x_rows)?,
            x_batch: tape.constant_from(vec![b, 1], xs.to_vec())?,
            q_probs_rows: q_logits.softmax()?.select_rows(&rows)?,
            components: c,
        })
    }
}

impl<'t> SoftRelaxation<'t> for GmmRelaxation<'t> {
    fn soft_log_joint(&self, s: Var<'t>) -> Result<Var<'t>> {
        relaxed_log_joint(s, self.prior_probs, self.x_rows)
    }

    fn soft_log_q(&self, s: Var<'t>) -> Result<Var<'t>> {
        s.mul(self.q_probs_rows)?.sum_last()?.log()
    }

    fn features(&self) -> Result<Var<'t>> {
        Ok(self.x_batch)
    }

    fn num_categories(&self) -> usize {
        self.components
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GmmMethod {
    Ws,
    Ww,
    DeltaWw,
    Reinforce,
    Vimco,
    Relax,
    Concrete,
}

impl GmmMethod {
    pub const ALL: [GmmMethod; 7] = [
        GmmMethod::Ws,
        GmmMethod::Ww,
        GmmMethod::DeltaWw,
        GmmMethod::Reinforce,
        GmmMethod::Vimco,
        GmmMethod::Relax,
        GmmMethod::Concrete,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GmmMethod::Ws => "ws",
            GmmMethod::Ww => "ww",
            GmmMethod::DeltaWw => "delta-ww",
            GmmMethod::Reinforce => "reinforce",
            GmmMethod::Vimco => "vimco",
            GmmMethod::Relax => "relax",
            GmmMethod::Concrete => "concrete",
        }
    }
}

impl fmt::Display for GmmMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GmmMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GmmMethod::ALL
            .iter()
            .copied()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(alloc::format!("unknown gmm method `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControlVariateKind {
    Rebar,
    RelaxMlp,
}

impl FromStr for ControlVariateKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rebar" => Ok(ControlVariateKind::Rebar),
            "relax-mlp" => Ok(ControlVariateKind::RelaxMlp),
            other => Err(Error::InvalidArgument(alloc::format!("unknown control variate `{other}`"))),
        }
    }
}

impl ControlVariateKind {
    pub fn name(self) -> &'static str {
        match self {
            ControlVariateKind::Rebar => "rebar",
            ControlVariateKind::RelaxMlp => "relax-mlp",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmConfig {
    pub components: usize,
    pub batch_size: usize,
    pub iterations: usize,
    pub cadence: usize,
    pub init: InitMode,
    pub delta: f64,
    pub temperature_start: f64,
    pub temperature_end: f64,
    pub test_set_size: usize,
    pub grad_std_repeats: usize,
    pub support_threshold: f64,
    pub control_variate: ControlVariateKind,
    pub adam: AdamConfig,
}

impl Default for GmmConfig {
    fn default() -> Self {
        GmmConfig {
            components: 20,
            batch_size: 100,
            iterations: 50_000,
            cadence: 100,
            init: InitMode::Adverse,
            delta: 0.2,
            temperature_start: 3.0,
            temperature_end: 0.5,
            test_set_size: 100,
            grad_std_repeats: 10,
            support_threshold: 1e-3,
            control_variate: ControlVariateKind::RelaxMlp,
            adam: AdamConfig::default(),
        }
    }
}

impl GmmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(String::from(m)));
        if self.components < 2 {
            return bad("components must be at least 2");
        }
        if self.batch_size == 0 || self.test_set_size == 0 {
            return bad("batch and test set sizes must be positive");
        }
        if self.cadence == 0 {
            return bad("cadence must be positive");
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return bad("delta must lie in [0, 1]");
        }
        if !(self.temperature_start > 0.0 && self.temperature_end > 0.0) {
            return bad("temperatures must be positive");
        }
        if self.grad_std_repeats < 2 {
            return bad("grad_std_repeats must be at least 2");
        }
        if !(self.support_threshold >= 0.0 && self.support_threshold < 1.0) {
            return bad("support threshold must lie in [0, 1)");
        }
        Ok(())
    }
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmMetrics {
    pub iteration: usize,
    pub l2_prior: f64,
    pub l2_posterior: f64,
    pub grad_std: f64,
    pub support_size: usize,
}

/// Training state for one `(method, K, seed)` run.
pub struct GmmTrainer {
    config: GmmConfig,
    method: GmmMethod,
    k: usize,
    seed: u64,
    theta: ParamGroup,
    net: GmmInferenceNet,
    cv: Option<ControlVariateNet>,
    adam_theta: AdamState,
    adam_phi: AdamState,
    adam_rho: Option<AdamState>,
    data_rng: StreamRng,
    particle_rng: StreamRng,
    metric_rng: StreamRng,
    truth: GmmModel,
    test_set: Vec<f64>,
    iteration: usize,
}

fn check_method_k(method: GmmMethod, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidArgument(String::from("K must be at least 1")));
    }
    if method == GmmMethod::Vimco && k < 2 {
        return Err(Error::InvalidArgument(String::from("vimco needs K >= 2")));
    }
    Ok(())
}

impl GmmTrainer {
    /// Network initialization and the test set depend on the seed only, so
    /// runs with different methods or `K` start from the same point.
    pub fn new(config: GmmConfig, method: GmmMethod, k: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        check_method_k(method, k)?;
        let c = config.components;
        let truth = GmmModel::true_model(c)?;
        let net = GmmInferenceNet::new(c, &mut stream(seed, 0, "gmm-init"));
        let test_set = truth.sample_batch(config.test_set_size, &mut stream(seed, 0, "gmm-test"));
        let cv = match method {
            GmmMethod::Relax => Some(match config.control_variate {
                ControlVariateKind::Rebar => ControlVariateNet::rebar(1.0, 0.0),
                ControlVariateKind::RelaxMlp => {
                    ControlVariateNet::relax_mlp(1, c, &mut stream(seed, 0, "gmm-cv-init"))
                }
            }),
            _ => None,
        };
        let theta = ParamGroup::new(vec![Tensor::vector(init_theta(config.init, c))]);
        let adam_theta = AdamState::new(&theta, config.adam);
        let adam_phi = AdamState::new(net.params(), config.adam);
        let adam_rho = cv.as_ref().map(|cv| AdamState::new(cv.params(), config.adam));
        Ok(GmmTrainer {
            method,
            k,
            seed,
            theta,
            net,
            cv,
            adam_theta,
            adam_phi,
            adam_rho,
            data_rng: stream(seed, k, "gmm-data"),
            particle_rng: stream(seed, k, "gmm-particles"),
            metric_rng: stream(seed, k, "gmm-metrics"),
            truth,
            test_set,
            iteration: 0,
            config,
        })
    }

    pub fn config(&self) -> &GmmConfig {
        &self.config
    }

    pub fn method(&self) -> GmmMethod {
        self.method
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn model(&self) -> GmmModel {
        GmmModel {
            theta: self.theta.tensors()[0].data().to_vec(),
        }
    }

    pub fn net(&self) -> &GmmInferenceNet {
        &self.net
    }

    pub fn truth(&self) -> &GmmModel {
        &self.truth
    }

    pub fn test_set(&self) -> &[f64] {
        &self.test_set
    }

    /// Concrete temperature at the current iteration, annealed linearly.
    pub fn temperature(&self) -> f64 {
        let span = self.config.iterations.max(1) as f64;
        let frac = (self.iteration as f64 / span).min(1.0);
        self.config.temperature_start + (self.config.temperature_end - self.config.temperature_start) * frac
    }

    /// One optimizer step on a fresh data batch.
    pub fn step(&mut self) -> Result<GradientEstimate> {
        let xs = self.truth.sample_batch(self.config.batch_size, &mut self.data_rng);
        let mut rng = self.particle_rng.clone();
        let est = self.estimate(self.method, self.k, &xs, &mut rng)?;
        self.particle_rng = rng;
        self.adam_theta.step(&mut self.theta, &est.theta)?;
        self.adam_phi.step(self.net.params_mut(), &est.phi)?;
        if let (Some(cv), Some(adam), Some(g)) = (self.cv.as_mut(), self.adam_rho.as_mut(), est.rho.as_ref()) {
            adam.step(cv.params_mut(), g)?;
        }
        self.iteration += 1;
        Ok(est)
    }

    /// Metrics at the current parameters; draws on the metrics stream only.
    pub fn metrics(&mut self) -> Result<GmmMetrics> {
        let theta = self.theta.tensors()[0].data().to_vec();
        let mut rng = self.metric_rng.clone();
        let grad_std = self.grad_std(self.method, self.k, self.config.grad_std_repeats, &mut rng)?;
        self.metric_rng = rng;
        Ok(GmmMetrics {
            iteration: self.iteration,
            l2_prior: l2_prior(&theta, &self.truth),
            l2_posterior: l2_posterior(&self.net, &self.truth, &self.test_set)?,
            grad_std,
            support_size: branch_support(&math::softmax(&theta), self.config.support_threshold).len(),
        })
    }

    /// Gradient-std metric of `method`'s φ-gradient at the current
    /// parameters, over `repeats` draws on one data batch.
    pub fn grad_std<R: Rng + ?Sized>(&self, method: GmmMethod, k: usize, repeats: usize, rng: &mut R) -> Result<f64> {
        let xs = self.truth.sample_batch(self.config.batch_size, rng);
        let mut draws = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let est = self.estimate(method, k, &xs, rng)?;
            draws.push(est.phi.into_iter().flatten().collect::<Vec<f64>>());
        }
        grad_std_metric(&draws)
    }

    /// Runs to `config.iterations`, reporting metrics at iteration 0 and
    /// every `cadence` iterations.
    pub fn run<F: FnMut(&GmmMetrics)>(&mut self, mut on_metrics: F) -> Result<Vec<GmmMetrics>> {
        let mut log = Vec::new();
        loop {
            if self.iteration % self.config.cadence == 0 {
                let m = self.metrics()?;
                on_metrics(&m);
                log.push(m);
            }
            if self.iteration >= self.config.iterations {
                break;
            }
            self.step()?;
        }
        Ok(log)
    }

    /// Gradients of `method` at the current parameters for batch `xs`.
    /// `theta` and `phi` gradients are of quantities to minimize.
    pub fn estimate<R: Rng + ?Sized>(&self, method: GmmMethod, k: usize, xs: &[f64], rng: &mut R) -> Result<GradientEstimate> {
        check_method_k(method, k)?;
        if xs.is_empty() {
            return Err(Error::invalid("empty data batch"));
        }
        match method {
            GmmMethod::Relax => self.relax_estimate(k, xs, rng),
            GmmMethod::Concrete => self.concrete_estimate(k, xs, rng),
            _ => self.discrete_estimate(method, k, xs, rng),
        }
    }

    /// Exact expected wake-φ gradient: SNIS replaced by the exact posterior
    /// of the current model, `-(1/B) Σ_b Σ_c p(c|x_b) ∇ log q(c|x_b)`.
    pub fn exact_wake_phi_gradient(&self, xs: &[f64]) -> Result<Vec<Vec<f64>>> {
        let model = self.model();
        let posterior: Vec<f64> = xs.iter().flat_map(|&x| model.exact_posterior(x)).collect();
        let tape = Tape::new();
        let phi = self.net.params().bind(&tape)?;
        let x = tape.constant_from(vec![xs.len(), 1], xs.to_vec())?;
        let log_q = self.net.forward(&phi, x)?.log_softmax()?;
        let weights = tape.constant_from(vec![xs.len(), self.config.components], posterior)?;
        let loss = weights.mul(log_q)?.sum()?.scale(-1.0 / xs.len() as f64)?;
        Ok(ParamGroup::gradients(&tape.backward(loss)?, &phi))
    }

    /// Bias of the `k`-particle wake-φ gradient on batch `xs`, flattened.
    ///
    /// Per observation the logit-space gradient is `(q - p̂) / B`, where `p̂`
    /// is the SNIS posterior estimate, so the bias is `Jᵀ (p - E[p̂]) / B`
    /// with `J` the Jacobian of the logits in φ. `E[p̂]` is estimated from
    /// `reps` multinomial particle counts, which determine `p̂` exactly.
    pub fn wake_phi_bias<R: Rng + ?Sized>(&self, xs: &[f64], k: usize, reps: usize, rng: &mut R) -> Result<Vec<f64>> {
        if k == 0 || reps == 0 || xs.is_empty() {
            return Err(Error::invalid("bias needs K, repetitions and data"));
        }
        let c = self.config.components;
        let model = self.model();
        let q = self.net.posteriors(xs)?;
        let mut direction = Vec::with_capacity(xs.len() * c);
        for (b, &x) in xs.iter().enumerate() {
            let q_row = &q[b * c..(b + 1) * c];
            let exact = model.exact_posterior(x);
            let mean = snis_posterior_mean(&model, q_row, x, k, reps, rng)?;
            direction.extend(exact.iter().zip(&mean).map(|(p, m)| (p - m) / xs.len() as f64));
        }
        let tape = Tape::new();
        let phi = self.net.params().bind(&tape)?;
        let x = tape.constant_from(vec![xs.len(), 1], xs.to_vec())?;
        let logits = self.net.forward(&phi, x)?;
        let loss = tape.constant_from(vec![xs.len(), c], direction)?.mul(logits)?.sum()?;
        Ok(ParamGroup::gradients(&tape.backward(loss)?, &phi).concat())
    }

    fn theta_values(&self) -> &[f64] {
        self.theta.tensors()[0].data()
    }

    fn log_likelihoods(&self, xs: &[f64], z: &[usize], k: usize) -> Vec<f64> {
        z.iter()
            .enumerate()
            .map(|(i, &zi)| log_normal(xs[i / k], COMPONENT_SPACING * zi as f64))
            .collect()
    }

    fn discrete_estimate<R: Rng + ?Sized>(&self, method: GmmMethod, k: usize, xs: &[f64], rng: &mut R) -> Result<GradientEstimate> {
        let c = self.config.components;
        let b = xs.len();
        let tape = Tape::new();
        let theta = self.theta.bind(&tape)?;
        let phi = self.net.params().bind(&tape)?;
        let x = tape.constant_from(vec![b, 1], xs.to_vec())?;
        let log_q_table = self.net.forward(&phi, x)?.log_softmax()?;
        let lq_values = log_q_table.value();

        let delta = if method == GmmMethod::DeltaWw { self.config.delta } else { 0.0 };
        let mut z = Vec::with_capacity(b * k);
        let mut proposal_lq = Vec::with_capacity(b * k);
        for row in lq_values.chunks(c) {
            let lp = defensive_log_probs(row, delta);
            let probs: Vec<f64> = lp.iter().map(|&l| math::exp(l)).collect();
            for _ in 0..k {
                let zi = sample_index(&probs, rng);
                z.push(zi);
                proposal_lq.push(lp[zi]);
            }
        }
        let log_q = log_q_table.gather(&z)?;
        let log_prior = theta[0].log_softmax()?.gather(&z)?.reshape(vec![b, k])?;
        let log_joint = log_prior.add(tape.constant_from(vec![b, k], self.log_likelihoods(xs, &z, k))?)?;
        let proposal = if delta > 0.0 {
            tape.constant_from(vec![b, k], proposal_lq)?
        } else {
            log_q
        };
        let ps = ParticleSet::new(log_joint, proposal)?;
        let elbo = iwae_elbo(&ps)?.item();

        let loss = match method {
            GmmMethod::Ws => {
                let sleep = self.sleep_loss(&tape, &phi, b * k, rng)?;
                wake_theta_surrogate(&ps)?.neg()?.add(sleep)?
            }
            GmmMethod::Ww | GmmMethod::DeltaWw => {
                wake_theta_surrogate(&ps)?.neg()?.add(wake_phi_loss_with_score(&ps, log_q)?)?
            }
            GmmMethod::Reinforce => reinforce_surrogate(&ps)?.neg()?,
            GmmMethod::Vimco => vimco_surrogate(&ps)?.neg()?,
            GmmMethod::Relax | GmmMethod::Concrete => unreachable!("handled by dedicated estimators"),
        };
        let grads = tape.backward(loss)?;
        Ok(GradientEstimate {
            theta: ParamGroup::gradients(&grads, &theta),
            phi: ParamGroup::gradients(&grads, &phi),
            rho: None,
            loss: loss.item(),
            elbo,
        })
    }

    /// `-log q_φ(z|x)` averaged over `n` draws from the current model.
    fn sleep_loss<'t, R: Rng + ?Sized>(&self, tape: &'t Tape, phi: &[Var<'t>], n: usize, rng: &mut R) -> Result<Var<'t>> {
        let (zs, xs): (Vec<usize>, Vec<f64>) = self.model().sample_pairs(n, rng).into_iter().unzip();
        let x = tape.constant_from(vec![n, 1], xs)?;
        let log_q = self.net.forward(phi, x)?.log_softmax()?.gather(&zs)?;
        sleep_phi_loss(log_q)
    }

    fn relax_estimate<R: Rng + ?Sized>(&self, k: usize, xs: &[f64], rng: &mut R) -> Result<GradientEstimate> {
        let cv = self.cv.as_ref().ok_or_else(|| Error::invalid("relax needs a control variate"))?;
        let c = self.config.components;
        let b = xs.len();
        let theta = self.theta_values().to_vec();
        let noise = GumbelNoise::sample(b * k * c, rng);

        // Base point: discrete choices, conditional Gumbels and proposal logits.
        let (choices, g_cond_base, logits_base) = {
            let tape = Tape::new();
            let phi = self.net.params().bind_constant(&tape)?;
            let x = tape.constant_from(vec![b, 1], xs.to_vec())?;
            let logits = self.net.forward(&phi, x)?;
            let pack = gumbel_pack_with_noise(logits, k, &noise, None)?;
            (pack.choices, pack.g_cond.value().as_ref().clone(), logits.value().as_ref().clone())
        };
        let log_lik = self.log_likelihoods(xs, &choices, k);
        let log_prior = math::log_softmax(&theta);
        let log_joint: Vec<f64> = choices.iter().zip(&log_lik).map(|(&z, l)| log_prior[z] + l).collect();

        let (rho_grad, phi_grad, value, elbo) = relax_parts(
            &self.net, cv, &theta, xs, k, &noise, &choices, &g_cond_base, &logits_base, &log_joint,
        )?;

        // θ: gradient of the IWAE bound at the hard particles.
        let theta_grad = {
            let tape = Tape::new();
            let th = self.theta.bind(&tape)?;
            let lp = th[0].log_softmax()?.gather(&choices)?.reshape(vec![b, k])?;
            let lj = lp.add(tape.constant_from(vec![b, k], log_lik)?)?;
            let lq = {
                let phi = self.net.params().bind_constant(&tape)?;
                let x = tape.constant_from(vec![b, 1], xs.to_vec())?;
                self.net.forward(&phi, x)?.log_softmax()?.gather(&choices)?
            };
            let s = wake_theta_surrogate(&ParticleSet::new(lj, lq)?)?.neg()?;
            ParamGroup::gradients(&tape.backward(s)?, &th)
        };
        Ok(GradientEstimate {
            theta: theta_grad,
            phi: phi_grad,
            rho: Some(rho_grad),
            loss: value,
            elbo,
        })
    }

    fn concrete_estimate<R: Rng + ?Sized>(&self, k: usize, xs: &[f64], rng: &mut R) -> Result<GradientEstimate> {
        let c = self.config.components;
        let b = xs.len();
        let temperature = self.temperature();
        let tape = Tape::new();
        let theta = self.theta.bind(&tape)?;
        let phi = self.net.params().bind(&tape)?;
        let x = tape.constant_from(vec![b, 1], xs.to_vec())?;
        let rows: Vec<usize> = (0..b * k).map(|r| r / k).collect();
        let logits = self.net.forward(&phi, x)?.select_rows(&rows)?;
        let sample = concrete_sample(logits, temperature, rng)?;
        let s = sample.y;
        let x_rows = tape.constant_from(vec![b * k, 1], rows.iter().map(|&r| xs[r]).collect())?;
        let prior_probs = theta[0].softmax()?.reshape(vec![c, 1])?;
        let log_joint = relaxed_log_joint(s, prior_probs, x_rows)?.reshape(vec![b, k])?;
        let log_q = concrete_log_density(logits, temperature, sample.log_y)?.reshape(vec![b, k])?;
        let ps = ParticleSet::new(log_joint, log_q)?;
        let objective = iwae_elbo(&ps)?;
        let loss = objective.neg()?;
        let grads = tape.backward(loss)?;
        Ok(GradientEstimate {
            theta: ParamGroup::gradients(&grads, &theta),
            phi: ParamGroup::gradients(&grads, &phi),
            rho: None,
            loss: loss.item(),
            elbo: objective.item(),
        })
    }
}

/// RELAX φ- and ρ-gradients with all randomness fixed. Returns
/// `(ρ-gradient, φ-gradient, surrogate loss, IWAE bound)`, gradients of the
/// negated surrogate.
#[allow(clippy::too_many_arguments)]
fn relax_parts(
    net: &GmmInferenceNet,
    cv: &ControlVariateNet,
    theta: &[f64],
    xs: &[f64],
    k: usize,
    noise: &GumbelNoise,
    choices: &[usize],
    g_cond_base: &[f64],
    logits_base: &[f64],
    log_joint: &[f64],
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>, f64, f64)> {
    let mut base = None;
    let (rho_grad, phi_grad) = relax_rho_gradient(net.params(), cv.params(), |tape, phi, rho| {
        let (s, elbo) = relax_negated_surrogate(
            net, cv, theta, xs, k, noise, choices, g_cond_base, logits_base, log_joint, tape, phi, rho,
        )?;
        // The first evaluation is at the unperturbed parameters.
        base.get_or_insert((s.item(), elbo));
        Ok(s)
    })?;
    let (value, elbo) = base.unwrap_or((0.0, 0.0));
    Ok((rho_grad, phi_grad, value, elbo))
}

#[allow(clippy::too_many_arguments)]
fn relax_negated_surrogate<'t>(
    net: &GmmInferenceNet,
    cv: &ControlVariateNet,
    theta: &[f64],
    xs: &[f64],
    k: usize,
    noise: &GumbelNoise,
    choices: &[usize],
    g_cond_base: &[f64],
    logits_base: &[f64],
    log_joint: &[f64],
    tape: &'t Tape,
    phi: &[Var<'t>],
    rho: &[Var<'t>],
) -> Result<(Var<'t>, f64)> {
    let b = xs.len();
    let c = theta.len();
    let x = tape.constant_from(vec![b, 1], xs.to_vec())?;
    let logits = net.forward(phi, x)?;
    let pack = gumbel_pack_with_noise(logits, k, noise, Some(choices))?;
    let log_q = logits.log_softmax()?.gather(choices)?;
    let ps = ParticleSet::new(tape.constant_from(vec![b, k], log_joint.to_vec())?, log_q)?;
    let live = GmmRelaxation::new(tape, theta, xs, logits, k)?;
    let frozen_logits = tape.constant_from(vec![b, c], logits_base.to_vec())?;
    let frozen = GmmRelaxation::new(tape, theta, xs, frozen_logits, k)?;
    let g_cond_base = tape.constant_from(vec![b * k, c], g_cond_base.to_vec())?;
    let cv_g = cv.evaluate(rho, pack.g, k, &live)?;
    let cv_gc = cv.evaluate(rho, pack.g_cond, k, &live)?;
    let cv_frozen = cv.evaluate(rho, g_cond_base, k, &frozen)?;
    let elbo = iwae_elbo(&ps)?.item();
    Ok((relax_surrogate(&ps, cv_g, cv_gc, cv_frozen)?.neg()?, elbo))
}

/// Trains one run and returns its metrics log.
pub fn train_gmm(config: GmmConfig, method: GmmMethod, k: usize, seed: u64) -> Result<Vec<GmmMetrics>> {
    GmmTrainer::new(config, method, k, seed)?.run(|_| {})
}
