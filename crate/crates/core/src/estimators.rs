//! Gradient estimators and objectives.
//!
//! Objectives (`iwae_elbo`, the `*_surrogate` functions) are to be maximized;
//! losses (`wake_phi_loss`, `sleep_phi_loss`) are to be minimized. Every
//! function works on a batch of `B` data points with `K` particles each and
//! averages over the batch, so `B = 1` gives the per-datapoint quantity.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::diff::{Tape, Var};
use crate::dist::Categorical;
use crate::math;
use crate::nn::{Mlp, ParamGroup};
use crate::{Error, Result, Tensor};

/// `K` importance samples for each of `B` data points.
///
/// `log_w` is built as `log_joint - log_q`, so the three tensors always agree.
#[derive(Debug, Clone, Copy)]
pub struct ParticleSet<'t> {
    log_joint: Var<'t>,
    log_q: Var<'t>,
    log_w: Var<'t>,
    batch: usize,
    k: usize,
}

impl<'t> ParticleSet<'t> {
    /// Accepts `[K]` (one data point) or `[B, K]` tensors.
    pub fn new(log_joint: Var<'t>, log_q: Var<'t>) -> Result<Self> {
        let shape = log_joint.shape();
        if shape != log_q.shape() {
            return Err(Error::ShapeMismatch {
                op: "particle_set",
                lhs: shape,
                rhs: log_q.shape(),
            });
        }
        let (batch, k) = match shape.as_slice() {
            [k] => (1, *k),
            [b, k] => (*b, *k),
            _ => return Err(Error::invalid("particle tensors must be [K] or [B, K]")),
        };
        if k == 0 || batch == 0 {
            return Err(Error::invalid("particle set is empty"));
        }
        let log_joint = log_joint.reshape(vec![batch, k])?;
        let log_q = log_q.reshape(vec![batch, k])?;
        let log_w = log_joint.sub(log_q)?;
        Ok(ParticleSet { log_joint, log_q, log_w, batch, k })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn log_joint(&self) -> Var<'t> {
        self.log_joint
    }

    pub fn log_q(&self) -> Var<'t> {
        self.log_q
    }

    pub fn log_w(&self) -> Var<'t> {
        self.log_w
    }

    /// `log Ẑ` per data point: `[B]`.
    pub fn log_evidence(&self) -> Result<Var<'t>> {
        self.log_w.log_sum_exp()?.shift(-math::ln(self.k as f64))
    }
}

/// Gradients produced by one estimator call, split by parameter group.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradientEstimate {
    pub theta: Vec<Vec<f64>>,
    pub phi: Vec<Vec<f64>>,
    pub rho: Option<Vec<Vec<f64>>>,
    /// Value of the objective or loss the gradients were taken of.
    pub loss: f64,
    /// Batch-mean IWAE bound at the sampled particles.
    pub elbo: f64,
}

/// Batch mean of `log (1/K) Σ_k w_k`.
pub fn iwae_elbo<'t>(ps: &ParticleSet<'t>) -> Result<Var<'t>> {
    ps.log_evidence()?.mean()
}

/// IWAE bound with `log q` detached: its θ-gradient is the wake-phase θ
/// gradient and its φ-gradient is zero.
pub fn wake_theta_surrogate<'t>(ps: &ParticleSet<'t>) -> Result<Var<'t>> {
    let log_w = ps.log_joint.sub(ps.log_q.detach()?)?;
    log_w.log_sum_exp()?.shift(-math::ln(ps.k as f64))?.mean()
}

/// Score-function surrogate: `detach(log Ẑ) Σ_k log q_k + log Ẑ`.
pub fn reinforce_surrogate<'t>(ps: &ParticleSet<'t>) -> Result<Var<'t>> {
    let log_z = ps.log_evidence()?;
    let score = log_z.detach()?.mul(ps.log_q.sum_last()?)?;
    score.add(log_z)?.mean()
}

/// Leave-one-out baselines `Υ_{-k}` for one row of log-weights, with the
/// held-out weight replaced by the geometric mean of the others.
pub fn vimco_baselines(log_w: &[f64]) -> Result<Vec<f64>> {
    let k = log_w.len();
    if k < 2 {
        return Err(Error::invalid("vimco needs at least two particles"));
    }
    let total: f64 = log_w.iter().sum();
    let ln_k = math::ln(k as f64);
    Ok((0..k)
        .map(|j| {
            let others: Vec<f64> = log_w
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != j)
                .map(|(_, &v)| v)
                .collect();
            let geometric = (total - log_w[j]) / (k - 1) as f64;
            math::log_add_exp(geometric, math::log_sum_exp(&others)) - ln_k
        })
        .collect())
}

/// `Σ_k detach(log Ẑ - Υ_{-k}) log q_k + log Ẑ`.
pub fn vimco_surrogate<'t>(ps: &ParticleSet<'t>) -> Result<Var<'t>> {
    let k = ps.k;
    if k < 2 {
        return Err(Error::invalid("vimco needs at least two particles"));
    }
    let log_z = ps.log_evidence()?;
    let lz = log_z.value();
    let lw = ps.log_w.value();
    let mut coef = Vec::with_capacity(ps.batch * k);
    for b in 0..ps.batch {
        let base = vimco_baselines(&lw[b * k..(b + 1) * k])?;
        coef.extend(base.iter().map(|u| lz[b] - u));
    }
    let tape = ps.log_q.tape();
    let coef = tape.constant_from(vec![ps.batch, k], coef)?;
    coef.mul(ps.log_q)?.sum_last()?.add(log_z)?.mean()
}

/// RELAX surrogate for particles drawn via a Gumbel pack.
///
/// `cv_g` and `cv_g_cond` are the control variate at the pack's Gumbels and
/// conditional Gumbels (`[B]`, differentiable in φ and ρ). `cv_g_cond_frozen`
/// is the control variate at the conditional Gumbels with every φ path cut
/// but the ρ path intact; it enters the score coefficient
/// `log Ẑ - c(g̃)`, which is constant in φ.
pub fn relax_surrogate<'t>(
    ps: &ParticleSet<'t>,
    cv_g: Var<'t>,
    cv_g_cond: Var<'t>,
    cv_g_cond_frozen: Var<'t>,
) -> Result<Var<'t>> {
    for v in [cv_g, cv_g_cond, cv_g_cond_frozen] {
        if v.numel() != ps.batch {
            return Err(Error::ShapeMismatch {
                op: "relax_surrogate",
                lhs: vec![ps.batch],
                rhs: v.shape(),
            });
        }
    }
    let shape = vec![ps.batch];
    let log_z = ps.log_evidence()?;
    let coef = log_z.detach()?.sub(cv_g_cond_frozen.reshape(shape.clone())?)?;
    coef.mul(ps.log_q.sum_last()?)?
        .add(log_z)?
        .add(cv_g.reshape(shape.clone())?)?
        .sub(cv_g_cond.reshape(shape)?)?
        .mean()
}

/// Soft (relaxed) evaluation of a model with one categorical choice, used by
/// the control variates. Inputs are relaxed one-hots `s`, one row per
/// particle (`[B * K, C]`).
pub trait SoftRelaxation<'t> {
    /// `log p(s, x)` with soft component selection, `[B * K]`.
    fn soft_log_joint(&self, s: Var<'t>) -> Result<Var<'t>>;
    /// `log sᵀ q(·|x)`, `[B * K]`.
    fn soft_log_q(&self, s: Var<'t>) -> Result<Var<'t>>;
    /// Per-data-point features fed to a learned control variate, `[B, d]`.
    fn features(&self) -> Result<Var<'t>>;
    fn num_categories(&self) -> usize;
}

/// Smallest REBAR temperature accepted before the soft PMFs become one-hot.
pub const MIN_REBAR_TEMPERATURE: f64 = 1e-4;

/// Learned control variate `c_ρ` for RELAX.
#[derive(Debug, Clone, PartialEq)]
pub enum ControlVariateNet {
    /// `ρ = [scale, log temperature]`.
    Rebar(ParamGroup),
    /// MLP over `[features, g_k]` averaged over particles.
    RelaxMlp(Mlp),
}

impl ControlVariateNet {
    pub fn rebar(scale: f64, log_temperature: f64) -> Self {
        ControlVariateNet::Rebar(ParamGroup::new(vec![
            Tensor::scalar(scale),
            Tensor::scalar(log_temperature),
        ]))
    }

    /// `(features + C)-16-16-1` tanh network.
    pub fn relax_mlp<R: Rng + ?Sized>(feature_dim: usize, categories: usize, rng: &mut R) -> Self {
        ControlVariateNet::RelaxMlp(Mlp::new(&[feature_dim + categories, 16, 16, 1], rng))
    }

    pub fn params(&self) -> &ParamGroup {
        match self {
            ControlVariateNet::Rebar(p) => p,
            ControlVariateNet::RelaxMlp(m) => m.params(),
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamGroup {
        match self {
            ControlVariateNet::Rebar(p) => p,
            ControlVariateNet::RelaxMlp(m) => m.params_mut(),
        }
    }

    /// Control value per data point (`[B]`) for Gumbels `g` of shape
    /// `[B * k, C]`; `vars` are this net's parameters bound on the tape.
    pub fn evaluate<'t>(
        &self,
        vars: &[Var<'t>],
        g: Var<'t>,
        k: usize,
        relax: &dyn SoftRelaxation<'t>,
    ) -> Result<Var<'t>> {
        let c = relax.num_categories();
        let shape = g.shape();
        if shape.len() != 2 || shape[1] != c || k == 0 || shape[0] % k != 0 {
            return Err(Error::ShapeMismatch {
                op: "control_variate",
                lhs: shape,
                rhs: vec![k, c],
            });
        }
        let batch = shape[0] / k;
        match self {
            ControlVariateNet::Rebar(_) => {
                let (scale, log_t) = (vars[0], vars[1]);
                if math::exp(log_t.item()) < MIN_REBAR_TEMPERATURE {
                    return Err(Error::invalid("rebar temperature below 1e-4"));
                }
                let s = g.mul(log_t.neg()?.exp()?)?.softmax()?;
                let log_ratio = relax.soft_log_joint(s)?.sub(relax.soft_log_q(s)?)?;
                let log_mean = log_ratio
                    .reshape(vec![batch, k])?
                    .log_sum_exp()?
                    .shift(-math::ln(k as f64))?;
                log_mean.mul(scale)
            }
            ControlVariateNet::RelaxMlp(mlp) => {
                let features = relax.features()?;
                let rows: Vec<usize> = (0..batch * k).map(|r| r / k).collect();
                let input = Var::concat(&[features.select_rows(&rows)?, g])?;
                mlp.forward(vars, input)?.reshape(vec![batch, k])?.mean_last()
            }
        }
    }
}

/// ρ-gradient of the single-sample variance proxy `mean_d (∂S/∂φ_d)²`.
///
/// `surrogate` builds the RELAX surrogate `S(φ, ρ)` with its randomness, the
/// discrete choices and the score coefficient's base-point values all frozen.
/// The mixed derivative `∇_ρ (u · ∇_φ S)` with `u = ∇_φ S` held fixed is taken
/// as a central difference of `∇_ρ S` along `u`, so no second-order tape is
/// needed. Returns the ρ-gradient and the φ-gradient `u`.
pub fn relax_rho_gradient<F>(
    phi: &ParamGroup,
    rho: &ParamGroup,
    mut surrogate: F,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)>
where
    F: for<'t> FnMut(&'t Tape, &[Var<'t>], &[Var<'t>]) -> Result<Var<'t>>,
{
    if rho.size() == 0 {
        return Err(Error::invalid("control variate has no parameters"));
    }
    let phi_grad = {
        let tape = Tape::new();
        let pv = phi.bind(&tape)?;
        let rv = rho.bind_constant(&tape)?;
        let s = surrogate(&tape, &pv, &rv)?;
        ParamGroup::gradients(&tape.backward(s)?, &pv)
    };
    let u: Vec<f64> = phi_grad.iter().flatten().copied().collect();
    let dim = u.len().max(1) as f64;
    let norm = math::sqrt(u.iter().map(|x| x * x).sum());
    let zeros: Vec<Vec<f64>> = rho.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
    if norm == 0.0 {
        return Ok((zeros, phi_grad));
    }
    let eps = 1e-5 / norm;
    let base = phi.flatten();
    let mut rho_grad_at = |sign: f64| -> Result<Vec<Vec<f64>>> {
        let mut shifted = phi.clone();
        let probe: Vec<f64> = base.iter().zip(&u).map(|(p, d)| p + sign * eps * d).collect();
        shifted.assign_flat(&probe)?;
        let tape = Tape::new();
        let pv = shifted.bind_constant(&tape)?;
        let rv = rho.bind(&tape)?;
        let s = surrogate(&tape, &pv, &rv)?;
        Ok(ParamGroup::gradients(&tape.backward(s)?, &rv))
    };
    let up = rho_grad_at(1.0)?;
    let down = rho_grad_at(-1.0)?;
    let factor = 2.0 / dim / (2.0 * eps);
    let grad = up
        .iter()
        .zip(&down)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| factor * (x - y)).collect())
        .collect();
    Ok((grad, phi_grad))
}

/// Self-normalized importance weights `softmax(log_w)`.
pub fn snis_weights(log_w: &[f64]) -> Result<Vec<f64>> {
    if log_w.is_empty() || log_w.iter().all(|&l| l == f64::NEG_INFINITY) {
        return Err(Error::invalid("all importance weights are zero"));
    }
    Ok(math::softmax(log_w))
}

/// `Σ_k ŵ_k · (-log q_k)` with detached normalized weights.
pub fn wake_phi_loss<'t>(ps: &ParticleSet<'t>) -> Result<Var<'t>> {
    wake_phi_loss_with_score(ps, ps.log_q)
}

/// Wake-phase φ loss whose weights come from `ps` but whose score term
/// differentiates `score_log_q` (`[B, K]`); δ-WW passes the undiluted
/// `log q_φ` here while `ps` holds the defensive mixture.
pub fn wake_phi_loss_with_score<'t>(ps: &ParticleSet<'t>, score_log_q: Var<'t>) -> Result<Var<'t>> {
    let score_log_q = score_log_q.reshape(vec![ps.batch, ps.k])?;
    let lw = ps.log_w.value();
    let mut weights = Vec::with_capacity(lw.len());
    for row in lw.chunks(ps.k) {
        weights.extend(snis_weights(row)?);
    }
    let w = ps.log_q.tape().constant_from(vec![ps.batch, ps.k], weights)?;
    w.mul(score_log_q)?.sum_last()?.neg()?.mean()
}

/// Mean of `-log q(z|x)` over model samples `(z, x)`.
pub fn sleep_phi_loss<'t>(log_q: Var<'t>) -> Result<Var<'t>> {
    if log_q.numel() == 0 {
        return Err(Error::invalid("sleep loss needs at least one sample"));
    }
    log_q.neg()?.mean()
}

/// `Σ_i p_i · (-log q_i)` for enumerated `(z, x)` pairs with probabilities `p_i`.
pub fn sleep_phi_loss_weighted<'t>(log_q: Var<'t>, probs: &[f64]) -> Result<Var<'t>> {
    if log_q.numel() == 0 || log_q.numel() != probs.len() {
        return Err(Error::invalid("sleep loss weights do not match the samples"));
    }
    let p = log_q.tape().constant_from(log_q.shape(), probs.to_vec())?;
    p.mul(log_q)?.sum()?.neg()
}

fn check_delta(delta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&delta) {
        return Err(Error::invalid("mixture weight must lie in [0, 1]"));
    }
    Ok(())
}

/// `(1 - δ) q + δ Uniform`.
pub fn defensive_mixture(q: &Categorical, delta: f64) -> Result<Categorical> {
    check_delta(delta)?;
    Ok(Categorical::from_log_probs_unchecked(defensive_log_probs(
        q.log_probs(),
        delta,
    )))
}

/// Mixture log-probabilities from `q`'s log-probabilities; returns the input
/// unchanged when `δ = 0`.
pub fn defensive_log_probs(log_q: &[f64], delta: f64) -> Vec<f64> {
    if delta == 0.0 {
        return log_q.to_vec();
    }
    let c = log_q.len() as f64;
    let (keep, floor) = (math::ln(1.0 - delta), math::ln(delta / c));
    log_q.iter().map(|&l| math::log_add_exp(keep + l, floor)).collect()
}

/// Mean over coordinates of the sample standard deviation across repeated
/// gradient draws.
pub fn grad_std_metric(draws: &[Vec<f64>]) -> Result<f64> {
    if draws.len() < 2 {
        return Err(Error::invalid("gradient std needs at least two repeats"));
    }
    let d = draws[0].len();
    if d == 0 || draws.iter().any(|g| g.len() != d) {
        return Err(Error::invalid("gradient draws differ in length"));
    }
    let mut total = 0.0;
    let mut column = vec![0.0; draws.len()];
    for j in 0..d {
        for (c, g) in column.iter_mut().zip(draws) {
            *c = g[j];
        }
        total += crate::stats::sample_std(&column);
    }
    Ok(total / d as f64)
}
