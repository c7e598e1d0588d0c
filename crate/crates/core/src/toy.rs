//! A fully discrete model small enough to enumerate: a 3-way latent choice
//! and a 4-valued observation.
//!
//! The prior logits are the generative parameters; the likelihood table is
//! fixed. The proposal is a `[4, 3]` table of logits, one row per
//! observation. Everything here exists to provide exact expectations for
//! testing the estimators.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::diff::{Tape, Var};
use crate::dist::{gumbel_pack, sample_index};
use crate::estimators::{relax_surrogate, ControlVariateNet, ParticleSet, SoftRelaxation};
use crate::math;
use crate::{Error, Result, Tensor};

pub const LATENTS: usize = 3;
pub const OBSERVATIONS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    prior_logits: Vec<f64>,
    likelihood_logits: Vec<f64>,
}

impl Default for ToyModel {
    fn default() -> Self {
        ToyModel {
            prior_logits: vec![0.2, -0.5, 0.9],
            likelihood_logits: vec![
                1.0, 0.2, -0.5, -1.0, //
                -0.8, 1.1, 0.3, -0.2, //
                0.0, -1.0, 0.6, 1.3,
            ],
        }
    }
}

/// A proposal table that is neither uniform nor the posterior.
pub fn default_proposal() -> Tensor {
    Tensor::new(
        vec![OBSERVATIONS, LATENTS],
        vec![
            0.5, -0.3, 0.1, //
            -0.2, 0.4, 0.0, //
            0.3, 0.3, -0.6, //
            -1.0, 0.2, 0.7,
        ],
    )
    .expect("static shape")
}

/// All `K`-tuples over `c` categories in lexicographic order.
pub fn tuples(c: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for _ in 0..k {
        out = out
            .into_iter()
            .flat_map(|t| {
                (0..c).map(move |z| {
                    let mut t = t.clone();
                    t.push(z);
                    t
                })
            })
            .collect();
    }
    out
}

impl ToyModel {
    pub fn new(prior_logits: Vec<f64>, likelihood_logits: Vec<f64>) -> Result<Self> {
        if prior_logits.len() != LATENTS || likelihood_logits.len() != LATENTS * OBSERVATIONS {
            return Err(Error::invalid("toy model expects 3 prior logits and a 3x4 table"));
        }
        Ok(ToyModel { prior_logits, likelihood_logits })
    }

    pub fn prior_logits(&self) -> &[f64] {
        &self.prior_logits
    }

    pub fn with_prior_logits(&self, prior_logits: Vec<f64>) -> Result<Self> {
        ToyModel::new(prior_logits, self.likelihood_logits.clone())
    }

    /// `log p(x | z)` for every `z`.
    pub fn likelihood_column(&self, x: usize) -> Vec<f64> {
        (0..LATENTS)
            .map(|z| {
                let row = &self.likelihood_logits[z * OBSERVATIONS..(z + 1) * OBSERVATIONS];
                math::log_softmax(row)[x]
            })
            .collect()
    }

    pub fn log_joint(&self, z: usize, x: usize) -> f64 {
        math::log_softmax(&self.prior_logits)[z] + self.likelihood_column(x)[z]
    }

    pub fn log_marginal(&self, x: usize) -> f64 {
        let terms: Vec<f64> = (0..LATENTS).map(|z| self.log_joint(z, x)).collect();
        math::log_sum_exp(&terms)
    }

    pub fn posterior(&self, x: usize) -> Vec<f64> {
        let terms: Vec<f64> = (0..LATENTS).map(|z| self.log_joint(z, x)).collect();
        math::softmax(&terms)
    }

    /// A proposal table equal to the exact posterior.
    pub fn posterior_proposal(&self) -> Tensor {
        let data = (0..OBSERVATIONS)
            .flat_map(|x| self.posterior(x).into_iter().map(math::ln))
            .collect();
        Tensor::new(vec![OBSERVATIONS, LATENTS], data).expect("static shape")
    }

    /// Ancestral sample `(z, x)`.
    pub fn sample_pair<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, usize) {
        let z = sample_index(&math::softmax(&self.prior_logits), rng);
        let row = &self.likelihood_logits[z * OBSERVATIONS..(z + 1) * OBSERVATIONS];
        let x = sample_index(&math::softmax(row), rng);
        (z, x)
    }

    /// `log p_θ(z_k, x)` for each listed `z`, differentiable in `theta` (`[3]`).
    pub fn log_joint_var<'t>(&self, theta: Var<'t>, z: &[usize], x: usize) -> Result<Var<'t>> {
        let lik = self.likelihood_column(x);
        let lik_z: Vec<f64> = z.iter().map(|&zi| lik[zi]).collect();
        let prior = theta.log_softmax()?.gather(z)?;
        prior.add(theta.tape().constant_from(vec![z.len()], lik_z)?)
    }

    /// Exact `E_Q[log (1/K) Σ w_k]` by enumerating all `K`-tuples,
    /// differentiable in both `theta` and `phi`.
    pub fn exact_elbo<'t>(&self, theta: Var<'t>, phi: Var<'t>, x: usize, k: usize) -> Result<Var<'t>> {
        let all = tuples(LATENTS, k);
        let flat: Vec<usize> = all.iter().flatten().copied().collect();
        let n = all.len();
        let log_joint = self.log_joint_var(theta, &flat, x)?.reshape(vec![n, k])?;
        let log_q = proposal_log_prob(phi, &flat, x)?.reshape(vec![n, k])?;
        let ps = ParticleSet::new(log_joint, log_q)?;
        let tuple_prob = log_q.sum_last()?.exp()?;
        tuple_prob.mul(ps.log_evidence()?)?.sum()
    }

    /// Exact `E_{p(z,x)}[-log q(z|x)]` over all 12 pairs, differentiable in `phi`.
    pub fn exact_sleep_loss<'t>(&self, phi: Var<'t>) -> Result<Var<'t>> {
        let (mut probs, mut parts) = (Vec::new(), Vec::new());
        for x in 0..OBSERVATIONS {
            let z: Vec<usize> = (0..LATENTS).collect();
            parts.push(proposal_log_prob(phi, &z, x)?);
            probs.extend(z.iter().map(|&zi| math::exp(self.log_joint(zi, x))));
        }
        let log_q = Var::concat(&parts)?;
        crate::estimators::sleep_phi_loss_weighted(log_q, &probs)
    }

    /// Conditional entropy `E_{p(x)} H(p(z|x))`.
    pub fn posterior_entropy(&self) -> f64 {
        (0..OBSERVATIONS)
            .map(|x| {
                let px = math::exp(self.log_marginal(x));
                let h: f64 = self
                    .posterior(x)
                    .iter()
                    .filter(|&&p| p > 0.0)
                    .map(|&p| -p * math::ln(p))
                    .sum();
                px * h
            })
            .sum()
    }

    /// Exact `(E[∇_θ S], E[∇_φ S])` of a score-function surrogate `S` over
    /// all particle tuples drawn from the proposal.
    pub fn expected_gradient<F>(&self, phi: &Tensor, x: usize, k: usize, mut surrogate: F) -> Result<(Vec<f64>, Vec<f64>)>
    where
        F: for<'t> FnMut(&ParticleSet<'t>) -> Result<Var<'t>>,
    {
        let mut g_theta = vec![0.0; LATENTS];
        let mut g_phi = vec![0.0; phi.len()];
        for tuple in tuples(LATENTS, k) {
            let tape = Tape::new();
            let theta = tape.leaf(&Tensor::vector(self.prior_logits.clone()))?;
            let phi_v = tape.leaf(phi)?;
            let log_q = proposal_log_prob(phi_v, &tuple, x)?;
            let ps = ParticleSet::new(self.log_joint_var(theta, &tuple, x)?, log_q)?;
            let weight = math::exp(log_q.value().iter().sum());
            let grads = tape.backward(surrogate(&ps)?)?;
            for (a, b) in g_theta.iter_mut().zip(grads.wrt(theta)) {
                *a += weight * b;
            }
            for (a, b) in g_phi.iter_mut().zip(grads.wrt(phi_v)) {
                *a += weight * b;
            }
        }
        Ok((g_theta, g_phi))
    }

    /// One RELAX φ-gradient draw at observation `x` with `k` particles.
    pub fn relax_phi_gradient<R: Rng + ?Sized>(
        &self,
        phi: &Tensor,
        x: usize,
        k: usize,
        cv: &ControlVariateNet,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let theta = tape.constant(&Tensor::vector(self.prior_logits.clone()))?;
        let phi_v = tape.leaf(phi)?;
        let rho = cv.params().bind_constant(&tape)?;
        let logits = phi_v.select_rows(&[x])?;
        let (pack, _) = gumbel_pack(logits, k, rng)?;
        let log_q = proposal_log_prob(phi_v, &pack.choices, x)?;
        let ps = ParticleSet::new(self.log_joint_var(theta, &pack.choices, x)?, log_q)?;
        let live = ToyRelaxation::new(self, theta, logits, x)?;
        let frozen = ToyRelaxation::new(self, theta, logits.detach()?, x)?;
        let cv_g = cv.evaluate(&rho, pack.g, k, &live)?;
        let cv_gc = cv.evaluate(&rho, pack.g_cond, k, &live)?;
        let cv_frozen = cv.evaluate(&rho, pack.g_cond.detach()?, k, &frozen)?;
        let s = relax_surrogate(&ps, cv_g, cv_gc, cv_frozen)?;
        Ok(tape.backward(s)?.wrt(phi_v))
    }
}

/// `log q_φ(z_k | x)` for each listed `z`, from a `[4, 3]` logit table.
pub fn proposal_log_prob<'t>(phi: Var<'t>, z: &[usize], x: usize) -> Result<Var<'t>> {
    let row = phi.select_rows(&[x])?.log_softmax()?;
    row.gather(z)?.reshape(vec![z.len()])
}

/// Soft evaluation of the toy model at one observation.
pub struct ToyRelaxation<'t> {
    prior_probs: Var<'t>,
    likelihood_probs: Var<'t>,
    q_probs: Var<'t>,
    x: usize,
}

impl<'t> ToyRelaxation<'t> {
    /// `q_logits` is the `[1, 3]` proposal row at `x`.
    pub fn new(model: &ToyModel, theta: Var<'t>, q_logits: Var<'t>, x: usize) -> Result<Self> {
        let tape = theta.tape();
        let lik: Vec<f64> = model.likelihood_column(x).into_iter().map(math::exp).collect();
        Ok(ToyRelaxation {
            prior_probs: theta.softmax()?.reshape(vec![LATENTS, 1])?,
            likelihood_probs: tape.constant_from(vec![LATENTS, 1], lik)?,
            q_probs: q_logits.softmax()?.reshape(vec![LATENTS, 1])?,
            x,
        })
    }
}

impl<'t> SoftRelaxation<'t> for ToyRelaxation<'t> {
    fn soft_log_joint(&self, s: Var<'t>) -> Result<Var<'t>> {
        let n = s.shape()[0];
        let prior = s.matmul(self.prior_probs)?.log()?;
        let lik = s.matmul(self.likelihood_probs)?.log()?;
        prior.add(lik)?.reshape(vec![n])
    }

    fn soft_log_q(&self, s: Var<'t>) -> Result<Var<'t>> {
        let n = s.shape()[0];
        s.matmul(self.q_probs)?.log()?.reshape(vec![n])
    }

    fn features(&self) -> Result<Var<'t>> {
        self.prior_probs.tape().constant_from(vec![1, 1], vec![self.x as f64])
    }

    fn num_categories(&self) -> usize {
        LATENTS
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tuples_enumerate_in_order() {
        let t = tuples(3, 2);
        assert_eq!(t.len(), 9);
        assert_eq!(t[0], vec![0, 0]);
        assert_eq!(t[5], vec![1, 2]);
    }

    #[test]
    fn joint_sums_to_one() {
        let m = ToyModel::default();
        let total: f64 = (0..OBSERVATIONS)
            .flat_map(|x| (0..LATENTS).map(move |z| (z, x)))
            .map(|(z, x)| math::exp(m.log_joint(z, x)))
            .sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn exact_elbo_with_posterior_proposal_is_log_marginal() {
        let m = ToyModel::default();
        let tape = Tape::new();
        let theta = tape.constant(&Tensor::vector(m.prior_logits.clone())).unwrap();
        let phi = tape.constant(&m.posterior_proposal()).unwrap();
        for x in 0..OBSERVATIONS {
            let e = m.exact_elbo(theta, phi, x, 2).unwrap().item();
            assert!((e - m.log_marginal(x)).abs() < 1e-12);
        }
    }
}
