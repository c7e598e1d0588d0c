//! Distributions: categorical, normal, Gumbel (plain and conditional) and
//! Concrete.
//!
//! Value-level structs (`Categorical`, `NormalDist`, `ConcreteDist`) validate
//! their parameters and sample; the free functions taking [`Var`]s produce
//! differentiable log-densities and reparameterized samples.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diff::Var;
use crate::math;
use crate::rng::open_uniform;
use crate::{Error, Result};

/// Inverse-CDF draw from a probability vector.
pub fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last_positive
}

#[derive(Debug, Clone, PartialEq)]
pub struct Categorical {
    log_probs: Vec<f64>,
}

impl Categorical {
    /// From unnormalized log-probabilities.
    pub fn new(logits: &[f64]) -> Result<Self> {
        if logits.is_empty() {
            return Err(Error::invalid("categorical needs at least one category"));
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFinite { op: "categorical" });
        }
        Ok(Categorical {
            log_probs: math::log_softmax(logits),
        })
    }

    /// From a probability vector; entries may be zero.
    pub fn from_probs(probs: &[f64]) -> Result<Self> {
        let total: f64 = probs.iter().sum();
        if probs.is_empty() || probs.iter().any(|p| !(0.0..=1.0).contains(p)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("not a probability vector"));
        }
        Ok(Categorical {
            log_probs: probs.iter().map(|&p| math::ln(p)).collect(),
        })
    }

    pub(crate) fn from_log_probs_unchecked(log_probs: Vec<f64>) -> Self {
        Categorical { log_probs }
    }

    pub fn num_categories(&self) -> usize {
        self.log_probs.len()
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn probs(&self) -> Vec<f64> {
        self.log_probs.iter().map(|&l| math::exp(l)).collect()
    }

    pub fn log_prob(&self, index: usize) -> Result<f64> {
        self.log_probs
            .get(index)
            .copied()
            .ok_or(Error::IndexOutOfRange { index, len: self.log_probs.len() })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_index(&self.probs(), rng)
    }
}

/// Differentiable `log softmax(logits)[index]`, per row of `[rows, C]` logits
/// with `indices.len() / rows` indices per row.
pub fn categorical_log_prob<'t>(logits: Var<'t>, indices: &[usize]) -> Result<Var<'t>> {
    logits.log_softmax()?.gather(indices)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalDist {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl NormalDist {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(Error::ShapeMismatch {
                op: "normal",
                lhs: vec![mean.len()],
                rhs: vec![std.len()],
            });
        }
        if std.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid("normal standard deviation must be positive"));
        }
        Ok(NormalDist { mean, std })
    }

    /// Log-density summed over elements.
    pub fn log_prob(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.mean.len() {
            return Err(Error::ShapeMismatch {
                op: "normal_log_prob",
                lhs: vec![x.len()],
                rhs: vec![self.mean.len()],
            });
        }
        Ok(x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((x, m), s)| {
                let z = (x - m) / s;
                -0.5 * z * z - math::ln(*s) - 0.5 * math::LN_2PI
            })
            .sum())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.std)
            .map(|(m, s)| {
                let e: f64 = StandardNormal.sample(rng);
                m + s * e
            })
            .collect()
    }
}

/// Elementwise normal log-density parameterized by variance.
pub fn normal_log_density<'t>(x: Var<'t>, mean: Var<'t>, variance: Var<'t>) -> Result<Var<'t>> {
    let d = x.sub(mean)?;
    let quad = d.square()?.div(variance)?.scale(-0.5)?;
    quad.sub(variance.log()?.scale(0.5)?)?.shift(-0.5 * math::LN_2PI)
}

/// Uniform noise behind one [`GumbelPack`]: `u` drives the Gumbel perturbation,
/// `v` the conditional Gumbels. Both are `rows * k * C` long and clamped away
/// from 0 and 1.
#[derive(Debug, Clone, PartialEq)]
pub struct GumbelNoise {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl GumbelNoise {
    pub fn sample<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Self {
        let u = (0..len).map(|_| open_uniform(rng)).collect();
        let v = (0..len).map(|_| open_uniform(rng)).collect();
        GumbelNoise { u, v }
    }
}

/// Reparameterized Gumbel variates `g`, the one-hot choices `argmax g`, and
/// Gumbel variates `g_cond` conditioned on those choices.
///
/// For `B` rows of logits and `k` particles, `g` and `g_cond` are
/// `[B * k, C]` with row `b * k + j` belonging to logit row `b`.
pub struct GumbelPack<'t> {
    pub g: Var<'t>,
    pub g_cond: Var<'t>,
    pub choices: Vec<usize>,
    pub k: usize,
}

/// Samples a pack. Locations are `log_softmax(logits)`, so the maximum of
/// each row of `g` is a standard Gumbel and the conditional formulas need no
/// extra shift.
pub fn gumbel_pack<'t, R: Rng + ?Sized>(
    logits: Var<'t>,
    k: usize,
    rng: &mut R,
) -> Result<(GumbelPack<'t>, GumbelNoise)> {
    let shape = logits.shape();
    let c = *shape.last().ok_or_else(|| Error::invalid("gumbel pack needs a logit vector"))?;
    let rows = logits.numel() / c.max(1);
    let noise = GumbelNoise::sample(rows * k * c, rng);
    let pack = gumbel_pack_with_noise(logits, k, &noise, None)?;
    Ok((pack, noise))
}

/// Rebuilds a pack from fixed noise. When `choices` is given the conditional
/// Gumbels are conditioned on those categories instead of `argmax g`; this is
/// used to evaluate a pack at perturbed parameters with frozen randomness.
pub fn gumbel_pack_with_noise<'t>(
    logits: Var<'t>,
    k: usize,
    noise: &GumbelNoise,
    choices: Option<&[usize]>,
) -> Result<GumbelPack<'t>> {
    if k == 0 {
        return Err(Error::invalid("gumbel pack needs k >= 1"));
    }
    let shape = logits.shape();
    let c = *shape.last().ok_or_else(|| Error::invalid("gumbel pack needs a logit vector"))?;
    let rows = logits.numel() / c;
    let n = rows * k;
    if noise.u.len() != n * c || noise.v.len() != n * c {
        return Err(Error::ShapeMismatch {
            op: "gumbel_pack",
            lhs: vec![n, c],
            rhs: vec![noise.u.len()],
        });
    }
    let tape = logits.tape();
    let log_pi = logits.reshape(vec![rows, c])?.log_softmax()?;
    let row_of: Vec<usize> = (0..n).map(|r| r / k).collect();
    let log_pi_rows = log_pi.select_rows(&row_of)?;

    let neg_log_neg_log_u: Vec<f64> = noise.u.iter().map(|&u| -math::ln(-math::ln(u))).collect();
    let g = log_pi_rows.add(tape.constant_from(vec![n, c], neg_log_neg_log_u)?)?;

    let choices: Vec<usize> = match choices {
        Some(ch) => {
            if ch.len() != n || ch.iter().any(|&b| b >= c) {
                return Err(Error::invalid("choices do not match the pack"));
            }
            ch.to_vec()
        }
        None => g.value().chunks(c).map(math::argmax).collect(),
    };

    // g_cond_i = -log(a_i * exp(-log pi_i) + e), with a_i = -log v_i for
    // i != b, a_b = 0 and e = -log v_b; this gives -log(-log v_b) at b and
    // -log(-log v_i / pi_i - log v_b) elsewhere.
    let mut a = vec![0.0; n * c];
    let mut e = vec![0.0; n * c];
    for r in 0..n {
        let b = choices[r];
        let neg_log_vb = -math::ln(noise.v[r * c + b]);
        for i in 0..c {
            if i != b {
                a[r * c + i] = -math::ln(noise.v[r * c + i]);
            }
            e[r * c + i] = neg_log_vb;
        }
    }
    let inv_pi = log_pi_rows.neg()?.exp()?;
    let g_cond = inv_pi
        .mul(tape.constant_from(vec![n, c], a)?)?
        .add(tape.constant_from(vec![n, c], e)?)?
        .log()?
        .neg()?;

    Ok(GumbelPack { g, g_cond, choices, k })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConcreteDist {
    logits: Vec<f64>,
    temperature: f64,
}

impl ConcreteDist {
    pub fn new(logits: Vec<f64>, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::invalid("concrete temperature must be positive"));
        }
        if logits.is_empty() || logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::invalid("concrete logits must be finite and non-empty"));
        }
        Ok(ConcreteDist { logits, temperature })
    }

    /// Log of a sample on the simplex interior.
    pub fn sample_log<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let perturbed: Vec<f64> = self
            .logits
            .iter()
            .map(|&l| (l - math::ln(-math::ln(open_uniform(rng)))) / self.temperature)
            .collect();
        math::log_softmax(&perturbed)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.sample_log(rng).into_iter().map(math::exp).collect()
    }

    /// Log-density at a point given by its coordinate logarithms.
    pub fn log_density(&self, log_y: &[f64]) -> Result<f64> {
        let c = self.logits.len();
        if log_y.len() != c {
            return Err(Error::ShapeMismatch {
                op: "concrete_log_density",
                lhs: vec![log_y.len()],
                rhs: vec![c],
            });
        }
        let t = self.temperature;
        let inner: Vec<f64> = self.logits.iter().zip(log_y).map(|(l, y)| l - t * y).collect();
        let linear: f64 = self.logits.iter().zip(log_y).map(|(l, y)| l - (t + 1.0) * y).sum();
        Ok(math::ln_factorial_minus_one(c) + (c as f64 - 1.0) * math::ln(t) + linear
            - c as f64 * math::log_sum_exp(&inner))
    }
}

/// Reparameterized Concrete sample, kept in log space alongside its value.
pub struct ConcreteSample<'t> {
    pub log_y: Var<'t>,
    pub y: Var<'t>,
}

/// One relaxed sample per row of `[N, C]` logits at the given temperature.
pub fn concrete_sample<'t, R: Rng + ?Sized>(
    logits: Var<'t>,
    temperature: f64,
    rng: &mut R,
) -> Result<ConcreteSample<'t>> {
    if !(temperature > 0.0) {
        return Err(Error::invalid("concrete temperature must be positive"));
    }
    let shape = logits.shape();
    let noise: Vec<f64> = (0..logits.numel())
        .map(|_| -math::ln(-math::ln(open_uniform(rng))))
        .collect();
    let log_y = logits
        .add(logits.tape().constant_from(shape, noise)?)?
        .scale(1.0 / temperature)?
        .log_softmax()?;
    let y = log_y.exp()?;
    Ok(ConcreteSample { log_y, y })
}

/// Differentiable Concrete log-density per row, evaluated in log space.
pub fn concrete_log_density<'t>(logits: Var<'t>, temperature: f64, log_y: Var<'t>) -> Result<Var<'t>> {
    if !(temperature > 0.0) {
        return Err(Error::invalid("concrete temperature must be positive"));
    }
    let c = *logits.shape().last().ok_or_else(|| Error::invalid("concrete needs logits"))?;
    let linear = logits.sub(log_y.scale(temperature + 1.0)?)?.sum_last()?;
    let normalizer = logits.sub(log_y.scale(temperature)?)?.log_sum_exp()?.scale(c as f64)?;
    linear
        .sub(normalizer)?
        .shift(math::ln_factorial_minus_one(c) + (c as f64 - 1.0) * math::ln(temperature))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{finite_difference_check, Tape};
    use crate::rng::stream;
    use crate::Tensor;

    fn within_three_se(count: usize, n: usize, p: f64) -> bool {
        let freq = count as f64 / n as f64;
        let se = math::sqrt(p * (1.0 - p) / n as f64);
        (freq - p).abs() <= 3.0 * se
    }

    #[test]
    fn near_degenerate_categorical_samples_first_index() {
        let d = Categorical::new(&[100.0, 0.0, 0.0]).unwrap();
        let mut rng = stream(0, 0, "cat");
        let hits = (0..10_000).filter(|_| d.sample(&mut rng) == 0).count();
        assert!(hits as f64 / 1e4 >= 0.999);
    }

    #[test]
    fn categorical_frequencies_match_probabilities() {
        let mut rng = stream(1, 0, "cat");
        for probs in [vec![0.25; 4], vec![0.2, 0.3, 0.5]] {
            let logits: Vec<f64> = probs.iter().map(|p| math::ln(*p)).collect();
            let d = Categorical::new(&logits).unwrap();
            let n = 100_000;
            let mut counts = vec![0; probs.len()];
            for _ in 0..n {
                counts[d.sample(&mut rng)] += 1;
            }
            for (c, p) in counts.iter().zip(&probs) {
                assert!(within_three_se(*c, n, *p), "{counts:?} vs {probs:?}");
            }
        }
    }

    #[test]
    fn categorical_log_prob_examples() {
        let d = Categorical::new(&[0.0, 0.0, 0.0]).unwrap();
        assert!((d.log_prob(1).unwrap() + 1.098_612_288_668_109_8).abs() < 1e-12);
        let d = Categorical::new(&[0.0, -1e9]).unwrap();
        assert!(d.log_prob(0).unwrap().abs() < 1e-12);
        assert_eq!(d.log_prob(2), Err(Error::IndexOutOfRange { index: 2, len: 2 }));
        assert!(Categorical::new(&[f64::NAN]).is_err());
    }

    #[test]
    fn categorical_pmf_sums_to_one() {
        let d = Categorical::new(&[1.3, -0.2, 4.0, 0.0, -7.5]).unwrap();
        let total: f64 = d.probs().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn categorical_log_prob_gradient_is_onehot_minus_softmax() {
        let logits = [0.4, -1.1, 2.0];
        let tape = Tape::new();
        let l = tape.leaf(&Tensor::vector(logits.to_vec())).unwrap();
        let lp = categorical_log_prob(l, &[2]).unwrap().sum().unwrap();
        let g = tape.backward(lp).unwrap().wrt(l);
        let sm = math::softmax(&logits);
        for i in 0..3 {
            let onehot = if i == 2 { 1.0 } else { 0.0 };
            assert!((g[i] - (onehot - sm[i])).abs() < 1e-12);
        }
        let err = finite_difference_check(
            |_, p| categorical_log_prob(p, &[1])?.sum(),
            &Tensor::vector(logits.to_vec()),
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4);
    }

    #[test]
    fn normal_log_prob_examples() {
        let d = NormalDist::new(vec![1.5], vec![1.0]).unwrap();
        assert!((d.log_prob(&[1.5]).unwrap() + 0.918_938_533_204_672_7).abs() < 1e-12);
        let d = NormalDist::new(vec![1.5], vec![2.0]).unwrap();
        let expected = -0.918_938_533_204_672_7 - 0.5 - math::ln(2.0);
        assert!((d.log_prob(&[3.5]).unwrap() - expected).abs() < 1e-12);
        assert!(NormalDist::new(vec![0.0], vec![0.0]).is_err());
        assert!(NormalDist::new(vec![0.0], vec![-1.0]).is_err());
    }

    #[test]
    fn normal_mean_gradient() {
        let (x, sigma) = (0.7, 1.3);
        let tape = Tape::new();
        let mu = tape.leaf(&Tensor::vector(vec![-0.4])).unwrap();
        let xv = tape.constant(&Tensor::vector(vec![x])).unwrap();
        let var = tape.constant(&Tensor::vector(vec![sigma * sigma])).unwrap();
        let lp = normal_log_density(xv, mu, var).unwrap().sum().unwrap();
        let g = tape.backward(lp).unwrap().wrt(mu)[0];
        assert!((g - (x + 0.4) / (sigma * sigma)).abs() < 1e-12);
        let err = finite_difference_check(
            |tape, p| {
                let xv = tape.constant(&Tensor::vector(vec![x]))?;
                let var = tape.constant(&Tensor::vector(vec![sigma * sigma]))?;
                normal_log_density(xv, p, var)?.sum()
            },
            &Tensor::vector(vec![-0.4]),
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4);
    }

    #[test]
    fn gumbel_argmax_and_conditional_argmax_agree_with_choice() {
        let mut rng = stream(2, 0, "gumbel");
        let logits = [0.3, -0.5, 1.2, 0.0];
        for _ in 0..2_500 {
            let tape = Tape::new();
            let l = tape.leaf(&Tensor::vector(logits.to_vec())).unwrap();
            let (pack, _) = gumbel_pack(l, 4, &mut rng).unwrap();
            for (r, &b) in pack.choices.iter().enumerate() {
                assert_eq!(math::argmax(&pack.g.value()[r * 4..(r + 1) * 4]), b);
                assert_eq!(math::argmax(&pack.g_cond.value()[r * 4..(r + 1) * 4]), b);
            }
        }
    }

    #[test]
    fn gumbel_argmax_marginal_matches_softmax() {
        let mut rng = stream(3, 0, "gumbel");
        let logits = [0.3, -0.5, 1.2];
        let probs = math::softmax(&logits);
        let n = 100_000;
        let mut counts = [0usize; 3];
        let tape = Tape::new();
        let l = tape.constant(&Tensor::new(vec![1, 3], logits.to_vec()).unwrap()).unwrap();
        let (pack, _) = gumbel_pack(l, n, &mut rng).unwrap();
        for &b in &pack.choices {
            counts[b] += 1;
        }
        for i in 0..3 {
            assert!(within_three_se(counts[i], n, probs[i]), "{counts:?}");
        }
    }

    #[test]
    fn conditional_gumbels_match_rejection_conditioned_gumbels() {
        // E[g_i | argmax = b] estimated two ways: directly from the
        // conditional construction, and by filtering unconditional draws.
        let mut rng = stream(4, 0, "gumbel");
        let logits = [0.5, -0.3, 0.1];
        let n = 200_000;
        let tape = Tape::new();
        let l = tape.constant(&Tensor::new(vec![1, 3], logits.to_vec()).unwrap()).unwrap();
        let (pack, _) = gumbel_pack(l, n, &mut rng).unwrap();
        let g = pack.g.value();
        let mut filtered = [0.0; 3];
        let mut count = 0.0;
        for r in 0..n {
            if pack.choices[r] == 1 {
                count += 1.0;
                for i in 0..3 {
                    filtered[i] += g[r * 3 + i];
                }
            }
        }
        let fixed = vec![1usize; n];
        let noise = GumbelNoise::sample(n * 3, &mut rng);
        let cond = gumbel_pack_with_noise(l, n, &noise, Some(&fixed)).unwrap();
        let gc = cond.g_cond.value();
        for i in 0..3 {
            let direct: f64 = (0..n).map(|r| gc[r * 3 + i]).sum::<f64>() / n as f64;
            let rejection = filtered[i] / count;
            assert!((direct - rejection).abs() < 0.03, "coord {i}: {direct} vs {rejection}");
        }
    }

    #[test]
    fn gumbel_pack_is_differentiable() {
        let logits = Tensor::new(vec![2, 3], vec![0.2, -0.1, 0.4, 1.0, 0.0, -1.0]).unwrap();
        let mut rng = stream(5, 0, "gumbel");
        let noise = GumbelNoise::sample(2 * 2 * 3, &mut rng);
        let choices = {
            let tape = Tape::new();
            let l = tape.constant(&logits).unwrap();
            gumbel_pack_with_noise(l, 2, &noise, None).unwrap().choices
        };
        let err = finite_difference_check(
            |_, p| {
                let pack = gumbel_pack_with_noise(p, 2, &noise, Some(&choices))?;
                pack.g.tanh()?.sum()?.add(pack.g_cond.tanh()?.sum()?)
            },
            &logits,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn concrete_low_temperature_concentrates() {
        // Near-one-hot samples whose hot coordinate follows softmax(logits);
        // with logits [5, 0, 0] coordinate 0 wins with probability e^5 / (e^5 + 2).
        let d = ConcreteDist::new(vec![5.0, 0.0, 0.0], 0.01).unwrap();
        let mut rng = stream(6, 0, "concrete");
        let n = 10_000;
        let (mut first, mut hot) = (0, 0);
        for _ in 0..n {
            let y = d.sample(&mut rng);
            assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            if y.iter().any(|&v| v > 0.99) {
                hot += 1;
            }
            if y[0] > 0.99 {
                first += 1;
            }
        }
        assert!(hot as f64 >= 0.995 * n as f64, "{hot}");
        let p = math::exp(5.0) / (math::exp(5.0) + 2.0);
        assert!(first as f64 / n as f64 > p - 0.01 && first as f64 / n as f64 <= p + 0.004, "{first}");
    }

    #[test]
    fn concrete_max_coordinate_grows_as_temperature_falls() {
        let mut rng = stream(7, 0, "concrete");
        let mean_max = |t: f64, rng: &mut crate::rng::StreamRng| {
            let d = ConcreteDist::new(vec![0.5, 0.0, -0.5], t).unwrap();
            (0..20_000)
                .map(|_| d.sample(rng).into_iter().fold(0.0, f64::max))
                .sum::<f64>()
                / 20_000.0
        };
        assert!(mean_max(0.5, &mut rng) > mean_max(3.0, &mut rng));
        assert!(ConcreteDist::new(vec![0.0, 0.0], 0.0).is_err());
    }

    #[test]
    fn concrete_density_integrates_to_one_on_two_simplex() {
        // Midpoint rule in logit space, y1 = sigmoid(s), dy1 = y1 (1 - y1) ds;
        // the density is w.r.t. the first coordinate.
        for t in [0.5, 1.0, 3.0] {
            let d = ConcreteDist::new(vec![0.7, -0.2], t).unwrap();
            let (lo, hi, n) = (-200.0, 200.0, 400_000);
            let h = (hi - lo) / n as f64;
            let total: f64 = (0..n)
                .map(|i| {
                    let s = lo + (i as f64 + 0.5) * h;
                    let ln_y1 = -math::log_add_exp(0.0, -s);
                    let ln_y2 = -math::log_add_exp(0.0, s);
                    math::exp(d.log_density(&[ln_y1, ln_y2]).unwrap() + ln_y1 + ln_y2) * h
                })
                .sum();
            assert!((total - 1.0).abs() < 1e-3, "t={t}: {total}");
        }
    }

    #[test]
    fn concrete_tape_density_matches_value_density_and_differentiates() {
        let logits = vec![0.3, -0.4, 1.1];
        let d = ConcreteDist::new(logits.clone(), 0.5).unwrap();
        let mut rng = stream(8, 0, "concrete");
        let log_y = d.sample_log(&mut rng);
        let tape = Tape::new();
        let l = tape.constant(&Tensor::new(vec![1, 3], logits.clone()).unwrap()).unwrap();
        let ly = tape.constant(&Tensor::new(vec![1, 3], log_y.clone()).unwrap()).unwrap();
        let v = concrete_log_density(l, 0.5, ly).unwrap().item();
        assert!((v - d.log_density(&log_y).unwrap()).abs() < 1e-12);
        let err = finite_difference_check(
            |tape, p| {
                let ly = tape.constant(&Tensor::new(vec![1, 3], log_y.clone()).unwrap())?;
                concrete_log_density(p, 0.5, ly)?.sum()
            },
            &Tensor::new(vec![1, 3], logits).unwrap(),
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4);
    }
}
