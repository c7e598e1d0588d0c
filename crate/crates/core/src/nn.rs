//! Parameter groups and multilayer perceptrons.

use alloc::vec::Vec;

use rand::Rng;

use crate::diff::{Gradients, Tape, Var};
use crate::{Error, Result, Tensor};

/// An ordered list of parameter tensors updated together by one optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    tensors: Vec<Tensor>,
}

impl ParamGroup {
    pub fn new(tensors: Vec<Tensor>) -> Self {
        ParamGroup { tensors }
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Total number of scalar parameters.
    pub fn size(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Registers every tensor as a differentiable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Result<Vec<Var<'t>>> {
        self.tensors.iter().map(|t| tape.leaf(t)).collect()
    }

    /// Registers every tensor as a constant.
    pub fn bind_constant<'t>(&self, tape: &'t Tape) -> Result<Vec<Var<'t>>> {
        self.tensors.iter().map(|t| tape.constant(t)).collect()
    }

    pub fn gradients(grads: &Gradients, vars: &[Var<'_>]) -> Vec<Vec<f64>> {
        vars.iter().map(|v| grads.wrt(*v)).collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Overwrites the parameters from a flat vector laid out like [`Self::flatten`].
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.size() {
            return Err(Error::invalid("flat parameter vector has the wrong length"));
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }
}

/// Fully connected network with `tanh` between layers and a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: ParamGroup,
}

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` for a `[fan_in, fan_out]` weight and its bias.
pub fn linear_init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> (Tensor, Tensor) {
    let bound = 1.0 / crate::math::sqrt(fan_in as f64);
    let mut draw = |n: usize| -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-bound..bound)).collect()
    };
    let w = Tensor::new(alloc::vec![fan_in, fan_out], draw(fan_in * fan_out)).expect("shape");
    let b = Tensor::vector(draw(fan_out));
    (w, b)
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let mut tensors = Vec::new();
        for w in sizes.windows(2) {
            let (weight, bias) = linear_init(w[0], w[1], rng);
            tensors.push(weight);
            tensors.push(bias);
        }
        Mlp {
            sizes: sizes.to_vec(),
            params: ParamGroup::new(tensors),
        }
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn params(&self) -> &ParamGroup {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamGroup {
        &mut self.params
    }

    /// `input` is `[n, sizes[0]]`; output is `[n, sizes.last()]`.
    pub fn forward<'t>(&self, vars: &[Var<'t>], input: Var<'t>) -> Result<Var<'t>> {
        let n = input.shape()[0];
        let layers = self.sizes.len() - 1;
        let mut h = input;
        for l in 0..layers {
            let z = h.matmul(vars[2 * l])?.add(vars[2 * l + 1].expand_rows(n)?)?;
            h = if l + 1 < layers { z.tanh()? } else { z };
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::finite_difference_check;
    use crate::rng::stream;

    #[test]
    fn three_layer_tanh_mlp_matches_finite_differences() {
        let mut rng = stream(11, 0, "mlp-test");
        let mlp = Mlp::new(&[3, 5, 4, 1], &mut rng);
        let input: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let flat = Tensor::vector(mlp.params().flatten());
        let err = finite_difference_check(
            |tape, p| {
                // Unflatten the probe into the layer tensors.
                let mut vars = Vec::new();
                let mut off = 0;
                for t in mlp.params().tensors() {
                    let idx: Vec<usize> = (off..off + t.len()).collect();
                    vars.push(p.gather(&idx)?.reshape(t.shape().to_vec())?);
                    off += t.len();
                }
                let x = tape.constant_from(alloc::vec![2, 3], input.clone())?;
                mlp.forward(&vars, x)?.sum()
            },
            &flat,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "relative error {err}");
    }

    #[test]
    fn assign_flat_round_trips() {
        let mut rng = stream(1, 0, "mlp");
        let mut mlp = Mlp::new(&[1, 16, 20], &mut rng);
        assert_eq!(mlp.params().size(), 16 + 16 + 16 * 20 + 20);
        let flat: Vec<f64> = (0..mlp.params().size()).map(|i| i as f64).collect();
        mlp.params_mut().assign_flat(&flat).unwrap();
        assert_eq!(mlp.params().flatten(), flat);
    }
}
