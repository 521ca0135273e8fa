use rand::Rng;

use super::params::{Bound, ParamId, ParamStore};
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::Result;

/// Affine map `x·W + b` applied to every row.
#[derive(Clone, Debug)]
pub struct DenseLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl DenseLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight =
            store.register_uniform(format!("{name}.weight"), vec![in_dim, out_dim], in_dim, rng)?;
        let bias = store.register_uniform(format!("{name}.bias"), vec![out_dim], in_dim, rng)?;
        Ok(DenseLayer {
            weight,
            bias: Some(bias),
            in_dim,
            out_dim,
        })
    }

    /// Linear map `x·W` with no bias parameter.
    pub fn without_bias<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight =
            store.register_uniform(format!("{name}.weight"), vec![in_dim, out_dim], in_dim, rng)?;
        Ok(DenseLayer {
            weight,
            bias: None,
            in_dim,
            out_dim,
        })
    }

    /// Zeroes the weight matrix, leaving the bias (or zero) as the only output.
    pub fn zero_weight(&self, store: &mut ParamStore) {
        *store.get_mut(self.weight) = Tensor::zeros(vec![self.in_dim, self.out_dim]);
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.var(self.weight))?;
        match self.bias {
            Some(b) => g.add(y, p.var(b)),
            None => Ok(y),
        }
    }
}
