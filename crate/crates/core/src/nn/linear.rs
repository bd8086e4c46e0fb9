use rand::Rng;

use super::{matmul, Param, Parameterized, Real};

/// `y = x Wᵀ + b` with `W` stored `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl<T: Real> Linear<T> {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Self {
            weight: Param::uniform(&[out_dim, in_dim], bound, rng),
            bias: Param::uniform(&[out_dim], bound, rng),
            in_dim,
            out_dim,
        }
    }

    /// `x` is `[batch, in_dim]`; returns `[batch, out_dim]`.
    pub fn forward(&self, x: &[T], batch: usize) -> Vec<T> {
        let mut y = vec![T::zero(); batch * self.out_dim];
        for row in y.chunks_mut(self.out_dim) {
            row.copy_from_slice(&self.bias.value);
        }
        matmul(batch, self.in_dim, self.out_dim, x, false, &self.weight.value, true, &mut y, T::one());
        y
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&mut self, x: &[T], dy: &[T], batch: usize) -> Vec<T> {
        self.accumulate(x, dy, batch);
        let mut dx = vec![T::zero(); batch * self.in_dim];
        matmul(batch, self.out_dim, self.in_dim, dy, false, &self.weight.value, false, &mut dx, T::zero());
        dx
    }

    /// Parameter gradients only.
    pub fn accumulate(&mut self, x: &[T], dy: &[T], batch: usize) {
        matmul(self.out_dim, batch, self.in_dim, dy, true, x, false, &mut self.weight.grad, T::one());
        for row in dy.chunks(self.out_dim) {
            for (g, &d) in self.bias.grad.iter_mut().zip(row) {
                *g += d;
            }
        }
    }
}

impl<T: Real> Parameterized<T> for Linear<T> {
    fn named_params(&self) -> Vec<(String, &Param<T>)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}
