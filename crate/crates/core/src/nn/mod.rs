//! Minimal CPU neural-network building blocks.
//!
//! Layers keep their parameters in [`Param`] and expose explicit
//! `forward`/`backward` pairs: the caller holds on to whatever the forward pass
//! needs (usually the layer input) and hands it back to `backward`, which
//! accumulates parameter gradients and returns the input gradient. Everything
//! is generic over [`Real`] so the same code runs in `f32` for training and in
//! `f64` for finite-difference checks.

mod conv;
mod gru;
mod linear;

pub use conv::{Conv2d, ConvTranspose2d};
pub use gru::{GruCache, GruCell, GruStack, StackCache};
pub use linear::Linear;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;

/// Floating-point scalar usable by the layers.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + 'static
{
    /// `C = alpha * A B + beta * C` with arbitrary strides.
    ///
    /// # Safety
    /// Pointers and strides must describe valid `m×k`, `k×n` and `m×n`
    /// matrices; `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("representable constant")
    }
}

impl Real for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row-major `C (m×n) = op(A) op(B) + beta C`.
///
/// `op(A)` is `m×k`; when `ta` is set `a` is stored as `k×m`. Likewise `op(B)`
/// is `k×n` and `b` is stored `n×k` when `tb` is set.
#[allow(clippy::too_many_arguments)]
pub fn matmul<T: Real>(m: usize, k: usize, n: usize, a: &[T], ta: bool, b: &[T], tb: bool, c: &mut [T], beta: T) {
    assert_eq!(a.len(), m * k, "lhs length");
    assert_eq!(b.len(), k * n, "rhs length");
    assert_eq!(c.len(), m * n, "output length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v = if beta == T::zero() { T::zero() } else { *v * beta };
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m) } else { (k, 1) };
    let (rsb, csb) = if tb { (1, k) } else { (n, 1) };
    // SAFETY: lengths were checked above and `c` is a distinct &mut borrow.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// A trainable tensor with its gradient and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
    moment1: Vec<T>,
    moment2: Vec<T>,
}

impl<T: Real> Param<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            value: vec![T::zero(); n],
            grad: vec![T::zero(); n],
            moment1: Vec::new(),
            moment2: Vec::new(),
        }
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(shape);
        for v in &mut p.value {
            *v = T::lit(rng.gen_range(-bound..=bound));
        }
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }

    /// Replaces the value, keeping shape; resets optimizer state.
    pub fn set_value(&mut self, value: Vec<T>) {
        assert_eq!(value.len(), self.value.len(), "parameter length");
        self.value = value;
        self.moment1.clear();
        self.moment2.clear();
    }

    /// Converts to another precision (optimizer state is dropped).
    pub fn cast<U: Real>(&self) -> Param<U> {
        let mut p = Param::<U>::zeros(&self.shape);
        for (d, s) in p.value.iter_mut().zip(&self.value) {
            *d = U::from_f64(s.to_f64().unwrap_or(0.0)).unwrap_or_else(U::zero);
        }
        p
    }
}

/// Anything that owns parameters in a fixed order.
pub trait Parameterized<T: Real> {
    /// Parameters with stable dotted names, in a fixed order.
    fn named_params(&self) -> Vec<(String, &Param<T>)>;
    /// Same order as [`Parameterized::named_params`].
    fn params_mut(&mut self) -> Vec<&mut Param<T>>;

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.len()).sum()
    }
}

/// Adam with L2 weight decay added to the gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    steps: u64,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step<T: Real>(&mut self, params: Vec<&mut Param<T>>) {
        self.steps += 1;
        let t = self.steps as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::one() - b1.powi(t);
        let c2 = T::one() - b2.powi(t);
        let (lr, eps, wd) = (T::lit(self.lr), T::lit(self.eps), T::lit(self.weight_decay));
        for p in params {
            // Moments belong to this optimizer run, not to the parameter.
            if t == 1 || p.moment1.len() != p.value.len() {
                p.moment1 = vec![T::zero(); p.value.len()];
                p.moment2 = vec![T::zero(); p.value.len()];
            }
            for i in 0..p.value.len() {
                let g = p.grad[i] + wd * p.value[i];
                p.moment1[i] = b1 * p.moment1[i] + (T::one() - b1) * g;
                p.moment2[i] = b2 * p.moment2[i] + (T::one() - b2) * g * g;
                let m_hat = p.moment1[i] / c1;
                let v_hat = p.moment2[i] / c2;
                p.value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(params: &mut [&mut Param<T>], max_norm: f64) -> f64 {
    let total: f64 = params
        .iter()
        .flat_map(|p| p.grad.iter())
        .map(|g| {
            let g = g.to_f64().unwrap_or(0.0);
            g * g
        })
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total.is_finite() {
        let scale = T::lit(max_norm / total);
        for p in params.iter_mut() {
            p.grad.iter_mut().for_each(|g| *g *= scale);
        }
    }
    total
}

pub const LEAKY_SLOPE: f64 = 0.2;

pub fn leaky_relu<T: Real>(x: &mut [T]) {
    let s = T::lit(LEAKY_SLOPE);
    for v in x {
        if *v < T::zero() {
            *v *= s;
        }
    }
}

/// Backward through [`leaky_relu`] given its output (sign is preserved).
pub fn leaky_relu_backward<T: Real>(out: &[T], grad: &mut [T]) {
    let s = T::lit(LEAKY_SLOPE);
    for (g, &y) in grad.iter_mut().zip(out) {
        if y < T::zero() {
            *g *= s;
        }
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Permutes `[batch, c, hw]` to `[c, batch·hw]`.
pub(crate) fn to_channel_major<T: Real>(x: &[T], batch: usize, c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..batch {
        for ch in 0..c {
            let src = &x[(b * c + ch) * hw..(b * c + ch + 1) * hw];
            out[ch * batch * hw + b * hw..ch * batch * hw + (b + 1) * hw].copy_from_slice(src);
        }
    }
    out
}

/// Inverse of [`to_channel_major`].
pub(crate) fn from_channel_major<T: Real>(x: &[T], batch: usize, c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..batch {
        for ch in 0..c {
            let src = &x[ch * batch * hw + b * hw..ch * batch * hw + (b + 1) * hw];
            out[(b * c + ch) * hw..(b * c + ch + 1) * hw].copy_from_slice(src);
        }
    }
    out
}
