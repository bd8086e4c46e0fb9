use rand::Rng;

use super::{matmul, sigmoid, Param, Parameterized, Real};

/// Gated recurrent unit with gate order (reset, update, new):
///
/// ```text
/// r  = σ(W_ir x + b_ir + W_hr h + b_hr)
/// z  = σ(W_iz x + b_iz + W_hz h + b_hz)
/// n  = tanh(W_in x + b_in + r ⊙ (W_hn h + b_hn))
/// h' = (1 − z) ⊙ n + z ⊙ h
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct GruCell<T> {
    pub w_ih: Param<T>,
    pub w_hh: Param<T>,
    pub b_ih: Param<T>,
    pub b_hh: Param<T>,
    pub input: usize,
    pub hidden: usize,
}

/// Values kept from one forward step for the backward pass.
#[derive(Debug, Clone)]
pub struct GruCache<T> {
    x: Vec<T>,
    h: Vec<T>,
    r: Vec<T>,
    z: Vec<T>,
    n: Vec<T>,
    hn: Vec<T>,
}

impl<T: Real> GruCell<T> {
    pub fn new(input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        Self {
            w_ih: Param::uniform(&[3 * hidden, input], bound, rng),
            w_hh: Param::uniform(&[3 * hidden, hidden], bound, rng),
            b_ih: Param::uniform(&[3 * hidden], bound, rng),
            b_hh: Param::uniform(&[3 * hidden], bound, rng),
            input,
            hidden,
        }
    }

    fn affine(w: &Param<T>, b: &Param<T>, x: &[T], batch: usize, in_dim: usize, out_dim: usize) -> Vec<T> {
        let mut y = vec![T::zero(); batch * out_dim];
        for row in y.chunks_mut(out_dim) {
            row.copy_from_slice(&b.value);
        }
        matmul(batch, in_dim, out_dim, x, false, &w.value, true, &mut y, T::one());
        y
    }

    /// One step for a batch: `x` is `[batch, input]`, `h` is `[batch, hidden]`.
    pub fn step(&self, x: &[T], h: &[T], batch: usize) -> (Vec<T>, GruCache<T>) {
        let hd = self.hidden;
        let gi = Self::affine(&self.w_ih, &self.b_ih, x, batch, self.input, 3 * hd);
        let gh = Self::affine(&self.w_hh, &self.b_hh, h, batch, hd, 3 * hd);
        let mut r = vec![T::zero(); batch * hd];
        let mut z = vec![T::zero(); batch * hd];
        let mut n = vec![T::zero(); batch * hd];
        let mut hn = vec![T::zero(); batch * hd];
        let mut out = vec![T::zero(); batch * hd];
        for b in 0..batch {
            let (gi, gh) = (&gi[b * 3 * hd..(b + 1) * 3 * hd], &gh[b * 3 * hd..(b + 1) * 3 * hd]);
            for j in 0..hd {
                let idx = b * hd + j;
                r[idx] = sigmoid(gi[j] + gh[j]);
                z[idx] = sigmoid(gi[hd + j] + gh[hd + j]);
                hn[idx] = gh[2 * hd + j];
                n[idx] = (gi[2 * hd + j] + r[idx] * hn[idx]).tanh();
                out[idx] = (T::one() - z[idx]) * n[idx] + z[idx] * h[idx];
            }
        }
        let cache = GruCache {
            x: x.to_vec(),
            h: h.to_vec(),
            r,
            z,
            n,
            hn,
        };
        (out, cache)
    }

    /// Backward through one step. Returns `(dL/dx, dL/dh)`.
    pub fn backward_step(&mut self, cache: &GruCache<T>, dh_new: &[T], batch: usize) -> (Vec<T>, Vec<T>) {
        let hd = self.hidden;
        let mut d_gi = vec![T::zero(); batch * 3 * hd];
        let mut d_gh = vec![T::zero(); batch * 3 * hd];
        let mut dh = vec![T::zero(); batch * hd];
        for b in 0..batch {
            for j in 0..hd {
                let idx = b * hd + j;
                let (r, z, n) = (cache.r[idx], cache.z[idx], cache.n[idx]);
                let g = dh_new[idx];
                let dn = g * (T::one() - z);
                let dz = g * (cache.h[idx] - n);
                dh[idx] = g * z;
                let dn_pre = dn * (T::one() - n * n);
                let dr_pre = dn_pre * cache.hn[idx] * r * (T::one() - r);
                let dz_pre = dz * z * (T::one() - z);
                let base = b * 3 * hd;
                d_gi[base + j] = dr_pre;
                d_gi[base + hd + j] = dz_pre;
                d_gi[base + 2 * hd + j] = dn_pre;
                d_gh[base + j] = dr_pre;
                d_gh[base + hd + j] = dz_pre;
                d_gh[base + 2 * hd + j] = dn_pre * r;
            }
        }
        let three = 3 * hd;
        matmul(three, batch, self.input, &d_gi, true, &cache.x, false, &mut self.w_ih.grad, T::one());
        matmul(three, batch, hd, &d_gh, true, &cache.h, false, &mut self.w_hh.grad, T::one());
        for b in 0..batch {
            for j in 0..three {
                self.b_ih.grad[j] += d_gi[b * three + j];
                self.b_hh.grad[j] += d_gh[b * three + j];
            }
        }
        let mut dx = vec![T::zero(); batch * self.input];
        matmul(batch, three, self.input, &d_gi, false, &self.w_ih.value, false, &mut dx, T::zero());
        matmul(batch, three, hd, &d_gh, false, &self.w_hh.value, false, &mut dh, T::one());
        (dx, dh)
    }
}

impl<T: Real> Parameterized<T> for GruCell<T> {
    fn named_params(&self) -> Vec<(String, &Param<T>)> {
        vec![
            ("w_ih".into(), &self.w_ih),
            ("w_hh".into(), &self.w_hh),
            ("b_ih".into(), &self.b_ih),
            ("b_hh".into(), &self.b_hh),
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.w_ih, &mut self.w_hh, &mut self.b_ih, &mut self.b_hh]
    }
}

/// Stacked GRU layers advanced one time step at a time.
#[derive(Debug, Clone, PartialEq)]
pub struct GruStack<T> {
    pub layers: Vec<GruCell<T>>,
}

/// Per-step cache of a [`GruStack`].
#[derive(Debug, Clone)]
pub struct StackCache<T> {
    cells: Vec<GruCache<T>>,
    mask: Option<Vec<T>>,
}

impl<T: Real> GruStack<T> {
    pub fn new(input: usize, hidden: usize, layers: usize, rng: &mut impl Rng) -> Self {
        assert!(layers >= 1);
        let layers = (0..layers)
            .map(|l| GruCell::new(if l == 0 { input } else { hidden }, hidden, rng))
            .collect();
        Self { layers }
    }

    pub fn hidden(&self) -> usize {
        self.layers[0].hidden
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Advances every layer. `mask[b] = 0` freezes row `b` (padding); the
    /// returned states then equal the inputs for that row.
    pub fn step(&self, x: &[T], hs: &[Vec<T>], batch: usize, mask: Option<&[T]>) -> (Vec<Vec<T>>, StackCache<T>) {
        let mut new_hs: Vec<Vec<T>> = Vec::with_capacity(self.layers.len());
        let mut cells = Vec::with_capacity(self.layers.len());
        let hd = self.hidden();
        for (l, cell) in self.layers.iter().enumerate() {
            let input: &[T] = if l == 0 { x } else { &new_hs[l - 1] };
            let (mut h_new, cache) = cell.step(input, &hs[l], batch);
            if let Some(m) = mask {
                for b in 0..batch {
                    if m[b] == T::zero() {
                        h_new[b * hd..(b + 1) * hd].copy_from_slice(&hs[l][b * hd..(b + 1) * hd]);
                    }
                }
            }
            new_hs.push(h_new);
            cells.push(cache);
        }
        (
            new_hs,
            StackCache {
                cells,
                mask: mask.map(|m| m.to_vec()),
            },
        )
    }

    /// Backward through one step. `dh_new[l]` is the gradient w.r.t. layer
    /// `l`'s output state. Returns `(dL/dx, dL/dh_prev per layer)`.
    pub fn backward_step(&mut self, cache: &StackCache<T>, mut dh_new: Vec<Vec<T>>, batch: usize) -> (Vec<T>, Vec<Vec<T>>) {
        let hd = self.hidden();
        let nl = self.layers.len();
        let mut dh_prev = vec![Vec::new(); nl];
        let mut dx = Vec::new();
        for l in (0..nl).rev() {
            let mut g = std::mem::take(&mut dh_new[l]);
            let mut passthrough = vec![T::zero(); batch * hd];
            if let Some(m) = &cache.mask {
                for b in 0..batch {
                    if m[b] == T::zero() {
                        for j in 0..hd {
                            passthrough[b * hd + j] = g[b * hd + j];
                            g[b * hd + j] = T::zero();
                        }
                    }
                }
            }
            let (d_in, mut dh) = self.layers[l].backward_step(&cache.cells[l], &g, batch);
            for (a, p) in dh.iter_mut().zip(&passthrough) {
                *a += *p;
            }
            dh_prev[l] = dh;
            if l > 0 {
                for (a, d) in dh_new[l - 1].iter_mut().zip(&d_in) {
                    *a += *d;
                }
            } else {
                dx = d_in;
            }
        }
        (dx, dh_prev)
    }
}

impl<T: Real> Parameterized<T> for GruStack<T> {
    fn named_params(&self) -> Vec<(String, &Param<T>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(l, c)| {
                c.named_params()
                    .into_iter()
                    .map(move |(n, p)| (format!("layer{l}.{n}"), p))
            })
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.layers.iter_mut().flat_map(|c| c.params_mut()).collect()
    }
}
