use rand::Rng;

use super::{from_channel_major, matmul, to_channel_major, Param, Parameterized, Real};

/// Square-kernel convolution geometry shared by both conv layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    k: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    /// Output side length of a forward convolution over `h`.
    fn conv_out(&self, h: usize) -> usize {
        (h + 2 * self.pad - self.k) / self.stride + 1
    }

    /// Unrolls `[batch, c, h, w]` into `[c·k·k, batch·ho·wo]`.
    #[allow(clippy::too_many_arguments)]
    fn im2col<T: Real>(&self, x: &[T], batch: usize, c: usize, h: usize, w: usize, ho: usize, wo: usize) -> Vec<T> {
        let Geometry { k, stride, pad } = *self;
        let cols = batch * ho * wo;
        let mut out = vec![T::zero(); c * k * k * cols];
        for ch in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ch * k + ki) * k + kj;
                    let dst = &mut out[row * cols..(row + 1) * cols];
                    for b in 0..batch {
                        let img = &x[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                        for oy in 0..ho {
                            let iy = (oy * stride + ki) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src = &img[iy as usize * w..(iy as usize + 1) * w];
                            let base = (b * ho + oy) * wo;
                            for ox in 0..wo {
                                let ix = (ox * stride + kj) as isize - pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    dst[base + ox] = src[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Adjoint of [`Geometry::im2col`]: scatters columns back into an image.
    #[allow(clippy::too_many_arguments)]
    fn col2im<T: Real>(&self, col: &[T], batch: usize, c: usize, h: usize, w: usize, ho: usize, wo: usize) -> Vec<T> {
        let Geometry { k, stride, pad } = *self;
        let cols = batch * ho * wo;
        let mut out = vec![T::zero(); batch * c * h * w];
        for ch in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ch * k + ki) * k + kj;
                    let src = &col[row * cols..(row + 1) * cols];
                    for b in 0..batch {
                        let img = &mut out[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                        for oy in 0..ho {
                            let iy = (oy * stride + ki) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let dst = &mut img[iy as usize * w..(iy as usize + 1) * w];
                            let base = (b * ho + oy) * wo;
                            for ox in 0..wo {
                                let ix = (ox * stride + kj) as isize - pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    dst[ix as usize] += src[base + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

fn add_bias<T: Real>(y: &mut [T], bias: &[T], batch: usize, hw: usize) {
    let c = bias.len();
    for b in 0..batch {
        for (ch, &bv) in bias.iter().enumerate() {
            y[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter_mut().for_each(|v| *v += bv);
        }
    }
}

fn bias_grad<T: Real>(grad: &mut [T], dy: &[T], batch: usize, hw: usize) {
    let c = grad.len();
    for b in 0..batch {
        for (ch, g) in grad.iter_mut().enumerate() {
            *g += dy[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().copied().sum::<T>();
        }
    }
}

/// 2-D convolution over `[batch, c_in, h, w]` inputs. Weight layout is
/// `[c_out, c_in·k·k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub c_in: usize,
    pub c_out: usize,
    geom: Geometry,
}

impl<T: Real> Conv2d<T> {
    pub fn new(c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
        Self {
            weight: Param::uniform(&[c_out, c_in * k * k], bound, rng),
            bias: Param::uniform(&[c_out], bound, rng),
            c_in,
            c_out,
            geom: Geometry { k, stride, pad },
        }
    }

    pub fn out_size(&self, h: usize) -> usize {
        self.geom.conv_out(h)
    }

    pub fn forward(&self, x: &[T], batch: usize, h: usize, w: usize) -> Vec<T> {
        let (ho, wo) = (self.out_size(h), self.out_size(w));
        let col = self.geom.im2col(x, batch, self.c_in, h, w, ho, wo);
        let ckk = self.c_in * self.geom.k * self.geom.k;
        let cols = batch * ho * wo;
        let mut y = vec![T::zero(); self.c_out * cols];
        matmul(self.c_out, ckk, cols, &self.weight.value, false, &col, false, &mut y, T::zero());
        let mut y = from_channel_major(&y, batch, self.c_out, ho * wo);
        add_bias(&mut y, &self.bias.value, batch, ho * wo);
        y
    }

    /// Accumulates parameter gradients; returns `dL/dx` when `need_dx`.
    pub fn backward(&mut self, x: &[T], batch: usize, h: usize, w: usize, dy: &[T], need_dx: bool) -> Option<Vec<T>> {
        let (ho, wo) = (self.out_size(h), self.out_size(w));
        let ckk = self.c_in * self.geom.k * self.geom.k;
        let cols = batch * ho * wo;
        bias_grad(&mut self.bias.grad, dy, batch, ho * wo);
        let dy_cm = to_channel_major(dy, batch, self.c_out, ho * wo);
        let col = self.geom.im2col(x, batch, self.c_in, h, w, ho, wo);
        matmul(self.c_out, cols, ckk, &dy_cm, false, &col, true, &mut self.weight.grad, T::one());
        drop(col);
        if !need_dx {
            return None;
        }
        let mut dcol = vec![T::zero(); ckk * cols];
        matmul(ckk, self.c_out, cols, &self.weight.value, true, &dy_cm, false, &mut dcol, T::zero());
        Some(self.geom.col2im(&dcol, batch, self.c_in, h, w, ho, wo))
    }
}

impl<T: Real> Parameterized<T> for Conv2d<T> {
    fn named_params(&self) -> Vec<(String, &Param<T>)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Transposed convolution (the adjoint of [`Conv2d`]'s linear map plus bias).
/// Weight layout is `[c_in, c_out·k·k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTranspose2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub c_in: usize,
    pub c_out: usize,
    pub output_padding: usize,
    geom: Geometry,
}

impl<T: Real> ConvTranspose2d<T> {
    pub fn new(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        output_padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(output_padding < stride, "output padding must be below the stride");
        let bound = 1.0 / ((c_out * k * k) as f64).sqrt();
        Self {
            weight: Param::uniform(&[c_in, c_out * k * k], bound, rng),
            bias: Param::uniform(&[c_out], bound, rng),
            c_in,
            c_out,
            output_padding,
            geom: Geometry { k, stride, pad },
        }
    }

    pub fn out_size(&self, h: usize) -> usize {
        let g = self.geom;
        (h - 1) * g.stride + g.k + self.output_padding - 2 * g.pad
    }

    pub fn forward(&self, x: &[T], batch: usize, h: usize, w: usize) -> Vec<T> {
        let (ho, wo) = (self.out_size(h), self.out_size(w));
        let kk = self.geom.k * self.geom.k;
        let cols = batch * h * w;
        let x_cm = to_channel_major(x, batch, self.c_in, h * w);
        let mut col = vec![T::zero(); self.c_out * kk * cols];
        matmul(self.c_out * kk, self.c_in, cols, &self.weight.value, true, &x_cm, false, &mut col, T::zero());
        let mut y = self.geom.col2im(&col, batch, self.c_out, ho, wo, h, w);
        add_bias(&mut y, &self.bias.value, batch, ho * wo);
        y
    }

    pub fn backward(&mut self, x: &[T], batch: usize, h: usize, w: usize, dy: &[T], need_dx: bool) -> Option<Vec<T>> {
        let (ho, wo) = (self.out_size(h), self.out_size(w));
        let kk = self.geom.k * self.geom.k;
        let cols = batch * h * w;
        bias_grad(&mut self.bias.grad, dy, batch, ho * wo);
        let dcol = self.geom.im2col(dy, batch, self.c_out, ho, wo, h, w);
        let x_cm = to_channel_major(x, batch, self.c_in, h * w);
        matmul(self.c_in, cols, self.c_out * kk, &x_cm, false, &dcol, true, &mut self.weight.grad, T::one());
        if !need_dx {
            return None;
        }
        let mut dx_cm = vec![T::zero(); self.c_in * cols];
        matmul(self.c_in, self.c_out * kk, cols, &self.weight.value, false, &dcol, false, &mut dx_cm, T::zero());
        Some(from_channel_major(&dx_cm, batch, self.c_in, h * w))
    }
}

impl<T: Real> Parameterized<T> for ConvTranspose2d<T> {
    fn named_params(&self) -> Vec<(String, &Param<T>)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}
