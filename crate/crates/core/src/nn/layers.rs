//! Layer kernels over flat channel-first buffers (`[batch, channels, len]`).
//!
//! Per-sample work runs in parallel; every cross-sample reduction is a
//! sequential loop in sample order, so results do not depend on the number
//! of worker threads. Weight-gradient reductions accumulate in `f64`.

use rand::Rng;
use rayon::prelude::*;

use super::tensor::{Real, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.99;

fn he_uniform<T: Real, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let limit = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::lit(rng.gen_range(-limit..limit)))
        .collect();
    Tensor::from_vec(shape, data).expect("shape product")
}

/// `y[o, t] = b[o] + sum_{c, j} w[o, c, j] * x[c, t + j - k/2]`, zero padded.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv1d<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Conv1d<T> {
    pub fn new<R: Rng>(in_ch: usize, out_ch: usize, kernel: usize, rng: &mut R) -> Self {
        Conv1d {
            weight: he_uniform(&[out_ch, in_ch, kernel], in_ch * kernel, rng),
            bias: Tensor::zeros(&[out_ch]),
        }
    }

    pub fn out_ch(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_ch(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    /// Valid output positions `t` for tap offset `s`: `0 <= t + s < len`.
    #[inline]
    fn span(s: isize, len: usize) -> (usize, usize) {
        let lo = (-s).max(0) as usize;
        let hi = (len as isize - s).min(len as isize).max(0) as usize;
        (lo, hi)
    }

    pub fn forward(&self, x: &[T], n: usize, len: usize) -> Vec<T> {
        let (ic, oc, k) = (self.in_ch(), self.out_ch(), self.kernel());
        debug_assert_eq!(x.len(), n * ic * len);
        let pad = (k / 2) as isize;
        let w = self.weight.data();
        let b = self.bias.data();
        let mut y = vec![T::zero(); n * oc * len];
        y.par_chunks_mut(oc * len)
            .zip(x.par_chunks(ic * len))
            .for_each(|(ys, xs)| {
                for o in 0..oc {
                    let yo = &mut ys[o * len..(o + 1) * len];
                    yo.iter_mut().for_each(|v| *v = b[o]);
                    for c in 0..ic {
                        let xc = &xs[c * len..(c + 1) * len];
                        for j in 0..k {
                            let wv = w[(o * ic + c) * k + j];
                            let s = j as isize - pad;
                            let (lo, hi) = Self::span(s, len);
                            for t in lo..hi {
                                yo[t] += wv * xc[(t as isize + s) as usize];
                            }
                        }
                    }
                }
            });
        y
    }

    /// Returns `dx`; adds parameter gradients into `gw`, `gb`.
    pub fn backward(
        &self,
        x: &[T],
        dy: &[T],
        n: usize,
        len: usize,
        gw: &mut Tensor<T>,
        gb: &mut Tensor<T>,
    ) -> Vec<T> {
        let (ic, oc, k) = (self.in_ch(), self.out_ch(), self.kernel());
        let pad = (k / 2) as isize;
        let w = self.weight.data();

        gw.data_mut()
            .par_chunks_mut(ic * k)
            .zip(gb.data_mut().par_iter_mut())
            .enumerate()
            .for_each(|(o, (gwo, gbo))| {
                let mut accb = 0.0f64;
                let mut accw = vec![0.0f64; ic * k];
                for s_idx in 0..n {
                    let dyo = &dy[(s_idx * oc + o) * len..(s_idx * oc + o + 1) * len];
                    for &g in dyo {
                        accb += g.f64();
                    }
                    for c in 0..ic {
                        let xc = &x[(s_idx * ic + c) * len..(s_idx * ic + c + 1) * len];
                        for j in 0..k {
                            let s = j as isize - pad;
                            let (lo, hi) = Self::span(s, len);
                            let mut acc = T::zero();
                            for t in lo..hi {
                                acc += dyo[t] * xc[(t as isize + s) as usize];
                            }
                            accw[c * k + j] += acc.f64();
                        }
                    }
                }
                *gbo += T::lit(accb);
                for (g, a) in gwo.iter_mut().zip(accw) {
                    *g += T::lit(a);
                }
            });

        let mut dx = vec![T::zero(); n * ic * len];
        dx.par_chunks_mut(ic * len)
            .zip(dy.par_chunks(oc * len))
            .for_each(|(dxs, dys)| {
                for o in 0..oc {
                    let dyo = &dys[o * len..(o + 1) * len];
                    for c in 0..ic {
                        let dxc = &mut dxs[c * len..(c + 1) * len];
                        for j in 0..k {
                            let wv = w[(o * ic + c) * k + j];
                            let s = j as isize - pad;
                            let (lo, hi) = Self::span(s, len);
                            for t in lo..hi {
                                dxc[(t as isize + s) as usize] += wv * dyo[t];
                            }
                        }
                    }
                }
            });
        dx
    }
}

/// Fully connected layer, `weight` is `[out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Dense<T> {
    pub fn new<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        Dense {
            weight: he_uniform(&[output, input], input, rng),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn input(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn output(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &[T], n: usize) -> Vec<T> {
        let (ni, no) = (self.input(), self.output());
        debug_assert_eq!(x.len(), n * ni);
        let w = self.weight.data();
        let b = self.bias.data();
        let mut y = vec![T::zero(); n * no];
        y.par_chunks_mut(no)
            .zip(x.par_chunks(ni))
            .for_each(|(ys, xs)| {
                for (o, yo) in ys.iter_mut().enumerate() {
                    let row = &w[o * ni..(o + 1) * ni];
                    let mut acc = b[o];
                    for (wv, xv) in row.iter().zip(xs) {
                        acc += *wv * *xv;
                    }
                    *yo = acc;
                }
            });
        y
    }

    pub fn backward(
        &self,
        x: &[T],
        dy: &[T],
        n: usize,
        gw: &mut Tensor<T>,
        gb: &mut Tensor<T>,
    ) -> Vec<T> {
        let (ni, no) = (self.input(), self.output());
        let w = self.weight.data();
        gw.data_mut()
            .par_chunks_mut(ni)
            .zip(gb.data_mut().par_iter_mut())
            .enumerate()
            .for_each(|(o, (gwo, gbo))| {
                let mut accb = 0.0f64;
                let mut accw = vec![0.0f64; ni];
                for s in 0..n {
                    let g = dy[s * no + o];
                    accb += g.f64();
                    for (a, xv) in accw.iter_mut().zip(&x[s * ni..(s + 1) * ni]) {
                        *a += (g * *xv).f64();
                    }
                }
                *gbo += T::lit(accb);
                for (gv, a) in gwo.iter_mut().zip(accw) {
                    *gv += T::lit(a);
                }
            });
        let mut dx = vec![T::zero(); n * ni];
        dx.par_chunks_mut(ni)
            .zip(dy.par_chunks(no))
            .for_each(|(dxs, dys)| {
                for (o, &g) in dys.iter().enumerate() {
                    for (d, wv) in dxs.iter_mut().zip(&w[o * ni..(o + 1) * ni]) {
                        *d += g * *wv;
                    }
                }
            });
        dx
    }
}

/// Per-channel batch normalization over `[batch, channels, len]`
/// (`len == 1` for dense activations).
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

/// Saved forward state needed by the backward pass.
#[derive(Clone, Debug)]
pub struct BnCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<f64>,
    /// Bessel-corrected batch variance, used for the running estimate.
    pub batch_var_unbiased: Vec<f64>,
    pub train: bool,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Tensor::filled(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::filled(&[channels], T::one()),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&self, x: &[T], n: usize, len: usize, train: bool) -> (Vec<T>, BnCache<T>) {
        let ch = self.channels();
        let m = n * len;
        let mut mean = vec![0.0f64; ch];
        let mut var_unbiased = vec![0.0f64; ch];
        let mut inv_std = vec![T::zero(); ch];
        let eps = BN_EPS;
        for c in 0..ch {
            if train {
                let mut sum = 0.0f64;
                for s in 0..n {
                    for v in &x[(s * ch + c) * len..(s * ch + c + 1) * len] {
                        sum += v.f64();
                    }
                }
                let mu = sum / m as f64;
                let mut sq = 0.0f64;
                for s in 0..n {
                    for v in &x[(s * ch + c) * len..(s * ch + c + 1) * len] {
                        let d = v.f64() - mu;
                        sq += d * d;
                    }
                }
                let var = sq / m as f64;
                mean[c] = mu;
                var_unbiased[c] = if m > 1 { sq / (m - 1) as f64 } else { var };
                inv_std[c] = T::lit(1.0 / (var + eps).sqrt());
            } else {
                mean[c] = self.running_mean.data()[c].f64();
                inv_std[c] = T::lit(1.0 / (self.running_var.data()[c].f64() + eps).sqrt());
            }
        }
        let g = self.gamma.data();
        let b = self.beta.data();
        let mut xhat = vec![T::zero(); x.len()];
        let mut y = vec![T::zero(); x.len()];
        for s in 0..n {
            for c in 0..ch {
                let mu = T::lit(mean[c]);
                let base = (s * ch + c) * len;
                for t in base..base + len {
                    let h = (x[t] - mu) * inv_std[c];
                    xhat[t] = h;
                    y[t] = g[c] * h + b[c];
                }
            }
        }
        (
            y,
            BnCache {
                xhat,
                inv_std,
                batch_mean: mean,
                batch_var_unbiased: var_unbiased,
                train,
            },
        )
    }

    pub fn backward(
        &self,
        cache: &BnCache<T>,
        dy: &[T],
        n: usize,
        len: usize,
        g_gamma: &mut Tensor<T>,
        g_beta: &mut Tensor<T>,
    ) -> Vec<T> {
        let ch = self.channels();
        let m = (n * len) as f64;
        let gamma = self.gamma.data();
        let mut dx = vec![T::zero(); dy.len()];
        for c in 0..ch {
            let mut sum_dy = 0.0f64;
            let mut sum_dy_xhat = 0.0f64;
            for s in 0..n {
                let base = (s * ch + c) * len;
                for t in base..base + len {
                    sum_dy += dy[t].f64();
                    sum_dy_xhat += (dy[t] * cache.xhat[t]).f64();
                }
            }
            g_gamma.data_mut()[c] += T::lit(sum_dy_xhat);
            g_beta.data_mut()[c] += T::lit(sum_dy);
            let scale = gamma[c] * cache.inv_std[c];
            if cache.train {
                // Evaluated in f64: the three terms nearly cancel.
                let k = scale.f64() / m;
                for s in 0..n {
                    let base = (s * ch + c) * len;
                    for t in base..base + len {
                        dx[t] = T::lit(
                            k * (m * dy[t].f64() - sum_dy - cache.xhat[t].f64() * sum_dy_xhat),
                        );
                    }
                }
            } else {
                for s in 0..n {
                    let base = (s * ch + c) * len;
                    for t in base..base + len {
                        dx[t] = scale * dy[t];
                    }
                }
            }
        }
        dx
    }

    /// Exponential moving average of batch statistics.
    pub fn update_running(&mut self, cache: &BnCache<T>) {
        let mom = BN_MOMENTUM;
        for c in 0..self.channels() {
            let rm = &mut self.running_mean.data_mut()[c];
            *rm = T::lit(mom * rm.f64() + (1.0 - mom) * cache.batch_mean[c]);
            let rv = &mut self.running_var.data_mut()[c];
            *rv = T::lit(mom * rv.f64() + (1.0 - mom) * cache.batch_var_unbiased[c]);
        }
    }
}

pub fn relu_inplace<T: Real>(x: &mut [T]) {
    for v in x.iter_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Masks `dy` where the ReLU output was zero.
pub fn relu_backward_inplace<T: Real>(out: &[T], dy: &mut [T]) {
    for (d, &o) in dy.iter_mut().zip(out) {
        if o <= T::zero() {
            *d = T::zero();
        }
    }
}

pub fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}
