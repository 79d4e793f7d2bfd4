//! Convolution, dense and activation layers with hand-written backward
//! passes. Parameters live in a caller-owned flat slice; each layer holds
//! only the ranges of its tensors.

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::params::ParamLayout;
use crate::tensor::Tensor3;

/// `c = beta * c + a · b` for row/column-strided matrices.
#[allow(clippy::too_many_arguments)]
#[inline]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(k == 0 || !a.is_empty());
    debug_assert!(!c.is_empty());
    // SAFETY: callers pass slices whose lengths cover the strided extents;
    // the debug asserts above catch the empty cases.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

fn he_normal(fan_in: usize, values: &mut [f64], rng: &mut impl Rng) {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    for v in values {
        *v = normal.sample(rng);
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Range<usize>,
    pub bias: Range<usize>,
}

#[derive(Clone, Debug)]
pub struct ConvCache {
    col: Vec<f64>,
    in_h: usize,
    in_w: usize,
}

impl Conv2d {
    pub fn new(layout: &mut ParamLayout, name: &str, in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize) -> Self {
        let weight = layout.register(format!("{name}.weight"), &[out_c, in_c, k, k]);
        let bias = layout.register(format!("{name}.bias"), &[out_c]);
        Self { in_c, out_c, k, stride, pad, weight, bias }
    }

    pub fn init(&self, params: &mut [f64], rng: &mut impl Rng) {
        he_normal(self.in_c * self.k * self.k, &mut params[self.weight.clone()], rng);
        params[self.bias.clone()].fill(0.0);
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        ((h + 2 * self.pad - self.k) / self.stride + 1, (w + 2 * self.pad - self.k) / self.stride + 1)
    }

    fn im2col(&self, x: &Tensor3, oh: usize, ow: usize) -> Vec<f64> {
        let k = self.k;
        let p = oh * ow;
        let mut col = vec![0.0; self.in_c * k * k * p];
        for ci in 0..self.in_c {
            let plane = x.plane(ci);
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut col[((ci * k + ky) * k + kx) * p..][..p];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * x.w..][..x.w];
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < x.w as isize {
                                row[oy * ow + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, col: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Tensor3 {
        let k = self.k;
        let p = oh * ow;
        let mut dx = Tensor3::zeros(self.in_c, h, w);
        for ci in 0..self.in_c {
            let plane = dx.plane_mut(ci);
            for ky in 0..k {
                for kx in 0..k {
                    let row = &col[((ci * k + ky) * k + kx) * p..][..p];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                plane[iy as usize * w + ix as usize] += row[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, params: &[f64], x: &Tensor3) -> (Tensor3, ConvCache) {
        assert_eq!(x.c, self.in_c, "conv input channels");
        let (oh, ow) = self.out_hw(x.h, x.w);
        let col = self.im2col(x, oh, ow);
        let kk = self.in_c * self.k * self.k;
        let p = oh * ow;
        let mut out = Tensor3::zeros(self.out_c, oh, ow);
        let bias = &params[self.bias.clone()];
        for (o, b) in bias.iter().enumerate() {
            out.plane_mut(o).fill(*b);
        }
        let w = &params[self.weight.clone()];
        gemm(self.out_c, kk, p, w, kk as isize, 1, &col, p as isize, 1, 1.0, &mut out.data, p as isize, 1);
        (out, ConvCache { col, in_h: x.h, in_w: x.w })
    }

    /// Accumulates parameter gradients into `grads`; returns the input
    /// gradient when `need_input_grad`.
    pub fn backward(
        &self,
        params: &[f64],
        cache: &ConvCache,
        dy: &Tensor3,
        grads: &mut [f64],
        need_input_grad: bool,
    ) -> Option<Tensor3> {
        let kk = self.in_c * self.k * self.k;
        let p = dy.h * dy.w;
        {
            let gw = &mut grads[self.weight.clone()];
            gemm(self.out_c, p, kk, &dy.data, p as isize, 1, &cache.col, 1, p as isize, 1.0, gw, kk as isize, 1);
        }
        {
            let gb = &mut grads[self.bias.clone()];
            for (o, g) in gb.iter_mut().enumerate() {
                *g += dy.plane(o).iter().sum::<f64>();
            }
        }
        if !need_input_grad {
            return None;
        }
        let w = &params[self.weight.clone()];
        let mut dcol = vec![0.0; kk * p];
        gemm(kk, self.out_c, p, w, 1, kk as isize, &dy.data, p as isize, 1, 0.0, &mut dcol, p as isize, 1);
        Some(self.col2im(&dcol, cache.in_h, cache.in_w, dy.h, dy.w))
    }
}

/// Dense layer over a batch of row vectors, weight stored `[out, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub input: usize,
    pub output: usize,
    pub weight: Range<usize>,
    pub bias: Range<usize>,
}

impl Linear {
    pub fn new(layout: &mut ParamLayout, name: &str, input: usize, output: usize) -> Self {
        let weight = layout.register(format!("{name}.weight"), &[output, input]);
        let bias = layout.register(format!("{name}.bias"), &[output]);
        Self { input, output, weight, bias }
    }

    pub fn init(&self, params: &mut [f64], rng: &mut impl Rng) {
        he_normal(self.input, &mut params[self.weight.clone()], rng);
        params[self.bias.clone()].fill(0.0);
    }

    pub fn init_normal(&self, params: &mut [f64], std: f64, rng: &mut impl Rng) {
        let normal = Normal::new(0.0, std).expect("finite std");
        for v in &mut params[self.weight.clone()] {
            *v = normal.sample(rng);
        }
        params[self.bias.clone()].fill(0.0);
    }

    /// `x` is `n × input` row-major; returns `n × output`.
    pub fn forward(&self, params: &[f64], x: &[f64], n: usize) -> Vec<f64> {
        debug_assert_eq!(x.len(), n * self.input);
        let b = &params[self.bias.clone()];
        let mut y = Vec::with_capacity(n * self.output);
        for _ in 0..n {
            y.extend_from_slice(b);
        }
        let w = &params[self.weight.clone()];
        gemm(n, self.input, self.output, x, self.input as isize, 1, w, 1, self.input as isize, 1.0, &mut y, self.output as isize, 1);
        y
    }

    pub fn backward(&self, params: &[f64], x: &[f64], dy: &[f64], n: usize, grads: &mut [f64], need_input_grad: bool) -> Option<Vec<f64>> {
        {
            let gw = &mut grads[self.weight.clone()];
            gemm(self.output, n, self.input, dy, 1, self.output as isize, x, self.input as isize, 1, 1.0, gw, self.input as isize, 1);
        }
        {
            let gb = &mut grads[self.bias.clone()];
            for row in dy.chunks_exact(self.output) {
                for (g, d) in gb.iter_mut().zip(row) {
                    *g += d;
                }
            }
        }
        if !need_input_grad {
            return None;
        }
        let w = &params[self.weight.clone()];
        let mut dx = vec![0.0; n * self.input];
        gemm(n, self.output, self.input, dy, self.output as isize, 1, w, self.input as isize, 1, 0.0, &mut dx, self.input as isize, 1);
        Some(dx)
    }
}

pub fn relu_inplace(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Backward of ReLU given its output.
pub fn relu_backward(y: &[f64], dy: &mut [f64]) {
    for (d, v) in dy.iter_mut().zip(y) {
        if *v <= 0.0 {
            *d = 0.0;
        }
    }
}
