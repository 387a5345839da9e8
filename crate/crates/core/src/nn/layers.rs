use rand::Rng;

use super::gemm::{sgemm, View};
use super::{join, Module, Param, Tensor};

/// Upper bound on im2col scratch size (floats) per strip.
const STRIP_BUDGET: usize = 1 << 22;

fn rows_per_strip(k_rows: usize, h: usize, w: usize) -> usize {
    (STRIP_BUDGET / (k_rows * w).max(1)).clamp(1, h)
}

/// Unfolds output rows `[r0, r1)` of a zero-padded `k×k` convolution.
fn im2col_strip(x: &[f32], ci: usize, h: usize, w: usize, k: usize, r0: usize, r1: usize, col: &mut [f32]) {
    let pad = (k / 2) as isize;
    let s = (r1 - r0) * w;
    for c in 0..ci {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * s;
                let dx = kx as isize - pad;
                for y in r0..r1 {
                    let dst = &mut col[row + (y - r0) * w..row + (y - r0 + 1) * w];
                    let iy = y as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    copy_shifted(src, dst, dx);
                }
            }
        }
    }
}

// dst[x] = src[x + dx] with zeros outside.
#[inline]
fn copy_shifted(src: &[f32], dst: &mut [f32], dx: isize) {
    let w = src.len();
    let adx = dx.unsigned_abs().min(w);
    if dx >= 0 {
        dst[..w - adx].copy_from_slice(&src[adx..]);
        dst[w - adx..].fill(0.0);
    } else {
        dst[adx..].copy_from_slice(&src[..w - adx]);
        dst[..adx].fill(0.0);
    }
}

// src[x + dx] += dst[x]
#[inline]
fn add_shifted(dst: &[f32], src: &mut [f32], dx: isize) {
    let w = src.len();
    let adx = dx.unsigned_abs().min(w);
    if dx >= 0 {
        for (s, d) in src[adx..].iter_mut().zip(&dst[..w - adx]) {
            *s += d;
        }
    } else {
        for (s, d) in src[..w - adx].iter_mut().zip(&dst[adx..]) {
            *s += d;
        }
    }
}

fn col2im_strip(col: &[f32], ci: usize, h: usize, w: usize, k: usize, r0: usize, r1: usize, dx_img: &mut [f32]) {
    let pad = (k / 2) as isize;
    let s = (r1 - r0) * w;
    for c in 0..ci {
        let plane = &mut dx_img[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * s;
                let dx = kx as isize - pad;
                for y in r0..r1 {
                    let iy = y as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &col[row + (y - r0) * w..row + (y - r0 + 1) * w];
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    add_shifted(src, dst, dx);
                }
            }
        }
    }
}

/// Stride-1 "same" convolution with an odd square kernel.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    /// `[out_ch, in_ch * k * k]`
    pub weight: Param,
    pub bias: Param,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(in_ch: usize, out_ch: usize, k: usize, rng: &mut R) -> Self {
        assert!(k % 2 == 1, "kernel must be odd");
        let fan_in = in_ch * k * k;
        Conv2d {
            in_ch,
            out_ch,
            k,
            weight: Param::he_normal(&[out_ch, in_ch, k, k], fan_in, rng),
            bias: Param::zeros(&[out_ch]),
        }
    }

    fn kk(&self) -> usize {
        self.in_ch * self.k * self.k
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.c(), self.in_ch, "conv input channels");
        let (n, h, w) = (x.n(), x.h(), x.w());
        let hw = h * w;
        let kk = self.kk();
        let mut out = Tensor::zeros([n, self.out_ch, h, w]);
        let wv = View::row_major(&self.weight.value, kk);
        let strip = rows_per_strip(kk, h, w);
        let mut col = if self.k == 1 { Vec::new() } else { vec![0.0; kk * strip * w] };
        for i in 0..n {
            let xi = x.sample(i);
            let oi = out.sample_mut(i);
            if self.k == 1 {
                sgemm(self.out_ch, kk, hw, 1.0, wv, View::row_major(xi, hw), 0.0, oi, hw);
            } else {
                let mut r0 = 0;
                while r0 < h {
                    let r1 = (r0 + strip).min(h);
                    let s = (r1 - r0) * w;
                    im2col_strip(xi, self.in_ch, h, w, self.k, r0, r1, &mut col);
                    sgemm(self.out_ch, kk, s, 1.0, wv, View::row_major(&col[..kk * s], s), 0.0, &mut oi[r0 * w..], hw);
                    r0 = r1;
                }
            }
            for (co, b) in self.bias.value.iter().enumerate() {
                oi[co * hw..(co + 1) * hw].iter_mut().for_each(|v| *v += b);
            }
        }
        out
    }

    /// Accumulates weight/bias gradients; returns `dL/dx` when requested.
    pub fn backward(&mut self, x: &Tensor, dy: &Tensor, need_dx: bool) -> Option<Tensor> {
        let (n, h, w) = (x.n(), x.h(), x.w());
        let hw = h * w;
        let kk = self.kk();
        let mut dx = need_dx.then(|| Tensor::zeros(x.shape));
        let strip = rows_per_strip(kk, h, w);
        let mut col = if self.k == 1 { Vec::new() } else { vec![0.0; kk * strip * w] };
        let mut dcol = if self.k == 1 || !need_dx { Vec::new() } else { vec![0.0; kk * strip * w] };
        for i in 0..n {
            let xi = x.sample(i);
            let dyi = dy.sample(i);
            for co in 0..self.out_ch {
                self.bias.grad[co] += dyi[co * hw..(co + 1) * hw].iter().sum::<f32>();
            }
            if self.k == 1 {
                sgemm(
                    self.out_ch,
                    hw,
                    kk,
                    1.0,
                    View::row_major(dyi, hw),
                    View::transposed(xi, hw),
                    1.0,
                    &mut self.weight.grad,
                    kk,
                );
                if let Some(dx) = dx.as_mut() {
                    sgemm(
                        kk,
                        self.out_ch,
                        hw,
                        1.0,
                        View::transposed(&self.weight.value, kk),
                        View::row_major(dyi, hw),
                        0.0,
                        dx.sample_mut(i),
                        hw,
                    );
                }
                continue;
            }
            let mut r0 = 0;
            while r0 < h {
                let r1 = (r0 + strip).min(h);
                let s = (r1 - r0) * w;
                im2col_strip(xi, self.in_ch, h, w, self.k, r0, r1, &mut col);
                let dy_view = View {
                    data: &dyi[r0 * w..],
                    rs: hw,
                    cs: 1,
                };
                sgemm(
                    self.out_ch,
                    s,
                    kk,
                    1.0,
                    dy_view,
                    View::transposed(&col[..kk * s], s),
                    1.0,
                    &mut self.weight.grad,
                    kk,
                );
                if let Some(dx) = dx.as_mut() {
                    sgemm(
                        kk,
                        self.out_ch,
                        s,
                        1.0,
                        View::transposed(&self.weight.value, kk),
                        dy_view,
                        0.0,
                        &mut dcol[..kk * s],
                        s,
                    );
                    col2im_strip(&dcol, self.in_ch, h, w, self.k, r0, r1, dx.sample_mut(i));
                }
                r0 = r1;
            }
        }
        dx
    }
}

impl Module for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// 2×2, stride-2 transposed convolution (exact ×2 upsampling).
#[derive(Debug, Clone)]
pub struct ConvTranspose2x2 {
    pub in_ch: usize,
    pub out_ch: usize,
    /// `[in_ch, out_ch * 4]`, column index `co * 4 + dy * 2 + dx`.
    pub weight: Param,
    pub bias: Param,
}

impl ConvTranspose2x2 {
    pub fn new<R: Rng + ?Sized>(in_ch: usize, out_ch: usize, rng: &mut R) -> Self {
        ConvTranspose2x2 {
            in_ch,
            out_ch,
            weight: Param::he_normal(&[in_ch, out_ch, 2, 2], in_ch, rng),
            bias: Param::zeros(&[out_ch]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.c(), self.in_ch);
        let (n, h, w) = (x.n(), x.h(), x.w());
        let hw = h * w;
        let co4 = self.out_ch * 4;
        let mut tmp = vec![0.0; co4 * hw];
        let mut out = Tensor::zeros([n, self.out_ch, 2 * h, 2 * w]);
        for i in 0..n {
            sgemm(
                co4,
                self.in_ch,
                hw,
                1.0,
                View::transposed(&self.weight.value, co4),
                View::row_major(x.sample(i), hw),
                0.0,
                &mut tmp,
                hw,
            );
            let oi = out.sample_mut(i);
            for co in 0..self.out_ch {
                let b = self.bias.value[co];
                let plane = &mut oi[co * 4 * hw..(co + 1) * 4 * hw];
                for d in 0..4 {
                    let (ddy, ddx) = (d / 2, d % 2);
                    let src = &tmp[(co * 4 + d) * hw..(co * 4 + d + 1) * hw];
                    for y in 0..h {
                        let orow = (2 * y + ddy) * 2 * w;
                        for xx in 0..w {
                            plane[orow + 2 * xx + ddx] = src[y * w + xx] + b;
                        }
                    }
                }
            }
        }
        out
    }

    pub fn backward(&mut self, x: &Tensor, dy: &Tensor) -> Tensor {
        let (n, h, w) = (x.n(), x.h(), x.w());
        let hw = h * w;
        let co4 = self.out_ch * 4;
        let mut dtmp = vec![0.0; co4 * hw];
        let mut dx = Tensor::zeros(x.shape);
        for i in 0..n {
            let dyi = dy.sample(i);
            for co in 0..self.out_ch {
                let plane = &dyi[co * 4 * hw..(co + 1) * 4 * hw];
                self.bias.grad[co] += plane.iter().sum::<f32>();
                for d in 0..4 {
                    let (ddy, ddx) = (d / 2, d % 2);
                    let dst = &mut dtmp[(co * 4 + d) * hw..(co * 4 + d + 1) * hw];
                    for y in 0..h {
                        let orow = (2 * y + ddy) * 2 * w;
                        for xx in 0..w {
                            dst[y * w + xx] = plane[orow + 2 * xx + ddx];
                        }
                    }
                }
            }
            sgemm(
                self.in_ch,
                hw,
                co4,
                1.0,
                View::row_major(x.sample(i), hw),
                View::transposed(&dtmp, hw),
                1.0,
                &mut self.weight.grad,
                co4,
            );
            sgemm(
                self.in_ch,
                co4,
                hw,
                1.0,
                View::row_major(&self.weight.value, co4),
                View::row_major(&dtmp, hw),
                0.0,
                dx.sample_mut(i),
                hw,
            );
        }
        dx
    }
}

impl Module for ConvTranspose2x2 {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
}

#[derive(Debug, Clone)]
pub struct BnCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f32>,
}

impl BatchNorm2d {
    pub fn new(ch: usize) -> Self {
        BatchNorm2d {
            gamma: Param::filled(&[ch], 1.0),
            beta: Param::zeros(&[ch]),
            running_mean: Param::buffer(&[ch], 0.0),
            running_var: Param::buffer(&[ch], 1.0),
        }
    }

    fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Normalizes with running statistics, in place.
    pub fn forward_eval(&self, x: &mut Tensor) {
        let hw = x.h() * x.w();
        for i in 0..x.n() {
            let xi = x.sample_mut(i);
            for c in 0..self.channels() {
                let inv = 1.0 / (self.running_var.value[c] + BN_EPS).sqrt();
                let scale = self.gamma.value[c] * inv;
                let shift = self.beta.value[c] - self.running_mean.value[c] * scale;
                xi[c * hw..(c + 1) * hw].iter_mut().for_each(|v| *v = *v * scale + shift);
            }
        }
    }

    /// Normalizes with batch statistics in place and updates running stats.
    pub fn forward_train(&mut self, x: &mut Tensor) -> BnCache {
        let (n, ch, hw) = (x.n(), x.c(), x.h() * x.w());
        let m = (n * hw) as f64;
        let mut inv_std = vec![0.0; ch];
        let mut xhat = Tensor::zeros(x.shape);
        for c in 0..ch {
            let mut sum = 0.0f64;
            let mut sq = 0.0f64;
            for i in 0..n {
                for &v in &x.sample(i)[c * hw..(c + 1) * hw] {
                    sum += v as f64;
                    sq += (v as f64) * (v as f64);
                }
            }
            let mean = sum / m;
            let var = (sq / m - mean * mean).max(0.0);
            let inv = 1.0 / (var + BN_EPS as f64).sqrt();
            inv_std[c] = inv as f32;
            let unbiased = if m > 1.0 { var * m / (m - 1.0) } else { var };
            self.running_mean.value[c] = (1.0 - BN_MOMENTUM) * self.running_mean.value[c] + BN_MOMENTUM * mean as f32;
            self.running_var.value[c] = (1.0 - BN_MOMENTUM) * self.running_var.value[c] + BN_MOMENTUM * unbiased as f32;
            let (g, b) = (self.gamma.value[c], self.beta.value[c]);
            let (mean, inv) = (mean as f32, inv as f32);
            for i in 0..n {
                let off = i * ch * hw + c * hw;
                for j in off..off + hw {
                    let xh = (x.data[j] - mean) * inv;
                    xhat.data[j] = xh;
                    x.data[j] = xh * g + b;
                }
            }
        }
        BnCache { xhat, inv_std }
    }

    /// `dy` is overwritten with `dL/dx`.
    pub fn backward(&mut self, cache: &BnCache, dy: &mut Tensor) {
        let (n, ch, hw) = (dy.n(), dy.c(), dy.h() * dy.w());
        let m = (n * hw) as f32;
        for c in 0..ch {
            let mut sum_dy = 0.0f64;
            let mut sum_dy_xhat = 0.0f64;
            for i in 0..n {
                let off = i * ch * hw + c * hw;
                for j in off..off + hw {
                    sum_dy += dy.data[j] as f64;
                    sum_dy_xhat += (dy.data[j] * cache.xhat.data[j]) as f64;
                }
            }
            self.beta.grad[c] += sum_dy as f32;
            self.gamma.grad[c] += sum_dy_xhat as f32;
            let g = self.gamma.value[c];
            let k = g * cache.inv_std[c] / m;
            let (sd, sdx) = (sum_dy as f32, sum_dy_xhat as f32);
            for i in 0..n {
                let off = i * ch * hw + c * hw;
                for j in off..off + hw {
                    dy.data[j] = k * (m * dy.data[j] - sd - cache.xhat.data[j] * sdx);
                }
            }
        }
    }
}

impl Module for BatchNorm2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}

pub fn relu_inplace(x: &mut Tensor) {
    x.data.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// 3×3 convolution, batch norm, ReLU.
#[derive(Debug, Clone)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBnRelu {
    pub fn new<R: Rng + ?Sized>(in_ch: usize, out_ch: usize, rng: &mut R) -> Self {
        ConvBnRelu {
            conv: Conv2d::new(in_ch, out_ch, 3, rng),
            bn: BatchNorm2d::new(out_ch),
        }
    }

    pub fn forward_eval(&self, x: &Tensor) -> Tensor {
        let mut y = self.conv.forward(x);
        self.bn.forward_eval(&mut y);
        relu_inplace(&mut y);
        y
    }

    pub fn forward_train(&mut self, x: &Tensor) -> (Tensor, BnCache) {
        let mut y = self.conv.forward(x);
        let cache = self.bn.forward_train(&mut y);
        relu_inplace(&mut y);
        (y, cache)
    }

    /// `y` is this block's output (for the ReLU mask); `dy` is consumed.
    pub fn backward(&mut self, x: &Tensor, y: &Tensor, cache: &BnCache, mut dy: Tensor, need_dx: bool) -> Option<Tensor> {
        for (g, &o) in dy.data.iter_mut().zip(&y.data) {
            if o <= 0.0 {
                *g = 0.0;
            }
        }
        self.bn.backward(cache, &mut dy);
        self.conv.backward(x, &dy, need_dx)
    }
}

impl Module for ConvBnRelu {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.bn.visit_mut(&join(prefix, "bn"), f);
    }
}

/// Two stacked [`ConvBnRelu`] blocks.
#[derive(Debug, Clone)]
pub struct DoubleConv {
    pub first: ConvBnRelu,
    pub second: ConvBnRelu,
}

#[derive(Debug, Clone)]
pub struct DoubleConvCache {
    pub mid: Tensor,
    pub bn1: BnCache,
    pub out: Tensor,
    pub bn2: BnCache,
}

impl DoubleConv {
    pub fn new<R: Rng + ?Sized>(in_ch: usize, out_ch: usize, rng: &mut R) -> Self {
        DoubleConv {
            first: ConvBnRelu::new(in_ch, out_ch, rng),
            second: ConvBnRelu::new(out_ch, out_ch, rng),
        }
    }

    pub fn forward_eval(&self, x: &Tensor) -> Tensor {
        self.second.forward_eval(&self.first.forward_eval(x))
    }

    pub fn forward_train(&mut self, x: &Tensor) -> DoubleConvCache {
        let (mid, bn1) = self.first.forward_train(x);
        let (out, bn2) = self.second.forward_train(&mid);
        DoubleConvCache { mid, bn1, out, bn2 }
    }

    pub fn backward(&mut self, x: &Tensor, cache: &DoubleConvCache, dy: Tensor, need_dx: bool) -> Option<Tensor> {
        let dmid = self
            .second
            .backward(&cache.mid, &cache.out, &cache.bn2, dy, true)
            .expect("requested");
        self.first.backward(x, &cache.mid, &cache.bn1, dmid, need_dx)
    }
}

impl Module for DoubleConv {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.first.visit(&join(prefix, "0"), f);
        self.second.visit(&join(prefix, "1"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.first.visit_mut(&join(prefix, "0"), f);
        self.second.visit_mut(&join(prefix, "1"), f);
    }
}

/// 2×2 max pooling; returns the output and the argmax offset (0..4) per output.
pub fn max_pool2(x: &Tensor) -> (Tensor, Vec<u8>) {
    let (n, c, h, w) = (x.n(), x.c(), x.h(), x.w());
    assert!(h % 2 == 0 && w % 2 == 0, "max_pool2 needs even dims, got {h}x{w}");
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let mut arg = vec![0u8; n * c * oh * ow];
    for p in 0..n * c {
        let src = &x.data[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                let base = 2 * y * w + 2 * xx;
                let cand = [src[base], src[base + 1], src[base + w], src[base + w + 1]];
                let mut best = 0;
                for k in 1..4 {
                    if cand[k] > cand[best] {
                        best = k;
                    }
                }
                let o = p * oh * ow + y * ow + xx;
                out.data[o] = cand[best];
                arg[o] = best as u8;
            }
        }
    }
    (out, arg)
}

pub fn max_pool2_backward(input_shape: [usize; 4], arg: &[u8], dy: &Tensor) -> Tensor {
    let [n, c, h, w] = input_shape;
    let (oh, ow) = (h / 2, w / 2);
    let mut dx = Tensor::zeros(input_shape);
    for p in 0..n * c {
        for y in 0..oh {
            for xx in 0..ow {
                let o = p * oh * ow + y * ow + xx;
                let a = arg[o] as usize;
                let idx = p * h * w + (2 * y + a / 2) * w + 2 * xx + a % 2;
                dx.data[idx] += dy.data[o];
            }
        }
    }
    dx
}

pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!((a.n(), a.h(), a.w()), (b.n(), b.h(), b.w()), "concat dims");
    let (la, lb) = (a.sample_len(), b.sample_len());
    let mut out = Tensor::zeros([a.n(), a.c() + b.c(), a.h(), a.w()]);
    for i in 0..a.n() {
        let o = out.sample_mut(i);
        o[..la].copy_from_slice(a.sample(i));
        o[la..la + lb].copy_from_slice(b.sample(i));
    }
    out
}

pub fn split_channels(x: &Tensor, first: usize) -> (Tensor, Tensor) {
    let (n, h, w) = (x.n(), x.h(), x.w());
    let second = x.c() - first;
    let mut a = Tensor::zeros([n, first, h, w]);
    let mut b = Tensor::zeros([n, second, h, w]);
    let la = first * h * w;
    for i in 0..n {
        let s = x.sample(i);
        a.sample_mut(i).copy_from_slice(&s[..la]);
        b.sample_mut(i).copy_from_slice(&s[la..]);
    }
    (a, b)
}

/// Fully connected layer over `[n, features, 1, 1]` tensors.
#[derive(Debug, Clone)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    /// `[out, in]`
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        Linear {
            in_features,
            out_features,
            weight: Param::he_normal(&[out_features, in_features], in_features, rng),
            bias: Param::zeros(&[out_features]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.sample_len(), self.in_features, "linear input features");
        let n = x.n();
        let mut out = Tensor::zeros([n, self.out_features, 1, 1]);
        for i in 0..n {
            out.sample_mut(i).copy_from_slice(&self.bias.value);
        }
        sgemm(
            n,
            self.in_features,
            self.out_features,
            1.0,
            View::row_major(&x.data, self.in_features),
            View::transposed(&self.weight.value, self.in_features),
            1.0,
            &mut out.data,
            self.out_features,
        );
        out
    }

    pub fn backward(&mut self, x: &Tensor, dy: &Tensor) -> Tensor {
        let n = x.n();
        for i in 0..n {
            for (g, d) in self.bias.grad.iter_mut().zip(dy.sample(i)) {
                *g += d;
            }
        }
        sgemm(
            self.out_features,
            n,
            self.in_features,
            1.0,
            View::transposed(&dy.data, self.out_features),
            View::row_major(&x.data, self.in_features),
            1.0,
            &mut self.weight.grad,
            self.in_features,
        );
        let mut dx = Tensor::zeros(x.shape);
        sgemm(
            n,
            self.out_features,
            self.in_features,
            1.0,
            View::row_major(&dy.data, self.out_features),
            View::row_major(&self.weight.value, self.in_features),
            0.0,
            &mut dx.data,
            self.in_features,
        );
        dx
    }
}

impl Module for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
        let data = (0..shape.iter().product::<usize>()).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape, data)
    }

    fn naive_conv(conv: &Conv2d, x: &Tensor) -> Tensor {
        let (n, h, w, k) = (x.n(), x.h(), x.w(), conv.k);
        let pad = (k / 2) as isize;
        let mut out = Tensor::zeros([n, conv.out_ch, h, w]);
        for i in 0..n {
            for co in 0..conv.out_ch {
                for y in 0..h {
                    for xx in 0..w {
                        let mut s = conv.bias.value[co];
                        for ci in 0..conv.in_ch {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = y as isize + ky as isize - pad;
                                    let ix = xx as isize + kx as isize - pad;
                                    if iy >= 0 && ix >= 0 && iy < h as isize && ix < w as isize {
                                        s += conv.weight.value[((co * conv.in_ch + ci) * k + ky) * k + kx]
                                            * x.data[((i * conv.in_ch + ci) * h + iy as usize) * w + ix as usize];
                                    }
                                }
                            }
                        }
                        out.data[((i * conv.out_ch + co) * h + y) * w + xx] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for k in [1, 3] {
            let conv = Conv2d::new(3, 4, k, &mut rng);
            let x = rand_tensor([2, 3, 5, 6], &mut rng);
            let a = conv.forward(&x);
            let b = naive_conv(&conv, &x);
            for (p, q) in a.data.iter().zip(&b.data) {
                assert!((p - q).abs() < 1e-4);
            }
        }
    }

    // Loss = Σ r ⊙ f(x) for a fixed random r; compares analytic and numeric
    // input derivatives at a few positions.
    fn probe<F, B>(mut fwd: F, mut bwd: B, x: &Tensor)
    where
        F: FnMut(&Tensor) -> Tensor,
        B: FnMut(&Tensor, &Tensor) -> Tensor,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let y = fwd(x);
        let r = rand_tensor(y.shape, &mut rng);
        let loss = |y: &Tensor| y.data.iter().zip(&r.data).map(|(a, b)| (*a as f64) * (*b as f64)).sum::<f64>();
        let dx = bwd(x, &r);
        let h = 1e-2f32;
        for idx in [0, x.len() / 3, x.len() - 1] {
            let mut xp = x.clone();
            xp.data[idx] += h;
            let mut xm = x.clone();
            xm.data[idx] -= h;
            let num = (loss(&fwd(&xp)) - loss(&fwd(&xm))) / (2.0 * h as f64);
            assert!((num - dx.data[idx] as f64).abs() < 2e-2 * (1.0 + num.abs()), "dx {num} vs {}", dx.data[idx]);
        }
    }

    #[test]
    fn conv_input_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let conv = Conv2d::new(2, 3, 3, &mut rng);
        let x = rand_tensor([2, 2, 4, 5], &mut rng);
        let mut c2 = conv.clone();
        probe(
            |x| conv.forward(x),
            |x, dy| c2.backward(x, dy, true).unwrap(),
            &x,
        );
    }

    #[test]
    fn conv_weight_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut conv = Conv2d::new(2, 3, 3, &mut rng);
        let x = rand_tensor([2, 2, 4, 5], &mut rng);
        let y = conv.forward(&x);
        let r = rand_tensor(y.shape, &mut rng);
        conv.backward(&x, &r, false);
        let loss = |c: &Conv2d| c.forward(&x).data.iter().zip(&r.data).map(|(a, b)| (*a * *b) as f64).sum::<f64>();
        for idx in [0, 7, conv.weight.len() - 1] {
            let mut cp = conv.clone();
            cp.weight.value[idx] += 1e-2;
            let mut cm = conv.clone();
            cm.weight.value[idx] -= 1e-2;
            let num = (loss(&cp) - loss(&cm)) / 2e-2;
            assert!((num - conv.weight.grad[idx] as f64).abs() < 1e-2 * (1.0 + num.abs()));
        }
        let num_b: f64 = r.data.chunks(20).enumerate().filter(|(i, _)| i % 3 == 1).map(|(_, c)| c.iter().map(|&v| v as f64).sum::<f64>()).sum();
        assert!((num_b - conv.bias.grad[1] as f64).abs() < 1e-3);
    }

    #[test]
    fn transposed_conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut up = ConvTranspose2x2::new(3, 2, &mut rng);
        let x = rand_tensor([2, 3, 3, 4], &mut rng);
        let y = up.forward(&x);
        assert_eq!(y.shape, [2, 2, 6, 8]);
        let r = rand_tensor(y.shape, &mut rng);
        let dx = up.backward(&x, &r);
        let loss = |u: &ConvTranspose2x2, x: &Tensor| u.forward(x).data.iter().zip(&r.data).map(|(a, b)| (*a * *b) as f64).sum::<f64>();
        for idx in [0, 11, x.len() - 1] {
            let mut xp = x.clone();
            xp.data[idx] += 1e-2;
            let mut xm = x.clone();
            xm.data[idx] -= 1e-2;
            let num = (loss(&up, &xp) - loss(&up, &xm)) / 2e-2;
            assert!((num - dx.data[idx] as f64).abs() < 1e-2 * (1.0 + num.abs()));
        }
        for idx in [0, 5, up.weight.len() - 1] {
            let mut p = up.clone();
            p.weight.value[idx] += 1e-2;
            let mut m = up.clone();
            m.weight.value[idx] -= 1e-2;
            let num = (loss(&p, &x) - loss(&m, &x)) / 2e-2;
            assert!((num - up.weight.grad[idx] as f64).abs() < 1e-2 * (1.0 + num.abs()));
        }
    }

    #[test]
    fn batchnorm_relu_block_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let block = ConvBnRelu::new(2, 3, &mut rng);
        let x = rand_tensor([3, 2, 4, 4], &mut rng);
        let mut b = block.clone();
        let (y, cache) = b.forward_train(&x);
        let r = rand_tensor(y.shape, &mut rng);
        let dx = b.backward(&x, &y, &cache, r.clone(), true).unwrap();
        let loss = |x: &Tensor| {
            let mut c = block.clone();
            c.forward_train(x).0.data.iter().zip(&r.data).map(|(a, b)| (*a * *b) as f64).sum::<f64>()
        };
        for idx in [1, 17, x.len() - 2] {
            let mut xp = x.clone();
            xp.data[idx] += 1e-2;
            let mut xm = x.clone();
            xm.data[idx] -= 1e-2;
            let num = (loss(&xp) - loss(&xm)) / 2e-2;
            assert!((num - dx.data[idx] as f64).abs() < 3e-2 * (1.0 + num.abs()), "{num} vs {}", dx.data[idx]);
        }
    }

    #[test]
    fn linear_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut lin = Linear::new(6, 4, &mut rng);
        let x = rand_tensor([3, 6, 1, 1], &mut rng);
        let y = lin.forward(&x);
        let r = rand_tensor(y.shape, &mut rng);
        let dx = lin.backward(&x, &r);
        let loss = |l: &Linear, x: &Tensor| l.forward(x).data.iter().zip(&r.data).map(|(a, b)| (*a * *b) as f64).sum::<f64>();
        for idx in 0..x.len() {
            let mut xp = x.clone();
            xp.data[idx] += 1e-2;
            let mut xm = x.clone();
            xm.data[idx] -= 1e-2;
            let num = (loss(&lin, &xp) - loss(&lin, &xm)) / 2e-2;
            assert!((num - dx.data[idx] as f64).abs() < 1e-3 * (1.0 + num.abs()));
        }
        for idx in 0..lin.weight.len() {
            let mut p = lin.clone();
            p.weight.value[idx] += 1e-2;
            let mut m = lin.clone();
            m.weight.value[idx] -= 1e-2;
            let num = (loss(&p, &x) - loss(&m, &x)) / 2e-2;
            assert!((num - lin.weight.grad[idx] as f64).abs() < 1e-3 * (1.0 + num.abs()));
        }
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let x = Tensor::from_vec([1, 1, 2, 2], vec![0.1, 0.9, 0.3, 0.2]);
        let (y, arg) = max_pool2(&x);
        assert_eq!(y.data, vec![0.9]);
        let dx = max_pool2_backward(x.shape, &arg, &Tensor::from_vec([1, 1, 1, 1], vec![2.0]));
        assert_eq!(dx.data, vec![0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn concat_split_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = rand_tensor([2, 3, 2, 2], &mut rng);
        let b = rand_tensor([2, 1, 2, 2], &mut rng);
        let (a2, b2) = split_channels(&concat_channels(&a, &b), 3);
        assert_eq!((a2, b2), (a, b));
    }
}
