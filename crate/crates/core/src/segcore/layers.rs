//! Convolution, batch normalization, pooling and upsampling with hand-written
//! backward passes.

use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor};

/// Lower bound applied to every variance before it is used to normalize or
/// compared between profiles.
pub const VARIANCE_FLOOR: f64 = 1e-6;

/// Which statistics normalize activations inside a BN layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    /// Statistics of the current batch; running statistics are updated.
    Train,
    /// Statistics of the current batch; running statistics untouched.
    Batch,
    /// Frozen running statistics accumulated during source training.
    Running,
    /// Every image normalized by its own spatial statistics.
    PerImage,
}

impl BnMode {
    pub fn uses_batch_stats(self) -> bool {
        matches!(self, BnMode::Train | BnMode::Batch)
    }
}

fn im2col<T: Real>(img: &[T], cin: usize, h: usize, w: usize, k: usize, col: &mut [T]) {
    let pad = (k / 2) as isize;
    let plane = h * w;
    for ci in 0..cin {
        let src = &img[ci * plane..(ci + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let out_row = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out_row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src_row = &src[sy as usize * w..(sy as usize + 1) * w];
                    for (x, v) in out_row.iter_mut().enumerate() {
                        let sx = x as isize + dx;
                        *v = if sx < 0 || sx >= w as isize {
                            T::zero()
                        } else {
                            src_row[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], cin: usize, h: usize, w: usize, k: usize, img: &mut [T]) {
    let pad = (k / 2) as isize;
    let plane = h * w;
    for ci in 0..cin {
        let dst = &mut img[ci * plane..(ci + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * plane..(row + 1) * plane];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src_row = &src[y * w..(y + 1) * w];
                    let dst_row = &mut dst[sy as usize * w..(sy as usize + 1) * w];
                    for (x, &g) in src_row.iter().enumerate() {
                        let sx = x as isize + dx;
                        if sx >= 0 && sx < w as isize {
                            dst_row[sx as usize] = dst_row[sx as usize] + g;
                        }
                    }
                }
            }
        }
    }
}

/// Square same-padding convolution, stride 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    /// `cout x (cin * k * k)`, row-major.
    pub weight: Vec<T>,
    pub bias: Option<Vec<T>>,
}

impl<T: Real> Conv2d<T> {
    fn cols(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.c, self.cin, "conv input channels");
        let plane = x.plane();
        let mut out = Tensor::zeros(x.n, self.cout, x.h, x.w);
        let mut col = if self.k == 1 {
            Vec::new()
        } else {
            vec![T::zero(); self.cols() * plane]
        };
        for i in 0..x.n {
            let src: &[T] = if self.k == 1 {
                x.image(i)
            } else {
                im2col(x.image(i), self.cin, x.h, x.w, self.k, &mut col);
                &col
            };
            let dst = out.image_mut(i);
            T::gemm(
                self.cout,
                self.cols(),
                plane,
                T::one(),
                &self.weight,
                self.cols() as isize,
                1,
                src,
                plane as isize,
                1,
                T::zero(),
                dst,
                plane as isize,
                1,
            );
            if let Some(bias) = &self.bias {
                for (co, &b) in bias.iter().enumerate() {
                    dst[co * plane..(co + 1) * plane]
                        .iter_mut()
                        .for_each(|v| *v = *v + b);
                }
            }
        }
        out
    }

    /// Returns the input gradient; accumulates parameter gradients when asked.
    pub fn backward(
        &self,
        x: &Tensor<T>,
        dout: &Tensor<T>,
        mut dweight: Option<&mut [T]>,
        mut dbias: Option<&mut [T]>,
    ) -> Tensor<T> {
        let plane = x.plane();
        let ncols = self.cols();
        let mut dx = Tensor::zeros(x.n, x.c, x.h, x.w);
        let mut col = vec![T::zero(); ncols * plane];
        let mut dcol = vec![T::zero(); ncols * plane];
        for i in 0..x.n {
            let g = dout.image(i);
            if let Some(dw) = dweight.as_deref_mut() {
                let src: &[T] = if self.k == 1 {
                    x.image(i)
                } else {
                    im2col(x.image(i), self.cin, x.h, x.w, self.k, &mut col);
                    &col
                };
                // dW += dout (cout x plane) * col^T (plane x ncols)
                T::gemm(
                    self.cout,
                    plane,
                    ncols,
                    T::one(),
                    g,
                    plane as isize,
                    1,
                    src,
                    1,
                    plane as isize,
                    T::one(),
                    dw,
                    ncols as isize,
                    1,
                );
            }
            if let Some(db) = dbias.as_deref_mut() {
                for (co, b) in db.iter_mut().enumerate() {
                    *b = *b + g[co * plane..(co + 1) * plane].iter().copied().sum();
                }
            }
            // dcol = W^T (ncols x cout) * dout (cout x plane)
            let target: &mut [T] = if self.k == 1 {
                dx.image_mut(i)
            } else {
                &mut dcol
            };
            T::gemm(
                ncols,
                self.cout,
                plane,
                T::one(),
                &self.weight,
                1,
                ncols as isize,
                g,
                plane as isize,
                1,
                T::zero(),
                target,
                plane as isize,
                1,
            );
            if self.k != 1 {
                col2im(&dcol, self.cin, x.h, x.w, self.k, dx.image_mut(i));
            }
        }
        dx
    }
}

/// Per-channel statistics of the activations entering a BN layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    /// Population variance, unfloored.
    pub var: Vec<f64>,
}

/// Saved forward state for [`BatchNorm2d::backward`].
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub mode: BnMode,
    pub xhat: Tensor<T>,
    /// Inverse standard deviation per normalization group: one entry per
    /// channel, or `n * c` entries in per-image mode.
    pub inv_std: Vec<T>,
    /// Whether the variance of a group sat below the floor.
    pub clamped: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d<T> {
    pub channels: usize,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
}

impl<T: Real> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
        }
    }

    /// Mean and population variance over batch and spatial axes.
    pub fn batch_stats(x: &Tensor<T>) -> ChannelStats {
        let m = (x.n * x.plane()) as f64;
        let mut mean = vec![0.0; x.c];
        let mut var = vec![0.0; x.c];
        for c in 0..x.c {
            let mut sum = 0.0;
            for i in 0..x.n {
                sum += x.channel(i, c).iter().map(|v| v.as_f64()).sum::<f64>();
            }
            let mu = sum / m;
            let mut sq = 0.0;
            for i in 0..x.n {
                sq += x
                    .channel(i, c)
                    .iter()
                    .map(|v| {
                        let d = v.as_f64() - mu;
                        d * d
                    })
                    .sum::<f64>();
            }
            mean[c] = mu;
            var[c] = sq / m;
        }
        ChannelStats { mean, var }
    }

    fn image_stats(x: &Tensor<T>, i: usize, c: usize) -> (f64, f64) {
        let ch = x.channel(i, c);
        let m = ch.len() as f64;
        let mu = ch.iter().map(|v| v.as_f64()).sum::<f64>() / m;
        let var = ch
            .iter()
            .map(|v| {
                let d = v.as_f64() - mu;
                d * d
            })
            .sum::<f64>()
            / m;
        (mu, var)
    }

    /// Normalizes `x`; returns the output, the cache and the batch statistics
    /// of the input. Never mutates the layer.
    pub fn forward(&self, x: &Tensor<T>, mode: BnMode) -> (Tensor<T>, BnCache<T>, ChannelStats) {
        assert_eq!(x.c, self.channels, "bn channels");
        let stats = Self::batch_stats(x);
        let mut xhat = Tensor::zeros(x.n, x.c, x.h, x.w);
        let mut out = Tensor::zeros(x.n, x.c, x.h, x.w);
        let mut inv_std = Vec::new();
        let mut clamped = Vec::new();
        let mut apply = |i: usize, c: usize, mu: f64, var: f64, xhat: &mut Tensor<T>| {
            let floored = var.max(VARIANCE_FLOOR);
            let inv = T::from_f64_lossy(1.0 / floored.sqrt());
            let mu = T::from_f64_lossy(mu);
            let (g, b) = (self.gamma[c], self.beta[c]);
            let src = x.channel(i, c);
            let xh = xhat.channel_mut(i, c);
            for (d, &s) in xh.iter_mut().zip(src) {
                *d = (s - mu) * inv;
            }
            let o = out.channel_mut(i, c);
            for (d, &s) in o.iter_mut().zip(xh.iter()) {
                *d = g * s + b;
            }
            (inv, var < VARIANCE_FLOOR)
        };
        match mode {
            BnMode::Train | BnMode::Batch | BnMode::Running => {
                for c in 0..x.c {
                    let (mu, var) = if mode == BnMode::Running {
                        (self.running_mean[c], self.running_var[c])
                    } else {
                        (stats.mean[c], stats.var[c])
                    };
                    let mut res = (T::zero(), false);
                    for i in 0..x.n {
                        res = apply(i, c, mu, var, &mut xhat);
                    }
                    inv_std.push(res.0);
                    clamped.push(res.1);
                }
            }
            BnMode::PerImage => {
                for i in 0..x.n {
                    for c in 0..x.c {
                        let (mu, var) = Self::image_stats(x, i, c);
                        let (inv, cl) = apply(i, c, mu, var, &mut xhat);
                        inv_std.push(inv);
                        clamped.push(cl);
                    }
                }
            }
        }
        (
            out,
            BnCache {
                mode,
                xhat,
                inv_std,
                clamped,
            },
            stats,
        )
    }

    /// Folds batch statistics into the running estimates (unbiased variance).
    pub fn update_running(&mut self, stats: &ChannelStats, count: usize) {
        let correction = if count > 1 {
            count as f64 / (count as f64 - 1.0)
        } else {
            1.0
        };
        for c in 0..self.channels {
            self.running_mean[c] =
                (1.0 - self.momentum) * self.running_mean[c] + self.momentum * stats.mean[c];
            self.running_var[c] = (1.0 - self.momentum) * self.running_var[c]
                + self.momentum * stats.var[c] * correction;
        }
    }

    /// Returns `dx`, accumulating into `dgamma` / `dbeta`.
    pub fn backward(
        &self,
        cache: &BnCache<T>,
        dy: &Tensor<T>,
        dgamma: &mut [T],
        dbeta: &mut [T],
    ) -> Tensor<T> {
        let xhat = &cache.xhat;
        let mut dx = Tensor::zeros(dy.n, dy.c, dy.h, dy.w);
        for c in 0..dy.c {
            let mut sg = T::zero();
            let mut sb = T::zero();
            for i in 0..dy.n {
                for (&g, &xh) in dy.channel(i, c).iter().zip(xhat.channel(i, c)) {
                    sg = sg + g * xh;
                    sb = sb + g;
                }
            }
            dgamma[c] = dgamma[c] + sg;
            dbeta[c] = dbeta[c] + sb;
        }
        // dxhat = dy * gamma, then undo the normalization.
        let group = |dx: &mut Tensor<T>, images: &[usize], c: usize, inv: T, clamped: bool| {
            let m = T::from_usize(images.len() * dy.plane()).expect("count");
            let gamma = self.gamma[c];
            let mut sum_d = T::zero();
            let mut sum_dx = T::zero();
            for &i in images {
                for (&g, &xh) in dy.channel(i, c).iter().zip(xhat.channel(i, c)) {
                    let d = g * gamma;
                    sum_d = sum_d + d;
                    sum_dx = sum_dx + d * xh;
                }
            }
            let mean_d = sum_d / m;
            let mean_dx = if clamped { T::zero() } else { sum_dx / m };
            for &i in images {
                let g = dy.channel(i, c);
                let xh = xhat.channel(i, c);
                let out = dx.channel_mut(i, c);
                for ((o, &gv), &xv) in out.iter_mut().zip(g).zip(xh) {
                    *o = inv * (gv * gamma - mean_d - xv * mean_dx);
                }
            }
        };
        match cache.mode {
            BnMode::Running => {
                for c in 0..dy.c {
                    let k = cache.inv_std[c] * self.gamma[c];
                    for i in 0..dy.n {
                        let g = dy.channel(i, c).to_vec();
                        for (o, gv) in dx.channel_mut(i, c).iter_mut().zip(g) {
                            *o = gv * k;
                        }
                    }
                }
            }
            BnMode::Train | BnMode::Batch => {
                let all: Vec<usize> = (0..dy.n).collect();
                for c in 0..dy.c {
                    group(&mut dx, &all, c, cache.inv_std[c], cache.clamped[c]);
                }
            }
            BnMode::PerImage => {
                for i in 0..dy.n {
                    for c in 0..dy.c {
                        let idx = i * dy.c + c;
                        group(&mut dx, &[i], c, cache.inv_std[idx], cache.clamped[idx]);
                    }
                }
            }
        }
        dx
    }
}

pub fn relu_inplace<T: Real>(x: &mut Tensor<T>) {
    x.data.iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v = T::zero()
        }
    });
}

/// Masks `dy` by the positive entries of the ReLU output.
pub fn relu_backward<T: Real>(out: &Tensor<T>, dy: &mut Tensor<T>) {
    for (g, &o) in dy.data.iter_mut().zip(&out.data) {
        if o <= T::zero() {
            *g = T::zero();
        }
    }
}

/// 2x2 max pooling; returns the pooled tensor and the flat argmax per output.
pub fn maxpool2<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<usize>) {
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut out = Tensor::zeros(x.n, x.c, oh, ow);
    let mut arg = vec![0usize; out.data.len()];
    let mut k = 0;
    for i in 0..x.n {
        for c in 0..x.c {
            let base = (i * x.c + c) * x.plane();
            let ch = x.channel(i, c);
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = (2 * y) * x.w + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let cand = (2 * y + dy) * x.w + 2 * xx + dx;
                        if ch[cand] > ch[best] {
                            best = cand;
                        }
                    }
                    out.data[k] = ch[best];
                    arg[k] = base + best;
                    k += 1;
                }
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward<T: Real>(input: &Tensor<T>, arg: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(input.n, input.c, input.h, input.w);
    for (&a, &g) in arg.iter().zip(&dy.data) {
        dx.data[a] = dx.data[a] + g;
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (oh, ow) = (x.h * 2, x.w * 2);
    let mut out = Tensor::zeros(x.n, x.c, oh, ow);
    for i in 0..x.n {
        for c in 0..x.c {
            let src = x.channel(i, c).to_vec();
            let dst = out.channel_mut(i, c);
            for y in 0..oh {
                for xx in 0..ow {
                    dst[y * ow + xx] = src[(y / 2) * x.w + xx / 2];
                }
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Real>(dy: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut dx = Tensor::zeros(dy.n, dy.c, h, w);
    for i in 0..dy.n {
        for c in 0..dy.c {
            let src = dy.channel(i, c).to_vec();
            let dst = dx.channel_mut(i, c);
            for y in 0..dy.h {
                for xx in 0..dy.w {
                    let d = &mut dst[(y / 2) * w + xx / 2];
                    *d = *d + src[y * dy.w + xx];
                }
            }
        }
    }
    dx
}
