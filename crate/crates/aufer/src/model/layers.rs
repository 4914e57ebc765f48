//! Network layers with explicit forward and backward passes.
//!
//! Every layer caches what its backward pass needs during forward. Backward
//! accumulates parameter gradients (unless asked not to) and returns the
//! gradient with respect to its input. Per-sample work is parallelized;
//! cross-sample reductions happen in sample order so repeated runs produce
//! bitwise-identical results regardless of thread count.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::tensor::{Param, Tensor4};

/// A differentiable network stage.
pub trait Layer: Send {
    /// Human-readable identifier, unique within a network.
    fn name(&self) -> &str;

    fn forward(&mut self, x: &Tensor4, train: bool) -> Tensor4;

    /// Propagates `dy` back through the most recent forward. When
    /// `accumulate` is false, parameter gradients are left untouched
    /// (used for explanation passes that only need input gradients).
    fn backward(&mut self, dy: &Tensor4, accumulate: bool) -> Tensor4;

    fn params(&self) -> Vec<&Param> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        Vec::new()
    }
}

/// Draws one standard normal via Box-Muller.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (core::f64::consts::TAU * u2).cos()
}

/// He-normal initialization: std = sqrt(2 / fan_in).
fn he_normal(rng: &mut ChaCha8Rng, fan_in: usize, len: usize) -> Vec<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    (0..len).map(|_| std * normal(rng)).collect()
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// 2D convolution, implemented as im2col + matrix product.
pub struct Conv2d {
    name: String,
    in_c: usize,
    out_c: usize,
    k: usize,
    stride: usize,
    pad: usize,
    weight: Param,
    bias: Option<Param>,
    cache: Option<Tensor4>,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Conv2d {
        assert!(k > 0 && stride > 0, "kernel and stride must be nonzero");
        let name = name.into();
        let fan_in = in_c * k * k;
        let weight = Param::new(format!("{name}.weight"), he_normal(rng, fan_in, out_c * fan_in), true);
        let bias = bias.then(|| Param::new(format!("{name}.bias"), vec![0.0; out_c], true));
        Conv2d { name, in_c, out_c, k, stride, pad, weight, bias, cache: None }
    }

    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.pad - self.k) / self.stride + 1;
        let ow = (w + 2 * self.pad - self.k) / self.stride + 1;
        (oh, ow)
    }

    /// Unfolds one sample into a `(in_c*k*k, oh*ow)` column matrix.
    #[allow(clippy::too_many_arguments)]
    fn im2col(&self, x: &[f64], h: usize, w: usize, oh: usize, ow: usize, col: &mut [f64]) {
        let k = self.k;
        debug_assert_eq!(col.len(), self.in_c * k * k * oh * ow);
        let cols = oh * ow;
        for c in 0..self.in_c {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * k + ky) * k + kx) * cols;
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let out_row = &mut col[row + oy * ow..row + (oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            out_row.iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, out) in out_row.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *out = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    /// Scatters a column-matrix gradient back onto one input sample.
    #[allow(clippy::too_many_arguments)]
    fn col2im(&self, col: &[f64], h: usize, w: usize, oh: usize, ow: usize, dx: &mut [f64]) {
        let k = self.k;
        let cols = oh * ow;
        for c in 0..self.in_c {
            let plane = &mut dx[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * k + ky) * k + kx) * cols;
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &col[row + oy * ow..row + (oy + 1) * ow];
                        for (ox, &v) in src.iter().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                plane[iy as usize * w + ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Layer for Conv2d {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&mut self, x: &Tensor4, _train: bool) -> Tensor4 {
        assert_eq!(x.c(), self.in_c, "{}: channel mismatch", self.name);
        let (h, w) = (x.h(), x.w());
        let (oh, ow) = self.out_hw(h, w);
        let mut y = Tensor4::zeros(x.n(), self.out_c, oh, ow);
        let ckk = self.in_c * self.k * self.k;
        let cols = oh * ow;
        let x_len = x.sample_len();
        let y_len = y.sample_len();

        y.data_mut()
            .par_chunks_mut(y_len)
            .zip(x.data().par_chunks(x_len))
            .for_each(|(y_s, x_s)| {
                let mut col = vec![0.0; ckk * cols];
                self.im2col(x_s, h, w, oh, ow, &mut col);
                let wmat = ArrayView2::from_shape((self.out_c, ckk), &self.weight.value).unwrap();
                let cmat = ArrayView2::from_shape((ckk, cols), &col).unwrap();
                let mut out = ArrayViewMut2::from_shape((self.out_c, cols), y_s).unwrap();
                general_mat_mul(1.0, &wmat, &cmat, 0.0, &mut out);
                if let Some(b) = &self.bias {
                    for (oc, row) in y_s.chunks_mut(cols).enumerate() {
                        let bv = b.value[oc];
                        row.iter_mut().for_each(|v| *v += bv);
                    }
                }
            });

        self.cache = Some(x.clone());
        y
    }

    fn backward(&mut self, dy: &Tensor4, accumulate: bool) -> Tensor4 {
        let x = self.cache.take().expect("conv backward without forward");
        let (h, w) = (x.h(), x.w());
        let (oh, ow) = self.out_hw(h, w);
        assert_eq!(dy.shape(), (x.n(), self.out_c, oh, ow), "{}: dy shape", self.name);
        let ckk = self.in_c * self.k * self.k;
        let cols = oh * ow;
        let mut dx = Tensor4::zeros(x.n(), self.in_c, h, w);
        let x_len = x.sample_len();
        let y_len = dy.sample_len();

        // Per-sample contributions computed in parallel, then reduced in
        // sample order: gradient sums are bitwise deterministic.
        let partials: Vec<(Vec<f64>, Vec<f64>)> = dx
            .data_mut()
            .par_chunks_mut(x_len)
            .zip(x.data().par_chunks(x_len))
            .zip(dy.data().par_chunks(y_len))
            .map(|((dx_s, x_s), dy_s)| {
                let wmat = ArrayView2::from_shape((self.out_c, ckk), &self.weight.value).unwrap();
                let dy_mat = ArrayView2::from_shape((self.out_c, cols), dy_s).unwrap();

                // dX via col2im(W^T dY).
                let mut dcol = vec![0.0; ckk * cols];
                {
                    let mut dcol_mat = ArrayViewMut2::from_shape((ckk, cols), &mut dcol[..]).unwrap();
                    general_mat_mul(1.0, &wmat.t(), &dy_mat, 0.0, &mut dcol_mat);
                }
                self.col2im(&dcol, h, w, oh, ow, dx_s);

                if !accumulate {
                    return (Vec::new(), Vec::new());
                }
                // dW = dY X_col^T, db = row sums of dY.
                let mut col = vec![0.0; ckk * cols];
                self.im2col(x_s, h, w, oh, ow, &mut col);
                let cmat = ArrayView2::from_shape((ckk, cols), &col).unwrap();
                let mut dw = vec![0.0; self.out_c * ckk];
                {
                    let mut dw_mat =
                        ArrayViewMut2::from_shape((self.out_c, ckk), &mut dw[..]).unwrap();
                    general_mat_mul(1.0, &dy_mat, &cmat.t(), 0.0, &mut dw_mat);
                }
                let db: Vec<f64> = if self.bias.is_some() {
                    dy_s.chunks(cols).map(|r| r.iter().sum()).collect()
                } else {
                    Vec::new()
                };
                (dw, db)
            })
            .collect();

        if accumulate {
            for (dw, db) in &partials {
                for (g, d) in self.weight.grad.iter_mut().zip(dw) {
                    *g += d;
                }
                if let Some(b) = &mut self.bias {
                    for (g, d) in b.grad.iter_mut().zip(db) {
                        *g += d;
                    }
                }
            }
        }
        dx
    }

    fn params(&self) -> Vec<&Param> {
        let mut p = vec![&self.weight];
        if let Some(b) = &self.bias {
            p.push(b);
        }
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = vec![&mut self.weight];
        if let Some(b) = &mut self.bias {
            p.push(b);
        }
        p
    }
}

// ---------------------------------------------------------------------------
// ReLU
// ---------------------------------------------------------------------------

pub struct Relu {
    name: String,
    mask: Vec<bool>,
    shape: (usize, usize, usize, usize),
}

impl Relu {
    pub fn new(name: impl Into<String>) -> Relu {
        Relu { name: name.into(), mask: Vec::new(), shape: (0, 0, 0, 0) }
    }
}

impl Layer for Relu {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&mut self, x: &Tensor4, _train: bool) -> Tensor4 {
        self.mask = x.data().iter().map(|&v| v > 0.0).collect();
        self.shape = x.shape();
        let mut y = x.clone();
        y.data_mut().iter_mut().for_each(|v| {
            if *v < 0.0 {
                *v = 0.0;
            }
        });
        y
    }

    fn backward(&mut self, dy: &Tensor4, _accumulate: bool) -> Tensor4 {
        assert_eq!(dy.shape(), self.shape, "{}: dy shape", self.name);
        let mut dx = dy.clone();
        for (g, &m) in dx.data_mut().iter_mut().zip(&self.mask) {
            if !m {
                *g = 0.0;
            }
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// Max pooling
// ---------------------------------------------------------------------------

/// Max pooling with implicit negative-infinity padding. Ties resolve to the
/// first element in scan order, so backward is deterministic.
pub struct MaxPool2d {
    name: String,
    k: usize,
    stride: usize,
    pad: usize,
    argmax: Vec<usize>,
    in_shape: (usize, usize, usize, usize),
    out_hw: (usize, usize),
}

impl MaxPool2d {
    pub fn new(name: impl Into<String>, k: usize, stride: usize, pad: usize) -> MaxPool2d {
        assert!(k > 0 && stride > 0);
        MaxPool2d {
            name: name.into(),
            k,
            stride,
            pad,
            argmax: Vec::new(),
            in_shape: (0, 0, 0, 0),
            out_hw: (0, 0),
        }
    }
}

impl Layer for MaxPool2d {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&mut self, x: &Tensor4, _train: bool) -> Tensor4 {
        let (n, c, h, w) = x.shape();
        assert!(
            h + 2 * self.pad >= self.k && w + 2 * self.pad >= self.k,
            "{}: input {h}x{w} smaller than pooling window",
            self.name
        );
        let oh = (h + 2 * self.pad - self.k) / self.stride + 1;
        let ow = (w + 2 * self.pad - self.k) / self.stride + 1;
        let mut y = Tensor4::zeros(n, c, oh, ow);
        self.argmax = vec![0; n * c * oh * ow];
        self.in_shape = x.shape();
        self.out_hw = (oh, ow);

        let mut oi = 0;
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * h * w;
                let plane = &x.data()[base..base + h * w];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_i = usize::MAX;
                        for ky in 0..self.k {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..self.k {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let v = plane[iy as usize * w + ix as usize];
                                if v > best {
                                    best = v;
                                    best_i = base + iy as usize * w + ix as usize;
                                }
                            }
                        }
                        assert!(best_i != usize::MAX, "{}: empty pooling window", self.name);
                        y.data_mut()[oi] = best;
                        self.argmax[oi] = best_i;
                        oi += 1;
                    }
                }
            }
        }
        y
    }

    fn backward(&mut self, dy: &Tensor4, _accumulate: bool) -> Tensor4 {
        let (n, c, h, w) = self.in_shape;
        assert_eq!(dy.shape(), (n, c, self.out_hw.0, self.out_hw.1), "{}: dy shape", self.name);
        let mut dx = Tensor4::zeros(n, c, h, w);
        for (g, &src) in dy.data().iter().zip(&self.argmax) {
            dx.data_mut()[src] += g;
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

/// Per-channel batch normalization.
///
/// Training normalizes with biased batch variance and updates running
/// statistics with the unbiased estimate. Evaluation normalizes with the
/// running statistics, making backward a per-channel linear map.
pub struct BatchNorm2d {
    name: String,
    c: usize,
    eps: f64,
    momentum: f64,
    gamma: Param,
    beta: Param,
    running_mean: Param,
    running_var: Param,
    cache: Option<BnCache>,
}

struct BnCache {
    shape: (usize, usize, usize, usize),
    /// x_hat, the normalized input.
    xhat: Vec<f64>,
    /// Per-channel 1/sqrt(var + eps) actually used in forward.
    inv_std: Vec<f64>,
    train: bool,
}

impl BatchNorm2d {
    pub fn new(name: impl Into<String>, c: usize) -> BatchNorm2d {
        let name = name.into();
        BatchNorm2d {
            c,
            eps: 1e-5,
            momentum: 0.1,
            gamma: Param::new(format!("{name}.gamma"), vec![1.0; c], true),
            beta: Param::new(format!("{name}.beta"), vec![0.0; c], true),
            running_mean: Param::new(format!("{name}.running_mean"), vec![0.0; c], false),
            running_var: Param::new(format!("{name}.running_var"), vec![1.0; c], false),
            cache: None,
            name,
        }
    }
}

impl Layer for BatchNorm2d {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&mut self, x: &Tensor4, train: bool) -> Tensor4 {
        let (n, c, h, w) = x.shape();
        assert_eq!(c, self.c, "{}: channel mismatch", self.name);
        let m = (n * h * w) as f64;
        let plane = h * w;
        let mut y = Tensor4::zeros(n, c, h, w);
        let mut xhat = vec![0.0; x.data().len()];
        let mut inv_std = vec![0.0; c];

        for ci in 0..c {
            let (mean, var) = if train {
                let mut sum = 0.0;
                for ni in 0..n {
                    let base = (ni * c + ci) * plane;
                    sum += x.data()[base..base + plane].iter().sum::<f64>();
                }
                let mean = sum / m;
                let mut sq = 0.0;
                for ni in 0..n {
                    let base = (ni * c + ci) * plane;
                    for &v in &x.data()[base..base + plane] {
                        let d = v - mean;
                        sq += d * d;
                    }
                }
                let var = sq / m;
                // Running stats use the unbiased variance estimate.
                let unbiased = if m > 1.0 { sq / (m - 1.0) } else { var };
                self.running_mean.value[ci] =
                    (1.0 - self.momentum) * self.running_mean.value[ci] + self.momentum * mean;
                self.running_var.value[ci] =
                    (1.0 - self.momentum) * self.running_var.value[ci] + self.momentum * unbiased;
                (mean, var)
            } else {
                (self.running_mean.value[ci], self.running_var.value[ci])
            };
            let is = 1.0 / (var + self.eps).sqrt();
            inv_std[ci] = is;
            let g = self.gamma.value[ci];
            let b = self.beta.value[ci];
            for ni in 0..n {
                let base = (ni * c + ci) * plane;
                for i in base..base + plane {
                    let xh = (x.data()[i] - mean) * is;
                    xhat[i] = xh;
                    y.data_mut()[i] = g * xh + b;
                }
            }
        }
        self.cache = Some(BnCache { shape: (n, c, h, w), xhat, inv_std, train });
        y
    }

    fn backward(&mut self, dy: &Tensor4, accumulate: bool) -> Tensor4 {
        let cache = self.cache.take().expect("batchnorm backward without forward");
        let (n, c, h, w) = cache.shape;
        assert_eq!(dy.shape(), cache.shape, "{}: dy shape", self.name);
        let plane = h * w;
        let m = (n * plane) as f64;
        let mut dx = Tensor4::zeros(n, c, h, w);

        for ci in 0..c {
            let g = self.gamma.value[ci];
            let is = cache.inv_std[ci];
            let mut sum_dy = 0.0;
            let mut sum_dy_xhat = 0.0;
            for ni in 0..n {
                let base = (ni * c + ci) * plane;
                for i in base..base + plane {
                    let d = dy.data()[i];
                    sum_dy += d;
                    sum_dy_xhat += d * cache.xhat[i];
                }
            }
            if accumulate {
                self.gamma.grad[ci] += sum_dy_xhat;
                self.beta.grad[ci] += sum_dy;
            }
            for ni in 0..n {
                let base = (ni * c + ci) * plane;
                for i in base..base + plane {
                    let d = dy.data()[i];
                    dx.data_mut()[i] = if cache.train {
                        // Full backward through the batch statistics.
                        g * is * (d - sum_dy / m - cache.xhat[i] * sum_dy_xhat / m)
                    } else {
                        // Running stats are constants in eval mode.
                        g * is * d
                    };
                }
            }
        }
        dx
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta, &self.running_mean, &self.running_var]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta, &mut self.running_mean, &mut self.running_var]
    }
}

// ---------------------------------------------------------------------------
// Global average pooling
// ---------------------------------------------------------------------------

pub struct GlobalAvgPool {
    name: String,
    in_shape: (usize, usize, usize, usize),
}

impl GlobalAvgPool {
    pub fn new(name: impl Into<String>) -> GlobalAvgPool {
        GlobalAvgPool { name: name.into(), in_shape: (0, 0, 0, 0) }
    }
}

impl Layer for GlobalAvgPool {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&mut self, x: &Tensor4, _train: bool) -> Tensor4 {
        let (n, c, h, w) = x.shape();
        self.in_shape = x.shape();
        let mut y = Tensor4::zeros(n, c, 1, 1);
        let plane = h * w;
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * plane;
                let s: f64 = x.data()[base..base + plane].iter().sum();
                y.data_mut()[ni * c + ci] = s / plane as f64;
            }
        }
        y
    }

    fn backward(&mut self, dy: &Tensor4, _accumulate: bool) -> Tensor4 {
        let (n, c, h, w) = self.in_shape;
        assert_eq!(dy.shape(), (n, c, 1, 1), "{}: dy shape", self.name);
        let mut dx = Tensor4::zeros(n, c, h, w);
        let plane = h * w;
        for ni in 0..n {
            for ci in 0..c {
                let g = dy.data()[ni * c + ci] / plane as f64;
                let base = (ni * c + ci) * plane;
                dx.data_mut()[base..base + plane].iter_mut().for_each(|v| *v = g);
            }
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

/// Fully connected layer over flattened `(n, c, 1, 1)` inputs.
pub struct Linear {
    name: String,
    in_f: usize,
    out_f: usize,
    weight: Param,
    bias: Param,
    cache: Option<Tensor4>,
}

impl Linear {
    pub fn new(
        name: impl Into<String>,
        in_f: usize,
        out_f: usize,
        rng: &mut ChaCha8Rng,
    ) -> Linear {
        let name = name.into();
        let weight =
            Param::new(format!("{name}.weight"), he_normal(rng, in_f, out_f * in_f), true);
        let bias = Param::new(format!("{name}.bias"), vec![0.0; out_f], true);
        Linear { name, in_f, out_f, weight, bias, cache: None }
    }

    /// Row `k` of the weight matrix: the class-`k` weights over channels.
    pub fn weight_rows(&self) -> (usize, usize, &[f64]) {
        (self.out_f, self.in_f, &self.weight.value)
    }
}

impl Layer for Linear {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&mut self, x: &Tensor4, _train: bool) -> Tensor4 {
        let (n, c, h, w) = x.shape();
        assert_eq!((c, h, w), (self.in_f, 1, 1), "{}: expects flattened input", self.name);
        let mut y = Tensor4::zeros(n, self.out_f, 1, 1);
        for ni in 0..n {
            let xr = x.sample(ni);
            for of in 0..self.out_f {
                let wr = &self.weight.value[of * self.in_f..(of + 1) * self.in_f];
                let dot: f64 = wr.iter().zip(xr).map(|(a, b)| a * b).sum();
                y.data_mut()[ni * self.out_f + of] = dot + self.bias.value[of];
            }
        }
        self.cache = Some(x.clone());
        y
    }

    fn backward(&mut self, dy: &Tensor4, accumulate: bool) -> Tensor4 {
        let x = self.cache.take().expect("linear backward without forward");
        let n = x.n();
        assert_eq!(dy.shape(), (n, self.out_f, 1, 1), "{}: dy shape", self.name);
        let mut dx = Tensor4::zeros(n, self.in_f, 1, 1);
        for ni in 0..n {
            let xr = x.sample(ni);
            let dyr = dy.sample(ni);
            for of in 0..self.out_f {
                let g = dyr[of];
                let wr = &self.weight.value[of * self.in_f..(of + 1) * self.in_f];
                for (i, (&wv, &xv)) in wr.iter().zip(xr).enumerate() {
                    dx.data_mut()[ni * self.in_f + i] += g * wv;
                    if accumulate {
                        self.weight.grad[of * self.in_f + i] += g * xv;
                    }
                }
                if accumulate {
                    self.bias.grad[of] += g;
                }
            }
        }
        dx
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

// ---------------------------------------------------------------------------
// Residual bottleneck
// ---------------------------------------------------------------------------

/// 1x1 -> 3x3 -> 1x1 residual block with optional projection shortcut and a
/// post-sum ReLU.
pub struct Bottleneck {
    name: String,
    main: Vec<Box<dyn Layer>>,
    shortcut: Vec<Box<dyn Layer>>,
    relu_mask: Vec<bool>,
}

impl Bottleneck {
    /// `in_c -> width (1x1) -> width (3x3, stride) -> out_c (1x1)`; the
    /// shortcut projects whenever shape changes.
    pub fn new(
        name: impl Into<String>,
        in_c: usize,
        width: usize,
        out_c: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Bottleneck {
        let name = name.into();
        let main: Vec<Box<dyn Layer>> = vec![
            Box::new(Conv2d::new(format!("{name}.conv1"), in_c, width, 1, 1, 0, false, rng)),
            Box::new(BatchNorm2d::new(format!("{name}.bn1"), width)),
            Box::new(Relu::new(format!("{name}.relu1"))),
            Box::new(Conv2d::new(format!("{name}.conv2"), width, width, 3, stride, 1, false, rng)),
            Box::new(BatchNorm2d::new(format!("{name}.bn2"), width)),
            Box::new(Relu::new(format!("{name}.relu2"))),
            Box::new(Conv2d::new(format!("{name}.conv3"), width, out_c, 1, 1, 0, false, rng)),
            Box::new(BatchNorm2d::new(format!("{name}.bn3"), out_c)),
        ];
        let shortcut: Vec<Box<dyn Layer>> = if stride != 1 || in_c != out_c {
            vec![
                Box::new(Conv2d::new(format!("{name}.down"), in_c, out_c, 1, stride, 0, false, rng)),
                Box::new(BatchNorm2d::new(format!("{name}.down_bn"), out_c)),
            ]
        } else {
            Vec::new()
        };
        Bottleneck { name, main, shortcut, relu_mask: Vec::new() }
    }
}

impl Layer for Bottleneck {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&mut self, x: &Tensor4, train: bool) -> Tensor4 {
        let mut m = x.clone();
        for l in &mut self.main {
            m = l.forward(&m, train);
        }
        let mut s = x.clone();
        for l in &mut self.shortcut {
            s = l.forward(&s, train);
        }
        m.add_assign(&s);
        self.relu_mask = m.data().iter().map(|&v| v > 0.0).collect();
        m.data_mut().iter_mut().for_each(|v| {
            if *v < 0.0 {
                *v = 0.0;
            }
        });
        m
    }

    fn backward(&mut self, dy: &Tensor4, accumulate: bool) -> Tensor4 {
        let mut d = dy.clone();
        for (g, &m) in d.data_mut().iter_mut().zip(&self.relu_mask) {
            if !m {
                *g = 0.0;
            }
        }
        let mut dm = d.clone();
        for l in self.main.iter_mut().rev() {
            dm = l.backward(&dm, accumulate);
        }
        let mut ds = d;
        for l in self.shortcut.iter_mut().rev() {
            ds = l.backward(&ds, accumulate);
        }
        dm.add_assign(&ds);
        dm
    }

    fn params(&self) -> Vec<&Param> {
        self.main.iter().chain(&self.shortcut).flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.main
            .iter_mut()
            .chain(&mut self.shortcut)
            .flat_map(|l| l.params_mut())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_tensor(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> Tensor4 {
        let data = (0..n * c * h * w).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        Tensor4::from_vec(n, c, h, w, data)
    }

    /// Central finite-difference check of dL/dx and all parameter
    /// gradients for an arbitrary layer, with L = sum(y * probe).
    fn gradcheck(layer: &mut dyn Layer, x: &Tensor4, train: bool, tol: f64) {
        let mut r = rng(77);
        let y0 = layer.forward(x, train);
        let probe: Vec<f64> = (0..y0.data().len()).map(|_| r.random::<f64>() * 2.0 - 1.0).collect();
        let dy = Tensor4::from_vec(y0.n(), y0.c(), y0.h(), y0.w(), probe.clone());
        for p in layer.params_mut() {
            p.zero_grad();
        }
        // Re-run forward so backward consumes a fresh cache.
        let _ = layer.forward(x, train);
        let dx = layer.backward(&dy, true);

        let loss = |layer: &mut dyn Layer, x: &Tensor4| -> f64 {
            let y = layer.forward(x, train);
            y.data().iter().zip(&probe).map(|(a, b)| a * b).sum()
        };

        let eps = 1e-5;
        // Input gradient, on a subsample of coordinates.
        for i in (0..x.data().len()).step_by((x.data().len() / 24).max(1)) {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let lp = loss(layer, &xp);
            xp.data_mut()[i] -= 2.0 * eps;
            let lm = loss(layer, &xp);
            let fd = (lp - lm) / (2.0 * eps);
            let an = dx.data()[i];
            assert!(
                (fd - an).abs() <= tol * (1.0 + fd.abs().max(an.abs())),
                "input grad mismatch at {i}: fd={fd} analytic={an}"
            );
        }
        // Parameter gradients. Params are cloned around the borrow of layer.
        let n_params = layer.params().len();
        for pi in 0..n_params {
            let (values, grads, trainable): (Vec<f64>, Vec<f64>, bool) = {
                let p = &layer.params()[pi];
                (p.value.clone(), p.grad.clone(), p.trainable)
            };
            if !trainable {
                continue;
            }
            for i in (0..values.len()).step_by((values.len() / 12).max(1)) {
                layer.params_mut()[pi].value[i] = values[i] + eps;
                let lp = loss(layer, x);
                layer.params_mut()[pi].value[i] = values[i] - eps;
                let lm = loss(layer, x);
                layer.params_mut()[pi].value[i] = values[i];
                let fd = (lp - lm) / (2.0 * eps);
                let an = grads[i];
                assert!(
                    (fd - an).abs() <= tol * (1.0 + fd.abs().max(an.abs())),
                    "param {pi} grad mismatch at {i}: fd={fd} analytic={an}"
                );
            }
        }
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let mut r = rng(1);
        let mut conv = Conv2d::new("c", 2, 3, 3, 1, 1, true, &mut r);
        let x = random_tensor(&mut r, 2, 2, 5, 5);
        let y = conv.forward(&x, false);
        assert_eq!(y.shape(), (2, 3, 5, 5));
        // Direct dot product at a few positions.
        let (out_c, in_c, k, pad) = (3usize, 2usize, 3usize, 1isize);
        for (ni, oc, oy, ox) in [(0, 0, 0, 0), (1, 2, 4, 4), (0, 1, 2, 3)] {
            let mut acc = conv.bias.as_ref().unwrap().value[oc];
            for ic in 0..in_c {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = oy as isize + ky as isize - pad;
                        let ix = ox as isize + kx as isize - pad;
                        if iy < 0 || ix < 0 || iy >= 5 || ix >= 5 {
                            continue;
                        }
                        let wv = conv.weight.value[((oc * in_c + ic) * k + ky) * k + kx];
                        acc += wv * x.get(ni, ic, iy as usize, ix as usize);
                    }
                }
            }
            let got = y.get(ni, oc, oy, ox);
            assert!((got - acc).abs() < 1e-12, "({ni},{oc},{oy},{ox}): {got} vs {acc}");
            let _ = out_c;
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut r = rng(2);
        let mut conv = Conv2d::new("c", 2, 4, 3, 1, 1, true, &mut r);
        let x = random_tensor(&mut r, 2, 2, 6, 6);
        gradcheck(&mut conv, &x, true, 1e-6);
    }

    #[test]
    fn strided_conv_gradients_match_finite_differences() {
        let mut r = rng(3);
        let mut conv = Conv2d::new("c", 3, 2, 3, 2, 1, false, &mut r);
        let x = random_tensor(&mut r, 2, 3, 7, 7);
        gradcheck(&mut conv, &x, true, 1e-6);
    }

    #[test]
    fn relu_masks_negative_gradient_paths() {
        let mut relu = Relu::new("r");
        let x = Tensor4::from_vec(1, 1, 1, 4, vec![-1.0, 0.0, 2.0, -0.5]);
        let y = relu.forward(&x, true);
        assert_eq!(y.data(), &[0.0, 0.0, 2.0, 0.0]);
        let dy = Tensor4::from_vec(1, 1, 1, 4, vec![1.0, 1.0, 1.0, 1.0]);
        let dx = relu.backward(&dy, true);
        assert_eq!(dx.data(), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn maxpool_forward_and_routing() {
        let mut pool = MaxPool2d::new("p", 2, 2, 0);
        let x = Tensor4::from_vec(1, 1, 2, 4, vec![1.0, 2.0, 5.0, 4.0, 3.0, 0.0, 5.0, 6.0]);
        let y = pool.forward(&x, true);
        assert_eq!(y.shape(), (1, 1, 1, 2));
        assert_eq!(y.data(), &[3.0, 6.0]);
        let dy = Tensor4::from_vec(1, 1, 1, 2, vec![1.0, 1.0]);
        let dx = pool.backward(&dy, true);
        assert_eq!(dx.data(), &[0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn maxpool_ties_route_to_first_in_scan_order() {
        let mut pool = MaxPool2d::new("p", 2, 2, 0);
        let x = Tensor4::from_vec(1, 1, 2, 2, vec![7.0, 7.0, 7.0, 7.0]);
        let _ = pool.forward(&x, true);
        let dy = Tensor4::from_vec(1, 1, 1, 1, vec![1.0]);
        let dx = pool.backward(&dy, true);
        assert_eq!(dx.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn padded_maxpool_ignores_out_of_bounds() {
        let mut pool = MaxPool2d::new("p", 3, 2, 1);
        let x = Tensor4::from_vec(1, 1, 2, 2, vec![-5.0, -6.0, -7.0, -8.0]);
        let y = pool.forward(&x, true);
        // Padding is virtual negative infinity, so maxima stay real values.
        assert!(y.data().iter().all(|v| v.is_finite()));
        assert_eq!(y.get(0, 0, 0, 0), -5.0);
    }

    #[test]
    fn batchnorm_train_normalizes_and_updates_running_stats() {
        let mut bn = BatchNorm2d::new("bn", 1);
        let x = Tensor4::from_vec(2, 1, 1, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let y = bn.forward(&x, true);
        let mean: f64 = y.data().iter().sum::<f64>() / 4.0;
        let var: f64 = y.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4, "normalized variance close to 1, got {var}");
        // mean 2.5, biased var 1.25, unbiased 5/3.
        assert!((bn.running_mean.value[0] - 0.25).abs() < 1e-12);
        assert!((bn.running_var.value[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_train_gradients_match_finite_differences() {
        let mut r = rng(4);
        let mut bn = BatchNorm2d::new("bn", 3);
        let x = random_tensor(&mut r, 4, 3, 3, 3);
        gradcheck(&mut bn, &x, true, 1e-5);
    }

    #[test]
    fn batchnorm_eval_gradients_match_finite_differences() {
        let mut r = rng(5);
        let mut bn = BatchNorm2d::new("bn", 3);
        // Push running stats away from the init first.
        let warm = random_tensor(&mut r, 4, 3, 3, 3);
        let _ = bn.forward(&warm, true);
        bn.cache = None;
        let x = random_tensor(&mut r, 2, 3, 3, 3);
        gradcheck(&mut bn, &x, false, 1e-6);
    }

    #[test]
    fn gap_averages_each_plane() {
        let mut gap = GlobalAvgPool::new("g");
        let x = Tensor4::from_vec(1, 2, 1, 2, vec![1.0, 3.0, 10.0, 20.0]);
        let y = gap.forward(&x, true);
        assert_eq!(y.data(), &[2.0, 15.0]);
        let dy = Tensor4::from_vec(1, 2, 1, 1, vec![4.0, 6.0]);
        let dx = gap.backward(&dy, true);
        assert_eq!(dx.data(), &[2.0, 2.0, 3.0, 3.0]);
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut r = rng(6);
        let mut lin = Linear::new("fc", 5, 3, &mut r);
        let x = random_tensor(&mut r, 3, 5, 1, 1);
        gradcheck(&mut lin, &x, true, 1e-6);
    }

    #[test]
    fn bottleneck_identity_and_projection_gradcheck() {
        let mut r = rng(7);
        // Identity shortcut.
        let mut b = Bottleneck::new("b", 4, 2, 4, 1, &mut r);
        let x = random_tensor(&mut r, 2, 4, 4, 4);
        gradcheck(&mut b, &x, true, 1e-5);
        // Projection shortcut with stride.
        let mut b2 = Bottleneck::new("b2", 4, 2, 8, 2, &mut r);
        let x2 = random_tensor(&mut r, 2, 4, 4, 4);
        gradcheck(&mut b2, &x2, true, 1e-5);
    }

    #[test]
    fn backward_without_accumulate_leaves_param_grads_untouched() {
        let mut r = rng(8);
        let mut conv = Conv2d::new("c", 1, 2, 3, 1, 1, true, &mut r);
        let x = random_tensor(&mut r, 1, 1, 4, 4);
        let y = conv.forward(&x, false);
        let dy = Tensor4::zeros(y.n(), y.c(), y.h(), y.w());
        let _ = conv.backward(&dy, false);
        assert!(conv.weight.grad.iter().all(|&g| g == 0.0));
        assert!(conv.bias.as_ref().unwrap().grad.iter().all(|&g| g == 0.0));
    }
}
