//! Dense NCHW tensors and trainable parameters.

/// A dense rank-4 tensor in NCHW order, the working currency of the model
/// stack. Values are `f64` throughout so finite-difference checks and the
/// math layer share one precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Tensor4 {
        assert!(n > 0 && c > 0 && h > 0 && w > 0, "tensor dims must be nonzero");
        Tensor4 { n, c, h, w, data: vec![0.0; n * c * h * w] }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Tensor4 {
        assert!(n > 0 && c > 0 && h > 0 && w > 0, "tensor dims must be nonzero");
        assert_eq!(data.len(), n * c * h * w, "data length must match dims");
        Tensor4 { n, c, h, w, data }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn c(&self) -> usize {
        self.c
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    /// Elements per sample.
    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let s = self.sample_len();
        &self.data[i * s..(i + 1) * s]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [f64] {
        let s = self.sample_len();
        &mut self.data[i * s..(i + 1) * s]
    }

    #[inline]
    pub fn idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f64) {
        let i = self.idx(n, c, y, x);
        self.data[i] = v;
    }

    /// Elementwise sum into `self`; shapes must agree.
    pub fn add_assign(&mut self, other: &Tensor4) {
        assert_eq!(self.shape(), other.shape(), "shape mismatch in add_assign");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }
}

/// One named parameter tensor with its gradient accumulator.
///
/// Non-trainable params (batch-norm running statistics) ride along so the
/// checkpoint format is uniform; the optimizer skips them.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    pub trainable: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Vec<f64>, trainable: bool) -> Param {
        let grad = vec![0.0; value.len()];
        Param { name: name.into(), value, grad, trainable }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}
