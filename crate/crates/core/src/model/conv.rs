//! Batched 2-D convolution via im2col + GEMM, with hand-written backward.

use serde::{Deserialize, Serialize};

/// Activations stored channel-major across the batch: `[C][N][H][W]`.
///
/// This layout makes the output of one convolution GEMM directly usable as
/// the input of the next im2col without transposes.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, n: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            n,
            h,
            w,
            data: vec![0.0; c * n * h * w],
        }
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        (self.c, self.n, self.h, self.w) == (other.c, other.n, other.h, other.w)
    }

    /// Elements of one sample (`C·H·W`).
    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    /// Copies sample `i` out in `[C][H][W]` order.
    pub fn sample(&self, i: usize) -> Vec<f64> {
        let plane = self.h * self.w;
        let mut out = Vec::with_capacity(self.sample_len());
        for ch in 0..self.c {
            let base = (ch * self.n + i) * plane;
            out.extend_from_slice(&self.data[base..base + plane]);
        }
        out
    }

    /// Writes sample `i` from `[C][H][W]` order.
    pub fn set_sample(&mut self, i: usize, values: &[f64]) {
        let plane = self.h * self.w;
        for ch in 0..self.c {
            let base = (ch * self.n + i) * plane;
            self.data[base..base + plane].copy_from_slice(&values[ch * plane..(ch + 1) * plane]);
        }
    }

    /// Stacks single-sample tensors (each `n == 1`) along the batch axis.
    pub fn stack(samples: &[&Tensor]) -> Tensor {
        let first = samples[0];
        let mut out = Tensor::zeros(first.c, samples.len(), first.h, first.w);
        for (i, s) in samples.iter().enumerate() {
            debug_assert_eq!((s.c, s.h, s.w, s.n), (first.c, first.h, first.w, 1));
            out.set_sample(i, &s.data);
        }
        out
    }

    /// Concatenates two batches of equal per-sample shape.
    pub fn concat(a: &Tensor, b: &Tensor) -> Tensor {
        if a.n == 0 {
            return b.clone();
        }
        if b.n == 0 {
            return a.clone();
        }
        let mut out = Tensor::zeros(a.c, a.n + b.n, a.h, a.w);
        for i in 0..a.n {
            out.set_sample(i, &a.sample(i));
        }
        for i in 0..b.n {
            out.set_sample(a.n + i, &b.sample(i));
        }
        out
    }

    /// Samples `start..end` as a new batch.
    pub fn slice(&self, start: usize, end: usize) -> Tensor {
        let mut out = Tensor::zeros(self.c, end - start, self.h, self.w);
        for i in start..end {
            out.set_sample(i - start, &self.sample(i));
        }
        out
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        debug_assert!(self.same_shape(other));
        let mut out = self.clone();
        for (a, b) in out.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvSpec {
    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.kernel * self.kernel
    }

    fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn out_size(&self, size: usize) -> usize {
        (size + 2 * self.pad() - self.kernel) / self.stride + 1
    }

    fn col_rows(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }
}

fn im2col(spec: &ConvSpec, x: &Tensor, oh: usize, ow: usize) -> Vec<f64> {
    let k = spec.kernel;
    let pad = spec.pad() as isize;
    let p = x.n * oh * ow;
    let mut col = vec![0.0; spec.col_rows() * p];
    for c in 0..spec.cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                for b in 0..x.n {
                    let src = &x.data[(c * x.n + b) * x.h * x.w..(c * x.n + b + 1) * x.h * x.w];
                    for oy in 0..oh {
                        let iy = (oy * spec.stride) as isize + ky as isize - pad;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * x.w..(iy as usize + 1) * x.w];
                        let out = &mut dst[(b * oh + oy) * ow..(b * oh + oy + 1) * ow];
                        for (ox, o) in out.iter_mut().enumerate() {
                            let ix = (ox * spec.stride) as isize + kx as isize - pad;
                            if ix >= 0 && ix < x.w as isize {
                                *o = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im(spec: &ConvSpec, dcol: &[f64], dx: &mut Tensor, oh: usize, ow: usize) {
    let k = spec.kernel;
    let pad = spec.pad() as isize;
    let p = dx.n * oh * ow;
    let (h, w, n) = (dx.h, dx.w, dx.n);
    for c in 0..spec.cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &dcol[row * p..(row + 1) * p];
                for b in 0..n {
                    let dst = &mut dx.data[(c * n + b) * h * w..(c * n + b + 1) * h * w];
                    for oy in 0..oh {
                        let iy = (oy * spec.stride) as isize + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let g = &src[(b * oh + oy) * ow..(b * oh + oy + 1) * ow];
                        for (ox, v) in g.iter().enumerate() {
                            let ix = (ox * spec.stride) as isize + kx as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                dst[iy as usize * w + ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Forward pass. Returns the output and the im2col matrix needed by backward.
pub fn conv_forward(spec: &ConvSpec, weight: &[f64], bias: &[f64], x: &Tensor) -> (Tensor, Vec<f64>) {
    debug_assert_eq!(x.c, spec.cin);
    let oh = spec.out_size(x.h);
    let ow = spec.out_size(x.w);
    let col = im2col(spec, x, oh, ow);
    let p = x.n * oh * ow;
    let k = spec.col_rows();
    let mut out = Tensor::zeros(spec.cout, x.n, oh, ow);
    for (co, b) in bias.iter().enumerate() {
        out.data[co * p..(co + 1) * p].fill(*b);
    }
    // SAFETY: slices are sized m×k, k×n and m×n with the given row-major strides.
    unsafe {
        matrixmultiply::dgemm(
            spec.cout,
            k,
            p,
            1.0,
            weight.as_ptr(),
            k as isize,
            1,
            col.as_ptr(),
            p as isize,
            1,
            1.0,
            out.data.as_mut_ptr(),
            p as isize,
            1,
        );
    }
    (out, col)
}

/// Backward pass. Accumulates weight/bias gradients when `param_grads` is
/// given and returns the input gradient when `need_input` is set.
pub fn conv_backward(
    spec: &ConvSpec,
    weight: &[f64],
    col: &[f64],
    input_shape: (usize, usize, usize),
    grad_out: &Tensor,
    param_grads: Option<(&mut [f64], &mut [f64])>,
    need_input: bool,
) -> Option<Tensor> {
    let (n, h, w) = input_shape;
    let (oh, ow) = (grad_out.h, grad_out.w);
    let p = n * oh * ow;
    let k = spec.col_rows();
    if let Some((dw, db)) = param_grads {
        // SAFETY: dOut is cout×p, col viewed transposed is p×k, dW is cout×k.
        unsafe {
            matrixmultiply::dgemm(
                spec.cout,
                p,
                k,
                1.0,
                grad_out.data.as_ptr(),
                p as isize,
                1,
                col.as_ptr(),
                1,
                p as isize,
                1.0,
                dw.as_mut_ptr(),
                k as isize,
                1,
            );
        }
        for (co, d) in db.iter_mut().enumerate() {
            *d += grad_out.data[co * p..(co + 1) * p].iter().sum::<f64>();
        }
    }
    if !need_input {
        return None;
    }
    let mut dcol = vec![0.0; k * p];
    // SAFETY: Wᵀ is k×cout (column-major view of W), dOut cout×p, dcol k×p.
    unsafe {
        matrixmultiply::dgemm(
            k,
            spec.cout,
            p,
            1.0,
            weight.as_ptr(),
            1,
            k as isize,
            grad_out.data.as_ptr(),
            p as isize,
            1,
            0.0,
            dcol.as_mut_ptr(),
            p as isize,
            1,
        );
    }
    let mut dx = Tensor::zeros(spec.cin, n, h, w);
    col2im(spec, &dcol, &mut dx, oh, ow);
    Some(dx)
}
