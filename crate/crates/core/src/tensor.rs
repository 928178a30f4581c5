//! Dense tensors and the real-valued neural primitives.
//!
//! Every kernel here is a plain function over [`Tensor`] values. The autograd
//! tape in [`crate::autograd`] records which kernel produced a value and calls
//! the matching `*_backward` function during the reverse sweep.
//!
//! Two convolution routes exist on purpose: [`conv2d_ref`] is a direct
//! nested-loop cross-correlation used as the oracle, and [`conv2d`] is the
//! im2col + GEMM path used for training.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {numel} values but {} were given",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
    }

    /// Samples from `N(0, std^2)`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
    }

    /// Samples uniformly from `[-bound, bound)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| rng.random_range(-bound..bound))
    }

    /// Uniform random signs, `+1` or `-1`.
    pub fn random_signs<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        Self::from_fn(shape, |_| if rng.random::<bool>() { 1.0 } else { -1.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [a, b] => Ok((a, b)),
            _ => Err(Error::shape(format!(
                "expected a rank-2 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c, d] => Ok((a, b, c, d)),
            _ => Err(Error::shape(format!(
                "expected a rank-4 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.expect_same_shape(other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|x| x * s)
    }

    /// `self += alpha * other`.
    pub fn add_scaled_in_place(&mut self, other: &Tensor, alpha: f64) -> Result<()> {
        self.expect_same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.expect_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn at4(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        let (_, cs, hs, ws) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        self.data[((n * cs + c) * hs + h) * ws + w]
    }

    /// Rows `start..end` along the leading axis.
    pub fn slice_outer(&self, start: usize, end: usize) -> Self {
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Tensor {
            shape,
            data: self.data[start * inner..end * inner].to_vec(),
        }
    }

    /// Gathers rows along the leading axis.
    pub fn select_outer(&self, indices: &[usize]) -> Self {
        let inner: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            data.extend_from_slice(&self.data[i * inner..(i + 1) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Tensor { shape, data }
    }

    pub fn concat_outer(parts: &[Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let mut shape = first.shape.clone();
        let mut data = Vec::new();
        shape[0] = 0;
        for p in parts {
            if p.shape[1..] != first.shape[1..] {
                return Err(Error::shape(format!(
                    "concat mismatch {:?} vs {:?}",
                    p.shape, first.shape
                )));
            }
            shape[0] += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor { shape, data })
    }

    pub(crate) fn expect_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }
}

pub fn conv_output_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::invalid("stride must be at least 1"));
    }
    if input + 2 * pad < kernel {
        return Err(Error::shape(format!(
            "kernel {kernel} larger than padded input {}",
            input + 2 * pad
        )));
    }
    Ok((input + 2 * pad - kernel) / stride + 1)
}

struct ConvGeometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    oh: usize,
    ow: usize,
}

fn conv_geometry(input: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Result<ConvGeometry> {
    let (n, c, h, w) = input.dims4()?;
    let (o, wc, kh, kw) = weight.dims4()?;
    if wc != c {
        return Err(Error::shape(format!(
            "conv input has {c} channels but weight expects {wc}"
        )));
    }
    if kh != kw {
        return Err(Error::shape(format!("non-square kernel {kh}x{kw}")));
    }
    let oh = conv_output_extent(h, kh, stride, pad)?;
    let ow = conv_output_extent(w, kw, stride, pad)?;
    Ok(ConvGeometry {
        n,
        c,
        h,
        w,
        o,
        k: kh,
        oh,
        ow,
    })
}

/// Direct zero-padded cross-correlation. Slow; kept as the reference.
pub fn conv2d_ref(input: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = conv_geometry(input, weight, stride, pad)?;
    let mut out = Tensor::zeros(&[g.n, g.o, g.oh, g.ow]);
    let x = input.data();
    let wt = weight.data();
    let mut idx = 0;
    for n in 0..g.n {
        for o in 0..g.o {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let mut acc = 0.0;
                    for c in 0..g.c {
                        for ky in 0..g.k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            for kx in 0..g.k {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= g.w as isize {
                                    continue;
                                }
                                let xv = x[((n * g.c + c) * g.h + iy as usize) * g.w + ix as usize];
                                let wv = wt[((o * g.c + c) * g.k + ky) * g.k + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out.data[idx] = acc;
                    idx += 1;
                }
            }
        }
    }
    Ok(out)
}

fn im2col(x: &[f64], g: &ConvGeometry, stride: usize, pad: usize, cols: &mut [f64]) {
    let p = g.oh * g.ow;
    for c in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..][..g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeometry, stride: usize, pad: usize, dx: &mut [f64]) {
    let p = g.oh * g.ow;
    for c in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dx[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c = alpha * a * b + beta * c` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    debug_assert!(m == 0 || k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(k == 0 || n == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: the asserted extents bound every index dgemm touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
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
        );
    }
}

fn is_pointwise(g: &ConvGeometry, stride: usize, pad: usize) -> bool {
    g.k == 1 && stride == 1 && pad == 0
}

/// Zero-padded cross-correlation through im2col + GEMM.
pub fn conv2d(input: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = conv_geometry(input, weight, stride, pad)?;
    let kdim = g.c * g.k * g.k;
    let p = g.oh * g.ow;
    let mut out = Tensor::zeros(&[g.n, g.o, g.oh, g.ow]);
    let mut cols = vec![0.0; kdim * p];
    let plane = g.c * g.h * g.w;
    for n in 0..g.n {
        let x = &input.data[n * plane..(n + 1) * plane];
        let b: &[f64] = if is_pointwise(&g, stride, pad) {
            x
        } else {
            im2col(x, &g, stride, pad, &mut cols);
            &cols
        };
        let dst = &mut out.data[n * g.o * p..(n + 1) * g.o * p];
        gemm(g.o, kdim, p, weight.data(), (kdim, 1), b, (p, 1), 0.0, dst);
    }
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to input and weight.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
    need_input_grad: bool,
) -> Result<(Option<Tensor>, Tensor)> {
    let g = conv_geometry(input, weight, stride, pad)?;
    if grad_out.shape() != [g.n, g.o, g.oh, g.ow] {
        return Err(Error::shape(format!(
            "conv grad shape {:?} does not match output [{}, {}, {}, {}]",
            grad_out.shape(),
            g.n,
            g.o,
            g.oh,
            g.ow
        )));
    }
    let kdim = g.c * g.k * g.k;
    let p = g.oh * g.ow;
    let plane = g.c * g.h * g.w;
    let pointwise = is_pointwise(&g, stride, pad);
    let mut grad_w = Tensor::zeros(weight.shape());
    let mut grad_x = need_input_grad.then(|| Tensor::zeros(input.shape()));
    let mut cols = vec![0.0; kdim * p];
    let mut dcols = vec![0.0; kdim * p];
    for n in 0..g.n {
        let x = &input.data[n * plane..(n + 1) * plane];
        let dy = &grad_out.data[n * g.o * p..(n + 1) * g.o * p];
        let b: &[f64] = if pointwise {
            x
        } else {
            im2col(x, &g, stride, pad, &mut cols);
            &cols
        };
        // dW[o, r] += sum_p dY[o, p] * cols[r, p]
        gemm(g.o, p, kdim, dy, (p, 1), b, (1, p), 1.0, &mut grad_w.data);
        if let Some(gx) = grad_x.as_mut() {
            let dst = &mut gx.data[n * plane..(n + 1) * plane];
            if pointwise {
                gemm(kdim, g.o, p, weight.data(), (1, kdim), dy, (p, 1), 0.0, dst);
            } else {
                gemm(kdim, g.o, p, weight.data(), (1, kdim), dy, (p, 1), 0.0, &mut dcols);
                col2im(&dcols, &g, stride, pad, dst);
            }
        }
    }
    Ok((grad_x, grad_w))
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BatchNormConfig {
    pub eps: f64,
    pub momentum: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        BatchNormConfig {
            eps: 1e-5,
            momentum: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

/// Forward result of [`batchnorm2d`]; `normalized` and `inv_std` are what the
/// backward pass needs.
#[derive(Clone, Debug)]
pub struct BatchNormOutput {
    pub output: Tensor,
    pub normalized: Tensor,
    pub inv_std: Vec<f64>,
}

/// Per-channel batch normalization over `[N, C, H, W]`.
///
/// Train mode normalizes with the biased batch variance and folds the
/// unbiased estimate into `stats` with momentum; eval mode reads `stats`.
pub fn batchnorm2d(
    input: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    stats: &mut RunningStats,
    mode: Mode,
    config: BatchNormConfig,
) -> Result<BatchNormOutput> {
    let (n, c, h, w) = input.dims4()?;
    if gamma.len() != c || beta.len() != c || stats.mean.len() != c || stats.var.len() != c {
        return Err(Error::shape(format!(
            "batchnorm over {c} channels got parameters of length {}/{}/{}",
            gamma.len(),
            beta.len(),
            stats.mean.len()
        )));
    }
    let hw = h * w;
    let count = n * hw;
    let x = input.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    match mode {
        Mode::Train => {
            for ch in 0..c {
                let mut s = 0.0;
                for s_i in 0..n {
                    s += x[(s_i * c + ch) * hw..][..hw].iter().sum::<f64>();
                }
                let m = s / count as f64;
                let mut v = 0.0;
                for s_i in 0..n {
                    v += x[(s_i * c + ch) * hw..][..hw]
                        .iter()
                        .map(|&xv| (xv - m) * (xv - m))
                        .sum::<f64>();
                }
                mean[ch] = m;
                var[ch] = v / count as f64;
                let unbiased = if count > 1 {
                    v / (count - 1) as f64
                } else {
                    var[ch]
                };
                stats.mean[ch] = (1.0 - config.momentum) * stats.mean[ch] + config.momentum * m;
                stats.var[ch] =
                    (1.0 - config.momentum) * stats.var[ch] + config.momentum * unbiased;
            }
        }
        Mode::Eval => {
            mean.copy_from_slice(&stats.mean);
            var.copy_from_slice(&stats.var);
        }
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + config.eps).sqrt()).collect();
    let mut normalized = Tensor::zeros(input.shape());
    let mut output = Tensor::zeros(input.shape());
    for s_i in 0..n {
        for ch in 0..c {
            let base = (s_i * c + ch) * hw;
            for i in base..base + hw {
                let xh = (x[i] - mean[ch]) * inv_std[ch];
                normalized.data[i] = xh;
                output.data[i] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    Ok(BatchNormOutput {
        output,
        normalized,
        inv_std,
    })
}

/// Returns `(grad_input, grad_gamma, grad_beta)`.
pub fn batchnorm2d_backward(
    grad_out: &Tensor,
    normalized: &Tensor,
    inv_std: &[f64],
    gamma: &[f64],
    mode: Mode,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    grad_out.expect_same_shape(normalized)?;
    let (n, c, h, w) = grad_out.dims4()?;
    let hw = h * w;
    let count = (n * hw) as f64;
    let dy = grad_out.data();
    let xh = normalized.data();
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for s_i in 0..n {
        for ch in 0..c {
            let base = (s_i * c + ch) * hw;
            for i in base..base + hw {
                dgamma[ch] += dy[i] * xh[i];
                dbeta[ch] += dy[i];
            }
        }
    }
    let mut dx = Tensor::zeros(grad_out.shape());
    for s_i in 0..n {
        for ch in 0..c {
            let base = (s_i * c + ch) * hw;
            let k = gamma[ch] * inv_std[ch];
            for i in base..base + hw {
                dx.data[i] = match mode {
                    Mode::Train => {
                        k * (dy[i] - dbeta[ch] / count - xh[i] * dgamma[ch] / count)
                    }
                    Mode::Eval => k * dy[i],
                };
            }
        }
    }
    Ok((dx, dgamma, dbeta))
}

fn channel_count(input: &Tensor) -> usize {
    if input.rank() >= 2 {
        input.shape()[1]
    } else {
        1
    }
}

fn spatial_size(input: &Tensor) -> usize {
    input.shape().iter().skip(2).product()
}

fn check_slope(input: &Tensor, slope: &[f64]) -> Result<()> {
    let c = channel_count(input);
    if slope.len() != c && slope.len() != 1 {
        return Err(Error::shape(format!(
            "prelu slope of length {} for {c} channels",
            slope.len()
        )));
    }
    Ok(())
}

/// PReLU with a per-channel or single shared slope. Channels are axis 1.
pub fn prelu(input: &Tensor, slope: &[f64]) -> Result<Tensor> {
    check_slope(input, slope)?;
    let c = channel_count(input);
    let hw = spatial_size(input);
    let mut out = input.clone();
    for (i, v) in out.data.iter_mut().enumerate() {
        if *v < 0.0 {
            let ch = if slope.len() == 1 { 0 } else { (i / hw) % c };
            *v *= slope[ch];
        }
    }
    Ok(out)
}

/// Returns `(grad_input, grad_slope)`.
pub fn prelu_backward(input: &Tensor, slope: &[f64], grad_out: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    check_slope(input, slope)?;
    input.expect_same_shape(grad_out)?;
    let c = channel_count(input);
    let hw = spatial_size(input);
    let mut dx = grad_out.clone();
    let mut dslope = vec![0.0; slope.len()];
    for (i, (&x, d)) in input.data.iter().zip(dx.data.iter_mut()).enumerate() {
        if x < 0.0 {
            let ch = if slope.len() == 1 { 0 } else { (i / hw) % c };
            dslope[ch] += x * *d;
            *d *= slope[ch];
        }
    }
    Ok((dx, dslope))
}

pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    let hw = h * w;
    if hw == 0 {
        return Err(Error::shape("global pooling over empty spatial extent"));
    }
    let data = input
        .data
        .chunks_exact(hw)
        .map(|plane| plane.iter().sum::<f64>() / hw as f64)
        .collect();
    Tensor::new(vec![n, c], data)
}

pub fn global_avg_pool_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let hw: usize = input_shape[2..].iter().product();
    let mut dx = Tensor::zeros(input_shape);
    for (plane, &g) in dx.data.chunks_exact_mut(hw).zip(grad_out.data()) {
        plane.fill(g / hw as f64);
    }
    Ok(dx)
}

/// Max pooling with zero-free padding (padded taps never win).
/// Returns the output and the flat argmax index for every output element.
pub fn max_pool2d(input: &Tensor, kernel: usize, stride: usize, pad: usize) -> Result<(Tensor, Vec<usize>)> {
    let (n, c, h, w) = input.dims4()?;
    let oh = conv_output_extent(h, kernel, stride, pad)?;
    let ow = conv_output_extent(w, kernel, stride, pad)?;
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut argmax = vec![0; out.numel()];
    let mut idx = 0;
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = base;
                for ky in 0..kernel {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kernel {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let i = base + iy as usize * w + ix as usize;
                        if input.data[i] > best {
                            best = input.data[i];
                            best_i = i;
                        }
                    }
                }
                out.data[idx] = best;
                argmax[idx] = best_i;
                idx += 1;
            }
        }
    }
    Ok((out, argmax))
}

/// `x W^T + b` for `x: [N, D]`, `W: [E, D]`, `b: [E]`.
pub fn linear(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, d) = input.dims2()?;
    let (e, wd) = weight.dims2()?;
    if wd != d || bias.numel() != e {
        return Err(Error::shape(format!(
            "linear: input [{n}, {d}], weight {:?}, bias {:?}",
            weight.shape(),
            bias.shape()
        )));
    }
    let mut out = Tensor::zeros(&[n, e]);
    for row in 0..n {
        out.data[row * e..(row + 1) * e].copy_from_slice(bias.data());
    }
    gemm(n, d, e, input.data(), (d, 1), weight.data(), (1, d), 1.0, &mut out.data);
    Ok(out)
}

/// Returns `(grad_input, grad_weight, grad_bias)`.
pub fn linear_backward(input: &Tensor, weight: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, d) = input.dims2()?;
    let (e, _) = weight.dims2()?;
    if grad_out.shape() != [n, e] {
        return Err(Error::shape(format!(
            "linear grad {:?} vs output [{n}, {e}]",
            grad_out.shape()
        )));
    }
    let mut dx = Tensor::zeros(&[n, d]);
    gemm(n, e, d, grad_out.data(), (e, 1), weight.data(), (d, 1), 0.0, &mut dx.data);
    let mut dw = Tensor::zeros(&[e, d]);
    gemm(e, n, d, grad_out.data(), (1, e), input.data(), (d, 1), 0.0, &mut dw.data);
    let mut db = Tensor::zeros(&[e]);
    for row in grad_out.data.chunks_exact(e) {
        for (b, &g) in db.data.iter_mut().zip(row) {
            *b += g;
        }
    }
    Ok((dx, dw, db))
}

/// Row-wise softmax of `[N, K]` logits after dividing by `temperature`.
pub fn softmax_rows(logits: &Tensor, temperature: f64) -> Result<Tensor> {
    let (_, k) = logits.dims2()?;
    let mut out = logits.clone();
    for row in out.data.chunks_exact_mut(k) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = ((*v - max) / temperature).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    Ok(out)
}

pub fn log_softmax_rows(logits: &Tensor, temperature: f64) -> Result<Tensor> {
    let (_, k) = logits.dims2()?;
    let mut out = logits.clone();
    for row in out.data.chunks_exact_mut(k) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = row
            .iter()
            .map(|&v| ((v - max) / temperature).exp())
            .sum::<f64>()
            .ln();
        for v in row.iter_mut() {
            *v = (*v - max) / temperature - lse;
        }
    }
    Ok(out)
}

/// Class targets for cross-entropy.
#[derive(Clone, Debug)]
pub enum Labels<'a> {
    Hard(&'a [usize]),
    Soft(&'a Tensor),
}

/// Converts labels to a `[N, K]` probability matrix.
pub fn label_matrix(labels: &Labels<'_>, n: usize, k: usize) -> Result<Tensor> {
    match labels {
        Labels::Hard(idx) => {
            if idx.len() != n {
                return Err(Error::shape(format!("{} labels for {n} rows", idx.len())));
            }
            let mut t = Tensor::zeros(&[n, k]);
            for (row, &l) in idx.iter().enumerate() {
                if l >= k {
                    return Err(Error::invalid(format!("label {l} out of range for {k} classes")));
                }
                t.data[row * k + l] = 1.0;
            }
            Ok(t)
        }
        Labels::Soft(t) => {
            if t.shape() != [n, k] {
                return Err(Error::shape(format!(
                    "soft labels {:?} for logits [{n}, {k}]",
                    t.shape()
                )));
            }
            Ok((*t).clone())
        }
    }
}

/// Mean over the batch of `-sum_k y_k log softmax(logits)_k`.
/// Returns the loss and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &Labels<'_>) -> Result<(f64, Tensor)> {
    let (n, k) = logits.dims2()?;
    if k < 2 {
        return Err(Error::shape("cross-entropy needs at least two classes"));
    }
    let y = label_matrix(labels, n, k)?;
    let logp = log_softmax_rows(logits, 1.0)?;
    let loss = -logp
        .data
        .iter()
        .zip(&y.data)
        .map(|(lp, yv)| if *yv == 0.0 { 0.0 } else { yv * lp })
        .sum::<f64>()
        / n as f64;
    let mut grad = Tensor::zeros(&[n, k]);
    for row in 0..n {
        let ys = &y.data[row * k..(row + 1) * k];
        let mass: f64 = ys.iter().sum();
        for j in 0..k {
            let p = logp.data[row * k + j].exp();
            grad.data[row * k + j] = (p * mass - ys[j]) / n as f64;
        }
    }
    Ok((loss, grad))
}
