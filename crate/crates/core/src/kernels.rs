//! Forward and backward kernels shared by the spiking and conventional networks.
//!
//! All kernels are pure functions. No bias terms exist anywhere.

use crate::error::{shape_err, Result};
use crate::tensor::{Real, Tensor};

/// Square-kernel 2D convolution geometry (cross-correlation, no flip).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel_size: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel_size,
            stride: 1,
            padding: 0,
        }
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    /// `floor((m + 2p - ks) / stride) + 1`, or an error when non-positive.
    pub fn output_side(&self, side: usize) -> Result<usize> {
        let padded = side + 2 * self.padding;
        if self.stride == 0 || self.kernel_size == 0 || padded < self.kernel_size {
            return Err(shape_err(format!(
                "conv {self:?} does not fit input side {side}"
            )));
        }
        Ok((padded - self.kernel_size) / self.stride + 1)
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel_size, self.kernel_size]
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_size * self.kernel_size
    }
}

struct ConvGeometry {
    batch: usize,
    height: usize,
    width: usize,
    out_h: usize,
    out_w: usize,
}

fn conv_geometry<R: Real>(input: &Tensor<R>, weights: &Tensor<R>, spec: &ConvSpec) -> Result<ConvGeometry> {
    let shape = input.shape();
    if shape.len() != 4 {
        return Err(shape_err(format!("conv input must be NCHW, got {shape:?}")));
    }
    if shape[1] != spec.in_channels {
        return Err(shape_err(format!(
            "conv expects {} input channels, got {}",
            spec.in_channels, shape[1]
        )));
    }
    if weights.shape() != spec.weight_shape() {
        return Err(shape_err(format!(
            "conv weights {:?} do not match spec {:?}",
            weights.shape(),
            spec.weight_shape()
        )));
    }
    Ok(ConvGeometry {
        batch: shape[0],
        height: shape[2],
        width: shape[3],
        out_h: spec.output_side(shape[2])?,
        out_w: spec.output_side(shape[3])?,
    })
}

fn im2col<R: Real>(image: &[R], g: &ConvGeometry, spec: &ConvSpec, col: &mut [R]) {
    let ks = spec.kernel_size;
    let positions = g.out_h * g.out_w;
    for c in 0..spec.in_channels {
        let plane = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..ks {
            for kx in 0..ks {
                let row = (c * ks + ky) * ks + kx;
                let dst = &mut col[row * positions..(row + 1) * positions];
                for oy in 0..g.out_h {
                    let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(R::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                        *v = if ix < 0 || ix >= g.width as isize {
                            R::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<R: Real>(col: &[R], g: &ConvGeometry, spec: &ConvSpec, image: &mut [R]) {
    let ks = spec.kernel_size;
    let positions = g.out_h * g.out_w;
    for c in 0..spec.in_channels {
        let plane = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..ks {
            for kx in 0..ks {
                let row = (c * ks + ky) * ks + kx;
                let src = &col[row * positions..(row + 1) * positions];
                for oy in 0..g.out_h {
                    let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<R: Real>(input: &Tensor<R>, weights: &Tensor<R>, spec: &ConvSpec) -> Result<Tensor<R>> {
    let g = conv_geometry(input, weights, spec)?;
    let k = spec.patch_len();
    let positions = g.out_h * g.out_w;
    let in_len = spec.in_channels * g.height * g.width;
    let out_len = spec.out_channels * positions;
    let mut out = Tensor::zeros(&[g.batch, spec.out_channels, g.out_h, g.out_w]);
    let mut col = vec![R::zero(); k * positions];
    for n in 0..g.batch {
        im2col(&input.data()[n * in_len..(n + 1) * in_len], &g, spec, &mut col);
        R::gemm(
            spec.out_channels,
            k,
            positions,
            R::one(),
            weights.data(),
            (k as isize, 1),
            &col,
            (positions as isize, 1),
            R::zero(),
            &mut out.data_mut()[n * out_len..(n + 1) * out_len],
            positions,
        );
    }
    Ok(out)
}

/// Returns `(grad_input, grad_weights)`.
pub fn conv2d_backward<R: Real>(
    grad_out: &Tensor<R>,
    cached_input: &Tensor<R>,
    weights: &Tensor<R>,
    spec: &ConvSpec,
) -> Result<(Tensor<R>, Tensor<R>)> {
    let (gi, gw) = conv2d_backward_impl(grad_out, cached_input, weights, spec, true)?;
    Ok((gi.expect("input gradient requested"), gw))
}

pub(crate) fn conv2d_backward_impl<R: Real>(
    grad_out: &Tensor<R>,
    cached_input: &Tensor<R>,
    weights: &Tensor<R>,
    spec: &ConvSpec,
    want_input: bool,
) -> Result<(Option<Tensor<R>>, Tensor<R>)> {
    let g = conv_geometry(cached_input, weights, spec)?;
    let expected = [g.batch, spec.out_channels, g.out_h, g.out_w];
    if grad_out.shape() != expected {
        return Err(shape_err(format!(
            "conv grad_out {:?} does not match forward output {expected:?}",
            grad_out.shape()
        )));
    }
    let k = spec.patch_len();
    let positions = g.out_h * g.out_w;
    let in_len = spec.in_channels * g.height * g.width;
    let out_len = spec.out_channels * positions;
    let mut grad_w = Tensor::zeros(&spec.weight_shape());
    let mut grad_in = want_input.then(|| Tensor::zeros(cached_input.shape()));
    let mut col = vec![R::zero(); k * positions];
    for n in 0..g.batch {
        let go = &grad_out.data()[n * out_len..(n + 1) * out_len];
        im2col(&cached_input.data()[n * in_len..(n + 1) * in_len], &g, spec, &mut col);
        // dW += dY · colᵀ
        R::gemm(
            spec.out_channels,
            positions,
            k,
            R::one(),
            go,
            (positions as isize, 1),
            &col,
            (1, positions as isize),
            R::one(),
            grad_w.data_mut(),
            k,
        );
        if let Some(gi) = grad_in.as_mut() {
            // dcol = Wᵀ · dY, reusing the column buffer.
            R::gemm(
                k,
                spec.out_channels,
                positions,
                R::one(),
                weights.data(),
                (1, k as isize),
                go,
                (positions as isize, 1),
                R::zero(),
                &mut col,
                positions,
            );
            col2im(&col, &g, spec, &mut gi.data_mut()[n * in_len..(n + 1) * in_len]);
        }
    }
    Ok((grad_in, grad_w))
}

fn linear_dims<R: Real>(input: &Tensor<R>, weights: &Tensor<R>) -> Result<(usize, usize, usize)> {
    match (input.shape(), weights.shape()) {
        (&[n, f_in], &[f_out, w_in]) if f_in == w_in => Ok((n, f_in, f_out)),
        (a, b) => Err(shape_err(format!(
            "linear: input {a:?} incompatible with weights {b:?}"
        ))),
    }
}

/// `[N, F_in] · [F_out, F_in]ᵀ → [N, F_out]`.
pub fn linear_forward<R: Real>(input: &Tensor<R>, weights: &Tensor<R>) -> Result<Tensor<R>> {
    let (n, f_in, f_out) = linear_dims(input, weights)?;
    let mut out = Tensor::zeros(&[n, f_out]);
    R::gemm(
        n,
        f_in,
        f_out,
        R::one(),
        input.data(),
        (f_in as isize, 1),
        weights.data(),
        (1, f_in as isize),
        R::zero(),
        out.data_mut(),
        f_out,
    );
    Ok(out)
}

/// Returns `(grad_input, grad_weights)`.
pub fn linear_backward<R: Real>(
    grad_out: &Tensor<R>,
    cached_input: &Tensor<R>,
    weights: &Tensor<R>,
) -> Result<(Tensor<R>, Tensor<R>)> {
    let (n, f_in, f_out) = linear_dims(cached_input, weights)?;
    if grad_out.shape() != [n, f_out] {
        return Err(shape_err(format!(
            "linear grad_out {:?}, expected [{n}, {f_out}]",
            grad_out.shape()
        )));
    }
    let mut grad_in = Tensor::zeros(&[n, f_in]);
    R::gemm(
        n,
        f_out,
        f_in,
        R::one(),
        grad_out.data(),
        (f_out as isize, 1),
        weights.data(),
        (f_in as isize, 1),
        R::zero(),
        grad_in.data_mut(),
        f_in,
    );
    let mut grad_w = Tensor::zeros(&[f_out, f_in]);
    R::gemm(
        f_out,
        n,
        f_in,
        R::one(),
        grad_out.data(),
        (1, f_out as isize),
        cached_input.data(),
        (f_in as isize, 1),
        R::zero(),
        grad_w.data_mut(),
        f_in,
    );
    Ok((grad_in, grad_w))
}

fn pool_dims(shape: &[usize], window: usize) -> Result<(usize, usize, usize)> {
    match *shape {
        [n, c, h, w] if window > 0 && h % window == 0 && w % window == 0 => Ok((n * c, h, w)),
        _ => Err(shape_err(format!(
            "avgpool window {window} does not tile {shape:?}"
        ))),
    }
}

pub fn avgpool_forward<R: Real>(input: &Tensor<R>, window: usize) -> Result<Tensor<R>> {
    let (planes, h, w) = pool_dims(input.shape(), window)?;
    let (oh, ow) = (h / window, w / window);
    let s = input.shape();
    let mut out = Tensor::zeros(&[s[0], s[1], oh, ow]);
    let norm = R::one() / R::of((window * window) as f64);
    let src = input.data();
    let dst = out.data_mut();
    for p in 0..planes {
        for y in 0..h {
            for x in 0..w {
                dst[p * oh * ow + (y / window) * ow + x / window] += src[p * h * w + y * w + x];
            }
        }
    }
    for v in dst.iter_mut() {
        *v *= norm;
    }
    Ok(out)
}

/// `input_shape` is the shape of the tensor that entered the forward pass.
pub fn avgpool_backward<R: Real>(grad_out: &Tensor<R>, input_shape: &[usize], window: usize) -> Result<Tensor<R>> {
    let (planes, h, w) = pool_dims(input_shape, window)?;
    let (oh, ow) = (h / window, w / window);
    if grad_out.shape() != [input_shape[0], input_shape[1], oh, ow] {
        return Err(shape_err(format!(
            "avgpool grad_out {:?} does not match input {input_shape:?}",
            grad_out.shape()
        )));
    }
    let norm = R::one() / R::of((window * window) as f64);
    let src = grad_out.data();
    let mut out = Tensor::zeros(input_shape);
    let dst = out.data_mut();
    for p in 0..planes {
        for y in 0..h {
            for x in 0..w {
                dst[p * h * w + y * w + x] = src[p * oh * ow + (y / window) * ow + x / window] * norm;
            }
        }
    }
    Ok(out)
}

/// Channel axis layout `(batch, channels, spatial)` for `[N, F]` or `[N, C, H, W]`.
pub(crate) fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [n, f] => Ok((n, f, 1)),
        [n, c, h, w] => Ok((n, c, h * w)),
        _ => Err(shape_err(format!(
            "batch norm expects [N, F] or [N, C, H, W], got {shape:?}"
        ))),
    }
}

/// Values kept by a training-mode batch-norm pass for its backward pass.
#[derive(Clone, Debug)]
pub struct BnCache<R = f32> {
    pub normalized: Tensor<R>,
    pub inv_std: Vec<R>,
}

/// Per-channel batch statistics from one training-mode pass.
#[derive(Clone, Debug)]
pub struct BatchMoments<R = f32> {
    pub mean: Vec<R>,
    /// Biased (population) variance, as used for normalization.
    pub var: Vec<R>,
    /// Number of values each channel statistic was taken over.
    pub count: usize,
}

/// Scale-only batch norm with batch statistics: `gamma * (x - mean) / sqrt(var + eps)`.
pub fn batchnorm_train_forward<R: Real>(
    x: &Tensor<R>,
    gamma: &[R],
    eps: R,
) -> Result<(Tensor<R>, BnCache<R>, BatchMoments<R>)> {
    let (n, c, sp) = channel_layout(x.shape())?;
    if gamma.len() != c {
        return Err(shape_err(format!("gamma has {} entries for {c} channels", gamma.len())));
    }
    let count = n * sp;
    let inv_count = R::one() / R::of(count as f64);
    let data = x.data();
    let mut mean = vec![R::zero(); c];
    let mut var = vec![R::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * sp;
            mean[ch] += data[base..base + sp].iter().copied().sum::<R>();
        }
    }
    for m in &mut mean {
        *m *= inv_count;
    }
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * sp;
            let m = mean[ch];
            var[ch] += data[base..base + sp].iter().map(|&v| (v - m) * (v - m)).sum::<R>();
        }
    }
    for v in &mut var {
        *v *= inv_count;
    }
    let inv_std: Vec<R> = var.iter().map(|&v| R::one() / (v + eps).sqrt()).collect();
    let mut normalized = Tensor::zeros(x.shape());
    let mut out = Tensor::zeros(x.shape());
    {
        let nd = normalized.data_mut();
        let od = out.data_mut();
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * sp;
                for i in base..base + sp {
                    let xh = (data[i] - mean[ch]) * inv_std[ch];
                    nd[i] = xh;
                    od[i] = gamma[ch] * xh;
                }
            }
        }
    }
    Ok((
        out,
        BnCache { normalized, inv_std },
        BatchMoments { mean, var, count },
    ))
}

/// Scale-only batch norm against fixed statistics.
pub fn batchnorm_eval_forward<R: Real>(x: &Tensor<R>, gamma: &[R], mean: &[R], var: &[R], eps: R) -> Result<Tensor<R>> {
    let (n, c, sp) = channel_layout(x.shape())?;
    if gamma.len() != c || mean.len() != c || var.len() != c {
        return Err(shape_err(format!("batch-norm parameters do not cover {c} channels")));
    }
    let scale: Vec<R> = (0..c).map(|ch| gamma[ch] / (var[ch] + eps).sqrt()).collect();
    let mut out = x.clone();
    let od = out.data_mut();
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * sp;
            for v in &mut od[base..base + sp] {
                *v = (*v - mean[ch]) * scale[ch];
            }
        }
    }
    Ok(out)
}

/// Returns `(grad_x, grad_gamma)` through the batch-statistics normalization.
pub fn batchnorm_backward<R: Real>(grad_y: &Tensor<R>, cache: &BnCache<R>, gamma: &[R]) -> Result<(Tensor<R>, Vec<R>)> {
    grad_y.expect_same_shape(&cache.normalized, "batchnorm_backward")?;
    let (n, c, sp) = channel_layout(grad_y.shape())?;
    let count = R::of((n * sp) as f64);
    let gy = grad_y.data();
    let xh = cache.normalized.data();
    // Per channel: Σ dy·x̂ (the gamma gradient) and Σ dy.
    let mut sum_gx = vec![R::zero(); c];
    let mut sum_g = vec![R::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * sp;
            for i in base..base + sp {
                sum_gx[ch] += gy[i] * xh[i];
                sum_g[ch] += gy[i];
            }
        }
    }
    let mut grad_x = Tensor::zeros(grad_y.shape());
    let gx = grad_x.data_mut();
    for b in 0..n {
        for ch in 0..c {
            let k = gamma[ch] * cache.inv_std[ch] / count;
            let base = (b * c + ch) * sp;
            for i in base..base + sp {
                gx[i] = k * (count * gy[i] - sum_g[ch] - xh[i] * sum_gx[ch]);
            }
        }
    }
    Ok((grad_x, sum_gx))
}
