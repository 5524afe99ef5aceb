use rand::Rng;

use super::scalar::{matmul, Layout};
use super::{Scalar, Tensor};

/// Borrowed view of one named parameter or buffer.
pub struct TensorRef<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub data: &'a [T],
}

pub struct TensorMut<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub data: &'a mut [T],
}

/// Anything that owns named parameter tensors.
pub trait HasTensors<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a, T>>);
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a, T>>);

    fn tensors(&self) -> Vec<TensorRef<'_, T>> {
        let mut out = Vec::new();
        self.collect("", &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_, T>> {
        let mut out = Vec::new();
        self.collect_mut("", &mut out);
        out
    }

    /// Same layout with every tensor zeroed; used as a gradient accumulator.
    fn zeroed(&self) -> Self
    where
        Self: Clone,
        T: Scalar,
    {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v = T::zero());
        }
        out
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

fn uniform<T: Scalar, R: Rng + ?Sized>(rng: &mut R, len: usize, bound: f64) -> Vec<T> {
    (0..len)
        .map(|_| T::from_f64_lossy(rng.gen_range(-bound..=bound)))
        .collect()
}

/// Stride-1 2-D convolution with symmetric zero padding.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub padding: usize,
    /// `[out][in][ky][kx]`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize, padding: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            padding,
            weight: vec![T::zero(); out_channels * in_channels * kernel * kernel],
            bias: vec![T::zero(); out_channels],
        }
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// Kernels uniform in `±sqrt(1/fan_in)`, zero bias.
    pub fn init<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let bound = (1.0 / self.fan_in() as f64).sqrt();
        self.weight = uniform(rng, self.weight.len(), bound);
        self.bias.iter_mut().for_each(|b| *b = T::zero());
    }

    fn output_size(&self, height: usize, width: usize) -> (usize, usize) {
        let grow = 2 * self.padding + 1;
        (height + grow - self.kernel, width + grow - self.kernel)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.padding == 0
    }

    /// Valid output columns `[lo, hi)` for kernel offset `kx`, i.e. those
    /// reading an in-bounds input column `ox + kx - pad`.
    fn valid_range(&self, kx: usize, in_len: usize, out_len: usize) -> (usize, usize) {
        let shift = kx as isize - self.padding as isize;
        let lo = (-shift).max(0) as usize;
        let hi = ((in_len as isize - shift).max(0) as usize).min(out_len);
        (lo.min(hi), hi)
    }

    /// Unfolds one item `[in][h][w]` into `[in*k*k][oh*ow]`.
    fn im2col(&self, x: &[T], height: usize, width: usize, col: &mut [T]) {
        let (oh, ow) = self.output_size(height, width);
        let k = self.kernel;
        let mut row = 0;
        for c in 0..self.in_channels {
            let plane = &x[c * height * width..(c + 1) * height * width];
            for ky in 0..k {
                let (y_lo, y_hi) = self.valid_range(ky, height, oh);
                for kx in 0..k {
                    let (x_lo, x_hi) = self.valid_range(kx, width, ow);
                    let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                    dst[..y_lo * ow].fill(T::zero());
                    dst[y_hi * ow..].fill(T::zero());
                    for oy in y_lo..y_hi {
                        let iy = oy + ky - self.padding;
                        let line = &mut dst[oy * ow..(oy + 1) * ow];
                        line[..x_lo].fill(T::zero());
                        line[x_hi..].fill(T::zero());
                        if x_lo < x_hi {
                            let ix = x_lo + kx - self.padding;
                            let src = &plane[iy * width + ix..iy * width + ix + (x_hi - x_lo)];
                            line[x_lo..x_hi].copy_from_slice(src);
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Scatter-adds `[in*k*k][oh*ow]` back onto one item `[in][h][w]`.
    fn col2im(&self, col: &[T], height: usize, width: usize, x: &mut [T]) {
        let (oh, ow) = self.output_size(height, width);
        let k = self.kernel;
        let mut row = 0;
        for c in 0..self.in_channels {
            let plane = &mut x[c * height * width..(c + 1) * height * width];
            for ky in 0..k {
                let (y_lo, y_hi) = self.valid_range(ky, height, oh);
                for kx in 0..k {
                    let (x_lo, x_hi) = self.valid_range(kx, width, ow);
                    let src = &col[row * oh * ow..(row + 1) * oh * ow];
                    for oy in y_lo..y_hi {
                        let iy = oy + ky - self.padding;
                        if x_lo >= x_hi {
                            break;
                        }
                        let ix = x_lo + kx - self.padding;
                        let dst = &mut plane[iy * width + ix..iy * width + ix + (x_hi - x_lo)];
                        for (d, &v) in dst.iter_mut().zip(&src[oy * ow + x_lo..oy * ow + x_hi]) {
                            *d = *d + v;
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.channels, self.in_channels, "conv input channels");
        let (oh, ow) = self.output_size(x.height, x.width);
        let mut out = Tensor::zeros(x.batch, self.out_channels, oh, ow);
        let rows = self.fan_in();
        let mut col = if self.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); rows * oh * ow]
        };
        for n in 0..x.batch {
            let dst = out.item_mut(n);
            for (o, plane) in dst.chunks_mut(oh * ow).enumerate() {
                plane.iter_mut().for_each(|v| *v = self.bias[o]);
            }
            let input = if self.is_pointwise() {
                x.item(n)
            } else {
                self.im2col(x.item(n), x.height, x.width, &mut col);
                &col
            };
            matmul(
                self.out_channels,
                rows,
                oh * ow,
                &self.weight,
                Layout::Normal,
                input,
                Layout::Normal,
                dst,
                true,
            );
        }
        out
    }

    /// Accumulates weight/bias gradients into `grad` and optionally returns
    /// the gradient with respect to `x`.
    pub fn backward(
        &self,
        x: &Tensor<T>,
        grad_out: &Tensor<T>,
        grad: &mut Conv2d<T>,
        need_input_grad: bool,
    ) -> Option<Tensor<T>> {
        let (oh, ow) = self.output_size(x.height, x.width);
        assert_eq!(grad_out.shape(), [x.batch, self.out_channels, oh, ow]);
        let rows = self.fan_in();
        let mut col = if self.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); rows * oh * ow]
        };
        let mut dcol = vec![T::zero(); rows * oh * ow];
        let mut grad_in = need_input_grad.then(|| x.zeros_like());
        for n in 0..x.batch {
            let gy = grad_out.item(n);
            for (o, plane) in gy.chunks(oh * ow).enumerate() {
                let s: T = plane.iter().copied().sum();
                grad.bias[o] = grad.bias[o] + s;
            }
            let input = if self.is_pointwise() {
                x.item(n)
            } else {
                self.im2col(x.item(n), x.height, x.width, &mut col);
                &col
            };
            // dW += dY * col^T
            matmul(
                self.out_channels,
                oh * ow,
                rows,
                gy,
                Layout::Normal,
                input,
                Layout::Transposed,
                &mut grad.weight,
                true,
            );
            if let Some(gx) = grad_in.as_mut() {
                // dcol = W^T * dY
                let target: &mut [T] = if self.is_pointwise() {
                    gx.item_mut(n)
                } else {
                    &mut dcol
                };
                matmul(
                    rows,
                    self.out_channels,
                    oh * ow,
                    &self.weight,
                    Layout::Transposed,
                    gy,
                    Layout::Normal,
                    target,
                    false,
                );
                if !self.is_pointwise() {
                    self.col2im(&dcol, x.height, x.width, gx.item_mut(n));
                }
            }
        }
        grad_in
    }
}

impl<T: Scalar> HasTensors<T> for Conv2d<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a, T>>) {
        let k = self.kernel;
        out.push(TensorRef {
            name: join(prefix, "weight"),
            shape: vec![self.out_channels, self.in_channels, k, k],
            trainable: true,
            data: &self.weight,
        });
        out.push(TensorRef {
            name: join(prefix, "bias"),
            shape: vec![self.out_channels],
            trainable: true,
            data: &self.bias,
        });
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a, T>>) {
        let k = self.kernel;
        out.push(TensorMut {
            name: join(prefix, "weight"),
            shape: vec![self.out_channels, self.in_channels, k, k],
            trainable: true,
            data: &mut self.weight,
        });
        out.push(TensorMut {
            name: join(prefix, "bias"),
            shape: vec![self.out_channels],
            trainable: true,
            data: &mut self.bias,
        });
    }
}

/// Per-channel batch normalization over N, H, W.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm2d<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Batch statistics saved by a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn apply(&self, z: &Tensor<T>, mean: &[T], inv_std: &[T]) -> Tensor<T> {
        let mut out = z.clone();
        let plane = z.plane();
        for n in 0..z.batch {
            for (c, chunk) in out.item_mut(n).chunks_mut(plane).enumerate() {
                let scale = self.gamma[c] * inv_std[c];
                let shift = self.beta[c] - mean[c] * scale;
                chunk.iter_mut().for_each(|v| *v = *v * scale + shift);
            }
        }
        out
    }

    /// Normalizes with batch statistics and updates the running averages.
    pub fn forward_train(&mut self, z: &Tensor<T>) -> (Tensor<T>, BnStats<T>) {
        let channels = self.channels();
        assert_eq!(z.channels, channels, "batch norm channels");
        let plane = z.plane();
        let count = (z.batch * plane) as f64;
        let mut mean = vec![T::zero(); channels];
        let mut inv_std = vec![T::zero(); channels];
        let momentum = T::from_f64_lossy(BN_MOMENTUM);
        for c in 0..channels {
            let mut sum = 0.0;
            for n in 0..z.batch {
                sum += z.item(n)[c * plane..(c + 1) * plane]
                    .iter()
                    .map(|v| v.as_f64())
                    .sum::<f64>();
            }
            let mu = sum / count;
            let mut sq = 0.0;
            for n in 0..z.batch {
                sq += z.item(n)[c * plane..(c + 1) * plane]
                    .iter()
                    .map(|v| (v.as_f64() - mu).powi(2))
                    .sum::<f64>();
            }
            let var = sq / count;
            mean[c] = T::from_f64_lossy(mu);
            inv_std[c] = T::from_f64_lossy(1.0 / (var + BN_EPS).sqrt());
            let unbiased = if count > 1.0 { sq / (count - 1.0) } else { var };
            self.running_mean[c] =
                (T::one() - momentum) * self.running_mean[c] + momentum * mean[c];
            self.running_var[c] = (T::one() - momentum) * self.running_var[c]
                + momentum * T::from_f64_lossy(unbiased);
        }
        let out = self.apply(z, &mean, &inv_std);
        (out, BnStats { mean, inv_std })
    }

    /// Normalizes with the running statistics.
    pub fn forward_eval(&self, z: &Tensor<T>) -> Tensor<T> {
        let eps = T::from_f64_lossy(BN_EPS);
        let inv_std: Vec<T> = self
            .running_var
            .iter()
            .map(|&v| T::one() / (v + eps).sqrt())
            .collect();
        self.apply(z, &self.running_mean, &inv_std)
    }

    /// Turns the gradient w.r.t. the normalized output into the gradient
    /// w.r.t. the pre-normalization input `z`, accumulating gamma/beta grads.
    pub fn backward(
        &self,
        z: &Tensor<T>,
        stats: &BnStats<T>,
        grad_out: &Tensor<T>,
        grad: &mut BatchNorm2d<T>,
    ) -> Tensor<T> {
        let plane = z.plane();
        let count = (z.batch * plane) as f64;
        let mut grad_in = z.zeros_like();
        for c in 0..self.channels() {
            let (mu, inv) = (stats.mean[c], stats.inv_std[c]);
            let gamma = self.gamma[c];
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            for n in 0..z.batch {
                let zs = &z.item(n)[c * plane..(c + 1) * plane];
                let gs = &grad_out.item(n)[c * plane..(c + 1) * plane];
                for (&zv, &gv) in zs.iter().zip(gs) {
                    let xhat = ((zv - mu) * inv).as_f64();
                    sum_g += gv.as_f64();
                    sum_gx += gv.as_f64() * xhat;
                }
            }
            grad.gamma[c] = grad.gamma[c] + T::from_f64_lossy(sum_gx);
            grad.beta[c] = grad.beta[c] + T::from_f64_lossy(sum_g);
            // dz = gamma * inv / M * (M * g - sum(g) - xhat * sum(g * xhat))
            let scale = gamma * inv / T::from_f64_lossy(count);
            let mean_term = T::from_f64_lossy(sum_g);
            let xhat_term = T::from_f64_lossy(sum_gx);
            let m = T::from_f64_lossy(count);
            for n in 0..z.batch {
                let zs = &z.item(n)[c * plane..(c + 1) * plane];
                let gs = &grad_out.item(n)[c * plane..(c + 1) * plane];
                let dst = &mut grad_in.item_mut(n)[c * plane..(c + 1) * plane];
                for ((d, &zv), &gv) in dst.iter_mut().zip(zs).zip(gs) {
                    let xhat = (zv - mu) * inv;
                    *d = scale * (m * gv - mean_term - xhat * xhat_term);
                }
            }
        }
        grad_in
    }
}

impl<T: Scalar> HasTensors<T> for BatchNorm2d<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a, T>>) {
        let shape = vec![self.channels()];
        for (name, data, trainable) in [
            ("gamma", &self.gamma, true),
            ("beta", &self.beta, true),
            ("running_mean", &self.running_mean, false),
            ("running_var", &self.running_var, false),
        ] {
            out.push(TensorRef {
                name: join(prefix, name),
                shape: shape.clone(),
                trainable,
                data,
            });
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a, T>>) {
        let shape = vec![self.channels()];
        for (name, data, trainable) in [
            ("gamma", &mut self.gamma, true),
            ("beta", &mut self.beta, true),
            ("running_mean", &mut self.running_mean, false),
            ("running_var", &mut self.running_var, false),
        ] {
            out.push(TensorMut {
                name: join(prefix, name),
                shape: shape.clone(),
                trainable,
                data,
            });
        }
    }
}

/// Fully-connected layer, `weight` stored `[out][in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn zeros(in_features: usize, out_features: usize) -> Self {
        Self {
            in_features,
            out_features,
            weight: vec![T::zero(); in_features * out_features],
            bias: vec![T::zero(); out_features],
        }
    }

    pub fn init<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let bound = (1.0 / self.in_features as f64).sqrt();
        self.weight = uniform(rng, self.weight.len(), bound);
        self.bias.iter_mut().for_each(|b| *b = T::zero());
    }

    /// `x` is `[batch][in]`, result `[batch][out]`.
    pub fn forward(&self, x: &[T], batch: usize) -> Vec<T> {
        assert_eq!(x.len(), batch * self.in_features, "linear input size");
        let mut out: Vec<T> = (0..batch).flat_map(|_| self.bias.iter().copied()).collect();
        matmul(
            batch,
            self.in_features,
            self.out_features,
            x,
            Layout::Normal,
            &self.weight,
            Layout::Transposed,
            &mut out,
            true,
        );
        out
    }

    pub fn backward(&self, x: &[T], grad_out: &[T], batch: usize, grad: &mut Linear<T>) -> Vec<T> {
        for row in grad_out.chunks(self.out_features) {
            for (g, &v) in grad.bias.iter_mut().zip(row) {
                *g = *g + v;
            }
        }
        // dW (out x in) += dY^T (out x batch) * X (batch x in)
        matmul(
            self.out_features,
            batch,
            self.in_features,
            grad_out,
            Layout::Transposed,
            x,
            Layout::Normal,
            &mut grad.weight,
            true,
        );
        let mut grad_in = vec![T::zero(); batch * self.in_features];
        matmul(
            batch,
            self.out_features,
            self.in_features,
            grad_out,
            Layout::Normal,
            &self.weight,
            Layout::Normal,
            &mut grad_in,
            false,
        );
        grad_in
    }
}

impl<T: Scalar> HasTensors<T> for Linear<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a, T>>) {
        out.push(TensorRef {
            name: join(prefix, "weight"),
            shape: vec![self.out_features, self.in_features],
            trainable: true,
            data: &self.weight,
        });
        out.push(TensorRef {
            name: join(prefix, "bias"),
            shape: vec![self.out_features],
            trainable: true,
            data: &self.bias,
        });
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a, T>>) {
        out.push(TensorMut {
            name: join(prefix, "weight"),
            shape: vec![self.out_features, self.in_features],
            trainable: true,
            data: &mut self.weight,
        });
        out.push(TensorMut {
            name: join(prefix, "bias"),
            shape: vec![self.out_features],
            trainable: true,
            data: &mut self.bias,
        });
    }
}

/// Static description of a conv row in an architecture table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub batch_norm: bool,
    pub relu: bool,
}

/// Convolution followed by optional batch norm and optional ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock<T> {
    pub conv: Conv2d<T>,
    pub bn: Option<BatchNorm2d<T>>,
    pub relu: bool,
}

/// What a training-mode block forward keeps for its backward pass.
#[derive(Clone, Debug)]
pub struct BlockTrace<T> {
    pub conv_out: Tensor<T>,
    pub stats: Option<BnStats<T>>,
    pub out: Tensor<T>,
}

impl<T: Scalar> ConvBlock<T> {
    pub fn from_spec(spec: &ConvSpec) -> Self {
        assert_eq!(spec.stride, 1, "only stride-1 convolutions are used");
        Self {
            conv: Conv2d::zeros(spec.in_channels, spec.out_channels, spec.kernel, spec.padding),
            bn: spec.batch_norm.then(|| BatchNorm2d::new(spec.out_channels)),
            relu: spec.relu,
        }
    }

    pub fn spec(&self) -> ConvSpec {
        ConvSpec {
            in_channels: self.conv.in_channels,
            out_channels: self.conv.out_channels,
            kernel: self.conv.kernel,
            stride: 1,
            padding: self.conv.padding,
            batch_norm: self.bn.is_some(),
            relu: self.relu,
        }
    }

    pub fn init<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        self.conv.init(rng);
        if let Some(bn) = self.bn.as_mut() {
            *bn = BatchNorm2d::new(bn.channels());
        }
    }

    fn relu_inplace(&self, t: &mut Tensor<T>) {
        if self.relu {
            t.data.iter_mut().for_each(|v| {
                if *v < T::zero() {
                    *v = T::zero()
                }
            });
        }
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> BlockTrace<T> {
        let conv_out = self.conv.forward(x);
        let (mut out, stats) = match self.bn.as_mut() {
            Some(bn) => {
                let (y, s) = bn.forward_train(&conv_out);
                (y, Some(s))
            }
            None => (conv_out.clone(), None),
        };
        self.relu_inplace(&mut out);
        BlockTrace {
            conv_out,
            stats,
            out,
        }
    }

    pub fn forward_eval(&self, x: &Tensor<T>) -> Tensor<T> {
        let z = self.conv.forward(x);
        let mut out = match self.bn.as_ref() {
            Some(bn) => bn.forward_eval(&z),
            None => z,
        };
        self.relu_inplace(&mut out);
        out
    }

    pub fn backward(
        &self,
        x: &Tensor<T>,
        trace: &BlockTrace<T>,
        grad_out: &Tensor<T>,
        grad: &mut ConvBlock<T>,
        need_input_grad: bool,
    ) -> Option<Tensor<T>> {
        let mut g = grad_out.clone();
        if self.relu {
            for (gv, &y) in g.data.iter_mut().zip(&trace.out.data) {
                if y <= T::zero() {
                    *gv = T::zero();
                }
            }
        }
        if let (Some(bn), Some(stats), Some(gbn)) =
            (self.bn.as_ref(), trace.stats.as_ref(), grad.bn.as_mut())
        {
            g = bn.backward(&trace.conv_out, stats, &g, gbn);
        }
        self.conv.backward(x, &g, &mut grad.conv, need_input_grad)
    }
}

impl<T: Scalar> HasTensors<T> for ConvBlock<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a, T>>) {
        self.conv.collect(&join(prefix, "conv"), out);
        if let Some(bn) = &self.bn {
            bn.collect(&join(prefix, "bn"), out);
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a, T>>) {
        self.conv.collect_mut(&join(prefix, "conv"), out);
        if let Some(bn) = &mut self.bn {
            bn.collect_mut(&join(prefix, "bn"), out);
        }
    }
}

/// Global average pooling: `[n][c][h][w]` to `[n][c]`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Vec<T> {
    let plane = x.plane();
    let denom = T::from_usize(plane).expect("plane size");
    x.data
        .chunks(plane)
        .map(|p| p.iter().copied().sum::<T>() / denom)
        .collect()
}

pub fn global_avg_pool_backward<T: Scalar>(grad: &[T], shape: [usize; 4]) -> Tensor<T> {
    let [n, c, h, w] = shape;
    assert_eq!(grad.len(), n * c);
    let denom = T::from_usize(h * w).expect("plane size");
    let data = grad
        .iter()
        .flat_map(|&g| std::iter::repeat(g / denom).take(h * w))
        .collect();
    Tensor::from_vec(n, c, h, w, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<f64> {
        let len = shape.iter().product();
        Tensor::from_vec(
            shape[0],
            shape[1],
            shape[2],
            shape[3],
            (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
    }

    fn direct_conv(conv: &Conv2d<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let (h, w, k, p) = (x.height, x.width, conv.kernel, conv.padding as isize);
        let mut out = Tensor::zeros(x.batch, conv.out_channels, h, w);
        for n in 0..x.batch {
            for o in 0..conv.out_channels {
                for y in 0..h {
                    for xx in 0..w {
                        let mut acc = conv.bias[o];
                        for i in 0..conv.in_channels {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = y as isize + ky as isize - p;
                                    let ix = xx as isize + kx as isize - p;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += conv.weight[((o * conv.in_channels + i) * k + ky) * k + kx]
                                        * x.data[((n * conv.in_channels + i) * h + iy as usize) * w
                                            + ix as usize];
                                }
                            }
                        }
                        out.data[((n * conv.out_channels + o) * h + y) * w + xx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (k, p) in [(3, 1), (1, 0)] {
            let mut conv = Conv2d::<f64>::zeros(3, 4, k, p);
            conv.init(&mut rng);
            conv.bias = vec![0.1, -0.2, 0.3, 0.0];
            let x = random_tensor(&mut rng, [2, 3, 5, 6]);
            let got = conv.forward(&x);
            let want = direct_conv(&conv, &x);
            let err = got
                .data
                .iter()
                .zip(&want.data)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-12, "k={k}: {err}");
        }
    }

    /// Central-difference check of a scalar loss `sum(out * probe)`.
    #[test]
    fn conv_block_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let spec = ConvSpec {
            in_channels: 2,
            out_channels: 3,
            kernel: 3,
            stride: 1,
            padding: 1,
            batch_norm: true,
            relu: true,
        };
        let mut block = ConvBlock::<f64>::from_spec(&spec);
        block.init(&mut rng);
        let x = random_tensor(&mut rng, [2, 2, 4, 5]);
        let probe = random_tensor(&mut rng, [2, 3, 4, 5]);
        let loss = |b: &mut ConvBlock<f64>, x: &Tensor<f64>| -> f64 {
            let t = b.forward_train(x);
            t.out.data.iter().zip(&probe.data).map(|(a, p)| a * p).sum()
        };

        let trace = block.forward_train(&x);
        let mut grad = block.zeroed();
        let gx = block
            .backward(&x, &trace, &probe, &mut grad, true)
            .unwrap();

        let eps = 1e-6;
        for idx in [0, 7, 20, 35] {
            let mut b = block.clone();
            b.conv.weight[idx] += eps;
            let up = loss(&mut b, &x);
            b.conv.weight[idx] -= 2.0 * eps;
            let down = loss(&mut b, &x);
            let fd = (up - down) / (2.0 * eps);
            assert!((fd - grad.conv.weight[idx]).abs() < 1e-6, "weight {idx}");
        }
        for idx in [0, 13, 39] {
            let mut xp = x.clone();
            xp.data[idx] += eps;
            let up = loss(&mut block.clone(), &xp);
            xp.data[idx] -= 2.0 * eps;
            let down = loss(&mut block.clone(), &xp);
            let fd = (up - down) / (2.0 * eps);
            assert!((fd - gx.data[idx]).abs() < 1e-6, "input {idx}");
        }
        let gamma_fd = {
            let mut b = block.clone();
            b.bn.as_mut().unwrap().gamma[1] += eps;
            let up = loss(&mut b, &x);
            b.bn.as_mut().unwrap().gamma[1] -= 2.0 * eps;
            (up - loss(&mut b, &x)) / (2.0 * eps)
        };
        assert!((gamma_fd - grad.bn.as_ref().unwrap().gamma[1]).abs() < 1e-6, "{gamma_fd} vs {}", grad.bn.as_ref().unwrap().gamma[1]);
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut lin = Linear::<f64>::zeros(4, 3);
        lin.init(&mut rng);
        lin.bias = vec![0.5, -0.5, 0.25];
        let x: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let probe: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |l: &Linear<f64>, x: &[f64]| -> f64 {
            l.forward(x, 2).iter().zip(&probe).map(|(a, b)| a * b).sum()
        };
        let mut grad = lin.zeroed();
        let gx = lin.backward(&x, &probe, 2, &mut grad);
        let eps = 1e-6;
        for i in 0..12 {
            let mut l = lin.clone();
            l.weight[i] += eps;
            let up = loss(&l, &x);
            l.weight[i] -= 2.0 * eps;
            let fd = (up - loss(&l, &x)) / (2.0 * eps);
            assert!((fd - grad.weight[i]).abs() < 1e-8);
        }
        for i in 0..8 {
            let mut xp = x.clone();
            xp[i] += eps;
            let up = loss(&lin, &xp);
            xp[i] -= 2.0 * eps;
            let fd = (up - loss(&lin, &xp)) / (2.0 * eps);
            assert!((fd - gx[i]).abs() < 1e-8);
        }
        assert!((grad.bias[1] - (probe[1] + probe[4])).abs() < 1e-12);
    }

    #[test]
    fn eval_mode_uses_running_statistics() {
        let mut bn = BatchNorm2d::<f64>::new(1);
        bn.running_mean = vec![2.0];
        bn.running_var = vec![4.0 - BN_EPS];
        let z = Tensor::from_vec(1, 1, 1, 2, vec![2.0, 6.0]);
        let y = bn.forward_eval(&z);
        assert!((y.data[0]).abs() < 1e-12);
        assert!((y.data[1] - 2.0).abs() < 1e-9);
    }
}
