//! Encoder, decoder and discriminator.
//!
//! All three are stacks of 3x3 stride-1 convolutions with batch norm and
//! ReLU. With the default width of 64 the layer tables are:
//!
//! | net           | conv rows                                   | head          |
//! |---------------|---------------------------------------------|---------------|
//! | encoder       | 3→64, 64→64 ×3, 97→64, 1x1 64→3 (no BN/act) | -             |
//! | decoder       | 3→64, 64→64 ×6, 64→30                       | GAP, FC 30→30 |
//! | discriminator | 3→64, 64→64 ×2                              | GAP, FC 64→1  |
//!
//! The encoder's fifth layer sees `[features (64), watermark planes (30),
//! image (3)]` = 97 channels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{
    global_avg_pool, global_avg_pool_backward, join, BlockTrace, ConvBlock, ConvSpec, HasTensors,
    Linear, Scalar, Tensor, TensorMut, TensorRef,
};

/// Free architecture knobs. `width` is the hidden channel count of every
/// convolution (64 in the reference tables).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArchConfig {
    pub width: usize,
    pub watermark_len: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            width: 64,
            watermark_len: super::DEFAULT_WATERMARK_LEN,
        }
    }
}

const fn conv3(in_channels: usize, out_channels: usize) -> ConvSpec {
    ConvSpec {
        in_channels,
        out_channels,
        kernel: 3,
        stride: 1,
        padding: 1,
        batch_norm: true,
        relu: true,
    }
}

impl ArchConfig {
    pub fn encoder_layout(&self) -> Vec<ConvSpec> {
        let w = self.width;
        vec![
            conv3(3, w),
            conv3(w, w),
            conv3(w, w),
            conv3(w, w),
            conv3(w + self.watermark_len + 3, w),
            ConvSpec {
                in_channels: w,
                out_channels: 3,
                kernel: 1,
                stride: 1,
                padding: 0,
                batch_norm: false,
                relu: false,
            },
        ]
    }

    pub fn decoder_layout(&self) -> Vec<ConvSpec> {
        let w = self.width;
        let mut layers = vec![conv3(3, w)];
        layers.extend(std::iter::repeat(conv3(w, w)).take(6));
        layers.push(conv3(w, self.watermark_len));
        layers
    }

    pub fn discriminator_layout(&self) -> Vec<ConvSpec> {
        let w = self.width;
        vec![conv3(3, w), conv3(w, w), conv3(w, w)]
    }
}

fn build_blocks<T: Scalar>(layout: &[ConvSpec]) -> Vec<ConvBlock<T>> {
    let blocks: Vec<ConvBlock<T>> = layout.iter().map(ConvBlock::from_spec).collect();
    for (block, spec) in blocks.iter().zip(layout) {
        assert_eq!(&block.spec(), spec, "layer construction diverged from layout");
    }
    for pair in layout.windows(2) {
        // Channel chaining holds everywhere except the encoder's concat input.
        assert!(pair[1].in_channels >= pair[0].out_channels);
    }
    blocks
}

/// Runs blocks in training mode and keeps every trace.
fn run_train<T: Scalar>(blocks: &mut [ConvBlock<T>], x: &Tensor<T>) -> Vec<BlockTrace<T>> {
    let mut traces: Vec<BlockTrace<T>> = Vec::with_capacity(blocks.len());
    for block in blocks.iter_mut() {
        let input = traces.last().map(|t| &t.out).unwrap_or(x);
        let trace = block.forward_train(input);
        traces.push(trace);
    }
    traces
}

fn run_eval<T: Scalar>(blocks: &[ConvBlock<T>], x: &Tensor<T>) -> Tensor<T> {
    let mut cur = x.clone();
    for block in blocks {
        cur = block.forward_eval(&cur);
    }
    cur
}

/// Backpropagates through a plain chain of blocks.
fn chain_backward<T: Scalar>(
    blocks: &[ConvBlock<T>],
    x: &Tensor<T>,
    traces: &[BlockTrace<T>],
    grad_out: Tensor<T>,
    grads: &mut [ConvBlock<T>],
    need_input_grad: bool,
) -> Option<Tensor<T>> {
    let mut g = grad_out;
    for i in (0..blocks.len()).rev() {
        let input = if i == 0 { x } else { &traces[i - 1].out };
        let need = i > 0 || need_input_grad;
        match blocks[i].backward(input, &traces[i], &g, &mut grads[i], need) {
            Some(next) => g = next,
            None => return None,
        }
    }
    Some(g)
}

/// Spatially broadcast watermark planes: `[n][len][h][w]`.
pub fn watermark_planes<T: Scalar>(
    bits: &[T],
    batch: usize,
    len: usize,
    height: usize,
    width: usize,
) -> Tensor<T> {
    assert_eq!(bits.len(), batch * len, "watermark batch size");
    let data = bits
        .iter()
        .flat_map(|&b| std::iter::repeat(b).take(height * width))
        .collect();
    Tensor::from_vec(batch, len, height, width, data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T> {
    pub arch: ArchConfig,
    /// Layers 1-5.
    pub blocks: Vec<ConvBlock<T>>,
    /// Layer 6, the 1x1 projection to RGB.
    pub output: ConvBlock<T>,
}

pub struct EncoderTrace<T> {
    traces: Vec<BlockTrace<T>>,
    concat: Tensor<T>,
    output: BlockTrace<T>,
}

impl<T: Scalar> Encoder<T> {
    pub fn new(arch: ArchConfig) -> Self {
        let layout = arch.encoder_layout();
        let mut blocks = build_blocks(&layout);
        let output = blocks.pop().expect("encoder output layer");
        Self {
            arch,
            blocks,
            output,
        }
    }

    pub fn layout(&self) -> Vec<ConvSpec> {
        self.blocks
            .iter()
            .chain(std::iter::once(&self.output))
            .map(ConvBlock::spec)
            .collect()
    }

    pub fn init<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        self.blocks.iter_mut().for_each(|b| b.init(rng));
        self.output.init(rng);
    }

    fn concat_input(&self, features: &Tensor<T>, image: &Tensor<T>, bits: &[T]) -> Tensor<T> {
        let planes = watermark_planes(
            bits,
            image.batch,
            self.arch.watermark_len,
            image.height,
            image.width,
        );
        Tensor::concat_channels(&[features, &planes, image])
    }

    /// `image` is `[n][3][h][w]`, `bits` is `[n][watermark_len]`.
    pub fn forward_train(&mut self, image: &Tensor<T>, bits: &[T]) -> (Tensor<T>, EncoderTrace<T>) {
        let mut traces = run_train(&mut self.blocks[..4], image);
        let concat = self.concat_input(&traces[3].out, image, bits);
        traces.push(self.blocks[4].forward_train(&concat));
        let output = self.output.forward_train(&traces[4].out);
        (
            output.out.clone(),
            EncoderTrace {
                traces,
                concat,
                output,
            },
        )
    }

    pub fn forward(&self, image: &Tensor<T>, bits: &[T]) -> Tensor<T> {
        let features = run_eval(&self.blocks[..4], image);
        let concat = self.concat_input(&features, image, bits);
        let hidden = self.blocks[4].forward_eval(&concat);
        self.output.forward_eval(&hidden)
    }

    /// Accumulates parameter gradients for `grad_out = dL/d(encoded image)`.
    pub fn backward(
        &self,
        image: &Tensor<T>,
        trace: &EncoderTrace<T>,
        grad_out: &Tensor<T>,
        grads: &mut Encoder<T>,
    ) {
        let g = self
            .output
            .backward(&trace.traces[4].out, &trace.output, grad_out, &mut grads.output, true)
            .expect("input grad requested");
        let g = self.blocks[4]
            .backward(&trace.concat, &trace.traces[4], &g, &mut grads.blocks[4], true)
            .expect("input grad requested");
        let g = g.leading_channels(self.arch.width);
        chain_backward(
            &self.blocks[..4],
            image,
            &trace.traces[..4],
            g,
            &mut grads.blocks[..4],
            false,
        );
    }
}

impl<T: Scalar> HasTensors<T> for Encoder<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a, T>>) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect(&join(prefix, &format!("layer{}", i + 1)), out);
        }
        self.output.collect(&join(prefix, "layer6"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a, T>>) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.collect_mut(&join(prefix, &format!("layer{}", i + 1)), out);
        }
        self.output.collect_mut(&join(prefix, "layer6"), out);
    }
}

/// Conv stack, global average pooling, then a linear head.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledNet<T> {
    pub blocks: Vec<ConvBlock<T>>,
    pub head: Linear<T>,
}

pub struct PooledTrace<T> {
    traces: Vec<BlockTrace<T>>,
    pooled: Vec<T>,
}

impl<T: Scalar> PooledNet<T> {
    fn new(layout: &[ConvSpec], outputs: usize) -> Self {
        let blocks = build_blocks(layout);
        let features = layout.last().expect("non-empty layout").out_channels;
        Self {
            blocks,
            head: Linear::zeros(features, outputs),
        }
    }

    fn init<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        self.blocks.iter_mut().for_each(|b| b.init(rng));
        self.head.init(rng);
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> (Vec<T>, PooledTrace<T>) {
        let traces = run_train(&mut self.blocks, x);
        let pooled = global_avg_pool(&traces.last().expect("blocks").out);
        let out = self.head.forward(&pooled, x.batch);
        (out, PooledTrace { traces, pooled })
    }

    fn forward(&self, x: &Tensor<T>) -> Vec<T> {
        let features = run_eval(&self.blocks, x);
        self.head.forward(&global_avg_pool(&features), x.batch)
    }

    fn backward(
        &self,
        x: &Tensor<T>,
        trace: &PooledTrace<T>,
        grad_out: &[T],
        grads: &mut PooledNet<T>,
        need_input_grad: bool,
    ) -> Option<Tensor<T>> {
        let g_pooled = self
            .head
            .backward(&trace.pooled, grad_out, x.batch, &mut grads.head);
        let last = trace.traces.last().expect("blocks");
        let g = global_avg_pool_backward(&g_pooled, last.out.shape());
        chain_backward(
            &self.blocks,
            x,
            &trace.traces,
            g,
            &mut grads.blocks,
            need_input_grad,
        )
    }

    fn collect_into<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a, T>>) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect(&join(prefix, &format!("layer{}", i + 1)), out);
        }
        self.head.collect(&join(prefix, "fc"), out);
    }

    fn collect_into_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a, T>>) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.collect_mut(&join(prefix, &format!("layer{}", i + 1)), out);
        }
        self.head.collect_mut(&join(prefix, "fc"), out);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoder<T> {
    pub arch: ArchConfig,
    pub net: PooledNet<T>,
}

pub type DecoderTrace<T> = PooledTrace<T>;

impl<T: Scalar> Decoder<T> {
    pub fn new(arch: ArchConfig) -> Self {
        Self {
            arch,
            net: PooledNet::new(&arch.decoder_layout(), arch.watermark_len),
        }
    }

    pub fn init<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        self.net.init(rng);
    }

    /// Logits `[n][watermark_len]`; any spatial size works.
    pub fn forward_train(&mut self, x: &Tensor<T>) -> (Vec<T>, DecoderTrace<T>) {
        self.net.forward_train(x)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Vec<T> {
        self.net.forward(x)
    }

    pub fn backward(
        &self,
        x: &Tensor<T>,
        trace: &DecoderTrace<T>,
        grad_logits: &[T],
        grads: &mut Decoder<T>,
        need_input_grad: bool,
    ) -> Option<Tensor<T>> {
        self.net
            .backward(x, trace, grad_logits, &mut grads.net, need_input_grad)
    }
}

impl<T: Scalar> HasTensors<T> for Decoder<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a, T>>) {
        self.net.collect_into(prefix, out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a, T>>) {
        self.net.collect_into_mut(prefix, out);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator<T> {
    pub arch: ArchConfig,
    pub net: PooledNet<T>,
}

pub type DiscriminatorTrace<T> = PooledTrace<T>;

pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl<T: Scalar> Discriminator<T> {
    pub fn new(arch: ArchConfig) -> Self {
        Self {
            arch,
            net: PooledNet::new(&arch.discriminator_layout(), 1),
        }
    }

    pub fn init<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        self.net.init(rng);
    }

    /// Pre-logistic scores, one per batch item.
    pub fn forward_train(&mut self, x: &Tensor<T>) -> (Vec<T>, DiscriminatorTrace<T>) {
        self.net.forward_train(x)
    }

    /// Probability that each item is a non-watermarked image.
    pub fn probability(&self, x: &Tensor<T>) -> Vec<f64> {
        self.net
            .forward(x)
            .into_iter()
            .map(|z| logistic(z.as_f64()))
            .collect()
    }

    pub fn backward(
        &self,
        x: &Tensor<T>,
        trace: &DiscriminatorTrace<T>,
        grad_scores: &[T],
        grads: &mut Discriminator<T>,
        need_input_grad: bool,
    ) -> Option<Tensor<T>> {
        self.net
            .backward(x, trace, grad_scores, &mut grads.net, need_input_grad)
    }
}

impl<T: Scalar> HasTensors<T> for Discriminator<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a, T>>) {
        self.net.collect_into(prefix, out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a, T>>) {
        self.net.collect_into_mut(prefix, out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn image(batch: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(
            batch,
            3,
            h,
            w,
            (0..batch * 3 * h * w).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
    }

    #[test]
    fn reference_layouts_match_architecture_tables() {
        let arch = ArchConfig::default();
        let enc: Vec<_> = arch
            .encoder_layout()
            .iter()
            .map(|s| (s.in_channels, s.out_channels, s.kernel, s.padding, s.batch_norm, s.relu))
            .collect();
        assert_eq!(
            enc,
            vec![
                (3, 64, 3, 1, true, true),
                (64, 64, 3, 1, true, true),
                (64, 64, 3, 1, true, true),
                (64, 64, 3, 1, true, true),
                (97, 64, 3, 1, true, true),
                (64, 3, 1, 0, false, false),
            ]
        );
        let dec = arch.decoder_layout();
        assert_eq!(dec.len(), 8);
        assert_eq!((dec[0].in_channels, dec[0].out_channels), (3, 64));
        assert!(dec[1..7].iter().all(|s| (s.in_channels, s.out_channels) == (64, 64)));
        assert_eq!((dec[7].in_channels, dec[7].out_channels), (64, 30));
        assert!(dec.iter().all(|s| s.kernel == 3 && s.stride == 1 && s.batch_norm && s.relu));
        let disc = arch.discriminator_layout();
        assert_eq!(disc.len(), 3);
        assert!(disc.iter().all(|s| s.out_channels == 64 && s.batch_norm));

        let d = Decoder::<f32>::new(arch);
        assert_eq!((d.net.head.in_features, d.net.head.out_features), (30, 30));
        let s = Discriminator::<f32>::new(arch);
        assert_eq!((s.net.head.in_features, s.net.head.out_features), (64, 1));
        assert_eq!(Encoder::<f32>::new(arch).layout(), arch.encoder_layout());
    }

    #[test]
    fn encoder_preserves_size_and_zero_params_give_zero_image() {
        let arch = ArchConfig {
            width: 4,
            watermark_len: 30,
        };
        let enc = Encoder::<f64>::new(arch);
        for (h, w) in [(8, 8), (9, 12), (16, 8)] {
            let x = image(2, h, w, 1);
            let out = enc.forward(&x, &[1.0; 60]);
            assert_eq!(out.shape(), [2, 3, h, w]);
            assert!(out.data.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn decoder_output_arity_is_size_agnostic() {
        let arch = ArchConfig {
            width: 4,
            watermark_len: 30,
        };
        let mut dec = Decoder::<f32>::new(arch);
        dec.init(&mut ChaCha8Rng::seed_from_u64(2));
        for side in [8, 13, 20] {
            let x = image(1, side, side, 3).cast::<f32>();
            assert_eq!(dec.forward(&x).len(), 30);
        }
        let zero = Decoder::<f32>::new(arch);
        assert!(zero.forward(&image(1, 8, 8, 3).cast()).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_discriminator_gives_one_half() {
        let arch = ArchConfig {
            width: 4,
            watermark_len: 30,
        };
        let d = Discriminator::<f64>::new(arch);
        assert_eq!(d.probability(&image(3, 8, 8, 4)), vec![0.5; 3]);
    }

    #[test]
    fn logistic_stays_in_open_interval() {
        for z in [-30.0, -1.0, 0.0, 2.0, 30.0] {
            let p = logistic(z);
            assert!(p > 0.0 && p < 1.0, "{z} -> {p}");
        }
        assert_eq!(logistic(0.0), 0.5);
    }

    /// End-to-end check: finite differences of `sum(logits * probe)` through
    /// encoder and decoder.
    #[test]
    fn encoder_decoder_gradients_match_finite_differences() {
        let arch = ArchConfig {
            width: 3,
            watermark_len: 4,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut enc = Encoder::<f64>::new(arch);
        let mut dec = Decoder::<f64>::new(arch);
        enc.init(&mut rng);
        dec.init(&mut rng);
        let x = image(2, 8, 8, 5);
        let bits = [1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0];
        let probe = [0.3, -0.2, 0.5, 0.1, -0.4, 0.2, 0.7, -0.1];
        let loss = |enc: &mut Encoder<f64>, dec: &mut Decoder<f64>| -> f64 {
            let (y, _) = enc.forward_train(&x, &bits);
            let (logits, _) = dec.forward_train(&y);
            logits.iter().zip(&probe).map(|(a, b)| a * b).sum()
        };

        let (y, etrace) = enc.forward_train(&x, &bits);
        let (_, dtrace) = dec.forward_train(&y);
        let mut gdec = dec.zeroed();
        let gy = dec.backward(&y, &dtrace, &probe, &mut gdec, true).unwrap();
        let mut genc = enc.zeroed();
        enc.backward(&x, &etrace, &gy, &mut genc);

        let eps = 1e-6;
        let checks: [(usize, usize); 4] = [(0, 5), (3, 17), (4, 40), (4, 100)];
        for (layer, idx) in checks {
            let mut e = enc.clone();
            e.blocks[layer].conv.weight[idx] += eps;
            let up = loss(&mut e, &mut dec.clone());
            e.blocks[layer].conv.weight[idx] -= 2.0 * eps;
            let down = loss(&mut e, &mut dec.clone());
            let fd = (up - down) / (2.0 * eps);
            let an = genc.blocks[layer].conv.weight[idx];
            assert!((fd - an).abs() < 1e-6 * (1.0 + an.abs()), "layer {layer}: {fd} vs {an}");
        }
        let mut e = enc.clone();
        e.output.conv.weight[2] += eps;
        let up = loss(&mut e, &mut dec.clone());
        e.output.conv.weight[2] -= 2.0 * eps;
        let fd = (up - loss(&mut e, &mut dec.clone())) / (2.0 * eps);
        assert!((fd - genc.output.conv.weight[2]).abs() < 1e-6);
    }
}
