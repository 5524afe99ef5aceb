//! Watermark types and the three networks.

mod checkpoint;
mod networks;
mod watermark;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use networks::{
    logistic, watermark_planes, ArchConfig, Decoder, DecoderTrace, Discriminator,
    DiscriminatorTrace, Encoder, EncoderTrace, PooledNet,
};
pub use checkpoint::{Checkpoint, CheckpointManifest, TensorEntry, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use watermark::{harden, Watermark, WatermarkLogits, DEFAULT_WATERMARK_LEN};

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::nn::{HasTensors, Scalar, Tensor, TensorMut, TensorRef};

/// Largest number of images pushed through a network at once at inference.
const INFERENCE_CHUNK: usize = 16;

/// Encoder, decoder and discriminator parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle<T = f32> {
    pub arch: ArchConfig,
    pub encoder: Encoder<T>,
    pub decoder: Decoder<T>,
    pub discriminator: Discriminator<T>,
}

impl<T: Scalar> ModelBundle<T> {
    /// All-zero parameters (batch-norm scale 1, shift 0).
    pub fn zeros(arch: ArchConfig) -> Self {
        Self {
            arch,
            encoder: Encoder::new(arch),
            decoder: Decoder::new(arch),
            discriminator: Discriminator::new(arch),
        }
    }

    /// Deterministic initialization from `seed`.
    pub fn init(arch: ArchConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bundle = Self::zeros(arch);
        bundle.encoder.init(&mut rng);
        bundle.decoder.init(&mut rng);
        bundle.discriminator.init(&mut rng);
        bundle
    }

    pub fn cast<U: Scalar>(&self) -> ModelBundle<U> {
        let mut out = ModelBundle::<U>::zeros(self.arch);
        for (dst, src) in out.tensors_mut().into_iter().zip(self.tensors()) {
            for (d, s) in dst.data.iter_mut().zip(src.data) {
                *d = U::from_f64_lossy(s.as_f64());
            }
        }
        out
    }
}

/// Inference with batch-norm running statistics.
impl ModelBundle<f32> {
    fn check_watermark(&self, wm: &Watermark) -> Result<()> {
        if wm.len() != self.arch.watermark_len {
            return Err(Error::Shape(format!(
                "watermark has {} bits, model expects {}",
                wm.len(),
                self.arch.watermark_len
            )));
        }
        Ok(())
    }

    /// Watermarked images, clamped to `[0, 1]`. Images must share one size.
    pub fn embed_batch(&self, images: &[Image], watermarks: &[Watermark]) -> Result<Vec<Image>> {
        if images.len() != watermarks.len() {
            return Err(Error::Shape(format!(
                "{} images but {} watermarks",
                images.len(),
                watermarks.len()
            )));
        }
        let mut out = Vec::with_capacity(images.len());
        for (imgs, wms) in images.chunks(INFERENCE_CHUNK).zip(watermarks.chunks(INFERENCE_CHUNK)) {
            let mut bits = Vec::with_capacity(wms.len() * self.arch.watermark_len);
            for wm in wms {
                self.check_watermark(wm)?;
                bits.extend(wm.as_targets());
            }
            let x = Image::batch_tensor::<f32>(imgs)?;
            let y = self.encoder.forward(&x, &bits);
            out.extend(Image::from_tensor(&y)?.into_iter().map(|im| im.clamped()));
        }
        Ok(out)
    }

    pub fn embed(&self, image: &Image, watermark: &Watermark) -> Result<Image> {
        let mut v = self.embed_batch(std::slice::from_ref(image), std::slice::from_ref(watermark))?;
        Ok(v.remove(0))
    }

    /// Decoder logits per image; images may differ in size.
    pub fn extract_batch(&self, images: &[Image]) -> Result<Vec<WatermarkLogits>> {
        let len = self.arch.watermark_len;
        let mut out: Vec<Option<WatermarkLogits>> = vec![None; images.len()];
        let mut order: Vec<usize> = (0..images.len()).collect();
        order.sort_by_key(|&i| (images[i].height(), images[i].width()));
        for group in order.chunk_by(|&a, &b| images[a].same_dims(&images[b])) {
            for chunk in group.chunks(INFERENCE_CHUNK) {
                let batch: Vec<Image> = chunk.iter().map(|&i| images[i].clone()).collect();
                let x: Tensor<f32> = Image::batch_tensor(&batch)?;
                let logits = self.decoder.forward(&x);
                for (k, &i) in chunk.iter().enumerate() {
                    out[i] = Some(WatermarkLogits::new(logits[k * len..(k + 1) * len].to_vec()));
                }
            }
        }
        Ok(out.into_iter().map(|l| l.expect("every image decoded")).collect())
    }

    pub fn extract(&self, image: &Image) -> Result<WatermarkLogits> {
        let mut v = self.extract_batch(std::slice::from_ref(image))?;
        Ok(v.remove(0))
    }

    /// Probability that the image is not watermarked.
    pub fn discriminate(&self, image: &Image) -> f64 {
        self.discriminator.probability(&image.to_tensor::<f32>())[0]
    }
}

impl<T: Scalar> HasTensors<T> for ModelBundle<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a, T>>) {
        self.encoder.collect(&crate::nn::join(prefix, "encoder"), out);
        self.decoder.collect(&crate::nn::join(prefix, "decoder"), out);
        self.discriminator
            .collect(&crate::nn::join(prefix, "discriminator"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a, T>>) {
        self.encoder
            .collect_mut(&crate::nn::join(prefix, "encoder"), out);
        self.decoder
            .collect_mut(&crate::nn::join(prefix, "decoder"), out);
        self.discriminator
            .collect_mut(&crate::nn::join(prefix, "discriminator"), out);
    }
}
