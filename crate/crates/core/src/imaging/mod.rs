//! RGB images, benign post-processing operations and SSIM.
//!
//! Pixels are stored planar (`[channel][row][col]`) with a canonical range
//! of `[0, 1]`. Values may leave that range inside differentiable pipelines;
//! persisting an image clamps it.

pub(crate) mod io;
mod resample;
mod ssim;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Scalar, Tensor};

pub use io::{load_image, save_image, ImageFormat};
pub use resample::{blur_taps, crop_taps, resize_taps, Separable, Taps};
pub use ssim::{ssim, ssim_planes};

pub const CHANNELS: usize = 3;
pub const MIN_SIDE: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(Error::Shape(format!(
                "image {height}x{width} is smaller than {MIN_SIDE}x{MIN_SIDE}"
            )));
        }
        if data.len() != height * width * CHANNELS {
            return Err(Error::Shape(format!(
                "{} values for a {height}x{width}x{CHANNELS} image",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(height, width, vec![value; height * width * CHANNELS])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Planar pixel data, `[channel][row][col]`.
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, channel: usize, row: usize, col: usize) -> f32 {
        self.data[(channel * self.height + row) * self.width + col]
    }

    pub fn set(&mut self, channel: usize, row: usize, col: usize, value: f32) {
        self.data[(channel * self.height + row) * self.width + col] = value;
    }

    pub fn clamped(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }

    /// What an 8-bit PNG save and reload would give back.
    pub fn quantized(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| io::to_byte(v) as f32 / 255.0).collect(),
        }
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn max_abs_diff(&self, other: &Image) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn mean_abs_diff(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum::<f64>()
            / self.data.len() as f64
    }

    /// Stacks same-sized images into an `[n][3][h][w]` tensor.
    pub fn batch_tensor<T: Scalar>(images: &[Image]) -> Result<Tensor<T>> {
        let first = images
            .first()
            .ok_or_else(|| Error::Shape("empty image batch".into()))?;
        if let Some(bad) = images.iter().find(|im| !im.same_dims(first)) {
            return Err(Error::Shape(format!(
                "batch mixes {}x{} and {}x{} images",
                first.height, first.width, bad.height, bad.width
            )));
        }
        let data = images
            .iter()
            .flat_map(|im| im.data.iter().map(|&v| T::from_f64_lossy(v as f64)))
            .collect();
        Ok(Tensor::from_vec(
            images.len(),
            CHANNELS,
            first.height,
            first.width,
            data,
        ))
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Self::batch_tensor(std::slice::from_ref(self)).expect("single image batch")
    }

    /// Splits an `[n][3][h][w]` tensor back into images.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Vec<Image>> {
        if t.channels != CHANNELS {
            return Err(Error::Shape(format!("{} channels, need 3", t.channels)));
        }
        (0..t.batch)
            .map(|n| {
                Image::new(
                    t.height,
                    t.width,
                    t.item(n).iter().map(|v| v.as_f64() as f32).collect(),
                )
            })
            .collect()
    }
}

fn check_variance(variance: f64) -> Result<()> {
    if !(variance >= 0.0 && variance.is_finite()) {
        return Err(Error::ParamDomain(format!(
            "blur variance must be finite and >= 0, got {variance}"
        )));
    }
    Ok(())
}

/// `floor(fraction * len)` guarded against representation error
/// (`0.6 * 10` must give 6).
pub(crate) fn scaled_len(fraction: f64, len: usize) -> usize {
    (fraction * len as f64 + 1e-9).floor() as usize
}

fn apply_separable(img: &Image, op: &Separable) -> Image {
    let data = op.forward::<f32>(&img.data, CHANNELS);
    Image {
        height: op.rows.out_len(),
        width: op.cols.out_len(),
        data,
    }
}

/// Gaussian blur with `sigma = sqrt(variance)` and kernel radius
/// `ceil(3 * sigma)`, mirrored at the borders.
pub fn gaussian_blur(img: &Image, variance: f64) -> Result<Image> {
    check_variance(variance)?;
    let op = Separable {
        rows: blur_taps(img.height, variance),
        cols: blur_taps(img.width, variance),
    };
    Ok(apply_separable(img, &op))
}

/// Centered crop to `floor(size * H) x floor(size * W)`; an odd leftover
/// row or column is dropped at the bottom/right.
pub fn crop(img: &Image, size: f64) -> Result<Image> {
    let op = crop_separable(img.height, img.width, size)?;
    Ok(apply_separable(img, &op))
}

/// Crop geometry `(top, left, height, width)` without the minimum-size check.
pub fn crop_window(height: usize, width: usize, size: f64) -> Result<(usize, usize, usize, usize)> {
    if !(size > 0.0 && size <= 1.0) {
        return Err(Error::ParamDomain(format!(
            "crop size must be in (0, 1], got {size}"
        )));
    }
    let (h, w) = (scaled_len(size, height), scaled_len(size, width));
    Ok(((height - h) / 2, (width - w) / 2, h, w))
}

pub(crate) fn crop_separable(height: usize, width: usize, size: f64) -> Result<Separable> {
    let (_, _, h, w) = crop_window(height, width, size)?;
    if h < MIN_SIDE || w < MIN_SIDE {
        return Err(Error::ParamDomain(format!(
            "crop {size} of {height}x{width} leaves {h}x{w}, below {MIN_SIDE}"
        )));
    }
    Ok(Separable {
        rows: crop_taps(height, h),
        cols: crop_taps(width, w),
    })
}

/// Bilinear resize to `floor(ratio * H) x floor(ratio * W)` with
/// half-pixel-centre sampling.
pub fn resize(img: &Image, ratio: f64) -> Result<Image> {
    let op = resize_separable(img.height, img.width, ratio)?;
    Ok(apply_separable(img, &op))
}

pub(crate) fn resize_separable(height: usize, width: usize, ratio: f64) -> Result<Separable> {
    if !(ratio > 0.0 && ratio.is_finite()) {
        return Err(Error::ParamDomain(format!(
            "resize ratio must be positive, got {ratio}"
        )));
    }
    let (h, w) = (scaled_len(ratio, height), scaled_len(ratio, width));
    if h < MIN_SIDE || w < MIN_SIDE {
        return Err(Error::ParamDomain(format!(
            "resize {ratio} of {height}x{width} gives {h}x{w}, below {MIN_SIDE}"
        )));
    }
    Ok(Separable {
        rows: resize_taps(height, h),
        cols: resize_taps(width, w),
    })
}

/// Bilinear resize to explicit output dimensions.
pub fn resize_to(img: &Image, height: usize, width: usize) -> Result<Image> {
    if height < MIN_SIDE || width < MIN_SIDE {
        return Err(Error::ParamDomain(format!(
            "target size {height}x{width} below {MIN_SIDE}"
        )));
    }
    let op = Separable {
        rows: resize_taps(img.height, height),
        cols: resize_taps(img.width, width),
    };
    Ok(apply_separable(img, &op))
}

pub(crate) fn blur_separable(height: usize, width: usize, variance: f64) -> Result<Separable> {
    check_variance(variance)?;
    Ok(Separable {
        rows: blur_taps(height, variance),
        cols: blur_taps(width, variance),
    })
}
