use std::io::Write;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ImageEncoder, RgbImage};

use super::{Image, CHANNELS};
use crate::error::{Error, Result};
use crate::util::write_atomic;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageFormat {
    Png,
    /// Binary PPM (P6).
    Ppm,
}

impl ImageFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        let ext = path.extension()?.to_str()?.to_ascii_lowercase();
        match ext.as_str() {
            "png" => Some(Self::Png),
            "ppm" | "pnm" => Some(Self::Ppm),
            _ => None,
        }
    }
}

fn codec_err(path: &Path, e: impl ToString) -> Error {
    Error::ImageCodec {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Loads an 8-bit PNG or PPM, mapping byte `b` to `b / 255`.
pub fn load_image(path: &Path) -> Result<Image> {
    let decoded = image::open(path).map_err(|e| codec_err(path, e))?;
    let rgb = decoded.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0.0f32; w * h * CHANNELS];
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..CHANNELS {
            data[(c * h + y as usize) * w + x as usize] = px[c] as f32 / 255.0;
        }
    }
    Image::new(h, w, data)
}

/// Clamp to `[0, 1]`, then round half up to bytes.
pub(crate) fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) as f64 * 255.0 + 0.5).floor() as u8
}

pub(crate) fn to_rgb8(img: &Image) -> RgbImage {
    let (h, w) = (img.height(), img.width());
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        image::Rgb([
            to_byte(img.get(0, y, x)),
            to_byte(img.get(1, y, x)),
            to_byte(img.get(2, y, x)),
        ])
    })
}

/// Encodes and atomically writes an image; the format follows the extension.
pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    let format = ImageFormat::from_path(path)
        .ok_or_else(|| codec_err(path, "unsupported extension (use .png or .ppm)"))?;
    let rgb = to_rgb8(img);
    let mut bytes = Vec::new();
    match format {
        ImageFormat::Png => {
            image::codecs::png::PngEncoder::new(&mut bytes)
                .write_image(rgb.as_raw(), rgb.width(), rgb.height(), image::ColorType::Rgb8)
                .map_err(|e| codec_err(path, e))?;
        }
        ImageFormat::Ppm => {
            PnmEncoder::new(&mut bytes)
                .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
                .write_image(rgb.as_raw(), rgb.width(), rgb.height(), image::ColorType::Rgb8)
                .map_err(|e| codec_err(path, e))?;
        }
    }
    write_atomic(path, |f| f.write_all(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_rounding_is_half_up_and_clamped() {
        assert_eq!(to_byte(-0.2), 0);
        assert_eq!(to_byte(1.7), 255);
        assert_eq!(to_byte(0.5 / 255.0), 1);
        assert_eq!(to_byte(0.49 / 255.0), 0);
        assert_eq!(to_byte(128.0 / 255.0), 128);
    }

    #[test]
    fn png_and_ppm_round_trip_through_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = Image::filled(9, 11, 0.0).unwrap();
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = (i % 256) as f32 / 255.0;
        }
        for name in ["a.png", "a.ppm"] {
            let path = dir.path().join(name);
            save_image(&img, &path).unwrap();
            let back = load_image(&path).unwrap();
            assert!(back.max_abs_diff(&img) < 1e-6, "{name}");
        }
        let ppm = std::fs::read(dir.path().join("a.ppm")).unwrap();
        assert!(ppm.starts_with(b"P6"));
    }

    #[test]
    fn unknown_extension_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::filled(8, 8, 0.5).unwrap();
        assert!(save_image(&img, &dir.path().join("x.bmp")).is_err());
        assert!(!dir.path().join("x.bmp").exists());
    }
}
