//! Simplified, differentiable JPEG: colour transform, 8x8 DCT, quantization
//! and dequantization with a ratio-based surrogate gradient, inverse DCT.
//! No entropy coding and no chroma subsampling.

mod color;
mod dct;
mod dump;
mod quant;

use serde::{Deserialize, Serialize};

pub use color::{rgb_to_ycbcr, ycbcr_to_rgb, ycbcr_to_rgb_matrix, RGB_TO_YCBCR, YCBCR_OFFSET};
pub use dct::{dct8x8, idct8x8, Block};
pub use dump::{conformance_dump, read_dump, write_dump, BlockRecord, ConformanceDump, DUMP_MAGIC};
pub use quant::{
    check_quality, quant_dequant, scale_quant_table, QuantTable, BASE_CHROMA, BASE_LUMA,
};

use crate::error::Result;
use crate::imaging::{Image, CHANNELS};

/// How gradients are passed back through the quantization stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JpegGradient {
    /// Per-coefficient ratio `k = g(x) / x`.
    #[default]
    Surrogate,
    /// The true derivative of rounding, zero almost everywhere.
    Zero,
}

/// Values saved by the forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct JpegTrace {
    height: usize,
    width: usize,
    padded_height: usize,
    padded_width: usize,
    /// Surrogate factor per coefficient, laid out like the padded planes.
    k: Vec<f64>,
}

impl JpegTrace {
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn factors(&self) -> &[f64] {
        &self.k
    }
}

fn padded(len: usize) -> usize {
    len.div_ceil(8) * 8
}

fn for_each_block(ph: usize, pw: usize, mut f: impl FnMut(usize, usize)) {
    for by in (0..ph).step_by(8) {
        for bx in (0..pw).step_by(8) {
            f(by, bx);
        }
    }
}

fn load_block(plane: &[f64], pw: usize, by: usize, bx: usize) -> Block {
    let mut b = [[0.0; 8]; 8];
    for (r, row) in b.iter_mut().enumerate() {
        row.copy_from_slice(&plane[(by + r) * pw + bx..(by + r) * pw + bx + 8]);
    }
    b
}

fn store_block(plane: &mut [f64], pw: usize, by: usize, bx: usize, b: &Block) {
    for (r, row) in b.iter().enumerate() {
        plane[(by + r) * pw + bx..(by + r) * pw + bx + 8].copy_from_slice(row);
    }
}

/// Level-shifted YCbCr planes (`[0, 255]` scale, minus 128) of an
/// edge-replicated, block-aligned copy of `x`.
fn shifted_ycbcr(x: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (ph, pw) = (padded(h), padded(w));
    let (src_plane, plane) = (h * w, ph * pw);
    let mut out = vec![0.0; CHANNELS * plane];
    for r in 0..ph {
        let sr = r.min(h - 1);
        for c in 0..pw {
            let s = sr * w + c.min(w - 1);
            let rgb = [
                x[s] * 255.0,
                x[src_plane + s] * 255.0,
                x[2 * src_plane + s] * 255.0,
            ];
            let ycc = rgb_to_ycbcr(rgb);
            for ch in 0..CHANNELS {
                out[ch * plane + r * pw + c] = ycc[ch] - 128.0;
            }
        }
    }
    (out, ph, pw)
}

/// Coefficients divided by their table entry, before rounding.
fn normalized(coef: &Block, table: &[[u16; 8]; 8]) -> Block {
    let mut out = *coef;
    for (o, &q) in out.iter_mut().flatten().zip(table.iter().flatten()) {
        *o /= q as f64;
    }
    out
}

/// Forward pass on planar RGB in `[0, 1]` (`3 * h * w` values).
pub fn jpeg_forward(x: &[f64], h: usize, w: usize, table: &QuantTable) -> (Vec<f64>, JpegTrace) {
    assert_eq!(x.len(), CHANNELS * h * w);
    let (mut planes, ph, pw) = shifted_ycbcr(x, h, w);
    let plane = ph * pw;
    let mut k = vec![0.0; CHANNELS * plane];
    for ch in 0..CHANNELS {
        let q = table.for_channel(ch);
        let p = &mut planes[ch * plane..(ch + 1) * plane];
        let kp = &mut k[ch * plane..(ch + 1) * plane];
        for_each_block(ph, pw, |by, bx| {
            let mut coef = normalized(&dct8x8(&load_block(p, pw, by, bx)), q);
            let mut kb = [[0.0; 8]; 8];
            for u in 0..8 {
                for v in 0..8 {
                    let (g, kk) = quant_dequant(coef[u][v]);
                    coef[u][v] = g * q[u][v] as f64;
                    kb[u][v] = kk;
                }
            }
            store_block(p, pw, by, bx, &idct8x8(&coef));
            store_block(kp, pw, by, bx, &kb);
        });
    }

    let inv = ycbcr_to_rgb_matrix();
    let mut out = vec![0.0; CHANNELS * h * w];
    for r in 0..h {
        for c in 0..w {
            let i = r * pw + c;
            let ycc = [
                planes[i] + 128.0 - YCBCR_OFFSET[0],
                planes[plane + i] + 128.0 - YCBCR_OFFSET[1],
                planes[2 * plane + i] + 128.0 - YCBCR_OFFSET[2],
            ];
            let rgb = color::mat_vec(&inv, ycc);
            for ch in 0..CHANNELS {
                out[(ch * h + r) * w + c] = rgb[ch] / 255.0;
            }
        }
    }
    let trace = JpegTrace {
        height: h,
        width: w,
        padded_height: ph,
        padded_width: pw,
        k,
    };
    (out, trace)
}

/// Vector-Jacobian product of [`jpeg_forward`] with the chosen treatment of
/// the rounding stage.
pub fn jpeg_backward(trace: &JpegTrace, grad: &[f64], mode: JpegGradient) -> Vec<f64> {
    let (h, w) = (trace.height, trace.width);
    assert_eq!(grad.len(), CHANNELS * h * w);
    let mut out = vec![0.0; CHANNELS * h * w];
    if mode == JpegGradient::Zero {
        return out;
    }
    let (ph, pw) = (trace.padded_height, trace.padded_width);
    let plane = ph * pw;
    // The 255 scalings of the two colour stages cancel.
    let inv_t = color::transpose(&ycbcr_to_rgb_matrix());
    let fwd_t = color::transpose(&RGB_TO_YCBCR);

    let mut g = vec![0.0; CHANNELS * plane];
    for r in 0..h {
        for c in 0..w {
            let s = r * w + c;
            let v = [grad[s], grad[h * w + s], grad[2 * h * w + s]];
            let y = color::mat_vec(&inv_t, v);
            for ch in 0..CHANNELS {
                g[ch * plane + r * pw + c] = y[ch];
            }
        }
    }
    for ch in 0..CHANNELS {
        let p = &mut g[ch * plane..(ch + 1) * plane];
        let kp = &trace.k[ch * plane..(ch + 1) * plane];
        for_each_block(ph, pw, |by, bx| {
            let mut coef = dct8x8(&load_block(p, pw, by, bx));
            let kb = load_block(kp, pw, by, bx);
            for (cv, kv) in coef.iter_mut().flatten().zip(kb.iter().flatten()) {
                *cv *= kv;
            }
            store_block(p, pw, by, bx, &idct8x8(&coef));
        });
    }
    let src_plane = h * w;
    for r in 0..ph {
        let sr = r.min(h - 1);
        for c in 0..pw {
            let i = r * pw + c;
            let v = [g[i], g[plane + i], g[2 * plane + i]];
            let y = color::mat_vec(&fwd_t, v);
            let s = sr * w + c.min(w - 1);
            for ch in 0..CHANNELS {
                out[ch * src_plane + s] += y[ch];
            }
        }
    }
    out
}

/// Simplified JPEG of an image at the given quality factor.
pub fn simplified_jpeg(img: &Image, quality: u32) -> Result<Image> {
    let table = QuantTable::for_quality(quality)?;
    let x: Vec<f64> = img.data().iter().map(|&v| v as f64).collect();
    let (out, _) = jpeg_forward(&x, img.height(), img.width(), &table);
    Image::new(
        img.height(),
        img.width(),
        out.into_iter().map(|v| v as f32).collect(),
    )
}
