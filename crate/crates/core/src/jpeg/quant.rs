use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Annex K luminance table (natural row-major order).
pub const BASE_LUMA: [[u16; 8]; 8] = [
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
];

/// Annex K chrominance table.
pub const BASE_CHROMA: [[u16; 8]; 8] = [
    [17, 18, 24, 47, 99, 99, 99, 99],
    [18, 21, 26, 66, 99, 99, 99, 99],
    [24, 26, 56, 99, 99, 99, 99, 99],
    [47, 66, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantTable {
    pub luma: [[u16; 8]; 8],
    pub chroma: [[u16; 8]; 8],
}

impl QuantTable {
    pub fn base() -> Self {
        Self {
            luma: BASE_LUMA,
            chroma: BASE_CHROMA,
        }
    }

    pub fn for_quality(quality: u32) -> Result<Self> {
        scale_quant_table(&Self::base(), quality)
    }

    /// Luma table for channel 0 (Y), chroma for Cb and Cr.
    pub fn for_channel(&self, channel: usize) -> &[[u16; 8]; 8] {
        if channel == 0 {
            &self.luma
        } else {
            &self.chroma
        }
    }
}

pub fn check_quality(quality: u32) -> Result<()> {
    if (1..=100).contains(&quality) {
        Ok(())
    } else {
        Err(Error::ParamDomain(format!(
            "jpeg quality must be in 1..=100, got {quality}"
        )))
    }
}

/// libjpeg quality scaling.
pub fn scale_quant_table(base: &QuantTable, quality: u32) -> Result<QuantTable> {
    check_quality(quality)?;
    let s = if quality < 50 {
        5000 / quality
    } else {
        200 - 2 * quality
    };
    let scale = |t: &[[u16; 8]; 8]| {
        let mut out = [[0u16; 8]; 8];
        for (o, &e) in out.iter_mut().flatten().zip(t.iter().flatten()) {
            *o = ((e as u32 * s + 50) / 100).clamp(1, 255) as u16;
        }
        out
    };
    Ok(QuantTable {
        luma: scale(&base.luma),
        chroma: scale(&base.chroma),
    })
}

/// Quantize-dequantize of one normalized coefficient: returns the rounded
/// value `g(x)` and the surrogate gradient `k`, with `k * x == g(x)` for
/// non-zero `x`.
pub fn quant_dequant(x: f64) -> (f64, f64) {
    let floor = x.floor();
    let g = if x - floor < 0.5 { floor } else { floor + 1.0 };
    let k = if x == 0.0 { 0.0 } else { g / x };
    (g, k)
}
