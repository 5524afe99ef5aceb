use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_WATERMARK_LEN: usize = 30;

/// Binary watermark, one `u8` in `{0, 1}` per bit.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Watermark {
    bits: Vec<u8>,
}

impl Watermark {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if let Some(b) = bits.iter().find(|&&b| b > 1) {
            return Err(Error::WatermarkFormat(format!("bit value {b} is not 0 or 1")));
        }
        Ok(Self { bits })
    }

    pub fn zeros(len: usize) -> Self {
        Self { bits: vec![0; len] }
    }

    /// Independent fair coin flips.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, len: usize) -> Self {
        Self {
            bits: (0..len).map(|_| rng.gen_range(0..=1u8)).collect(),
        }
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn complement(&self) -> Self {
        Self {
            bits: self.bits.iter().map(|b| 1 - b).collect(),
        }
    }

    /// Bits as reals, the training targets.
    pub fn as_targets(&self) -> Vec<f32> {
        self.bits.iter().map(|&b| b as f32).collect()
    }

    /// Parses `0b...`/plain binary digits, or `0x...` hex of exactly
    /// `expected_len` bits (hex is left-padded, extra leading bits must be 0).
    pub fn parse(s: &str, expected_len: usize) -> Result<Self> {
        let s = s.trim();
        let bits = if let Some(hex) = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
            let mut bits = Vec::with_capacity(hex.len() * 4);
            for ch in hex.chars() {
                let v = ch
                    .to_digit(16)
                    .ok_or_else(|| Error::WatermarkFormat(format!("bad hex digit {ch:?}")))?;
                bits.extend((0..4).rev().map(|i| ((v >> i) & 1) as u8));
            }
            if bits.len() < expected_len {
                return Err(Error::WatermarkFormat(format!(
                    "hex string has {} bits, need {expected_len}",
                    bits.len()
                )));
            }
            let extra = bits.len() - expected_len;
            if extra >= 4 || bits[..extra].iter().any(|&b| b != 0) {
                return Err(Error::WatermarkFormat(format!(
                    "hex string does not encode exactly {expected_len} bits"
                )));
            }
            bits.split_off(extra)
        } else {
            let digits = s.strip_prefix("0b").unwrap_or(s);
            digits
                .chars()
                .map(|c| match c {
                    '0' => Ok(0),
                    '1' => Ok(1),
                    other => Err(Error::WatermarkFormat(format!("bad binary digit {other:?}"))),
                })
                .collect::<Result<Vec<u8>>>()?
        };
        if bits.len() != expected_len {
            return Err(Error::WatermarkFormat(format!(
                "expected {expected_len} bits, got {}",
                bits.len()
            )));
        }
        Ok(Self { bits })
    }
}

impl fmt::Display for Watermark {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.bits {
            write!(f, "{b}")?;
        }
        Ok(())
    }
}

impl FromStr for Watermark {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let digits = s.trim().strip_prefix("0b").unwrap_or(s.trim());
        Self::parse(digits, digits.len())
    }
}

impl TryFrom<String> for Watermark {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Watermark> for String {
    fn from(w: Watermark) -> String {
        w.to_string()
    }
}

/// Real-valued decoder output before bit decisions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WatermarkLogits {
    pub values: Vec<f32>,
}

impl WatermarkLogits {
    pub fn new(values: Vec<f32>) -> Self {
        Self { values }
    }

    /// Bit `i` is 1 iff `values[i] >= 0.5`.
    pub fn harden(&self) -> Result<Watermark> {
        harden(&self.values)
    }
}

pub fn harden(values: &[f32]) -> Result<Watermark> {
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("logit {i} is {}", values[i])));
    }
    Ok(Watermark {
        bits: values.iter().map(|&v| u8::from(v >= 0.5)).collect(),
    })
}
