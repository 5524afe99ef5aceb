//! Per-block coefficient dump for comparison against external oracles.
//!
//! File layout, all little-endian:
//!
//! ```text
//! magic      8 bytes  "SFJQDUMP"
//! version    u32      1
//! quality    u32
//! height     u32      source image height
//! width      u32      source image width
//! blocks     u32      number of block records
//! record*    channel u32 (0=Y, 1=Cb, 2=Cr), block_row u32, block_col u32,
//!            table    64 x f32  quantization entries
//!            before   64 x f32  DCT coefficients of the level-shifted block
//!            after    64 x f32  dequantized coefficients
//! ```
//!
//! Every 64-value array is in row-major (not zigzag) order. Records are
//! ordered by channel, then block row, then block column.

use std::io::{Read, Write};
use std::path::Path;

use super::{dct8x8, for_each_block, load_block, normalized, quant_dequant, shifted_ycbcr, QuantTable};
use crate::error::{Error, Result};
use crate::imaging::{Image, CHANNELS};
use crate::util::write_atomic;

pub const DUMP_MAGIC: &[u8; 8] = b"SFJQDUMP";
const DUMP_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct BlockRecord {
    pub channel: u32,
    pub block_row: u32,
    pub block_col: u32,
    pub table: [f64; 64],
    pub before: [f64; 64],
    pub after: [f64; 64],
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConformanceDump {
    pub quality: u32,
    pub height: u32,
    pub width: u32,
    pub blocks: Vec<BlockRecord>,
}

pub fn conformance_dump(img: &Image, quality: u32) -> Result<ConformanceDump> {
    let table = QuantTable::for_quality(quality)?;
    let (h, w) = (img.height(), img.width());
    let x: Vec<f64> = img.data().iter().map(|&v| v as f64).collect();
    let (planes, ph, pw) = shifted_ycbcr(&x, h, w);
    let plane = ph * pw;
    let mut blocks = Vec::new();
    for ch in 0..CHANNELS {
        let q = table.for_channel(ch);
        let p = &planes[ch * plane..(ch + 1) * plane];
        for_each_block(ph, pw, |by, bx| {
            let coef = dct8x8(&load_block(p, pw, by, bx));
            let norm = normalized(&coef, q);
            let mut rec = BlockRecord {
                channel: ch as u32,
                block_row: (by / 8) as u32,
                block_col: (bx / 8) as u32,
                table: [0.0; 64],
                before: [0.0; 64],
                after: [0.0; 64],
            };
            for i in 0..64 {
                let (u, v) = (i / 8, i % 8);
                rec.table[i] = q[u][v] as f64;
                rec.before[i] = coef[u][v];
                rec.after[i] = quant_dequant(norm[u][v]).0 * q[u][v] as f64;
            }
            blocks.push(rec);
        });
    }
    Ok(ConformanceDump {
        quality,
        height: h as u32,
        width: w as u32,
        blocks,
    })
}

pub fn write_dump(dump: &ConformanceDump, path: &Path) -> Result<()> {
    write_atomic(path, |f| {
        f.write_all(DUMP_MAGIC)?;
        for v in [
            DUMP_VERSION,
            dump.quality,
            dump.height,
            dump.width,
            dump.blocks.len() as u32,
        ] {
            f.write_all(&v.to_le_bytes())?;
        }
        for b in &dump.blocks {
            for v in [b.channel, b.block_row, b.block_col] {
                f.write_all(&v.to_le_bytes())?;
            }
            for arr in [&b.table, &b.before, &b.after] {
                for &v in arr.iter() {
                    f.write_all(&(v as f32).to_le_bytes())?;
                }
            }
        }
        Ok(())
    })
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_block(r: &mut impl Read) -> std::io::Result<[f64; 64]> {
    let mut out = [0.0; 64];
    let mut b = [0u8; 4];
    for v in out.iter_mut() {
        r.read_exact(&mut b)?;
        *v = f32::from_le_bytes(b) as f64;
    }
    Ok(out)
}

/// Reads a dump written by [`write_dump`]; values come back at f32 precision.
pub fn read_dump(path: &Path) -> Result<ConformanceDump> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != DUMP_MAGIC {
        return Err(Error::Checkpoint(format!("{}: not a coefficient dump", path.display())));
    }
    let version = read_u32(&mut r)?;
    if version != DUMP_VERSION {
        return Err(Error::Checkpoint(format!("unsupported dump version {version}")));
    }
    let quality = read_u32(&mut r)?;
    let height = read_u32(&mut r)?;
    let width = read_u32(&mut r)?;
    let count = read_u32(&mut r)?;
    let mut blocks = Vec::with_capacity(count as usize);
    for _ in 0..count {
        blocks.push(BlockRecord {
            channel: read_u32(&mut r)?,
            block_row: read_u32(&mut r)?,
            block_col: read_u32(&mut r)?,
            table: read_block(&mut r)?,
            before: read_block(&mut r)?,
            after: read_block(&mut r)?,
        });
    }
    Ok(ConformanceDump {
        quality,
        height,
        width,
        blocks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        Image::new(h, w, (0..3 * h * w).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn dequantized_coefficients_are_integer_multiples() {
        let img = random_image(16, 20);
        let dump = conformance_dump(&img, 25).unwrap();
        assert_eq!(dump.blocks.len(), 3 * 2 * 3);
        for b in &dump.blocks {
            for i in 0..64 {
                // integer oracle: round half up of before / entry
                let n = (b.before[i] / b.table[i] + 0.5).floor();
                assert_eq!(b.after[i], n * b.table[i]);
            }
        }
    }

    #[test]
    fn file_round_trip() {
        let img = random_image(8, 16);
        let dump = conformance_dump(&img, 60).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        write_dump(&dump, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 8 + 5 * 4 + dump.blocks.len() * (12 + 3 * 64 * 4));
        let back = read_dump(&path).unwrap();
        assert_eq!(back.blocks.len(), dump.blocks.len());
        assert_eq!(back.quality, 60);
        for (a, b) in back.blocks.iter().zip(&dump.blocks) {
            assert_eq!(a.channel, b.channel);
            for i in 0..64 {
                assert_eq!(a.after[i], b.after[i] as f32 as f64);
            }
        }
    }
}
