//! Orthonormal 8x8 DCT-II and its inverse.

use std::sync::OnceLock;

pub type Block = [[f64; 8]; 8];

/// `basis[u][x] = a(u) cos((2x + 1) u pi / 16)`.
fn basis() -> &'static Block {
    static BASIS: OnceLock<Block> = OnceLock::new();
    BASIS.get_or_init(|| {
        let mut c = [[0.0; 8]; 8];
        for (u, row) in c.iter_mut().enumerate() {
            let alpha = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
            for (x, v) in row.iter_mut().enumerate() {
                *v = alpha
                    * (((2 * x + 1) as f64) * u as f64 * std::f64::consts::PI / 16.0).cos();
            }
        }
        c
    })
}

/// `C * B * C^T`.
pub fn dct8x8(block: &Block) -> Block {
    let c = basis();
    let mut tmp = [[0.0; 8]; 8];
    for u in 0..8 {
        for x in 0..8 {
            tmp[u][x] = (0..8).map(|y| c[u][y] * block[y][x]).sum();
        }
    }
    let mut out = [[0.0; 8]; 8];
    for u in 0..8 {
        for v in 0..8 {
            out[u][v] = (0..8).map(|x| tmp[u][x] * c[v][x]).sum();
        }
    }
    out
}

/// `C^T * F * C`.
pub fn idct8x8(coef: &Block) -> Block {
    let c = basis();
    let mut tmp = [[0.0; 8]; 8];
    for y in 0..8 {
        for v in 0..8 {
            tmp[y][v] = (0..8).map(|u| c[u][y] * coef[u][v]).sum();
        }
    }
    let mut out = [[0.0; 8]; 8];
    for y in 0..8 {
        for x in 0..8 {
            out[y][x] = (0..8).map(|v| tmp[y][v] * c[v][x]).sum();
        }
    }
    out
}
