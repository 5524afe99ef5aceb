use super::{Image, CHANNELS};
use crate::error::{Error, Result};

const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;
/// Dynamic range of `[0, 1]` pixels.
const RANGE: f64 = 1.0;

fn gaussian_window(size: usize) -> Vec<f64> {
    let half = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - half;
            (-(d * d) / (2.0 * SIGMA * SIGMA)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// "Valid" separable filtering of one plane.
fn filter_valid(x: &[f64], h: usize, w: usize, win: &[f64]) -> Vec<f64> {
    let k = win.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut tmp = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            tmp[r * ow + c] = (0..k).map(|j| win[j] * x[r * w + c + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..k).map(|j| win[j] * tmp[(r + j) * ow + c]).sum();
        }
    }
    out
}

/// Mean SSIM of one pair of planes. The window shrinks to the largest odd
/// size that fits when a plane is smaller than 11x11.
pub fn ssim_planes(a: &[f64], b: &[f64], height: usize, width: usize) -> f64 {
    assert_eq!(a.len(), height * width);
    assert_eq!(b.len(), height * width);
    let mut size = WINDOW.min(height).min(width);
    if size % 2 == 0 {
        size -= 1;
    }
    let win = gaussian_window(size);
    let c1 = (K1 * RANGE).powi(2);
    let c2 = (K2 * RANGE).powi(2);

    let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
    let mu_a = filter_valid(a, height, width, &win);
    let mu_b = filter_valid(b, height, width, &win);
    let aa = filter_valid(&prod(a, a), height, width, &win);
    let bb = filter_valid(&prod(b, b), height, width, &win);
    let ab = filter_valid(&prod(a, b), height, width, &win);

    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let var_a = aa[i] - ma * ma;
        let var_b = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
        let den = (ma * ma + mb * mb + c1) * (var_a + var_b + c2);
        total += num / den;
    }
    total / n as f64
}

/// Structural similarity, 11x11 Gaussian window (sigma 1.5), per channel
/// then averaged.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    if !a.same_dims(b) {
        return Err(Error::Shape(format!(
            "ssim of {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    let plane = a.height() * a.width();
    let to64 = |s: &[f32]| -> Vec<f64> { s.iter().map(|&v| v as f64).collect() };
    let total: f64 = (0..CHANNELS)
        .map(|c| {
            let pa = to64(&a.data()[c * plane..(c + 1) * plane]);
            let pb = to64(&b.data()[c * plane..(c + 1) * plane]);
            ssim_planes(&pa, &pb, a.height(), a.width())
        })
        .sum();
    Ok(total / CHANNELS as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(h, w, (0..h * w * 3).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    /// Direct evaluation of one window position, no separable filtering.
    fn brute_force_window(a: &[f64], b: &[f64], w: usize, r0: usize, c0: usize) -> f64 {
        let win = gaussian_window(WINDOW);
        let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for i in 0..WINDOW {
            for j in 0..WINDOW {
                let g = win[i] * win[j];
                let (x, y) = (a[(r0 + i) * w + c0 + j], b[(r0 + i) * w + c0 + j]);
                ma += g * x;
                mb += g * y;
                saa += g * x * x;
                sbb += g * y * y;
                sab += g * x * y;
            }
        }
        let (c1, c2) = (1e-4, 9e-4);
        let (va, vb, cv) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
        (2.0 * ma * mb + c1) * (2.0 * cv + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
    }

    #[test]
    fn self_similarity_is_one() {
        let img = random_image(32, 24, 1);
        assert!((ssim(&img, &img).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn black_vs_white_is_near_zero() {
        let a = Image::filled(64, 64, 0.0).unwrap();
        let b = Image::filled(64, 64, 1.0).unwrap();
        let s = ssim(&a, &b).unwrap();
        // luminance term (0 + C1) / (1 + C1) with a unit contrast term
        assert!((s - 1e-4 / (1.0 + 1e-4)).abs() < 1e-9);
        assert!(s < 0.01);
    }

    #[test]
    fn tiny_noise_keeps_ssim_near_one_and_matches_brute_force() {
        let a = random_image(24, 24, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut b = a.clone();
        b.data_mut()
            .iter_mut()
            .for_each(|v| *v += rng.gen_range(-1e-4..1e-4));
        let s = ssim(&a, &b).unwrap();
        assert!(s >= 0.999, "{s}");

        let plane = 24 * 24;
        let pa: Vec<f64> = a.data()[..plane].iter().map(|&v| v as f64).collect();
        let pb: Vec<f64> = b.data()[..plane].iter().map(|&v| v as f64).collect();
        let mut total = 0.0;
        let side = 24 - WINDOW + 1;
        for r in 0..side {
            for c in 0..side {
                total += brute_force_window(&pa, &pb, 24, r, c);
            }
        }
        let want = total / (side * side) as f64;
        assert!((ssim_planes(&pa, &pb, 24, 24) - want).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_a_shape_error() {
        let a = random_image(16, 16, 4);
        let b = random_image(16, 17, 5);
        assert!(matches!(ssim(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn small_images_use_a_shrunk_window() {
        let a = random_image(8, 9, 6);
        let b = random_image(8, 9, 7);
        let s = ssim(&a, &b).unwrap();
        assert!(s.is_finite() && s.abs() <= 1.0);
    }

    proptest! {
        #[test]
        fn ssim_is_symmetric(s1 in 0u64..500, s2 in 500u64..1000) {
            let a = random_image(16, 16, s1);
            let b = random_image(16, 16, s2);
            let ab = ssim(&a, &b).unwrap();
            let ba = ssim(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() <= 1e-9);
            prop_assert!((-1.0..=1.0).contains(&ab));
        }
    }
}
