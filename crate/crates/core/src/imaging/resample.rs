use crate::nn::Scalar;

/// Sparse 1-D linear map: `out[i] = sum(w * in[j])` over `taps[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Taps {
    in_len: usize,
    taps: Vec<Vec<(usize, f64)>>,
}

impl Taps {
    pub fn new(in_len: usize, taps: Vec<Vec<(usize, f64)>>) -> Self {
        assert!(
            taps.iter().flatten().all(|&(j, _)| j < in_len),
            "tap index out of range"
        );
        Self { in_len, taps }
    }

    pub fn identity(len: usize) -> Self {
        Self::new(len, (0..len).map(|i| vec![(i, 1.0)]).collect())
    }

    pub fn in_len(&self) -> usize {
        self.in_len
    }

    pub fn out_len(&self) -> usize {
        self.taps.len()
    }

    pub fn taps(&self, i: usize) -> &[(usize, f64)] {
        &self.taps[i]
    }
}

/// Index into `[0, len)` mirrored about the edge pixels (`d c b | a b c d`),
/// repeated as often as needed.
fn mirror(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    if m < len as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Normalized Gaussian taps, radius `ceil(3 sigma)`, mirrored borders.
pub fn blur_taps(len: usize, variance: f64) -> Taps {
    let sigma = variance.sqrt();
    let radius = (3.0 * sigma).ceil() as isize;
    if radius == 0 {
        return Taps::identity(len);
    }
    let raw: Vec<f64> = (-radius..=radius)
        .map(|d| (-((d * d) as f64) / (2.0 * variance)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    let kernel: Vec<f64> = raw.iter().map(|w| w / total).collect();
    let taps = (0..len as isize)
        .map(|i| {
            let mut row: Vec<(usize, f64)> = Vec::with_capacity(kernel.len());
            for (off, &w) in (-radius..=radius).zip(&kernel) {
                let j = mirror(i + off, len);
                match row.iter_mut().find(|(k, _)| *k == j) {
                    Some(slot) => slot.1 += w,
                    None => row.push((j, w)),
                }
            }
            row
        })
        .collect();
    Taps::new(len, taps)
}

/// Window `[(len - out) / 2, ... + out)`.
pub fn crop_taps(len: usize, out: usize) -> Taps {
    assert!(out <= len);
    let start = (len - out) / 2;
    Taps::new(len, (0..out).map(|i| vec![(start + i, 1.0)]).collect())
}

/// Linear interpolation with half-pixel centres; sample positions left of
/// the first pixel are clamped to it.
pub fn resize_taps(len: usize, out: usize) -> Taps {
    let scale = len as f64 / out as f64;
    let taps = (0..out)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            let frac = if i0 == i1 { 0.0 } else { src - i0 as f64 };
            if frac == 0.0 {
                vec![(i0, 1.0)]
            } else {
                vec![(i0, 1.0 - frac), (i1, frac)]
            }
        })
        .collect();
    Taps::new(len, taps)
}

/// `out = R * X * C^T` for each plane `X`.
#[derive(Clone, Debug, PartialEq)]
pub struct Separable {
    pub rows: Taps,
    pub cols: Taps,
}

impl Separable {
    pub fn identity(height: usize, width: usize) -> Self {
        Self {
            rows: Taps::identity(height),
            cols: Taps::identity(width),
        }
    }

    pub fn out_dims(&self) -> (usize, usize) {
        (self.rows.out_len(), self.cols.out_len())
    }

    /// Applies the map to `planes` stacked planes of `rows.in_len x cols.in_len`.
    pub fn forward<T: Scalar>(&self, x: &[T], planes: usize) -> Vec<T> {
        let (h, w) = (self.rows.in_len, self.cols.in_len);
        let (oh, ow) = self.out_dims();
        assert_eq!(x.len(), planes * h * w, "separable input size");
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut tmp = vec![0.0f64; h * ow];
        for p in 0..planes {
            let plane = &x[p * h * w..(p + 1) * h * w];
            for r in 0..h {
                let line = &plane[r * w..(r + 1) * w];
                for c in 0..ow {
                    tmp[r * ow + c] = self.cols.taps[c]
                        .iter()
                        .map(|&(j, wt)| wt * line[j].as_f64())
                        .sum();
                }
            }
            for r in 0..oh {
                for c in 0..ow {
                    let v: f64 = self.rows.taps[r]
                        .iter()
                        .map(|&(j, wt)| wt * tmp[j * ow + c])
                        .sum();
                    out.push(T::from_f64_lossy(v));
                }
            }
        }
        out
    }

    /// Vector-Jacobian product: the transpose map applied to `grad`.
    pub fn backward<T: Scalar>(&self, grad: &[T], planes: usize) -> Vec<T> {
        let (h, w) = (self.rows.in_len, self.cols.in_len);
        let (oh, ow) = self.out_dims();
        assert_eq!(grad.len(), planes * oh * ow, "separable grad size");
        let mut out = vec![T::zero(); planes * h * w];
        let mut tmp = vec![0.0f64; h * ow];
        for p in 0..planes {
            let g = &grad[p * oh * ow..(p + 1) * oh * ow];
            tmp.iter_mut().for_each(|v| *v = 0.0);
            for r in 0..oh {
                for &(j, wt) in &self.rows.taps[r] {
                    for c in 0..ow {
                        tmp[j * ow + c] += wt * g[r * ow + c].as_f64();
                    }
                }
            }
            let dst = &mut out[p * h * w..(p + 1) * h * w];
            for r in 0..h {
                let mut acc = vec![0.0f64; w];
                for c in 0..ow {
                    let v = tmp[r * ow + c];
                    for &(j, wt) in &self.cols.taps[c] {
                        acc[j] += wt * v;
                    }
                }
                for (d, a) in dst[r * w..(r + 1) * w].iter_mut().zip(acc) {
                    *d = T::from_f64_lossy(a);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mirror_reflects_without_repeating_edges() {
        let idx: Vec<usize> = (-3..8).map(|i| mirror(i, 5)).collect();
        assert_eq!(idx, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
    }

    #[test]
    fn blur_rows_sum_to_one() {
        for var in [0.1, 0.5, 1.0, 9.0] {
            let taps = blur_taps(8, var);
            for i in 0..8 {
                let s: f64 = taps.taps(i).iter().map(|t| t.1).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    /// <A x, y> == <x, A^T y> for every separable map.
    #[test]
    fn backward_is_the_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ops = [
            Separable {
                rows: blur_taps(9, 0.8),
                cols: blur_taps(11, 0.3),
            },
            Separable {
                rows: crop_taps(9, 6),
                cols: crop_taps(11, 7),
            },
            Separable {
                rows: resize_taps(9, 4),
                cols: resize_taps(11, 17),
            },
        ];
        for op in ops {
            let (oh, ow) = op.out_dims();
            let x: Vec<f64> = (0..2 * 9 * 11).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..2 * oh * ow).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let ax = op.forward(&x, 2);
            let aty = op.backward(&y, 2);
            let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
        }
    }
}
