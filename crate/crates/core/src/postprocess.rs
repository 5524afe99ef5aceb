//! Post-processing operations placed between encoder and decoder, their
//! parameter grids, and batched differentiable application.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{self, Image, Separable, CHANNELS};
use crate::jpeg::{self, JpegGradient, JpegTrace, QuantTable};
use crate::nn::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PostProcessOp {
    Identity,
    Jpeg { quality: u32 },
    GaussianBlur { variance: f64 },
    Crop { size: f64 },
    Resize { ratio: f64 },
}

/// The scheduler's states: one per operation family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpFamily {
    Identity = 0,
    Jpeg = 1,
    GaussianBlur = 2,
    Crop = 3,
    Resize = 4,
}

pub const N_FAMILIES: usize = 5;

impl OpFamily {
    pub const ALL: [OpFamily; N_FAMILIES] = [
        OpFamily::Identity,
        OpFamily::Jpeg,
        OpFamily::GaussianBlur,
        OpFamily::Crop,
        OpFamily::Resize,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            OpFamily::Identity => "identity",
            OpFamily::Jpeg => "jpeg",
            OpFamily::GaussianBlur => "gaussian_blur",
            OpFamily::Crop => "crop",
            OpFamily::Resize => "resize",
        }
    }

    /// Parameter grid used for training and evaluation.
    pub fn grid(self) -> Vec<PostProcessOp> {
        let tenths = |lo: u32, hi: u32| (lo..=hi).map(|i| i as f64 / 10.0);
        match self {
            OpFamily::Identity => vec![PostProcessOp::Identity],
            OpFamily::Jpeg => (1..=10)
                .map(|i| PostProcessOp::Jpeg { quality: 10 * i })
                .collect(),
            OpFamily::GaussianBlur => tenths(0, 10)
                .map(|variance| PostProcessOp::GaussianBlur { variance })
                .collect(),
            OpFamily::Crop => tenths(6, 10).map(|size| PostProcessOp::Crop { size }).collect(),
            OpFamily::Resize => tenths(3, 10)
                .map(|ratio| PostProcessOp::Resize { ratio })
                .collect(),
        }
    }

    /// Uniform draw from [`OpFamily::grid`].
    pub fn sample<R: Rng + ?Sized>(self, rng: &mut R) -> PostProcessOp {
        let grid = self.grid();
        grid[rng.gen_range(0..grid.len())]
    }
}

impl fmt::Display for OpFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Every grid point of every non-identity family, preceded by `Identity`.
pub fn full_grid() -> Vec<PostProcessOp> {
    OpFamily::ALL.iter().flat_map(|f| f.grid()).collect()
}

impl PostProcessOp {
    pub fn family(&self) -> OpFamily {
        match self {
            PostProcessOp::Identity => OpFamily::Identity,
            PostProcessOp::Jpeg { .. } => OpFamily::Jpeg,
            PostProcessOp::GaussianBlur { .. } => OpFamily::GaussianBlur,
            PostProcessOp::Crop { .. } => OpFamily::Crop,
            PostProcessOp::Resize { .. } => OpFamily::Resize,
        }
    }

    /// The numeric parameter, `None` for identity.
    pub fn parameter(&self) -> Option<f64> {
        match *self {
            PostProcessOp::Identity => None,
            PostProcessOp::Jpeg { quality } => Some(quality as f64),
            PostProcessOp::GaussianBlur { variance } => Some(variance),
            PostProcessOp::Crop { size } => Some(size),
            PostProcessOp::Resize { ratio } => Some(ratio),
        }
    }

    pub fn label(&self) -> String {
        match self.parameter() {
            None => "identity".into(),
            Some(p) => format!("{}({p})", self.family()),
        }
    }

    /// Output size for an input of `height x width`.
    pub fn output_dims(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        Ok(match self.linear_op(height, width)? {
            Some(op) => op.out_dims(),
            None => (height, width),
        })
    }

    fn linear_op(&self, height: usize, width: usize) -> Result<Option<Separable>> {
        match *self {
            PostProcessOp::GaussianBlur { variance } => {
                imaging::blur_separable(height, width, variance).map(Some)
            }
            PostProcessOp::Crop { size } => imaging::crop_separable(height, width, size).map(Some),
            PostProcessOp::Resize { ratio } => {
                imaging::resize_separable(height, width, ratio).map(Some)
            }
            PostProcessOp::Jpeg { quality } => jpeg::check_quality(quality).map(|_| None),
            PostProcessOp::Identity => Ok(None),
        }
    }
}

impl fmt::Display for PostProcessOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

pub fn apply_post_process(img: &Image, op: &PostProcessOp) -> Result<Image> {
    match *op {
        PostProcessOp::Identity => Ok(img.clone()),
        PostProcessOp::Jpeg { quality } => jpeg::simplified_jpeg(img, quality),
        PostProcessOp::GaussianBlur { variance } => imaging::gaussian_blur(img, variance),
        PostProcessOp::Crop { size } => imaging::crop(img, size),
        PostProcessOp::Resize { ratio } => imaging::resize(img, ratio),
    }
}

/// Saved state for propagating gradients back through a batched op.
#[derive(Clone, Debug)]
pub enum Pullback {
    Identity,
    Linear {
        op: Separable,
        input_shape: [usize; 4],
    },
    Jpeg {
        traces: Vec<JpegTrace>,
        input_shape: [usize; 4],
    },
}

impl Pullback {
    /// Gradient w.r.t. the op input given the gradient w.r.t. its output.
    pub fn backward<T: Scalar>(&self, grad: &Tensor<T>, mode: JpegGradient) -> Tensor<T> {
        match self {
            Pullback::Identity => grad.clone(),
            Pullback::Linear { op, input_shape } => {
                let [n, c, h, w] = *input_shape;
                let mut out = Vec::with_capacity(n * c * h * w);
                for i in 0..n {
                    out.extend(op.backward(grad.item(i), c));
                }
                Tensor::from_vec(n, c, h, w, out)
            }
            Pullback::Jpeg {
                traces,
                input_shape,
            } => {
                let [n, c, h, w] = *input_shape;
                let mut out = Vec::with_capacity(n * c * h * w);
                for (i, trace) in traces.iter().enumerate() {
                    let g: Vec<f64> = grad.item(i).iter().map(|v| v.as_f64()).collect();
                    out.extend(
                        jpeg::jpeg_backward(trace, &g, mode)
                            .into_iter()
                            .map(T::from_f64_lossy),
                    );
                }
                Tensor::from_vec(n, c, h, w, out)
            }
        }
    }

    /// True when the op blocks all gradient flow under `mode`.
    pub fn blocks_gradient(&self, mode: JpegGradient) -> bool {
        matches!(self, Pullback::Jpeg { .. }) && mode == JpegGradient::Zero
    }
}

/// Applies `op` to every image of an `[n][3][h][w]` batch.
pub fn apply_batch<T: Scalar>(x: &Tensor<T>, op: &PostProcessOp) -> Result<(Tensor<T>, Pullback)> {
    if x.channels != CHANNELS {
        return Err(Error::Shape(format!("{} channels, need 3", x.channels)));
    }
    let shape = x.shape();
    let [n, c, h, w] = shape;
    match *op {
        PostProcessOp::Identity => Ok((x.clone(), Pullback::Identity)),
        PostProcessOp::Jpeg { quality } => {
            let table = QuantTable::for_quality(quality)?;
            let mut out = Vec::with_capacity(x.data.len());
            let mut traces = Vec::with_capacity(n);
            for i in 0..n {
                let xi: Vec<f64> = x.item(i).iter().map(|v| v.as_f64()).collect();
                let (yi, trace) = jpeg::jpeg_forward(&xi, h, w, &table);
                out.extend(yi.into_iter().map(T::from_f64_lossy));
                traces.push(trace);
            }
            Ok((
                Tensor::from_vec(n, c, h, w, out),
                Pullback::Jpeg {
                    traces,
                    input_shape: shape,
                },
            ))
        }
        _ => {
            let sep = op.linear_op(h, w)?.expect("linear op");
            let (oh, ow) = sep.out_dims();
            let mut out = Vec::with_capacity(n * c * oh * ow);
            for i in 0..n {
                out.extend(sep.forward(x.item(i), c));
            }
            Ok((
                Tensor::from_vec(n, c, oh, ow, out),
                Pullback::Linear {
                    op: sep,
                    input_shape: shape,
                },
            ))
        }
    }
}
