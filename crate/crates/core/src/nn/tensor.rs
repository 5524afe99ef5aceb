use super::Scalar;

/// Dense NCHW tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Self {
            batch,
            channels,
            height,
            width,
            data: vec![T::zero(); batch * channels * height * width],
        }
    }

    pub fn from_vec(
        batch: usize,
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<T>,
    ) -> Self {
        assert_eq!(
            data.len(),
            batch * channels * height * width,
            "tensor data length does not match shape"
        );
        Self {
            batch,
            channels,
            height,
            width,
            data,
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.batch, self.channels, self.height, self.width]
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    /// Elements of one batch item.
    pub fn item_len(&self) -> usize {
        self.channels * self.plane()
    }

    pub fn item(&self, n: usize) -> &[T] {
        let len = self.item_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [T] {
        let len = self.item_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.batch, self.channels, self.height, self.width)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            batch: self.batch,
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64_lossy(v.as_f64()))
                .collect(),
        }
    }

    /// Stacks the channels of several tensors with equal batch and spatial size.
    pub fn concat_channels(parts: &[&Tensor<T>]) -> Self {
        let first = parts.first().expect("at least one tensor");
        let (batch, height, width) = (first.batch, first.height, first.width);
        assert!(
            parts
                .iter()
                .all(|p| p.batch == batch && p.height == height && p.width == width),
            "concat_channels: mismatched shapes"
        );
        let channels = parts.iter().map(|p| p.channels).sum();
        let mut data = Vec::with_capacity(batch * channels * height * width);
        for n in 0..batch {
            for p in parts {
                data.extend_from_slice(p.item(n));
            }
        }
        Self::from_vec(batch, channels, height, width, data)
    }

    /// Inverse of [`Tensor::concat_channels`] for the first `channels` planes.
    pub fn leading_channels(&self, channels: usize) -> Self {
        assert!(channels <= self.channels);
        let plane = self.plane();
        let mut data = Vec::with_capacity(self.batch * channels * plane);
        for n in 0..self.batch {
            data.extend_from_slice(&self.item(n)[..channels * plane]);
        }
        Self::from_vec(self.batch, channels, self.height, self.width, data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
