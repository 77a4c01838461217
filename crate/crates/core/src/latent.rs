//! Integer latent grids and the channel block layout shared by the codec and
//! the entropy model.

use std::ops::Range;

use thiserror::Error;

use crate::formats::{FormatError, Tensor};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LayoutError {
    #[error("block boundaries must be nonempty and strictly increasing from above 0: {0:?}")]
    BadBoundaries(Vec<usize>),
    #[error("latent tensor must have shape (C, H, W) with nonzero dims, got {0:?}")]
    BadShape(Vec<usize>),
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Prefix block boundaries `k_1 < k_2 < ... < k_n = C`. Block `b` (1-based)
/// covers channels `k_{b-1}..k_b` with `k_0 = 0`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelConfig {
    boundaries: Vec<usize>,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            boundaries: vec![128, 224, 320],
        }
    }
}

impl ChannelConfig {
    pub fn new(boundaries: Vec<usize>) -> Result<Self, LayoutError> {
        let increasing = boundaries.windows(2).all(|w| w[0] < w[1]);
        if boundaries.is_empty() || boundaries[0] == 0 || !increasing {
            return Err(LayoutError::BadBoundaries(boundaries));
        }
        Ok(Self { boundaries })
    }

    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    pub fn total_channels(&self) -> usize {
        *self.boundaries.last().expect("nonempty")
    }

    pub fn num_blocks(&self) -> usize {
        self.boundaries.len()
    }

    /// Exclusive end `k_b` of block `b`; `prefix_end(0) = 0`.
    pub fn prefix_end(&self, block: usize) -> usize {
        if block == 0 {
            0
        } else {
            self.boundaries[block - 1]
        }
    }

    pub fn block_channels(&self, block: usize) -> Range<usize> {
        self.prefix_end(block - 1)..self.prefix_end(block)
    }
}

/// Integer symbol grid of shape `(C, H, W)`, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatentTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<i32>,
}

impl LatentTensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0; channels * height * width],
        }
    }

    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<i32>,
    ) -> Result<Self, LayoutError> {
        let shape = vec![channels, height, width];
        if channels == 0 || height == 0 || width == 0 || data.len() != channels * height * width {
            return Err(LayoutError::BadShape(shape));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[i32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [i32] {
        &mut self.data
    }

    pub fn channel(&self, c: usize) -> &[i32] {
        &self.data[c * self.plane()..(c + 1) * self.plane()]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> i32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Copy with every channel at or beyond `keep` zeroed.
    pub fn masked(&self, keep: usize) -> Self {
        let mut out = self.clone();
        let cut = keep.min(self.channels) * self.plane();
        out.data[cut..].iter_mut().for_each(|v| *v = 0);
        out
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::i32(
            vec![self.channels, self.height, self.width],
            self.data.clone(),
        )
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self, LayoutError> {
        let data = t.as_i32()?;
        match t.shape[..] {
            [c, h, w] => Self::new(c, h, w, data.to_vec()),
            _ => Err(LayoutError::BadShape(t.shape.clone())),
        }
    }
}
