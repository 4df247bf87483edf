use alloc::format;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Width of one acoustic frame: 18 cepstral slots and 2 pitch slots.
pub const FEAT_DIM: usize = 20;

/// A `[T×dim]` matrix of finite acoustic features with `T ≥ 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct AcousticFrames(Tensor);

impl AcousticFrames {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.shape().len() != 2 {
            return Err(Error::Contract(format!(
                "acoustic frames must be a matrix, got shape {:?}",
                t.shape()
            )));
        }
        if !t.is_finite() {
            return Err(Error::Numeric("acoustic frames contain non-finite values".into()));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }
}
