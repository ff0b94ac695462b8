//! Dense row-major f64 tensors.
//!
//! Verification runs in double precision throughout; see [`crate::tape::Precision`]
//! for the optional single-precision storage rounding used by fast runs.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// A dense row-major tensor. Invariant: `data.len() == shape.iter().product()`
/// and every extent is strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::Dimension(format!(
                "zero extent in shape {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        debug_assert!(shape.iter().all(|&e| e > 0));
        Tensor { shape, data: vec![0.0; numel] }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![value; numel] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    /// Gaussian init, `mean + sd * N(0,1)` per element.
    pub fn randn<R: Rng>(shape: Vec<usize>, mean: f64, sd: f64, rng: &mut R) -> Self {
        let normal = Normal::new(mean, sd).expect("finite sd");
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| normal.sample(rng)).collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Extents of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Dimension(format!("expected rank 2, got shape {s:?}"))),
        }
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::Dimension(format!(
                "expected scalar, got shape {:?}",
                self.shape
            )))
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// FNV-1a over the raw little-endian bit patterns. Bit-equality oracle for
    /// determinism tests and paired-run comparisons.
    pub fn bits_hash(&self) -> u64 {
        let mut h = fnv1a_init();
        for &e in &self.shape {
            h = fnv1a_u64(h, e as u64);
        }
        for &x in &self.data {
            h = fnv1a_u64(h, x.to_bits());
        }
        h
    }
}

pub(crate) fn fnv1a_init() -> u64 {
    0xcbf2_9ce4_8422_2325
}

pub(crate) fn fnv1a_u64(mut h: u64, v: u64) -> u64 {
    for b in v.to_le_bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Hash a sequence of u64 words (used for batch-stream equality checks).
pub fn hash_words(words: impl IntoIterator<Item = u64>) -> u64 {
    let mut h = fnv1a_init();
    for w in words {
        h = fnv1a_u64(h, w);
    }
    h
}
