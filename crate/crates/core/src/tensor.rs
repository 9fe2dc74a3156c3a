//! Dense row-major `f64` tensors of rank at most four.

use rand::Rng;

use crate::error::{shape_err, Error, Result};

pub const MAX_RANK: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.len() > MAX_RANK {
            return shape_err(format!("rank {} exceeds {MAX_RANK}", shape.len()));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(format!(
                "shape {shape:?} holds {n} values but {} were given",
                data.len()
            ));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::filled(shape, 1.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        assert!(shape.len() <= MAX_RANK, "rank {} exceeds {MAX_RANK}", shape.len());
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Self { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::Contract(format!(
                "expected a scalar, found shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::Numeric(format!(
                "{what}: non-finite value {} at flat index {i}",
                self.data[i]
            ))),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Swap a `[B, C, H, W]` tensor to `[B, H, W, C]`.
    pub fn to_channels_last(&self) -> Result<Self> {
        let [b, c, h, w] = dims4(&self.shape)?;
        let mut out = vec![0.0; self.data.len()];
        for bi in 0..b {
            for ci in 0..c {
                for p in 0..h * w {
                    out[(bi * h * w + p) * c + ci] = self.data[(bi * c + ci) * h * w + p];
                }
            }
        }
        Ok(Self { shape: vec![b, h, w, c], data: out })
    }

    /// Swap a `[B, H, W, C]` tensor to `[B, C, H, W]`.
    pub fn to_channels_first(&self) -> Result<Self> {
        let [b, h, w, c] = dims4(&self.shape)?;
        let mut out = vec![0.0; self.data.len()];
        for bi in 0..b {
            for p in 0..h * w {
                for ci in 0..c {
                    out[(bi * c + ci) * h * w + p] = self.data[(bi * h * w + p) * c + ci];
                }
            }
        }
        Ok(Self { shape: vec![b, c, h, w], data: out })
    }
}

pub(crate) fn dims4(shape: &[usize]) -> Result<[usize; 4]> {
    match shape {
        [a, b, c, d] => Ok([*a, *b, *c, *d]),
        _ => shape_err(format!("expected rank-4 tensor, found shape {shape:?}")),
    }
}
