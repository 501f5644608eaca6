//! Dense row-major array of `f32` values, the carrier type for waveform
//! frames, spectrograms, network activations and parameters.

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;

/// Dense real-valued N-dimensional array, row-major.
///
/// Invariants: `shape.iter().product() == data.len()` and every element is
/// finite. Construction and every public mutation uphold both.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Grid {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!("zero-sized dimension in {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} requires {expected} elements, got {}",
                data.len()
            )));
        }
        let grid = Grid { shape, data };
        grid.check_finite("Grid::new")?;
        Ok(grid)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Grid {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Grid {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Grid {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let n = shape.iter().product();
        Grid {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Grid of i.i.d. standard-normal draws.
    pub fn standard_normal(shape: &[usize], rng: &mut impl Rng) -> Self {
        let n: usize = shape.iter().product();
        Grid {
            shape: shape.to_vec(),
            data: (0..n).map(|_| rng.sample(StandardNormal)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Scalar value of a single-element grid.
    pub fn item(&self) -> f32 {
        assert_eq!(self.data.len(), 1, "item() on grid of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Grid {
        Grid {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Grid, op: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<Grid> {
        self.require_same_shape(other, op)?;
        Ok(Grid {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Sum of all elements, accumulated in f64.
    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    /// Mean of all elements, accumulated in f64.
    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, &v| m.max(v.abs()))
    }

    pub fn require_same_shape(&self, other: &Grid, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    /// Reinterpret with a new shape of identical element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Grid> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::invalid(format!(
                "cannot reshape {:?} ({} elems) to {shape:?} ({n} elems)",
                self.shape,
                self.data.len()
            )));
        }
        Ok(Grid {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }
}
