//! Dense row-major tensors and a define-by-run gradient tape.
//!
//! [`Tensor`] is a plain value: a shape and a flat buffer. Anything that
//! participates in differentiation is wrapped in a [`Var`], which records
//! the producing operation on a [`Tape`]. Backward rules are written per
//! operation against flat buffers, so every rule can be audited against a
//! central-difference check (see [`grad_check`]).

mod conv;
mod elementwise;
mod gradcheck;
pub(crate) mod linalg;
mod structural;
mod tape;

pub use conv::{conv_out_extent, Conv1dPadding, Conv2dGeom};
pub use elementwise::{sigmoid, silu, softplus, sum_all, Activation};
pub use gradcheck::{grad_check, GradCheckReport};
pub use gradcheck::grad_check_at;
pub use structural::{concat, PadMode};
pub use tape::{Gradients, Tape, Var};

use rand::Rng;

use crate::error::{shape_err, Error, Result};

/// Floating point type used for all arithmetic.
///
/// Double precision by default; the `single` feature selects `f32` for
/// training builds.
#[cfg(not(feature = "single"))]
pub type Real = f64;
#[cfg(feature = "single")]
pub type Real = f32;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Real>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<Real>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(shape_err("tensor", shape, &[data.len()]));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Internal constructor for buffers whose length is known to match.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<Real>) -> Self {
        debug_assert_eq!(numel(&shape), data.len(), "shape {shape:?}");
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: Real) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn scalar(value: Real) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> Real) -> Self {
        let n = numel(shape);
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn rand_uniform<R: Rng + ?Sized>(shape: &[usize], lo: Real, hi: Real, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| rng.gen_range(lo..hi))
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

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Real] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Real> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Real {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(shape_err("reshape", &self.shape, shape));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    pub fn map(&self, f: impl Fn(Real) -> Real) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(Real, Real) -> Real) -> Result<Self> {
        if self.shape != other.shape {
            return Err(shape_err("zip_map", &self.shape, &other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// In-place `self += other`; shapes must match.
    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn scale(&self, s: Real) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> Real {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Self) -> Real {
        assert_eq!(self.shape, other.shape, "dot shape mismatch");
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> Real {
        self.dot(self).sqrt()
    }

    pub fn max_abs(&self) -> Real {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Real {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Debug check: errors with the first offending flat index.
    pub fn check_finite(&self, what: &'static str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::NonFinite { what, frame: i }),
        }
    }

    /// Extents of a rank-3 tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c] => Ok((a, b, c)),
            _ => Err(shape_err("dims3", &self.shape, &[0, 0, 0])),
        }
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [a, b] => Ok((a, b)),
            _ => Err(shape_err("dims2", &self.shape, &[0, 0])),
        }
    }
}
