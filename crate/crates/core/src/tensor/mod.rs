//! Dense row-major 2-D `f64` tensors with reverse-mode differentiation.
//!
//! Model code is written once against the [`Graph`] trait. Training runs it
//! on a [`Tape`], which records every op and can backpropagate into a
//! [`ParamSet`]; inference runs the same code on [`Eager`], which computes
//! values directly and records nothing.

pub mod checkpoint;
mod graph;
pub mod kernels;
pub mod layers;
pub mod optim;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub use graph::{AttnBlocks, Eager, Graph, Tape, Var};
pub use optim::{adam_step, l2_penalty, AdamConfig, Param, ParamId, ParamSet};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension {
                op: "tensor",
                detail: format!("{} values for a {rows}x{cols} tensor", data.len()),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub(crate) fn from_parts(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::full(rows, cols, 0.0)
    }

    pub fn full(rows: usize, cols: usize, v: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self::full(1, 1, v)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Build from equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Dimension {
                    op: "from_rows",
                    detail: format!("ragged rows: {} vs {cols}", r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self::from_parts(rows.len(), cols, data))
    }

    pub fn randn<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
        Self::from_parts(rows, cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    /// The single value of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        Self::from_parts(self.cols, self.rows, out)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self::from_parts(idx.len(), self.cols, data)
    }

    /// Stack tensors vertically. All inputs must share a column count.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let cols = parts.first().map_or(0, |t| t.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for t in parts {
            if t.cols != cols {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    detail: format!("{} vs {cols} columns", t.cols),
                });
            }
            data.extend_from_slice(&t.data);
            rows += t.rows;
        }
        Ok(Self::from_parts(rows, cols, data))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks_length() {
        assert!(Tensor::new(2, 2, vec![1.0; 3]).is_err());
        assert!(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0]]).is_err());
        let t = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        assert_eq!(t.transpose().data(), &[1.0, 3.0, 2.0, 4.0]);
    }

    #[test]
    fn select_and_concat() {
        let t = Tensor::from_rows(&[[1.0], [2.0], [3.0]]).unwrap();
        assert_eq!(t.select_rows(&[2, 0]).data(), &[3.0, 1.0]);
        let c = Tensor::concat_rows(&[&t, &t]).unwrap();
        assert_eq!(c.shape(), (6, 1));
    }
}
