//! Minimal dense row-major matrix and patch-grid helpers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major matrix. Rows are patches (or queries), columns are channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "buffer of {} values cannot form a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn column(&self, c: usize) -> Vec<T> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self · other`
    pub fn matmul(&self, other: &Matrix<T>) -> Result<Matrix<T>> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a = self.row(i);
            let o = out.row_mut(i);
            for (k, &aik) in a.iter().enumerate() {
                if aik == T::zero() {
                    continue;
                }
                for (oj, &bkj) in o.iter_mut().zip(other.row(k)) {
                    *oj = *oj + aik * bkj;
                }
            }
        }
        Ok(out)
    }

    /// Stacks `self` on top of `other` (row concatenation).
    pub fn vstack(&self, other: &Matrix<T>) -> Result<Matrix<T>> {
        if self.rows > 0 && other.rows > 0 && self.cols != other.cols {
            return Err(Error::Shape(format!(
                "cannot stack {} columns on {} columns",
                self.cols, other.cols
            )));
        }
        let cols = if self.rows > 0 { self.cols } else { other.cols };
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Matrix {
            rows: self.rows + other.rows,
            cols,
            data,
        })
    }

    pub fn max_abs_diff(&self, other: &Matrix<T>) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }
}

/// Patch grid geometry (H rows × W columns), row-major patch indexing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
}

impl Grid {
    pub const fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub const fn len(&self) -> usize {
        self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> (usize, usize) {
        (idx / self.width, idx % self.width)
    }

    /// For every patch of `self`, the index of the nearest-neighbour source
    /// patch in `from`.
    pub fn nearest_from(&self, from: Grid) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.len());
        for r in 0..self.height {
            let sr = (r * from.height) / self.height.max(1);
            for c in 0..self.width {
                let sc = (c * from.width) / self.width.max(1);
                out.push(from.index(sr.min(from.height - 1), sc.min(from.width - 1)));
            }
        }
        out
    }
}

/// Nearest-neighbour resampling of a per-patch vector between grids.
pub fn resample_nearest<V: Copy>(values: &[V], from: Grid, to: Grid) -> Result<Vec<V>> {
    if values.len() != from.len() {
        return Err(Error::Shape(format!(
            "{} values do not match a {}x{} grid",
            values.len(),
            from.height,
            from.width
        )));
    }
    if from == to {
        return Ok(values.to_vec());
    }
    Ok(to.nearest_from(from).into_iter().map(|i| values[i]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Matrix::from_rows(&[vec![1.0f64, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![5.0f64], vec![6.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.as_slice(), &[17.0, 39.0]);
    }

    #[test]
    fn vstack_with_empty() {
        let a: Matrix<f64> = Matrix::zeros(0, 0);
        let b = Matrix::from_rows(&[vec![1.0f64, 2.0]]).unwrap();
        let c = a.vstack(&b).unwrap();
        assert_eq!((c.rows(), c.cols()), (1, 2));
    }

    #[test]
    fn nearest_upsample_and_back() {
        let small = Grid::new(2, 2);
        let big = Grid::new(4, 4);
        let v = vec![1u8, 2, 3, 4];
        let up = resample_nearest(&v, small, big).unwrap();
        assert_eq!(up, vec![1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4]);
        let down = resample_nearest(&up, big, small).unwrap();
        assert_eq!(down, v);
    }

    #[test]
    fn resample_rejects_wrong_length() {
        assert!(resample_nearest(&[1u8, 2, 3], Grid::new(2, 2), Grid::new(1, 1)).is_err());
    }
}
