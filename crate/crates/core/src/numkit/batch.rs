use serde::{Deserialize, Serialize};

use crate::error::{KrnetError, Result};
use crate::real::Real;

/// Dense row-major `n_samples x n_dims` matrix. Rows are samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Batch<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Batch<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(KrnetError::DimMismatch {
                context: "Batch::new",
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Batch { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Batch {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Batch {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(KrnetError::DimMismatch {
                    context: "Batch::from_rows",
                    expected: cols,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Batch {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Single column batch from a slice.
    pub fn column(values: &[T]) -> Self {
        Batch {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub fn from_f64(rows: usize, cols: usize, data: &[f64]) -> Result<Self> {
        Batch::new(rows, cols, data.iter().map(|&v| T::lit(v)).collect())
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
    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn col_values(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(KrnetError::NonFinite {
                context: context.to_string(),
            })
        }
    }

    pub fn expect_cols(&self, cols: usize, context: &'static str) -> Result<()> {
        if self.cols != cols {
            return Err(KrnetError::DimMismatch {
                context,
                expected: cols,
                got: self.cols,
            });
        }
        Ok(())
    }

    /// Copies the listed columns, in order, into a new batch.
    pub fn gather_cols(&self, idx: &[usize]) -> Batch<T> {
        let k = idx.len();
        let mut data = Vec::with_capacity(self.rows * k);
        for r in 0..self.rows {
            let row = self.row(r);
            data.extend(idx.iter().map(|&j| row[j]));
        }
        Batch {
            rows: self.rows,
            cols: k,
            data,
        }
    }

    /// Writes the columns of `src` into the listed columns of `self`.
    pub fn scatter_cols(&mut self, idx: &[usize], src: &Batch<T>) {
        debug_assert_eq!(src.cols, idx.len());
        debug_assert_eq!(src.rows, self.rows);
        let cols = self.cols;
        for r in 0..self.rows {
            let s = src.row(r);
            let row = &mut self.data[r * cols..(r + 1) * cols];
            for (&j, &v) in idx.iter().zip(s) {
                row[j] = v;
            }
        }
    }

    /// Adds the columns of `src` into the listed columns of `self`.
    pub fn scatter_add_cols(&mut self, idx: &[usize], src: &Batch<T>) {
        let cols = self.cols;
        for r in 0..self.rows {
            let s = src.row(r);
            let row = &mut self.data[r * cols..(r + 1) * cols];
            for (&j, &v) in idx.iter().zip(s) {
                row[j] += v;
            }
        }
    }

    pub fn select_rows(&self, idx: &[usize]) -> Batch<T> {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Batch {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Batch<T> {
        Batch {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Column-wise concatenation `[a | b]`.
    pub fn hstack(a: &Batch<T>, b: &Batch<T>) -> Result<Batch<T>> {
        if a.rows != b.rows {
            return Err(KrnetError::DimMismatch {
                context: "Batch::hstack",
                expected: a.rows,
                got: b.rows,
            });
        }
        let mut data = Vec::with_capacity(a.rows * (a.cols + b.cols));
        for r in 0..a.rows {
            data.extend_from_slice(a.row(r));
            data.extend_from_slice(b.row(r));
        }
        Ok(Batch {
            rows: a.rows,
            cols: a.cols + b.cols,
            data,
        })
    }

    /// Row-wise concatenation.
    pub fn vstack(parts: &[Batch<T>]) -> Result<Batch<T>> {
        let cols = parts.first().map_or(0, |p| p.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(KrnetError::DimMismatch {
                    context: "Batch::vstack",
                    expected: cols,
                    got: p.cols,
                });
            }
            rows += p.rows;
            data.extend_from_slice(&p.data);
        }
        Ok(Batch { rows, cols, data })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Batch<T> {
        Batch {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&mut self, s: T) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn col_mean(&self) -> Vec<T> {
        let n = T::from_usize(self.rows.max(1)).unwrap();
        let mut m = vec![T::zero(); self.cols];
        for row in self.row_iter() {
            for (acc, &v) in m.iter_mut().zip(row) {
                *acc += v;
            }
        }
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    /// Population standard deviation per column.
    pub fn col_std(&self) -> Vec<T> {
        let mean = self.col_mean();
        let n = T::from_usize(self.rows.max(1)).unwrap();
        let mut s = vec![T::zero(); self.cols];
        for row in self.row_iter() {
            for ((acc, &v), &mu) in s.iter_mut().zip(row).zip(&mean) {
                *acc += (v - mu) * (v - mu);
            }
        }
        s.iter_mut().for_each(|v| *v = (*v / n).sqrt());
        s
    }

    pub fn max_abs_diff(&self, other: &Batch<T>) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn to_f64(&self) -> Batch<f64> {
        Batch {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v.as_f64()).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Batch<U> {
        Batch {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}
