//! Dense row-major 2D tensor of `f64`.
//!
//! Deliberately small: just the operations the forward/backward passes and the
//! dataset plumbing need. Invariant: `data.len() == rows * cols` always holds,
//! enforced at construction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor2 {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dimension(
                "Tensor2::from_vec",
                format!("{} values for {rows}x{cols}", rows * cols),
                data.len().to_string(),
            ));
        }
        Ok(Tensor2 { rows, cols, data })
    }

    /// Builds a tensor from equally sized rows. Errors on ragged input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(n_rows * n_cols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n_cols {
                return Err(Error::dimension(
                    "Tensor2::from_rows",
                    format!("{n_cols} columns in row {i}"),
                    row.len().to_string(),
                ));
            }
            data.extend_from_slice(row);
        }
        Ok(Tensor2 {
            rows: n_rows,
            cols: n_cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
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

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Tensor2 {
        let mut out = Tensor2::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.get(r, c));
            }
        }
        out
    }

    pub fn matmul(&self, other: &Tensor2) -> Result<Tensor2> {
        if self.cols != other.rows {
            return Err(Error::dimension(
                "Tensor2::matmul",
                format!("lhs cols == rhs rows ({})", self.cols),
                other.rows.to_string(),
            ));
        }
        let mut out = Tensor2::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let lhs_row = self.row(r);
            let out_row = out.row_mut(r);
            for (k, &lhs) in lhs_row.iter().enumerate() {
                if lhs == 0.0 {
                    continue;
                }
                let rhs_row = other.row(k);
                for (c, &rhs) in rhs_row.iter().enumerate() {
                    out_row[c] += lhs * rhs;
                }
            }
        }
        Ok(out)
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Tensor2 {
        Tensor2 {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Elementwise combine with another tensor of identical shape.
    pub fn zip_map(&self, other: &Tensor2, f: impl Fn(f64, f64) -> f64) -> Result<Tensor2> {
        self.check_same_shape("Tensor2::zip_map", other)?;
        Ok(Tensor2 {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_scaled(&mut self, other: &Tensor2, scale: f64) -> Result<()> {
        self.check_same_shape("Tensor2::add_scaled", other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    /// Copies rows `range` into a new tensor.
    pub fn slice_rows(&self, range: std::ops::Range<usize>) -> Result<Tensor2> {
        if range.end > self.rows || range.start > range.end {
            return Err(Error::dimension(
                "Tensor2::slice_rows",
                format!("range within 0..{}", self.rows),
                format!("{}..{}", range.start, range.end),
            ));
        }
        Ok(Tensor2 {
            rows: range.end - range.start,
            cols: self.cols,
            data: self.data[range.start * self.cols..range.end * self.cols].to_vec(),
        })
    }

    /// Stacks tensors vertically. All parts must share the column count.
    pub fn vstack(parts: &[&Tensor2]) -> Result<Tensor2> {
        let cols = parts.first().map_or(0, |t| t.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for part in parts {
            if part.cols != cols {
                return Err(Error::dimension(
                    "Tensor2::vstack",
                    format!("{cols} columns"),
                    part.cols.to_string(),
                ));
            }
            data.extend_from_slice(&part.data);
            rows += part.rows;
        }
        Ok(Tensor2 { rows, cols, data })
    }

    pub fn sum_squared_diff(&self, other: &Tensor2) -> Result<f64> {
        self.check_same_shape("Tensor2::sum_squared_diff", other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum())
    }

    pub fn sum_abs_diff(&self, other: &Tensor2) -> Result<f64> {
        self.check_same_shape("Tensor2::sum_abs_diff", other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .sum())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn check_same_shape(&self, context: &'static str, other: &Tensor2) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::dimension(
                context,
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn matmul_matches_hand_computed_product() {
        // [[1, 2], [3, 4], [5, 6]] * [[7, 8, 9], [10, 11, 12]]
        let a = Tensor2::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor2::from_vec(2, 3, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        let expected = [27.0, 30.0, 33.0, 61.0, 68.0, 75.0, 95.0, 106.0, 117.0];
        assert_eq!(c.rows(), 3);
        assert_eq!(c.cols(), 3);
        for (got, want) in c.data().iter().zip(expected) {
            assert_abs_diff_eq!(got, &want, epsilon = 1e-12);
        }
    }

    #[test]
    fn matmul_shape_mismatch_is_an_error() {
        let a = Tensor2::zeros(2, 3);
        let b = Tensor2::zeros(2, 3);
        assert!(a.matmul(&b).is_err());
    }

    #[test]
    fn transpose_round_trips() {
        let a = Tensor2::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let t = a.transpose();
        assert_eq!(t.rows(), 3);
        assert_eq!(t.get(0, 1), 4.0);
        assert_eq!(t.transpose(), a);
    }

    #[test]
    fn slice_rows_and_vstack_are_inverses() {
        let a = Tensor2::from_vec(4, 2, (0..8).map(f64::from).collect()).unwrap();
        let top = a.slice_rows(0..2).unwrap();
        let bottom = a.slice_rows(2..4).unwrap();
        let back = Tensor2::vstack(&[&top, &bottom]).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn from_rows_rejects_ragged_input() {
        let rows = vec![vec![1.0, 2.0], vec![3.0]];
        assert!(Tensor2::from_rows(&rows).is_err());
    }

    #[test]
    fn serde_round_trip_preserves_shape_and_data() {
        let a = Tensor2::from_vec(2, 2, vec![0.5, -1.5, 2.25, 0.0]).unwrap();
        let json = serde_json::to_string(&a).unwrap();
        let back: Tensor2 = serde_json::from_str(&json).unwrap();
        assert_eq!(back, a);
    }
}
