use serde::{Deserialize, Serialize};

use super::{check_dim, NumError, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_dim("Matrix::from_vec", rows * cols, data.len())?;
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(NumError::Shape(format!(
                    "ragged rows: {} vs {}",
                    row.len(),
                    c
                )));
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: r,
            cols: c,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    /// `y += self * x`. Zero entries of `x` are skipped, which makes one-hot
    /// inputs cheap without changing the result.
    pub fn matvec_acc(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(y.len(), self.rows);
        let nz = nonzero_indices(x);
        if nz.len() * 2 < self.cols {
            for (r, yr) in y.iter_mut().enumerate() {
                let row = self.row(r);
                let mut s = 0.0;
                for &j in &nz {
                    s += row[j] * x[j];
                }
                *yr += s;
            }
        } else {
            for (r, yr) in y.iter_mut().enumerate() {
                *yr += dot(self.row(r), x);
            }
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim("Matrix::matvec", self.cols, x.len())?;
        let mut y = vec![0.0; self.rows];
        self.matvec_acc(x, &mut y);
        Ok(y)
    }

    /// `out += self^T * v`.
    pub fn tr_matvec_acc(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (r, &vr) in v.iter().enumerate() {
            if vr == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(self.row(r)) {
                *o += w * vr;
            }
        }
    }

    /// `self += u v^T`, skipping zero entries of either vector.
    pub fn add_outer(&mut self, u: &[f64], v: &[f64]) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        let nz = nonzero_indices(v);
        let sparse = nz.len() * 2 < self.cols;
        for (r, &ur) in u.iter().enumerate() {
            if ur == 0.0 {
                continue;
            }
            let row = self.row_mut(r);
            if sparse {
                for &j in &nz {
                    row[j] += ur * v[j];
                }
            } else {
                for (w, vj) in row.iter_mut().zip(v) {
                    *w += ur * vj;
                }
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn nonzero_indices(x: &[f64]) -> Vec<usize> {
    x.iter()
        .enumerate()
        .filter_map(|(i, v)| (*v != 0.0).then_some(i))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sparse_and_dense_paths_agree() {
        let m = Matrix::from_vec(2, 4, vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.5, 0.25, 2.0]).unwrap();
        let sparse = [0.0, 0.0, 2.0, 0.0];
        let dense = [1.0, 1.0, 2.0, 1.0];
        assert_eq!(m.matvec(&sparse).unwrap(), vec![6.0, 0.5]);
        assert_eq!(m.matvec(&dense).unwrap(), vec![13.0, 2.0]);
    }

    #[test]
    fn transpose_product() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let mut out = vec![0.0; 2];
        m.tr_matvec_acc(&[1.0, -1.0], &mut out);
        assert_eq!(out, vec![-2.0, -2.0]);
    }

    #[test]
    fn outer_accumulates() {
        let mut m = Matrix::zeros(2, 3);
        m.add_outer(&[1.0, 2.0], &[0.0, 3.0, 0.0]);
        assert_eq!(m.as_slice(), &[0.0, 3.0, 0.0, 0.0, 6.0, 0.0]);
    }

    #[test]
    fn matvec_checks_dims() {
        let m = Matrix::zeros(2, 3);
        assert!(m.matvec(&[1.0]).is_err());
    }
}
