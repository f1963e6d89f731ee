//! Small dense matrix helpers (row-major).

use crate::error::{EdvcmError, Result};

#[derive(Debug, Clone, PartialEq)]
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
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(EdvcmError::Dimension {
                context: "matrix data",
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
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

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows);
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(orow) {
                    *d += a * b;
                }
            }
        }
        out
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len());
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `L v` for lower-triangular `self`, skipping the zero upper part.
    pub fn lower_matvec(&self, v: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|i| self.row(i)[..=i].iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `Lᵀ v` for lower-triangular `self`.
    pub fn lower_transpose_matvec(&self, v: &[f64]) -> Vec<f64> {
        let n = self.rows;
        let mut out = vec![0.0; n];
        for i in 0..n {
            let vi = v[i];
            for (o, &a) in out[..=i].iter_mut().zip(&self.row(i)[..=i]) {
                *o += a * vi;
            }
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_symmetric(&self) -> bool {
        self.rows == self.cols
            && (0..self.rows).all(|i| (0..i).all(|j| self[(i, j)] == self[(j, i)]))
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Failed pivot of a Cholesky factorization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PivotFailure {
    pub row: usize,
    pub pivot: f64,
}

/// Plain Cholesky factorization; on failure reports the smallest pivot seen.
pub fn cholesky(a: &Matrix) -> std::result::Result<Matrix, PivotFailure> {
    let n = a.rows;
    let mut l = Matrix::zeros(n, n);
    let mut worst = PivotFailure {
        row: 0,
        pivot: f64::INFINITY,
    };
    for j in 0..n {
        let mut diag = a[(j, j)];
        for k in 0..j {
            diag -= l[(j, k)] * l[(j, k)];
        }
        if diag < worst.pivot {
            worst = PivotFailure { row: j, pivot: diag };
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return Err(worst);
        }
        let ljj = diag.sqrt();
        l[(j, j)] = ljj;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            let (ri, rj) = (i * n, j * n);
            for k in 0..j {
                s -= l.data[ri + k] * l.data[rj + k];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(l)
}

/// Solve `L x = b` for lower-triangular `L`.
pub fn solve_lower(l: &Matrix, b: &[f64]) -> Vec<f64> {
    let n = l.rows;
    let mut x = b.to_vec();
    for i in 0..n {
        let row = l.row(i);
        let s: f64 = row[..i].iter().zip(&x[..i]).map(|(a, b)| a * b).sum();
        x[i] = (x[i] - s) / row[i];
    }
    x
}

/// Solve `Lᵀ x = b` for lower-triangular `L`.
pub fn solve_lower_transpose(l: &Matrix, b: &[f64]) -> Vec<f64> {
    let n = l.rows;
    let mut x = b.to_vec();
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in i + 1..n {
            s -= l[(k, i)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    x
}

/// Solve `A x = b` for symmetric positive-definite `A`.
pub fn spd_solve(a: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    let l = cholesky(a).map_err(|_| EdvcmError::Singular)?;
    Ok(solve_lower_transpose(&l, &solve_lower(&l, b)))
}

/// Inverse of a symmetric positive-definite matrix.
pub fn spd_inverse(a: &Matrix) -> Result<Matrix> {
    let n = a.rows;
    let l = cholesky(a).map_err(|_| EdvcmError::Singular)?;
    let mut inv = Matrix::zeros(n, n);
    let mut e = vec![0.0; n];
    for j in 0..n {
        e.iter_mut().for_each(|x| *x = 0.0);
        e[j] = 1.0;
        let col = solve_lower_transpose(&l, &solve_lower(&l, &e));
        for i in 0..n {
            inv[(i, j)] = col[i];
        }
    }
    Ok(inv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_reconstructs() {
        let a = Matrix::from_rows(3, 3, vec![4.0, 2.0, 0.6, 2.0, 5.0, 1.0, 0.6, 1.0, 3.0]).unwrap();
        let l = cholesky(&a).unwrap();
        assert!(l.matmul(&l.transpose()).max_abs_diff(&a) < 1e-12);
        let b = [1.0, -2.0, 0.5];
        let x = spd_solve(&a, &b).unwrap();
        let back = a.matvec(&x);
        for (u, v) in back.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
        let inv = spd_inverse(&a).unwrap();
        assert!(inv.matmul(&a).max_abs_diff(&Matrix::identity(3)) < 1e-12);
    }

    #[test]
    fn triangular_products() {
        let l = Matrix::from_rows(2, 2, vec![2.0, 0.0, 1.0, 3.0]).unwrap();
        assert_eq!(l.lower_matvec(&[1.0, 1.0]), vec![2.0, 4.0]);
        assert_eq!(l.lower_transpose_matvec(&[1.0, 1.0]), vec![3.0, 3.0]);
        assert_eq!(solve_lower(&l, &[2.0, 4.0]), vec![1.0, 1.0]);
        assert_eq!(solve_lower_transpose(&l, &[3.0, 3.0]), vec![1.0, 1.0]);
    }

    #[test]
    fn indefinite_reports_pivot() {
        let a = Matrix::from_rows(2, 2, vec![1.0, 0.0, 0.0, -1.0]).unwrap();
        let f = cholesky(&a).unwrap_err();
        assert_eq!(f.row, 1);
        assert_eq!(f.pivot, -1.0);
    }
}
