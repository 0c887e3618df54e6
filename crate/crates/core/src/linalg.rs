//! Dense kernels: row-major `f32` storage with `f64` accumulation.
//!
//! Every reduction runs in a fixed sequential order per output element, so
//! results are bitwise identical whether rows are computed in parallel or not.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

/// Dense row-major matrix of `f32`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    /// Builds a matrix from row-major data, rejecting wrong lengths and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::new",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("{rows}x{cols} matrix"),
                index,
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows; all rows must share one length.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape("Matrix::from_rows", "ragged rows"));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_raw(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::from_raw(rows, cols, data)
    }

    /// Matrix of independent standard normal entries scaled by `std`.
    pub fn random_normal<R: Rng + ?Sized>(rows: usize, cols: usize, std: f32, rng: &mut R) -> Self {
        Self::from_fn(rows, cols, |_, _| {
            let z: f32 = rng.sample(StandardNormal);
            z * std
        })
    }

    pub fn diag(values: &[f32]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
        }
        m
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
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f32) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn transpose(&self) -> Matrix {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// Columns `start..start + len` as a new matrix.
    pub fn columns(&self, start: usize, len: usize) -> Matrix {
        assert!(start + len <= self.cols, "column range out of bounds");
        Self::from_fn(self.rows, len, |i, j| self.get(i, start + j))
    }

    /// Concatenates matrices with equal row counts left to right.
    pub fn hcat(parts: &[Matrix]) -> Result<Matrix> {
        let rows = parts.first().map_or(0, Matrix::rows);
        if parts.iter().any(|p| p.rows != rows) {
            return Err(Error::shape("hcat", "row counts differ"));
        }
        let cols: usize = parts.iter().map(Matrix::cols).sum();
        let mut out = Self::zeros(rows, cols);
        for i in 0..rows {
            let mut offset = 0;
            let dst = out.row_mut(i);
            for p in parts {
                dst[offset..offset + p.cols].copy_from_slice(p.row(i));
                offset += p.cols;
            }
        }
        Ok(out)
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v) * f64::from(v)).sum()
    }

    pub fn is_symmetric(&self) -> bool {
        self.rows == self.cols
            && (0..self.rows).all(|i| (0..i).all(|j| self.get(i, j) == self.get(j, i)))
    }
}

/// Lower-triangular factor stored packed by rows.
#[derive(Clone, Debug, PartialEq)]
pub struct LowerTriangular {
    dim: usize,
    data: Vec<f32>,
}

impl LowerTriangular {
    #[inline]
    fn offset(i: usize) -> usize {
        i * (i + 1) / 2
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Entry `(i, j)`; zero above the diagonal.
    pub fn get(&self, i: usize, j: usize) -> f32 {
        if j > i {
            0.0
        } else {
            self.data[Self::offset(i) + j]
        }
    }

    pub fn diagonal(&self) -> Vec<f32> {
        (0..self.dim).map(|i| self.get(i, i)).collect()
    }

    pub fn to_dense(&self) -> Matrix {
        Matrix::from_fn(self.dim, self.dim, |i, j| self.get(i, j))
    }
}

/// `a · b` with per-element sequential `f64` accumulation over the shared
/// dimension.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape(
            "matmul",
            format!("{}x{} times {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let n = b.cols;
    let mut out = vec![0f32; a.rows * n];
    par::for_each_row(&mut out, n, |i, dst| {
        let mut acc = vec![0f64; n];
        for (k, &aik) in a.row(i).iter().enumerate() {
            let aik = f64::from(aik);
            for (s, &bkj) in acc.iter_mut().zip(b.row(k)) {
                *s += aik * f64::from(bkj);
            }
        }
        for (d, s) in dst.iter_mut().zip(&acc) {
            *d = *s as f32;
        }
    });
    Ok(Matrix::from_raw(a.rows, n, out))
}

/// Euclidean norm of each row of `x`.
pub fn row_l2_norms(x: &Matrix) -> Vec<f32> {
    par::map_range(x.rows, |j| {
        x.row(j)
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt() as f32
    })
}

/// `x xᵀ + λI`. Only the upper half is computed; the lower half is a mirror,
/// so the result is exactly symmetric.
pub fn gram(x: &Matrix, lambda: f64) -> Matrix {
    let d = x.rows;
    let upper: Vec<Vec<f64>> = par::map_range(d, |i| {
        (i..d)
            .map(|j| {
                x.row(i)
                    .iter()
                    .zip(x.row(j))
                    .map(|(&a, &b)| f64::from(a) * f64::from(b))
                    .sum::<f64>()
            })
            .collect()
    });
    let mut out = Matrix::zeros(d, d);
    for (i, row) in upper.iter().enumerate() {
        for (off, &v) in row.iter().enumerate() {
            let j = i + off;
            let v = if i == j { v + lambda } else { v };
            out.set(i, j, v as f32);
            out.set(j, i, v as f32);
        }
    }
    out
}

/// Cholesky factor in `f64`, row-major dense lower triangle.
fn cholesky_f64(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut l = vec![0f64; n * n];
    for j in 0..n {
        let mut diag = a[j * n + j];
        for k in 0..j {
            diag -= l[j * n + k] * l[j * n + k];
        }
        if !diag.is_finite() || diag <= 0.0 {
            return Err(Error::NotPositiveDefinite {
                pivot: j,
                value: diag,
            });
        }
        let ljj = diag.sqrt();
        l[j * n + j] = ljj;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / ljj;
        }
    }
    Ok(l)
}

fn to_f64(a: &Matrix) -> Vec<f64> {
    a.data.iter().map(|&v| f64::from(v)).collect()
}

fn check_square(op: &'static str, a: &Matrix) -> Result<()> {
    if a.rows != a.cols {
        return Err(Error::shape(op, format!("{}x{} is not square", a.rows, a.cols)));
    }
    Ok(())
}

/// Lower factor `L` with `L Lᵀ = a`. Reads only the lower triangle of `a`.
pub fn cholesky(a: &Matrix) -> Result<LowerTriangular> {
    check_square("cholesky", a)?;
    let n = a.rows;
    let l = cholesky_f64(&to_f64(a), n)?;
    let mut data = Vec::with_capacity(n * (n + 1) / 2);
    for i in 0..n {
        data.extend(l[i * n..=i * n + i].iter().map(|&v| v as f32));
    }
    Ok(LowerTriangular { dim: n, data })
}

/// Inverse of a symmetric positive definite matrix through its Cholesky
/// factor and two triangular solves.
pub fn spd_inverse(a: &Matrix) -> Result<Matrix> {
    check_square("spd_inverse", a)?;
    let n = a.rows;
    let l = cholesky_f64(&to_f64(a), n)?;
    // L⁻¹ by forward substitution, column by column.
    let mut linv = vec![0f64; n * n];
    for c in 0..n {
        for i in c..n {
            let mut s = if i == c { 1.0 } else { 0.0 };
            for k in c..i {
                s -= l[i * n + k] * linv[k * n + c];
            }
            linv[i * n + c] = s / l[i * n + i];
        }
    }
    // A⁻¹ = L⁻ᵀ L⁻¹; fill the upper half and mirror.
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let s: f64 = (j..n).map(|k| linv[k * n + i] * linv[k * n + j]).sum();
            out.set(i, j, s as f32);
            out.set(j, i, s as f32);
        }
    }
    Ok(out)
}
