//! ELL-style row-sparse weights and the reduced-cost product.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::par;
use crate::selection::SparsityMask;

/// Column-index marker for unused slots of rows holding fewer than `k`
/// entries (parity masks).
pub const PAD_INDEX: u32 = u32::MAX;

/// Weights with `k` slots per row. Slot `s` of row `i` lives at
/// `i * k + s`; entries are stored with ascending column index.
#[derive(Clone, Debug, PartialEq)]
pub struct RowSparseMatrix {
    rows: usize,
    cols: usize,
    k: usize,
    col_idx: Vec<u32>,
    values: Vec<f32>,
    /// Per-row entry counts; `None` when every row is full.
    counts: Option<Vec<u32>>,
}

impl RowSparseMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn is_ragged(&self) -> bool {
        self.counts.is_some()
    }

    pub fn row_len(&self, i: usize) -> usize {
        self.counts.as_ref().map_or(self.k, |c| c[i] as usize)
    }

    /// Column indices and values of row `i`.
    pub fn row(&self, i: usize) -> (&[u32], &[f32]) {
        let start = i * self.k;
        let n = self.row_len(i);
        (&self.col_idx[start..start + n], &self.values[start..start + n])
    }

    pub fn nnz(&self) -> usize {
        (0..self.rows).map(|i| self.row_len(i)).sum()
    }

    /// Scatter to dense with zeros. Testing and inspection only.
    pub fn to_dense(&self) -> Matrix {
        let mut out = Matrix::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            let (idx, vals) = self.row(i);
            for (&j, &v) in idx.iter().zip(vals) {
                out.set(i, j as usize, v);
            }
        }
        out
    }

    /// Writes the dump format: `rows, cols, k` as u32 LE, then every slot's
    /// column index as u32 LE, then every slot's value as f32 LE. Unused
    /// slots carry [`PAD_INDEX`] and `0.0`.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        for h in [self.rows, self.cols, self.k] {
            w.write_all(&(h as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.col_idx.len() * 8);
        for &c in &self.col_idx {
            buf.extend_from_slice(&c.to_le_bytes());
        }
        for &v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut head = [0u8; 12];
        read_exact(&mut r, &mut head, "header")?;
        let field = |i: usize| u32::from_le_bytes(head[i * 4..i * 4 + 4].try_into().unwrap()) as usize;
        let (rows, cols, k) = (field(0), field(1), field(2));
        if k > cols {
            return Err(Error::shape("RowSparseMatrix::read_from", format!("k {k} > cols {cols}")));
        }
        let slots = rows * k;
        let mut raw = vec![0u8; slots * 4];
        read_exact(&mut r, &mut raw, "col_idx")?;
        let col_idx: Vec<u32> = raw
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        read_exact(&mut r, &mut raw, "values")?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();

        let mut counts = Vec::with_capacity(rows);
        for i in 0..rows {
            let row = &col_idx[i * k..(i + 1) * k];
            let n = row.iter().take_while(|&&c| c != PAD_INDEX).count();
            if row[n..].iter().any(|&c| c != PAD_INDEX) {
                return Err(Error::shape("RowSparseMatrix::read_from", format!("padding gap in row {i}")));
            }
            if row[..n].windows(2).any(|w| w[0] >= w[1]) || row[..n].iter().any(|&c| c as usize >= cols) {
                return Err(Error::shape(
                    "RowSparseMatrix::read_from",
                    format!("row {i} indices not strictly ascending within {cols} columns"),
                ));
            }
            counts.push(n as u32);
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "sparse values".into(),
                index,
            });
        }
        let counts = if counts.iter().all(|&c| c as usize == k) {
            None
        } else {
            Some(counts)
        };
        Ok(Self {
            rows,
            cols,
            k,
            col_idx,
            values,
            counts,
        })
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Truncated { tensor: what.into() },
        _ => Error::Io(e),
    })
}

/// Copies the active entries of `w` into row-sparse form. The mask alone
/// decides what is kept; zero-valued active weights stay.
pub fn compress(w: &Matrix, mask: &SparsityMask) -> Result<RowSparseMatrix> {
    if (w.rows(), w.cols()) != (mask.rows(), mask.cols()) {
        return Err(Error::shape(
            "compress",
            format!("{}x{} weights with {}x{} mask", w.rows(), w.cols(), mask.rows(), mask.cols()),
        ));
    }
    let counts: Vec<u32> = (0..w.rows()).map(|i| mask.row_count(i) as u32).collect();
    let k = counts.iter().copied().max().unwrap_or(0) as usize;
    let k = k.max(mask.k_active_per_row().min(w.cols()));
    let mut col_idx = vec![PAD_INDEX; w.rows() * k];
    let mut values = vec![0f32; w.rows() * k];
    for i in 0..w.rows() {
        let row = w.row(i);
        for (s, j) in mask.row_active(i).enumerate() {
            col_idx[i * k + s] = j as u32;
            values[i * k + s] = row[j];
        }
    }
    let counts = if counts.iter().all(|&c| c as usize == k) {
        None
    } else {
        Some(counts)
    };
    Ok(RowSparseMatrix {
        rows: w.rows(),
        cols: w.cols(),
        k,
        col_idx,
        values,
        counts,
    })
}

/// `dense(ws) · x` touching only the stored entries: `row_len(i)`
/// multiply-adds per output element, accumulated in `f64` in ascending
/// column order (the same order as [`crate::linalg::matmul`]).
pub fn sparse_matmul(ws: &RowSparseMatrix, x: &Matrix) -> Result<Matrix> {
    if ws.cols != x.rows() {
        return Err(Error::shape(
            "sparse_matmul",
            format!("{}x{} sparse times {}x{}", ws.rows, ws.cols, x.rows(), x.cols()),
        ));
    }
    let t = x.cols();
    let mut out = vec![0f32; ws.rows * t];
    par::for_each_row(&mut out, t, |i, dst| {
        let mut acc = vec![0f64; t];
        let (idx, vals) = ws.row(i);
        for (&j, &v) in idx.iter().zip(vals) {
            let v = f64::from(v);
            for (s, &xv) in acc.iter_mut().zip(x.row(j as usize)) {
                *s += v * f64::from(xv);
            }
        }
        for (d, s) in dst.iter_mut().zip(&acc) {
            *d = *s as f32;
        }
    });
    Ok(Matrix::from_raw(ws.rows, t, out))
}

/// `‖(w − dense(ws)) x‖²_F` accumulated in `f64`.
pub fn approx_loss(w: &Matrix, ws: &RowSparseMatrix, x: &Matrix) -> Result<f64> {
    if (w.rows(), w.cols()) != (ws.rows, ws.cols) || w.cols() != x.rows() {
        return Err(Error::shape(
            "approx_loss",
            format!(
                "{}x{} weights, {}x{} sparse, {}x{} activations",
                w.rows(),
                w.cols(),
                ws.rows,
                ws.cols,
                x.rows(),
                x.cols()
            ),
        ));
    }
    let t = x.cols();
    let per_row = par::map_range(w.rows(), |i| {
        let mut diff: Vec<f64> = w.row(i).iter().map(|&v| f64::from(v)).collect();
        let (idx, vals) = ws.row(i);
        for (&j, &v) in idx.iter().zip(vals) {
            diff[j as usize] -= f64::from(v);
        }
        let mut acc = vec![0f64; t];
        for (j, &dv) in diff.iter().enumerate() {
            if dv != 0.0 {
                for (s, &xv) in acc.iter_mut().zip(x.row(j)) {
                    *s += dv * f64::from(xv);
                }
            }
        }
        acc.iter().map(|v| v * v).sum::<f64>()
    });
    Ok(per_row.iter().sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::matmul;
    use crate::scoring::ScoreMatrix;
    use crate::selection::{select_sort, SelectionParams, Strategy, TieMode};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mask(rows: usize, cols: usize, k: usize, rng: &mut ChaCha8Rng) -> SparsityMask {
        let s = Matrix::from_fn(rows, cols, |_, _| rng.gen::<f32>());
        let p = SelectionParams::new(k as f64 / cols as f64, cols, Strategy::Sort, TieMode::Canonical).unwrap();
        select_sort(&ScoreMatrix::new(s).unwrap(), &p)
    }

    #[test]
    fn full_mask_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = Matrix::random_normal(5, 9, 1.0, &mut rng);
        let ws = compress(&w, &SparsityMask::full(5, 9)).unwrap();
        assert_eq!(ws.to_dense(), w);
        assert_eq!(ws.nnz(), 45);
    }

    #[test]
    fn zero_weights_are_kept_when_active() {
        let w = Matrix::from_rows(&[[0.0, 2.0, 0.0]]).unwrap();
        let mut m = SparsityMask::empty(1, 3, 2);
        m.set(0, 0);
        m.set(0, 2);
        let ws = compress(&w, &m).unwrap();
        assert_eq!(ws.row(0), (&[0u32, 2][..], &[0.0f32, 0.0][..]));
    }

    #[test]
    fn compress_scatter_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = Matrix::random_normal(12, 20, 1.0, &mut rng);
        let mask = random_mask(12, 20, 7, &mut rng);
        let dense = compress(&w, &mask).unwrap().to_dense();
        for i in 0..12 {
            for j in 0..20 {
                let e = if mask.is_active(i, j) { w.get(i, j) } else { 0.0 };
                assert_eq!(dense.get(i, j), e);
            }
        }
        assert!(compress(&w, &SparsityMask::full(3, 3)).is_err());
    }

    #[test]
    fn full_density_product_is_bitwise_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Matrix::random_normal(16, 24, 1.0, &mut rng);
        let x = Matrix::random_normal(24, 10, 1.0, &mut rng);
        let ws = compress(&w, &SparsityMask::full(16, 24)).unwrap();
        assert_eq!(sparse_matmul(&ws, &x).unwrap(), matmul(&w, &x).unwrap());
    }

    #[test]
    fn single_weight_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = Matrix::random_normal(4, 6, 1.0, &mut rng);
        let x = Matrix::random_normal(6, 5, 1.0, &mut rng);
        let mask = random_mask(4, 6, 1, &mut rng);
        let ws = compress(&w, &mask).unwrap();
        let y = sparse_matmul(&ws, &x).unwrap();
        for i in 0..4 {
            let (idx, vals) = ws.row(i);
            assert_eq!(idx.len(), 1);
            for t in 0..5 {
                let e = (f64::from(vals[0]) * f64::from(x.get(idx[0] as usize, t))) as f32;
                assert_eq!(y.get(i, t), e);
            }
        }
    }

    #[test]
    fn sparse_product_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = Matrix::random_normal(32, 64, 1.0, &mut rng);
        let x = Matrix::random_normal(64, 8, 1.0, &mut rng);
        let mask = random_mask(32, 64, 16, &mut rng);
        let ws = compress(&w, &mask).unwrap();
        let y = sparse_matmul(&ws, &x).unwrap();
        let yd = matmul(&ws.to_dense(), &x).unwrap();
        for (a, b) in y.data().iter().zip(yd.data()) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-3));
        }
    }

    #[test]
    fn loss_trivial_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = Matrix::random_normal(4, 8, 1.0, &mut rng);
        let x = Matrix::random_normal(8, 5, 1.0, &mut rng);
        let full = compress(&w, &SparsityMask::full(4, 8)).unwrap();
        assert_eq!(approx_loss(&w, &full, &x).unwrap(), 0.0);
        let half = compress(&w, &random_mask(4, 8, 4, &mut rng)).unwrap();
        assert_eq!(approx_loss(&w, &half, &Matrix::zeros(8, 5)).unwrap(), 0.0);
        assert!(approx_loss(&w, &half, &x).unwrap() > 0.0);
    }

    #[test]
    fn dump_round_trip_with_padding() {
        let w = Matrix::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap();
        let mut m = SparsityMask::empty(2, 3, 2);
        m.set(0, 0);
        m.set(0, 2);
        m.set(1, 1);
        let ws = compress(&w, &m).unwrap();
        assert!(ws.is_ragged());
        let bytes = ws.to_bytes();
        assert_eq!(bytes.len(), 12 + 2 * 2 * 8);
        assert_eq!(&bytes[..12], &[2, 0, 0, 0, 3, 0, 0, 0, 2, 0, 0, 0]);
        let back = RowSparseMatrix::read_from(&bytes[..]).unwrap();
        assert_eq!(back, ws);
        assert!(matches!(
            RowSparseMatrix::read_from(&bytes[..bytes.len() - 1]),
            Err(Error::Truncated { .. })
        ));
    }
}
