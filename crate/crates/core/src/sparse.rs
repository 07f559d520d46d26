//! Compressed sparse row matrices used as constant operators (propagation
//! matrices, sparse node features).

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    offsets: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from (row, col, value) triplets. Duplicates are summed.
    pub fn from_triplets(rows: usize, cols: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut sorted: Vec<(usize, usize, f64)> = triplets.to_vec();
        for &(r, c, _) in &sorted {
            if r >= rows || c >= cols {
                return Err(Error::shape("csr triplet", (r, c), (rows, cols)));
            }
        }
        sorted.sort_by_key(|t| (t.0, t.1));
        let mut offsets = vec![0usize; rows + 1];
        let mut indices = Vec::with_capacity(sorted.len());
        let mut values: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in sorted {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            indices.push(c);
            values.push(v);
            offsets[r + 1] += 1;
            last = Some((r, c));
        }
        for i in 0..rows {
            offsets[i + 1] += offsets[i];
        }
        Ok(CsrMatrix {
            rows,
            cols,
            offsets,
            indices,
            values,
        })
    }

    /// Keeps the nonzero entries of a dense matrix.
    pub fn from_dense(t: &Tensor) -> Self {
        let mut offsets = Vec::with_capacity(t.rows() + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        offsets.push(0);
        for i in 0..t.rows() {
            for (j, &v) in t.row(i).iter().enumerate() {
                if v != 0.0 {
                    indices.push(j);
                    values.push(v);
                }
            }
            offsets.push(indices.len());
        }
        CsrMatrix {
            rows: t.rows(),
            cols: t.cols(),
            offsets,
            indices,
            values,
        }
    }

    pub fn to_dense(&self) -> Tensor {
        let mut out = Tensor::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            for (j, v) in self.row(i) {
                out.set(i, j, out.get(i, j) + v);
            }
        }
        out
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

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.offsets[i]..self.offsets[i + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn select_rows(&self, ids: &[usize]) -> CsrMatrix {
        let mut offsets = Vec::with_capacity(ids.len() + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        offsets.push(0);
        for &i in ids {
            let span = self.offsets[i]..self.offsets[i + 1];
            indices.extend_from_slice(&self.indices[span.clone()]);
            values.extend_from_slice(&self.values[span]);
            offsets.push(indices.len());
        }
        CsrMatrix {
            rows: ids.len(),
            cols: self.cols,
            offsets,
            indices,
            values,
        }
    }

    /// `self * dense`.
    pub fn matmul(&self, dense: &Tensor) -> Result<Tensor> {
        if self.cols != dense.rows() {
            return Err(Error::shape("spmm", self.shape(), dense.shape()));
        }
        let mut out = Tensor::zeros(self.rows, dense.cols());
        self.matmul_acc(dense, &mut out);
        Ok(out)
    }

    pub(crate) fn matmul_acc(&self, dense: &Tensor, out: &mut Tensor) {
        for i in 0..self.rows {
            let span = self.offsets[i]..self.offsets[i + 1];
            let out_row = out.row_mut(i);
            for (&j, &v) in self.indices[span.clone()].iter().zip(&self.values[span]) {
                for (o, &d) in out_row.iter_mut().zip(dense.row(j)) {
                    *o += v * d;
                }
            }
        }
    }

    /// `out += selfᵀ * dense`.
    pub(crate) fn transpose_matmul_acc(&self, dense: &Tensor, out: &mut Tensor) {
        debug_assert_eq!(dense.rows(), self.rows);
        debug_assert_eq!(out.shape(), (self.cols, dense.cols()));
        for i in 0..self.rows {
            let span = self.offsets[i]..self.offsets[i + 1];
            let g = dense.row(i);
            for (&j, &v) in self.indices[span.clone()].iter().zip(&self.values[span]) {
                for (o, &d) in out.row_mut(j).iter_mut().zip(g) {
                    *o += v * d;
                }
            }
        }
    }

    pub fn is_symmetric(&self) -> bool {
        if self.rows != self.cols {
            return false;
        }
        let d = self.to_dense();
        d == d.transpose()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triplets_sum_duplicates() {
        let m = CsrMatrix::from_triplets(2, 2, &[(0, 1, 1.0), (0, 1, 2.0), (1, 0, 4.0)]).unwrap();
        assert_eq!(m.nnz(), 2);
        assert_eq!(m.to_dense(), Tensor::from_rows(&[&[0.0, 3.0], &[4.0, 0.0]]));
    }

    #[test]
    fn spmm_and_transpose_agree_with_dense() {
        let dense = Tensor::from_fn(4, 3, |i, j| if (i + j) % 2 == 0 { (i + 1) as f64 } else { 0.0 });
        let s = CsrMatrix::from_dense(&dense);
        let b = Tensor::from_fn(3, 2, |i, j| i as f64 - 0.5 * j as f64);
        assert_eq!(s.matmul(&b).unwrap(), dense.matmul(&b).unwrap());

        let g = Tensor::from_fn(4, 2, |i, j| (i * 2 + j) as f64);
        let mut out = Tensor::zeros(3, 2);
        s.transpose_matmul_acc(&g, &mut out);
        assert_eq!(out, dense.transpose().matmul(&g).unwrap());
    }

    #[test]
    fn select_rows_keeps_order() {
        let dense = Tensor::from_fn(3, 3, |i, j| (i * 3 + j) as f64);
        let s = CsrMatrix::from_dense(&dense).select_rows(&[2, 0]);
        assert_eq!(s.to_dense(), dense.gather_rows(&[2, 0]));
    }
}
