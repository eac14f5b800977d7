use std::sync::Arc;

use crate::{Graph, Scalar, Tensor, Var};

/// Compressed sparse row matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Csr<T> {
    pub rows: usize,
    pub cols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub values: Vec<T>,
}

impl<T: Scalar> Csr<T> {
    /// Builds from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(rows: usize, cols: usize, mut triplets: Vec<(usize, usize, T)>) -> Self {
        triplets.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut indptr = vec![0; rows + 1];
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values: Vec<T> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            assert!(r < rows && c < cols, "triplet ({r},{c}) out of bounds");
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            indices.push(c);
            values.push(v);
            indptr[r + 1] += 1;
            last = Some((r, c));
        }
        for r in 0..rows {
            indptr[r + 1] += indptr[r];
        }
        Self { rows, cols, indptr, indices, values }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()].iter().copied().zip(self.values[span].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.row(r).find(|&(j, _)| j == c).map(|(_, v)| v).unwrap_or_else(T::zero)
    }

    pub fn to_dense(&self) -> Tensor<T> {
        let mut t = Tensor::zeros([self.rows, self.cols]);
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                t.set(&[r, c], v);
            }
        }
        t
    }

    /// `self · x` for `x[B, cols, C]`.
    pub fn matmul_batched(&self, x: &[T], batch: usize, ch: usize) -> Vec<T> {
        let mut out = vec![T::zero(); batch * self.rows * ch];
        for b in 0..batch {
            let xb = &x[b * self.cols * ch..(b + 1) * self.cols * ch];
            let ob = &mut out[b * self.rows * ch..(b + 1) * self.rows * ch];
            for r in 0..self.rows {
                let dst = &mut ob[r * ch..(r + 1) * ch];
                for (c, v) in self.row(r) {
                    for (d, &s) in dst.iter_mut().zip(&xb[c * ch..(c + 1) * ch]) {
                        *d += v * s;
                    }
                }
            }
        }
        out
    }

    /// `selfᵀ · g` for `g[B, rows, C]`.
    pub fn t_matmul_batched(&self, g: &[T], batch: usize, ch: usize) -> Vec<T> {
        let mut out = vec![T::zero(); batch * self.cols * ch];
        for b in 0..batch {
            let gb = &g[b * self.rows * ch..(b + 1) * self.rows * ch];
            let ob = &mut out[b * self.cols * ch..(b + 1) * self.cols * ch];
            for r in 0..self.rows {
                let src = &gb[r * ch..(r + 1) * ch];
                for (c, v) in self.row(r) {
                    for (d, &s) in ob[c * ch..(c + 1) * ch].iter_mut().zip(src) {
                        *d += v * s;
                    }
                }
            }
        }
        out
    }
}

impl<T: Scalar> Graph<'_, T> {
    /// Sparse-dense product `adj · x` applied per batch item, `x[B, N, C]`.
    pub fn spmm(&mut self, adj: Arc<Csr<T>>, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 3, "spmm expects [B, N, C]");
        assert_eq!(xs[1], adj.cols, "spmm node count {} vs adjacency {}", xs[1], adj.cols);
        let (batch, ch) = (xs[0], xs[2]);
        let out = adj.matmul_batched(self.value(x).data(), batch, ch);
        let rows = adj.rows;
        self.push(
            Tensor::new(vec![batch, rows, ch], out),
            &[x],
            Box::new(move |go, p, _, _| {
                vec![Some(Tensor::new(p[0].shape().to_vec(), adj.t_matmul_batched(go.data(), batch, ch)))]
            }),
        )
    }
}
