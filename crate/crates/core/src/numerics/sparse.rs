use super::tensor::DenseTensor;
use crate::error::{dim_err, Result};

/// Compressed sparse row matrix with nonnegative weights.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseRowMatrix {
    n_rows: usize,
    n_cols: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    weights: Vec<f64>,
}

impl SparseRowMatrix {
    pub fn from_csr(
        n_rows: usize,
        n_cols: usize,
        row_offsets: Vec<usize>,
        col_indices: Vec<usize>,
        weights: Vec<f64>,
    ) -> Result<Self> {
        if row_offsets.len() != n_rows + 1 || row_offsets.first() != Some(&0) {
            return Err(dim_err(
                "csr",
                "row_offsets must have n_rows + 1 entries starting at 0",
            ));
        }
        if row_offsets.windows(2).any(|w| w[0] > w[1]) {
            return Err(dim_err("csr", "row_offsets not monotone"));
        }
        let nnz = *row_offsets.last().unwrap();
        if col_indices.len() != nnz || weights.len() != nnz {
            return Err(dim_err(
                "csr",
                format!("nnz {nnz} disagrees with array lengths"),
            ));
        }
        if let Some(&c) = col_indices.iter().find(|&&c| c >= n_cols) {
            return Err(dim_err(
                "csr",
                format!("column {c} out of range for {n_cols} columns"),
            ));
        }
        if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(dim_err("csr", "weights must be finite and nonnegative"));
        }
        Ok(Self {
            n_rows,
            n_cols,
            row_offsets,
            col_indices,
            weights,
        })
    }

    /// Builds from per-row `(col, weight)` lists. Entries within a row are
    /// sorted by column; duplicate columns are summed.
    pub fn from_rows(n_cols: usize, rows: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        let mut row_offsets = Vec::with_capacity(rows.len() + 1);
        let mut col_indices = Vec::new();
        let mut weights = Vec::new();
        row_offsets.push(0);
        for mut row in rows.into_iter() {
            row.sort_by_key(|&(c, _)| c);
            let mut last: Option<usize> = None;
            for (c, w) in row {
                if last == Some(c) {
                    *weights.last_mut().unwrap() += w;
                } else {
                    col_indices.push(c);
                    weights.push(w);
                    last = Some(c);
                }
            }
            row_offsets.push(col_indices.len());
        }
        Self::from_csr(
            row_offsets.len() - 1,
            n_cols,
            row_offsets,
            col_indices,
            weights,
        )
    }

    pub fn identity(n: usize) -> Self {
        Self {
            n_rows: n,
            n_cols: n,
            row_offsets: (0..=n).collect(),
            col_indices: (0..n).collect(),
            weights: vec![1.0; n],
        }
    }

    /// Row `i` selects column `indices[i]` with weight 1; `None` yields an
    /// empty (all-zero) row.
    pub fn selection(indices: &[Option<usize>], n_cols: usize) -> Result<Self> {
        Self::from_rows(
            n_cols,
            indices
                .iter()
                .map(|i| i.map(|c| vec![(c, 1.0)]).unwrap_or_default())
                .collect(),
        )
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.col_indices.len()
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_indices
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_offsets[i]..self.row_offsets[i + 1];
        self.col_indices[span.clone()]
            .iter()
            .copied()
            .zip(self.weights[span].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.row(i).find(|&(c, _)| c == j).map_or(0.0, |(_, w)| w)
    }

    /// Scales every nonempty row to sum to one.
    pub fn row_normalize(&mut self) {
        for i in 0..self.n_rows {
            let span = self.row_offsets[i]..self.row_offsets[i + 1];
            let total: f64 = self.weights[span.clone()].iter().sum();
            if total > 0.0 {
                self.weights[span].iter_mut().for_each(|w| *w /= total);
            }
        }
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n_rows)
            .map(|i| self.row(i).map(|(_, w)| w).sum())
            .collect()
    }

    pub fn to_dense(&self) -> DenseTensor {
        let mut d = DenseTensor::zeros(self.n_rows, self.n_cols);
        for i in 0..self.n_rows {
            for (j, w) in self.row(i) {
                d.set(i, j, d.get(i, j) + w);
            }
        }
        d
    }
}

/// `y = a · x`
pub fn spmm(a: &SparseRowMatrix, x: &DenseTensor) -> Result<DenseTensor> {
    if a.n_cols != x.rows() {
        return Err(dim_err(
            "spmm",
            format!(
                "sparse {}x{} · dense {}x{}",
                a.n_rows,
                a.n_cols,
                x.rows(),
                x.cols()
            ),
        ));
    }
    let d = x.cols();
    let mut out = DenseTensor::zeros(a.n_rows, d);
    for i in 0..a.n_rows {
        let orow = out.row_mut(i);
        for (j, w) in a.row(i) {
            for (o, &v) in orow.iter_mut().zip(x.row(j)) {
                *o += w * v;
            }
        }
    }
    Ok(out)
}

/// `aᵀ · g`, the adjoint of [`spmm`].
pub fn spmm_transpose(a: &SparseRowMatrix, g: &DenseTensor) -> Result<DenseTensor> {
    if a.n_rows != g.rows() {
        return Err(dim_err(
            "spmm_transpose",
            format!("{} rows vs {}", a.n_rows, g.rows()),
        ));
    }
    let d = g.cols();
    let mut out = DenseTensor::zeros(a.n_cols, d);
    for i in 0..a.n_rows {
        for (j, w) in a.row(i) {
            let grow = g.row(i);
            for (o, &v) in out.row_mut(j).iter_mut().zip(grow) {
                *o += w * v;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::matmul;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_sparse(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> SparseRowMatrix {
        let data = (0..rows)
            .map(|_| {
                let mut row = Vec::new();
                for c in 0..cols {
                    if rng.random_bool(0.3) {
                        row.push((c, rng.random_range(0.0..2.0)));
                    }
                }
                row
            })
            .collect();
        SparseRowMatrix::from_rows(cols, data).unwrap()
    }

    #[test]
    fn identity_leaves_input() {
        let x = DenseTensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        assert_eq!(spmm(&SparseRowMatrix::identity(3), &x).unwrap(), x);
    }

    #[test]
    fn single_entry_row_copies() {
        let x = DenseTensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let a = SparseRowMatrix::from_rows(3, vec![vec![(2, 1.0)], vec![], vec![]]).unwrap();
        let y = spmm(&a, &x).unwrap();
        assert_eq!(y.row(0), &[5.0, 6.0]);
        assert_eq!(y.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn matches_densified_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let a = random_sparse(&mut rng, 7, 5);
            let x = DenseTensor::new(5, 3, (0..15).map(|_| rng.random_range(-1.0..1.0)).collect())
                .unwrap();
            let y = spmm(&a, &x).unwrap();
            let oracle = matmul(&a.to_dense(), &x).unwrap();
            assert!(y.max_abs_diff(&oracle) <= 1e-12);
            let g = DenseTensor::new(7, 3, (0..21).map(|_| rng.random_range(-1.0..1.0)).collect())
                .unwrap();
            let gt = spmm_transpose(&a, &g).unwrap();
            let oracle_t = matmul(&a.to_dense().transpose(), &g).unwrap();
            assert!(gt.max_abs_diff(&oracle_t) <= 1e-12);
        }
    }

    #[test]
    fn shape_mismatch() {
        let a = SparseRowMatrix::identity(3);
        assert!(spmm(&a, &DenseTensor::zeros(4, 2)).is_err());
    }

    #[test]
    fn csr_validation() {
        assert!(SparseRowMatrix::from_csr(1, 2, vec![0, 1], vec![2], vec![1.0]).is_err());
        assert!(SparseRowMatrix::from_csr(2, 2, vec![0, 1, 0], vec![0], vec![1.0]).is_err());
        assert!(SparseRowMatrix::from_csr(1, 2, vec![0, 1], vec![1], vec![-1.0]).is_err());
    }

    #[test]
    fn normalization_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut a = random_sparse(&mut rng, 20, 20);
        a.row_normalize();
        for (i, s) in a.row_sums().into_iter().enumerate() {
            if a.row(i).next().is_some() {
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }
}
