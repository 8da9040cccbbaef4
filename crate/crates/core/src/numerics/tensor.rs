use crate::error::{dim_err, Error, Result};

/// Row-major dense matrix of `f64`.
///
/// Every tensor in the model is rank 2; vectors are stored as `1 × n`
/// and batched sequences as `(batch · len) × d`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseTensor {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl DenseTensor {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows * cols != values.len() {
            return Err(dim_err(
                "tensor",
                format!(
                    "{rows}x{cols} needs {} values, got {}",
                    rows * cols,
                    values.len()
                ),
            ));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            values: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.values[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(dim_err(
                    "from_rows",
                    format!("row {i} has {} entries, expected {cols}", r.len()),
                ));
            }
            values.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            values,
        })
    }

    pub fn row_vector(values: Vec<f64>) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            values,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self::row_vector(vec![v])
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.values[r * self.cols + c] = v;
    }

    /// Value of a `1 × 1` tensor.
    pub fn item(&self) -> Result<f64> {
        if self.values.len() != 1 {
            return Err(dim_err(
                "item",
                format!("expected 1x1, got {}x{}", self.rows, self.cols),
            ));
        }
        Ok(self.values[0])
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.values[j * self.rows + i] = self.values[i * self.cols + j];
            }
        }
        out
    }

    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut values = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            values.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            values,
        }
    }

    pub fn add_assign(&mut self, other: &DenseTensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn max_abs_diff(&self, other: &DenseTensor) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub(crate) fn expect_shape(&self, op: &'static str, rows: usize, cols: usize) -> Result<()> {
        if self.rows != rows || self.cols != cols {
            return Err(dim_err(
                op,
                format!("expected {rows}x{cols}, got {}x{}", self.rows, self.cols),
            ));
        }
        Ok(())
    }
}

/// `a · b`
pub fn matmul(a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
    if a.cols != b.rows {
        return Err(dim_err(
            "matmul",
            format!("{}x{} · {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.values[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.values[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(DenseTensor {
        rows: m,
        cols: n,
        values: out,
    })
}

/// `a · bᵀ`
pub fn matmul_nt(a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
    if a.cols != b.cols {
        return Err(dim_err(
            "matmul_nt",
            format!("{}x{} · ({}x{})ᵀ", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let (m, k, n) = (a.rows, a.cols, b.rows);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.values[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b.values[j * k..(j + 1) * k];
            out[i * n + j] = dot(arow, brow);
        }
    }
    Ok(DenseTensor {
        rows: m,
        cols: n,
        values: out,
    })
}

/// `aᵀ · b`
pub fn matmul_tn(a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
    if a.rows != b.rows {
        return Err(dim_err(
            "matmul_tn",
            format!("({}x{})ᵀ · {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let (m, k, n) = (a.cols, a.rows, b.cols);
    let mut out = vec![0.0; m * n];
    for r in 0..k {
        let arow = &a.values[r * m..(r + 1) * m];
        let brow = &b.values[r * n..(r + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(DenseTensor {
        rows: m,
        cols: n,
        values: out,
    })
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `sign(0) = 0`.
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn rowwise_softmax(x: &DenseTensor) -> DenseTensor {
    let mut out = x.clone();
    for i in 0..x.rows {
        softmax_in_place(out.row_mut(i));
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Rows with zero norm are returned unchanged.
pub fn row_l2_normalize(x: &DenseTensor) -> DenseTensor {
    let mut out = x.clone();
    for i in 0..x.rows {
        let row = out.row_mut(i);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    out
}

pub fn hadamard(a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
    zip_with("hadamard", a, b, |x, y| x * y)
}

pub fn add(a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
    zip_with("add", a, b, |x, y| x + y)
}

pub fn scale(a: &DenseTensor, s: f64) -> DenseTensor {
    a.map(|v| v * s)
}

pub fn concat_cols(a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
    if a.rows != b.rows {
        return Err(dim_err(
            "concat",
            format!("{} rows vs {} rows", a.rows, b.rows),
        ));
    }
    let cols = a.cols + b.cols;
    let mut values = Vec::with_capacity(a.rows * cols);
    for i in 0..a.rows {
        values.extend_from_slice(a.row(i));
        values.extend_from_slice(b.row(i));
    }
    Ok(DenseTensor {
        rows: a.rows,
        cols,
        values,
    })
}

fn zip_with(
    op: &'static str,
    a: &DenseTensor,
    b: &DenseTensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<DenseTensor> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension {
            op,
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    Ok(DenseTensor {
        rows: a.rows,
        cols: a.cols,
        values: a
            .values
            .iter()
            .zip(&b.values)
            .map(|(&x, &y)| f(x, y))
            .collect(),
    })
}
