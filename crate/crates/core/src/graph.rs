//! Distance-weighted item co-occurrence graph and structural propagation.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{spmm, DenseTensor, SparseRowMatrix, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CoGraphConfig {
    /// Positional-distance threshold; a pair at distance `d` adds `max(0, delta − d)`.
    pub delta: usize,
    /// Number of propagation steps.
    pub depth: usize,
    /// Increment both `(i, j)` and `(j, i)`.
    pub symmetric: bool,
}

impl Default for CoGraphConfig {
    fn default() -> Self {
        Self {
            delta: 5,
            depth: 2,
            symmetric: true,
        }
    }
}

impl CoGraphConfig {
    pub fn validate(&self) -> Result<()> {
        if self.delta == 0 {
            return Err(Error::Usage("graph delta must be at least 1".into()));
        }
        if self.depth == 0 {
            return Err(Error::Usage("propagation depth must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoGraph {
    matrix: Arc<SparseRowMatrix>,
    normalized: bool,
    delta: usize,
}

impl CoGraph {
    pub fn new(matrix: SparseRowMatrix, normalized: bool, delta: usize) -> Self {
        Self {
            matrix: Arc::new(matrix),
            normalized,
            delta,
        }
    }

    /// The row-normalized identity: every item only keeps itself.
    pub fn identity(n_items: usize) -> Self {
        Self::new(SparseRowMatrix::identity(n_items), true, 1)
    }

    pub fn matrix(&self) -> &SparseRowMatrix {
        &self.matrix
    }

    pub fn shared_matrix(&self) -> Arc<SparseRowMatrix> {
        Arc::clone(&self.matrix)
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn delta(&self) -> usize {
        self.delta
    }

    pub fn n_items(&self) -> usize {
        self.matrix.n_rows()
    }

    pub fn normalize(&mut self) {
        let mut m = (*self.matrix).clone();
        m.row_normalize();
        self.matrix = Arc::new(m);
        self.normalized = true;
    }

    /// Binary dump: `n_items`, `nnz`, `delta` as u64, a one-byte normalized
    /// flag, then row offsets and column indices (u64) and weights (f64),
    /// all little-endian.
    pub fn write(&self, mut out: impl Write) -> Result<()> {
        let m = &self.matrix;
        out.write_all(&(m.n_rows() as u64).to_le_bytes())?;
        out.write_all(&(m.nnz() as u64).to_le_bytes())?;
        out.write_all(&(self.delta as u64).to_le_bytes())?;
        out.write_all(&[self.normalized as u8])?;
        for &o in m.row_offsets() {
            out.write_all(&(o as u64).to_le_bytes())?;
        }
        for &c in m.col_indices() {
            out.write_all(&(c as u64).to_le_bytes())?;
        }
        for &w in m.weights() {
            out.write_all(&w.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read(mut input: impl Read) -> Result<Self> {
        let mut b8 = [0u8; 8];
        let mut next_u64 = |input: &mut dyn Read| -> Result<u64> {
            input.read_exact(&mut b8)?;
            Ok(u64::from_le_bytes(b8))
        };
        let n = next_u64(&mut input)? as usize;
        let nnz = next_u64(&mut input)? as usize;
        let delta = next_u64(&mut input)? as usize;
        let mut flag = [0u8; 1];
        input.read_exact(&mut flag)?;
        let offsets = (0..=n)
            .map(|_| next_u64(&mut input).map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let cols = (0..nnz)
            .map(|_| next_u64(&mut input).map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let weights = (0..nnz)
            .map(|_| next_u64(&mut input).map(f64::from_bits))
            .collect::<Result<Vec<_>>>()?;
        let matrix = SparseRowMatrix::from_csr(n, n, offsets, cols, weights)
            .map_err(|e| Error::Format(e.to_string()))?;
        Ok(Self::new(matrix, flag[0] != 0, delta))
    }
}

/// Raw accumulated co-occurrence weights with `A_ii = 1` for every item.
pub fn accumulate_cooccurrence(
    sequences: &[Vec<usize>],
    n_items: usize,
    config: &CoGraphConfig,
) -> Result<SparseRowMatrix> {
    config.validate()?;
    if sequences.iter().all(Vec::is_empty) {
        return Err(Error::EmptyGraph);
    }
    let mut rows: Vec<HashMap<usize, f64>> = vec![HashMap::new(); n_items];
    for seq in sequences {
        if let Some(&bad) = seq.iter().find(|&&i| i >= n_items) {
            return Err(Error::Usage(format!(
                "item {bad} outside catalog of {n_items}"
            )));
        }
        for p in 0..seq.len() {
            for q in p + 1..seq.len().min(p + config.delta) {
                let w = (config.delta - (q - p)) as f64;
                let (i, j) = (seq[p], seq[q]);
                *rows[i].entry(j).or_insert(0.0) += w;
                if config.symmetric {
                    *rows[j].entry(i).or_insert(0.0) += w;
                }
            }
        }
    }
    let rows = rows
        .into_iter()
        .enumerate()
        .map(|(i, mut row)| {
            row.insert(i, 1.0);
            row.into_iter().collect()
        })
        .collect();
    SparseRowMatrix::from_rows(n_items, rows)
}

/// Builds and row-normalizes the co-occurrence graph from training sequences.
pub fn build_cograph(
    sequences: &[Vec<usize>],
    n_items: usize,
    config: &CoGraphConfig,
) -> Result<CoGraph> {
    let raw = accumulate_cooccurrence(sequences, n_items, config)?;
    let mut g = CoGraph::new(raw, false, config.delta);
    g.normalize();
    Ok(g)
}

fn check_propagation(graph: &CoGraph, rows: usize, depth: usize) -> Result<()> {
    if !graph.normalized {
        return Err(Error::Usage(
            "propagation requires a row-normalized graph".into(),
        ));
    }
    if depth == 0 {
        return Err(Error::Usage("propagation depth must be at least 1".into()));
    }
    if rows != graph.n_items() {
        return Err(crate::error::dim_err(
            "propagate",
            format!("{rows} embedding rows for {} items", graph.n_items()),
        ));
    }
    Ok(())
}

/// `R^depth` with `R^l = A · R^(l−1)` and `R^0 = e`.
pub fn propagate(graph: &CoGraph, e: &DenseTensor, depth: usize) -> Result<DenseTensor> {
    check_propagation(graph, e.rows(), depth)?;
    let mut r = spmm(&graph.matrix, e)?;
    for _ in 1..depth {
        r = spmm(&graph.matrix, &r)?;
    }
    Ok(r)
}

/// Tape-recorded [`propagate`].
pub fn propagate_var(tape: &mut Tape, graph: &CoGraph, e: Var, depth: usize) -> Result<Var> {
    check_propagation(graph, tape.value(e)?.rows(), depth)?;
    let mut r = e;
    for _ in 0..depth {
        r = tape.spmm(graph.shared_matrix(), r)?;
    }
    Ok(r)
}

/// Drops each off-diagonal edge independently with probability `drop_rate`
/// and re-normalizes. Diagonal entries always survive.
pub fn perturb_graph_edges(graph: &CoGraph, drop_rate: f64, rng: &mut impl Rng) -> Result<CoGraph> {
    if !(0.0..1.0).contains(&drop_rate) {
        return Err(Error::Usage(format!(
            "drop rate {drop_rate} outside [0, 1)"
        )));
    }
    let m = graph.matrix();
    let rows = (0..m.n_rows())
        .map(|i| {
            let before = m.row(i).count();
            let mut kept: Vec<(usize, f64)> = m
                .row(i)
                .filter(|&(j, _)| j == i || !rng.random_bool(drop_rate))
                .collect();
            // Untouched rows keep their exact weights.
            if kept.len() != before {
                let total: f64 = kept.iter().map(|&(_, w)| w).sum();
                if total > 0.0 {
                    kept.iter_mut().for_each(|(_, w)| *w /= total);
                }
            }
            kept
        })
        .collect();
    Ok(CoGraph::new(
        SparseRowMatrix::from_rows(m.n_cols(), rows)?,
        graph.normalized,
        graph.delta,
    ))
}
