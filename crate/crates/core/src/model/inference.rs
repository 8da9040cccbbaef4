use std::cmp::Ordering;

use super::encoder::{encode_batch, item_intent_enhance};
use super::{ModelParams, Variant};
use crate::data::pad_inputs;
use crate::error::{dim_err, Error, Result};
use crate::graph::{propagate, CoGraph};
use crate::numerics::tensor::dot;
use crate::numerics::{matmul_nt, DenseTensor};

const ENCODE_CHUNK: usize = 256;

/// Dot product of `h` with every row of `table`.
pub fn score(h: &[f64], table: &DenseTensor) -> Result<Vec<f64>> {
    if h.len() != table.cols() {
        return Err(dim_err(
            "score",
            format!("query width {} vs table {:?}", h.len(), table.shape()),
        ));
    }
    Ok((0..table.rows()).map(|j| dot(h, table.row(j))).collect())
}

fn rank_order(scores: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

/// Indices of the `n` highest scores, skipping `exclude`; ties go to the
/// lower index. Returns fewer than `n` when the catalog runs out.
pub fn predict_topn(scores: &[f64], n: usize, exclude: &[usize]) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::Usage("top-n cutoff must be at least 1".into()));
    }
    let mut skip = vec![false; scores.len()];
    for &e in exclude {
        if let Some(s) = skip.get_mut(e) {
            *s = true;
        }
    }
    let mut pool: Vec<usize> = (0..scores.len()).filter(|&j| !skip[j]).collect();
    let order = rank_order(scores);
    if pool.len() > n {
        pool.select_nth_unstable_by(n - 1, &order);
        pool.truncate(n);
    }
    pool.sort_unstable_by(&order);
    Ok(pool)
}

/// Frozen model state for scoring: the unperturbed structural table and
/// the fused item table, computed once.
#[derive(Clone, Debug)]
pub struct InferenceSnapshot {
    params: ModelParams,
    variant: Variant,
    structural: DenseTensor,
    intent: Option<DenseTensor>,
    fused: DenseTensor,
}

impl InferenceSnapshot {
    pub fn new(params: &ModelParams, graph: &CoGraph, variant: Variant) -> Result<Self> {
        params.validate()?;
        let structural = propagate(graph, &params.weights.item_embeddings, params.config.depth)?;
        let (intent, fused) = if variant.intent {
            let views = item_intent_enhance(&structural, params, variant.gate)?;
            (Some(views.intent), views.fused)
        } else {
            (None, structural.clone())
        };
        Ok(Self {
            params: params.clone(),
            variant,
            structural,
            intent,
            fused,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn structural(&self) -> &DenseTensor {
        &self.structural
    }

    /// Item intent rows; `None` when the intent branch is disabled.
    pub fn intent(&self) -> Option<&DenseTensor> {
        self.intent.as_ref()
    }

    pub fn item_table(&self) -> &DenseTensor {
        &self.fused
    }

    /// Fused sequence representations, one row per input. Inputs longer
    /// than the model window keep their most recent items.
    pub fn encode(&self, inputs: &[&[usize]]) -> Result<DenseTensor> {
        let cfg = &self.params.config;
        let mut out = DenseTensor::zeros(inputs.len(), cfg.dim);
        for (c, chunk) in inputs.chunks(ENCODE_CHUNK).enumerate() {
            let windows: Vec<Vec<usize>> = chunk
                .iter()
                .map(|s| s[s.len().saturating_sub(cfg.max_len)..].to_vec())
                .collect();
            if windows.iter().any(|w| w.is_empty()) {
                return Err(Error::Usage("cannot encode an empty sequence".into()));
            }
            let (flat, lens) = pad_inputs(&windows, cfg.max_len, cfg.pad());
            let views = encode_batch(&self.params, &self.structural, self.variant, &flat, &lens)?;
            for b in 0..chunk.len() {
                out.row_mut(c * ENCODE_CHUNK + b)
                    .copy_from_slice(views.fused.row(b));
            }
        }
        Ok(out)
    }

    /// Full-catalog scores for each row of `queries`.
    pub fn score_all(&self, queries: &DenseTensor) -> Result<DenseTensor> {
        matmul_nt(queries, &self.fused)
    }

    pub fn recommend(&self, input: &[usize], n: usize) -> Result<Vec<usize>> {
        let h = self.encode(&[input])?;
        predict_topn(&score(h.row(0), &self.fused)?, n, input)
    }
}
