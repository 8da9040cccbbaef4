use std::sync::Arc;

use super::{GateMode, ModelConfig, ModelParams, ParamSet, Variant};
use crate::error::{dim_err, Error, Result};
use crate::numerics::{AttentionLayout, DenseTensor, SparseRowMatrix, Tape, Var};

/// Tape handles for the item-side representation of some set of items.
#[derive(Clone, Copy, Debug)]
pub struct ItemViewVars {
    pub structural: Var,
    pub intent: Option<Var>,
    pub gate: Option<Var>,
    pub fused: Var,
}

/// Tape handles for a batch of encoded sequences.
#[derive(Clone, Copy, Debug)]
pub struct SeqViewVars {
    /// `(B·T) × d`, row `b·T + t`.
    pub hidden: Var,
    pub pooled: Var,
    pub intent: Option<Var>,
    pub gate: Option<Var>,
    pub fused: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct ViewVars {
    pub items: ItemViewVars,
    pub seq: SeqViewVars,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ItemViews {
    pub structural: DenseTensor,
    pub intent: DenseTensor,
    pub gate: DenseTensor,
    pub fused: DenseTensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeqViews {
    pub hidden: DenseTensor,
    pub pooled: DenseTensor,
    pub intent: DenseTensor,
    pub gate: DenseTensor,
    pub fused: DenseTensor,
}

struct Enhanced {
    intent: Var,
    gate: Var,
    fused: Var,
}

/// Soft prototype alignment followed by gated residual fusion.
///
/// With `frozen`, the intent and gate are recorded as constants so that
/// gradients reach `base` only through the identity path.
fn enhance(
    tape: &mut Tape,
    base: Var,
    prototypes: Var,
    gate_weights: Var,
    mode: GateMode,
    frozen: bool,
) -> Result<Enhanced> {
    let d = tape.value(base)?.cols();
    let p = tape.value(prototypes)?;
    if p.rows() != d {
        return Err(dim_err(
            "intent",
            format!("base width {d} vs prototypes {:?}", p.shape()),
        ));
    }
    let logits = tape.matmul(base, prototypes)?;
    let assign = tape.softmax_rows(logits)?;
    let mut intent = tape.matmul_nt(assign, prototypes)?;
    let mut gate = match mode {
        GateMode::Learned => {
            let joined = tape.concat_cols(base, intent)?;
            let pre = tape.matmul(joined, gate_weights)?;
            tape.sigmoid(pre)?
        }
        GateMode::Direct => {
            let n = tape.value(base)?.rows();
            tape.leaf(DenseTensor::filled(n, d, 1.0))
        }
        GateMode::Zero => {
            let n = tape.value(base)?.rows();
            tape.leaf(DenseTensor::zeros(n, d))
        }
    };
    if frozen {
        intent = tape.detach(intent)?;
        gate = tape.detach(gate)?;
    }
    let fused = match mode {
        GateMode::Direct => tape.add(base, intent)?,
        _ => {
            let gated = tape.mul(gate, intent)?;
            tape.add(base, gated)?
        }
    };
    Ok(Enhanced {
        intent,
        gate,
        fused,
    })
}

/// Item-side enhancement of structural rows `r`.
pub fn item_intent_vars(
    tape: &mut Tape,
    r: Var,
    params: &ParamSet<Var>,
    mode: GateMode,
    frozen: bool,
) -> Result<ItemViewVars> {
    let e = enhance(
        tape,
        r,
        params.item_prototypes,
        params.item_gate,
        mode,
        frozen,
    )?;
    Ok(ItemViewVars {
        structural: r,
        intent: Some(e.intent),
        gate: Some(e.gate),
        fused: e.fused,
    })
}

/// Sequence-side enhancement of pooled representations; returns
/// `(intent, gate, fused)`.
pub fn seq_intent_vars(
    tape: &mut Tape,
    pooled: Var,
    params: &ParamSet<Var>,
    mode: GateMode,
    frozen: bool,
) -> Result<(Var, Var, Var)> {
    let e = enhance(
        tape,
        pooled,
        params.user_prototypes,
        params.user_gate,
        mode,
        frozen,
    )?;
    Ok((e.intent, e.gate, e.fused))
}

pub fn gather_items(tape: &mut Tape, table: Var, rows: &[usize]) -> Result<Var> {
    let idx: Vec<Option<usize>> = rows.iter().map(|&i| Some(i)).collect();
    tape.gather_rows(table, &idx)
}

/// Causal (or bidirectional) transformer over left-padded sequences.
///
/// `inputs` is `B·T` item indices; slots before each sequence's valid
/// suffix are ignored whatever they contain. The padding index inside the
/// valid suffix acts as a zero-embedding mask token.
pub fn encode_sequences(
    tape: &mut Tape,
    table: Var,
    params: &ParamSet<Var>,
    config: &ModelConfig,
    inputs: &[usize],
    valid_lengths: &[usize],
) -> Result<Var> {
    let t_len = config.max_len;
    let batch = valid_lengths.len();
    if inputs.len() != batch * t_len {
        return Err(dim_err(
            "encode",
            format!(
                "{} inputs for {batch} sequences of length {t_len}",
                inputs.len()
            ),
        ));
    }
    if let Some(&l) = valid_lengths.iter().find(|&&l| l == 0 || l > t_len) {
        return Err(Error::Usage(format!(
            "valid length {l} outside 1..={t_len}"
        )));
    }
    let n_items = config.n_items;
    let mut idx = Vec::with_capacity(inputs.len());
    for (b, &len) in valid_lengths.iter().enumerate() {
        for t in 0..t_len {
            let item = inputs[b * t_len + t];
            let valid = t + len >= t_len;
            if valid && item > n_items {
                return Err(Error::Usage(format!(
                    "item {item} out of range in valid slot"
                )));
            }
            idx.push((valid && item < n_items).then_some(item));
        }
    }
    let items = tape.gather_rows(table, &idx)?;
    let pos_idx: Vec<Option<usize>> = (0..batch).flat_map(|_| (0..t_len).map(Some)).collect();
    let pos = tape.gather_rows(params.positions, &pos_idx)?;
    let mut x = tape.add(items, pos)?;
    let layout = AttentionLayout {
        len: t_len,
        heads: config.heads,
        causal: config.causal,
        valid_lengths: valid_lengths.to_vec(),
    };
    for block in &params.blocks {
        let q = tape.matmul(x, block.query)?;
        let k = tape.matmul(x, block.key)?;
        let v = tape.matmul(x, block.value)?;
        let att = tape.attention(q, k, v, layout.clone())?;
        let proj = tape.matmul(att, block.output)?;
        let res = tape.add(x, proj)?;
        x = tape.layer_norm(res, block.ln1_scale, block.ln1_shift)?;
        let inner = tape.matmul(x, block.ff_in)?;
        let act = tape.gelu(inner)?;
        let ff = tape.matmul(act, block.ff_out)?;
        let res = tape.add(x, ff)?;
        x = tape.layer_norm(res, block.ln2_scale, block.ln2_shift)?;
    }
    Ok(x)
}

/// Half the last valid state plus half the valid-position mean; with
/// `pooling` off, the last valid state alone.
pub fn pool_vars(
    tape: &mut Tape,
    hidden: Var,
    valid_lengths: &[usize],
    max_len: usize,
    pooling: bool,
) -> Result<Var> {
    let batch = valid_lengths.len();
    let rows: Vec<Vec<(usize, f64)>> = valid_lengths
        .iter()
        .enumerate()
        .map(|(b, &len)| {
            let last = b * max_len + max_len - 1;
            if !pooling {
                return vec![(last, 1.0)];
            }
            let mut row: Vec<(usize, f64)> = (max_len - len..max_len)
                .map(|t| (b * max_len + t, 0.5 / len as f64))
                .collect();
            row.push((last, 0.5));
            row
        })
        .collect();
    let weights = SparseRowMatrix::from_rows(batch * max_len, rows)?;
    tape.spmm(Arc::new(weights), hidden)
}

/// One full forward pass: item-side views for `item_rows` drawn from
/// `item_table`, sequence-side views over inputs gathered from `seq_table`.
#[allow(clippy::too_many_arguments)]
pub fn forward_view(
    tape: &mut Tape,
    item_table: Var,
    seq_table: Var,
    params: &ParamSet<Var>,
    config: &ModelConfig,
    variant: Variant,
    inputs: &[usize],
    valid_lengths: &[usize],
    item_rows: &[usize],
) -> Result<ViewVars> {
    let structural = gather_items(tape, item_table, item_rows)?;
    let items = if variant.intent {
        item_intent_vars(tape, structural, params, variant.gate, false)?
    } else {
        ItemViewVars {
            structural,
            intent: None,
            gate: None,
            fused: structural,
        }
    };
    let hidden = encode_sequences(tape, seq_table, params, config, inputs, valid_lengths)?;
    let pooled = pool_vars(tape, hidden, valid_lengths, config.max_len, variant.pooling)?;
    let seq = if variant.intent {
        let (intent, gate, fused) = seq_intent_vars(tape, pooled, params, variant.gate, false)?;
        SeqViewVars {
            hidden,
            pooled,
            intent: Some(intent),
            gate: Some(gate),
            fused,
        }
    } else {
        SeqViewVars {
            hidden,
            pooled,
            intent: None,
            gate: None,
            fused: pooled,
        }
    };
    Ok(ViewVars { items, seq })
}

/// Value-level item enhancement over all rows of `r`.
pub fn item_intent_enhance(
    r: &DenseTensor,
    params: &ModelParams,
    mode: GateMode,
) -> Result<ItemViews> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let rv = tape.leaf(r.clone());
    let v = item_intent_vars(&mut tape, rv, &p, mode, false)?;
    Ok(ItemViews {
        structural: r.clone(),
        intent: tape.value(v.intent.expect("intent"))?.clone(),
        gate: tape.value(v.gate.expect("gate"))?.clone(),
        fused: tape.value(v.fused)?.clone(),
    })
}

/// Value-level sequence enhancement; returns `(intent, gate, fused)`.
pub fn seq_intent_enhance(
    pooled: &DenseTensor,
    params: &ModelParams,
    mode: GateMode,
) -> Result<(DenseTensor, DenseTensor, DenseTensor)> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let ev = tape.leaf(pooled.clone());
    let (z, g, h) = seq_intent_vars(&mut tape, ev, &p, mode, false)?;
    Ok((
        tape.value(z)?.clone(),
        tape.value(g)?.clone(),
        tape.value(h)?.clone(),
    ))
}

/// Value-level sequence encoding with the given structural table.
pub fn encode_batch(
    params: &ModelParams,
    table: &DenseTensor,
    variant: Variant,
    inputs: &[usize],
    valid_lengths: &[usize],
) -> Result<SeqViews> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let tv = tape.leaf(table.clone());
    let hidden = encode_sequences(&mut tape, tv, &p, &params.config, inputs, valid_lengths)?;
    let pooled = pool_vars(
        &mut tape,
        hidden,
        valid_lengths,
        params.config.max_len,
        variant.pooling,
    )?;
    let (z, g, h) = if variant.intent {
        seq_intent_vars(&mut tape, pooled, &p, variant.gate, false)?
    } else {
        let b = valid_lengths.len();
        let d = params.config.dim;
        let z = tape.leaf(DenseTensor::zeros(b, d));
        let g = tape.leaf(DenseTensor::zeros(b, d));
        (z, g, pooled)
    };
    Ok(SeqViews {
        hidden: tape.value(hidden)?.clone(),
        pooled: tape.value(pooled)?.clone(),
        intent: tape.value(z)?.clone(),
        gate: tape.value(g)?.clone(),
        fused: tape.value(h)?.clone(),
    })
}
