//! Bilateral intent-enhanced encoders, scoring, perturbation views, and
//! checkpoint persistence.

mod checkpoint;
mod encoder;
mod inference;
mod perturb;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC};
pub use encoder::{
    encode_batch, encode_sequences, forward_view, gather_items, item_intent_enhance,
    item_intent_vars, pool_vars, seq_intent_enhance, seq_intent_vars, ItemViewVars, ItemViews,
    SeqViewVars, SeqViews, ViewVars,
};
pub use inference::{predict_topn, score, InferenceSnapshot};
pub use perturb::{perturb_embeddings, perturbation_directions, perturbation_noise, PerturbSpec};

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::numerics::{DenseTensor, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub n_items: usize,
    pub dim: usize,
    /// Number of intent prototypes on each side.
    pub n_intents: usize,
    pub max_len: usize,
    /// Graph propagation depth.
    pub depth: usize,
    pub blocks: usize,
    pub heads: usize,
    /// Causal (left-to-right) attention; bidirectional when false.
    pub causal: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_items", self.n_items),
            ("dim", self.dim),
            ("n_intents", self.n_intents),
            ("max_len", self.max_len),
            ("depth", self.depth),
            ("heads", self.heads),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Usage(format!("model {name} must be positive")));
            }
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Usage(format!(
                "dimension {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    /// Padding index used in item sequences.
    pub fn pad(&self) -> usize {
        self.n_items
    }
}

/// How the intent signal is fused into the base representation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateMode {
    /// `base + σ([base ‖ intent] W) ⊙ intent`
    Learned,
    /// `base + intent`
    Direct,
    /// Gate pinned to zero: `base + 0 ⊙ intent`.
    Zero,
}

/// Architectural switches derived from ablation flags.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Variant {
    pub intent: bool,
    pub gate: GateMode,
    pub pooling: bool,
}

impl Default for Variant {
    fn default() -> Self {
        Self {
            intent: true,
            gate: GateMode::Learned,
            pooling: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T> {
    pub query: T,
    pub key: T,
    pub value: T,
    pub output: T,
    pub ff_in: T,
    pub ff_out: T,
    pub ln1_scale: T,
    pub ln1_shift: T,
    pub ln2_scale: T,
    pub ln2_shift: T,
}

/// Every learnable tensor, generic so the same layout holds values,
/// tape handles, gradients, and optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    pub item_embeddings: T,
    pub item_prototypes: T,
    pub user_prototypes: T,
    pub item_gate: T,
    pub user_gate: T,
    pub positions: T,
    pub blocks: Vec<BlockParams<T>>,
}

const BLOCK_FIELDS: [&str; 10] = [
    "query",
    "key",
    "value",
    "output",
    "ff_in",
    "ff_out",
    "ln1_scale",
    "ln1_shift",
    "ln2_scale",
    "ln2_shift",
];

impl<T> BlockParams<T> {
    fn fields(&self) -> [&T; 10] {
        [
            &self.query,
            &self.key,
            &self.value,
            &self.output,
            &self.ff_in,
            &self.ff_out,
            &self.ln1_scale,
            &self.ln1_shift,
            &self.ln2_scale,
            &self.ln2_shift,
        ]
    }

    fn fields_mut(&mut self) -> [&mut T; 10] {
        [
            &mut self.query,
            &mut self.key,
            &mut self.value,
            &mut self.output,
            &mut self.ff_in,
            &mut self.ff_out,
            &mut self.ln1_scale,
            &mut self.ln1_shift,
            &mut self.ln2_scale,
            &mut self.ln2_shift,
        ]
    }

    fn from_fields(mut it: impl Iterator<Item = T>) -> Option<Self> {
        Some(Self {
            query: it.next()?,
            key: it.next()?,
            value: it.next()?,
            output: it.next()?,
            ff_in: it.next()?,
            ff_out: it.next()?,
            ln1_scale: it.next()?,
            ln1_shift: it.next()?,
            ln2_scale: it.next()?,
            ln2_shift: it.next()?,
        })
    }
}

impl<T> ParamSet<T> {
    /// Tensor names in canonical order.
    pub fn names(&self) -> Vec<String> {
        let mut names: Vec<String> = [
            "item_embeddings",
            "item_prototypes",
            "user_prototypes",
            "item_gate",
            "user_gate",
            "positions",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        for b in 0..self.blocks.len() {
            names.extend(BLOCK_FIELDS.iter().map(|f| format!("block{b}.{f}")));
        }
        names
    }

    pub fn iter(&self) -> Vec<&T> {
        let mut out = vec![
            &self.item_embeddings,
            &self.item_prototypes,
            &self.user_prototypes,
            &self.item_gate,
            &self.user_gate,
            &self.positions,
        ];
        for b in &self.blocks {
            out.extend(b.fields());
        }
        out
    }

    pub fn iter_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![
            &mut self.item_embeddings,
            &mut self.item_prototypes,
            &mut self.user_prototypes,
            &mut self.item_gate,
            &mut self.user_gate,
            &mut self.positions,
        ];
        for b in &mut self.blocks {
            out.extend(b.fields_mut());
        }
        out
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> ParamSet<U> {
        let values: Vec<U> = self.iter().into_iter().map(&mut f).collect();
        ParamSet::from_vec(values, self.blocks.len()).expect("same layout")
    }

    pub fn try_map<U>(&self, mut f: impl FnMut(&T) -> Result<U>) -> Result<ParamSet<U>> {
        let values = self
            .iter()
            .into_iter()
            .map(&mut f)
            .collect::<Result<Vec<U>>>()?;
        Ok(ParamSet::from_vec(values, self.blocks.len()).expect("same layout"))
    }

    /// Inverse of [`ParamSet::iter`].
    pub fn from_vec(values: Vec<T>, n_blocks: usize) -> Option<Self> {
        if values.len() != 6 + BLOCK_FIELDS.len() * n_blocks {
            return None;
        }
        let mut it = values.into_iter();
        let item_embeddings = it.next()?;
        let item_prototypes = it.next()?;
        let user_prototypes = it.next()?;
        let item_gate = it.next()?;
        let user_gate = it.next()?;
        let positions = it.next()?;
        let mut blocks = Vec::with_capacity(n_blocks);
        for _ in 0..n_blocks {
            blocks.push(BlockParams::from_fields(it.by_ref())?);
        }
        Some(Self {
            item_embeddings,
            item_prototypes,
            user_prototypes,
            item_gate,
            user_gate,
            positions,
            blocks,
        })
    }
}

/// Model configuration plus all learnable tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub weights: ParamSet<DenseTensor>,
}

fn normal_init(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> DenseTensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    DenseTensor::new(
        rows,
        cols,
        (0..rows * cols).map(|_| dist.sample(rng)).collect(),
    )
    .expect("shape")
}

fn xavier_init(rows: usize, cols: usize, rng: &mut impl Rng) -> DenseTensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
    DenseTensor::new(
        rows,
        cols,
        (0..rows * cols).map(|_| dist.sample(rng)).collect(),
    )
    .expect("shape")
}

impl ModelParams {
    /// Embeddings, prototypes and positions ~ N(0, 0.02²); projections use
    /// Xavier-uniform; layer norms start at identity.
    pub fn init(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let k = config.n_intents;
        let item_embeddings = normal_init(config.n_items, d, 0.02, rng);
        let item_prototypes = normal_init(d, k, 0.02, rng);
        let user_prototypes = normal_init(d, k, 0.02, rng);
        let item_gate = xavier_init(2 * d, d, rng);
        let user_gate = xavier_init(2 * d, d, rng);
        let positions = normal_init(config.max_len, d, 0.02, rng);
        let blocks = (0..config.blocks)
            .map(|_| BlockParams {
                query: xavier_init(d, d, rng),
                key: xavier_init(d, d, rng),
                value: xavier_init(d, d, rng),
                output: xavier_init(d, d, rng),
                ff_in: xavier_init(d, 4 * d, rng),
                ff_out: xavier_init(4 * d, d, rng),
                ln1_scale: DenseTensor::filled(1, d, 1.0),
                ln1_shift: DenseTensor::zeros(1, d),
                ln2_scale: DenseTensor::filled(1, d, 1.0),
                ln2_shift: DenseTensor::zeros(1, d),
            })
            .collect();
        Ok(Self {
            config,
            weights: ParamSet {
                item_embeddings,
                item_prototypes,
                user_prototypes,
                item_gate,
                user_gate,
                positions,
                blocks,
            },
        })
    }

    /// Expected `[rows, cols]` of every tensor in canonical order.
    pub fn expected_shapes(config: &ModelConfig) -> Vec<[usize; 2]> {
        let d = config.dim;
        let mut shapes = vec![
            [config.n_items, d],
            [d, config.n_intents],
            [d, config.n_intents],
            [2 * d, d],
            [2 * d, d],
            [config.max_len, d],
        ];
        for _ in 0..config.blocks {
            shapes.extend([
                [d, d],
                [d, d],
                [d, d],
                [d, d],
                [d, 4 * d],
                [4 * d, d],
                [1, d],
                [1, d],
                [1, d],
                [1, d],
            ]);
        }
        shapes
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.weights.blocks.len() != self.config.blocks {
            return Err(Error::Usage("block count disagrees with config".into()));
        }
        let names = self.weights.names();
        for ((t, shape), name) in self
            .weights
            .iter()
            .into_iter()
            .zip(Self::expected_shapes(&self.config))
            .zip(names)
        {
            if t.shape() != shape {
                return Err(crate::error::dim_err(
                    "model",
                    format!("{name} has shape {:?}, expected {shape:?}", t.shape()),
                ));
            }
            if !t.is_finite() {
                return Err(Error::Usage(format!("{name} contains non-finite values")));
            }
        }
        Ok(())
    }

    /// Records every tensor as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> ParamSet<Var> {
        self.weights.map(|t| tape.leaf(t.clone()))
    }

    pub fn n_parameters(&self) -> usize {
        self.weights.iter().iter().map(|t| t.len()).sum()
    }
}
