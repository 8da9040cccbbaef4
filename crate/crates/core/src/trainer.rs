//! Joint optimization of the recommendation and contrastive objectives:
//! Adam, per-step loss construction for every ablation, and the
//! early-stopped training loop with checkpointing.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{augment_sequence, make_train_batch, AugmentMode, TrainBatch};
use crate::error::{dim_err, Error, Result};
use crate::graph::{perturb_graph_edges, propagate_var, CoGraph, CoGraphConfig};
use crate::model::{
    encode_sequences, forward_view, gather_items, item_intent_vars, perturbation_directions,
    perturbation_noise, pool_vars, seq_intent_vars, Checkpoint, GateMode, ModelConfig, ModelParams,
    ParamSet, Variant,
};
use crate::numerics::{DenseTensor, Tape, Var};
use crate::objectives::{
    multilevel_cl, rec_loss, total_loss, ClTerms, LossConfig, ViewBundle, ViewReps,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AblationFlags {
    pub no_intent: bool,
    pub no_gating: bool,
    pub no_pooling: bool,
    pub graph_aug: bool,
    pub seq_aug: bool,
    pub no_cl: bool,
    pub no_final_cl: bool,
    pub no_intent_cl: bool,
}

impl AblationFlags {
    pub const NAMES: [&'static str; 8] = [
        "no_intent",
        "no_gating",
        "no_pooling",
        "graph_aug",
        "seq_aug",
        "no_cl",
        "no_final_cl",
        "no_intent_cl",
    ];

    fn slot(&mut self, name: &str) -> Option<&mut bool> {
        Some(match name {
            "no_intent" => &mut self.no_intent,
            "no_gating" => &mut self.no_gating,
            "no_pooling" => &mut self.no_pooling,
            "graph_aug" => &mut self.graph_aug,
            "seq_aug" => &mut self.seq_aug,
            "no_cl" => &mut self.no_cl,
            "no_final_cl" => &mut self.no_final_cl,
            "no_intent_cl" => &mut self.no_intent_cl,
            _ => return None,
        })
    }

    pub fn set(&mut self, name: &str, value: bool) -> Result<()> {
        *self
            .slot(name)
            .ok_or_else(|| Error::Usage(format!("unknown ablation flag {name:?}")))? = value;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<bool> {
        let mut copy = *self;
        copy.slot(name).map(|v| *v)
    }

    /// `"full"` or a single flag name.
    pub fn variant(name: &str) -> Result<Self> {
        let mut flags = Self::default();
        if name != "full" {
            flags.set(name, true)?;
        }
        Ok(flags)
    }

    /// `"full"` when nothing is set, otherwise the set flags joined by `+`.
    pub fn name(&self) -> String {
        let set: Vec<&str> = Self::NAMES
            .iter()
            .copied()
            .filter(|n| self.get(n) == Some(true))
            .collect();
        if set.is_empty() {
            "full".into()
        } else {
            set.join("+")
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.graph_aug && self.seq_aug {
            return Err(Error::Usage(
                "graph_aug and seq_aug are mutually exclusive".into(),
            ));
        }
        Ok(())
    }

    pub fn architecture(&self) -> Variant {
        Variant {
            intent: !self.no_intent,
            gate: if self.no_gating {
                GateMode::Direct
            } else {
                GateMode::Learned
            },
            pooling: !self.no_pooling,
        }
    }

    pub fn cl_terms(&self) -> ClTerms {
        if self.no_cl {
            return ClTerms::NONE;
        }
        let fused = !self.no_final_cl;
        let intent = !self.no_intent_cl && !self.no_intent;
        ClTerms {
            seq_fused: fused,
            item_fused: fused,
            seq_intent: intent,
            item_intent: intent,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub dim: usize,
    pub n_intents: usize,
    pub max_len: usize,
    pub blocks: usize,
    pub heads: usize,
    pub causal: bool,
    pub graph: CoGraphConfig,
    /// Embedding perturbation magnitude.
    pub epsilon: f64,
    pub loss: LossConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub patience: usize,
    pub seed: u64,
    pub ablation: AblationFlags,
    pub graph_drop_rate: f64,
    pub seq_aug_strength: f64,
    /// Train on every prefix instead of one instance per sequence.
    pub per_prefix: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            n_intents: 256,
            max_len: 20,
            blocks: 1,
            heads: 4,
            causal: true,
            graph: CoGraphConfig::default(),
            epsilon: 0.1,
            loss: LossConfig::default(),
            batch_size: 256,
            epochs: 200,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            patience: 5,
            seed: 42,
            ablation: AblationFlags::default(),
            graph_drop_rate: 0.1,
            seq_aug_strength: 0.2,
            per_prefix: false,
        }
    }
}

impl TrainConfig {
    /// Every violated constraint, for exhaustive reporting.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut positive = |name: &str, v: usize| {
            if v == 0 {
                out.push(format!("{name} must be >= 1"));
            }
        };
        positive("model.d", self.dim);
        positive("model.k", self.n_intents);
        positive("model.max_len", self.max_len);
        positive("model.heads", self.heads);
        positive("train.batch_size", self.batch_size);
        positive("train.patience", self.patience);
        positive("train.epochs", self.epochs);
        if self.heads > 0 && self.dim % self.heads != 0 {
            out.push(format!(
                "model.d ({}) must be divisible by model.heads ({})",
                self.dim, self.heads
            ));
        }
        if let Err(e) = self.graph.validate() {
            out.push(e.to_string());
        }
        if let Err(e) = self.loss.validate() {
            out.push(e.to_string());
        }
        if let Err(e) = self.ablation.validate() {
            out.push(e.to_string());
        }
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            out.push(format!(
                "perturb.epsilon must be >= 0, got {}",
                self.epsilon
            ));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            out.push(format!(
                "train.lr must be positive, got {}",
                self.learning_rate
            ));
        }
        for (name, b) in [("train.beta1", self.beta1), ("train.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                out.push(format!("{name} must be in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            out.push(format!(
                "train.adam_eps must be positive, got {}",
                self.adam_eps
            ));
        }
        if !(0.0..1.0).contains(&self.graph_drop_rate) {
            out.push(format!(
                "ablation.graph_drop_rate must be in [0, 1), got {}",
                self.graph_drop_rate
            ));
        }
        if !(self.seq_aug_strength > 0.0 && self.seq_aug_strength < 1.0) {
            out.push(format!(
                "ablation.seq_aug_strength must be in (0, 1), got {}",
                self.seq_aug_strength
            ));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Usage(problems.join("; ")))
        }
    }

    pub fn model_config(&self, n_items: usize) -> ModelConfig {
        ModelConfig {
            n_items,
            dim: self.dim,
            n_intents: self.n_intents,
            max_len: self.max_len,
            depth: self.graph.depth,
            blocks: self.blocks,
            heads: self.heads,
            causal: self.causal,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    /// Whether the perturbed views and contrastive loss run at all.
    pub fn contrastive_active(&self) -> bool {
        self.loss.lambda > 0.0 && self.ablation.cl_terms().any()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First and second moments per parameter tensor plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub first: Vec<DenseTensor>,
    pub second: Vec<DenseTensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &[&DenseTensor]) -> Self {
        let zeros: Vec<DenseTensor> = params
            .iter()
            .map(|p| DenseTensor::zeros(p.rows(), p.cols()))
            .collect();
        Self {
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }

    pub fn for_model(params: &ModelParams) -> Self {
        Self::new(&params.weights.iter())
    }
}

/// Bias-corrected Adam update in place.
pub fn adam_step(
    state: &mut OptimizerState,
    params: Vec<&mut DenseTensor>,
    grads: &[DenseTensor],
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(dim_err(
            "adam",
            format!(
                "{} params, {} grads, {} moments",
                params.len(),
                grads.len(),
                state.first.len()
            ),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.first[i].shape() {
            return Err(dim_err(
                "adam",
                format!("tensor {i}: {:?} vs grad {:?}", p.shape(), g.shape()),
            ));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .into_iter()
        .zip(grads)
        .zip(state.first.iter_mut().zip(state.second.iter_mut()))
    {
        let pv = p.values_mut();
        let (mv, vv) = (m.values_mut(), v.values_mut());
        for j in 0..pv.len() {
            let gj = g.values()[j];
            mv[j] = cfg.beta1 * mv[j] + (1.0 - cfg.beta1) * gj;
            vv[j] = cfg.beta2 * vv[j] + (1.0 - cfg.beta2) * gj * gj;
            let mhat = mv[j] / c1;
            let vhat = vv[j] / c2;
            pv[j] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Where the two contrastive views come from.
#[derive(Clone, Debug)]
pub enum ViewSource {
    /// Unit-row noise directions; the step scales them by `ε · sign(R)`.
    Embedding([DenseTensor; 2]),
    /// Edge-dropped graphs propagated from the shared embeddings.
    Graph([CoGraph; 2]),
}

/// Randomness drawn for one step's contrastive views.
#[derive(Clone, Debug)]
pub struct StepViews {
    pub source: ViewSource,
    /// Augmented sequence batches; item views keep embedding noise.
    pub seq_inputs: Option<[TrainBatch; 2]>,
}

/// Draws the views for one step, or `None` when contrastive learning is off.
pub fn sample_views(
    cfg: &TrainConfig,
    batch: &TrainBatch,
    n_items: usize,
    aug_graphs: Option<&[CoGraph; 2]>,
    rng: &mut impl Rng,
) -> Result<Option<StepViews>> {
    if !cfg.contrastive_active() {
        return Ok(None);
    }
    let source = if cfg.ablation.graph_aug {
        let graphs = aug_graphs
            .ok_or_else(|| Error::Usage("graph augmentation needs perturbed graphs".into()))?;
        ViewSource::Graph(graphs.clone())
    } else {
        ViewSource::Embedding([
            perturbation_directions(n_items, cfg.dim, rng),
            perturbation_directions(n_items, cfg.dim, rng),
        ])
    };
    let seq_inputs = if cfg.ablation.seq_aug {
        let mut view = || -> TrainBatch {
            let inputs: Vec<Vec<usize>> = (0..batch.len())
                .map(|b| {
                    let mode = AugmentMode::ALL[rng.random_range(0..AugmentMode::ALL.len())];
                    augment_sequence(batch.input(b), mode, cfg.seq_aug_strength, batch.pad, rng)
                })
                .collect();
            batch.with_inputs(&inputs)
        };
        let first = view();
        let second = view();
        Some([first, second])
    } else {
        None
    };
    Ok(Some(StepViews { source, seq_inputs }))
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub rec: Var,
    pub cl: Var,
    pub total: Var,
}

fn dedup(items: impl IntoIterator<Item = usize>) -> (Vec<usize>, HashMap<usize, usize>) {
    let mut order = Vec::new();
    let mut local = HashMap::new();
    for i in items {
        local.entry(i).or_insert_with(|| {
            order.push(i);
            order.len() - 1
        });
    }
    (order, local)
}

/// Records the full training objective for one batch on `tape`.
pub fn build_loss(
    tape: &mut Tape,
    params: &ParamSet<Var>,
    model: &ModelConfig,
    cfg: &TrainConfig,
    graph: &CoGraph,
    batch: &TrainBatch,
    views: Option<&StepViews>,
) -> Result<LossVars> {
    let variant = cfg.ablation.architecture();
    let structural = propagate_var(tape, graph, params.item_embeddings, model.depth)?;

    let group = 1 + batch.n_negatives;
    let (unique, local) = dedup((0..batch.len()).flat_map(|b| {
        std::iter::once(batch.positives[b]).chain(batch.negatives_of(b).iter().copied())
    }));
    let rows = gather_items(tape, structural, &unique)?;
    let fused_items = if variant.intent {
        item_intent_vars(tape, rows, params, variant.gate, false)?.fused
    } else {
        rows
    };
    let cand_idx: Vec<Option<usize>> = (0..batch.len())
        .flat_map(|b| {
            std::iter::once(batch.positives[b]).chain(batch.negatives_of(b).iter().copied())
        })
        .map(|i| Some(local[&i]))
        .collect();
    debug_assert_eq!(cand_idx.len(), batch.len() * group);
    let candidates = tape.gather_rows(fused_items, &cand_idx)?;

    let hidden = encode_sequences(
        tape,
        structural,
        params,
        model,
        &batch.sequences,
        &batch.valid_lengths,
    )?;
    let pooled = pool_vars(
        tape,
        hidden,
        &batch.valid_lengths,
        model.max_len,
        variant.pooling,
    )?;
    let user = if variant.intent {
        seq_intent_vars(tape, pooled, params, variant.gate, false)?.2
    } else {
        pooled
    };
    let rec = rec_loss(tape, user, candidates, &vec![0; batch.len()], cfg.loss.tau1)?;

    let cl = match views {
        Some(v) if cfg.contrastive_active() => {
            let (positives, _) = dedup(batch.positives.iter().copied());
            let mut reps = Vec::with_capacity(2);
            for k in 0..2 {
                let table = match &v.source {
                    ViewSource::Embedding(dirs) => {
                        let noise =
                            perturbation_noise(tape.value(structural)?, cfg.epsilon, &dirs[k])?;
                        let noise = tape.leaf(noise);
                        tape.add(structural, noise)?
                    }
                    ViewSource::Graph(graphs) => {
                        propagate_var(tape, &graphs[k], params.item_embeddings, model.depth)?
                    }
                };
                let (seq_table, seq_batch) = match &v.seq_inputs {
                    Some(batches) => (structural, &batches[k]),
                    None => (table, batch),
                };
                let view = forward_view(
                    tape,
                    table,
                    seq_table,
                    params,
                    model,
                    variant,
                    &seq_batch.sequences,
                    &seq_batch.valid_lengths,
                    &positives,
                )?;
                reps.push(ViewReps {
                    item_fused: view.items.fused,
                    item_intent: view.items.intent,
                    seq_fused: view.seq.fused,
                    seq_intent: view.seq.intent,
                });
            }
            let bundle = ViewBundle {
                first: reps[0],
                second: reps[1],
            };
            multilevel_cl(
                tape,
                &bundle,
                cfg.ablation.cl_terms(),
                cfg.loss.tau2,
                cfg.loss.symmetric,
            )?
        }
        _ => tape.leaf(DenseTensor::scalar(0.0)),
    };
    let total = total_loss(tape, rec, cl, cfg.loss.lambda)?;
    Ok(LossVars { rec, cl, total })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub rec: f64,
    pub cl: f64,
    pub total: f64,
}

/// Position of a step within training, used to seed its randomness and to
/// label failures.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepId {
    pub epoch: usize,
    pub step: u64,
    pub seed: u64,
}

/// Loss values and parameter gradients for one batch.
pub fn loss_and_gradients(
    model: &ModelParams,
    cfg: &TrainConfig,
    graph: &CoGraph,
    batch: &TrainBatch,
    views: Option<&StepViews>,
) -> Result<(StepLosses, Vec<DenseTensor>)> {
    let mut tape = Tape::new();
    let params = model.bind(&mut tape);
    let vars = build_loss(&mut tape, &params, &model.config, cfg, graph, batch, views)?;
    let losses = StepLosses {
        rec: tape.value(vars.rec)?.item()?,
        cl: tape.value(vars.cl)?.item()?,
        total: tape.value(vars.total)?.item()?,
    };
    if !losses.total.is_finite() {
        return Ok((losses, Vec::new()));
    }
    let grads = tape.backward(vars.total)?;
    let grads = params
        .iter()
        .into_iter()
        .map(|&v| grads.get(v))
        .collect::<Result<Vec<_>>>()?;
    Ok((losses, grads))
}

/// One optimization step: views, joint loss, backward, Adam.
pub fn train_step(
    model: &mut ModelParams,
    optimizer: &mut OptimizerState,
    batch: &TrainBatch,
    graph: &CoGraph,
    aug_graphs: Option<&[CoGraph; 2]>,
    cfg: &TrainConfig,
    id: StepId,
) -> Result<StepLosses> {
    let mut rng = ChaCha8Rng::seed_from_u64(id.seed);
    let views = sample_views(cfg, batch, model.config.n_items, aug_graphs, &mut rng)?;
    let (losses, grads) = loss_and_gradients(model, cfg, graph, batch, views.as_ref())?;
    if !losses.total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteLoss {
            epoch: id.epoch,
            step: id.step,
            batch_seed: id.seed,
            detail: format!("rec={} cl={} total={}", losses.rec, losses.cl, losses.total),
        });
    }
    adam_step(optimizer, model.weights.iter_mut(), &grads, &cfg.adam())?;
    Ok(losses)
}

/// Per-epoch RNG: the run seed on a stream selected by the epoch.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Runs `steps` steps of epoch 1 from `model`, as the determinism harness
/// and the smoke benchmarks do.
pub fn run_steps(
    model: &mut ModelParams,
    optimizer: &mut OptimizerState,
    instances: &[Vec<usize>],
    graph: &CoGraph,
    cfg: &TrainConfig,
    steps: usize,
) -> Result<Vec<StepLosses>> {
    let mut epoch = EpochRunner::new(instances, graph, cfg, 1)?;
    let mut out = Vec::new();
    let mut global = 0;
    while out.len() < steps {
        match epoch.next_step(model, optimizer, &mut global)? {
            Some(l) => out.push(l),
            None => epoch = EpochRunner::new(instances, graph, cfg, 1)?,
        }
    }
    Ok(out)
}

struct EpochRunner<'a> {
    instances: &'a [Vec<usize>],
    graph: &'a CoGraph,
    cfg: &'a TrainConfig,
    epoch: usize,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
    aug_graphs: Option<[CoGraph; 2]>,
}

impl<'a> EpochRunner<'a> {
    fn new(
        instances: &'a [Vec<usize>],
        graph: &'a CoGraph,
        cfg: &'a TrainConfig,
        epoch: usize,
    ) -> Result<Self> {
        let mut rng = epoch_rng(cfg.seed, epoch);
        let aug_graphs = if cfg.ablation.graph_aug && cfg.contrastive_active() {
            let a = perturb_graph_edges(graph, cfg.graph_drop_rate, &mut rng)?;
            let b = perturb_graph_edges(graph, cfg.graph_drop_rate, &mut rng)?;
            Some([a, b])
        } else {
            None
        };
        let mut order: Vec<usize> = (0..instances.len()).collect();
        order.shuffle(&mut rng);
        Ok(Self {
            instances,
            graph,
            cfg,
            epoch,
            order,
            cursor: 0,
            rng,
            aug_graphs,
        })
    }

    fn next_step(
        &mut self,
        model: &mut ModelParams,
        optimizer: &mut OptimizerState,
        global: &mut u64,
    ) -> Result<Option<StepLosses>> {
        if self.cursor >= self.order.len() {
            return Ok(None);
        }
        let end = (self.cursor + self.cfg.batch_size).min(self.order.len());
        let chosen: Vec<&[usize]> = self.order[self.cursor..end]
            .iter()
            .map(|&i| self.instances[i].as_slice())
            .collect();
        self.cursor = end;
        let batch = make_train_batch(
            &chosen,
            self.cfg.max_len,
            self.cfg.loss.n_negatives,
            model.config.n_items,
            &mut self.rng,
        )?;
        *global += 1;
        let id = StepId {
            epoch: self.epoch,
            step: *global,
            seed: self.rng.random(),
        };
        train_step(
            model,
            optimizer,
            &batch,
            self.graph,
            self.aug_graphs.as_ref(),
            self.cfg,
            id,
        )
        .map(Some)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub rec: f64,
    pub cl: f64,
    pub val_recall: f64,
    pub elapsed_s: f64,
}

pub const TRAIN_LOG_HEADER: &str = "epoch\tstep\tL_rec\tL_CL\tval_recall@20\telapsed_s";

impl EpochRecord {
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.3}",
            self.epoch, self.step, self.rec, self.cl, self.val_recall, self.elapsed_s
        )
    }
}

#[derive(Clone, Debug)]
pub struct FitReport {
    pub best: ModelParams,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub last: ModelParams,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct FitOptions<'a> {
    /// Writes `best.ckpt`, `last.ckpt` and `train.log` here when set.
    pub out_dir: Option<&'a Path>,
    /// Continue from `out_dir/last.ckpt`.
    pub resume: bool,
}

const META: &str = "meta.progress";

fn training_checkpoint(
    model: &ModelParams,
    opt: &OptimizerState,
    progress: [f64; 5],
) -> Checkpoint {
    let mut ck = Checkpoint::from_params(model);
    let names = model.weights.names();
    for (name, m) in names.iter().zip(&opt.first) {
        ck.push(format!("adam.m.{name}"), m.clone());
    }
    for (name, v) in names.iter().zip(&opt.second) {
        ck.push(format!("adam.v.{name}"), v.clone());
    }
    let mut meta = progress.to_vec();
    meta.push(opt.step as f64);
    ck.push(META, DenseTensor::row_vector(meta));
    ck
}

struct Progress {
    epoch: usize,
    step: u64,
    best_metric: f64,
    best_epoch: usize,
    bad_epochs: usize,
}

fn restore(dir: &Path) -> Result<(ModelParams, ModelParams, OptimizerState, Progress)> {
    let last = Checkpoint::load(dir.join("last.ckpt"))?;
    let best = Checkpoint::load(dir.join("best.ckpt"))?.to_params()?;
    let model = last.to_params()?;
    let names = model.weights.names();
    let fetch = |prefix: &str| -> Result<Vec<DenseTensor>> {
        names
            .iter()
            .map(|n| {
                last.get(&format!("{prefix}{n}")).cloned().ok_or_else(|| {
                    Error::Format(format!("last.ckpt lacks optimizer tensor {prefix}{n}"))
                })
            })
            .collect()
    };
    let meta = last
        .get(META)
        .ok_or_else(|| Error::Format("last.ckpt lacks training progress".into()))?
        .values()
        .to_vec();
    if meta.len() != 6 {
        return Err(Error::Format("malformed training progress".into()));
    }
    let opt = OptimizerState {
        first: fetch("adam.m.")?,
        second: fetch("adam.v.")?,
        step: meta[5] as u64,
    };
    let progress = Progress {
        epoch: meta[0] as usize,
        step: meta[1] as u64,
        best_metric: meta[2],
        best_epoch: meta[3] as usize,
        bad_epochs: meta[4] as usize,
    };
    Ok((model, best, opt, progress))
}

/// Epochs of shuffled mini-batches with validation after each; keeps the
/// best parameters and stops after `patience` epochs without improvement.
pub fn fit(
    init: ModelParams,
    instances: &[Vec<usize>],
    graph: &CoGraph,
    cfg: &TrainConfig,
    validate: &mut dyn FnMut(&ModelParams) -> Result<f64>,
    options: FitOptions<'_>,
) -> Result<FitReport> {
    cfg.validate()?;
    if instances.is_empty() {
        return Err(Error::EmptySplit);
    }
    let started = Instant::now();
    let (mut model, mut best, mut opt, mut progress) = match (options.resume, options.out_dir) {
        (true, Some(dir)) => restore(dir)?,
        (true, None) => return Err(Error::Usage("resume needs an output directory".into())),
        (false, _) => {
            let opt = OptimizerState::for_model(&init);
            let progress = Progress {
                epoch: 0,
                step: 0,
                best_metric: f64::NEG_INFINITY,
                best_epoch: 0,
                bad_epochs: 0,
            };
            (init.clone(), init, opt, progress)
        }
    };
    let mut log = match options.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let path = dir.join("train.log");
            let fresh = !options.resume || !path.exists();
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .truncate(false)
                .open(&path)?;
            if fresh {
                f.set_len(0)?;
                writeln!(f, "{TRAIN_LOG_HEADER}")?;
            }
            Some(f)
        }
        None => None,
    };
    let mut history = Vec::new();
    let mut stopped_early = progress.bad_epochs >= cfg.patience;
    while !stopped_early && progress.epoch < cfg.epochs {
        let epoch = progress.epoch + 1;
        let mut runner = EpochRunner::new(instances, graph, cfg, epoch)?;
        let (mut rec, mut cl, mut n) = (0.0, 0.0, 0usize);
        while let Some(l) = runner.next_step(&mut model, &mut opt, &mut progress.step)? {
            rec += l.rec;
            cl += l.cl;
            n += 1;
        }
        let metric = validate(&model)?;
        if metric > progress.best_metric {
            progress.best_metric = metric;
            progress.best_epoch = epoch;
            progress.bad_epochs = 0;
            best = model.clone();
            if let Some(dir) = options.out_dir {
                Checkpoint::from_params(&best).save(dir.join("best.ckpt"))?;
            }
        } else {
            progress.bad_epochs += 1;
        }
        progress.epoch = epoch;
        let record = EpochRecord {
            epoch,
            step: progress.step,
            rec: rec / n.max(1) as f64,
            cl: cl / n.max(1) as f64,
            val_recall: metric,
            elapsed_s: started.elapsed().as_secs_f64(),
        };
        if let Some(f) = log.as_mut() {
            writeln!(f, "{}", record.to_line())?;
        }
        history.push(record);
        if let Some(dir) = options.out_dir {
            let meta = [
                progress.epoch as f64,
                progress.step as f64,
                progress.best_metric,
                progress.best_epoch as f64,
                progress.bad_epochs as f64,
            ];
            training_checkpoint(&model, &opt, meta).save(dir.join("last.ckpt"))?;
        }
        stopped_early = progress.bad_epochs >= cfg.patience;
    }
    Ok(FitReport {
        best,
        best_epoch: progress.best_epoch,
        best_metric: progress.best_metric,
        last: model,
        history,
        stopped_early,
    })
}

/// Renders epoch records as a training log (header included).
pub fn format_log(history: &[EpochRecord]) -> String {
    let mut s = String::new();
    writeln!(s, "{TRAIN_LOG_HEADER}").unwrap();
    for r in history {
        writeln!(s, "{}", r.to_line()).unwrap();
    }
    s
}
