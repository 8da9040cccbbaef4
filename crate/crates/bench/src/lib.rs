//! Shared fixtures for the benchmarks.

use bipcl::data::{
    filter_min_interactions, make_eval_instances, split_users, training_instances, EvalInstance,
};
use bipcl::graph::{build_cograph, CoGraph};
use bipcl::model::ModelParams;
use bipcl::synthetic::{intent_sequences, sequences_to_log, IntentGenConfig};
use bipcl::trainer::TrainConfig;
use bipcl::DenseTensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(rows: usize, cols: usize, seed: u64) -> DenseTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DenseTensor::new(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
    .unwrap()
}

/// A small synthetic workload: graph, training instances, test instances
/// and a freshly initialized model.
pub struct Workload {
    pub cfg: TrainConfig,
    pub graph: CoGraph,
    pub train: Vec<Vec<usize>>,
    pub test: Vec<EvalInstance>,
    pub model: ModelParams,
}

pub fn workload(n_users: usize, n_items: usize, dim: usize) -> Workload {
    let gen = IntentGenConfig {
        n_users,
        n_items,
        ..Default::default()
    };
    let log = filter_min_interactions(
        &sequences_to_log(&intent_sequences(&gen).unwrap()).unwrap(),
        5,
    )
    .unwrap();
    let split = split_users(log.n_users(), 0).unwrap();
    let seqs: Vec<Vec<usize>> = split.train.iter().map(|&u| log.item_sequence(u)).collect();
    let cfg = TrainConfig {
        dim,
        n_intents: 16,
        max_len: 10,
        heads: 2,
        batch_size: 128,
        loss: bipcl::objectives::LossConfig {
            lambda: 0.5,
            ..Default::default()
        },
        ..Default::default()
    };
    let graph = build_cograph(&seqs, log.n_items(), &cfg.graph).unwrap();
    let model = ModelParams::init(
        cfg.model_config(log.n_items()),
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();
    Workload {
        train: training_instances(&seqs, false),
        test: make_eval_instances(&log, &split.test, 0.8),
        cfg,
        graph,
        model,
    }
}
