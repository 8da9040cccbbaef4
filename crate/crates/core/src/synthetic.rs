//! Synthetic interaction data: a tiny deterministic set for overfitting
//! checks and a latent-intent generator for ablation experiments.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::InteractionLog;
use crate::error::{Error, Result};

/// 50 users over 30 items. User `u` starts at item `u mod 30` and advances
/// by `1 + u mod 3` each step, so every next item is a function of the
/// last two.
pub fn overfit_sequences() -> Vec<Vec<usize>> {
    (0..50)
        .map(|u| {
            let step = 1 + u % 3;
            (0..8).map(|t| (u + t * step) % 30).collect()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct IntentGenConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_intents: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability of staying with the current intent at each step.
    pub stay: f64,
    /// Largest forward move along an intent's item ring.
    pub max_stride: usize,
    /// Probability that an in-intent step lands on a random item of the
    /// intent instead of moving along its ring.
    pub jump: f64,
    /// Probability that a step is a uniformly random item.
    pub noise: f64,
    pub seed: u64,
}

impl Default for IntentGenConfig {
    fn default() -> Self {
        Self {
            n_users: 2000,
            n_items: 500,
            n_intents: 4,
            min_len: 6,
            max_len: 20,
            stay: 0.8,
            max_stride: 3,
            jump: 0.0,
            noise: 0.05,
            seed: 0,
        }
    }
}

/// Sequences driven by latent intents. Items are split into one ring per
/// intent (in shuffled id order). Each user prefers two intents; at each
/// step the user keeps or switches intent and moves a short stride along
/// that intent's ring from where it last left off.
pub fn intent_sequences(cfg: &IntentGenConfig) -> Result<Vec<Vec<usize>>> {
    if cfg.n_intents == 0
        || cfg.n_items < 2 * cfg.n_intents
        || cfg.min_len < 2
        || cfg.min_len > cfg.max_len
    {
        return Err(Error::Usage(
            "invalid synthetic generator configuration".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut ids: Vec<usize> = (0..cfg.n_items).collect();
    ids.shuffle(&mut rng);
    let rings: Vec<Vec<usize>> = (0..cfg.n_intents)
        .map(|k| ids.iter().copied().skip(k).step_by(cfg.n_intents).collect())
        .collect();
    let mut out = Vec::with_capacity(cfg.n_users);
    for _ in 0..cfg.n_users {
        let primary = rng.random_range(0..cfg.n_intents);
        let secondary = (primary + rng.random_range(1..cfg.n_intents.max(2))) % cfg.n_intents;
        let mut cursor: Vec<usize> = rings.iter().map(|r| rng.random_range(0..r.len())).collect();
        let len = rng.random_range(cfg.min_len..=cfg.max_len);
        let mut intent = primary;
        let mut seq = Vec::with_capacity(len);
        while seq.len() < len {
            if !rng.random_bool(cfg.stay) {
                intent = if rng.random_bool(0.7) {
                    primary
                } else {
                    secondary
                };
            }
            let item = if rng.random_bool(cfg.noise) {
                rng.random_range(0..cfg.n_items)
            } else {
                let ring = &rings[intent];
                cursor[intent] = if rng.random_bool(cfg.jump) {
                    rng.random_range(0..ring.len())
                } else {
                    (cursor[intent] + rng.random_range(1..=cfg.max_stride)) % ring.len()
                };
                ring[cursor[intent]]
            };
            if !seq.contains(&item) {
                seq.push(item);
            }
        }
        out.push(seq);
    }
    Ok(out)
}

/// Wraps index sequences as a log with ids `u{n}` / `i{n}` and increasing
/// timestamps.
pub fn sequences_to_log(sequences: &[Vec<usize>]) -> Result<InteractionLog> {
    let users: Vec<String> = (0..sequences.len()).map(|u| format!("u{u}")).collect();
    let max_item = sequences.iter().flatten().copied().max().unwrap_or(0);
    let items: Vec<String> = (0..=max_item).map(|i| format!("i{i}")).collect();
    let records = sequences
        .iter()
        .enumerate()
        .flat_map(|(u, s)| s.iter().enumerate().map(move |(t, &i)| (u, i, t as i64)))
        .map(|(u, i, t)| (users[u].as_str(), items[i].as_str(), t));
    InteractionLog::from_records(records.collect::<Vec<_>>())
}
