//! Interaction-log ingestion, filtering, user-level splitting, and the
//! instance/batch construction used for training and evaluation.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Read, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Column layout of a delimited interaction file.
#[derive(Clone, Debug, PartialEq)]
pub struct LogFormat {
    pub delimiter: char,
    pub user_col: usize,
    pub item_col: usize,
    pub time_col: usize,
    pub skip_header: bool,
}

impl Default for LogFormat {
    fn default() -> Self {
        Self {
            delimiter: '\t',
            user_col: 0,
            item_col: 1,
            time_col: 2,
            skip_header: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Interaction {
    pub item: usize,
    pub timestamp: i64,
}

/// Per-user, time-ordered interactions with dense user and item indices.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionLog {
    user_ids: Vec<String>,
    item_ids: Vec<String>,
    sequences: Vec<Vec<Interaction>>,
}

impl InteractionLog {
    /// Builds a log from raw `(user, item, timestamp)` records. Each user's
    /// records are stably sorted by timestamp and exact duplicates dropped.
    pub fn from_records<'a>(
        records: impl IntoIterator<Item = (&'a str, &'a str, i64)>,
    ) -> Result<Self> {
        let mut user_index: HashMap<String, usize> = HashMap::new();
        let mut item_index: HashMap<String, usize> = HashMap::new();
        let mut user_ids = Vec::new();
        let mut item_ids = Vec::new();
        let mut sequences: Vec<Vec<Interaction>> = Vec::new();
        for (user, item, timestamp) in records {
            let u = *user_index.entry(user.to_string()).or_insert_with(|| {
                user_ids.push(user.to_string());
                sequences.push(Vec::new());
                user_ids.len() - 1
            });
            let i = *item_index.entry(item.to_string()).or_insert_with(|| {
                item_ids.push(item.to_string());
                item_ids.len() - 1
            });
            sequences[u].push(Interaction { item: i, timestamp });
        }
        if user_ids.is_empty() {
            return Err(Error::EmptyLog);
        }
        for seq in &mut sequences {
            seq.sort_by_key(|x| x.timestamp);
            let mut seen = HashSet::new();
            seq.retain(|x| seen.insert((x.item, x.timestamp)));
        }
        Ok(Self {
            user_ids,
            item_ids,
            sequences,
        })
    }

    pub fn n_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn n_actions(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    /// Fraction of the user × item matrix without an interaction.
    pub fn sparsity(&self) -> f64 {
        1.0 - self.n_actions() as f64 / (self.n_users() as f64 * self.n_items() as f64)
    }

    pub fn user_ids(&self) -> &[String] {
        &self.user_ids
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    pub fn interactions(&self, user: usize) -> &[Interaction] {
        &self.sequences[user]
    }

    pub fn item_sequence(&self, user: usize) -> Vec<usize> {
        self.sequences[user].iter().map(|x| x.item).collect()
    }

    pub fn item_sequences(&self) -> Vec<Vec<usize>> {
        (0..self.n_users()).map(|u| self.item_sequence(u)).collect()
    }

    pub fn user_index(&self, id: &str) -> Option<usize> {
        self.user_ids.iter().position(|u| u == id)
    }
}

/// Parses a delimited interaction file. Blank lines are ignored.
pub fn load_interactions(source: impl Read, format: &LogFormat) -> Result<InteractionLog> {
    let reader = std::io::BufReader::new(source);
    let mut rows: Vec<(String, String, i64)> = Vec::new();
    let needed = format.user_col.max(format.item_col).max(format.time_col);
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = n + 1;
        if (format.skip_header && n == 0) || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(format.delimiter).collect();
        if fields.len() <= needed {
            return Err(Error::Parse {
                line: lineno,
                message: format!(
                    "expected at least {} fields, found {}",
                    needed + 1,
                    fields.len()
                ),
            });
        }
        let timestamp =
            fields[format.time_col]
                .trim()
                .parse::<i64>()
                .map_err(|e| Error::Parse {
                    line: lineno,
                    message: format!("bad timestamp {:?}: {e}", fields[format.time_col]),
                })?;
        rows.push((
            fields[format.user_col].trim().to_string(),
            fields[format.item_col].trim().to_string(),
            timestamp,
        ));
    }
    InteractionLog::from_records(rows.iter().map(|(u, i, t)| (u.as_str(), i.as_str(), *t)))
}

/// Writes `user, item, timestamp` rows in log order using `format`'s
/// delimiter (columns in the default order).
pub fn write_interactions(
    log: &InteractionLog,
    mut out: impl Write,
    format: &LogFormat,
) -> Result<()> {
    let d = format.delimiter;
    for (u, seq) in log.sequences.iter().enumerate() {
        for x in seq {
            writeln!(
                out,
                "{}{d}{}{d}{}",
                log.user_ids[u], log.item_ids[x.item], x.timestamp
            )?;
        }
    }
    Ok(())
}

/// Repeatedly drops users and items with fewer than `k` interactions until
/// no violator remains, then re-densifies indices preserving order.
pub fn filter_min_interactions(log: &InteractionLog, k: usize) -> Result<InteractionLog> {
    if k == 0 {
        return Err(Error::Usage(
            "minimum interaction count must be at least 1".into(),
        ));
    }
    let mut sequences = log.sequences.clone();
    loop {
        let mut item_counts = vec![0usize; log.n_items()];
        for seq in &sequences {
            for x in seq {
                item_counts[x.item] += 1;
            }
        }
        let mut changed = false;
        for seq in &mut sequences {
            let before = seq.len();
            seq.retain(|x| item_counts[x.item] >= k);
            changed |= seq.len() != before;
            if seq.len() < k && !seq.is_empty() {
                seq.clear();
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    let mut present = vec![false; log.n_items()];
    sequences
        .iter()
        .flatten()
        .for_each(|x| present[x.item] = true);
    let mut item_map = vec![None; log.n_items()];
    let mut item_ids = Vec::new();
    for (old, id) in log.item_ids.iter().enumerate() {
        if present[old] {
            item_map[old] = Some(item_ids.len());
            item_ids.push(id.clone());
        }
    }
    let mut user_ids = Vec::new();
    let mut kept = Vec::new();
    for (u, seq) in sequences.into_iter().enumerate() {
        if seq.is_empty() {
            continue;
        }
        user_ids.push(log.user_ids[u].clone());
        kept.push(
            seq.into_iter()
                .map(|x| Interaction {
                    item: item_map[x.item].expect("kept item"),
                    timestamp: x.timestamp,
                })
                .collect(),
        );
    }
    if user_ids.is_empty() {
        return Err(Error::EmptyLog);
    }
    Ok(InteractionLog {
        user_ids,
        item_ids,
        sequences: kept,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded 8:1:1 user-level split. Validation and test sizes are
/// `floor(n / 10)`; the remainder goes to training.
pub fn split_users(n_users: usize, seed: u64) -> Result<UserSplit> {
    if n_users < 10 {
        return Err(Error::Usage(format!(
            "need at least 10 users to split, got {n_users}"
        )));
    }
    let mut order: Vec<usize> = (0..n_users).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let held = n_users / 10;
    let test = order.split_off(n_users - held);
    let val = order.split_off(n_users - 2 * held);
    Ok(UserSplit {
        train: order,
        val,
        test,
    })
}

const MANIFEST_MAGIC: &[u8; 8] = b"BIPCLSPL";

/// Split membership by external user ID, plus the seed that produced it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitManifest {
    pub seed: u64,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitManifest {
    pub fn from_split(log: &InteractionLog, split: &UserSplit, seed: u64) -> Self {
        let ids = |v: &[usize]| v.iter().map(|&u| log.user_ids[u].clone()).collect();
        Self {
            seed,
            train: ids(&split.train),
            val: ids(&split.val),
            test: ids(&split.test),
        }
    }

    /// Resolves IDs back to dense indices of `log`.
    pub fn resolve(&self, log: &InteractionLog) -> Result<UserSplit> {
        let index: HashMap<&str, usize> = log
            .user_ids
            .iter()
            .enumerate()
            .map(|(i, u)| (u.as_str(), i))
            .collect();
        let map = |ids: &[String]| -> Result<Vec<usize>> {
            ids.iter()
                .map(|id| {
                    index.get(id.as_str()).copied().ok_or_else(|| {
                        Error::Format(format!("manifest user {id:?} not present in log"))
                    })
                })
                .collect()
        };
        Ok(UserSplit {
            train: map(&self.train)?,
            val: map(&self.val)?,
            test: map(&self.test)?,
        })
    }

    pub fn write(&self, mut out: impl Write) -> Result<()> {
        out.write_all(MANIFEST_MAGIC)?;
        out.write_all(&1u32.to_le_bytes())?;
        out.write_all(&self.seed.to_le_bytes())?;
        for part in [&self.train, &self.val, &self.test] {
            out.write_all(&(part.len() as u64).to_le_bytes())?;
            for id in part {
                out.write_all(&(id.len() as u32).to_le_bytes())?;
                out.write_all(id.as_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read(mut input: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != MANIFEST_MAGIC {
            return Err(Error::Format("not a split manifest".into()));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        input.read_exact(&mut b4)?;
        if u32::from_le_bytes(b4) != 1 {
            return Err(Error::Format("unsupported manifest version".into()));
        }
        input.read_exact(&mut b8)?;
        let seed = u64::from_le_bytes(b8);
        let mut parts = Vec::with_capacity(3);
        for _ in 0..3 {
            input.read_exact(&mut b8)?;
            let n = u64::from_le_bytes(b8) as usize;
            let mut ids = Vec::with_capacity(n.min(1 << 20));
            for _ in 0..n {
                input.read_exact(&mut b4)?;
                let mut buf = vec![0u8; u32::from_le_bytes(b4) as usize];
                input.read_exact(&mut buf)?;
                ids.push(String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))?);
            }
            parts.push(ids);
        }
        let test = parts.pop().unwrap();
        let val = parts.pop().unwrap();
        let train = parts.pop().unwrap();
        Ok(Self {
            seed,
            train,
            val,
            test,
        })
    }
}

/// Held-out user: leading fraction as input, the rest as targets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalInstance {
    pub user: usize,
    pub input_items: Vec<usize>,
    pub targets: Vec<usize>,
}

/// Split point `max(1, floor(fraction · len))`, capped at `len − 1`.
/// Returns `None` for sequences shorter than 2.
pub fn make_eval_instance(
    user: usize,
    sequence: &[usize],
    input_fraction: f64,
) -> Option<EvalInstance> {
    let len = sequence.len();
    if len < 2 {
        return None;
    }
    let split = ((len as f64 * input_fraction + 1e-9).floor() as usize).clamp(1, len - 1);
    Some(EvalInstance {
        user,
        input_items: sequence[..split].to_vec(),
        targets: sequence[split..].to_vec(),
    })
}

pub fn make_eval_instances(
    log: &InteractionLog,
    users: &[usize],
    input_fraction: f64,
) -> Vec<EvalInstance> {
    users
        .iter()
        .filter_map(|&u| make_eval_instance(u, &log.item_sequence(u), input_fraction))
        .collect()
}

/// Training instances: each is a sequence whose last element is the
/// positive. By default one per user (the full sequence); with
/// `per_prefix`, every prefix of length ≥ 2.
pub fn training_instances(sequences: &[Vec<usize>], per_prefix: bool) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for seq in sequences.iter().filter(|s| s.len() >= 2) {
        if per_prefix {
            for end in 2..=seq.len() {
                out.push(seq[..end].to_vec());
            }
        } else {
            out.push(seq.clone());
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainBatch {
    pub max_len: usize,
    pub pad: usize,
    /// `batch × max_len`, row-major, left-padded with `pad`.
    pub sequences: Vec<usize>,
    pub valid_lengths: Vec<usize>,
    pub positives: Vec<usize>,
    /// `batch × n_negatives`, row-major.
    pub negatives: Vec<usize>,
    pub n_negatives: usize,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.positives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positives.is_empty()
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.sequences[b * self.max_len..(b + 1) * self.max_len]
    }

    /// The valid (unpadded) suffix of row `b`.
    pub fn input(&self, b: usize) -> &[usize] {
        &self.row(b)[self.max_len - self.valid_lengths[b]..]
    }

    pub fn negatives_of(&self, b: usize) -> &[usize] {
        &self.negatives[b * self.n_negatives..(b + 1) * self.n_negatives]
    }

    /// Same positives and negatives, new inputs (e.g. augmented views).
    pub fn with_inputs(&self, inputs: &[Vec<usize>]) -> Self {
        let (sequences, valid_lengths) = pad_inputs(inputs, self.max_len, self.pad);
        Self {
            sequences,
            valid_lengths,
            ..self.clone()
        }
    }
}

/// Keeps the last `max_len` items of each input and left-pads.
pub fn pad_inputs(inputs: &[Vec<usize>], max_len: usize, pad: usize) -> (Vec<usize>, Vec<usize>) {
    let mut sequences = Vec::with_capacity(inputs.len() * max_len);
    let mut valid = Vec::with_capacity(inputs.len());
    for input in inputs {
        let tail = &input[input.len().saturating_sub(max_len)..];
        sequences.extend(std::iter::repeat_n(pad, max_len - tail.len()));
        sequences.extend_from_slice(tail);
        valid.push(tail.len());
    }
    (sequences, valid)
}

/// Uniform negative in `[0, n_items)`, resampled while equal to `positive`.
pub fn sample_negative(rng: &mut impl Rng, n_items: usize, positive: usize) -> usize {
    loop {
        let c = rng.random_range(0..n_items);
        if c != positive {
            return c;
        }
    }
}

/// Builds a batch from instances whose last element is the positive. The
/// padding index is `n_items`.
pub fn make_train_batch(
    instances: &[&[usize]],
    max_len: usize,
    n_negatives: usize,
    n_items: usize,
    rng: &mut impl Rng,
) -> Result<TrainBatch> {
    if n_items < 2 {
        return Err(Error::Usage(
            "negative sampling needs at least two items".into(),
        ));
    }
    let mut inputs = Vec::with_capacity(instances.len());
    let mut positives = Vec::with_capacity(instances.len());
    let mut negatives = Vec::with_capacity(instances.len() * n_negatives);
    for inst in instances {
        if inst.len() < 2 {
            return Err(Error::Usage(
                "training instance needs at least two items".into(),
            ));
        }
        let (&positive, input) = inst.split_last().unwrap();
        inputs.push(input.to_vec());
        positives.push(positive);
        for _ in 0..n_negatives {
            negatives.push(sample_negative(rng, n_items, positive));
        }
    }
    let (sequences, valid_lengths) = pad_inputs(&inputs, max_len, n_items);
    Ok(TrainBatch {
        max_len,
        pad: n_items,
        sequences,
        valid_lengths,
        positives,
        negatives,
        n_negatives,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugmentMode {
    Mask,
    Crop,
    Reorder,
}

impl AugmentMode {
    pub const ALL: [AugmentMode; 3] = [AugmentMode::Mask, AugmentMode::Crop, AugmentMode::Reorder];
}

/// Sequence-level augmentation. Masking replaces positions with `pad` but
/// always leaves at least one real item when `len > 1`.
pub fn augment_sequence(
    seq: &[usize],
    mode: AugmentMode,
    strength: f64,
    pad: usize,
    rng: &mut impl Rng,
) -> Vec<usize> {
    let len = seq.len();
    if len == 0 {
        return Vec::new();
    }
    match mode {
        AugmentMode::Mask => {
            let count = ((strength * len as f64).ceil() as usize).min(len - 1);
            let mut out = seq.to_vec();
            let positions = rand::seq::index::sample(rng, len, count);
            for p in positions {
                out[p] = pad;
            }
            out
        }
        AugmentMode::Crop => {
            let keep = (((1.0 - strength) * len as f64).ceil() as usize).clamp(1, len);
            let start = rng.random_range(0..=len - keep);
            seq[start..start + keep].to_vec()
        }
        AugmentMode::Reorder => {
            let window = ((strength * len as f64).ceil() as usize).clamp(1, len);
            let start = rng.random_range(0..=len - window);
            let mut out = seq.to_vec();
            out[start..start + window].shuffle(rng);
            out
        }
    }
}
