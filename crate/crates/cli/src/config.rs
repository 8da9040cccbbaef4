//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use bipcl::data::LogFormat;
use bipcl::graph::CoGraphConfig;
use bipcl::objectives::LossConfig;
use bipcl::trainer::{AblationFlags, TrainConfig};
use sha2::{Digest, Sha256};

/// Every accepted key, its default (empty means required), and a short
/// description.
pub const KEYS: &[(&str, &str, &str)] = &[
    (
        "data.input",
        "",
        "interaction file (user, item, timestamp per line)",
    ),
    (
        "data.delimiter",
        "tab",
        "field delimiter: tab, comma, space, or a single character",
    ),
    ("data.user_col", "0", "zero-based user column"),
    ("data.item_col", "1", "zero-based item column"),
    ("data.time_col", "2", "zero-based timestamp column"),
    ("data.skip_header", "false", "skip the first line"),
    (
        "data.min_interactions",
        "5",
        "minimum interactions per user and item",
    ),
    (
        "data.input_fraction",
        "0.8",
        "share of each evaluation sequence used as input",
    ),
    ("output.dir", "runs", "root directory for run artifacts"),
    (
        "seed",
        "42",
        "seed for splitting, initialization and training",
    ),
    ("model.d", "64", "embedding dimension"),
    ("model.k", "256", "intent prototypes per side"),
    ("model.max_len", "20", "maximum input sequence length"),
    ("model.blocks", "1", "transformer blocks"),
    ("model.heads", "4", "attention heads"),
    (
        "model.bidirectional",
        "false",
        "bidirectional instead of causal attention",
    ),
    ("graph.delta", "5", "co-occurrence distance threshold"),
    ("graph.depth", "2", "propagation steps"),
    ("graph.symmetric", "true", "count pairs in both directions"),
    ("perturb.epsilon", "0.1", "embedding perturbation magnitude"),
    ("loss.tau1", "1.0", "recommendation softmax temperature"),
    ("loss.tau2", "0.2", "contrastive temperature"),
    ("loss.lambda", "50", "contrastive loss weight"),
    ("loss.n_negatives", "10", "sampled negatives per instance"),
    ("loss.symmetric", "false", "average both InfoNCE directions"),
    ("train.batch_size", "256", "instances per batch"),
    ("train.epochs", "200", "maximum epochs"),
    ("train.lr", "0.001", "Adam learning rate"),
    ("train.beta1", "0.9", "Adam first-moment decay"),
    ("train.beta2", "0.999", "Adam second-moment decay"),
    ("train.adam_eps", "1e-8", "Adam epsilon"),
    (
        "train.patience",
        "5",
        "epochs without validation improvement before stopping",
    ),
    (
        "train.per_prefix",
        "false",
        "train on every prefix of each sequence",
    ),
    ("ablation.no_intent", "false", "drop both intent modules"),
    (
        "ablation.no_gating",
        "false",
        "add intent directly instead of gating",
    ),
    (
        "ablation.no_pooling",
        "false",
        "use the last hidden state only",
    ),
    (
        "ablation.graph_aug",
        "false",
        "contrastive views from edge-dropped graphs",
    ),
    (
        "ablation.seq_aug",
        "false",
        "contrastive user views from sequence augmentation",
    ),
    ("ablation.no_cl", "false", "disable contrastive learning"),
    (
        "ablation.no_final_cl",
        "false",
        "drop contrastive terms on fused representations",
    ),
    (
        "ablation.no_intent_cl",
        "false",
        "drop contrastive terms on intent representations",
    ),
    (
        "ablation.graph_drop_rate",
        "0.1",
        "edge drop rate for graph augmentation",
    ),
    (
        "ablation.seq_aug_strength",
        "0.2",
        "strength of sequence augmentation",
    ),
    ("eval.cutoffs", "20,50", "ranking cutoffs"),
    (
        "eval.bandwidth",
        "0.2",
        "angular kernel bandwidth in radians",
    ),
];

/// Keys that determine the prepared data (filtered log and split).
const DATA_KEYS: &[&str] = &[
    "data.input",
    "data.delimiter",
    "data.user_col",
    "data.item_col",
    "data.time_col",
    "data.skip_header",
    "data.min_interactions",
    "seed",
];

pub fn is_key(key: &str) -> bool {
    KEYS.iter().any(|(k, _, _)| *k == key)
}

/// Help text listing every key with its default.
pub fn keys_help() -> String {
    let mut s = String::from(
        "Configuration keys (file `key = value`, or `--key value` on the command line):\n",
    );
    for (k, d, h) in KEYS {
        let d = if d.is_empty() { "(required)" } else { d };
        writeln!(s, "  {k:<28} {d:<10} {h}").unwrap();
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS
                .iter()
                .map(|(k, d, _)| (k.to_string(), d.to_string()))
                .collect(),
        }
    }
}

impl RunConfig {
    /// Parses `key = value` lines; `#` starts a comment. Unknown keys are
    /// rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                usage_err(format!("config line {}: expected `key = value`", i + 1))
            })?;
            cfg.set(k.trim(), v.trim())
                .with_context(|| format!("config line {}", i + 1))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !is_key(key) {
            crate::usage!("unknown config key {key:?}");
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("known key")
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str, problems: &mut Vec<String>) -> Option<T> {
        match self.get(key).parse() {
            Ok(v) => Some(v),
            Err(_) => {
                problems.push(format!("{key}: cannot parse {:?}", self.get(key)));
                None
            }
        }
    }

    /// `key = value` lines for every key, in key order.
    pub fn render(&self) -> String {
        self.values
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    fn digest<'a>(&self, keys: impl Iterator<Item = &'a str>) -> String {
        let mut h = Sha256::new();
        for k in keys {
            h.update(format!("{k}={}\n", self.get(k)));
        }
        hex::encode(h.finalize())[..12].to_string()
    }

    pub fn data_hash(&self) -> String {
        self.digest(DATA_KEYS.iter().copied())
    }

    /// Hash of every key except the output location and the epoch budget,
    /// so a resumed run may extend it.
    pub fn full_hash(&self) -> String {
        self.digest(
            KEYS.iter()
                .map(|(k, _, _)| *k)
                .filter(|k| !matches!(*k, "train.epochs" | "output.dir")),
        )
    }

    pub fn output_dir(&self) -> PathBuf {
        PathBuf::from(self.get("output.dir"))
    }

    /// Directory holding the prepared data for this configuration.
    pub fn data_dir(&self) -> PathBuf {
        self.output_dir().join(format!("data-{}", self.data_hash()))
    }

    /// Directory holding a training run for this exact configuration.
    pub fn run_dir(&self) -> PathBuf {
        self.data_dir().join(format!("run-{}", self.full_hash()))
    }

    pub fn input_path(&self) -> Result<PathBuf> {
        match self.get("data.input") {
            "" => crate::usage!("data.input is required"),
            p => Ok(PathBuf::from(p)),
        }
    }

    pub fn seed(&self) -> Result<u64> {
        self.get("seed")
            .parse()
            .map_err(|_| usage_err(format!("seed: cannot parse {:?}", self.get("seed"))))
    }

    pub fn log_format(&self) -> Result<LogFormat> {
        let mut problems = Vec::new();
        let delimiter = match self.get("data.delimiter") {
            "tab" | "\\t" => '\t',
            "comma" => ',',
            "space" => ' ',
            other => {
                let mut chars = other.chars();
                match (chars.next(), chars.next()) {
                    (Some(c), None) => c,
                    _ => {
                        problems.push(format!("data.delimiter: unsupported {other:?}"));
                        '\t'
                    }
                }
            }
        };
        let format = LogFormat {
            delimiter,
            user_col: self.parsed("data.user_col", &mut problems).unwrap_or(0),
            item_col: self.parsed("data.item_col", &mut problems).unwrap_or(1),
            time_col: self.parsed("data.time_col", &mut problems).unwrap_or(2),
            skip_header: self
                .parsed("data.skip_header", &mut problems)
                .unwrap_or(false),
        };
        finish(problems)?;
        Ok(format)
    }

    pub fn min_interactions(&self) -> Result<usize> {
        let mut p = Vec::new();
        let v = self.parsed("data.min_interactions", &mut p).unwrap_or(5);
        finish(p)?;
        Ok(v)
    }

    pub fn input_fraction(&self) -> Result<f64> {
        let mut p = Vec::new();
        let v: f64 = self.parsed("data.input_fraction", &mut p).unwrap_or(0.8);
        if !(v > 0.0 && v < 1.0) {
            p.push(format!("data.input_fraction must be in (0, 1), got {v}"));
        }
        finish(p)?;
        Ok(v)
    }

    pub fn cutoffs(&self) -> Result<Vec<usize>> {
        let raw = self.get("eval.cutoffs");
        let cutoffs = raw
            .split(',')
            .map(|s| s.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| usage_err(format!("eval.cutoffs: cannot parse {raw:?}")))?;
        if cutoffs.is_empty() || cutoffs.contains(&0) {
            crate::usage!("eval.cutoffs must be positive integers");
        }
        Ok(cutoffs)
    }

    pub fn bandwidth(&self) -> Result<f64> {
        let mut p = Vec::new();
        let v: f64 = self.parsed("eval.bandwidth", &mut p).unwrap_or(0.2);
        if !(v > 0.0) {
            p.push(format!("eval.bandwidth must be positive, got {v}"));
        }
        finish(p)?;
        Ok(v)
    }

    /// Training configuration; every problem is reported at once.
    pub fn train_config(&self) -> Result<TrainConfig> {
        let mut p = Vec::new();
        let d = TrainConfig::default();
        let mut ablation = AblationFlags::default();
        for name in AblationFlags::NAMES {
            if let Some(v) = self.parsed::<bool>(&format!("ablation.{name}"), &mut p) {
                ablation.set(name, v).expect("known flag");
            }
        }
        let cfg = TrainConfig {
            dim: self.parsed("model.d", &mut p).unwrap_or(d.dim),
            n_intents: self.parsed("model.k", &mut p).unwrap_or(d.n_intents),
            max_len: self.parsed("model.max_len", &mut p).unwrap_or(d.max_len),
            blocks: self.parsed("model.blocks", &mut p).unwrap_or(d.blocks),
            heads: self.parsed("model.heads", &mut p).unwrap_or(d.heads),
            causal: !self
                .parsed::<bool>("model.bidirectional", &mut p)
                .unwrap_or(false),
            graph: CoGraphConfig {
                delta: self.parsed("graph.delta", &mut p).unwrap_or(d.graph.delta),
                depth: self.parsed("graph.depth", &mut p).unwrap_or(d.graph.depth),
                symmetric: self
                    .parsed("graph.symmetric", &mut p)
                    .unwrap_or(d.graph.symmetric),
            },
            epsilon: self.parsed("perturb.epsilon", &mut p).unwrap_or(d.epsilon),
            loss: LossConfig {
                tau1: self.parsed("loss.tau1", &mut p).unwrap_or(d.loss.tau1),
                tau2: self.parsed("loss.tau2", &mut p).unwrap_or(d.loss.tau2),
                lambda: self.parsed("loss.lambda", &mut p).unwrap_or(d.loss.lambda),
                n_negatives: self
                    .parsed("loss.n_negatives", &mut p)
                    .unwrap_or(d.loss.n_negatives),
                symmetric: self
                    .parsed("loss.symmetric", &mut p)
                    .unwrap_or(d.loss.symmetric),
            },
            batch_size: self
                .parsed("train.batch_size", &mut p)
                .unwrap_or(d.batch_size),
            epochs: self.parsed("train.epochs", &mut p).unwrap_or(d.epochs),
            learning_rate: self.parsed("train.lr", &mut p).unwrap_or(d.learning_rate),
            beta1: self.parsed("train.beta1", &mut p).unwrap_or(d.beta1),
            beta2: self.parsed("train.beta2", &mut p).unwrap_or(d.beta2),
            adam_eps: self.parsed("train.adam_eps", &mut p).unwrap_or(d.adam_eps),
            patience: self.parsed("train.patience", &mut p).unwrap_or(d.patience),
            seed: self.parsed("seed", &mut p).unwrap_or(d.seed),
            ablation,
            graph_drop_rate: self
                .parsed("ablation.graph_drop_rate", &mut p)
                .unwrap_or(d.graph_drop_rate),
            seq_aug_strength: self
                .parsed("ablation.seq_aug_strength", &mut p)
                .unwrap_or(d.seq_aug_strength),
            per_prefix: self
                .parsed("train.per_prefix", &mut p)
                .unwrap_or(d.per_prefix),
        };
        p.extend(cfg.problems());
        finish(p)?;
        Ok(cfg)
    }
}

fn usage_err(msg: String) -> anyhow::Error {
    crate::UsageError(msg).into()
}

fn finish(problems: Vec<String>) -> Result<()> {
    if problems.is_empty() {
        Ok(())
    } else {
        crate::usage!("invalid configuration:\n  {}", problems.join("\n  "))
    }
}

/// Splits `--dotted.key value` overrides out of `args`, returning the
/// overrides and the remaining arguments.
pub fn extract_overrides(args: Vec<String>) -> Result<(Vec<(String, String)>, Vec<String>)> {
    let mut overrides = Vec::new();
    let mut rest = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let key = a.strip_prefix("--").filter(|k| k.contains('.'));
        match key {
            Some(k) => {
                let (k, v) = match k.split_once('=') {
                    Some((k, v)) => (k.to_string(), v.to_string()),
                    None => (
                        k.to_string(),
                        it.next()
                            .ok_or_else(|| usage_err(format!("--{k} needs a value")))?,
                    ),
                };
                if !is_key(&k) {
                    crate::usage!("unknown config key {k:?}");
                }
                overrides.push((k, v));
            }
            None => rest.push(a),
        }
    }
    Ok((overrides, rest))
}
