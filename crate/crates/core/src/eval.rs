//! Ranking metrics, split evaluation, activity groups, intent geometry, and
//! embedding export.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};

use nalgebra::{DMatrix, SymmetricEigen};

use crate::data::EvalInstance;
use crate::error::{Error, Result};
use crate::graph::CoGraph;
use crate::model::{predict_topn, InferenceSnapshot, ModelParams, Variant};
use crate::numerics::DenseTensor;

pub const DEFAULT_CUTOFFS: [usize; 2] = [20, 50];

#[derive(Clone, Debug, PartialEq)]
pub struct RankedPrediction {
    pub user: usize,
    pub ranked_items: Vec<usize>,
    pub targets: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UserMetrics {
    pub recall: f64,
    pub ndcg: f64,
    pub hr: f64,
}

/// Recall, binary-relevance NDCG and hit rate over the first `n` ranks.
/// `None` when there are no targets.
pub fn metrics_for_user(prediction: &RankedPrediction, n: usize) -> Option<UserMetrics> {
    let targets = &prediction.targets;
    if targets.is_empty() {
        return None;
    }
    let mut hits = 0usize;
    let mut dcg = 0.0;
    for (p, item) in prediction.ranked_items.iter().take(n).enumerate() {
        if targets.contains(item) {
            hits += 1;
            dcg += 1.0 / ((p + 2) as f64).log2();
        }
    }
    let ideal: f64 = (0..targets.len().min(n))
        .map(|p| 1.0 / ((p + 2) as f64).log2())
        .sum();
    Some(UserMetrics {
        recall: hits as f64 / targets.len() as f64,
        ndcg: dcg / ideal,
        hr: if hits > 0 { 1.0 } else { 0.0 },
    })
}

/// Anything that can score the whole catalog for a batch of input sequences.
pub trait Scorer: Sync {
    fn n_items(&self) -> usize;
    /// `inputs.len() × n_items` scores.
    fn score_batch(&self, inputs: &[&[usize]]) -> Result<DenseTensor>;
}

impl Scorer for InferenceSnapshot {
    fn n_items(&self) -> usize {
        self.item_table().rows()
    }

    fn score_batch(&self, inputs: &[&[usize]]) -> Result<DenseTensor> {
        let h = self.encode(inputs)?;
        self.score_all(&h)
    }
}

const SCORE_CHUNK: usize = 256;

/// Top-`max_n` predictions for every instance, input items excluded.
/// Work is split across `threads` scoped workers; output order matches
/// `instances`.
pub fn rank_instances(
    scorer: &dyn Scorer,
    instances: &[EvalInstance],
    max_n: usize,
    threads: usize,
) -> Result<Vec<RankedPrediction>> {
    let chunks: Vec<&[EvalInstance]> = instances.chunks(SCORE_CHUNK).collect();
    let run = |chunk: &[EvalInstance]| -> Result<Vec<RankedPrediction>> {
        let inputs: Vec<&[usize]> = chunk.iter().map(|i| i.input_items.as_slice()).collect();
        let scores = scorer.score_batch(&inputs)?;
        chunk
            .iter()
            .enumerate()
            .map(|(b, inst)| {
                Ok(RankedPrediction {
                    user: inst.user,
                    ranked_items: predict_topn(scores.row(b), max_n, &inst.input_items)?,
                    targets: inst.targets.clone(),
                })
            })
            .collect()
    };
    let threads = threads.max(1).min(chunks.len().max(1));
    let mut per_chunk: Vec<Result<Vec<RankedPrediction>>> = Vec::with_capacity(chunks.len());
    if threads == 1 {
        per_chunk.extend(chunks.iter().map(|c| run(c)));
    } else {
        let mut slots: Vec<Option<Result<Vec<RankedPrediction>>>> =
            (0..chunks.len()).map(|_| None).collect();
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..threads)
                .map(|w| {
                    let chunks = &chunks;
                    let run = &run;
                    s.spawn(move || {
                        (w..chunks.len())
                            .step_by(threads)
                            .map(|c| (c, run(chunks[c])))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (c, r) in h.join().expect("evaluation worker panicked") {
                    slots[c] = Some(r);
                }
            }
        });
        per_chunk.extend(slots.into_iter().map(|s| s.expect("every chunk evaluated")));
    }
    let mut out = Vec::with_capacity(instances.len());
    for r in per_chunk {
        out.extend(r?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub group: String,
    pub metric: String,
    pub n: usize,
    pub value: f64,
    pub n_users: usize,
}

/// User-averaged metrics, possibly broken down by user group.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

pub const REPORT_HEADER: &str = "group\tmetric\tN\tvalue\tn_users";

impl MetricReport {
    pub fn get(&self, group: &str, metric: &str, n: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.group == group && r.metric == metric && r.n == n)
            .map(|r| r.value)
    }

    pub fn recall(&self, n: usize) -> Option<f64> {
        self.get("all", "recall", n)
    }

    /// Appends mean recall/ndcg/hr at each cutoff for `predictions` under
    /// `group`. Users without targets are skipped.
    pub fn add_group(&mut self, group: &str, predictions: &[&RankedPrediction], cutoffs: &[usize]) {
        for &n in cutoffs {
            let per_user: Vec<UserMetrics> = predictions
                .iter()
                .filter_map(|p| metrics_for_user(p, n))
                .collect();
            let count = per_user.len();
            let mean = |f: fn(&UserMetrics) -> f64| {
                if count == 0 {
                    0.0
                } else {
                    per_user.iter().map(f).sum::<f64>() / count as f64
                }
            };
            for (metric, value) in [
                ("recall", mean(|m| m.recall)),
                ("ndcg", mean(|m| m.ndcg)),
                ("hr", mean(|m| m.hr)),
            ] {
                self.rows.push(MetricRow {
                    group: group.to_string(),
                    metric: metric.to_string(),
                    n,
                    value,
                    n_users: count,
                });
            }
        }
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{REPORT_HEADER}").unwrap();
        for r in &self.rows {
            writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}",
                r.group, r.metric, r.n, r.value, r.n_users
            )
            .unwrap();
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim_end() == REPORT_HEADER => {}
            _ => return Err(Error::Format("metric report lacks header".into())),
        }
        let mut rows = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            let bad = |m: &str| Error::Parse {
                line: i + 1,
                message: m.to_string(),
            };
            if f.len() != 5 {
                return Err(bad("expected 5 fields"));
            }
            rows.push(MetricRow {
                group: f[0].to_string(),
                metric: f[1].to_string(),
                n: f[2].parse().map_err(|_| bad("bad cutoff"))?,
                value: f[3].parse().map_err(|_| bad("bad value"))?,
                n_users: f[4].parse().map_err(|_| bad("bad user count"))?,
            });
        }
        Ok(Self { rows })
    }
}

/// Ranks every instance once and reports metrics for the whole split.
pub fn evaluate_split(
    scorer: &dyn Scorer,
    instances: &[EvalInstance],
    cutoffs: &[usize],
    threads: usize,
) -> Result<MetricReport> {
    if instances.is_empty() {
        return Err(Error::EmptySplit);
    }
    let max_n = cutoffs.iter().copied().max().unwrap_or(20);
    let preds = rank_instances(scorer, instances, max_n, threads)?;
    let mut report = MetricReport::default();
    report.add_group("all", &preds.iter().collect::<Vec<_>>(), cutoffs);
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ActivityGroup {
    Sparse,
    Normal,
    Popular,
}

impl ActivityGroup {
    pub const ALL: [ActivityGroup; 3] = [
        ActivityGroup::Sparse,
        ActivityGroup::Normal,
        ActivityGroup::Popular,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ActivityGroup::Sparse => "sparse",
            ActivityGroup::Normal => "normal",
            ActivityGroup::Popular => "popular",
        }
    }
}

/// Nearest-rank percentile of `values` (`p` in `(0, 100]`).
pub fn percentile(values: &[usize], p: f64) -> Option<usize> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable();
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

/// Default thresholds: the 33rd and 67th percentiles of `counts`.
pub fn activity_thresholds(counts: &[usize]) -> Option<(usize, usize)> {
    Some((percentile(counts, 33.0)?, percentile(counts, 67.0)?))
}

/// Sparse: `count ≤ t1`; normal: `t1 < count ≤ t2`; popular: `count > t2`.
pub fn group_by_activity(counts: &[usize], thresholds: (usize, usize)) -> Vec<ActivityGroup> {
    let (t1, t2) = thresholds;
    counts
        .iter()
        .map(|&c| {
            if c <= t1 {
                ActivityGroup::Sparse
            } else if c <= t2 {
                ActivityGroup::Normal
            } else {
                ActivityGroup::Popular
            }
        })
        .collect()
}

/// Split metrics plus a sparse/normal/popular breakdown. `counts[i]` is the
/// interaction count of `instances[i]`'s user.
pub fn evaluate_groups(
    scorer: &dyn Scorer,
    instances: &[EvalInstance],
    counts: &[usize],
    cutoffs: &[usize],
    threads: usize,
) -> Result<MetricReport> {
    if instances.is_empty() {
        return Err(Error::EmptySplit);
    }
    if counts.len() != instances.len() {
        return Err(Error::Usage(
            "one interaction count per instance required".into(),
        ));
    }
    let max_n = cutoffs.iter().copied().max().unwrap_or(20);
    let preds = rank_instances(scorer, instances, max_n, threads)?;
    let mut report = MetricReport::default();
    report.add_group("all", &preds.iter().collect::<Vec<_>>(), cutoffs);
    let groups = group_by_activity(counts, activity_thresholds(counts).expect("nonempty"));
    for g in ActivityGroup::ALL {
        let members: Vec<&RankedPrediction> = preds
            .iter()
            .zip(&groups)
            .filter(|(_, &h)| h == g)
            .map(|(p, _)| p)
            .collect();
        report.add_group(g.name(), &members, cutoffs);
    }
    Ok(report)
}

/// Validation Recall@`n` of `params`, used for early stopping.
pub fn validation_recall(
    params: &ModelParams,
    graph: &CoGraph,
    variant: Variant,
    instances: &[EvalInstance],
    n: usize,
) -> Result<f64> {
    let snapshot = InferenceSnapshot::new(params, graph, variant)?;
    let report = evaluate_split(&snapshot, instances, &[n], 1)?;
    Ok(report.recall(n).expect("recall row"))
}

/// Angular layout of embeddings in their top-2 principal plane.
#[derive(Clone, Debug, PartialEq)]
pub struct AngularDensity {
    pub angles: Vec<f64>,
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    /// Mean pairwise cosine similarity of the original embeddings.
    pub concentration: f64,
    /// All embeddings identical; the density is a point mass.
    pub degenerate: bool,
}

pub const DENSITY_GRID: usize = 360;

impl AngularDensity {
    pub fn peak(&self) -> f64 {
        self.density.iter().copied().fold(0.0, f64::max)
    }

    pub fn integral(&self) -> f64 {
        self.density.iter().sum::<f64>() * (2.0 * PI / DENSITY_GRID as f64)
    }

    /// `angle_rad\tdensity` lines followed by the concentration index.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("angle_rad\tdensity\n");
        for (a, d) in self.grid.iter().zip(&self.density) {
            writeln!(s, "{a}\t{d}").unwrap();
        }
        writeln!(s, "# concentration\t{}", self.concentration).unwrap();
        s
    }
}

/// Mean cosine similarity over all unordered pairs of rows; zero rows
/// contribute similarity 0.
pub fn mean_pairwise_cosine(x: &DenseTensor) -> f64 {
    let n = x.rows();
    if n < 2 {
        return 0.0;
    }
    let unit = crate::numerics::row_l2_normalize(x);
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += crate::numerics::tensor::dot(unit.row(i), unit.row(j));
        }
    }
    total / (n * (n - 1) / 2) as f64
}

fn principal_plane(x: &DenseTensor) -> Vec<(f64, f64)> {
    let (n, d) = (x.rows(), x.cols());
    if d == 2 {
        return (0..n).map(|i| (x.get(i, 0), x.get(i, 1))).collect();
    }
    let mut centered = DMatrix::from_row_slice(n, d, x.values());
    let means: Vec<f64> = (0..d).map(|c| centered.column(c).mean()).collect();
    for (c, m) in means.iter().enumerate() {
        centered.column_mut(c).add_scalar_mut(-m);
    }
    let cov = centered.transpose() * &centered / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let axis = |k: usize| {
        let mut v = eig.eigenvectors.column(order[k]).into_owned();
        // Fix the sign so the largest-magnitude component is positive.
        let imax = v.iamax();
        if v[imax] < 0.0 {
            v.neg_mut();
        }
        v
    };
    let (u, w) = (axis(0), axis(1));
    (0..n)
        .map(|i| {
            let row = centered.row(i);
            (row.dot(&u.transpose()), row.dot(&w.transpose()))
        })
        .collect()
}

/// Wrapped-Gaussian kernel density of the embeddings' angles on a
/// 360-point grid over `[−π, π)`.
pub fn angular_density(embeddings: &DenseTensor, bandwidth: f64) -> Result<AngularDensity> {
    let (n, d) = (embeddings.rows(), embeddings.cols());
    if n < 2 || d < 2 {
        return Err(Error::Usage(format!(
            "angular density needs >= 2 embeddings of dimension >= 2, got {n}x{d}"
        )));
    }
    if !(bandwidth > 0.0) {
        return Err(Error::Usage(format!(
            "bandwidth must be positive, got {bandwidth}"
        )));
    }
    let step = 2.0 * PI / DENSITY_GRID as f64;
    let grid: Vec<f64> = (0..DENSITY_GRID).map(|j| -PI + j as f64 * step).collect();
    let concentration = mean_pairwise_cosine(embeddings);
    let first = embeddings.row(0);
    let degenerate = (1..n).all(|i| embeddings.row(i) == first);
    if degenerate {
        let mut density = vec![0.0; DENSITY_GRID];
        density[DENSITY_GRID / 2] = 1.0 / step;
        return Ok(AngularDensity {
            angles: vec![0.0; n],
            grid,
            density,
            concentration,
            degenerate,
        });
    }
    let angles: Vec<f64> = principal_plane(embeddings)
        .into_iter()
        .map(|(x, y)| y.atan2(x))
        .collect();
    let norm = 1.0 / (n as f64 * bandwidth * (2.0 * PI).sqrt());
    let wraps = (PI / bandwidth).ceil() as i32 + 3;
    let density = grid
        .iter()
        .map(|&g| {
            let mut s = 0.0;
            for &a in &angles {
                for k in -wraps..=wraps {
                    let z = (g - a + 2.0 * PI * k as f64) / bandwidth;
                    s += (-0.5 * z * z).exp();
                }
            }
            s * norm
        })
        .collect();
    Ok(AngularDensity {
        angles,
        grid,
        density,
        concentration,
        degenerate,
    })
}

/// One line per entity: id then its values, tab-separated.
pub fn export_embeddings(mut out: impl Write, ids: &[String], table: &DenseTensor) -> Result<()> {
    if ids.len() != table.rows() {
        return Err(Error::Usage(format!(
            "{} ids for {} rows",
            ids.len(),
            table.rows()
        )));
    }
    for (id, i) in ids.iter().zip(0..) {
        let mut line = id.clone();
        for v in table.row(i) {
            write!(line, "\t{v}").unwrap();
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn parse_embeddings(input: impl Read) -> Result<(Vec<String>, DenseTensor)> {
    let mut ids = Vec::new();
    let mut values = Vec::new();
    let mut width = None;
    for (i, line) in BufReader::new(input).lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        ids.push(fields.next().unwrap_or_default().to_string());
        let row = fields
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        if *width.get_or_insert(row.len()) != row.len() {
            return Err(Error::Parse {
                line: i + 1,
                message: "ragged embedding row".into(),
            });
        }
        values.extend(row);
    }
    let cols = width.unwrap_or(0);
    Ok((ids.clone(), DenseTensor::new(ids.len(), cols, values)?))
}
