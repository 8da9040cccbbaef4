//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --test acceptance -- 1 4 10`.

use std::collections::HashSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use bipcl::data::{
    filter_min_interactions, make_eval_instances, make_train_batch, split_users, training_instances,
};
use bipcl::eval::{
    angular_density, evaluate_split, metrics_for_user, validation_recall, RankedPrediction, Scorer,
};
use bipcl::graph::{accumulate_cooccurrence, build_cograph, CoGraphConfig};
use bipcl::model::{
    item_intent_enhance, perturb_embeddings, seq_intent_enhance, seq_intent_vars, Checkpoint,
    GateMode, InferenceSnapshot, ModelParams, PerturbSpec,
};
use bipcl::numerics::{rowwise_softmax, Tape};
use bipcl::objectives::{infonce_value, LossConfig};
use bipcl::synthetic::{intent_sequences, overfit_sequences, sequences_to_log, IntentGenConfig};
use bipcl::trainer::{
    fit, loss_and_gradients, run_steps, sample_views, AblationFlags, FitOptions, OptimizerState,
    TrainConfig,
};
use bipcl::DenseTensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn random_sequences(
    rng: &mut ChaCha8Rng,
    n: usize,
    n_items: usize,
    len: std::ops::RangeInclusive<usize>,
) -> Vec<Vec<usize>> {
    (0..n)
        .map(|_| {
            let l = rng.random_range(len.clone());
            let mut s = Vec::with_capacity(l);
            while s.len() < l {
                let i = rng.random_range(0..n_items);
                if !s.contains(&i) {
                    s.push(i);
                }
            }
            s
        })
        .collect()
}

// 1
fn gradient_check() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n_items = 30;
    let seqs = random_sequences(&mut rng, 12, n_items, 3..=7);
    let cfg = TrainConfig {
        dim: 8,
        n_intents: 4,
        max_len: 5,
        heads: 2,
        batch_size: 4,
        ..Default::default()
    };
    let graph = build_cograph(&seqs, n_items, &cfg.graph).map_err(e2s)?;
    let model = ModelParams::init(cfg.model_config(n_items), &mut rng).map_err(e2s)?;
    let refs: Vec<&[usize]> = seqs.iter().take(4).map(Vec::as_slice).collect();
    let batch = make_train_batch(&refs, cfg.max_len, cfg.loss.n_negatives, n_items, &mut rng)
        .map_err(e2s)?;
    let views = sample_views(&cfg, &batch, n_items, None, &mut rng).map_err(e2s)?;
    let loss_at = |m: &ModelParams| {
        loss_and_gradients(m, &cfg, &graph, &batch, views.as_ref()).map(|(l, _)| l.total)
    };
    let (_, grads) =
        loss_and_gradients(&model, &cfg, &graph, &batch, views.as_ref()).map_err(e2s)?;
    let names = model.weights.names();
    let mut worst = (0.0f64, String::new());
    let mut checked = 0usize;
    for (p, grad) in grads.iter().enumerate() {
        // The perturbation direction depends on the sign of the propagated
        // embeddings, so embedding steps stay small enough not to flip it.
        let h = if names[p] == "item_embeddings" {
            1e-4
        } else {
            3e-4
        };
        for i in 0..grad.len() {
            let shifted = |offset: f64| {
                let mut m = model.clone();
                m.weights.iter_mut()[p].values_mut()[i] += offset;
                loss_at(&m).map_err(e2s)
            };
            let fd = (8.0 * (shifted(h)? - shifted(-h)?)
                - (shifted(2.0 * h)? - shifted(-2.0 * h)?))
                / (12.0 * h);
            let an = grad.values()[i];
            // Differences of a loss this size carry ~1e-10 of rounding, so
            // gradients below 1e-5 are measured against that scale.
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-5);
            if rel > worst.0 {
                worst = (
                    rel,
                    format!("{}[{i}] analytic {an:.6e} fd {fd:.6e}", names[p]),
                );
            }
            checked += 1;
        }
    }
    ensure(
        worst.0 <= 1e-4,
        format!("max relative error {:.2e} at {}", worst.0, worst.1),
    )?;
    Ok(format!(
        "{checked} entries, max relative error {:.2e}",
        worst.0
    ))
}

fn brute_force_graph(seqs: &[Vec<usize>], n: usize, delta: usize) -> Vec<Vec<f64>> {
    let mut a = vec![vec![0.0; n]; n];
    for s in seqs {
        for p in 0..s.len() {
            for q in 0..s.len() {
                let gap = p.abs_diff(q);
                if gap > 0 && gap < delta {
                    a[s[p]][s[q]] += (delta - gap) as f64;
                }
            }
        }
    }
    for (i, row) in a.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    a
}

// 2
fn graph_invariants() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let seqs = random_sequences(&mut rng, 40, 25, 1..=12);
    let g = build_cograph(&seqs, 25, &CoGraphConfig::default()).map_err(e2s)?;
    let worst = g
        .matrix()
        .row_sums()
        .iter()
        .map(|s| (s - 1.0).abs())
        .fold(0.0, f64::max);
    ensure(worst <= 1e-6, format!("row sum off by {worst:.2e}"))?;

    let cfg = CoGraphConfig {
        delta: 5,
        ..Default::default()
    };
    let example = vec![vec![0, 1, 2]];
    let raw = accumulate_cooccurrence(&example, 3, &cfg)
        .map_err(e2s)?
        .to_dense();
    let oracle = brute_force_graph(&example, 3, 5);
    for (i, row) in oracle.iter().enumerate() {
        ensure(
            raw.row(i) == row.as_slice(),
            format!("worked example row {i}: {:?} vs {row:?}", raw.row(i)),
        )?;
    }
    let random_raw = accumulate_cooccurrence(&seqs, 25, &CoGraphConfig::default())
        .map_err(e2s)?
        .to_dense();
    let random_oracle = brute_force_graph(&seqs, 25, CoGraphConfig::default().delta);
    for (i, row) in random_oracle.iter().enumerate() {
        ensure(
            random_raw.row(i) == row.as_slice(),
            format!("random sequences row {i} differs"),
        )?;
    }

    let one = CoGraphConfig {
        delta: 1,
        ..Default::default()
    };
    let g1 = build_cograph(&seqs, 25, &one).map_err(e2s)?;
    ensure(
        g1.matrix().to_dense() == DenseTensor::identity(25),
        "delta 1 is not the identity",
    )?;
    Ok(format!(
        "max row-sum error {worst:.1e}; worked example exact; delta 1 identity"
    ))
}

// 3
fn perturbation_bound() -> Check {
    let eps = 0.1;
    let mut worst_excess = f64::NEG_INFINITY;
    let mut worst_eq = 0.0f64;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let (rows, cols) = (20, 16);
        let r = DenseTensor::new(
            rows,
            cols,
            (0..rows * cols)
                .map(|k| {
                    if k % 7 == 0 && (k / cols) % 2 == 0 {
                        0.0
                    } else {
                        rng.random_range(-1.0..1.0)
                    }
                })
                .collect(),
        )
        .map_err(e2s)?;
        let spec = PerturbSpec {
            epsilon: eps,
            seeds: [seed, seed + 1_000_000],
        };
        let (v1, v2) = perturb_embeddings(&r, &spec).map_err(e2s)?;
        for v in [&v1, &v2] {
            for i in 0..rows {
                let norm = v
                    .row(i)
                    .iter()
                    .zip(r.row(i))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                worst_excess = worst_excess.max(norm - eps);
                if r.row(i).iter().all(|&x| x != 0.0) {
                    worst_eq = worst_eq.max((norm - eps).abs());
                }
            }
        }
    }
    ensure(
        worst_excess <= 1e-9,
        format!("norm exceeds epsilon by {worst_excess:.2e}"),
    )?;
    ensure(
        worst_eq <= 1e-6,
        format!("full-support row norm off by {worst_eq:.2e}"),
    )?;
    Ok(format!(
        "max excess {worst_excess:.1e}, max equality gap {worst_eq:.1e}"
    ))
}

// 4
fn collapse_value() -> Check {
    let mut parts = Vec::new();
    for b in [2usize, 8, 32] {
        let row: Vec<f64> = (0..16).map(|k| (k as f64 * 0.37).sin()).collect();
        let x = DenseTensor::from_rows(&vec![row; b]).map_err(e2s)?;
        let loss = infonce_value(&x, &x, 0.2).map_err(e2s)?;
        let target = (b as f64).ln();
        ensure(
            (loss - target).abs() <= 1e-6,
            format!("B={b}: loss {loss} vs ln B {target}"),
        )?;
        parts.push(format!("B={b}: {loss:.6}"));
    }
    Ok(parts.join(", "))
}

// 5
fn infonce_gradient_law() -> Check {
    let tau = 0.2;
    let anchor = 0usize;
    let sims = [0.9, 0.6, 0.1, -0.4];
    let loss_of = |s: &[f64]| -> Result<f64, String> {
        let mut tape = Tape::new();
        let leaf = tape.leaf(DenseTensor::row_vector(s.to_vec()));
        let loss = tape
            .cross_entropy(leaf, &[anchor], 1.0 / tau)
            .map_err(e2s)?;
        tape.value(loss).map_err(e2s)?.item().map_err(e2s)
    };
    let p = rowwise_softmax(&DenseTensor::row_vector(
        sims.iter().map(|s| s / tau).collect(),
    ));
    let h = 1e-6;
    let mut fd = [0.0; 4];
    for b in 0..4 {
        let mut up = sims;
        up[b] += h;
        let mut down = sims;
        down[b] -= h;
        fd[b] = (loss_of(&up)? - loss_of(&down)?) / (2.0 * h);
        let law = (p.values()[b] - if b == anchor { 1.0 } else { 0.0 }) / tau;
        let rel = (fd[b] - law).abs() / law.abs();
        ensure(
            rel <= 1e-5,
            format!("entry {b}: fd {} vs law {law} (rel {rel:.2e})", fd[b]),
        )?;
    }
    ensure(fd[anchor] < 0.0, "anchor gradient not negative")?;
    for b in 1..3 {
        ensure(
            fd[b] > fd[b + 1] && fd[b + 1] > 0.0,
            format!("negatives not strictly ordered: {fd:?}"),
        )?;
    }
    Ok(format!(
        "gradients {:?}",
        fd.map(|g| (g * 1e4).round() / 1e4)
    ))
}

// 6
fn residual_path() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cfg = TrainConfig {
        dim: 8,
        n_intents: 4,
        max_len: 5,
        heads: 2,
        ..Default::default()
    };
    let model = ModelParams::init(cfg.model_config(30), &mut rng).map_err(e2s)?;
    let r = DenseTensor::new(
        30,
        8,
        (0..240).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .map_err(e2s)?;
    let items = item_intent_enhance(&r, &model, GateMode::Zero).map_err(e2s)?;
    ensure(
        items.fused == r,
        "item side with a zero gate is not the structural table",
    )?;
    let e = DenseTensor::new(4, 8, (0..32).map(|_| rng.random_range(-1.0..1.0)).collect())
        .map_err(e2s)?;
    let (_, _, fused) = seq_intent_enhance(&e, &model, GateMode::Zero).map_err(e2s)?;
    ensure(
        fused == e,
        "sequence side with a zero gate is not the pooled state",
    )?;

    let mut tape = Tape::new();
    let p = model.bind(&mut tape);
    let ev = tape.leaf(e.clone());
    let (_, _, hv) = seq_intent_vars(&mut tape, ev, &p, GateMode::Learned, true).map_err(e2s)?;
    let weights = tape.leaf(
        DenseTensor::new(4, 8, (0..32).map(|_| rng.random_range(-1.0..1.0)).collect())
            .map_err(e2s)?,
    );
    let prod = tape.mul(hv, weights).map_err(e2s)?;
    let sq = tape.mul(prod, prod).map_err(e2s)?;
    let loss = tape.sum(sq).map_err(e2s)?;
    let grads = tape.backward(loss).map_err(e2s)?;
    let ge = grads.get(ev).map_err(e2s)?;
    let gh = grads.get(hv).map_err(e2s)?;
    let diff = ge.max_abs_diff(&gh);
    ensure(
        diff <= 1e-10,
        format!("frozen intent: dL/de differs from dL/dh by {diff:.2e}"),
    )?;
    Ok(format!(
        "zero gate exact on both sides; frozen gradient gap {diff:.1e}"
    ))
}

/// Desk-scale training settings shared by the learning criteria.
fn desk_config(seed: u64, variant: &str) -> TrainConfig {
    TrainConfig {
        dim: 32,
        n_intents: 4,
        max_len: 10,
        heads: 2,
        batch_size: 128,
        epochs: 60,
        patience: 5,
        seed,
        loss: LossConfig {
            lambda: 0.5,
            ..Default::default()
        },
        ablation: AblationFlags::variant(variant).expect("known variant"),
        ..Default::default()
    }
}

// 7
fn overfit() -> Check {
    let started = Instant::now();
    let seqs = overfit_sequences();
    let n_items = 30;
    let cfg = TrainConfig {
        epochs: 200,
        patience: 200,
        per_prefix: true,
        batch_size: 64,
        n_intents: 4,
        max_len: 8,
        learning_rate: 5e-3,
        ..desk_config(7, "full")
    };
    let graph = build_cograph(&seqs, n_items, &cfg.graph).map_err(e2s)?;
    let instances = training_instances(&seqs, true);
    let variant = cfg.ablation.architecture();
    let recall_at_1 = |m: &ModelParams| -> bipcl::Result<f64> {
        let snap = InferenceSnapshot::new(m, &graph, variant)?;
        let inputs: Vec<&[usize]> = instances.iter().map(|s| &s[..s.len() - 1]).collect();
        let scores = snap.score_batch(&inputs)?;
        let mut hits = 0;
        for (b, inst) in instances.iter().enumerate() {
            let top = bipcl::model::predict_topn(scores.row(b), 1, inputs[b])?;
            hits += usize::from(top[0] == *inst.last().unwrap());
        }
        Ok(hits as f64 / instances.len() as f64)
    };
    let init = ModelParams::init(
        cfg.model_config(n_items),
        &mut ChaCha8Rng::seed_from_u64(cfg.seed),
    )
    .map_err(e2s)?;
    let mut validate = |m: &ModelParams| recall_at_1(m);
    let report = fit(
        init,
        &instances,
        &graph,
        &cfg,
        &mut validate,
        FitOptions::default(),
    )
    .map_err(e2s)?;
    let elapsed = started.elapsed();
    let first = report
        .history
        .iter()
        .find(|r| r.val_recall >= 0.95)
        .map(|r| r.epoch);
    let detail = format!(
        "best Recall@1 {:.3} at epoch {}, first >= 0.95 at {first:?}, {:.1}s",
        report.best_metric,
        report.best_epoch,
        elapsed.as_secs_f64()
    );
    ensure(report.best_metric >= 0.95, detail.clone())?;
    ensure(elapsed < Duration::from_secs(120), detail.clone())?;
    Ok(detail)
}

struct VariantRun {
    recall: f64,
    intent_geometry: Option<(f64, f64)>,
    seconds: f64,
}

fn ablation_run(seed: u64, variant: &str) -> Result<VariantRun, String> {
    let started = Instant::now();
    let gen = IntentGenConfig {
        seed,
        ..Default::default()
    };
    let seqs = intent_sequences(&gen).map_err(e2s)?;
    let log = filter_min_interactions(&sequences_to_log(&seqs).map_err(e2s)?, 5).map_err(e2s)?;
    let split = split_users(log.n_users(), seed).map_err(e2s)?;
    let train: Vec<Vec<usize>> = split.train.iter().map(|&u| log.item_sequence(u)).collect();
    let cfg = desk_config(seed, variant);
    let graph = build_cograph(&train, log.n_items(), &cfg.graph).map_err(e2s)?;
    let instances = training_instances(&train, cfg.per_prefix);
    let val = make_eval_instances(&log, &split.val, 0.8);
    let test = make_eval_instances(&log, &split.test, 0.8);
    let variant_arch = cfg.ablation.architecture();
    let init = ModelParams::init(
        cfg.model_config(log.n_items()),
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
    .map_err(e2s)?;
    let mut validate = |m: &ModelParams| validation_recall(m, &graph, variant_arch, &val, 20);
    let report = fit(
        init,
        &instances,
        &graph,
        &cfg,
        &mut validate,
        FitOptions::default(),
    )
    .map_err(e2s)?;
    let snap = InferenceSnapshot::new(&report.best, &graph, variant_arch).map_err(e2s)?;
    let recall = evaluate_split(&snap, &test, &[20], 1)
        .map_err(e2s)?
        .recall(20)
        .expect("recall row");
    let intent_geometry = match snap.intent() {
        Some(z) => {
            let a = angular_density(z, 0.2).map_err(e2s)?;
            Some((a.concentration, a.peak()))
        }
        None => None,
    };
    Ok(VariantRun {
        recall,
        intent_geometry,
        seconds: started.elapsed().as_secs_f64(),
    })
}

struct AblationResults {
    seeds: Vec<[VariantRun; 3]>,
    seconds: f64,
}

const ABLATION_VARIANTS: [&str; 3] = ["full", "no_intent", "no_cl"];

fn run_ablation() -> Result<AblationResults, String> {
    let started = Instant::now();
    let mut seeds = Vec::new();
    for seed in 0..3u64 {
        let runs = [
            ablation_run(seed, ABLATION_VARIANTS[0])?,
            ablation_run(seed, ABLATION_VARIANTS[1])?,
            ablation_run(seed, ABLATION_VARIANTS[2])?,
        ];
        println!(
            "    seed {seed}: {}",
            ABLATION_VARIANTS
                .iter()
                .zip(&runs)
                .map(|(v, r)| format!("{v} {:.4} ({:.0}s)", r.recall, r.seconds))
                .collect::<Vec<_>>()
                .join(", ")
        );
        seeds.push(runs);
    }
    Ok(AblationResults {
        seeds,
        seconds: started.elapsed().as_secs_f64(),
    })
}

// 8
fn directional_ablation(results: &Result<AblationResults, String>) -> Check {
    let res = results.as_ref().map_err(Clone::clone)?;
    let mut lines = Vec::new();
    let mut ok = true;
    for (b, name) in [(1usize, "no_intent"), (2, "no_cl")] {
        let wins = res
            .seeds
            .iter()
            .filter(|s| s[0].recall > s[b].recall)
            .count();
        let gain = res
            .seeds
            .iter()
            .map(|s| s[0].recall / s[b].recall - 1.0)
            .sum::<f64>()
            / res.seeds.len() as f64;
        ok &= wins == res.seeds.len() && gain >= 0.03;
        lines.push(format!(
            "vs {name}: wins {wins}/{}, mean gain {:+.2}%",
            res.seeds.len(),
            100.0 * gain
        ));
    }
    ok &= res.seconds < 900.0;
    let detail = format!("{}; {:.0}s", lines.join("; "), res.seconds);
    ensure(ok, detail.clone())?;
    Ok(detail)
}

// 9
fn geometry_effect(results: &Result<AblationResults, String>) -> Check {
    let res = results.as_ref().map_err(Clone::clone)?;
    let mut lines = Vec::new();
    let mut ok = true;
    for (seed, runs) in res.seeds.iter().enumerate() {
        let (Some((c_cl, p_cl)), Some((c_no, p_no))) =
            (runs[0].intent_geometry, runs[2].intent_geometry)
        else {
            return Err("missing intent representations".into());
        };
        ok &= c_cl < c_no && p_cl < p_no;
        lines.push(format!(
            "seed {seed}: cosine {c_cl:.3} vs {c_no:.3}, peak {p_cl:.3} vs {p_no:.3}"
        ));
    }
    let detail = lines.join("; ");
    ensure(ok, detail.clone())?;
    Ok(detail)
}

fn oracle_metrics(ranked: &[usize], targets: &HashSet<usize>, n: usize) -> (f64, f64, f64) {
    let top: Vec<usize> = ranked.iter().copied().take(n).collect();
    let hit_ranks: Vec<usize> = (1..=top.len())
        .filter(|&r| targets.contains(&top[r - 1]))
        .collect();
    let recall = hit_ranks.len() as f64 / targets.len() as f64;
    let mut dcg = 0.0;
    for &r in &hit_ranks {
        dcg += 1.0 / ((r + 1) as f64).log2();
    }
    let mut idcg = 0.0;
    for r in 1..=targets.len().min(n) {
        idcg += 1.0 / ((r + 1) as f64).log2();
    }
    let hr = if hit_ranks.is_empty() { 0.0 } else { 1.0 };
    (recall, dcg / idcg, hr)
}

struct TargetScorer {
    n_items: usize,
    targets: Vec<Vec<usize>>,
}

impl Scorer for TargetScorer {
    fn n_items(&self) -> usize {
        self.n_items
    }

    fn score_batch(&self, inputs: &[&[usize]]) -> bipcl::Result<DenseTensor> {
        let mut out = DenseTensor::zeros(inputs.len(), self.n_items);
        for (b, input) in inputs.iter().enumerate() {
            for &t in &self.targets[input[0]] {
                out.set(b, t, 1.0);
            }
        }
        Ok(out)
    }
}

// 10
fn metric_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for case in 0..100 {
        let n_items = rng.random_range(60..200);
        let mut ranked: Vec<usize> = (0..n_items).collect();
        for i in (1..n_items).rev() {
            ranked.swap(i, rng.random_range(0..=i));
        }
        let n_targets = rng.random_range(1..=30);
        let mut targets = HashSet::new();
        while targets.len() < n_targets {
            targets.insert(rng.random_range(0..n_items));
        }
        let pred = RankedPrediction {
            user: case,
            ranked_items: ranked.clone(),
            targets: targets.iter().copied().collect(),
        };
        for n in [20, 50] {
            let m = metrics_for_user(&pred, n).ok_or("no metrics")?;
            let (r, g, h) = oracle_metrics(&ranked, &targets, n);
            ensure(
                m.recall == r && m.ndcg == g && m.hr == h,
                format!("case {case} @{n}: {m:?} vs ({r}, {g}, {h})"),
            )?;
        }
    }
    let n_items = 100;
    let users = 40;
    let mut targets = Vec::new();
    let mut instances = Vec::new();
    for u in 0..users {
        let k = rng.random_range(1..=20);
        let mut t: Vec<usize> = Vec::new();
        while t.len() < k {
            let i = rng.random_range(40..n_items);
            if !t.contains(&i) {
                t.push(i);
            }
        }
        targets.push(t.clone());
        instances.push(bipcl::data::EvalInstance {
            user: u,
            input_items: vec![u],
            targets: t,
        });
    }
    let scorer = TargetScorer { n_items, targets };
    let report = evaluate_split(&scorer, &instances, &[20, 50], 2).map_err(e2s)?;
    for row in &report.rows {
        ensure(
            row.value == 1.0,
            format!("oracle scorer {} @{} = {}", row.metric, row.n, row.value),
        )?;
    }
    Ok(format!(
        "100 cases exact at @20/@50; oracle scorer all ones over {} rows",
        report.rows.len()
    ))
}

// 11
fn determinism() -> Check {
    let seqs = overfit_sequences();
    let cfg = TrainConfig {
        batch_size: 16,
        n_intents: 4,
        max_len: 8,
        ..desk_config(3, "full")
    };
    let graph = build_cograph(&seqs, 30, &cfg.graph).map_err(e2s)?;
    let instances = training_instances(&seqs, true);
    let run = || -> Result<Vec<u8>, String> {
        let mut model = ModelParams::init(
            cfg.model_config(30),
            &mut ChaCha8Rng::seed_from_u64(cfg.seed),
        )
        .map_err(e2s)?;
        let mut opt = OptimizerState::for_model(&model);
        run_steps(&mut model, &mut opt, &instances, &graph, &cfg, 5).map_err(e2s)?;
        let mut bytes = Vec::new();
        Checkpoint::from_params(&model)
            .write(&mut bytes)
            .map_err(e2s)?;
        Ok(bytes)
    };
    let a = run()?;
    let b = run()?;
    ensure(a == b, "two identical runs produced different checkpoints")?;
    let loaded = Checkpoint::read(a.as_slice()).map_err(e2s)?;
    let params = loaded.to_params().map_err(e2s)?;
    let mut again = Vec::new();
    Checkpoint::from_params(&params)
        .write(&mut again)
        .map_err(e2s)?;
    ensure(again == a, "checkpoint round trip changed bytes")?;
    let reloaded = Checkpoint::read(again.as_slice())
        .map_err(e2s)?
        .to_params()
        .map_err(e2s)?;
    let bitwise = reloaded
        .weights
        .iter()
        .into_iter()
        .zip(params.weights.iter())
        .all(|(x, y)| {
            x.values()
                .iter()
                .zip(y.values())
                .all(|(p, q)| p.to_bits() == q.to_bits())
        });
    ensure(bitwise, "round-tripped parameters differ")?;
    Ok(format!(
        "5-step checkpoints identical ({} bytes); round trip bit-exact",
        a.len()
    ))
}

fn guarded(f: impl FnOnce() -> Check) -> Check {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    }
}

fn main() {
    let wanted: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let selected = |n: usize| wanted.is_empty() || wanted.contains(&n);
    let simple: [(usize, &str, fn() -> Check); 7] = [
        (1, "gradient correctness", gradient_check),
        (2, "graph invariants", graph_invariants),
        (3, "perturbation bound", perturbation_bound),
        (4, "contrastive collapse value", collapse_value),
        (5, "contrastive gradient law", infonce_gradient_law),
        (6, "residual path", residual_path),
        (7, "overfit sanity", overfit),
    ];
    let mut failed = 0;
    let mut report = |n: usize, name: &str, r: Check, secs: f64| match &r {
        Ok(d) => println!("PASS [{n:>2}] {name}: {d} ({secs:.1}s)"),
        Err(d) => {
            failed += 1;
            println!("FAIL [{n:>2}] {name}: {d} ({secs:.1}s)");
        }
    };
    for (n, name, f) in simple {
        if selected(n) {
            let t = Instant::now();
            let r = guarded(f);
            report(n, name, r, t.elapsed().as_secs_f64());
        }
    }
    if selected(8) || selected(9) {
        let t = Instant::now();
        let results =
            catch_unwind(run_ablation).unwrap_or_else(|_| Err("ablation run panicked".into()));
        let secs = t.elapsed().as_secs_f64();
        if selected(8) {
            report(
                8,
                "directional ablation",
                guarded(|| directional_ablation(&results)),
                secs,
            );
        }
        if selected(9) {
            report(
                9,
                "geometry effect",
                guarded(|| geometry_effect(&results)),
                0.0,
            );
        }
    }
    for (n, name, f) in [
        (10usize, "metric oracle", metric_oracle as fn() -> Check),
        (11, "determinism and persistence", determinism),
    ] {
        if selected(n) {
            let t = Instant::now();
            let r = guarded(f);
            report(n, name, r, t.elapsed().as_secs_f64());
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
