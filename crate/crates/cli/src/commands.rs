//! Subcommand implementations. Each returns the text it prints.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use bipcl::data::{
    filter_min_interactions, load_interactions, make_eval_instances, split_users,
    training_instances, write_interactions, EvalInstance, InteractionLog, LogFormat, SplitManifest,
    UserSplit,
};
use bipcl::eval::{
    angular_density, evaluate_groups, evaluate_split, export_embeddings, validation_recall,
    AngularDensity,
};
use bipcl::graph::{build_cograph, CoGraph};
use bipcl::model::{Checkpoint, InferenceSnapshot, ModelParams};
use bipcl::trainer::{fit, AblationFlags, FitOptions, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;

const MANIFEST: &str = "manifest.bin";
const INTERACTIONS: &str = "interactions.tsv";
const STATS: &str = "stats.txt";

/// Evaluation worker threads: `BIPCL_THREADS`, else the available cores.
pub fn eval_threads() -> usize {
    std::env::var("BIPCL_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}

fn stats_line(log: &InteractionLog) -> String {
    format!(
        "users={} items={} actions={} sparsity={:.4}%",
        log.n_users(),
        log.n_items(),
        log.n_actions(),
        100.0 * log.sparsity()
    )
}

/// Filtered log and user split shared by every command.
pub struct Prepared {
    pub dir: PathBuf,
    pub log: InteractionLog,
    pub split: UserSplit,
}

impl Prepared {
    pub fn train_sequences(&self) -> Vec<Vec<usize>> {
        self.split
            .train
            .iter()
            .map(|&u| self.log.item_sequence(u))
            .collect()
    }

    pub fn graph(&self, cfg: &TrainConfig) -> Result<CoGraph> {
        Ok(build_cograph(
            &self.train_sequences(),
            self.log.n_items(),
            &cfg.graph,
        )?)
    }

    pub fn instances(&self, users: &[usize], fraction: f64) -> Vec<EvalInstance> {
        make_eval_instances(&self.log, users, fraction)
    }
}

/// Loads, filters and splits `data.input` into the data directory, or
/// reuses an earlier preparation with the same data keys.
pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let dir = cfg.data_dir();
    let manifest_path = dir.join(MANIFEST);
    let tsv = LogFormat::default();
    if manifest_path.exists() {
        let log = load_interactions(File::open(dir.join(INTERACTIONS))?, &tsv)?;
        let manifest = SplitManifest::read(BufReader::new(File::open(&manifest_path)?))?;
        let split = manifest.resolve(&log)?;
        return Ok(Prepared { dir, log, split });
    }
    let input = cfg.input_path()?;
    let raw = load_interactions(
        File::open(&input).with_context(|| format!("opening {}", input.display()))?,
        &cfg.log_format()?,
    )?;
    let log = filter_min_interactions(&raw, cfg.min_interactions()?)?;
    let seed = cfg.seed()?;
    let split = split_users(log.n_users(), seed)?;
    fs::create_dir_all(&dir)?;
    write_interactions(
        &log,
        BufWriter::new(File::create(dir.join(INTERACTIONS))?),
        &tsv,
    )?;
    fs::write(dir.join(STATS), stats_line(&log) + "\n")?;
    let tmp = dir.join("manifest.tmp");
    SplitManifest::from_split(&log, &split, seed).write(BufWriter::new(File::create(&tmp)?))?;
    fs::rename(tmp, &manifest_path)?;
    Ok(Prepared { dir, log, split })
}

pub fn cmd_prepare(cfg: &RunConfig) -> Result<String> {
    let p = prepare(cfg)?;
    Ok(format!("{}\n{}\n", stats_line(&p.log), p.dir.display()))
}

pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub epochs_run: usize,
}

pub fn train(cfg: &RunConfig, resume: bool) -> Result<TrainOutcome> {
    let tc = cfg.train_config()?;
    let fraction = cfg.input_fraction()?;
    let data = prepare(cfg)?;
    let graph = data.graph(&tc)?;
    let instances = training_instances(&data.train_sequences(), tc.per_prefix);
    let val = data.instances(&data.split.val, fraction);
    let run_dir = cfg.run_dir();
    fs::create_dir_all(&run_dir)?;
    fs::write(run_dir.join("config.txt"), cfg.render())?;
    let started = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    fs::write(
        run_dir.join("run.info"),
        format!("started_unix={started}\nvariant={}\n", tc.ablation.name()),
    )?;
    let model = ModelParams::init(
        tc.model_config(data.log.n_items()),
        &mut ChaCha8Rng::seed_from_u64(tc.seed),
    )?;
    let variant = tc.ablation.architecture();
    let mut validate = |m: &ModelParams| validation_recall(m, &graph, variant, &val, 20);
    let options = FitOptions {
        out_dir: Some(&run_dir),
        resume,
    };
    let report = fit(model, &instances, &graph, &tc, &mut validate, options)?;
    Ok(TrainOutcome {
        run_dir,
        best_epoch: report.best_epoch,
        best_metric: report.best_metric,
        epochs_run: report.history.last().map(|r| r.epoch).unwrap_or(0),
    })
}

pub fn cmd_train(cfg: &RunConfig, resume: bool) -> Result<String> {
    let out = train(cfg, resume)?;
    Ok(format!(
        "best epoch {} val recall@20 {:.4} after {} epochs\n{}\n",
        out.best_epoch,
        out.best_metric,
        out.epochs_run,
        out.run_dir.display()
    ))
}

fn load_model(path: &Path) -> Result<ModelParams> {
    let ck =
        Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(ck.to_params()?)
}

fn checkpoint_or_default(cfg: &RunConfig, checkpoint: Option<&Path>) -> PathBuf {
    checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.run_dir().join("best.ckpt"))
}

fn snapshot(cfg: &RunConfig, data: &Prepared, params: &ModelParams) -> Result<InferenceSnapshot> {
    let tc = cfg.train_config()?;
    let expected = tc.model_config(data.log.n_items());
    if params.config != expected {
        crate::usage!(
            "checkpoint does not match the configuration: checkpoint {:?}, configuration {:?}",
            params.config,
            expected
        );
    }
    let graph = data.graph(&tc)?;
    Ok(InferenceSnapshot::new(
        params,
        &graph,
        tc.ablation.architecture(),
    )?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitName {
    Val,
    Test,
}

pub struct EvalRequest<'a> {
    pub checkpoint: Option<&'a Path>,
    pub split: SplitName,
    pub groups: bool,
    pub export: Option<&'a Path>,
}

pub fn cmd_eval(cfg: &RunConfig, req: &EvalRequest<'_>) -> Result<String> {
    let data = prepare(cfg)?;
    let path = checkpoint_or_default(cfg, req.checkpoint);
    let params = load_model(&path)?;
    let snap = snapshot(cfg, &data, &params)?;
    let users = match req.split {
        SplitName::Val => &data.split.val,
        SplitName::Test => &data.split.test,
    };
    let instances = data.instances(users, cfg.input_fraction()?);
    let cutoffs = cfg.cutoffs()?;
    let report = if req.groups {
        let counts: Vec<usize> = instances
            .iter()
            .map(|i| data.log.interactions(i.user).len())
            .collect();
        evaluate_groups(&snap, &instances, &counts, &cutoffs, eval_threads())?
    } else {
        evaluate_split(&snap, &instances, &cutoffs, eval_threads())?
    };
    if let Some(out) = req.export {
        export_embeddings(
            BufWriter::new(File::create(out)?),
            data.log.item_ids(),
            snap.item_table(),
        )?;
    }
    let name = match req.split {
        SplitName::Val => "val",
        SplitName::Test => "test",
    };
    let report_path = path.with_file_name(format!(
        "{}.{name}{}.tsv",
        path.file_stem().and_then(|s| s.to_str()).unwrap_or("eval"),
        if req.groups { ".groups" } else { "" }
    ));
    fs::write(report_path, report.to_tsv())?;
    Ok(report.to_tsv())
}

pub fn cmd_ablate(cfg: &RunConfig, variants: &[String]) -> Result<String> {
    if variants.is_empty() {
        crate::usage!("no variants given");
    }
    let flags: Vec<AblationFlags> = variants
        .iter()
        .map(|v| AblationFlags::variant(v))
        .collect::<bipcl::Result<_>>()?;
    let fraction = cfg.input_fraction()?;
    let cutoffs = cfg.cutoffs()?;
    let mut rows = Vec::new();
    for (name, f) in variants.iter().zip(&flags) {
        let mut run = cfg.clone();
        for flag in AblationFlags::NAMES {
            run.set(
                &format!("ablation.{flag}"),
                &f.get(flag).unwrap_or(false).to_string(),
            )?;
        }
        let outcome = train(&run, false)?;
        let data = prepare(&run)?;
        let params = load_model(&outcome.run_dir.join("best.ckpt"))?;
        let snap = snapshot(&run, &data, &params)?;
        let report = evaluate_split(
            &snap,
            &data.instances(&data.split.test, fraction),
            &cutoffs,
            eval_threads(),
        )?;
        rows.push((name.clone(), report));
    }
    let mut table = String::from("variant");
    for n in &cutoffs {
        write!(table, "\trecall@{n}\tndcg@{n}").unwrap();
    }
    table.push('\n');
    for (name, report) in &rows {
        table.push_str(name);
        for &n in &cutoffs {
            let r = report.get("all", "recall", n).unwrap_or(f64::NAN);
            let g = report.get("all", "ndcg", n).unwrap_or(f64::NAN);
            write!(table, "\t{r:.4}\t{g:.4}").unwrap();
        }
        table.push('\n');
    }
    fs::write(cfg.data_dir().join("ablation.tsv"), &table)?;
    Ok(table)
}

fn intent_geometry(cfg: &RunConfig, data: &Prepared, path: &Path) -> Result<AngularDensity> {
    let params = load_model(path)?;
    let snap = snapshot(cfg, data, &params)?;
    let Some(intent) = snap.intent() else {
        crate::usage!(
            "checkpoint {} was configured without intent representations",
            path.display()
        );
    };
    Ok(angular_density(intent, cfg.bandwidth()?)?)
}

fn geometry_line(path: &Path, a: &AngularDensity) -> String {
    format!(
        "{}\tconcentration={:.4}\tpeak={:.4}{}\n",
        path.display(),
        a.concentration,
        a.peak(),
        if a.degenerate { "\tdegenerate" } else { "" }
    )
}

/// Density file written next to a checkpoint.
pub fn density_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("density.tsv")
}

pub fn cmd_geometry(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    compare: Option<&Path>,
) -> Result<String> {
    let data = prepare(cfg)?;
    let mut paths = vec![checkpoint_or_default(cfg, checkpoint)];
    paths.extend(compare.map(Path::to_path_buf));
    if let [a, b] = paths.as_slice() {
        let (da, db) = (load_model(a)?.config.dim, load_model(b)?.config.dim);
        if da != db {
            crate::usage!("cannot compare checkpoints of dimension {da} and {db}");
        }
    }
    let mut out = String::new();
    for path in &paths {
        let density = intent_geometry(cfg, &data, path)?;
        fs::write(density_path(path), density.to_tsv())?;
        out.push_str(&geometry_line(path, &density));
    }
    Ok(out)
}
