use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use bipcl::data::{write_interactions, LogFormat};
use bipcl::eval::MetricReport;
use bipcl::synthetic::{intent_sequences, sequences_to_log, IntentGenConfig};
use bipcl_cli::config::KEYS;
use bipcl_cli::exit;

fn write_dataset(dir: &Path) -> PathBuf {
    let gen = IntentGenConfig {
        n_users: 300,
        n_items: 80,
        min_len: 6,
        max_len: 12,
        ..Default::default()
    };
    let log = sequences_to_log(&intent_sequences(&gen).unwrap()).unwrap();
    let path = dir.join("interactions.tsv");
    write_interactions(
        &log,
        fs::File::create(&path).unwrap(),
        &LogFormat::default(),
    )
    .unwrap();
    path
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let data = write_dataset(dir);
    let text = format!(
        "# small model for tests\n\
         data.input = {}\n\
         output.dir = {}\n\
         model.d = 8\nmodel.k = 4\nmodel.max_len = 6\nmodel.heads = 2\n\
         train.batch_size = 64\ntrain.epochs = 2\nloss.lambda = 0.5\n{extra}",
        data.display(),
        dir.join("runs").display()
    );
    let path = dir.join("run.conf");
    fs::write(&path, text).unwrap();
    path
}

struct Outcome {
    code: i32,
    stdout: String,
    stderr: String,
}

fn run(args: &[&str]) -> Outcome {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv: Vec<String> = std::iter::once("bipcl")
        .chain(args.iter().copied())
        .map(String::from)
        .collect();
    let code = bipcl_cli::run(argv, &mut out, &mut err);
    Outcome {
        code,
        stdout: String::from_utf8(out).unwrap(),
        stderr: String::from_utf8(err).unwrap(),
    }
}

fn ok(args: &[&str]) -> String {
    let o = run(args);
    assert_eq!(o.code, exit::OK, "{args:?} failed: {}", o.stderr);
    o.stdout
}

fn last_line_path(stdout: &str) -> PathBuf {
    PathBuf::from(stdout.lines().last().unwrap())
}

#[test]
fn help_lists_every_key_with_default() {
    let out = Command::new(env!("CARGO_BIN_EXE_bipcl"))
        .arg("--help")
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for (key, default, _) in KEYS {
        let line = text
            .lines()
            .find(|l| l.trim_start().starts_with(key))
            .unwrap_or_else(|| panic!("{key} missing"));
        if !default.is_empty() {
            assert!(line.contains(default), "{line}");
        }
    }
}

#[test]
fn usage_and_data_errors_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_config(dir.path(), "");
    let c = conf.to_str().unwrap();
    assert_eq!(
        run(&["prepare", "--config", c, "--model.dimension", "3"]).code,
        exit::USAGE
    );
    assert_eq!(run(&["prepare"]).code, exit::USAGE);
    assert_eq!(run(&["bogus"]).code, exit::USAGE);
    let bad = run(&[
        "train",
        "--config",
        c,
        "--model.d",
        "x",
        "--train.batch_size",
        "0",
    ]);
    assert_eq!(bad.code, exit::USAGE);
    assert!(
        bad.stderr.contains("model.d") && bad.stderr.contains("train.batch_size"),
        "{}",
        bad.stderr
    );

    let broken = dir.path().join("broken.tsv");
    fs::write(&broken, "u1\ti1\tnot-a-time\n").unwrap();
    let o = run(&[
        "prepare",
        "--data.input",
        broken.to_str().unwrap(),
        "--output.dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.code, exit::DATA, "{}", o.stderr);
    let missing = run(&[
        "prepare",
        "--data.input",
        "/nonexistent/file",
        "--output.dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(missing.code, exit::IO, "{}", missing.stderr);
}

#[test]
fn prepare_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_config(dir.path(), "");
    let c = conf.to_str().unwrap();
    let a = ok(&[
        "prepare",
        "--config",
        c,
        "--output.dir",
        dir.path().join("a").to_str().unwrap(),
    ]);
    let b = ok(&[
        "prepare",
        "--config",
        c,
        "--output.dir",
        dir.path().join("b").to_str().unwrap(),
    ]);
    assert!(a.starts_with("users="), "{a}");
    let ma = fs::read(last_line_path(&a).join("manifest.bin")).unwrap();
    let mb = fs::read(last_line_path(&b).join("manifest.bin")).unwrap();
    assert_eq!(ma, mb);
    let other = ok(&["prepare", "--config", c, "--seed", "7"]);
    assert_ne!(
        last_line_path(&other),
        last_line_path(&ok(&["prepare", "--config", c]))
    );
}

#[test]
fn train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_config(dir.path(), "");
    let c = conf.to_str().unwrap();
    let started = Instant::now();
    let out = ok(&["train", "--config", c]);
    assert!(started.elapsed().as_secs() < 60);
    let run_dir = last_line_path(&out);
    for f in [
        "best.ckpt",
        "last.ckpt",
        "train.log",
        "config.txt",
        "run.info",
    ] {
        assert!(run_dir.join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(run_dir.join("train.log")).unwrap();
    assert_eq!(log.lines().count(), 3, "{log}");

    let report = ok(&["eval", "--config", c]);
    let parsed = MetricReport::parse(&report).unwrap();
    assert_eq!(parsed.to_tsv(), report);
    assert!(parsed.recall(20).is_some() && parsed.recall(50).is_some());
    assert_eq!(
        fs::read_to_string(run_dir.join("best.test.tsv")).unwrap(),
        report
    );

    let export = dir.path().join("items.tsv");
    let grouped = MetricReport::parse(&ok(&[
        "eval",
        "--config",
        c,
        "--split",
        "val",
        "--groups",
        "--export",
        export.to_str().unwrap(),
    ]))
    .unwrap();
    let users = |g: &str| {
        grouped
            .rows
            .iter()
            .find(|r| r.group == g && r.metric == "recall" && r.n == 20)
            .unwrap()
            .n_users
    };
    assert_eq!(
        users("sparse") + users("normal") + users("popular"),
        users("all")
    );
    let groups: std::collections::BTreeSet<&str> =
        grouped.rows.iter().map(|r| r.group.as_str()).collect();
    assert_eq!(groups.len(), 4);
    assert!(fs::read_to_string(&export).unwrap().lines().count() > 10);
}

fn log_without_elapsed(run_dir: &Path) -> Vec<String> {
    fs::read_to_string(run_dir.join("train.log"))
        .unwrap()
        .lines()
        .map(|l| l.rsplit_once('\t').unwrap().0.to_string())
        .collect()
}

#[test]
fn resume_continues_interrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_config(dir.path(), "train.patience = 50\n");
    let c = conf.to_str().unwrap();
    let straight = last_line_path(&ok(&[
        "train",
        "--config",
        c,
        "--train.epochs",
        "3",
        "--output.dir",
        dir.path().join("a").to_str().unwrap(),
    ]));
    let out_b = dir.path().join("b");
    let b = out_b.to_str().unwrap();
    let first = last_line_path(&ok(&[
        "train",
        "--config",
        c,
        "--train.epochs",
        "2",
        "--output.dir",
        b,
    ]));
    let resumed = last_line_path(&ok(&[
        "train",
        "--config",
        c,
        "--train.epochs",
        "3",
        "--output.dir",
        b,
        "--resume",
    ]));
    assert_eq!(first, resumed);
    assert_eq!(
        log_without_elapsed(&straight),
        log_without_elapsed(&resumed)
    );
    for f in ["best.ckpt", "last.ckpt"] {
        assert_eq!(
            fs::read(straight.join(f)).unwrap(),
            fs::read(resumed.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn lambda_zero_matches_no_cl() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_config(dir.path(), "");
    let c = conf.to_str().unwrap();
    let a = last_line_path(&ok(&["train", "--config", c, "--loss.lambda", "0"]));
    let b = last_line_path(&ok(&["train", "--config", c, "--ablation.no_cl", "true"]));
    assert_ne!(a, b);
    assert_eq!(log_without_elapsed(&a), log_without_elapsed(&b));
    assert_eq!(
        fs::read(a.join("best.ckpt")).unwrap(),
        fs::read(b.join("best.ckpt")).unwrap()
    );
}

#[test]
fn ablate_writes_one_row_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_config(dir.path(), "");
    let c = conf.to_str().unwrap();
    let table = ok(&["ablate", "--config", c, "--variants", "full,no_cl"]);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 3, "{table}");
    assert!(lines[0].starts_with("variant\trecall@20"));
    assert!(lines[1].starts_with("full\t") && lines[2].starts_with("no_cl\t"));
    assert_eq!(
        run(&["ablate", "--config", c, "--variants", "full,no_such"]).code,
        exit::USAGE
    );
}

#[test]
fn geometry_curves_and_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_config(dir.path(), "");
    let c = conf.to_str().unwrap();
    let run_dir = last_line_path(&ok(&["train", "--config", c]));
    let best = run_dir.join("best.ckpt");
    let copy = dir.path().join("copy.ckpt");
    fs::copy(&best, &copy).unwrap();
    let out = ok(&[
        "geometry",
        "--config",
        c,
        "--compare",
        copy.to_str().unwrap(),
    ]);
    assert_eq!(out.lines().count(), 2);
    let a = fs::read_to_string(run_dir.join("best.density.tsv")).unwrap();
    let b = fs::read_to_string(dir.path().join("copy.density.tsv")).unwrap();
    assert_eq!(a, b);
    assert!(a.starts_with("angle_rad\tdensity\n") && a.contains("# concentration"));

    let wide = last_line_path(&ok(&["train", "--config", c, "--model.d", "12"]));
    let o = run(&[
        "geometry",
        "--config",
        c,
        "--compare",
        wide.join("best.ckpt").to_str().unwrap(),
    ]);
    assert_eq!(o.code, exit::USAGE, "{}", o.stderr);
    let o = run(&[
        "eval",
        "--config",
        c,
        "--checkpoint",
        wide.join("best.ckpt").to_str().unwrap(),
    ]);
    assert_eq!(o.code, exit::USAGE, "{}", o.stderr);
    assert!(o.stderr.contains("does not match"));
}
